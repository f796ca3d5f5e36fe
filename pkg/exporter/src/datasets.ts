/** Conversion profiles for the supported public motor-imagery recordings.
 *
 * Both corpora are consumed as EDF+ (the archives ship as GDF / MATLAB / CNT;
 * standard converters produce EDF+ with the cue annotations preserved).  A
 * profile pins the expected geometry, the cue-code vocabulary, and the
 * train/test session split.
 */

import type { ClassRole } from './types.js'

export interface SessionFile {
  /** Source file name, e.g. A01T.edf */
  file: string
  split: 'train' | 'test'
  sessionId: string
}

export interface DatasetProfile {
  name: string
  channels: number
  rate: number
  /** Imagery period per cue, used when annotations carry no duration. */
  trialDurationS: number
  /** Annotation text -> canonical class name (cue codes and plain names). */
  eventMap: Record<string, string>
  classMap: Record<string, ClassRole>
  /** Trials per subject-session expected in the source archive. */
  trialsPerSession: number
  /** Recognize one subject's session files: returns subject + session role. */
  parseFileName(file: string): { subjectId: string; split: 'train' | 'test'; sessionId: string } | null
}

const HAND_CLASSES: Record<string, ClassRole> = {
  left_hand: { role: 'id', index: 0 },
  right_hand: { role: 'id', index: 1 },
}

export const BNCI2014001: DatasetProfile = {
  name: 'bnci2014001',
  channels: 22,
  rate: 250,
  trialDurationS: 4,
  trialsPerSession: 144,
  eventMap: {
    '769': 'left_hand',
    '770': 'right_hand',
    '771': 'feet',
    '772': 'tongue',
    left_hand: 'left_hand',
    right_hand: 'right_hand',
    feet: 'feet',
    tongue: 'tongue',
  },
  classMap: {
    ...HAND_CLASSES,
    feet: { role: 'ood' },
    tongue: { role: 'ood' },
  },
  // session 1 (…T) trains, session 2 (…E) tests
  parseFileName(file: string) {
    const m = /^(A\d{2})([TE])\.edf$/i.exec(file)
    if (!m) return null
    const train = m[2].toUpperCase() === 'T'
    return { subjectId: m[1].toUpperCase(), split: train ? 'train' : 'test', sessionId: train ? '1' : '2' }
  },
}

export const ZHOU2016: DatasetProfile = {
  name: 'zhou2016',
  channels: 14,
  rate: 250,
  trialDurationS: 5,
  trialsPerSession: 150,
  eventMap: {
    '769': 'left_hand',
    '770': 'right_hand',
    '771': 'feet',
    left_hand: 'left_hand',
    right_hand: 'right_hand',
    feet: 'feet',
  },
  classMap: {
    ...HAND_CLASSES,
    feet: { role: 'ood' },
  },
  // first two sessions train, the third tests
  parseFileName(file: string) {
    const m = /^(S\d+)_([123])\.edf$/i.exec(file)
    if (!m) return null
    return {
      subjectId: m[1].toUpperCase(),
      split: m[2] === '3' ? 'test' : 'train',
      sessionId: m[2],
    }
  },
}

export const PROFILES: Record<string, DatasetProfile> = {
  bnci2014001: BNCI2014001,
  zhou2016: ZHOU2016,
}
