/** EDF+ recordings -> per-session manifest + raw f32 files + dataset index. */

import { promises as fs } from 'node:fs'
import path from 'node:path'

import { decodeEdf, signalRate, type EdfRecording } from './edf.js'
import { packRawSignal, writeIndex, writeManifest } from './manifest.js'
import type { DatasetProfile } from './datasets.js'
import type { DatasetIndex, ManifestEvent, SessionManifest } from './types.js'

export class ExportError extends Error {}

const NON_EEG = /annotations|eog|emg|ecg|ekg|status|stim|marker/i

export interface ExportedSession {
  subjectId: string
  split: 'train' | 'test'
  sessionId: string
  manifestPath: string
  eventCount: number
  sampleCount: number
}

export interface ExportResult {
  indexPath: string
  sessions: ExportedSession[]
}

interface ConvertedSession {
  manifest: Omit<SessionManifest, 'data_path'>
  raw: Buffer
  nSamples: number
}

/** Pick EEG channels, canonicalize order alphabetically, scale to physical units. */
export function convertRecording(
  recording: EdfRecording,
  profile: DatasetProfile,
  subjectId: string,
): ConvertedSession {
  const { header } = recording
  const eeg: { label: string; index: number }[] = []
  header.signals.forEach((s, index) => {
    if (!NON_EEG.test(s.label)) {
      eeg.push({ label: s.label.replace(/^EEG[ :]*/i, '').trim() || s.label, index })
    }
  })
  if (eeg.length !== profile.channels) {
    throw new ExportError(
      `${profile.name}: expected ${profile.channels} EEG channels, found ${eeg.length} ` +
        `(${eeg.map((e) => e.label).join(', ')})`,
    )
  }
  eeg.sort((a, b) => (a.label < b.label ? -1 : a.label > b.label ? 1 : 0))

  const rates = new Set(eeg.map((e) => signalRate(header, e.index)))
  if (rates.size !== 1) {
    throw new ExportError(`${profile.name}: mixed EEG sampling rates ${[...rates].join('/')}`)
  }
  const rate = [...rates][0]
  if (rate !== profile.rate) {
    throw new ExportError(`${profile.name}: expected ${profile.rate} Hz, file has ${rate} Hz`)
  }

  const channels = eeg.map((e) => recording.signals.get(e.index)!)
  const nSamples = channels[0].length

  const events: ManifestEvent[] = []
  for (const ann of recording.annotations) {
    const className = profile.eventMap[ann.text.trim()]
    if (!className) continue // trial starts, rejects and other markers carry no class
    events.push({
      onset_s: ann.onsetS,
      duration_s: ann.durationS > 0 ? ann.durationS : profile.trialDurationS,
      class_name: className,
    })
  }
  events.sort((a, b) => a.onset_s - b.onset_s)
  for (let i = 1; i < events.length; i++) {
    const prev = events[i - 1]
    if (events[i].onset_s < prev.onset_s + prev.duration_s) {
      throw new ExportError(
        `${profile.name}: overlapping cue events at ${prev.onset_s}s and ${events[i].onset_s}s`,
      )
    }
  }

  return {
    manifest: {
      format: 'oodgate-manifest-v1',
      subject_id: subjectId,
      channel_count: profile.channels,
      sampling_rate: rate,
      events,
      class_map: profile.classMap,
      channel_names: eeg.map((e) => e.label),
    },
    raw: packRawSignal(channels),
    nSamples,
  }
}

export async function exportDataset(
  profile: DatasetProfile,
  inputDir: string,
  outDir: string,
  featuresDir?: string,
): Promise<ExportResult> {
  let names: string[]
  try {
    names = await fs.readdir(inputDir)
  } catch (err) {
    throw new ExportError(`cannot read input directory ${inputDir}: ${(err as Error).message}`)
  }
  const matched = names
    .map((file) => ({ file, parsed: profile.parseFileName(file) }))
    .filter((x): x is { file: string; parsed: NonNullable<ReturnType<DatasetProfile['parseFileName']>> } =>
      x.parsed !== null,
    )
    .sort((a, b) => (a.file < b.file ? -1 : 1))
  if (matched.length === 0) {
    throw new ExportError(`no ${profile.name} session files found under ${inputDir}`)
  }

  const datasetDir = path.join(outDir, profile.name)
  const subjects = new Map<string, { train: string[]; test: string[]; features: Record<string, string> }>()
  const sessions: ExportedSession[] = []

  for (const { file, parsed } of matched) {
    const recording = decodeEdf(await fs.readFile(path.join(inputDir, file)))
    const converted = convertRecording(recording, profile, parsed.subjectId)
    const base = `session_${parsed.sessionId}`
    const relManifest = `${parsed.subjectId}/${base}.json`
    const rawName = `${base}.f32`

    await fs.mkdir(path.join(datasetDir, parsed.subjectId), { recursive: true })
    await fs.writeFile(path.join(datasetDir, parsed.subjectId, rawName), converted.raw)
    await writeManifest(
      { ...converted.manifest, data_path: rawName },
      path.join(datasetDir, relManifest),
    )

    const entry = subjects.get(parsed.subjectId) ?? { train: [], test: [], features: {} }
    entry[parsed.split].push(relManifest)

    if (featuresDir !== undefined) {
      // a dump named after the source file carries this session's model outputs
      const dumpPath = path.join(featuresDir, file.replace(/\.edf$/i, '.jsonl'))
      let hasDump = true
      try {
        await fs.access(dumpPath)
      } catch {
        hasDump = false
      }
      if (hasDump) {
        const relReplay = `${parsed.subjectId}/${base}.features.bin`
        const { exportFeatures } = await import('./features.js')
        await exportFeatures(dumpPath, path.join(datasetDir, relReplay), {
          nSamples: converted.nSamples,
          rate: converted.manifest.sampling_rate,
        })
        entry.features[relManifest] = relReplay
      }
    }
    subjects.set(parsed.subjectId, entry)
    sessions.push({
      subjectId: parsed.subjectId,
      split: parsed.split,
      sessionId: parsed.sessionId,
      manifestPath: path.join(datasetDir, relManifest),
      eventCount: converted.manifest.events.length,
      sampleCount: converted.nSamples,
    })
  }

  const index: DatasetIndex = {
    format: 'oodgate-index-v1',
    dataset: profile.name,
    subjects: [...subjects.entries()]
      .sort(([a], [b]) => (a < b ? -1 : 1))
      .map(([subject_id, entry]) => ({
        subject_id,
        train: entry.train,
        test: entry.test,
        ...(Object.keys(entry.features).length ? { features: entry.features } : {}),
      })),
  }
  const indexPath = path.join(datasetDir, 'index.json')
  await writeIndex(index, indexPath)
  return { indexPath, sessions }
}
