/**
 * Minimal EDF/EDF+ decoder: fixed-layout ASCII headers, 16-bit sample records,
 * and time-stamped annotation lists from "EDF Annotations" signals.
 *
 * Only the features needed for dataset conversion are implemented: continuous
 * recordings (EDF+C), per-signal physical scaling, and annotation extraction.
 */

export interface EdfSignalHeader {
  label: string
  transducer: string
  physicalDimension: string
  physicalMin: number
  physicalMax: number
  digitalMin: number
  digitalMax: number
  prefiltering: string
  samplesPerRecord: number
}

export interface EdfHeader {
  version: string
  patientId: string
  recordingId: string
  startDate: string
  startTime: string
  headerBytes: number
  reserved: string
  recordCount: number
  recordDurationS: number
  signalCount: number
  signals: EdfSignalHeader[]
}

export interface EdfAnnotation {
  onsetS: number
  durationS: number
  text: string
}

export interface EdfRecording {
  header: EdfHeader
  /** Physical (scaled) samples per ordinary signal, keyed by signal index. */
  signals: Map<number, Float64Array>
  annotations: EdfAnnotation[]
}

const ANNOTATION_LABEL = 'EDF Annotations'

export class EdfError extends Error {}

function ascii(buf: Buffer, start: number, length: number): string {
  return buf.subarray(start, start + length).toString('ascii').trim()
}

function numeric(buf: Buffer, start: number, length: number, what: string): number {
  const text = ascii(buf, start, length)
  const value = Number(text)
  if (!Number.isFinite(value)) {
    throw new EdfError(`unparseable ${what}: ${JSON.stringify(text)}`)
  }
  return value
}

export function parseHeader(buf: Buffer): EdfHeader {
  if (buf.length < 256) {
    throw new EdfError(`file too short for an EDF header (${buf.length} bytes)`)
  }
  const signalCount = numeric(buf, 252, 4, 'signal count')
  if (signalCount < 1 || buf.length < 256 + signalCount * 256) {
    throw new EdfError(`header truncated: ${signalCount} signals declared`)
  }
  // signal headers are field-major: all labels, then all transducers, ...
  const field = (index: number, offset: number, width: number) =>
    ascii(buf, 256 + offset * signalCount + index * width, width)
  const fieldNum = (index: number, offset: number, width: number, what: string) => {
    const text = field(index, offset, width)
    const value = Number(text)
    if (!Number.isFinite(value)) throw new EdfError(`unparseable ${what}: ${JSON.stringify(text)}`)
    return value
  }
  // cumulative byte offsets of the field blocks: 16,80,8,8,8,8,8,80,8,32
  const widths = [16, 80, 8, 8, 8, 8, 8, 80, 8, 32]
  const starts: number[] = []
  let acc = 0
  for (const w of widths) {
    starts.push(acc)
    acc += w
  }
  const signals: EdfSignalHeader[] = []
  for (let i = 0; i < signalCount; i++) {
    const at = (f: number) => 256 + starts[f] * signalCount + i * widths[f]
    signals.push({
      label: ascii(buf, at(0), 16),
      transducer: ascii(buf, at(1), 80),
      physicalDimension: ascii(buf, at(2), 8),
      physicalMin: numeric(buf, at(3), 8, 'physical min'),
      physicalMax: numeric(buf, at(4), 8, 'physical max'),
      digitalMin: numeric(buf, at(5), 8, 'digital min'),
      digitalMax: numeric(buf, at(6), 8, 'digital max'),
      prefiltering: ascii(buf, at(7), 80),
      samplesPerRecord: numeric(buf, at(8), 8, 'samples per record'),
    })
  }
  return {
    version: ascii(buf, 0, 8),
    patientId: ascii(buf, 8, 80),
    recordingId: ascii(buf, 88, 80),
    startDate: ascii(buf, 168, 8),
    startTime: ascii(buf, 176, 8),
    headerBytes: numeric(buf, 184, 8, 'header byte count'),
    reserved: ascii(buf, 192, 44),
    recordCount: numeric(buf, 236, 8, 'record count'),
    recordDurationS: numeric(buf, 244, 8, 'record duration'),
    signalCount,
    signals,
  }
}

/** Parse one record's worth of TAL (time-stamped annotation list) bytes. */
export function parseTals(bytes: Buffer): EdfAnnotation[] {
  const out: EdfAnnotation[] = []
  const text = bytes.toString('latin1')
  for (const tal of text.split('\x00')) {
    if (!tal) continue
    const marks = tal.split('\x14')
    if (marks.length < 2) continue
    let onsetPart = marks[0]
    let duration = 0
    const durIdx = onsetPart.indexOf('\x15')
    if (durIdx >= 0) {
      duration = Number(onsetPart.slice(durIdx + 1))
      onsetPart = onsetPart.slice(0, durIdx)
    }
    const onset = Number(onsetPart)
    if (!Number.isFinite(onset)) continue
    for (const note of marks.slice(1)) {
      if (note.length === 0) continue // the bare timestamp TAL has empty text
      out.push({ onsetS: onset, durationS: Number.isFinite(duration) ? duration : 0, text: note })
    }
  }
  return out
}

export function decodeEdf(buf: Buffer): EdfRecording {
  const header = parseHeader(buf)
  const { recordCount, signals } = header
  const recordShorts = signals.reduce((acc, s) => acc + s.samplesPerRecord, 0)
  const expected = header.headerBytes + recordCount * recordShorts * 2
  if (buf.length < expected) {
    throw new EdfError(`data truncated: expected ${expected} bytes, file has ${buf.length}`)
  }

  const ordinary = signals
    .map((s, i) => ({ s, i }))
    .filter(({ s }) => s.label !== ANNOTATION_LABEL)
  const out = new Map<number, Float64Array>()
  for (const { s, i } of ordinary) {
    out.set(i, new Float64Array(recordCount * s.samplesPerRecord))
  }
  const annotations: EdfAnnotation[] = []

  let offset = header.headerBytes
  for (let rec = 0; rec < recordCount; rec++) {
    for (let i = 0; i < signals.length; i++) {
      const s = signals[i]
      const nbytes = s.samplesPerRecord * 2
      if (s.label === ANNOTATION_LABEL) {
        annotations.push(...parseTals(buf.subarray(offset, offset + nbytes)))
      } else {
        const gain = (s.physicalMax - s.physicalMin) / (s.digitalMax - s.digitalMin)
        const target = out.get(i)!
        const base = rec * s.samplesPerRecord
        for (let j = 0; j < s.samplesPerRecord; j++) {
          const digital = buf.readInt16LE(offset + 2 * j)
          target[base + j] = (digital - s.digitalMin) * gain + s.physicalMin
        }
      }
      offset += nbytes
    }
  }
  annotations.sort((a, b) => a.onsetS - b.onsetS)
  return { header, signals: out, annotations }
}

/** Sampling rate of an ordinary signal, from its per-record sample count. */
export function signalRate(header: EdfHeader, signalIndex: number): number {
  return header.signals[signalIndex].samplesPerRecord / header.recordDurationS
}
