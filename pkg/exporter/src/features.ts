/** Pack externally computed per-window model outputs into the replay format.
 *
 * Input: JSONL with a header line {"d": ..., "K": ...} followed by one
 * {"start_s": ..., "logits": [...], "features": [...]} object per window, in
 * segmentation order.  Output: the engine's replay binary (one JSON header
 * line, then packed little-endian float32 [logits || features] records).
 */

import { promises as fs } from 'node:fs'

import { expectedFrameCount } from './segment.js'
import type { FeatureFileHeader } from './types.js'

export class FeatureExportError extends Error {}

export interface FeatureDump {
  d: number
  K: number
  records: { start_s: number; logits: number[]; features: number[] }[]
}

export function parseFeatureDump(text: string): FeatureDump {
  const lines = text.split('\n').filter((l) => l.trim().length > 0)
  if (lines.length === 0) throw new FeatureExportError('empty feature dump')
  let header: { d: number; K: number }
  try {
    header = JSON.parse(lines[0])
  } catch (err) {
    throw new FeatureExportError(`unparseable dump header: ${(err as Error).message}`)
  }
  if (!Number.isInteger(header.d) || !Number.isInteger(header.K)) {
    throw new FeatureExportError('dump header must declare integer d and K')
  }
  const records = lines.slice(1).map((line, i) => {
    const rec = JSON.parse(line)
    if (!Array.isArray(rec.logits) || rec.logits.length !== header.K) {
      throw new FeatureExportError(`record ${i}: expected ${header.K} logits`)
    }
    if (!Array.isArray(rec.features) || rec.features.length !== header.d) {
      throw new FeatureExportError(`record ${i}: expected ${header.d} features`)
    }
    return rec as FeatureDump['records'][number]
  })
  return { d: header.d, K: header.K, records }
}

export function packReplayFile(dump: FeatureDump): Buffer {
  const header: FeatureFileHeader = {
    format: 'oodgate-features-v1',
    d: dump.d,
    K: dump.K,
    frame_count: dump.records.length,
  }
  const headerBuf = Buffer.from(JSON.stringify(header) + '\n', 'utf-8')
  const recLen = (dump.d + dump.K) * 4
  const body = Buffer.alloc(recLen * dump.records.length)
  dump.records.forEach((rec, i) => {
    let offset = i * recLen
    for (const v of [...rec.logits, ...rec.features]) {
      if (!Number.isFinite(v)) {
        throw new FeatureExportError(`non-finite value in record ${i}`)
      }
      body.writeFloatLE(Math.fround(v), offset)
      offset += 4
    }
  })
  return Buffer.concat([headerBuf, body])
}

export interface FeatureExportOptions {
  /** Recording length in samples; enables the frame-count cross-check. */
  nSamples: number
  rate: number
  windowLenS?: number
  hopS?: number
}

export async function exportFeatures(
  dumpPath: string,
  outPath: string,
  options: FeatureExportOptions,
): Promise<FeatureFileHeader> {
  const dump = parseFeatureDump(await fs.readFile(dumpPath, 'utf-8'))
  const expected = expectedFrameCount(
    options.nSamples,
    options.rate,
    options.windowLenS ?? 2.0,
    options.hopS ?? 0.125,
  )
  if (dump.records.length !== expected) {
    throw new FeatureExportError(
      `refusing to write: dump has ${dump.records.length} frames but segmentation of ` +
        `${options.nSamples} samples at ${options.rate} Hz yields ${expected}`,
    )
  }
  await fs.writeFile(outPath, packReplayFile(dump))
  return {
    format: 'oodgate-features-v1',
    d: dump.d,
    K: dump.K,
    frame_count: dump.records.length,
  }
}
