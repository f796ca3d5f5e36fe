/** Writers for the engine's on-disk dataset formats. */

import { promises as fs } from 'node:fs'
import path from 'node:path'

import type { DatasetIndex, SessionManifest } from './types.js'

/** Channel-major little-endian float32 block, one row per channel. */
export function packRawSignal(channels: Float64Array[]): Buffer {
  if (channels.length === 0) return Buffer.alloc(0)
  const n = channels[0].length
  for (const ch of channels) {
    if (ch.length !== n) throw new Error('ragged channel lengths cannot be packed')
  }
  const buf = Buffer.alloc(channels.length * n * 4)
  let offset = 0
  for (const ch of channels) {
    for (let i = 0; i < n; i++) {
      const v = Math.fround(ch[i])
      if (!Number.isFinite(v)) throw new Error(`non-finite sample at channel offset ${i}`)
      buf.writeFloatLE(v, offset)
      offset += 4
    }
  }
  return buf
}

export function readRawSignal(buf: Buffer, channelCount: number): Float64Array[] {
  if (buf.length % (4 * channelCount) !== 0) {
    throw new Error(`raw block of ${buf.length} bytes does not divide into ${channelCount} channels`)
  }
  const n = buf.length / (4 * channelCount)
  const out: Float64Array[] = []
  for (let c = 0; c < channelCount; c++) {
    const row = new Float64Array(n)
    for (let i = 0; i < n; i++) row[i] = buf.readFloatLE((c * n + i) * 4)
    out.push(row)
  }
  return out
}

export async function writeManifest(manifest: SessionManifest, dest: string): Promise<void> {
  await fs.mkdir(path.dirname(dest), { recursive: true })
  await fs.writeFile(dest, JSON.stringify(manifest, null, 2) + '\n', 'utf-8')
}

export async function writeIndex(index: DatasetIndex, dest: string): Promise<void> {
  await fs.mkdir(path.dirname(dest), { recursive: true })
  await fs.writeFile(dest, JSON.stringify(index, null, 2) + '\n', 'utf-8')
}
