/** Cross-language checks: the decision engine (Python) must load what this
 * exporter writes, byte for byte and frame for frame. Skipped when python3
 * or the engine package is unavailable. */

import { execFileSync } from 'node:child_process'
import { promises as fs } from 'node:fs'
import os from 'node:os'
import path from 'node:path'

import { beforeAll, describe, expect, it } from 'vitest'

import { BNCI2014001 } from '../src/datasets.js'
import { exportDataset } from '../src/exportDataset.js'
import { exportFeatures } from '../src/features.js'
import { expectedFrameCount } from '../src/segment.js'
import { buildMiFixture } from './edf-fixture.js'

function python(code: string): string {
  return execFileSync('python3', ['-c', code], { encoding: 'utf-8' }).trim()
}

function engineAvailable(): boolean {
  try {
    python('import oodgate')
    return true
  } catch {
    return false
  }
}

const available = engineAvailable()

describe.skipIf(!available)('engine interoperability', () => {
  let outDir: string
  let nSamples: number

  beforeAll(async () => {
    const workdir = await fs.mkdtemp(path.join(os.tmpdir(), 'interop-'))
    const input = path.join(workdir, 'in')
    await fs.mkdir(input, { recursive: true })
    for (const session of ['T', 'E'] as const) {
      const fixture = buildMiFixture({
        nEeg: 22,
        rate: 250,
        cueCodes: ['769', '770', '771', '772'],
        nTrials: 24,
        trialDurationS: 4,
        gapS: 0.5,
        seed: session === 'T' ? 61 : 62,
        extraChannels: ['EOG left'],
      })
      await fs.writeFile(path.join(input, `A01${session}.edf`), fixture.buffer)
      if (session === 'T') nSamples = fixture.nSamples
    }
    outDir = path.join(workdir, 'out')
    await exportDataset(BNCI2014001, input, outDir)
  }, 120_000)

  it('loads sessions with matching geometry and labels', () => {
    const manifestPath = path.join(outDir, 'bnci2014001', 'A01', 'session_1.json')
    const result = python(
      [
        'import json',
        'from oodgate.stream_io import load_session, StateKind',
        `manifest, signal = load_session(${JSON.stringify(manifestPath)})`,
        'print(json.dumps({',
        '  "channels": signal.shape[0],',
        '  "samples": signal.shape[1],',
        '  "events": len(manifest.events),',
        '  "rate": manifest.sampling_rate,',
        '  "id_classes": manifest.n_id_classes,',
        '}))',
      ].join('\n'),
    )
    const info = JSON.parse(result)
    expect(info.channels).toBe(22)
    expect(info.samples).toBe(nSamples)
    expect(info.events).toBe(24)
    expect(info.rate).toBe(250)
    expect(info.id_classes).toBe(2)
  })

  it('frame counts agree with the engine segmentation', () => {
    const manifestPath = path.join(outDir, 'bnci2014001', 'A01', 'session_1.json')
    const engineCount = Number(
      python(
        [
          'from oodgate.stream_io import load_session, expected_frame_count',
          `manifest, signal = load_session(${JSON.stringify(manifestPath)})`,
          'print(expected_frame_count(signal.shape[1], manifest.sampling_rate))',
        ].join('\n'),
      ),
    )
    expect(engineCount).toBe(expectedFrameCount(nSamples, 250))
  })

  it('replay feature files round-trip through the engine reader', async () => {
    const count = expectedFrameCount(nSamples, 250)
    const lines = [JSON.stringify({ d: 4, K: 2 })]
    for (let i = 0; i < count; i++) {
      lines.push(
        JSON.stringify({
          start_s: i * 0.125,
          logits: [i * 0.5, -i * 0.5],
          features: [i, i + 0.25, i + 0.5, i + 0.75],
        }),
      )
    }
    const dumpPath = path.join(outDir, 'dump.jsonl')
    const replayPath = path.join(outDir, 'bnci2014001', 'A01', 'session_1.features.bin')
    await fs.writeFile(dumpPath, lines.join('\n'))
    await exportFeatures(dumpPath, replayPath, { nSamples, rate: 250 })

    const manifestPath = path.join(outDir, 'bnci2014001', 'A01', 'session_1.json')
    const result = python(
      [
        'import json',
        'from oodgate.stream_io import load_manifest, load_session',
        'from oodgate.backbone import replay_provider',
        `manifest, signal = load_session(${JSON.stringify(manifestPath)})`,
        `frames = list(replay_provider(${JSON.stringify(replayPath)}, manifest, n_samples=signal.shape[1]))`,
        'probe = frames[10]',
        'print(json.dumps({',
        '  "count": len(frames),',
        '  "logits": list(probe.logits),',
        '  "features": list(probe.features),',
        '}))',
      ].join('\n'),
    )
    const info = JSON.parse(result)
    expect(info.count).toBe(count)
    expect(info.logits).toEqual([5, -5])
    expect(info.features).toEqual([10, 10.25, 10.5, 10.75])
  })
})

describe.skipIf(available)('engine interoperability (unavailable)', () => {
  it('skips: python3 with the engine package is not installed', () => {
    expect(available).toBe(false)
  })
})
