#!/usr/bin/env node
/** Command-line entry: dataset conversion and feature repacking. */

import { promises as fs } from 'node:fs'
import path from 'node:path'

import yargs from 'yargs'
import { hideBin } from 'yargs/helpers'

import { PROFILES } from './datasets.js'
import { exportDataset } from './exportDataset.js'
import { exportFeatures } from './features.js'

async function main(): Promise<number> {
  const argv = yargs(hideBin(process.argv))
    .scriptName('oodgate-export')
    .command(
      'export',
      'convert EDF+ recordings of a public dataset into manifests + raw f32 + index',
      (y) =>
        y
          .option('dataset', {
            choices: Object.keys(PROFILES),
            demandOption: true,
            describe: 'dataset profile to apply',
          })
          .option('input', { type: 'string', demandOption: true, describe: 'directory of EDF+ files' })
          .option('out', { type: 'string', demandOption: true, describe: 'output dataset root' })
          .option('features', {
            type: 'string',
            describe:
              'directory of per-session JSONL model-output dumps (<source>.jsonl) to pack ' +
              'into replay files and register in the index',
          }),
    )
    .command(
      'export-features',
      'pack a JSONL dump of per-window logits+features into the replay format',
      (y) =>
        y
          .option('dump', { type: 'string', demandOption: true, describe: 'JSONL feature dump' })
          .option('out', { type: 'string', demandOption: true, describe: 'replay file to write' })
          .option('raw', { type: 'string', demandOption: true, describe: 'the session .f32 file' })
          .option('channels', { type: 'number', demandOption: true })
          .option('rate', { type: 'number', demandOption: true })
          .option('window-len', { type: 'number', default: 2.0 })
          .option('hop', { type: 'number', default: 0.125 }),
    )
    .demandCommand(1)
    .strict()
    .help()
    .parseSync()

  const command = argv._[0]
  if (command === 'export') {
    const profile = PROFILES[argv.dataset as string]
    const result = await exportDataset(
      profile,
      argv.input as string,
      argv.out as string,
      argv.features as string | undefined,
    )
    console.log(
      JSON.stringify(
        {
          index: result.indexPath,
          sessions: result.sessions.map((s) => ({
            subject: s.subjectId,
            session: s.sessionId,
            split: s.split,
            events: s.eventCount,
            samples: s.sampleCount,
          })),
        },
        null,
        2,
      ),
    )
    return 0
  }
  if (command === 'export-features') {
    const rawBytes = (await fs.stat(path.resolve(argv.raw as string))).size
    const channels = argv.channels as number
    if (rawBytes % (4 * channels) !== 0) {
      throw new Error(`${argv.raw} is not a whole number of ${channels}-channel f32 frames`)
    }
    const header = await exportFeatures(argv.dump as string, argv.out as string, {
      nSamples: rawBytes / (4 * channels),
      rate: argv.rate as number,
      windowLenS: argv['window-len'] as number,
      hopS: argv.hop as number,
    })
    console.log(JSON.stringify(header, null, 2))
    return 0
  }
  throw new Error(`unknown command ${command}`)
}

main()
  .then((code) => process.exit(code))
  .catch((err) => {
    console.error(JSON.stringify({ error: { type: err.constructor.name, message: err.message } }))
    process.exit(1)
  })
