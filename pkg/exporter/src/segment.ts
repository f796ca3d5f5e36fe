/**
 * Sliding-window arithmetic mirroring the engine's segmentation exactly, so
 * exported feature files carry the frame count the engine will demand.
 */

export function windowSampleCount(windowLenS: number, rate: number): number {
  const n = windowLenS * rate
  if (Math.abs(n - Math.round(n)) > 1e-9) {
    throw new Error(`window length ${windowLenS}s is not an integer number of samples at ${rate} Hz`)
  }
  return Math.round(n)
}

/** Frame start sample indices at nominal times k * hop, snapped to the nearest sample. */
export function frameStartIndices(
  nSamples: number,
  rate: number,
  windowLenS = 2.0,
  hopS = 0.125,
): number[] {
  if (hopS <= 0) throw new Error(`hop must be positive, got ${hopS}`)
  const winN = windowSampleCount(windowLenS, rate)
  const starts: number[] = []
  for (let k = 0; ; k++) {
    const idx = Math.floor(k * hopS * rate + 0.5)
    if (idx + winN > nSamples) break
    starts.push(idx)
  }
  return starts
}

export function expectedFrameCount(
  nSamples: number,
  rate: number,
  windowLenS = 2.0,
  hopS = 0.125,
): number {
  return frameStartIndices(nSamples, rate, windowLenS, hopS).length
}
