/**
 * Magnitude masks with the engine's exact arithmetic: pruned counts round
 * half to even, and the pruning order is ascending |value| with ties broken
 * by flat index. Weight values arrive as float32 (exact in doubles), so the
 * ordering here is bit-identical to the engine's.
 */

export function roundHalfEven(x: number): number {
  const floor = Math.floor(x);
  const frac = x - floor;
  if (frac < 0.5) return floor;
  if (frac > 0.5) return floor + 1;
  return floor % 2 === 0 ? floor : floor + 1;
}

export function sparsityToCount(sparsity: number, parameterCount: number): number {
  if (!(sparsity >= 0 && sparsity <= 1)) {
    throw new Error(`sparsity ${sparsity} outside [0, 1]`);
  }
  return roundHalfEven(sparsity * parameterCount);
}

/** Indices sorted by (|value|, index) ascending; prefix = pruning order. */
export function magnitudeOrder(values: ArrayLike<number>): Int32Array {
  const n = values.length;
  const order = new Int32Array(n);
  for (let i = 0; i < n; i++) order[i] = i;
  const abs = new Float64Array(n);
  for (let i = 0; i < n; i++) abs[i] = Math.abs(values[i]);
  return order.sort((a, b) => (abs[a] - abs[b]) || (a - b));
}

/** Kept bitmap (1 = active) pruning the `prunedCount` smallest magnitudes. */
export function magnitudeKept(values: ArrayLike<number>, prunedCount: number): Uint8Array {
  const n = values.length;
  if (prunedCount < 0 || prunedCount > n) {
    throw new Error(`pruned count ${prunedCount} out of range for ${n} weights`);
  }
  const kept = new Uint8Array(n).fill(1);
  const order = magnitudeOrder(values);
  for (let i = 0; i < prunedCount; i++) kept[order[i]] = 0;
  return kept;
}
