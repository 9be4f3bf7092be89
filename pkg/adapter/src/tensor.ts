/**
 * Minimal NCHW tensor ops: conv2d, dense, relu, 2x2 max-pool, flatten,
 * softmax cross-entropy. Dot products accumulate in doubles and round to
 * float32 on store (Math.fround), mirroring the engine's numerics; max-pool
 * ties resolve to the first element in row-major window order.
 */

export interface PlaneDims {
  c: number;
  h: number;
  w: number;
}

export function conv2dForward(
  x: Float32Array, dims: PlaneDims,
  weight: Float32Array, outC: number, kh: number, kw: number,
  bias: Float32Array | null, stride: number, padding: number,
): { out: Float32Array; dims: PlaneDims } {
  const { c, h, w } = dims;
  const oh = Math.floor((h + 2 * padding - kh) / stride) + 1;
  const ow = Math.floor((w + 2 * padding - kw) / stride) + 1;
  const out = new Float32Array(outC * oh * ow);
  for (let o = 0; o < outC; o++) {
    const wBase = o * c * kh * kw;
    for (let oy = 0; oy < oh; oy++) {
      for (let ox = 0; ox < ow; ox++) {
        let acc = bias ? bias[o] : 0;
        for (let ci = 0; ci < c; ci++) {
          for (let ky = 0; ky < kh; ky++) {
            const iy = oy * stride + ky - padding;
            if (iy < 0 || iy >= h) continue;
            for (let kx = 0; kx < kw; kx++) {
              const ix = ox * stride + kx - padding;
              if (ix < 0 || ix >= w) continue;
              acc += weight[wBase + (ci * kh + ky) * kw + kx] * x[(ci * h + iy) * w + ix];
            }
          }
        }
        out[(o * oh + oy) * ow + ox] = Math.fround(acc);
      }
    }
  }
  return { out, dims: { c: outC, h: oh, w: ow } };
}

export function conv2dBackward(
  dOut: Float64Array, x: Float32Array, dims: PlaneDims,
  weight: Float32Array, outC: number, kh: number, kw: number,
  stride: number, padding: number, oh: number, ow: number,
  dWeight: Float64Array, dBias: Float64Array | null,
): Float64Array {
  const { c, h, w } = dims;
  const dx = new Float64Array(c * h * w);
  for (let o = 0; o < outC; o++) {
    const wBase = o * c * kh * kw;
    for (let oy = 0; oy < oh; oy++) {
      for (let ox = 0; ox < ow; ox++) {
        const g = dOut[(o * oh + oy) * ow + ox];
        if (g === 0) continue;
        if (dBias) dBias[o] += g;
        for (let ci = 0; ci < c; ci++) {
          for (let ky = 0; ky < kh; ky++) {
            const iy = oy * stride + ky - padding;
            if (iy < 0 || iy >= h) continue;
            for (let kx = 0; kx < kw; kx++) {
              const ix = ox * stride + kx - padding;
              if (ix < 0 || ix >= w) continue;
              const wi = wBase + (ci * kh + ky) * kw + kx;
              const xi = (ci * h + iy) * w + ix;
              dWeight[wi] += g * x[xi];
              dx[xi] += g * weight[wi];
            }
          }
        }
      }
    }
  }
  return dx;
}

export function denseForward(
  x: Float32Array, weight: Float32Array, outN: number, inN: number,
  bias: Float32Array | null,
): Float32Array {
  const out = new Float32Array(outN);
  for (let o = 0; o < outN; o++) {
    let acc = bias ? bias[o] : 0;
    const base = o * inN;
    for (let i = 0; i < inN; i++) acc += weight[base + i] * x[i];
    out[o] = Math.fround(acc);
  }
  return out;
}

export function denseBackward(
  dOut: Float64Array, x: Float32Array, weight: Float32Array,
  outN: number, inN: number, dWeight: Float64Array, dBias: Float64Array | null,
): Float64Array {
  const dx = new Float64Array(inN);
  for (let o = 0; o < outN; o++) {
    const g = dOut[o];
    if (dBias) dBias[o] += g;
    const base = o * inN;
    for (let i = 0; i < inN; i++) {
      dWeight[base + i] += g * x[i];
      dx[i] += g * weight[base + i];
    }
  }
  return dx;
}

export function relu(x: Float32Array): Float32Array {
  const out = new Float32Array(x.length);
  for (let i = 0; i < x.length; i++) out[i] = x[i] > 0 ? x[i] : 0;
  return out;
}

export function reluBackward(dOut: Float64Array, preact: Float32Array): Float64Array {
  const dx = new Float64Array(dOut.length);
  for (let i = 0; i < dOut.length; i++) dx[i] = preact[i] > 0 ? dOut[i] : 0;
  return dx;
}

export function maxpool2(
  x: Float32Array, dims: PlaneDims,
): { out: Float32Array; dims: PlaneDims; argmax: Int32Array } {
  const { c, h, w } = dims;
  if (h % 2 || w % 2) throw new Error(`maxpool2 needs even spatial dims, got ${h}x${w}`);
  const oh = h / 2;
  const ow = w / 2;
  const out = new Float32Array(c * oh * ow);
  const argmax = new Int32Array(c * oh * ow);
  for (let ci = 0; ci < c; ci++) {
    for (let oy = 0; oy < oh; oy++) {
      for (let ox = 0; ox < ow; ox++) {
        let best = -Infinity;
        let bestIdx = -1;
        for (let dy = 0; dy < 2; dy++) {
          for (let dx = 0; dx < 2; dx++) {
            const idx = (ci * h + oy * 2 + dy) * w + ox * 2 + dx;
            if (x[idx] > best) {  // strict: first max in window order wins
              best = x[idx];
              bestIdx = idx;
            }
          }
        }
        out[(ci * oh + oy) * ow + ox] = best;
        argmax[(ci * oh + oy) * ow + ox] = bestIdx;
      }
    }
  }
  return { out, dims: { c, h: oh, w: ow }, argmax };
}

export function maxpool2Backward(
  dOut: Float64Array, argmax: Int32Array, inSize: number,
): Float64Array {
  const dx = new Float64Array(inSize);
  for (let i = 0; i < dOut.length; i++) dx[argmax[i]] += dOut[i];
  return dx;
}

/** Loss plus d(loss)/d(logits) for one sample (doubles throughout). */
export function softmaxCrossEntropy(
  logits: Float32Array, label: number,
): { loss: number; dLogits: Float64Array } {
  let max = -Infinity;
  for (let i = 0; i < logits.length; i++) if (logits[i] > max) max = logits[i];
  const exps = new Float64Array(logits.length);
  let sum = 0;
  for (let i = 0; i < logits.length; i++) {
    exps[i] = Math.exp(logits[i] - max);
    sum += exps[i];
  }
  const dLogits = new Float64Array(logits.length);
  for (let i = 0; i < logits.length; i++) {
    const p = exps[i] / sum;
    dLogits[i] = p - (i === label ? 1 : 0);
  }
  const pLabel = Math.max(exps[label] / sum, 1e-300);
  return { loss: -Math.log(pLabel), dLogits };
}

/** Argmax with the first index winning ties. */
export function argmax(values: Float32Array): number {
  let best = 0;
  for (let i = 1; i < values.length; i++) if (values[i] > values[best]) best = i;
  return best;
}

/** Top-k class indices: descending value, ties by ascending index. */
export function topIndices(values: Float32Array, k: number): number[] {
  const idx = Array.from(values.keys());
  idx.sort((a, b) => (values[b] - values[a]) || (a - b));
  return idx.slice(0, k);
}
