/**
 * Adapter-side evaluation and training over a loaded model container.
 *
 * Masks live apart from the weights: forward passes multiply them in on the
 * fly, a fully-masked output channel also silences its bias, and retraining
 * with masking zeroes pruned-position gradients each step so those weights
 * keep stale coefficients while contributing nothing. Sparsity requests
 * become magnitude masks over the current weights with the same rounding
 * (half to even) and tie-break (|w| then flat index) the engine uses.
 */

import { DataBundle, loadDataset } from "./dataset";
import { ArchOp, Layer, loadModel, Model, readMaskFile, writeMaskFile } from "./model";
import { magnitudeKept, sparsityToCount } from "./masks";
import {
  argmax,
  conv2dBackward,
  conv2dForward,
  denseBackward,
  denseForward,
  maxpool2,
  maxpool2Backward,
  PlaneDims,
  relu,
  reluBackward,
  softmaxCrossEntropy,
  topIndices,
} from "./tensor";

export interface EvalSummary {
  top1: number;
  top5?: number;
  samples: number;
}

/** mulberry32: tiny deterministic shuffle source for SGD epochs. */
function rng32(seed: number): () => number {
  let a = seed >>> 0;
  return () => {
    a = (a + 0x6d2b79f5) >>> 0;
    let t = a;
    t = Math.imul(t ^ (t >>> 15), t | 1);
    t ^= t + Math.imul(t ^ (t >>> 7), t | 61);
    return ((t ^ (t >>> 14)) >>> 0) / 4294967296;
  };
}

interface TapeEntry {
  op: ArchOp;
  layer?: Layer;
  input: Float32Array;
  inputDims: PlaneDims;
  output: Float32Array;
  preact?: Float32Array;   // relu input
  argmax?: Int32Array;     // maxpool winners
  outDims: PlaneDims;
  effective?: Float32Array;
}

export class AdapterEngine {
  readonly model: Model;
  readonly data: DataBundle;
  readonly masks = new Map<string, Uint8Array>();
  private gradSum = new Map<string, Float64Array>();
  private gradUpdates = 0;
  private readonly lr: number;
  private readonly batchSize: number;
  private epochCounter = 0;
  private readonly seed: number;

  constructor(modelDir: string, dataDir: string, seed = 0, lr = 0.02, batchSize = 32) {
    this.model = loadModel(modelDir);
    this.data = loadDataset(dataDir);
    this.seed = seed;
    this.lr = lr;
    this.batchSize = batchSize;
    for (const layer of this.model.layers) {
      this.masks.set(layer.name, new Uint8Array(layer.weights.length).fill(1));
    }
  }

  describe(): object {
    const classSet = new Set<number>();
    for (const label of this.data.test.labels) classSet.add(label);
    return {
      layers: this.model.layers.map((l) => ({ name: l.name, kind: l.kind, shape: l.shape })),
      capabilities: {
        supports_gradients: true,
        supports_retrain: true,
        supports_activations: true,
      },
      classes: [...classSet].sort((a, b) => a - b),
    };
  }

  applySparsities(sparsities: Record<string, number>): void {
    for (const [name, frac] of Object.entries(sparsities)) {
      const layer = this.model.byName.get(name);
      if (!layer) throw new Error(`unknown layer ${name}`);
      const count = sparsityToCount(frac, layer.weights.length);
      this.masks.set(name, magnitudeKept(layer.weights, count));
    }
  }

  exportMasks(file: string | null): Map<string, Uint8Array> | void {
    const ordered = new Map<string, Uint8Array>();
    for (const layer of this.model.layers) ordered.set(layer.name, this.masks.get(layer.name)!);
    if (file) {
      writeMaskFile(file, ordered);
      return;
    }
    return ordered;
  }

  applyMaskFile(file: string): void {
    for (const [name, kept] of readMaskFile(file)) {
      const layer = this.model.byName.get(name);
      if (!layer) throw new Error(`mask file names unknown layer ${name}`);
      if (kept.length !== layer.weights.length) {
        throw new Error(`mask length mismatch for layer ${name}`);
      }
      this.masks.set(name, kept);
    }
  }

  private effectiveWeights(layer: Layer): Float32Array {
    const kept = this.masks.get(layer.name)!;
    const out = new Float32Array(layer.weights.length);
    for (let i = 0; i < out.length; i++) out[i] = kept[i] ? layer.weights[i] : 0;
    return out;
  }

  private effectiveBias(layer: Layer): Float32Array | null {
    if (!layer.bias) return null;
    const kept = this.masks.get(layer.name)!;
    const outC = layer.shape[0];
    const per = layer.weights.length / outC;
    const bias = new Float32Array(layer.bias);
    for (let o = 0; o < outC; o++) {
      let alive = false;
      for (let i = o * per; i < (o + 1) * per && !alive; i++) alive = kept[i] === 1;
      if (!alive) bias[o] = 0;
    }
    return bias;
  }

  /** Forward one sample; optionally record a tape for backprop/capture. */
  private forward(sample: Float32Array, record: boolean):
      { logits: Float32Array; tape: TapeEntry[]; captures: Map<string, Float32Array> } {
    let x = sample;
    let dims: PlaneDims = { c: this.data.c, h: this.data.h, w: this.data.w };
    const tape: TapeEntry[] = [];
    const captures = new Map<string, Float32Array>();
    let pending: string | null = null;
    for (const op of this.model.archGraph) {
      const input = x;
      const inputDims = dims;
      let entry: TapeEntry | null = null;
      if (op.op === "conv2d") {
        const layer = this.model.byName.get(op.layer!)!;
        const eff = this.effectiveWeights(layer);
        const res = conv2dForward(x, dims, eff, layer.shape[0], layer.shape[2],
                                  layer.shape[3], this.effectiveBias(layer),
                                  op.stride ?? 1, op.padding ?? 0);
        x = res.out;
        dims = res.dims;
        entry = { op, layer, input, inputDims, output: x, outDims: dims, effective: eff };
        captures.set(layer.name, x);
        pending = layer.name;
      } else if (op.op === "dense") {
        const layer = this.model.byName.get(op.layer!)!;
        const eff = this.effectiveWeights(layer);
        x = denseForward(x, eff, layer.shape[0], layer.shape[1], this.effectiveBias(layer));
        dims = { c: layer.shape[0], h: 1, w: 1 };
        entry = { op, layer, input, inputDims, output: x, outDims: dims, effective: eff };
        captures.set(layer.name, x);
        pending = layer.name;
      } else if (op.op === "relu") {
        const preact = x;
        x = relu(x);
        entry = { op, input, inputDims, output: x, outDims: dims, preact };
        if (pending !== null) {
          captures.set(pending, x);
          pending = null;
        }
      } else if (op.op === "maxpool2") {
        const res = maxpool2(x, dims);
        entry = { op, input, inputDims, output: res.out, outDims: res.dims,
                  argmax: res.argmax };
        x = res.out;
        dims = res.dims;
        pending = null;
      } else if (op.op === "flatten") {
        entry = { op, input, inputDims, output: x, outDims: { c: x.length, h: 1, w: 1 } };
        dims = { c: x.length, h: 1, w: 1 };
        pending = null;
      } else {
        throw new Error(`unsupported op ${op.op}`);
      }
      if (record && entry) tape.push(entry);
    }
    return { logits: x, tape, captures };
  }

  evaluate(): EvalSummary {
    const split = this.data.test;
    const sampleSize = this.data.c * this.data.h * this.data.w;
    let hits1 = 0;
    let hits5 = 0;
    for (let i = 0; i < split.n; i++) {
      const sample = split.inputs.subarray(i * sampleSize, (i + 1) * sampleSize);
      const { logits } = this.forward(sample as Float32Array, false);
      if (argmax(logits) === split.labels[i]) hits1++;
      if (this.data.classes >= 6 && topIndices(logits, 5).includes(split.labels[i])) hits5++;
    }
    const summary: EvalSummary = { top1: (100 * hits1) / split.n, samples: split.n };
    if (this.data.classes >= 6) summary.top5 = (100 * hits5) / split.n;
    return summary;
  }

  activationMeans(layerName: string, classId: number | null): number[] {
    const layer = this.model.byName.get(layerName);
    if (!layer) throw new Error(`unknown layer ${layerName}`);
    const split = this.data.test;
    const sampleSize = this.data.c * this.data.h * this.data.w;
    const outC = layer.shape[0];
    const total = new Float64Array(outC);
    let positions = 0;
    for (let i = 0; i < split.n; i++) {
      if (classId !== null && split.labels[i] !== classId) continue;
      const sample = split.inputs.subarray(i * sampleSize, (i + 1) * sampleSize);
      const { captures } = this.forward(sample as Float32Array, false);
      const act = captures.get(layerName)!;
      const per = act.length / outC;
      for (let o = 0; o < outC; o++) {
        for (let p = 0; p < per; p++) total[o] += Math.abs(act[o * per + p]);
      }
      positions += per;
    }
    if (positions === 0) throw new Error(`no samples for class ${classId}`);
    return [...total].map((t) => t / positions);
  }

  gradientStats(layerName: string): number[] {
    const layer = this.model.byName.get(layerName);
    if (!layer) throw new Error(`unknown layer ${layerName}`);
    const sum = this.gradSum.get(layerName);
    if (!sum || this.gradUpdates === 0) {
      return new Array(layer.weights.length).fill(0);
    }
    return [...sum].map((s) => s / this.gradUpdates);
  }

  retrain(epochs: number, masking: boolean): EvalSummary {
    const train = this.data.train;
    const sampleSize = this.data.c * this.data.h * this.data.w;
    if (epochs > 0) {
      this.gradSum = new Map(this.model.layers.map(
        (l) => [l.name, new Float64Array(l.weights.length)]));
      this.gradUpdates = 0;
    }
    for (let e = 0; e < epochs; e++) {
      const order = Array.from({ length: train.n }, (_, i) => i);
      const rand = rng32(this.seed * 2654435761 + this.epochCounter++);
      for (let i = order.length - 1; i > 0; i--) {
        const j = Math.floor(rand() * (i + 1));
        [order[i], order[j]] = [order[j], order[i]];
      }
      for (let start = 0; start < train.n; start += this.batchSize) {
        const batch = order.slice(start, start + this.batchSize);
        const dW = new Map(this.model.layers.map(
          (l) => [l.name, new Float64Array(l.weights.length)]));
        const dB = new Map(this.model.layers.map(
          (l) => [l.name, l.bias ? new Float64Array(l.bias.length) : null]));
        for (const idx of batch) {
          const sample = train.inputs.subarray(idx * sampleSize, (idx + 1) * sampleSize);
          const { logits, tape } = this.forward(sample as Float32Array, true);
          const { loss, dLogits } = softmaxCrossEntropy(logits, train.labels[idx]);
          if (!Number.isFinite(loss)) throw new Error(`non-finite training loss ${loss}`);
          this.backprop(tape, dLogits, batch.length, dW, dB);
        }
        for (const layer of this.model.layers) {
          const g = dW.get(layer.name)!;
          const kept = this.masks.get(layer.name)!;
          const gs = this.gradSum.get(layer.name)!;
          for (let i = 0; i < g.length; i++) {
            let gi = g[i];
            if (masking && !kept[i]) gi = 0;
            gs[i] += Math.abs(gi);
            layer.weights[i] = Math.fround(layer.weights[i] - this.lr * gi);
          }
          const gb = dB.get(layer.name);
          if (gb && layer.bias) {
            for (let i = 0; i < gb.length; i++) {
              layer.bias[i] = Math.fround(layer.bias[i] - this.lr * gb[i]);
            }
          }
        }
        this.gradUpdates++;
      }
    }
    return this.evaluate();
  }

  private backprop(tape: TapeEntry[], dLogits: Float64Array, batchSize: number,
                   dW: Map<string, Float64Array>, dB: Map<string, Float64Array | null>): void {
    let grad: Float64Array = dLogits.map((g) => g / batchSize);
    for (let t = tape.length - 1; t >= 0; t--) {
      const entry = tape[t];
      if (entry.op.op === "conv2d") {
        const layer = entry.layer!;
        grad = conv2dBackward(grad, entry.input, entry.inputDims, entry.effective!,
                              layer.shape[0], layer.shape[2], layer.shape[3],
                              entry.op.stride ?? 1, entry.op.padding ?? 0,
                              entry.outDims.h, entry.outDims.w,
                              dW.get(layer.name)!, dB.get(layer.name) ?? null);
      } else if (entry.op.op === "dense") {
        const layer = entry.layer!;
        grad = denseBackward(grad, entry.input, entry.effective!, layer.shape[0],
                             layer.shape[1], dW.get(layer.name)!,
                             dB.get(layer.name) ?? null);
      } else if (entry.op.op === "relu") {
        grad = reluBackward(grad, entry.preact!);
      } else if (entry.op.op === "maxpool2") {
        grad = maxpool2Backward(grad, entry.argmax!, entry.input.length);
      }
      // flatten: gradient flows through unchanged
    }
  }
}
