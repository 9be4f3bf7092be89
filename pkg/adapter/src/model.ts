/**
 * Model container and mask file readers (little-endian float32 tensors,
 * manifest-driven layout, PKMASK1 bitsets with bit i covering flat index i).
 */

import * as fs from "node:fs";
import * as path from "node:path";

export interface ArchOp {
  op: string;
  layer?: string;
  stride?: number;
  padding?: number;
}

export interface Layer {
  name: string;
  kind: "conv2d" | "dense";
  shape: number[];
  weights: Float32Array;
  bias: Float32Array | null;
}

export interface Model {
  layers: Layer[];
  byName: Map<string, Layer>;
  archGraph: ArchOp[];
  meta: Record<string, unknown>;
}

function readF32(dir: string, file: string, offset: number, count: number): Float32Array {
  const buf = fs.readFileSync(path.join(dir, file));
  if (offset + count * 4 > buf.length) {
    throw new Error(`${file}: need ${offset + count * 4} bytes, file has ${buf.length}`);
  }
  const out = new Float32Array(count);
  for (let i = 0; i < count; i++) out[i] = buf.readFloatLE(offset + i * 4);
  for (let i = 0; i < count; i++) {
    if (!Number.isFinite(out[i])) throw new Error(`${file}: non-finite value at ${i}`);
  }
  return out;
}

export function loadModel(dir: string): Model {
  const manifest = JSON.parse(fs.readFileSync(path.join(dir, "manifest.json"), "utf-8"));
  if (manifest.format !== "model-container") {
    throw new Error(`${dir}: not a model container`);
  }
  const layers: Layer[] = [];
  for (const entry of manifest.layers) {
    const count = entry.shape.reduce((a: number, b: number) => a * b, 1);
    const weights = readF32(dir, entry.file, entry.byte_offset ?? 0, count);
    let bias: Float32Array | null = null;
    if (entry.bias_file) {
      bias = readF32(dir, entry.bias_file, entry.bias_byte_offset ?? 0, entry.shape[0]);
    }
    layers.push({ name: entry.name, kind: entry.kind, shape: entry.shape, weights, bias });
  }
  const byName = new Map(layers.map((l) => [l.name, l]));
  return { layers, byName, archGraph: manifest.arch_graph ?? [], meta: manifest.meta ?? {} };
}

const MASK_MAGIC = "PKMASK1\n";

export function writeMaskFile(file: string, masks: Map<string, Uint8Array>): void {
  const chunks: Buffer[] = [Buffer.from(MASK_MAGIC, "latin1")];
  const count = Buffer.alloc(4);
  count.writeUInt32LE(masks.size);
  chunks.push(count);
  for (const [name, kept] of masks) {
    const nameBytes = Buffer.from(name, "utf-8");
    const head = Buffer.alloc(2 + nameBytes.length + 8);
    head.writeUInt16LE(nameBytes.length, 0);
    nameBytes.copy(head, 2);
    head.writeBigUInt64LE(BigInt(kept.length), 2 + nameBytes.length);
    chunks.push(head);
    const words = Math.ceil(kept.length / 64);
    const body = Buffer.alloc(words * 8);
    for (let wi = 0; wi < words; wi++) {
      let word = 0n;
      const base = wi * 64;
      for (let bit = 0; bit < 64 && base + bit < kept.length; bit++) {
        if (kept[base + bit]) word |= 1n << BigInt(bit);
      }
      body.writeBigUInt64LE(word, wi * 8);
    }
    chunks.push(body);
  }
  fs.writeFileSync(file, Buffer.concat(chunks));
}

export function readMaskFile(file: string): Map<string, Uint8Array> {
  const buf = fs.readFileSync(file);
  if (buf.subarray(0, 8).toString("latin1") !== MASK_MAGIC) {
    throw new Error(`${file}: not a mask file`);
  }
  let pos = 8;
  const layerCount = buf.readUInt32LE(pos);
  pos += 4;
  const result = new Map<string, Uint8Array>();
  for (let li = 0; li < layerCount; li++) {
    const nameLen = buf.readUInt16LE(pos);
    pos += 2;
    const name = buf.subarray(pos, pos + nameLen).toString("utf-8");
    pos += nameLen;
    const bits = Number(buf.readBigUInt64LE(pos));
    pos += 8;
    const words = Math.ceil(bits / 64);
    const kept = new Uint8Array(bits);
    for (let wi = 0; wi < words; wi++) {
      const word = buf.readBigUInt64LE(pos);
      pos += 8;
      const base = wi * 64;
      for (let bit = 0; bit < 64 && base + bit < bits; bit++) {
        kept[base + bit] = Number((word >> BigInt(bit)) & 1n);
      }
    }
    result.set(name, kept);
  }
  return result;
}
