/** Dataset directory reader (float32 NCHW images, int32 labels). */

import * as fs from "node:fs";
import * as path from "node:path";

export interface Split {
  inputs: Float32Array;  // n * c * h * w
  labels: Int32Array;
  n: number;
}

export interface DataBundle {
  train: Split;
  test: Split;
  classes: number;
  c: number;
  h: number;
  w: number;
}

function readSplit(dir: string, info: { count: number; images: string; labels: string },
                   sampleSize: number): Split {
  const img = fs.readFileSync(path.join(dir, info.images));
  const lbl = fs.readFileSync(path.join(dir, info.labels));
  const n = info.count;
  if (img.length !== n * sampleSize * 4 || lbl.length !== n * 4) {
    throw new Error(`${dir}: split sizes disagree with metadata`);
  }
  const inputs = new Float32Array(n * sampleSize);
  for (let i = 0; i < inputs.length; i++) inputs[i] = img.readFloatLE(i * 4);
  const labels = new Int32Array(n);
  for (let i = 0; i < n; i++) labels[i] = lbl.readInt32LE(i * 4);
  return { inputs, labels, n };
}

export function loadDataset(dir: string): DataBundle {
  const meta = JSON.parse(fs.readFileSync(path.join(dir, "dataset.json"), "utf-8"));
  if (meta.format !== "dataset") throw new Error(`${dir}: not a dataset directory`);
  const [c, h, w] = meta.image as number[];
  const sampleSize = c * h * w;
  return {
    train: readSplit(dir, meta.splits.train, sampleSize),
    test: readSplit(dir, meta.splits.test, sampleSize),
    classes: meta.classes,
    c, h, w,
  };
}
