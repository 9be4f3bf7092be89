#!/usr/bin/env node
/**
 * Record the canonical protocol conversation against the built adapter.
 * Writes adapter/testdata/conversation.json; deterministic given the fixture.
 */

const { spawn } = require("node:child_process");
const fs = require("node:fs");
const path = require("node:path");
const readline = require("node:readline");

const root = path.resolve(__dirname, "..");
const adapter = path.join(root, "adapter");

const requests = [
  { id: 1, op: "describe" },
  { id: 2, op: "evaluate", sparsities: { conv1: 0.0, fc1: 0.0, fc2: 0.0 } },
  { id: 3, op: "evaluate", sparsities: { conv1: 0.25, fc1: 0.5, fc2: 0.1 } },
  { id: 4, op: "evaluate", masks_uri: path.join(adapter, "testdata", "masks_sample.bin") },
  { id: 5, op: "gradients", layer: "fc1" },
  { id: 6, op: "retrain", epochs: 1, masking: true },
  { id: 7, op: "gradients", layer: "fc1" },
  { id: 8, op: "activations", layer: "conv1" },
  { id: 9, op: "activations", layer: "conv1", class_id: 2 },
  { id: 10, op: "evaluate" },
  { id: 11, op: "gradients", layer: "nope" },
  { id: 12, op: "frobnicate" },
  { id: 13, op: "shutdown" },
];

async function main() {
  const child = spawn("node", [
    path.join(adapter, "dist", "src", "server.js"),
    "--model", path.join(adapter, "testdata", "tinymodel"),
    "--dataset", path.join(adapter, "testdata", "tinydata"),
    "--seed", "5",
  ], { stdio: ["pipe", "pipe", "inherit"] });

  const rl = readline.createInterface({ input: child.stdout });
  const lines = [];
  const done = new Promise((resolve) => rl.on("close", resolve));
  rl.on("line", (l) => lines.push(l));
  for (const req of requests) child.stdin.write(JSON.stringify(req) + "\n");
  child.stdin.end();
  await done;

  if (lines.length !== requests.length) {
    throw new Error(`expected ${requests.length} responses, got ${lines.length}`);
  }
  const conversation = requests.map((request, i) => ({
    request,
    response: JSON.parse(lines[i]),
  }));
  const out = path.join(adapter, "testdata", "conversation.json");
  fs.writeFileSync(out, JSON.stringify({ version: 1, turns: conversation }, null, 2) + "\n");
  console.log(`recorded ${conversation.length} turns -> ${out}`);
}

main().catch((err) => {
  console.error(err);
  process.exit(1);
});
