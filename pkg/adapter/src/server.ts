/**
 * Line-delimited JSON server for the evaluator protocol.
 *
 * One request per stdin line, one response per stdout line; responses echo
 * the request id. Failures come back as {"id", "error": {"code", "message"}}
 * and never kill the session; a malformed line answers with id null.
 *
 * Ops: describe, evaluate {sparsities, masks_uri?}, gradients {layer},
 * retrain {epochs, masking}, activations {layer, class_id?}, export_masks
 * {path?} (parity inspection), shutdown.
 */

import * as readline from "node:readline";
import { AdapterEngine } from "./engine";

function parseArgs(argv: string[]): Map<string, string> {
  const out = new Map<string, string>();
  for (let i = 0; i < argv.length; i++) {
    if (argv[i].startsWith("--")) {
      out.set(argv[i].slice(2), argv[i + 1] ?? "");
      i++;
    }
  }
  return out;
}

export function main(): void {
  const args = parseArgs(process.argv.slice(2));
  const modelDir = args.get("model");
  const dataDir = args.get("dataset");
  if (!modelDir || !dataDir) {
    process.stderr.write("usage: server --model DIR --dataset DIR [--seed N] [--lr F] [--batch-size N]\n");
    process.exit(2);
  }
  const engine = new AdapterEngine(
    modelDir, dataDir,
    Number(args.get("seed") ?? 0),
    Number(args.get("lr") ?? 0.02),
    Number(args.get("batch-size") ?? 32),
  );

  const send = (obj: unknown) => process.stdout.write(JSON.stringify(obj) + "\n");
  const rl = readline.createInterface({ input: process.stdin, terminal: false });

  rl.on("line", (line: string) => {
    line = line.trim();
    if (!line) return;
    let req: Record<string, unknown>;
    try {
      req = JSON.parse(line);
    } catch {
      send({ id: null, error: { code: "bad_request", message: "unparseable JSON line" } });
      return;
    }
    const id = (req as { id?: unknown }).id ?? null;
    try {
      switch (req.op) {
        case "describe":
          send({ id, ...engine.describe() });
          break;
        case "evaluate": {
          if (typeof req.masks_uri === "string") {
            engine.applyMaskFile(req.masks_uri);
          } else if (req.sparsities && typeof req.sparsities === "object") {
            engine.applySparsities(req.sparsities as Record<string, number>);
          } else {
            send({ id, error: { code: "bad_request",
                                message: "evaluate needs sparsities or masks_uri" } });
            break;
          }
          send({ id, ...engine.evaluate() });
          break;
        }
        case "gradients": {
          if (typeof req.layer !== "string") {
            send({ id, error: { code: "bad_request", message: "gradients needs layer" } });
            break;
          }
          send({ id, layer: req.layer, importance: engine.gradientStats(req.layer) });
          break;
        }
        case "retrain": {
          const epochs = Number(req.epochs);
          if (!Number.isInteger(epochs) || epochs < 0) {
            send({ id, error: { code: "bad_request", message: "retrain needs epochs >= 0" } });
            break;
          }
          send({ id, ...engine.retrain(epochs, Boolean(req.masking)) });
          break;
        }
        case "activations": {
          if (typeof req.layer !== "string") {
            send({ id, error: { code: "bad_request", message: "activations needs layer" } });
            break;
          }
          const classId = req.class_id === undefined || req.class_id === null
            ? null : Number(req.class_id);
          send({ id, layer: req.layer, means: engine.activationMeans(req.layer, classId) });
          break;
        }
        case "export_masks": {
          if (typeof req.path === "string") {
            engine.exportMasks(req.path);
            send({ id, ok: true, path: req.path });
          } else {
            const masks = engine.exportMasks(null) as Map<string, Uint8Array>;
            const inline: Record<string, number[]> = {};
            for (const [name, kept] of masks) inline[name] = [...kept];
            send({ id, masks: inline });
          }
          break;
        }
        case "shutdown":
          send({ id, ok: true });
          rl.close();
          process.exit(0);
          break;
        default:
          send({ id, error: { code: "bad_request", message: `unknown op ${String(req.op)}` } });
      }
    } catch (err) {
      const message = err instanceof Error ? err.message : String(err);
      const code = message.startsWith("unknown layer") || message.includes("mask file names")
        ? "unknown_layer" : "internal";
      send({ id, error: { code, message } });
    }
  });
}

if (require.main === module) {
  main();
}
