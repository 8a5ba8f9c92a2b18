/**
 * Reference model backend: answers predict requests over stdio.
 *
 * Usage: node dist/server.js [side] [--input-size N] [--classes a,b,c]
 *                            [--model path/to/model.json] [--seed N]
 *
 * Emits the hello handshake on startup, then answers each request line
 * with a probs row block (softmax, rows sum to 1) or an error object
 * carrying the request id. The process stays alive after errors and
 * exits when stdin closes.
 */

import * as readline from 'node:readline';
import { parseArgs } from 'node:util';

import { loadModel, predictBatch } from './model';
import { decodeImage, errorLine, helloLine, parseRequest, probsLine } from './protocol';

async function main(): Promise<void> {
  const { values, positionals } = parseArgs({
    options: {
      'input-size': { type: 'string' },
      classes: { type: 'string', default: 'angry,happy,sad' },
      model: { type: 'string' },
      seed: { type: 'string', default: '42' },
    },
    allowPositionals: true,
  });
  const side = values['input-size']
    ? parseInt(values['input-size'], 10)
    : positionals.length > 0
      ? parseInt(positionals[0], 10)
      : 224;
  const classes = (values.classes as string).split(',').map((s) => s.trim()).filter(Boolean);
  const inputSize: [number, number] = [side, side];

  const model = await loadModel({
    classes,
    inputSize,
    modelPath: values.model as string | undefined,
    seed: parseInt(values.seed as string, 10),
  });

  process.stdout.write(helloLine(classes, inputSize) + '\n');

  const rl = readline.createInterface({ input: process.stdin, terminal: false });
  for await (const line of rl) {
    if (!line.trim()) continue;
    let id = 0;
    try {
      const req = parseRequest(line);
      id = req.id;
      const images = req.images.map((img) => decodeImage(img, inputSize));
      const probs = images.length > 0 ? predictBatch(model, images, inputSize) : [];
      process.stdout.write(probsLine(id, probs) + '\n');
    } catch (err) {
      const msg = err instanceof Error ? err.message : String(err);
      process.stdout.write(errorLine(id, msg) + '\n');
    }
  }
}

main().catch((err) => {
  process.stderr.write(`fatal: ${err}\n`);
  process.exit(1);
});
