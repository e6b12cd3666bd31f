/**
 * Example: feeding a training loop from the preprocessing service.
 *
 * Streams a raw columnar file through a remote pipeline and consumes
 * the processed columns batch by batch, the way a data loader would.
 *
 * Usage: node dist/example_training_loop.js <host> <port> <input.col> [preset]
 */

import * as fs from "node:fs";
import { SCHEMA_COLUMN } from "./frames.js";
import { decodeFileHeader } from "./colfile.js";
import { preprocessRemote } from "./client.js";

async function main(): Promise<void> {
  const [host, port, inputPath, preset = "P-II"] = process.argv.slice(2);
  if (!host || !port || !inputPath) {
    console.error("usage: example_training_loop <host> <port> <input.col> [preset]");
    process.exit(1);
  }
  const image = fs.readFileSync(inputPath);

  let denseCount = 0;
  let step = 0;
  let runningSum = 0;
  let runningRows = 0;

  for await (const frame of preprocessRemote({ host, port: Number(port) }, preset, image)) {
    if (frame.header.columnIndex === SCHEMA_COLUMN) {
      const schema = decodeFileHeader(frame.payload);
      denseCount = schema.denseCount;
      console.log(
        `schema: ${schema.rowCount} rows, ${schema.denseCount} dense + ${schema.sparseCount} sparse`,
      );
      continue;
    }
    // a stand-in training step: accumulate statistics over dense output
    if (frame.header.columnIndex < denseCount) {
      const floats = new Float32Array(
        frame.payload.buffer,
        frame.payload.byteOffset,
        frame.payload.length / 4,
      );
      for (const v of floats) runningSum += v;
      runningRows += floats.length;
    }
    step += 1;
    if (step % 50 === 0) {
      console.log(`step ${step}: dense mean so far ${(runningSum / runningRows).toFixed(4)}`);
    }
  }
  console.log(
    `done after ${step} chunks; dense mean ${(runningSum / Math.max(runningRows, 1)).toFixed(4)}`,
  );
}

main().catch((err) => {
  console.error(err);
  process.exit(1);
});
