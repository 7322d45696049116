#!/usr/bin/env node
/**
 * dpge-extract: image folders -> DPGE embedding files.
 *
 *   dpge-extract extract --input DIR --model digest:64 --out data.dpge \
 *       [--split train|test] [--frames-cap N] [--kind source|target|eval] \
 *       [--label real|fake|unknown]
 *   dpge-extract anchors --model digest:64 --out anchors.dpge \
 *       [--prompt-real TEXT] [--prompt-fake TEXT]
 */

import { parseArgs } from "node:util";

import { DOMAIN_KINDS, LABELS } from "./dpge.js";
import { loadEmbedder } from "./embedder.js";
import { FRAME_CAPS, emitAnchors, extract, isDirectory } from "./extract.js";

const DEFAULT_PROMPT_REAL = "real face photo";
const DEFAULT_PROMPT_FAKE = "deep fake face photo";

function fail(message: string): never {
  console.error(JSON.stringify({ error: message }));
  process.exit(1);
}

async function runExtract(argv: string[]): Promise<void> {
  const { values } = parseArgs({
    args: argv,
    options: {
      input: { type: "string" },
      model: { type: "string", default: "digest:64" },
      out: { type: "string" },
      split: { type: "string", default: "train" },
      "frames-cap": { type: "string" },
      kind: { type: "string", default: "target" },
      label: { type: "string", default: "unknown" },
    },
  });
  if (!values.input || !values.out) fail("extract needs --input and --out");
  if (!isDirectory(values.input)) fail(`not a directory: ${values.input}`);
  if (!(values.split! in FRAME_CAPS)) fail("--split must be train or test");
  if (!(values.kind! in DOMAIN_KINDS)) fail("--kind must be source, target, or eval");
  if (!(values.label! in LABELS)) fail("--label must be real, fake, or unknown");
  const cap = values["frames-cap"]
    ? Number(values["frames-cap"])
    : FRAME_CAPS[values.split as keyof typeof FRAME_CAPS];
  if (!Number.isInteger(cap) || cap < 1) fail("--frames-cap must be a positive integer");

  const embedder = await loadEmbedder(values.model!);
  const count = await extract(
    {
      inputDir: values.input,
      outPath: values.out,
      framesPerVideo: cap,
      domainKind: DOMAIN_KINDS[values.kind as keyof typeof DOMAIN_KINDS],
      label: LABELS[values.label as keyof typeof LABELS],
    },
    embedder,
  );
  console.log(`wrote ${count} records (dim ${embedder.dim}, cap ${cap}/video) to ${values.out}`);
}

async function runAnchors(argv: string[]): Promise<void> {
  const { values } = parseArgs({
    args: argv,
    options: {
      model: { type: "string", default: "digest:64" },
      out: { type: "string" },
      "prompt-real": { type: "string", default: DEFAULT_PROMPT_REAL },
      "prompt-fake": { type: "string", default: DEFAULT_PROMPT_FAKE },
    },
  });
  if (!values.out) fail("anchors needs --out");
  const embedder = await loadEmbedder(values.model!);
  await emitAnchors(values["prompt-real"]!, values["prompt-fake"]!, embedder, values.out);
  console.log(`wrote anchor_real/anchor_fake (dim ${embedder.dim}) to ${values.out}`);
}

async function main(): Promise<void> {
  const [command, ...rest] = process.argv.slice(2);
  try {
    if (command === "extract") {
      await runExtract(rest);
    } else if (command === "anchors") {
      await runAnchors(rest);
    } else {
      fail("usage: dpge-extract <extract|anchors> [options]");
    }
  } catch (err) {
    fail((err as Error).message);
  }
}

main();
