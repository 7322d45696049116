/**
 * Walks a dataset_tag/video_id/frame-image tree and emits one DPGE record per
 * kept frame. Directories and files are visited in lexicographic order and
 * the per-video frame cap keeps the first N frames of that order, so a rerun
 * over the same tree is byte-identical.
 */

import { readdirSync, readFileSync, statSync, writeFileSync, renameSync } from "node:fs";
import path from "node:path";

import { DpgeRecord, DOMAIN_KINDS, LABELS, encodeDpge } from "./dpge.js";
import { Embedder } from "./embedder.js";

const IMAGE_EXTENSIONS = new Set([".jpg", ".jpeg", ".png", ".bmp", ".webp"]);

/** Frames kept per video: 16 when extracting training data, 32 for test data. */
export const FRAME_CAPS = { train: 16, test: 32 } as const;

export interface ExtractJob {
  inputDir: string;
  outPath: string;
  framesPerVideo: number;
  domainKind: number;
  label: number;
  warn?: (message: string) => void;
}

function listDirs(root: string): string[] {
  return readdirSync(root, { withFileTypes: true })
    .filter((e) => e.isDirectory())
    .map((e) => e.name)
    .sort();
}

function listFrames(dir: string): string[] {
  // symlinked frames are common in dataset layouts; dangling ones surface as
  // read errors and are skipped with a warning
  return readdirSync(dir, { withFileTypes: true })
    .filter((e) => (e.isFile() || e.isSymbolicLink())
      && IMAGE_EXTENSIONS.has(path.extname(e.name).toLowerCase()))
    .map((e) => e.name)
    .sort();
}

export async function extract(job: ExtractJob, embedder: Embedder): Promise<number> {
  if (job.framesPerVideo < 1) {
    throw new Error("framesPerVideo must be >= 1");
  }
  if (job.domainKind === DOMAIN_KINDS.source && job.label === LABELS.unknown) {
    throw new Error("source records must carry a real/fake label");
  }
  const warn = job.warn ?? ((m) => console.error(m));
  const records: DpgeRecord[] = [];
  for (const tag of listDirs(job.inputDir)) {
    const tagDir = path.join(job.inputDir, tag);
    for (const video of listDirs(tagDir)) {
      const videoDir = path.join(tagDir, video);
      const frames = listFrames(videoDir).slice(0, job.framesPerVideo);
      for (const frame of frames) {
        const framePath = path.join(videoDir, frame);
        let bytes: Buffer;
        try {
          bytes = readFileSync(framePath);
        } catch (err) {
          warn(`skipping unreadable image ${framePath}: ${(err as Error).message}`);
          continue;
        }
        const feature = await embedder.embedImage(bytes, framePath);
        records.push({
          id: `${tag}/${video}/${frame}`,
          videoId: `${tag}/${video}`,
          domainKind: job.domainKind,
          datasetTag: tag,
          label: job.label,
          feature,
        });
      }
    }
  }
  if (records.length === 0) {
    throw new Error(`no readable frames found under ${job.inputDir}`);
  }
  writeAtomic(job.outPath, encodeDpge(embedder.dim, records));
  return records.length;
}

export async function emitAnchors(
  promptReal: string,
  promptFake: string,
  embedder: Embedder,
  outPath: string,
): Promise<void> {
  const records: DpgeRecord[] = [
    {
      id: "anchor_real",
      videoId: "anchor_real",
      domainKind: DOMAIN_KINDS.eval,
      datasetTag: "anchor_real",
      label: LABELS.real,
      feature: await embedder.embedText(promptReal),
    },
    {
      id: "anchor_fake",
      videoId: "anchor_fake",
      domainKind: DOMAIN_KINDS.eval,
      datasetTag: "anchor_fake",
      label: LABELS.fake,
      feature: await embedder.embedText(promptFake),
    },
  ];
  writeAtomic(outPath, encodeDpge(embedder.dim, records));
}

function writeAtomic(outPath: string, data: Buffer): void {
  const tmp = `${outPath}.tmp`;
  writeFileSync(tmp, data);
  renameSync(tmp, outPath);
}

export function isDirectory(p: string): boolean {
  try {
    return statSync(p).isDirectory();
  } catch {
    return false;
  }
}
