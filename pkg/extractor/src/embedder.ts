/**
 * Embedding backends, selected by a model identifier string:
 *
 *   digest:<dim>   deterministic content-digest embedder. Expands SHA-256 of
 *                  the input into <dim> pseudo-random values in [-1, 1]. Runs
 *                  fully offline and is byte-reproducible, which makes it the
 *                  backend for tests and format plumbing. It carries no
 *                  semantic signal.
 *   clip:<model>   CLIP-style vision-language model via @huggingface/transformers
 *                  (install separately); <model> is a model id or local path and
 *                  must already be cached locally. Pools the model's standard
 *                  image/text embedding.
 */

import { createHash } from "node:crypto";

// resolved at runtime only, so the digest backend works without the package
const TRANSFORMERS_MODULE = "@huggingface/transformers" as string;

export interface Embedder {
  readonly dim: number;
  readonly name: string;
  embedImage(bytes: Buffer, name: string): Promise<Float32Array>;
  embedText(text: string): Promise<Float32Array>;
}

export class DigestEmbedder implements Embedder {
  readonly dim: number;
  readonly name: string;

  constructor(dim: number) {
    if (!Number.isInteger(dim) || dim < 1 || dim > 65536) {
      throw new Error(`digest embedder dimension out of range: ${dim}`);
    }
    this.dim = dim;
    this.name = `digest:${dim}`;
  }

  private expand(seedInput: Buffer): Float32Array {
    const seed = createHash("sha256").update(seedInput).digest();
    const out = new Float32Array(this.dim);
    let block = Buffer.alloc(0);
    let counter = 0;
    let used = 0;
    for (let i = 0; i < this.dim; i++) {
      if (used + 2 > block.length) {
        const ctr = Buffer.alloc(4);
        ctr.writeUInt32LE(counter++, 0);
        block = createHash("sha256").update(seed).update(ctr).digest();
        used = 0;
      }
      const u16 = block.readUInt16LE(used);
      used += 2;
      // (u16 - 32767.5) / 32767.5 is never exactly zero, so no record can
      // come out as a zero vector
      out[i] = (u16 - 32767.5) / 32767.5;
    }
    return out;
  }

  embedImage(bytes: Buffer): Promise<Float32Array> {
    return Promise.resolve(this.expand(Buffer.concat([Buffer.from("image\0"), bytes])));
  }

  embedText(text: string): Promise<Float32Array> {
    return Promise.resolve(this.expand(Buffer.from(`text\0${text}`, "utf-8")));
  }
}

class ClipEmbedder implements Embedder {
  readonly dim: number;
  readonly name: string;
  private readonly vision: any;
  private readonly text: any;

  private constructor(name: string, vision: any, text: any, dim: number) {
    this.name = name;
    this.vision = vision;
    this.text = text;
    this.dim = dim;
  }

  static async load(modelId: string): Promise<ClipEmbedder> {
    let hub: any;
    try {
      hub = await import(TRANSFORMERS_MODULE);
    } catch {
      throw new Error(
        "the clip backend needs @huggingface/transformers; " +
        "run `npm install @huggingface/transformers` and cache the model locally",
      );
    }
    hub.env.allowRemoteModels = false; // the model must already be on disk
    const vision = await hub.pipeline("image-feature-extraction", modelId);
    const text = await hub.pipeline("feature-extraction", modelId);
    const probe = await text("probe", { pooling: "mean", normalize: false });
    const dim = probe.dims[probe.dims.length - 1];
    return new ClipEmbedder(`clip:${modelId}`, vision, text, dim);
  }

  async embedImage(bytes: Buffer, name: string): Promise<Float32Array> {
    const hub: any = await import(TRANSFORMERS_MODULE);
    const image = await hub.RawImage.fromBlob(new Blob([new Uint8Array(bytes)]));
    const tensor = await this.vision(image, { pooling: "mean", normalize: false });
    return Float32Array.from(tensor.data as Iterable<number>);
  }

  async embedText(text: string): Promise<Float32Array> {
    const tensor = await this.text(text, { pooling: "mean", normalize: false });
    return Float32Array.from(tensor.data as Iterable<number>);
  }
}

export async function loadEmbedder(modelId: string): Promise<Embedder> {
  const sep = modelId.indexOf(":");
  const backend = sep < 0 ? modelId : modelId.slice(0, sep);
  const rest = sep < 0 ? "" : modelId.slice(sep + 1);
  if (backend === "digest") {
    return new DigestEmbedder(Number(rest || "64"));
  }
  if (backend === "clip") {
    if (!rest) throw new Error("clip backend needs a model id or path: clip:<model>");
    return ClipEmbedder.load(rest);
  }
  throw new Error(`unknown model identifier ${modelId} (expected digest:<dim> or clip:<model>)`);
}
