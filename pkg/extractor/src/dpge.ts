/**
 * DPGE binary format writer (and a reader used by the tests).
 *
 * Layout (little-endian):
 *   magic "DPGE" | u32 version=1 | u32 dim | u64 count
 *   per record:
 *     u32 id length + UTF-8 id
 *     u32 video id length + UTF-8 video id
 *     u8 domain kind (0 source / 1 target_unlabeled / 2 eval)
 *     u8 tag length + UTF-8 dataset tag
 *     i8 label (-1 unknown / 0 real / 1 fake)
 *     dim x f32 feature values (may be unnormalized; the engine normalizes)
 */

export const DOMAIN_KINDS = { source: 0, target: 1, eval: 2 } as const;
export const LABELS = { unknown: -1, real: 0, fake: 1 } as const;

export interface DpgeRecord {
  id: string;
  videoId: string;
  domainKind: number;
  datasetTag: string;
  label: number;
  feature: Float32Array;
}

const MAGIC = Buffer.from("DPGE", "ascii");

export function encodeDpge(dim: number, records: DpgeRecord[]): Buffer {
  if (!Number.isInteger(dim) || dim <= 0) {
    throw new Error(`invalid dimension ${dim}`);
  }
  const seen = new Set<string>();
  const chunks: Buffer[] = [];
  const header = Buffer.alloc(4 + 4 + 8);
  header.writeUInt32LE(1, 0);
  header.writeUInt32LE(dim, 4);
  header.writeBigUInt64LE(BigInt(records.length), 8);
  chunks.push(MAGIC, header);

  for (const rec of records) {
    if (seen.has(rec.id)) {
      throw new Error(`duplicate record id ${rec.id}`);
    }
    seen.add(rec.id);
    if (rec.feature.length !== dim) {
      throw new Error(`record ${rec.id} has dim ${rec.feature.length}, expected ${dim}`);
    }
    for (const v of rec.feature) {
      if (!Number.isFinite(v)) {
        throw new Error(`record ${rec.id} has a non-finite feature value`);
      }
    }
    const id = Buffer.from(rec.id, "utf-8");
    const vid = Buffer.from(rec.videoId, "utf-8");
    const tag = Buffer.from(rec.datasetTag, "utf-8");
    if (tag.length > 255) {
      throw new Error(`dataset tag of record ${rec.id} exceeds 255 bytes`);
    }
    const meta = Buffer.alloc(4 + id.length + 4 + vid.length + 2 + tag.length + 1);
    let off = 0;
    off = meta.writeUInt32LE(id.length, off);
    off += id.copy(meta, off);
    off = meta.writeUInt32LE(vid.length, off);
    off += vid.copy(meta, off);
    off = meta.writeUInt8(rec.domainKind, off);
    off = meta.writeUInt8(tag.length, off);
    off += tag.copy(meta, off);
    meta.writeInt8(rec.label, off);
    const floats = Buffer.alloc(4 * dim);
    for (let i = 0; i < dim; i++) {
      floats.writeFloatLE(rec.feature[i], 4 * i);
    }
    chunks.push(meta, floats);
  }
  return Buffer.concat(chunks);
}

/** Strict reader for round-trip tests; the engine remains the format authority. */
export function decodeDpge(data: Buffer): { dim: number; records: DpgeRecord[] } {
  let pos = 0;
  const take = (n: number): Buffer => {
    if (pos + n > data.length) throw new Error("truncated DPGE data");
    const out = data.subarray(pos, pos + n);
    pos += n;
    return out;
  };
  if (!take(4).equals(MAGIC)) throw new Error("bad DPGE magic");
  const version = take(4).readUInt32LE(0);
  if (version !== 1) throw new Error(`unsupported DPGE version ${version}`);
  const dim = take(4).readUInt32LE(0);
  const count = Number(take(8).readBigUInt64LE(0));
  const records: DpgeRecord[] = [];
  for (let i = 0; i < count; i++) {
    const id = take(take(4).readUInt32LE(0)).toString("utf-8");
    const videoId = take(take(4).readUInt32LE(0)).toString("utf-8");
    const domainKind = take(1).readUInt8(0);
    const datasetTag = take(take(1).readUInt8(0)).toString("utf-8");
    const label = take(1).readInt8(0);
    const raw = take(4 * dim);
    const feature = new Float32Array(dim);
    for (let d = 0; d < dim; d++) feature[d] = raw.readFloatLE(4 * d);
    records.push({ id, videoId, domainKind, datasetTag, label, feature });
  }
  if (pos !== data.length) throw new Error("trailing bytes after last record");
  return { dim, records };
}
