/**
 * The .emb binary vector format, byte-identical to the pipeline's own
 * reader/writer.
 *
 * Layout (little-endian): magic "AEMB", u32 version (1), u64 row count,
 * u32 dimension, u8 dtype (0 = float32), 3 zero pad bytes, then per row a
 * u32 byte length plus UTF-8 id bytes, then the row-major float32 payload
 * with no padding.
 */

import { promises as fs } from "node:fs";
import { dirname, join } from "node:path";
import { randomBytes } from "node:crypto";

export const EMB_MAGIC = Buffer.from("AEMB", "ascii");
export const EMB_VERSION = 1;
export const DTYPE_FLOAT32 = 0;
const HEADER_SIZE = 24;

export interface EmbeddingMatrix {
  ids: string[];
  dim: number;
  /** row-major float32, length ids.length * dim */
  data: Float32Array;
}

export class FormatError extends Error {
  constructor(message: string, readonly offset: number) {
    super(`${message} (byte offset ${offset})`);
    this.name = "FormatError";
  }
}

export class UnsupportedVersion extends Error {}

export function matrix(ids: string[], dim: number, data: Float32Array): EmbeddingMatrix {
  if (data.length !== ids.length * dim) {
    throw new Error(`data length ${data.length} != ${ids.length} * ${dim}`);
  }
  if (new Set(ids).size !== ids.length) {
    throw new Error("row ids must be unique");
  }
  return { ids, dim, data };
}

export function encodeEmb(m: EmbeddingMatrix): Buffer {
  const idBytes = m.ids.map((id) => Buffer.from(id, "utf-8"));
  const idTableSize = idBytes.reduce((acc, b) => acc + 4 + b.length, 0);
  const out = Buffer.alloc(HEADER_SIZE + idTableSize + m.data.length * 4);
  EMB_MAGIC.copy(out, 0);
  out.writeUInt32LE(EMB_VERSION, 4);
  out.writeBigUInt64LE(BigInt(m.ids.length), 8);
  out.writeUInt32LE(m.dim, 16);
  out.writeUInt8(DTYPE_FLOAT32, 20);
  // bytes 21..23 stay zero
  let off = HEADER_SIZE;
  for (const raw of idBytes) {
    out.writeUInt32LE(raw.length, off);
    off += 4;
    raw.copy(out, off);
    off += raw.length;
  }
  const view = new DataView(out.buffer, out.byteOffset);
  for (let i = 0; i < m.data.length; i++) {
    view.setFloat32(off + i * 4, m.data[i], true);
  }
  return out;
}

export function decodeEmb(buf: Buffer): EmbeddingMatrix {
  if (buf.length < HEADER_SIZE) {
    throw new FormatError("truncated header", buf.length);
  }
  if (!buf.subarray(0, 4).equals(EMB_MAGIC)) {
    throw new FormatError("bad magic", 0);
  }
  const version = buf.readUInt32LE(4);
  if (version !== EMB_VERSION) {
    throw new UnsupportedVersion(`emb format version ${version} unsupported`);
  }
  const rows = Number(buf.readBigUInt64LE(8));
  const dim = buf.readUInt32LE(16);
  if (buf.readUInt8(20) !== DTYPE_FLOAT32) {
    throw new FormatError(`unknown dtype code ${buf.readUInt8(20)}`, 20);
  }
  let off = HEADER_SIZE;
  const ids: string[] = [];
  for (let i = 0; i < rows; i++) {
    if (off + 4 > buf.length) {
      throw new FormatError("id table truncated (id count mismatch)", off);
    }
    const len = buf.readUInt32LE(off);
    off += 4;
    if (off + len > buf.length) {
      throw new FormatError("id entry truncated", off);
    }
    ids.push(buf.subarray(off, off + len).toString("utf-8"));
    off += len;
  }
  const expected = rows * dim * 4;
  if (buf.length - off < expected) {
    throw new FormatError("payload truncated", buf.length);
  }
  if (buf.length - off > expected) {
    throw new FormatError("trailing bytes after payload", off + expected);
  }
  const data = new Float32Array(rows * dim);
  const view = new DataView(buf.buffer, buf.byteOffset);
  for (let i = 0; i < data.length; i++) {
    data[i] = view.getFloat32(off + i * 4, true);
  }
  return { ids, dim, data };
}

/** Write via a temp file in the same directory, then rename. */
export async function writeEmb(path: string, m: EmbeddingMatrix): Promise<void> {
  await fs.mkdir(dirname(path), { recursive: true });
  const tmp = join(dirname(path), `.emb-${randomBytes(6).toString("hex")}.tmp`);
  await fs.writeFile(tmp, encodeEmb(m));
  await fs.rename(tmp, path);
}

export async function readEmb(path: string): Promise<EmbeddingMatrix> {
  return decodeEmb(await fs.readFile(path));
}
