/**
 * Model backends behind one interface: a deterministic hash backend for
 * tests and offline runs, and a transformers.js backend for real models.
 *
 * All feature modes emit *pre-projection* encoder outputs because the
 * training side adapts only the projection heads; clip-proj dumps the frozen
 * projection matrix itself.
 */

import { createHash } from "node:crypto";
import { promises as fs } from "node:fs";

export const CONTEXT_LENGTH = 77;

export class ModelLoadError extends Error {}
export class ImageDecodeError extends Error {}

export interface ProjectionMatrix {
  dOut: number;
  dIn: number;
  /** row-major float32, dOut x dIn */
  data: Float32Array;
}

export interface ModelBackend {
  readonly name: string;
  /** sentence-encoder output dimension */
  sbertDim(): number;
  /** pre-projection feature dimension for the given head */
  featureDim(head: "visual" | "text"): number;
  embedTexts(texts: string[]): Promise<Float32Array[]>;
  /** applies the model tokenizer's truncation before encoding */
  clipTextFeatures(texts: string[]): Promise<Float32Array[]>;
  clipImageFeatures(path: string): Promise<Float32Array>;
  clipProjection(head: "visual" | "text"): Promise<ProjectionMatrix>;
  /** tokenizer view used by clipTextFeatures, exposed for verification */
  truncateTokens(text: string): string[];
}

// --- deterministic hash backend ---------------------------------------------

function sfc32(a: number, b: number, c: number, d: number): () => number {
  return () => {
    a >>>= 0; b >>>= 0; c >>>= 0; d >>>= 0;
    let t = (a + b) | 0;
    a = b ^ (b >>> 9);
    b = (c + (c << 3)) | 0;
    c = (c << 21) | (c >>> 11);
    d = (d + 1) | 0;
    t = (t + d) | 0;
    c = (c + t) | 0;
    return (t >>> 0) / 4294967296;
  };
}

function unitVectorFor(key: string, dim: number): Float32Array {
  const digest = createHash("sha256").update(key, "utf-8").digest();
  const rand = sfc32(
    digest.readUInt32LE(0),
    digest.readUInt32LE(4),
    digest.readUInt32LE(8),
    digest.readUInt32LE(12),
  );
  const out = new Float64Array(dim);
  for (let i = 0; i < dim; i += 2) {
    // Box-Muller; rejects the log(0) corner
    let u = 0;
    while (u === 0) u = rand();
    const v = rand();
    const r = Math.sqrt(-2.0 * Math.log(u));
    out[i] = r * Math.cos(2 * Math.PI * v);
    if (i + 1 < dim) out[i + 1] = r * Math.sin(2 * Math.PI * v);
  }
  let norm = 0;
  for (const x of out) norm += x * x;
  norm = Math.sqrt(norm);
  const f32 = new Float32Array(dim);
  for (let i = 0; i < dim; i++) f32[i] = out[i] / norm;
  return f32;
}

/**
 * Stand-in encoder: every text or image maps to a pseudo-random unit vector
 * keyed by a hash of its canonical form. Tokenization is whitespace-based
 * with the same 77-token truncation the real text encoder applies, so
 * truncation equivalence is observable without model weights.
 */
export class HashBackend implements ModelBackend {
  readonly name: string;

  constructor(
    readonly model: string = "hash",
    private readonly dims = { sbert: 32, feature: 32, embed: 16 },
  ) {
    this.name = `hash:${model}`;
  }

  sbertDim(): number {
    return this.dims.sbert;
  }

  featureDim(_head: "visual" | "text"): number {
    return this.dims.feature;
  }

  truncateTokens(text: string): string[] {
    return text.split(/\s+/).filter(Boolean).slice(0, CONTEXT_LENGTH);
  }

  async embedTexts(texts: string[]): Promise<Float32Array[]> {
    return texts.map((t) => unitVectorFor(`sbert|${this.model}|${t}`, this.dims.sbert));
  }

  async clipTextFeatures(texts: string[]): Promise<Float32Array[]> {
    return texts.map((t) => {
      const canonical = this.truncateTokens(t).join(" ");
      return unitVectorFor(`clip-text|${this.model}|${canonical}`, this.dims.feature);
    });
  }

  async clipImageFeatures(path: string): Promise<Float32Array> {
    let bytes: Buffer;
    try {
      bytes = await fs.readFile(path);
    } catch (err) {
      throw new ImageDecodeError(`cannot read image ${path}: ${err}`);
    }
    if (bytes.length === 0) {
      throw new ImageDecodeError(`empty image file ${path}`);
    }
    const digest = createHash("sha256").update(bytes).digest("hex");
    return unitVectorFor(`clip-image|${this.model}|${digest}`, this.dims.feature);
  }

  async clipProjection(head: "visual" | "text"): Promise<ProjectionMatrix> {
    const { feature: dIn, embed: dOut } = this.dims;
    const data = new Float32Array(dOut * dIn);
    for (let r = 0; r < dOut; r++) {
      const row = unitVectorFor(`clip-proj|${this.model}|${head}|row${r}`, dIn);
      data.set(row, r * dIn);
    }
    return { dOut, dIn, data };
  }
}

// --- transformers.js backend ---------------------------------------------------

/**
 * Real models through @huggingface/transformers. Text and image features are
 * the encoders' pooled pre-projection outputs. Loading is lazy; any failure
 * (missing package, unreachable weights) surfaces as ModelLoadError.
 *
 * clipProjection requires the checkpoint to expose its projection weights;
 * transformers.js does not surface raw weight tensors for every
 * architecture, in which case this backend refuses rather than guessing.
 */
export class TransformersBackend implements ModelBackend {
  readonly name: string;
  private sbertPipe: any = null;
  private clipText: any = null;
  private clipVision: any = null;
  private tokenizer: any = null;
  private processor: any = null;
  private dimsSeen: { sbert?: number; feature?: number } = {};

  constructor(readonly model: string, readonly device?: string) {
    this.name = `transformers:${model}`;
  }

  private async lib(): Promise<any> {
    try {
      return await import("@huggingface/transformers");
    } catch (err) {
      throw new ModelLoadError(`@huggingface/transformers unavailable: ${err}`);
    }
  }

  sbertDim(): number {
    if (this.dimsSeen.sbert === undefined) {
      throw new ModelLoadError("sbert dimension unknown before the first batch");
    }
    return this.dimsSeen.sbert;
  }

  featureDim(_head: "visual" | "text"): number {
    if (this.dimsSeen.feature === undefined) {
      throw new ModelLoadError("feature dimension unknown before the first batch");
    }
    return this.dimsSeen.feature;
  }

  truncateTokens(text: string): string[] {
    if (this.tokenizer === null) {
      throw new ModelLoadError("tokenizer not loaded yet");
    }
    const ids = this.tokenizer(text, { truncation: true, max_length: CONTEXT_LENGTH });
    return Array.from(ids.input_ids.data as Iterable<bigint>).map(String);
  }

  async embedTexts(texts: string[]): Promise<Float32Array[]> {
    const t = await this.lib();
    try {
      if (this.sbertPipe === null) {
        this.sbertPipe = await t.pipeline("feature-extraction", this.model, {
          device: this.device,
        });
      }
      const out = await this.sbertPipe(texts, { pooling: "mean", normalize: true });
      const [n, dim] = out.dims;
      this.dimsSeen.sbert = dim;
      const rows: Float32Array[] = [];
      for (let i = 0; i < n; i++) {
        rows.push(new Float32Array(out.data.slice(i * dim, (i + 1) * dim)));
      }
      return rows;
    } catch (err) {
      if (err instanceof ModelLoadError) throw err;
      throw new ModelLoadError(`sentence encoder failed: ${err}`);
    }
  }

  private async loadClipText(t: any): Promise<void> {
    if (this.clipText === null) {
      this.tokenizer = await t.AutoTokenizer.from_pretrained(this.model);
      this.clipText = await t.CLIPTextModel.from_pretrained(this.model, {
        device: this.device,
      });
    }
  }

  async clipTextFeatures(texts: string[]): Promise<Float32Array[]> {
    const t = await this.lib();
    try {
      await this.loadClipText(t);
      const inputs = this.tokenizer(texts, {
        padding: true,
        truncation: true,
        max_length: CONTEXT_LENGTH,
      });
      const out = await this.clipText(inputs);
      const pooled = out.pooler_output; // EOS hidden state, before projection
      const [n, dim] = pooled.dims;
      this.dimsSeen.feature = dim;
      const rows: Float32Array[] = [];
      for (let i = 0; i < n; i++) {
        rows.push(new Float32Array(pooled.data.slice(i * dim, (i + 1) * dim)));
      }
      return rows;
    } catch (err) {
      if (err instanceof ModelLoadError) throw err;
      throw new ModelLoadError(`text encoder failed: ${err}`);
    }
  }

  async clipImageFeatures(path: string): Promise<Float32Array> {
    const t = await this.lib();
    try {
      if (this.clipVision === null) {
        this.processor = await t.AutoProcessor.from_pretrained(this.model);
        this.clipVision = await t.CLIPVisionModel.from_pretrained(this.model, {
          device: this.device,
        });
      }
    } catch (err) {
      throw new ModelLoadError(`vision encoder failed to load: ${err}`);
    }
    let image: any;
    try {
      image = await t.RawImage.read(path);
    } catch (err) {
      throw new ImageDecodeError(`cannot decode ${path}: ${err}`);
    }
    const inputs = await this.processor(image);
    const out = await this.clipVision(inputs);
    const pooled = out.pooler_output;
    const dim = pooled.dims[pooled.dims.length - 1];
    this.dimsSeen.feature = dim;
    return new Float32Array(pooled.data.slice(0, dim));
  }

  async clipProjection(_head: "visual" | "text"): Promise<ProjectionMatrix> {
    throw new ModelLoadError(
      "this backend cannot read raw projection weights; export them with a " +
        "weight-dump tool for your checkpoint, or use the hash backend for fixtures",
    );
  }
}

export function backendFor(model: string, device?: string): ModelBackend {
  if (model === "hash" || model.startsWith("hash:")) {
    return new HashBackend(model.replace(/^hash:/, "") || "hash");
  }
  return new TransformersBackend(model, device);
}
