/**
 * Export jobs: run a model backend over an input manifest and write the
 * rows into a .emb file, plus a job manifest recording provenance and a
 * sidecar listing any skipped inputs.
 */

import { promises as fs } from "node:fs";
import { ImageDecodeError, ModelBackend } from "./backend.js";
import { EmbeddingMatrix, matrix, writeEmb } from "./emb.js";

export type ExportMode = "sbert-text" | "clip-image" | "clip-text" | "clip-proj";

export interface ExportJob {
  mode: ExportMode;
  model: string;
  /** JSONL manifest: {"id", "text"} for text modes, {"id", "path"} for images */
  input?: string;
  out: string;
  batchSize?: number;
  head?: "visual" | "text";
}

export interface ExportResult {
  rows: number;
  dim: number;
  skipped: number;
}

export class DimMismatch extends Error {}

interface TextRow {
  id: string;
  text: string;
}

interface ImageRow {
  id: string;
  path: string;
}

async function readManifest(path: string): Promise<any[]> {
  const raw = await fs.readFile(path, "utf-8");
  return raw
    .split("\n")
    .map((line) => line.trim())
    .filter(Boolean)
    .map((line) => JSON.parse(line));
}

function assembleRows(ids: string[], rows: Float32Array[]): EmbeddingMatrix {
  if (rows.length === 0) {
    return matrix(ids, 0, new Float32Array(0));
  }
  const dim = rows[0].length;
  const data = new Float32Array(rows.length * dim);
  rows.forEach((row, i) => {
    if (row.length !== dim) {
      throw new DimMismatch(`row ${ids[i]} has dim ${row.length}, expected ${dim}`);
    }
    data.set(row, i * dim);
  });
  return matrix(ids, dim, data);
}

async function exportTexts(
  job: ExportJob,
  backend: ModelBackend,
  encode: (texts: string[]) => Promise<Float32Array[]>,
): Promise<ExportResult> {
  if (!job.input) throw new Error(`${job.mode} needs an input manifest`);
  const entries = (await readManifest(job.input)) as TextRow[];
  const batch = job.batchSize ?? 64;
  const rows: Float32Array[] = [];
  for (let start = 0; start < entries.length; start += batch) {
    const chunk = entries.slice(start, start + batch);
    rows.push(...(await encode(chunk.map((e) => e.text))));
  }
  const m = assembleRows(entries.map((e) => e.id), rows);
  await writeEmb(job.out, m);
  await writeJobManifest(job, backend, m, 0);
  return { rows: m.ids.length, dim: m.dim, skipped: 0 };
}

async function exportImages(job: ExportJob, backend: ModelBackend): Promise<ExportResult> {
  if (!job.input) throw new Error("clip-image needs an input manifest");
  const entries = (await readManifest(job.input)) as ImageRow[];
  const ids: string[] = [];
  const rows: Float32Array[] = [];
  const skipped: { id: string; path: string; reason: string }[] = [];
  for (const entry of entries) {
    try {
      rows.push(await backend.clipImageFeatures(entry.path));
      ids.push(entry.id);
    } catch (err) {
      if (err instanceof ImageDecodeError) {
        skipped.push({ id: entry.id, path: entry.path, reason: String(err.message) });
      } else {
        throw err;
      }
    }
  }
  const m = assembleRows(ids, rows);
  await writeEmb(job.out, m);
  if (skipped.length > 0) {
    await fs.writeFile(
      `${job.out}.skipped.jsonl`,
      skipped.map((s) => JSON.stringify(s)).join("\n") + "\n",
      "utf-8",
    );
  }
  await writeJobManifest(job, backend, m, skipped.length);
  return { rows: m.ids.length, dim: m.dim, skipped: skipped.length };
}

async function exportProjection(job: ExportJob, backend: ModelBackend): Promise<ExportResult> {
  const head = job.head ?? "visual";
  const proj = await backend.clipProjection(head);
  const ids = Array.from({ length: proj.dOut }, (_, i) => `row${i}`);
  const m = matrix(ids, proj.dIn, proj.data);
  await writeEmb(job.out, m);
  await writeJobManifest(job, backend, m, 0);
  return { rows: proj.dOut, dim: proj.dIn, skipped: 0 };
}

async function writeJobManifest(
  job: ExportJob,
  backend: ModelBackend,
  m: EmbeddingMatrix,
  skipped: number,
): Promise<void> {
  const manifest = {
    mode: job.mode,
    model: job.model,
    backend: backend.name,
    head: job.mode === "clip-proj" ? job.head ?? "visual" : undefined,
    rows: m.ids.length,
    dim: m.dim,
    skipped,
    tool: "artcontext-export 0.1.0",
  };
  await fs.writeFile(`${job.out}.manifest.json`, JSON.stringify(manifest, null, 2) + "\n", "utf-8");
}

export async function runExport(job: ExportJob, backend: ModelBackend): Promise<ExportResult> {
  switch (job.mode) {
    case "sbert-text":
      return exportTexts(job, backend, (texts) => backend.embedTexts(texts));
    case "clip-text":
      return exportTexts(job, backend, (texts) => backend.clipTextFeatures(texts));
    case "clip-image":
      return exportImages(job, backend);
    case "clip-proj":
      return exportProjection(job, backend);
    default:
      throw new Error(`unknown mode ${job.mode}`);
  }
}
