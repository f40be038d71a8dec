#!/usr/bin/env node
/**
 * artcontext-export --mode <sbert-text|clip-image|clip-text|clip-proj>
 *                   --model <id> [--input <manifest.jsonl>] --out <file.emb>
 *                   [--batch N] [--device d] [--head visual|text]
 *
 * Model id "hash" (or "hash:<tag>") selects the deterministic offline
 * backend; anything else loads through transformers.js.
 */

import { parseArgs } from "node:util";
import { backendFor, ImageDecodeError, ModelLoadError } from "./backend.js";
import { ExportMode, runExport } from "./export.js";

const MODES: ExportMode[] = ["sbert-text", "clip-image", "clip-text", "clip-proj"];

export async function main(argv: string[]): Promise<number> {
  let values;
  try {
    ({ values } = parseArgs({
      args: argv,
      options: {
        mode: { type: "string" },
        model: { type: "string" },
        input: { type: "string" },
        out: { type: "string" },
        batch: { type: "string" },
        device: { type: "string" },
        head: { type: "string" },
      },
    }));
  } catch (err) {
    console.error(`usage error: ${err instanceof Error ? err.message : err}`);
    return 1;
  }
  const mode = values.mode as ExportMode | undefined;
  if (!mode || !MODES.includes(mode) || !values.model || !values.out) {
    console.error(
      `usage: artcontext-export --mode <${MODES.join("|")}> --model <id> ` +
        "[--input <manifest>] --out <file.emb> [--batch N] [--device d] [--head visual|text]",
    );
    return 1;
  }
  if (values.head && values.head !== "visual" && values.head !== "text") {
    console.error("--head must be visual or text");
    return 1;
  }
  try {
    const backend = backendFor(values.model, values.device);
    const result = await runExport(
      {
        mode,
        model: values.model,
        input: values.input,
        out: values.out,
        batchSize: values.batch ? Number(values.batch) : undefined,
        head: values.head as "visual" | "text" | undefined,
      },
      backend,
    );
    console.log(
      `${mode}: wrote ${result.rows} rows x ${result.dim} dims to ${values.out}` +
        (result.skipped ? ` (${result.skipped} skipped, see sidecar)` : ""),
    );
    return 0;
  } catch (err) {
    if (err instanceof ModelLoadError) {
      console.error(`model error: ${err.message}`);
      return 2;
    }
    if (err instanceof ImageDecodeError) {
      console.error(`image error: ${err.message}`);
      return 2;
    }
    console.error(`error: ${err instanceof Error ? err.message : err}`);
    return 1;
  }
}

const invokedDirectly =
  process.argv[1] !== undefined && import.meta.url.endsWith(process.argv[1].split("/").pop()!);
if (invokedDirectly) {
  main(process.argv.slice(2)).then((code) => {
    process.exitCode = code;
  });
}
