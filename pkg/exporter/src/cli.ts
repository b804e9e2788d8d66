#!/usr/bin/env node
/**
 * Command-line trace export.
 *
 * Example:
 *   hctrace-export --model model --prompt builtin --steps 100 \
 *       --topk 1024 --kernel 0 --out /tmp/fieldnotes.trace
 *
 * Prints a one-line JSON summary on success. Errors are one-line JSON on
 * stderr: exit 2 for bad flag values, 3 for unreadable or invalid inputs
 * (model bundle, prompt), 1 for anything unexpected.
 */

import yargs from "yargs";
import { hideBin } from "yargs/helpers";

import { ModelLoadError } from "./manifest.js";
import { ModelStateError } from "./model.js";
import { TokenizerError } from "./tokenizer.js";
import { ExportConfigError, PromptError, exportTrace } from "./export.js";

function fail(kind: string, message: string, code: number): never {
  process.stderr.write(JSON.stringify({ error: kind, message }) + "\n");
  process.exit(code);
}

export function main(argv: string[]): void {
  const args = yargs(argv)
    .scriptName("hctrace-export")
    .option("model", {
      type: "string",
      demandOption: true,
      describe: "Model bundle directory (manifest.json + weights.bin)",
    })
    .option("prompt", {
      type: "string",
      default: "builtin",
      describe: "Prompt document path, or 'builtin' for the bundled sample",
    })
    .option("steps", { type: "number", default: 100, describe: "Decode steps" })
    .option("topk", { type: "number", default: 1024, describe: "Entries kept per head per step" })
    .option("kernel", { type: "number", default: 0, describe: "Odd pooling kernel, 0 to disable" })
    .option("prefill-cap", {
      type: "number",
      default: 8192,
      describe: "Maximum prompt tokens kept for the prefill",
    })
    .option("out", { type: "string", demandOption: true, describe: "Output trace path" })
    .strict()
    .version(false)
    .fail((msg) => fail("config", msg ?? "bad arguments", 2))
    .parseSync();

  try {
    const summary = exportTrace({
      modelDir: args.model,
      prompt: args.prompt,
      steps: args.steps,
      topk: args.topk,
      kernel: args.kernel,
      prefillCap: args["prefill-cap"],
      out: args.out,
    });
    process.stdout.write(JSON.stringify(summary) + "\n");
  } catch (err) {
    if (err instanceof ExportConfigError) {
      fail("config", err.message, 2);
    }
    if (
      err instanceof PromptError ||
      err instanceof ModelLoadError ||
      err instanceof TokenizerError ||
      err instanceof ModelStateError
    ) {
      fail("input", err.message, 3);
    }
    fail("internal", err instanceof Error ? err.message : String(err), 1);
  }
}

main(hideBin(process.argv));
