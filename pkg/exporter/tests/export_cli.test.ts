import { execFileSync, execSync } from "node:child_process";
import { existsSync, mkdtempSync, readFileSync, rmSync, writeFileSync } from "node:fs";
import os from "node:os";
import path from "node:path";
import { fileURLToPath } from "node:url";

import { afterAll, beforeAll, describe, expect, it } from "vitest";

const here = path.dirname(fileURLToPath(import.meta.url));
const ROOT = path.join(here, "..");
const CLI = path.join(ROOT, "dist", "cli.js");
const MODEL_DIR = path.join(ROOT, "model");

let tmp: string;
let promptPath: string;

interface RunResult {
  status: number;
  stdout: string;
  stderr: string;
}

function runCli(args: string[]): RunResult {
  try {
    const stdout = execFileSync("node", [CLI, ...args], { encoding: "utf8" });
    return { status: 0, stdout, stderr: "" };
  } catch (err) {
    const e = err as { status: number; stdout: string; stderr: string };
    return { status: e.status, stdout: String(e.stdout), stderr: String(e.stderr) };
  }
}

function readTrace(file: string): { manifest: Record<string, unknown>; body: Buffer } {
  const buf = readFileSync(file);
  expect(buf.subarray(0, 8).toString("ascii")).toBe("HCTRACE1");
  const mlen = buf.readUInt32LE(8);
  const manifest = JSON.parse(buf.subarray(12, 12 + mlen).toString("utf8"));
  return { manifest, body: buf.subarray(12 + mlen) };
}

beforeAll(() => {
  if (!existsSync(CLI)) {
    execSync("npm run build", { cwd: ROOT, stdio: "inherit" });
  }
  tmp = mkdtempSync(path.join(os.tmpdir(), "hct-cli-"));
  const sample = readFileSync(path.join(MODEL_DIR, "sample.txt"), "utf8");
  promptPath = path.join(tmp, "prompt.txt");
  writeFileSync(promptPath, sample.slice(0, 300));
});

afterAll(() => {
  rmSync(tmp, { recursive: true, force: true });
});

describe("export command", () => {
  it("writes one record block per layer and head for prefill plus each step", () => {
    const out = path.join(tmp, "t1.hct");
    const res = runCli([
      "--model", MODEL_DIR,
      "--prompt", promptPath,
      "--steps", "1",
      "--topk", "16",
      "--out", out,
    ]);
    expect(res.status).toBe(0);
    const summary = JSON.parse(res.stdout);
    expect(summary.prefill_len).toBe(300);
    expect(summary.decode_steps).toBe(1);

    const { manifest, body } = readTrace(out);
    expect(manifest).toEqual({
      model_name: "fieldnotes-2l8h",
      num_layers: 2,
      heads_per_layer: 4,
      prefill_len: 300,
      decode_steps: 1,
      trace_topk: 16,
      pool_kernel_used: 0,
      bytes_per_kv_entry: 64,
    });
    // (decode_steps + 1) step blocks of layers * heads * topk 8-byte records.
    expect(body.length).toBe(2 * 2 * 4 * 16 * 8);
  });

  it("produces byte-identical files on repeated runs", () => {
    const a = path.join(tmp, "rep_a.hct");
    const b = path.join(tmp, "rep_b.hct");
    const args = ["--model", MODEL_DIR, "--prompt", promptPath, "--steps", "3",
      "--topk", "32"];
    expect(runCli([...args, "--out", a]).status).toBe(0);
    expect(runCli([...args, "--out", b]).status).toBe(0);
    expect(readFileSync(a).equals(readFileSync(b))).toBe(true);
  });

  it("records pooled scores when a kernel is requested", () => {
    const out = path.join(tmp, "pooled.hct");
    const res = runCli([
      "--model", MODEL_DIR,
      "--prompt", promptPath,
      "--steps", "2",
      "--topk", "16",
      "--kernel", "3",
      "--out", out,
    ]);
    expect(res.status).toBe(0);
    const { manifest } = readTrace(out);
    expect(manifest.pool_kernel_used).toBe(3);
  });

  it("rejects an even pooling kernel as a configuration error", () => {
    const res = runCli([
      "--model", MODEL_DIR,
      "--prompt", promptPath,
      "--kernel", "2",
      "--out", path.join(tmp, "never.hct"),
    ]);
    expect(res.status).toBe(2);
    expect(JSON.parse(res.stderr).error).toBe("config");
  });

  it("rejects a prompt that is too short to profile as an input error", () => {
    const shortPath = path.join(tmp, "short.txt");
    writeFileSync(shortPath, "the quick fox");
    const res = runCli([
      "--model", MODEL_DIR,
      "--prompt", shortPath,
      "--out", path.join(tmp, "never.hct"),
    ]);
    expect(res.status).toBe(3);
    expect(JSON.parse(res.stderr).error).toBe("input");
  });

  it("reports a missing model bundle as an input error", () => {
    const res = runCli([
      "--model", path.join(tmp, "no_such_model"),
      "--prompt", promptPath,
      "--out", path.join(tmp, "never.hct"),
    ]);
    expect(res.status).toBe(3);
    expect(JSON.parse(res.stderr).error).toBe("input");
  });
});

describe("consumer compatibility", () => {
  it("exports traces the profiling CLI accepts without validation errors", () => {
    const tracePath = path.join(tmp, "compat.hct");
    expect(
      runCli([
        "--model", MODEL_DIR,
        "--prompt", promptPath,
        "--steps", "4",
        "--topk", "32",
        "--out", tracePath,
      ]).status,
    ).toBe(0);

    const cfgPath = path.join(tmp, "profile_config.json");
    writeFileSync(cfgPath, JSON.stringify({ profile: {} }));
    const outDir = path.join(tmp, "profile_out");
    execFileSync(
      "python3",
      ["-m", "heterocache.cli", "profile", "--config", cfgPath,
        "--trace", tracePath, "--out", outDir],
      { encoding: "utf8" },
    );
    const taxonomy = JSON.parse(
      readFileSync(path.join(outDir, "taxonomy.json"), "utf8"),
    );
    expect(taxonomy.num_layers).toBe(2);
    expect(taxonomy.heads_per_layer).toBe(4);
    expect(taxonomy.heads.length).toBe(8);
  });
});
