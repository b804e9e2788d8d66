import { execFileSync } from "node:child_process";
import { mkdtempSync, readFileSync, rmSync, writeFileSync } from "node:fs";
import os from "node:os";
import path from "node:path";
import { fileURLToPath } from "node:url";

import { afterAll, beforeAll, describe, expect, it } from "vitest";

import { exportTrace, ExportSummary } from "../src/export";

const here = path.dirname(fileURLToPath(import.meta.url));
const MODEL_DIR = path.join(here, "..", "model");

const STEPS = 100;
const TOPK = 1024;
const PREFILL_CAP = 8192;
// Step of the trace the cross-layer overlap matrix is evaluated at.
const SIMILARITY_STEP = 0;

interface TaxonomyHead {
  layer: number;
  head: number;
  s_stable: number;
  role: string;
}

let tmp: string;
let summary: ExportSummary;
let heads: TaxonomyHead[];
let matrix: number[][];

beforeAll(() => {
  tmp = mkdtempSync(path.join(os.tmpdir(), "hct-acc-"));
  summary = exportTrace({
    modelDir: MODEL_DIR,
    prompt: "builtin",
    steps: STEPS,
    topk: TOPK,
    kernel: 0,
    prefillCap: PREFILL_CAP,
    out: path.join(tmp, "full.hct"),
  });

  const cfgPath = path.join(tmp, "config.json");
  writeFileSync(cfgPath, JSON.stringify({ profile: {} }));
  const outDir = path.join(tmp, "profile_out");
  // Profiling rejects malformed traces with a nonzero exit, which would
  // throw here; reaching the asserts below means validation was clean.
  execFileSync(
    "python3",
    ["-m", "heterocache.cli", "profile", "--config", cfgPath,
      "--trace", summary.out, "--out", outDir,
      "--layer-similarity-step", String(SIMILARITY_STEP)],
    { encoding: "utf8" },
  );
  heads = JSON.parse(
    readFileSync(path.join(outDir, "taxonomy.json"), "utf8"),
  ).heads;
  const csv = readFileSync(path.join(outDir, "layer_similarity.csv"), "utf8");
  matrix = csv
    .trim()
    .split("\n")
    .slice(1)
    .map((line) => line.split(",").map(Number));
});

afterAll(() => {
  rmSync(tmp, { recursive: true, force: true });
});

describe("long-document export profiled end to end", () => {
  it("uses the full document budget", () => {
    expect(summary.prefill_len).toBe(PREFILL_CAP);
    expect(summary.decode_steps).toBe(STEPS);
  });

  it("separates stable from volatile heads on a real model", () => {
    const scores = heads.map((h) => h.s_stable);
    expect(heads.length).toBe(8);
    expect(Math.max(...scores)).toBeGreaterThanOrEqual(0.5);
    expect(Math.min(...scores)).toBeLessThanOrEqual(0.3);
  });

  it("shows stronger intra-layer than cross-layer head agreement", () => {
    expect(matrix.length).toBe(2);
    const diag = (matrix[0][0] + matrix[1][1]) / 2;
    const off = (matrix[0][1] + matrix[1][0]) / 2;
    expect(diag).toBeGreaterThan(off);
  });

  it("makes satellite the plurality role", () => {
    const counts = new Map<string, number>();
    for (const h of heads) {
      counts.set(h.role, (counts.get(h.role) ?? 0) + 1);
    }
    const satellites = counts.get("satellite") ?? 0;
    for (const [role, n] of counts) {
      if (role !== "satellite") {
        expect(satellites, `satellite vs ${role}`).toBeGreaterThan(n);
      }
    }
  });
});
