import { defineConfig } from "vitest/config";

export default defineConfig({
  test: {
    include: ["tests/**/*.test.ts"],
    // The full-document export forward pass is single-threaded math over an
    // 8k-token prefill; give the slow suite room.
    testTimeout: 600_000,
    hookTimeout: 600_000,
    pool: "forks",
  },
});
