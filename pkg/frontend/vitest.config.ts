import { defineConfig } from "vitest/config";

// The live-session test serves UI and API from one origin, exactly like
// cmd_serve in production; pointing the DOM environment at that origin
// keeps fetches same-origin.
export default defineConfig({
  test: {
    environment: "happy-dom",
    environmentOptions: {
      happyDOM: { url: process.env.MATATTR_SERVER || "http://localhost:8000" },
    },
    include: ["tests/**/*.test.ts"],
    testTimeout: 30000,
  },
});
