#!/usr/bin/env node
"use strict";
// SMT-LIB 2.0 pipe REPL backed by the z3 WebAssembly build (npm: z3-solver).
// Reads commands from stdin, evaluates complete top-level s-expressions as
// they arrive, and writes solver output to stdout. Behaves like `z3 -in`
// for the command subset emitted by policygate.

const { init } = require("z3-solver");

// Split accumulated input into complete top-level s-expressions, honoring
// string literals ("" escapes), |quoted symbols| and ; line comments.
function splitCommands(buffer) {
  const commands = [];
  let depth = 0;
  let start = -1;
  let inString = false;
  let inQuoted = false;
  let inComment = false;
  let consumed = 0;
  for (let i = 0; i < buffer.length; i++) {
    const ch = buffer[i];
    if (inComment) {
      if (ch === "\n") inComment = false;
      continue;
    }
    if (inString) {
      if (ch === '"') inString = false; // "" re-enters on the next quote
      continue;
    }
    if (inQuoted) {
      if (ch === "|") inQuoted = false;
      continue;
    }
    if (ch === ";") {
      inComment = true;
    } else if (ch === '"') {
      inString = true;
    } else if (ch === "|") {
      inQuoted = true;
    } else if (ch === "(") {
      if (depth === 0) start = i;
      depth += 1;
    } else if (ch === ")") {
      depth -= 1;
      if (depth === 0 && start >= 0) {
        commands.push(buffer.slice(start, i + 1));
        consumed = i + 1;
        start = -1;
      }
      if (depth < 0) depth = 0;
    }
  }
  return [commands, buffer.slice(consumed)];
}

const EXIT_RE = /^\(\s*exit\s*\)$/;

async function main() {
  const { Z3 } = await init();
  const ctx = Z3.mk_context(Z3.mk_config());
  let pending = "";
  let queue = Promise.resolve();

  process.stdin.setEncoding("utf8");
  process.stdin.on("data", (chunk) => {
    pending += chunk;
    const [commands, rest] = splitCommands(pending);
    pending = rest;
    if (commands.length === 0) return;
    const exitAt = commands.findIndex((c) => EXIT_RE.test(c));
    const batch = (exitAt >= 0 ? commands.slice(0, exitAt) : commands).join("\n");
    queue = queue
      .then(async () => {
        if (batch.trim()) {
          const out = await Z3.eval_smtlib2_string(ctx, batch);
          if (out) process.stdout.write(out);
        }
        if (exitAt >= 0) process.exit(0);
      })
      .catch((err) => {
        const msg = String(err && err.message ? err.message : err).replace(/"/g, '""');
        process.stdout.write(`(error "${msg}")\n`);
      });
  });
  process.stdin.on("end", () => {
    queue.then(() => process.exit(0));
  });
}

main().catch((err) => {
  process.stderr.write(`z3pipe: failed to initialize solver: ${err}\n`);
  process.exit(1);
});
