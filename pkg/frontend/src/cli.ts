#!/usr/bin/env node
/**
 * sfdr-export: write feature bundles for a captioned image directory.
 *
 *   sfdr-export export --dataset ucm --images <dir> --captions <file> --out <dir>
 *                      [--caption-index N] [--dv 64] [--dt 64] [--grid-rows 49]
 *                      [--dg 96] [--pool 8] [--seed 13]
 *   sfdr-export window-count --beta 256 --gamma 64 --tau 32
 */

import { ProjectionBackbone } from "./backbone";
import { DATASET_PRESETS, exportCorpus, specForDataset } from "./exporter";
import { roiWindowCount } from "./windows";

function parseFlags(argv: string[]): Map<string, string> {
  const flags = new Map<string, string>();
  for (let i = 0; i < argv.length; i += 2) {
    if (!argv[i].startsWith("--") || i + 1 >= argv.length) {
      throw new Error(`expected --flag value pairs, got "${argv[i]}"`);
    }
    flags.set(argv[i].slice(2), argv[i + 1]);
  }
  return flags;
}

function requireFlag(flags: Map<string, string>, name: string): string {
  const value = flags.get(name);
  if (value === undefined) {
    throw new Error(`missing required --${name}`);
  }
  return value;
}

function intFlag(flags: Map<string, string>, name: string, fallback: number): number {
  const raw = flags.get(name);
  if (raw === undefined) return fallback;
  const value = Number(raw);
  if (!Number.isInteger(value)) {
    throw new Error(`--${name} must be an integer, got "${raw}"`);
  }
  return value;
}

function main(argv: string[]): number {
  const [command, ...rest] = argv;
  try {
    if (command === "window-count") {
      const flags = parseFlags(rest);
      const count = roiWindowCount(
        Number(requireFlag(flags, "beta")),
        Number(requireFlag(flags, "gamma")),
        Number(requireFlag(flags, "tau")),
      );
      console.log(String(count));
      return 0;
    }
    if (command === "export") {
      const flags = parseFlags(rest);
      const dataset = requireFlag(flags, "dataset");
      if (!DATASET_PRESETS[dataset]) {
        throw new Error(
          `unknown dataset "${dataset}"; have ${Object.keys(DATASET_PRESETS).join(", ")}`,
        );
      }
      const backbone = new ProjectionBackbone({
        dV: intFlag(flags, "dv", 64),
        dT: intFlag(flags, "dt", 64),
        H: intFlag(flags, "grid-rows", 49),
        dG: intFlag(flags, "dg", 96),
      });
      const spec = specForDataset(dataset, {
        backbone,
        roiPool: intFlag(flags, "pool", 8),
        splitSeed: intFlag(flags, "seed", 13),
        captionIndex: flags.has("caption-index")
          ? intFlag(flags, "caption-index", 0)
          : undefined,
      });
      const report = exportCorpus(
        spec,
        requireFlag(flags, "images"),
        requireFlag(flags, "captions"),
        requireFlag(flags, "out"),
      );
      console.log(
        `exported ${report.written.length} bundles (skipped ${report.skipped.length}); ` +
          `k=${report.header.k}, d_r=${report.header.dR}`,
      );
      return 0;
    }
    console.error("usage: sfdr-export <export|window-count> [flags]");
    return 1;
  } catch (err) {
    console.error(`error: ${(err as Error).message}`);
    return 1;
  }
}

process.exit(main(process.argv.slice(2)));
