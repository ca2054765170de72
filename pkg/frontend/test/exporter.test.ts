import { spawnSync } from "child_process";
import * as fs from "fs";
import * as os from "os";
import * as path from "path";

import { afterAll, beforeAll, describe, expect, it } from "vitest";

import { mulberry32, ProjectionBackbone } from "../src/backbone";
import { decodeBundle } from "../src/bundle";
import { exportCorpus, readCaptionFile, specForDataset } from "../src/exporter";

let workDir: string;

beforeAll(() => {
  workDir = fs.mkdtempSync(path.join(os.tmpdir(), "sfdr-export-"));
});

afterAll(() => {
  fs.rmSync(workDir, { recursive: true, force: true });
});

/** Binary P6 image with a class-dependent gradient plus seeded noise. */
function writePpm(filePath: string, size: number, classId: number, seed: number): void {
  const rand = mulberry32(seed);
  const header = Buffer.from(`P6\n${size} ${size}\n255\n`, "ascii");
  const pixels = Buffer.alloc(size * size * 3);
  for (let y = 0; y < size; y++) {
    for (let x = 0; x < size; x++) {
      const base = (y * size + x) * 3;
      pixels[base] = (classId * 60 + x / 4 + rand() * 30) & 0xff;
      pixels[base + 1] = (classId * 90 + y / 4 + rand() * 30) & 0xff;
      pixels[base + 2] = (classId * 120 + rand() * 30) & 0xff;
    }
  }
  fs.writeFileSync(filePath, Buffer.concat([header, pixels]));
}

function makeDataset(dir: string, n: number, size = 256): string {
  const imagesDir = path.join(dir, "images");
  fs.mkdirSync(imagesDir, { recursive: true });
  const captionLines: string[] = [];
  const sentences = [
    "many small houses beside a road",
    "an airplane on the gray runway",
    "several boats in the blue harbor",
  ];
  for (let i = 0; i < n; i++) {
    const id = `img_${String(i).padStart(3, "0")}`;
    writePpm(path.join(imagesDir, `${id}.ppm`), size, i % 3, 1000 + i);
    captionLines.push(`${id}\t0\t${sentences[i % 3]}`);
    captionLines.push(`${id}\t1\tthe ${sentences[i % 3]} seen from above`);
  }
  const captionsFile = path.join(dir, "captions.txt");
  fs.writeFileSync(captionsFile, captionLines.join("\n") + "\n");
  return captionsFile;
}

describe("exportCorpus", () => {
  it("writes bundles with the UCM window geometry (k = 49)", () => {
    const dir = path.join(workDir, "ucm");
    const captionsFile = makeDataset(dir, 4);
    const spec = specForDataset("ucm");
    const report = exportCorpus(spec, path.join(dir, "images"), captionsFile, path.join(dir, "out"));
    expect(report.written).toHaveLength(4);
    expect(report.header.k).toBe(49);
    expect(report.header.dR).toBe(192);

    const blob = fs.readFileSync(path.join(dir, "out", "bundles", "img_000.sfdr"));
    const { header, bundle } = decodeBundle(blob);
    expect(header.k).toBe(49);
    expect(bundle.captions).toHaveLength(2);
    expect(bundle.clipText).not.toBeNull();

    const manifest = fs.readFileSync(path.join(dir, "out", "corpus.manifest"), "utf-8");
    expect(manifest).toMatch(/train\tbundles\/img_\d+\.sfdr/);
    expect(fs.existsSync(path.join(dir, "out", "refs_train.txt"))).toBe(true);
    expect(fs.existsSync(path.join(dir, "out", "run_manifest.txt"))).toBe(true);
  });

  it("is deterministic: two exports are byte-identical", () => {
    const dir = path.join(workDir, "det");
    const captionsFile = makeDataset(dir, 3);
    for (const name of ["a", "b"]) {
      exportCorpus(
        specForDataset("ucm"),
        path.join(dir, "images"),
        captionsFile,
        path.join(dir, name),
      );
    }
    for (const rel of ["bundles/img_000.sfdr", "bundles/img_002.sfdr", "corpus.manifest"]) {
      const a = fs.readFileSync(path.join(dir, "a", rel));
      const b = fs.readFileSync(path.join(dir, "b", rel));
      expect(a.equals(b)).toBe(true);
    }
  });

  it("skips unreadable images and logs them", () => {
    const dir = path.join(workDir, "skip");
    const captionsFile = makeDataset(dir, 3);
    fs.writeFileSync(path.join(dir, "images", "img_001.ppm"), Buffer.from("P6 broken"));
    const logged: string[] = [];
    const report = exportCorpus(
      specForDataset("ucm"),
      path.join(dir, "images"),
      captionsFile,
      path.join(dir, "out"),
      (message) => logged.push(message),
    );
    expect(report.skipped).toEqual(["img_001"]);
    expect(report.written).toHaveLength(2);
    expect(logged.some((m) => m.includes("img_001"))).toBe(true);
  });

  it("aborts on a dimension mismatch", () => {
    const dir = path.join(workDir, "mismatch");
    const captionsFile = makeDataset(dir, 2, 128); // wrong size for ucm
    expect(() =>
      exportCorpus(specForDataset("ucm"), path.join(dir, "images"), captionsFile, path.join(dir, "out")),
    ).toThrow(/expects 256x256/);
  });

  it("mean-pools all captions unless an index is chosen", () => {
    const dir = path.join(workDir, "textmode");
    const captionsFile = makeDataset(dir, 3);
    const all = exportCorpus(
      specForDataset("ucm"),
      path.join(dir, "images"),
      captionsFile,
      path.join(dir, "all"),
    );
    const single = exportCorpus(
      specForDataset("ucm", { captionIndex: 0 }),
      path.join(dir, "images"),
      captionsFile,
      path.join(dir, "single"),
    );
    expect(all.written).toEqual(single.written);
    const a = decodeBundle(fs.readFileSync(path.join(dir, "all", "bundles", "img_000.sfdr")));
    const s = decodeBundle(fs.readFileSync(path.join(dir, "single", "bundles", "img_000.sfdr")));
    expect(Array.from(a.bundle.clipText!)).not.toEqual(Array.from(s.bundle.clipText!));
    // features other than the text vector are unchanged
    expect(Array.from(a.bundle.clipVisual)).toEqual(Array.from(s.bundle.clipVisual));
  });

  it("parses caption files strictly", () => {
    const bad = path.join(workDir, "bad_captions.txt");
    fs.writeFileSync(bad, "img_000 only-two-fields\n");
    expect(() => readCaptionFile(bad)).toThrow(/image_id<TAB>/);
  });
});

describe("primary-component conformance", () => {
  const probe = spawnSync("python3", ["-c", "import sfdr"], { encoding: "utf-8" });
  const pythonReady = probe.status === 0;

  it.skipIf(!pythonReady)("exported corpora pass the captioner's validator", () => {
    const dir = path.join(workDir, "conform");
    const captionsFile = makeDataset(dir, 3);
    const outDir = path.join(dir, "out");
    exportCorpus(specForDataset("ucm"), path.join(dir, "images"), captionsFile, outDir);

    const check = spawnSync(
      "python3",
      [
        "-c",
        [
          "import sys",
          "from sfdr.data_io import load_corpus, roi_window_count",
          `corpus = load_corpus(sys.argv[1])`,
          "bundles = corpus.all_bundles()",
          "assert len(bundles) == 3, len(bundles)",
          "assert corpus.header.k == roi_window_count(256, 64, 32)",
          "for b in bundles:",
          "    b.validate(corpus.header)",
          "print('ok', corpus.header.k)",
        ].join("\n"),
        outDir,
      ],
      { encoding: "utf-8" },
    );
    expect(check.stderr).toBe("");
    expect(check.status).toBe(0);
    expect(check.stdout.trim()).toBe("ok 49");
  });

  it.skipIf(!pythonReady)("round-trips bit-exactly through the captioner", () => {
    const dir = path.join(workDir, "roundtrip");
    const captionsFile = makeDataset(dir, 3);
    const outDir = path.join(dir, "out");
    exportCorpus(specForDataset("ucm"), path.join(dir, "images"), captionsFile, outDir);
    const bundlePath = path.join(outDir, "bundles", "img_001.sfdr");
    const rewritten = path.join(dir, "rewritten.sfdr");

    const script = [
      "import sys",
      "from sfdr.data_io import read_bundle, read_header, write_bundle",
      "header = read_header(sys.argv[1])",
      "bundle = read_bundle(sys.argv[1], expect=header)",
      "write_bundle(bundle, sys.argv[2], header)",
    ].join("\n");
    const run = spawnSync("python3", ["-c", script, bundlePath, rewritten], {
      encoding: "utf-8",
    });
    expect(run.stderr).toBe("");
    expect(run.status).toBe(0);
    expect(fs.readFileSync(rewritten).equals(fs.readFileSync(bundlePath))).toBe(true);
  });
});
