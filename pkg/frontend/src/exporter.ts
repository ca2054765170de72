/**
 * Export pipeline: captioned images in, feature bundles + corpus manifest out.
 *
 * Window geometry follows the per-dataset sliding-window settings; region
 * features are average-pooled per window and flattened.  Exports are fully
 * deterministic, so running twice yields byte-identical files.
 */

import * as fs from "fs";
import * as path from "path";

import { Backbone, mulberry32, ProjectionBackbone } from "./backbone";
import { CorpusHeader, encodeBundle, FeatureBundle } from "./bundle";
import { ImageReadError, readImage, SUPPORTED_EXTENSIONS } from "./images";
import { roiFeatures, roiWindowCount } from "./windows";

export interface DatasetPreset {
  imageSize: number; // beta
  windowSize: number; // gamma
  stride: number; // tau
}

export const DATASET_PRESETS: Record<string, DatasetPreset> = {
  sydney: { imageSize: 500, windowSize: 80, stride: 70 },
  ucm: { imageSize: 256, windowSize: 64, stride: 32 },
  rsicd: { imageSize: 224, windowSize: 32, stride: 32 },
};

export interface ExportSpec {
  dataset: string;
  imageSize: number;
  windowSize: number;
  stride: number;
  roiPool: number; // windows pool to roiPool^2 RGB cells; d_r = 3 * roiPool^2
  backbone: Backbone;
  /** Encode only this caption instead of mean-pooling all of them. */
  captionIndex?: number;
  /** Seed for the deterministic train/val/test shuffle. */
  splitSeed: number;
}

export function specForDataset(
  dataset: string,
  options: Partial<Omit<ExportSpec, "dataset">> = {},
): ExportSpec {
  const preset = DATASET_PRESETS[dataset];
  if (!preset) {
    throw new Error(`unknown dataset ${dataset}; have ${Object.keys(DATASET_PRESETS).join(", ")}`);
  }
  const backbone =
    options.backbone ?? new ProjectionBackbone({ dV: 64, dT: 64, H: 49, dG: 96 });
  return {
    dataset,
    imageSize: preset.imageSize,
    windowSize: preset.windowSize,
    stride: preset.stride,
    roiPool: options.roiPool ?? 8,
    backbone,
    captionIndex: options.captionIndex,
    splitSeed: options.splitSeed ?? 13,
  };
}

export function headerForSpec(spec: ExportSpec): CorpusHeader {
  const dims = spec.backbone.dims;
  return {
    dV: dims.dV,
    dT: dims.dT,
    H: dims.H,
    dG: dims.dG,
    k: roiWindowCount(spec.imageSize, spec.windowSize, spec.stride),
    dR: 3 * spec.roiPool * spec.roiPool,
  };
}

/** Caption file rows: image_id <TAB> ref_index <TAB> sentence. */
export function readCaptionFile(filePath: string): Map<string, string[]> {
  const captions = new Map<string, string[]>();
  const text = fs.readFileSync(filePath, "utf-8");
  text.split("\n").forEach((line, idx) => {
    if (!line.trim()) return;
    const parts = line.split("\t");
    if (parts.length !== 3) {
      throw new Error(`${filePath}:${idx + 1}: expected 'image_id<TAB>index<TAB>sentence'`);
    }
    const list = captions.get(parts[0]) ?? [];
    list.push(parts[2]);
    captions.set(parts[0], list);
  });
  return captions;
}

export interface ExportReport {
  written: string[];
  skipped: string[];
  header: CorpusHeader;
}

function assignSplits(ids: string[], seed: number): Map<string, string> {
  const shuffled = [...ids];
  const rand = mulberry32(seed);
  for (let i = shuffled.length - 1; i > 0; i--) {
    const j = Math.floor(rand() * (i + 1));
    [shuffled[i], shuffled[j]] = [shuffled[j], shuffled[i]];
  }
  const n = shuffled.length;
  const held = n >= 3 ? Math.max(1, Math.floor(n / 10)) : 0;
  const assignment = new Map<string, string>();
  shuffled.forEach((id, idx) => {
    if (idx < held) assignment.set(id, "test");
    else if (idx < 2 * held) assignment.set(id, "val");
    else assignment.set(id, "train");
  });
  return assignment;
}

export function exportCorpus(
  spec: ExportSpec,
  imagesDir: string,
  captionsFile: string,
  outDir: string,
  log: (message: string) => void = console.error,
): ExportReport {
  const captions = readCaptionFile(captionsFile);
  const header = headerForSpec(spec);
  const bundlesDir = path.join(outDir, "bundles");
  fs.mkdirSync(bundlesDir, { recursive: true });

  const files = fs
    .readdirSync(imagesDir)
    .filter((f) => SUPPORTED_EXTENSIONS.includes(path.extname(f).toLowerCase()))
    .sort();
  const written: string[] = [];
  const skipped: string[] = [];
  const perImageCaptions = new Map<string, string[]>();

  for (const file of files) {
    const imageId = path.basename(file, path.extname(file));
    const refs = captions.get(imageId);
    if (!refs || refs.length === 0) {
      log(`skip ${imageId}: no captions`);
      skipped.push(imageId);
      continue;
    }
    let img;
    try {
      img = readImage(path.join(imagesDir, file));
    } catch (err) {
      if (err instanceof ImageReadError) {
        log(`skip ${imageId}: ${err.message}`);
        skipped.push(imageId);
        continue;
      }
      throw err;
    }
    if (img.width !== spec.imageSize || img.height !== spec.imageSize) {
      throw new Error(
        `${imageId}: image is ${img.width}x${img.height}, dataset ${spec.dataset} ` +
          `expects ${spec.imageSize}x${spec.imageSize}`,
      );
    }

    const encodeRefs =
      spec.captionIndex !== undefined ? [refs[spec.captionIndex % refs.length]] : refs;
    const { rows, k } = roiFeatures(img, spec.windowSize, spec.stride, spec.roiPool);
    if (k !== header.k) {
      throw new Error(`${imageId}: ${k} windows but header says ${header.k}`);
    }
    const roi = new Float32Array(header.k * header.dR);
    rows.forEach((row, i) => {
      row.forEach((value, j) => {
        roi[i * header.dR + j] = Math.fround(value);
      });
    });

    const bundle: FeatureBundle = {
      imageId,
      clipVisual: spec.backbone.visual(img),
      clipText: spec.backbone.text(encodeRefs),
      grid: spec.backbone.grid(img),
      roi,
      captions: refs,
    };
    fs.writeFileSync(path.join(bundlesDir, `${imageId}.sfdr`), encodeBundle(bundle, header));
    written.push(imageId);
    perImageCaptions.set(imageId, refs);
  }

  if (written.length === 0) {
    throw new Error(`no exportable images found in ${imagesDir}`);
  }

  const splits = assignSplits(written, spec.splitSeed);
  const manifestLines: string[] = [];
  const refLines: Record<string, string[]> = { train: [], val: [], test: [] };
  for (const split of ["train", "val", "test"]) {
    for (const id of written) {
      if (splits.get(id) !== split) continue;
      manifestLines.push(`${split}\tbundles/${id}.sfdr`);
      perImageCaptions.get(id)!.forEach((sentence, idx) => {
        refLines[split].push(`${id}\t${idx}\t${sentence}`);
      });
    }
  }
  fs.writeFileSync(path.join(outDir, "corpus.manifest"), manifestLines.join("\n") + "\n");
  for (const split of ["train", "val", "test"]) {
    const body = refLines[split].length ? refLines[split].join("\n") + "\n" : "";
    fs.writeFileSync(path.join(outDir, `refs_${split}.txt`), body);
  }
  const manifest = [
    `command=export --dataset ${spec.dataset}`,
    `beta=${spec.imageSize}`,
    `gamma=${spec.windowSize}`,
    `tau=${spec.stride}`,
    `roi_pool=${spec.roiPool}`,
    `split_seed=${spec.splitSeed}`,
    `caption_index=${spec.captionIndex ?? "all-mean"}`,
    `dims=d_v=${header.dV},d_t=${header.dT},H=${header.H},d_g=${header.dG},k=${header.k},d_r=${header.dR}`,
    `written=${written.length}`,
    `skipped=${skipped.length}`,
  ];
  fs.writeFileSync(path.join(outDir, "run_manifest.txt"), manifest.join("\n") + "\n");
  return { written, skipped, header };
}
