/** Minimal image loading: binary PPM/PGM natively, PNG through pngjs. */

import * as fs from "fs";
import * as path from "path";

export interface RawImage {
  width: number;
  height: number;
  /** RGB interleaved, values in [0, 1]. */
  pixels: Float64Array;
}

export class ImageReadError extends Error {}

function parseNetpbm(blob: Buffer, label: string): RawImage {
  const magic = blob.subarray(0, 2).toString("ascii");
  if (magic !== "P6" && magic !== "P5") {
    throw new ImageReadError(`${label}: not a binary PPM/PGM`);
  }
  // header tokens: magic, width, height, maxval; comments start with '#'
  let offset = 2;
  const tokens: number[] = [];
  while (tokens.length < 3) {
    while (offset < blob.length && /\s/.test(String.fromCharCode(blob[offset]))) {
      offset++;
    }
    if (blob[offset] === 0x23) {
      while (offset < blob.length && blob[offset] !== 0x0a) offset++;
      continue;
    }
    let start = offset;
    while (offset < blob.length && !/\s/.test(String.fromCharCode(blob[offset]))) {
      offset++;
    }
    const token = blob.subarray(start, offset).toString("ascii");
    const value = Number(token);
    if (!Number.isInteger(value) || value <= 0) {
      throw new ImageReadError(`${label}: bad header token "${token}"`);
    }
    tokens.push(value);
  }
  offset++; // single whitespace after maxval
  const [width, height, maxval] = tokens;
  if (maxval > 255) {
    throw new ImageReadError(`${label}: only 8-bit samples supported`);
  }
  const channels = magic === "P6" ? 3 : 1;
  const need = width * height * channels;
  if (blob.length - offset < need) {
    throw new ImageReadError(`${label}: truncated pixel payload`);
  }
  const pixels = new Float64Array(width * height * 3);
  for (let i = 0; i < width * height; i++) {
    for (let c = 0; c < 3; c++) {
      const sample = blob[offset + i * channels + (channels === 3 ? c : 0)];
      pixels[i * 3 + c] = sample / maxval;
    }
  }
  return { width, height, pixels };
}

function parsePng(blob: Buffer, label: string): RawImage {
  // eslint-disable-next-line @typescript-eslint/no-var-requires
  const { PNG } = require("pngjs") as typeof import("pngjs");
  let png;
  try {
    png = PNG.sync.read(blob);
  } catch (err) {
    throw new ImageReadError(`${label}: ${(err as Error).message}`);
  }
  const pixels = new Float64Array(png.width * png.height * 3);
  for (let i = 0; i < png.width * png.height; i++) {
    for (let c = 0; c < 3; c++) {
      pixels[i * 3 + c] = png.data[i * 4 + c] / 255;
    }
  }
  return { width: png.width, height: png.height, pixels };
}

export function readImage(filePath: string): RawImage {
  const blob = fs.readFileSync(filePath);
  const ext = path.extname(filePath).toLowerCase();
  if (ext === ".ppm" || ext === ".pgm") {
    return parseNetpbm(blob, filePath);
  }
  if (ext === ".png") {
    return parsePng(blob, filePath);
  }
  throw new ImageReadError(`${filePath}: unsupported image type ${ext}`);
}

export const SUPPORTED_EXTENSIONS = [".ppm", ".pgm", ".png"];

/** Average-pool a rectangular region down to size x size cells, RGB. */
export function poolRegion(
  img: RawImage,
  x0: number,
  y0: number,
  width: number,
  height: number,
  size: number,
): Float64Array {
  const out = new Float64Array(size * size * 3);
  for (let cy = 0; cy < size; cy++) {
    for (let cx = 0; cx < size; cx++) {
      const yLo = y0 + Math.floor((cy * height) / size);
      const yHi = Math.max(yLo + 1, y0 + Math.floor(((cy + 1) * height) / size));
      const xLo = x0 + Math.floor((cx * width) / size);
      const xHi = Math.max(xLo + 1, x0 + Math.floor(((cx + 1) * width) / size));
      const sums = [0, 0, 0];
      let count = 0;
      for (let y = yLo; y < yHi; y++) {
        for (let x = xLo; x < xHi; x++) {
          const base = (y * img.width + x) * 3;
          sums[0] += img.pixels[base];
          sums[1] += img.pixels[base + 1];
          sums[2] += img.pixels[base + 2];
          count++;
        }
      }
      const cell = (cy * size + cx) * 3;
      out[cell] = sums[0] / count;
      out[cell + 1] = sums[1] / count;
      out[cell + 2] = sums[2] / count;
    }
  }
  return out;
}
