/**
 * Encoder abstraction for the export pipeline.
 *
 * The default implementation is a deterministic projection encoder: pooled
 * pixel statistics (or hashed tokens) pushed through fixed seeded random
 * projections.  It stands in for the pretrained image/text models in
 * environments where those cannot be downloaded; any real model can be
 * plugged in by implementing the Backbone interface, and the bundle format
 * does not care which produced the vectors.
 */

import { RawImage, poolRegion } from "./images";

export interface BackboneDims {
  dV: number;
  dT: number;
  H: number;
  dG: number;
}

export interface Backbone {
  readonly dims: BackboneDims;
  visual(img: RawImage): Float32Array;
  text(captions: string[]): Float32Array;
  grid(img: RawImage): Float32Array;
}

/** Deterministic PRNG (mulberry32) so exports are byte-reproducible. */
export function mulberry32(seed: number): () => number {
  let state = seed >>> 0;
  return () => {
    state = (state + 0x6d2b79f5) >>> 0;
    let t = state;
    t = Math.imul(t ^ (t >>> 15), t | 1);
    t ^= t + Math.imul(t ^ (t >>> 7), t | 61);
    return ((t ^ (t >>> 14)) >>> 0) / 4294967296;
  };
}

function projectionMatrix(seed: number, rows: number, cols: number): Float64Array {
  const rand = mulberry32(seed);
  const scale = 1 / Math.sqrt(rows);
  const out = new Float64Array(rows * cols);
  for (let i = 0; i < out.length; i++) {
    // Box-Muller from two uniforms
    const u = Math.max(rand(), 1e-12);
    const v = rand();
    out[i] = Math.sqrt(-2 * Math.log(u)) * Math.cos(2 * Math.PI * v) * scale;
  }
  return out;
}

function project(input: Float64Array, matrix: Float64Array, cols: number): Float32Array {
  const rows = input.length;
  const out = new Float32Array(cols);
  for (let j = 0; j < cols; j++) {
    let sum = 0;
    for (let i = 0; i < rows; i++) {
      sum += input[i] * matrix[i * cols + j];
    }
    out[j] = Math.fround(sum);
  }
  return out;
}

export function tokenizeCaption(sentence: string): string[] {
  return sentence
    .toLowerCase()
    .replace(/[^a-z0-9]+/g, " ")
    .split(" ")
    .filter((t) => t.length > 0);
}

/** FNV-1a, stable across platforms. */
function hashToken(token: string): number {
  let hash = 0x811c9dc5;
  for (let i = 0; i < token.length; i++) {
    hash ^= token.charCodeAt(i);
    hash = Math.imul(hash, 0x01000193) >>> 0;
  }
  return hash >>> 0;
}

const VISUAL_SEED = 0x5fd10001;
const GRID_SEED = 0x5fd10002;

export class ProjectionBackbone implements Backbone {
  readonly dims: BackboneDims;
  private readonly visualPool = 16;
  private readonly cellPool = 4;
  private readonly visualMatrix: Float64Array;
  private readonly gridMatrix: Float64Array;
  private readonly gridSide: number;

  constructor(dims: BackboneDims) {
    const side = Math.sqrt(dims.H);
    if (!Number.isInteger(side)) {
      throw new Error(`grid row count H=${dims.H} must be a square number`);
    }
    this.dims = dims;
    this.gridSide = side;
    this.visualMatrix = projectionMatrix(
      VISUAL_SEED,
      this.visualPool * this.visualPool * 3,
      dims.dV,
    );
    this.gridMatrix = projectionMatrix(GRID_SEED, this.cellPool * this.cellPool * 3, dims.dG);
  }

  visual(img: RawImage): Float32Array {
    const pooled = poolRegion(img, 0, 0, img.width, img.height, this.visualPool);
    return project(pooled, this.visualMatrix, this.dims.dV);
  }

  text(captions: string[]): Float32Array {
    if (captions.length === 0) {
      throw new Error("text encoder needs at least one caption");
    }
    const acc = new Float64Array(this.dims.dT);
    for (const caption of captions) {
      const tokens = tokenizeCaption(caption);
      const weight = 1 / Math.max(1, Math.sqrt(tokens.length));
      for (const token of tokens) {
        const h = hashToken(token);
        acc[h % this.dims.dT] += weight;
        acc[(h >>> 16) % this.dims.dT] += weight * ((h & 1) === 0 ? 1 : -1);
      }
    }
    const out = new Float32Array(this.dims.dT);
    for (let i = 0; i < acc.length; i++) {
      out[i] = Math.fround(acc[i] / captions.length);
    }
    return out;
  }

  grid(img: RawImage): Float32Array {
    const side = this.gridSide;
    const out = new Float32Array(this.dims.H * this.dims.dG);
    const cellW = Math.floor(img.width / side);
    const cellH = Math.floor(img.height / side);
    for (let row = 0; row < side; row++) {
      for (let col = 0; col < side; col++) {
        const pooled = poolRegion(img, col * cellW, row * cellH, cellW, cellH, this.cellPool);
        const projected = project(pooled, this.gridMatrix, this.dims.dG);
        out.set(projected, (row * side + col) * this.dims.dG);
      }
    }
    return out;
  }
}
