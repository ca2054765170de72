/** Sliding-window region extraction with average pooling per window. */

import { RawImage, poolRegion } from "./images";

export function roiWindowCount(beta: number, gamma: number, tau: number): number {
  if (tau <= 0) {
    throw new Error(`stride must be positive, got ${tau}`);
  }
  if (gamma > beta) {
    throw new Error(`window ${gamma} larger than image ${beta}`);
  }
  const perAxis = Math.floor((beta - gamma) / tau) + 1;
  return perAxis * perAxis;
}

export interface WindowOffset {
  x: number;
  y: number;
}

export function windowOffsets(beta: number, gamma: number, tau: number): WindowOffset[] {
  const perAxis = Math.floor((beta - gamma) / tau) + 1;
  const offsets: WindowOffset[] = [];
  for (let row = 0; row < perAxis; row++) {
    for (let col = 0; col < perAxis; col++) {
      offsets.push({ x: col * tau, y: row * tau });
    }
  }
  return offsets;
}

/**
 * Per-window region features: average-pool each gamma x gamma window down to
 * pool x pool RGB cells and flatten.  Returns k rows of 3 * pool^2 values.
 */
export function roiFeatures(
  img: RawImage,
  gamma: number,
  tau: number,
  pool: number,
): { rows: Float64Array[]; k: number } {
  if (img.width !== img.height) {
    throw new Error(`expected a square image, got ${img.width}x${img.height}`);
  }
  const offsets = windowOffsets(img.width, gamma, tau);
  const rows = offsets.map((off) => poolRegion(img, off.x, off.y, gamma, gamma, pool));
  return { rows, k: offsets.length };
}
