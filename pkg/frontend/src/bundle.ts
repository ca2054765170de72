/**
 * Feature-bundle binary format, bit-exact to the captioner's reader.
 *
 * Layout (little-endian throughout):
 *   "SFDR" | u32 version | u32 d_v,d_t,H,d_g,k,d_r | u8 flags
 *   | u32 idLen + utf8 id
 *   | f32 clipVisual[d_v] | f32 clipText[d_t] (flags bit 0)
 *   | f32 grid[H*d_g] | f32 roi[k*d_r]
 *   | u16 captionCount | (u32 len + utf8) per caption
 */

export const MAGIC = "SFDR";
export const FORMAT_VERSION = 1;

export interface CorpusHeader {
  dV: number;
  dT: number;
  H: number;
  dG: number;
  k: number;
  dR: number;
}

export interface FeatureBundle {
  imageId: string;
  clipVisual: Float32Array; // d_v
  clipText: Float32Array | null; // d_t, absent for inference-only bundles
  grid: Float32Array; // H * d_g row-major
  roi: Float32Array; // k * d_r row-major
  captions: string[];
}

export class BundleFormatError extends Error {}

function checkLength(name: string, arr: Float32Array, want: number): void {
  if (arr.length !== want) {
    throw new BundleFormatError(`${name} has ${arr.length} values, header says ${want}`);
  }
}

export function encodeBundle(bundle: FeatureBundle, header: CorpusHeader): Buffer {
  checkLength("clipVisual", bundle.clipVisual, header.dV);
  if (bundle.clipText !== null) {
    checkLength("clipText", bundle.clipText, header.dT);
  }
  checkLength("grid", bundle.grid, header.H * header.dG);
  checkLength("roi", bundle.roi, header.k * header.dR);
  for (const arr of [bundle.clipVisual, bundle.clipText, bundle.grid, bundle.roi]) {
    if (arr !== null && !arr.every(Number.isFinite)) {
      throw new BundleFormatError(`${bundle.imageId}: non-finite feature value`);
    }
  }

  const parts: Buffer[] = [];
  const u32 = (value: number) => {
    const buf = Buffer.alloc(4);
    buf.writeUInt32LE(value >>> 0, 0);
    return buf;
  };
  const str = (text: string) => {
    const raw = Buffer.from(text, "utf-8");
    return Buffer.concat([u32(raw.length), raw]);
  };
  const f32 = (arr: Float32Array) => {
    const buf = Buffer.alloc(arr.length * 4);
    arr.forEach((value, i) => buf.writeFloatLE(value, i * 4));
    return buf;
  };

  parts.push(Buffer.from(MAGIC, "ascii"));
  parts.push(u32(FORMAT_VERSION));
  for (const dim of [header.dV, header.dT, header.H, header.dG, header.k, header.dR]) {
    parts.push(u32(dim));
  }
  parts.push(Buffer.from([bundle.clipText !== null ? 1 : 0]));
  parts.push(str(bundle.imageId));
  parts.push(f32(bundle.clipVisual));
  if (bundle.clipText !== null) {
    parts.push(f32(bundle.clipText));
  }
  parts.push(f32(bundle.grid));
  parts.push(f32(bundle.roi));
  if (bundle.captions.length > 0xffff) {
    throw new BundleFormatError("too many captions for a u16 count");
  }
  const count = Buffer.alloc(2);
  count.writeUInt16LE(bundle.captions.length, 0);
  parts.push(count);
  for (const caption of bundle.captions) {
    parts.push(str(caption));
  }
  return Buffer.concat(parts);
}

class Cursor {
  offset = 0;

  constructor(private readonly blob: Buffer, private readonly label: string) {}

  take(n: number, what: string): Buffer {
    if (this.offset + n > this.blob.length) {
      throw new BundleFormatError(
        `${this.label}: truncated while reading ${what} at byte ${this.offset}`,
      );
    }
    const chunk = this.blob.subarray(this.offset, this.offset + n);
    this.offset += n;
    return chunk;
  }

  u8(what: string): number {
    return this.take(1, what).readUInt8(0);
  }

  u16(what: string): number {
    return this.take(2, what).readUInt16LE(0);
  }

  u32(what: string): number {
    return this.take(4, what).readUInt32LE(0);
  }

  text(what: string): string {
    const length = this.u32(`${what} length`);
    return this.take(length, what).toString("utf-8");
  }

  f32(count: number, what: string): Float32Array {
    const raw = this.take(count * 4, what);
    const out = new Float32Array(count);
    for (let i = 0; i < count; i++) {
      out[i] = raw.readFloatLE(i * 4);
    }
    return out;
  }

  done(): void {
    if (this.offset !== this.blob.length) {
      throw new BundleFormatError(
        `${this.label}: ${this.blob.length - this.offset} trailing bytes at ${this.offset}`,
      );
    }
  }
}

export function decodeBundle(
  blob: Buffer,
  label = "bundle",
): { header: CorpusHeader; bundle: FeatureBundle } {
  const cursor = new Cursor(blob, label);
  if (cursor.take(4, "magic").toString("ascii") !== MAGIC) {
    throw new BundleFormatError(`${label}: bad magic at byte 0`);
  }
  const version = cursor.u32("version");
  if (version !== FORMAT_VERSION) {
    throw new BundleFormatError(`${label}: unsupported version ${version}`);
  }
  const header: CorpusHeader = {
    dV: cursor.u32("d_v"),
    dT: cursor.u32("d_t"),
    H: cursor.u32("H"),
    dG: cursor.u32("d_g"),
    k: cursor.u32("k"),
    dR: cursor.u32("d_r"),
  };
  const flags = cursor.u8("flags");
  const imageId = cursor.text("image id");
  const clipVisual = cursor.f32(header.dV, "clip_visual");
  const clipText = flags & 1 ? cursor.f32(header.dT, "clip_text") : null;
  const grid = cursor.f32(header.H * header.dG, "grid");
  const roi = cursor.f32(header.k * header.dR, "roi");
  const captionCount = cursor.u16("caption count");
  const captions: string[] = [];
  for (let i = 0; i < captionCount; i++) {
    captions.push(cursor.text(`caption ${i}`));
  }
  cursor.done();
  return { header, bundle: { imageId, clipVisual, clipText, grid, roi, captions } };
}
