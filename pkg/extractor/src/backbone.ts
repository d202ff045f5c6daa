/**
 * Feature backbones. The engine only sees H2VF files, so anything that
 * maps images and text strings to unit-norm d-vectors plugs in here.
 *
 * "hash-v1" is a deterministic random-projection backbone: each 16 x 16
 * patch is summarized by raw color statistics and projected through a
 * seeded pseudo-random matrix. It carries no semantics beyond appearance
 * similarity, needs no weights, and makes the exporter fully testable
 * offline. Contrastively pretrained backbones (the intended production
 * path) require downloadable weights and slot in behind the same
 * interface.
 */

import { RgbImage } from "./image.js";

export interface PatchFeatures {
  tokens: Float32Array; // (hP * wP) x d
  hP: number;
  wP: number;
  d: number;
  global: Float32Array;
}

export interface Backbone {
  readonly id: string;
  readonly d: number;
  encodeImage(img: RgbImage): PatchFeatures;
  encodeText(text: string): Float32Array;
}

/** xorshift128 PRNG; deterministic across platforms for fixed seeds. */
class XorShift {
  private s0: number;
  private s1: number;
  private s2: number;
  private s3: number;

  constructor(seed: number) {
    this.s0 = seed >>> 0 || 1;
    this.s1 = (seed * 1812433253 + 1) >>> 0;
    this.s2 = (this.s1 * 1812433253 + 1) >>> 0;
    this.s3 = (this.s2 * 1812433253 + 1) >>> 0;
    for (let i = 0; i < 16; i++) this.next();
  }

  next(): number {
    const t = this.s3;
    const s = this.s0;
    this.s3 = this.s2;
    this.s2 = this.s1;
    this.s1 = s;
    let x = t ^ (t << 11);
    x ^= x >>> 8;
    this.s0 = (x ^ s ^ (s >>> 19)) >>> 0;
    return this.s0 / 0x100000000;
  }

  /** Approximately standard normal via the central limit of 12 uniforms. */
  gauss(): number {
    let acc = 0;
    for (let i = 0; i < 12; i++) acc += this.next();
    return acc - 6;
  }
}

function l2normalize(vec: Float32Array): Float32Array {
  let norm = 0;
  for (const v of vec) norm += v * v;
  norm = Math.sqrt(norm);
  if (norm < 1e-12) {
    vec[0] = 1; // degenerate inputs map to a fixed unit vector
    return vec;
  }
  for (let i = 0; i < vec.length; i++) vec[i] /= norm;
  return vec;
}

function hashString(text: string): number {
  let h = 2166136261 >>> 0; // FNV-1a
  for (let i = 0; i < text.length; i++) {
    h ^= text.charCodeAt(i);
    h = Math.imul(h, 16777619) >>> 0;
  }
  return h;
}

const PATCH = 16;
const DESC = 51; // 4x4 grayscale + 4x4 per-channel means across 3 channels

export class HashBackbone implements Backbone {
  readonly id = "hash-v1";
  readonly d: number;
  private projection: Float64Array; // DESC x d
  private textSeedBase = 0x5eed;

  constructor(d = 64) {
    this.d = d;
    this.projection = new Float64Array(DESC * d);
    const gen = new XorShift(0x1234abcd);
    for (let i = 0; i < this.projection.length; i++) {
      this.projection[i] = gen.gauss() / Math.sqrt(DESC);
    }
  }

  private describePatch(img: RgbImage, py: number, px: number): Float64Array {
    // 4x4 grid of mean intensities per channel plus grayscale contrast
    const desc = new Float64Array(DESC);
    let idx = 0;
    for (let by = 0; by < 4; by++) {
      for (let bx = 0; bx < 4; bx++) {
        let sums = [0, 0, 0];
        let count = 0;
        for (let y = by * 4; y < by * 4 + 4; y++) {
          for (let x = bx * 4; x < bx * 4 + 4; x++) {
            const yy = py * PATCH + y;
            const xx = px * PATCH + x;
            const off = (yy * img.width + xx) * 3;
            sums[0] += img.data[off];
            sums[1] += img.data[off + 1];
            sums[2] += img.data[off + 2];
            count++;
          }
        }
        desc[idx++] = sums[0] / count;
        desc[idx++] = sums[1] / count;
        desc[idx++] = sums[2] / count;
      }
    }
    // leftover slots: global patch statistics
    desc[48] = desc.slice(0, 48).reduce((a, b) => a + b, 0) / 48;
    let varAcc = 0;
    for (let i = 0; i < 48; i++) varAcc += (desc[i] - desc[48]) ** 2;
    desc[49] = Math.sqrt(varAcc / 48);
    desc[50] = 1; // bias channel keeps zero-variance patches non-degenerate
    return desc;
  }

  encodeImage(img: RgbImage): PatchFeatures {
    if (img.height % PATCH !== 0 || img.width % PATCH !== 0) {
      throw new Error(`image size ${img.height}x${img.width} is not a multiple of ${PATCH}`);
    }
    const hP = img.height / PATCH;
    const wP = img.width / PATCH;
    const tokens = new Float32Array(hP * wP * this.d);
    const global = new Float64Array(this.d);
    for (let py = 0; py < hP; py++) {
      for (let px = 0; px < wP; px++) {
        const desc = this.describePatch(img, py, px);
        const row = new Float32Array(this.d);
        for (let j = 0; j < this.d; j++) {
          let acc = 0;
          for (let i = 0; i < DESC; i++) acc += desc[i] * this.projection[i * this.d + j];
          row[j] = acc;
        }
        l2normalize(row);
        const base = (py * wP + px) * this.d;
        for (let j = 0; j < this.d; j++) {
          tokens[base + j] = row[j];
          global[j] += row[j];
        }
      }
    }
    const globalF = new Float32Array(this.d);
    for (let j = 0; j < this.d; j++) globalF[j] = global[j] / (hP * wP);
    return { tokens, hP, wP, d: this.d, global: globalF };
  }

  encodeText(text: string): Float32Array {
    const rng = new XorShift((hashString(text) ^ this.textSeedBase) >>> 0);
    const vec = new Float32Array(this.d);
    for (let j = 0; j < this.d; j++) vec[j] = rng.gauss();
    return l2normalize(vec);
  }
}

export function resolveBackbone(id: string, d: number): Backbone {
  if (id === "hash-v1") return new HashBackbone(d);
  throw new Error(
    `backbone '${id}' is not available in this build; ` +
    `pretrained vision-language backbones need downloadable weights. ` +
    `Use 'hash-v1' for weight-free deterministic features.`,
  );
}
