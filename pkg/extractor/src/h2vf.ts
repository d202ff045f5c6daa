/**
 * Binary readers/writers for the engine's feature, prompt, and mask files.
 *
 * Layout (shared by all three):
 *   magic (4 bytes) | version u8 = 1 | header_len u32 LE | UTF-8 JSON header
 *   | payload
 *
 * Feature payloads are float32 LE row-major; masks are uint8 row-major.
 * These bytes must parse under the Python engine's readers, so any change
 * here is a format break.
 */

import * as fs from "node:fs";
import * as path from "node:path";

const MAGIC_FEATURES = Buffer.from("H2VF", "ascii");
const MAGIC_MASK = Buffer.from("H2VM", "ascii");
const VERSION = 1;

export interface FeatureGrid {
  /** (hP * wP) x d row-major patch tokens */
  tokens: Float32Array;
  hP: number;
  wP: number;
  d: number;
  global?: Float32Array;
}

export interface PromptBank {
  normal: Float32Array; // nNormal x d row-major
  abnormal: Float32Array; // nAbnormal x d
  nNormal: number;
  nAbnormal: number;
  d: number;
  labels: string[];
}

export interface MaskGrid {
  values: Uint8Array; // H x W row-major, entries 0/1
  H: number;
  W: number;
}

function pack(magic: Buffer, header: object, payload: Buffer): Buffer {
  const headerBytes = Buffer.from(JSON.stringify(sortKeys(header)), "utf-8");
  const prefix = Buffer.alloc(9);
  magic.copy(prefix, 0);
  prefix.writeUInt8(VERSION, 4);
  prefix.writeUInt32LE(headerBytes.length, 5);
  return Buffer.concat([prefix, headerBytes, payload]);
}

function sortKeys(obj: any): any {
  if (Array.isArray(obj)) return obj.map(sortKeys);
  if (obj !== null && typeof obj === "object") {
    const out: Record<string, unknown> = {};
    for (const key of Object.keys(obj).sort()) out[key] = sortKeys(obj[key]);
    return out;
  }
  return obj;
}

function unpack(blob: Buffer, magic: Buffer, source: string): { header: any; payload: Buffer } {
  if (blob.length < 9) throw new Error(`${source}: file too short`);
  if (!blob.subarray(0, 4).equals(magic)) {
    throw new Error(`${source}: bad magic ${blob.subarray(0, 4).toString()}`);
  }
  if (blob.readUInt8(4) !== VERSION) {
    throw new Error(`${source}: unsupported version ${blob.readUInt8(4)}`);
  }
  const headerLen = blob.readUInt32LE(5);
  if (blob.length < 9 + headerLen) throw new Error(`${source}: truncated header`);
  const header = JSON.parse(blob.subarray(9, 9 + headerLen).toString("utf-8"));
  return { header, payload: blob.subarray(9 + headerLen) };
}

function atomicWrite(filePath: string, data: Buffer): void {
  const tmp = path.join(path.dirname(filePath), path.basename(filePath) + ".tmp");
  fs.writeFileSync(tmp, data);
  fs.renameSync(tmp, filePath);
}

function floatPayload(...arrays: Float32Array[]): Buffer {
  const total = arrays.reduce((n, a) => n + a.length, 0);
  const buf = Buffer.alloc(total * 4);
  let offset = 0;
  for (const arr of arrays) {
    for (let i = 0; i < arr.length; i++) {
      buf.writeFloatLE(arr[i], offset);
      offset += 4;
    }
  }
  return buf;
}

function readFloats(payload: Buffer, count: number, offset: number): Float32Array {
  const out = new Float32Array(count);
  for (let i = 0; i < count; i++) out[i] = payload.readFloatLE(offset + i * 4);
  return out;
}

export function writeFeatureGrid(grid: FeatureGrid, filePath: string): void {
  if (grid.tokens.length !== grid.hP * grid.wP * grid.d) {
    throw new Error("token count does not match h_p * w_p * d");
  }
  for (const v of grid.tokens) {
    if (!Number.isFinite(v)) throw new Error("tokens contain non-finite entries");
  }
  const header = {
    kind: "features",
    h_p: grid.hP,
    w_p: grid.wP,
    d: grid.d,
    has_global: grid.global !== undefined,
  };
  const arrays = grid.global ? [grid.tokens, grid.global] : [grid.tokens];
  atomicWrite(filePath, pack(MAGIC_FEATURES, header, floatPayload(...arrays)));
}

export function readFeatureGrid(filePath: string): FeatureGrid {
  const { header, payload } = unpack(fs.readFileSync(filePath), MAGIC_FEATURES, filePath);
  if (header.kind !== "features") throw new Error(`${filePath}: not a feature file`);
  const hP = header.h_p, wP = header.w_p, d = header.d;
  const hasGlobal = Boolean(header.has_global);
  const expect = (hP * wP * d + (hasGlobal ? d : 0)) * 4;
  if (payload.length !== expect) {
    throw new Error(`${filePath}: payload ${payload.length} bytes, expected ${expect}`);
  }
  return {
    tokens: readFloats(payload, hP * wP * d, 0),
    hP,
    wP,
    d,
    global: hasGlobal ? readFloats(payload, d, hP * wP * d * 4) : undefined,
  };
}

export function writePromptBank(
  bank: PromptBank,
  filePath: string,
  kind: "prompts-base" | "prompts" = "prompts-base",
): void {
  const header = {
    kind,
    n_normal: bank.nNormal,
    n_abnormal: bank.nAbnormal,
    d: bank.d,
    labels: bank.labels,
  };
  atomicWrite(filePath, pack(MAGIC_FEATURES, header, floatPayload(bank.normal, bank.abnormal)));
}

export function readPromptBank(filePath: string): { bank: PromptBank; kind: string } {
  const { header, payload } = unpack(fs.readFileSync(filePath), MAGIC_FEATURES, filePath);
  if (header.kind !== "prompts-base" && header.kind !== "prompts") {
    throw new Error(`${filePath}: not a prompt file`);
  }
  const nNormal = header.n_normal, nAbnormal = header.n_abnormal, d = header.d;
  if (payload.length !== (nNormal + nAbnormal) * d * 4) {
    throw new Error(`${filePath}: truncated prompt payload`);
  }
  return {
    bank: {
      normal: readFloats(payload, nNormal * d, 0),
      abnormal: readFloats(payload, nAbnormal * d, nNormal * d * 4),
      nNormal,
      nAbnormal,
      d,
      labels: header.labels ?? [],
    },
    kind: header.kind,
  };
}

export function writeMaskGrid(mask: MaskGrid, filePath: string): void {
  if (mask.values.length !== mask.H * mask.W) throw new Error("mask size mismatch");
  for (const v of mask.values) {
    if (v !== 0 && v !== 1) throw new Error("mask entries must be 0 or 1");
  }
  atomicWrite(filePath, pack(MAGIC_MASK, { H: mask.H, W: mask.W }, Buffer.from(mask.values)));
}

export function readMaskGrid(filePath: string): MaskGrid {
  const { header, payload } = unpack(fs.readFileSync(filePath), MAGIC_MASK, filePath);
  const H = header.H, W = header.W;
  if (payload.length !== H * W) throw new Error(`${filePath}: truncated mask payload`);
  return { values: new Uint8Array(payload), H, W };
}

export interface ManifestQuery {
  features: string;
  mask: string | null;
  image_label: 0 | 1;
}

export interface Manifest {
  support: string[];
  queries: ManifestQuery[];
  prompt_bank: string;
  resolution: [number, number];
}

export function writeManifest(manifest: Manifest, filePath: string): void {
  atomicWrite(filePath, Buffer.from(JSON.stringify(sortKeys(manifest), null, 2) + "\n", "utf-8"));
}
