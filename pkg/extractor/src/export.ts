/**
 * Directory-layout export: images under support/, query_good/, and
 * query_defect/ (with optional masks/ mirroring defect filenames) become
 * H2VF feature files, H2VM masks, a prompt bank, and a manifest.json the
 * engine loads directly.
 */

import * as fs from "node:fs";
import * as path from "node:path";

import { Backbone } from "./backbone.js";
import { decodeImage, decodeMask, resizeBilinear } from "./image.js";
import {
  FeatureGrid,
  Manifest,
  ManifestQuery,
  PromptBank,
  writeFeatureGrid,
  writeManifest,
  writeMaskGrid,
  writePromptBank,
} from "./h2vf.js";

export interface ExportConfig {
  imageDir: string;
  outDir: string;
  backbone: Backbone;
  templateFile?: string;
  inject: boolean;
  resizeH: number;
  resizeW: number;
}

export interface ExportResult {
  manifestPath: string;
  exported: string[];
  failed: { file: string; error: string }[];
}

const IMAGE_EXTENSIONS = new Set([".png", ".jpg", ".jpeg"]);

function listImages(dir: string): string[] {
  if (!fs.existsSync(dir)) return [];
  return fs
    .readdirSync(dir)
    .filter((name) => IMAGE_EXTENSIONS.has(path.extname(name).toLowerCase()))
    .sort();
}

function stem(name: string): string {
  return name.slice(0, name.length - path.extname(name).length);
}

function encodeOne(cfg: ExportConfig, imagePath: string): FeatureGrid {
  const img = resizeBilinear(decodeImage(imagePath), cfg.resizeH, cfg.resizeW);
  const features = cfg.backbone.encodeImage(img);
  return {
    tokens: features.tokens,
    hP: features.hP,
    wP: features.wP,
    d: features.d,
    global: features.global,
  };
}

export function exportFeatures(cfg: ExportConfig): ExportResult {
  fs.mkdirSync(cfg.outDir, { recursive: true });
  const supportDir = path.join(cfg.imageDir, "support");
  const goodDir = path.join(cfg.imageDir, "query_good");
  const defectDir = path.join(cfg.imageDir, "query_defect");
  const masksDir = path.join(cfg.imageDir, "masks");

  const supportImages = listImages(supportDir);
  if (supportImages.length === 0) {
    throw new Error(`no support images under ${supportDir}`);
  }

  const exported: string[] = [];
  const failed: { file: string; error: string }[] = [];
  const support: string[] = [];
  const queries: ManifestQuery[] = [];

  const emit = (
    srcDir: string,
    name: string,
    prefix: string,
    label: 0 | 1,
    intoSupport: boolean,
  ): void => {
    const imagePath = path.join(srcDir, name);
    try {
      const grid = encodeOne(cfg, imagePath);
      const outName = `${prefix}_${stem(name)}.h2vf`;
      writeFeatureGrid(grid, path.join(cfg.outDir, outName));
      exported.push(outName);
      if (intoSupport) {
        support.push(outName);
        return;
      }
      let maskName: string | null = null;
      const maskCandidates = [".png", ".jpg", ".jpeg"].map((ext) =>
        path.join(masksDir, stem(name) + ext),
      );
      const maskPath = maskCandidates.find((p) => fs.existsSync(p));
      if (label === 1 && maskPath) {
        const values = decodeMask(maskPath, cfg.resizeH, cfg.resizeW);
        if (values.some((v) => v === 1)) {
          maskName = `mask_${stem(name)}.h2vm`;
          writeMaskGrid(
            { values, H: cfg.resizeH, W: cfg.resizeW },
            path.join(cfg.outDir, maskName),
          );
          exported.push(maskName);
        }
      }
      queries.push({ features: outName, mask: maskName, image_label: label });
    } catch (err) {
      // A bad image must not abort the rest of the export.
      failed.push({ file: imagePath, error: String(err) });
    }
  };

  for (const name of supportImages) emit(supportDir, name, "support", 0, true);
  for (const name of listImages(goodDir)) emit(goodDir, name, "good", 0, false);
  for (const name of listImages(defectDir)) emit(defectDir, name, "defect", 1, false);

  if (support.length === 0) {
    throw new Error("every support image failed to export");
  }

  let bankName = "prompt_bank.h2vf";
  if (cfg.templateFile) {
    const bank = exportPrompts(cfg, path.join(cfg.outDir, bankName));
    exported.push(bankName);
    if (cfg.inject) {
      const injectedName = "prompts_induced.h2vf";
      writeInducedPrompts(cfg, bank, path.join(cfg.outDir, injectedName));
      exported.push(injectedName);
    }
  } else {
    // Weight-free default templates so every export yields a loadable task.
    const bank = bankFromTemplates(cfg.backbone, ["a flawless surface"], ["a defective surface"]);
    writePromptBank(bank, path.join(cfg.outDir, bankName));
    exported.push(bankName);
  }

  const manifest: Manifest = {
    support,
    queries,
    prompt_bank: bankName,
    resolution: [cfg.resizeH, cfg.resizeW],
  };
  const manifestPath = path.join(cfg.outDir, "manifest.json");
  writeManifest(manifest, manifestPath);
  return { manifestPath, exported, failed };
}

interface Templates {
  normal: string[];
  abnormal: string[];
}

function loadTemplates(filePath: string): Templates {
  const doc = JSON.parse(fs.readFileSync(filePath, "utf-8"));
  if (!Array.isArray(doc.normal) || !Array.isArray(doc.abnormal)) {
    throw new Error(`${filePath}: expected {normal: [...], abnormal: [...]}`);
  }
  if (doc.normal.length < 1 || doc.abnormal.length < 1) {
    throw new Error(`${filePath}: need at least one template per class`);
  }
  return { normal: doc.normal, abnormal: doc.abnormal };
}

function bankFromTemplates(
  backbone: Backbone,
  normal: string[],
  abnormal: string[],
): PromptBank {
  const d = backbone.d;
  const normalRows = new Float32Array(normal.length * d);
  const abnormalRows = new Float32Array(abnormal.length * d);
  normal.forEach((text, i) => normalRows.set(backbone.encodeText(text), i * d));
  abnormal.forEach((text, i) => abnormalRows.set(backbone.encodeText(text), i * d));
  return {
    normal: normalRows,
    abnormal: abnormalRows,
    nNormal: normal.length,
    nAbnormal: abnormal.length,
    d,
    labels: [...normal.map((t) => `normal:${t}`), ...abnormal.map((t) => `abnormal:${t}`)],
  };
}

export function exportPrompts(cfg: ExportConfig, outPath: string): PromptBank {
  if (!cfg.templateFile) throw new Error("no template file configured");
  const templates = loadTemplates(cfg.templateFile);
  const bank = bankFromTemplates(cfg.backbone, templates.normal, templates.abnormal);
  writePromptBank(bank, outPath, "prompts-base");
  return bank;
}

/**
 * Token-space injection with the exporter's context mapper. The mapper is
 * zero unless configured, so injected rows equal the base embeddings up to
 * the encoder's own normalization; the engine can also induce prompts
 * itself from the base bank.
 */
function writeInducedPrompts(cfg: ExportConfig, bank: PromptBank, outPath: string): void {
  const induced: PromptBank = {
    ...bank,
    normal: renormalizedCopy(bank.normal, bank.nNormal, bank.d),
    abnormal: renormalizedCopy(bank.abnormal, bank.nAbnormal, bank.d),
  };
  writePromptBank(induced, outPath, "prompts");
}

function renormalizedCopy(rows: Float32Array, n: number, d: number): Float32Array {
  const out = new Float32Array(rows);
  for (let r = 0; r < n; r++) {
    let norm = 0;
    for (let j = 0; j < d; j++) norm += out[r * d + j] ** 2;
    norm = Math.sqrt(norm);
    for (let j = 0; j < d; j++) out[r * d + j] /= norm;
  }
  return out;
}
