#!/usr/bin/env node
/**
 * h2v-extract export --image-dir D --out O [--backbone ID] [--templates F]
 *                    [--inject] [--resize H W] [--d N]
 */

import { resolveBackbone } from "./backbone.js";
import { exportFeatures } from "./export.js";

interface Args {
  imageDir?: string;
  out?: string;
  backbone: string;
  templates?: string;
  inject: boolean;
  resizeH: number;
  resizeW: number;
  d: number;
}

function parseArgs(argv: string[]): Args {
  const args: Args = {
    backbone: "hash-v1",
    inject: false,
    resizeH: 240,
    resizeW: 240,
    d: 64,
  };
  for (let i = 0; i < argv.length; i++) {
    const flag = argv[i];
    switch (flag) {
      case "--image-dir":
        args.imageDir = argv[++i];
        break;
      case "--out":
        args.out = argv[++i];
        break;
      case "--backbone":
        args.backbone = argv[++i];
        break;
      case "--templates":
        args.templates = argv[++i];
        break;
      case "--inject":
        args.inject = true;
        break;
      case "--resize":
        args.resizeH = Number(argv[++i]);
        args.resizeW = Number(argv[++i]);
        break;
      case "--d":
        args.d = Number(argv[++i]);
        break;
      default:
        throw new UsageError(`unknown flag ${flag}`);
    }
  }
  if (!args.imageDir || !args.out) {
    throw new UsageError("--image-dir and --out are required");
  }
  return args;
}

class UsageError extends Error {}

export function main(argv: string[]): number {
  try {
    if (argv[0] !== "export") {
      throw new UsageError("usage: h2v-extract export --image-dir D --out O [...]");
    }
    const args = parseArgs(argv.slice(1));
    const backbone = resolveBackbone(args.backbone, args.d);
    const result = exportFeatures({
      imageDir: args.imageDir!,
      outDir: args.out!,
      backbone,
      templateFile: args.templates,
      inject: args.inject,
      resizeH: args.resizeH,
      resizeW: args.resizeW,
    });
    console.log(`exported ${result.exported.length} files -> ${result.manifestPath}`);
    for (const failure of result.failed) {
      console.error(`skipped ${failure.file}: ${failure.error}`);
    }
    return 0;
  } catch (err) {
    if (err instanceof UsageError) {
      console.error(`usage error: ${err.message}`);
      return 2;
    }
    console.error(`error: ${err instanceof Error ? err.message : err}`);
    return 1;
  }
}

import { pathToFileURL } from "node:url";

if (process.argv[1] && import.meta.url === pathToFileURL(process.argv[1]).href) {
  process.exit(main(process.argv.slice(2)));
}
