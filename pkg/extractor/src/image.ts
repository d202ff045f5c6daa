/** Image decoding (PNG/JPEG) and bilinear resizing, pure JS. */

import * as fs from "node:fs";
import jpeg from "jpeg-js";
import { PNG } from "pngjs";

export interface RgbImage {
  /** H x W x 3, row-major, values in [0, 1] */
  data: Float64Array;
  height: number;
  width: number;
}

export function decodeImage(filePath: string): RgbImage {
  const blob = fs.readFileSync(filePath);
  const lower = filePath.toLowerCase();
  let rgba: Uint8Array;
  let width: number;
  let height: number;
  if (lower.endsWith(".png")) {
    const png = PNG.sync.read(blob);
    rgba = png.data;
    width = png.width;
    height = png.height;
  } else if (lower.endsWith(".jpg") || lower.endsWith(".jpeg")) {
    const decoded = jpeg.decode(blob, { useTArray: true });
    rgba = decoded.data;
    width = decoded.width;
    height = decoded.height;
  } else {
    throw new Error(`unsupported image format: ${filePath}`);
  }
  const data = new Float64Array(height * width * 3);
  for (let i = 0; i < height * width; i++) {
    data[i * 3] = rgba[i * 4] / 255;
    data[i * 3 + 1] = rgba[i * 4 + 1] / 255;
    data[i * 3 + 2] = rgba[i * 4 + 2] / 255;
  }
  return { data, height, width };
}

/** Pixel-center bilinear resize (matches the engine's resampling convention). */
export function resizeBilinear(img: RgbImage, outH: number, outW: number): RgbImage {
  const out = new Float64Array(outH * outW * 3);
  const scaleY = img.height / outH;
  const scaleX = img.width / outW;
  for (let y = 0; y < outH; y++) {
    let sy = (y + 0.5) * scaleY - 0.5;
    sy = Math.min(Math.max(sy, 0), img.height - 1);
    const y0 = Math.floor(sy);
    const y1 = Math.min(y0 + 1, img.height - 1);
    const wy = sy - y0;
    for (let x = 0; x < outW; x++) {
      let sx = (x + 0.5) * scaleX - 0.5;
      sx = Math.min(Math.max(sx, 0), img.width - 1);
      const x0 = Math.floor(sx);
      const x1 = Math.min(x0 + 1, img.width - 1);
      const wx = sx - x0;
      for (let c = 0; c < 3; c++) {
        const v00 = img.data[(y0 * img.width + x0) * 3 + c];
        const v01 = img.data[(y0 * img.width + x1) * 3 + c];
        const v10 = img.data[(y1 * img.width + x0) * 3 + c];
        const v11 = img.data[(y1 * img.width + x1) * 3 + c];
        out[(y * outW + x) * 3 + c] =
          (1 - wy) * ((1 - wx) * v00 + wx * v01) + wy * ((1 - wx) * v10 + wx * v11);
      }
    }
  }
  return { data: out, height: outH, width: outW };
}

/** Grayscale mask from an image file: pixel > 50% luminance marks anomaly. */
export function decodeMask(filePath: string, outH: number, outW: number): Uint8Array {
  const img = resizeBilinear(decodeImage(filePath), outH, outW);
  const out = new Uint8Array(outH * outW);
  for (let i = 0; i < outH * outW; i++) {
    const lum = (img.data[i * 3] + img.data[i * 3 + 1] + img.data[i * 3 + 2]) / 3;
    out[i] = lum > 0.5 ? 1 : 0;
  }
  return out;
}
