/**
 * Round trip through the Python engine: exported files must load there and
 * `infer` must produce in-range heatmaps plus a score CSV. Skipped when the
 * engine is not importable in the ambient python3.
 */

import assert from "node:assert/strict";
import { spawnSync } from "node:child_process";
import * as fs from "node:fs";
import * as os from "node:os";
import * as path from "node:path";
import { test } from "node:test";
import { PNG } from "pngjs";

import { HashBackbone } from "../src/backbone.js";
import { exportFeatures } from "../src/export.js";

function engineAvailable(): boolean {
  const probe = spawnSync("python3", ["-c", "import hyperad"], { encoding: "utf-8" });
  return probe.status === 0;
}

function writePng(filePath: string, width: number, height: number,
                  paint: (x: number, y: number) => [number, number, number]): void {
  const png = new PNG({ width, height });
  for (let y = 0; y < height; y++) {
    for (let x = 0; x < width; x++) {
      const [r, g, b] = paint(x, y);
      const off = (y * width + x) * 4;
      png.data[off] = r;
      png.data[off + 1] = g;
      png.data[off + 2] = b;
      png.data[off + 3] = 255;
    }
  }
  fs.writeFileSync(filePath, PNG.sync.write(png));
}

test("engine parses exported files and infer writes maps + CSV", (t) => {
  if (!engineAvailable()) {
    t.skip("python engine not importable");
    return;
  }
  const root = fs.mkdtempSync(path.join(os.tmpdir(), "roundtrip-"));
  for (const dir of ["support", "query_good", "query_defect", "masks"]) {
    fs.mkdirSync(path.join(root, dir), { recursive: true });
  }
  const texture = (x: number, y: number): [number, number, number] => [
    100 + ((x * 13 + y * 7) % 50),
    90 + ((y * 5) % 60),
    140 + ((x * 3) % 30),
  ];
  // 3 images + defect mask; 4 templates
  writePng(path.join(root, "support", "s0.png"), 96, 96, texture);
  writePng(path.join(root, "query_good", "g0.png"), 96, 96, texture);
  writePng(path.join(root, "query_defect", "d0.png"), 96, 96, (x, y) =>
    x >= 32 && x < 64 && y >= 32 && y < 64 ? [255, 20, 20] : texture(x, y));
  writePng(path.join(root, "masks", "d0.png"), 96, 96, (x, y) =>
    x >= 32 && x < 64 && y >= 32 && y < 64 ? [255, 255, 255] : [0, 0, 0]);
  const templatePath = path.join(root, "templates.json");
  fs.writeFileSync(
    templatePath,
    JSON.stringify({
      normal: ["a photo of a flawless surface", "an intact part"],
      abnormal: ["a photo of a damaged surface", "a defective part"],
    }),
  );

  const out = path.join(root, "exported");
  const result = exportFeatures({
    imageDir: root,
    outDir: out,
    backbone: new HashBackbone(64),
    templateFile: templatePath,
    inject: false,
    resizeH: 96,
    resizeW: 96,
  });
  assert.equal(result.failed.length, 0);

  const inferDir = path.join(root, "maps");
  const run = spawnSync(
    "python3",
    ["-m", "hyperad.cli", "infer", "--task", result.manifestPath,
     "--out", inferDir, "--k", "4"],
    { encoding: "utf-8" },
  );
  assert.equal(run.status, 0, `infer failed: ${run.stderr}`);

  const pgms = fs.readdirSync(inferDir).filter((n) => n.endsWith(".pgm"));
  assert.equal(pgms.length, 2);
  for (const name of pgms) {
    const blob = fs.readFileSync(path.join(inferDir, name));
    assert.ok(blob.subarray(0, 3).equals(Buffer.from("P5\n")));
    // 8-bit PGM bodies are bounded by construction; verify the header size
    assert.match(blob.toString("latin1", 0, 16), /P5\n96 96\n255\n/);
  }
  const csv = fs.readFileSync(path.join(inferDir, "scores.csv"), "utf-8").trim().split("\n");
  assert.equal(csv[0], "image_id,label,logit,prob");
  assert.equal(csv.length, 3); // header + 2 queries
  for (const line of csv.slice(1)) {
    const prob = Number(line.split(",")[3]);
    assert.ok(prob >= 0 && prob <= 1);
  }
});
