"""On-disk feature formats, task manifests, and the synthetic task generator.

Feature files ("H2VF"):
    magic "H2VF" | version u8=1 | header_len u32 LE | UTF-8 JSON header |
    float32 LE payload, row major. Grids carry
    {kind:"features", h_p, w_p, d, has_global} and append the global
    vector after the tokens when has_global is true. Prompt banks carry
    {kind:"prompts-base", n_normal, n_abnormal, d, labels}; induced
    prompt files use kind "prompts" with the same layout.

Mask files ("H2VM"):
    magic "H2VM" | version u8=1 | header_len u32 LE | JSON {H, W} |
    uint8 payload row major, entries in {0, 1}.

manifest.json:
    {support: [paths], queries: [{features, mask|null, image_label}],
     prompt_bank: path, resolution: [H, W]}, paths relative to the
    manifest's directory.

All writes are atomic (temp file + rename), so concurrent workers on
distinct paths never observe partial files.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, ManifestError, ValidationError, WriteError

MAGIC_FEATURES = b"H2VF"
MAGIC_MASK = b"H2VM"
FORMAT_VERSION = 1


@dataclass
class FeatureGrid:
    """Patch-token matrix with its spatial grid shape and optional global vector."""

    tokens: np.ndarray  # (h_p * w_p, d) float64
    h_p: int
    w_p: int
    global_feature: np.ndarray | None = None

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.float64)
        if self.global_feature is not None:
            self.global_feature = np.asarray(self.global_feature, dtype=np.float64)
        self.validate()

    @property
    def d(self) -> int:
        return self.tokens.shape[1]

    @property
    def n_patches(self) -> int:
        return self.tokens.shape[0]

    def validate(self) -> None:
        if self.tokens.ndim != 2:
            raise ValidationError("tokens must be a 2-D matrix")
        if self.h_p <= 0 or self.w_p <= 0:
            raise ValidationError("grid dimensions must be positive")
        if self.tokens.shape[0] != self.h_p * self.w_p:
            raise ValidationError(
                f"token rows {self.tokens.shape[0]} != h_p*w_p {self.h_p * self.w_p}")
        if not np.all(np.isfinite(self.tokens)):
            raise ValidationError("tokens contain non-finite entries")
        if self.global_feature is not None:
            if self.global_feature.shape != (self.tokens.shape[1],):
                raise ValidationError("global feature length must equal d")
            if not np.all(np.isfinite(self.global_feature)):
                raise ValidationError("global feature contains non-finite entries")


@dataclass
class MaskGrid:
    """Binary anomaly mask at output resolution; 1 marks an anomalous pixel."""

    values: np.ndarray  # (H, W) uint8 in {0, 1}

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.uint8)
        if self.values.ndim != 2:
            raise ValidationError("mask must be a 2-D matrix")
        if not np.isin(self.values, (0, 1)).all():
            raise ValidationError("mask entries must be 0 or 1")

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass
class PromptBank:
    """Pre-encoded normal and abnormal template embeddings."""

    normal: np.ndarray    # (n_tpl_n, d)
    abnormal: np.ndarray  # (n_tpl_a, d)
    labels: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.normal = np.asarray(self.normal, dtype=np.float64)
        self.abnormal = np.asarray(self.abnormal, dtype=np.float64)
        if self.normal.ndim != 2 or self.abnormal.ndim != 2:
            raise ValidationError("template banks must be 2-D matrices")
        if self.normal.shape[0] < 1 or self.abnormal.shape[0] < 1:
            raise ValidationError("need at least one normal and one abnormal template")
        if self.normal.shape[1] != self.abnormal.shape[1]:
            raise ValidationError("normal and abnormal templates must share d")
        if not (np.all(np.isfinite(self.normal)) and np.all(np.isfinite(self.abnormal))):
            raise ValidationError("template rows contain non-finite entries")
        if not self.labels:
            self.labels = [f"normal_{i}" for i in range(self.normal.shape[0])] + \
                          [f"abnormal_{i}" for i in range(self.abnormal.shape[0])]

    @property
    def d(self) -> int:
        return self.normal.shape[1]


@dataclass
class QueryEntry:
    features: str
    mask: str | None
    image_label: int


@dataclass
class TaskManifest:
    """Validated pointers to one few-shot task on disk."""

    root: Path
    support: list[str]
    queries: list[QueryEntry]
    prompt_bank: str
    resolution: tuple[int, int]

    def support_paths(self) -> list[Path]:
        return [self.root / p for p in self.support]

    def query_paths(self) -> list[tuple[Path, Path | None, int]]:
        return [(self.root / q.features,
                 (self.root / q.mask) if q.mask else None,
                 q.image_label) for q in self.queries]

    def prompt_bank_path(self) -> Path:
        return self.root / self.prompt_bank


def _atomic_write(path: Path, payload: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except OSError as exc:
        raise WriteError(f"failed to write {path}: {exc}") from exc


def _pack(magic: bytes, header: dict, payload: bytes) -> bytes:
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return magic + struct.pack("<B", FORMAT_VERSION) + struct.pack("<I", len(header_bytes)) \
        + header_bytes + payload


def _unpack(blob: bytes, magic: bytes, path) -> tuple[dict, bytes]:
    if len(blob) < 9:
        raise FormatError(f"{path}: file too short for header")
    if blob[:4] != magic:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}, expected {magic!r}")
    version = blob[4]
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    (header_len,) = struct.unpack("<I", blob[5:9])
    if len(blob) < 9 + header_len:
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(blob[9:9 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unparseable header: {exc}") from exc
    return header, blob[9 + header_len:]


def write_feature_grid(grid: FeatureGrid, path) -> None:
    grid.validate()
    header = {
        "kind": "features",
        "h_p": grid.h_p,
        "w_p": grid.w_p,
        "d": grid.d,
        "has_global": grid.global_feature is not None,
    }
    payload = grid.tokens.astype("<f4").tobytes(order="C")
    if grid.global_feature is not None:
        payload += grid.global_feature.astype("<f4").tobytes()
    _atomic_write(Path(path), _pack(MAGIC_FEATURES, header, payload))


def read_feature_grid(path) -> FeatureGrid:
    path = Path(path)
    header, payload = _unpack(path.read_bytes(), MAGIC_FEATURES, path)
    if header.get("kind") != "features":
        raise FormatError(f"{path}: expected kind 'features', got {header.get('kind')!r}")
    h_p, w_p, d = int(header["h_p"]), int(header["w_p"]), int(header["d"])
    has_global = bool(header.get("has_global", False))
    expect = h_p * w_p * d * 4 + (d * 4 if has_global else 0)
    if len(payload) != expect:
        raise FormatError(f"{path}: payload is {len(payload)} bytes, expected {expect}")
    flat = np.frombuffer(payload, dtype="<f4")
    tokens = flat[:h_p * w_p * d].reshape(h_p * w_p, d).astype(np.float64)
    global_feature = flat[h_p * w_p * d:].astype(np.float64) if has_global else None
    if not np.all(np.isfinite(tokens)):
        raise ValidationError(f"{path}: tokens contain non-finite entries")
    return FeatureGrid(tokens=tokens, h_p=h_p, w_p=w_p, global_feature=global_feature)


def write_mask_grid(mask: MaskGrid, path) -> None:
    h, w = mask.shape
    header = {"H": h, "W": w}
    _atomic_write(Path(path), _pack(MAGIC_MASK, header, mask.values.tobytes(order="C")))


def read_mask_grid(path) -> MaskGrid:
    path = Path(path)
    header, payload = _unpack(path.read_bytes(), MAGIC_MASK, path)
    h, w = int(header["H"]), int(header["W"])
    if len(payload) != h * w:
        raise FormatError(f"{path}: payload is {len(payload)} bytes, expected {h * w}")
    values = np.frombuffer(payload, dtype=np.uint8).reshape(h, w).copy()
    return MaskGrid(values=values)


def write_prompt_bank(bank: PromptBank, path, kind: str = "prompts-base") -> None:
    if kind not in ("prompts-base", "prompts"):
        raise ValidationError(f"unknown prompt file kind {kind!r}")
    header = {
        "kind": kind,
        "n_normal": int(bank.normal.shape[0]),
        "n_abnormal": int(bank.abnormal.shape[0]),
        "d": bank.d,
        "labels": list(bank.labels),
    }
    payload = bank.normal.astype("<f4").tobytes(order="C") + \
        bank.abnormal.astype("<f4").tobytes(order="C")
    _atomic_write(Path(path), _pack(MAGIC_FEATURES, header, payload))


def read_prompt_bank(path) -> tuple[PromptBank, str]:
    """Read a prompt file; returns the bank and its kind.

    kind "prompts-base" holds raw template embeddings to be induced;
    kind "prompts" holds already-induced rows that bypass induction.
    """
    path = Path(path)
    header, payload = _unpack(path.read_bytes(), MAGIC_FEATURES, path)
    kind = header.get("kind")
    if kind not in ("prompts-base", "prompts"):
        raise FormatError(f"{path}: expected a prompt file, got kind {kind!r}")
    n_n, n_a, d = int(header["n_normal"]), int(header["n_abnormal"]), int(header["d"])
    expect = (n_n + n_a) * d * 4
    if len(payload) != expect:
        raise FormatError(f"{path}: payload is {len(payload)} bytes, expected {expect}")
    flat = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    normal = flat[:n_n * d].reshape(n_n, d)
    abnormal = flat[n_n * d:].reshape(n_a, d)
    labels = list(header.get("labels", []))
    return PromptBank(normal=normal, abnormal=abnormal, labels=labels), kind


@dataclass
class SynthConfig:
    """Parameters of the synthetic feature-space task generator."""

    d: int = 16
    h_p: int = 8
    w_p: int = 8
    n_support: int = 1
    n_query: int = 20
    anomaly_rate: float = 0.5
    shift_magnitude: float = 1.0
    n_templates: int = 4
    noise_scale: float = 0.15
    resolution: tuple[int, int] | None = None  # defaults to 4x the patch grid
    n_heldout: int = 0

    def validate(self) -> None:
        if self.d < 2:
            raise ValidationError("d must be at least 2")
        if min(self.h_p, self.w_p, self.n_support, self.n_query) <= 0:
            raise ValidationError("dimensions and counts must be positive")
        if not 0.0 <= self.anomaly_rate <= 1.0:
            raise ValidationError("anomaly_rate must lie in [0, 1]")
        if self.n_templates < 1:
            raise ValidationError("need at least one template per class")
        if self.n_heldout < 0:
            raise ValidationError("n_heldout must be nonnegative")
        if self.resolution is not None and min(self.resolution) <= 0:
            raise ValidationError("resolution must be positive")

    def out_resolution(self) -> tuple[int, int]:
        return self.resolution if self.resolution is not None else (4 * self.h_p, 4 * self.w_p)


def _interp_weights(n_src: int, n_dst: int) -> np.ndarray:
    """Row-interpolation matrix for pixel-center bilinear resampling."""
    out = np.zeros((n_dst, n_src))
    scale = n_src / n_dst
    for i in range(n_dst):
        src = (i + 0.5) * scale - 0.5
        src = min(max(src, 0.0), n_src - 1.0)
        lo = int(np.floor(src))
        hi = min(lo + 1, n_src - 1)
        w = src - lo
        out[i, lo] += 1.0 - w
        out[i, hi] += w
    return out


def _smooth_field(rng: np.random.Generator, h_p: int, w_p: int, d: int,
                  scale: float) -> np.ndarray:
    """Low-frequency noise: a coarse gaussian grid upsampled bilinearly."""
    coarse = rng.standard_normal((3, 3, d)) * scale
    rh = _interp_weights(3, h_p)
    rw = _interp_weights(3, w_p)
    field = np.einsum("ia,jb,abd->ijd", rh, rw, coarse)
    return field.reshape(h_p * w_p, d)


def _as_f32(x: np.ndarray) -> np.ndarray:
    # Round through float32 so written files reproduce in-memory values exactly.
    return x.astype(np.float32).astype(np.float64)


def downsample_mask_max(mask: np.ndarray, h_p: int, w_p: int) -> np.ndarray:
    """Max-pool a (H, W) mask down to the node grid: any hit marks the node."""
    mask = np.asarray(mask)
    h, w = mask.shape
    row_idx = (np.arange(h) * h_p) // h
    col_idx = (np.arange(w) * w_p) // w
    out = np.zeros((h_p, w_p), dtype=np.uint8)
    np.maximum.at(out, (row_idx[:, None], col_idx[None, :]), mask.astype(np.uint8))
    return out


def generate_synthetic_task(cfg: SynthConfig, seed: int, out_dir) -> Path:
    """Materialize a synthetic task directory; returns the manifest path.

    Normal patch tokens sit near a unit direction u plus a smooth noise
    field; anomalous queries shift one rectangular block of nodes along
    an orthogonal direction v by cfg.shift_magnitude. Masks mark the
    block's footprint at output resolution. Deterministic given
    (cfg, seed): equal inputs produce byte-identical directories.
    """
    cfg.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    H, W = cfg.out_resolution()

    u = rng.standard_normal(cfg.d)
    u /= np.linalg.norm(u)
    v = rng.standard_normal(cfg.d)
    v -= (v @ u) * u
    v /= np.linalg.norm(v)

    support_names = []
    for i in range(cfg.n_support):
        tokens = _as_f32(u[None, :] + _smooth_field(rng, cfg.h_p, cfg.w_p, cfg.d, cfg.noise_scale))
        grid = FeatureGrid(tokens=tokens, h_p=cfg.h_p, w_p=cfg.w_p,
                           global_feature=_as_f32(tokens.mean(axis=0)))
        name = f"support_{i:03d}.h2vf"
        write_feature_grid(grid, out_dir / name)
        support_names.append(name)

    def make_queries(prefix: str, count: int) -> list[QueryEntry]:
        n_anom = int(round(cfg.anomaly_rate * count))
        anomalous = set(rng.permutation(count)[:n_anom].tolist())
        entries = []
        for i in range(count):
            tokens = u[None, :] + _smooth_field(rng, cfg.h_p, cfg.w_p, cfg.d, cfg.noise_scale)
            node_mask = np.zeros((cfg.h_p, cfg.w_p), dtype=np.uint8)
            # Draw the rectangle regardless of use so the stream layout is stable.
            rh = int(rng.integers(max(1, cfg.h_p // 4), max(1, cfg.h_p // 2) + 1))
            rw = int(rng.integers(max(1, cfg.w_p // 4), max(1, cfg.w_p // 2) + 1))
            r0 = int(rng.integers(0, cfg.h_p - rh + 1))
            c0 = int(rng.integers(0, cfg.w_p - rw + 1))
            if i in anomalous and cfg.shift_magnitude > 0:
                node_mask[r0:r0 + rh, c0:c0 + rw] = 1
                shift = (node_mask.reshape(-1, 1) * cfg.shift_magnitude) * v[None, :]
                tokens = tokens + shift
            tokens = _as_f32(tokens)
            grid = FeatureGrid(tokens=tokens, h_p=cfg.h_p, w_p=cfg.w_p,
                               global_feature=_as_f32(tokens.mean(axis=0)))
            feat_name = f"{prefix}_{i:03d}.h2vf"
            write_feature_grid(grid, out_dir / feat_name)
            row_idx = (np.arange(H) * cfg.h_p) // H
            col_idx = (np.arange(W) * cfg.w_p) // W
            pixel_mask = node_mask[row_idx[:, None], col_idx[None, :]]
            mask_name = f"{prefix}_mask_{i:03d}.h2vm"
            write_mask_grid(MaskGrid(values=pixel_mask), out_dir / mask_name)
            entries.append(QueryEntry(features=feat_name, mask=mask_name,
                                      image_label=int(pixel_mask.any())))
        return entries

    train_entries = make_queries("query", cfg.n_query)

    bank_normal = np.stack([u + 0.05 * rng.standard_normal(cfg.d)
                            for _ in range(cfg.n_templates)])
    bank_abnormal = np.stack([v + 0.05 * rng.standard_normal(cfg.d)
                              for _ in range(cfg.n_templates)])
    bank_normal = _as_f32(bank_normal / np.linalg.norm(bank_normal, axis=1, keepdims=True))
    bank_abnormal = _as_f32(bank_abnormal / np.linalg.norm(bank_abnormal, axis=1, keepdims=True))
    bank = PromptBank(normal=bank_normal, abnormal=bank_abnormal)
    write_prompt_bank(bank, out_dir / "prompt_bank.h2vf")

    def manifest_dict(entries: list[QueryEntry]) -> dict:
        return {
            "support": support_names,
            "queries": [{"features": q.features, "mask": q.mask,
                         "image_label": q.image_label} for q in entries],
            "prompt_bank": "prompt_bank.h2vf",
            "resolution": [H, W],
        }

    manifest_path = out_dir / "manifest.json"
    _atomic_write(manifest_path,
                  (json.dumps(manifest_dict(train_entries), sort_keys=True, indent=2)
                   + "\n").encode("utf-8"))

    if cfg.n_heldout > 0:
        heldout_entries = make_queries("heldout", cfg.n_heldout)
        _atomic_write(out_dir / "heldout_manifest.json",
                      (json.dumps(manifest_dict(heldout_entries), sort_keys=True, indent=2)
                       + "\n").encode("utf-8"))

    return manifest_path


def load_manifest(path) -> TaskManifest:
    """Parse and fully validate a manifest; every referenced file is opened."""
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest {path} does not exist")
    try:
        doc = json.loads(path.read_text("utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ManifestError(f"{path}: unreadable manifest: {exc}") from exc
    for key in ("support", "queries", "prompt_bank", "resolution"):
        if key not in doc:
            raise ManifestError(f"{path}: missing key {key!r}")
    if not doc["support"]:
        raise ManifestError(f"{path}: support set is empty")
    if len(doc["resolution"]) != 2:
        raise ManifestError(f"{path}: resolution must be [H, W]")
    resolution = (int(doc["resolution"][0]), int(doc["resolution"][1]))
    root = path.parent

    queries = []
    for q in doc["queries"]:
        if "features" not in q or "image_label" not in q:
            raise ManifestError(f"{path}: query entry missing fields: {q}")
        label = int(q["image_label"])
        if label not in (0, 1):
            raise ManifestError(f"{path}: image_label must be 0 or 1, got {label}")
        queries.append(QueryEntry(features=q["features"], mask=q.get("mask"),
                                  image_label=label))

    manifest = TaskManifest(root=root, support=list(doc["support"]), queries=queries,
                            prompt_bank=str(doc["prompt_bank"]), resolution=resolution)

    dims: set[int] = set()
    for p in manifest.support_paths():
        if not p.exists():
            raise ManifestError(f"{path}: missing support file {p}")
        dims.add(read_feature_grid(p).d)
    for feat, mask, label in manifest.query_paths():
        if not feat.exists():
            raise ManifestError(f"{path}: missing query file {feat}")
        dims.add(read_feature_grid(feat).d)
        if mask is not None:
            if not mask.exists():
                raise ManifestError(f"{path}: missing mask file {mask}")
            m = read_mask_grid(mask)
            if m.shape != resolution:
                raise ManifestError(
                    f"{path}: mask {mask} shape {m.shape} != resolution {resolution}")
            if label == 1 and not m.values.any():
                raise ManifestError(f"{path}: query labelled anomalous but mask {mask} is empty")
    bank_path = manifest.prompt_bank_path()
    if not bank_path.exists():
        raise ManifestError(f"{path}: missing prompt bank {bank_path}")
    bank, _ = read_prompt_bank(bank_path)
    dims.add(bank.d)
    if len(dims) != 1:
        raise ManifestError(f"{path}: inconsistent feature dimensions {sorted(dims)}")
    return manifest
