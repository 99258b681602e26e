"""Datasets: manifests, PPM I/O, reference-disjoint splits, synthetic distortions, patches."""
from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

FAMILIES = ("gaussian_blur", "white_noise", "quantize_blocks", "contrast_shift")
# Severity parameters at levels 1..4; other level counts interpolate geometrically.
DISTORTION_LEVELS = {
    "gaussian_blur": (0.5, 1.0, 2.0, 4.0),
    "white_noise": (4.0, 8.0, 16.0, 32.0),
    "quantize_blocks": (32, 16, 8, 4),
    "contrast_shift": (1.2, 1.5, 2.0, 2.8),
}
EQUIVARIANT_KINDS = ("hflip", "vflip", "rot90", "translate", "crop")


class DataError(ValueError):
    """Malformed or missing dataset input."""


@dataclass(frozen=True)
class Record:
    path: str
    score: float
    ref_id: str
    tags: dict = field(default_factory=dict, compare=False, hash=False)


@dataclass
class DatasetManifest:
    records: list[Record]
    name: str = ""
    score_range: tuple[float, float] | None = None

    def __post_init__(self):
        paths = [r.path for r in self.records]
        if len(set(paths)) != len(paths):
            raise DataError(f"manifest {self.name!r} has duplicate paths")
        if self.score_range is None and self.records:
            scores = [r.score for r in self.records]
            self.score_range = (min(scores), max(scores))
        if self.score_range is not None:
            lo, hi = self.score_range
            for r in self.records:
                if not lo <= r.score <= hi:
                    raise DataError(f"score {r.score} of {r.path} outside range {self.score_range}")

    def __len__(self):
        return len(self.records)

    @property
    def scores(self) -> np.ndarray:
        return np.array([r.score for r in self.records], dtype=np.float64)

    @property
    def ref_ids(self) -> list[str]:
        return list(dict.fromkeys(r.ref_id for r in self.records))

    def subset(self, refs, name: str) -> "DatasetManifest":
        refs = set(refs)
        return DatasetManifest([r for r in self.records if r.ref_id in refs], name, self.score_range)


def load_manifest(path, score_range=None) -> DatasetManifest:
    """Read a ``path,score,ref_id`` CSV; relative image paths resolve against its directory."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    base = path.parent
    records = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = {"path", "score"} - set(reader.fieldnames or [])
        if missing:
            raise DataError(f"{path}: missing column(s) {sorted(missing)}")
        for row in reader:
            line = reader.line_num
            p = (row.get("path") or "").strip()
            if not p:
                raise DataError(f"{path}, line {line}: empty path")
            try:
                score = float(row["score"])
            except (TypeError, ValueError):
                raise DataError(f"{path}, line {line}: non-numeric score {row['score']!r}") from None
            if not math.isfinite(score):
                raise DataError(f"{path}, line {line}: non-finite score")
            ref = (row.get("ref_id") or "").strip() or p
            tags = {k: v for k, v in row.items() if k not in ("path", "score", "ref_id") and k}
            full = p if os.path.isabs(p) else str(base / p)
            records.append(Record(full, score, ref, tags))
    return DatasetManifest(records, path.stem, tuple(score_range) if score_range else None)


def write_manifest(manifest: DatasetManifest, path, relative_to=None) -> None:
    """Write ``path,score,ref_id`` rows; images under the manifest's directory get relative paths."""
    path = Path(path)
    root = (Path(relative_to) if relative_to else path.parent).resolve()
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("path", "score", "ref_id"))
        for r in manifest.records:
            p = Path(r.path).resolve()
            try:
                p = p.relative_to(root)
            except ValueError:
                pass
            w.writerow((p.as_posix(), repr(float(r.score)), r.ref_id))


# --- raster I/O -------------------------------------------------------------

def write_ppm(path, image: np.ndarray) -> None:
    img = np.ascontiguousarray(image, dtype=np.uint8)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"write_ppm expects (H, W, 3) uint8, got {img.shape}")
    h, w, _ = img.shape
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (w, h))
        fh.write(img.tobytes())


def _ppm_tokens(data: bytes, count: int):
    tokens, pos = [], 2
    while len(tokens) < count:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(int(data[start:pos]))
    return tokens, pos + 1


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:2] != b"P6":
        raise DataError(f"{path}: not a binary PPM (P6) file")
    try:
        (w, h, maxval), offset = _ppm_tokens(data, 3)
    except (ValueError, IndexError):
        raise DataError(f"{path}: malformed PPM header") from None
    if maxval != 255:
        raise DataError(f"{path}: only 8-bit PPM supported (maxval {maxval})")
    body = data[offset:offset + w * h * 3]
    if len(body) != w * h * 3:
        raise DataError(f"{path}: truncated PPM data")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).copy()


def read_image(path) -> np.ndarray:
    """Decode an image to (H, W, 3) uint8. PPM natively, anything else via Pillow."""
    if not os.path.isfile(path):
        raise DataError(f"image not found: {path}")
    if str(path).lower().endswith((".ppm", ".pnm")):
        return read_ppm(path)
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def load_images(manifest: DatasetManifest) -> list[np.ndarray]:
    return [read_image(r.path) for r in manifest.records]


def to_tensor(images) -> torch.Tensor:
    """(H, W, 3) uint8 image(s) -> float32 (b, 3, H, W) centred on 0."""
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    t = torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2))).float()
    return t / 255.0 - 0.5


# --- splits -----------------------------------------------------------------

def split(manifest: DatasetManifest, seed: int, ratio: float = 0.8):
    """Shuffle reference ids with a seeded RNG; the first ``ceil(ratio * R)`` go to train."""
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"split ratio must lie in (0, 1), got {ratio}")
    refs = manifest.ref_ids
    if len(refs) < 2:
        raise DataError("split needs at least 2 distinct ref_ids")
    order = np.random.default_rng(seed).permutation(len(refs))
    n_train = min(max(math.ceil(ratio * len(refs) - 1e-9), 1), len(refs) - 1)
    train_refs = [refs[i] for i in order[:n_train]]
    test_refs = [refs[i] for i in order[n_train:]]
    return (manifest.subset(train_refs, f"{manifest.name}-train"),
            manifest.subset(test_refs, f"{manifest.name}-test"))


# --- synthetic data ---------------------------------------------------------

@dataclass
class SyntheticSpec:
    n_refs: int = 25
    image_size: tuple[int, int] = (64, 64)
    families: tuple[str, ...] = FAMILIES
    levels: int = 4
    seed: int = 0
    score_range: tuple[float, float] = (0.0, 100.0)

    def __post_init__(self):
        self.image_size = tuple(int(v) for v in self.image_size)
        self.families = tuple(self.families)
        if self.levels < 2:
            raise ValueError("levels must be >= 2")
        h, w = self.image_size
        if h % 16 or w % 16:
            raise ValueError(f"image_size must be divisible by 16, got {self.image_size}")
        unknown = set(self.families) - set(FAMILIES)
        if unknown:
            raise ValueError(f"unknown distortion families {sorted(unknown)}")
        if self.n_refs < 1:
            raise ValueError("n_refs must be positive")


def level_score(level: int, levels: int, score_range=(0.0, 100.0)) -> float:
    raw = 100.0 - 90.0 * (level - 1) / (levels - 1)
    lo, hi = score_range
    return lo + (hi - lo) * raw / 100.0


def distortion_param(family: str, level: int, levels: int):
    table = DISTORTION_LEVELS[family]
    if levels == len(table):
        return table[level - 1]
    value = float(np.geomspace(table[0], table[-1], levels)[level - 1])
    return max(2, round(value)) if family == "quantize_blocks" else value


def make_reference(rng: np.random.Generator, size) -> np.ndarray:
    """Procedural pristine image: smooth colour field, flat shapes and a texture patch."""
    h, w = size
    img = np.empty((h, w, 3))
    for c in range(3):
        field_ = ndimage.gaussian_filter(rng.normal(size=(h, w)), sigma=max(h, w) / 8, mode="wrap")
        field_ = (field_ - field_.mean()) / (field_.std() + 1e-12)
        img[..., c] = 128 + 40 * field_ + rng.uniform(-40, 40)
    yy, xx = np.mgrid[0:h, 0:w]
    for _ in range(rng.integers(2, 5)):
        color = rng.uniform(0, 255, size=3)
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        if rng.random() < 0.5:
            r = rng.uniform(h / 10, h / 4)
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        else:
            hh, ww = rng.uniform(h / 8, h / 3), rng.uniform(w / 8, w / 3)
            mask = (np.abs(yy - cy) <= hh / 2) & (np.abs(xx - cx) <= ww / 2)
        img[mask] = color
    th, tw = h // 2, w // 2
    ty, tx = rng.integers(0, h - th + 1), rng.integers(0, w - tw + 1)
    freq = rng.uniform(0.25, 0.9)
    angle = rng.uniform(0, np.pi)
    grating = np.sin(freq * (np.cos(angle) * xx[:th, :tw] + np.sin(angle) * yy[:th, :tw]))
    img[ty:ty + th, tx:tx + tw] += 60 * grating[..., None]
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def distort(image: np.ndarray, family: str, param, rng: np.random.Generator) -> np.ndarray:
    x = image.astype(np.float64)
    if family == "gaussian_blur":
        out = np.stack([ndimage.gaussian_filter(x[..., c], param, mode="reflect") for c in range(3)], -1)
    elif family == "white_noise":
        out = x + rng.normal(scale=param, size=x.shape)
    elif family == "quantize_blocks":
        h, w, _ = x.shape
        blocks = x.reshape(h // 8, 8, w // 8, 8, 3)
        mean = blocks.mean(axis=(1, 3), keepdims=True)
        step = 256.0 / param
        out = (mean + np.round((blocks - mean) / step) * step).reshape(h, w, 3)
    elif family == "contrast_shift":
        out = 255.0 * (x / 255.0) ** param
    else:
        raise ValueError(f"unknown distortion family {family!r}")
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def synth_generate(spec: SyntheticSpec, out_dir) -> DatasetManifest:
    """Write pristine references plus every (family, level) distortion as PPMs and a manifest.

    Output is a pure function of ``spec``. Pristine copies score the top of the
    range; level ``l`` scores ``100 - 90 (l - 1) / (levels - 1)`` rescaled into
    ``spec.score_range``.
    """
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out}: {exc}") from exc
    records = []
    for r in range(spec.n_refs):
        ref = f"ref{r:03d}"
        pristine = make_reference(np.random.default_rng([spec.seed, r]), spec.image_size)
        items = [(f"{ref}_pristine.ppm", pristine, spec.score_range[1], {"family": "pristine", "level": "0"})]
        for f_idx, family in enumerate(spec.families):
            for level in range(1, spec.levels + 1):
                rng = np.random.default_rng([spec.seed, r, FAMILIES.index(family), level])
                img = distort(pristine, family, distortion_param(family, level, spec.levels), rng)
                score = level_score(level, spec.levels, spec.score_range)
                items.append((f"{ref}_{family}_{level}.ppm", img, score,
                              {"family": family, "level": str(level)}))
        for name, img, score, tags in items:
            path = out / "images" / name
            try:
                write_ppm(path, img)
            except OSError as exc:
                raise DataError(f"cannot write {path}: {exc}") from exc
            records.append(Record(str(path), float(score), ref, tags))
    manifest = DatasetManifest(records, "synthetic", tuple(spec.score_range))
    write_manifest(manifest, out / "manifest.csv")
    return manifest


# --- patches ----------------------------------------------------------------

@dataclass
class PatchBatch:
    patches: torch.Tensor          # (k, 3, P, P)
    scores: torch.Tensor           # (k,)
    sources: np.ndarray            # (k,) source record index
    corners: np.ndarray | None = None  # (k, 2) top-left (row, col)

    def __len__(self):
        return self.patches.shape[0]


def patch_corners(height: int, width: int, count: int, patch_size: int, rng: np.random.Generator):
    if height < patch_size or width < patch_size:
        raise DataError(f"image {height}x{width} is smaller than patch size {patch_size}")
    if count < 1:
        raise ValueError("count must be >= 1")
    rows = rng.integers(0, height - patch_size + 1, size=count)
    cols = rng.integers(0, width - patch_size + 1, size=count)
    return np.stack((rows, cols), axis=1)


def crop_patches(image: np.ndarray, corners: np.ndarray, patch_size: int) -> torch.Tensor:
    crops = np.stack([image[r:r + patch_size, c:c + patch_size] for r, c in corners])
    return to_tensor(crops)


def sample_patches(image: np.ndarray, count: int, patch_size: int, rng: np.random.Generator,
                   score: float = 0.0, source: int = 0) -> PatchBatch:
    """Uniformly placed square patches; every patch inherits ``score``."""
    h, w = image.shape[:2]
    corners = patch_corners(h, w, count, patch_size, rng)
    return PatchBatch(crop_patches(image, corners, patch_size),
                      torch.full((count,), float(score)), np.full(count, source), corners)


def concat_batches(batches: Sequence[PatchBatch]) -> PatchBatch:
    if len({tuple(b.patches.shape[1:]) for b in batches}) > 1:
        raise ValueError("cannot concatenate batches with different patch sizes")
    corners = None
    if all(b.corners is not None for b in batches):
        corners = np.concatenate([b.corners for b in batches])
    return PatchBatch(torch.cat([b.patches for b in batches]), torch.cat([b.scores for b in batches]),
                      np.concatenate([b.sources for b in batches]), corners)


def flip_augment(x: torch.Tensor, rng: np.random.Generator, policy=None) -> torch.Tensor:
    """Independent random flips per patch. ``policy`` maps ``hflip``/``vflip`` to probabilities."""
    policy = {"hflip": 0.5, "vflip": 0.5} if policy is None else dict(policy)
    x = x.clone()
    for kind in ("hflip", "vflip"):
        p = policy.pop(kind, 0.0)
        if p <= 0:
            continue
        mask = torch.from_numpy(rng.random(x.shape[0]) < p)
        dim = -1 if kind == "hflip" else -2
        x[mask] = x[mask].flip(dim)
    if policy:
        raise ValueError(f"unknown augmentation(s) {sorted(policy)}")
    return x


def augment(batch: PatchBatch, rng: np.random.Generator, policy=None) -> PatchBatch:
    return replace(batch, patches=flip_augment(batch.patches, rng, policy))


def translate(x: torch.Tensor, dy: int, dx: int) -> torch.Tensor:
    """Shift content by (dy, dx) pixels with reflective fill."""
    h, w = x.shape[-2:]
    py, px = abs(dy), abs(dx)
    padded = F.pad(x, (px, px, py, py), mode="reflect")
    top, left = py - dy, px - dx
    return padded[..., top:top + h, left:left + w]


def equivariant_transform(batch, kind: str = "hflip", rng: np.random.Generator | None = None):
    """Apply a quality-preserving transform to a PatchBatch or a (b, 3, H, W) tensor."""
    x = batch.patches if isinstance(batch, PatchBatch) else batch
    if kind == "hflip":
        y = x.flip(-1)
    elif kind == "vflip":
        y = x.flip(-2)
    elif kind == "rot90":
        y = torch.rot90(x, 1, dims=(-2, -1))
    elif kind in ("translate", "crop"):
        rng = rng or np.random.default_rng(0)
        h, w = x.shape[-2:]
        if kind == "translate":
            dy, dx = (int(rng.integers(16, 21)) * int(rng.choice((-1, 1))) for _ in range(2))
            dy, dx = int(np.clip(dy, 1 - h, h - 1)), int(np.clip(dx, 1 - w, w - 1))
            y = translate(x, dy, dx)
        else:
            ch, cw = max(1, 3 * h // 4), max(1, 3 * w // 4)
            top, left = int(rng.integers(0, h - ch + 1)), int(rng.integers(0, w - cw + 1))
            y = F.interpolate(x[..., top:top + ch, left:left + cw], size=(h, w),
                              mode="bilinear", align_corners=False)
    else:
        raise ValueError(f"unknown equivariant transform {kind!r}; expected one of {EQUIVARIANT_KINDS}")
    return replace(batch, patches=y) if isinstance(batch, PatchBatch) else y
