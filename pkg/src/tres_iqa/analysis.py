"""Diagnostics for a trained model: flip sensitivity, retrieval, quality maps, plots, ablations."""
from __future__ import annotations

import csv
import io
import itertools
import statistics
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage

from .data import DatasetManifest, EQUIVARIANT_KINDS, load_images, to_tensor, write_ppm
from .inference import image_latent, predict_image
from .metrics import LogisticParams, evaluate, fit_logistic
from .model import TReSModel


# --- flip sensitivity ----------------------------------------------------------

@dataclass
class FlipReport:
    paths: list[str]
    q: np.ndarray
    q_flipped: np.ndarray
    tag: str = ""

    @property
    def deltas(self) -> np.ndarray:
        return np.abs(self.q - self.q_flipped)

    @property
    def mean(self) -> float:
        return float(np.mean(self.deltas))

    @property
    def median(self) -> float:
        return float(np.median(self.deltas))

    @property
    def max(self) -> float:
        return float(np.max(self.deltas))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("path", "q", "q_flipped", "abs_delta"))
        for p, a, b, d in zip(self.paths, self.q, self.q_flipped, self.deltas):
            w.writerow((p, repr(float(a)), repr(float(b)), repr(float(d))))
        w.writerow(("#aggregate", f"mean={self.mean!r}", f"median={self.median!r}", f"max={self.max!r}"))
        return buf.getvalue()


def flip_report(model: TReSModel, manifest: DatasetManifest, n_patches: int = 50, patch_size: int = 224,
                seed: int = 0, images=None, tag: str = "") -> FlipReport:
    """Prediction gap between each image and its horizontal mirror.

    Patches of the mirrored image sit at mirrored corners, so a perfectly
    flip-invariant model reports zero regardless of patch sampling.
    """
    images = load_images(manifest) if images is None else images
    q, qf = [], []
    for i, img in enumerate(images):
        q.append(predict_image(model, img, n_patches, patch_size, (seed, i)))
        qf.append(predict_image(model, img, n_patches, patch_size, (seed, i), mirror=True))
    return FlipReport([r.path for r in manifest.records], np.array(q), np.array(qf), tag)


# --- retrieval -----------------------------------------------------------------

@dataclass
class RetrievalResult:
    query: str
    neighbors: list[tuple[str, float, float]]
    k: int


def gallery_latents(model, manifest: DatasetManifest, n_patches: int, patch_size: int, seed: int = 0,
                    images=None) -> np.ndarray:
    images = load_images(manifest) if images is None else images
    return np.stack([image_latent(model, img, n_patches, patch_size, (seed, i)) for i, img in enumerate(images)])


def nearest_neighbors(model: TReSModel, query_image: np.ndarray, gallery: DatasetManifest, k: int = 3,
                      n_patches: int = 50, patch_size: int = 224, seed: int = 0, query_path: str = "",
                      latents: np.ndarray | None = None, query_seed=None) -> RetrievalResult:
    """Exact k-NN in latent space by a full scan of the gallery (Euclidean distance)."""
    if len(gallery) == 0:
        raise ValueError("nearest_neighbors: empty gallery")
    if latents is None:
        latents = gallery_latents(model, gallery, n_patches, patch_size, seed)
    q = image_latent(model, query_image, n_patches, patch_size, seed if query_seed is None else query_seed)
    dist = np.sqrt(((latents - q) ** 2).sum(axis=1))
    order = np.argsort(dist, kind="stable")[:k]
    recs = gallery.records
    return RetrievalResult(query_path, [(recs[i].path, float(dist[i]), recs[i].score) for i in order], k)


# --- quality maps ----------------------------------------------------------------

@dataclass
class QualityMap:
    heat: np.ndarray       # (H, W) in [0, 1]
    grid: np.ndarray       # (m4, n4) channel magnitudes before upsampling
    overlay: np.ndarray | None = None  # (H, W, 3) uint8


def bilinear_sample(grid: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Bilinear interpolation of ``grid`` at fractional (row, col) coordinates, edges clamped."""
    return ndimage.map_coordinates(grid.astype(np.float64), [rows, cols], order=1, mode="nearest")


def upsample(grid: np.ndarray, height: int, width: int) -> np.ndarray:
    """Cell-centre aligned bilinear upsampling of an (m, n) grid to (height, width)."""
    m, n = grid.shape
    ys = (np.arange(height) + 0.5) * m / height - 0.5
    xs = (np.arange(width) + 0.5) * n / width - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return bilinear_sample(grid, yy, xx)


def minmax(values: np.ndarray) -> np.ndarray:
    lo, hi = float(values.min()), float(values.max())
    if hi - lo <= 1e-12 * max(1.0, abs(hi)):
        return np.full_like(values, 0.5, dtype=np.float64)
    return (values - lo) / (hi - lo)


def quality_map(model: TReSModel, image: np.ndarray, source: str = "encoded", alpha: float = 0.5) -> QualityMap:
    """Channel-wise L2 magnitude of a feature grid, upsampled to the image and min-max scaled.

    ``source`` selects the encoder output (``"encoded"``) or the last CNN block (``"f4"``).
    """
    if source not in ("encoded", "f4"):
        raise ValueError(f"quality_map source must be 'encoded' or 'f4', got {source!r}")
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            f4, encoded = model.features(to_tensor(image))
    finally:
        model.train(was_training)
    feats = encoded if (source == "encoded" and encoded is not None) else f4
    grid = feats[0].double().norm(dim=0).numpy()
    h, w = image.shape[:2]
    heat = minmax(upsample(grid, h, w))
    color = np.stack((heat * 255.0, np.zeros_like(heat), (1.0 - heat) * 255.0), axis=-1)
    overlay = np.clip(np.rint((1 - alpha) * image.astype(np.float64) + alpha * color), 0, 255).astype(np.uint8)
    return QualityMap(heat, grid, overlay)


def save_quality_map(qmap: QualityMap, stem) -> tuple[Path, Path]:
    stem = Path(stem)
    heat_path, blend_path = stem.with_suffix(".heat.ppm"), stem.with_suffix(".overlay.ppm")
    gray = np.rint(qmap.heat * 255.0).astype(np.uint8)
    write_ppm(heat_path, np.repeat(gray[..., None], 3, axis=-1))
    write_ppm(blend_path, qmap.overlay)
    return heat_path, blend_path


# --- scatter plot ----------------------------------------------------------------

def logistic_overlay(preds, params: LogisticParams, n: int = 100):
    xs = np.linspace(float(np.min(preds)), float(np.max(preds)), n)
    return xs, params(xs)


def scatter_svg(preds, gts, params: LogisticParams | None = None, title: str = "",
                width: int = 480, height: int = 360) -> str:
    """Predictions vs subjective scores with the fitted logistic curve, as SVG text."""
    p = np.asarray(preds, dtype=np.float64)
    g = np.asarray(gts, dtype=np.float64)
    if p.size == 0 or p.shape != g.shape:
        raise ValueError("scatter plot needs equal-length, non-empty inputs")
    if params is None and p.size >= 5 and np.ptp(p) > 0 and np.ptp(g) > 0:
        params = fit_logistic(p, g)
    ml, mr, mt, mb = 60, 20, 30, 50
    x0, x1 = float(p.min()), float(p.max())
    y0, y1 = float(g.min()), float(g.max())
    if params is not None:
        curve_x, curve_y = logistic_overlay(p, params)
        y0, y1 = min(y0, float(curve_y.min())), max(y1, float(curve_y.max()))
    x1 = x1 if x1 > x0 else x0 + 1.0
    y1 = y1 if y1 > y0 else y0 + 1.0

    def sx(v):
        return ml + (v - x0) / (x1 - x0) * (width - ml - mr)

    def sy(v):
        return height - mb - (v - y0) / (y1 - y0) * (height - mt - mb)

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<line class="axis" x1="{ml}" y1="{height - mb}" x2="{width - mr}" y2="{height - mb}" stroke="black"/>',
        f'<line class="axis" x1="{ml}" y1="{mt}" x2="{ml}" y2="{height - mb}" stroke="black"/>',
        f'<text x="{(width + ml - mr) / 2:.1f}" y="{height - 12}" text-anchor="middle" '
        f'font-size="13">Predicted quality</text>',
        f'<text x="16" y="{(height + mt - mb) / 2:.1f}" text-anchor="middle" font-size="13" '
        f'transform="rotate(-90 16 {(height + mt - mb) / 2:.1f})">Subjective score</text>',
    ]
    if title:
        out.append(f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" font-size="14">{title}</text>')
    for a, b in zip(p, g):
        out.append(f'<circle class="point" cx="{sx(a):.3f}" cy="{sy(b):.3f}" r="3" fill="steelblue"/>')
    if params is not None:
        pts = " ".join(f"{sx(a):.3f},{sy(b):.3f}" for a, b in zip(curve_x, curve_y))
        out.append(f'<polyline class="logistic" points="{pts}" fill="none" stroke="crimson" stroke-width="2"/>')
    out.append("</svg>\n")
    return "\n".join(out)


def scatter_plot(preds, gts, out_path, params: LogisticParams | None = None, title: str = "") -> Path:
    path = Path(out_path)
    path.write_text(scatter_svg(preds, gts, params, title), encoding="utf-8")
    return path


# --- ablations -------------------------------------------------------------------

ABLATION_AXES = ("transformer", "positional_encoding", "ranking_loss", "consistency_loss",
                 "consistency_transform_kind")


@dataclass
class AblationRow:
    label: str
    settings: dict
    srocc: float
    plcc: float
    runs: list = field(default_factory=list)


def _label(settings: dict) -> str:
    parts = []
    if settings.get("transformer"):
        parts.append("transformer")
        if settings.get("positional_encoding"):
            parts.append("pe")
    if settings.get("ranking_loss"):
        parts.append("ranking")
    if settings.get("consistency_loss"):
        parts.append(f"consistency[{settings.get('consistency_transform_kind', 'hflip')}]")
    return "backbone only" if not parts else "backbone+" + "+".join(parts)


def ablation_grid(axes: dict) -> list[dict]:
    unknown = set(axes) - set(ABLATION_AXES)
    if unknown:
        raise ValueError(f"unknown ablation axes {sorted(unknown)}; expected a subset of {ABLATION_AXES}")
    for kind in axes.get("consistency_transform_kind", ()):
        if kind not in EQUIVARIANT_KINDS:
            raise ValueError(f"unknown transform kind {kind!r}")
    names = list(axes)
    return [dict(zip(names, combo)) for combo in itertools.product(*(axes[n] for n in names))]


def apply_settings(run_config, settings: dict):
    """Return a copy of a :class:`~tres_iqa.config.RunConfig` with ablation settings applied."""
    rc = replace(run_config, encoder=replace(run_config.encoder), model=replace(run_config.model),
                 loss=replace(run_config.loss), train=replace(run_config.train))
    if "transformer" in settings:
        rc.model.use_transformer = bool(settings["transformer"])
    if "positional_encoding" in settings:
        rc.encoder.use_pe = bool(settings["positional_encoding"])
    if "ranking_loss" in settings:
        rc.loss.lambda2 = (run_config.loss.lambda2 or 0.05) if settings["ranking_loss"] else 0.0
    if "consistency_loss" in settings:
        rc.loss.lambda3 = (run_config.loss.lambda3 or 1.0) if settings["consistency_loss"] else 0.0
    if "consistency_transform_kind" in settings:
        rc.train.consistency_kind = settings["consistency_transform_kind"]
    rc.train.weights = rc.loss
    return rc


def effective_settings(rc) -> dict:
    return {
        "transformer": rc.model.use_transformer,
        "positional_encoding": rc.model.use_transformer and rc.encoder.use_pe,
        "ranking_loss": rc.loss.lambda2 > 0,
        "consistency_loss": rc.loss.lambda3 > 0,
        "consistency_transform_kind": rc.train.consistency_kind,
    }


def ablate(run_config, axes: dict, train_manifest: DatasetManifest, test_manifest: DatasetManifest,
           seeds=(0,), log=None) -> list[AblationRow]:
    """Train one model per grid point and seed; report median test SROCC/PLCC per grid point."""
    from .trainer import evaluate_model, train

    rows = []
    for settings in ablation_grid(axes):
        rc = apply_settings(run_config, settings)
        runs = []
        for seed in seeds:
            mc = rc.model_config()
            mc.backbone = replace(mc.backbone, seed=seed)
            tc = replace(rc.train, seed=seed, weights=rc.loss)
            result = train(tc, train_manifest, None, model_config=mc)
            rep = evaluate_model(result.model, test_manifest, tc.test_patches, tc.patch_size, seed)
            runs.append((rep.srocc, rep.plcc))
            if log:
                log(f"{_label(effective_settings(rc))} seed {seed}: srocc {rep.srocc:.4f} plcc {rep.plcc:.4f}")
        rows.append(AblationRow(_label(effective_settings(rc)), settings,
                                statistics.median(r[0] for r in runs), statistics.median(r[1] for r in runs), runs))
    return rows


def ablation_csv(rows: list[AblationRow]) -> str:
    axes = list(rows[0].settings) if rows else []
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["label", *axes, "srocc", "plcc"])
    for r in rows:
        w.writerow([r.label, *(r.settings[a] for a in axes), f"{r.srocc:.6f}", f"{r.plcc:.6f}"])
    return buf.getvalue()


def scatter_from_model(model, manifest: DatasetManifest, n_patches: int, patch_size: int, out_path,
                       seed: int = 0) -> Path:
    from .inference import predict_images

    preds = predict_images(model, load_images(manifest), n_patches, patch_size, seed)
    rep = evaluate(preds, manifest.scores, manifest.name)
    return scatter_plot(preds, manifest.scores, out_path, rep.logistic,
                        f"{manifest.name}: SROCC {rep.srocc:.3f}, PLCC {rep.plcc:.3f}")
