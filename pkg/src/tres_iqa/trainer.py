"""End-to-end training: patch batches, flipped twin pass, Adam, checkpoints."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import config as cfgmod
from .data import DatasetManifest, crop_patches, flip_augment, equivariant_transform, load_images, patch_corners
from .inference import predict_images
from .losses import LossReport, LossWeights, compute_losses
from .metrics import MetricReport, evaluate
from .model import ModelConfig, TReSModel

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class NumericError(FloatingPointError):
    """Non-finite loss or gradient during training."""


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    """Desk-scale defaults. :meth:`full_scale` returns the full-size training settings."""

    epochs: int = 10
    batch_size: int = 16
    lr: float = 1e-3
    lr_decay_factor: float = 10.0
    weight_decay: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weights: LossWeights = field(default_factory=LossWeights)
    consistency_kind: str = "hflip"
    consistency_on: str = "scalar"
    loss_norm: str = "l1"
    seed: int = 0
    patch_size: int = 64
    patches_per_image: int = 1
    test_patches: int = 1
    augment: bool = True
    eval_every: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("epochs, batch_size and lr must be positive")
        if self.lr_decay_factor <= 0:
            raise ValueError("lr_decay_factor must be positive")

    @classmethod
    def full_scale(cls, **overrides) -> "TrainConfig":
        base = dict(epochs=5, batch_size=53, lr=2e-5, lr_decay_factor=10.0, weight_decay=5e-4,
                    patch_size=224, patches_per_image=50, test_patches=50)
        base.update(overrides)
        return cls(**base)

    def lr_at(self, epoch: int) -> float:
        return self.lr / self.lr_decay_factor ** epoch


# --- optimizer ---------------------------------------------------------------

def adam_step(param: torch.Tensor, grad: torch.Tensor, state: dict, lr: float,
              betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0) -> None:
    """One bias-corrected Adam update in place; weight decay is added to the gradient."""
    if not torch.isfinite(grad).all():
        raise NumericError(f"non-finite gradient (shape {tuple(grad.shape)})")
    if weight_decay:
        grad = grad + weight_decay * param
    if not state:
        state["t"] = 0
        state["m"] = torch.zeros_like(param)
        state["v"] = torch.zeros_like(param)
    b1, b2 = betas
    state["t"] += 1
    t = state["t"]
    m, v = state["m"], state["v"]
    m.mul_(b1).add_(grad, alpha=1 - b1)
    v.mul_(b2).addcmul_(grad, grad, value=1 - b2)
    m_hat = m / (1 - b1 ** t)
    v_hat = v / (1 - b2 ** t)
    param.sub_(lr * m_hat / (v_hat.sqrt() + eps))


class Adam:
    def __init__(self, params, lr: float, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = [p for p in params if p.requires_grad]
        self.lr, self.betas, self.eps, self.weight_decay = lr, betas, eps, weight_decay
        self.state = [{} for _ in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    @torch.no_grad()
    def step(self):
        for p in self.params:
            if p.grad is not None and not torch.isfinite(p.grad).all():
                raise NumericError("non-finite gradient; step aborted before any update")
        for p, st in zip(self.params, self.state):
            if p.grad is not None:
                adam_step(p, p.grad, st, self.lr, self.betas, self.eps, self.weight_decay)


# --- checkpoints -------------------------------------------------------------

def save_checkpoint(path, model: TReSModel, train_config: TrainConfig | None = None, **extra) -> None:
    """Write ``meta.txt``, ``index.csv`` and ``tensors.bin`` (little-endian float32)."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    meta = {"format_version": CHECKPOINT_VERSION}
    meta.update(cfgmod.flatten_model_config(model.config))
    if train_config is not None:
        meta.update(cfgmod.flatten_train_config(train_config))
    meta.update(extra)
    (out / "meta.txt").write_text("".join(f"{k} = {cfgmod.format_value(v)}\n" for k, v in meta.items()),
                                  encoding="utf-8")
    offset = 0
    with open(out / "tensors.bin", "wb") as blob, open(out / "index.csv", "w", newline="") as idx:
        w = csv.writer(idx, lineterminator="\n")
        w.writerow(("name", "shape", "offset", "length"))
        for name, t in model.state_dict().items():
            data = t.detach().cpu().to(torch.float32).contiguous().numpy().astype("<f4").tobytes()
            blob.write(data)
            w.writerow((name, "x".join(str(s) for s in t.shape), offset, len(data)))
            offset += len(data)


def read_meta(path) -> dict[str, str]:
    meta = {}
    for line in (Path(path) / "meta.txt").read_text(encoding="utf-8").splitlines():
        if line.strip() and not line.lstrip().startswith("#"):
            key, _, value = line.partition("=")
            meta[key.strip()] = value.strip()
    return meta


def load_checkpoint(path) -> tuple[TReSModel, dict[str, str]]:
    root = Path(path)
    for name in ("meta.txt", "index.csv", "tensors.bin"):
        if not (root / name).is_file():
            raise CheckpointError(f"checkpoint {root} is missing {name}")
    meta = read_meta(root)
    version = meta.get("format_version")
    if version != str(CHECKPOINT_VERSION):
        raise CheckpointError(f"unsupported checkpoint version {version!r} (expected {CHECKPOINT_VERSION})")
    model = TReSModel(cfgmod.model_config_from_flat(meta))
    blob = (root / "tensors.bin").read_bytes()
    expected = model.state_dict()
    loaded = {}
    with open(root / "index.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            try:
                name, off, length = row["name"], int(row["offset"]), int(row["length"])
                shape = tuple(int(s) for s in row["shape"].split("x")) if row["shape"] else ()
            except (KeyError, ValueError, TypeError):
                raise CheckpointError(f"corrupt index row {row}") from None
            if name not in expected or name in loaded:
                raise CheckpointError(f"unexpected or duplicate tensor {name!r}")
            ref = expected[name]
            if shape != tuple(ref.shape) or length != 4 * ref.numel():
                raise CheckpointError(f"tensor {name!r}: index shape/length mismatch")
            if off < 0 or off + length > len(blob):
                raise CheckpointError(f"tensor {name!r}: offset {off}+{length} beyond blob of {len(blob)} bytes")
            arr = np.frombuffer(blob, dtype="<f4", count=ref.numel(), offset=off).reshape(shape)
            loaded[name] = torch.from_numpy(arr.copy()).to(ref.dtype)
    missing = set(expected) - set(loaded)
    if missing:
        raise CheckpointError(f"checkpoint lacks tensors {sorted(missing)}")
    model.load_state_dict(loaded)
    model.eval()
    return model, meta


# --- training ----------------------------------------------------------------

@dataclass
class TrainResult:
    model: TReSModel
    history: list[dict]
    evals: list[dict]
    best_srocc: float | None = None
    best_state: dict | None = None


HISTORY_FIELDS = ("step", "epoch", "lr") + LossReport.CSV_FIELDS


def write_history(history: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_FIELDS)
        for row in history:
            w.writerow([repr(row[k]) if isinstance(row[k], float) else row[k] for k in HISTORY_FIELDS])


def _epoch_plan(n_images: int, cfg: TrainConfig, rng: np.random.Generator, shapes):
    items = []
    for i in range(n_images):
        h, w = shapes[i]
        for corner in patch_corners(h, w, cfg.patches_per_image, cfg.patch_size, rng):
            items.append((i, corner))
    order = rng.permutation(len(items))
    items = [items[k] for k in order]
    return [items[k:k + cfg.batch_size] for k in range(0, len(items), cfg.batch_size)]


def train_step(model, opt, patches, scores, cfg: TrainConfig, rng) -> LossReport:
    twin = equivariant_transform(patches, cfg.consistency_kind, rng)
    out = model(patches)
    need_twin_grad = cfg.weights.lambda3 > 0
    with torch.set_grad_enabled(need_twin_grad):
        out_t = model(twin)
    total, report = compute_losses(out, out_t, scores, cfg.weights, cfg.loss_norm, cfg.consistency_on)
    if not math.isfinite(report.total):
        raise NumericError(f"non-finite loss: {report}")
    opt.zero_grad()
    total.backward()
    opt.step()
    return report


def train_arrays(model: TReSModel, images, scores, cfg: TrainConfig, val_images=None, val_scores=None,
                 score_range=None, on_step=None) -> TrainResult:
    """Train ``model`` in place on in-memory (H, W, 3) uint8 images.

    When validation data is given the model is evaluated after every epoch
    (or every ``eval_every`` steps) and the best-SROCC weights are restored at
    the end.
    """
    if len(images) == 0:
        raise ValueError("no training images")
    scores = np.asarray(scores, dtype=np.float64)
    lo, hi = score_range if score_range is not None else (scores.min(), scores.max())
    if hi <= lo:
        hi = lo + 1.0
    model.set_score_range(lo, hi)
    torch.manual_seed(cfg.seed)
    opt = Adam(model.parameters(), cfg.lr, (cfg.beta1, cfg.beta2), cfg.adam_eps, cfg.weight_decay)
    shapes = [img.shape[:2] for img in images]
    history, evals = [], []
    best = (None, None)
    step = 0

    def validate(epoch):
        nonlocal best
        if val_images is None:
            return
        preds = predict_images(model, val_images, cfg.test_patches, cfg.patch_size, seed=cfg.seed)
        rep = evaluate(preds, val_scores, "val")
        evals.append({"step": step, "epoch": epoch, "srocc": rep.srocc, "plcc": rep.plcc})
        log.info("eval step %d: srocc %.4f plcc %.4f", step, rep.srocc, rep.plcc)
        if best[0] is None or rep.srocc > best[0]:
            best = (rep.srocc, {k: v.clone() for k, v in model.state_dict().items()})

    for epoch in range(cfg.epochs):
        opt.lr = cfg.lr_at(epoch)
        rng = np.random.default_rng([cfg.seed, epoch])
        model.train()
        for chunk in _epoch_plan(len(images), cfg, rng, shapes):
            patches = torch.cat([crop_patches(images[i], c[None], cfg.patch_size) for i, c in chunk])
            s = torch.tensor([scores[i] for i, _ in chunk], dtype=torch.float32)
            if cfg.augment:
                patches = flip_augment(patches, rng)
            report = train_step(model, opt, patches, s, cfg, rng)
            step += 1
            row = {"step": step, "epoch": epoch, "lr": opt.lr}
            row.update(zip(LossReport.CSV_FIELDS, report.row()))
            history.append(row)
            if on_step is not None:
                on_step(row)
            if cfg.eval_every and step % cfg.eval_every == 0:
                validate(epoch)
        if not cfg.eval_every:
            validate(epoch)
    if best[1] is not None:
        model.load_state_dict(best[1])
    model.eval()
    return TrainResult(model, history, evals, best[0], best[1])


def train(cfg: TrainConfig, train_manifest: DatasetManifest, val_manifest: DatasetManifest | None = None,
          model: TReSModel | None = None, model_config: ModelConfig | None = None, **kwargs) -> TrainResult:
    if len(train_manifest) == 0:
        raise ValueError("training manifest is empty")
    model = model or TReSModel(model_config)
    val_images = val_scores = None
    if val_manifest is not None and len(val_manifest):
        val_images, val_scores = load_images(val_manifest), val_manifest.scores
    return train_arrays(model, load_images(train_manifest), train_manifest.scores, cfg,
                        val_images, val_scores, train_manifest.score_range, **kwargs)


def evaluate_model(model: TReSModel, manifest: DatasetManifest, n_patches: int, patch_size: int,
                   seed: int = 0) -> MetricReport:
    preds = predict_images(model, load_images(manifest), n_patches, patch_size, seed)
    return evaluate(preds, manifest.scores, manifest.name)
