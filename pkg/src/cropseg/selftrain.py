"""Two-stage self-training on trimap supervision.

Stage 1 trains on pseudo-masks as-is. The stage-1 model then re-infers the
training set; pixels where prediction and pseudo-mask disagree become the
ignore label 255, and stage 2 retrains from scratch on that refined trimap.
The segmentation network is stood in for by a 6-feature per-pixel logistic
model, which keeps the loop executable at desk scale while preserving the
contracts the loss and trimap logic depend on.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .corpus import Manifest
from .metrics import confusion, miou
from .pseudolabel import BinaryMask
from .raster import Raster2D, load_gray, load_rgb, normalize_percentile, sobel_magnitude
from .synthetic import gt_path_for

IGNORE = 255
N_FEATURES = 6  # R, G, B, depth, gradient, constant 1
_PROB_CLAMP = 1e-7


@dataclass(frozen=True)
class Trimap:
    """byte8 raster over {0, 1, 255}: background, foreground, ignore."""

    raster: Raster2D

    def __post_init__(self):
        if self.raster.kind != "byte8":
            raise ValueError("trimap must be byte8")
        bad = np.setdiff1d(np.unique(self.raster.data), (0, 1, IGNORE))
        if bad.size:
            raise ValueError(f"trimap values must be 0/1/255, got {bad}")

    @property
    def ignore_fraction(self) -> float:
        return float((self.raster.data == IGNORE).mean())


@dataclass(frozen=True)
class ToyPixelModel:
    """Per-pixel logistic model over the 6 standard features."""

    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.shape != (N_FEATURES,):
            raise ValueError(f"weights must have shape ({N_FEATURES},), got {w.shape}")
        if not np.isfinite(w).all():
            raise ValueError("weights must be finite")
        object.__setattr__(self, "weights", w)

    def predict_prob(self, features: np.ndarray) -> Raster2D:
        z = np.einsum("f,fhw->hw", self.weights, features)
        return Raster2D(expit(z))

    def predict_mask(self, features: np.ndarray, threshold: float = 0.5) -> BinaryMask:
        return BinaryMask.from_bool(self.predict_prob(features).data >= threshold)


@dataclass(frozen=True)
class StageReport:
    stage: int
    train_loss_curve: tuple
    ignore_fraction: float
    eval_miou: float

    def to_dict(self) -> dict:
        return {
            "stage": self.stage,
            "loss_curve": list(self.train_loss_curve),
            "ignore_fraction": self.ignore_fraction,
            "eval_miou": self.eval_miou,
        }


@dataclass(frozen=True)
class TrainOptions:
    epochs: int = 200
    lr: float = 2.0
    seed: int = 0
    threshold: float = 0.5


def build_trimap(pseudo: BinaryMask, pred: BinaryMask) -> Trimap:
    """Keep the pseudo-mask label where the prediction agrees, 255 elsewhere."""
    a = pseudo.raster.data
    b = pred.raster.data
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: pseudo {a.shape} vs pred {b.shape}")
    out = np.where(a == b, a, np.uint8(IGNORE)).astype(np.uint8)
    return Trimap(Raster2D(out))


def masked_bce_loss(prob: Raster2D, target: Trimap) -> tuple[float, Raster2D]:
    """Mean binary cross-entropy over non-ignore pixels plus its gradient.

    The gradient is exactly zero at ignore pixels; an all-ignore target
    yields loss 0 by convention.
    """
    p = prob.astype_float().data
    t = target.raster.data
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: prob {p.shape} vs target {t.shape}")
    valid = t != IGNORE
    n = int(valid.sum())
    grad = np.zeros_like(p)
    if n == 0:
        return 0.0, Raster2D(grad)
    pc = np.clip(p, _PROB_CLAMP, 1.0 - _PROB_CLAMP)
    tv = t.astype(np.float64)
    terms = -(tv * np.log(pc) + (1.0 - tv) * np.log1p(-pc))
    loss = float(terms[valid].mean())
    g = (pc - tv) / (pc * (1.0 - pc)) / n
    # the clamp is active outside [clamp, 1-clamp]; the loss is flat there
    g[(p < _PROB_CLAMP) | (p > 1.0 - _PROB_CLAMP)] = 0.0
    grad[valid] = g[valid]
    return loss, Raster2D(grad)


def pixel_features(rgb: np.ndarray, depth: Raster2D) -> np.ndarray:
    """Stack the 6 per-pixel features: RGB in [0,1], normalized depth,
    normalized gradient magnitude, and a constant 1."""
    if rgb.shape[:2] != depth.data.shape:
        raise ValueError(f"shape mismatch: rgb {rgb.shape[:2]} vs depth {depth.data.shape}")
    norm = normalize_percentile(depth)
    grad = sobel_magnitude(norm).data
    gmax = grad.max()
    ghat = grad / gmax if gmax > 0 else grad
    chans = [rgb[..., i].astype(np.float64) / 255.0 for i in range(3)]
    chans += [norm.data, ghat, np.ones_like(ghat)]
    return np.stack(chans)


def _batch_loss_grad(
    weights: np.ndarray, samples: list[tuple[np.ndarray, Trimap]]
) -> tuple[float, np.ndarray]:
    total_loss = 0.0
    total_n = 0
    grad_w = np.zeros(N_FEATURES)
    for features, trimap in samples:
        t = trimap.raster.data
        valid = t != IGNORE
        n = int(valid.sum())
        if n == 0:
            continue
        z = np.einsum("f,fhw->hw", weights, features)
        p = expit(z)
        pc = np.clip(p, _PROB_CLAMP, 1.0 - _PROB_CLAMP)
        tv = t.astype(np.float64)
        terms = -(tv * np.log(pc) + (1.0 - tv) * np.log1p(-pc))
        total_loss += float(terms[valid].sum())
        dz = np.where(valid, p - tv, 0.0)
        grad_w += np.einsum("fhw,hw->f", features, dz)
        total_n += n
    if total_n == 0:
        return 0.0, grad_w
    return total_loss / total_n, grad_w / total_n


def train_toy_model(
    samples: list[tuple[np.ndarray, Trimap]], opts: TrainOptions = TrainOptions()
) -> tuple[ToyPixelModel, list[float]]:
    """Deterministic full-batch gradient descent from zero weights.

    The step is halved and retried whenever it would increase the loss, so
    the recorded loss curve is non-increasing.
    """
    if not samples:
        raise ValueError("no training samples")
    for features, _ in samples:
        if not np.isfinite(features).all():
            raise ValueError("non-finite features")
    weights = np.zeros(N_FEATURES)
    lr = opts.lr
    loss, grad = _batch_loss_grad(weights, samples)
    curve = [loss]
    for _ in range(opts.epochs):
        while lr > 1e-12:
            trial = weights - lr * grad
            trial_loss, trial_grad = _batch_loss_grad(trial, samples)
            if trial_loss <= loss:
                weights, loss, grad = trial, trial_loss, trial_grad
                break
            lr *= 0.5
        curve.append(loss)
    return ToyPixelModel(weights), curve


def _load_sample(record) -> tuple[np.ndarray, BinaryMask]:
    rgb = load_rgb(record.image_path)
    depth = load_gray(record.depth_path)
    features = pixel_features(rgb, depth)
    pseudo = BinaryMask(load_gray(record.mask_path))
    return features, pseudo


def _eval_miou(model: ToyPixelModel, corpus: Manifest, threshold: float) -> float:
    total = None
    for s in corpus.samples:
        if s.split != "test":
            continue
        features, _ = _load_sample(s)
        pred = model.predict_mask(features, threshold)
        gt = load_gray(gt_path_for(s))
        c = confusion(pred, gt)
        total = c if total is None else total + c
    if total is None:
        raise ValueError("corpus has no test samples")
    return miou(total)


def run_two_stage(
    corpus: Manifest, opts: TrainOptions = TrainOptions()
) -> tuple[StageReport, StageReport]:
    """Train, refine supervision by agreement, retrain from scratch."""
    train_records = [s for s in corpus.samples if s.split == "train"]
    if not train_records:
        raise ValueError("corpus has no training samples")
    loaded = [_load_sample(s) for s in train_records]

    stage1_samples = [
        (features, Trimap(pseudo.raster)) for features, pseudo in loaded
    ]
    model1, curve1 = train_toy_model(stage1_samples, opts)
    report1 = StageReport(
        stage=1,
        train_loss_curve=tuple(curve1),
        ignore_fraction=0.0,
        eval_miou=_eval_miou(model1, corpus, opts.threshold),
    )

    stage2_samples = []
    for features, pseudo in loaded:
        pred = model1.predict_mask(features, opts.threshold)
        stage2_samples.append((features, build_trimap(pseudo, pred)))
    total_pixels = sum(t.raster.data.size for _, t in stage2_samples)
    ignored = sum(int((t.raster.data == IGNORE).sum()) for _, t in stage2_samples)
    if ignored == total_pixels:
        raise ValueError("no supervised pixels after trimap refinement")
    model2, curve2 = train_toy_model(stage2_samples, opts)
    report2 = StageReport(
        stage=2,
        train_loss_curve=tuple(curve2),
        ignore_fraction=ignored / total_pixels,
        eval_miou=_eval_miou(model2, corpus, opts.threshold),
    )
    return report1, report2
