"""FADE dynamic upsampling (x2) with gating, in explicit float64 form.

The operator compresses encoder and decoder features with 1x1 maps, predicts
per-location softmax kernels from their fused sum, reassembles the decoder
feature under those kernels, and gates the result against the encoder skip.
Analytic gradients for every input and parameter group are provided and can
be checked against central finite differences. A bilinear x2 baseline and a
small binary tensor container round out the module.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .raster import FeatureMap

FMAP_MAGIC = b"FMAP"


@dataclass(frozen=True)
class FadeParams:
    """Weights of one FADE instance.

    w_e, w_d: Cm x C compressors with Cm biases; w_k: K^2 x Cm x 3 x 3
    kernel-logit convolution with K^2 biases; w_g: length-C gate map with a
    scalar bias.
    """

    C: int
    Cm: int
    K: int
    w_e: np.ndarray
    b_e: np.ndarray
    w_d: np.ndarray
    b_d: np.ndarray
    w_k: np.ndarray
    b_k: np.ndarray
    w_g: np.ndarray
    b_g: float
    seed: int

    def __post_init__(self):
        if self.K < 1 or self.K % 2 == 0:
            raise ValueError(f"K must be odd and >= 1, got {self.K}")
        if self.Cm < 1 or self.C < 1:
            raise ValueError(f"need C >= 1 and Cm >= 1, got C={self.C}, Cm={self.Cm}")
        k2 = self.K * self.K
        shapes = {
            "w_e": (self.Cm, self.C),
            "b_e": (self.Cm,),
            "w_d": (self.Cm, self.C),
            "b_d": (self.Cm,),
            "w_k": (k2, self.Cm, 3, 3),
            "b_k": (k2,),
            "w_g": (self.C,),
        }
        for name, shape in shapes.items():
            a = getattr(self, name)
            if a.shape != shape:
                raise ValueError(f"{name} must have shape {shape}, got {a.shape}")
            if not np.isfinite(a).all():
                raise ValueError(f"{name} contains non-finite values")
        if not np.isfinite(self.b_g):
            raise ValueError("b_g must be finite")


@dataclass(frozen=True)
class FadeOutput:
    """Forward result plus cached intermediates for the backward pass."""

    y: FeatureMap
    kernels: np.ndarray  # K^2 x 2h x 2w, softmax over axis 0
    gate: np.ndarray  # 1 x 2h x 2w, strictly in (0, 1)
    context: dict


@dataclass(frozen=True)
class FadeGrads:
    """Gradients for both inputs and every parameter group."""

    decoder: np.ndarray
    encoder: np.ndarray
    w_e: np.ndarray
    b_e: np.ndarray
    w_d: np.ndarray
    b_d: np.ndarray
    w_k: np.ndarray
    b_k: np.ndarray
    w_g: np.ndarray
    b_g: float


@dataclass(frozen=True)
class GradReport:
    """Max absolute / relative analytic-vs-numeric error per gradient group."""

    groups: dict  # name -> {"max_abs": float, "max_rel": float}

    def max_rel(self) -> float:
        return max(v["max_rel"] for v in self.groups.values())

    def to_dict(self) -> dict:
        return {name: dict(v) for name, v in self.groups.items()}


def init_params(C: int, Cm: int = 16, K: int = 5, seed: int = 0) -> FadeParams:
    """Seeded initialization: compressors uniform in [-sqrt(1/C), sqrt(1/C)],
    kernel-logit and gate weights zero (uniform kernels, gate 0.5)."""
    if C < 1 or Cm < 1:
        raise ValueError(f"need C >= 1 and Cm >= 1, got C={C}, Cm={Cm}")
    if K < 1 or K % 2 == 0:
        raise ValueError(f"K must be odd and >= 1, got {K}")
    rng = np.random.default_rng(seed)
    a = (1.0 / C) ** 0.5
    k2 = K * K
    return FadeParams(
        C=C,
        Cm=Cm,
        K=K,
        w_e=rng.uniform(-a, a, (Cm, C)),
        b_e=rng.uniform(-a, a, Cm),
        w_d=rng.uniform(-a, a, (Cm, C)),
        b_d=rng.uniform(-a, a, Cm),
        w_k=np.zeros((k2, Cm, 3, 3)),
        b_k=np.zeros(k2),
        w_g=np.zeros(C),
        b_g=0.0,
        seed=seed,
    )


def _pad_replicate(a: np.ndarray, r: int) -> np.ndarray:
    return np.pad(a, ((0, 0), (r, r), (r, r)), mode="edge")


def _fold_replicate_pad(grad_padded: np.ndarray, r: int) -> np.ndarray:
    """Adjoint of replicate padding: margins fold back onto the edge cells."""
    c, hp, wp = grad_padded.shape
    h, w = hp - 2 * r, wp - 2 * r
    src_i = np.clip(np.arange(hp) - r, 0, h - 1)
    src_j = np.clip(np.arange(wp) - r, 0, w - 1)
    out = np.zeros((c, h, w))
    np.add.at(
        out,
        (
            np.arange(c)[:, None, None],
            src_i[None, :, None],
            src_j[None, None, :],
        ),
        grad_padded,
    )
    return out


def _conv3x3(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """3x3 convolution with replicate borders; x is Cin x H x W,
    w is Cout x Cin x 3 x 3."""
    _, h, wd = x.shape
    xp = _pad_replicate(x, 1)
    out = np.tensordot(b, np.ones((h, wd)), axes=0)
    for di in range(3):
        for dj in range(3):
            out += np.einsum("km,mhw->khw", w[:, :, di, dj], xp[:, di : di + h, dj : dj + wd])
    return out


def fade_forward(decoder: FeatureMap, encoder: FeatureMap, p: FadeParams) -> FadeOutput:
    """Run the FADE x2 upsampler.

    Pipeline: compress both inputs with 1x1 maps, nearest-upsample the
    decoder side, predict K^2 kernel logits with a 3x3 conv over the sum,
    softmax them per location, reassemble the raw decoder feature under the
    kernels, and blend with the encoder through a sigmoid gate.
    """
    d = decoder.data
    e = encoder.data
    if d.shape[0] != p.C or e.shape[0] != p.C:
        raise ValueError(
            f"channel mismatch: decoder {d.shape[0]}, encoder {e.shape[0]}, params C={p.C}"
        )
    _, h, w = d.shape
    if e.shape[1:] != (2 * h, 2 * w):
        raise ValueError(f"encoder must be {2 * h}x{2 * w}, got {e.shape[1]}x{e.shape[2]}")
    big_h, big_w = 2 * h, 2 * w
    k2 = p.K * p.K
    r = (p.K - 1) // 2

    e_comp = np.einsum("mc,chw->mhw", p.w_e, e) + p.b_e[:, None, None]
    d_comp = np.einsum("mc,chw->mhw", p.w_d, d) + p.b_d[:, None, None]
    d_up = d_comp.repeat(2, axis=1).repeat(2, axis=2)
    fused = e_comp + d_up
    logits = _conv3x3(fused, p.w_k, p.b_k)

    shifted = logits - logits.max(axis=0, keepdims=True)
    expl = np.exp(shifted)
    kernels = expl / expl.sum(axis=0, keepdims=True)

    d_pad = _pad_replicate(d, r)
    idx_i = np.arange(big_h) // 2
    idx_j = np.arange(big_w) // 2
    up = np.zeros((p.C, big_h, big_w))
    for q in range(k2):
        u, v = divmod(q, p.K)
        neigh = d_pad[:, idx_i + u, :][:, :, idx_j + v]
        up += kernels[q][None] * neigh

    gate_z = np.einsum("c,chw->hw", p.w_g, e) + p.b_g
    gate = expit(gate_z)
    y = gate[None] * e + (1.0 - gate[None]) * up

    context = {
        "decoder": d,
        "encoder": e,
        "params": p,
        "e_comp": e_comp,
        "fused": fused,
        "kernels": kernels,
        "d_pad": d_pad,
        "up": up,
        "gate": gate,
    }
    return FadeOutput(y=FeatureMap(y), kernels=kernels, gate=gate[None], context=context)


def fade_backward(out: FadeOutput, grad_y: FeatureMap) -> FadeGrads:
    """Exact gradients of sum(grad_y * y) with respect to inputs and weights."""
    if not out.context:
        raise ValueError("FadeOutput carries no context; rerun fade_forward")
    ctx = out.context
    p: FadeParams = ctx["params"]
    d, e = ctx["decoder"], ctx["encoder"]
    kernels, gate, up = ctx["kernels"], ctx["gate"], ctx["up"]
    gy = grad_y.data
    if gy.shape != out.y.data.shape:
        raise ValueError(f"grad_y shape {gy.shape} does not match y {out.y.data.shape}")
    c, big_h, big_w = gy.shape
    h, w = big_h // 2, big_w // 2
    k2 = p.K * p.K
    r = (p.K - 1) // 2

    # gate blend: y = g*E + (1-g)*U
    d_gate = np.sum(gy * (e - up), axis=0)
    d_e = gy * gate[None]
    d_up = gy * (1.0 - gate[None])

    # gate head
    dz_gate = d_gate * gate * (1.0 - gate)
    d_wg = np.einsum("hw,chw->c", dz_gate, e)
    d_bg = float(dz_gate.sum())
    d_e = d_e + p.w_g[:, None, None] * dz_gate[None]

    # kernel reassembly over the raw decoder feature
    idx_i = np.arange(big_h) // 2
    idx_j = np.arange(big_w) // 2
    d_pad = ctx["d_pad"]
    d_kernels = np.empty((k2, big_h, big_w))
    d_dpad = np.zeros_like(d_pad)
    ci = np.arange(c)[:, None, None]
    for q in range(k2):
        u, v = divmod(q, p.K)
        neigh = d_pad[:, idx_i + u, :][:, :, idx_j + v]
        d_kernels[q] = np.sum(d_up * neigh, axis=0)
        np.add.at(
            d_dpad,
            (ci, (idx_i + u)[None, :, None], (idx_j + v)[None, None, :]),
            kernels[q][None] * d_up,
        )
    d_dec = _fold_replicate_pad(d_dpad, r)

    # softmax over the kernel axis
    inner = np.sum(kernels * d_kernels, axis=0, keepdims=True)
    d_logits = kernels * (d_kernels - inner)

    # 3x3 conv
    fused_pad = _pad_replicate(ctx["fused"], 1)
    d_bk = d_logits.sum(axis=(1, 2))
    d_wk = np.empty_like(p.w_k)
    d_fused_pad = np.zeros_like(fused_pad)
    for di in range(3):
        for dj in range(3):
            window = fused_pad[:, di : di + big_h, dj : dj + big_w]
            d_wk[:, :, di, dj] = np.einsum("khw,mhw->km", d_logits, window)
            d_fused_pad[:, di : di + big_h, dj : dj + big_w] += np.einsum(
                "km,khw->mhw", p.w_k[:, :, di, dj], d_logits
            )
    d_fused = _fold_replicate_pad(d_fused_pad, 1)

    # fused = Ecomp + nearest-up(Dcomp)
    d_ecomp = d_fused
    d_dcomp = d_fused.reshape(p.Cm, h, 2, w, 2).sum(axis=(2, 4))

    # 1x1 compressors
    d_we = np.einsum("mhw,chw->mc", d_ecomp, e)
    d_be = d_ecomp.sum(axis=(1, 2))
    d_e = d_e + np.einsum("mc,mhw->chw", p.w_e, d_ecomp)
    d_wd = np.einsum("mhw,chw->mc", d_dcomp, d)
    d_bd = d_dcomp.sum(axis=(1, 2))
    d_dec = d_dec + np.einsum("mc,mhw->chw", p.w_d, d_dcomp)

    return FadeGrads(
        decoder=d_dec,
        encoder=d_e,
        w_e=d_we,
        b_e=d_be,
        w_d=d_wd,
        b_d=d_bd,
        w_k=d_wk,
        b_k=d_bk,
        w_g=d_wg,
        b_g=d_bg,
    )


def bilinear_upsample_x2(x: FeatureMap) -> FeatureMap:
    """Bilinear x2 with align_corners=false sampling and replicated borders."""
    a = x.data
    c, h, w = a.shape
    out_i = (np.arange(2 * h) + 0.5) / 2.0 - 0.5
    out_j = (np.arange(2 * w) + 0.5) / 2.0 - 0.5
    i0 = np.clip(np.floor(out_i).astype(np.int64), 0, h - 1)
    j0 = np.clip(np.floor(out_j).astype(np.int64), 0, w - 1)
    i1 = np.minimum(i0 + 1, h - 1)
    j1 = np.minimum(j0 + 1, w - 1)
    ti = np.clip(out_i - i0, 0.0, 1.0)[None, :, None]
    tj = np.clip(out_j - j0, 0.0, 1.0)[None, None, :]
    top = a[:, i0][:, :, j0] * (1 - tj) + a[:, i0][:, :, j1] * tj
    bot = a[:, i1][:, :, j0] * (1 - tj) + a[:, i1][:, :, j1] * tj
    return FeatureMap(top * (1 - ti) + bot * ti)


_GRAD_GROUPS = ("decoder", "encoder", "w_e", "w_d", "w_k", "w_g")


def grad_check(
    C: int = 3,
    h: int = 4,
    w: int = 4,
    K: int = 5,
    Cm: int = 8,
    seed: int = 1,
    eps: float = 1e-5,
) -> GradReport:
    """Compare analytic gradients against central differences on one
    seeded random instance; biases are checked alongside their weight group."""
    rng = np.random.default_rng(seed)
    p = init_params(C, Cm=Cm, K=K, seed=seed)
    # break the symmetric zero init so the kernel and gate paths are exercised
    p = FadeParams(
        C=C,
        Cm=Cm,
        K=K,
        w_e=p.w_e,
        b_e=p.b_e,
        w_d=p.w_d,
        b_d=p.b_d,
        w_k=rng.normal(0, 0.3, p.w_k.shape),
        b_k=rng.normal(0, 0.3, p.b_k.shape),
        w_g=rng.normal(0, 0.3, p.w_g.shape),
        b_g=float(rng.normal(0, 0.3)),
        seed=seed,
    )
    dec = FeatureMap(rng.normal(0, 1, (C, h, w)))
    enc = FeatureMap(rng.normal(0, 1, (C, 2 * h, 2 * w)))
    gv = rng.normal(0, 1, (C, 2 * h, 2 * w))

    out = fade_forward(dec, enc, p)
    grads = fade_backward(out, FeatureMap(gv))

    def loss_with(dec_a, enc_a, params):
        return float(np.sum(gv * fade_forward(FeatureMap(dec_a), FeatureMap(enc_a), params).y.data))

    def rebuild(**overrides):
        fields = dict(
            C=C, Cm=Cm, K=K, w_e=p.w_e, b_e=p.b_e, w_d=p.w_d, b_d=p.b_d,
            w_k=p.w_k, b_k=p.b_k, w_g=p.w_g, b_g=p.b_g, seed=seed,
        )
        fields.update(overrides)
        return FadeParams(**fields)

    def numeric(analytic, get_loss_of_perturbed):
        flat = np.asarray(analytic, dtype=np.float64).ravel()
        num = np.empty_like(flat)
        for idx in range(flat.size):
            num[idx] = get_loss_of_perturbed(idx)
        max_abs = float(np.max(np.abs(num - flat))) if flat.size else 0.0
        denom = np.maximum(np.abs(num), np.abs(flat))
        denom = np.where(denom < 1e-8, 1.0, denom)
        max_rel = float(np.max(np.abs(num - flat) / denom)) if flat.size else 0.0
        return {"max_abs": max_abs, "max_rel": max_rel}

    def central(base: np.ndarray, idx: int, loss_of) -> float:
        pert = base.copy().ravel()
        pert[idx] += eps
        hi = loss_of(pert.reshape(base.shape))
        pert[idx] -= 2 * eps
        lo = loss_of(pert.reshape(base.shape))
        return (hi - lo) / (2 * eps)

    groups = {
        "decoder": numeric(
            grads.decoder,
            lambda i: central(dec.data, i, lambda a: loss_with(a, enc.data, p)),
        ),
        "encoder": numeric(
            grads.encoder,
            lambda i: central(enc.data, i, lambda a: loss_with(dec.data, a, p)),
        ),
        "w_e": numeric(
            np.concatenate([grads.w_e.ravel(), grads.b_e]),
            lambda i: central(
                np.concatenate([p.w_e.ravel(), p.b_e]),
                i,
                lambda a: loss_with(
                    dec.data,
                    enc.data,
                    rebuild(
                        w_e=a[: p.w_e.size].reshape(p.w_e.shape),
                        b_e=a[p.w_e.size :],
                    ),
                ),
            ),
        ),
        "w_d": numeric(
            np.concatenate([grads.w_d.ravel(), grads.b_d]),
            lambda i: central(
                np.concatenate([p.w_d.ravel(), p.b_d]),
                i,
                lambda a: loss_with(
                    dec.data,
                    enc.data,
                    rebuild(
                        w_d=a[: p.w_d.size].reshape(p.w_d.shape),
                        b_d=a[p.w_d.size :],
                    ),
                ),
            ),
        ),
        "w_k": numeric(
            np.concatenate([grads.w_k.ravel(), grads.b_k]),
            lambda i: central(
                np.concatenate([p.w_k.ravel(), p.b_k]),
                i,
                lambda a: loss_with(
                    dec.data,
                    enc.data,
                    rebuild(
                        w_k=a[: p.w_k.size].reshape(p.w_k.shape),
                        b_k=a[p.w_k.size :],
                    ),
                ),
            ),
        ),
        "w_g": numeric(
            np.concatenate([grads.w_g, [grads.b_g]]),
            lambda i: central(
                np.concatenate([p.w_g, [p.b_g]]),
                i,
                lambda a: loss_with(
                    dec.data,
                    enc.data,
                    rebuild(w_g=a[:-1], b_g=float(a[-1])),
                ),
            ),
        ),
    }
    return GradReport(groups=groups)


def save_fmap(fm: FeatureMap, path) -> None:
    """Write the FMAP container: magic, u32 C/H/W, float64 little-endian data."""
    c, h, w = fm.data.shape
    with open(path, "wb") as f:
        f.write(FMAP_MAGIC)
        f.write(struct.pack("<III", c, h, w))
        f.write(fm.data.astype("<f8").tobytes())


def load_fmap(path) -> FeatureMap:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 16 or blob[:4] != FMAP_MAGIC:
        raise ValueError(f"{path}: not an FMAP container")
    c, h, w = struct.unpack("<III", blob[4:16])
    expected = 16 + 8 * c * h * w
    if len(blob) != expected:
        raise ValueError(f"{path}: expected {expected} bytes for {c}x{h}x{w}, got {len(blob)}")
    data = np.frombuffer(blob[16:], dtype="<f8").reshape(c, h, w)
    return FeatureMap(np.ascontiguousarray(data))
