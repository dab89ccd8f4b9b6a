"""Dual-branch client model: global branch, part branch, fusion and local loss.

Both branches are two-layer tanh MLPs.  The global branch sees the full
flattened image; the part branch runs one sub-extractor per horizontal strip
and averages the three part features.  The client feature is

    fused = alpha * global_feature + (1 - alpha) * part_feature

and the local objective is batch-hard triplet loss on the L2-normalised fused
feature plus softmax cross-entropy of a linear head over the raw fused
feature.  Gradients are derived by hand; ``tests/test_gradcheck.py`` checks
them against central finite differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import kernels
from .params import LayoutError, ParamVector
from .synthdata import NUM_PARTS, PART_NAMES, Sample, PartViews

NORM_FLOOR = 1e-12


class BatchCompositionError(ValueError):
    """Batch cannot form a triplet for every anchor."""


@dataclass(frozen=True)
class ModelConfig:
    image_height: int = 24
    image_width: int = 12
    hidden_dim: int = 32
    feat_dim: int = 16

    def __post_init__(self):
        if self.image_height % NUM_PARTS:
            raise LayoutError("image_height must be divisible by 3")

    @property
    def strip_pixels(self) -> int:
        return (self.image_height // NUM_PARTS) * self.image_width

    @property
    def image_pixels(self) -> int:
        return self.image_height * self.image_width


@dataclass(frozen=True)
class FusionConfig:
    alpha: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"fusion alpha must lie in [0, 1], got {self.alpha}")


@dataclass(frozen=True)
class TripletConfig:
    margin: float = 0.3

    def __post_init__(self):
        if not self.margin > 0:
            raise ValueError(f"triplet margin must be positive, got {self.margin}")


def _mlp_layout(prefix: str, n_in: int, n_hidden: int, n_out: int):
    return (
        (f"{prefix}w1", (n_in, n_hidden)),
        (f"{prefix}b1", (n_hidden,)),
        (f"{prefix}w2", (n_hidden, n_out)),
        (f"{prefix}b2", (n_out,)),
    )


def global_layout(mc: ModelConfig):
    return _mlp_layout("", mc.image_pixels, mc.hidden_dim, mc.feat_dim)


def part_layout(mc: ModelConfig):
    out = ()
    for name in PART_NAMES:
        out += _mlp_layout(f"{name}.", mc.strip_pixels, mc.hidden_dim, mc.feat_dim)
    return out


def head_layout(mc: ModelConfig, num_classes: int):
    return (("w", (mc.feat_dim, num_classes)), ("b", (num_classes,)))


@dataclass(frozen=True, eq=False)
class GlobalBranch:
    params: ParamVector


@dataclass(frozen=True, eq=False)
class PartBranch:
    params: ParamVector


@dataclass(frozen=True, eq=False)
class ClassifierHead:
    params: ParamVector

    @property
    def num_classes(self) -> int:
        return self.params.layout[1][1][0]


@dataclass(frozen=True, eq=False)
class DualBranchModel:
    global_branch: GlobalBranch
    part_branch: PartBranch
    head: ClassifierHead
    config: ModelConfig


def _init_mlp(rng, n_in, n_hidden, n_out):
    return [
        rng.standard_normal((n_in, n_hidden)) / math.sqrt(n_in),
        np.zeros(n_hidden),
        rng.standard_normal((n_hidden, n_out)) / math.sqrt(n_hidden),
        np.zeros(n_out),
    ]


def _pack(layout, arrays) -> ParamVector:
    return ParamVector(np.concatenate([a.reshape(-1) for a in arrays]), layout)


def init_global(mc: ModelConfig, rng: np.random.Generator) -> GlobalBranch:
    return GlobalBranch(_pack(global_layout(mc), _init_mlp(rng, mc.image_pixels, mc.hidden_dim, mc.feat_dim)))


def init_parts(mc: ModelConfig, rng: np.random.Generator) -> PartBranch:
    arrays = []
    for _ in PART_NAMES:
        arrays += _init_mlp(rng, mc.strip_pixels, mc.hidden_dim, mc.feat_dim)
    return PartBranch(_pack(part_layout(mc), arrays))


def init_head(mc: ModelConfig, num_classes: int, rng: np.random.Generator) -> ClassifierHead:
    w = rng.standard_normal((mc.feat_dim, num_classes)) / math.sqrt(mc.feat_dim)
    return ClassifierHead(_pack(head_layout(mc, num_classes), [w, np.zeros(num_classes)]))


def _views(flat: np.ndarray, layout) -> list[np.ndarray]:
    out = []
    offset = 0
    for _, shape in layout:
        n = math.prod(shape)
        out.append(flat[offset : offset + n].reshape(shape))
        offset += n
    return out


def _mlp_forward(w1, b1, w2, b2, x):
    a1 = np.tanh(x @ w1 + b1)
    return a1, a1 @ w2 + b2


def _mlp_backward(w1, w2, x, a1, d_out):
    dw2 = a1.T @ d_out
    db2 = d_out.sum(axis=0)
    dh = (d_out @ w2.T) * (1.0 - a1 * a1)
    dw1 = x.T @ dh
    db1 = dh.sum(axis=0)
    return [dw1, db1, dw2, db2]


def _as_batch(pixels, mc: ModelConfig) -> np.ndarray:
    x = np.asarray(pixels, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.shape[1:] != (mc.image_height, mc.image_width):
        raise LayoutError(f"pixel grid {x.shape[1:]} does not match model ({mc.image_height}, {mc.image_width})")
    return x


def global_features(params: ParamVector, pixels, mc: ModelConfig) -> np.ndarray:
    """Global-branch features for a (B, H, W) batch of pixel grids."""
    x = _as_batch(pixels, mc).reshape(-1, mc.image_pixels)
    w1, b1, w2, b2 = _views(params.values, global_layout(mc))
    return _mlp_forward(w1, b1, w2, b2, x)[1]


def _part_inputs(x: np.ndarray, mc: ModelConfig) -> list[np.ndarray]:
    k = mc.image_height // NUM_PARTS
    return [x[:, j * k : (j + 1) * k, :].reshape(len(x), -1) for j in range(NUM_PARTS)]


def forward_global(gb: GlobalBranch, s: Sample | np.ndarray, mc: ModelConfig) -> np.ndarray:
    pixels = s.pixels if isinstance(s, Sample) else s
    return global_features(gb.params, pixels, mc)[0]


def forward_parts(pb: PartBranch, pv: PartViews, mc: ModelConfig) -> tuple[list[np.ndarray], np.ndarray]:
    """Per-part features and their mean (the combined part feature)."""
    views = _views(pb.params.values, part_layout(mc))
    feats = []
    for j, strip in enumerate(pv.strips()):
        x = np.asarray(strip, dtype=np.float64).reshape(1, -1)
        if x.shape[1] != mc.strip_pixels:
            raise LayoutError(f"strip of {x.shape[1]} pixels, model expects {mc.strip_pixels}")
        feats.append(_mlp_forward(*views[4 * j : 4 * j + 4], x)[1][0])
    return feats, (feats[0] + feats[1] + feats[2]) / 3.0


def fuse(theta_global, theta_part, fc: FusionConfig) -> np.ndarray:
    g = np.asarray(theta_global, dtype=np.float64)
    p = np.asarray(theta_part, dtype=np.float64)
    if g.shape != p.shape:
        raise LayoutError(f"cannot fuse features of shapes {g.shape} and {p.shape}")
    return fc.alpha * g + (1.0 - fc.alpha) * p


def check_triplet_batch(labels: Sequence[int]) -> None:
    values, counts = np.unique(np.asarray(labels), return_counts=True)
    if len(values) < 2 or counts.min() < 2:
        raise BatchCompositionError("batch needs >= 2 identities with >= 2 samples each")


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    expz = np.exp(z)
    total = expz.sum(axis=1, keepdims=True)
    rows = np.arange(len(labels))
    loss = float(np.mean(np.log(total[:, 0]) - z[rows, labels]))
    d = expz / total
    d[rows, labels] -= 1.0
    return loss, d / len(labels)


def batch_hard_triplet(features: np.ndarray, labels: np.ndarray, margin: float):
    """Batch-hard triplet loss on L2-normalised features.

    Returns ``(loss, d_features, slack)``; ``slack`` holds, per anchor,
    ``margin + d(a, p) - d(a, n)`` before the hinge.
    """
    n = len(labels)
    r = np.maximum(np.sqrt(np.einsum("ij,ij->i", features, features)), NORM_FLOOR)[:, None]
    u = features / r
    dist = kernels.pairwise_sqdist(u, u)
    losses, pos, neg = kernels.batch_hard_mine(dist, np.asarray(labels, dtype=np.int64), margin)
    rows = np.arange(n)
    slack = margin + dist[rows, pos] - dist[rows, neg]
    active = losses > 0.0
    du = np.zeros_like(u)
    c = 2.0 / n
    a = rows[active]
    to_pos = c * (u[a] - u[pos[a]])
    to_neg = c * (u[a] - u[neg[a]])
    np.add.at(du, a, to_pos - to_neg)
    np.add.at(du, pos[a], -to_pos)
    np.add.at(du, neg[a], to_neg)
    d_feat = (du - u * np.einsum("ij,ij->i", u, du)[:, None]) / r
    return float(np.mean(losses)), d_feat, slack


@dataclass
class LocalGrads:
    global_: np.ndarray
    part: np.ndarray
    head: np.ndarray


def forward_backward(global_flat, part_flat, head_flat, pixels, labels, mc: ModelConfig,
                     fc: FusionConfig, tc: TripletConfig, num_classes: int, need_grad: bool = True):
    """Local objective on one batch; returns ``(loss, terms, grads | None, slack)``.

    Works on flat float64 arrays so the trainer can update parameters in place.
    """
    labels = np.asarray(labels, dtype=np.int64)
    check_triplet_batch(labels)
    x = _as_batch(pixels, mc)
    xg = x.reshape(len(x), -1)
    gw = _views(global_flat, global_layout(mc))
    a_g, feat_g = _mlp_forward(*gw, xg)

    alpha = fc.alpha
    use_parts = alpha != 1.0
    if use_parts:
        pw = _views(part_flat, part_layout(mc))
        xs = _part_inputs(x, mc)
        part_cache = []
        feat_p = 0.0
        for j in range(NUM_PARTS):
            a_j, f_j = _mlp_forward(*pw[4 * j : 4 * j + 4], xs[j])
            part_cache.append(a_j)
            feat_p = feat_p + f_j
        feat_p = feat_p / 3.0
        fused = alpha * feat_g + (1.0 - alpha) * feat_p
    else:
        fused = feat_g

    hw, hb = _views(head_flat, head_layout(mc, num_classes))
    logits = fused @ hw + hb
    l_ce, d_logits = cross_entropy(logits, labels)
    l_tri, d_fused, slack = batch_hard_triplet(fused, labels, tc.margin)
    loss = l_tri + l_ce
    terms = {"triplet": l_tri, "ce": l_ce}
    if not need_grad:
        return loss, terms, None, slack

    d_fused = d_fused + d_logits @ hw.T
    g_head = np.concatenate([(fused.T @ d_logits).reshape(-1), d_logits.sum(axis=0)])
    g_global = np.concatenate([g.reshape(-1) for g in _mlp_backward(gw[0], gw[2], xg, a_g, alpha * d_fused)])
    if use_parts:
        d_part = (1.0 - alpha) * d_fused / 3.0
        pieces = []
        for j in range(NUM_PARTS):
            w1, _, w2, _ = pw[4 * j : 4 * j + 4]
            pieces += [g.reshape(-1) for g in _mlp_backward(w1, w2, xs[j], part_cache[j], d_part)]
        g_part = np.concatenate(pieces)
    else:
        g_part = np.zeros_like(part_flat)
    return loss, terms, LocalGrads(g_global, g_part, g_head), slack


def loss_local(pixels, labels, model: DualBranchModel, fc: FusionConfig, tc: TripletConfig):
    """Scalar local loss and its ``{"triplet", "ce"}`` breakdown."""
    loss, terms, _, _ = forward_backward(
        model.global_branch.params.values, model.part_branch.params.values, model.head.params.values,
        pixels, labels, model.config, fc, tc, model.head.num_classes, need_grad=False,
    )
    return loss, terms


def grad_local(pixels, labels, model: DualBranchModel, fc: FusionConfig, tc: TripletConfig):
    """Gradients of the local loss as ``(global, part, head)`` ParamVectors."""
    _, _, grads, _ = forward_backward(
        model.global_branch.params.values, model.part_branch.params.values, model.head.params.values,
        pixels, labels, model.config, fc, tc, model.head.num_classes,
    )
    return (
        ParamVector(grads.global_, model.global_branch.params.layout),
        ParamVector(grads.part, model.part_branch.params.layout),
        ParamVector(grads.head, model.head.params.layout),
    )
