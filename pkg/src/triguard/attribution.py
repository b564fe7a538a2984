"""Gradient attributions: Integrated Gradients, saliency and SmoothGrad-squared."""

import csv
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ContractError, DimensionError

BASELINE_KINDS = ("zero", "blur", "gaussian", "uniform")


@dataclass
class AttributionMap:
    scores: np.ndarray
    target: int
    method: str
    baseline: str = ""
    steps: int = 0  # IG step count m or SmoothGrad sample count N
    seed: int = 0

    def __post_init__(self):
        if not np.isfinite(self.scores).all():
            raise ContractError("attribution scores must be finite")


def box_blur(x, kernel_size=5):
    """Per-channel box filter with edge replication; x is (C, H, W)."""
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise ContractError(f"blur kernel size must be odd and positive, got {kernel_size}")
    r = kernel_size // 2
    padded = np.pad(np.asarray(x, dtype=np.float64), ((0, 0), (r, r), (r, r)), mode="edge")
    win = np.lib.stride_tricks.sliding_window_view(padded, (kernel_size, kernel_size), axis=(1, 2))
    return win.mean(axis=(-2, -1))


def make_baseline(x, kind="zero", seed=0, kernel_size=5, sigma=0.1):
    """Reference input for IG. Noise baselines are deterministic in `seed`."""
    x = np.asarray(x)
    if kind == "zero":
        out = np.zeros_like(x, dtype=np.float64)
    elif kind == "blur":
        img = x.reshape((1,) * (3 - x.ndim) + x.shape) if x.ndim < 3 else x
        out = box_blur(img, kernel_size).reshape(x.shape)
    elif kind == "gaussian":
        out = np.random.default_rng(seed).normal(0.0, sigma, x.shape)
    elif kind == "uniform":
        out = np.random.default_rng(seed).uniform(0.0, 1.0, x.shape)
    else:
        raise ContractError(f"unknown baseline kind {kind!r}; expected one of {BASELINE_KINDS}")
    return np.clip(out, 0.0, 1.0)


def logit_gradients(model, xs, targets, batch_size=64):
    """d logit[target_i] / d x_i for each row of `xs`; returns an array like `xs`."""
    xs = np.asarray(xs, dtype=model.dtype)
    targets = np.broadcast_to(np.asarray(targets, dtype=np.int64), (len(xs),))
    out = np.empty_like(xs)
    for start in range(0, len(xs), batch_size):
        xb = ad.Tensor(xs[start:start + batch_size], requires_grad=True)
        tb = targets[start:start + batch_size]
        logits = model.forward(xb)
        picked = ad.reduce_sum(logits * ad.one_hot(tb, model.num_classes, logits.dtype))
        out[start:start + batch_size] = ad.grad(picked, xb).data
    return out


def _resolve_target(model, x, target):
    if target is None:
        return model.predict(x)
    if not 0 <= target < model.num_classes:
        raise ContractError(f"target {target} outside [0, {model.num_classes})")
    return int(target)


def integrated_gradients(model, x, baseline="zero", m=64, target=None, seed=0, batch_size=64):
    """Right-endpoint Riemann sum of the target-logit gradient along the straight
    path from `baseline` to `x` (points j/m for j = 1..m)."""
    if m < 1:
        raise ContractError(f"IG needs m >= 1, got {m}")
    x = np.asarray(x, dtype=model.dtype)
    tag = baseline if isinstance(baseline, str) else "custom"
    ref = make_baseline(x, baseline, seed) if isinstance(baseline, str) else np.asarray(baseline)
    if ref.shape != x.shape:
        raise DimensionError(f"baseline shape {ref.shape} != input shape {x.shape}")
    ref = ref.astype(model.dtype)
    target = _resolve_target(model, x, target)
    path_t = np.arange(1, m + 1, dtype=model.dtype) / m
    points = ref[None] + path_t.reshape((m,) + (1,) * x.ndim) * (x - ref)[None]
    grads = logit_gradients(model, points, target, batch_size)
    scores = (x - ref) * grads.mean(axis=0)
    return AttributionMap(scores, target, "ig", tag, m, seed)


def saliency(model, x, target=None):
    x = np.asarray(x, dtype=model.dtype)
    target = _resolve_target(model, x, target)
    return AttributionMap(logit_gradients(model, x[None], target)[0], target, "saliency")


def smoothgrad_sq(model, x, n=25, sigma=0.1, target=None, seed=0, batch_size=64):
    """Mean of squared saliency maps at x + noise, noise ~ N(0, sigma^2); no clamping."""
    if n < 1 or sigma < 0:
        raise ContractError(f"need n >= 1 and sigma >= 0, got {n}, {sigma}")
    x = np.asarray(x, dtype=model.dtype)
    target = _resolve_target(model, x, target)
    noise = np.random.default_rng(seed).normal(0.0, sigma, (n,) + x.shape)
    grads = logit_gradients(model, x[None] + noise.astype(model.dtype), target, batch_size)
    return AttributionMap((grads ** 2).mean(axis=0), target, "smoothgrad2", "", n, seed)


def write_attribution_csv(path, maps):
    """One row per sample: sample_id, method, baseline, target, then flattened scores."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        for sample_id, amap in maps.items():
            w.writerow([sample_id, amap.method, amap.baseline, amap.target]
                       + [f"{v:.9e}" for v in amap.scores.reshape(-1)])


def read_attribution_csv(path):
    out = {}
    with open(path, newline="") as f:
        for row in csv.reader(f):
            out[row[0]] = (row[1], row[2], int(row[3]), np.array(row[4:], dtype=np.float64))
    return out
