"""Robustness certification: interval bound propagation (IBP) and CROWN backward
linear relaxation with IBP intermediate bounds (CROWN-IBP).

All bound computations are batched: arrays carry a leading sample axis N.
Specification rows compare the predicted class against every class j, giving
margins logit[y_hat] - logit[j]; the row for j = y_hat is identically zero.
"""

import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .attacks import AttackConfig, pgd
from .errors import CapabilityError, ContractError

SUPPORTED = ("Dense", "Conv2d", "ReLU", "Flatten", "AvgPool", "ResidualAdd")
CERTIFIED, FALSIFIED, UNKNOWN = "Certified", "Falsified", "Unknown"
METHODS = ("ibp", "crown-ibp")
STABLE_GAP = 1e-12


@dataclass
class Interval:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        self.lower = np.asarray(self.lower, dtype=np.float64)
        self.upper = np.asarray(self.upper, dtype=np.float64)
        if self.lower.shape != self.upper.shape:
            raise ContractError("interval bounds differ in shape")
        if (self.lower > self.upper).any():
            raise ContractError("interval lower bound exceeds upper bound")

    @classmethod
    def ball(cls, x, eps, clip=(0.0, 1.0)):
        """L-infinity ball around x intersected with the pixel box."""
        x = np.asarray(x, dtype=np.float64)
        lo, hi = x - eps, x + eps
        if clip is not None:
            lo, hi = np.clip(lo, *clip), np.clip(hi, *clip)
        return cls(lo, hi)

    @property
    def center(self):
        return (self.lower + self.upper) / 2

    @property
    def radius(self):
        return (self.upper - self.lower) / 2


@dataclass
class LinearBounds:
    """A_low @ z + b_low <= margins(z) <= A_up @ z + b_up for z in the input box
    (z flattened). Shapes: A (N, q, d), b (N, q)."""

    A_low: np.ndarray
    b_low: np.ndarray
    A_up: np.ndarray
    b_up: np.ndarray

    def evaluate(self, z):
        """Lower and upper affine values at points z of shape (N, d)."""
        lo = np.einsum("nqd,nd->nq", self.A_low, z) + self.b_low
        hi = np.einsum("nqd,nd->nq", self.A_up, z) + self.b_up
        return lo, hi

    def concretize(self, box):
        """Closed-form min of the lower function and max of the upper one over `box`."""
        n = self.A_low.shape[0]
        l = box.lower.reshape(n, 1, -1)
        u = box.upper.reshape(n, 1, -1)
        lower = self.b_low + np.minimum(self.A_low * l, self.A_low * u).sum(axis=2)
        upper = self.b_up + np.maximum(self.A_up * l, self.A_up * u).sum(axis=2)
        return lower, upper


@dataclass
class VerifyResult:
    status: str
    margin_bounds: np.ndarray  # lower bound on logit[y_hat] - logit[j]; +inf at j = y_hat
    y_hat: int
    method: str
    counterexample: np.ndarray = None

    @property
    def min_margin(self):
        return float(np.min(self.margin_bounds))


def _check_supported(model):
    for i, layer in enumerate(model.layers):
        if layer.kind not in SUPPORTED:
            raise CapabilityError(f"layer {i} ({layer.kind}) has no bound propagation rule")


def spec_matrix(y_hat, k):
    """(N, k, k) rows e_{y_hat} - e_j."""
    y_hat = np.atleast_1d(np.asarray(y_hat, dtype=np.int64))
    c = -np.broadcast_to(np.eye(k), (len(y_hat), k, k)).copy()
    c[np.arange(len(y_hat)), :, y_hat] += 1.0
    return c


def _params(model, i):
    w = model.params.get(f"{i}.weight")
    b = model.params.get(f"{i}.bias")
    return (None if w is None else w.astype(np.float64)), (None if b is None else b.astype(np.float64))


def _affine(layer, x, w, b):
    with ad.no_grad():
        if layer.kind == "Dense":
            return x @ w.T + (0 if b is None else b)
        if layer.kind == "Conv2d":
            return ad.conv2d(ad.Tensor(x), ad.Tensor(w), None if b is None else ad.Tensor(b),
                             layer.stride, layer.padding).data
        if layer.kind == "AvgPool":
            return ad.avg_pool_array(x, layer.size)
        if layer.kind == "Flatten":
            return x.reshape(len(x), -1)
    raise CapabilityError(f"{layer.kind} is not affine")


def ibp_layers(model, box, spec=None):
    """Propagate a batched input box; returns the Interval after every layer.

    With `spec` (N, q, k) and a final Dense layer, the last interval bounds
    spec @ logits, folding the spec into the last weight matrix.
    """
    _check_supported(model)
    outs = []
    cur = box
    last = len(model.layers) - 1
    for i, layer in enumerate(model.layers):
        w, b = _params(model, i)
        if layer.kind == "ReLU":
            cur = Interval(np.maximum(cur.lower, 0), np.maximum(cur.upper, 0))
        elif layer.kind == "ResidualAdd":
            skip = box if layer.source == -1 else outs[layer.source]
            cur = Interval(cur.lower + skip.lower, cur.upper + skip.upper)
        elif layer.kind == "AvgPool":
            cur = Interval(_affine(layer, cur.lower, w, b), _affine(layer, cur.upper, w, b))
        elif layer.kind == "Flatten":
            cur = Interval(cur.lower.reshape(len(cur.lower), -1),
                           cur.upper.reshape(len(cur.upper), -1))
        elif i == last and spec is not None and layer.kind == "Dense":
            wm = np.einsum("nqk,kd->nqd", spec, w)
            bm = np.einsum("nqk,k->nq", spec, b)
            mu = np.einsum("nqd,nd->nq", wm, cur.center) + bm
            r = np.einsum("nqd,nd->nq", np.abs(wm), cur.radius)
            cur = Interval(mu - r, mu + r)
        else:
            mu = _affine(layer, cur.center, w, b)
            r = _affine(layer, cur.radius, np.abs(w), None)
            cur = Interval(mu - r, mu + r)
        outs.append(cur)
    if spec is not None and model.layers[-1].kind != "Dense":
        lo, hi = outs[-1].lower, outs[-1].upper
        pos, neg = np.maximum(spec, 0), np.minimum(spec, 0)
        outs[-1] = Interval(np.einsum("nqk,nk->nq", pos, lo) + np.einsum("nqk,nk->nq", neg, hi),
                            np.einsum("nqk,nk->nq", pos, hi) + np.einsum("nqk,nk->nq", neg, lo))
    return outs


def ibp_propagate(model, interval, spec=None):
    """IBP for one input box (shape = model.input_shape) or a batch of boxes.

    Returns (output Interval, list of per-layer Intervals).
    """
    single = interval.lower.shape == model.input_shape
    box = Interval(interval.lower[None], interval.upper[None]) if single else interval
    layers = ibp_layers(model, box, spec)
    if single:
        layers = [Interval(iv.lower[0], iv.upper[0]) for iv in layers]
    return layers[-1], layers


def _relu_relaxation(l, u):
    """Slopes/intercepts of the linear envelopes of ReLU over [l, u]."""
    active = l >= 0
    unstable = (l < 0) & (u > 0)
    tiny = unstable & (u - l < STABLE_GAP)
    unstable &= ~tiny
    denom = np.where(unstable, u - l, 1.0)
    up_slope = np.where(unstable, u / denom, active.astype(np.float64))
    up_icpt = np.where(unstable, -l * u / denom, 0.0)
    # near-degenerate unstable neurons: constant envelopes 0 <= relu <= u
    up_icpt = np.where(tiny, u, up_icpt)
    lo_slope = np.where(unstable, (u >= -l).astype(np.float64), active.astype(np.float64))
    return lo_slope, up_slope, up_icpt


def _back_affine(layer, A, w, node_shape):
    """A (N, q, *out_shape) -> A composed with the layer's linear part."""
    n, q = A.shape[:2]
    if layer.kind == "Dense":
        return A @ w
    if layer.kind == "Flatten":
        return A.reshape((n, q) + tuple(node_shape))
    if layer.kind == "AvgPool":
        flat = A.reshape((n * q,) + A.shape[2:])
        return ad.avg_unpool_array(flat, layer.size, (n * q,) + tuple(node_shape)).reshape(
            (n, q) + tuple(node_shape))
    if layer.kind == "Conv2d":
        o, c, kh, kw = w.shape
        oh, ow = A.shape[3:]
        cols = A.reshape(n * q, o, oh * ow).transpose(0, 2, 1).reshape(-1, o) @ w.reshape(o, -1)
        img = ad.col2im_array(cols, (n * q,) + tuple(node_shape), kh, kw, layer.stride,
                              layer.padding)
        return img.reshape((n, q) + tuple(node_shape))
    raise CapabilityError(f"{layer.kind} is not affine")


def _bias_term(layer, A, b):
    if b is None:
        return 0.0
    if layer.kind == "Dense":
        return A @ b
    return np.einsum("nqohw,o->nq", A, b)


def crown_backward(model, intermediates, spec, box=None):
    """Back-substitute spec @ logits to affine bounds in the input.

    `intermediates` are batched IBP Intervals for every layer output (as from
    ibp_layers without a spec); they supply the pre-activation bounds. `box` is
    only needed when the first layer is a ReLU.
    """
    _check_supported(model)
    n, q = spec.shape[:2]
    pending_low = {len(model.layers) - 1: spec.astype(np.float64)}
    pending_up = {len(model.layers) - 1: spec.astype(np.float64)}
    b_low = np.zeros((n, q))
    b_up = np.zeros((n, q))

    def push(node, al, au):
        if node in pending_low:
            pending_low[node] = pending_low[node] + al
            pending_up[node] = pending_up[node] + au
        else:
            pending_low[node], pending_up[node] = al, au

    for i in range(len(model.layers) - 1, -1, -1):
        if i not in pending_low:
            continue
        al, au = pending_low.pop(i), pending_up.pop(i)
        layer = model.layers[i]
        in_shape = model.input_shape if i == 0 else model.shapes[i - 1]
        w, b = _params(model, i)
        if layer.kind == "ReLU":
            pre = intermediates[i - 1] if i > 0 else box
            if pre is None:
                raise ContractError("a leading ReLU needs the input box")
            lo_s, up_s, up_c = (v[:, None] for v in _relu_relaxation(pre.lower, pre.upper))
            al_pos, al_neg = np.maximum(al, 0), np.minimum(al, 0)
            au_pos, au_neg = np.maximum(au, 0), np.minimum(au, 0)
            b_low += (al_neg * up_c).reshape(n, q, -1).sum(axis=2)
            b_up += (au_pos * up_c).reshape(n, q, -1).sum(axis=2)
            push(i - 1, al_pos * lo_s + al_neg * up_s, au_pos * up_s + au_neg * lo_s)
        elif layer.kind == "ResidualAdd":
            push(i - 1, al, au)
            push(layer.source, al, au)
        else:
            b_low += _bias_term(layer, al, b)
            b_up += _bias_term(layer, au, b)
            push(i - 1, _back_affine(layer, al, w, in_shape), _back_affine(layer, au, w, in_shape))
    al, au = pending_low.pop(-1), pending_up.pop(-1)
    return LinearBounds(al.reshape(n, q, -1), b_low, au.reshape(n, q, -1), b_up)


def _certify_batch(model, xs, eps, method, y_hat=None):
    xs = np.asarray(xs, dtype=np.float64)
    m64 = model.astype(np.float64)
    if y_hat is None:
        y_hat = m64.predict(xs)
    y_hat = np.atleast_1d(np.asarray(y_hat, dtype=np.int64))
    box = Interval.ball(xs, eps)
    spec = spec_matrix(y_hat, model.num_classes)
    if method == "ibp":
        margins = ibp_layers(m64, box, spec)[-1].lower
    elif method == "crown-ibp":
        inter = ibp_layers(m64, box)
        crown = crown_backward(m64, inter, spec, box).concretize(box)[0]
        # both are sound lower bounds; CROWN with adaptive slopes is sometimes the looser one
        margins = np.maximum(crown, ibp_layers(m64, box, spec)[-1].lower)
    else:
        raise ContractError(f"unknown verification method {method!r}; expected {METHODS}")
    margins = margins.copy()
    margins[np.arange(len(y_hat)), y_hat] = np.inf
    results = []
    for row, yh in zip(margins, y_hat):
        status = CERTIFIED if (row > 0).all() else UNKNOWN
        results.append(VerifyResult(status, row, int(yh), method))
    return results


def certify(model, xs, eps, method="ibp", batch_size=50):
    """Certify a batch of inputs; never returns Falsified."""
    out = []
    for start in range(0, len(xs), batch_size):
        out += _certify_batch(model, xs[start:start + batch_size], eps, method)
    return out


def ibp_certify(model, x, eps, y_hat=None):
    return _certify_batch(model, np.asarray(x)[None], eps, "ibp", y_hat)[0]


def crown_ibp_certify(model, x, eps, y_hat=None):
    return _certify_batch(model, np.asarray(x)[None], eps, "crown-ibp", y_hat)[0]


def verify(model, x, eps, method="crown-ibp", attack=None):
    """Certify, then if uncertified try PGD for a counterexample (Falsified)."""
    res = _certify_batch(model, np.asarray(x)[None], eps, method)[0]
    if res.status == CERTIFIED or attack is None or eps == 0:
        return res
    cfg = AttackConfig(**{**attack.__dict__, "eps": eps,
                          "step_alpha": min(attack.step_alpha, eps)})
    m64 = model.astype(np.float64)
    adv = pgd(m64, np.asarray(x, dtype=np.float64), res.y_hat, cfg)
    inside = np.abs(adv - x).max() <= eps + 1e-9 and adv.min() >= 0 and adv.max() <= 1
    if inside and m64.predict(adv) != res.y_hat:
        res.status, res.counterexample = FALSIFIED, adv
    return res


def verified_rate(model, xs, eps, method="ibp", batch_size=50):
    """Fraction of inputs certified by `method`."""
    if len(xs) == 0:
        raise ContractError("verified_rate needs a nonempty subset")
    results = certify(model, xs, eps, method, batch_size)
    return sum(r.status == CERTIFIED for r in results) / len(results)


def certificate_lines(results, sample_ids):
    """One JSON object per line: sample id, method, status, min margin bound."""
    return [json.dumps({"sample": int(i), "method": r.method, "status": r.status,
                        "min_margin": round(r.min_margin, 9)}, sort_keys=True)
            for i, r in zip(sample_ids, results)]
