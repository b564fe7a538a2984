"""FGSM and PGD inside the L-infinity ball intersected with the pixel box [0, 1]."""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ContractError


@dataclass(frozen=True)
class AttackConfig:
    eps: float = 0.1
    step_alpha: float = None  # defaults to eps / 4
    steps: int = 40
    restarts: int = 1
    random_start: bool = True
    seed: int = 0
    loss: str = "ce"

    def __post_init__(self):
        if self.step_alpha is None:
            object.__setattr__(self, "step_alpha", self.eps / 4)
        if self.eps < 0:
            raise ContractError(f"eps must be >= 0, got {self.eps}")
        if self.eps > 0 and not 0 < self.step_alpha <= self.eps:
            raise ContractError(f"need 0 < step_alpha <= eps, got {self.step_alpha}, {self.eps}")
        if self.steps < 1 or self.restarts < 1:
            raise ContractError("steps and restarts must be >= 1")
        if self.loss not in ("ce", "margin"):
            raise ContractError(f"unknown attack loss {self.loss!r}")


def per_sample_loss(logits, y, kind="ce"):
    """(N,) loss tensor: cross-entropy, or best wrong logit minus true logit."""
    if kind == "ce":
        return ad.cross_entropy(logits, y, reduction="none")
    hot = ad.one_hot(y, logits.shape[1], logits.dtype)
    true = ad.reduce_sum(logits * hot, axis=1)
    wrong = ad.reduce_max(logits - hot * 1e9, axis=1)
    return wrong - true


def _loss_and_grad(model, x, y, kind):
    xt = ad.Tensor(x, requires_grad=True)
    losses = per_sample_loss(model.forward(xt), y, kind)
    g = ad.grad(ad.reduce_sum(losses), xt)
    return losses.data, g.data


def losses(model, x, y, kind="ce"):
    with ad.no_grad():
        return per_sample_loss(model.forward(ad.Tensor(x, dtype=model.dtype)), y, kind).data


def _as_batch(model, x, y):
    x = np.asarray(x, dtype=model.dtype)
    single = x.shape == model.input_shape
    if single:
        x = x[None]
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    return x, y, single


def project(x_adv, x0, eps):
    return np.clip(x_adv, np.maximum(x0 - eps, 0.0), np.minimum(x0 + eps, 1.0))


def fgsm(model, x, y, eps, loss="ce"):
    """One signed-gradient step of size eps, projected onto the feasible ball."""
    x, y, single = _as_batch(model, x, y)
    if eps == 0:
        return x[0] if single else x
    _, g = _loss_and_grad(model, x, y, loss)
    out = project(x + eps * np.sign(g), x, eps)
    return out[0] if single else out


def pgd(model, x, y, cfg, sample_ids=None):
    """Projected signed-gradient ascent; returns the highest-loss iterate over all
    steps and restarts. Random starts are drawn per (seed, sample id, restart)."""
    x0, y, single = _as_batch(model, x, y)
    if cfg.eps == 0:
        return x0[0] if single else x0
    ids = np.arange(len(x0)) if sample_ids is None else np.asarray(sample_ids)
    best = x0.copy()
    best_loss = np.full(len(x0), -np.inf)
    lo, hi = np.maximum(x0 - cfg.eps, 0.0), np.minimum(x0 + cfg.eps, 1.0)
    for r in range(cfg.restarts):
        if cfg.random_start:
            noise = np.stack([
                np.random.default_rng([cfg.seed, int(i), r]).uniform(-cfg.eps, cfg.eps, x0.shape[1:])
                for i in ids])
            cur = np.clip(x0 + noise.astype(x0.dtype), lo, hi)
        else:
            cur = x0.copy()
        for _ in range(cfg.steps):
            cur_loss, g = _loss_and_grad(model, cur, y, cfg.loss)
            better = cur_loss > best_loss
            best[better], best_loss[better] = cur[better], cur_loss[better]
            cur = np.clip(cur + cfg.step_alpha * np.sign(g), lo, hi)
        cur_loss = losses(model, cur, y, cfg.loss)
        better = cur_loss > best_loss
        best[better], best_loss[better] = cur[better], cur_loss[better]
    return best[0] if single else best


def adversarial_error(model, dataset, cfg, batch_size=250):
    """Fraction of clean-correct samples whose PGD output is misclassified."""
    if len(dataset) == 0:
        raise ContractError("adversarial_error needs a nonempty dataset")
    if cfg.eps == 0:
        return 0.0
    correct = flipped = 0
    for start in range(0, len(dataset), batch_size):
        xb = dataset.images[start:start + batch_size].astype(model.dtype)
        yb = dataset.labels[start:start + batch_size]
        ok = model.predict(xb) == yb
        if not ok.any():
            continue
        ids = np.arange(start, start + len(xb))[ok]
        adv = pgd(model, xb[ok], yb[ok], cfg, sample_ids=ids)
        correct += int(ok.sum())
        flipped += int((model.predict(adv) != yb[ok]).sum())
    return flipped / correct if correct else 0.0
