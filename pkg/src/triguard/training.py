"""Adam training with cross-entropy plus an optional input-gradient entropy penalty."""

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ContractError, NonFiniteError, TrainingError

DEGENERATE_GRAD_MASS = 1e-20


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 5
    batch_size: int = 128
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    lam: float = 0.0
    delta_pen: float = 1e-10
    seed: int = 0
    train_subset: int = None
    dtype: str = "float32"

    def __post_init__(self):
        if self.lam < 0:
            raise ContractError(f"lam must be >= 0, got {self.lam}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ContractError("epochs and batch_size must be >= 1")
        if self.lr <= 0:
            raise ContractError(f"learning rate must be positive, got {self.lr}")
        if self.delta_pen <= 0:
            raise ContractError("delta_pen must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ContractError(f"dtype must be float32 or float64, got {self.dtype}")

    def digest(self):
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class TrainHistory:
    ce_loss: list = field(default_factory=list)
    penalty: list = field(default_factory=list)
    train_accuracy: list = field(default_factory=list)
    test_accuracy: float = None

    def rows(self):
        return [{"epoch": i + 1, "ce_loss": c, "penalty": p, "train_accuracy": a}
                for i, (c, p, a) in enumerate(zip(self.ce_loss, self.penalty,
                                                   self.train_accuracy))]


class Adam:
    """Adam with bias correction over a dict of named arrays."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = {k: np.array(v) for k, v in params.items()}
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in self.params.items()}
        self.v = {k: np.zeros_like(v) for k, v in self.params.items()}
        self.t = 0

    def step(self, grads):
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for k, g in grads.items():
            m = self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            v = self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            self.params[k] = self.params[k] - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return self.params


def _penalty_from_grad(g, delta_pen):
    """Mean over samples of -sum p log(p + delta), p = |g| / sum |g| per sample."""
    n = g.shape[0]
    mag = ad.reshape(ad.absolute(g), (n, -1))
    mass = ad.reduce_sum(mag, axis=1, keepdims=True)
    live = mass.data >= DEGENERATE_GRAD_MASS
    # degenerate samples get a dummy denominator and are masked out
    p = mag / (mass + ad.Tensor(np.where(live, 0.0, 1.0), dtype=g.dtype))
    per = ad.neg(ad.reduce_sum(p * ad.log(p, delta_pen), axis=1))
    per = per * ad.Tensor(live[:, 0], dtype=g.dtype)
    return ad.mean(per)


def entropy_penalty(model, batch_x, batch_y, delta_pen=1e-10, params=None):
    """Differentiable entropy of normalised input gradients of the CE loss.

    Pass `params` as requires_grad Tensors to backpropagate into the weights.
    """
    if len(batch_x) == 0:
        raise ContractError("entropy_penalty needs a nonempty batch")
    xt = ad.Tensor(batch_x, requires_grad=True, dtype=model.dtype)
    ce = ad.cross_entropy(model.forward(xt, params), batch_y, reduction="sum")
    g = ad.grad(ce, xt, create_graph=True)
    return _penalty_from_grad(g, delta_pen)


def train(model, dataset, cfg, test_dataset=None, log=None):
    """Minimise CE + lam * entropy penalty with Adam; returns (model, history).

    Deterministic in cfg.seed. lam == 0 skips the penalty entirely.
    """
    dtype = np.dtype(cfg.dtype)
    model = model.astype(dtype)
    data = dataset.subset(cfg.train_subset, cfg.seed)
    opt = Adam(model.params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps_adam)
    rng = np.random.default_rng(cfg.seed)
    names = sorted(model.params)
    hist = TrainHistory()
    n = len(data)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        ce_sum = pen_sum = 0.0
        correct = 0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            xb = data.images[idx].astype(dtype)
            yb = data.labels[idx]
            try:
                params = {k: ad.Tensor(opt.params[k], requires_grad=True) for k in names}
                if cfg.lam > 0:
                    xt = ad.Tensor(xb, requires_grad=True)
                    logits = model.forward(xt, params)
                    ce = ad.cross_entropy(logits, yb)
                    # per-sample input gradients of the summed loss
                    g = ad.grad(ad.cross_entropy(logits, yb, reduction="sum"), xt,
                                create_graph=True)
                    pen = _penalty_from_grad(g, cfg.delta_pen)
                    loss = ce + pen * cfg.lam
                    pen_sum += pen.item() * len(idx)
                else:
                    logits = model.forward(ad.Tensor(xb), params)
                    ce = ad.cross_entropy(logits, yb)
                    loss = ce
                grads = ad.grad(loss, [params[k] for k in names])
            except NonFiniteError as exc:
                raise TrainingError(f"training diverged: {exc}", epoch + 1, b + 1) from None
            ce_sum += ce.item() * len(idx)
            correct += int((np.argmax(logits.data, axis=1) == yb).sum())
            opt.step({k: gk.data for k, gk in zip(names, grads)})
        hist.ce_loss.append(ce_sum / n)
        hist.penalty.append(pen_sum / n)
        hist.train_accuracy.append(correct / n)
        if log:
            log(f"epoch {epoch + 1}/{cfg.epochs} ce={hist.ce_loss[-1]:.4f} "
                f"pen={hist.penalty[-1]:.4f} acc={hist.train_accuracy[-1]:.4f}")
    trained = model.with_params(opt.params)
    trained.metadata.update({"train_config_digest": cfg.digest(), "seed": cfg.seed,
                             "dataset": dataset.name})
    if test_dataset is not None:
        hist.test_accuracy = accuracy(trained, test_dataset)
    return trained, hist


def accuracy(model, dataset, batch_size=500):
    if len(dataset) == 0:
        raise ContractError("accuracy needs a nonempty dataset")
    pred = np.argmax(model.logits(dataset.images.astype(model.dtype), batch_size), axis=1)
    return float((pred == dataset.labels).mean())


@dataclass
class AblationRow:
    lam: float
    accuracy: float
    drift: float
    entropy: float


def evaluate_attribution(model, eval_set, m=64, delta=1e-10, blur_kernel=5):
    """Mean zero-vs-blur IG drift and mean zero-baseline IG entropy over `eval_set`."""
    from .attribution import integrated_gradients, make_baseline
    from .metrics import attribution_drift, attribution_entropy

    model = model.astype(np.float64)
    drifts, ents = [], []
    for x in eval_set.images.astype(np.float64):
        target = model.predict(x)
        a_zero = integrated_gradients(model, x, "zero", m, target)
        a_blur = integrated_gradients(model, x, make_baseline(x, "blur", kernel_size=blur_kernel),
                                      m, target)
        drifts.append(attribution_drift(a_zero, a_blur))
        ents.append(attribution_entropy(a_zero, delta))
    return float(np.mean(drifts)), float(np.mean(ents))


def lambda_ablation(model_factory, train_set, test_set, eval_set, lambdas, cfg, m=64, log=None):
    """Train one model per lam from the same seed and record accuracy, drift, entropy."""
    lambdas = list(lambdas)
    if not lambdas:
        raise ContractError("lambda_ablation needs at least one lambda")
    if lambdas != sorted(lambdas):
        raise ContractError("lambdas must be sorted ascending")
    rows = []
    for lam in lambdas:
        run_cfg = TrainConfig(**{**asdict(cfg), "lam": float(lam)})
        model, _ = train(model_factory(cfg.seed), train_set, run_cfg, log=log)
        drift, ent = evaluate_attribution(model, eval_set, m)
        rows.append(AblationRow(float(lam), accuracy(model, test_set), drift, ent))
        if log:
            log(f"lambda={lam}: acc={rows[-1].accuracy:.4f} drift={drift:.4f} entropy={ent:.4f}")
    return rows
