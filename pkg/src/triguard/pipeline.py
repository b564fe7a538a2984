"""Evaluation stages shared by the CLI subcommands."""

import logging

import numpy as np

from .attacks import adversarial_error, pgd
from .attribution import integrated_gradients, make_baseline, smoothgrad_sq
from .data import load_cifar10, load_idx, make_toy_dataset
from .metrics import (attribution_drift, attribution_entropy, auc, deletion_curve,
                      insertion_curve)
from .models import build_model, load_model
from .training import accuracy
from .verification import CERTIFIED, certify

log = logging.getLogger("triguard")

BASELINE_PAIRS = (("zero", "blur"), ("zero", "gaussian"), ("zero", "uniform"), ("blur", "gaussian"))


class StageError(Exception):
    """A named evaluation stage failed; wraps the original exception."""

    def __init__(self, stage, model, exc):
        super().__init__(f"stage '{stage}' failed for model '{model}': "
                         f"{type(exc).__name__}: {exc}")
        self.stage = stage
        self.model = model


def load_datasets(cfg):
    """(train, test) Datasets for the configured source."""
    ds = cfg.dataset
    if ds.name == "toy":
        t = ds.toy
        train = make_toy_dataset(t.n_train, t.num_classes, tuple(t.shape), seed=cfg.seed)
        test = make_toy_dataset(t.n_test, t.num_classes, tuple(t.shape), seed=cfg.seed + 1,
                                split="test")
        return train, test
    if ds.name == "cifar10":
        return (load_cifar10(ds.paths["train"], "train"), load_cifar10(ds.paths["test"], "test"))
    p = ds.paths
    return (load_idx(p["train_images"], p["train_labels"], "train", ds.name),
            load_idx(p["test_images"], p["test_labels"], "test", ds.name))


def load_test_set(cfg):
    """Test split only (avoids reading the training files for evaluation commands)."""
    ds = cfg.dataset
    if ds.name == "toy":
        return load_datasets(cfg)[1]
    if ds.name == "cifar10":
        return load_cifar10(ds.paths["test"], "test")
    p = ds.paths
    return load_idx(p["test_images"], p["test_labels"], "test", ds.name)


def fresh_model(model_cfg, input_shape, num_classes, seed):
    return build_model(model_cfg.architecture, input_shape, num_classes, seed,
                       hidden=tuple(model_cfg.hidden))


def subsets(cfg, test):
    """Fixed evaluation, attack and verification subsets of the test split."""
    ds = cfg.dataset
    pick = lambda n: np.sort(np.random.default_rng(ds.subset_seed).permutation(len(test))[:n])
    return {name: pick(getattr(ds, f"{name}_subset")) for name in ("eval", "attack", "verify")}


def load_checkpoint(model_cfg):
    model = load_model(model_cfg.checkpoint)
    log.info("loaded %s from %s", model_cfg.name, model_cfg.checkpoint)
    return model


# -- stages ---------------------------------------------------------------
def stage_accuracy(model, cfg, test):
    data = test.subset(cfg.dataset.test_subset, cfg.dataset.subset_seed)
    return {"value": accuracy(model, data), "n": len(data)}


def stage_adversarial(model, cfg, test, idx):
    data = test.take(idx)
    return {"error": adversarial_error(model, data, cfg.attack_config()), "n": len(data)}


def attack_records(model, cfg, test, idx):
    """Per-sample PGD outcomes: id, label, clean and adversarial predictions, L-inf step."""
    acfg = cfg.attack_config()
    xs = test.images[idx].astype(model.dtype)
    ys = test.labels[idx]
    adv = pgd(model, xs, ys, acfg, sample_ids=idx)
    clean, after = model.predict(xs), model.predict(adv)
    dist = np.abs(adv - xs).reshape(len(xs), -1).max(axis=1)
    return [(int(i), int(y), int(c), int(a), float(d))
            for i, y, c, a, d in zip(idx, ys, clean, after, dist)]


def stage_verification(model, cfg, test, idx):
    xs = test.images[idx]
    results = {m: certify(model, xs, cfg.verify.eps, m) for m in cfg.verify.methods}
    flags = {m.replace("-", "_"): [r.status == CERTIFIED for r in rs] for m, rs in results.items()}
    return flags, results


def sample_attributions(model64, x, cfg, sample_id, kinds=("zero", "blur"), smooth=True):
    """IG maps for each baseline kind (and SmoothGrad-squared) for one input.

    Noise seeds derive from (run seed, sample id) so results do not depend on
    which subset or order the sample was processed in.
    """
    at = cfg.attribution
    target = model64.predict(x)
    rng = np.random.default_rng([cfg.seed, int(sample_id)])
    baseline_seed, sg_seed = (int(v) for v in rng.integers(2 ** 32, size=2))
    maps = {}
    for kind in kinds:
        ref = make_baseline(x, kind, baseline_seed, at.blur_kernel, at.noise_sigma)
        maps[kind] = integrated_gradients(model64, x, ref, at.m, target, baseline_seed)
        maps[kind].baseline = kind
    sg = smoothgrad_sq(model64, x, at.n, at.sigma, target, sg_seed) if smooth else None
    return target, maps, sg


def stage_attribution(model, cfg, test, idx):
    at = cfg.attribution
    model64 = model.astype(np.float64)
    entropy, drift, sg2, per_sample, maps_out = [], [], [], [], {}
    for i in idx:
        x = test.images[i].astype(np.float64)
        target, maps, sg = sample_attributions(model64, x, cfg, i)
        h = attribution_entropy(maps["zero"], at.delta)
        d = attribution_drift(maps["zero"], maps["blur"])
        s = attribution_entropy(sg, at.delta)
        entropy.append(h)
        drift.append(d)
        sg2.append(s)
        per_sample.append((int(i), target, h, d, s))
        maps_out[int(i)] = maps
    return {"entropy": entropy, "drift": drift, "smoothgrad2": sg2}, per_sample, maps_out


def stage_faithfulness(model, cfg, test, idx, maps):
    model64 = model.astype(np.float64)
    steps = cfg.attribution.curve_steps
    dels, inss, curves = [], [], {}
    for i in idx:
        x = test.images[i].astype(np.float64)
        a = maps[int(i)]["zero"]
        dc = deletion_curve(model64, x, a, steps, a.target)
        ic = insertion_curve(model64, x, a, steps, a.target)
        dels.append(auc(dc))
        inss.append(auc(ic))
        curves[int(i)] = (dc, ic)
    return {"deletion": dels, "insertion": inss}, curves


def evaluate_model(model_cfg, cfg, test, idx):
    """Run all report stages for one model; raises StageError naming the failing stage."""
    out = {"model": model_cfg.name, "dataset": cfg.dataset.name}
    extras = {}
    stage = "checkpoint"
    try:
        model = load_checkpoint(model_cfg)
        stage = "accuracy"
        out["accuracy"] = stage_accuracy(model, cfg, test)
        stage = "adversarial"
        out["adversarial"] = stage_adversarial(model, cfg, test, idx["attack"])
        stage = "verification"
        out["verification"], extras["certificates"] = stage_verification(model, cfg, test,
                                                                         idx["verify"])
        stage = "attribution"
        out["attribution"], extras["attribution"], maps = stage_attribution(model, cfg, test,
                                                                            idx["eval"])
        stage = "faithfulness"
        out["faithfulness"], extras["curves"] = stage_faithfulness(model, cfg, test, idx["eval"],
                                                                   maps)
        log.info("%s: %s", model_cfg.name, {k: v for k, v in out.items()
                                            if k in ("accuracy", "adversarial")})
    except Exception as exc:
        raise StageError(stage, model_cfg.name, exc) from exc
    return out, extras


def baseline_matrix(model, cfg, test, idx):
    """Mean ADS between every pair of configured baselines over the evaluation subset."""
    kinds = list(cfg.attribution.baselines)
    model64 = model.astype(np.float64)
    sums = np.zeros((len(kinds), len(kinds)))
    for i in idx:
        _, maps, _ = sample_attributions(model64, test.images[i].astype(np.float64), cfg, i,
                                         kinds, smooth=False)
        for a in range(len(kinds)):
            for b in range(a + 1, len(kinds)):
                d = attribution_drift(maps[kinds[a]], maps[kinds[b]])
                sums[a, b] += d
                sums[b, a] += d
    return kinds, sums / len(idx)
