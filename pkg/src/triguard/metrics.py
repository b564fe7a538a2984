"""Scalar safety metrics and the report table."""

import csv
import io
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import autodiff as ad
from .errors import ContractError, ReportError, UndefinedCorrelationError

REPORT_HEADER = ["model", "dataset", "accuracy", "adv_error", "entropy", "drift",
                 "smoothgrad2", "formal_verif", "crown_ibp", "del_auc", "ins_auc"]


def _scores(a):
    return np.asarray(getattr(a, "scores", a), dtype=np.float64)


def attribution_entropy(a, delta=1e-10):
    """Natural-log entropy of the L1-normalised |a|, with `delta` inside the log.

    An all-zero map has entropy ln d. The result is clamped below at 0.
    """
    if delta <= 0:
        raise ContractError(f"delta must be positive, got {delta}")
    mag = np.abs(_scores(a)).reshape(-1)
    total = mag.sum()
    if total == 0:
        return float(np.log(mag.size))
    p = mag / total
    return max(float(-(p * np.log(p + delta)).sum()), 0.0)


def attribution_drift(a1, a2):
    """L2 norm of the difference of two raw attribution maps."""
    s1, s2 = _scores(a1), _scores(a2)
    if s1.shape != s2.shape:
        raise ContractError(f"attribution shapes differ: {s1.shape} vs {s2.shape}")
    return float(np.linalg.norm((s1 - s2).reshape(-1)))


@dataclass
class Curve:
    fractions: np.ndarray
    confidences: np.ndarray

    def __post_init__(self):
        f = np.asarray(self.fractions, dtype=np.float64)
        if len(f) < 2 or f[0] != 0.0 or f[-1] != 1.0 or not (np.diff(f) > 0).all():
            raise ContractError("curve fractions must increase strictly from 0 to 1")
        if len(self.confidences) != len(f):
            raise ContractError("curve fractions and confidences differ in length")
        self.fractions = f
        self.confidences = np.asarray(self.confidences, dtype=np.float64)


def auc(curve):
    """Trapezoid-rule area under a curve over its fractions."""
    f, c = curve.fractions, curve.confidences
    return float(np.sum((f[1:] - f[:-1]) * (c[1:] + c[:-1]) / 2.0))


def confidences(model, xs, target, batch_size=256):
    """Softmax probability of `target` for each row of `xs`."""
    xs = np.asarray(xs, dtype=model.dtype)
    out = []
    with ad.no_grad():
        for start in range(0, len(xs), batch_size):
            probs = ad.softmax(model.forward(xs[start:start + batch_size]), axis=1)
            out.append(probs.data[:, target])
    return np.concatenate(out).astype(np.float64)


def clean_confidence(model, x, target):
    return float(confidences(model, np.asarray(x)[None], target, batch_size=1)[0])


def pixel_ranking(a):
    """Feature indices by descending |a|. For (C, H, W) maps with C > 1 whole pixels
    are ranked by channel-summed |a|; ties keep index order."""
    s = np.abs(_scores(a))
    imp = s.sum(axis=0) if s.ndim == 3 and s.shape[0] > 1 else s
    return np.argsort(-imp.reshape(-1), kind="stable")


def _sweep(model, x, a, steps, target, baseline, insert):
    if steps < 2:
        raise ContractError(f"curve needs steps >= 2, got {steps}")
    x = np.asarray(x, dtype=model.dtype)
    ref = np.zeros_like(x) if baseline is None else np.asarray(baseline, dtype=model.dtype)
    if target is None:
        target = model.predict(x)
    order = pixel_ranking(a)
    npix = order.size
    rank = np.empty(npix, dtype=np.int64)
    rank[order] = np.arange(npix)
    fractions = np.linspace(0.0, 1.0, steps)
    counts = np.rint(fractions * npix).astype(np.int64)
    swapped = rank[None, :] < counts[:, None]  # (steps, npix)
    per_pixel = x.ndim == 3 and x.shape[0] > 1
    if per_pixel:
        swapped = swapped.reshape(steps, 1, *x.shape[1:])
    else:
        swapped = swapped.reshape((steps,) + x.shape)
    src, dst = (x, ref) if insert else (ref, x)
    # deletion: swapped pixels take the baseline; insertion: swapped pixels take x
    batch = np.where(swapped, src[None], dst[None])
    # one input per forward: BLAS results depend on batch size, and the curve
    # endpoints must equal the clean confidence bit for bit
    return Curve(fractions, confidences(model, batch, target, batch_size=1))


def deletion_curve(model, x, a, steps=50, target=None, baseline=None):
    return _sweep(model, x, a, steps, target, baseline, insert=False)


def insertion_curve(model, x, a, steps=50, target=None, baseline=None):
    return _sweep(model, x, a, steps, target, baseline, insert=True)


def pearson(xs, ys):
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape or xs.ndim != 1 or len(xs) < 2:
        raise ContractError("pearson needs two equal-length series of length >= 2")
    dx, dy = xs - xs.mean(), ys - ys.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0 or syy == 0:
        raise UndefinedCorrelationError("correlation undefined for a zero-variance series")
    return float(np.clip((dx @ dy) / np.sqrt(sxx * syy), -1.0, 1.0))


# -- report ---------------------------------------------------------------
@dataclass
class ReportRow:
    model: str
    dataset: str
    accuracy: float
    adv_error: float
    entropy: float
    drift: float
    smoothgrad2: float
    formal_verif: bool
    crown_ibp: bool
    del_auc: float
    ins_auc: float
    formal_verif_rate: float = 0.0
    crown_ibp_rate: float = 0.0
    n_test: int = 0
    n_attack: int = 0
    n_verify: int = 0
    n_eval: int = 0
    config_digest: str = ""


SECTIONS = ("accuracy", "adversarial", "attribution", "verification", "faithfulness")


def _mean(values):
    return float(np.mean(values)) if len(values) else 0.0


def aggregate_report(runs, threshold=0.5):
    """Fold per-run outputs into report rows (one per model x dataset, input order).

    Each run is a dict with 'model', 'dataset' and the sections in SECTIONS:
      accuracy:      {"value", "n"}
      adversarial:   {"error", "n"}
      attribution:   {"entropy": [...], "drift": [...], "smoothgrad2": [...]}
      verification:  {"ibp": [bool, ...], "crown_ibp": [bool, ...]}
      faithfulness:  {"deletion": [...], "insertion": [...]}
    """
    rows = []
    for run in runs:
        for section in SECTIONS:
            if section not in run:
                raise ReportError(f"run {run.get('model')}/{run.get('dataset')} is missing "
                                  f"the '{section}' section")
        attr, ver, faith = run["attribution"], run["verification"], run["faithfulness"]
        ibp_rate = _mean(ver["ibp"])
        crown_rate = _mean(ver["crown_ibp"])
        rows.append(ReportRow(
            model=run["model"], dataset=run["dataset"],
            accuracy=float(run["accuracy"]["value"]),
            adv_error=float(run["adversarial"]["error"]),
            entropy=_mean(attr["entropy"]), drift=_mean(attr["drift"]),
            smoothgrad2=_mean(attr["smoothgrad2"]),
            formal_verif=ibp_rate >= threshold, crown_ibp=crown_rate >= threshold,
            del_auc=_mean(faith["deletion"]), ins_auc=_mean(faith["insertion"]),
            formal_verif_rate=ibp_rate, crown_ibp_rate=crown_rate,
            n_test=int(run["accuracy"].get("n", 0)), n_attack=int(run["adversarial"].get("n", 0)),
            n_verify=len(ver["ibp"]), n_eval=len(attr["entropy"]),
            config_digest=run.get("config_digest", ""),
        ))
    return rows


def _fmt(value):
    if isinstance(value, bool):
        return "pass" if value else "fail"
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


def report_csv(rows, detail=False, partial=False):
    """CSV text in table column order; `detail` adds rates, counts and digest."""
    header = [f.name for f in fields(ReportRow)] if detail else list(REPORT_HEADER)
    if partial:
        header.append("status")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        d = asdict(row)
        cells = [_fmt(d[h]) for h in header if h != "status"]
        w.writerow(cells + (["partial"] if partial else []))
    return buf.getvalue()


def parse_report_csv(text):
    """Inverse of report_csv for the fixed columns: numbers as floats, flags as bools."""
    out = []
    for rec in csv.DictReader(io.StringIO(text)):
        row = {}
        for key, val in rec.items():
            if key in ("model", "dataset", "config_digest", "status"):
                row[key] = val
            elif val in ("pass", "fail"):
                row[key] = val == "pass"
            elif key.startswith("n_"):
                row[key] = int(val)
            else:
                row[key] = float(val)
        out.append(row)
    return out
