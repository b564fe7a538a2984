"""Command-line front end: ``triguard <command> --config run.yaml [--output-dir DIR]``.

Every command writes ``resolved_config.json`` (all defaults filled in) next to its
outputs; passing that file back as ``--config`` reproduces the outputs byte for byte.
Exit status is 0 on success, 1 when a stage fails and 2 on configuration errors.
"""

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import pipeline
from .attribution import write_attribution_csv
from .config import load_config, output_dir
from .errors import ConfigError, TriGuardError
from .metrics import aggregate_report, parse_report_csv, pearson, report_csv
from .models import save_model
from .training import lambda_ablation, train
from .verification import certificate_lines

log = logging.getLogger("triguard")

CORRELATION_PAIRS = (("entropy", "drift"), ("entropy", "adv_error"), ("drift", "adv_error"))


def _num(x):
    return f"{x:.6f}"


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _write_text(path, text):
    with open(path, "w", newline="") as f:
        f.write(text)


# -- commands -------------------------------------------------------------
def cmd_train(cfg, out):
    train_set, test_set = pipeline.load_datasets(cfg)
    tcfg = cfg.train_config()
    for m in cfg.models:
        model = pipeline.fresh_model(m, train_set.input_shape, train_set.num_classes, cfg.seed)
        model.metadata.update({"name": m.name, "dataset": cfg.dataset.name})
        trained, hist = train(model, train_set, tcfg, test_set, log=log.info)
        save_model(trained, out / f"{m.name}.tgm")
        _write_csv(out / f"{m.name}_history.csv", ["epoch", "ce_loss", "penalty", "train_accuracy"],
                   [[r["epoch"], _num(r["ce_loss"]), _num(r["penalty"]), _num(r["train_accuracy"])]
                    for r in hist.rows()])
        _write_csv(out / f"{m.name}_summary.csv", ["model", "dataset", "test_accuracy"],
                   [[m.name, cfg.dataset.name, _num(hist.test_accuracy)]])
        log.info("%s: test accuracy %.4f", m.name, hist.test_accuracy)


def cmd_evaluate(cfg, out):
    test = pipeline.load_test_set(cfg)
    idx = pipeline.subsets(cfg, test)
    runs, certs, failure = [], [], None
    for m in cfg.models:
        try:
            run, extras = pipeline.evaluate_model(m, cfg, test, idx)
        except pipeline.StageError as exc:
            failure = exc
            break
        runs.append(run)
        for method, results in extras["certificates"].items():
            certs += [json.dumps({"model": m.name, **json.loads(line)}, sort_keys=True)
                      for line in certificate_lines(results, idx["verify"])]
        curve_dir = out / "curves" / m.name
        curve_dir.mkdir(parents=True, exist_ok=True)
        for sid, (dc, ic) in extras["curves"].items():
            _write_csv(curve_dir / f"sample_{sid}.csv", ["fraction", "deletion", "insertion"],
                       [[f"{f:.6f}", f"{d:.9f}", f"{i:.9f}"]
                        for f, d, i in zip(dc.fractions, dc.confidences, ic.confidences)])
    rows = aggregate_report(runs, cfg.verify.threshold)
    partial = failure is not None
    _write_text(out / "report.csv", report_csv(rows, partial=partial))
    _write_text(out / "report_detail.csv", report_csv(rows, detail=True, partial=partial))
    _write_text(out / "certificates.jsonl", "".join(line + "\n" for line in certs))
    if failure:
        raise failure


def cmd_attack(cfg, out):
    test = pipeline.load_test_set(cfg)
    idx = pipeline.subsets(cfg, test)["attack"]
    summary = []
    for m in cfg.models:
        model = pipeline.load_checkpoint(m)
        recs = pipeline.attack_records(model, cfg, test, idx)
        _write_csv(out / f"{m.name}_adversarial.csv",
                   ["sample_id", "label", "clean_pred", "adv_pred", "linf"],
                   [[i, y, c, a, f"{d:.6f}"] for i, y, c, a, d in recs])
        correct = [r for r in recs if r[1] == r[2]]
        rate = sum(r[3] != r[1] for r in correct) / len(correct) if correct else 0.0
        summary.append([m.name, cfg.dataset.name, _num(cfg.attack.eps), _num(rate), len(correct)])
    _write_csv(out / "attack_summary.csv",
               ["model", "dataset", "eps", "adv_error", "n_clean_correct"], summary)


def cmd_verify(cfg, out):
    test = pipeline.load_test_set(cfg)
    idx = pipeline.subsets(cfg, test)["verify"]
    rows, lines = [], []
    for m in cfg.models:
        model = pipeline.load_checkpoint(m)
        flags, results = pipeline.stage_verification(model, cfg, test, idx)
        for method in cfg.verify.methods:
            rate = float(np.mean(flags[method.replace("-", "_")]))
            rows.append([m.name, method, _num(cfg.verify.eps), _num(rate),
                         "pass" if rate >= cfg.verify.threshold else "fail"])
            lines += [json.dumps({"model": m.name, **json.loads(line)}, sort_keys=True)
                      for line in certificate_lines(results[method], idx)]
    _write_csv(out / "verify.csv", ["model", "method", "eps", "verified_rate", "flag"], rows)
    _write_text(out / "certificates.jsonl", "".join(line + "\n" for line in lines))


def cmd_attribute(cfg, out):
    test = pipeline.load_test_set(cfg)
    idx = pipeline.subsets(cfg, test)["eval"]
    for m in cfg.models:
        model = pipeline.load_checkpoint(m)
        _, per_sample, maps = pipeline.stage_attribution(model, cfg, test, idx)
        _write_csv(out / f"{m.name}_attribution_metrics.csv",
                   ["sample_id", "target", "entropy", "drift", "smoothgrad2"],
                   [[i, t, _num(h), _num(d), _num(s)] for i, t, h, d, s in per_sample])
        for kind in ("zero", "blur"):
            write_attribution_csv(out / f"{m.name}_ig_{kind}.csv",
                                  {str(i): maps[i][kind] for i in maps})


def cmd_correlate(cfg, out):
    rows = []
    for path in cfg.correlate.reports:
        rows += parse_report_csv(Path(path).read_text())
    if len(rows) < 3:
        raise ConfigError("correlate.reports", f"need at least 3 report rows, found {len(rows)}")
    result = []
    for a, b in CORRELATION_PAIRS:
        try:
            r = pearson([row[a] for row in rows], [row[b] for row in rows])
        except TriGuardError as exc:
            raise type(exc)(f"pair ({a}, {b}): {exc}") from None
        result.append([a, b, _num(r), len(rows)])
    _write_csv(out / "correlations.csv", ["x", "y", "r", "n"], result)


def cmd_ablate(cfg, out):
    train_set, test_set = pipeline.load_datasets(cfg)
    eval_set = test_set.take(pipeline.subsets(cfg, test_set)["eval"])
    m = cfg.models[0]
    factory = lambda seed: pipeline.fresh_model(m, train_set.input_shape, train_set.num_classes,
                                                seed)
    rows = lambda_ablation(factory, train_set, test_set, eval_set, cfg.ablation.lambdas,
                           cfg.train_config(), cfg.attribution.m, log=log.info)
    _write_csv(out / "ablation.csv", ["lambda", "accuracy", "drift", "entropy"],
               [[_num(r.lam), _num(r.accuracy), _num(r.drift), _num(r.entropy)] for r in rows])


def cmd_baseline_sensitivity(cfg, out):
    test = pipeline.load_test_set(cfg)
    idx = pipeline.subsets(cfg, test)["eval"]
    for m in cfg.models:
        model = pipeline.load_checkpoint(m)
        kinds, mat = pipeline.baseline_matrix(model, cfg, test, idx)
        _write_csv(out / f"{m.name}_baseline_matrix.csv", ["baseline", *kinds],
                   [[k, *(_num(v) for v in row)] for k, row in zip(kinds, mat)])
        pairs = [(a, b) for a, b in pipeline.BASELINE_PAIRS if a in kinds and b in kinds]
        values = [mat[kinds.index(a), kinds.index(b)] for a, b in pairs]
        _write_csv(out / f"{m.name}_baseline_sensitivity.csv", ["pair", "ads"],
                   [[f"{a}-{b}", _num(v)] for (a, b), v in zip(pairs, values)])
        if values:
            spread = (max(values) - min(values)) / np.mean(values) if np.mean(values) else 0.0
            log.info("%s: ADS spread/mean = %.4f", m.name, spread)


COMMANDS = {
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "attack": cmd_attack,
    "verify": cmd_verify,
    "attribute": cmd_attribute,
    "correlate": cmd_correlate,
    "ablate-lambda": cmd_ablate,
    "baseline-sensitivity": cmd_baseline_sensitivity,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="triguard",
                                     description="Safety evaluation of image classifiers.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="YAML or JSON run configuration")
        p.add_argument("--output-dir", help="defaults to $TRIGUARD_OUTPUT_ROOT/<command>")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config, args.command)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    out = output_dir(args.output_dir, args.command)
    out.mkdir(parents=True, exist_ok=True)
    _write_text(out / "resolved_config.json",
                json.dumps(cfg.snapshot(), indent=2, sort_keys=True) + "\n")
    try:
        COMMANDS[args.command](cfg, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (TriGuardError, pipeline.StageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
