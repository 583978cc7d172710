"""Command-line front end: stats, calibrate, demo, sweep-alpha.

File formats are deliberately plain text so other frameworks can export
teacher logits into this tool:

  logit dump   header "class_0,...,class_{C-1}", then one comma-separated
               row of C decimal reals per sample, newline-terminated
  label file   one base-10 integer per line
  experiment   JSON covering dataset/teacher/student/loss sections plus
               alpha and the seed list

Exit codes: 0 success, 2 usage or format error, 3 training divergence.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from importlib import resources

import numpy as np

from .analyze import RunMetrics, compare_runs, format_report, misinstruction_ratio
from .calibrate import CalibrationConfig, calibrate_batch
from .losses import LossConfig
from .nn import TrainConfig, TrainingDivergedError, distill_student, forward, gen_synthetic, train_teacher
from .probvec import softmax


class DumpFormatError(ValueError):
    """Malformed logit dump or label file; carries the offending line."""

    def __init__(self, path, line_no, message):
        super().__init__(f"{path}:{line_no}: {message}")


class ConfigError(ValueError):
    """Experiment config failed validation; message lists offending keys."""


# ---------------------------------------------------------------------------
# file I/O


def read_logit_dump(path) -> np.ndarray:
    with open(path, "r", encoding="utf-8") as f:
        header = f.readline()
        if not header:
            raise DumpFormatError(path, 1, "empty file")
        cols = header.strip().split(",")
        expected = [f"class_{i}" for i in range(len(cols))]
        if cols != expected or len(cols) < 2:
            raise DumpFormatError(path, 1, "header must be 'class_0,...,class_{C-1}' with C >= 2")
        rows = []
        for line_no, line in enumerate(f, start=2):
            if not line.strip():
                continue
            parts = line.strip().split(",")
            if len(parts) != len(cols):
                raise DumpFormatError(path, line_no, f"expected {len(cols)} values, got {len(parts)}")
            try:
                rows.append([float(v) for v in parts])
            except ValueError:
                raise DumpFormatError(path, line_no, "non-numeric value") from None
    if not rows:
        raise DumpFormatError(path, 2, "no data rows")
    return np.array(rows, dtype=np.float64)


def read_labels(path, n_classes) -> np.ndarray:
    labels = []
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                v = int(line.strip())
            except ValueError:
                raise DumpFormatError(path, line_no, "labels must be base-10 integers") from None
            if not 0 <= v < n_classes:
                raise DumpFormatError(path, line_no, f"label {v} out of range [0, {n_classes})")
            labels.append(v)
    return np.array(labels, dtype=np.int64)


def write_prob_dump(path, P: np.ndarray) -> None:
    # 12 significant digits keep calibration invariants checkable after a
    # write/read round trip.
    with open(path, "w", encoding="utf-8") as f:
        f.write(",".join(f"class_{i}" for i in range(P.shape[1])) + "\n")
        for row in P:
            f.write(",".join(f"{v:.12g}" for v in row) + "\n")


def _load_pair(logits_path, labels_path):
    Z = read_logit_dump(logits_path)
    y = read_labels(labels_path, Z.shape[1])
    if len(y) != len(Z):
        raise DumpFormatError(
            labels_path, len(y) + 1,
            f"{len(Z)} logit rows but {len(y)} labels",
        )
    return Z, y


# ---------------------------------------------------------------------------
# experiment config


def default_config_path():
    return resources.files("kdcalib").joinpath("data/default_demo.json")


def load_experiment_config(path=None) -> dict:
    """Load and validate an experiment config, normalizing defaults.

    Raises ConfigError listing every offending key, not just the first.
    """
    if path is None:
        raw = json.loads(default_config_path().read_text(encoding="utf-8"))
    else:
        with open(path, "r", encoding="utf-8") as f:
            raw = json.load(f)

    errors = []

    def section(name, defaults):
        block = dict(defaults)
        got = raw.get(name, {})
        if not isinstance(got, dict):
            errors.append(f"{name}: expected an object")
            return block
        for key, value in got.items():
            if key not in defaults:
                errors.append(f"{name}.{key}: unknown key")
            else:
                block[key] = value
        return block

    cfg = {
        "dataset": section("dataset", {
            "n_classes": 10, "n_features": 16, "n_samples": 2000,
            "cluster_spread": 1.0, "label_noise": 0.1, "seed": 1234,
        }),
        "teacher": section("teacher", {
            "hidden_sizes": [16], "epochs": 40, "batch_size": 64,
            "lr": 0.1, "momentum": 0.9, "seed": 7,
        }),
        "student": section("student", {
            "hidden_sizes": [8], "epochs": 40, "batch_size": 64,
            "lr": 0.1, "momentum": 0.9,
        }),
        "loss": section("loss", {
            "tau": 4.0, "beta": 0.9, "gamma": 0.1, "scale_kd_by_tau_squared": False,
        }),
        "alpha": raw.get("alpha", 0.95),
        "seeds": raw.get("seeds", [0, 1, 2, 3, 4]),
    }
    for key in raw:
        if key not in cfg:
            errors.append(f"{key}: unknown key")

    # Construct the module-level configs so their own invariants run.
    try:
        LossConfig(**cfg["loss"])
    except (TypeError, ValueError) as e:
        errors.append(f"loss: {e}")
    if not (isinstance(cfg["alpha"], (int, float)) and 0 < cfg["alpha"] < 1):
        errors.append(f"alpha: must lie in (0, 1), got {cfg['alpha']!r}")
    if not (isinstance(cfg["seeds"], list) and cfg["seeds"]
            and all(isinstance(s, int) for s in cfg["seeds"])):
        errors.append("seeds: must be a nonempty list of integers")
    ds = cfg["dataset"]
    if not (isinstance(ds["n_classes"], int) and ds["n_classes"] >= 2):
        errors.append("dataset.n_classes: must be an integer >= 2")
    if not 0 <= ds["label_noise"] < 0.5:
        errors.append("dataset.label_noise: must lie in [0, 0.5)")
    for name in ("teacher", "student"):
        block = cfg[name]
        if block["epochs"] < 0 or block["batch_size"] < 1 or block["lr"] <= 0:
            errors.append(f"{name}: epochs/batch_size/lr out of range")
        if not 0 <= block["momentum"] < 1:
            errors.append(f"{name}.momentum: must lie in [0, 1)")

    if errors:
        raise ConfigError("invalid experiment config:\n  " + "\n  ".join(errors))
    return cfg


def _build_dataset(cfg):
    ds = cfg["dataset"]
    return gen_synthetic(
        n_classes=ds["n_classes"], n_features=ds["n_features"], n_samples=ds["n_samples"],
        cluster_spread=ds["cluster_spread"], label_noise=ds["label_noise"], seed=ds["seed"],
    )


def _train_teacher(cfg, dataset):
    t = cfg["teacher"]
    config = TrainConfig(epochs=t["epochs"], batch_size=t["batch_size"], lr=t["lr"],
                         momentum=t["momentum"], seed=t["seed"])
    return train_teacher(dataset, tuple(t["hidden_sizes"]), config)


def _distill_once(cfg, dataset, teacher, policy, seed, alpha=None, unsafe=False):
    s = cfg["student"]
    config = TrainConfig(
        epochs=s["epochs"], batch_size=s["batch_size"], lr=s["lr"], momentum=s["momentum"],
        seed=seed,
        loss=LossConfig(**cfg["loss"]),
        calibration=CalibrationConfig(
            alpha=cfg["alpha"] if alpha is None else alpha,
            policy=policy,
            allow_unsafe_alpha=unsafe,
        ),
    )
    return distill_student(dataset, teacher, tuple(s["hidden_sizes"]), config)


# ---------------------------------------------------------------------------
# commands


def cmd_stats(args) -> int:
    Z, y = _load_pair(args.logits, args.labels)
    stats = misinstruction_ratio(Z, y)
    print(f"total={stats.total}")
    print(f"misinstructed={stats.misinstructed}")
    print(f"ratio={stats.ratio:.4f}")
    return 0


def cmd_calibrate(args) -> int:
    if not 0 < args.alpha < 1:
        print(f"error: --alpha must lie in (0, 1), got {args.alpha}", file=sys.stderr)
        return 2
    if not args.tau > 0:
        print(f"error: --tau must be positive, got {args.tau}", file=sys.stderr)
        return 2
    Z, y = _load_pair(args.logits, args.labels)
    P = softmax(Z, args.tau)
    P_cal, mis, _, _ = calibrate_batch(P, y, args.alpha)
    write_prob_dump(args.output, P_cal)
    print(f"calibrated {int(mis.sum())} of {len(Z)} rows -> {args.output}")
    return 0


def cmd_demo(args) -> int:
    cfg = load_experiment_config(args.config)
    seeds = _parse_seeds(args.seeds) if args.seeds else cfg["seeds"]

    dataset = _build_dataset(cfg)
    t0 = time.perf_counter()
    teacher, tmetrics = _train_teacher(cfg, dataset)
    print(f"teacher: train_acc={tmetrics.train_accuracy:.4f} "
          f"test_acc={tmetrics.test_accuracy:.4f} "
          f"train_misinstruction_ratio={tmetrics.train_misinstruction_ratio:.4f} "
          f"({time.perf_counter() - t0:.1f}s)")

    runs = []
    for policy in ("none", "skip", "loca"):
        for seed in seeds:
            start = time.perf_counter()
            _, m = _distill_once(cfg, dataset, teacher, policy, seed)
            runs.append(RunMetrics(
                policy=policy, seed=seed, top1=m.test_top1, top5=m.test_top5,
                final_loss=m.final_loss, calibrated=m.calibrated_count,
                dropped=m.dropped_count, seconds=time.perf_counter() - start,
            ))

    report = compare_runs(runs)
    text = format_report(report)
    by_policy = {row.policy: row for row in report.rows}
    direction_ok = by_policy["loca"].mean_top1 >= by_policy["none"].mean_top1
    text += "\ndirection check (mean top1, loca >= none): " + ("PASS" if direction_ok else "FAIL")
    print(text)
    if args.output:
        with open(args.output, "w", encoding="utf-8") as f:
            f.write(text + "\n")
        print(f"report written to {args.output}")
    return 0


def cmd_sweep_alpha(args) -> int:
    cfg = load_experiment_config(args.config)
    seeds = _parse_seeds(args.seeds) if args.seeds else cfg["seeds"]
    alphas = _parse_alphas(args.alphas)
    if alphas is None:
        return 2

    dataset = _build_dataset(cfg)
    teacher, tmetrics = _train_teacher(cfg, dataset)
    print(f"teacher train_misinstruction_ratio={tmetrics.train_misinstruction_ratio:.4f}")

    print("alpha  mean_top1  std_top1  violations")
    for alpha in alphas:
        tops, violations = [], 0
        for seed in seeds:
            _, m = _distill_once(cfg, dataset, teacher, "loca", seed,
                                 alpha=alpha, unsafe=alpha >= 1.0)
            tops.append(m.test_top1)
            violations += m.calibration_violations
        mean = float(np.mean(tops))
        std = float(np.std(tops, ddof=1)) if len(tops) > 1 else 0.0
        print(f"{alpha:<5g}  {mean:9.4f}  {std:8.4f}  {violations:10d}")
        if alpha < 1.0 and violations:
            print(f"error: calibration produced {violations} wrong predictions at alpha={alpha}",
                  file=sys.stderr)
            return 1
    return 0


def _parse_seeds(text):
    return [int(s) for s in text.split(",") if s.strip()]


def _parse_alphas(text):
    try:
        values = [float(a) for a in text.split(",") if a.strip()]
    except ValueError:
        print(f"error: bad --alphas value {text!r}", file=sys.stderr)
        return None
    if not values:
        print("error: --alphas list is empty", file=sys.stderr)
        return None
    deduped = list(dict.fromkeys(values))
    if len(deduped) != len(values):
        print("notice: duplicate alpha values removed", file=sys.stderr)
    bad = [a for a in deduped if a <= 0]
    if bad:
        print(f"error: alphas must be positive, got {bad}", file=sys.stderr)
        return None
    for a in deduped:
        if a >= 1.0:
            print(f"warning: alpha={a} >= 1 no longer guarantees the calibrated "
                  f"prediction matches the label", file=sys.stderr)
    return deduped


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kdcalib",
        description="Teacher logit calibration and desk-scale distillation experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("stats", help="mis-instruction statistics for a logit dump")
    p.add_argument("--logits", required=True)
    p.add_argument("--labels", required=True)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("calibrate", help="soften and calibrate a logit dump file-wide")
    p.add_argument("--logits", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--alpha", type=float, default=0.95)
    p.add_argument("--tau", type=float, default=1.0)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("demo", help="train a teacher, distill under all three policies")
    p.add_argument("--config", default=None, help="experiment JSON (shipped default if omitted)")
    p.add_argument("--seeds", default=None, help="comma-separated seed list override")
    p.add_argument("--output", default=None, help="write the report table here")
    p.set_defaults(func=cmd_demo)

    p = sub.add_parser("sweep-alpha", help="accuracy vs alpha for the loca policy")
    p.add_argument("--config", default=None)
    p.add_argument("--seeds", default=None)
    p.add_argument("--alphas", required=True, help="comma-separated alpha list")
    p.set_defaults(func=cmd_sweep_alpha)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (DumpFormatError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except TrainingDivergedError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
