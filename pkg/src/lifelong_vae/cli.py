"""Command-line experiment runner.

    lifelong-vae run --experiment mnist_sequential --method lifelong --out-dir runs/a
    lifelong-vae summarize runs/a/metrics.jsonl runs/b/metrics.jsonl

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import statistics
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import data as data_mod
from .errors import FormatError, TrainingError
from .lifelong import METHODS, SCHEMA_VERSION, MetricsRecord, TrainConfig, derive_seed, run_sequence
from .metrics import FeatureClassifier, train_feature_classifier

log = logging.getLogger("lifelong_vae")

EXPERIMENTS = ("mnist_sequential", "fashion_sequential", "permuted")
FEATURES = ("auto", "classifier", "pixels")
DESK_TRAIN_PER_CLASS = 1000
DESK_TEST_PER_CLASS = 200
DESK_PERMUTED_TRAIN = 1000
DESK_PERMUTED_TEST = 2048
DESK_HIDDEN = 256
FULL_HIDDEN = 512
SUMMARY_METRICS = ("neg_test_elbo", "frechet", "log_frechet", "epochs_to_stop")


class UsageError(Exception):
    pass


@dataclass
class ExperimentConfig:
    experiment: str
    method: str
    lam: float = 0.01
    gamma: float = 50.0
    learning_rate: float = 1e-4
    batch_size: int = 128
    max_epochs: int = 50
    patience: int = 10
    seed: int = 0
    trials: int = 1
    data_root: str | None = None
    out_dir: str = "runs"
    desk_scale: bool = False
    extractor_path: str | None = None
    num_distributions: int | None = None
    consistency: bool = True
    kl_direction: str = "reverse"
    include_continuous_consistency: bool = False
    recon_consistency: bool = False
    dtype: str = "float32"
    plots: bool = False
    features: str = "auto"

    def validate(self) -> None:
        if self.experiment not in EXPERIMENTS:
            raise UsageError(f"unknown experiment {self.experiment!r}")
        if self.method not in METHODS:
            raise UsageError(f"unknown method {self.method!r}")
        if self.trials < 1:
            raise UsageError("--trials must be at least 1")
        if self.num_distributions is not None and self.num_distributions < 1:
            raise UsageError("--num-distributions must be at least 1")
        if self.features not in FEATURES:
            raise UsageError(f"unknown feature space {self.features!r}")

    @property
    def feature_space(self) -> str:
        # a digit classifier is blind to pixel permutations, so permuted runs compare raw pixels
        if self.features == "auto":
            return "pixels" if self.experiment == "permuted" else "classifier"
        return self.features

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            method=self.method, lam=self.lam, gamma=self.gamma,
            learning_rate=self.learning_rate, batch_size=self.batch_size,
            max_epochs=self.max_epochs, patience=self.patience,
            consistency=self.consistency, kl_direction=self.kl_direction,
            include_continuous_consistency=self.include_continuous_consistency,
            recon_consistency=self.recon_consistency,
            hidden_dim=DESK_HIDDEN if self.desk_scale else FULL_HIDDEN,
            dtype=self.dtype,
        )

    @property
    def model_name(self) -> str:
        if self.method == "lifelong":
            return f"lifelong-{self.lam:g}"
        if self.method == "ewc":
            return f"ewc-{self.gamma:g}"
        return f"{self.method}-vae"


# -- data --------------------------------------------------------------------

def build_sequence(cfg: ExperimentConfig) -> tuple[data_mod.DistributionSequence, data_mod.ImageDataset]:
    """The distribution sequence plus the labelled corpus the feature extractor trains on."""
    corpus = "fashion" if cfg.experiment == "fashion_sequential" else "mnist"
    train, test = data_mod.load_corpus(corpus, cfg.data_root)
    if cfg.experiment == "permuted":
        n = cfg.num_distributions or 5
        tr, val = data_mod.split_train_val(
            train, 0.1, cfg.seed, DESK_PERMUTED_TRAIN if cfg.desk_scale else None
        )
        if cfg.desk_scale:
            test = test.subset(np.arange(min(len(test), DESK_PERMUTED_TEST)))
        seq = data_mod.make_permuted_sequence(tr, val, test, n, cfg.seed)
        extractor_data = data_mod.concat([t[0] for t in seq.triples])
        return seq, extractor_data
    n = cfg.num_distributions or 10
    classes = sorted(set(train.labels.tolist()))[:n]
    seq = data_mod.split_by_label(
        train, test, 0.1, cfg.seed, classes,
        DESK_TRAIN_PER_CLASS if cfg.desk_scale else None,
        DESK_TEST_PER_CLASS if cfg.desk_scale else None,
    )
    return seq, train


def load_or_train_extractor(cfg: ExperimentConfig, corpus: data_mod.ImageDataset) -> FeatureClassifier:
    path = Path(cfg.extractor_path) if cfg.extractor_path else Path(cfg.out_dir) / "extractor.ckpt"
    if path.exists():
        return FeatureClassifier.load(path)
    log.info("training feature extractor on %d images", len(corpus))
    clf = train_feature_classifier(corpus.images, corpus.labels, seed=cfg.seed)
    path.parent.mkdir(parents=True, exist_ok=True)
    clf.save(path)
    return clf


# -- metrics -----------------------------------------------------------------

def record_line(rec: MetricsRecord, model_name: str) -> str:
    row = rec.to_dict()
    row["method"] = model_name
    return json.dumps(row, sort_keys=True, allow_nan=True)


def read_metrics(paths: list[str | Path]) -> list[dict]:
    rows = []
    for path in paths:
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                if not isinstance(row, dict):
                    raise ValueError("not an object")
                for key in ("method", "trial", "distribution_index", "neg_test_elbo", "frechet"):
                    if key not in row:
                        raise ValueError(f"missing field {key!r}")
            except ValueError as exc:
                raise FormatError(f"{path}: line {lineno}: malformed metrics record ({exc})") from None
            rows.append(row)
    if not rows:
        raise FormatError("no metrics records found")
    return rows


def summarize_rows(rows: list[dict]) -> list[dict]:
    """Mean and sample standard deviation per (method, distribution_index)."""
    groups: dict[tuple[str, int], list[dict]] = {}
    for row in rows:
        groups.setdefault((row["method"], row["distribution_index"]), []).append(row)
    out = []
    for (method, idx), group in sorted(groups.items()):
        entry = {"method": method, "distribution_index": idx, "trials": len(group)}
        for key in SUMMARY_METRICS:
            values = [float(r[key]) for r in group if key in r]
            if not values:
                continue
            entry[f"{key}_mean"] = statistics.fmean(values)
            entry[f"{key}_std"] = statistics.stdev(values) if len(values) > 1 else 0.0
        out.append(entry)
    return out


def format_table(summary: list[dict]) -> str:
    lines = [f"{'method':<18}{'dist':>5}{'n':>4}{'neg ELBO':>20}{'Frechet':>22}"]
    for e in summary:
        lines.append(
            f"{e['method']:<18}{e['distribution_index']:>5}{e['trials']:>4}"
            f"{e['neg_test_elbo_mean']:>12.2f} ± {e['neg_test_elbo_std']:<6.2f}"
            f"{e['frechet_mean']:>13.3f} ± {e['frechet_std']:<7.3f}"
        )
    return "\n".join(lines)


def write_plots(summary: list[dict], out_dir: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    for key, label in (("neg_test_elbo", "negative test ELBO (nats)"),
                       ("log_frechet", "log Frechet distance"),
                       ("epochs_to_stop", "epochs to early stop")):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for method in sorted({e["method"] for e in summary}):
            rows = [e for e in summary if e["method"] == method and f"{key}_mean" in e]
            xs = [e["distribution_index"] + 1 for e in rows]
            ys = np.array([e[f"{key}_mean"] for e in rows])
            sd = np.array([e[f"{key}_std"] for e in rows])
            ax.plot(xs, ys, marker="o", label=method)
            ax.fill_between(xs, ys - sd, ys + sd, alpha=0.2)
        ax.set_xlabel("distributions seen")
        ax.set_ylabel(label)
        ax.legend()
        fig.tight_layout()
        fig.savefig(out_dir / f"{key}.png", dpi=120)
        plt.close(fig)


# -- commands ----------------------------------------------------------------

def run(cfg: ExperimentConfig) -> int:
    cfg.validate()
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not os.access(out_dir, os.W_OK):
        raise UsageError(f"output directory {out_dir} is not writable")
    torch.set_num_threads(1)
    seq, corpus = build_sequence(cfg)
    extractor = load_or_train_extractor(cfg, corpus) if cfg.feature_space == "classifier" else None
    train_cfg = cfg.train_config()
    metrics_path = out_dir / "metrics.jsonl"
    rows = []
    with metrics_path.open("w") as sink:
        def emit(rec: MetricsRecord) -> None:
            line = record_line(rec, cfg.model_name)
            sink.write(line + "\n")
            sink.flush()
            rows.append(json.loads(line))
            log.info("trial %d dist %d: neg ELBO %.2f, Frechet %.3f, %d epochs",
                     rec.trial, rec.distribution_index, rec.neg_test_elbo, rec.frechet, rec.epochs_to_stop)

        for trial in range(cfg.trials):
            run_sequence(seq, train_cfg, derive_seed(cfg.seed, trial), extractor and extractor.features,
                         trial=trial, on_record=emit)
    summary = summarize_rows(rows)
    (out_dir / "summary.json").write_text(json.dumps(
        {"schema_version": SCHEMA_VERSION, "config": vars(cfg), "feature_space": cfg.feature_space,
         "extractor_hash": extractor and extractor.version_hash,
         "extractor_accuracy": extractor and extractor.accuracy, "summary": summary},
        indent=2, sort_keys=True,
    ) + "\n")
    if cfg.plots:
        write_plots(summary, out_dir)
    print(format_table(summary))
    return 0


def summarize(paths: list[str], out: str | None = None) -> int:
    summary = summarize_rows(read_metrics(paths))
    if out:
        Path(out).write_text(json.dumps({"schema_version": SCHEMA_VERSION, "summary": summary},
                                        indent=2, sort_keys=True) + "\n")
    print(format_table(summary))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lifelong-vae", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="train and evaluate one method over a distribution sequence")
    r.add_argument("--experiment", choices=EXPERIMENTS, required=True)
    r.add_argument("--method", choices=METHODS, required=True)
    r.add_argument("--lambda", dest="lam", type=float, default=0.01)
    r.add_argument("--gamma", type=float, default=50.0)
    r.add_argument("--learning-rate", type=float, default=1e-4)
    r.add_argument("--batch-size", type=int, default=128)
    r.add_argument("--max-epochs", type=int, default=50)
    r.add_argument("--patience", type=int, default=10)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--trials", type=int, default=1)
    r.add_argument("--data-root", default=None, help=f"overridden by ${data_mod.DATA_ROOT_ENV}")
    r.add_argument("--out-dir", default="runs")
    r.add_argument("--desk-scale", action="store_true")
    r.add_argument("--extractor-path", default=None)
    r.add_argument("--num-distributions", type=int, default=None)
    r.add_argument("--no-consistency", dest="consistency", action="store_false")
    r.add_argument("--kl-direction", choices=("reverse", "forward"), default="reverse")
    r.add_argument("--include-continuous-consistency", action="store_true")
    r.add_argument("--recon-consistency", action="store_true")
    r.add_argument("--dtype", choices=("float32", "float64"), default="float32")
    r.add_argument("--plots", action="store_true")
    r.add_argument("--features", choices=FEATURES, default="auto",
                   help="Frechet feature space; auto uses raw pixels for the permuted experiment")

    s = sub.add_parser("summarize", help="mean and std across trials of metrics files")
    s.add_argument("files", nargs="+")
    s.add_argument("--out", default=None)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        if args.command == "summarize":
            return summarize(args.files, args.out)
        opts = {k: v for k, v in vars(args).items() if k not in ("command", "verbose")}
        return run(ExperimentConfig(**opts))
    except UsageError as exc:
        parser.error(str(exc))
    except (FormatError, TrainingError, FileNotFoundError, KeyError, ValueError, OSError) as exc:
        print(f"lifelong-vae: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
