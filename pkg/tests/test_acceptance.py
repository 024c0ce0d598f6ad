"""Acceptance gate: one pass/fail line per criterion, listed at the end of the run.

The unit-level criteria re-run the oracle checks from the module suites as a
bundle and time them. The experiment criteria run the desk-scale MNIST
protocol: digits {0, 1, 2} as three distributions, hidden width 256, at most
50 epochs per distribution, classifier features for the digit sequence and
raw pixels for the permuted sequence.
"""

import json
import time

import pytest
import torch

import test_data as tda
import test_distributions as tdi
import test_lifelong as tli
import test_metrics as tme
import test_objective as tob
from helpers import ACCEPTANCE_LINES
from lifelong_vae import cli
from lifelong_vae.lifelong import TrainConfig, run_sequence

SEEDS = range(5)


def record(name: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def expand(fn, **fixtures):
    """Every parameter set of a parametrized check, bound to ``fn``."""
    marks = [m for m in getattr(fn, "pytestmark", []) if m.name == "parametrize"]
    if not marks:
        return [lambda: fn(**fixtures)]
    names, values = marks[0].args
    names = [n.strip() for n in names.split(",")]
    cases = []
    for v in values:
        args = dict(zip(names, v if len(names) > 1 else (v,)))
        cases.append(lambda args=args: fn(**args, **fixtures))
    return cases


def run_checks(name: str, checks: list, budget_s: float | None = None) -> None:
    failures = []
    t0 = time.perf_counter()
    for check in checks:
        try:
            check()
        except AssertionError as exc:
            failures.append(str(exc).splitlines()[0] if str(exc) else "assertion failed")
    elapsed = time.perf_counter() - t0
    over = budget_s is not None and elapsed > budget_s
    detail = f"{len(checks) - len(failures)}/{len(checks)} checks in {elapsed:.1f}s"
    if budget_s is not None:
        detail += f" (budget {budget_s:.0f}s)"
    if failures:
        detail += "; first failure: " + failures[0]
    record(name, not failures and not over, detail)
    assert not failures and not over, detail


def flat(*groups):
    return [c for g in groups for c in g]


# -- exact maths and mechanics -----------------------------------------------

def test_divergence_identities():
    run_checks("divergence identities", flat(
        expand(tdi.test_gaussian_kl_to_prior_examples),
        expand(tdi.test_gaussian_cross_kl_examples),
        expand(tdi.test_gaussian_cross_kl_hand_value),
        expand(tdi.test_gaussian_cross_kl_matches_scipy_entropy_oracle),
        expand(tdi.test_categorical_cross_kl_examples),
        expand(tdi.test_categorical_cross_kl_pads_smaller_teacher),
        expand(tdi.test_categorical_kl_to_uniform_examples),
        expand(tdi.test_categorical_kl_to_uniform_hand_value),
        expand(tdi.test_gaussian_log_prob_examples),
        expand(tdi.test_direction_examples),
        expand(tdi.test_direction_applies_to_categoricals),
        expand(tdi.test_gaussian_cross_kl_monte_carlo),
        expand(tdi.test_categorical_cross_kl_monte_carlo),
    ), budget_s=60)


def test_corrected_centered_teacher_audit():
    run_checks("corrected centered-teacher identity", flat(
        expand(tdi.test_centered_teacher_identity_with_corrected_rescaling),
    ))


def test_gradient_suite():
    run_checks("full-objective gradients", flat(
        expand(tob.test_lifelong_total_full_gradient_fully_differentiated),
        expand(tob.test_lifelong_total_full_gradient_with_frozen_reencoder),
        expand(tob.test_ewc_total_full_gradient),
    ), budget_s=120)


def test_replay_mechanics():
    run_checks("replay mechanics", flat(
        expand(tli.test_teacher_generate_allocation),
        expand(tli.test_mix_minibatch_real_fraction),
        expand(tli.test_teacher_is_untouched_while_the_student_trains),
    ))


def test_frechet_metric():
    run_checks("Frechet metric", flat(
        expand(tme.test_feature_stats_examples),
        expand(tme.test_trace_sqrt_product_examples),
        expand(tme.test_frechet_examples),
        expand(tme.test_frechet_symmetric_nonnegative_and_matches_sqrtm_oracle),
    ))


def test_data_layer(tmp_path):
    run_checks("data layer", flat(
        expand(tda.test_parse_hand_built_image_file),
        expand(tda.test_parse_hand_built_label_file),
        expand(tda.test_idx_file_round_trip_is_bit_exact, tmp_path=tmp_path),
        expand(tda.test_label_round_trip_property),
        expand(tda.test_split_by_label_purity_sizes_and_determinism),
        expand(tda.test_no_train_test_leakage_and_disjoint_val),
        expand(tda.test_permuted_sequence_properties),
        expand(tda.test_draw_permutations_distinct),
    ))


# -- desk-scale experiments --------------------------------------------------

def desk_config(experiment, **kw):
    return cli.ExperimentConfig(experiment, "lifelong", learning_rate=1e-3, desk_scale=True,
                                num_distributions=3, **kw)


@pytest.fixture(scope="module")
def digits(tmp_path_factory):
    cfg = desk_config("mnist_sequential", out_dir=str(tmp_path_factory.mktemp("extractor")))
    seq, corpus = cli.build_sequence(cfg)
    extractor = cli.load_or_train_extractor(cfg, corpus)
    return cfg, seq, extractor


def train_config(cfg, method, **kw):
    return TrainConfig(**{**vars(cfg.train_config()), "method": method, **kw})


@pytest.fixture(scope="module")
def forgetting_runs(digits):
    cfg, seq, extractor = digits
    torch.set_num_threads(1)
    t0 = time.perf_counter()
    runs = {m: [run_sequence(seq, train_config(cfg, m), seed=s, extractor=extractor.features).records
                for s in SEEDS] for m in ("vanilla", "lifelong")}
    return runs, time.perf_counter() - t0


def degradation(records):
    return records[2].per_distribution_elbo[0] - records[0].per_distribution_elbo[0]


def test_catastrophic_forgetting_ordering(forgetting_runs):
    runs, elapsed = forgetting_runs
    dv = [degradation(r) for r in runs["vanilla"]]
    dl = [degradation(r) for r in runs["lifelong"]]
    fv = [r[2].frechet for r in runs["vanilla"]]
    fl = [r[2].frechet for r in runs["lifelong"]]
    a = sum(d > 5 for d in dv)
    b = sum(l < v for l, v in zip(dl, dv))
    c = sum(l < v for l, v in zip(fl, fv))
    ok = a >= 4 and b >= 4 and c >= 4 and elapsed < 30 * 60
    record("catastrophic-forgetting ordering", ok,
           f"vanilla forgets >5 nats {a}/5, lifelong forgets less {b}/5, lifelong Frechet lower {c}/5; "
           f"degradation vanilla {[round(d, 1) for d in dv]} lifelong {[round(d, 1) for d in dl]}; "
           f"Frechet vanilla {[round(f, 1) for f in fv]} lifelong {[round(f, 1) for f in fl]}; {elapsed:.0f}s")
    assert ok


@pytest.mark.xfail(strict=True, reason="measured ordering at desk scale is reversed; see README")
def test_ablation_ordering(digits, forgetting_runs):
    cfg, seq, extractor = digits
    both = forgetting_runs[0]["lifelong"][0][2].frechet
    cons_only = run_sequence(seq, train_config(cfg, "lifelong", lam=0.0), seed=0,
                             extractor=extractor.features).records[2].frechet
    neither = run_sequence(seq, train_config(cfg, "lifelong", lam=0.0, consistency=False), seed=0,
                           extractor=extractor.features).records[2].frechet
    ok = both <= cons_only <= neither
    record("ablation ordering", ok,
           f"Frechet both {both:.2f}, consistency only {cons_only:.2f}, neither {neither:.2f} (seed 0)")
    assert ok


def test_permuted_ordering():
    cfg = desk_config("permuted")
    assert cfg.feature_space == "pixels"
    seq, _ = cli.build_sequence(cfg)
    torch.set_num_threads(1)
    life = [run_sequence(seq, train_config(cfg, "lifelong"), seed=s).records[2].frechet for s in SEEDS]
    ewc = [run_sequence(seq, train_config(cfg, "ewc", gamma=50.0), seed=s).records[2].frechet for s in SEEDS]
    wins = sum(l < e for l, e in zip(life, ewc))
    record("permuted ordering", wins >= 4,
           f"lifelong beats ewc-50 on {wins}/5 seeds; Frechet lifelong {[round(v, 1) for v in life]} "
           f"ewc {[round(v, 1) for v in ewc]}")
    assert wins >= 4


def test_determinism(tmp_path, digits):
    extractor_path = tmp_path / "extractor.ckpt"
    digits[2].save(extractor_path)
    outputs = []
    for name in ("a", "b"):
        out = tmp_path / name
        argv = ["run", "--experiment", "mnist_sequential", "--method", "lifelong", "--num-distributions", "3",
                "--desk-scale", "--learning-rate", "1e-3", "--seed", "0", "--out-dir", str(out),
                "--extractor-path", str(extractor_path)]
        assert cli.main(argv) == 0
        rows = [json.loads(line) for line in (out / "metrics.jsonl").read_text().splitlines()]
        for row in rows:
            row.pop("wall_seconds")
        outputs.append(rows)
    ok = outputs[0] == outputs[1] and len(outputs[0]) == 3
    record("determinism", ok, f"{len(outputs[0])} metrics lines, identical apart from wall_seconds: {ok}")
    assert ok
