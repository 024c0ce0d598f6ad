"""Sequential training: replay, student/teacher swaps and the baselines."""

from __future__ import annotations

import copy
import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from . import data as data_mod
from .distributions import sample_noise
from .errors import StateError, TrainingError
from .metrics import feature_stats, frechet_distance, log_frechet, neg_elbo_per_image
from .networks import VAE, ArchSpec, freeze, generate, init_model, save_checkpoint, transfer_weights
from .objective import FisherDiag, FrozenView, LossTerms, estimate_fisher_diag, ewc_total, lifelong_total

log = logging.getLogger(__name__)

METHODS = ("lifelong", "ewc", "vanilla", "full", "upto")
SCHEMA_VERSION = 1


@dataclass
class TrainConfig:
    method: str = "lifelong"
    lam: float = 0.01
    gamma: float = 50.0
    learning_rate: float = 1e-4
    batch_size: int = 128
    max_epochs: int = 50
    patience: int = 10
    min_delta: float = 1e-3
    tau0: float = 1.0
    tau_min: float = 0.5
    tau_rate: float = 3e-5
    kl_direction: str = "reverse"
    consistency: bool = True
    include_continuous_consistency: bool = False
    recon_consistency: bool = False
    freeze_reencoder: bool = True  # see objective.FrozenView
    grow_J: bool | None = None  # None: grow only for the lifelong method
    hidden_dim: int = 256
    hidden_layers: int = 2
    C: int = 14
    dtype: str = "float32"
    eval_mc: int = 1
    n_frechet: int = 2048
    fisher_samples: int = 1

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {', '.join(METHODS)}")
        if self.kl_direction not in ("reverse", "forward"):
            raise ValueError(f"kl_direction must be 'reverse' or 'forward', got {self.kl_direction!r}")
        if self.lam < 0 or self.gamma < 0:
            raise ValueError("lam and gamma must be nonnegative")
        if self.learning_rate <= 0 or self.batch_size < 1 or self.patience < 1 or self.max_epochs < 0:
            raise ValueError("learning_rate, batch_size and patience must be positive")
        if not 0 < self.tau_min <= self.tau0:
            raise ValueError("need 0 < tau_min <= tau0")

    @property
    def torch_dtype(self) -> torch.dtype:
        return {"float32": torch.float32, "float64": torch.float64}[self.dtype]

    @property
    def grows(self) -> bool:
        return self.method == "lifelong" if self.grow_J is None else self.grow_J

    def tau(self, step: int) -> float:
        return max(self.tau_min, self.tau0 * math.exp(-self.tau_rate * step))


@dataclass
class LifelongState:
    student: VAE
    teacher: VAE | None
    k: int
    optimizer: torch.optim.Optimizer
    rng_seed_lineage: list[int] = field(default_factory=list)
    global_step: int = 0
    steps_since_shift: int = 0
    fisher: FisherDiag | None = None

    @property
    def optimizer_step(self) -> int:
        return self.steps_since_shift


def make_optimizer(model: VAE, config: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.Adam(model.parameters(), lr=config.learning_rate, betas=(0.9, 0.999), eps=1e-8)


def initial_state(arch: ArchSpec, config: TrainConfig, seed: int) -> LifelongState:
    student = init_model(arch, seed, dtype=config.torch_dtype)
    return LifelongState(student, None, 0, make_optimizer(student, config), [seed])


def derive_seed(seed: int, *tags: int) -> int:
    return int(np.random.SeedSequence([seed, *tags]).generate_state(1)[0])


# -- replay ------------------------------------------------------------------

def mixing_ratio(k: int) -> float:
    """Probability of drawing a real sample after ``k`` earlier distributions."""
    if k < 0:
        raise ValueError("k must be nonnegative")
    return 1.0 / (k + 1)


def teacher_generate(teacher: VAE | None, k: int, n: int, generator: torch.Generator):
    """``n`` replay samples cycling over the ``k`` learnt discrete codes.

    Returns the decoder means and the source code of each sample.
    """
    if teacher is None or k < 1:
        raise StateError("replay needs a teacher that has seen at least one distribution")
    return generate(teacher, n, generator, n_codes=k)


def _take(pool: torch.Tensor, count: int, generator: torch.Generator) -> torch.Tensor:
    if count <= len(pool):
        return pool[:count]
    if len(pool) == 0:
        raise ValueError("cannot draw from an empty pool")
    extra = torch.randint(len(pool), (count - len(pool),), generator=generator)
    return torch.cat([pool, pool[extra]])


def mix_minibatch(
    real_batch: torch.Tensor,
    teacher_batch: torch.Tensor,
    pi: float,
    generator: torch.Generator,
    n_out: int | None = None,
    uniforms: torch.Tensor | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Fill ``n_out`` slots, each real with probability ``pi``.

    Real and replayed slots consume their pools in order, falling back to
    sampling with replacement once a pool is exhausted. Returns the mixed
    batch and a boolean mask marking real samples.
    """
    if len(real_batch) == 0:
        raise ValueError("real batch is empty")
    n_out = len(real_batch) if n_out is None else n_out
    if uniforms is None:
        uniforms = torch.rand(n_out, generator=generator, dtype=torch.float64)
    is_real = uniforms < pi
    n_real = int(is_real.sum())
    if n_real < n_out and len(teacher_batch) == 0:
        raise ValueError("teacher batch is empty but pi < 1 requested synthetic samples")
    out = torch.empty((n_out, *real_batch.shape[1:]), dtype=real_batch.dtype)
    out[is_real] = _take(real_batch, n_real, generator)
    if n_real < n_out:
        out[~is_real] = _take(teacher_batch.to(real_batch.dtype), n_out - n_real, generator)
    return out, is_real


# -- training ----------------------------------------------------------------

def _as_tensor(ds, dtype) -> torch.Tensor:
    images = ds.images if hasattr(ds, "images") else ds
    return torch.as_tensor(np.asarray(images)).to(dtype)


def _uses_replay(state: LifelongState, config: TrainConfig) -> bool:
    return config.method == "lifelong" and state.k >= 1


def _step_loss(state, config, x_real, x_teacher, noise, tau) -> LossTerms:
    reencoder = FrozenView(state.student) if config.freeze_reencoder else None
    if config.method == "ewc":
        return ewc_total(x_real, state.student, state.teacher, state.fisher,
                         config.gamma if state.k else 0.0, noise, tau, config.lam, reencoder)
    return lifelong_total(
        x_real, x_teacher, state.student, state.teacher, config.lam, noise, tau,
        consistency=config.consistency,
        include_continuous=config.include_continuous_consistency,
        direction=config.kl_direction,
        recon_consistency=config.recon_consistency,
        reencoder=reencoder,
    )


def _validation_set(state, config, val_x, seed) -> torch.Tensor:
    if not _uses_replay(state, config):
        return val_x
    gen = torch.Generator().manual_seed(derive_seed(seed, 7))
    replay, _ = teacher_generate(state.teacher, state.k, state.k * len(val_x), gen)
    return torch.cat([val_x, replay.to(val_x.dtype)])


def _validate(model: VAE, x: torch.Tensor, config: TrainConfig, seed: int) -> float:
    return float(neg_elbo_per_image(model, x, 1, seed, config.tau_min).mean())


def train_distribution(
    state: LifelongState, dataset, val, config: TrainConfig, seed: int = 0
) -> tuple[LifelongState, list[dict]]:
    """Train the student on one distribution with early stopping.

    After every epoch the validation negative ELBO is measured (with a fixed
    replay set added when the student learns from a teacher). Training stops
    after ``patience`` epochs without an improvement larger than
    ``min_delta`` and the best-epoch weights are restored.
    """
    x = _as_tensor(dataset, config.torch_dtype)
    if len(x) == 0:
        raise ValueError("training set is empty")
    history: list[dict] = []
    if config.max_epochs == 0:
        return state, history

    val_x = _validation_set(state, config, _as_tensor(val, config.torch_dtype), seed)
    val_seed = derive_seed(seed, 11)
    gen = torch.Generator().manual_seed(derive_seed(seed, 3))
    replay = _uses_replay(state, config)
    pi = mixing_ratio(state.k) if replay else 1.0
    model, opt = state.student, state.optimizer
    C, J, B = model.arch.C, model.arch.J, config.batch_size

    best_val, best_epoch, best_params, wait = math.inf, 0, None, 0
    for epoch in range(1, config.max_epochs + 1):
        order = torch.randperm(len(x), generator=gen)
        ptr, sums, n_steps = 0, {}, 0
        while ptr < len(x):
            pool = x[order[ptr : ptr + B]]
            if replay:
                t_pool, _ = teacher_generate(state.teacher, state.k, len(pool), gen)
                batch, is_real = mix_minibatch(pool, t_pool, pi, gen)
                x_real, x_teacher = batch[is_real], batch[~is_real]
                ptr += int(is_real.sum())
            else:
                x_real, x_teacher = pool, pool[:0]
                ptr += len(pool)
            tau = config.tau(state.global_step)
            noise = sample_noise(len(x_real) + len(x_teacher), C, J, gen, config.torch_dtype)
            terms = _step_loss(state, config, x_real, x_teacher, noise, tau)
            loss = terms.total
            if not torch.isfinite(loss):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}, step {n_steps}: {terms.breakdown()}"
                )
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            state.global_step += 1
            state.steps_since_shift += 1
            n_steps += 1
            for key, value in terms.breakdown().items():
                sums[key] = sums.get(key, 0.0) + value

        val_loss = _validate(model, val_x, config, val_seed)
        row = {"epoch": epoch, "val_neg_elbo": val_loss, "steps": n_steps,
               **{k: v / n_steps for k, v in sums.items()}}
        history.append(row)
        log.debug("epoch %d: train %.3f val %.3f", epoch, row["total"], val_loss)
        if val_loss < best_val - config.min_delta:
            best_val, best_epoch, wait = val_loss, epoch, 0
            best_params = copy.deepcopy(model.state_dict())
        else:
            wait += 1
            if wait >= config.patience:
                break

    if best_params is not None:
        model.load_state_dict(best_params)
    for row in history:
        row["best_epoch"] = best_epoch
    return state, history


def on_distribution_shift(
    state: LifelongState, grow_J: bool, seed: int, config: TrainConfig
) -> LifelongState:
    """Freeze the student as the new teacher and start a fresh student from it."""
    teacher = freeze(state.student)
    arch = teacher.arch.with_J(teacher.arch.J + 1) if grow_J else teacher.arch
    student = transfer_weights(teacher, arch, seed)
    return LifelongState(
        student=student,
        teacher=teacher,
        k=state.k + 1,
        optimizer=make_optimizer(student, config),
        rng_seed_lineage=[*state.rng_seed_lineage, seed],
        global_step=state.global_step,
        steps_since_shift=0,
        fisher=state.fisher,
    )


# -- whole sequences ---------------------------------------------------------

@dataclass
class MetricsRecord:
    method: str
    trial: int
    distribution_index: int
    neg_test_elbo: float
    frechet: float
    log_frechet: float
    epochs_to_stop: int
    best_epoch: int
    per_distribution_elbo: list[float]
    J: int
    loss_breakdown: dict
    wall_seconds: float
    schema_version: int = SCHEMA_VERSION

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class ExperimentResult:
    records: list[MetricsRecord]
    histories: list[list[dict]]
    final_model: VAE | None = None


def _triples(datasets):
    return list(datasets.triples) if isinstance(datasets, data_mod.DistributionSequence) else list(datasets)


def evaluate_model(
    model: VAE,
    tests: list,
    config: TrainConfig,
    seed: int,
    extractor: Callable | None = None,
) -> tuple[float, list[float], float]:
    """Negative ELBO on the union of ``tests``, per test set, and Frechet distance."""
    parts = [_as_tensor(t, model.dtype) for t in tests]
    per_image = [neg_elbo_per_image(model, p, config.eval_mc, derive_seed(seed, 21, j), config.tau_min)
                 for j, p in enumerate(parts)]
    union_elbo = float(torch.cat(per_image).mean())
    per_dist = [float(v.mean()) for v in per_image]

    gen = torch.Generator().manual_seed(derive_seed(seed, 31))
    fake, _ = generate(model, config.n_frechet, gen)
    real = torch.cat(parts)
    feats = extractor or (lambda a: a)
    fd = frechet_distance(feature_stats(real.double().numpy(), feats), feature_stats(fake.double().numpy(), feats))
    return union_elbo, per_dist, fd


def run_sequence(
    datasets,
    config: TrainConfig,
    seed: int = 0,
    extractor: Callable | None = None,
    trial: int = 0,
    on_record: Callable[[MetricsRecord], None] | None = None,
    checkpoint_dir: str | Path | None = None,
) -> ExperimentResult:
    """Run one method over an ordered list of (train, val, test) triples.

    ``lifelong``, ``ewc`` and ``vanilla`` see one training set at a time;
    ``full`` trains once on the union of every set and ``upto`` retrains
    from scratch on the union of the sets seen so far. After each
    distribution the model is scored on the union of the test sets so far.
    """
    triples = _triples(datasets)
    if not triples:
        raise ValueError("need at least one dataset")
    n = len(triples)
    dim = triples[0][0].images.shape[1]
    J0 = 1 if config.grows else n
    arch = ArchSpec(dim, J0, config.C, config.hidden_dim, config.hidden_layers)
    records, histories = [], []
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir else None
    if ckpt_dir:
        ckpt_dir.mkdir(parents=True, exist_ok=True)

    def emit(i, model, history, t0):
        tests = [t[2] for t in triples[: i + 1]]
        elbo, per_dist, fd = evaluate_model(model, tests, config, derive_seed(seed, 5, i), extractor)
        rec = MetricsRecord(
            method=config.method, trial=trial, distribution_index=i,
            neg_test_elbo=elbo, frechet=fd, log_frechet=log_frechet(fd),
            epochs_to_stop=len(history),
            best_epoch=history[-1]["best_epoch"] if history else 0,
            per_distribution_elbo=per_dist, J=model.arch.J,
            loss_breakdown={k: v for k, v in (history[-1] if history else {}).items()
                            if k not in ("epoch", "best_epoch", "steps")},
            wall_seconds=time.perf_counter() - t0,
        )
        records.append(rec)
        histories.append(history)
        if on_record:
            on_record(rec)

    if config.method == "full":
        t0 = time.perf_counter()
        state = initial_state(arch, config, derive_seed(seed, 1))
        train_u = data_mod.concat([t[0] for t in triples])
        val_u = data_mod.concat([t[1] for t in triples])
        state, history = train_distribution(state, train_u, val_u, config, derive_seed(seed, 2))
        for i in range(n):
            emit(i, state.student, history, t0)
        return ExperimentResult(records, histories, state.student)

    if config.method == "upto":
        model = None
        for i in range(n):
            t0 = time.perf_counter()
            state = initial_state(arch, config, derive_seed(seed, 1, i))
            train_u = data_mod.concat([t[0] for t in triples[: i + 1]])
            val_u = data_mod.concat([t[1] for t in triples[: i + 1]])
            state, history = train_distribution(state, train_u, val_u, config, derive_seed(seed, 2, i))
            model = state.student
            emit(i, model, history, t0)
        return ExperimentResult(records, histories, model)

    state = initial_state(arch, config, derive_seed(seed, 1))
    for i, (train_i, val_i, _) in enumerate(triples):
        t0 = time.perf_counter()
        state, history = train_distribution(state, train_i, val_i, config, derive_seed(seed, 2, i))
        emit(i, state.student, history, t0)
        if i == n - 1:
            break
        if config.method == "ewc":
            state.fisher = estimate_fisher_diag(
                state.student, _as_tensor(train_i, config.torch_dtype), config.fisher_samples,
                derive_seed(seed, 4, i), config.tau_min,
            )
        if ckpt_dir:
            save_checkpoint(state.student, ckpt_dir / f"trial{trial}_dist{i}.ckpt", state.rng_seed_lineage)
        state = on_distribution_shift(state, config.grows, derive_seed(seed, 6, i), config)
    return ExperimentResult(records, histories, state.student)
