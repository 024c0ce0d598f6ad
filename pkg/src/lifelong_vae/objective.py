"""Training objectives: the lifelong student loss and the EWC baseline.

Every quantity is expressed as a loss to minimise. Batch terms are means
over the batch of per-sample values, and all reductions run in float64.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Callable

import torch
import torch.func
import torch.nn.functional as F

from .distributions import (
    LatentSample,
    NoiseBundle,
    bernoulli_cross_kl,
    categorical_kl_to_uniform,
    forward_or_reverse_cross_kl,
    gaussian_kl_to_prior,
    gaussian_log_prob,
    gaussian_reparam_sample,
    gumbel_softmax_sample,
    sample_noise,
)
from .errors import StateError
from .networks import VAE

FISHER_MAX_POINTS = 1000


@dataclass
class LossTerms:
    """Scalar components of one loss evaluation.

    ``total = recon_nll + kl_continuous + kl_discrete + consistency
    + recon_consistency + info_weight * info_gain_bound + ewc_penalty``.
    """

    recon_nll: torch.Tensor
    kl_continuous: torch.Tensor
    kl_discrete: torch.Tensor
    consistency: torch.Tensor
    info_gain_bound: torch.Tensor
    ewc_penalty: torch.Tensor
    recon_consistency: torch.Tensor
    info_weight: float = 0.0

    @property
    def neg_elbo(self) -> torch.Tensor:
        return self.recon_nll + self.kl_continuous + self.kl_discrete

    @property
    def total(self) -> torch.Tensor:
        return (
            self.neg_elbo
            + self.consistency
            + self.recon_consistency
            + self.info_weight * self.info_gain_bound
            + self.ewc_penalty
        )

    def breakdown(self) -> dict[str, float]:
        out = {}
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            out[f.name] = float(value.detach()) if torch.is_tensor(value) else float(value)
        out["total"] = float(self.total.detach())
        return out


def _zero() -> torch.Tensor:
    return torch.zeros((), dtype=torch.float64)


def reconstruction_nll(logits: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    """Bernoulli cross-entropy summed over pixels, one value per sample."""
    if logits.shape != x.shape:
        raise ValueError(f"logits {tuple(logits.shape)} and targets {tuple(x.shape)} differ in shape")
    if x.numel() and (x.min() < 0 or x.max() > 1):
        raise ValueError("reconstruction targets must lie in [0, 1]")
    logits, x = logits.to(torch.float64), x.to(torch.float64)
    return (F.softplus(logits) - x * logits).sum(-1)


@dataclass
class _Pass:
    gauss: object
    cat: object
    z: LatentSample
    logits: torch.Tensor
    recon: torch.Tensor
    kl_c: torch.Tensor
    kl_d: torch.Tensor

    @property
    def neg_elbo(self) -> torch.Tensor:
        return self.recon + self.kl_c + self.kl_d


def _forward(x: torch.Tensor, model: VAE, noise: NoiseBundle, tau: float) -> _Pass:
    gauss, cat = model.encode(x)
    z = LatentSample(
        gaussian_reparam_sample(gauss, noise.epsilon.to(gauss.mu.dtype)),
        gumbel_softmax_sample(cat, tau, noise.gumbel.to(cat.logits.dtype)),
    )
    logits = model.decode(z)
    return _Pass(
        gauss, cat, z, logits,
        reconstruction_nll(logits, x),
        gaussian_kl_to_prior(gauss),
        categorical_kl_to_uniform(cat),
    )


def per_sample_neg_elbo(x: torch.Tensor, model: VAE, noise: NoiseBundle, tau: float) -> torch.Tensor:
    return _forward(x, model, noise, tau).neg_elbo


def elbo_terms(x: torch.Tensor, model: VAE, noise: NoiseBundle, tau: float = 1.0) -> LossTerms:
    """Single-sample negative ELBO of a batch, split into its three terms."""
    p = _forward(x, model, noise, tau)
    return LossTerms(
        recon_nll=p.recon.mean(),
        kl_continuous=p.kl_c.mean(),
        kl_discrete=p.kl_d.mean(),
        consistency=_zero(),
        info_gain_bound=_zero(),
        ewc_penalty=_zero(),
        recon_consistency=_zero(),
    )


def consistency_term(
    x_hat_batch: torch.Tensor,
    student: VAE,
    teacher: VAE | None,
    include_continuous: bool = False,
    direction: str = "reverse",
) -> torch.Tensor:
    """Mean cross-model KL between student and teacher posteriors on replayed data."""
    if teacher is None:
        raise StateError("consistency term needs a teacher model")
    if len(x_hat_batch) == 0:
        return _zero()
    s_gauss, s_cat = student.encode(x_hat_batch)
    with torch.no_grad():
        t_gauss, t_cat = teacher.encode(x_hat_batch)
    kl = forward_or_reverse_cross_kl(s_cat, t_cat.detach(), direction)
    if include_continuous:
        kl = kl + forward_or_reverse_cross_kl(s_gauss, t_gauss.detach(), direction)
    return kl.mean()


def info_gain_bound(
    x_hat: torch.Tensor, z_c_drawn: torch.Tensor, student: VAE, reencoder: VAE | FrozenView | None = None
) -> torch.Tensor:
    """Mean log-density of the drawn continuous code under the re-encoded reconstruction.

    ``reencoder`` scores the reconstruction in place of ``student`` (e.g. a
    parameter-frozen view of it); gradients then reach the student only
    through ``x_hat`` and ``z_c_drawn``.
    """
    if x_hat.shape[:-1] != z_c_drawn.shape[:-1]:
        raise ValueError("x_hat and z_c_drawn must share their batch shape")
    gauss, _ = (student if reencoder is None else reencoder).encode(x_hat)
    return gaussian_log_prob(gauss, z_c_drawn).mean()


class FrozenView:
    """Evaluates ``model``'s encoder with its current parameters detached."""

    def __init__(self, model: VAE):
        self.model = model

    def encode(self, x: torch.Tensor):
        params = {n: p.detach() for n, p in self.model.named_parameters()}
        return torch.func.functional_call(self.model, params, (x,))


def reconstruction_consistency_term(
    x_hat_batch: torch.Tensor,
    student: VAE,
    teacher: VAE | None,
    noise: NoiseBundle,
    tau: float = 1.0,
) -> torch.Tensor:
    """Mean Bernoulli KL between student and teacher decoders on replayed data.

    Both decoders are evaluated at the student's latent draw for each sample.
    Disabled by default in training; kept for ablations.
    """
    if teacher is None:
        raise StateError("reconstruction consistency needs a teacher model")
    if len(x_hat_batch) == 0:
        return _zero()
    p = _forward(x_hat_batch, student, noise, tau)
    with torch.no_grad():
        t_logits = teacher.decode(p.z.flat().detach())
    return bernoulli_cross_kl(p.logits, t_logits).mean()


def _slice_noise(noise: NoiseBundle, sl: slice) -> NoiseBundle:
    return NoiseBundle(noise.epsilon[sl], noise.gumbel[sl])


def lifelong_total(
    batch_real: torch.Tensor,
    batch_teacher: torch.Tensor,
    student: VAE,
    teacher: VAE | None,
    lam: float,
    noise: NoiseBundle,
    tau: float = 1.0,
    *,
    consistency: bool = True,
    include_continuous: bool = False,
    direction: str = "reverse",
    recon_consistency: bool = False,
    reencoder: VAE | FrozenView | None = None,
) -> LossTerms:
    """Student loss on one mixed minibatch.

    Mean negative ELBO over ``[batch_real; batch_teacher]`` plus the
    posterior consistency KL on the replayed part plus ``lam`` times the
    information bound on the continuous code. ``noise`` covers the
    concatenated batch, real samples first. ``reencoder`` is passed on to
    ``info_gain_bound``.
    """
    n_real = len(batch_real)
    x = torch.cat([batch_real, batch_teacher.to(batch_real.dtype)], dim=0)
    if len(x) == 0:
        raise ValueError("empty minibatch")
    if len(batch_teacher) and teacher is None:
        raise StateError("replayed samples supplied without a teacher")
    p = _forward(x, student, noise, tau)

    info = _zero()
    if lam:
        x_hat = torch.sigmoid(p.logits)
        info = info_gain_bound(x_hat, p.z.z_c, student, reencoder)

    cons = _zero()
    rcons = _zero()
    if len(batch_teacher) and consistency:
        cons = consistency_term(batch_teacher, student, teacher, include_continuous, direction)
    if len(batch_teacher) and recon_consistency:
        rcons = reconstruction_consistency_term(
            batch_teacher, student, teacher, _slice_noise(noise, slice(n_real, None)), tau
        )

    return LossTerms(
        recon_nll=p.recon.mean(),
        kl_continuous=p.kl_c.mean(),
        kl_discrete=p.kl_d.mean(),
        consistency=cons,
        info_gain_bound=info,
        ewc_penalty=_zero(),
        recon_consistency=rcons,
        info_weight=float(lam),
    )


FisherDiag = dict  # parameter name -> nonnegative tensor shaped like the parameter


def _check_fisher_alignment(model: VAE, fisher: FisherDiag) -> None:
    names = [n for n, _ in model.named_parameters()]
    if list(fisher) != names:
        raise ValueError("Fisher entries do not match the model's parameters")
    for n, p in model.named_parameters():
        if fisher[n].shape != p.shape:
            raise ValueError(f"Fisher entry {n} has shape {tuple(fisher[n].shape)}, parameter {tuple(p.shape)}")


def estimate_fisher_diag(
    model: VAE,
    data: torch.Tensor,
    n_samples: int = 1,
    seed: int = 0,
    tau: float = 1.0,
    max_points: int = FISHER_MAX_POINTS,
    objective: Callable[[torch.Tensor, VAE, NoiseBundle, float], torch.Tensor] | None = None,
) -> FisherDiag:
    """Diagonal Fisher estimate from squared per-datum ELBO gradients.

    For each datum the gradient of the single-sample ELBO (averaged over
    ``n_samples`` latent draws) is squared; entries are averaged over at
    most ``max_points`` data points chosen by ``seed``.
    """
    if len(data) == 0:
        raise ValueError("cannot estimate a Fisher matrix from no data")
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    objective = objective or per_sample_neg_elbo
    gen = torch.Generator().manual_seed(seed)
    n = min(max_points, len(data))
    idx = torch.randperm(len(data), generator=gen)[:n] if n < len(data) else torch.arange(n)

    params = [p for _, p in model.named_parameters()]
    fisher = [torch.zeros_like(p, dtype=torch.float64) for p in params]
    C, J, dtype = model.arch.C, model.arch.J, model.dtype
    for i in idx.tolist():
        x = data[i : i + 1].to(dtype)
        noise = sample_noise(n_samples, C, J, gen, dtype)
        loss = objective(x.expand(n_samples, -1), model, noise, tau).mean()
        grads = torch.autograd.grad(loss, params, allow_unused=True)
        for acc, g in zip(fisher, grads):
            if g is not None:
                acc += g.detach().to(torch.float64).pow(2)
    return {name: (acc / n).to(p.dtype) for (name, p), acc in zip(model.named_parameters(), fisher)}


def ewc_penalty(student: VAE, teacher: VAE, fisher: FisherDiag, gamma: float) -> torch.Tensor:
    _check_fisher_alignment(student, fisher)
    anchor = dict(teacher.named_parameters())
    total = _zero()
    for name, p in student.named_parameters():
        diff = p.to(torch.float64) - anchor[name].detach().to(torch.float64)
        total = total + (fisher[name].to(torch.float64) * diff.pow(2)).sum()
    return 0.5 * gamma * total


def ewc_total(
    batch_real: torch.Tensor,
    student: VAE,
    teacher: VAE | None,
    fisher: FisherDiag | None,
    gamma: float,
    noise: NoiseBundle,
    tau: float = 1.0,
    lam: float = 0.0,
    reencoder: VAE | FrozenView | None = None,
) -> LossTerms:
    """Negative ELBO plus the quadratic Fisher-weighted anchor to ``teacher``."""
    terms = lifelong_total(batch_real, batch_real[:0], student, None, lam, noise, tau, reencoder=reencoder)
    if gamma > 0:
        if teacher is None or fisher is None:
            raise StateError("EWC penalty needs both a teacher and a Fisher estimate")
        terms.ewc_penalty = ewc_penalty(student, teacher, fisher, gamma)
    elif fisher is not None:
        _check_fisher_alignment(student, fisher)
    return terms
