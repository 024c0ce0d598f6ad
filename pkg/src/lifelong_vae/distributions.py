"""Reparameterized samplers and closed-form divergences.

Everything here is a pure function of its arguments: noise is always passed
in, never drawn. Tensors may carry leading batch dimensions; the event
dimension is the last one and divergences reduce over it. All divergences
are evaluated in float64 whatever the input precision.
"""

from __future__ import annotations

import math
from typing import NamedTuple

import torch
import torch.nn.functional as F

CATEGORICAL_PAD_EPS = 1e-6
GUMBEL_U_CLAMP = 1e-12
LOG_2PI = math.log(2.0 * math.pi)


class GaussianParams(NamedTuple):
    """Diagonal Gaussian given by its mean and per-dimension log-variance."""

    mu: torch.Tensor
    log_var: torch.Tensor

    @property
    def var(self) -> torch.Tensor:
        return self.log_var.exp()

    def detach(self) -> "GaussianParams":
        return GaussianParams(self.mu.detach(), self.log_var.detach())


class CategoricalParams(NamedTuple):
    """Categorical over J values given by unnormalised logits."""

    logits: torch.Tensor

    @property
    def probs(self) -> torch.Tensor:
        return torch.softmax(self.logits, dim=-1)

    @property
    def log_probs(self) -> torch.Tensor:
        return torch.log_softmax(self.logits, dim=-1)

    @property
    def num_categories(self) -> int:
        return self.logits.shape[-1]

    def detach(self) -> "CategoricalParams":
        return CategoricalParams(self.logits.detach())


class LatentSample(NamedTuple):
    z_c: torch.Tensor
    z_d: torch.Tensor

    def flat(self) -> torch.Tensor:
        return torch.cat([self.z_c, self.z_d], dim=-1)


class NoiseBundle(NamedTuple):
    """Externally drawn noise for one batch.

    ``epsilon`` is standard normal with shape (..., C), ``gumbel`` standard
    Gumbel with shape (..., J). ``omega_uniforms`` are the uniforms used to
    pick real vs replayed slots when a batch is mixed (may be empty).
    """

    epsilon: torch.Tensor
    gumbel: torch.Tensor
    omega_uniforms: torch.Tensor | None = None


def _f64(t: torch.Tensor) -> torch.Tensor:
    return t if t.dtype == torch.float64 else t.to(torch.float64)


def _check_same_shape(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def gumbel_from_uniform(u: torch.Tensor) -> torch.Tensor:
    u = u.clamp(GUMBEL_U_CLAMP, 1.0 - GUMBEL_U_CLAMP)
    return -torch.log(-torch.log(u))


def sample_noise(
    batch: int,
    c: int,
    j: int,
    generator: torch.Generator | None = None,
    dtype: torch.dtype = torch.float64,
) -> NoiseBundle:
    """Draw one batch of reparameterization noise from ``generator``."""
    eps = torch.randn(batch, c, generator=generator, dtype=dtype)
    u = torch.rand(batch, j, generator=generator, dtype=torch.float64)
    return NoiseBundle(eps, gumbel_from_uniform(u).to(dtype))


def gaussian_reparam_sample(q: GaussianParams, epsilon: torch.Tensor) -> torch.Tensor:
    _check_same_shape(q.mu, epsilon, "gaussian_reparam_sample")
    return q.mu + torch.exp(0.5 * q.log_var) * epsilon


def gumbel_softmax_sample(q: CategoricalParams, tau: float, gumbel: torch.Tensor) -> torch.Tensor:
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    _check_same_shape(q.logits, gumbel, "gumbel_softmax_sample")
    return torch.softmax((q.logits + gumbel) / tau, dim=-1)


def gaussian_kl_to_prior(q: GaussianParams) -> torch.Tensor:
    """KL[q || N(0, I)], summed over the event dimension."""
    mu, lv = _f64(q.mu), _f64(q.log_var)
    return 0.5 * (lv.exp() + mu.pow(2) - 1.0 - lv).sum(-1)


def gaussian_cross_kl(student: GaussianParams, teacher: GaussianParams) -> torch.Tensor:
    """KL[student || teacher] for diagonal Gaussians with arbitrary means."""
    _check_same_shape(student.mu, teacher.mu, "gaussian_cross_kl")
    mu_s, lv_s = _f64(student.mu), _f64(student.log_var)
    mu_t, lv_t = _f64(teacher.mu), _f64(teacher.log_var)
    inv_var_t = torch.exp(-lv_t)
    terms = (lv_s - lv_t).exp() + (mu_t - mu_s).pow(2) * inv_var_t - 1.0 + lv_t - lv_s
    return 0.5 * terms.sum(-1)


def pad_categorical(q: CategoricalParams, j: int, eps: float = CATEGORICAL_PAD_EPS) -> CategoricalParams:
    """Grow ``q`` to ``j`` categories.

    Each new slot receives probability mass ``eps`` before renormalising, so
    the padded distribution has full support. The result is returned as
    log-probabilities, which are valid logits.
    """
    j_old = q.num_categories
    if j < j_old:
        raise ValueError(f"cannot shrink a categorical from {j_old} to {j} categories")
    if j == j_old:
        return q
    probs = _f64(q.probs)
    pad = torch.full((*probs.shape[:-1], j - j_old), eps, dtype=torch.float64)
    padded = torch.cat([probs, pad], dim=-1)
    padded = padded / padded.sum(-1, keepdim=True)
    return CategoricalParams(padded.log())


def categorical_cross_kl(student: CategoricalParams, teacher: CategoricalParams) -> torch.Tensor:
    """KL[student || teacher]; a smaller teacher is padded up to the student's size."""
    if teacher.num_categories > student.num_categories:
        raise ValueError(
            f"teacher has {teacher.num_categories} categories but student only "
            f"{student.num_categories}; students never shrink"
        )
    teacher = pad_categorical(teacher, student.num_categories)
    log_p = torch.log_softmax(_f64(student.logits), dim=-1)
    log_q = torch.log_softmax(_f64(teacher.logits), dim=-1)
    return (log_p.exp() * (log_p - log_q)).sum(-1)


def categorical_kl_to_uniform(q: CategoricalParams) -> torch.Tensor:
    """log J - H(q)."""
    log_p = torch.log_softmax(_f64(q.logits), dim=-1)
    return math.log(q.num_categories) + (log_p.exp() * log_p).sum(-1)


def gaussian_log_prob(q: GaussianParams, z: torch.Tensor) -> torch.Tensor:
    _check_same_shape(q.mu, z, "gaussian_log_prob")
    mu, lv, z = _f64(q.mu), _f64(q.log_var), _f64(z)
    return (-0.5 * LOG_2PI - 0.5 * lv - 0.5 * (z - mu).pow(2) * torch.exp(-lv)).sum(-1)


def bernoulli_cross_kl(student_logits: torch.Tensor, teacher_logits: torch.Tensor) -> torch.Tensor:
    """KL[Bern(sigmoid(student)) || Bern(sigmoid(teacher))] summed over pixels."""
    _check_same_shape(student_logits, teacher_logits, "bernoulli_cross_kl")
    a, b = _f64(student_logits), _f64(teacher_logits)
    p = torch.sigmoid(a)
    # log p - log q for both outcomes via logsigmoid for stability
    pos = F.logsigmoid(a) - F.logsigmoid(b)
    neg = F.logsigmoid(-a) - F.logsigmoid(-b)
    return (p * pos + (1.0 - p) * neg).sum(-1)


def forward_or_reverse_cross_kl(student, teacher, direction: str = "reverse") -> torch.Tensor:
    """Cross-model KL in either direction.

    ``reverse`` is KL[student || teacher] (mode seeking), ``forward`` is
    KL[teacher || student]. For categoricals a smaller teacher is padded
    first in both directions.
    """
    if direction not in ("reverse", "forward"):
        raise ValueError(f"direction must be 'reverse' or 'forward', got {direction!r}")
    if isinstance(student, GaussianParams) and isinstance(teacher, GaussianParams):
        if direction == "reverse":
            return gaussian_cross_kl(student, teacher)
        return gaussian_cross_kl(teacher, student)
    if isinstance(student, CategoricalParams) and isinstance(teacher, CategoricalParams):
        if direction == "reverse":
            return categorical_cross_kl(student, teacher)
        teacher = pad_categorical(teacher, student.num_categories)
        return categorical_cross_kl(teacher, student)
    raise ValueError(
        f"cannot compare {type(student).__name__} with {type(teacher).__name__}"
    )

