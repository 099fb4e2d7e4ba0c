"""Noise schedule and closed-form diffusion math.

All functions are plain arithmetic over the sample, so they accept numpy
arrays and torch tensors alike. Step indices are 1-based as in the usual DDPM
notation; ``alpha_bar`` at step 0 is taken to be 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any

import numpy as np
import torch


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    s: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma2: np.ndarray

    @property
    def n_reverse_steps(self) -> int:
        return self.T // self.s

    @property
    def reverse_steps(self) -> list[int]:
        """Steps visited by the reverse chain, largest first."""
        return list(range(self.T, 0, -self.s))

    def b(self, t: int) -> float:
        self._check(t)
        return float(self.beta[t - 1])

    def a(self, t: int) -> float:
        self._check(t)
        return float(self.alpha[t - 1])

    def abar(self, t: int) -> float:
        if t == 0:
            return 1.0
        self._check(t)
        return float(self.alpha_bar[t - 1])

    def _check(self, t: int) -> None:
        if not 1 <= t <= self.T:
            raise ScheduleError(f"step {t} outside 1..{self.T}")


@dataclass
class DiffusionState:
    sample: Any
    step: int


def build_schedule(T: int, s: int, beta_min: float = 1e-4, beta_max: float = 2e-2) -> NoiseSchedule:
    """Linear beta schedule with stride ``s``.

    Raises:
        ScheduleError: if ``T`` is not a positive multiple of ``s`` or the
            beta bounds are not inside (0, 1).
    """
    if s < 1 or T < s:
        raise ScheduleError(f"need T >= s >= 1, got T={T}, s={s}")
    if T % s:
        raise ScheduleError(f"T={T} is not divisible by stride s={s}")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise ScheduleError(f"beta bounds must satisfy 0 < min <= max < 1, got {beta_min}, {beta_max}")

    if T == 1:
        beta = np.array([beta_min], dtype=np.float64)
    else:
        beta = beta_min + np.arange(T, dtype=np.float64) * (beta_max - beta_min) / (T - 1)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    alpha_bar_prev = np.concatenate([[1.0], alpha_bar[:-1]])
    sigma2 = (1.0 - alpha_bar_prev) / (1.0 - alpha_bar) * beta
    return NoiseSchedule(T=T, s=s, beta=beta, alpha=alpha, alpha_bar=alpha_bar, sigma2=sigma2)


def forward_diffuse(F0, t: int, eps, sched: NoiseSchedule) -> DiffusionState:
    """Sample q(F_t | F_0) given caller-supplied standard normal noise."""
    sched._check(t)
    ab = sched.abar(t)
    return DiffusionState(math.sqrt(ab) * F0 + math.sqrt(1.0 - ab) * eps, t)


def mu_sigma_from_eps(F_t, t: int, eps_pred, sched: NoiseSchedule):
    """Reverse-step mean and variance under the noise-prediction parameterization."""
    a, b, ab = sched.a(t), sched.b(t), sched.abar(t)
    mu = (F_t - b / math.sqrt(1.0 - ab) * eps_pred) / math.sqrt(a)
    return mu, float(sched.sigma2[t - 1])


def posterior_coefficients(t: int, sched: NoiseSchedule) -> tuple[float, float]:
    """Coefficients on (F_t, F0_hat) of the strided posterior mean."""
    ab_t, ab_prev = sched.abar(t), sched.abar(t - sched.s)
    c_t = math.sqrt(sched.a(t)) * (1.0 - ab_prev) / (1.0 - ab_t)
    c_0 = math.sqrt(ab_prev) * sched.b(t) / (1.0 - ab_t)
    return c_t, c_0


def _check_stride(t: int, sched: NoiseSchedule) -> None:
    if t % sched.s:
        raise ScheduleError(f"step {t} is not a multiple of stride {sched.s}")
    if t < sched.s:
        raise ScheduleError(f"step {t} is below the stride {sched.s}")
    sched._check(t)


def posterior_sample(F_t: DiffusionState, F0_hat, sched: NoiseSchedule, eps) -> DiffusionState:
    """Jump from step t to t - s using the predicted clean sample.

    The noise term is dropped on the final jump (t == s) so the chain ends
    deterministically.
    """
    t = F_t.step
    _check_stride(t, sched)
    c_t, c_0 = posterior_coefficients(t, sched)
    out = c_t * F_t.sample + c_0 * F0_hat
    if t > sched.s:
        out = out + math.sqrt(sched.b(t)) * eps
    return DiffusionState(out, t - sched.s)


def _randn_like(x, rng):
    if isinstance(x, torch.Tensor):
        return torch.randn(x.shape, generator=rng, dtype=x.dtype, device=x.device)
    return rng.standard_normal(np.shape(x))


def coupled_real_pair(F0, t: int, sched: NoiseSchedule, rng):
    """Draw an ancestrally consistent pair (F_{t-s}, F_t) from the forward chain.

    ``rng`` is a ``numpy.random.Generator`` for array input or a
    ``torch.Generator`` for tensor input. Passing ``rng=None`` uses zero noise.
    """
    _check_stride(t, sched)
    prev = t - sched.s
    noise = (lambda: 0 * F0) if rng is None else (lambda: _randn_like(F0, rng))
    if prev == 0:
        F_prev = F0
    else:
        F_prev = forward_diffuse(F0, prev, noise(), sched).sample
    ratio = sched.abar(t) / sched.abar(prev)
    F_t = math.sqrt(ratio) * F_prev + math.sqrt(1.0 - ratio) * noise()
    return F_prev, F_t
