"""Diffusion-process arithmetic: quadratic beta schedule, forward corruption,
x0-parameterised posterior, and DDPM / DDIM reverse steps.

All schedule quantities are float64 numpy arrays. Step indices are 1-based
(``k = 1..K``); index 0 is the clean state with ``alpha_bar_0 = 1``. The step
functions accept numpy arrays or torch tensors for the value arguments.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class ScheduleError(ValueError):
    """Invalid schedule parameters or step indices."""


@dataclass(frozen=True)
class NoiseSchedule:
    """Precomputed per-step noise levels.

    ``betas``, ``alphas``, ``alpha_bars`` and ``posterior_vars`` have length K
    and position ``k - 1`` holds step ``k``. Use :meth:`alpha_bar` for the
    1-based lookup that also covers ``k = 0``.
    """

    betas: np.ndarray
    fixed_variance: bool = False
    alphas: np.ndarray = field(init=False, repr=False)
    alpha_bars: np.ndarray = field(init=False, repr=False)
    posterior_vars: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64).copy()
        if betas.ndim != 1 or betas.size < 1:
            raise ScheduleError("betas must be a non-empty 1-d array")
        if np.any(betas <= 0.0) or np.any(betas >= 1.0):
            raise ScheduleError("every beta must lie in (0, 1)")
        alphas = 1.0 - betas
        alpha_bars = np.cumprod(alphas)
        prev = np.concatenate([[1.0], alpha_bars[:-1]])
        if self.fixed_variance:
            post = betas.copy()
        else:
            post = (1.0 - prev) / (1.0 - alpha_bars) * betas
        for name, arr in (("betas", betas), ("alphas", alphas),
                          ("alpha_bars", alpha_bars), ("posterior_vars", post)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def K(self) -> int:
        return int(self.betas.size)

    def _check(self, k: int, lo: int = 1) -> int:
        k = int(k)
        if not lo <= k <= self.K:
            raise ScheduleError(f"step {k} outside [{lo}, {self.K}]")
        return k

    def alpha_bar(self, k: int) -> float:
        """Cumulative signal retention at step ``k``; ``alpha_bar(0) == 1``."""
        k = self._check(k, lo=0)
        return 1.0 if k == 0 else float(self.alpha_bars[k - 1])

    def beta(self, k: int) -> float:
        return float(self.betas[self._check(k) - 1])

    def table(self) -> list[dict]:
        return [
            {"k": k + 1, "beta": float(self.betas[k]), "alpha": float(self.alphas[k]),
             "alpha_bar": float(self.alpha_bars[k]), "sigma2": float(self.posterior_vars[k])}
            for k in range(self.K)
        ]


def build_quadratic_schedule(K: int = 50, beta_min: float = 1e-4, beta_max: float = 0.5,
                             fixed_variance: bool = False) -> NoiseSchedule:
    """Betas on a linear ramp in sqrt-space, squared.

    >>> build_quadratic_schedule(3, 0.01, 0.04).betas.round(6).tolist()
    [0.01, 0.0225, 0.04]
    """
    if int(K) != K or K < 2:
        raise ScheduleError(f"K must be an integer >= 2, got {K}")
    if not 0.0 < beta_min < beta_max < 1.0:
        raise ScheduleError(f"need 0 < beta_min < beta_max < 1, got {beta_min}, {beta_max}")
    ramp = np.arange(K, dtype=np.float64) / (K - 1)
    lo, hi = math.sqrt(beta_min), math.sqrt(beta_max)
    betas = (lo + ramp * (hi - lo)) ** 2
    # pin the endpoints so betas[0] == beta_min bit-exactly
    betas[0], betas[-1] = beta_min, beta_max
    return NoiseSchedule(betas, fixed_variance=fixed_variance)


def forward_sample(s: NoiseSchedule, y0, k: int, eps):
    """Draw ``y_k ~ q(y_k | y0)`` using the supplied standard-normal ``eps``."""
    ab = s.alpha_bar(s._check(k))
    if eps.shape != y0.shape:
        raise ScheduleError(f"eps shape {tuple(eps.shape)} != y0 shape {tuple(y0.shape)}")
    return math.sqrt(ab) * y0 + math.sqrt(1.0 - ab) * eps


def posterior_coefficients(s: NoiseSchedule, k: int) -> tuple[float, float]:
    """Weights ``(c_yk, c_y0)`` of the posterior mean on ``y_k`` and ``y0_hat``."""
    k = s._check(k)
    ab, ab_prev = s.alpha_bar(k), s.alpha_bar(k - 1)
    denom = math.sqrt(ab_prev) * (1.0 - ab)
    return math.sqrt(ab) * (1.0 - ab_prev) / denom, (ab_prev - ab) / denom


def posterior_mean(s: NoiseSchedule, y_k, y0_hat, k: int):
    c_yk, c_y0 = posterior_coefficients(s, k)
    return c_yk * y_k + c_y0 * y0_hat


def posterior_variance(s: NoiseSchedule, k: int) -> float:
    return float(s.posterior_vars[s._check(k) - 1])


def ddpm_step(s: NoiseSchedule, y_k, y0_hat, k: int, eps_draw):
    """Ancestral step ``k -> k-1``: posterior mean plus ``sigma_k * eps_draw``."""
    mean = posterior_mean(s, y_k, y0_hat, k)
    return mean + math.sqrt(posterior_variance(s, k)) * eps_draw


def ddim_sigma(s: NoiseSchedule, k: int, k_prev: int, eta: float) -> float:
    ab, ab_prev = s.alpha_bar(k), s.alpha_bar(k_prev)
    return eta * math.sqrt((1.0 - ab_prev) / (1.0 - ab) * (1.0 - ab / ab_prev))


def ddim_step(s: NoiseSchedule, y_k, y0_hat, k: int, k_prev: int, eta: float = 0.0,
              eps_draw=None):
    """Generalised DDIM update from step ``k`` to ``k_prev < k``.

    ``eps_draw`` may be omitted when the injected noise scale is zero
    (``eta == 0`` or ``k_prev == 0``).
    """
    k, k_prev = int(k), int(k_prev)
    if not 0 <= k_prev < k <= s.K:
        raise ScheduleError(f"need 0 <= k_prev < k <= {s.K}, got k={k}, k_prev={k_prev}")
    if not 0.0 <= eta <= 1.0:
        raise ScheduleError(f"eta must lie in [0, 1], got {eta}")
    ab, ab_prev = s.alpha_bar(k), s.alpha_bar(k_prev)
    if k_prev == 0:
        return y0_hat * 1.0
    eps_hat = (y_k - math.sqrt(ab) * y0_hat) / math.sqrt(1.0 - ab)
    sigma = ddim_sigma(s, k, k_prev, eta)
    out = math.sqrt(ab_prev) * y0_hat + math.sqrt(max(1.0 - ab_prev - sigma**2, 0.0)) * eps_hat
    if sigma > 0.0:
        if eps_draw is None:
            raise ScheduleError("eps_draw is required when eta > 0")
        out = out + sigma * eps_draw
    return out


def quadratic_subsequence(K: int, S: int) -> list[int]:
    """``S`` strictly increasing steps in ``[1, K]`` on a squared ramp, ending at ``K``.

    Raw positions are ``ceil(K * (i / S) ** 2)``; collisions near the start
    are resolved by pushing each index to at least one past its predecessor.
    """
    if not 1 <= S <= K:
        raise ScheduleError(f"need 1 <= S <= K, got S={S}, K={K}")
    out: list[int] = []
    for i in range(1, S + 1):
        # integer ceil avoids float round-off at exact squares
        raw = -(-K * i * i // (S * S))
        out.append(max(raw, out[-1] + 1 if out else 1))
    return out
