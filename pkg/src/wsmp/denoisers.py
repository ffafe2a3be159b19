"""Separable denoisers for the intrinsic channel r = x + N(0, v_h).

``denoise`` returns the estimate together with its divergence
alpha = (1/N) div g(r); ``onsager_update_s`` turns them into the next
message s_{t+1} = (g(r) - alpha r) / (1 - alpha).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.special import expit

from . import streams


class DegenerateDivergence(ArithmeticError):
    """The Onsager division 1/(1 - alpha) is singular."""


@dataclass(frozen=True)
class PriorDescriptor:
    """Signal prior used both for problem generation and denoising.

    The generated signal is Bernoulli-Gaussian in both cases; ``soft_threshold``
    only swaps the denoiser, with threshold ``threshold * sqrt(v_h)``.
    ``signal_var`` defaults to ``1/sparsity`` (unit per-coordinate power).
    """

    kind: str = "bernoulli_gaussian"
    sparsity: float = 0.1
    signal_var: Optional[float] = None
    threshold: float = 1.5

    def __post_init__(self):
        if self.kind not in ("bernoulli_gaussian", "soft_threshold"):
            raise ValueError(f"unknown prior kind {self.kind!r}")
        if not (0 < self.sparsity <= 1):
            raise ValueError("sparsity must lie in (0, 1]")
        if self.signal_var is None:
            object.__setattr__(self, "signal_var", 1.0 / self.sparsity)
        if self.signal_var <= 0:
            raise ValueError("signal_var must be positive")

    @property
    def second_moment(self) -> float:
        return self.sparsity * self.signal_var

    def to_dict(self) -> dict:
        return {"kind": self.kind, "sparsity": self.sparsity, "signal_var": self.signal_var,
                "threshold": self.threshold}

    @classmethod
    def from_dict(cls, d: dict) -> "PriorDescriptor":
        return cls(**{k: d[k] for k in ("kind", "sparsity", "signal_var", "threshold") if k in d})


@dataclass(frozen=True)
class DenoiserOutput:
    x_hat: np.ndarray
    alpha: float
    alpha_method: str = "analytic"


def _bg_posterior(r, v_h, prior):
    eps, s2 = prior.sparsity, prior.signal_var
    gain = s2 / (s2 + v_h)
    if eps >= 1.0:
        return gain * r, np.full_like(r, gain)
    # log-odds of the active component given r
    logit = (math.log(eps / (1 - eps)) + 0.5 * math.log(v_h / (s2 + v_h))
             + 0.5 * r * r * gain / v_h)
    pi = expit(logit)
    x_hat = pi * gain * r
    deriv = pi * gain * (1.0 + (1.0 - pi) * gain * r * r / v_h)
    return x_hat, deriv


def _soft(r, v_h, prior):
    thr = prior.threshold * math.sqrt(v_h)
    x_hat = np.sign(r) * np.maximum(np.abs(r) - thr, 0.0)
    return x_hat, (np.abs(r) > thr).astype(float)


def denoise(r: np.ndarray, v_h: float, prior: PriorDescriptor) -> DenoiserOutput:
    """Coordinatewise denoiser and its analytic divergence.

    ``v_h == 0`` is a bypass: the channel is noiseless, g is the identity and
    alpha = 1.
    """
    r = np.asarray(r, dtype=float)
    if v_h == 0:
        return DenoiserOutput(r.copy(), 1.0)
    if not v_h > 0:
        raise ValueError(f"v_h must be positive, got {v_h}")
    if prior.kind == "bernoulli_gaussian":
        x_hat, deriv = _bg_posterior(r, v_h, prior)
    else:
        x_hat, deriv = _soft(r, v_h, prior)
    return DenoiserOutput(x_hat, float(np.mean(deriv)))


def make_denoiser(v_h: float, prior: PriorDescriptor) -> Callable[[np.ndarray], np.ndarray]:
    """Closure r -> g(r) at a fixed noise level, for black-box divergence."""
    return lambda r: denoise(r, v_h, prior).x_hat


def divergence_bb_mc(
    g: Callable[[np.ndarray], np.ndarray],
    r: np.ndarray,
    probes: int = 1,
    epsilon: float = 1e-4,
    seed: int = 0,
    g_r: Optional[np.ndarray] = None,
) -> float:
    """Black-box Monte Carlo divergence with Rademacher probes.

    alpha = mean_k u_k^T [g(r + eps u_k) - g(r)] / (N eps). Pass ``g_r`` to
    reuse an already computed g(r).
    """
    if probes < 1 or not epsilon > 0:
        raise ValueError("need probes >= 1 and epsilon > 0")
    rng = streams.generator(seed, streams.DIVERGENCE)
    n = r.shape[0]
    base = g(r) if g_r is None else g_r
    total = 0.0
    for _ in range(probes):
        u = streams.rademacher(rng, n)
        total += u @ (g(r + epsilon * u) - base) / (n * epsilon)
    return total / probes


def bb_mc_epsilon(v_h: float) -> float:
    """Perturbation size for BB-MC scaled to the channel noise level."""
    return 1e-4 * math.sqrt(v_h) if v_h > 0 else 1e-4


def onsager_update_s(r: np.ndarray, x_hat: np.ndarray, alpha: float) -> np.ndarray:
    if abs(1.0 - alpha) <= 1e-9:
        raise DegenerateDivergence(f"alpha={alpha!r} too close to 1")
    return (x_hat - alpha * r) / (1.0 - alpha)
