"""LMMSE solve and its warm-started first-order approximations.

Each outer iteration t asks for mu = W_t^{-1} z_t with W_t = rho_t I + AA^T.
The exact route factorizes W_t; the approximate route runs a few steps of

    mu^{i+1} = mu^i + a^i p^i,     p^{i+1} = (z - W mu^{i+1}) + b^i p^i

(fixed-step gradient descent or conjugate gradient) and warm starts the next
outer iteration from the last iterate and direction.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .operators import MeasurementModel

RULES = ("gd_fixed", "cg", "mamp_step")


class SolverBreakdown(ArithmeticError):
    """p^T W p <= 0: the system is numerically not SPD."""


def lmmse_exact(model: MeasurementModel, rho: float, z: np.ndarray) -> np.ndarray:
    """mu = (rho I + AA^T)^{-1} z."""
    return ExactLmmse(model).solve(rho, z)


class ExactLmmse:
    """Exact LMMSE solver that caches the Gram matrix across calls.

    Uses the stored diagonal spectrum when AA^T is diagonal (FIJL), and a
    Cholesky factorization of rho I + AA^T otherwise.
    """

    def __init__(self, model: MeasurementModel):
        self.model = model
        self._gram = None

    def solve(self, rho: float, z: np.ndarray) -> np.ndarray:
        if not rho > 0:
            raise ValueError(f"rho must be positive, got {rho}")
        z = np.asarray(z, dtype=float)
        if z.shape != (self.model.m,):
            raise ValueError(f"z has shape {z.shape}, expected ({self.model.m},)")
        if self.model.diagonal_gram:
            return z / (rho + self.model.spectrum)
        if self._gram is None:
            a = self.model.dense()
            self._gram = a @ a.T
        w = self._gram + rho * np.eye(self.model.m)
        return cho_solve(cho_factor(w), z)


@dataclass
class WsSolverState:
    """Mutable state of the warm-started inner solver.

    ``p`` is the direction the next step will use, ``residual`` is
    z_eff - W mu (recurrently updated) and ``gram_mu`` tracks AA^T mu so that a
    warm start can form the new residual without extra operator applications.
    Per-outer-iteration scalar histories feed the coefficient sequences.
    """

    mu: np.ndarray
    p: np.ndarray
    residual: np.ndarray
    gram_mu: np.ndarray
    z: np.ndarray
    rho: float
    rule: str
    lambda_dagger: float
    c_t: float = 1.0
    inner_count: int = 0
    b_last: float = 0.0
    a_history: List[List[float]] = field(default_factory=list)
    b_history: List[List[float]] = field(default_factory=list)
    rho_history: List[float] = field(default_factory=list)
    c_history: List[float] = field(default_factory=list)
    converged: bool = False
    applications: int = 0

    @property
    def z_eff(self) -> np.ndarray:
        return self.c_t * self.z

    @property
    def t(self) -> int:
        return len(self.rho_history) - 1

    def cost(self) -> float:
        """f(mu) = mu^T W mu / 2 - z_eff^T mu, using W mu = z_eff - residual."""
        return float(-0.5 * self.mu @ (self.z_eff + self.residual))


def _check_rule(rule):
    if rule not in RULES:
        raise ValueError(f"unknown rule {rule!r}")


def fresh_start(z: np.ndarray, rho: float, rule: str, lambda_dagger: float = 0.0, c_t: float = 1.0) -> WsSolverState:
    """mu^0 = 0, p^0 = z."""
    _check_rule(rule)
    z = np.array(z, dtype=float)
    ze = c_t * z
    return WsSolverState(
        mu=np.zeros_like(z), p=ze.copy(), residual=ze.copy(), gram_mu=np.zeros_like(z),
        z=z, rho=float(rho), rule=rule, lambda_dagger=float(lambda_dagger), c_t=float(c_t),
        a_history=[[]], b_history=[[]], rho_history=[float(rho)], c_history=[float(c_t)],
    )


def warm_start(prev: WsSolverState, z_new: np.ndarray, rho_new: float, c_t: Optional[float] = None) -> WsSolverState:
    """Carry mu over and rebuild the direction for the new cost.

    p_t^0 = (z_t - W_t mu_{t-1}) + b_{t-1} p_{t-1}, where the carried term
    b_{t-1} p_{t-1} equals the old direction minus the old residual. The new
    residual is exact for the new (z, rho) because AA^T mu is tracked.
    """
    c = prev.c_t if c_t is None else float(c_t)
    z_new = np.array(z_new, dtype=float)
    carried = prev.p - prev.residual
    residual = c * z_new - rho_new * prev.mu - prev.gram_mu
    return WsSolverState(
        mu=prev.mu.copy(), p=residual + carried, residual=residual, gram_mu=prev.gram_mu.copy(),
        z=z_new, rho=float(rho_new), rule=prev.rule, lambda_dagger=prev.lambda_dagger, c_t=c,
        inner_count=0, b_last=prev.b_last,
        a_history=[list(h) for h in prev.a_history] + [[]],
        b_history=[list(h) for h in prev.b_history] + [[]],
        rho_history=prev.rho_history + [float(rho_new)],
        c_history=prev.c_history + [c],
        applications=prev.applications,
    )


def gd_step_size(rho: float, lambda_dagger: float) -> float:
    """2 / (L_max(W) + L_min(W)) = 1 / (rho + lambda_dagger)."""
    return 1.0 / (rho + lambda_dagger)


def ws_inner_step(state: WsSolverState, model: MeasurementModel, rule: Optional[str] = None) -> WsSolverState:
    """One step of the inner scheme; exactly one W application (A^T then A).

    A zero residual is a convergence signal: the state is returned untouched
    with ``converged`` set.
    """
    rule = state.rule if rule is None else rule
    _check_rule(rule)
    r = state.residual
    rr = float(r @ r)
    if rr == 0.0:
        state.converged = True
        return state
    bp = model.gram(state.p)
    state.applications += 2
    wp = state.rho * state.p + bp
    if rule == "cg":
        pwp = float(state.p @ wp)
        if not pwp > 0:
            raise SolverBreakdown(f"p^T W p = {pwp!r} at inner step {state.inner_count}")
        a = rr / pwp
    else:
        a = gd_step_size(state.rho, state.lambda_dagger)
    state.mu = state.mu + a * state.p
    state.gram_mu = state.gram_mu + a * bp
    r_new = r - a * wp
    b = float(r_new @ r_new) / rr if rule == "cg" else 0.0
    state.p = r_new + b * state.p
    state.residual = r_new
    state.b_last = b
    state.a_history[-1].append(a)
    state.b_history[-1].append(b)
    state.inner_count += 1
    return state


def run_inner(state: WsSolverState, model: MeasurementModel, iters: int, tol: float = 1e-12) -> WsSolverState:
    """Up to ``iters`` steps; stops early once |residual| <= tol |z_eff|."""
    zn = np.linalg.norm(state.z_eff)
    for _ in range(iters):
        if np.linalg.norm(state.residual) <= tol * zn:
            state.converged = True
            break
        ws_inner_step(state, model)
        if state.converged:
            break
    return state


def mamp_step(state: WsSolverState, z: np.ndarray, rho: float, model: MeasurementModel, c_t: float = 1.0) -> WsSolverState:
    """mu_t = (I - a W_t) mu_{t-1} + c_t a z_t as a warm-started GD step.

    Written as one fixed-step descent step on f(mu) = mu^T W mu / 2 - c_t z^T mu
    from mu_{t-1}, so for c_t = 1 it is literally ``warm_start`` followed by a
    ``gd_fixed`` step.
    """
    new = warm_start(state, z, rho, c_t=c_t)
    new.rule = "mamp_step"
    return ws_inner_step(new, model)


def mamp_direct(mu_prev: np.ndarray, z: np.ndarray, rho: float, model: MeasurementModel,
                lambda_dagger: float, c_t: float = 1.0) -> np.ndarray:
    """The same update evaluated in its unrearranged form, for cross-checks."""
    a = gd_step_size(rho, lambda_dagger)
    w_mu = rho * mu_prev + model.gram(mu_prev)
    return mu_prev - a * w_mu + (c_t * a) * z
