"""Outer message-passing loop.

Each outer iteration forms z_t = y - A s_t, approximates the LMMSE solve,
corrects with gamma, denoises and applies the Onsager update

    r_t     = (sum_tau gamma_tau s_tau + A^T mu_t) / sum_tau gamma_tau
    s_{t+1} = (g(r_t) - alpha_t r_t) / (1 - alpha_t)

followed by optional damping over the last l messages.
"""

from __future__ import annotations

import math
import time
from collections import Counter
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, List, Optional

import numpy as np

from . import denoisers, lmmse, onsager, operators, streams
from .operators import Problem, SpectralInfo

VARIANTS = (
    "vamp_exact", "cg_vamp", "ws_cg_vamp_a", "ws_cg_vamp_b", "ws_gd_vamp_a", "ws_gd_vamp_b", "mamp_style",
)

_RULE = {
    "cg_vamp": "cg", "ws_cg_vamp_a": "cg", "ws_cg_vamp_b": "cg",
    "ws_gd_vamp_a": "gd_fixed", "ws_gd_vamp_b": "gd_fixed", "mamp_style": "mamp_step",
}
# (gamma estimator, v_h estimator)
_ESTIMATORS = {
    "vamp_exact": ("exact", "se"),
    "cg_vamp": ("recursive", "robust"),
    "ws_cg_vamp_a": ("closed_form", "se"),
    "ws_gd_vamp_a": ("closed_form", "se"),
    "ws_cg_vamp_b": ("recursive", "robust"),
    "ws_gd_vamp_b": ("recursive", "robust"),
    "mamp_style": ("closed_form", "robust"),
}

TRACE_COLUMNS = (
    "t", "nmse", "v_h_hat", "v_h_oracle", "v_q_hat", "alpha", "c_t_sum", "inner_resid", "wall_ms", "status",
    "op_apps", "s_change",
)
DIAG_COLUMNS = ("gamma", "nu", "eta", "psi_cond")


class ConfigError(ValueError):
    pass


@dataclass
class AlgorithmConfig:
    """One algorithm instance.

    ``chi_source`` chooses oracle (stored spectrum) or Monte Carlo moments;
    ``psi_source`` oracle error Gram (test mode) or the z-based estimate;
    ``v_w`` overrides the noise variance handed to the algorithm (None:
    use the true one).
    """

    variant: str = "ws_cg_vamp_b"
    inner_iters: int = 10
    max_outer: int = 40
    damping_len: int = 1
    fixed_point_tol: float = 1e-4
    stop_at_fixed_point: bool = False
    chi_source: str = "oracle"
    psi_source: str = "estimated"
    v_w: Optional[float] = None
    mc_trials: int = 1000
    alpha_method: str = "analytic"
    bbmc_probes: int = 1
    c_t: float = 1.0
    memory_cap: int = 60
    gamma_estimator: Optional[str] = None
    vh_estimator: Optional[str] = None
    inner_tol: float = 1e-12
    freeze_s: bool = False
    freeze_rho: Optional[float] = None
    vq_estimator: Optional[str] = None
    psi_ridge: float = onsager.RIDGE
    divergence_factor: float = 10.0
    name: Optional[str] = None

    def __post_init__(self):
        for name in ("inner_iters", "max_outer", "damping_len", "mc_trials", "bbmc_probes", "memory_cap"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, int):
                raise ConfigError(f"{name}: expected an integer")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant: unknown {self.variant!r}")
        if self.inner_iters < 1:
            raise ConfigError("inner_iters: must be >= 1")
        if self.variant == "mamp_style" and self.inner_iters != 1:
            raise ConfigError("inner_iters: mamp_style takes exactly one inner step")
        if self.damping_len < 1:
            raise ConfigError("damping_len: must be >= 1")
        if self.max_outer < 1:
            raise ConfigError("max_outer: must be >= 1")
        if self.max_outer > self.memory_cap:
            raise ConfigError(f"max_outer: exceeds memory_cap={self.memory_cap}")
        if self.chi_source not in ("oracle", "mc"):
            raise ConfigError("chi_source: oracle or mc")
        if self.psi_source not in ("oracle", "estimated"):
            raise ConfigError("psi_source: oracle or estimated")
        if self.alpha_method not in ("analytic", "bb_mc"):
            raise ConfigError("alpha_method: analytic or bb_mc")
        g_default, v_default = _ESTIMATORS[self.variant]
        if self.gamma_estimator is None:
            self.gamma_estimator = g_default
        if self.vh_estimator is None:
            self.vh_estimator = v_default
        if self.variant == "vamp_exact":
            if self.gamma_estimator != "exact":
                raise ConfigError("gamma_estimator: vamp_exact uses the exact correction")
        elif self.gamma_estimator not in ("closed_form", "recursive"):
            raise ConfigError("gamma_estimator: closed_form or recursive")
        if self.vh_estimator not in ("se", "robust"):
            raise ConfigError("vh_estimator: se or robust")
        if self.vh_estimator == "se" and self.gamma_estimator == "recursive":
            raise ConfigError("vh_estimator: 'se' needs the closed-form gamma")
        if self.vq_estimator is None:
            self.vq_estimator = "extrinsic" if self.variant == "vamp_exact" else "psi"
        if self.vq_estimator not in ("psi", "extrinsic"):
            raise ConfigError("vq_estimator: psi or extrinsic")
        if self.name is None:
            self.name = f"{self.variant}(i={self.inner_iters},l={self.damping_len})"

    @property
    def rule(self) -> Optional[str]:
        return _RULE.get(self.variant)

    @property
    def warm(self) -> bool:
        return self.variant not in ("vamp_exact", "cg_vamp")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AlgorithmConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"{sorted(extra)[0]}: unknown field")
        return cls(**d)


@dataclass
class IterationTrace:
    """Per-outer-iteration records of one run."""

    rows: List[dict] = field(default_factory=list)
    s_hist: List[np.ndarray] = field(default_factory=list)
    r_hist: List[np.ndarray] = field(default_factory=list)
    status: str = "running"

    def column(self, name: str) -> np.ndarray:
        return np.array([row[name] for row in self.rows], dtype=float)

    def __len__(self):
        return len(self.rows)


@dataclass
class RunState:
    """All mutable state owned by one run."""

    t: int
    s: np.ndarray
    z: np.ndarray
    solver: Optional[lmmse.WsSolverState]
    ledger: onsager.MemoryLedger
    table: onsager.SequenceTable
    spectral: Optional[object]
    lambda_dagger: float
    exact: Optional[lmmse.ExactLmmse]
    trace: IterationTrace
    events: Counter
    pending_apps: int = 0
    nmse0: Optional[float] = None
    keep_vectors: bool = False
    seed: int = 0
    last: dict = field(default_factory=dict)
    vq_next: Optional[float] = None


def damp(s_candidates: List[np.ndarray], psi_block: np.ndarray, events: Optional[Counter] = None):
    """Minimum-variance affine combination of the candidates.

    Weights w = Psi^{-1} 1 / (1^T Psi^{-1} 1); a singular block falls back to
    the newest candidate (no damping). Returns (s_damped, weights), the
    newest candidate first.
    """
    k = len(s_candidates)
    if k == 1:
        return s_candidates[0], np.ones(1)
    try:
        w = onsager.ridge_solve(np.asarray(psi_block, float), np.ones(k))
        total = w.sum()
        if not (np.isfinite(total) and abs(total) > 0):
            raise onsager.DegenerateCorrection("degenerate damping weights")
        w = w / total
    except onsager.DegenerateCorrection:
        if events is not None:
            events["damping_fallback"] += 1
        w = np.zeros(k)
        w[0] = 1.0
    out = np.zeros_like(s_candidates[0])
    for wk, sk in zip(w, s_candidates):
        out += wk * sk
    return out, w


def detect_fixed_point(trace, tol: float, window: int = 3) -> bool:
    """True when both s and NMSE changed by less than tol for ``window`` iterations."""
    rows = trace.rows if isinstance(trace, IterationTrace) else trace
    if len(rows) < window + 1:
        return False
    for prev, cur in zip(rows[-window - 1:-1], rows[-window:]):
        nmse_change = abs(cur["nmse"] - prev["nmse"]) / max(abs(prev["nmse"]), 1e-300)
        s_change = cur.get("s_change", math.nan)
        if not (s_change < tol and nmse_change < tol):
            return False
    return True


def _v_w(problem: Problem, config: AlgorithmConfig) -> float:
    return problem.model.noise_var if config.v_w is None else config.v_w


def _required_moment_order(config: AlgorithmConfig) -> int:
    return 2 * (config.max_outer + 1) * config.inner_iters + 2


def init_run(problem: Problem, config: AlgorithmConfig, seed: int = 0, keep_vectors: bool = False) -> RunState:
    model = problem.model
    n, m = model.n, model.m
    eig = operators.extreme_eigs(model, 200, seed)
    spectral = None
    scale = 1.0
    if config.gamma_estimator == "closed_form":
        scale = eig.lambda_dagger
        j_max = _required_moment_order(config)
        if config.chi_source == "oracle":
            spectral = operators.spectral_info_exact(model, j_max, scale)
        else:
            # extended lazily to the order each outer iteration needs
            spectral = operators.MonteCarloMoments(model, config.mc_trials, seed, scale=scale)
    ledger = onsager.MemoryLedger(n=n, delta=model.delta, v_w_hat=_v_w(problem, config), ridge=config.psi_ridge)
    s0 = np.zeros(n)
    z0 = problem.y - model.apply(s0)
    return RunState(
        t=0, s=s0, z=z0, solver=None, ledger=ledger, table=onsager.SequenceTable(scale=scale),
        spectral=spectral, lambda_dagger=eig.lambda_dagger,
        exact=lmmse.ExactLmmse(model) if config.variant == "vamp_exact" else None,
        trace=IterationTrace(), events=Counter(), pending_apps=1, keep_vectors=keep_vectors, seed=seed,
    )


def _oracle_psi_row(state: RunState, problem: Problem) -> np.ndarray:
    n = problem.model.n
    q = state.s - problem.x_true
    return np.array([(s - problem.x_true) @ q / n for s in state.ledger.s_hist + [state.s]])


def _exact_gamma_and_vh(problem, rho, v_q, v_w):
    lam = problem.model.spectrum
    n = problem.model.n
    gamma = float(np.sum(lam / (rho + lam))) / n
    om = float(np.sum(lam * (v_q * lam + v_w) / (rho + lam) ** 2)) / n
    return gamma, (om - gamma**2 * v_q) / gamma**2


def outer_iteration(state: RunState, problem: Problem, config: AlgorithmConfig) -> RunState:
    """One outer iteration; appends a trace row and advances s."""
    tic = time.perf_counter()
    model = problem.model
    n = model.n
    t = state.t
    v_w = _v_w(problem, config)
    apps = state.pending_apps
    ledger = state.ledger
    row = {"t": t}

    # history and error-Gram bookkeeping
    if config.warm or config.variant == "vamp_exact":
        ledger.append(state.s, state.z, _oracle_psi_row(state, problem) if config.psi_source == "oracle" else None)
    else:
        ledger.s_hist, ledger.z_hist, ledger.psi = [], [], np.zeros((0, 0))
        ledger.append(state.s, state.z, _oracle_psi_row(state, problem) if config.psi_source == "oracle" else None)
    if t == 0 and config.psi_source != "oracle":
        v_q = problem.prior.second_moment
    elif config.vq_estimator == "extrinsic" and state.vq_next is not None:
        v_q = state.vq_next
    else:
        v_q = max(float(ledger.psi[-1, -1]), onsager.VAR_FLOOR)
    rho = config.freeze_rho if config.freeze_rho is not None else v_w / v_q
    if not rho > 0:
        raise onsager.DegenerateCorrection(f"rho = {rho!r}; the noise variance must be positive")

    # linear step
    inner_resid = 0.0
    if config.variant == "vamp_exact":
        mu = state.exact.solve(rho, state.z)
        gamma_now, v_h_se = _exact_gamma_and_vh(problem, rho, v_q, v_w)
        gamma = np.zeros(t + 1)
        gamma[-1] = gamma_now
    else:
        c_t = config.c_t if config.variant == "mamp_style" else 1.0
        fresh = state.solver is None or not config.warm
        if fresh:
            solver = lmmse.fresh_start(state.z, rho, config.rule, state.lambda_dagger, c_t)
        else:
            solver = lmmse.warm_start(state.solver, state.z, rho, c_t=c_t)
        apps_before = solver.applications
        recursive = config.gamma_estimator == "recursive"
        if recursive:
            # the recursion needs the variance implied by the rho the solver uses
            ledger.begin_outer(v_w / rho, c_t, fresh=fresh)
        zn = np.linalg.norm(solver.z_eff)
        for _ in range(config.inner_iters):
            if np.linalg.norm(solver.residual) <= config.inner_tol * zn:
                solver.converged = True
                break
            lmmse.ws_inner_step(solver, model)
            if recursive:
                ledger.step(solver.mu, solver.a_history[-1][-1], solver.b_history[-1][-1])
        apps += solver.applications - apps_before
        mu = solver.mu
        inner_resid = float(np.linalg.norm(solver.residual) / max(zn, 1e-300))
        state.solver = solver
        if fresh:
            state.table = onsager.SequenceTable(scale=state.table.scale)
        state.table.extend(solver.a_history[-1], solver.b_history[-1], rho, c_t)
        if recursive:
            gamma = ledger.sigma.copy()
        else:
            if isinstance(state.spectral, operators.MonteCarloMoments):
                state.spectral.ensure(2 * sum(state.table.inner_counts) + 2)
            gamma = onsager.gamma_closed_form(state.table, state.spectral)
    ledger.gamma = gamma

    at_mu = model.apply_t(mu)
    apps += 1
    r = onsager.form_r(ledger.s_hist, gamma, at_mu)

    if config.variant == "vamp_exact":
        v_h = v_h_se if config.vh_estimator == "se" else onsager.vh_robust(r, state.s, v_q, state.events)
    elif config.vh_estimator == "se":
        v_h = onsager.se_variance(state.table, state.spectral, ledger.psi, v_w, gamma)
    else:
        v_h = onsager.vh_robust(r, state.s, v_q, state.events)
    if not v_h > onsager.VAR_FLOOR:
        state.events["vh_floor"] += int(v_h < onsager.VAR_FLOOR)
        v_h = max(v_h, onsager.VAR_FLOOR) if math.isfinite(v_h) else v_h

    # denoising and Onsager update
    x = problem.x_true
    h = r - x
    den = denoisers.denoise(r, v_h, problem.prior)
    alpha = den.alpha
    if config.alpha_method == "bb_mc":
        g = denoisers.make_denoiser(v_h, problem.prior)
        alpha = denoisers.divergence_bb_mc(g, r, config.bbmc_probes, denoisers.bb_mc_epsilon(v_h),
                                           streams.derive_seed(state.seed, t), g_r=den.x_hat)
    if not math.isfinite(alpha):
        raise denoisers.DegenerateDivergence("non-finite divergence")
    if not (1e-6 <= alpha <= 1 - 1e-6):
        state.events["alpha_clamp"] += 1
        alpha = min(max(alpha, 1e-6), 1 - 1e-6)
    nmse = float(np.sum((den.x_hat - x) ** 2) / np.sum(x**2))
    # extrinsic error variance of the (undamped) Onsager output
    state.vq_next = max(v_h * alpha / (1.0 - alpha), onsager.VAR_FLOOR)

    if config.freeze_s:
        s_next, z_next = state.s, state.z
    else:
        s_cand = denoisers.onsager_update_s(r, den.x_hat, alpha)
        z_cand = problem.y - model.apply(s_cand)
        next_apps = 1
        l = config.damping_len
        if l > 1:
            k = min(l, len(ledger.s_hist) + 1)
            cands = [s_cand] + ledger.s_hist[::-1][: k - 1]
            zc = np.column_stack([z_cand] + ledger.z_hist[::-1][: k - 1])
            if config.psi_source == "oracle":
                qs = np.column_stack([c - x for c in cands])
                block = qs.T @ qs / n
            else:
                block = onsager.psi_matrix(zc, ledger.v_w_hat, model.delta, n)
            s_next, w = damp(cands, block, state.events)
            z_next = zc @ w
        else:
            s_next, z_next = s_cand, z_cand
        state.pending_apps = next_apps

    s_change = float(np.linalg.norm(s_next - state.s) / max(np.linalg.norm(state.s), 1e-300)) if t > 0 else math.inf
    row.update(
        nmse=nmse, v_h_hat=float(v_h), v_h_oracle=float(h @ h) / n,
        v_q_hat=float(v_q), alpha=float(alpha), c_t_sum=float(np.sum(gamma)),
        inner_resid=inner_resid, wall_ms=1e3 * (time.perf_counter() - tic), status="ok",
        op_apps=apps, s_change=s_change,
        gamma=";".join(f"{g:.6g}" for g in gamma), nu=float(ledger.nu), eta=float(ledger.eta),
        psi_cond=float(np.linalg.cond(ledger.psi)) if ledger.psi.size else math.nan,
    )
    state.last = {"r": r, "x_hat": den.x_hat, "mu": mu, "gamma": gamma, "v_h": v_h, "alpha": alpha,
                  "s_cand": None if config.freeze_s else s_cand, "rho": rho, "v_q": v_q}
    if state.keep_vectors:
        state.trace.s_hist.append(state.s)
        state.trace.r_hist.append(r)
    if state.nmse0 is None:
        state.nmse0 = nmse
    diverged = not (np.all(np.isfinite(s_next)) and math.isfinite(nmse)) or nmse > config.divergence_factor * state.nmse0
    if diverged:
        row["status"] = "diverged"
    state.trace.rows.append(row)
    state.s, state.z = s_next, z_next
    state.t += 1
    if diverged:
        state.trace.status = "diverged"
    return state


def run(problem: Problem, config: AlgorithmConfig, seed: int = 0, keep_vectors: bool = False,
        on_iteration: Optional[Callable[[RunState], None]] = None) -> IterationTrace:
    """Run to max_outer, divergence, or (optionally) a detected fixed point.

    Numerical breakdowns (degenerate gamma, collapsed divergence, non-finite
    iterates) end the run with status ``diverged``; the trace is kept.
    """
    state = init_run(problem, config, seed, keep_vectors)
    state.trace.status = "running"
    for _ in range(config.max_outer):
        try:
            with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
                outer_iteration(state, problem, config)
        except (onsager.DegenerateCorrection, denoisers.DegenerateDivergence, lmmse.SolverBreakdown,
                ValueError, FloatingPointError) as exc:
            state.events["breakdown"] += 1
            state.trace.rows.append(_failure_row(state.t, str(exc)))
            state.trace.status = "diverged"
        if on_iteration is not None:
            on_iteration(state)
        if state.trace.status == "diverged":
            break
        if config.stop_at_fixed_point and detect_fixed_point(state.trace, config.fixed_point_tol):
            state.trace.status = "fixed_point"
            break
    if state.trace.status == "running":
        state.trace.status = "completed"
    state.trace.events = dict(state.events)
    return state.trace


def _failure_row(t: int, reason: str) -> dict:
    row = {c: math.nan for c in TRACE_COLUMNS}
    row.update(t=t, status="diverged", op_apps=0, gamma="", nu=math.nan, eta=math.nan, psi_cond=math.nan,
               reason=reason)
    return row
