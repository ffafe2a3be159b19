"""Long-memory Onsager correction for warm-started LMMSE approximations.

The warm-started solver output is a matrix polynomial in B = AA^T applied to
the history of residual vectors,

    mu_t = sum_tau sum_k r_tau[k] B^k z_tau,

with coefficients that depend only on the step scalars (a, b) and on rho.
From those coefficients and the normalized moments chi_j of B follow the
correction scalars gamma_tau = sum_k r_tau[k] chi_{k+1} and the state
evolution of the channel variance. ``MemoryLedger`` implements the moment-free
alternative that recovers gamma from the Gram matrix of the z's.

Coefficients may be expressed in the scaled variable B / scale (``scale``
defaults to 1). Moments passed alongside must use the same scale:
chi_j / scale^j.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from numpy.polynomial import polynomial as P

from .operators import MeasurementModel, SpectralInfo


class DegenerateCorrection(ArithmeticError):
    """sum_tau gamma_tau vanished; r_t cannot be normalized."""


C_MIN = 1e-8
VAR_FLOOR = 1e-12
RIDGE = 1e-10


# --------------------------------------------------------------------------
# coefficient sequences


def _sweep(f0, g0, a_list, b_list, rho, scale, z_gain=None):
    """Run the base recursion from (f0, g0) through the given steps.

    f^{d+1} = f^d + a_d g^d
    g^{d+1} = -rho f^{d+1} - B f^{d+1} + b_d g^d  (+ z_gain at degree 0)
    Returns the lists of f and g coefficient arrays for d = 0..len(a_list).
    """
    fs, gs = [np.asarray(f0, float)], [np.asarray(g0, float)]
    f, g = fs[0], gs[0]
    for a, b in zip(a_list, b_list):
        f = P.polyadd(f, a * g)
        g = P.polyadd(P.polyadd(-rho * f, -scale * P.polymulx(f)), b * g)
        if z_gain is not None:
            g = P.polyadd(g, [z_gain])
        fs.append(f)
        gs.append(g)
    return fs, gs


@dataclass
class SequenceTable:
    """Coefficient sequences of the warm-started solver through outer step t.

    ``r[tau]`` holds r_tau^{t,i}[k] (coefficients of mu_t^i in z_tau);
    ``u[tau]`` holds the coefficients of the direction used by the last inner
    step, p_t^{i-1}, which the next warm start carries with weight ``beta``
    (the last b). ``r_history[t][tau]`` keeps the r's of every outer step.
    ``supp`` holds the supplementary pairs (fz, gz, fmu, gmu, fp, gp) of the
    latest outer step, each a list over inner count d.
    """

    scale: float = 1.0
    t: int = -1
    r: List[np.ndarray] = field(default_factory=list)
    u: List[np.ndarray] = field(default_factory=list)
    beta: float = 0.0
    inner_counts: List[int] = field(default_factory=list)
    r_history: List[List[np.ndarray]] = field(default_factory=list)
    supp: Dict[str, List[np.ndarray]] = field(default_factory=dict)

    def extend(self, a_list: Sequence[float], b_list: Sequence[float], rho: float, c_t: float = 1.0) -> "SequenceTable":
        """Append outer iteration t+1 given its step scalars."""
        a_list, b_list = list(a_list), list(b_list)
        if len(a_list) != len(b_list):
            raise ValueError("a and b histories differ in length")
        s = self.scale
        fz, gz = _sweep([0.0], [c_t], a_list, b_list, rho, s, z_gain=c_t)
        fmu, gmu = _sweep([1.0], [-rho, -s], a_list, b_list, rho, s)
        fp, gp = _sweep([0.0], [self.beta], a_list, b_list, rho, s)
        n = len(a_list)
        if n == 0:
            # no step taken: mu and the carried direction pass through
            r = [x.copy() for x in self.r] + [np.zeros(1)]
            u = [x.copy() for x in self.u] + [np.zeros(1)]
        else:
            r = [P.polyadd(P.polymul(fmu[n], rt), P.polymul(fp[n], ut)) for rt, ut in zip(self.r, self.u)]
            u = [P.polyadd(P.polymul(gmu[n - 1], rt), P.polymul(gp[n - 1], ut)) for rt, ut in zip(self.r, self.u)]
            r.append(fz[n].copy())
            u.append(gz[n - 1].copy())
            self.beta = float(b_list[-1])
        self.t += 1
        self.r, self.u = r, u
        self.inner_counts.append(n)
        self.r_history.append(r)
        self.supp = {"fz": fz, "gz": gz, "fmu": fmu, "gmu": gmu, "fp": fp, "gp": gp}
        return self

    def degree_bound(self, tau: int) -> int:
        """Largest possible degree of r_tau: (number of steps from tau to t) - 1."""
        return sum(self.inner_counts[tau:]) - 1


def build_sequences(a_hist, b_hist, rho_hist, t: Optional[int] = None, c_hist=None, scale: float = 1.0) -> SequenceTable:
    """Coefficient table through outer iteration t from per-t scalar histories.

    ``a_hist[t]`` and ``b_hist[t]`` list the step scalars of outer iteration t
    (b is 0 for fixed-step descent); ``rho_hist[t]`` is rho_t.
    """
    t = len(rho_hist) - 1 if t is None else t
    if len(a_hist) <= t or len(b_hist) <= t or len(rho_hist) <= t:
        raise ValueError(f"scalar histories do not reach t={t}")
    table = SequenceTable(scale=scale)
    for k in range(t + 1):
        c = 1.0 if c_hist is None else c_hist[k]
        table.extend(a_hist[k], b_hist[k], rho_hist[k], c)
    return table


def expand_mu(table: SequenceTable, z_hist: Sequence[np.ndarray], model: MeasurementModel) -> np.ndarray:
    """sum_tau sum_k r_tau[k] (B/scale)^k z_tau by Horner's rule."""
    out = np.zeros(model.m)
    for coef, z in zip(table.r, z_hist):
        acc = coef[-1] * z
        for c in coef[-2::-1]:
            acc = model.gram(acc) / table.scale + c * z
        out += acc
    return out


def verify_expansion(table: SequenceTable, z_hist: Sequence[np.ndarray], model: MeasurementModel, mu: np.ndarray) -> float:
    """Relative distance between the polynomial expansion and the solver's mu."""
    if len(z_hist) != table.t + 1:
        raise ValueError("z history does not match the table")
    mu_tilde = expand_mu(table, z_hist, model)
    nrm = np.linalg.norm(mu)
    if nrm == 0:
        return float(np.linalg.norm(mu_tilde))
    return float(np.linalg.norm(mu_tilde - mu) / nrm)


def _moments(chi) -> np.ndarray:
    return np.asarray(getattr(chi, "chi", chi), float)


def gamma_closed_form(table: SequenceTable, chi) -> np.ndarray:
    """gamma_tau = scale * sum_k r_tau[k] chi_{k+1} for every tau <= t."""
    chi = _moments(chi)
    out = np.empty(len(table.r))
    for tau, coef in enumerate(table.r):
        need = len(coef)
        if need >= len(chi):
            raise ValueError(f"moments up to order {need} required, have {len(chi) - 1}")
        out[tau] = table.scale * (coef @ chi[1:need + 1])
    return out


def omega(table: SequenceTable, chi, psi: np.ndarray, v_w: float) -> float:
    """Limit of ||A^T mu_t||^2 / N from the coefficients and moments."""
    chi = _moments(chi)
    s = table.scale
    total = 0.0
    for a, ra in enumerate(table.r):
        for b, rb in enumerate(table.r):
            conv = np.convolve(ra, rb)
            need = len(conv) + 1
            if need >= len(chi):
                raise ValueError(f"moments up to order {need} required, have {len(chi) - 1}")
            total += s * (s * psi[a, b] * (conv @ chi[2:need + 1]) + v_w * (conv @ chi[1:need]))
    return float(total)


def se_variance(table: SequenceTable, chi, psi: np.ndarray, v_w: float, gamma: np.ndarray) -> float:
    """Predicted channel variance (Omega - gamma^T Psi gamma) / C^2."""
    gamma = np.asarray(gamma, float)
    c = gamma.sum()
    if not abs(c) >= C_MIN:
        raise DegenerateCorrection(f"sum of gamma = {c!r}")
    return (omega(table, chi, psi, v_w) - gamma @ psi @ gamma) / c**2


# --------------------------------------------------------------------------
# estimators that avoid the moments


def psi_estimate(z_a: np.ndarray, z_b: np.ndarray, v_w: float, delta: float, n: Optional[int] = None) -> float:
    """(1/N) z_a^T z_b - delta v_w, an estimate of (1/N) q_a^T q_b."""
    n = round(len(z_a) / delta) if n is None else n
    return float(z_a @ z_b) / n - delta * v_w


def psi_matrix(z_cols: np.ndarray, v_w: float, delta: float, n: int) -> np.ndarray:
    """Gram estimate for the columns of ``z_cols`` (m x k)."""
    return z_cols.T @ z_cols / n - delta * v_w


def vh_robust(r: np.ndarray, s: np.ndarray, v_q_hat: float, events: Optional[Counter] = None) -> float:
    """(1/N)||r - s||^2 - v_q, floored at 1e-12 (the flooring is counted)."""
    d = r - s
    v = float(d @ d) / len(r) - v_q_hat
    if v < VAR_FLOOR:
        if events is not None:
            events["vh_floor"] += 1
        v = VAR_FLOOR
    return v


def ridge_solve(psi: np.ndarray, rhs: np.ndarray, ridge: float = RIDGE) -> np.ndarray:
    k = psi.shape[0]
    reg = psi + ridge * max(np.trace(psi) / k, np.finfo(float).tiny) * np.eye(k)
    try:
        sol = np.linalg.solve(reg, rhs)
    except np.linalg.LinAlgError as exc:
        raise DegenerateCorrection("Psi singular after ridge") from exc
    if not np.all(np.isfinite(sol)):
        raise DegenerateCorrection("non-finite solution of the Psi system")
    return sol


@dataclass
class MemoryLedger:
    """History and recursion state for the moment-free gamma estimator.

    nu tracks (1/N) w^T mu and eta tracks (1/N) w^T p for the direction the
    next inner step will use; ``eta_carried`` is the part of eta that the
    next warm start inherits (b times the eta of the previous direction).
    """

    n: int
    delta: float
    v_w_hat: float
    s_hist: List[np.ndarray] = field(default_factory=list)
    z_hist: List[np.ndarray] = field(default_factory=list)
    psi: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    nu: float = 0.0
    eta: float = 0.0
    eta_carried: float = 0.0
    sigma: np.ndarray = field(default_factory=lambda: np.zeros(0))
    gamma: np.ndarray = field(default_factory=lambda: np.zeros(0))
    v_q_hat: float = 1.0
    c_t: float = 1.0
    ridge: float = RIDGE

    @property
    def t(self) -> int:
        return len(self.z_hist) - 1

    @property
    def C_t(self) -> float:
        return float(np.sum(self.gamma))

    def append(self, s: np.ndarray, z: np.ndarray, psi_row: Optional[np.ndarray] = None) -> None:
        """Record s_t and z_t and grow Psi (estimated from z unless given)."""
        self.s_hist.append(s)
        self.z_hist.append(z)
        k = len(self.z_hist)
        if psi_row is None:
            psi_row = np.array([psi_estimate(z, zt, self.v_w_hat, self.delta, self.n) for zt in self.z_hist])
        grown = np.zeros((k, k))
        grown[:k - 1, :k - 1] = self.psi
        grown[k - 1, :] = psi_row
        grown[:, k - 1] = psi_row
        self.psi = grown

    def z_matrix(self) -> np.ndarray:
        return np.column_stack(self.z_hist)

    def _residual_part(self, sigma_sum: float) -> float:
        return self.v_w_hat * (self.c_t * self.delta - self.nu / self.v_q_hat - sigma_sum)

    def begin_outer(self, v_q_hat: float, c_t: float = 1.0, fresh: bool = False) -> None:
        """Initialize nu and eta at the start of outer iteration t.

        t = 0 (or a fresh solver start): nu = 0, eta = c delta v_w. Otherwise nu
        carries over and eta = v_w (c delta - nu / v_q - sum sigma_{t-1}) plus
        the carried b eta of the previous direction.
        """
        self.v_q_hat = v_q_hat
        self.c_t = c_t
        if fresh or self.t == 0:
            self.nu = 0.0
            self.eta = self.v_w_hat * c_t * self.delta
            self.eta_carried = 0.0
            self.sigma = np.zeros(len(self.z_hist))
            return
        prev_sum = float(np.sum(self.sigma))
        self.eta = self._residual_part(prev_sum) + self.eta_carried
        self.sigma = np.append(self.sigma, 0.0)

    def step(self, mu: np.ndarray, a: float, b: float) -> np.ndarray:
        """One inner-step update of (nu, sigma, eta) after mu^{i+1} was formed."""
        self.nu = self.nu + a * self.eta
        rhs = self.z_matrix().T @ mu / self.n - self.nu
        self.sigma = ridge_solve(self.psi, rhs, self.ridge)
        carried = b * self.eta
        self.eta = self._residual_part(float(np.sum(self.sigma))) + carried
        self.eta_carried = carried
        if not (np.isfinite(self.nu) and np.isfinite(self.eta)):
            raise DegenerateCorrection("non-finite recursion scalars")
        self.gamma = self.sigma
        return self.sigma


def gamma_recursive(ledger: MemoryLedger, mu: np.ndarray, a_i: float, b_i: float, v_w: float,
                    v_q: float, delta: float, is_outer_boundary: bool = False):
    """Functional form of one recursion update: returns (sigma, ledger).

    With ``is_outer_boundary`` the outer-iteration initialization is applied
    first. ``ledger`` is updated in place.
    """
    ledger.v_w_hat = v_w
    ledger.delta = delta
    if is_outer_boundary:
        ledger.begin_outer(v_q, ledger.c_t)
    else:
        ledger.v_q_hat = v_q
    sigma = ledger.step(mu, a_i, b_i)
    return sigma, ledger


def form_r(s_hist: Sequence[np.ndarray], gamma: np.ndarray, at_mu: np.ndarray) -> np.ndarray:
    """r_t = (sum gamma_tau s_tau + A^T mu) / sum gamma_tau."""
    c = float(np.sum(gamma))
    if not abs(c) >= C_MIN:
        raise DegenerateCorrection(f"sum of gamma = {c!r}")
    acc = at_mu.copy()
    for g, s in zip(gamma, s_hist):
        acc += g * s
    return acc / c
