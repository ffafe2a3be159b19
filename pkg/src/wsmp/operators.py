"""Measurement operators for y = A x + w and their spectral statistics.

Two generators are provided:

* ``make_dense_roi`` builds ``A = U S V^T`` with Haar ``U`` and ``V``.
* ``make_fijl`` builds the fast ill-conditioned Johnson-Lindenstrauss
  operator ``A = S P H D`` (random signs, orthonormal DCT, random
  permutation, rectangular diagonal), applied in O(n log n).

Both store the squared singular values, so that ``A A^T`` has a known
spectrum. The spectrum is scaled so that ``(1/N) Tr{A A^T} = 1``.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, NamedTuple, Optional

import numpy as np
from scipy.fft import dct, idct

from . import streams
from .denoisers import PriorDescriptor

KINDS = ("dense_roi", "fijl", "custom")


@dataclass(frozen=True, eq=False)
class MeasurementModel:
    """A linear map R^n -> R^m with its transpose and noise level.

    The model is immutable; ``apply`` and ``apply_t`` are pure and accept a
    vector or a 2-D array whose columns are vectors.
    """

    n: int
    m: int
    kind: str
    noise_var: float = 0.0
    kappa: float = 1.0
    seed: Optional[int] = None
    spectrum: Optional[np.ndarray] = None
    _matvec: Callable[[np.ndarray], np.ndarray] = field(default=None, repr=False)
    _rmatvec: Callable[[np.ndarray], np.ndarray] = field(default=None, repr=False)
    # AA^T is diagonal in the measurement basis (FIJL)
    diagonal_gram: bool = False

    @property
    def delta(self) -> float:
        return self.m / self.n

    def apply(self, x: np.ndarray) -> np.ndarray:
        return self._matvec(x)

    def apply_t(self, u: np.ndarray) -> np.ndarray:
        return self._rmatvec(u)

    def gram(self, u: np.ndarray) -> np.ndarray:
        """A A^T u."""
        return self._matvec(self._rmatvec(u))

    def dense(self) -> np.ndarray:
        """Materialize A column by column (test scale only)."""
        return self.apply(np.eye(self.n))

    def with_noise(self, noise_var: float) -> "MeasurementModel":
        if noise_var < 0:
            raise ValueError("noise_var must be non-negative")
        return replace(self, noise_var=float(noise_var))

    def descriptor(self) -> dict:
        return {
            "kind": self.kind,
            "n": self.n,
            "m": self.m,
            "kappa": self.kappa,
            "seed": self.seed,
            "noise_var": self.noise_var,
        }


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    a.setflags(write=False)
    return a


def _check_dims(n: int, m: int, kappa: float) -> None:
    if not (0 < m < n):
        raise ValueError(f"need 0 < m < n, got m={m}, n={n}")
    if not kappa >= 1:
        raise ValueError(f"kappa must be >= 1, got {kappa}")


def geometric_singular_values(n: int, m: int, kappa: float) -> np.ndarray:
    """Singular values s_0 > ... > s_{m-1} with s_0/s_{m-1} = kappa and sum(s^2) = n."""
    if m == 1:
        s = np.ones(1)
    else:
        s = kappa ** (-np.arange(m) / (m - 1))
    return s * np.sqrt(n / np.sum(s**2))


def haar_orthogonal(k: int, rng: np.random.Generator) -> np.ndarray:
    """Haar-distributed k x k orthogonal matrix (QR with sign-corrected R)."""
    q, r = np.linalg.qr(rng.standard_normal((k, k)))
    return q * np.sign(np.diag(r))


def make_dense_roi(n: int, m: int, kappa: float, seed: int, noise_var: float = 0.0) -> MeasurementModel:
    """Dense right-orthogonally invariant matrix U S V^T.

    Both U and V are Haar; the left factor is randomized as well although only
    V needs to be.
    """
    _check_dims(n, m, kappa)
    rng = streams.generator(seed, streams.OPERATOR)
    s = geometric_singular_values(n, m, kappa)
    u = haar_orthogonal(m, rng)
    v = haar_orthogonal(n, rng)
    a = _frozen((u * s) @ v[:, :m].T)

    def matvec(x):
        return a @ x

    def rmatvec(y):
        return a.T @ y

    return MeasurementModel(
        n=n, m=m, kind="dense_roi", noise_var=float(noise_var), kappa=float(kappa), seed=seed,
        spectrum=_frozen(s**2), _matvec=matvec, _rmatvec=rmatvec,
    )


def make_fijl(n: int, m: int, kappa: float, seed: int, noise_var: float = 0.0) -> MeasurementModel:
    """Fast ill-conditioned Johnson-Lindenstrauss operator A = S P H D.

    D holds random signs, H is the orthonormal DCT-II, P a random permutation
    and S the m x n rectangular diagonal of geometric singular values.
    A A^T = S S^T is diagonal.
    """
    if n < 2 or n & (n - 1):
        raise ValueError(f"FIJL needs n a power of two, got {n}")
    _check_dims(n, m, kappa)
    rng = streams.generator(seed, streams.OPERATOR)
    signs = _frozen(streams.rademacher(rng, n))
    perm = rng.permutation(n)
    s = _frozen(geometric_singular_values(n, m, kappa))
    keep = perm[:m]

    def matvec(x):
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            return s * dct(signs * x, norm="ortho")[keep]
        xt = np.ascontiguousarray((signs[:, None] * x).T)
        return s[:, None] * dct(xt, norm="ortho", axis=1, overwrite_x=True)[:, keep].T

    def rmatvec(y):
        y = np.asarray(y, dtype=float)
        if y.ndim == 1:
            full = np.zeros(n)
            full[keep] = s * y
            return signs * idct(full, norm="ortho")
        full = np.zeros((y.shape[1], n))
        full[:, keep] = (s[:, None] * y).T
        return signs[:, None] * idct(full, norm="ortho", axis=1, overwrite_x=True).T

    return MeasurementModel(
        n=n, m=m, kind="fijl", noise_var=float(noise_var), kappa=float(kappa), seed=seed,
        spectrum=_frozen(s**2), _matvec=matvec, _rmatvec=rmatvec, diagonal_gram=True,
    )


def make_custom(
    matvec: Callable[[np.ndarray], np.ndarray],
    rmatvec: Callable[[np.ndarray], np.ndarray],
    n: int,
    m: int,
    noise_var: float = 0.0,
    spectrum: Optional[np.ndarray] = None,
) -> MeasurementModel:
    if not (0 < m < n):
        raise ValueError(f"need 0 < m < n, got m={m}, n={n}")
    kappa = 1.0
    if spectrum is not None:
        spectrum = _frozen(spectrum)
        if spectrum.shape != (m,):
            raise ValueError("spectrum must hold m squared singular values")
        kappa = float(np.sqrt(spectrum.max() / spectrum.min()))
    return MeasurementModel(
        n=n, m=m, kind="custom", noise_var=float(noise_var), kappa=kappa,
        spectrum=spectrum, _matvec=matvec, _rmatvec=rmatvec,
    )


def from_matrix(a: np.ndarray, noise_var: float = 0.0) -> MeasurementModel:
    """Wrap an explicit m x n matrix; the spectrum is computed densely."""
    a = _frozen(a)
    m, n = a.shape
    lam = np.linalg.eigvalsh(a @ a.T)[::-1].clip(min=0.0)
    return make_custom(lambda x: a @ x, lambda y: a.T @ y, n, m, noise_var, spectrum=lam)


def make_model(kind: str, n: int, m: int, kappa: float, seed: int, noise_var: float = 0.0) -> MeasurementModel:
    if kind == "dense_roi":
        return make_dense_roi(n, m, kappa, seed, noise_var)
    if kind == "fijl":
        return make_fijl(n, m, kappa, seed, noise_var)
    raise ValueError(f"cannot generate operator of kind {kind!r}")


def model_from_descriptor(desc: dict) -> MeasurementModel:
    return make_model(desc["kind"], int(desc["n"]), int(desc["m"]), float(desc["kappa"]),
                      int(desc["seed"]), float(desc.get("noise_var", 0.0)))


def dump_descriptor(model: MeasurementModel) -> str:
    if model.kind == "custom":
        raise ValueError("custom operators cannot be serialized")
    return json.dumps(model.descriptor(), sort_keys=True)


def load_descriptor(text: str) -> MeasurementModel:
    return model_from_descriptor(json.loads(text))


def write_spectrum_csv(model: MeasurementModel, path) -> None:
    if model.spectrum is None:
        raise ValueError("model has no stored spectrum")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "squared_singular_value"])
        for k, lam in enumerate(model.spectrum):
            w.writerow([k, repr(float(lam))])


def read_spectrum_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return np.array([float(r["squared_singular_value"]) for r in rows])


def adjoint_mismatch(model: MeasurementModel, pairs: int = 10, seed: int = 0) -> float:
    """Largest |u^T(Av) - (A^T u)^T v| / (|u||v|) over random pairs."""
    rng = streams.generator(seed, streams.PROBES, 99)
    worst = 0.0
    for _ in range(pairs):
        u = rng.standard_normal(model.m)
        v = rng.standard_normal(model.n)
        err = abs(u @ model.apply(v) - model.apply_t(u) @ v)
        worst = max(worst, err / (np.linalg.norm(u) * np.linalg.norm(v)))
    return worst


# --------------------------------------------------------------------------
# spectral statistics


@dataclass(frozen=True)
class SpectralInfo:
    """Normalized moments chi_j = (1/N) Tr{(AA^T)^j}.

    ``chi[j]`` is the j-th moment; ``chi[0] = m/n`` is kept so that indices
    line up with the moment order. With ``scale != 1`` the moments are those of
    AA^T / scale, which keeps high orders representable.
    """

    chi: np.ndarray
    lambda_min: float
    lambda_max: float
    provenance: str
    probes: Optional[int] = None
    scale: float = 1.0

    @property
    def lambda_dagger(self) -> float:
        return 0.5 * (self.lambda_max + self.lambda_min)

    @property
    def j_max(self) -> int:
        return len(self.chi) - 1


def exact_moments(spectrum: np.ndarray, n: int, j_max: int) -> np.ndarray:
    lam = np.asarray(spectrum, dtype=float)
    out = np.empty(j_max + 1)
    p = np.ones_like(lam)
    for j in range(j_max + 1):
        out[j] = np.sum(p) / n
        p = p * lam
    return out


def spectral_info_exact(model: MeasurementModel, j_max: int, scale: float = 1.0) -> SpectralInfo:
    if model.spectrum is None:
        raise ValueError("model has no stored spectrum")
    lam = model.spectrum
    return SpectralInfo(exact_moments(lam / scale, model.n, j_max), float(lam.min()), float(lam.max()),
                        "exact", scale=scale)


class MonteCarloMoments:
    """Hutchinson moment estimates that extend on demand.

    For a probe u, u^T (AA^T)^j u = ||x_j||^2 with x_1 = A^T u and x_j obtained
    by alternately applying A and A^T, so one operator application buys one
    more order. The probe chains are kept, so asking for a higher order later
    costs only the missing applications.
    """

    def __init__(self, model: MeasurementModel, trials: int, seed: int, scale: float = 1.0,
                 batch: int = 256, eig_iters: int = 100):
        if trials < 1:
            raise ValueError("need trials >= 1")
        self.model, self.trials, self.scale = model, trials, float(scale)
        rng = streams.generator(seed, streams.PROBES)
        self._chains = []
        done = 0
        while done < trials:
            k = min(batch, trials - done)
            self._chains.append(streams.rademacher(rng, (model.m, k)))
            done += k
        self._acc = [0.0]
        self.lambda_min, self.lambda_max, _ = extreme_eigs(model, eig_iters, seed)

    @property
    def order(self) -> int:
        return len(self._acc) - 1

    def ensure(self, j_max: int) -> "MonteCarloMoments":
        root = math.sqrt(self.scale)
        for j in range(self.order + 1, j_max + 1):
            total = 0.0
            for b, x in enumerate(self._chains):
                x = (self.model.apply_t(x) if j % 2 else self.model.apply(x)) / root
                total += float(np.sum(x * x))
                self._chains[b] = x
            self._acc.append(total)
        return self

    @property
    def chi(self) -> np.ndarray:
        chi = np.asarray(self._acc) / (self.model.n * self.trials)
        chi[0] = self.model.delta
        return chi

    def info(self, j_max: Optional[int] = None) -> SpectralInfo:
        if j_max is not None:
            self.ensure(j_max)
        return SpectralInfo(self.chi, self.lambda_min, self.lambda_max, "monte_carlo",
                            probes=self.trials, scale=self.scale)


def spectral_moments_mc(
    model: MeasurementModel,
    j_max: int,
    trials: int,
    seed: int,
    batch: int = 256,
    eig_iters: int = 100,
    scale: float = 1.0,
) -> SpectralInfo:
    """Hutchinson estimates of chi_1..chi_jmax with Rademacher probes."""
    if j_max < 1:
        raise ValueError("need j_max >= 1")
    return MonteCarloMoments(model, trials, seed, scale, batch, eig_iters).info(j_max)


class EigBounds(NamedTuple):
    lambda_min: float
    lambda_max: float
    converged: bool

    @property
    def lambda_dagger(self) -> float:
        return 0.5 * (self.lambda_min + self.lambda_max)


def _power(op, m, iters, rng, tol=1e-6):
    v = rng.standard_normal(m)
    v /= np.linalg.norm(v)
    lam = 0.0
    converged = False
    for _ in range(iters):
        w = op(v)
        new = float(v @ w)
        nrm = np.linalg.norm(w)
        if nrm == 0:
            return 0.0, True
        v = w / nrm
        if abs(new - lam) <= tol * abs(new):
            converged = True
            lam = new
            break
        lam = new
    return lam, converged


def extreme_eigs(model: MeasurementModel, iters: int, seed: int = 0, use_spectrum: bool = True) -> EigBounds:
    """Extreme eigenvalues of AA^T.

    Exact when a spectrum is stored; otherwise power iteration for the top
    and power iteration on (lambda_max I - AA^T) for the bottom. Failure to
    converge only warns.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    if use_spectrum and model.spectrum is not None:
        return EigBounds(float(model.spectrum.min()), float(model.spectrum.max()), True)
    rng = streams.generator(seed, streams.POWER)
    hi, ok_hi = _power(model.gram, model.m, iters, rng)
    gap, ok_lo = _power(lambda v: hi * v - model.gram(v), model.m, iters, rng)
    lo = max(hi - gap, 0.0)
    ok = ok_hi and ok_lo
    if not ok:
        warnings.warn("power iteration did not reach 1e-6 relative change", RuntimeWarning, stacklevel=2)
    return EigBounds(lo, hi, ok)


# --------------------------------------------------------------------------
# problems


@dataclass(frozen=True, eq=False)
class Problem:
    model: MeasurementModel
    x_true: np.ndarray
    w_true: np.ndarray
    y: np.ndarray
    prior: PriorDescriptor
    snr_db: Optional[float] = None


def noise_var_for_snr(n: int, m: int, second_moment: float, snr_db: float) -> float:
    """v_w with E||x||^2 / E||w||^2 = 10^(snr/10)."""
    return n * second_moment / (m * 10.0 ** (snr_db / 10.0))


def sample_signal(n: int, prior: PriorDescriptor, rng: np.random.Generator) -> np.ndarray:
    active = rng.random(n) < prior.sparsity
    return np.where(active, rng.standard_normal(n) * math.sqrt(prior.signal_var), 0.0)


def make_problem(model: MeasurementModel, prior: PriorDescriptor, snr_db: float, seed: int) -> Problem:
    """Draw x from the prior and w ~ N(0, v_w I) at the requested SNR."""
    v_w = noise_var_for_snr(model.n, model.m, prior.second_moment, snr_db)
    model = model.with_noise(v_w)
    x = sample_signal(model.n, prior, streams.generator(seed, streams.SIGNAL))
    w = streams.generator(seed, streams.NOISE).standard_normal(model.m) * math.sqrt(v_w)
    y = model.apply(x) + w
    return Problem(model, _frozen(x), _frozen(w), _frozen(y), prior, snr_db)
