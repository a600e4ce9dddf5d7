"""Reconstructed dynamics, forecast error curves, autocorrelation and bounds.

The reconstructed system acts on ``(u, y)`` as ``(u, y) -> (w_hat(y), g(u, y))``.
Iterative forecasts run that map from the exact initial state
``(phi(w), Phi(w))``; direct forecasts evaluate one model per horizon.
Errors are RMS values over an ensemble of orbit-sampled members.
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .dynsys import ObservationMap, SystemSpec, attractor_diameter, jacobian, step_system
from .embed import (DelayParams, EmbeddedOrbit, ReservoirParams, delay_g, delay_jacobians,
                    reservoir_g, reservoir_jacobians)
from .learn import holdout_indices

MEMBER_CHUNK = 64   # fixed work unit; keeps results independent of the thread count


@dataclass(frozen=True, eq=False)
class ReconstructedSystem:
    params: object          # DelayParams or ReservoirParams
    feedback: object        # anything with predict(Y) -> (n, d) and jacobian(Y) -> (n, d, L)

    @property
    def paradigm(self) -> str:
        return self.params.paradigm

    @property
    def d(self) -> int:
        return self.params.d

    @property
    def L(self) -> int:
        return self.params.L

    def g(self, u, y) -> np.ndarray:
        if isinstance(self.params, DelayParams):
            return delay_g(u, y, self.params)
        return reservoir_g(self.params, u, y)

    def g_jacobians(self, u, y):
        """``(G1, G2)`` batched over leading axes of ``u`` and ``y``."""
        if isinstance(self.params, DelayParams):
            G1, G2 = delay_jacobians(self.params)
            lead = np.shape(y)[:-1]
            return np.broadcast_to(G1, lead + G1.shape), np.broadcast_to(G2, lead + G2.shape)
        return reservoir_jacobians(self.params, u, y)

    def step(self, u, y):
        u = np.asarray(u, dtype=float)
        y = np.asarray(y, dtype=float)
        single = y.ndim == 1
        Y2 = np.atleast_2d(y)
        u_next = np.asarray(self.feedback.predict(Y2)).reshape(len(Y2), self.d)
        y_next = self.g(np.atleast_2d(u), Y2)
        if single:
            return u_next[0], y_next[0]
        return u_next, y_next

    def describe(self) -> dict:
        out = {"paradigm": self.paradigm, "d": self.d, "L": self.L}
        fm = getattr(self.feedback, "fmap", None)
        if fm is not None:
            out["hypothesis_space"] = {"kind": fm.kind, "M": fm.M}
        return out


class ExactDelayFeedback:
    """The true feedback ``w`` for delay coordinates of an invertible full-state observable.

    With ``y = (phi(w_{n-1}), ...)`` the next observation is
    ``phi(w_{n+1}) = phi(F^2(x))`` where ``x = phi^{-1}(y^(1))`` and ``F`` is
    ``stride`` steps of the base system.
    """

    def __init__(self, spec: SystemSpec, obs: ObservationMap, stride: int = 1):
        if obs.kind != "full-state":
            raise ValueError("exact feedback needs an invertible (full-state) observable")
        self.spec, self.obs, self.stride = spec, obs, int(stride)
        m = spec.state_dim
        self._offset = np.zeros(m) if obs.offset is None else np.asarray(obs.offset)
        self._m = m

    def _state(self, Y):
        return np.atleast_2d(Y)[:, :self._m] * self.obs.scale + self._offset

    def _F(self, x):
        for _ in range(self.stride):
            x = step_system(x, self.spec)
        return x

    def _DF(self, x):
        J = np.broadcast_to(np.eye(self._m), x.shape[:-1] + (self._m, self._m)).copy()
        for _ in range(self.stride):
            J = jacobian(x, self.spec) @ J
            x = step_system(x, self.spec)
        return J, x

    def predict(self, Y) -> np.ndarray:
        return self.obs(self._F(self._F(self._state(Y))))

    __call__ = predict

    def jacobian(self, Y) -> np.ndarray:
        Y = np.atleast_2d(Y)
        x = self._state(Y)
        J1, x1 = self._DF(x)
        J2, x2 = self._DF(x1)
        core = self.obs.jacobian(x2) @ J2 @ J1 * self.obs.scale     # (n, d, m)
        out = np.zeros((len(Y), core.shape[1], Y.shape[1]))
        out[:, :, :self._m] = core
        return out


class BlendedFeedback:
    """``w_s = w_ref + s (w_other - w_ref)``; interpolates between two feedbacks."""

    def __init__(self, reference, other, s: float):
        self.reference, self.other, self.s = reference, other, float(s)

    def predict(self, Y) -> np.ndarray:
        a = self.reference.predict(Y)
        return a + self.s * (self.other.predict(Y) - a)

    __call__ = predict

    def jacobian(self, Y) -> np.ndarray:
        a = self.reference.jacobian(Y)
        return a + self.s * (self.other.jacobian(Y) - a)


class ZeroFeedback:
    def __init__(self, d: int, L: int):
        self.d, self.L = d, L

    def predict(self, Y) -> np.ndarray:
        return np.zeros((len(np.atleast_2d(Y)), self.d))

    def jacobian(self, Y) -> np.ndarray:
        return np.zeros((len(np.atleast_2d(Y)), self.d, self.L))


# ---------------------------------------------------------------------------
# iteration

@dataclass(frozen=True)
class GuardBall:
    center: np.ndarray
    radius: float

    def outside(self, Z) -> np.ndarray:
        with np.errstate(invalid="ignore", over="ignore"):
            dist = np.linalg.norm(Z - self.center, axis=-1)
        return ~(dist <= self.radius)      # NaN counts as outside


def guard_ball(bundle, orbit: EmbeddedOrbit, factor: float = 1e3, max_points: int = 20_000) -> GuardBall:
    """Ball of radius ``factor * diameter`` around the mean of the aligned ``(phi, Phi)`` cloud."""
    n = len(orbit)
    idx = np.arange(0, n, max(1, n // max_points))
    Z = np.hstack([bundle.observations[orbit.offset + idx], orbit.states[idx]])
    return GuardBall(Z.mean(axis=0), factor * attractor_diameter(Z))


@dataclass
class Iteration:
    u: np.ndarray                 # (n+1, d) or (n+1, B, d)
    y: np.ndarray                 # (n+1, L) or (n+1, B, L)
    diverged_at: object = None    # step index, or per-member array with -1 for survivors


def _iterate_batch(system: ReconstructedSystem, U0, Y0, n: int, guard: Optional[GuardBall]):
    B = len(U0)
    U = np.full((n + 1, B, system.d), np.nan)
    Yh = np.full((n + 1, B, system.L), np.nan)
    U[0], Yh[0] = U0, Y0
    div = np.full(B, -1, dtype=int)
    alive = np.arange(B)
    u, y = np.array(U0, dtype=float), np.array(Y0, dtype=float)
    for k in range(1, n + 1):
        if len(alive) == 0:
            break
        with np.errstate(over="ignore", invalid="ignore"):
            u, y = system.step(u, y)
        bad = ~np.all(np.isfinite(u), axis=1) | ~np.all(np.isfinite(y), axis=1)
        if guard is not None:
            bad |= guard.outside(np.hstack([u, y]))
        if np.any(bad):
            div[alive[bad]] = k
            keep = ~bad
            alive, u, y = alive[keep], u[keep], y[keep]
        U[k, alive], Yh[k, alive] = u, y
    return U, Yh, div


def iterate_reconstruction(system: ReconstructedSystem, z0, n: int,
                           guard: Optional[GuardBall] = None) -> Iteration:
    """Run ``n`` steps of the reconstructed map from ``z0 = (u0, y0)``.

    Divergence (non-finite state or leaving ``guard``) stops the run; entries
    after the divergence step are NaN and ``diverged_at`` holds the step.
    """
    if n < 0:
        raise ValueError("n must be >= 0")
    u0, y0 = (np.asarray(a, dtype=float) for a in z0)
    if u0.shape != (system.d,) or y0.shape != (system.L,):
        raise ValueError("z0 must be (d-vector, L-vector)")
    U, Y, div = _iterate_batch(system, u0[None], y0[None], n, guard)
    return Iteration(U[:, 0], Y[:, 0], None if div[0] < 0 else int(div[0]))


# ---------------------------------------------------------------------------
# error curves

@dataclass
class ErrorCurve:
    mode: str
    values: np.ndarray
    n_diverged: np.ndarray
    ensemble_size: int
    phi_norm: float
    dt: float = 1.0
    bound: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    @property
    def horizons(self) -> np.ndarray:
        return np.arange(len(self.values))

    @property
    def first_divergence(self) -> Optional[int]:
        hit = np.flatnonzero(self.n_diverged > 0)
        return int(hit[0]) if len(hit) else None

    def to_csv(self, path, sidecar: Optional[str] = None) -> None:
        with open(path, "w") as fh:
            fh.write("n,t,rms_error,n_diverged,bound\n")
            for n, v in enumerate(self.values):
                b = "" if self.bound is None else f"{self.bound[n]:.17g}"
                fh.write(f"{n},{n * self.dt:.17g},{v:.17g},{int(self.n_diverged[n])},{b}\n")
        meta = {"mode": self.mode, "ensemble_size": self.ensemble_size, "phi_norm": self.phi_norm,
                "dt": self.dt, "horizon": len(self.values) - 1}
        meta.update(self.meta)
        with open(sidecar or str(path) + ".json", "w") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)


def _rms_rows(sq: np.ndarray, alive: np.ndarray) -> np.ndarray:
    # sq: (n+1, B) squared errors; ordered reduction over members
    cnt = alive.sum(axis=1)
    tot = np.where(alive, sq, 0.0).sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(cnt > 0, np.sqrt(tot / np.maximum(cnt, 1)), np.nan)


def _check_ensemble(bundle, orbit, ensemble, N):
    ens = np.asarray(ensemble, dtype=int)
    if ens.ndim != 1 or len(ens) == 0:
        raise ValueError("ensemble must be a non-empty 1-d index array")
    if ens.min() < 0 or ens.max() >= len(orbit):
        raise ValueError("ensemble indices outside the orbit")
    if orbit.offset + ens.max() + N >= len(bundle.observations):
        raise ValueError("bundle too short for the requested horizon")
    return ens


def phi_rms(bundle) -> float:
    o = bundle.observations
    return float(math.sqrt(np.mean(np.sum(o * o, axis=1))))


def error_iterative(system: ReconstructedSystem, bundle, orbit: EmbeddedOrbit, ensemble, N: int,
                    guard: Optional[GuardBall] = None, threads: int = 1) -> ErrorCurve:
    """RMS over members of ``||phi(f^n w) - u_n||`` with ``(u_0, y_0) = (phi(w), Phi(w))``.

    Diverged members are excluded from horizon ``n`` onward; ``n_diverged``
    counts them per horizon.
    """
    ens = _check_ensemble(bundle, orbit, ensemble, N)
    obs = bundle.observations
    b = orbit.offset + ens
    chunks = [slice(i, i + MEMBER_CHUNK) for i in range(0, len(ens), MEMBER_CHUNK)]

    def work(sl):
        U, _, div = _iterate_batch(system, obs[b[sl]], orbit.states[ens[sl]], N, guard)
        truth = np.stack([obs[b[sl] + n] for n in range(N + 1)])
        sq = np.sum((truth - U) ** 2, axis=2)
        return sq, div

    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            parts = list(ex.map(work, chunks))
    else:
        parts = [work(sl) for sl in chunks]
    sq = np.concatenate([p[0] for p in parts], axis=1)
    div = np.concatenate([p[1] for p in parts])
    steps = np.arange(N + 1)[:, None]
    alive = (div[None, :] < 0) | (steps < div[None, :])
    vals = _rms_rows(sq, alive)
    vals[0] = 0.0 if alive[0].any() else np.nan
    return ErrorCurve("iterative", vals, (~alive).sum(axis=1), len(ens), phi_rms(bundle),
                      bundle.dt, meta={"paradigm": system.paradigm, **system.describe()})


def error_direct(models: Sequence, bundle, orbit: EmbeddedOrbit, ensemble=None,
                 N: Optional[int] = None) -> ErrorCurve:
    """RMS over members of ``||phi(f^n w) - w_hat_n(Phi(w))||`` for ``n = 0..N``.

    ``models[n]`` must have horizon ``n``.  The ensemble defaults to the
    shared held-out samples, in which case the value at ``n`` is the held-out
    residual of ``models[n]``.
    """
    models = sorted(models, key=lambda m: m.horizon)
    if [m.horizon for m in models] != list(range(len(models))):
        raise ValueError("direct models must cover horizons 0..N contiguously")
    N = len(models) - 1 if N is None else int(N)
    if N >= len(models):
        raise ValueError(f"only {len(models)} horizon models for N={N}")
    fmap = models[0].fmap
    if any(m.fmap is not fmap for m in models):
        raise ValueError("direct models must share one feature map")
    ens = holdout_indices(models[0]) if ensemble is None else np.asarray(ensemble, dtype=int)
    ens = _check_ensemble(bundle, orbit, ens, N)
    obs = bundle.observations
    X = fmap(orbit.states[ens])
    b = orbit.offset + ens
    sq = np.empty((N + 1, len(ens)))
    for n in range(N + 1):
        r = obs[b + n] - X @ models[n].coef
        sq[n] = np.sum(r * r, axis=1)
    alive = np.isfinite(sq)
    return ErrorCurve("direct", _rms_rows(sq, alive), (~alive).sum(axis=1), len(ens),
                      phi_rms(bundle), bundle.dt,
                      meta={"hypothesis_space": {"kind": fmap.kind, "M": fmap.M}})


# ---------------------------------------------------------------------------
# autocorrelation and bounds

@dataclass
class AutocorrCurve:
    values: np.ndarray
    centered: bool
    norm: float

    @property
    def lags(self) -> np.ndarray:
        return np.arange(len(self.values))


def autocorrelation(source, N: int, component: Optional[int] = None, centered: bool = False,
                    indices=None) -> AutocorrCurve:
    """Normalised autocorrelation ``<U^n psi, psi> / ||psi||^2`` for ``n = 0..N``.

    ``psi`` is the observation series (one ``component`` or the full vector,
    with Euclidean inner products).  Inner products are time averages over the
    series, or over start indices ``indices`` when given (all ``t + N`` must
    lie in the series).  ``centered`` subtracts the mean first.
    """
    psi = np.asarray(getattr(source, "observations", source), dtype=float)
    if psi.ndim == 1:
        psi = psi[:, None]
    if component is not None:
        psi = psi[:, [component]]
    if centered:
        psi = psi - psi.mean(axis=0)
    T = len(psi)
    vals = np.empty(N + 1)
    if indices is None:
        if N >= T:
            raise ValueError("series shorter than the requested lag range")
        norm2 = float(np.mean(np.sum(psi * psi, axis=1)))
        flat = psi.T
        for n in range(N + 1):
            vals[n] = float(np.sum(flat[:, n:] * flat[:, :T - n])) / (T - n) / norm2
    else:
        idx = np.asarray(indices, dtype=int)
        if idx.min() < 0 or idx.max() + N >= T:
            raise ValueError("indices + N must stay inside the series")
        base = psi[idx]
        norm2 = float(np.mean(np.sum(base * base, axis=1)))
        for n in range(N + 1):
            vals[n] = float(np.mean(np.sum(psi[idx + n] * base, axis=1))) / norm2
    if norm2 == 0:
        raise ValueError("autocorrelation of the zero signal is undefined")
    vals[0] = 1.0
    return AutocorrCurve(vals, centered, math.sqrt(norm2))


def decorrelation_time(ac: AutocorrCurve, level: float = 1.0 / math.e) -> Optional[int]:
    """First lag where ``|AutCor|`` falls below ``level`` (None if it never does)."""
    hit = np.flatnonzero(np.abs(ac.values) < level)
    return int(hit[0]) if len(hit) else None


def direct_bound(ac: AutocorrCurve, phi_norm: float) -> np.ndarray:
    """``phi_norm * sqrt(1 - AutCor(n)^2)``, valid when ``phi`` lies in the hypothesis space."""
    if not phi_norm > 0:
        raise ValueError("phi_norm must be positive")
    return phi_norm * np.sqrt(np.maximum(0.0, 1.0 - ac.values ** 2))


@dataclass
class SpectrumReport:
    peak_frequency: float
    peak_bin: int
    ratio: float
    bin_width: float
    expected_frequency: Optional[float]
    within_one_bin: Optional[bool]
    n_samples: int

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def mixed_spectrum_diagnostic(curve, rho: Optional[float] = None, start: int = 0) -> SpectrumReport:
    """Periodogram of the mean-removed error series ``curve[start:]``.

    Reports the largest non-zero-frequency bin (cycles per step), its power
    ratio to the next-largest bin and, for a rotation number ``rho`` in
    radians per step, whether the peak lies within one bin of ``rho / 2 pi``.
    """
    x = np.asarray(getattr(curve, "values", curve), dtype=float)[start:]
    if len(x) < 4:
        raise ValueError("need at least 4 samples for a periodogram")
    if rho is not None and len(x) * rho / (2 * math.pi) < 4:
        raise ValueError("series must cover at least 4 periods of the expected frequency")
    p = np.abs(np.fft.rfft(x - x.mean())) ** 2
    freqs = np.fft.rfftfreq(len(x))
    p1 = p[1:]
    k = int(np.argmax(p1)) + 1
    rest = np.delete(p1, k - 1)
    top = p[k]
    nxt = float(rest.max()) if len(rest) else 0.0
    if nxt > 0:
        ratio = float(top / nxt)
    else:
        ratio = 1.0 if top == 0 else float("inf")
    width = 1.0 / len(x)
    expected = None if rho is None else rho / (2 * math.pi)
    within = None if rho is None else bool(abs(freqs[k] - expected) <= width)
    return SpectrumReport(float(freqs[k]), k, ratio, width, expected, within, len(x))
