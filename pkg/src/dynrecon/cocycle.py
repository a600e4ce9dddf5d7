"""Matrix cocycles over a base orbit.

A cocycle is generated by matrices ``G_k = G(f^k w)``; its product is
``G(n, w) = G_{n-1} ... G_0``.  This module estimates Lyapunov spectra by
iterated QR refactorisation, runs perturbed cocycles and the graph
transform, fits growth rates, and evaluates the stability constant of a
delay embedding.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .dynsys import jacobian, step_system
from .embed import DelayParams

GENERATOR_KINDS = ("tangent", "reconstructed", "synthetic")


class SingularFactorError(np.linalg.LinAlgError):
    def __init__(self, message: str, step: int):
        super().__init__(message)
        self.step = step


class CocycleDivergenceError(FloatingPointError):
    def __init__(self, message: str, step: int):
        super().__init__(message)
        self.step = step


class UnconvergedSpectrumError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class CocycleGenerator:
    """Matrices ``G_k`` along a base orbit, shape ``(n, k, k)``."""

    matrices: np.ndarray
    kind: str = "synthetic"
    dt: float = 1.0

    def __post_init__(self):
        A = self.matrices
        if A.ndim != 3 or A.shape[1] != A.shape[2]:
            raise ValueError("generator matrices must have shape (n, k, k)")
        if self.kind not in GENERATOR_KINDS:
            raise ValueError(f"unknown generator kind {self.kind!r}")
        if not np.all(np.isfinite(A)):
            bad = int(np.flatnonzero(~np.all(np.isfinite(A), axis=(1, 2)))[0])
            raise ValueError(f"non-finite generator matrix at step {bad}")

    def __len__(self) -> int:
        return len(self.matrices)

    @property
    def dim(self) -> int:
        return self.matrices.shape[1]

    def window(self, start: int, n: int) -> "CocycleGenerator":
        if start < 0 or start + n > len(self):
            raise ValueError("window exceeds the generator's orbit")
        return CocycleGenerator(self.matrices[start:start + n], self.kind, self.dt)


def constant_generator(A, n: int, dt: float = 1.0) -> CocycleGenerator:
    A = np.atleast_2d(np.asarray(A, dtype=float))
    return CocycleGenerator(np.broadcast_to(A, (n,) + A.shape), "synthetic", dt)


def map_jacobians(states, spec, stride: int = 1) -> np.ndarray:
    """Jacobians of ``stride`` base steps at each state (batched)."""
    x = np.atleast_2d(np.asarray(states, dtype=float))
    J = jacobian(x, spec)
    for _ in range(stride - 1):
        x = step_system(x, spec)
        J = jacobian(x, spec) @ J
    return J


def tangent_generator(bundle, n: Optional[int] = None, start: int = 0) -> CocycleGenerator:
    """Tangent cocycle ``Df`` along the bundle's orbit (``f`` = one bundle step)."""
    n = len(bundle) - start if n is None else n
    states = bundle.states[start:start + n]
    if len(states) < n:
        raise ValueError("bundle shorter than the requested window")
    return CocycleGenerator(map_jacobians(states, bundle.spec, bundle.stride), "tangent", bundle.dt)


def reconstructed_generator(system, orbit, bundle, start: int = 0,
                            n: Optional[int] = None) -> CocycleGenerator:
    """``M(w) = [[0, W_hat], [G1, G2]]`` along the orbit, evaluated at ``(phi(w), Phi(w))``."""
    n = len(orbit) - start if n is None else n
    if start < 0 or start + n > len(orbit):
        raise ValueError("window exceeds the orbit")
    Y = orbit.states[start:start + n]
    U = bundle.observations[orbit.offset + start:orbit.offset + start + n]
    d, L = system.d, system.L
    W = np.asarray(system.feedback.jacobian(Y)).reshape(n, d, L)
    G1, G2 = system.g_jacobians(U, Y)
    M = np.zeros((n, d + L, d + L))
    M[:, :d, d:] = W
    M[:, d:, :d] = G1
    M[:, d:, d:] = G2
    return CocycleGenerator(M, "reconstructed", bundle.dt)


# ---------------------------------------------------------------------------
# products and spectra

@dataclass
class FactoredProduct:
    """``G(n, w) = exp(log_scale) * Q @ R`` with ``Q`` orthogonal, ``R`` upper triangular."""

    Q: np.ndarray
    R: np.ndarray
    log_scale: float
    n: int

    def matrix(self) -> np.ndarray:
        return math.exp(self.log_scale) * (self.Q @ self.R)

    def log_norm(self) -> float:
        return self.log_scale + math.log(np.linalg.norm(self.R, 2))

    def log_abs_det(self) -> float:
        return self.R.shape[0] * self.log_scale + float(np.sum(np.log(np.abs(np.diag(self.R)))))


def cocycle_product(gen: CocycleGenerator, n: int, start: int = 0) -> FactoredProduct:
    """Accumulate ``G_{start+n-1} ... G_start`` in QR-factored form."""
    if n < 0 or start + n > len(gen):
        raise ValueError("orbit shorter than the requested product")
    k = gen.dim
    Q, R, log_scale = np.eye(k), np.eye(k), 0.0
    for i in range(n):
        G = gen.matrices[start + i]
        Q, Ri = np.linalg.qr(G @ Q)
        diag = np.abs(np.diag(Ri))
        if diag.min() <= k * np.finfo(float).eps * max(np.abs(G).max(), 1e-300):
            raise SingularFactorError(f"generator is singular at step {start + i}", start + i)
        R = Ri @ R
        s = np.abs(R).max()
        R /= s
        log_scale += math.log(s)
    return FactoredProduct(Q, R, log_scale, n)


@dataclass
class LyapunovSpectrum:
    exponents: np.ndarray           # per step, sorted descending
    n_steps: int
    dt: float = 1.0
    history: np.ndarray = field(default=None, repr=False)        # running per-step estimates
    history_steps: np.ndarray = field(default=None, repr=False)

    @property
    def per_time(self) -> np.ndarray:
        return self.exponents / self.dt

    def history_per_time(self) -> np.ndarray:
        return np.sort(self.history, axis=1)[:, ::-1] / self.dt

    def spread(self, fraction: float = 0.5) -> np.ndarray:
        """Per-exponent range (per time) of the running estimates over the last ``fraction``."""
        h = self.history_per_time()
        tail = h[int(len(h) * (1 - fraction)):]
        return tail.max(axis=0) - tail.min(axis=0)

    def to_csv(self, path) -> None:
        """Running per-time estimates ``step,lambda_1..lambda_k``."""
        h = self.history_per_time()
        k = h.shape[1]
        with open(path, "w") as fh:
            fh.write("step," + ",".join(f"lambda_{i + 1}" for i in range(k)) + "\n")
            for s, row in zip(self.history_steps, h):
                fh.write(f"{int(s)}," + ",".join(f"{v:.17g}" for v in row) + "\n")

    def summary(self) -> dict:
        return {"per_step": self.exponents.tolist(), "per_time": self.per_time.tolist(),
                "dt": self.dt, "n_steps": self.n_steps, "sum_per_time": float(self.per_time.sum())}

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.summary(), fh, indent=2)


def lyapunov_spectrum(gen: CocycleGenerator, n_steps: Optional[int] = None, refactor_every: int = 1,
                      n_exponents: Optional[int] = None, start: int = 0) -> LyapunovSpectrum:
    """Iterated-QR estimate of the leading ``n_exponents`` Lyapunov exponents.

    An orthonormal frame is pushed through the generator and re-orthonormalised
    every ``refactor_every`` steps; the exponents are the averaged logs of the
    triangular diagonals.  The running estimate is recorded at every
    refactorisation.
    """
    n_steps = len(gen) - start if n_steps is None else n_steps
    if n_steps < 1 or start + n_steps > len(gen):
        raise ValueError("orbit shorter than the requested number of steps")
    if refactor_every < 1:
        raise ValueError("refactor_every must be >= 1")
    k = gen.dim if n_exponents is None else int(n_exponents)
    if not 1 <= k <= gen.dim:
        raise ValueError("n_exponents must be between 1 and the cocycle dimension")
    mats = gen.matrices[start:start + n_steps]
    Qf = np.eye(gen.dim)[:, :k]
    sums = np.zeros(k)
    n_ref = -(-n_steps // refactor_every)
    hist = np.empty((n_ref, k))
    steps = np.empty(n_ref, dtype=int)
    pos = 0
    for r in range(n_ref):
        stop = min(pos + refactor_every, n_steps)
        V = Qf
        for i in range(pos, stop):
            V = mats[i] @ V
        Qf, R = np.linalg.qr(V)
        diag = np.abs(np.diag(R))
        if not np.all(np.isfinite(diag)) or diag.min() == 0.0:
            raise CocycleDivergenceError(f"non-finite or degenerate frame at step {stop}", stop)
        sums += np.log(diag)
        pos = stop
        hist[r] = sums / pos
        steps[r] = pos
    order = np.argsort(-sums)
    return LyapunovSpectrum(sums[order] / n_steps, n_steps, gen.dt, hist[:, order], steps)


@dataclass
class SubsetReport:
    matches: list                   # (base index, reconstructed index, gap) triples
    max_gap: float
    spurious: list                  # reconstructed indices left unmatched
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_gap <= self.tol


def exponent_subset_check(reconstructed: LyapunovSpectrum, base: LyapunovSpectrum, tol: float,
                          require_converged: bool = True) -> SubsetReport:
    """Match every base exponent to a distinct reconstructed one (per-time units).

    Matching is greedy: pairs are taken in order of increasing gap, each
    exponent used once.  Spectra whose running estimates still move by more
    than ``tol / 2`` over the last half of their history are rejected.
    """
    if require_converged:
        for name, sp in (("reconstructed", reconstructed), ("base", base)):
            if sp.history is not None and np.max(sp.spread()) >= tol / 2:
                raise UnconvergedSpectrumError(
                    f"{name} spectrum not converged: running spread {np.max(sp.spread()):.3g} >= {tol / 2:.3g}")
    r, b = reconstructed.per_time, base.per_time
    if len(b) > len(r):
        raise ValueError("base spectrum has more exponents than the reconstructed one")
    gaps = np.abs(b[:, None] - r[None, :])
    pairs = sorted(((gaps[i, j], i, j) for i in range(len(b)) for j in range(len(r))))
    used_b, used_r, matches = set(), set(), []
    for g, i, j in pairs:
        if i in used_b or j in used_r:
            continue
        used_b.add(i)
        used_r.add(j)
        matches.append((int(i), int(j), float(g)))
    matches.sort()
    return SubsetReport(matches, max(m[2] for m in matches), sorted(set(range(len(r))) - used_r), tol)


# ---------------------------------------------------------------------------
# perturbed cocycles and the graph transform

@dataclass
class PerturbedRun:
    a: np.ndarray          # (n+1, d)
    b: np.ndarray          # (n+1, L)
    c: np.ndarray          # (n, L) perturbation stream used

    @property
    def a_norms(self) -> np.ndarray:
        return np.linalg.norm(self.a, axis=1)


def perturbed_iterate(gen: CocycleGenerator, d: int, c_stream, n: int, start: int = 0,
                      a0=None) -> PerturbedRun:
    """Iterate ``z_{k+1} = M_k z_k + (0, c_k)`` from ``z_0 = (a0, 0)`` for ``n`` steps.

    ``a0`` defaults to zero, so ``a_1 = 0`` and ``b_0 = 0``.
    """
    c = np.asarray(c_stream, dtype=float)
    k = gen.dim
    L = k - d
    if c.ndim != 2 or c.shape[1] != L or len(c) < n:
        raise ValueError("c_stream must have shape (>= n, L)")
    if start + n > len(gen):
        raise ValueError("orbit shorter than the requested run")
    z = np.zeros(k)
    if a0 is not None:
        z[:d] = a0
    out = np.empty((n + 1, k))
    out[0] = z
    for i in range(n):
        z = gen.matrices[start + i] @ z
        z[d:] += c[i]
        if not np.all(np.isfinite(z)):
            raise CocycleDivergenceError(f"perturbed cocycle overflowed at step {i + 1}", i + 1)
        out[i + 1] = z
    return PerturbedRun(out[:, :d], out[:, d:], c[:n])


def graph_transform_series(gen: CocycleGenerator, d_stream, n: int, start: int = 0) -> np.ndarray:
    """``Psi^k d`` for ``k = 0..n`` by ``z_k = G_{k-1} z_{k-1} + d_k`` with ``z_0 = 0``.

    ``d_stream[j]`` is ``d(f^j w)``; entry 0 is never used.
    """
    D = np.asarray(d_stream, dtype=float)
    if D.ndim == 1:
        D = D[:, None]
    if len(D) < n + 1:
        raise ValueError("stream shorter than n + 1")
    if start + n > len(gen):
        raise ValueError("orbit shorter than the requested horizon")
    z = np.zeros(gen.dim)
    out = np.zeros((n + 1, gen.dim))
    for j in range(1, n + 1):
        z = gen.matrices[start + j - 1] @ z + D[j]
        if not np.all(np.isfinite(z)):
            raise CocycleDivergenceError(f"graph transform overflowed at step {j}", j)
        out[j] = z
    return out


def graph_transform(gen: CocycleGenerator, d_stream, n: int, start: int = 0) -> np.ndarray:
    return graph_transform_series(gen, d_stream, n, start)[n]


@dataclass
class GrowthFit:
    rate: float            # per step
    stderr: float
    ci: tuple              # 95% band
    window: tuple          # [i0, i1) indices used
    n_points: int


def knee_window(series, tail: float = 0.1, level: float = 0.5, min_points: int = 10) -> tuple:
    """Pre-saturation window: up to the first index reaching ``level`` x the plateau.

    The plateau is the median of the last ``tail`` fraction.  Falls back to
    the whole positive series when fewer than ``min_points`` remain.
    """
    v = np.asarray(series, dtype=float)
    pos = np.flatnonzero(v > 0)
    if len(pos) == 0:
        raise ValueError("series has no positive entries")
    i0 = int(pos[0])
    plateau = float(np.median(v[-max(1, int(math.ceil(tail * len(v)))):]))
    above = np.flatnonzero(v[i0:] >= level * plateau)
    i1 = i0 + (int(above[0]) if len(above) else len(v) - i0)
    if i1 - i0 < min_points:
        return i0, len(v)
    return i0, i1


def growth_rate(series, window: Optional[tuple] = None) -> GrowthFit:
    """Least-squares slope of ``log ||v_n||`` against ``n`` over the window."""
    v = np.asarray(series, dtype=float)
    i0, i1 = knee_window(v) if window is None else (int(window[0]), int(window[1]))
    seg = v[i0:i1]
    if len(seg) < 2:
        raise ValueError("fit window needs at least two points")
    if np.any(~(seg > 0)):
        raise ValueError("series must be positive on the fit window")
    x = np.arange(i0, i1, dtype=float)
    yv = np.log(seg)
    xm = x - x.mean()
    sxx = float(xm @ xm)
    slope = float(xm @ (yv - yv.mean())) / sxx
    resid = yv - yv.mean() - slope * xm
    dof = len(seg) - 2
    se = math.sqrt(float(resid @ resid) / dof / sxx) if dof > 0 else float("inf")
    return GrowthFit(slope, se, (slope - 1.96 * se, slope + 1.96 * se), (i0, i1), len(seg))


# ---------------------------------------------------------------------------
# stability constant of a delay embedding

def c_phi_Phi(bundle, index: int, params: DelayParams, rank_tol: float = 1e-12) -> float:
    """Largest generalised singular value of ``(D phi, D Phi)`` at bundle state ``index``.

    ``D Phi`` stacks ``D phi(f^{-j} w) (D f^j (f^{-j} w))^{-1}`` for
    ``j = 1..Q``, the derivative of ``w -> phi(f^{-j} w)``.  Returns ``inf``
    when ``D Phi`` is rank deficient on the tangent space.
    """
    Q = params.Q
    if index < Q or index >= len(bundle):
        raise ValueError(f"index must lie in [Q, len(bundle)); got {index}")
    spec, obs, stride = bundle.spec, bundle.obs, bundle.stride
    A = obs.jacobian(bundle.states[index])
    if A.shape[0] != params.d:
        raise ValueError("observation dimension does not match the delay parameters")
    m = A.shape[1]
    blocks = []
    P = np.eye(m)                      # D f^j at f^{-j} w, accumulated backwards
    for j in range(1, Q + 1):
        s = bundle.states[index - j]
        P = P @ map_jacobians(s, spec, stride)[0]
        blocks.append(obs.jacobian(s) @ np.linalg.inv(P))
    B = np.vstack(blocks)
    _, sv, Vt = np.linalg.svd(B, full_matrices=False)
    if len(sv) < m or sv.min() <= rank_tol * sv.max():
        return float("inf")
    return float(np.linalg.norm(A @ Vt.T / sv, 2))


# ---------------------------------------------------------------------------
# linearisation of the iterative error

@dataclass
class DeviationComparison:
    delta_u: np.ndarray     # (n+1, d) deviations of the reconstructed run
    a: np.ndarray           # (n+1, d) perturbed-cocycle prediction
    residuals: np.ndarray   # (n+1, d) one-step residuals r_k (r_0 = 0)

    def relative_gap(self) -> np.ndarray:
        """``||delta_u_k - a_k|| / ||a_k||`` (NaN where ``a_k = 0``)."""
        num = np.linalg.norm(self.delta_u - self.a, axis=1)
        den = np.linalg.norm(self.a, axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(den > 0, num / den, np.nan)


def compare_deviation(system, orbit, bundle, index: int, n: int) -> DeviationComparison:
    """Run the reconstructed map from orbit state ``index`` and its perturbed cocycle.

    Deviations are measured against the learned feedback evaluated on the true
    embedded orbit, ``delta_u_k = w_hat(Phi(w_{k-1})) - u_k``.  The cocycle is
    driven by ``c_k = G1(w_k) r_k`` with one-step residuals
    ``r_k = phi(w_k) - w_hat(Phi(w_{k-1}))``; the initial state is exact, so
    ``c_0 = 0``.
    """
    from .forecast import iterate_reconstruction

    if index < 0 or index + n >= len(orbit):
        raise ValueError("orbit too short for the requested run")
    obs = bundle.observations
    b = orbit.offset + index
    run = iterate_reconstruction(system, (obs[b], orbit.states[index]), n)
    if run.diverged_at is not None:
        raise CocycleDivergenceError("reconstructed run diverged", run.diverged_at)
    Ytrue = orbit.states[index:index + n + 1]
    ref = np.zeros((n + 1, system.d))
    ref[1:] = system.feedback.predict(Ytrue[:-1])
    delta_u = ref - run.u
    delta_u[0] = 0.0
    r = np.zeros((n + 1, system.d))
    r[1:] = obs[b + 1:b + n + 1] - ref[1:]
    G1, _ = system.g_jacobians(obs[b:b + n + 1], Ytrue)
    c = np.einsum("kld,kd->kl", G1, r)
    gen = reconstructed_generator(system, orbit, bundle, start=index, n=n)
    pr = perturbed_iterate(gen, system.d, c, n)
    return DeviationComparison(delta_u, pr.a, r)
