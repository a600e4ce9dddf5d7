"""Embedding paradigms: driven reservoirs (implicit) and delay coordinates (explicit).

Both expose the update map ``g(u, y)`` satisfying ``Phi(f w) = g(phi(w), Phi(w))``
on the attractor, plus its partial Jacobians.

Delay-vector convention: the embedded state aligned with orbit index ``n`` is

    y_n = (phi_{n-1}, phi_{n-2}, ..., phi_{n-Q}),

most recent block first, so that ``g(u, y) = (u, y^(1), ..., y^(Q-1))``
maps ``(phi_n, y_n)`` exactly onto ``y_{n+1}``.  The first aligned index is
therefore ``Q``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .dynsys import TrajectoryBundle


@dataclass(frozen=True, eq=False)
class ReservoirParams:
    L: int
    d: int
    lam: float
    W_in: np.ndarray
    W_Y: np.ndarray
    v_bias: np.ndarray
    seed: Optional[int] = None

    def __post_init__(self):
        if self.W_in.shape != (self.L, self.d) or self.W_Y.shape != (self.L, self.L):
            raise ValueError("reservoir matrix shapes do not match (L, d)")
        if self.v_bias.shape != (self.L,):
            raise ValueError("bias must have shape (L,)")
        for a in (self.W_in, self.W_Y, self.v_bias):
            if not np.all(np.isfinite(a)):
                raise ValueError("reservoir parameters must be finite")
            a.setflags(write=False)
        if np.linalg.norm(self.W_Y, 2) > self.lam * (1 + 1e-12):
            raise ValueError("||W_Y||_2 exceeds the contraction factor")

    @property
    def paradigm(self) -> str:
        return "reservoir"

    def describe(self) -> dict:
        return {"paradigm": "reservoir", "L": self.L, "d": self.d, "lambda": self.lam, "seed": self.seed}


@dataclass(frozen=True)
class DelayParams:
    Q: int
    d: int

    def __post_init__(self):
        if self.Q < 1 or self.d < 1:
            raise ValueError("need Q >= 1 and d >= 1")

    @property
    def L(self) -> int:
        return self.Q * self.d

    @property
    def paradigm(self) -> str:
        return "delay"

    def describe(self) -> dict:
        return {"paradigm": "delay", "L": self.L, "Q": self.Q, "d": self.d}


@dataclass(frozen=True)
class EmbeddedOrbit:
    """Embedded states ``y`` aligned so that ``states[i]`` is ``Phi(w_{offset+i})``."""

    paradigm: str
    states: np.ndarray
    offset: int
    washout: int = 0
    params: object = None

    def __post_init__(self):
        self.states.setflags(write=False)

    def __len__(self) -> int:
        return len(self.states)

    @property
    def L(self) -> int:
        return self.states.shape[1]

    def bundle_indices(self, idx=None) -> np.ndarray:
        idx = np.arange(len(self)) if idx is None else np.asarray(idx)
        return idx + self.offset

    def to_csv(self, path, sidecar: Optional[str] = None, seed=None) -> None:
        """Write ``step,y_0..y_{L-1}`` plus a JSON sidecar with the alignment."""
        header = "step," + ",".join(f"y_{i}" for i in range(self.L))
        with open(path, "w") as fh:
            fh.write(header + "\n")
            for n, y in enumerate(self.states):
                fh.write(f"{n + self.offset}," + ",".join(f"{v:.17g}" for v in y) + "\n")
        meta = {"offset": self.offset, "washout": self.washout, "L": self.L, "seed": seed}
        if self.params is not None:
            meta.update(self.params.describe())
        meta["paradigm"] = self.paradigm
        with open(sidecar or str(path) + ".json", "w") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# reservoir

def reservoir_init(L: int, d: int, lam: float = 0.9, seed=None) -> ReservoirParams:
    """Random reservoir with ``||W_Y||_2 = lam`` and ``||W_in||_2 = 1``."""
    if L < 1 or d < 1:
        raise ValueError("need L >= 1 and d >= 1")
    if not 0.0 < lam < 1.0:
        raise ValueError(f"contraction factor must be in (0, 1), got {lam}")
    rng = np.random.default_rng(seed)
    W_Y = rng.standard_normal((L, L))
    W_Y *= lam / np.linalg.norm(W_Y, 2)
    W_in = rng.standard_normal((L, d))
    W_in /= np.linalg.norm(W_in, 2)
    v_bias = rng.uniform(-1.0, 1.0, size=L)
    return ReservoirParams(L, d, lam, W_in, W_Y, v_bias, seed)


def reservoir_g(params: ReservoirParams, u, y) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    y = np.asarray(y, dtype=float)
    return np.tanh(u @ params.W_in.T + y @ params.W_Y.T + params.v_bias)


def reservoir_jacobians(params: ReservoirParams, u, y):
    """``(dg/du, dg/dy)`` at ``(u, y)``; shapes ``(..., L, d)`` and ``(..., L, L)``."""
    s = 1.0 - reservoir_g(params, u, y) ** 2
    return s[..., :, None] * params.W_in, s[..., :, None] * params.W_Y


def drive(params: ReservoirParams, inputs, y0=None, washout: int = 500) -> EmbeddedOrbit:
    """Run ``y_{n+1} = g(u_n, y_n)`` over ``inputs`` and drop the first ``washout`` states.

    ``y_n`` is aligned with input index ``n``; the returned orbit has offset
    ``washout`` and length ``len(inputs) - washout``.
    """
    inputs = np.asarray(inputs, dtype=float)
    if inputs.ndim == 1:
        inputs = inputs[:, None]
    n = len(inputs)
    if inputs.shape[1] != params.d:
        raise ValueError(f"input dimension {inputs.shape[1]} != reservoir d={params.d}")
    if not 0 <= washout < n:
        raise ValueError("need 0 <= washout < len(inputs)")
    y = np.zeros(params.L) if y0 is None else np.array(y0, dtype=float)
    if y.shape != (params.L,):
        raise ValueError("y0 must have shape (L,)")
    states = np.empty((n, params.L))
    A, B, c = params.W_in, params.W_Y, params.v_bias
    for k in range(n):
        states[k] = y
        y = np.tanh(inputs[k] @ A.T + y @ B.T + c)    # same expression as reservoir_g
    return EmbeddedOrbit("reservoir", states[washout:].copy(), washout, washout, params)


def fixed_point(params: ReservoirParams, u, y0=None, tol: float = 1e-14, max_iter: int = 10_000):
    """Fixed point of ``y -> g(u, y)`` for a constant input (Banach iteration)."""
    y = np.zeros(params.L) if y0 is None else np.asarray(y0, dtype=float)
    for _ in range(max_iter):
        nxt = reservoir_g(params, u, y)
        if np.linalg.norm(nxt - y) <= tol:
            return nxt
        y = nxt
    return y


# ---------------------------------------------------------------------------
# delay coordinates

def _obs_array(source) -> np.ndarray:
    arr = source.observations if isinstance(source, TrajectoryBundle) else np.asarray(source, dtype=float)
    return arr[:, None] if arr.ndim == 1 else arr


def delay_embed(source, params: DelayParams) -> EmbeddedOrbit:
    """Stack delay vectors ``y_n = (phi_{n-1}, ..., phi_{n-Q})`` for ``n = Q .. N-1``.

    ``source`` is a TrajectoryBundle or an ``(N, d)`` observation array.
    Blocks are exact copies of the observations.
    """
    phi = _obs_array(source)
    N, d = phi.shape
    if d != params.d:
        raise ValueError(f"observation dimension {d} != delay d={params.d}")
    Q = params.Q
    if N < Q + 1:
        raise ValueError(f"series of length {N} too short for Q={Q} delays")
    states = np.empty((N - Q, Q * d))
    for j in range(1, Q + 1):
        states[:, (j - 1) * d:j * d] = phi[Q - j:N - j]
    return EmbeddedOrbit("delay", states, Q, 0, params)


def delay_g(u, y, params: DelayParams) -> np.ndarray:
    """Shift-and-insert: ``(u, y^(1), ..., y^(Q-1))``."""
    u = np.asarray(u, dtype=float)
    y = np.asarray(y, dtype=float)
    if u.shape[-1] != params.d or y.shape[-1] != params.L:
        raise ValueError("dimension mismatch in delay_g")
    return np.concatenate([u, y[..., :params.L - params.d]], axis=-1)


def delay_jacobians(params: DelayParams):
    """Constant ``(dg/du, dg/dy)`` of the shift map: ``[I; 0]`` and the block subdiagonal."""
    L, d = params.L, params.d
    G1 = np.zeros((L, d))
    G1[:d, :d] = np.eye(d)
    G2 = np.zeros((L, L))
    if L > d:
        G2[d:, :L - d] = np.eye(L - d)
    return G1, G2


# ---------------------------------------------------------------------------
# injectivity

@dataclass
class InjectivityReport:
    n_pairs: int
    n_false: int
    tol: float
    state_tol: float
    max_state_distance: float
    false_pairs: np.ndarray = field(repr=False, default=None)

    @property
    def false_fraction(self) -> float:
        return self.n_false / self.n_pairs if self.n_pairs else 0.0


def injectivity_diagnostic(orbit: EmbeddedOrbit, bundle: TrajectoryBundle, tol: float,
                           state_tol: Optional[float] = None, theiler: int = 0,
                           max_points: Optional[int] = None) -> InjectivityReport:
    """Scan embedded near-neighbour pairs for large separations in the hidden state.

    Pairs with ``||y_i - y_j|| < tol`` (and ``|i - j| > theiler``) are checked;
    a pair is a false neighbour when ``||w_i - w_j|| > state_tol``, which
    defaults to 10% of the attractor diameter.  ``max_points`` thins the orbit
    evenly to bound the cost.
    """
    Y = orbit.states
    W = bundle.states[orbit.offset:orbit.offset + len(orbit)]
    if len(W) != len(Y):
        raise ValueError("orbit is not aligned with the bundle")
    keep = np.arange(len(Y))
    if max_points is not None and len(Y) > max_points:
        keep = keep[::math.ceil(len(Y) / max_points)]
    Y, W = Y[keep], W[keep]
    if state_tol is None:
        state_tol = 0.1 * float(np.linalg.norm(W.max(axis=0) - W.min(axis=0)))
    pairs = cKDTree(Y).query_pairs(tol, output_type="ndarray")
    if theiler > 0 and len(pairs):
        pairs = pairs[np.abs(keep[pairs[:, 0]] - keep[pairs[:, 1]]) > theiler]
    if len(pairs) == 0:
        return InjectivityReport(0, 0, tol, state_tol, 0.0, np.empty((0, 2), dtype=int))
    dist = np.linalg.norm(W[pairs[:, 0]] - W[pairs[:, 1]], axis=1)
    bad = dist > state_tol
    return InjectivityReport(len(pairs), int(bad.sum()), tol, state_tol, float(dist.max()),
                             keep[pairs[bad]])
