"""Linear hypothesis spaces and least-squares feedback fitting.

A :class:`FeatureMap` evaluates a basis ``y -> (1, b_1(y), ..., b_{M-1}(y))``
whose first element is always the constant.  A :class:`FeedbackModel`
holds coefficients ``C`` (``M x d``) so that ``w_hat(y) = C^T features(y)``.
"""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import qr, solve_triangular
from scipy.spatial.distance import pdist

FEATURE_KINDS = ("affine", "fourier", "rbf", "poly")


class RankDeficientError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True, eq=False)
class FeatureMap:
    kind: str
    L: int
    frequencies: Optional[np.ndarray] = None   # fourier: (K, n_angles) integer rows
    angles: str = "raw"                         # fourier: "raw" or "pairs" (cos/sin pairs)
    centers: Optional[np.ndarray] = None        # rbf
    bandwidth: Optional[float] = None           # rbf
    linear: bool = False                        # rbf: append the affine block
    exponents: Optional[np.ndarray] = None      # poly: (K, L) multi-indices, K >= 1
    shift: Optional[np.ndarray] = None          # poly: input standardisation
    scale: Optional[np.ndarray] = None

    @property
    def M(self) -> int:
        if self.kind == "affine":
            return 1 + self.L
        if self.kind == "fourier":
            return 1 + 2 * len(self.frequencies)
        if self.kind == "rbf":
            return 1 + len(self.centers) + (self.L if self.linear else 0)
        return len(self.exponents)

    def _angles(self, Y):
        if self.angles == "raw":
            return Y
        return np.arctan2(Y[..., 1::2], Y[..., 0::2])

    def __call__(self, Y) -> np.ndarray:
        Y = np.asarray(Y, dtype=float)
        single = Y.ndim == 1
        Y = np.atleast_2d(Y)
        if Y.shape[-1] != self.L:
            raise ValueError(f"feature map expects inputs of dimension {self.L}, got {Y.shape[-1]}")
        ones = np.ones((len(Y), 1))
        if self.kind == "affine":
            out = np.hstack([ones, Y])
        elif self.kind == "fourier":
            arg = self._angles(Y) @ self.frequencies.T
            out = np.hstack([ones, np.cos(arg), np.sin(arg)])
        elif self.kind == "rbf":
            sq = _sqdist(Y, self.centers)
            parts = [ones, np.exp(-sq / (2.0 * self.bandwidth ** 2))]
            if self.linear:
                parts.append(Y)
            out = np.hstack(parts)
        else:
            Z = (Y - self.shift) / self.scale
            out = _monomials(Z, self.exponents)
        return out[0] if single else out

    def jacobian(self, Y) -> np.ndarray:
        """Feature derivatives, shape ``(n, M, L)``."""
        Y = np.atleast_2d(np.asarray(Y, dtype=float))
        n, L = Y.shape
        if self.kind == "affine":
            J = np.zeros((n, 1 + L, L))
            J[:, 1:, :] = np.eye(L)
            return J
        if self.kind == "fourier":
            th = self._angles(Y)
            arg = th @ self.frequencies.T
            dth = self._angle_jacobian(Y)                   # (n, n_ang, L)
            darg = np.einsum("ka,nal->nkl", self.frequencies.astype(float), dth)
            J = np.zeros((n, self.M, L))
            J[:, 1:1 + len(self.frequencies)] = -np.sin(arg)[..., None] * darg
            J[:, 1 + len(self.frequencies):] = np.cos(arg)[..., None] * darg
            return J
        if self.kind == "rbf":
            diff = Y[:, None, :] - self.centers[None]
            K = np.exp(-np.sum(diff ** 2, axis=-1) / (2.0 * self.bandwidth ** 2))
            parts = [np.zeros((n, 1, L)), -K[..., None] * diff / self.bandwidth ** 2]
            if self.linear:
                parts.append(np.broadcast_to(np.eye(L), (n, L, L)))
            return np.concatenate(parts, axis=1)
        Z = (Y - self.shift) / self.scale
        J = np.zeros((n, self.M, L))
        for l in range(L):
            e = self.exponents.copy()
            c = e[:, l].astype(float)
            e[:, l] = np.maximum(e[:, l] - 1, 0)
            J[:, :, l] = c * _monomials(Z, e) / self.scale[l]
        return J

    def _angle_jacobian(self, Y):
        n, L = Y.shape
        if self.angles == "raw":
            return np.broadcast_to(np.eye(L), (n, L, L))
        c, s = Y[:, 0::2], Y[:, 1::2]
        r2 = c ** 2 + s ** 2
        out = np.zeros((n, L // 2, L))
        for a in range(L // 2):
            out[:, a, 2 * a] = -s[:, a] / r2[:, a]
            out[:, a, 2 * a + 1] = c[:, a] / r2[:, a]
        return out

    def describe(self) -> dict:
        out = {"kind": self.kind, "L": self.L, "M": self.M}
        if self.kind == "fourier":
            out.update(frequencies=self.frequencies.tolist(), angles=self.angles)
        elif self.kind == "rbf":
            out.update(centers=self.centers.tolist(), bandwidth=self.bandwidth, linear=self.linear)
        elif self.kind == "poly":
            out.update(exponents=self.exponents.tolist(), shift=self.shift.tolist(),
                       scale=self.scale.tolist())
        return out

    @classmethod
    def from_description(cls, desc: dict) -> "FeatureMap":
        kind, L = desc["kind"], int(desc["L"])
        if kind == "affine":
            return cls("affine", L)
        if kind == "fourier":
            return cls("fourier", L, frequencies=np.asarray(desc["frequencies"], dtype=int),
                       angles=desc["angles"])
        if kind == "rbf":
            return cls("rbf", L, centers=np.asarray(desc["centers"], dtype=float),
                       bandwidth=float(desc["bandwidth"]), linear=bool(desc["linear"]))
        return cls("poly", L, exponents=np.asarray(desc["exponents"], dtype=int),
                   shift=np.asarray(desc["shift"], dtype=float),
                   scale=np.asarray(desc["scale"], dtype=float))


def _sqdist(Y, C):
    return np.maximum(np.sum(Y ** 2, 1)[:, None] - 2.0 * Y @ C.T + np.sum(C ** 2, 1)[None, :], 0.0)


def _monomials(Z, exponents):
    out = np.ones((len(Z), len(exponents)))
    for l in range(Z.shape[1]):
        col = exponents[:, l]
        if np.any(col):
            out *= Z[:, l:l + 1] ** col[None, :]
    return out


def build_feature_map(kind: str, L: int, orbit=None, **params) -> FeatureMap:
    """Construct a hypothesis space on ``R^L``.

    fourier: ``frequencies`` as a list of ints (harmonics applied to each angle
    separately) or of integer vectors; ``angles`` is "raw" (inputs are angles)
    or "pairs" (inputs are ``(cos, sin)`` pairs).
    rbf: ``n_centers`` points taken every ``ceil(N / n_centers)``-th orbit
    state, ``bandwidth`` defaulting to the median pairwise center distance;
    ``centers`` may be given explicitly; ``linear`` appends ``y`` itself.
    poly: total ``degree``; inputs are standardised with the orbit's mean and
    standard deviation when an orbit is supplied.
    """
    if kind not in FEATURE_KINDS:
        raise ValueError(f"unknown feature kind {kind!r}; expected one of {FEATURE_KINDS}")
    states = None if orbit is None else np.asarray(getattr(orbit, "states", orbit), dtype=float)
    if kind == "affine":
        return FeatureMap("affine", L)
    if kind == "fourier":
        angles = params.get("angles", "raw")
        if angles not in ("raw", "pairs"):
            raise ValueError("fourier angles must be 'raw' or 'pairs'")
        n_ang = L if angles == "raw" else L // 2
        if angles == "pairs" and L % 2:
            raise ValueError("'pairs' angle mode needs an even input dimension")
        freqs = params.get("frequencies")
        if freqs is None or len(freqs) == 0:
            raise ValueError("fourier features need a non-empty frequency set")
        if np.ndim(freqs[0]) == 0:
            rows = []
            for a in range(n_ang):
                for k in freqs:
                    r = np.zeros(n_ang, dtype=int)
                    r[a] = int(k)
                    rows.append(r)
            F = np.array(rows)
        else:
            F = np.asarray(freqs, dtype=int)
            if F.shape[1] != n_ang:
                raise ValueError("frequency vectors must match the number of angles")
        return FeatureMap("fourier", L, frequencies=F, angles=angles)
    if kind == "rbf":
        centers = params.get("centers")
        if centers is None:
            n_centers = int(params.get("n_centers", 0))
            if states is None or n_centers < 1:
                raise ValueError("rbf features need explicit centers or an orbit and n_centers >= 1")
            step = math.ceil(len(states) / n_centers)
            centers = states[::step][:n_centers]
        centers = np.atleast_2d(np.asarray(centers, dtype=float))
        if len(centers) == 0:
            raise ValueError("rbf features need a non-empty center set")
        bw = params.get("bandwidth")
        if bw is None:
            bw = float(np.median(pdist(centers))) if len(centers) > 1 else 1.0
        if not bw > 0:
            raise ValueError("rbf bandwidth must be positive")
        return FeatureMap("rbf", L, centers=centers, bandwidth=float(bw),
                          linear=bool(params.get("linear", False)))
    degree = int(params.get("degree", 2))
    if degree < 0:
        raise ValueError("poly degree must be >= 0")
    exps = [e for e in itertools.product(range(degree + 1), repeat=L) if sum(e) <= degree]
    exps.sort(key=lambda e: (sum(e), tuple(-v for v in e)))
    shift = np.zeros(L) if states is None else states.mean(axis=0)
    scale = np.ones(L) if states is None else states.std(axis=0)
    scale = np.where(scale > 0, scale, 1.0)
    return FeatureMap("poly", L, exponents=np.array(exps, dtype=int), shift=shift, scale=scale)


# ---------------------------------------------------------------------------
# fitting

@dataclass(frozen=True, eq=False)
class FeedbackModel:
    fmap: FeatureMap
    coef: np.ndarray
    horizon: int = 1
    ridge: float = 0.0
    delta: float = float("nan")
    train_rmse: float = float("nan")
    condition: float = float("nan")
    n_train: int = 0
    n_holdout: int = 0
    seed: Optional[int] = None

    @property
    def d(self) -> int:
        return self.coef.shape[1]

    def predict(self, Y) -> np.ndarray:
        return self.fmap(Y) @ self.coef

    __call__ = predict

    def jacobian(self, Y) -> np.ndarray:
        """``D w_hat`` at each ``y``, shape ``(n, d, L)``."""
        return np.einsum("nml,md->ndl", self.fmap.jacobian(Y), self.coef)

    def to_json(self) -> str:
        return json.dumps({
            "feature_map": self.fmap.describe(),
            "coef_shape": list(self.coef.shape),
            "coef": self.coef.ravel(order="C").tolist(),
            "horizon": self.horizon, "ridge": self.ridge, "delta": self.delta,
            "train_rmse": self.train_rmse, "condition": self.condition,
            "n_train": self.n_train, "n_holdout": self.n_holdout, "seed": self.seed,
        })

    @classmethod
    def from_json(cls, text: str) -> "FeedbackModel":
        d = json.loads(text)
        coef = np.asarray(d["coef"], dtype=float).reshape(d["coef_shape"])
        return cls(FeatureMap.from_description(d["feature_map"]), coef, d["horizon"], d["ridge"],
                   d["delta"], d["train_rmse"], d["condition"], d["n_train"], d["n_holdout"],
                   d["seed"])


@dataclass
class _Factorization:
    R: np.ndarray
    Qt_rows: np.ndarray   # Q^T restricted to the data rows: (k, n)
    perm: np.ndarray
    rank: int
    condition: float


def _factor(X: np.ndarray, ridge: float) -> _Factorization:
    n, M = X.shape
    A = X if ridge == 0 else np.vstack([X, math.sqrt(ridge) * np.eye(M)])
    Q, R, perm = qr(A, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    tol = max(A.shape) * np.finfo(float).eps * (diag[0] if len(diag) else 0.0)
    rank = int(np.sum(diag > tol))
    cond = float(diag[0] / diag[rank - 1]) if rank else float("inf")
    return _Factorization(R, Q[:n].T, perm, rank, cond)


def _solve(fac: _Factorization, T: np.ndarray) -> np.ndarray:
    # augmented right-hand side rows are zero, so only the data rows of Q enter
    M = fac.R.shape[1]
    z = fac.Qt_rows @ T
    sol = solve_triangular(fac.R, z)
    coef = np.empty((M,) + T.shape[1:])
    coef[fac.perm] = sol
    return coef


def default_ridge(X: np.ndarray) -> float:
    return 1e-8 * float(np.sum(X * X)) / X.shape[1]


def _split(n: int, holdout: float):
    if not 0.0 <= holdout < 1.0:
        raise ValueError("holdout fraction must be in [0, 1)")
    n_train = n - int(math.floor(holdout * n))
    if n_train < 1:
        raise ValueError("no training samples left after the held-out split")
    return n_train


def _rms(residual: np.ndarray) -> float:
    if residual.size == 0:
        return float("nan")
    r = residual.reshape(len(residual), -1)
    return float(math.sqrt(np.mean(np.sum(r * r, axis=1))))


def fit_feedback(orbit, targets, fmap: FeatureMap, ridge: Optional[float] = None, k: int = 1,
                 holdout: float = 0.2, seed=None) -> FeedbackModel:
    """Ridge least squares ``min sum ||t_n - C^T b(y_n)||^2 + ridge ||C||_F^2``.

    The last ``holdout`` fraction of samples is held out; ``delta`` is the RMS
    residual there.  ``ridge=None`` selects ``1e-8 * trace(X^T X) / M``; with
    ``ridge=0`` a rank-deficient design raises :class:`RankDeficientError`.
    """
    Y = np.asarray(getattr(orbit, "states", orbit), dtype=float)
    T = np.asarray(targets, dtype=float)
    if T.ndim == 1:
        T = T[:, None]
    if len(Y) != len(T):
        raise ValueError("orbit and targets must be aligned (equal length)")
    return fit_direct_models(Y, T[:, None, :], fmap, horizons=[k], ridge=ridge,
                             holdout=holdout, seed=seed)[0]


def fit_direct_models(Y, targets, fmap: FeatureMap, horizons: Sequence[int],
                      ridge: Optional[float] = None, holdout: float = 0.2, seed=None) -> list:
    """Fit one model per horizon from a shared design; ``targets`` is ``(n, H, d)``."""
    Y = np.asarray(getattr(Y, "states", Y), dtype=float)
    T = np.asarray(targets, dtype=float)
    n, H, d = T.shape
    if H != len(horizons) or len(Y) != n:
        raise ValueError("targets must have shape (len(Y), len(horizons), d)")
    n_train = _split(n, holdout)
    X = fmap(Y)
    Xtr = X[:n_train]
    lam = default_ridge(Xtr) if ridge is None else float(ridge)
    if lam < 0:
        raise ValueError("ridge must be non-negative")
    fac = _factor(Xtr, lam)
    if fac.rank < X.shape[1]:
        if lam == 0:
            raise RankDeficientError(
                f"design matrix has rank {fac.rank} < {X.shape[1]} features; use ridge > 0")
    flat = T.reshape(n, H * d)
    coef = _solve(fac, flat[:n_train]).reshape(X.shape[1], H, d)
    models = []
    for j, h in enumerate(horizons):
        C = np.ascontiguousarray(coef[:, j, :])
        pred = X @ C
        res = T[:, j, :] - pred
        models.append(FeedbackModel(fmap, C, int(h), lam, _rms(res[n_train:]), _rms(res[:n_train]),
                                    fac.condition, n_train, n - n_train, seed))
    return models


def fit_horizon_models(bundle, orbit, fmap: FeatureMap, horizons: Sequence[int],
                       ridge: Optional[float] = None, holdout: float = 0.2, seed=None,
                       chunk: int = 64) -> list:
    """Per-horizon models ``w_hat_h`` from a bundle and an aligned orbit.

    All horizons share the sample set (orbit states whose largest horizon stays
    inside the bundle), the held-out split and one factorisation; targets are
    assembled ``chunk`` horizons at a time to bound memory.
    """
    horizons = [int(h) for h in horizons]
    if not horizons or min(horizons) < 0:
        raise ValueError("horizons must be a non-empty list of non-negative integers")
    obs = bundle.observations
    n = min(len(orbit), len(obs) - orbit.offset - max(horizons))
    if n < 2:
        raise ValueError("bundle too short for the requested horizons")
    Y = np.asarray(orbit.states[:n])
    n_train = _split(n, holdout)
    X = fmap(Y)
    lam = default_ridge(X[:n_train]) if ridge is None else float(ridge)
    if lam < 0:
        raise ValueError("ridge must be non-negative")
    fac = _factor(X[:n_train], lam)
    if fac.rank < X.shape[1] and lam == 0:
        raise RankDeficientError(
            f"design matrix has rank {fac.rank} < {X.shape[1]} features; use ridge > 0")
    base = orbit.offset + np.arange(n)
    models = []
    d = obs.shape[1]
    for start in range(0, len(horizons), chunk):
        hs = np.asarray(horizons[start:start + chunk])
        T = obs[base[:, None] + hs[None, :]].reshape(n, len(hs) * d)   # columns (h, d)
        coef = _solve(fac, T[:n_train])
        res2 = (T - X @ coef) ** 2
        train = res2[:n_train].mean(axis=0).reshape(len(hs), d).sum(axis=1)
        held = (res2[n_train:].mean(axis=0).reshape(len(hs), d).sum(axis=1) if n > n_train
                else np.full(len(hs), np.nan))
        coef = coef.reshape(X.shape[1], len(hs), d)
        for j, h in enumerate(hs):
            C = np.ascontiguousarray(coef[:, j, :])
            models.append(FeedbackModel(fmap, C, int(h), lam, math.sqrt(held[j]), math.sqrt(train[j]),
                                        fac.condition, n_train, n - n_train, seed))
    return models


def holdout_indices(model: FeedbackModel) -> np.ndarray:
    """Orbit indices of the held-out samples used to measure ``model.delta``."""
    return np.arange(model.n_train, model.n_train + model.n_holdout)


def training_pairs(bundle, orbit, horizons: Sequence[int]):
    """Aligned samples ``(Y, T)`` with ``T[i, j] = phi(w_{offset+i+horizons[j]})``.

    Only orbit states for which every horizon stays inside the bundle are kept.
    """
    obs = bundle.observations
    hmax = max(horizons)
    n = min(len(orbit), len(obs) - orbit.offset - hmax)
    if n < 1:
        raise ValueError("bundle too short for the requested horizons")
    base = orbit.offset + np.arange(n)
    T = np.stack([obs[base + h] for h in horizons], axis=1)
    return orbit.states[:n], T


def project_empirical(fmap: FeatureMap, Y, values, ridge: float = 0.0):
    """Least-squares projection of ``values`` onto the feature span at the samples.

    Returns ``(fitted, rms_residual)`` using uniform sample weights.
    """
    V = np.asarray(values, dtype=float)
    squeeze = V.ndim == 1
    V2 = V[:, None] if squeeze else V
    if len(V2) < 1:
        raise ValueError("need at least one sample")
    X = fmap(np.asarray(Y, dtype=float))
    fac = _factor(X, float(ridge))
    if ridge == 0:
        # orthogonal projector on the numerically independent columns; stable even
        # when the features are badly conditioned
        Qk = fac.Qt_rows[:fac.rank]
        fitted = Qk.T @ (Qk @ V2)
    else:
        fitted = X @ _solve(fac, V2)
    res = _rms(V2 - fitted)
    return (fitted[:, 0] if squeeze else fitted), res


def projection_error(model: FeedbackModel) -> float:
    if model.n_holdout == 0:
        raise ValueError("model was fitted without a held-out split")
    return model.delta
