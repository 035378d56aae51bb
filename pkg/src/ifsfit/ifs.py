"""Iterated function systems: parameters, index sequences and the chaos game.

Each affine map is stored in factored form ``A = R(theta) diag(s1, s2) R(phi) diag(d1, d2)``
so that clamping the scale factors bounds the largest singular value of ``A``.
Point coordinates are ``(row, col)`` pairs; no axis is swapped anywhere in the pipeline.

The array layout used by the vectorised helpers is one row per transform::

    params[n] = [theta, phi, sigma1, sigma2, b_row, b_col]
    flips[n]  = [d1, d2]
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import DegenerateSystem, NonFiniteTrajectory

TWO_PI = 2.0 * math.pi
PARAM_NAMES = ("theta", "phi", "sigma1", "sigma2", "b_row", "b_col")
NORMALIZE_MARGIN = 1.0
NORMALIZE_EPS = 1e-6
MIN_DET_MASS = 0.1


@dataclass(frozen=True)
class ReparamTransform:
    theta: float
    phi: float
    sigma1: float
    sigma2: float
    d1: int = 1
    d2: int = 1
    b: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        for name in ("d1", "d2"):
            value = getattr(self, name)
            if value not in (-1, 1):
                raise ValueError(f"{name} must be -1 or +1, got {value!r}")
            object.__setattr__(self, name, int(value))
        b = tuple(float(x) for x in self.b)
        if len(b) != 2:
            raise ValueError("translation b must have two components")
        object.__setattr__(self, "b", b)
        for name in ("theta", "phi", "sigma1", "sigma2"):
            object.__setattr__(self, name, float(getattr(self, name)))

    def matrix(self) -> np.ndarray:
        return compose_matrix(self)

    def to_dict(self) -> dict:
        return {
            "theta": self.theta,
            "phi": self.phi,
            "sigma1": self.sigma1,
            "sigma2": self.sigma2,
            "d1": self.d1,
            "d2": self.d2,
            "b": [self.b[0], self.b[1]],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ReparamTransform":
        return cls(
            theta=data["theta"],
            phi=data["phi"],
            sigma1=data["sigma1"],
            sigma2=data["sigma2"],
            d1=int(data["d1"]),
            d2=int(data["d2"]),
            b=tuple(data["b"]),
        )


@dataclass(frozen=True)
class FractalSystem:
    """An ordered set of N affine maps, the learnable object."""

    transforms: tuple[ReparamTransform, ...]

    def __post_init__(self):
        transforms = tuple(self.transforms)
        if not transforms:
            raise ValueError("a fractal system needs at least one transform")
        object.__setattr__(self, "transforms", transforms)

    @property
    def n(self) -> int:
        return len(self.transforms)

    def __len__(self):
        return len(self.transforms)

    def __getitem__(self, idx):
        return self.transforms[idx]

    def __iter__(self):
        return iter(self.transforms)

    @property
    def params(self) -> np.ndarray:
        """``(N, 6)`` array of continuous parameters (see module docstring)."""
        return np.array(
            [[t.theta, t.phi, t.sigma1, t.sigma2, t.b[0], t.b[1]] for t in self.transforms],
            dtype=float,
        )

    @property
    def flips(self) -> np.ndarray:
        return np.array([[t.d1, t.d2] for t in self.transforms], dtype=float)

    @classmethod
    def from_arrays(cls, params, flips) -> "FractalSystem":
        params = np.asarray(params, dtype=float)
        flips = np.asarray(flips)
        return cls(
            tuple(
                ReparamTransform(
                    theta=p[0], phi=p[1], sigma1=p[2], sigma2=p[3],
                    d1=int(f[0]), d2=int(f[1]), b=(p[4], p[5]),
                )
                for p, f in zip(params, flips)
            )
        )

    def matrices(self) -> np.ndarray:
        return compose_matrices(self.params, self.flips)

    def translations(self) -> np.ndarray:
        return self.params[:, 4:6].copy()

    def to_dict(self) -> dict:
        return {"n": self.n, "transforms": [t.to_dict() for t in self.transforms]}

    def to_json(self, indent: int | None = 2) -> str:
        # json emits repr(float), which round-trips doubles exactly
        return json.dumps(self.to_dict(), indent=indent)

    @classmethod
    def from_dict(cls, data: dict) -> "FractalSystem":
        transforms = tuple(ReparamTransform.from_dict(t) for t in data["transforms"])
        if "n" in data and int(data["n"]) != len(transforms):
            raise ValueError(f"n={data['n']} but {len(transforms)} transforms listed")
        return cls(transforms)

    @classmethod
    def from_json(cls, text: str) -> "FractalSystem":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class BatchedSystemMatrix:
    """Several systems laid out column-by-column for a single gather per iteration.

    Column ``k`` of ``a_columns`` is ``A.reshape(4)`` (row-major) of one transform.
    """

    a_columns: np.ndarray
    b_columns: np.ndarray
    batch_offsets: tuple[int, ...]

    @property
    def n_columns(self) -> int:
        return self.a_columns.shape[1]

    def block_size(self, j: int) -> int:
        end = self.batch_offsets[j + 1] if j + 1 < len(self.batch_offsets) else self.n_columns
        return end - self.batch_offsets[j]

    def matrices(self) -> np.ndarray:
        return self.a_columns.T.reshape(-1, 2, 2)

    def translations(self) -> np.ndarray:
        return self.b_columns.T.copy()

    def gather(self, system_index: int, z) -> tuple[np.ndarray, np.ndarray]:
        cols = self.batch_offsets[system_index] + np.asarray(z)
        return self.a_columns[:, cols].T.reshape(*np.shape(cols), 2, 2), self.b_columns[:, cols].T


@dataclass(frozen=True)
class IndexSequence:
    indices: np.ndarray

    def __post_init__(self):
        idx = np.array(self.indices, dtype=np.int64)
        if idx.ndim != 1:
            raise ValueError("an index sequence is one-dimensional")
        idx.setflags(write=False)
        object.__setattr__(self, "indices", idx)

    def __len__(self):
        return len(self.indices)


@dataclass(frozen=True)
class PointTrajectory:
    points: np.ndarray
    indices: IndexSequence
    v0: np.ndarray
    step_matrices: np.ndarray = field(repr=False)

    @property
    def t_len(self) -> int:
        return len(self.indices)


@dataclass(frozen=True)
class NormalizationFrame:
    """Per-trajectory scale and bounding-box centre of the fit-to-canvas map.

    ``pixel = (raw - center) * scale + canvas_center``.
    """

    scale: np.ndarray
    center: np.ndarray
    canvas_center: np.ndarray

    def apply(self, points: np.ndarray) -> np.ndarray:
        return (points - self.center[..., None, :]) * self.scale[..., None, None] + self.canvas_center


def rotation(angle) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)


def compose_matrices(params, flips) -> np.ndarray:
    """Vectorised ``R(theta) diag(s1, s2) R(phi) diag(d1, d2)`` for an ``(N, 6)`` parameter array."""
    params = np.asarray(params, dtype=float)
    flips = np.asarray(flips, dtype=float)
    n = params.shape[0]
    scale = np.zeros((n, 2, 2))
    scale[:, 0, 0] = params[:, 2]
    scale[:, 1, 1] = params[:, 3]
    flip = np.zeros((n, 2, 2))
    flip[:, 0, 0] = flips[:, 0]
    flip[:, 1, 1] = flips[:, 1]
    return rotation(params[:, 0]) @ scale @ rotation(params[:, 1]) @ flip


def compose_matrix(t: ReparamTransform) -> np.ndarray:
    params = np.array([[t.theta, t.phi, t.sigma1, t.sigma2, 0.0, 0.0]])
    return compose_matrices(params, [[t.d1, t.d2]])[0]


def transform_from_matrix(a, b=(0.0, 0.0)) -> ReparamTransform:
    """Factor an arbitrary 2x2 matrix back into rotation/scale/rotation/flip form via the SVD."""
    u, s, vt = np.linalg.svd(np.asarray(a, dtype=float))
    reflect = np.diag([1.0, -1.0])
    if np.linalg.det(u) < 0:
        u = u @ reflect
        vt = reflect @ vt
    d = (1, 1)
    if np.linalg.det(vt) < 0:
        d = (1, -1)
        vt = vt @ reflect
    theta = math.atan2(u[1, 0], u[0, 0]) % TWO_PI
    phi = math.atan2(vt[1, 0], vt[0, 0]) % TWO_PI
    return ReparamTransform(theta, phi, s[0], s[1], d[0], d[1], tuple(b))


def probabilities_from_weights(weights) -> np.ndarray:
    weights = np.abs(np.asarray(weights, dtype=float))
    total = weights.sum()
    if not np.isfinite(total) or total <= 0.0:
        raise DegenerateSystem("all transforms have zero determinant")
    return weights / total


def transform_probabilities(s: FractalSystem) -> np.ndarray:
    # |det A| = s1 * s2 because |d1 d2| = 1 and rotations have unit determinant
    params = s.params
    return probabilities_from_weights(params[:, 2] * params[:, 3])


def sample_index_sequence(s: FractalSystem, t_len: int, rng: np.random.Generator) -> IndexSequence:
    if t_len < 1:
        raise ValueError("t_len must be >= 1")
    p = transform_probabilities(s)
    return IndexSequence(rng.choice(len(p), size=t_len, p=p))


def sample_index_batch(p, batch: int, t_len: int, rng: np.random.Generator) -> np.ndarray:
    """``(batch, t_len)`` i.i.d. draws from ``p``."""
    return rng.choice(len(p), size=(batch, t_len), p=p)


def sample_start_points(rng: np.random.Generator, count: int) -> np.ndarray:
    return rng.uniform(-1.0, 1.0, size=(count, 2))


def random_system(rng: np.random.Generator, n: int) -> FractalSystem:
    """Draw a random system; resampled until the total determinant mass is at least 0.1."""
    if n < 1:
        raise ValueError("n must be >= 1")
    while True:
        theta = rng.uniform(0.0, TWO_PI, n)
        phi = rng.uniform(0.0, TWO_PI, n)
        sigma1 = rng.uniform(0.0, 1.0, n)
        sigma2 = rng.uniform(0.0, 1.0, n) * sigma1
        flips = rng.choice([-1, 1], size=(n, 2))
        b = rng.uniform(-1.0, 1.0, (n, 2))
        if np.sum(sigma1 * sigma2) >= MIN_DET_MASS:
            params = np.column_stack([theta, phi, sigma1, sigma2, b])
            return FractalSystem.from_arrays(params, flips)


def run_chaos_game(matrices, translations, z, v0) -> np.ndarray:
    """Iterate ``v_t = A[z_t] v_{t-1} + b[z_t]`` for a batch of sequences.

    ``matrices`` is ``(K, 2, 2)``, ``translations`` ``(K, 2)``, ``z`` ``(B, T)`` and ``v0``
    ``(B, 2)``. Returns ``(B, T + 1, 2)`` points.
    """
    z = np.asarray(z)
    v0 = np.asarray(v0, dtype=float)
    batch, t_len = z.shape
    a = np.asarray(matrices, dtype=float)[z]
    b = np.asarray(translations, dtype=float)[z]
    # time-major contiguous copies keep the inner loop on short contiguous vectors
    a00 = np.ascontiguousarray(a[..., 0, 0].T)
    a01 = np.ascontiguousarray(a[..., 0, 1].T)
    a10 = np.ascontiguousarray(a[..., 1, 0].T)
    a11 = np.ascontiguousarray(a[..., 1, 1].T)
    b0 = np.ascontiguousarray(b[..., 0].T)
    b1 = np.ascontiguousarray(b[..., 1].T)
    xs = np.empty((t_len + 1, batch))
    ys = np.empty((t_len + 1, batch))
    xs[0] = v0[:, 0]
    ys[0] = v0[:, 1]
    with np.errstate(over="ignore", invalid="ignore"):
        for t in range(t_len):
            x, y = xs[t], ys[t]
            xs[t + 1] = a00[t] * x + a01[t] * y + b0[t]
            ys[t + 1] = a10[t] * x + a11[t] * y + b1[t]
    if not (np.isfinite(xs).all() and np.isfinite(ys).all()):
        raise NonFiniteTrajectory("chaos game diverged to a non-finite coordinate")
    return np.stack([xs.T, ys.T], axis=-1)


def iterate_ifs(s: FractalSystem, z: IndexSequence, v0) -> PointTrajectory:
    idx = z.indices if isinstance(z, IndexSequence) else np.asarray(z)
    if idx.size and (idx.min() < 0 or idx.max() >= s.n):
        raise IndexError(f"index sequence refers to transforms outside [0, {s.n})")
    mats = s.matrices()
    v0 = np.asarray(v0, dtype=float).reshape(2)
    points = run_chaos_game(mats, s.translations(), idx[None, :], v0[None, :])[0]
    return PointTrajectory(
        points=points,
        indices=z if isinstance(z, IndexSequence) else IndexSequence(idx),
        v0=v0.copy(),
        step_matrices=mats[idx],
    )


def concat_systems(systems: Sequence[FractalSystem]) -> BatchedSystemMatrix:
    if not systems:
        raise ValueError("need at least one system")
    mats = np.concatenate([s.matrices() for s in systems])
    trans = np.concatenate([s.translations() for s in systems])
    sizes = [s.n for s in systems]
    offsets = tuple(int(x) for x in np.concatenate([[0], np.cumsum(sizes)[:-1]]))
    return BatchedSystemMatrix(
        a_columns=mats.reshape(-1, 4).T.copy(),
        b_columns=trans.T.copy(),
        batch_offsets=offsets,
    )


def iterate_batched(batched: BatchedSystemMatrix, system_ids: Iterable[int], sequences, v0s) -> np.ndarray:
    """Run one trajectory per ``(system_id, sequence, v0)`` through the concatenated columns.

    All sequences must share the same length. Local indices are shifted by the owning
    system's column offset before the gather.
    """
    system_ids = np.asarray(list(system_ids))
    z = np.asarray([np.asarray(getattr(q, "indices", q)) for q in sequences])
    offsets = np.asarray(batched.batch_offsets)[system_ids]
    return run_chaos_game(batched.matrices(), batched.translations(), z + offsets[:, None], v0s)


def fit_to_canvas(points, h: int, w: int, margin: float = NORMALIZE_MARGIN,
                  eps: float = NORMALIZE_EPS) -> tuple[np.ndarray, NormalizationFrame]:
    """Isotropically rescale point sets so each bounding box is centred in an ``h x w`` canvas.

    ``points`` may be ``(P, 2)`` or batched ``(B, P, 2)``; each set gets its own frame.
    """
    if h < 2 or w < 2:
        raise ValueError("canvas must be at least 2x2")
    points = np.asarray(points, dtype=float)
    lo = points.min(axis=-2)
    hi = points.max(axis=-2)
    extent = np.maximum((hi - lo).max(axis=-1), eps)
    frame = NormalizationFrame(
        scale=(min(h, w) - 1 - 2 * margin) / extent,
        center=(lo + hi) / 2.0,
        canvas_center=np.array([(h - 1) / 2.0, (w - 1) / 2.0]),
    )
    return frame.apply(points), frame


def normalize_points(traj, h: int, w: int) -> np.ndarray:
    points = traj.points if isinstance(traj, PointTrajectory) else traj
    return fit_to_canvas(points, h, w)[0]
