"""Orthogonality metric (ORM) between layer outputs.

For activations ``a`` (n x d_i) and ``b`` (n x d_j)::

    ORM(a, b) = ||b^T a||_F^2 / (||a^T a||_F * ||b^T b||_F)

The value is 0 for orthogonal layer outputs and 1 for linearly dependent
ones. It is the uncentered form of linear CKA; centering is available as an
opt-in flag but is off by default.

The numerator can be evaluated in feature space (a d_j x d_i cross product)
or in sample space (inner product of the two n x n Gram matrices, using
``||b^T a||_F^2 = tr(a a^T b b^T)``). Both are implemented; the cheaper one
is picked per pair.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List

import numpy as np

from .errors import ZeroActivation
from .trace_store import ActivationTrace

ZERO_NORM = 1e-30
RANGE_SLACK = 1e-9


def _as_f64(x) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 2:
        raise ValueError(f"activation must be a 2-D (samples x features) matrix, got shape {x.shape}")
    return np.ascontiguousarray(x, dtype=np.float64)


def center(x: np.ndarray) -> np.ndarray:
    return x - x.mean(axis=0, keepdims=True)


def _frob_sq(m: np.ndarray) -> float:
    # One dot over a fixed contiguous layout: same inputs, same bits.
    flat = m.ravel()
    return float(np.dot(flat, flat))


def feature_gram_norm(x: np.ndarray) -> float:
    """||x^T x||_F, evaluated on whichever Gram matrix is smaller."""
    n, d = x.shape
    g = x.T @ x if d <= n else x @ x.T
    return float(np.sqrt(_frob_sq(g)))


def cross_feature(a: np.ndarray, b: np.ndarray) -> float:
    """Numerator via the feature path: ||b^T a||_F^2."""
    return _frob_sq(b.T @ a)


def cross_sample(a: np.ndarray, b: np.ndarray) -> float:
    """Numerator via the sample path: <a a^T, b b^T>_F."""
    ga = a @ a.T
    gb = b @ b.T
    return float(np.dot(ga.ravel(), gb.ravel()))


def _finish(num: float, den_a: float, den_b: float) -> float:
    value = num / (den_a * den_b)
    if not -RANGE_SLACK <= value <= 1.0 + RANGE_SLACK:
        raise ArithmeticError(f"ORM value {value!r} outside [0, 1] beyond tolerance")
    return min(max(value, 0.0), 1.0)


def orm_pair(a, b, *, path: str = "auto", centered: bool = False) -> float:
    """ORM between two activation matrices sharing the sample axis.

    ``path`` is ``"feature"``, ``"sample"`` or ``"auto"`` (sample path when
    n < min(d_i, d_j)).
    """
    a = _as_f64(a)
    b = _as_f64(b)
    if a.shape[0] != b.shape[0]:
        raise ValueError(f"row counts differ: {a.shape[0]} vs {b.shape[0]}")
    if a.shape[0] < 1:
        raise ValueError("need at least one sample")
    if centered:
        a, b = center(a), center(b)
    den_a = feature_gram_norm(a)
    if den_a < ZERO_NORM:
        raise ZeroActivation("first activation has zero Gram norm")
    den_b = feature_gram_norm(b)
    if den_b < ZERO_NORM:
        raise ZeroActivation("second activation has zero Gram norm")
    if path == "auto":
        path = "sample" if a.shape[0] < min(a.shape[1], b.shape[1]) else "feature"
    if path == "feature":
        num = cross_feature(a, b)
    elif path == "sample":
        num = cross_sample(a, b)
    else:
        raise ValueError(f"unknown path {path!r}")
    return _finish(num, den_a, den_b)


@dataclass
class OrmMatrix:
    timestep: int
    values: np.ndarray


@dataclass
class OrmStack:
    matrices: List[OrmMatrix]
    timestep_indices: List[int]

    def __post_init__(self):
        if len(self.matrices) != len(self.timestep_indices):
            raise ValueError("one matrix per timestep label required")
        dims = {m.values.shape for m in self.matrices}
        if len(dims) > 1:
            raise ValueError(f"matrices disagree on shape: {sorted(dims)}")

    @property
    def num_layers(self) -> int:
        return self.matrices[0].values.shape[0]

    def array(self) -> np.ndarray:
        """T_s x L x L array of the stacked matrices."""
        return np.stack([m.values for m in self.matrices])

    def subset(self, timesteps) -> "OrmStack":
        pos = {t: k for k, t in enumerate(self.timestep_indices)}
        chosen = sorted(set(int(t) for t in timesteps))
        return OrmStack([self.matrices[pos[t]] for t in chosen], chosen)

    def to_dict(self) -> dict:
        return {
            "num_layers": self.num_layers,
            "timesteps": list(self.timestep_indices),
            "matrices": [m.values.tolist() for m in self.matrices],
        }


def orm_matrix(trace: ActivationTrace, t: int, *, centered: bool = False) -> OrmMatrix:
    """Full L x L ORM matrix at timestep ``t``; diagonal set to 1 by definition."""
    L = trace.num_layers
    acts = [_as_f64(trace.layer(t, i)) for i in range(L)]
    if centered:
        acts = [center(x) for x in acts]
    n = acts[0].shape[0]
    norms = []
    for i, x in enumerate(acts):
        nrm = feature_gram_norm(x)
        if nrm < ZERO_NORM:
            raise ZeroActivation(
                f"layer {i} has zero activation Gram norm at timestep {t}", layer_id=i, timestep=t
            )
        norms.append(nrm)
    dims = [x.shape[1] for x in acts]
    sample_grams = {}

    def sample_gram(i):
        if i not in sample_grams:
            sample_grams[i] = (acts[i] @ acts[i].T).ravel()
        return sample_grams[i]

    K = np.eye(L)
    for i in range(L):
        for j in range(i + 1, L):
            if n < min(dims[i], dims[j]):
                num = float(np.dot(sample_gram(i), sample_gram(j)))
            else:
                num = cross_feature(acts[i], acts[j])
            K[i, j] = K[j, i] = _finish(num, norms[i], norms[j])
    return OrmMatrix(timestep=t, values=K)


def orm_stack(trace: ActivationTrace, *, centered: bool = False) -> OrmStack:
    """One ORM matrix per traced timestep, ascending."""
    ts = sorted(trace.timesteps)
    mats = []
    for t in ts:
        try:
            mats.append(orm_matrix(trace, t, centered=centered))
        except ZeroActivation as exc:
            exc.timestep = t
            raise
    return OrmStack(mats, ts)
