"""Timestep aggregation of ORM matrices into per-layer importance.

Per layer i, over the traced timesteps:

    gamma_i(t) = sum_{j != i} K(t)[i, j]
    z_i        = zscore(gamma_i)
    w_i        = exp(-z_i)
    rho_i      = gamma_i . w_i / ||w_i||_2      (mode "paper")
               = gamma_i . w_i / sum(w_i)       (mode "mean")
    theta_i    = exp(-(rho_i - min_k rho_k))

Subtracting min(rho) rescales every theta by the same positive factor, which
leaves the allocation argmax unchanged but keeps exp() away from underflow.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List

import numpy as np

from .orm import OrmStack

MODES = ("paper", "mean")
SIGMA_FLOOR = 1e-12


def gamma_rows(stack: OrmStack) -> np.ndarray:
    """L x T_s matrix of off-diagonal ORM row sums."""
    K = stack.array()
    off = K.copy()
    idx = np.arange(K.shape[1])
    off[:, idx, idx] = 0.0
    # cumsum accumulates left to right, the same order as a plain loop
    sums = np.cumsum(off, axis=2)[:, :, -1]
    return np.ascontiguousarray(sums.T)


def zscore(row) -> np.ndarray:
    """Population z-score; degenerate rows (one entry or ~zero spread) map to zeros."""
    x = np.asarray(row, dtype=np.float64)
    if x.size <= 1:
        return np.zeros_like(x)
    mu = x.mean()
    sigma = np.sqrt(np.mean((x - mu) ** 2))
    if sigma < SIGMA_FLOOR:
        return np.zeros_like(x)
    return (x - mu) / sigma


@dataclass
class ImportanceScores:
    gamma: np.ndarray
    z: np.ndarray
    w: np.ndarray
    rho: np.ndarray
    theta: np.ndarray
    mode: str
    timesteps: List[int]

    def to_dict(self, names=None) -> dict:
        L = self.gamma.shape[0]
        names = names or [f"layer{i}" for i in range(L)]
        return {
            "mode": self.mode,
            "timesteps": list(self.timesteps),
            "layers": [
                {
                    "layer_id": i,
                    "name": names[i],
                    "gamma": self.gamma[i].tolist(),
                    "rho": float(self.rho[i]),
                    "theta": float(self.theta[i]),
                }
                for i in range(L)
            ],
        }


def rho_from_gamma(gamma: np.ndarray, mode: str = "paper"):
    """Return (z, w, rho) for an L x T_s gamma matrix."""
    if mode not in MODES:
        raise ValueError(f"unknown aggregation mode {mode!r}; expected one of {MODES}")
    gamma = np.asarray(gamma, dtype=np.float64)
    z = np.vstack([zscore(row) for row in gamma]) if gamma.size else gamma.copy()
    w = np.exp(-z)
    num = np.einsum("ij,ij->i", gamma, w)
    if mode == "paper":
        den = np.sqrt(np.einsum("ij,ij->i", w, w))
    else:
        den = w.sum(axis=1)
    return z, w, num / den


def theta_from_rho(rho: np.ndarray) -> np.ndarray:
    rho = np.asarray(rho, dtype=np.float64)
    return np.exp(-(rho - rho.min()))


def aggregate(stack: OrmStack, mode: str = "paper") -> ImportanceScores:
    if not stack.matrices:
        raise ValueError("cannot aggregate an empty ORM stack")
    gamma = gamma_rows(stack)
    z, w, rho = rho_from_gamma(gamma, mode)
    return ImportanceScores(
        gamma=gamma,
        z=z,
        w=w,
        rho=rho,
        theta=theta_from_rho(rho),
        mode=mode,
        timesteps=list(stack.timestep_indices),
    )


def neighbor_drift(gamma: np.ndarray) -> float:
    """Mean over layers and adjacent traced timesteps of |gamma(t) - gamma(t+1)|."""
    gamma = np.asarray(gamma)
    if gamma.shape[1] < 2:
        return 0.0
    return float(np.abs(np.diff(gamma, axis=1)).mean())
