"""Uniform fake quantization of weights and activations.

Symmetric:  x_hat = clip(round(x / s), l, u) * s,
            l = -2^(b-1), u = 2^(b-1) - 1.
Asymmetric: x_hat = D * (clip(round(x / D) + Z, 0, 2^b - 1) - Z),
            D = (max(x) - min(x)) / (2^b - 1), Z = -round(min(x) / D).

``round`` is half-away-from-zero everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Sequence

import numpy as np

SYMMETRIC = "symmetric"
ASYMMETRIC = "asymmetric"
ACTIVATION_BITS = 8


def round_half_away(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    whole = np.trunc(x)
    frac = x - whole  # exact for floats
    return whole + np.where(np.abs(frac) >= 0.5, np.sign(x), 0.0)


@dataclass(frozen=True)
class QuantizerConfig:
    scheme: str
    bits: int
    step: float
    zero_point: int
    clip_lo: int
    clip_hi: int
    rounding: str = "half_away_from_zero"

    def __post_init__(self):
        if not 1 <= self.bits <= 32:
            raise ValueError(f"bits must lie in [1, 32], got {self.bits}")
        if not self.step > 0:
            raise ValueError("step must be positive")
        if self.scheme == SYMMETRIC:
            if (self.clip_lo, self.clip_hi) != symmetric_bounds(self.bits):
                raise ValueError("symmetric clip bounds must be [-2^(b-1), 2^(b-1)-1]")
        elif self.scheme == ASYMMETRIC:
            if (self.clip_lo, self.clip_hi) != (0, 2**self.bits - 1):
                raise ValueError("asymmetric clip range must be [0, 2^b - 1]")
        else:
            raise ValueError(f"unknown scheme {self.scheme!r}")

    @property
    def levels(self) -> int:
        return self.clip_hi - self.clip_lo + 1


def symmetric_bounds(bits: int):
    return -(2 ** (bits - 1)), 2 ** (bits - 1) - 1


def _check_finite(x: np.ndarray) -> None:
    if not np.all(np.isfinite(x)):
        raise ValueError("input contains non-finite values")


def calibrate_symmetric(x, bits: int) -> QuantizerConfig:
    """Step s = max|x| / u (max|x| / |l| when u == 0, i.e. 1 bit)."""
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise ValueError("cannot calibrate on an empty tensor")
    _check_finite(x)
    lo, hi = symmetric_bounds(bits)
    amax = float(np.max(np.abs(x)))
    step = amax / (hi if hi > 0 else -lo) if amax > 0 else 1.0
    return QuantizerConfig(SYMMETRIC, bits, step, 0, lo, hi)


def quantize_symmetric(x, cfg: QuantizerConfig) -> np.ndarray:
    if cfg.scheme != SYMMETRIC:
        raise ValueError("config is not symmetric")
    x = np.asarray(x, dtype=np.float64)
    _check_finite(x)
    q = np.clip(round_half_away(x / cfg.step), cfg.clip_lo, cfg.clip_hi)
    return q * cfg.step


def calibrate_asymmetric(x, bits: int) -> QuantizerConfig:
    """Min/max calibration.

    A constant tensor gets a step of |c| (1 for c == 0) and a zero point that
    puts c exactly on the grid, so it reconstructs without error.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise ValueError("cannot calibrate on an empty tensor")
    _check_finite(x)
    top = 2**bits - 1
    lo, hi = float(np.min(x)), float(np.max(x))
    if hi == lo:
        step = abs(lo) if lo != 0 else 1.0
        zp = 1 if lo < 0 else 0
        return QuantizerConfig(ASYMMETRIC, bits, step, zp, 0, top)
    step = (hi - lo) / top
    zp = int(-round_half_away(lo / step))
    return QuantizerConfig(ASYMMETRIC, bits, step, zp, 0, top)


def quantize_asymmetric(x, cfg: QuantizerConfig) -> np.ndarray:
    if cfg.scheme != ASYMMETRIC:
        raise ValueError("config is not asymmetric")
    x = np.asarray(x, dtype=np.float64)
    _check_finite(x)
    q = np.clip(round_half_away(x / cfg.step) + cfg.zero_point, cfg.clip_lo, cfg.clip_hi)
    return cfg.step * (q - cfg.zero_point)


def calibrate(x, bits: int, scheme: str) -> QuantizerConfig:
    if scheme == SYMMETRIC:
        return calibrate_symmetric(x, bits)
    if scheme == ASYMMETRIC:
        return calibrate_asymmetric(x, bits)
    raise ValueError(f"unknown scheme {scheme!r}")


def quantize(x, cfg: QuantizerConfig) -> np.ndarray:
    if cfg.scheme == SYMMETRIC:
        return quantize_symmetric(x, cfg)
    return quantize_asymmetric(x, cfg)


def fake_quantize(x, bits: int, scheme: str = SYMMETRIC) -> np.ndarray:
    """Calibrate per tensor on ``x`` and return its reconstruction."""
    x = np.asarray(x, dtype=np.float64)
    return quantize(x, calibrate(x, bits, scheme))


def quantize_activation(x) -> np.ndarray:
    return fake_quantize(x, ACTIVATION_BITS, ASYMMETRIC)


@dataclass
class LayerError:
    mse: float
    max_abs: float


def apply_allocation(
    weights: Sequence[np.ndarray], bits: Sequence[int], scheme: str = SYMMETRIC
):
    """Fake-quantize each layer's weights at its allocated width.

    ``bits`` may be a plain sequence or anything with a ``bits`` attribute
    (a :class:`~mpqalloc.allocator.BitAllocation`). Returns the dequantized
    weights and per-layer error statistics.
    """
    bits = list(getattr(bits, "bits", bits))
    if len(bits) != len(weights):
        raise ValueError(f"layer count mismatch: {len(weights)} weight tensors, {len(bits)} bit-widths")
    out: List[np.ndarray] = []
    errors: List[LayerError] = []
    for w, b in zip(weights, bits):
        w = np.asarray(w, dtype=np.float64)
        wq = fake_quantize(w, int(b), scheme)
        diff = w - wq
        out.append(wq)
        errors.append(LayerError(float(np.mean(diff**2)), float(np.max(np.abs(diff)))))
    return out, errors


def error_table(errors: Sequence[LayerError]) -> List[Dict[str, float]]:
    return [{"mse": e.mse, "max_abs_error": e.max_abs} for e in errors]
