"""A small seeded denoiser and DDPM sampler that emits activation traces.

The denoiser is an untrained encoder/middle/decoder MLP with U-Net style
skip concatenations. It stands in for the noise prediction network so the
ORM, aggregation and allocation machinery can be exercised end to end at
desk scale. Sample quality is irrelevant here.

Timestep conventions: diffusion steps run t = 1..T; schedule arrays and
trace timestep labels use the zero-based index t - 1.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import quantizer
from .trace_store import ActivationTrace, LayerMeta, TraceManifest

SUPPORTED_FRACTIONS = (Fraction(1), Fraction(1, 2), Fraction(1, 4), Fraction(1, 8), Fraction(1, 20))

RngLike = Union[None, int, np.random.Generator]


@dataclass
class DiffusionSchedule:
    beta: np.ndarray
    sigma: np.ndarray
    alpha: np.ndarray = field(init=False)
    alpha_bar: np.ndarray = field(init=False)

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=np.float64)
        self.sigma = np.asarray(self.sigma, dtype=np.float64)
        if self.beta.ndim != 1 or self.beta.size < 1:
            raise ValueError("beta must be a nonempty vector")
        if np.any(self.beta <= 0) or np.any(self.beta >= 1):
            raise ValueError("every beta_t must lie strictly inside (0, 1)")
        if self.sigma.shape != self.beta.shape or np.any(self.sigma < 0):
            raise ValueError("sigma must be a non-negative vector matching beta")
        self.alpha = 1.0 - self.beta
        self.alpha_bar = np.cumprod(self.alpha)

    @property
    def T(self) -> int:
        return self.beta.size

    def check_t(self, t: int) -> None:
        if not 1 <= t <= self.T:
            raise ValueError(f"timestep {t} outside 1..{self.T}")

    @classmethod
    def linear(cls, T: int, beta_start: float = 1e-4, beta_end: float = 2e-2) -> "DiffusionSchedule":
        """Linear beta ramp with sigma_t = sqrt(beta_t) and sigma_1 = 0."""
        if T < 1:
            raise ValueError("T must be positive")
        beta = np.linspace(beta_start, beta_end, T) if T > 1 else np.array([beta_start])
        sigma = np.sqrt(beta)
        sigma[0] = 0.0
        return cls(beta, sigma)


def _rng(source: RngLike) -> Optional[np.random.Generator]:
    if source is None or isinstance(source, np.random.Generator):
        return source
    return np.random.default_rng(source)


def forward_noise(x0, t: int, schedule: DiffusionSchedule, noise_seed: RngLike = None) -> np.ndarray:
    """Apply the Gaussian transition q(x_s | x_{s-1}) for s = 1..t.

    With ``noise_seed=None`` the noise term is dropped and only the sqrt(alpha)
    contraction is applied.
    """
    schedule.check_t(t)
    rng = _rng(noise_seed)
    x = np.array(x0, dtype=np.float64)
    for s in range(t):
        x = np.sqrt(schedule.alpha[s]) * x
        if rng is not None:
            x = x + np.sqrt(schedule.beta[s]) * rng.standard_normal(x.shape)
    return x


def q_sample(x0, t: int, schedule: DiffusionSchedule, eps) -> np.ndarray:
    """Closed-form marginal x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    schedule.check_t(t)
    ab = schedule.alpha_bar[t - 1]
    return np.sqrt(ab) * np.asarray(x0, dtype=np.float64) + np.sqrt(1.0 - ab) * np.asarray(eps)


def _ddpm_update(x_t, eps, t: int, schedule: DiffusionSchedule, z) -> np.ndarray:
    k = t - 1
    coef = schedule.beta[k] / np.sqrt(1.0 - schedule.alpha_bar[k])
    mean = (x_t - coef * eps) / np.sqrt(schedule.alpha[k])
    if z is None or schedule.sigma[k] == 0.0:
        return mean
    return mean + schedule.sigma[k] * z


def reverse_step(
    x_t,
    t: int,
    model: Callable[[np.ndarray, int], np.ndarray],
    schedule: DiffusionSchedule,
    noise_seed: RngLike = None,
) -> np.ndarray:
    """One ancestral sampling step x_t -> x_{t-1}; ``noise_seed=None`` means z = 0."""
    schedule.check_t(t)
    x_t = np.asarray(x_t, dtype=np.float64)
    eps = model(x_t, t)
    rng = _rng(noise_seed)
    z = rng.standard_normal(x_t.shape) if rng is not None else None
    return _ddpm_update(x_t, eps, t, schedule, z)


def time_embedding(t: int, dim: int) -> np.ndarray:
    """Sinusoidal features of t, length ``dim`` (sin half, then cos half)."""
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half, 1))
    ang = t * freqs
    emb = np.concatenate([np.sin(ang), np.cos(ang)])
    if dim % 2:
        emb = np.concatenate([emb, [0.0]])
    return emb


@dataclass(frozen=True)
class LayerSpec:
    name: str
    # Indices of earlier layers whose outputs are concatenated as input;
    # -1 is the model input (x_t with the time embedding appended).
    sources: Tuple[int, ...]
    out_dim: int
    activation: str = "tanh"
    pinned_bits: Optional[int] = None


def default_architecture(data_dim: int = 8, width: int = 32) -> List[LayerSpec]:
    w1, w2 = width, width + width // 2
    return [
        LayerSpec("embed_in", (-1,), w1, pinned_bits=8),
        LayerSpec("enc1", (0,), w2),
        LayerSpec("mid", (1,), w2),
        LayerSpec("dec1", (2, 1), w1),
        LayerSpec("dec0", (3, 0), w1),
        LayerSpec("out", (4,), data_dim, activation="linear", pinned_bits=8),
    ]


@dataclass
class ToyDenoiser:
    specs: List[LayerSpec]
    weights: List[np.ndarray]
    biases: List[np.ndarray]
    data_dim: int
    emb_dim: int
    act_bits: Optional[int] = None

    @classmethod
    def build(
        cls,
        seed: int = 0,
        data_dim: int = 8,
        emb_dim: int = 8,
        width: int = 32,
        spectral_norm: float = 1.0,
        specs: Optional[Sequence[LayerSpec]] = None,
    ) -> "ToyDenoiser":
        specs = list(specs or default_architecture(data_dim, width))
        rng = np.random.default_rng(seed)
        weights, biases = [], []
        for k, spec in enumerate(specs):
            fan_in = sum(data_dim + emb_dim if s == -1 else specs[s].out_dim for s in spec.sources)
            if any(s >= k for s in spec.sources):
                raise ValueError(f"layer {spec.name} reads from a later layer")
            w = rng.standard_normal((fan_in, spec.out_dim))
            # rescale so repeated application neither blows up nor collapses
            w *= spectral_norm / np.linalg.norm(w, 2)
            weights.append(w)
            biases.append(0.1 * rng.standard_normal(spec.out_dim))
        if specs[-1].out_dim != data_dim:
            raise ValueError("last layer must map back to the data dimension")
        return cls(specs, weights, biases, data_dim, emb_dim)

    @property
    def skips(self) -> List[Tuple[int, int]]:
        """(source layer, consumer layer) pairs that bypass the chain."""
        return [(s, k) for k, spec in enumerate(self.specs) for s in spec.sources if s not in (-1, k - 1)]

    @property
    def param_counts(self) -> List[int]:
        return [int(w.size) for w in self.weights]

    def layer_metas(self) -> List[LayerMeta]:
        return [
            LayerMeta(k, spec.name, int(self.weights[k].size), spec.out_dim, spec.pinned_bits)
            for k, spec in enumerate(self.specs)
        ]

    def pinned(self) -> Dict[int, int]:
        return {k: s.pinned_bits for k, s in enumerate(self.specs) if s.pinned_bits is not None}

    def with_weights(self, weights: Sequence[np.ndarray], act_bits: Optional[int] = None) -> "ToyDenoiser":
        if len(weights) != len(self.weights):
            raise ValueError("weight list length mismatch")
        return replace(self, weights=[np.asarray(w, dtype=np.float64) for w in weights], act_bits=act_bits)

    def forward(self, x, t: int, record: Optional[List[np.ndarray]] = None) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        n = x.shape[0]
        emb = np.broadcast_to(time_embedding(t, self.emb_dim), (n, self.emb_dim))
        model_in = np.concatenate([x, emb], axis=1)
        outs: List[np.ndarray] = []
        for spec, w, b in zip(self.specs, self.weights, self.biases):
            h = np.concatenate([model_in if s == -1 else outs[s] for s in spec.sources], axis=1)
            if self.act_bits is not None:
                h = quantizer.fake_quantize(h, self.act_bits, quantizer.ASYMMETRIC)
            y = h @ w + b
            if spec.activation == "tanh":
                y = np.tanh(y)
            outs.append(y)
        if record is not None:
            record.extend(outs)
        return outs[-1]

    __call__ = forward


def run_reverse(
    model: ToyDenoiser,
    schedule: DiffusionSchedule,
    n: int,
    seed: int,
    record: Optional[Sequence[int]] = None,
):
    """Sample from x_T ~ N(0, I) down to x_0.

    Returns (x_0, recorded) where ``recorded`` maps a zero-based timestep
    label to the list of layer outputs at that step.
    """
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, model.data_dim))
    wanted = set(range(schedule.T)) if record is None else set(record)
    recorded: Dict[int, List[np.ndarray]] = {}
    for t in range(schedule.T, 0, -1):
        outs: List[np.ndarray] = []
        eps = model.forward(x, t, record=outs)
        if t - 1 in wanted:
            recorded[t - 1] = outs
        z = rng.standard_normal(x.shape) if t > 1 else None
        x = _ddpm_update(x, eps, t, schedule, z)
    return x, recorded


def generate_trace(
    model: ToyDenoiser,
    schedule: DiffusionSchedule,
    n: int,
    seed: int,
    timesteps: Optional[Sequence[int]] = None,
    dtype: str = "f64",
    model_name: str = "toy-denoiser",
) -> ActivationTrace:
    """Record every layer output at every (or every listed) timestep."""
    if n < 1:
        raise ValueError("need at least one sample")
    subset = None if timesteps is None else sorted(set(int(t) for t in timesteps))
    if subset is not None and subset == list(range(schedule.T)):
        subset = None
    _, recorded = run_reverse(model, schedule, n, seed, record=subset)
    np_dtype = np.float32 if dtype == "f32" else np.float64
    manifest = TraceManifest(
        model_name=model_name,
        num_layers=len(model.specs),
        num_timesteps=schedule.T,
        num_samples=n,
        layers=model.layer_metas(),
        dtype=dtype,
        seed=seed,
        timesteps=subset,
    )
    tensors = {
        (t, i): np.ascontiguousarray(out.reshape(n, -1), dtype=np_dtype)
        for t, outs in recorded.items()
        for i, out in enumerate(outs)
    }
    trace = ActivationTrace(manifest, tensors)
    trace.validate()
    return trace


def parse_fraction(value) -> Fraction:
    frac = Fraction(str(value)).limit_denominator(1000)
    if frac not in SUPPORTED_FRACTIONS:
        raise ValueError(f"fraction {value} not in {{1, 1/2, 1/4, 1/8, 1/20}}")
    return frac


def _round_half_away(q: Fraction) -> int:
    whole = int(q)  # truncates toward zero
    rem = q - whole
    if abs(rem) >= Fraction(1, 2):
        whole += 1 if q > 0 else -1
    return whole


def sample_timesteps(T: int, fraction) -> List[int]:
    """Evenly spaced labels round(k * T / m), k = 0..m-1, m = max(1, round(T * fraction))."""
    if T < 1:
        raise ValueError("T must be positive")
    frac = parse_fraction(fraction)
    if frac == 1:
        return list(range(T))
    m = max(1, _round_half_away(T * frac))
    picks = {_round_half_away(Fraction(k * T, m)) for k in range(m)}
    return sorted(t for t in picks if 0 <= t < T)
