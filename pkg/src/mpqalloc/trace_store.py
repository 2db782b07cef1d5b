"""Activation trace persistence.

A trace lives in a directory holding two files:

* ``manifest.json``: human-readable layer metadata and trace shape.
* ``trace.bin``: an 11-byte header (magic ``MPQTRACE``, format version as
  little-endian u16, dtype tag as u8) followed by every tensor in
  (timestep-outer, layer-inner) order, each stored row-major as
  little-endian scalars.

External dumpers only need to emit these two files to feed the pipeline.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import TraceError

MAGIC = b"MPQTRACE"
FORMAT_VERSION = 1
HEADER = struct.Struct("<8sHB")
MANIFEST_NAME = "manifest.json"
PAYLOAD_NAME = "trace.bin"

DTYPE_TAGS = {"f32": 1, "f64": 2}
_NP_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
NATIVE_DTYPES = {"f32": np.dtype(np.float32), "f64": np.dtype(np.float64)}


@dataclass(frozen=True)
class LayerMeta:
    layer_id: int
    name: str
    param_count: int
    feature_dim: int
    pinned_bits: Optional[int] = None

    def validate(self) -> None:
        if self.feature_dim < 1:
            raise TraceError(f"layer {self.layer_id}: feature_dim must be >= 1")
        if self.param_count < 0:
            raise TraceError(f"layer {self.layer_id}: param_count must be >= 0")
        if self.pinned_bits is not None and not 1 <= self.pinned_bits <= 32:
            raise TraceError(f"layer {self.layer_id}: pinned_bits must lie in [1, 32]")


@dataclass
class TraceManifest:
    model_name: str
    num_layers: int
    num_timesteps: int
    num_samples: int
    layers: List[LayerMeta]
    dtype: str = "f64"
    seed: Optional[int] = None
    # Original timestep labels when the trace covers only a subset.
    timesteps: Optional[List[int]] = None

    @property
    def timestep_indices(self) -> List[int]:
        if self.timesteps is None:
            return list(range(self.num_timesteps))
        return list(self.timesteps)

    def validate(self) -> None:
        if self.num_layers < 1 or self.num_timesteps < 1 or self.num_samples < 1:
            raise TraceError("num_layers, num_timesteps and num_samples must be positive")
        if len(self.layers) != self.num_layers:
            raise TraceError(
                f"manifest lists {len(self.layers)} layers but num_layers={self.num_layers}"
            )
        ids = [m.layer_id for m in self.layers]
        if ids != list(range(self.num_layers)):
            raise TraceError(f"layer ids must be 0..{self.num_layers - 1} in order, got {ids}")
        for meta in self.layers:
            meta.validate()
        if self.dtype not in DTYPE_TAGS:
            raise TraceError(f"unsupported dtype {self.dtype!r}")
        if self.timesteps is not None:
            ts = list(self.timesteps)
            if not ts:
                raise TraceError("timestep subset is empty")
            if any(b <= a for a, b in zip(ts, ts[1:])):
                raise TraceError("timestep subset must be strictly increasing")
            if ts[0] < 0 or ts[-1] >= self.num_timesteps:
                raise TraceError("timestep subset out of range")

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "model_name": self.model_name,
            "num_layers": self.num_layers,
            "num_timesteps": self.num_timesteps,
            "num_samples": self.num_samples,
            "dtype": self.dtype,
            "seed": self.seed,
            "timesteps": self.timesteps,
            "layers": [
                {
                    "layer_id": m.layer_id,
                    "name": m.name,
                    "param_count": m.param_count,
                    "feature_dim": m.feature_dim,
                    "pinned_bits": m.pinned_bits,
                }
                for m in self.layers
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TraceManifest":
        try:
            layers = [
                LayerMeta(
                    layer_id=int(m["layer_id"]),
                    name=str(m["name"]),
                    param_count=int(m["param_count"]),
                    feature_dim=int(m["feature_dim"]),
                    pinned_bits=None if m.get("pinned_bits") is None else int(m["pinned_bits"]),
                )
                for m in d["layers"]
            ]
            ts = d.get("timesteps")
            return cls(
                model_name=str(d["model_name"]),
                num_layers=int(d["num_layers"]),
                num_timesteps=int(d["num_timesteps"]),
                num_samples=int(d["num_samples"]),
                layers=layers,
                dtype=str(d.get("dtype", "f64")),
                seed=None if d.get("seed") is None else int(d["seed"]),
                timesteps=None if ts is None else [int(t) for t in ts],
            )
        except (KeyError, TypeError) as exc:
            raise TraceError(f"malformed manifest: {exc}") from exc


@dataclass
class ActivationTrace:
    manifest: TraceManifest
    tensors: Dict[Tuple[int, int], np.ndarray] = field(default_factory=dict)

    @property
    def timesteps(self) -> List[int]:
        return self.manifest.timestep_indices

    @property
    def num_layers(self) -> int:
        return self.manifest.num_layers

    def layer(self, t: int, i: int) -> np.ndarray:
        return self.tensors[(t, i)]

    def validate(self) -> None:
        """Check completeness, shapes and finiteness; raise TraceError otherwise."""
        m = self.manifest
        m.validate()
        expected = {(t, i) for t in m.timestep_indices for i in range(m.num_layers)}
        missing = sorted(expected - self.tensors.keys())
        if missing:
            raise TraceError(f"incomplete trace: missing (t, i) = {missing[0]} and {len(missing) - 1} more")
        extra = sorted(self.tensors.keys() - expected)
        if extra:
            raise TraceError(f"trace holds undeclared (t, i) = {extra[0]}")
        for t in m.timestep_indices:
            for meta in m.layers:
                i = meta.layer_id
                x = self.tensors[(t, i)]
                if x.shape != (m.num_samples, meta.feature_dim):
                    raise TraceError(
                        f"tensor (t, i) = ({t}, {i}) has shape {x.shape}, "
                        f"expected {(m.num_samples, meta.feature_dim)}"
                    )
                if not np.all(np.isfinite(x)):
                    raise TraceError(f"non-finite value in tensor (t, i) = ({t}, {i})")

    def restrict(self, timesteps: Sequence[int]) -> "ActivationTrace":
        """Sub-trace over ``timesteps``, keeping the original timestep labels."""
        ts = sorted(set(int(t) for t in timesteps))
        have = set(self.timesteps)
        absent = [t for t in ts if t not in have]
        if absent:
            raise TraceError(f"timesteps {absent} are not in the trace")
        m = self.manifest
        sub = TraceManifest(
            model_name=m.model_name,
            num_layers=m.num_layers,
            num_timesteps=m.num_timesteps,
            num_samples=m.num_samples,
            layers=list(m.layers),
            dtype=m.dtype,
            seed=m.seed,
            timesteps=None if ts == list(range(m.num_timesteps)) else ts,
        )
        tensors = {(t, i): self.tensors[(t, i)] for t in ts for i in range(m.num_layers)}
        return ActivationTrace(sub, tensors)

    def equals(self, other: "ActivationTrace") -> bool:
        """Bit-exact equality of manifests and every tensor."""
        if self.manifest.to_dict() != other.manifest.to_dict():
            return False
        if self.tensors.keys() != other.tensors.keys():
            return False
        for key, x in self.tensors.items():
            y = other.tensors[key]
            if x.shape != y.shape or x.dtype != y.dtype or x.tobytes() != y.tobytes():
                return False
        return True


def payload_size(manifest: TraceManifest) -> int:
    """Exact size of ``trace.bin`` in bytes, header included."""
    itemsize = _NP_DTYPES[manifest.dtype].itemsize
    per_step = sum(manifest.num_samples * m.feature_dim for m in manifest.layers)
    return HEADER.size + len(manifest.timestep_indices) * per_step * itemsize


def write_trace(trace: ActivationTrace, path) -> Path:
    """Validate ``trace`` and write it into directory ``path``."""
    path = Path(path)
    if not path.parent.is_dir():
        raise FileNotFoundError(f"parent directory {path.parent} does not exist")
    trace.validate()
    m = trace.manifest
    dt = _NP_DTYPES[m.dtype]
    path.mkdir(exist_ok=True)

    payload = path / PAYLOAD_NAME
    tmp = payload.with_suffix(".bin.tmp")
    with open(tmp, "wb") as f:
        f.write(HEADER.pack(MAGIC, FORMAT_VERSION, DTYPE_TAGS[m.dtype]))
        for t in m.timestep_indices:
            for i in range(m.num_layers):
                f.write(np.ascontiguousarray(trace.tensors[(t, i)], dtype=dt).tobytes())
    os.replace(tmp, payload)

    manifest = path / MANIFEST_NAME
    tmp = manifest.with_suffix(".json.tmp")
    tmp.write_text(json.dumps(m.to_dict(), indent=2) + "\n")
    os.replace(tmp, manifest)
    return path


def read_manifest(path) -> TraceManifest:
    path = Path(path)
    try:
        data = json.loads((path / MANIFEST_NAME).read_text())
    except json.JSONDecodeError as exc:
        raise TraceError(f"manifest is not valid JSON: {exc}") from exc
    version = data.get("format_version", FORMAT_VERSION)
    if version != FORMAT_VERSION:
        raise TraceError(f"version mismatch: manifest has {version}, expected {FORMAT_VERSION}")
    manifest = TraceManifest.from_dict(data)
    manifest.validate()
    return manifest


def read_trace(path) -> ActivationTrace:
    """Load and validate a trace directory written by :func:`write_trace`."""
    path = Path(path)
    manifest = read_manifest(path)
    raw = (path / PAYLOAD_NAME).read_bytes()
    if len(raw) < HEADER.size:
        raise TraceError("payload length mismatch: file shorter than header")
    magic, version, tag = HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise TraceError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise TraceError(f"version mismatch: payload has {version}, expected {FORMAT_VERSION}")
    if tag != DTYPE_TAGS[manifest.dtype]:
        raise TraceError(f"dtype tag {tag} disagrees with manifest dtype {manifest.dtype!r}")
    expected = payload_size(manifest)
    if len(raw) != expected:
        raise TraceError(f"payload length mismatch: {len(raw)} bytes, expected {expected}")

    dt = _NP_DTYPES[manifest.dtype]
    n = manifest.num_samples
    tensors = {}
    offset = HEADER.size
    for t in manifest.timestep_indices:
        for meta in manifest.layers:
            count = n * meta.feature_dim
            x = np.frombuffer(raw, dtype=dt, count=count, offset=offset)
            tensors[(t, meta.layer_id)] = x.reshape(n, meta.feature_dim).astype(NATIVE_DTYPES[manifest.dtype])
            offset += count * dt.itemsize
    trace = ActivationTrace(manifest, tensors)
    trace.validate()
    return trace
