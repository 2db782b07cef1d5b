import numpy as np
import pytest

from mpqalloc.trace_store import ActivationTrace, LayerMeta, TraceManifest


def make_trace(dims, T, n, seed=0, dtype="f64", timesteps=None, param_counts=None):
    rng = np.random.default_rng(seed)
    np_dtype = np.float32 if dtype == "f32" else np.float64
    layers = [
        LayerMeta(i, f"l{i}", (param_counts or [d * 4 for d in dims])[i], d)
        for i, d in enumerate(dims)
    ]
    manifest = TraceManifest("test", len(dims), T, n, layers, dtype=dtype, seed=seed, timesteps=timesteps)
    ts = timesteps if timesteps is not None else range(T)
    tensors = {
        (t, i): rng.standard_normal((n, d)).astype(np_dtype)
        for t in ts
        for i, d in enumerate(dims)
    }
    return ActivationTrace(manifest, tensors)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
