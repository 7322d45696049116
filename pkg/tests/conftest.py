import numpy as np
import pytest

from dpg import RngStream, SynthConfig, synth_generate
from dpg.data import concat_sets
from dpg.model import init_model


def fd_grad(fn, arrays: dict, h: float = 1e-6) -> dict:
    """Central finite differences of a scalar function over named arrays.

    Mutates each array in place component by component and restores it.
    """
    out = {}
    for name, arr in arrays.items():
        grad = np.zeros_like(arr)
        flat, gflat = arr.ravel(), grad.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = fn()
            flat[i] = orig - h
            fm = fn()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
        out[name] = grad
    return out


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(float(np.linalg.norm(a)), float(np.linalg.norm(b)), 1e-6)
    return float(np.linalg.norm(a - b)) / denom


def randomized_state(dim: int, seed: int, scale: float = 0.4):
    """Model state with non-trivial parameters for gradient and bank tests."""
    rs = np.random.RandomState(seed)
    state = init_model(dim, RngStream.from_seed(seed, "model-init"))
    state.adapter_w = state.adapter_w + scale * rs.randn(dim, dim)
    state.adapter_b = 0.1 * rs.randn(dim)
    state.head_w = scale * rs.randn(2, dim)
    state.head_b = 0.1 * rs.randn(2)
    return state


def unit_rows(rs: np.random.RandomState, n: int, d: int) -> np.ndarray:
    x = rs.randn(n, d)
    return x / np.linalg.norm(x, axis=1, keepdims=True)


@pytest.fixture(scope="session")
def tiny_synth():
    """Small but non-degenerate benchmark data shared across tests."""
    cfg = SynthConfig(dim=16, n_source_per_class=40, n_target_per_class=24,
                      n_eval_per_class=24, n_domains=2, domain_shift=(1.0, 1.6),
                      noise=0.25, seed=11)
    result = synth_generate(cfg)
    return cfg, result, concat_sets(result.targets)
