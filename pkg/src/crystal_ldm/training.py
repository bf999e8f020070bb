"""Plumbing shared by the two training loops."""

from __future__ import annotations

import numpy as np

from .config import RunConfig, parse_config
from .tensor import AdamState, Tensor, adam_step, clip_grad_norm


class TrainingError(RuntimeError):
    pass


def optimizer_arrays(state: AdamState) -> dict[str, np.ndarray]:
    out = {"t": np.array([state.t, state.skipped], dtype=np.int64)}
    for k in state.m:
        out[f"m/{k}"] = state.m[k].copy()
        out[f"v/{k}"] = state.v[k].copy()
    return out


def optimizer_from_arrays(arrays: dict[str, np.ndarray]) -> AdamState:
    st = AdamState()
    if "t" in arrays:
        st.t, st.skipped = (int(x) for x in arrays["t"])
    for k, v in arrays.items():
        if k.startswith("m/"):
            st.m[k[2:]] = v.copy()
        elif k.startswith("v/"):
            st.v[k[2:]] = v.copy()
    return st


def config_to_array(cfg: RunConfig) -> np.ndarray:
    return np.frombuffer(cfg.to_text().encode(), dtype=np.uint8).copy()


def config_from_array(arr: np.ndarray) -> RunConfig:
    return parse_config(arr.tobytes().decode())


def apply_update(params: dict[str, Tensor], loss: Tensor, state: AdamState, lr: float,
                 clip: float) -> tuple[bool, float]:
    """Backward, clip, Adam step, reset gradients. Returns (applied, grad_norm)."""
    for p in params.values():
        p.grad = None
    loss.backward()
    grads = {k: p.grad for k, p in params.items()}
    norm = clip_grad_norm(grads, clip)
    ok = adam_step({k: p.data for k, p in params.items()}, grads, state, lr)
    for p in params.values():
        p.grad = None
    return ok, norm


def batch_indices(rng: np.random.Generator, n: int, batch: int, steps: int):
    """Yield index arrays covering shuffled epochs; the whole set when batch >= n."""
    if batch >= n:
        for _ in range(steps):
            yield np.arange(n)
        return
    perm, pos = rng.permutation(n), 0
    for _ in range(steps):
        if pos + batch > n:
            perm, pos = rng.permutation(n), 0
        yield np.sort(perm[pos:pos + batch])
        pos += batch
