"""Evidence selection head: per-tile logits, Concrete gates, bag views."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

NOISE_CLAMP = 1e-6


@dataclass
class SelectionOutput:
    logits: Tensor
    gates: Tensor
    temperature: float
    noise: np.ndarray | None = None

    @property
    def keep_weights(self) -> np.ndarray:
        return self.gates.data

    @property
    def drop_weights(self) -> np.ndarray:
        return 1.0 - self.gates.data


@dataclass
class BagViews:
    full: Tensor
    keep: Tensor
    drop: Tensor


def init_head(d_model: int, rng: np.random.Generator, dtype=np.float32) -> dict[str, Tensor]:
    hidden = max(d_model // 2, 1)
    b1, b2 = 1.0 / np.sqrt(d_model), 1.0 / np.sqrt(hidden)
    arrays = {
        "head.l1.W": rng.uniform(-b1, b1, (d_model, hidden)),
        "head.l1.b": rng.uniform(-b1, b1, hidden),
        "head.l2.W": rng.uniform(-b2, b2, (hidden, 1)),
        "head.l2.b": rng.uniform(-b2, b2, 1),
    }
    return {k: Tensor(v.astype(dtype), requires_grad=True, name=k) for k, v in arrays.items()}


def select_logits(tokens: Tensor, params: dict[str, Tensor]) -> Tensor:
    """Two-layer MLP applied to each token independently; returns (N,)."""
    h = ad.gelu(ad.add(ad.matmul(tokens, params["head.l1.W"]), params["head.l1.b"]))
    a = ad.add(ad.matmul(h, params["head.l2.W"]), params["head.l2.b"])
    return ad.reshape(a, a.shape[:-1])


def sample_noise(n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform draws, clamped away from 0 and 1."""
    return np.clip(rng.uniform(size=n), NOISE_CLAMP, 1.0 - NOISE_CLAMP)


def concrete_gate(
    a: Tensor,
    temperature: float,
    mode: str = "train",
    rng: np.random.Generator | None = None,
    noise: np.ndarray | None = None,
) -> SelectionOutput:
    """Gumbel-sigmoid relaxation of a Bernoulli gate.

    In train mode the logistic noise ``log u - log(1 - u)`` is added to the
    logits before dividing by the temperature. ``noise`` may be passed
    explicitly (gradient checks freeze it); otherwise it is drawn from
    ``rng``. Eval mode is the noise-free gate ``sigmoid(a / T)``.
    """
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    if mode == "train":
        if noise is None:
            if rng is None:
                raise ValueError("train-mode gating needs an rng or explicit noise")
            noise = sample_noise(a.shape[0], rng)
        noise = np.clip(np.asarray(noise, dtype=np.float64), NOISE_CLAMP, 1.0 - NOISE_CLAMP)
        logistic = (np.log(noise) - np.log1p(-noise)).astype(a.dtype)
        pre = ad.add(a, Tensor(logistic))
    elif mode == "eval":
        noise = None
        pre = a
    else:
        raise ValueError(f"unknown gate mode {mode!r}")
    z = ad.sigmoid(ad.scale(pre, 1.0 / temperature))
    return SelectionOutput(logits=a, gates=z, temperature=temperature, noise=noise)


def make_views(X: Tensor, z: Tensor) -> BagViews:
    """Soft-masked views; all N rows are kept in both keep and drop."""
    one = Tensor(np.ones(z.shape, dtype=z.dtype))
    return BagViews(full=X, keep=ad.broadcast_scale(z, X), drop=ad.broadcast_scale(ad.sub(one, z), X))


def rank_tiles(a) -> np.ndarray:
    """Tile indices by descending logit; ties resolve to the lower index."""
    a = np.asarray(a.data if isinstance(a, Tensor) else a)
    return np.argsort(-a, kind="stable")
