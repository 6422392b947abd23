"""Backbone plus optional evidence head, with the three-view forward pass."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import backbone as bb
from . import head as hd
from .autodiff import Tensor
from .backbone import BackboneConfig


@dataclass
class ViewsForward:
    logits: Tensor  # (3, C): full, keep, drop
    selection: hd.SelectionOutput

    @property
    def full(self) -> Tensor:
        return ad.take(self.logits, 0, axis=0)

    @property
    def keep(self) -> Tensor:
        return ad.take(self.logits, 1, axis=0)

    @property
    def drop(self) -> Tensor:
        return ad.take(self.logits, 2, axis=0)


class ReaMIL:
    """Parameter container and forward passes.

    ``params`` maps names to leaf tensors; names starting with ``head.``
    exist only once the evidence head is attached.
    """

    def __init__(self, config: BackboneConfig, params: dict[str, Tensor], temperature: float = 1.0):
        self.config = config
        self.params = params
        self.temperature = temperature

    @classmethod
    def create(cls, config: BackboneConfig, seed: int, with_head: bool = False, dtype=np.float32) -> "ReaMIL":
        rng = np.random.default_rng(seed)
        params = bb.init_backbone(config, rng, dtype)
        model = cls(config, params)
        if with_head:
            model.attach_head(np.random.default_rng([seed, 1]))
        return model

    @property
    def has_head(self) -> bool:
        return "head.l1.W" in self.params

    @property
    def dtype(self):
        return self.params["backbone.feat.W"].dtype

    def attach_head(self, rng: np.random.Generator) -> None:
        self.params.update(hd.init_head(self.config.d_model, rng, self.dtype))

    def astype(self, dtype) -> "ReaMIL":
        params = {k: Tensor(v.data.astype(dtype), requires_grad=True, name=k) for k, v in self.params.items()}
        return ReaMIL(self.config, params, self.temperature)

    def copy(self) -> "ReaMIL":
        return self.astype(self.dtype)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def _features(self, X) -> Tensor:
        return X if isinstance(X, Tensor) else Tensor(np.asarray(X, dtype=self.dtype))

    # -- forward passes ---------------------------------------------------

    def full_logits(self, X, coords: np.ndarray) -> Tensor:
        return bb.bag_logits(self._features(X), coords, self.params, self.config)

    def tokens(self, X, coords: np.ndarray) -> Tensor:
        return bb.tokenize(self._features(X), coords, self.params, self.config)

    def selection(
        self,
        X,
        coords: np.ndarray,
        mode: str = "eval",
        temperature: float | None = None,
        rng: np.random.Generator | None = None,
        noise: np.ndarray | None = None,
    ) -> hd.SelectionOutput:
        a = hd.select_logits(self.tokens(X, coords), self.params)
        T = self.temperature if temperature is None else temperature
        return hd.concrete_gate(a, T, mode=mode, rng=rng, noise=noise)

    def masked_logits(self, X, coords: np.ndarray, weights) -> Tensor:
        """Logits for gate-weighted views; ``weights`` is (N,) or (V, N)."""
        X = self._features(X)
        w = weights if isinstance(weights, Tensor) else Tensor(np.asarray(weights, dtype=self.dtype))
        Xw = ad.broadcast_scale(w, ad.expand(X, w.shape + X.shape[-1:]))
        return bb.bag_logits(Xw, coords, self.params, self.config, pos_weight=w)

    def views_forward(
        self,
        X,
        coords: np.ndarray,
        mode: str = "train",
        temperature: float | None = None,
        rng: np.random.Generator | None = None,
        noise: np.ndarray | None = None,
    ) -> ViewsForward:
        """One gate draw shared by keep and drop; the three views run as a batch."""
        X = self._features(X)
        sel = self.selection(X, coords, mode=mode, temperature=temperature, rng=rng, noise=noise)
        z = sel.gates
        views = hd.make_views(X, z)
        stacked = ad.concat([ad.reshape(v, (1, *v.shape)) for v in (views.full, views.keep, views.drop)], axis=0)
        one = Tensor(np.ones(z.shape, dtype=z.dtype))
        pos_w = ad.concat(
            [ad.reshape(w, (1, w.shape[0])) for w in (one, z, ad.sub(one, z))], axis=0
        )
        logits = bb.bag_logits(stacked, coords, self.params, self.config, pos_weight=pos_w)
        return ViewsForward(logits=logits, selection=sel)


def softmax_np(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)
