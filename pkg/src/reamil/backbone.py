"""TransMIL-style bag encoder with exact multi-head attention.

A bag is projected tile by tile into token space, optionally offset by an
MLP embedding of the per-bag normalized tile coordinates, prefixed with a
learned CLS token and run through pre-norm transformer layers. The final
CLS state feeds a linear slide head.

All functions accept an optional leading "view" axis so that the full, keep
and drop views of one bag can share a single pass.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class EmptyBagError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


@dataclass(frozen=True)
class BackboneConfig:
    d_in: int = 64
    d_model: int = 32
    heads: int = 2
    layers: int = 1
    num_classes: int = 2
    use_positional: bool = True
    ff_mult: int = 2

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by heads={self.heads}")
        if self.layers < 1:
            raise ValueError("layers must be >= 1")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")


def _uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def init_backbone(config: BackboneConfig, rng: np.random.Generator, dtype=np.float32) -> dict[str, Tensor]:
    """Fresh parameters; draw order is fixed so a seed pins every value."""
    d, dm = config.d_in, config.d_model
    dff = config.ff_mult * dm
    p: dict[str, np.ndarray] = {}

    def linear(name, fan_in, fan_out):
        p[f"{name}.W"] = _uniform(rng, (fan_in, fan_out), fan_in, dtype)
        p[f"{name}.b"] = _uniform(rng, (fan_out,), fan_in, dtype)

    linear("feat", d, dm)
    linear("pos1", 2, dm)
    linear("pos2", dm, dm)
    p["cls_token"] = np.zeros((1, dm), dtype=dtype)
    for i in range(config.layers):
        pre = f"layer{i}"
        p[f"{pre}.ln1.g"] = np.ones(dm, dtype=dtype)
        p[f"{pre}.ln1.b"] = np.zeros(dm, dtype=dtype)
        for proj in ("q", "k", "v", "o"):
            linear(f"{pre}.{proj}", dm, dm)
        p[f"{pre}.ln2.g"] = np.ones(dm, dtype=dtype)
        p[f"{pre}.ln2.b"] = np.zeros(dm, dtype=dtype)
        linear(f"{pre}.ff1", dm, dff)
        linear(f"{pre}.ff2", dff, dm)
    p["ln_f.g"] = np.ones(dm, dtype=dtype)
    p["ln_f.b"] = np.zeros(dm, dtype=dtype)
    linear("cls", dm, config.num_classes)
    return {f"backbone.{k}": Tensor(v, requires_grad=True, name=f"backbone.{k}") for k, v in p.items()}


def normalize_coords(coords: np.ndarray) -> np.ndarray:
    """Per-bag min-max scaling to [0, 1]^2; a zero-range axis maps to 0.5."""
    coords = np.asarray(coords, dtype=np.float64)
    lo = coords.min(axis=0)
    span = coords.max(axis=0) - lo
    out = np.full_like(coords, 0.5)
    ok = span > 0
    out[:, ok] = (coords[:, ok] - lo[ok]) / span[ok]
    return out


def _linear(x: Tensor, params: dict[str, Tensor], name: str) -> Tensor:
    return ad.add(ad.matmul(x, params[f"{name}.W"]), params[f"{name}.b"])


def positional(coords: np.ndarray, params: dict[str, Tensor], prefix: str = "backbone") -> Tensor:
    dtype = params[f"{prefix}.pos1.W"].dtype
    c = Tensor(normalize_coords(coords).astype(dtype))
    hidden = ad.gelu(_linear(c, params, f"{prefix}.pos1"))
    return _linear(hidden, params, f"{prefix}.pos2")


def tokenize(
    X: Tensor,
    coords: np.ndarray,
    params: dict[str, Tensor],
    config: BackboneConfig,
    pos_weight: Tensor | None = None,
) -> Tensor:
    """Project features (..., N, d_in) to tokens (..., N, d_model).

    ``pos_weight`` (..., N) scales the positional term per tile; the keep
    and drop views pass their gates here so a removed tile carries no
    positional signal either.
    """
    if X.shape[-2] == 0:
        raise EmptyBagError("bag has no tiles")
    if X.shape[-1] != config.d_in:
        raise ad.DimensionError(f"features have dim {X.shape[-1]}, model expects {config.d_in}")
    if len(coords) != X.shape[-2]:
        raise ad.DimensionError(f"{len(coords)} coordinates for {X.shape[-2]} tiles")
    tokens = _linear(X, params, "backbone.feat")
    if config.use_positional:
        pos = positional(coords, params)
        if pos_weight is not None:
            pos = ad.broadcast_scale(pos_weight, ad.expand(pos, pos_weight.shape + pos.shape[-1:]))
        tokens = ad.add(tokens, pos)
    return tokens


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, n, dm = x.shape
    x = ad.reshape(x, (*lead, n, heads, dm // heads))
    k = len(lead)
    return ad.transpose(x, (*range(k), k + 1, k, k + 2))


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, n, dh = x.shape
    k = len(lead)
    x = ad.transpose(x, (*range(k), k + 1, k, k + 2))
    return ad.reshape(x, (*lead, n, h * dh))


def attention(h: Tensor, params: dict[str, Tensor], pre: str, heads: int) -> Tensor:
    q = _split_heads(_linear(h, params, f"{pre}.q"), heads)
    k = _split_heads(_linear(h, params, f"{pre}.k"), heads)
    v = _split_heads(_linear(h, params, f"{pre}.v"), heads)
    dh = q.shape[-1]
    kt = ad.transpose(k, (*range(k.data.ndim - 2), k.data.ndim - 1, k.data.ndim - 2))
    scores = ad.scale(ad.matmul(q, kt), 1.0 / np.sqrt(dh))
    attn = ad.softmax(scores, axis=-1)
    return _linear(_merge_heads(ad.matmul(attn, v)), params, f"{pre}.o")


def encode(tokens: Tensor, params: dict[str, Tensor], config: BackboneConfig) -> Tensor:
    """Prepend CLS, run the transformer stack, return the CLS state (..., d_model)."""
    if tokens.shape[-2] == 0:
        raise EmptyBagError("bag has no tiles")
    lead = tokens.shape[:-2]
    cls = ad.expand(params["backbone.cls_token"], (*lead, 1, config.d_model))
    seq = ad.concat([cls, tokens], axis=-2)
    for i in range(config.layers):
        pre = f"backbone.layer{i}"
        h = ad.layer_norm(seq, params[f"{pre}.ln1.g"], params[f"{pre}.ln1.b"])
        seq = ad.add(seq, attention(h, params, pre, config.heads))
        h = ad.layer_norm(seq, params[f"{pre}.ln2.g"], params[f"{pre}.ln2.b"])
        f = _linear(ad.gelu(_linear(h, params, f"{pre}.ff1")), params, f"{pre}.ff2")
        seq = ad.add(seq, f)
        if not np.all(np.isfinite(seq.data)):
            raise NumericError(f"non-finite activations after transformer layer {i}")
    seq = ad.layer_norm(seq, params["backbone.ln_f.g"], params["backbone.ln_f.b"])
    return ad.slice_(seq, (..., 0, slice(None)))


def classify(h_cls: Tensor, params: dict[str, Tensor]) -> Tensor:
    return _linear(h_cls, params, "backbone.cls")


def bag_logits(
    X: Tensor,
    coords: np.ndarray,
    params: dict[str, Tensor],
    config: BackboneConfig,
    pos_weight: Tensor | None = None,
) -> Tensor:
    tokens = tokenize(X, coords, params, config, pos_weight)
    return classify(encode(tokens, params, config), params)
