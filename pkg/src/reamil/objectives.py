"""Budgeted-sufficiency objective: five loss terms and their weighted total."""
from __future__ import annotations

import logging
from dataclasses import dataclass, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

log = logging.getLogger(__name__)

CONTIG_MASS_FLOOR = 1e-8


@dataclass(frozen=True)
class LossConfig:
    tau: float = 0.90
    beta: float = 0.10
    lambda_suff: float = 1.0
    lambda_excl: float = 1.0
    lambda_contig: float = 0.1
    lambda_budget: float = 5.0

    def __post_init__(self):
        for name in ("tau", "beta"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {v}")
        for f in fields(self):
            if f.name.startswith("lambda_") and getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be nonnegative")


@dataclass
class LossBreakdown:
    l_full: Tensor
    l_suff: Tensor
    l_excl: Tensor
    l_contig: Tensor
    l_budget: Tensor
    total: Tensor
    p_full: float
    p_keep: float
    p_drop: float
    config: LossConfig

    def values(self) -> dict[str, float]:
        return {
            "l_full": self.l_full.item(),
            "l_suff": self.l_suff.item(),
            "l_excl": self.l_excl.item(),
            "l_contig": self.l_contig.item(),
            "l_budget": self.l_budget.item(),
            "total": self.total.item(),
            "p_full": self.p_full,
            "p_keep": self.p_keep,
            "p_drop": self.p_drop,
        }


def true_class_prob(logits: Tensor, label: int) -> Tensor:
    return ad.take(ad.softmax(logits, axis=-1), int(label))


def loss_full(logits_full: Tensor, label: int) -> Tensor:
    return ad.cross_entropy(logits_full, label)


def loss_suff(logits_keep: Tensor, label: int, tau: float) -> Tensor:
    """CE on the keep view plus ``max(tau - p_y(keep), 0)``."""
    hinge = ad.relu(ad.shift(ad.neg(true_class_prob(logits_keep, label)), tau))
    return ad.add(ad.cross_entropy(logits_keep, label), hinge)


def loss_excl(logits_drop: Tensor, label: int, beta: float) -> Tensor:
    return ad.relu(ad.shift(true_class_prob(logits_drop, label), -beta))


_warned = False


def _warn_degenerate(mass: float) -> None:
    global _warned
    level = logging.DEBUG if _warned else logging.WARNING
    log.log(level, "contiguity: total gate mass %.3g below floor; term set to 0", mass)
    _warned = True


def loss_contig(z: Tensor, coords: np.ndarray) -> Tensor:
    """Gate-weighted spatial variance about the gate-weighted centroid.

    ``coords`` should already be normalized per bag.
    """
    mass = ad.sum_(z)
    if mass.item() < CONTIG_MASS_FLOOR:
        _warn_degenerate(mass.item())
        return Tensor(np.zeros((), dtype=z.dtype))
    c = Tensor(np.asarray(coords, dtype=z.dtype))
    zr = ad.reshape(z, (1, z.shape[0]))
    centroid = ad.div(ad.matmul(zr, c), mass)  # (1, 2)
    diff = ad.sub(c, centroid)
    sq = ad.sum_(ad.mul(diff, diff), axis=1)
    return ad.div(ad.sum_(ad.mul(z, sq)), mass)


def loss_budget(z: Tensor) -> Tensor:
    return ad.mean(z)


def total_loss(
    logits_full: Tensor,
    logits_keep: Tensor,
    logits_drop: Tensor,
    z: Tensor,
    coords_norm: np.ndarray,
    label: int,
    config: LossConfig,
) -> LossBreakdown:
    """All terms from one shared forward (same gates for keep and drop)."""
    lf = loss_full(logits_full, label)
    ls = loss_suff(logits_keep, label, config.tau)
    le = loss_excl(logits_drop, label, config.beta)
    lc = loss_contig(z, coords_norm)
    lb = loss_budget(z)
    total = lf
    for w, term in (
        (config.lambda_suff, ls),
        (config.lambda_excl, le),
        (config.lambda_contig, lc),
        (config.lambda_budget, lb),
    ):
        if w:
            total = ad.add(total, ad.scale(term, w))

    def prob(logits):
        return float(_softmax_np(logits.data)[int(label)])

    return LossBreakdown(
        l_full=lf,
        l_suff=ls,
        l_excl=le,
        l_contig=lc,
        l_budget=lb,
        total=total,
        p_full=prob(logits_full),
        p_keep=prob(logits_keep),
        p_drop=prob(logits_drop),
        config=config,
    )


def _softmax_np(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)
