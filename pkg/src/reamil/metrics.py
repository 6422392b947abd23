"""Evidence-efficiency diagnostics and slide-level classification metrics."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import head as hd
from .backbone import normalize_coords
from .data import BagRecord
from .model import ReaMIL, softmax_np
from .objectives import CONTIG_MASS_FLOOR

log = logging.getLogger(__name__)

DENSE_K = 32
GEOMETRIC_RATIO = 1.25
EVAL_CHUNK = 64


@dataclass
class KCurve:
    slide_id: str
    k: np.ndarray  # ascending kept-tile counts, last == n_tiles
    p: np.ndarray  # true-class probability at each k
    n_tiles: int

    @property
    def kappa(self) -> np.ndarray:
        return self.k / self.n_tiles


def default_grid(n_tiles: int, dense: int = DENSE_K, ratio: float = GEOMETRIC_RATIO) -> np.ndarray:
    """Every K up to ``dense``, then geometric steps, always ending at ``n_tiles``."""
    ks = list(range(1, min(dense, n_tiles) + 1))
    k = float(ks[-1])
    while ks[-1] < n_tiles:
        k *= ratio
        nxt = min(int(math.ceil(k)), n_tiles)
        if nxt > ks[-1]:
            ks.append(nxt)
    return np.array(ks, dtype=np.int64)


def _clean_grid(grid, n_tiles: int) -> np.ndarray:
    g = np.unique(np.asarray(grid, dtype=np.int64))
    if np.any(g > n_tiles):
        log.warning("K grid entries above N=%d dropped", n_tiles)
    g = g[(g >= 1) & (g <= n_tiles)]
    if g.size == 0 or g[-1] != n_tiles:
        g = np.append(g, n_tiles)
    return g


def hard_masks(order: np.ndarray, grid: np.ndarray, n_tiles: int) -> np.ndarray:
    """Row j keeps exactly the top ``grid[j]`` tiles of ``order``."""
    rank = np.empty(n_tiles, dtype=np.int64)
    rank[order] = np.arange(n_tiles)
    return (rank[None, :] < grid[:, None]).astype(np.float32)


def masked_probs(model: ReaMIL, bag: BagRecord, masks: np.ndarray) -> np.ndarray:
    """True-class probability for each hard/soft mask row; (M,)."""
    out = []
    for start in range(0, len(masks), EVAL_CHUNK):
        logits = model.masked_logits(bag.features, bag.coords, masks[start : start + EVAL_CHUNK])
        out.append(softmax_np(logits.data)[:, bag.label])
    return np.concatenate(out)


def kcurve(bag: BagRecord, model: ReaMIL, grid: Sequence[int] | None = None) -> KCurve:
    n = bag.n_tiles
    grid = default_grid(n) if grid is None else _clean_grid(grid, n)
    a = model.selection(bag.features, bag.coords, mode="eval").logits.data
    order = hd.rank_tiles(a)
    p = masked_probs(model, bag, hard_masks(order, grid, n))
    return KCurve(bag.slide_id, grid, p.astype(np.float64), n)


def msk(curve: KCurve, tau: float) -> int | None:
    """Smallest grid K with p_y(K) >= tau, or None if the curve never gets there."""
    hit = np.nonzero(curve.p >= tau)[0]
    return int(curve.k[hit[0]]) if hit.size else None


def aukc(curve: KCurve) -> float:
    """Trapezoid over kappa = K/N; constant extension left of the first point."""
    x = curve.kappa.astype(np.float64)
    y = curve.p.astype(np.float64)
    # fsum is correctly rounded, so the result does not depend on summation order
    terms = np.concatenate([[x[0] * y[0]], (x[1:] - x[:-1]) * (y[1:] + y[:-1]) * 0.5])
    return math.fsum(terms.tolist())


def contiguity(z: np.ndarray, coords_norm: np.ndarray) -> tuple[float, bool]:
    """Gate-weighted dispersion; returns (value, degenerate_flag)."""
    z = np.asarray(z, dtype=np.float64)
    c = np.asarray(coords_norm, dtype=np.float64)
    mass = z.sum()
    if mass < CONTIG_MASS_FLOOR:
        return 0.0, True
    mu = (z[:, None] * c).sum(axis=0) / mass
    return float((z * ((c - mu) ** 2).sum(axis=1)).sum() / mass), False


@dataclass
class SlideDiagnostics:
    slide_id: str
    label: int
    n_tiles: int
    p_full: float
    p_keep: float
    p_drop: float
    suff_gap: float
    contig: float
    contig_degenerate: bool
    mean_z: float
    logits: np.ndarray = field(repr=False)
    gates: np.ndarray = field(repr=False)


def diagnostics(bag: BagRecord, model: ReaMIL) -> SlideDiagnostics:
    """Soft eval-gate diagnostics for one slide."""
    fwd = model.views_forward(bag.features, bag.coords, mode="eval")
    probs = softmax_np(fwd.logits.data)[:, bag.label]
    z = fwd.selection.gates.data.astype(np.float64)
    contig, degenerate = contiguity(z, normalize_coords(bag.coords))
    return SlideDiagnostics(
        slide_id=bag.slide_id,
        label=bag.label,
        n_tiles=bag.n_tiles,
        p_full=float(probs[0]),
        p_keep=float(probs[1]),
        p_drop=float(probs[2]),
        suff_gap=float(probs[0] - probs[1]),
        contig=contig,
        contig_degenerate=degenerate,
        mean_z=float(z.mean()),
        logits=fwd.selection.logits.data.copy(),
        gates=z,
    )


def selector_precision(logits: np.ndarray, evidence: np.ndarray, k: int | None = None) -> float:
    """Fraction of the top-k ranked tiles that are planted evidence (k defaults to |evidence|)."""
    evidence = np.asarray(evidence, dtype=np.int64)
    k = len(evidence) if k is None else k
    if k == 0:
        raise ValueError("selector precision needs at least one evidence tile")
    top = hd.rank_tiles(logits)[:k]
    return float(np.isin(top, evidence).sum() / k)


# ---------------------------------------------------------------- classification


def auc_binary(scores, positives) -> float:
    """Mann-Whitney AUC with average ranks for ties."""
    scores = np.asarray(scores, dtype=np.float64)
    positives = np.asarray(positives, dtype=bool)
    n_pos = int(positives.sum())
    n_neg = len(positives) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC is undefined when only one class is present")
    order = np.argsort(scores, kind="mergesort")
    sorted_scores = scores[order]
    ranks = np.empty(len(scores), dtype=np.float64)
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    u = ranks[positives].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def classification_metrics(probs, labels) -> dict[str, float]:
    """AUC (one-vs-rest macro for C > 2), accuracy at argmax, macro-F1."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if probs.ndim != 2 or len(probs) != len(labels):
        raise ValueError("probs must be (n, C) aligned with labels")
    if len(np.unique(labels)) < 2:
        raise ValueError("AUC is undefined when only one class is present")
    n_classes = probs.shape[1]
    if n_classes == 2:
        auc = auc_binary(probs[:, 1], labels == 1)
    else:
        aucs = [auc_binary(probs[:, c], labels == c) for c in range(n_classes) if 0 < (labels == c).sum() < len(labels)]
        auc = float(np.mean(aucs))
    pred = probs.argmax(axis=1)
    f1s = []
    for c in range(n_classes):
        tp = np.sum((pred == c) & (labels == c))
        fp = np.sum((pred == c) & (labels != c))
        fn = np.sum((pred != c) & (labels == c))
        denom = 2 * tp + fp + fn
        f1s.append(2 * tp / denom if denom else 0.0)
    return {"auc": auc, "accuracy": float(np.mean(pred == labels)), "macro_f1": float(np.mean(f1s))}


# ---------------------------------------------------------------- reports


@dataclass
class SlideEvidence:
    slide_id: str
    msk: int | None
    aukc: float
    suff_gap: float
    p_drop: float
    contig: float
    mean_z: float


@dataclass
class EvidenceReport:
    rows: list[SlideEvidence]
    tau: float

    def summary(self) -> dict[str, float]:
        def ms(vals):
            vals = np.asarray(vals, dtype=np.float64)
            if vals.size == 0:
                return float("nan"), float("nan")
            return float(vals.mean()), float(vals.std())

        reached = [r.msk for r in self.rows if r.msk is not None]
        out = {"n_slides": float(len(self.rows)), "tau": self.tau}
        out["msk_mean"], out["msk_std"] = ms(reached)
        out["sufficient_rate"] = len(reached) / len(self.rows) if self.rows else float("nan")
        out["non_sufficient_rate"] = 1.0 - out["sufficient_rate"] if self.rows else float("nan")
        for key in ("aukc", "suff_gap", "p_drop", "contig", "mean_z"):
            out[f"{key}_mean"], out[f"{key}_std"] = ms([getattr(r, key) for r in self.rows])
        return out


def evidence_report(curves: Sequence[KCurve], diags: Sequence[SlideDiagnostics], tau: float) -> EvidenceReport:
    rows = [
        SlideEvidence(c.slide_id, msk(c, tau), aukc(c), d.suff_gap, d.p_drop, d.contig, d.mean_z)
        for c, d in zip(curves, diags)
    ]
    return EvidenceReport(rows, tau)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.6f}"


def write_slide_csv(report: EvidenceReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["slide_id", "msk", "aukc", "suff_gap", "p_drop", "contig", "mean_z"])
        for r in report.rows:
            w.writerow([r.slide_id, _fmt(r.msk), _fmt(r.aukc), _fmt(r.suff_gap), _fmt(r.p_drop), _fmt(r.contig), _fmt(r.mean_z)])


def write_summary_csv(summary: dict[str, float], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "value"])
        for k, v in summary.items():
            w.writerow([k, _fmt(v)])


def write_kcurve_csv(curve: KCurve, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k", "kappa", "p_y"])
        for k, kap, p in zip(curve.k, curve.kappa, curve.p):
            w.writerow([int(k), _fmt(kap), _fmt(p)])


def write_selection(diag: SlideDiagnostics, coords: np.ndarray, path) -> None:
    """Per-slide evidence export, descending by selection logit."""
    order = hd.rank_tiles(diag.logits)
    lines = [
        f"{i}\t{coords[i, 0]:.6g}\t{coords[i, 1]:.6g}\t{diag.logits[i]:.9g}\t{diag.gates[i]:.9g}"
        for i in order
    ]
    Path(path).write_text("\n".join(lines) + "\n")


def read_selection(path) -> dict[str, np.ndarray]:
    rows = [line.split("\t") for line in Path(path).read_text().splitlines() if line.strip()]
    arr = np.array([[float(x) for x in r] for r in rows], dtype=np.float64)
    return {"index": arr[:, 0].astype(np.int64), "coords": arr[:, 1:3], "logit": arr[:, 3], "gate": arr[:, 4]}


def mean_curve(curves: Sequence[KCurve]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Mean and std over slides on the union K grid.

    A slide with fewer tiles than some K contributes its K = N value there.
    """
    grid = np.unique(np.concatenate([c.k for c in curves]))
    vals = np.empty((len(curves), len(grid)))
    for i, c in enumerate(curves):
        # Step interpolation: the value at the largest evaluated K not above the grid point.
        idx = np.searchsorted(c.k, grid, side="right") - 1
        vals[i] = c.p[np.clip(idx, 0, len(c.k) - 1)]
    return grid, vals.mean(axis=0), vals.std(axis=0)
