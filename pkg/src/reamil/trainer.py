"""Two-phase training: cross-entropy baseline, then the evidence objective.

Every random draw comes from a generator keyed on (seed, purpose, index),
so a run is a pure function of its config and resuming from a saved state
replays the same stream.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import checkpoint as ck
from . import metrics as mt
from .backbone import BackboneConfig, NumericError, normalize_coords
from .data import BagRecord, DatasetManifest
from .model import ReaMIL, softmax_np
from .objectives import LossConfig, loss_full, total_loss

log = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

LOG_HEADER = "step epoch l_full l_suff l_excl l_contig l_budget total p_keep p_drop mean_z"


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    lr: float = 1e-3
    weight_decay: float = 1e-4
    lr_floor: float = 1e-5
    seed: int = 17
    temp_start: float = 1.0
    temp_end: float = 0.1
    grad_clip: float = 5.0
    accum: int = 1
    eval_every: int = 1
    sparsity_weight: float = 0.1  # evidence-phase model selection: AUC - w * mean z
    head_bias: float = 0.0  # initial selection-logit offset; > 0 starts with most tiles kept
    backbone_lr_scale: float = 1.0  # evidence phase: backbone lr = scale * lr
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.accum < 1 or self.eval_every < 1:
            raise ValueError("accum and eval_every must be >= 1")
        if not (self.temp_start > 0 and self.temp_end > 0):
            raise ValueError("temperatures must be positive")


# Evidence-phase defaults: the freshly initialized head needs a larger step
# than the warm backbone, which is held near its converged weights.
EVIDENCE_DEFAULTS = {"lr": 1e-2, "backbone_lr_scale": 0.1}


def evidence_config(**overrides) -> TrainConfig:
    return TrainConfig(**{**EVIDENCE_DEFAULTS, **overrides})


# ---------------------------------------------------------------- optimizer


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros(cls, params: dict[str, ad.Tensor]) -> "OptimizerState":
        return cls({k: np.zeros_like(p.data) for k, p in params.items()},
                   {k: np.zeros_like(p.data) for k, p in params.items()})


def cosine_lr(t: int, total: int, lr: float, floor: float) -> float:
    if total <= 0:
        return lr
    frac = min(max(t / total, 0.0), 1.0)
    return floor + 0.5 * (lr - floor) * (1.0 + math.cos(math.pi * frac))


def adamw_step(params: dict[str, ad.Tensor], grads: dict[str, np.ndarray], state: OptimizerState,
               lr_t: float, weight_decay: float, lr_scale: dict[str, float] | None = None) -> None:
    """In-place AdamW update; decay is decoupled and applied to matrices only.

    ``lr_scale`` optionally multiplies the step size per parameter name.
    """
    state.step += 1
    t = state.step
    c1 = 1.0 - ADAM_BETA1**t
    c2 = 1.0 - ADAM_BETA2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
        lr_p = lr_t * lr_scale.get(name, 1.0) if lr_scale else lr_t
        if weight_decay and p.data.ndim >= 2:
            p.data = p.data - lr_p * weight_decay * p.data
        p.data = (p.data - lr_p * update).astype(p.data.dtype, copy=False)


def clip_grads(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if max_norm and norm > max_norm:
        s = np.float32(max_norm / (norm + 1e-12))
        for k in grads:
            grads[k] = grads[k] * s
    return norm


def temperature_at(epoch: int, cfg: TrainConfig) -> float:
    """Exponential anneal from temp_start (first epoch) to temp_end (last)."""
    if cfg.epochs == 1:
        return cfg.temp_end
    frac = epoch / (cfg.epochs - 1)
    return float(cfg.temp_start * (cfg.temp_end / cfg.temp_start) ** frac)


# ---------------------------------------------------------------- evaluation helpers


def predict(model: ReaMIL, bags: list[BagRecord]) -> np.ndarray:
    return np.stack([softmax_np(model.full_logits(b.features, b.coords).data) for b in bags])


def mean_gate(model: ReaMIL, bags: list[BagRecord]) -> float:
    return float(np.mean([model.selection(b.features, b.coords, mode="eval").gates.data.mean() for b in bags]))


def validation_score(model: ReaMIL, bags: list[BagRecord], phase: str, cfg: TrainConfig) -> float:
    probs = predict(model, bags)
    auc = mt.classification_metrics(probs, [b.label for b in bags])["auc"]
    if phase == "evidence":
        auc -= cfg.sparsity_weight * mean_gate(model, bags)
    return float(np.float32(auc))


# ---------------------------------------------------------------- loop


@dataclass
class TrainResult:
    model: ReaMIL  # best-validation parameters
    final: ReaMIL  # parameters after the last epoch
    log_lines: list[str]
    history: list[dict[str, float]]
    phase: str


def _fmt(x: float) -> str:
    return f"{x:.6g}"


def _state_tensors(model, best, opt, epoch_done, best_score, phase):
    t = ck.model_tensors(model, phase)
    for k in model.params:
        t[f"opt.m.{k}"] = opt.m[k]
        t[f"opt.v.{k}"] = opt.v[k]
        t[f"best.{k}"] = best.params[k].data
    t["opt.step"] = np.float32(opt.step)
    t["train.epoch_done"] = np.float32(epoch_done)
    t["train.best_score"] = np.float32(best_score)
    return t


def _restore_state(tensors, model: ReaMIL):
    for k, p in model.params.items():
        p.data = tensors[k].copy()
    opt = OptimizerState({k: tensors[f"opt.m.{k}"].copy() for k in model.params},
                         {k: tensors[f"opt.v.{k}"].copy() for k in model.params},
                         int(tensors["opt.step"]))
    best = model.copy()
    for k, p in best.params.items():
        p.data = tensors[f"best.{k}"].copy()
    return opt, best, int(tensors["train.epoch_done"]), float(tensors["train.best_score"])


@contextmanager
def _step_context(step: int, slide_id: str):
    try:
        yield
    except NumericError as exc:
        raise TrainingError(f"non-finite activations at step {step} on bag {slide_id}: {exc}") from exc


def _run(model: ReaMIL, train: list[BagRecord], val: list[BagRecord], cfg: TrainConfig, phase: str,
         out_dir: Path | None, resume: Path | None, stop_after: int | None) -> TrainResult:
    n = len(train)
    if n == 0:
        raise TrainingError("training split is empty")
    steps_per_epoch = math.ceil(n / cfg.accum)
    total_steps = cfg.epochs * steps_per_epoch
    opt = OptimizerState.zeros(model.params)
    best = model.copy()
    best_score = -math.inf
    start_epoch = 0
    lines: list[str] = []
    if resume is not None:
        opt, best, start_epoch, best_score = _restore_state(ck.read_tensors(resume), model)
        prev_log = resume.with_name("train_log.txt")
        if prev_log.exists():
            lines = prev_log.read_text().splitlines()[1:]
    coords_norm = [normalize_coords(b.coords) for b in train]
    lr_scale = None
    if phase == "evidence" and cfg.backbone_lr_scale != 1.0:
        lr_scale = {k: cfg.backbone_lr_scale for k in model.params if k.startswith("backbone.")}
    history = []
    bag_step = start_epoch * n
    end_epoch = cfg.epochs if stop_after is None else min(cfg.epochs, stop_after)
    for epoch in range(start_epoch, end_epoch):
        T = temperature_at(epoch, cfg)
        model.temperature = T
        order = np.random.default_rng([cfg.seed, 2, epoch]).permutation(n)
        model.zero_grad()
        pending = 0
        for pos, idx in enumerate(order):
            bag = train[idx]
            with ad.Tape(), _step_context(bag_step, bag.slide_id):
                if phase == "baseline":
                    logits = model.full_logits(bag.features, bag.coords)
                    loss = loss_full(logits, bag.label)
                    vals = [loss.item(), 0.0, 0.0, 0.0, 0.0, loss.item()]
                    extra = [math.nan, math.nan, math.nan]
                else:
                    rng = np.random.default_rng([cfg.seed, 3, bag_step])
                    fwd = model.views_forward(bag.features, bag.coords, mode="train", temperature=T, rng=rng)
                    br = total_loss(fwd.full, fwd.keep, fwd.drop, fwd.selection.gates, coords_norm[idx],
                                    bag.label, cfg.loss)
                    loss = br.total
                    v = br.values()
                    vals = [v["l_full"], v["l_suff"], v["l_excl"], v["l_contig"], v["l_budget"], v["total"]]
                    extra = [br.p_keep, br.p_drop, float(fwd.selection.gates.data.mean())]
                if not math.isfinite(loss.item()):
                    raise TrainingError(f"non-finite loss at step {bag_step} on bag {bag.slide_id}")
                if cfg.accum > 1:
                    loss = ad.scale(loss, 1.0 / cfg.accum)
                ad.backward(loss)
            lines.append(" ".join([str(bag_step), str(epoch)] + [_fmt(x) for x in vals + extra]))
            bag_step += 1
            pending += 1
            if pending == cfg.accum or pos == n - 1:
                grads = {k: p.grad for k, p in model.params.items() if p.grad is not None}
                clip_grads(grads, cfg.grad_clip)
                lr_t = cosine_lr(opt.step, total_steps, cfg.lr, cfg.lr_floor)
                adamw_step(model.params, grads, opt, lr_t, cfg.weight_decay, lr_scale)
                model.zero_grad()
                pending = 0
        record = {"epoch": float(epoch), "temperature": T}
        if val and ((epoch + 1) % cfg.eval_every == 0 or epoch == cfg.epochs - 1):
            score = validation_score(model, val, phase, cfg)
            record["val_score"] = score
            if phase == "evidence":
                record["val_mean_z"] = mean_gate(model, val)
            if score > best_score:
                best_score = score
                best = model.copy()
        history.append(record)
        log.info("%s epoch %d: %s", phase, epoch, record)
        if out_dir is not None:
            ck.write_tensors(out_dir / "state.ckpt", _state_tensors(model, best, opt, epoch + 1, best_score, phase))
    if not val:
        best = model.copy()
    best.temperature = cfg.temp_end
    final = model.copy()
    final.temperature = cfg.temp_end
    if out_dir is not None:
        ck.save_model(out_dir / "model.ckpt", best, phase)
        (out_dir / "train_log.txt").write_text("\n".join([LOG_HEADER] + lines) + "\n")
    return TrainResult(best, final, lines, history, phase)


def train_baseline(manifest: DatasetManifest, config: BackboneConfig, cfg: TrainConfig,
                   out_dir=None, resume=None, stop_after: int | None = None) -> TrainResult:
    """Cross-entropy training of the backbone; best checkpoint by validation AUC."""
    if config.d_in != manifest.feature_dim or config.num_classes != manifest.num_classes:
        raise ValueError("backbone config does not match the dataset's feature dim / classes")
    train, val = manifest.load_split("train"), manifest.load_split("val")
    model = ReaMIL.create(config, seed=cfg.seed)
    return _run(model, train, val, cfg, "baseline", _out(out_dir), _path(resume), stop_after)


def warm_start(baseline: ReaMIL, seed: int, head_bias: float = 0.0) -> ReaMIL:
    """Copy the baseline backbone and attach a freshly initialized evidence head."""
    reference = ReaMIL.create(baseline.config, seed=0)
    ck.check_compatible(baseline, reference)
    model = ReaMIL(baseline.config, {k: v for k, v in baseline.copy().params.items() if k.startswith("backbone.")})
    model.attach_head(np.random.default_rng([seed, 1]))
    if head_bias:
        b = model.params["head.l2.b"]
        b.data = b.data + b.data.dtype.type(head_bias)
    return model


def train_reamil(manifest: DatasetManifest, baseline: ReaMIL, cfg: TrainConfig,
                 out_dir=None, resume=None, stop_after: int | None = None) -> TrainResult:
    """Evidence-phase training with the combined objective."""
    if baseline.config.d_in != manifest.feature_dim:
        raise ck.CheckpointError(
            f"backbone.feat.W expects d_in={baseline.config.d_in}, dataset has {manifest.feature_dim}")
    train, val = manifest.load_split("train"), manifest.load_split("val")
    model = warm_start(baseline, cfg.seed, cfg.head_bias)
    return _run(model, train, val, cfg, "evidence", _out(out_dir), _path(resume), stop_after)


def _out(out_dir):
    if out_dir is None:
        return None
    p = Path(out_dir)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _path(p):
    return None if p is None else Path(p)


# ---------------------------------------------------------------- evaluate


@dataclass
class EvalBundle:
    classification: dict[str, float]
    probs: np.ndarray
    labels: np.ndarray
    slide_ids: list[str]
    curves: list[mt.KCurve] | None = None
    diagnostics: list[mt.SlideDiagnostics] | None = None
    evidence: mt.EvidenceReport | None = None


def evaluate(bags: list[BagRecord], model: ReaMIL, tau: float = 0.9, grid=None, workers: int = 1) -> EvalBundle:
    """Classification metrics, plus evidence metrics when the head is present.

    Slides are independent given the read-only model, so ``workers > 1``
    fans them out over threads; results keep the input order.
    """
    if not bags:
        raise ValueError("cannot evaluate an empty split")
    probs = predict(model, bags)
    labels = np.array([b.label for b in bags])
    bundle = EvalBundle(mt.classification_metrics(probs, labels), probs, labels, [b.slide_id for b in bags])
    if model.has_head:
        def one(b):
            return mt.kcurve(b, model, grid), mt.diagnostics(b, model)
        if workers > 1:
            with ThreadPoolExecutor(workers) as pool:
                pairs = list(pool.map(one, bags))
        else:
            pairs = [one(b) for b in bags]
        bundle.curves = [c for c, _ in pairs]
        bundle.diagnostics = [d for _, d in pairs]
        bundle.evidence = mt.evidence_report(bundle.curves, bundle.diagnostics, tau)
    return bundle


def ablation_configs(cfg: TrainConfig) -> dict[str, TrainConfig]:
    """The full objective plus one variant per zeroed term."""
    out = {"full": cfg}
    for term in ("suff", "excl", "contig", "budget"):
        out[f"no_{term}"] = replace(cfg, loss=replace(cfg.loss, **{f"lambda_{term}": 0.0}))
    return out
