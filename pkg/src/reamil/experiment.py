"""Synthetic end-to-end experiment: generate, train both phases, evaluate.

Used by the scripts in ``scripts/`` and by the acceptance tests.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import metrics as mt
from .backbone import BackboneConfig
from .data import DatasetManifest, SynthConfig, gen_synthetic, read_evidence, read_manifest
from .model import ReaMIL
from .trainer import TrainConfig, ablation_configs, evaluate, evidence_config, train_baseline, train_reamil


@dataclass
class ExperimentConfig:
    data: SynthConfig = field(default_factory=SynthConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    baseline: TrainConfig = field(default_factory=TrainConfig)
    reamil: TrainConfig = field(default_factory=evidence_config)
    tau: float = 0.90

    def with_seed(self, seed: int, vary_data: bool = False) -> "ExperimentConfig":
        """Training seeds follow ``seed``; the dataset does too only if ``vary_data``."""
        data = replace(self.data, seed=seed) if vary_data else self.data
        return replace(self, data=data, baseline=replace(self.baseline, seed=seed),
                       reamil=replace(self.reamil, seed=seed))


@dataclass
class EvidenceScores:
    auc: float
    msk_mean: float
    sufficient_rate: float
    aukc_mean: float
    precision: float  # top-k_ev on positive (evidence-bearing) test bags
    p_drop_mean: float
    p_drop_positive: float
    mean_z: float
    z_l1: float
    suff_gap: float
    contig: float


def score_evidence(manifest: DatasetManifest, model: ReaMIL, split: str = "test", tau: float = 0.90) -> EvidenceScores:
    bags = manifest.load_split(split)
    res = evaluate(bags, model, tau=tau)
    s = res.evidence.summary()
    prec, pdrop_pos = [], []
    for bag, d in zip(bags, res.diagnostics):
        ev = read_evidence(manifest.evidence_path(manifest.entry(bag.slide_id)))
        if len(ev):
            prec.append(mt.selector_precision(d.logits, ev))
            pdrop_pos.append(d.p_drop)
    return EvidenceScores(
        auc=res.classification["auc"],
        msk_mean=s["msk_mean"],
        sufficient_rate=s["sufficient_rate"],
        aukc_mean=s["aukc_mean"],
        precision=float(np.mean(prec)),
        p_drop_mean=s["p_drop_mean"],
        p_drop_positive=float(np.mean(pdrop_pos)),
        mean_z=s["mean_z_mean"],
        z_l1=float(np.mean([d.gates.sum() for d in res.diagnostics])),
        suff_gap=s["suff_gap_mean"],
        contig=s["contig_mean"],
    )


@dataclass
class SeedResult:
    seed: int
    baseline_auc: float
    evidence: EvidenceScores
    seconds: float
    data_seed: int
    baseline: ReaMIL = field(repr=False)
    model: ReaMIL = field(repr=False)
    manifest: DatasetManifest = field(repr=False)


def run_seed(cfg: ExperimentConfig, seed: int, workdir, vary_data: bool = False) -> SeedResult:
    """Train both phases for one seed and score the test split.

    The dataset is generated under ``workdir`` on first use and reused after.
    """
    t0 = time.perf_counter()
    cfg = cfg.with_seed(seed, vary_data)
    data_dir = Path(workdir) / f"data_s{cfg.data.seed}"
    if (data_dir / "manifest.tsv").exists():
        manifest = read_manifest(data_dir / "manifest.tsv")
    else:
        manifest = gen_synthetic(cfg.data, data_dir)
    root = Path(workdir) / f"run_d{cfg.data.seed}_s{seed}"
    backbone = replace(cfg.backbone, d_in=manifest.feature_dim, num_classes=manifest.num_classes)
    base = train_baseline(manifest, backbone, cfg.baseline, out_dir=root / "baseline").model
    test = manifest.load_split("test")
    base_auc = evaluate(test, base).classification["auc"]
    model = train_reamil(manifest, base, cfg.reamil, out_dir=root / "reamil").model
    scores = score_evidence(manifest, model, tau=cfg.tau)
    return SeedResult(seed, base_auc, scores, time.perf_counter() - t0, cfg.data.seed, base, model, manifest)


def run_ablation(cfg: ExperimentConfig, result: SeedResult, workdir) -> dict[str, EvidenceScores]:
    """Retrain the evidence phase with each term zeroed, from the same baseline."""
    out = {}
    root = Path(workdir) / f"ablation_s{result.seed}"
    for name, tcfg in ablation_configs(replace(cfg.reamil, seed=result.seed)).items():
        if name == "full":
            out[name] = result.evidence
            continue
        model = train_reamil(result.manifest, result.baseline, tcfg, out_dir=root / name).model
        out[name] = score_evidence(result.manifest, model, tau=cfg.tau)
    return out
