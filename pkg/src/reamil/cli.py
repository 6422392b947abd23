"""Command-line entry point: ``reamil <subcommand> [--config P] [--set K=V] --out DIR``.

Each command writes into a fresh output directory that appears atomically
(built under a temporary sibling and renamed on success). Failures print a
single ``error<TAB>kind<TAB>message`` line on stderr and exit nonzero.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import logging
import os
import shutil
import sys
import tempfile
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import checkpoint as ck
from . import config as cf
from . import metrics as mt
from . import svg
from .data import BagFormatError, gen_synthetic, read_manifest
from .gradcheck import toy_suite
from .head import rank_tiles
from .trainer import (TrainingError, ablation_configs, evaluate, train_baseline,
                      train_reamil)

log = logging.getLogger("reamil")

EXIT_FAILURE = 1
EXIT_USAGE = 2


class CLIError(RuntimeError):
    """Known failure with a kind tag for the one-line error report."""

    def __init__(self, kind: str, message: str, code: int = EXIT_FAILURE):
        super().__init__(message)
        self.kind = kind
        self.code = code


# ---------------------------------------------------------------- plumbing


def build_id() -> str:
    """Hash of the package sources, so outputs name the code that made them."""
    h = hashlib.sha256()
    root = Path(__file__).resolve().parent
    for p in sorted(root.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()[:16]


def _file_digest(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


class OutputDir:
    """Temporary sibling directory renamed onto ``target`` on success."""

    def __init__(self, target: Path):
        self.target = Path(target)
        if self.target.exists() and (not self.target.is_dir() or any(self.target.iterdir())):
            raise CLIError("OutputExists", f"output directory {self.target} exists and is not empty")
        self.target.parent.mkdir(parents=True, exist_ok=True)
        self.tmp = Path(tempfile.mkdtemp(prefix=f".{self.target.name}.", dir=self.target.parent))

    def commit(self) -> None:
        if self.target.exists():
            self.target.rmdir()
        os.rename(self.tmp, self.target)

    def abort(self) -> None:
        shutil.rmtree(self.tmp, ignore_errors=True)


def _write_run_file(out: Path, command: str, cfg: cf.RunConfig, inputs: dict[str, Path],
                    metrics: dict[str, float] | None = None) -> None:
    lines = [f"command = {command}", f"build = {build_id()}"]
    for name, p in sorted(inputs.items()):
        lines.append(f"input.{name} = {p.name} sha256:{_file_digest(p)}")
    for name, v in sorted((metrics or {}).items()):
        lines.append(f"metric.{name} = {v:.6g}")
    (out / "run.txt").write_text("\n".join(lines) + "\n\n" + cf.dump(cfg))


def _require(path_str: str, what: str) -> Path:
    if not path_str:
        raise CLIError("MissingInput", f"{what} not given (set paths.{what})", EXIT_USAGE)
    p = Path(path_str)
    if not p.exists():
        raise CLIError("MissingInput", f"{what} not found: {p}")
    return p


def _manifest(cfg: cf.RunConfig):
    d = _require(cfg.paths.data, "data")
    path = d / "manifest.tsv" if d.is_dir() else d
    if not path.is_file():
        raise CLIError("MissingInput", f"no manifest.tsv under {d}")
    return read_manifest(path), path


def _backbone(cfg: cf.RunConfig, manifest):
    # Input width and class count always follow the dataset.
    return replace(cfg.backbone, d_in=manifest.feature_dim, num_classes=manifest.num_classes)


def _write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _f6(x) -> str:
    return "" if x is None else f"{float(x):.6f}"


# ---------------------------------------------------------------- commands


def cmd_synth(cfg: cf.RunConfig, out: Path) -> dict[str, Path]:
    gen_synthetic(cfg.data, out)
    return {}


def cmd_train_baseline(cfg: cf.RunConfig, out: Path, resume: str | None = None) -> tuple[dict[str, Path], dict]:
    manifest, mpath = _manifest(cfg)
    res = train_baseline(manifest, _backbone(cfg, manifest), cfg.baseline, out_dir=out,
                         resume=_require(resume, "resume") if resume else None)
    return {"manifest": mpath}, _final_metrics(res)


def _final_metrics(res) -> dict[str, float]:
    """Last epoch's record (validation score, mean gate, temperature)."""
    return dict(res.history[-1]) if res.history else {}


def _load(path: Path):
    try:
        return ck.load_model(path)
    except ck.CheckpointError as exc:
        raise CLIError("CheckpointError", f"{path}: {exc}") from None


def cmd_train_reamil(cfg: cf.RunConfig, out: Path, resume: str | None = None) -> tuple[dict[str, Path], dict]:
    manifest, mpath = _manifest(cfg)
    bpath = _require(cfg.paths.baseline, "baseline")
    baseline, _ = _load(bpath)
    res = train_reamil(manifest, baseline, cfg.evidence_train(), out_dir=out,
                       resume=_require(resume, "resume") if resume else None)
    return {"manifest": mpath, "baseline": bpath}, _final_metrics(res)


def _split(cfg: cf.RunConfig, manifest):
    bags = manifest.load_split(cfg.eval.split)
    if not bags:
        raise CLIError("EmptySplit", f"split {cfg.eval.split!r} has no bags")
    return bags


def cmd_eval(cfg: cf.RunConfig, out: Path) -> dict[str, Path]:
    manifest, mpath = _manifest(cfg)
    mpath_model = _require(cfg.paths.model, "model")
    model, _ = _load(mpath_model)
    bags = _split(cfg, manifest)
    res = evaluate(bags, model, tau=cfg.eval.tau, workers=cfg.eval.workers)
    _write_csv(out / "classification.csv", ["metric", "value"],
               [[k, _f6(v)] for k, v in res.classification.items()])
    n_cls = res.probs.shape[1]
    _write_csv(out / "predictions.csv", ["slide_id", "label"] + [f"p_{c}" for c in range(n_cls)],
               [[s, int(y)] + [_f6(p) for p in row] for s, y, row in zip(res.slide_ids, res.labels, res.probs)])
    if res.evidence is not None:
        mt.write_slide_csv(res.evidence, out / "per_slide.csv")
        mt.write_summary_csv(res.evidence.summary(), out / "summary.csv")
        sel = out / "selection"
        sel.mkdir()
        for bag, diag in zip(bags, res.diagnostics):
            mt.write_selection(diag, bag.coords, sel / f"{bag.slide_id}.selection.tsv")
    return {"manifest": mpath, "model": mpath_model}


def cmd_kcurve(cfg: cf.RunConfig, out: Path) -> dict[str, Path]:
    manifest, mpath = _manifest(cfg)
    mpath_model = _require(cfg.paths.model, "model")
    model, _ = _load(mpath_model)
    if not model.has_head:
        raise CLIError("NoEvidenceHead", "K-curves need an evidence-phase checkpoint")
    bags = _split(cfg, manifest)
    res = evaluate(bags, model, tau=cfg.eval.tau, workers=cfg.eval.workers)
    cdir = out / "kcurves"
    cdir.mkdir()
    for c in res.curves:
        mt.write_kcurve_csv(c, cdir / f"{c.slide_id}.csv")
    grid, mean, std = mt.mean_curve(res.curves)
    _write_csv(out / "mean_curve.csv", ["k", "mean_p_y", "std_p_y"],
               [[int(k), _f6(m), _f6(s)] for k, m, s in zip(grid, mean, std)])
    summary = res.evidence.summary()
    text = svg.kcurve_svg(grid, mean, std, int(grid[-1]), msk_mean=summary["msk_mean"], tau=cfg.eval.tau,
                          title=f"K-curve ({cfg.eval.split}, n={len(bags)})")
    svg.write(out / "mean_curve.svg", text)
    return {"manifest": mpath, "model": mpath_model}


ABLATION_HEADER = ["Variant", "Suff. gap", "p_y(drop)", "Contig.", "‖z‖₁"]


def cmd_ablate(cfg: cf.RunConfig, out: Path) -> dict[str, Path]:
    manifest, mpath = _manifest(cfg)
    bpath = _require(cfg.paths.baseline, "baseline")
    baseline, _ = _load(bpath)
    bags = _split(cfg, manifest)
    rows = []
    for name, tcfg in ablation_configs(cfg.evidence_train()).items():
        vdir = out / name
        vdir.mkdir()
        result = train_reamil(manifest, baseline, tcfg, out_dir=vdir)
        res = evaluate(bags, result.model, tau=cfg.eval.tau, workers=cfg.eval.workers)
        s = res.evidence.summary()
        z_l1 = float(np.mean([d.gates.sum() for d in res.diagnostics]))
        rows.append([name, _f6(s["suff_gap_mean"]), _f6(s["p_drop_mean"]), _f6(s["contig_mean"]), _f6(z_l1)])
    with open(out / "ablation.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ABLATION_HEADER)
        w.writerows(rows)
    return {"manifest": mpath, "baseline": bpath}


def cmd_overlay(cfg: cf.RunConfig, out: Path) -> dict[str, Path]:
    manifest, mpath = _manifest(cfg)
    mpath_model = _require(cfg.paths.model, "model")
    model, _ = _load(mpath_model)
    if not model.has_head:
        raise CLIError("NoEvidenceHead", "overlays need an evidence-phase checkpoint")
    if not cfg.eval.slide:
        raise CLIError("MissingInput", "no slide given (set eval.slide)", EXIT_USAGE)
    try:
        bag = manifest.load(manifest.entry(cfg.eval.slide))
    except KeyError:
        raise CLIError("MissingInput", f"slide {cfg.eval.slide!r} not in manifest") from None
    diag = mt.diagnostics(bag, model)
    k = min(cfg.eval.top_k, bag.n_tiles)
    top = rank_tiles(diag.logits)[:k]
    size = cfg.eval.tile_size
    if size <= 0:
        span = float(np.max(bag.coords.max(axis=0) - bag.coords.min(axis=0)))
        size = max(span, 1.0) / np.sqrt(bag.n_tiles)
    text = svg.overlay_svg(bag.coords, diag.gates, top, size,
                           title=f"{bag.slide_id} (label {bag.label}, top {k})")
    svg.write(out / f"{bag.slide_id}.overlay.svg", text)
    lines = ["rank\ttile_index\tu\tv\tlogit\tgate"]
    for r, i in enumerate(top, 1):
        lines.append(f"{r}\t{i}\t{bag.coords[i, 0]:.6g}\t{bag.coords[i, 1]:.6g}\t"
                     f"{diag.logits[i]:.9g}\t{diag.gates[i]:.9g}")
    (out / f"{bag.slide_id}.topk.tsv").write_text("\n".join(lines) + "\n")
    return {"manifest": mpath, "model": mpath_model}


def cmd_gradcheck(cfg: cf.RunConfig, out: Path) -> dict[str, Path]:
    reports = toy_suite(seed=cfg.gradcheck.seed, tolerance=cfg.gradcheck.tolerance)
    lines = ["suite\tparam\tmax_rel_error\tchecked\texcluded"]
    failed = []
    for suite, rep in reports.items():
        lines += [f"{suite}\t{line}" for line in rep.lines()]
        if not rep.passed:
            failed.append(f"{suite}={rep.max_rel_error:.3e}")
    (out / "gradcheck.tsv").write_text("\n".join(lines) + "\n")
    if failed:
        raise GradcheckFailed(", ".join(failed))
    return {}


class GradcheckFailed(RuntimeError):
    pass


COMMANDS = {
    "synth": cmd_synth,
    "train-baseline": cmd_train_baseline,
    "train-reamil": cmd_train_reamil,
    "eval": cmd_eval,
    "kcurve": cmd_kcurve,
    "ablate": cmd_ablate,
    "overlay": cmd_overlay,
    "gradcheck": cmd_gradcheck,
}

HELP = {
    "synth": "write a synthetic dataset with planted evidence",
    "train-baseline": "cross-entropy training of the backbone",
    "train-reamil": "evidence-phase training warm-started from a baseline",
    "eval": "classification and evidence reports on one split",
    "kcurve": "per-slide K-curve CSVs and the mean-curve SVG",
    "ablate": "retrain with each auxiliary term zeroed; comparison CSV",
    "overlay": "SVG of one slide's tile gates with the top-K tiles outlined",
    "gradcheck": "finite-difference gradient suite at toy dimensions",
}

# Convenience flags that are shorthand for --set paths.* / eval.*.
SHORTHANDS = {"data": "paths.data", "baseline": "paths.baseline", "model": "paths.model",
              "split": "eval.split", "slide": "eval.slide"}


# ---------------------------------------------------------------- argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # one line, machine-parseable
        raise CLIError("UsageError", message, EXIT_USAGE)


def make_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="key = value file with [section] headers")
    common.add_argument("--set", metavar="KEY=VALUE", action="append", default=[],
                        help="override section.field (repeatable; applied last)")
    common.add_argument("--out", metavar="DIR", required=True, help="new or empty output directory")
    common.add_argument("--seed", type=int, help="sets data/baseline/reamil/gradcheck seeds")
    common.add_argument("-v", "--verbose", action="store_true")
    for flag, key in SHORTHANDS.items():
        common.add_argument(f"--{flag}", help=f"shorthand for --set {key}=...")
    parser = _Parser(
        prog="reamil",
        description="Evidence-aware multiple-instance learning: synthesis, training, evaluation.",
        epilog="configuration keys and defaults:\n\n" + cf.defaults_help(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common], help=HELP[name],
                           epilog="configuration keys and defaults:\n\n" + cf.defaults_help(),
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        if name in ("train-baseline", "train-reamil"):
            p.add_argument("--resume", metavar="STATE", help="state.ckpt written by an earlier run")
    return parser


def resolve_config(args) -> cf.RunConfig:
    cfg = cf.load(args.config) if args.config else cf.RunConfig()
    if args.seed is not None:
        s = str(args.seed)
        for key in ("data.seed", "baseline.seed", "reamil.seed", "gradcheck.seed"):
            cfg = cf.apply(cfg, key, s)
    for flag, key in SHORTHANDS.items():
        v = getattr(args, flag)
        if v is not None:
            cfg = cf.apply(cfg, key, v)
    for item in args.set:
        if "=" not in item:
            raise cf.ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        cfg = cf.apply(cfg, k.strip(), v)
    return cfg


def run(argv: list[str] | None = None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    cfg = resolve_config(args)
    out = OutputDir(Path(args.out))
    try:
        kwargs = {"resume": args.resume} if hasattr(args, "resume") else {}
        produced = COMMANDS[args.command](cfg, out.tmp, **kwargs)
        inputs, metrics = produced if isinstance(produced, tuple) else (produced, None)
        _write_run_file(out.tmp, args.command, cfg, inputs, metrics)
    except BaseException:
        out.abort()
        raise
    out.commit()
    return 0


def _one_line(msg: str) -> str:
    return " ".join(str(msg).split())


def main(argv: list[str] | None = None) -> int:
    try:
        return run(argv)
    except CLIError as exc:
        kind, code, msg = exc.kind, exc.code, str(exc)
    except cf.ConfigError as exc:
        kind, code, msg = "ConfigError", EXIT_USAGE, str(exc)
    except TrainingError as exc:
        kind, code, msg = "TrainingError", EXIT_FAILURE, str(exc)
    except GradcheckFailed as exc:
        kind, code, msg = "GradcheckFailed", EXIT_FAILURE, str(exc)
    except (ck.CheckpointError, BagFormatError) as exc:
        kind, code, msg = type(exc).__name__, EXIT_FAILURE, str(exc)
    except (FileNotFoundError, ValueError) as exc:
        kind, code, msg = type(exc).__name__, EXIT_FAILURE, str(exc)
    print(f"error\t{kind}\t{_one_line(msg)}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
