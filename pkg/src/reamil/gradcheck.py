"""Central finite-difference checks of tape gradients.

A closure recomputes the loss from the current parameter values. It may
return ``(loss, kinks)`` where ``kinks`` holds the arguments of every
``max(., 0)`` hinge; coordinates whose perturbation flips a hinge's sign
are non-differentiable there and are reported as excluded, not failed.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

REL_FLOOR = 1e-6


class NondeterminismError(RuntimeError):
    pass


@dataclass
class ParamCheck:
    name: str
    max_rel_error: float
    checked: int
    excluded: int


@dataclass
class GradcheckReport:
    params: list[ParamCheck]
    tolerance: float
    excluded_points: list[tuple[str, int]] = field(default_factory=list)

    @property
    def max_rel_error(self) -> float:
        return max((p.max_rel_error for p in self.params), default=0.0)

    @property
    def passed(self) -> bool:
        return all(p.max_rel_error <= self.tolerance for p in self.params)

    def lines(self) -> list[str]:
        out = [f"{p.name}\t{p.max_rel_error:.3e}\t{p.checked}\t{p.excluded}" for p in self.params]
        out.append(f"max\t{self.max_rel_error:.3e}\t{'PASS' if self.passed else 'FAIL'}")
        return out


def _evaluate(closure) -> tuple[float, np.ndarray | None]:
    res = closure()
    if isinstance(res, tuple):
        loss, kinks = res
        kinks = np.asarray([k.item() if isinstance(k, Tensor) else k for k in kinks], dtype=np.float64)
    else:
        loss, kinks = res, None
    return loss.item(), kinks


def gradcheck(
    closure: Callable[[], Tensor | tuple[Tensor, list]],
    params: dict[str, Tensor],
    tolerance: float = 1e-3,
    step: float = 1e-4,
    max_per_param: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradcheckReport:
    """Compare analytic gradients of ``closure`` with central differences.

    ``max_per_param`` subsamples coordinates (with ``rng``) for large
    tensors; by default every coordinate is checked.
    """
    for p in params.values():
        p.grad = None
    with ad.Tape():
        res = closure()
        loss = res[0] if isinstance(res, tuple) else res
        ad.backward(loss)
    f0, kinks0 = _evaluate(closure)
    if f0 != loss.item():
        raise NondeterminismError(f"two forward passes disagree: {loss.item()!r} vs {f0!r}")
    analytic = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)).copy() for k, p in params.items()}

    checks, excluded_pts = [], []
    for name, p in params.items():
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_per_param is not None and flat.size > max_per_param:
            idx = np.sort((rng or np.random.default_rng(0)).choice(flat.size, max_per_param, replace=False))
        worst, n_ok, n_ex = 0.0, 0, 0
        ga = analytic[name].reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            fp, kp = _evaluate(closure)
            flat[i] = orig - step
            fm, km = _evaluate(closure)
            flat[i] = orig
            if kinks0 is not None and (
                np.any(np.sign(kp) != np.sign(km)) or np.any(kinks0 == 0.0)
            ):
                n_ex += 1
                excluded_pts.append((name, int(i)))
                continue
            num = (fp - fm) / (2 * step)
            err = abs(num - ga[i]) / max(abs(num), abs(ga[i]), REL_FLOOR)
            worst = max(worst, err)
            n_ok += 1
        checks.append(ParamCheck(name, worst, n_ok, n_ex))
    return GradcheckReport(checks, tolerance, excluded_pts)


def reamil_closure(model, X: np.ndarray, coords: np.ndarray, label: int, noise: np.ndarray,
                   loss_config, temperature: float = 1.0):
    """Full evidence objective with frozen gate noise, for gradient checks."""
    from .backbone import normalize_coords
    from .objectives import total_loss, true_class_prob

    coords_norm = normalize_coords(coords)

    def closure():
        fwd = model.views_forward(X, coords, mode="train", temperature=temperature, noise=noise)
        br = total_loss(fwd.full, fwd.keep, fwd.drop, fwd.selection.gates, coords_norm, label, loss_config)
        kinks = [
            loss_config.tau - true_class_prob(fwd.keep, label).item(),
            true_class_prob(fwd.drop, label).item() - loss_config.beta,
        ]
        return br.total, kinks

    return closure


def toy_suite(seed: int = 0, tolerance: float = 1e-3) -> dict[str, GradcheckReport]:
    """Finite-difference suite at toy dimensions (all f64)."""
    from .backbone import BackboneConfig
    from .model import ReaMIL
    from .objectives import LossConfig

    rng = np.random.default_rng(seed)
    cfg = BackboneConfig(d_in=16, d_model=16, heads=2, layers=1, num_classes=2)
    model = ReaMIL.create(cfg, seed=seed, with_head=True, dtype=np.float64)
    # Nonzero CLS and perturbed norms so every path carries gradient.
    for name, p in model.params.items():
        if name.endswith("cls_token") or ".ln" in name:
            p.data = p.data + rng.normal(0, 0.1, p.shape)
    X = rng.normal(size=(6, 16))
    coords = rng.uniform(0, 1000, size=(6, 2))
    noise = rng.uniform(0.05, 0.95, size=6)
    reports = {}

    x_in = Tensor(rng.normal(size=(5, 4)))
    lin = {"W": Tensor(rng.normal(size=(4, 3)), requires_grad=True),
           "b": Tensor(rng.normal(size=3), requires_grad=True)}
    reports["linear"] = gradcheck(
        lambda: ad.sum_(ad.mul(ad.add(ad.matmul(x_in, lin["W"]), lin["b"]),
                                ad.add(ad.matmul(x_in, lin["W"]), lin["b"]))),
        lin, tolerance=1e-6)

    backbone_params = {k: v for k, v in model.params.items() if k.startswith("backbone.")}
    reports["backbone"] = gradcheck(
        lambda: ad.cross_entropy(model.full_logits(X, coords), 1), backbone_params, tolerance=tolerance)

    for label in (0, 1):
        closure = reamil_closure(model, X, coords, label, noise, LossConfig())
        reports[f"reamil_label{label}"] = gradcheck(closure, model.params, tolerance=tolerance)
    return reports
