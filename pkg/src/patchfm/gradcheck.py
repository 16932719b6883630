"""Finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, backward, no_grad


@dataclass
class LeafCheck:
    name: str
    n_checked: int
    max_rel_err: float
    worst_index: tuple[int, ...]
    worst_analytic: float
    worst_numeric: float


@dataclass
class GradCheckReport:
    passed: bool
    tol: float
    h: float
    max_rel_err: float
    worst_leaf: str
    worst_index: tuple[int, ...]
    leaves: list[LeafCheck] = field(default_factory=list)

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"grad_check {status}: max rel err {self.max_rel_err:.3e} "
            f"(tol {self.tol:.1e}) at {self.worst_leaf}{list(self.worst_index)}"
        )


def _named_leaves(leaves) -> list[tuple[str, Tensor]]:
    if isinstance(leaves, dict):
        return list(leaves.items())
    if isinstance(leaves, Tensor):
        return [("leaf0", leaves)]
    return [(f"leaf{i}", t) for i, t in enumerate(leaves)]


def grad_check(
    f,
    leaves,
    h: float = 1e-5,
    tol: float = 1e-4,
    max_checks_per_leaf: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare analytic gradients of the scalar graph ``f()`` builds against
    central finite differences at every (or a sampled subset of) leaf element.

    ``f`` must be deterministic and close over ``leaves``. The relative error
    per element is |analytic - numeric| / max(1, |analytic|); the check passes
    iff all checked elements are within ``tol``. When ``max_checks_per_leaf``
    is set, coordinates are subsampled per leaf with ``rng`` (every leaf is
    still covered).
    """
    pairs = _named_leaves(leaves)
    if rng is None:
        rng = np.random.default_rng(0)

    for _, t in pairs:
        t.grad = None
    out = f()
    backward(out)
    analytic = {name: (np.zeros_like(t.data) if t.grad is None else t.grad.copy()) for name, t in pairs}

    report = GradCheckReport(
        passed=True, tol=tol, h=h, max_rel_err=0.0, worst_leaf="", worst_index=()
    )
    with no_grad():
        for name, t in pairs:
            flat = t.data.reshape(-1)
            n = flat.size
            if max_checks_per_leaf is not None and n > max_checks_per_leaf:
                idx = np.sort(rng.choice(n, size=max_checks_per_leaf, replace=False))
            else:
                idx = np.arange(n)
            ana_flat = analytic[name].reshape(-1)
            leaf = LeafCheck(name, len(idx), 0.0, (), 0.0, 0.0)
            for i in idx:
                orig = flat[i]
                flat[i] = orig + h
                f_plus = float(f().data.reshape(()))
                flat[i] = orig - h
                f_minus = float(f().data.reshape(()))
                flat[i] = orig
                numeric = (f_plus - f_minus) / (2.0 * h)
                ana = ana_flat[i]
                rel = abs(ana - numeric) / max(1.0, abs(ana))
                if rel > leaf.max_rel_err:
                    leaf.max_rel_err = rel
                    leaf.worst_index = np.unravel_index(i, t.data.shape) if t.data.shape else ()
                    leaf.worst_analytic = float(ana)
                    leaf.worst_numeric = numeric
            report.leaves.append(leaf)
            if leaf.max_rel_err > report.max_rel_err:
                report.max_rel_err = leaf.max_rel_err
                report.worst_leaf = name
                report.worst_index = leaf.worst_index
    report.passed = report.max_rel_err <= tol
    return report
