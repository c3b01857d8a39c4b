"""Central finite-difference verification of every analytic loss gradient.

The numeric side perturbs each bank entry by +/- h and re-evaluates all loss
terms from the shared evaluations, so one sweep prices every component.  For
the detached-teacher mode the teacher pathway is computed once from the
unperturbed banks and held fixed across perturbations; the finite difference
then measures the same partial derivative the detach produces analytically.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .autodiff import Tape, Var
from .model import (
    Batch,
    LossWeights,
    MemoryAligner,
    ObjectiveOutputs,
    PathwayOutput,
    auditory_pathway,
    batch_objective,
)
from .rng import make_rng

COMPONENTS = ("rec", "align", "imi", "timbre_c", "env_c")
DEFAULT_STEP = 1e-5
DEFAULT_REL_TOL = 1e-4
DEFAULT_ABS_TOL = 1e-7


@dataclass
class ComponentReport:
    """Comparison outcome for one loss term in one teacher mode."""

    component: str
    detach_teacher: bool
    max_rel_err: float
    max_abs_err: float
    worst_param: str
    n_checked: int
    passed: bool

    def describe(self) -> str:
        mode = "detached" if self.detach_teacher else "coupled"
        status = "ok" if self.passed else "FAIL"
        return (
            f"{self.component:<9} [{mode}] {status}: rel {self.max_rel_err:.3e}"
            f" abs {self.max_abs_err:.3e} over {self.n_checked} entries"
            f" (worst in {self.worst_param})"
        )


def _grad_snapshot(leaves: Mapping[str, Var]) -> dict[str, np.ndarray]:
    return {
        name: (np.zeros_like(leaf.value) if leaf.grad is None else leaf.grad.copy())
        for name, leaf in leaves.items()
    }


def analytic_gradients(
    params: Mapping[str, np.ndarray],
    batch: Batch,
    weights: LossWeights,
    tau: float,
    detach_teacher: bool,
    teacher_override: PathwayOutput | None = None,
    components: Sequence[str] = COMPONENTS,
) -> dict[str, dict[str, np.ndarray]]:
    """Backprop gradients of each requested term, one backward per term
    on a single shared forward tape."""
    tape = Tape()
    leaves = {name: tape.leaf(p) for name, p in params.items()}
    out = batch_objective(leaves, batch, weights, tau, detach_teacher, teacher_override)
    grads: dict[str, dict[str, np.ndarray]] = {}
    for comp in components:
        node = out.total if comp == "total" else out.terms[comp]
        if isinstance(node, Var):
            tape.backward(node)
            grads[comp] = _grad_snapshot(leaves)
        else:
            # term absent from this batch: constant zero, zero gradient
            grads[comp] = {name: np.zeros_like(p) for name, p in params.items()}
    return grads


def numeric_gradients(
    params: Mapping[str, np.ndarray],
    batch: Batch,
    weights: LossWeights,
    tau: float,
    detach_teacher: bool,
    teacher_override: PathwayOutput | None = None,
    components: Sequence[str] = COMPONENTS,
    h: float = DEFAULT_STEP,
) -> dict[str, dict[str, np.ndarray]]:
    """Central differences for each term, sharing the +/- h evaluations."""

    def values(out: ObjectiveOutputs) -> dict[str, float]:
        bd = out.breakdown.components()
        return {comp: bd[comp] for comp in components}

    def evaluate() -> dict[str, float]:
        return values(batch_objective(params, batch, weights, tau, detach_teacher, teacher_override))

    grads = {comp: {name: np.zeros_like(p) for name, p in params.items()} for comp in components}
    for name, p in params.items():
        flat = p.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            plus = evaluate()
            flat[i] = orig - h
            minus = evaluate()
            flat[i] = orig
            for comp in components:
                grads[comp][name].reshape(-1)[i] = (plus[comp] - minus[comp]) / (2.0 * h)
    return grads


def compare_gradients(
    component: str,
    detach_teacher: bool,
    analytic: Mapping[str, np.ndarray],
    numeric: Mapping[str, np.ndarray],
    rel_tol: float = DEFAULT_REL_TOL,
    abs_tol: float = DEFAULT_ABS_TOL,
) -> ComponentReport:
    """Per-entry relative error with a floored denominator:

        rel = |a - b| / max(|a|, |b|, abs_tol / rel_tol)

    so an entry passes iff |a - b| <= max(rel_tol * scale, abs_tol).  The
    floor keeps finite-difference roundoff (~eps * |f| / h, far above any
    truncation error on near-zero entries) from failing gradients whose true
    magnitude is below the noise of the numeric estimate; a sign flip of even
    a tiny entry still shows up because abs_tol is small.
    """
    floor = abs_tol / rel_tol
    max_rel = 0.0
    max_abs = 0.0
    worst = ""
    n = 0
    for name in analytic:
        a = analytic[name].reshape(-1)
        b = numeric[name].reshape(-1)
        n += a.size
        denom = np.maximum(np.abs(a), np.abs(b))
        diff = np.abs(a - b)
        rel = float(np.max(diff / np.maximum(denom, floor)))
        small = denom < floor
        absd = float(np.max(diff[small])) if small.any() else 0.0
        if rel > max_rel:
            worst = name
        max_rel = max(max_rel, rel)
        max_abs = max(max_abs, absd)
    return ComponentReport(component, detach_teacher, max_rel, max_abs, worst, n, max_rel <= rel_tol)


def check_gradients(
    model: MemoryAligner,
    batch: Batch,
    *,
    weights: LossWeights | None = None,
    detach_teacher: bool = True,
    components: Sequence[str] = COMPONENTS,
    h: float = DEFAULT_STEP,
    rel_tol: float = DEFAULT_REL_TOL,
    abs_tol: float = DEFAULT_ABS_TOL,
    fault: str | None = None,
) -> list[ComponentReport]:
    """Compare analytic and numeric gradients of every requested loss term.

    `fault` names a component whose analytic gradient is sign-flipped before
    comparison; a healthy checker must then report that component failed.
    """
    weights = weights or LossWeights()
    tau = model.temperature
    params = {name: p.copy() for name, p in model.parameters().items()}
    teacher = None
    if detach_teacher:
        teacher = auditory_pathway(params["timbre_value"], params["sound_value"], batch.a, tau)
    analytic = analytic_gradients(params, batch, weights, tau, detach_teacher, teacher, components)
    numeric = numeric_gradients(params, batch, weights, tau, detach_teacher, teacher, components, h)
    if fault is not None:
        if fault not in analytic:
            raise ValueError(f"fault component {fault!r} not among {tuple(analytic)}")
        analytic[fault] = {name: -g for name, g in analytic[fault].items()}
    return [
        compare_gradients(comp, detach_teacher, analytic[comp], numeric[comp], rel_tol, abs_tol)
        for comp in components
    ]


def random_instance(
    seed: int,
    *,
    n_slots: int = 4,
    dim: int = 6,
    rows: int = 6,
    temperature: float = 0.07,
) -> tuple[MemoryAligner, Batch]:
    """Small random model and batch with one pair of each contrastive mode."""
    if rows < 4:
        raise ValueError("need at least 4 rows to carry both pair modes")
    rng = make_rng(seed)
    model = MemoryAligner.create(n_slots, dim, rng, temperature=temperature)
    v = rng.normal(0.0, 1.0, (rows, dim))
    a = rng.normal(0.0, 1.0, (rows, dim))
    batch = Batch(
        v=v,
        a=a,
        timbre_pairs=np.array([[0, 1]], dtype=np.intp),
        env_pairs=np.array([[2, 3]], dtype=np.intp),
    )
    return model, batch


def check_random_instances(
    n_instances: int,
    *,
    seed0: int = 0,
    detach_modes: Sequence[bool] = (True, False),
    **kwargs,
) -> list[ComponentReport]:
    """Gradient-check freshly initialized instances; returns all reports."""
    reports: list[ComponentReport] = []
    for i in range(n_instances):
        model, batch = random_instance(seed0 + i)
        for mode in detach_modes:
            reports.extend(check_gradients(model, batch, detach_teacher=mode, **kwargs))
    return reports


def all_passed(reports: Sequence[ComponentReport]) -> bool:
    return all(r.passed for r in reports)
