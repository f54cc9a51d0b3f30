from typing import Callable, Dict, Mapping, Optional

import numpy as np
import structlog

from app.core.errors import GradientCheckError
from app.models.dto import GradCheckReport
from app.utils.autodiff import Node, backward, parameter, record_branches

logger = structlog.get_logger(__name__)

ScalarFn = Callable[[Mapping[str, Node]], Node]


def _evaluate(f: ScalarFn, values: Mapping[str, np.ndarray]):
    leaves = {key: parameter(val, name=key) for key, val in values.items()}
    with record_branches() as branches:
        out = f(leaves)
    return out, leaves, branches


def gradient_check(
    f: ScalarFn,
    theta: Mapping[str, np.ndarray],
    step: float = 1e-6,
    tol: float = 1e-4,
    floor: float = 1e-4,
    max_per_key: Optional[int] = None,
) -> GradCheckReport:
    """Compare reverse-mode gradients of ``f`` with central differences.

    ``f`` maps named parameter nodes to a scalar node. The relative error of a
    coordinate is ``|a - n| / max(|a|, |n|, floor)``. A coordinate whose
    ``+step`` or ``-step`` perturbation flips the branch of any non-smooth primitive
    (a relu crossing 0, an argmax change, ...) is skipped and listed in the
    report instead of being compared.

    ``max_per_key`` limits each parameter to that many evenly spaced coordinates.
    """
    base = {key: np.array(val, dtype=np.float64) for key, val in theta.items()}
    root, leaves, base_branches = _evaluate(f, base)
    grads = backward(root)
    analytic: Dict[str, np.ndarray] = {
        key: np.asarray(grads.get(node, np.zeros_like(node.value))) for key, node in leaves.items()
    }

    worst_err, worst_key, checked = 0.0, None, 0
    skipped = []
    for key, val in base.items():
        flat = val.reshape(-1)
        indices = range(flat.size)
        if max_per_key is not None and flat.size > max_per_key:
            indices = np.unique(np.linspace(0, flat.size - 1, max_per_key).astype(np.int64)).tolist()
        for i in indices:
            coord = f"{key}[{i}]"
            evals = []
            for sign in (1.0, -1.0):
                shifted = dict(base)
                moved = flat.copy()
                moved[i] += sign * step
                shifted[key] = moved.reshape(val.shape)
                out, _, branches = _evaluate(f, shifted)
                fval = out.item()
                if not np.isfinite(fval):
                    raise GradientCheckError(f"objective is not finite at {coord} {'+' if sign > 0 else '-'} step", coordinate=coord)
                evals.append((fval, branches))
            if evals[0][1] != base_branches or evals[1][1] != base_branches:
                skipped.append(coord)
                continue
            numeric = (evals[0][0] - evals[1][0]) / (2.0 * step)
            a = float(analytic[key].reshape(-1)[i])
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            checked += 1
            if err > worst_err:
                worst_err, worst_key = err, coord

    report = GradCheckReport(
        max_rel_error=worst_err,
        tol=tol,
        step=step,
        passed=worst_err < tol,
        worst=worst_key,
        n_checked=checked,
        skipped=skipped,
    )
    logger.debug("gradient_check_finished", max_rel_error=worst_err, checked=checked, skipped=len(skipped))
    return report
