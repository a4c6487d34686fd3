"""
Finite-difference verification of tape gradients.

finite_diff_check() compares central differences against backward() for
every (or a seeded sample of) parameter entries; primitive_suite() runs it
over each diffcore primitive on randomized inputs.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Callable, Mapping
from dataclasses import dataclass, field

import numpy as np

from tcatseg import diffcore as dc
from tcatseg.errors import GradCheckError, ValidationError

log = logging.getLogger(__name__)

REL_FLOOR = 1e-6


@dataclass
class ParamCheck:
    name: str
    max_rel_err: float
    worst_index: tuple[int, ...]
    analytic: float
    numeric: float
    checked: int


@dataclass
class CheckReport:
    eps: float
    tol: float
    params: list[ParamCheck] = field(default_factory=list)

    @property
    def max_rel_err(self) -> float:
        return max((p.max_rel_err for p in self.params), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol

    def by_group(self, depth: int = 2) -> dict[str, float]:
        """Worst relative error per dotted-name prefix of ``depth`` parts."""
        out: dict[str, float] = {}
        for p in self.params:
            key = ".".join(p.name.split(".")[:depth])
            out[key] = max(out.get(key, 0.0), p.max_rel_err)
        return out

    def merge(self, other: CheckReport, prefix: str = "") -> None:
        for p in other.params:
            self.params.append(
                ParamCheck(
                    f"{prefix}{p.name}", p.max_rel_err, p.worst_index, p.analytic,
                    p.numeric, p.checked,
                )
            )


def relative_error(analytic: float, numeric: float, floor: float = REL_FLOOR) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def finite_diff_check(
    f: Callable[[], dc.Tensor],
    params: Mapping[str, dc.Tensor],
    eps: float = 1e-5,
    tol: float = 1e-4,
    max_entries: int | None = None,
    seed: int = 0,
) -> CheckReport:
    """
    ``f`` rebuilds a scalar from the current parameter values on each call.
    With ``max_entries`` set, that many entries per parameter are drawn with a
    seeded generator instead of checking every entry.
    """
    if eps <= 0:
        raise ValidationError(f"eps must be positive, got {eps}")
    for p in params.values():
        p.zero_grad()
    root = f()
    dc.backward(root)

    rng = np.random.default_rng(seed)
    report = CheckReport(eps=eps, tol=tol)
    for name, p in params.items():
        grad = np.zeros(p.shape) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        indices = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            indices = np.sort(rng.choice(flat.size, size=max_entries, replace=False))

        worst = ParamCheck(name, 0.0, (), 0.0, 0.0, int(indices.size))
        for n, i in enumerate(indices):
            numeric = _central_difference(f, flat, int(i), eps, name)
            analytic = float(grad.reshape(-1)[i])
            err = relative_error(analytic, numeric)
            if n == 0 or err > worst.max_rel_err:
                worst = ParamCheck(
                    name, err, tuple(int(k) for k in np.unravel_index(i, p.shape)),
                    analytic, numeric, int(indices.size),
                )
        report.params.append(worst)
        log.debug("%s: max rel err %.3e over %d entries", name, worst.max_rel_err, worst.checked)
    return report


def _central_difference(
    f: Callable[[], dc.Tensor], flat: np.ndarray, i: int, eps: float, name: str
) -> float:
    # flat is a view on the leaf's data; perturbation happens between passes only
    orig = float(flat[i])
    try:
        flat[i] = orig + eps
        up = f().item()
        flat[i] = orig - eps
        down = f().item()
    finally:
        flat[i] = orig
    if not (math.isfinite(up) and math.isfinite(down)):
        raise GradCheckError(f"non-finite objective while perturbing entry {i}", name)
    return (up - down) / (2.0 * eps)


# ----------------------------- primitive suite -------------------------------

Case = Callable[[np.random.Generator], tuple[list[np.ndarray], Callable[..., dc.Tensor]]]


def _weighted(out: dc.Tensor, rng: np.random.Generator) -> dc.Tensor:
    w = dc.as_tensor(rng.normal(size=out.shape))
    return (out * w).sum()


def _unary(op: Callable[[dc.Tensor], dc.Tensor], positive: bool = False) -> Case:
    def case(rng: np.random.Generator) -> tuple[list[np.ndarray], Callable[..., dc.Tensor]]:
        x = rng.normal(size=(3, 4))
        return [np.abs(x) + 0.5 if positive else x], op

    return case


def _binary(
    op: Callable[[dc.Tensor, dc.Tensor], dc.Tensor], sa: tuple[int, ...], sb: tuple[int, ...]
) -> Case:
    def case(rng: np.random.Generator) -> tuple[list[np.ndarray], Callable[..., dc.Tensor]]:
        return [rng.normal(size=sa), rng.normal(size=sb)], op

    return case


def _off_kink(op: Callable[[dc.Tensor], dc.Tensor]) -> Case:
    """Inputs at least 0.1 from zero, where relu and abs bend."""

    def case(rng: np.random.Generator) -> tuple[list[np.ndarray], Callable[..., dc.Tensor]]:
        x = rng.normal(size=(3, 4))
        return [np.sign(x) * (np.abs(x) + 0.1)], op

    return case


def _max_case(rng: np.random.Generator) -> tuple[list[np.ndarray], Callable[..., dc.Tensor]]:
    # row entries at least 0.4 apart so the arg max never flips under eps
    x = np.stack([rng.permutation(4) * 0.5 for _ in range(3)]) + 0.1 * rng.uniform(size=(3, 4))
    return [x], lambda a: dc.reduce_max(a, axis=1)


def _gather_case(rng: np.random.Generator) -> tuple[list[np.ndarray], Callable[..., dc.Tensor]]:
    idx = rng.integers(0, 4, size=(5, 2))
    return [rng.normal(size=(4, 3))], lambda a: dc.gather(a, idx, axis=0)


def _scatter_case(rng: np.random.Generator) -> tuple[list[np.ndarray], Callable[..., dc.Tensor]]:
    idx = rng.integers(0, 3, size=5)
    return [rng.normal(size=(5, 2))], lambda a: dc.scatter_add(a, idx, 3)


def _masked_softmax_case(
    rng: np.random.Generator,
) -> tuple[list[np.ndarray], Callable[..., dc.Tensor]]:
    mask = rng.integers(0, 2, size=(3, 4))
    mask[:, 0] = 1
    return [rng.normal(size=(3, 4))], lambda a: dc.softmax(a, axis=1, mask=mask)


PRIMITIVE_CASES: dict[str, Case] = {
    "add": _binary(dc.add, (3, 4), (4,)),
    "sub": _binary(dc.sub, (3, 4), (3, 1)),
    "mul": _binary(dc.mul, (3, 4), (3, 4)),
    "matmul": _binary(dc.matmul, (3, 4), (4, 2)),
    "neg": _unary(dc.neg),
    "scale": _unary(lambda a: dc.scale(a, -2.5)),
    "add_scalar": _unary(lambda a: dc.add_scalar(a, 0.7)),
    "exp": _unary(dc.exp),
    "log": _unary(dc.log, positive=True),
    "relu": _off_kink(dc.relu),
    "sigmoid": _unary(dc.sigmoid),
    "abs": _off_kink(dc.absolute),
    "square": _unary(dc.square),
    "sum": _unary(lambda a: dc.reduce_sum(a, axis=1)),
    "mean": _unary(lambda a: dc.reduce_mean(a, axis=0, keepdims=True)),
    "max": _max_case,
    "softmax": _unary(lambda a: dc.softmax(a, axis=1)),
    "softmax_masked": _masked_softmax_case,
    "log_softmax": _unary(lambda a: dc.log_softmax(a, axis=-1)),
    "gather": _gather_case,
    "scatter_add": _scatter_case,
    "concat": _binary(lambda a, b: dc.concat([a, b], axis=1), (3, 2), (3, 4)),
    "reshape": _unary(lambda a: dc.reshape(a, (2, 6))),
    "transpose": _unary(lambda a: dc.transpose(a, (1, 0))),
}


def primitive_suite(
    trials: int = 100, seed: int = 0, eps: float = 1e-5, tol: float = 1e-4
) -> dict[str, CheckReport]:
    """Randomized finite-difference check of every primitive's backward rule."""
    rng = np.random.default_rng(seed)
    reports: dict[str, CheckReport] = {}
    for op, make in PRIMITIVE_CASES.items():
        merged = CheckReport(eps=eps, tol=tol)
        for _ in range(trials):
            arrays, fn = make(rng)
            leaves = {f"x{i}": dc.parameter(a) for i, a in enumerate(arrays)}
            weight_seed = int(rng.integers(1 << 31))

            def objective(
                fn: Callable[..., dc.Tensor] = fn,
                leaves: dict[str, dc.Tensor] = leaves,
                weight_seed: int = weight_seed,
            ) -> dc.Tensor:
                return _weighted(fn(*leaves.values()), np.random.default_rng(weight_seed))

            merged.merge(finite_diff_check(objective, leaves, eps=eps, tol=tol), prefix=f"{op}.")
        reports[op] = merged
    return reports
