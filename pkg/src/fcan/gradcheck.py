"""Finite-difference verification of analytic gradients.

``grad_check`` compares reverse-mode gradients of a scalar-valued subgraph
against central differences, reporting a normalized error
|analytic - numeric| / max(1, |analytic|, |numeric|) so that large gradients
are judged relatively and small ones absolutely.  ``standard_op_checks`` runs
a seeded battery over every differentiable op the network uses.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .autograd import (Tensor, add, backward, elementwise_mul, no_grad,
                       reshape, scale, sub, sum_all)

__all__ = ["GradCheckReport", "grad_check", "standard_op_checks",
           "default_step", "default_tolerance"]


def default_step(dtype) -> float:
    # f32 uses a coarse step: forward roundoff dominates truncation for the
    # (piecewise-)low-order ops checked here
    return 1e-5 if np.dtype(dtype) == np.float64 else 1e-2


def default_tolerance(dtype) -> float:
    return 1e-5 if np.dtype(dtype) == np.float64 else 1e-3


@dataclass
class GradCheckReport:
    name: str
    tol: float
    max_rel_err: float = 0.0
    n_entries: int = 0
    worst: list = field(default_factory=list)  # (param, index, analytic, numeric, err)

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol

    def record(self, param: str, index: int, analytic: float, numeric: float) -> None:
        err = abs(analytic - numeric) / max(1.0, abs(analytic), abs(numeric))
        self.n_entries += 1
        self.max_rel_err = max(self.max_rel_err, err)
        if err >= self.tol:
            self.worst.append((param, index, analytic, numeric, err))
            self.worst.sort(key=lambda e: -e[4])
            del self.worst[8:]

    def merge(self, other: "GradCheckReport") -> None:
        self.n_entries += other.n_entries
        if other.max_rel_err > self.max_rel_err:
            self.max_rel_err = other.max_rel_err
        self.worst = sorted(self.worst + other.worst, key=lambda e: -e[4])[:8]

    def summary(self) -> str:
        status = "ok" if self.passed else "FAIL"
        return (f"{self.name:28s} max_rel_err={self.max_rel_err:.3e} "
                f"entries={self.n_entries:5d} tol={self.tol:.0e} [{status}]")


def grad_check(f, params: dict, tol: float | None = None, h: float | None = None,
               name: str = "subgraph") -> GradCheckReport:
    """Check d f() / d params against central differences.

    ``f`` must rebuild the forward pass from the live ``params`` tensors on
    every call and return a scalar Tensor; parameters are perturbed in place.
    """
    if not params:
        raise ValueError("grad_check needs at least one parameter")
    dtype = next(iter(params.values())).data.dtype
    h = default_step(dtype) if h is None else h
    tol = default_tolerance(dtype) if tol is None else tol
    report = GradCheckReport(name=name, tol=tol)

    for p in params.values():
        p.grad = None
        p.requires_grad = True
    loss = f()
    backward(loss)
    analytic = {
        nm: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for nm, p in params.items()
    }

    with no_grad():
        for nm, p in params.items():
            flat = p.data
            a = analytic[nm]
            for i in range(flat.size):
                orig = flat.flat[i]
                flat.flat[i] = orig + h
                lp = float(f().data)
                flat.flat[i] = orig - h
                lm = float(f().data)
                flat.flat[i] = orig
                numeric = (lp - lm) / (2.0 * h)
                report.record(nm, i, float(a.flat[i]), numeric)
    return report


# -- per-op battery ----------------------------------------------------------

def _weighted_sum(y: Tensor, rng) -> Tensor:
    r = Tensor(rng.standard_normal(y.data.shape), dtype=y.data.dtype)
    return sum_all(elementwise_mul(y, r))


def _away_from_zero(rng, shape, dtype, margin=0.2):
    mag = rng.uniform(margin, 1.0, size=shape)
    sign = rng.choice([-1.0, 1.0], size=shape)
    return (mag * sign).astype(dtype)


def _distinct_values(rng, shape, dtype, step=0.05):
    vals = rng.permutation(int(np.prod(shape))).astype(dtype) * step
    return vals.reshape(shape) - vals.mean()


def _op_cases(dtype):
    """(name, builder) pairs; builder(rng) -> (f, params)."""

    def conv_case(rng):
        stride = tuple(int(rng.integers(1, 3)) for _ in range(3))
        pad = tuple(int(rng.integers(0, 2)) for _ in range(3))
        mode = str(rng.choice(["zeros", "edge"]))
        x = Tensor(rng.standard_normal((1, 2, 3, 4, 4)), dtype=dtype)
        w = Tensor(rng.standard_normal((2, 2, 2, 2, 2)) * 0.5, dtype=dtype)
        b = Tensor(rng.standard_normal(2), dtype=dtype)
        y0 = ops.conv3d(x, w, b, stride=stride, pad=pad, pad_mode=mode)
        r = Tensor(rng.standard_normal(y0.data.shape), dtype=dtype)

        def f():
            y = ops.conv3d(x, w, b, stride=stride, pad=pad, pad_mode=mode)
            return sum_all(elementwise_mul(y, r))

        return f, {"x": x, "w": w, "b": b}

    def pool_case(rng):
        k, s = ((2, 2, 2), (2, 2, 2)) if rng.integers(2) else ((1, 3, 3), (1, 2, 2))
        x = Tensor(_distinct_values(rng, (1, 2, 4, 6, 6), dtype))
        y0 = ops.maxpool3d(x, k, s)
        r = Tensor(rng.standard_normal(y0.data.shape), dtype=dtype)
        return (lambda: sum_all(elementwise_mul(ops.maxpool3d(x, k, s), r)),
                {"x": x})

    def relu_case(rng):
        x = Tensor(_away_from_zero(rng, (3, 4), dtype))
        r = Tensor(rng.standard_normal((3, 4)), dtype=dtype)
        return (lambda: sum_all(elementwise_mul(ops.relu(x), r)), {"x": x})

    def sigmoid_case(rng):
        x = Tensor(rng.standard_normal((2, 5)) * 2.0, dtype=dtype)
        r = Tensor(rng.standard_normal((2, 5)), dtype=dtype)
        return (lambda: sum_all(elementwise_mul(ops.sigmoid(x), r)), {"x": x})

    def mvn_case(rng):
        x = Tensor(rng.standard_normal((1, 1, 2, 3, 3)), dtype=dtype)
        r = Tensor(rng.standard_normal((1, 1, 2, 3, 3)), dtype=dtype)
        return (lambda: sum_all(elementwise_mul(ops.mean_var_normalize(x), r)),
                {"x": x})

    def sigmoid_mvn_chain_case(rng):
        x = Tensor(rng.standard_normal((1, 1, 2, 3, 3)), dtype=dtype)
        r = Tensor(rng.standard_normal((1, 1, 2, 3, 3)), dtype=dtype)
        return (lambda: sum_all(elementwise_mul(
            ops.sigmoid(ops.mean_var_normalize(x)), r)), {"x": x})

    def replicate_case(rng):
        a = Tensor(rng.standard_normal((1, 1, 2, 2, 3)), dtype=dtype)
        r = Tensor(rng.standard_normal((1, 4, 2, 2, 3)), dtype=dtype)
        return (lambda: sum_all(elementwise_mul(ops.replicate_channels(a, 4), r)),
                {"a": a})

    def mul_case(rng):
        a = Tensor(rng.standard_normal((2, 3)), dtype=dtype)
        b = Tensor(rng.standard_normal((2, 3)), dtype=dtype)
        return (lambda: sum_all(elementwise_mul(a, b)), {"a": a, "b": b})

    def fc_case(rng):
        x = Tensor(rng.standard_normal((3, 4)), dtype=dtype)
        w = Tensor(rng.standard_normal((4, 5)), dtype=dtype)
        b = Tensor(rng.standard_normal(5), dtype=dtype)
        r = Tensor(rng.standard_normal((3, 5)), dtype=dtype)
        return (lambda: sum_all(elementwise_mul(ops.fully_connected(x, w, b), r)),
                {"x": x, "w": w, "b": b})

    def dropout_case(rng):
        x = Tensor(rng.standard_normal((4, 6)), dtype=dtype)
        r = Tensor(rng.standard_normal((4, 6)), dtype=dtype)
        mask_seed = int(rng.integers(1 << 31))

        def f():
            # identical generator each call so the mask is fixed
            y = ops.dropout(x, 0.3, True, np.random.default_rng(mask_seed))
            return sum_all(elementwise_mul(y, r))

        return f, {"x": x}

    def ce_case(rng):
        logits = Tensor(rng.standard_normal((4, 5)), dtype=dtype)
        labels = rng.integers(0, 5, size=4)
        return (lambda: ops.softmax_cross_entropy(logits, labels),
                {"logits": logits})

    def basics_case(rng):
        a = Tensor(rng.standard_normal((2, 6)), dtype=dtype)
        b = Tensor(rng.standard_normal((2, 6)), dtype=dtype)

        def f():
            y = sub(add(a, b), scale(b, 0.5))
            y = reshape(y, (3, 4))
            return sum_all(elementwise_mul(y, y))

        return f, {"a": a, "b": b}

    return [
        ("conv3d", conv_case),
        ("maxpool3d", pool_case),
        ("relu", relu_case),
        ("sigmoid", sigmoid_case),
        ("mean_var_normalize", mvn_case),
        ("sigmoid_mvn_chain", sigmoid_mvn_chain_case),
        ("replicate_channels", replicate_case),
        ("elementwise_mul", mul_case),
        ("fully_connected", fc_case),
        ("dropout", dropout_case),
        ("softmax_cross_entropy", ce_case),
        ("add_sub_scale_reshape", basics_case),
    ]


def standard_op_checks(dtype=np.float64, trials: int = 20, tol: float | None = None,
                       seed: int = 2024) -> list[GradCheckReport]:
    """Run the seeded per-op battery; one merged report per op."""
    tol = default_tolerance(dtype) if tol is None else tol
    reports = []
    for case_idx, (name, builder) in enumerate(_op_cases(np.dtype(dtype))):
        merged = GradCheckReport(name=name, tol=tol)
        seeds = np.random.SeedSequence([seed, case_idx]).spawn(trials)
        for ss in seeds:
            f, params = builder(np.random.default_rng(ss))
            merged.merge(grad_check(f, params, tol=tol, name=name))
        reports.append(merged)
    return reports
