"""Finite-difference verification of every registered op and the full loss."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as tc
from .losses import Batch, LossConfig, hinge_arguments, total_loss
from .model import ModelConfig, forward_batch, init_params, tiny_config
from .tensor import Tensor

OP_TOLERANCE = 1e-5
END_TO_END_TOLERANCE = 1e-4


@dataclass
class CheckResult:
    component: str
    error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.error)) and self.error <= self.tolerance


def _leaf(rng, *shape) -> Tensor:
    return Tensor(rng.uniform(-2.0, 2.0, size=shape), requires_grad=True)


def _weighted(rng, build: Callable[[], Tensor]) -> Callable[[], Tensor]:
    """Reduce an op output to a scalar with fixed random weights so every
    output coordinate contributes to the checked gradient."""
    cache = {}

    def f():
        out = build()
        if "w" not in cache:
            cache["w"] = Tensor(rng.uniform(0.5, 1.5, size=out.shape) * rng.choice([-1.0, 1.0], size=out.shape))
        flat = tc.reshape(tc.mul(out, cache["w"]), (-1,))
        return tc.sum_axis(flat, axis=0)

    return f


def _op_cases(rng: np.random.Generator) -> dict[str, tuple[Callable[[], Tensor], list[Tensor]]]:
    cases = {}

    a, b = _leaf(rng, 2, 3, 4), _leaf(rng, 4, 2)
    cases["matmul"] = (_weighted(rng, lambda: tc.matmul(a, b)), [a, b])

    x, bias = _leaf(rng, 3, 4), _leaf(rng, 4)
    cases["add"] = (_weighted(rng, lambda: tc.add(x, bias)), [x, bias])

    m1, m2 = _leaf(rng, 3, 4), _leaf(rng, 4)
    cases["mul"] = (_weighted(rng, lambda: tc.mul(m1, m2)), [m1, m2])

    s = _leaf(rng, 5)
    cases["scale"] = (_weighted(rng, lambda: tc.scale(s, -1.7)), [s])

    t = _leaf(rng, 6)
    cases["tanh_map"] = (_weighted(rng, lambda: tc.tanh_map(t)), [t])

    r = _leaf(rng, 3, 5)
    cases["relu"] = (_weighted(rng, lambda: tc.relu(r)), [r])

    sm = _leaf(rng, 3, 5)
    cases["softmax"] = (_weighted(rng, lambda: tc.softmax(sm, axis=1)), [sm])

    ln_x, ln_g, ln_b = _leaf(rng, 3, 6), _leaf(rng, 6), _leaf(rng, 6)
    cases["layer_norm"] = (_weighted(rng, lambda: tc.layer_norm(ln_x, ln_g, ln_b)), [ln_x, ln_g, ln_b])

    ma = _leaf(rng, 4, 3)
    cases["mean_axis"] = (_weighted(rng, lambda: tc.mean_axis(ma, axis=0)), [ma])

    sa = _leaf(rng, 4, 3)
    cases["sum_axis"] = (_weighted(rng, lambda: tc.sum_axis(sa, axis=1)), [sa])

    rs = _leaf(rng, 2, 6)
    cases["reshape"] = (_weighted(rng, lambda: tc.reshape(rs, (3, 4))), [rs])

    tr = _leaf(rng, 2, 3, 4)
    cases["transpose"] = (_weighted(rng, lambda: tc.transpose(tr)), [tr])

    ws_w, ws_v = _leaf(rng, 2, 5), _leaf(rng, 2, 5, 3)
    cases["weighted_sum"] = (_weighted(rng, lambda: tc.weighted_sum(ws_w, ws_v)), [ws_w, ws_v])

    ce_x = _leaf(rng, 6, 2)
    ce_y = rng.integers(0, 2, size=6)
    cases["cross_entropy"] = (lambda: tc.cross_entropy(ce_x, ce_y), [ce_x])

    cm = _leaf(rng, 5, 4)
    cases["cosine_matrix"] = (_weighted(rng, lambda: tc.cosine_matrix(cm)), [cm])
    return cases


def softmax_ce_case(rng: np.random.Generator):
    """Linear logits -> cross-entropy, checked through both weight and input."""
    x, w = _leaf(rng, 5, 3), _leaf(rng, 2, 3)
    labels = rng.integers(0, 2, size=5)
    return (lambda: tc.cross_entropy(tc.matmul(x, tc.transpose(w)), labels)), [x, w]


def end_to_end_case(
    cfg: ModelConfig | None = None,
    loss_cfg: LossConfig | None = None,
    seed: int = 0,
    n: int = 4,
):
    """Joint loss of the whole head on a tiny random batch.

    Dropout is active with a mask that is redrawn from the same seed on every
    evaluation, so the function stays deterministic under perturbation.
    Returns (f, params, skip) for :func:`finite_difference_check`.
    """
    cfg = cfg or tiny_config()
    loss_cfg = loss_cfg or LossConfig()
    rng = np.random.default_rng(seed)
    values = rng.uniform(-2.0, 2.0, size=(n,) + cfg.feature_shape)
    labels = np.arange(n) % 2
    params = init_params(cfg, seed=seed)
    for t in params.named().values():
        # move biases and gains off their exact init values
        t.data = t.data + rng.uniform(-0.1, 0.1, size=t.shape)
    state = {}

    def f():
        out = forward_batch(values, params, cfg, training=True, rng=np.random.default_rng(seed + 1))
        state["args"] = hinge_arguments(out.f.data, labels, loss_cfg.margin, loss_cfg.include_anchor)
        total, _, _ = total_loss(Batch(out.f, labels, out.logits), loss_cfg)
        return total

    def skip():
        args = state["args"]
        args = args[np.isfinite(args)]
        return bool(args.size) and float(np.min(np.abs(args))) < 1e-6

    return f, list(params.named().values()), skip


def run_gradcheck(seed: int = 0, cfg: ModelConfig | None = None, h: float = 1e-6) -> list[CheckResult]:
    """One result per registered op, then the two composite checks."""
    rng = np.random.default_rng(seed)
    cases = _op_cases(rng)
    missing = set(tc.OPS) - set(cases)
    if missing:
        raise RuntimeError(f"ops without a gradient check case: {sorted(missing)}")
    results = []
    for name in sorted(tc.OPS):
        f, params = cases[name]
        results.append(CheckResult(name, tc.finite_difference_check(f, params, h), OP_TOLERANCE))
    f, params = softmax_ce_case(rng)
    results.append(CheckResult("composite:softmax_cross_entropy", tc.finite_difference_check(f, params, h), OP_TOLERANCE))
    f, params, skip = end_to_end_case(cfg, seed=seed)
    results.append(CheckResult("composite:hiercon_total_loss", tc.finite_difference_check(f, params, h, skip), END_TO_END_TOLERANCE))
    return results


def format_report(results: list[CheckResult], elapsed: float | None = None) -> str:
    lines = [f"{'component':36s} {'max rel err':>12s} {'tol':>8s}  status"]
    for r in results:
        lines.append(f"{r.component:36s} {r.error:12.3e} {r.tolerance:8.0e}  {'ok' if r.passed else 'FAIL'}")
    if elapsed is not None:
        lines.append(f"elapsed {elapsed:.2f}s")
    return "\n".join(lines)


def timed_gradcheck(seed: int = 0, cfg: ModelConfig | None = None) -> tuple[list[CheckResult], float]:
    start = time.perf_counter()
    results = run_gradcheck(seed, cfg)
    return results, time.perf_counter() - start
