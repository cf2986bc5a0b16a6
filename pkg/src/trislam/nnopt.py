"""Adam over heterogeneous parameter groups, plus gradient checking.

Table-style groups use sparse semantics: only rows that received gradient
this step have their moments decayed and values updated. The step counter
is global, so a sparse step coincides with the dense step restricted to the
touched rows whenever untouched moments are zero.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


@dataclass
class ParamGroup:
    name: str
    param: np.ndarray
    grad: np.ndarray
    lr: float
    sparse_rows: bool = False  # update only rows with nonzero gradient
    m: np.ndarray = field(default=None)
    v: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.param.shape != self.grad.shape:
            raise ValueError(f"group {self.name}: grad shape mismatch")
        self.m = np.zeros_like(self.param)
        self.v = np.zeros_like(self.param)


class AdamOptimizer:
    def __init__(self, groups: list[ParamGroup], clip_norm: float | None = None):
        self.groups = groups
        self.clip_norm = clip_norm
        self.step_count = 0

    def zero_grad(self):
        for g in self.groups:
            g.grad.fill(0.0)

    def step(self):
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - BETA1 ** t
        bc2 = 1.0 - BETA2 ** t
        if self.clip_norm is not None:
            total = np.sqrt(sum(float((g.grad ** 2).sum()) for g in self.groups))
            if total > self.clip_norm:
                scale = self.clip_norm / (total + 1e-12)
                for g in self.groups:
                    g.grad *= scale
        for g in self.groups:
            grad = g.grad
            bad = ~np.isfinite(grad)
            if bad.any():
                log.warning("group %s: zeroed %d non-finite gradient entries",
                            g.name, int(bad.sum()))
                grad[bad] = 0.0
            if g.sparse_rows and grad.ndim == 2:
                rows = np.nonzero(np.any(grad != 0.0, axis=1))[0]
                if rows.size == 0:
                    continue
                gr = grad[rows]
                g.m[rows] = BETA1 * g.m[rows] + (1 - BETA1) * gr
                g.v[rows] = BETA2 * g.v[rows] + (1 - BETA2) * gr * gr
                m_hat = g.m[rows] / bc1
                v_hat = g.v[rows] / bc2
                g.param[rows] -= g.lr * m_hat / (np.sqrt(v_hat) + EPS)
            else:
                g.m[:] = BETA1 * g.m + (1 - BETA1) * grad
                g.v[:] = BETA2 * g.v + (1 - BETA2) * grad * grad
                g.param -= g.lr * (g.m / bc1) / (np.sqrt(g.v / bc2) + EPS)


def finite_difference_check(loss_fn, params: np.ndarray, grad: np.ndarray,
                            h: float = 1e-4, n_samples: int | None = None,
                            rng: np.random.Generator | None = None):
    """Central-difference check of an analytic gradient.

    loss_fn takes the flat parameter vector and returns a scalar; grad is the
    analytic gradient being validated. Returns (max_relative_error, report).
    Relative error uses an absolute floor of 1e-7 in the denominator.
    """
    params = np.asarray(params, dtype=np.float64).ravel()
    grad = np.asarray(grad, dtype=np.float64).ravel()
    if params.shape != grad.shape:
        raise ValueError("params/grad shape mismatch")
    n = params.size
    if n_samples is not None and n_samples < n:
        rng = rng or np.random.default_rng(0)
        indices = rng.choice(n, size=n_samples, replace=False)
    else:
        indices = np.arange(n)
    max_rel = 0.0
    worst = None
    for k in indices:
        p = params.copy()
        p[k] += h
        lp = loss_fn(p)
        p[k] -= 2 * h
        lm = loss_fn(p)
        fd = (lp - lm) / (2 * h)
        rel = abs(fd - grad[k]) / max(abs(fd), abs(grad[k]), 1e-7)
        if rel > max_rel:
            max_rel = rel
            worst = (int(k), float(fd), float(grad[k]))
    return max_rel, {"checked": len(indices), "worst": worst}
