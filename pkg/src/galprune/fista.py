"""Proximal machinery for the soft-mask subproblem.

The mask minimises a smooth objective plus ``lam * ||m||_1``. FISTA handles
the smooth part with an extrapolated gradient step and the l1 part with the
soft-threshold prox, which is what produces exact zeros. The SGD path is the
ablation baseline: momentum SGD on the l1 subgradient, no prox.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np


def prox_l1(z: np.ndarray, threshold: float) -> np.ndarray:
    """Soft threshold ``sign(z) * max(|z| - threshold, 0)``.

    Entries with ``|z| <= threshold`` come out as exact zeros.
    """
    if threshold < 0:
        raise ValueError(f"prox threshold must be non-negative, got {threshold}")
    z = np.asarray(z, dtype=float)
    return np.where(np.abs(z) <= threshold, 0.0, z - np.sign(z) * threshold)


def next_alpha(alpha: float) -> float:
    return 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * alpha * alpha))


@dataclass(frozen=True)
class FistaState:
    alpha: float
    m_prev: np.ndarray
    k: int = 1

    @classmethod
    def start(cls, m: np.ndarray) -> FistaState:
        return cls(1.0, np.array(m, dtype=float, copy=True), 1)

    def extrapolate(self, m: np.ndarray) -> tuple[np.ndarray, float]:
        """Return the look-ahead point y and the next alpha."""
        alpha_next = next_alpha(self.alpha)
        y = m + ((self.alpha - 1.0) / alpha_next) * (m - self.m_prev)
        return y, alpha_next


def fista_step(state: FistaState, m: np.ndarray, grad_at_y: Callable[[np.ndarray], np.ndarray],
               lam: float, lr: float) -> tuple[np.ndarray, FistaState]:
    """One accelerated proximal step.

    ``grad_at_y`` is evaluated at the extrapolated point, never at ``m``.
    """
    y, alpha_next = state.extrapolate(m)
    g = np.asarray(grad_at_y(y), dtype=float)
    if g.shape != y.shape:
        raise ValueError(f"gradient shape {g.shape} != mask shape {y.shape}")
    if not np.all(np.isfinite(g)):
        raise FloatingPointError("non-finite mask gradient in FISTA step")
    m_new = prox_l1(y - lr * g, lr * lam)
    return m_new, replace(state, alpha=alpha_next, m_prev=np.array(m, dtype=float, copy=True), k=state.k + 1)


def sgd_mask_step(m: np.ndarray, velocity: np.ndarray, grad: np.ndarray, lam: float, lr: float,
                  momentum: float) -> np.ndarray:
    """Momentum SGD on the smooth gradient plus the l1 subgradient ``lam*sign(m)``.

    Updates ``velocity`` in place and returns the new mask; no exact zeros
    are produced except by coincidence.
    """
    g = np.asarray(grad, dtype=float) + lam * np.sign(m)
    if not np.all(np.isfinite(g)):
        raise FloatingPointError("non-finite mask gradient in SGD step")
    velocity *= momentum
    velocity += g
    return m - lr * velocity


@dataclass
class MaskOptimizer:
    """Holds whichever state the configured mask path needs."""
    kind: str                  # "fista" or "sgd"
    fista: FistaState | None = None
    velocity: np.ndarray | None = None

    @classmethod
    def create(cls, kind: str, m: np.ndarray) -> MaskOptimizer:
        if kind == "fista":
            return cls(kind, fista=FistaState.start(m))
        if kind == "sgd":
            return cls(kind, velocity=np.zeros_like(np.asarray(m, dtype=float)))
        raise ValueError(f"unknown mask optimizer {kind!r}; expected 'fista' or 'sgd'")

    def lookahead(self, m: np.ndarray) -> np.ndarray:
        """Point at which the next gradient should be taken."""
        if self.kind == "fista":
            return self.fista.extrapolate(m)[0]
        return m


def solve_mask_subproblem(opt: MaskOptimizer, m: np.ndarray, grad_at: Callable[[np.ndarray], np.ndarray],
                          lam: float, lr: float, momentum: float = 0.9) -> np.ndarray:
    """Advance the mask by one step of the configured path with the weights held fixed.

    ``grad_at(point)`` returns the smooth-objective gradient at ``point``.
    """
    if opt.kind == "fista":
        m_new, opt.fista = fista_step(opt.fista, m, grad_at, lam, lr)
        return m_new
    return sgd_mask_step(m, opt.velocity, grad_at(m), lam, lr, momentum)


def lasso_objective(m: np.ndarray, c: np.ndarray, lam: float) -> float:
    """``0.5*||m - c||^2 + lam*||m||_1`` (orthonormal-design LASSO)."""
    return 0.5 * float(np.sum((m - c) ** 2)) + lam * float(np.sum(np.abs(m)))


def solve_orthonormal_lasso(c: np.ndarray, lam: float, iters: int = 200, lr: float = 1.0,
                            m0: np.ndarray | None = None) -> tuple[np.ndarray, list[float]]:
    """Run full-batch FISTA on ``0.5*||m - c||^2 + lam*||m||_1``; returns iterate and objective trace."""
    m = np.zeros_like(c) if m0 is None else np.array(m0, dtype=float)
    state = FistaState.start(m)
    trace = [lasso_objective(m, c, lam)]
    for _ in range(iters):
        m, state = fista_step(state, m, lambda y: y - c, lam, lr)
        trace.append(lasso_objective(m, c, lam))
    return m, trace
