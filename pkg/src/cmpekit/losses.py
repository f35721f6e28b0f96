"""Training objectives on relaxed outputs ``yhat`` in [0,1]^|Y|, each with its exact gradient.

Every loss accepts one output vector or a ``(B, |Y|)`` batch and returns
``(value, grad)`` of matching rank: a float and a vector, or a length-B array
and a ``(B, |Y|)`` array. In batch mode ``ctx.f`` and ``ctx.g`` may be
:class:`~cmpekit.polymodel.BatchPolynomial` objects with one row per example,
and ``alpha``, ``lam``, ``mu`` may be per-example arrays.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Optional

import numpy as np

from .polymodel import BatchPolynomial, CmpeInstance, evaluate, gradient

LAMBDA_MAX = 1e4


@dataclass
class LossContext:
    f: Any
    g: Any
    alpha: Any = 1.0
    beta: float = 1.0
    rho: float = 0.0
    lam: Any = 0.0
    mu: Any = 0.0
    label: Optional[np.ndarray] = None

    def __post_init__(self):
        if np.any(np.asarray(self.alpha) <= 0):
            raise ValueError("alpha must be positive")
        if self.beta < 0 or self.rho < 0:
            raise ValueError("beta and rho must be non-negative")
        if np.any(np.asarray(self.lam) < 0):
            raise ValueError("lambda must be non-negative")

    @classmethod
    def from_instance(cls, inst: CmpeInstance, **kw):
        return cls(inst.f, inst.g, **kw)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=float)))


def _values(p, Y):
    if isinstance(p, BatchPolynomial):
        return p.evaluate(Y), p.gradient(Y)
    return evaluate(p, Y), gradient(p, Y)


def _prep(ctx, yhat):
    Y = np.asarray(yhat, dtype=float)
    single = Y.ndim == 1
    Y2 = Y[None, :] if single else Y
    f, df = _values(ctx.f, Y2)
    g, dg = _values(ctx.g, Y2)
    return single, Y2, np.atleast_1d(f), df, np.atleast_1d(g), dg


def _col(a):
    return np.asarray(a, dtype=float).reshape(-1, 1) if np.ndim(a) else float(a)


def _out(single, val, grad):
    if single:
        return float(val[0]), grad[0]
    return val, grad


def _label(ctx, label):
    label = ctx.label if label is None else label
    if label is None:
        raise ValueError("supervised loss needs a label")
    return np.asarray(label, dtype=float)


# ---------------------------------------------------------------------------
# supervised


def loss_mse(yhat, label):
    Y = np.asarray(yhat, dtype=float)
    d = Y - np.asarray(label, dtype=float)
    n = Y.shape[-1]
    return (float(np.mean(d * d)) if Y.ndim == 1 else np.mean(d * d, axis=-1)), 2.0 * d / n


def loss_mae(yhat, label):
    Y = np.asarray(yhat, dtype=float)
    d = Y - np.asarray(label, dtype=float)
    n = Y.shape[-1]
    return (float(np.mean(np.abs(d))) if Y.ndim == 1 else np.mean(np.abs(d), axis=-1)), np.sign(d) / n


def loss_supervised_penalty(ctx: LossContext, yhat, label=None):
    """MSE plus ``lam * max(0, g)``."""
    label = _label(ctx, label)
    single, Y, f, df, g, dg = _prep(ctx, yhat)
    mse, dmse = loss_mse(Y, np.broadcast_to(label, Y.shape))
    lam = np.asarray(ctx.lam, dtype=float)
    val = mse + lam * np.maximum(0.0, g)
    grad = dmse + _col(lam * (g > 0)) * dg
    return _out(single, np.atleast_1d(val), grad)


def update_lambda_subgradient(ctx: LossContext, yhat, lam_max=LAMBDA_MAX):
    """``lam + rho * max(0, g(yhat))``, capped at ``lam_max``."""
    single, _, _, _, g, _ = _prep(ctx, yhat)
    new = np.minimum(np.asarray(ctx.lam, dtype=float) + ctx.rho * np.maximum(0.0, g), lam_max)
    return float(new[0]) if single else new


# ---------------------------------------------------------------------------
# self-supervised penalty / primal-dual


def loss_ssl_penalty(ctx: LossContext, yhat):
    """``f + lam/2 * max(0, g)^2``."""
    single, _, f, df, g, dg = _prep(ctx, yhat)
    lam = np.asarray(ctx.lam, dtype=float)
    h = np.maximum(0.0, g)
    return _out(single, f + 0.5 * lam * h * h, df + _col(lam * h) * dg)


def loss_pdl_primal(ctx: LossContext, yhat):
    """``f + lam/2 * max(0, g)^2 + mu * g``."""
    single, _, f, df, g, dg = _prep(ctx, yhat)
    lam = np.asarray(ctx.lam, dtype=float)
    mu = np.asarray(ctx.mu, dtype=float)
    h = np.maximum(0.0, g)
    return _out(single, f + 0.5 * lam * h * h + mu * g, df + _col(lam * h + mu) * dg)


def pdl_dual_target(ctx: LossContext, yhat):
    """``max(0, mu + lam * g(yhat))`` from a frozen primal output."""
    single, _, _, _, g, _ = _prep(ctx, yhat)
    t = np.maximum(0.0, np.asarray(ctx.mu, dtype=float) + np.asarray(ctx.lam, dtype=float) * g)
    return float(t[0]) if single else t


update_mu_alm = pdl_dual_target


def loss_pdl_dual(mu_hat, target):
    """``|mu_hat - target|`` per example; gradient with respect to ``mu_hat``."""
    d = np.asarray(mu_hat, dtype=float) - np.asarray(target, dtype=float)
    val = np.abs(d)
    return (float(val) if val.ndim == 0 else val), np.sign(d)


# ---------------------------------------------------------------------------
# consistent loss


def loss_sscmpe(ctx: LossContext, yhat):
    """``f`` where ``g <= 0`` and ``alpha * (f + g)`` elsewhere."""
    return loss_sscmpe_pen(ctx, yhat, rho=0.0)


def loss_sscmpe_pen(ctx: LossContext, yhat, rho=None):
    """:func:`loss_sscmpe` with ``rho * g^2`` added on the infeasible side."""
    rho = ctx.rho if rho is None else rho
    single, _, f, df, g, dg = _prep(ctx, yhat)
    alpha = np.asarray(ctx.alpha, dtype=float)
    inf = g > 0
    val = np.where(inf, alpha * (f + g) + rho * g * g, f)
    grad = np.where(inf[:, None], _col(alpha) * (df + dg) + _col(2.0 * rho * g) * dg, df)
    return _out(single, val, grad)


def loss_sscmpe_smooth(ctx: LossContext, yhat, rho=0.0):
    """Sigmoid blend ``(1-s) f + s * alpha * (f + max(0, g))`` with ``s = sigmoid(beta g)``.

    A positive ``rho`` adds ``rho * max(0, g)^2``.
    """
    single, _, f, df, g, dg = _prep(ctx, yhat)
    alpha = np.asarray(ctx.alpha, dtype=float)
    s = sigmoid(ctx.beta * g)
    h = np.maximum(0.0, g)
    hard = alpha * (f + h)
    val = (1.0 - s) * f + s * hard + rho * h * h
    ds = ctx.beta * s * (1.0 - s)
    grad = (_col(1.0 - s + s * alpha) * df
            + _col(s * alpha * (g > 0) + ds * (hard - f) + 2.0 * rho * h) * dg)
    return _out(single, val, grad)
