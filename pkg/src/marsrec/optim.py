"""Projected SGD in the unit ball and calibrated Riemannian SGD on the sphere."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import Geometry, ModelParams, batch_project
from .objective import Gradients


@dataclass
class OptimConfig:
    learning_rate: float = 0.01
    grad_epsilon: float = 1e-12
    geometry: Geometry = Geometry.EUCLIDEAN
    calibrate: bool = True

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")
        self.geometry = Geometry(self.geometry)


def tangent_project(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Component of ``g`` orthogonal to the unit vector ``x`` (row-wise for 2-D input)."""
    return g - np.sum(x * g, axis=-1, keepdims=True) * x


def retract(x: np.ndarray, z: np.ndarray) -> np.ndarray:
    y = x + z
    return y / np.linalg.norm(y, axis=-1, keepdims=True)


def calibration_multiplier(x: np.ndarray, g: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    """``1 + cos(x, g)`` for unit ``x``; 0 where ``||g|| < eps``."""
    gnorm = np.linalg.norm(g, axis=-1)
    safe = np.where(gnorm < eps, 1.0, gnorm)
    mult = 1.0 + np.sum(x * g, axis=-1) / safe
    return np.where(gnorm < eps, 0.0, np.clip(mult, 0.0, 2.0))


def calibrated_rsgd_step(x: np.ndarray, g: np.ndarray, cfg: OptimConfig) -> np.ndarray:
    """One calibrated Riemannian step for unit vector(s) ``x``.

    ``x' = R_x(-lr * (1 + x.g/||g||) * (I - x x^T) g)`` with the projective
    retraction ``R_x(z) = (x + z) / ||x + z||``. Rows whose gradient norm is
    below ``grad_epsilon`` are returned unchanged. Works on a single vector
    or on a (B, D) stack of rows.
    """
    x = np.asarray(x, dtype=float)
    g = np.asarray(g, dtype=float)
    if not np.all(np.isfinite(g)):
        raise FloatingPointError("non-finite gradient in Riemannian step")
    gnorm = np.linalg.norm(g, axis=-1, keepdims=True)
    if cfg.calibrate:
        mult = calibration_multiplier(x, g, cfg.grad_epsilon)[..., None]
    else:
        mult = 1.0
    step = -cfg.learning_rate * mult * tangent_project(x, g)
    out = retract(x, step)
    return np.where(gnorm < cfg.grad_epsilon, x, out)


def enforce_ball(emb: np.ndarray, proj: np.ndarray, rows=None) -> None:
    """Rescale rows so that every facet embedding has norm <= 1 (in place)."""
    rows = np.arange(len(emb)) if rows is None else rows
    facets = batch_project(emb[rows], proj)
    s = np.linalg.norm(facets, axis=-1).max(axis=-1)
    over = s > 1.0
    if over.any():
        emb[rows[over]] /= s[over, None]


def projected_sgd_step(params: ModelParams, grads: Gradients, cfg: OptimConfig) -> ModelParams:
    """Plain SGD on every parameter, then the per-entity facet-ball constraint.

    The constraint is re-imposed on all user and item rows, not just the
    touched ones, because the shared projections move every entity's facet
    embeddings. Updates ``params`` in place and returns it.
    """
    lr = cfg.learning_rate
    for p, g in zip(params.arrays(), grads.arrays()):
        p -= lr * g
    enforce_ball(params.user_emb, params.user_proj)
    enforce_ball(params.item_emb, params.item_proj)
    return params


def spherical_sgd_step(params: ModelParams, grads: Gradients, cfg: OptimConfig) -> ModelParams:
    """Calibrated RSGD on touched embedding rows, Euclidean SGD elsewhere.

    Untouched embedding rows are left bit-identical. Updates in place.
    """
    for emb, gemb, rows in ((params.user_emb, grads.user_emb, grads.touched_users),
                            (params.item_emb, grads.item_emb, grads.touched_items)):
        if len(rows):
            emb[rows] = calibrated_rsgd_step(emb[rows], gemb[rows], cfg)
    lr = cfg.learning_rate
    params.user_proj -= lr * grads.user_proj
    params.item_proj -= lr * grads.item_proj
    params.facet_logits -= lr * grads.facet_logits
    return params


def apply_step(params: ModelParams, grads: Gradients, cfg: OptimConfig) -> ModelParams:
    if cfg.geometry is Geometry.SPHERICAL:
        return spherical_sgd_step(params, grads, cfg)
    return projected_sgd_step(params, grads, cfg)


def finite_difference_gradient(loss_fn, params: ModelParams, h: float = 1e-5) -> Gradients:
    """Central differences of ``loss_fn(params)`` over every coordinate.

    Coordinates are perturbed in place (no re-normalisation onto the sphere)
    and restored exactly afterwards.
    """
    if h <= 0:
        raise ValueError("h must be > 0")
    out = Gradients.zeros_like(params)
    for arr, garr in zip(params.arrays(), out.arrays()):
        flat = arr.reshape(-1)
        gflat = garr.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = loss_fn(params)
            flat[i] = orig - h
            f_minus = loss_fn(params)
            flat[i] = orig
            gflat[i] = (f_plus - f_minus) / (2.0 * h)
    out.touched_users = np.arange(params.n_users)
    out.touched_items = np.arange(params.n_items)
    return out


def compare_gradients(analytic: Gradients, numeric: Gradients, rel_tol=1e-4, abs_floor=1e-8):
    """Per-group worst error between two gradient sets.

    A coordinate is checked relatively (``|a - n| / max(|a|, |n|)``) unless
    ``|analytic| < abs_floor``, in which case ``|a - n| < abs_floor`` is
    required. Returns ``{group: (worst_error, flat_index, passed)}``.
    """
    report = {}
    for name, a, n in zip(ModelParams.FIELDS, analytic.arrays(), numeric.arrays()):
        a = a.reshape(-1)
        n = n.reshape(-1)
        diff = np.abs(a - n)
        small = np.abs(a) < abs_floor
        rel = diff / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-300)
        err = np.where(small, diff, rel)
        ok = np.where(small, diff < abs_floor, rel < rel_tol)
        worst = int(np.argmax(err / np.where(small, abs_floor, rel_tol)))
        report[name] = (float(err[worst]), worst, bool(ok.all()))
    return report
