"""Per-node segmentation losses.

All losses accept soft targets ``y`` in ``[0, 1]`` and return the mean over
nodes. Each function works on tape tensors (for training) or on plain arrays,
in which case a float is returned.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tape, Tensor


@dataclass
class FocalParams:
    gamma: float = 2.0
    alpha: float = 0.25  # applied uniformly to both classes
    eps: float = 1e-7


def _on_tape(fn):
    def wrapper(*args, **kwargs):
        tensors = [a for a in args if isinstance(a, Tensor)]
        if tensors:
            return fn(tensors[0].tape, *args, **kwargs)
        tape = Tape()
        return float(fn(tape, *args, **kwargs).values)

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


def _clamped(tape, p, eps):
    return tape.clip(tape.lift(p), eps, 1.0 - eps)


def _focal_terms(tape, y, p, params):
    y = tape.lift(y)
    p = _clamped(tape, p, params.eps)
    q = 1.0 - p
    pos = tape.mul(y, tape.log(p))
    neg = tape.mul(1.0 - y, tape.log(q))
    if params.gamma != 0.0:
        pos = tape.mul(tape.power(q, params.gamma), pos)
        neg = tape.mul(tape.power(p, params.gamma), neg)
    return tape.mul(pos + neg, -params.alpha)


@_on_tape
def bce(tape, y, p, eps=1e-7):
    """Mean binary cross-entropy (natural log)."""
    y = tape.lift(y)
    p = _clamped(tape, p, eps)
    terms = tape.mul(y, tape.log(p)) + tape.mul(1.0 - y, tape.log(1.0 - p))
    return tape.neg(tape.mean(terms))


@_on_tape
def focal_loss(tape, y, p, params=None):
    """Mean focal loss ``-alpha (1 - p_t)^gamma log(p_t)``."""
    return tape.mean(_focal_terms(tape, y, p, params or FocalParams()))


def loss_field_components(positions):
    positions = np.atleast_2d(np.asarray(positions, dtype=np.float64))
    x, y, z = positions[:, 0], positions[:, 1], positions[:, 2]
    return np.stack([
        np.cos(np.pi * x) * np.sin(np.pi * y),
        np.sin(np.pi * x) * np.sin(np.pi * y),
        z * np.cos(np.pi * y),
    ], axis=1)


def loss_field_weight(position):
    """Euclidean norm of the positional scalar field at ``position``."""
    comps = loss_field_components(position)
    # hypot keeps tiny components from underflowing when squared
    w = np.hypot(np.hypot(comps[:, 0], comps[:, 1]), comps[:, 2])
    return float(w[0]) if np.ndim(position) == 1 else w


def loss_field_tensor(tape, positions):
    """Field weight per node as an (N,) tensor, differentiable in positions."""
    positions = tape.lift(positions)
    x, y, z = positions[:, 0], positions[:, 1], positions[:, 2]
    sx, cx = tape.sin(tape.mul(x, np.pi)), tape.cos(tape.mul(x, np.pi))
    sy, cy = tape.sin(tape.mul(y, np.pi)), tape.cos(tape.mul(y, np.pi))
    fx = tape.mul(cx, sy)
    fy = tape.mul(sx, sy)
    fz = tape.mul(z, cy)
    return tape.sqrt(fx * fx + fy * fy + fz * fz)


@_on_tape
def magnification_balanced_focal(tape, positions, y, p, params=None, field=None):
    """Focal loss with every node scaled by the positional field weight.

    ``field="unit"`` replaces the field by the constant 1.
    """
    terms = _focal_terms(tape, y, p, params or FocalParams())
    if field == "unit":
        return tape.mean(terms)
    w = loss_field_tensor(tape, positions)
    return tape.mean(tape.mul(w, terms))


def node_loss(kind, tape, positions, y, p, params=None):
    """Loss ``kind`` (``bce | focal | fl_mb``) of tape probabilities ``p``."""
    params = params or FocalParams()
    y = tape.lift(y)
    if kind == "bce":
        return bce(y, p, eps=params.eps)
    if kind == "focal":
        return focal_loss(y, p, params)
    if kind == "fl_mb":
        return magnification_balanced_focal(tape.lift(positions), y, p, params)
    raise ValueError(f"unknown loss kind {kind!r}")
