"""Image-supervised embedding losses with analytic gradients.

An embedding field is an ``(n_cells, D)`` array holding one row per grid cell.
Every loss returns a :class:`LossGrad` whose ``grad`` has the field's shape and
is zero on cells that belong to no instance.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import kernels
from .grid import InstanceCellSets

logger = logging.getLogger(__name__)


@dataclass
class LossGrad:
    value: float
    grad: np.ndarray


@dataclass(frozen=True)
class ICConfig:
    lam: float = 1.0
    mu: float = 0.1

    def __post_init__(self):
        if self.lam < 0 or self.mu < 0:
            raise ValueError("lambda and mu must be non-negative")


def _check(f: np.ndarray, cells: InstanceCellSets) -> np.ndarray:
    f = np.asarray(f, dtype=np.float64)
    if f.ndim != 2:
        raise ValueError("embedding field must be (n_cells, D)")
    cells.validate(f.shape[0])
    return f


def softmax_rows(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows_backward(s: np.ndarray, ds: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. logits given the gradient w.r.t. the row-softmax output."""
    return s * (ds - (ds * s).sum(axis=1, keepdims=True))


def compute_centers(f, cells: InstanceCellSets) -> np.ndarray:
    """Mean embedding of each instance, shape ``(K, D)``."""
    f = _check(f, cells)
    return np.stack([f[s].mean(axis=0) for s in cells.sets])


def _scatter_center_grad(d_centers, cells: InstanceCellSets, shape) -> np.ndarray:
    # C_i is a mean, so each member cell receives dC_i / N_i
    grad = np.zeros(shape)
    for i, s in enumerate(cells.sets):
        grad[s] += d_centers[i] / len(s)
    return grad


def center_loss(f, cells: InstanceCellSets) -> LossGrad:
    """Sum over instances of the L1 distance between member cells and their mean.

    The gradient keeps the dependence of each center on its members, and uses 0
    as the subgradient of ``|x|`` at the kink.
    """
    f = _check(f, cells)
    labels = cells.labels(f.shape[0])
    value, grad = kernels.center_loss(f, labels, cells.n_instances)
    return LossGrad(float(value), grad)


def similarity_matrix(centers: np.ndarray) -> np.ndarray:
    """Row-wise softmax of the Gram matrix of instance centers."""
    centers = np.asarray(centers, dtype=np.float64)
    if not np.all(np.isfinite(centers)):
        raise ValueError("centers must be finite")
    return softmax_rows(centers @ centers.T)


def contra_loss(f, cells: InstanceCellSets) -> LossGrad:
    """Row-averaged cross-entropy of the center similarity matrix against identity."""
    f = _check(f, cells)
    c = compute_centers(f, cells)
    k = len(c)
    s = similarity_matrix(c)
    value = float(-np.log(np.diag(s)).mean())
    dz = (s - np.eye(k)) / k
    dc = (dz + dz.T) @ c
    return LossGrad(value, _scatter_center_grad(dc, cells, f.shape))


def me_entropy(f, cells: InstanceCellSets) -> LossGrad:
    """Entropy of the off-diagonal similarities; the diagonal stays in the softmax.

    Returns ``H`` and ``dH/df``. Training maximizes ``H``, i.e. adds ``-mu * H``.
    """
    f = _check(f, cells)
    c = compute_centers(f, cells)
    k = len(c)
    s = similarity_matrix(c)
    off = ~np.eye(k, dtype=bool)
    value = float(-(s[off] * np.log(s[off])).sum())
    ds = np.where(off, -(np.log(s) + 1.0), 0.0)
    dz = softmax_rows_backward(s, ds)
    dc = (dz + dz.T) @ c
    return LossGrad(value, _scatter_center_grad(dc, cells, f.shape))


def ic_loss(f, cells: InstanceCellSets, cfg: ICConfig = ICConfig()) -> LossGrad:
    center = center_loss(f, cells)
    contra = contra_loss(f, cells)
    return LossGrad(center.value + cfg.lam * contra.value, center.grad + cfg.lam * contra.grad)


def infonce_loss(f, cells: InstanceCellSets, rng_seed=0, include_positive: bool = False) -> LossGrad:
    """Per-cell contrastive baseline averaged over query cells.

    For each query cell one positive is drawn uniformly from the other cells of
    its instance; the negatives are all cells of the other instances. By
    default the denominator holds the negatives only, as the loss is written;
    ``include_positive=True`` gives the usual InfoNCE form.
    Single-cell instances are not used as queries (they still act as negatives).
    """
    f = _check(f, cells)
    if cells.n_instances < 2:
        raise ValueError("infonce_loss needs at least two instances")
    rng = np.random.default_rng(rng_seed)
    labels = cells.labels(f.shape[0])
    grad = np.zeros_like(f)
    queries, positives, owner = [], [], []
    for i, members in enumerate(cells.sets):
        if len(members) < 2:
            logger.warning("instance %d has a single cell; skipped as query", i)
            continue
        for q in members:
            others = members[members != q]
            queries.append(q)
            positives.append(others[rng.integers(len(others))])
            owner.append(i)
    if not queries:
        return LossGrad(0.0, grad)
    q, p = np.array(queries), np.array(positives)
    pool = (labels[None, :] >= 0) & (labels[None, :] != np.array(owner)[:, None])
    if include_positive:
        pool[np.arange(len(q)), p] = True
    logits = np.where(pool, f[q] @ f.T, -np.inf)
    top = logits.max(axis=1, keepdims=True)
    w = np.exp(logits - top)
    norm = w.sum(axis=1, keepdims=True)
    w /= norm
    total = float(np.sum(top[:, 0] + np.log(norm[:, 0]) - np.einsum("ij,ij->i", f[q], f[p])))
    np.add.at(grad, q, w @ f - f[p])
    grad += w.T @ f[q]
    np.add.at(grad, p, -f[q])
    return LossGrad(total / len(q), grad / len(q))
