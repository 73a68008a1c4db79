"""Instance-level cycle-consistency across frames.

Each frame contributes a ``(P_t, D)`` array of instance (or valid-cell)
embeddings. Affinities are row-softmaxes of scaled dot products, chained
forward from the first to the last frame and back again; the loss is the
row-averaged cross-entropy of that round trip against the identity.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .losses import LossGrad, softmax_rows, softmax_rows_backward


@dataclass
class CycleBatch:
    frames: list

    def __post_init__(self):
        self.frames = [np.asarray(x, dtype=np.float64) for x in self.frames]
        if len(self.frames) < 2:
            raise ValueError("a cycle batch needs at least two frames (k >= 1)")
        for t, x in enumerate(self.frames):
            if x.ndim != 2 or x.shape[0] == 0:
                raise ValueError(f"frame {t} has no instances")
            if not np.all(np.isfinite(x)):
                raise ValueError(f"frame {t} has non-finite embeddings")

    @property
    def k(self) -> int:
        return len(self.frames) - 1


def pairwise_affinity(a, b, temperature: float = 1.0) -> np.ndarray:
    """Transition probabilities from the rows of ``a`` to the rows of ``b``."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if len(a) == 0 or len(b) == 0:
        raise ValueError("affinity needs nonempty instance sets")
    return softmax_rows(a @ b.T / temperature)


def chain_affinity(chain) -> np.ndarray:
    chain = list(chain)
    if not chain:
        raise ValueError("empty affinity chain")
    out = np.asarray(chain[0], dtype=np.float64)
    for step in chain[1:]:
        step = np.asarray(step, dtype=np.float64)
        if out.shape[1] != step.shape[0]:
            raise ValueError(f"cannot chain {out.shape} with {step.shape}")
        out = out @ step
    return out


def _round_trip_steps(k: int):
    forward = [(t, t + 1) for t in range(k)]
    backward = [(t + 1, t) for t in reversed(range(k))]
    return forward + backward


def round_trip(batch: CycleBatch, temperature: float = 1.0) -> np.ndarray:
    steps = _round_trip_steps(batch.k)
    return chain_affinity(
        pairwise_affinity(batch.frames[s], batch.frames[d], temperature) for s, d in steps
    )


def cycle_loss(batch: CycleBatch, temperature: float = 1.0) -> LossGrad:
    """Cycle loss and its gradient; ``grad`` is a list with one array per frame."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    x = batch.frames
    steps = _round_trip_steps(batch.k)
    mats = [pairwise_affinity(x[s], x[d], temperature) for s, d in steps]

    # prefix[j] = mats[0] @ ... @ mats[j-1]; suffix[j] = mats[j+1] @ ... @ mats[-1]
    n = len(mats)
    prefix = [np.eye(len(x[0]))]
    for m in mats:
        prefix.append(prefix[-1] @ m)
    suffix = [None] * n
    acc = np.eye(len(x[0]))
    for j in range(n - 1, -1, -1):
        suffix[j] = acc
        acc = mats[j] @ acc
    r = prefix[-1]

    p = len(r)
    # rounding can push a diagonal entry of a stochastic matrix just above 1
    diag = np.minimum(np.diag(r), 1.0)
    value = float(-np.log(diag).mean())
    d_r = np.diag(-1.0 / (p * diag))

    grads = [np.zeros_like(f) for f in x]
    for j, (s, d) in enumerate(steps):
        d_m = prefix[j].T @ d_r @ suffix[j].T
        d_z = softmax_rows_backward(mats[j], d_m) / temperature
        grads[s] += d_z @ x[d]
        grads[d] += d_z.T @ x[s]
    return LossGrad(value, grads)


def sample_frame_group(sequence_length: int, k: int, rng_seed=0,
                       min_gap: int = 2, max_gap: int = 8) -> list[int]:
    """Draw ``k + 1`` increasing frame indices with gaps uniform in ``[min_gap, max_gap]``.

    ``rng_seed`` may be an int or a ``numpy.random.Generator`` (whose state is
    advanced).
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if sequence_length < k * max_gap + 1:
        raise ValueError(
            f"sequence of length {sequence_length} is too short for {k} gaps of up to {max_gap}"
        )
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    gaps = rng.integers(min_gap, max_gap + 1, size=k)
    start = int(rng.integers(0, sequence_length - int(gaps.sum())))
    return [start] + (start + np.cumsum(gaps)).tolist()
