"""Trainable embedding head and its training loops.

The head maps raw per-cell features to embeddings. With ``hidden > 0`` it is
``tanh(X W1 + b1)`` (the shared trunk) followed by an affine image branch and,
optionally, a separate affine video branch. With ``hidden == 0`` it is a single
affine map shared by both uses.
"""
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass

import numpy as np

from .correspondence import CycleBatch, cycle_loss, sample_frame_group
from .losses import ICConfig, center_loss, contra_loss, me_entropy

logger = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class EmbeddingHead:
    in_dim: int
    out_dim: int
    hidden: int = 0
    video_head: bool = False
    params: np.ndarray = None

    def __post_init__(self):
        if self.video_head and self.hidden == 0:
            raise ValueError("a separate video branch needs a hidden (shared) layer")
        n = n_params(self.in_dim, self.out_dim, self.hidden, self.video_head)
        if self.params is None:
            self.params = np.zeros(n)
        self.params = np.array(self.params, dtype=np.float64)
        if self.params.shape != (n,):
            raise ValueError(f"expected {n} parameters, got {self.params.shape}")
        if not np.all(np.isfinite(self.params)):
            raise ValueError("head parameters must be finite")

    def copy(self) -> "EmbeddingHead":
        return dataclasses.replace(self, params=self.params.copy())

    def views(self) -> dict:
        return _split(self.params, self.in_dim, self.out_dim, self.hidden, self.video_head)

    def shape_dict(self) -> dict:
        return {"in_dim": self.in_dim, "out_dim": self.out_dim, "hidden": self.hidden,
                "video_head": self.video_head}


def _layout(in_dim, out_dim, hidden, video_head):
    if hidden == 0:
        return [("W", (in_dim, out_dim)), ("b", (out_dim,))]
    layout = [("W1", (in_dim, hidden)), ("b1", (hidden,)),
              ("W2", (hidden, out_dim)), ("b2", (out_dim,))]
    if video_head:
        layout += [("V2", (hidden, out_dim)), ("c2", (out_dim,))]
    return layout


def n_params(in_dim, out_dim, hidden=0, video_head=False) -> int:
    return sum(int(np.prod(s)) for _, s in _layout(in_dim, out_dim, hidden, video_head))


def _split(flat, in_dim, out_dim, hidden, video_head) -> dict:
    out, pos = {}, 0
    for name, shape in _layout(in_dim, out_dim, hidden, video_head):
        size = int(np.prod(shape))
        out[name] = flat[pos:pos + size].reshape(shape)
        pos += size
    return out


def init_head(in_dim, out_dim, hidden=0, video_head=False, seed=0, scale=1.0) -> EmbeddingHead:
    rng = np.random.default_rng(seed)
    head = EmbeddingHead(in_dim, out_dim, hidden, video_head)
    for name, v in head.views().items():
        if name.startswith(("W", "V")):
            v[...] = rng.normal(size=v.shape) * scale / np.sqrt(v.shape[0])
    return head


def identity_head(dim: int) -> EmbeddingHead:
    head = EmbeddingHead(dim, dim)
    head.views()["W"][...] = np.eye(dim)
    return head


def _branch_names(head: EmbeddingHead, branch: str):
    if branch not in ("image", "video"):
        raise ValueError(f"unknown branch {branch!r}")
    if branch == "video" and head.video_head:
        return "V2", "c2"
    return "W2", "b2"


def forward(head: EmbeddingHead, features, branch: str = "image") -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != head.in_dim:
        raise ValueError(f"features of shape {x.shape} do not match head input {head.in_dim}")
    p = head.views()
    if head.hidden == 0:
        _branch_names(head, branch)
        return x @ p["W"] + p["b"]
    w, b = _branch_names(head, branch)
    return np.tanh(x @ p["W1"] + p["b1"]) @ p[w] + p[b]


def backward_chain(head: EmbeddingHead, features, upstream, branch: str = "image") -> np.ndarray:
    """Gradient of a loss w.r.t. the flat parameter vector, given ``dL/d embeddings``."""
    x = np.asarray(features, dtype=np.float64)
    g = np.asarray(upstream, dtype=np.float64)
    grad = np.zeros_like(head.params)
    gv = _split(grad, head.in_dim, head.out_dim, head.hidden, head.video_head)
    p = head.views()
    if head.hidden == 0:
        gv["W"][...] = x.T @ g
        gv["b"][...] = g.sum(axis=0)
        return grad
    w, b = _branch_names(head, branch)
    z = np.tanh(x @ p["W1"] + p["b1"])
    gv[w][...] = z.T @ g
    gv[b][...] = g.sum(axis=0)
    dpre = (g @ p[w].T) * (1.0 - z * z)
    gv["W1"][...] = x.T @ dpre
    gv["b1"][...] = dpre.sum(axis=0)
    return grad


# --------------------------------------------------------------------------
# optimizer
# --------------------------------------------------------------------------

@dataclass
class OptimizerState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0


class Adam:
    def __init__(self, n: int, lr: float = 1e-2, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state = OptimizerState(np.zeros(n), np.zeros(n))

    def update(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        s = self.state
        s.step += 1
        s.m = self.beta1 * s.m + (1 - self.beta1) * grad
        s.v = self.beta2 * s.v + (1 - self.beta2) * grad * grad
        m_hat = s.m / (1 - self.beta1 ** s.step)
        v_hat = s.v / (1 - self.beta2 ** s.step)
        return params - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


# --------------------------------------------------------------------------
# objectives
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-2
    steps: int = 200
    batch_size: int = 8
    lam: float = 1.0
    mu: float = 0.1
    temperature: float = 1.0
    cycle_weight: float = 1.0
    cycle_steps: int = 200
    k: int = 1
    min_gap: int = 2
    max_gap: int = 8
    valid_cell_noise: float = 0.0
    cycle_per_cell: bool = False
    seed: int = 0
    ttt_iters: int = 5
    ttt_learning_rate: float | None = None

    def __post_init__(self):
        if self.learning_rate <= 0 or self.temperature <= 0:
            raise ValueError("learning rate and temperature must be positive")
        if self.ttt_iters < 0:
            raise ValueError("ttt_iters must be >= 0")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if not 0.0 <= self.valid_cell_noise <= 1.0:
            raise ValueError("valid_cell_noise must lie in [0, 1]")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def image_objective(head: EmbeddingHead, features, cells, cfg: TrainConfig):
    """``center + lam * contra - mu * H`` on one image; returns (terms, param grad)."""
    f = forward(head, features)
    center = center_loss(f, cells)
    contra = contra_loss(f, cells)
    ent = me_entropy(f, cells)
    total = center.value + cfg.lam * contra.value - cfg.mu * ent.value
    df = center.grad + cfg.lam * contra.grad - cfg.mu * ent.grad
    terms = {"loss_total": total, "loss_center": center.value,
             "loss_contra": contra.value, "entropy": ent.value}
    return terms, backward_chain(head, features, df)


def _frame_instances(frame, rng, noise: float, per_cell: bool):
    from .synthgen import instance_cells

    n_cells = frame.features.shape[0]
    sets = instance_cells(frame)
    if noise > 0:
        corrupted = []
        for s in sets:
            s = s.copy()
            hit = rng.random(len(s)) < noise
            s[hit] = rng.integers(0, n_cells, size=int(hit.sum()))
            corrupted.append(s)
        sets = corrupted
    if per_cell:
        return [np.array([c]) for s in sets for c in s]
    return sets


def cycle_objective(head: EmbeddingHead, frames, cfg: TrainConfig, rng=None):
    """Cycle loss over a group of frames; returns (value, param grad).

    Instance embeddings are cell means over each object's valid cells (or the
    individual valid cells when ``cfg.cycle_per_cell``).
    """
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    embeds, groups = [], []
    for fr in frames:
        f = forward(head, fr.features, "video")
        sets = _frame_instances(fr, rng, cfg.valid_cell_noise, cfg.cycle_per_cell)
        embeds.append((f, sets))
        groups.append(np.stack([f[s].mean(axis=0) for s in sets]))
    res = cycle_loss(CycleBatch(groups), cfg.temperature)
    grad = np.zeros_like(head.params)
    for fr, (f, sets), g in zip(frames, embeds, res.grad):
        df = np.zeros_like(f)
        for s, gi in zip(sets, g):
            np.add.at(df, s, gi / len(s))
        grad += backward_chain(head, fr.features, df, "video")
    return res.value, grad


def _check_finite(value, step, phase):
    if not np.isfinite(value):
        raise TrainingDivergedError(f"{phase} loss became non-finite ({value}) at step {step}")


def _apply(head, opt, grad, step, phase):
    with np.errstate(over="ignore", invalid="ignore"):
        params = opt.update(head.params, grad)
    if not np.all(np.isfinite(params)):
        raise TrainingDivergedError(f"{phase} parameters became non-finite at step {step}")
    head.params = params


# --------------------------------------------------------------------------
# training loops
# --------------------------------------------------------------------------

def _prepare_images(images):
    prepared = []
    for i, img in enumerate(images):
        cells, _ = img.labels.cell_sets()
        if cells.n_instances == 0:
            raise ValueError(f"image {i} has no instance")
        prepared.append((img.features, cells))
    return prepared


def _image_step(head, prepared, cfg, rng):
    batch = rng.integers(0, len(prepared), size=cfg.batch_size)
    grad = np.zeros_like(head.params)
    sums = {}
    for b in batch:
        terms, g = image_objective(head, *prepared[b], cfg)
        grad += g
        for key, val in terms.items():
            sums[key] = sums.get(key, 0.0) + val
    return {k: v / len(batch) for k, v in sums.items()}, grad / len(batch)


def train_supervised(head: EmbeddingHead, images, cfg: TrainConfig):
    """Minimize the batch mean of ``L_IC - mu H``; returns (new head, loss curve rows)."""
    prepared = _prepare_images(list(images))
    head = head.copy()
    opt = Adam(len(head.params), cfg.learning_rate)
    rng = np.random.default_rng(cfg.seed)
    curve = []
    for step in range(cfg.steps):
        terms, grad = _image_step(head, prepared, cfg, rng)
        row = {"step": step, **terms}
        _check_finite(row["loss_total"], step, "supervised")
        curve.append(row)
        _apply(head, opt, grad, step, "supervised")
    return head, curve


def _sample_groups(sequences, cfg: TrainConfig, rng, n: int):
    groups = []
    eligible = [s for s in sequences if len(s) >= cfg.k * cfg.max_gap + 1]
    if not eligible:
        raise ValueError("no sequence is long enough for the frame-group sampler")
    while len(groups) < n:
        seq = eligible[int(rng.integers(len(eligible)))]
        idx = sample_frame_group(len(seq), cfg.k, rng, cfg.min_gap, cfg.max_gap)
        frames = [seq.frames[i] for i in idx]
        if all(len(fr.masks) for fr in frames):
            groups.append(frames)
    return groups


def _cycle_steps(head, sequences, cfg, n_steps, lr, rng, phase="correspondence"):
    opt = Adam(len(head.params), lr)
    curve = []
    for step in range(n_steps):
        grad = np.zeros_like(head.params)
        total = 0.0
        for frames in _sample_groups(sequences, cfg, rng, cfg.batch_size):
            value, g = cycle_objective(head, frames, cfg, rng)
            total += value
            grad += g
        value = total / cfg.batch_size
        _check_finite(value, step, phase)
        curve.append({"step": step, "loss_total": cfg.cycle_weight * value, "loss_cyc": value})
        _apply(head, opt, cfg.cycle_weight * grad / cfg.batch_size, step, phase)
    return curve


def train_correspondence(head: EmbeddingHead, sequences, cfg: TrainConfig):
    """Minimize ``cycle_weight * L_cyc`` on frame groups from unlabeled sequences."""
    head = head.copy()
    rng = np.random.default_rng([cfg.seed, 1])
    curve = _cycle_steps(head, list(sequences), cfg, cfg.cycle_steps, cfg.learning_rate, rng)
    return head, curve


def train_joint(head: EmbeddingHead, images, sequences, cfg: TrainConfig):
    """Minimize ``L_IC - mu H`` on labeled images plus ``cycle_weight * L_cyc`` on
    unlabeled sequences, one batch of each per step, for ``cfg.cycle_steps`` steps.

    The image term runs through the image branch and the cycle term through the
    video branch, so with a shared trunk both shape the trunk.
    """
    prepared = _prepare_images(list(images))
    sequences = list(sequences)
    head = head.copy()
    opt = Adam(len(head.params), cfg.learning_rate)
    img_rng = np.random.default_rng([cfg.seed, 4])
    vid_rng = np.random.default_rng([cfg.seed, 1])
    curve = []
    for step in range(cfg.cycle_steps):
        terms, grad = _image_step(head, prepared, cfg, img_rng)
        cyc = 0.0
        for frames in _sample_groups(sequences, cfg, vid_rng, cfg.batch_size):
            value, g = cycle_objective(head, frames, cfg, vid_rng)
            cyc += value / cfg.batch_size
            grad += cfg.cycle_weight * g / cfg.batch_size
        row = {"step": step, **terms, "loss_cyc": cyc}
        row["loss_total"] = terms["loss_total"] + cfg.cycle_weight * cyc
        _check_finite(row["loss_total"], step, "joint")
        curve.append(row)
        _apply(head, opt, grad, step, "joint")
    return head, curve


def test_time_adapt(head: EmbeddingHead, sequence, cfg: TrainConfig) -> EmbeddingHead:
    """Run ``cfg.ttt_iters`` cycle-loss steps on one sequence, with a fresh optimizer."""
    out = head.copy()
    if cfg.ttt_iters == 0:
        return out
    lr = cfg.ttt_learning_rate or cfg.learning_rate
    rng = np.random.default_rng([cfg.seed, 2])
    _cycle_steps(out, [sequence], cfg, cfg.ttt_iters, lr, rng, phase="test-time")
    return out


def sequence_cycle_loss(head: EmbeddingHead, sequence, cfg: TrainConfig, n_groups: int = 32) -> float:
    """Mean cycle loss over a fixed, seed-determined set of frame groups."""
    rng = np.random.default_rng([cfg.seed, 3])
    groups = _sample_groups([sequence], cfg, rng, n_groups)
    eval_cfg = dataclasses.replace(cfg, valid_cell_noise=0.0)
    return float(np.mean([cycle_objective(head, g, eval_cfg, rng)[0] for g in groups]))
