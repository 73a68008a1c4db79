"""Hot inner loops, in two flavours.

Every kernel ``foo`` exists as ``foo_loop`` (explicit loops, compiled with
numba when available) and ``foo_numpy`` (vectorized numpy). The public name
``foo`` points at the loop version when numba is active and at the numpy
version otherwise, so the slow interpreted-loop path is never used by default.
"""
import numpy as np

from ._accel import HAS_NUMBA, njit

__all__ = [
    "assign_cells",
    "center_loss",
    "st_iou_matrix",
    "greedy_match",
]


# --------------------------------------------------------------------------
# grid-cell instance assignment
# --------------------------------------------------------------------------

@njit(cache=True)
def assign_cells_loop(cx, cy, half_w, half_h, area, grid_size):
    n = grid_size * grid_size
    labels = np.full(n, -1, dtype=np.int64)
    k_total = cx.shape[0]
    for y in range(grid_size):
        yc = y + 0.5
        for x in range(grid_size):
            xc = x + 0.5
            best = -1
            best_area = np.inf
            for k in range(k_total):
                if abs(xc - cx[k]) <= half_w[k] and abs(yc - cy[k]) <= half_h[k]:
                    if area[k] < best_area:
                        best_area = area[k]
                        best = k
            labels[y * grid_size + x] = best
    return labels


def assign_cells_numpy(cx, cy, half_w, half_h, area, grid_size):
    centers = np.arange(grid_size) + 0.5
    inside_x = np.abs(centers[None, :] - cx[:, None]) <= half_w[:, None]
    inside_y = np.abs(centers[None, :] - cy[:, None]) <= half_h[:, None]
    inside = inside_y[:, :, None] & inside_x[:, None, :]
    if len(area) == 0:
        return np.full(grid_size * grid_size, -1, dtype=np.int64)
    key = np.where(inside, area[:, None, None], np.inf)
    # argmin returns the first minimum, so equal areas go to the lower index
    labels = np.where(inside.any(axis=0), np.argmin(key, axis=0), -1)
    return labels.reshape(-1).astype(np.int64)


# --------------------------------------------------------------------------
# center loss: value and gradient w.r.t. every cell embedding
# --------------------------------------------------------------------------

@njit(cache=True)
def center_loss_loop(f, labels, n_instances):
    n, d = f.shape
    sums = np.zeros((n_instances, d))
    counts = np.zeros(n_instances)
    for q in range(n):
        i = labels[q]
        if i >= 0:
            counts[i] += 1.0
            for c in range(d):
                sums[i, c] += f[q, c]
    centers = np.zeros((n_instances, d))
    for i in range(n_instances):
        if counts[i] > 0:
            for c in range(d):
                centers[i, c] = sums[i, c] / counts[i]
    value = 0.0
    signs = np.zeros((n, d))
    sign_sums = np.zeros((n_instances, d))
    for q in range(n):
        i = labels[q]
        if i >= 0:
            for c in range(d):
                diff = f[q, c] - centers[i, c]
                value += abs(diff)
                s = 0.0
                if diff > 0:
                    s = 1.0
                elif diff < 0:
                    s = -1.0
                signs[q, c] = s
                sign_sums[i, c] += s
    grad = np.zeros((n, d))
    for q in range(n):
        i = labels[q]
        if i >= 0:
            for c in range(d):
                grad[q, c] = signs[q, c] - sign_sums[i, c] / counts[i]
    return value, grad


def center_loss_numpy(f, labels, n_instances):
    n, d = f.shape
    member = labels >= 0
    lab = labels[member]
    fm = f[member]
    counts = np.bincount(lab, minlength=n_instances).astype(float)
    sums = np.zeros((n_instances, d))
    np.add.at(sums, lab, fm)
    centers = sums / np.maximum(counts, 1.0)[:, None]
    diff = fm - centers[lab]
    signs = np.sign(diff)
    sign_sums = np.zeros((n_instances, d))
    np.add.at(sign_sums, lab, signs)
    grad = np.zeros((n, d))
    grad[member] = signs - sign_sums[lab] / counts[lab][:, None]
    return float(np.abs(diff).sum()), grad


# --------------------------------------------------------------------------
# spatio-temporal IoU between two stacks of flattened (frames x cells) masks
# --------------------------------------------------------------------------

@njit(cache=True)
def st_iou_matrix_loop(a, b):
    na, length = a.shape
    nb = b.shape[0]
    out = np.empty((na, nb))
    for i in range(na):
        for j in range(nb):
            inter = 0
            union = 0
            for p in range(length):
                x = a[i, p]
                y = b[j, p]
                if x and y:
                    inter += 1
                if x or y:
                    union += 1
            out[i, j] = inter / union if union > 0 else np.nan
    return out


def st_iou_matrix_numpy(a, b):
    af = a.astype(np.float64)
    bf = b.astype(np.float64)
    inter = af @ bf.T
    union = af.sum(axis=1)[:, None] + bf.sum(axis=1)[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / np.where(union > 0, union, 1.0), np.nan)


# --------------------------------------------------------------------------
# greedy one-to-one matching by descending score
# --------------------------------------------------------------------------

@njit(cache=True)
def greedy_match_loop(scores, gate, threshold):
    n, m = scores.shape
    flat = -scores.ravel()
    order = np.argsort(flat, kind="mergesort")
    row_match = np.full(n, -1, dtype=np.int64)
    col_used = np.zeros(m, dtype=np.bool_)
    for idx in order:
        r = idx // m
        c = idx % m
        if row_match[r] >= 0 or col_used[c]:
            continue
        if gate[r, c] < threshold:
            continue
        row_match[r] = c
        col_used[c] = True
    return row_match


def greedy_match_numpy(scores, gate, threshold):
    n, m = scores.shape
    order = np.argsort(-scores.ravel(), kind="stable")
    eligible = gate.ravel()[order] >= threshold
    row_match = np.full(n, -1, dtype=np.int64)
    col_used = np.zeros(m, dtype=bool)
    for idx in order[eligible]:
        r, c = divmod(int(idx), m)
        if row_match[r] < 0 and not col_used[c]:
            row_match[r] = c
            col_used[c] = True
    return row_match


if HAS_NUMBA:
    assign_cells = assign_cells_loop
    center_loss = center_loss_loop
    st_iou_matrix = st_iou_matrix_loop
    greedy_match = greedy_match_loop
else:
    assign_cells = assign_cells_numpy
    center_loss = center_loss_numpy
    st_iou_matrix = st_iou_matrix_numpy
    greedy_match = greedy_match_numpy
