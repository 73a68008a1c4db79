"""On-disk formats: annotation JSON, feature blobs, checkpoints, tracks, reports.

Every JSON document carries ``schema_version`` and ``kind``. JSON is written
with sorted keys and a trailing newline, and every write goes through a
temporary file in the target directory followed by an atomic rename, so
reruns produce byte-identical files and readers never see partial output.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .grid import BBox, GridAssignConfig, InstanceLabelGrid, Mask, assign_instances
from .model import EmbeddingHead
from .synthgen import LabeledImage, SceneSpec, SynthFrame, SynthSequence
from .tracker import Detection

SCHEMA_VERSION = 1


class SchemaError(ValueError):
    """A file does not match the expected kind or schema version."""


# --------------------------------------------------------------------------
# atomic writes and checksums
# --------------------------------------------------------------------------

def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dumps_json(doc) -> str:
    return json.dumps(doc, sort_keys=True, indent=1, allow_nan=False) + "\n"


def write_json(path, doc) -> None:
    atomic_write_bytes(path, dumps_json(doc).encode())


def read_json(path, kind: str | None = None) -> dict:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise
    except (OSError, ValueError) as exc:
        raise SchemaError(f"{path}: unreadable JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise SchemaError(f"{path}: top level must be an object")
    if kind is not None:
        if doc.get("kind") != kind:
            raise SchemaError(f"{path}: expected kind {kind!r}, found {doc.get('kind')!r}")
        if doc.get("schema_version") != SCHEMA_VERSION:
            raise SchemaError(f"{path}: unsupported schema_version {doc.get('schema_version')!r}")
    return doc


def write_csv(path, header, rows) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow(["" if v is None else _csv_value(v) for v in row])
    atomic_write_bytes(path, buf.getvalue().encode())


def _csv_value(v):
    if isinstance(v, float):
        return repr(v)
    return v


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def document(kind: str, **fields) -> dict:
    return {"schema_version": SCHEMA_VERSION, "kind": kind, **fields}


# --------------------------------------------------------------------------
# masks and annotations
# --------------------------------------------------------------------------

def encode_mask(mask: Mask) -> dict:
    """Row-major run lengths, starting with a (possibly empty) run of zeros."""
    flat = mask.bits.ravel()
    counts, current, run = [], False, 0
    for bit in flat:
        if bool(bit) == current:
            run += 1
        else:
            counts.append(run)
            current, run = bool(bit), 1
    counts.append(run)
    return {"size": [mask.height, mask.width], "rle": counts}


def decode_mask(obj: dict) -> Mask:
    try:
        h, w = (int(v) for v in obj["size"])
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError("mask needs a [height, width] size") from exc
    if "rle" in obj:
        counts = [int(c) for c in obj["rle"]]
        if any(c < 0 for c in counts) or sum(counts) != h * w:
            raise SchemaError("mask run lengths do not cover the grid")
        flat = np.repeat(np.arange(len(counts)) % 2 == 1, counts)
    elif "bits" in obj:
        flat = np.asarray(obj["bits"], dtype=np.int64)
        if flat.shape != (h * w,) or not np.isin(flat, (0, 1)).all():
            raise SchemaError("mask bit list must hold height*width zeros and ones")
        flat = flat.astype(bool)
    else:
        raise SchemaError("mask needs either 'rle' or 'bits'")
    return Mask(flat.reshape(h, w))


def frame_annotation(frame_id: int, masks, boxes, categories, track_ids=None) -> dict:
    instances = []
    for i, (m, b, c) in enumerate(zip(masks, boxes, categories)):
        inst = {"category": int(c), "mask": encode_mask(m), "bbox": list(b.as_list())}
        if track_ids is not None:
            inst["track_id"] = int(track_ids[i])
        instances.append(inst)
    return {"frame_id": int(frame_id), "instances": instances}


def parse_annotation(obj: dict):
    """Returns (frame_id, masks, boxes, categories, track_ids or None)."""
    try:
        frame_id = int(obj["frame_id"])
        instances = obj["instances"]
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError("annotation needs frame_id and instances") from exc
    masks, boxes, cats, ids = [], [], [], []
    for inst in instances:
        masks.append(decode_mask(inst["mask"]))
        boxes.append(BBox(*(float(v) for v in inst["bbox"])))
        cats.append(int(inst["category"]))
        ids.append(inst.get("track_id"))
    has_ids = [i is not None for i in ids]
    if any(has_ids) and not all(has_ids):
        raise SchemaError(f"frame {frame_id}: track_id present on some instances only")
    return frame_id, masks, boxes, cats, ([int(i) for i in ids] if all(has_ids) and ids else None)


def _labels(masks, spec: SceneSpec) -> InstanceLabelGrid:
    s = spec.grid_size
    if not masks:
        return InstanceLabelGrid(s, np.full(s * s, -1, dtype=np.int64), 0)
    return assign_instances(masks, GridAssignConfig(s, spec.epsilon))


# --------------------------------------------------------------------------
# sequences and image splits
# --------------------------------------------------------------------------

def save_sequence(path_json, seq: SynthSequence, labeled: bool = True) -> dict:
    """Write ``<name>.json`` plus the ``<name>.npy`` feature blob next to it.

    ``labeled=False`` strips track ids (unlabeled videos). Returns the file
    entries (relative names and checksums) for a manifest.
    """
    path_json = Path(path_json)
    blob = path_json.with_suffix(".npy")
    features = np.stack([fr.features for fr in seq.frames]).astype(np.float64)
    buf = io.BytesIO()
    np.save(buf, features, allow_pickle=False)
    atomic_write_bytes(blob, buf.getvalue())
    frames = [frame_annotation(t, fr.masks, fr.boxes, fr.categories, fr.track_ids if labeled else None)
              for t, fr in enumerate(seq.frames)]
    doc = document("sequence", spec=seq.spec.to_dict(), labeled=labeled, frames=frames,
                   features={"file": blob.name, "dtype": "float64", "shape": list(features.shape),
                             "sha256": sha256_file(blob)})
    write_json(path_json, doc)
    return {"json": path_json.name, "sha256": sha256_file(path_json), "features": blob.name}


def _load_blob(base: Path, meta: dict) -> np.ndarray:
    blob = base / meta["file"]
    if sha256_file(blob) != meta["sha256"]:
        raise SchemaError(f"{blob}: checksum mismatch")
    arr = np.load(blob, allow_pickle=False)
    if list(arr.shape) != list(meta["shape"]) or str(arr.dtype) != meta["dtype"]:
        raise SchemaError(f"{blob}: shape/dtype do not match the header")
    return arr


def load_sequence(path_json) -> SynthSequence:
    path_json = Path(path_json)
    doc = read_json(path_json, "sequence")
    spec = SceneSpec.from_dict(doc["spec"])
    features = _load_blob(path_json.parent, doc["features"])
    if len(features) != len(doc["frames"]):
        raise SchemaError(f"{path_json}: frame count differs from the feature blob")
    seq = SynthSequence(spec)
    for ann, feats in zip(doc["frames"], features):
        _, masks, boxes, cats, ids = parse_annotation(ann)
        seq.frames.append(SynthFrame(feats, _labels(masks, spec), ids, masks, boxes, cats))
    return seq


def save_images(path_json, images, spec: SceneSpec) -> dict:
    path_json = Path(path_json)
    blob = path_json.with_suffix(".npy")
    features = np.stack([img.features for img in images]).astype(np.float64)
    buf = io.BytesIO()
    np.save(buf, features, allow_pickle=False)
    atomic_write_bytes(blob, buf.getvalue())
    frames = [frame_annotation(i, img.masks, img.boxes, img.categories) for i, img in enumerate(images)]
    doc = document("images", spec=spec.to_dict(), frames=frames,
                   features={"file": blob.name, "dtype": "float64", "shape": list(features.shape),
                             "sha256": sha256_file(blob)})
    write_json(path_json, doc)
    return {"json": path_json.name, "sha256": sha256_file(path_json), "features": blob.name}


def load_images(path_json) -> list[LabeledImage]:
    path_json = Path(path_json)
    doc = read_json(path_json, "images")
    spec = SceneSpec.from_dict(doc["spec"])
    features = _load_blob(path_json.parent, doc["features"])
    out = []
    for ann, feats in zip(doc["frames"], features):
        _, masks, boxes, cats, ids = parse_annotation(ann)
        if ids is not None:
            raise SchemaError(f"{path_json}: labeled images must not carry track ids")
        out.append(LabeledImage(feats, _labels(masks, spec), masks, boxes, cats))
    return out


# --------------------------------------------------------------------------
# checkpoints and loss curves
# --------------------------------------------------------------------------

def save_checkpoint(path, head: EmbeddingHead, config: dict, inputs: dict) -> None:
    write_json(path, document("checkpoint", config=config, inputs=inputs, head=head.shape_dict(),
                              params=[float(v) for v in head.params]))


def load_checkpoint(path) -> tuple[EmbeddingHead, dict]:
    doc = read_json(path, "checkpoint")
    shape = doc["head"]
    head = EmbeddingHead(int(shape["in_dim"]), int(shape["out_dim"]), int(shape["hidden"]),
                         bool(shape["video_head"]), np.asarray(doc["params"], dtype=np.float64))
    return head, doc


LOSS_COLUMNS = ("step", "phase", "loss_total", "loss_center", "loss_contra", "entropy", "loss_cyc")


def write_loss_csv(path, rows) -> None:
    """Columns present in any row are written; ``loss_cyc`` only appears when a
    correspondence phase ran."""
    present = {k for r in rows for k in r}
    header = [c for c in LOSS_COLUMNS if c in present]
    write_csv(path, header, [[r.get(c) for c in header] for r in rows])


# --------------------------------------------------------------------------
# detections and tracks
# --------------------------------------------------------------------------

def detection_to_json(det: Detection) -> dict:
    return {"category": int(det.category), "score": float(det.score), "bbox": list(det.bbox.as_list()),
            "mask": encode_mask(det.mask), "embedding": [float(v) for v in det.embedding]}


def detection_from_json(obj: dict) -> Detection:
    try:
        return Detection(int(obj["category"]), float(obj["score"]), BBox(*(float(v) for v in obj["bbox"])),
                         decode_mask(obj["mask"]), np.asarray(obj["embedding"], dtype=np.float64))
    except (KeyError, TypeError) as exc:
        raise SchemaError(f"malformed detection: {exc}") from exc


def save_detections(path, frames, config: dict | None = None) -> None:
    write_json(path, document("detections", config=config or {},
                              frames=[{"frame_id": t, "detections": [detection_to_json(d) for d in dets]}
                                      for t, dets in enumerate(frames)]))


def load_detections(path) -> list[list[Detection]]:
    doc = read_json(path, "detections")
    frames = sorted(doc["frames"], key=lambda f: f["frame_id"])
    if [f["frame_id"] for f in frames] != list(range(len(frames))):
        raise SchemaError(f"{path}: frame ids must be 0..T-1")
    return [[detection_from_json(d) for d in f["detections"]] for f in frames]


def track_frames_json(ids_per_frame) -> list[dict]:
    return [{"frame_id": t, "assignments": [{"detection_idx": i, "track_id": int(tid)}
                                            for i, tid in enumerate(ids)]}
            for t, ids in enumerate(ids_per_frame)]


def parse_track_frames(frames) -> list[list[int]]:
    out = []
    for t, fr in enumerate(sorted(frames, key=lambda f: f["frame_id"])):
        if fr["frame_id"] != t:
            raise SchemaError("track frames must be numbered 0..T-1")
        assign = sorted(fr["assignments"], key=lambda a: a["detection_idx"])
        if [a["detection_idx"] for a in assign] != list(range(len(assign))):
            raise SchemaError(f"frame {t}: detection indices must be 0..N-1")
        ids = [int(a["track_id"]) for a in assign]
        if len(set(ids)) != len(ids):
            raise SchemaError(f"frame {t}: a track id is assigned twice")
        out.append(ids)
    return out


# --------------------------------------------------------------------------
# renders
# --------------------------------------------------------------------------

def track_color(track_id: int) -> tuple[int, int, int]:
    """A fixed, well-spread color per track id."""
    hue = (track_id * 0.618033988749895) % 1.0
    h6 = hue * 6
    i, f = int(h6), h6 - int(h6)
    v, s = 230, 0.75
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    rgb = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i % 6]
    return tuple(int(round(c)) for c in rgb)


def render_ppm(path, masks, track_ids, grid_size: int, scale: int = 8) -> None:
    """Binary PPM of one frame; each mask is filled with its track's color."""
    img = np.full((grid_size, grid_size, 3), 24, dtype=np.uint8)
    for m, tid in zip(masks, track_ids):
        img[m.bits] = track_color(int(tid))
    img = np.repeat(np.repeat(img, scale, axis=0), scale, axis=1)
    header = f"P6\n{img.shape[1]} {img.shape[0]}\n255\n".encode()
    atomic_write_bytes(path, header + img.tobytes())
