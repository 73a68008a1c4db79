"""Command-line entry point: ``semitrack gen | train | track | eval``.

A run is configured by an optional JSON file holding any subset of the
benchmark configuration (``scene``, ``train``, ``tracker``, dataset sizes, ...)
plus ``seed``; command-line flags override the file. Every artifact echoes the
resolved configuration and the checksums of its inputs.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import __version__, formats, metrics
from .experiments import BenchmarkConfig, gt_tracks, make_benchmark, pred_tracks
from .model import (TrainingDivergedError, identity_head, init_head, test_time_adapt,
                    train_correspondence, train_joint, train_supervised)
from .synthgen import InfeasibleSceneError, oracle_detections
from .tracker import Detection, track_sequence

logger = logging.getLogger("semitrack")


class CliError(Exception):
    """A user-facing failure; the message is printed and the exit code is 1."""


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------

def _merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def load_config(path, overrides: dict) -> tuple[BenchmarkConfig, int]:
    """Defaults, then the config file, then flag overrides."""
    doc = BenchmarkConfig().to_dict()
    doc["seed"] = 0
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except OSError as exc:
            raise CliError(f"cannot read config {path}: {exc}") from exc
        except ValueError as exc:
            raise CliError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(user, dict):
            raise CliError(f"config {path} must be a JSON object")
        doc = _merge(doc, user)
    doc = _merge(doc, overrides)
    seed = doc.pop("seed")
    try:
        return BenchmarkConfig.from_dict(doc), int(seed)
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid configuration: {exc}") from exc


def config_echo(cfg: BenchmarkConfig, seed: int) -> dict:
    return {**cfg.to_dict(), "seed": seed}


def _set(overrides: dict, dotted: str, value) -> None:
    if value is None:
        return
    node = overrides
    *parents, leaf = dotted.split(".")
    for p in parents:
        node = node.setdefault(p, {})
    node[leaf] = value


# --------------------------------------------------------------------------
# dataset directory
# --------------------------------------------------------------------------

def _load_manifest(data_dir: Path) -> dict:
    path = data_dir / "manifest.json"
    if not path.exists():
        raise CliError(f"no dataset at {data_dir} (missing {path})")
    doc = formats.read_json(path, "manifest")
    for split in ("images", "videos", "tests"):
        for entry in doc["files"][split]:
            f = data_dir / entry["json"]
            if not f.exists():
                raise CliError(f"dataset file missing: {f}")
            if formats.sha256_file(f) != entry["sha256"]:
                raise CliError(f"checksum mismatch for {f}")
    return doc


def _data_inputs(data_dir: Path) -> dict:
    return {"data_dir": str(data_dir), "manifest_sha256": formats.sha256_file(data_dir / "manifest.json")}


# --------------------------------------------------------------------------
# gen
# --------------------------------------------------------------------------

def cmd_gen(args) -> int:
    ov = {}
    _set(ov, "seed", args.seed)
    _set(ov, "n_test_sequences", args.n_test)
    _set(ov, "n_video_sequences", args.n_videos)
    _set(ov, "n_image_sequences", args.n_images)
    _set(ov, "test_sequence_length", args.test_length)
    _set(ov, "video_drift", args.drift)
    _set(ov, "scene.appearance_noise", args.noise)
    try:
        cfg, seed = load_config(args.config, ov)
    except InfeasibleSceneError as exc:
        raise CliError(f"invalid scene: {exc}") from exc
    out = Path(args.out)
    try:
        bench = make_benchmark(cfg, seed)
    except (InfeasibleSceneError, ValueError) as exc:
        raise CliError(f"cannot generate dataset: {exc}") from exc
    images, videos, tests = bench.images, bench.videos, bench.tests

    files = {"images": [], "videos": [], "tests": []}
    entry = formats.save_images(out / "images.json", images, dataclasses.replace(cfg.scene, drift=0.0))
    files["images"].append(entry)
    for i, seq in enumerate(videos):
        e = formats.save_sequence(out / "videos" / f"video_{i:03d}.json", seq, labeled=False)
        files["videos"].append({**e, "json": f"videos/{e['json']}", "features": f"videos/{e['features']}"})
    for i, seq in enumerate(tests):
        e = formats.save_sequence(out / "tests" / f"test_{i:03d}.json", seq, labeled=True)
        files["tests"].append({**e, "json": f"tests/{e['json']}", "features": f"tests/{e['features']}"})
    formats.write_json(out / "manifest.json",
                       formats.document("manifest", config=config_echo(cfg, seed), files=files))
    logger.info("wrote %d labeled images, %d videos, %d test sequences to %s",
                len(images), len(videos), len(tests), out)
    return 0


# --------------------------------------------------------------------------
# train
# --------------------------------------------------------------------------

VARIANTS = {
    # variant -> (mu override or None, run correspondence phase)
    "ic": (0.0, False),
    "ic_me": (None, False),
    "ic_me_cyc": (None, True),
}


def cmd_train(args) -> int:
    ov = {}
    _set(ov, "seed", args.seed)
    _set(ov, "train.lam", args.lam)
    _set(ov, "train.mu", args.mu)
    _set(ov, "train.steps", args.steps)
    _set(ov, "train.cycle_steps", args.cycle_steps)
    _set(ov, "train.k", args.k)
    _set(ov, "train.valid_cell_noise", args.label_noise)
    _set(ov, "train.learning_rate", args.lr)
    phases = args.phases.split(",") if args.phases else ["supervised"]
    if args.variant:
        mu, cyc = VARIANTS[args.variant]
        _set(ov, "train.mu", mu)
        phases = ["supervised", "correspondence"] if cyc else ["supervised"]
    unknown = set(phases) - {"supervised", "correspondence"}
    if unknown or not phases:
        raise CliError(f"unknown phase(s): {', '.join(sorted(unknown)) or '(none)'}")
    cfg, seed = load_config(args.config, ov)
    train = dataclasses.replace(cfg.train, seed=seed)

    data_dir = Path(args.data)
    manifest = _load_manifest(data_dir)
    images = formats.load_images(data_dir / manifest["files"]["images"][0]["json"])
    inputs = _data_inputs(data_dir)
    if args.init:
        head, _ = formats.load_checkpoint(args.init)
        inputs["init_checkpoint_sha256"] = formats.sha256_file(args.init)
    else:
        head = init_head(images[0].features.shape[1], cfg.embed_dim, cfg.hidden, cfg.video_head,
                         seed=seed, scale=cfg.init_scale)

    rows = []
    try:
        if "supervised" in phases:
            head, curve = train_supervised(head, images, train)
            rows += [{**r, "phase": "supervised"} for r in curve]
        if "correspondence" in phases:
            videos = [formats.load_sequence(data_dir / e["json"]) for e in manifest["files"]["videos"]]
            if args.cycle_only:
                head, curve = train_correspondence(head, videos, train)
            else:
                head, curve = train_joint(head, images, videos, train)
            offset = len(rows)
            rows += [{**r, "step": r["step"] + offset, "phase": "correspondence"} for r in curve]
    except TrainingDivergedError as exc:
        raise CliError(str(exc)) from exc
    except ValueError as exc:
        raise CliError(f"training failed: {exc}") from exc

    out = Path(args.out)
    echo = {**config_echo(cfg, seed), "phases": phases, "cycle_only": bool(args.cycle_only),
            "variant": args.variant}
    formats.write_loss_csv(out / "loss.csv", rows)
    formats.save_checkpoint(out / "checkpoint.json", head, echo, inputs)
    logger.info("trained %s for %d steps; checkpoint in %s", "+".join(phases), len(rows), out)
    return 0


# --------------------------------------------------------------------------
# track
# --------------------------------------------------------------------------

def _on_off(value: str) -> bool:
    if value not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return value == "on"


def cmd_track(args) -> int:
    ov = {}
    _set(ov, "seed", args.seed)
    _set(ov, "tracker.threshold", args.threshold)
    _set(ov, "tracker.sim_scale", args.sim_scale)
    _set(ov, "tracker.momentum", args.momentum)
    _set(ov, "tracker.use_bi_softmax", args.bi_softmax)
    _set(ov, "tracker.use_postprocess", args.postprocess)
    _set(ov, "tracker.assignment", args.assignment)
    _set(ov, "tracker.association", args.association)
    cfg, seed = load_config(args.config, ov)
    tracker_cfg = cfg.tracker
    if tracker_cfg.association == "spatial":
        tracker_cfg = dataclasses.replace(cfg.spatial_tracker, **{
            k: v for k, v in ov.get("tracker", {}).items()})
    train = dataclasses.replace(cfg.train, seed=seed)
    ttt_values = args.ttt_iters if args.ttt_iters is not None else [0]
    if any(n < 0 for n in ttt_values):
        raise CliError("--ttt-iters values must be >= 0")

    inputs, sources = {}, []
    if args.detections:
        if any(n > 0 for n in ttt_values):
            raise CliError("test-time adaptation needs feature sequences, not a detection file")
        det_path = Path(args.detections)
        if not det_path.exists():
            raise CliError(f"detection file not found: {det_path}")
        sources.append(("detections", {"path": str(det_path), "sha256": formats.sha256_file(det_path)},
                        None, formats.load_detections(det_path)))
        inputs["detections_sha256"] = sources[0][1]["sha256"]
        head = None
    else:
        if args.data is None:
            raise CliError("track needs --data (with --checkpoint) or --detections")
        data_dir = Path(args.data)
        manifest = _load_manifest(data_dir)
        inputs.update(_data_inputs(data_dir))
        if args.checkpoint:
            ckpt = Path(args.checkpoint)
            if not ckpt.exists():
                raise CliError(f"checkpoint not found: {ckpt}")
            head, _ = formats.load_checkpoint(ckpt)
            inputs["checkpoint_sha256"] = formats.sha256_file(ckpt)
        elif tracker_cfg.association == "spatial":
            head = None
        else:
            raise CliError("embedding association needs --checkpoint")
        for e in manifest["files"][args.split]:
            seq = formats.load_sequence(data_dir / e["json"])
            if head is None:
                head = identity_head(seq.spec.feature_dim)
            if head.in_dim != seq.spec.feature_dim:
                raise CliError(f"checkpoint expects {head.in_dim} features, data has {seq.spec.feature_dim}")
            sources.append(("sequence", {"path": e["json"], "sha256": e["sha256"]}, seq, None))

    runs, summary = [], []
    label = args.label or ("spatial" if tracker_cfg.association == "spatial" else "embedding")
    out = Path(args.out)
    for n_iters in ttt_values:
        run_label = f"{label}_ttt{n_iters}" if len(ttt_values) > 1 or n_iters else label
        seqs_out = []
        for v, (kind, ref, seq, dets) in enumerate(sources):
            if kind == "sequence":
                adapted = test_time_adapt(head, seq, dataclasses.replace(train, ttt_iters=n_iters)) \
                    if n_iters else head
                dets = oracle_detections(seq, adapted)
            result = track_sequence(dets, tracker_cfg)
            seqs_out.append({"source": {"kind": kind, **ref}, "frames": formats.track_frames_json(result.frames)})
            births = {}
            for t, _ in result.births:
                births[t] = births.get(t, 0) + 1
            for t, ids in enumerate(result.frames):
                summary.append([run_label, v, t, len(ids), births.get(t, 0),
                                sum(b for f, b in births.items() if f <= t)])
            if args.render and seq is not None:
                for t, (fr, ids) in enumerate(zip(seq.frames, result.frames)):
                    formats.render_ppm(out / "render" / run_label / f"seq_{v:03d}" / f"frame_{t:03d}.ppm",
                                       fr.masks, ids, seq.spec.grid_size)
        runs.append({"label": run_label, "ttt_iters": n_iters, "tracker": dataclasses.asdict(tracker_cfg),
                     "sequences": seqs_out})

    doc = formats.document("tracks", config=config_echo(cfg, seed), inputs=inputs, runs=runs)
    if args.data is not None and not args.detections:
        doc["data_dir"] = str(Path(args.data))
    formats.write_csv(out / "tracks.csv", ["run", "sequence", "frame", "n_detections", "births", "track_count"],
                      summary)
    formats.write_json(out / "tracks.json", doc)
    logger.info("tracked %d sequence(s) in %d run(s)", len(sources), len(runs))
    return 0


# --------------------------------------------------------------------------
# eval
# --------------------------------------------------------------------------

REPORT_COLUMNS = ["label", "tracks_file", "AP", "AP50", "AP75", "AR1", "AR10", "MOTA", "FN", "FP", "IDSW",
                  "id_merges", "n_gt"]


def _detections_geometry(seq) -> list[list[Detection]]:
    dim = seq.frames[0].features.shape[1]
    return oracle_detections(seq, identity_head(dim))


def _evaluate_run(run, base_dir: Path | None, cache: dict):
    preds, gts = [], []
    for v, entry in enumerate(run["sequences"]):
        src = entry["source"]
        ids = formats.parse_track_frames(entry["frames"])
        if src["kind"] != "sequence":
            raise CliError("evaluation needs ground truth; track runs must come from dataset sequences")
        if base_dir is None:
            raise CliError("track file does not name its dataset; pass --data")
        path = base_dir / src["path"]
        if not path.exists():
            raise CliError(f"ground-truth sequence not found: {path}")
        if formats.sha256_file(path) != src["sha256"]:
            raise CliError(f"checksum mismatch for {path}")
        if path not in cache:
            cache[path] = formats.load_sequence(path)
        seq = cache[path]
        if any(fr.track_ids is None for fr in seq.frames):
            raise CliError(f"{path} carries no track ids")
        dets = _detections_geometry(seq)
        if [len(d) for d in dets] != [len(i) for i in ids]:
            raise CliError(f"track assignments do not match the detections of {path}")
        preds += pred_tracks(dets, ids, v)
        gts += gt_tracks(seq, v)
    return preds, gts


def cmd_eval(args) -> int:
    rows, reports, inputs = [], [], {}
    cache = {}
    for tracks_path in args.tracks:
        tracks_path = Path(tracks_path)
        if not tracks_path.exists():
            raise CliError(f"track file not found: {tracks_path}")
        try:
            doc = formats.read_json(tracks_path, "tracks")
        except formats.SchemaError as exc:
            raise CliError(str(exc)) from exc
        inputs[str(tracks_path)] = formats.sha256_file(tracks_path)
        base = Path(args.data) if args.data else (Path(doc["data_dir"]) if "data_dir" in doc else None)
        for run in doc["runs"]:
            try:
                preds, gts = _evaluate_run(run, base, cache)
            except formats.SchemaError as exc:
                raise CliError(f"{tracks_path}: {exc}") from exc
            ap = metrics.video_ap(preds, gts)
            mot = metrics.mota(preds, gts)
            ap.MOTA = mot.mota
            merges = metrics.id_merges(mot, gts)
            reports.append({"label": run["label"], "tracks_file": str(tracks_path), "report": ap.to_dict(),
                            "FN": mot.fn, "FP": mot.fp, "IDSW": mot.idsw, "id_merges": merges,
                            "n_gt": mot.n_gt})
            rows.append([run["label"], str(tracks_path), ap.AP, ap.AP50, ap.AP75, ap.AR1, ap.AR10, mot.mota,
                         mot.fn, mot.fp, mot.idsw, merges, mot.n_gt])
    out = Path(args.out)
    formats.write_csv(out / "report.csv", REPORT_COLUMNS, rows)
    formats.write_json(out / "report.json", formats.document("eval", inputs=inputs, runs=reports))
    for r in rows:
        logger.info("%s: AP %.3f  MOTA %.3f  IDSW %d", r[0], r[2], r[7], r[10])
    return 0


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="semitrack", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file (flags override it)")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", required=True, help="output directory")

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    common(g)
    g.add_argument("--n-test", type=int)
    g.add_argument("--n-videos", type=int)
    g.add_argument("--n-images", type=int, help="number of sequences sliced into labeled images")
    g.add_argument("--test-length", type=int)
    g.add_argument("--drift", type=float, help="per-frame appearance drift of videos and tests")
    g.add_argument("--noise", type=float, help="per-cell appearance noise")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train an embedding head")
    common(t)
    t.add_argument("--data", required=True, help="dataset directory written by gen")
    t.add_argument("--phases", help="comma list of: supervised, correspondence")
    t.add_argument("--variant", choices=sorted(VARIANTS), help="ablation shortcut (overrides --phases)")
    t.add_argument("--cycle-only", action="store_true",
                   help="correspondence phase optimizes only the cycle loss")
    t.add_argument("--init", help="start from this checkpoint")
    t.add_argument("--lam", type=float)
    t.add_argument("--mu", type=float)
    t.add_argument("--lr", type=float)
    t.add_argument("--steps", type=int)
    t.add_argument("--cycle-steps", type=int)
    t.add_argument("--k", type=int, help="frame transitions per cycle group")
    t.add_argument("--label-noise", type=float, help="fraction of corrupted valid cells")
    t.set_defaults(func=cmd_train)

    k = sub.add_parser("track", help="track test sequences")
    common(k)
    k.add_argument("--data", help="dataset directory written by gen")
    k.add_argument("--checkpoint")
    k.add_argument("--detections", help="detection JSON to track instead of dataset sequences")
    k.add_argument("--split", default="tests", choices=("tests", "videos"))
    k.add_argument("--ttt-iters", type=int, nargs="+", help="one run per value")
    k.add_argument("--bi-softmax", type=_on_off)
    k.add_argument("--postprocess", type=_on_off)
    k.add_argument("--threshold", type=float)
    k.add_argument("--sim-scale", type=float)
    k.add_argument("--momentum", type=float)
    k.add_argument("--assignment", choices=("greedy", "hungarian"))
    k.add_argument("--association", choices=("embedding", "spatial"))
    k.add_argument("--label", help="run label prefix")
    k.add_argument("--render", action="store_true", help="write one PPM per frame")
    k.set_defaults(func=cmd_track)

    e = sub.add_parser("eval", help="score track files against ground truth")
    e.add_argument("--tracks", nargs="+", required=True)
    e.add_argument("--data", help="dataset directory (default: the one named in each track file)")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"semitrack {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except formats.SchemaError as exc:
        print(f"semitrack {args.command}: schema error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"semitrack {args.command}: I/O error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
