"""Command-line entry point.

Subcommands: pretrain, probe-coupling, probe-position, oknn, subset,
augment-preview.  Every run derives all randomness from one ``--seed``,
resolves its configuration with flag > file > default precedence, and writes
a manifest (resolved config, input content hashes, timestamps, outputs)
alongside its outputs.  Exit codes: 0 success, 1 validation error, 2 runtime
failure.
"""

from __future__ import annotations

import argparse
import datetime
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import diagnostics, eval_oknn
from .augment import AugConfig, prc, prm
from .encoder import load_checkpoint, EncoderParams
from .errors import (ConfigError, MissingImage, ParseError, RegionSSLError,
                     SceneSpecError, UnknownCommand)
from .geometry import BBox, box_pixel_slices
from .trainer import TrainConfig, keyed_rng, run_pretrain

_VALIDATION_ERRORS = (ConfigError, ParseError, UnknownCommand, SceneSpecError,
                      MissingImage, FileNotFoundError)


class _Parser(argparse.ArgumentParser):
    """argparse that exits 1 (not 2) on bad usage, naming the offender."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def parse_kv_file(path) -> dict:
    """Plain-text ``key = value`` config; values parse as JSON, else strings."""
    mapping: dict = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        value = value.strip()
        try:
            mapping[key.strip()] = json.loads(value)
        except json.JSONDecodeError:
            mapping[key.strip()] = value
    return mapping


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out, subcommand: str, config: dict, seed, inputs,
                   outputs, started: str) -> Path:
    out = Path(out)
    if out.is_dir():
        path = out / "manifest.json"
    else:
        path = out.with_suffix("").parent / (out.with_suffix("").name
                                             + ".manifest.json")
    doc = {
        "subcommand": subcommand,
        "config": config,
        "seed": seed,
        "inputs": {str(p): _sha256(Path(p)) for p in inputs
                   if p and Path(p).is_file()},
        "outputs": [str(o) for o in outputs],
        "started": started,
        "finished": datetime.datetime.now(datetime.timezone.utc).isoformat(),
    }
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def _now() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


def _parse_synth_spec(text: str):
    """'synth:count=500,size=64,classes=8,seed=1,...' -> (SceneSpec, count, seed)."""
    fields = {}
    body = text[len("synth:"):]
    for part in filter(None, body.split(",")):
        if "=" not in part:
            raise ConfigError(f"bad synth spec fragment {part!r}")
        k, _, v = part.partition("=")
        fields[k.strip()] = v.strip()
    count = int(fields.pop("count", 500))
    seed = int(fields.pop("seed", 0))
    kw = {}
    if "size" in fields:
        kw["canvas_size"] = int(fields.pop("size"))
    if "classes" in fields:
        kw["n_classes"] = int(fields.pop("classes"))
    if "min_objects" in fields or "max_objects" in fields:
        kw["object_count"] = (int(fields.pop("min_objects", 2)),
                              int(fields.pop("max_objects", 4)))
    if "background" in fields:
        kw["background"] = fields.pop("background")
    if fields:
        raise ConfigError(f"unknown synth spec keys: {sorted(fields)}")
    return data_mod.SceneSpec(**kw), count, seed


def _load_data(spec: str) -> data_mod.Dataset:
    if spec.startswith("synth:"):
        scene_spec, count, seed = _parse_synth_spec(spec)
        return data_mod.make_dataset(keyed_rng(seed, 7, 7, 7), scene_spec, count)
    path = Path(spec)
    ann = path / "annotations.json" if path.is_dir() else path
    if not ann.is_file():
        raise FileNotFoundError(f"no annotation file at {ann}")
    return data_mod.load_annotations(ann)


def _student_from_checkpoint(path) -> EncoderParams:
    pair, _, _ = load_checkpoint(path)
    return pair.student


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_pretrain(args) -> int:
    started = _now()
    mapping = parse_kv_file(args.config) if args.config else {}
    if args.seed is not None:
        mapping["seed"] = args.seed
    if args.deterministic:
        mapping["deterministic"] = True
    cfg = TrainConfig.from_mapping(mapping)
    dataset = _load_data(args.data)
    proposals = data_mod.load_proposals(args.proposals) if args.proposals else None
    out_dir = Path(args.out)
    final = run_pretrain(cfg, dataset, proposals, out_dir)
    write_manifest(out_dir, "pretrain", cfg.to_jsonable(), cfg.seed,
                   [args.config, args.proposals], [final], started)
    print(final)
    return 0


def _plot_stage_lines(report, metric: str, path: Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    values = getattr(report, metric if metric != "coupling_rate" else "coupling_rate")
    stages = report.stages
    fig, ax = plt.subplots(figsize=(4, 3))
    ax.plot(stages, [values[s] for s in stages], marker="o")
    ax.set_xlabel("stage")
    ax.set_ylabel("coupling rate" if metric == "coupling_rate" else "mean cosine")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def cmd_probe(args, metric: str) -> int:
    started = _now()
    params = _student_from_checkpoint(args.checkpoint)
    stages = [s.strip() for s in args.stages.split(",") if s.strip()]
    rng = keyed_rng(args.seed, 3, 1, 0)
    fixtures = diagnostics.DiagnosticsFixtures.generate(
        rng, n_pairs=args.fixtures, n_patches=args.fixtures,
        patch_size=args.patch_size)
    report = diagnostics.probe_report(
        params, fixtures, stages,
        metadata={"checkpoint": str(args.checkpoint), "seed": args.seed,
                  "fixtures": args.fixtures})
    out = Path(args.out)
    report.save(out)
    outputs = [out]
    if args.plot:
        plot_path = out.with_suffix(".png")
        _plot_stage_lines(report, metric, plot_path)
        outputs.append(plot_path)
    write_manifest(out, f"probe-{'coupling' if metric == 'coupling_rate' else 'position'}",
                   {"stages": stages, "fixtures": args.fixtures,
                    "patch_size": args.patch_size}, args.seed,
                   [args.checkpoint], outputs, started)
    print(json.dumps(getattr(report, metric), sort_keys=True))
    return 0


def cmd_oknn(args) -> int:
    started = _now()
    params = _student_from_checkpoint(args.checkpoint)
    train_set = _load_data(args.train_ann)
    eval_set = _load_data(args.eval_ann)
    cfg = eval_oknn.OKNNConfig(k=args.k, n_per_image=args.n)
    rng = keyed_rng(args.seed, 5, 1, 0)
    result = eval_oknn.oknn_score(params, train_set, eval_set, cfg,
                                  disturbed=args.disturbed, rng=rng)
    out = Path(args.out)
    out.write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    write_manifest(out, "oknn", {"k": args.k, "n": args.n,
                                 "disturbed": args.disturbed}, args.seed,
                   [args.checkpoint], [out], started)
    print(json.dumps({"top1": result["top1"], "top5": result["top5"]}))
    return 0


def cmd_subset(args) -> int:
    started = _now()
    source = data_mod.load_annotations(args.source, load_images=False)
    reference = data_mod.load_annotations(args.reference, load_images=False)
    rng = keyed_rng(args.seed, 9, 1, 0)
    selected, report = data_mod.mini_subset_select(source, reference, rng)
    ids_path = Path(args.out)
    ids_path.write_text("".join(f"{i}\n" for i in selected))
    report_path = Path(args.report)
    report_path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    write_manifest(ids_path, "subset", {"source": str(args.source),
                                        "reference": str(args.reference)},
                   args.seed, [args.source, args.reference],
                   [ids_path, report_path], started)
    print(f"selected {len(selected)} images")
    return 0


def _draw_outline(img: np.ndarray, box: BBox, color) -> None:
    rows, cols = box_pixel_slices(box, img.shape[1], img.shape[0])
    img[rows.start:rows.stop, cols.start] = color
    img[rows.start:rows.stop, max(cols.stop - 1, cols.start)] = color
    img[rows.start, cols.start:cols.stop] = color
    img[max(rows.stop - 1, rows.start), cols.start:cols.stop] = color


def cmd_augment_preview(args) -> int:
    from PIL import Image

    started = _now()
    spec = data_mod.SceneSpec(canvas_size=args.canvas,
                              object_count=(args.objects, args.objects))
    scene = data_mod.synth_scene(keyed_rng(args.seed, 11, 0, 0), spec, "preview")
    boxes = [b for b, _ in scene.objects]
    aug = AugConfig()
    cut, cut_records = prc(scene.image, boxes, keyed_rng(args.seed, 11, 1, 0), aug)
    masked, prm_records = prm(cut, boxes, keyed_rng(args.seed, 11, 2, 0), aug)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    panels = []
    for im in (scene.image, cut, masked):
        shown = im.copy()
        for b in boxes:
            _draw_outline(shown, b, (1.0, 1.0, 1.0))
        panels.append(shown)
    gap = np.full((args.canvas, 2, 3), 0.5, dtype=np.float32)
    strip = np.concatenate([panels[0], gap, panels[1], gap, panels[2]], axis=1)
    panel_path = out_dir / "panel.png"
    Image.fromarray(np.clip(np.round(strip * 255), 0, 255).astype(np.uint8)) \
        .save(panel_path)
    sidecar = {"cutout_records": [r.to_json() for r in cut_records],
               "prm_records": [r.to_json() for r in prm_records],
               "proposals": [list(b.as_tuple()) for b in boxes]}
    sidecar_path = out_dir / "aug_records.json"
    sidecar_path.write_text(json.dumps(sidecar, indent=2) + "\n")
    write_manifest(out_dir, "augment-preview",
                   {"canvas": args.canvas, "objects": args.objects},
                   args.seed, [], [panel_path, sidecar_path], started)
    print(panel_path)
    return 0


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="regionssl",
                     description="Region-level dense SSL laboratory")
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("pretrain", help="run the pretraining loop")
    p.add_argument("--config", default=None, help="key = value config file")
    p.add_argument("--data", required=True,
                   help="dataset dir (annotations.json) or synth:... spec")
    p.add_argument("--proposals", default=None, help="proposal JSONL file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--deterministic", action="store_true",
                   help="force single-worker execution")

    for name, metric in (("probe-coupling", "coupling_rate"),
                         ("probe-position", "mcs")):
        p = sub.add_parser(name, help=f"run the {name.split('-')[1]} probe")
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--stages", default="C1,C2,C3,C4,C5")
        p.add_argument("--fixtures", type=int, default=24,
                       help="number of synthetic fixture pairs/patches")
        p.add_argument("--patch-size", type=int, default=64)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", required=True, help="report JSON path")
        p.add_argument("--plot", action="store_true",
                       help="also write a per-stage line chart PNG")
        p.set_defaults(metric=metric)

    p = sub.add_parser("oknn", help="object-level kNN evaluation")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--train-ann", required=True)
    p.add_argument("--eval-ann", required=True)
    p.add_argument("--disturbed", action="store_true")
    p.add_argument("--k", type=int, default=20)
    p.add_argument("--n", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="results JSON path")

    p = sub.add_parser("subset", help="reference-capped subset selection")
    p.add_argument("--source", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="selected ids, one per line")
    p.add_argument("--report", required=True, help="per-class counts JSON")

    p = sub.add_parser("augment-preview", help="render augmentation panels")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--canvas", type=int, default=128)
    p.add_argument("--objects", type=int, default=4)
    p.add_argument("--out", required=True, help="output directory")
    return parser


def dispatch(argv) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help()
        return 0
    try:
        if args.command == "pretrain":
            return cmd_pretrain(args)
        if args.command in ("probe-coupling", "probe-position"):
            return cmd_probe(args, args.metric)
        if args.command == "oknn":
            return cmd_oknn(args)
        if args.command == "subset":
            return cmd_subset(args)
        if args.command == "augment-preview":
            return cmd_augment_preview(args)
        raise UnknownCommand(f"unknown command {args.command!r}")
    except _VALIDATION_ERRORS as e:
        print(f"regionssl {args.command}: {e}", file=sys.stderr)
        return 1
    except RegionSSLError as e:
        print(f"regionssl {args.command}: {e}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
