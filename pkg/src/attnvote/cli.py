"""Command line: gen, train, eval, bench, dump-votes.

Exit status is 0 on success, 2 on a usage error and 1 when the command fails.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from .attention import ATTENTION_KINDS, REGISTRY


def _floats(text: str) -> List[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> List[int]:
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not vals or min(vals) < 1:
        raise argparse.ArgumentTypeError("values must be positive")
    return vals


def _range(text: str):
    vals = _ints(text) if text != "0" else [0]
    if len(vals) == 1:
        return vals[0], vals[0]
    if len(vals) != 2 or vals[0] > vals[1]:
        raise argparse.ArgumentTypeError("expected N or MIN,MAX")
    return vals[0], vals[1]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="attnvote", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="synthesize a dataset of scenes")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--scenes", type=int, default=16)
    g.add_argument("--out", type=Path, required=True)
    g.add_argument("--objects", type=_range, default=None, help="object count N or MIN,MAX")
    g.add_argument("--room", type=_floats, default=None, help="room size W,L,H in meters")
    g.add_argument("--density", type=float, default=None, help="surface points per square meter")
    g.add_argument("--clutter", type=float, default=None, help="clutter fraction in [0, 1)")

    t = sub.add_parser("train", help="train a detector")
    t.add_argument("--data", type=Path, required=True)
    t.add_argument("--out", type=Path, required=True, help="model directory to write")
    t.add_argument("--config", type=Path, default=None, help="key = value config file")
    t.add_argument("--profile", choices=("toy", "full"), default="toy")
    t.add_argument("--attention", choices=ATTENTION_KINDS, default=None)
    t.add_argument("--epochs", type=int, default=1)
    t.add_argument("--steps", type=int, default=None, help="overrides --epochs")
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--batch-size", type=int, default=8)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--class-weight", type=float, default=None, help="weight of the classification loss term")

    e = sub.add_parser("eval", help="evaluate a model or saved detections")
    e.add_argument("--data", type=Path, required=True)
    src = e.add_mutually_exclusive_group(required=True)
    src.add_argument("--model", type=Path)
    src.add_argument("--dets", type=Path, help="directory of <scene>.det files")
    e.add_argument("--iou", type=_floats, default=[0.25, 0.5])
    e.add_argument("--out", type=Path, default=None, help="also write the table here")
    e.add_argument("--save-dets", type=Path, default=None)

    b = sub.add_parser("bench", help="attention latency / allocation benchmark")
    b.add_argument("--attention", default="nonlocal,se,cbam",
                   help=f"comma list of kinds or 'all' ({', '.join(sorted(REGISTRY))})")
    b.add_argument("--n-list", type=_ints, default=[512, 1024])
    b.add_argument("--c", type=int, default=256)
    b.add_argument("--repetitions", type=int, default=20)

    d = sub.add_parser("dump-votes", help="write seeds, votes and GT of one scene to PLY")
    d.add_argument("--model", type=Path, required=True)
    d.add_argument("--scene", type=Path, required=True)
    d.add_argument("--out", type=Path, required=True)
    return p


def _cmd_gen(args) -> int:
    from .scene import SceneSpec, generate_scene, save_dataset

    spec = SceneSpec()
    if args.objects is not None:
        spec.object_count = args.objects
    if args.room is not None:
        if len(args.room) != 3:
            raise ValueError("--room takes W,L,H")
        spec.room_size = tuple(args.room)
    if args.density is not None:
        spec.density = args.density
    if args.clutter is not None:
        spec.clutter_fraction = args.clutter
    scenes = [generate_scene(args.seed * 1_000_003 + i, spec, scene_id=f"scene_{i:04d}")
              for i in range(args.scenes)]
    save_dataset(scenes, args.out)
    print(f"wrote {len(scenes)} scenes to {args.out}")
    return 0


def _cmd_train(args) -> int:
    from .model import DetectorConfig, VoteDetector, load_config
    from .scene import load_dataset
    from .head import LossWeights
    from .train import TrainConfig, fit

    base = DetectorConfig.toy() if args.profile == "toy" else DetectorConfig()
    cfg = load_config(args.config, base) if args.config else base
    if args.attention is not None:
        cfg.backbone.attention = args.attention
        cfg.backbone.validate()
    scenes = load_dataset(args.data)
    steps = args.steps if args.steps is not None else args.epochs * math.ceil(len(scenes) / args.batch_size)
    weights = LossWeights() if args.class_weight is None else LossWeights(classification=args.class_weight)
    model = VoteDetector(cfg, seed=args.seed)
    history = fit(model, scenes, TrainConfig(steps=steps, lr=args.lr, batch_size=args.batch_size,
                                             seed=args.seed, log_every=10,
                                             loss_weights=weights))
    model.save(args.out)
    if history:
        last = history[-1]
        print(f"trained {steps} steps; final loss {last['total']:.4f} (vote {last['vote']:.4f})")
    print(f"saved model to {args.out}")
    return 0


def _cmd_eval(args) -> int:
    from .metrics import evaluate
    from .scene import load_dataset, load_detections, save_detections

    scenes = load_dataset(args.data)
    if args.model is not None:
        from .model import VoteDetector
        from .train import predict
        dets = predict(VoteDetector.load(args.model), scenes)
    else:
        dets = []
        for s in scenes:
            f = args.dets / f"{s.scene_id}.det"
            dets.append(load_detections(f) if f.exists() else [])
    if args.save_dets is not None:
        args.save_dets.mkdir(parents=True, exist_ok=True)
        for s, d in zip(scenes, dets):
            save_detections(d, args.save_dets / f"{s.scene_id}.det")
    report = evaluate(dets, [list(zip(s.boxes, s.labels)) for s in scenes], args.iou, scenes[0].classes)
    table = report.to_table()
    sys.stdout.write(table)
    if args.out is not None:
        args.out.write_text(table)
    return 0


def _cmd_bench(args) -> int:
    from .bench import HEADER, bench_attention

    kinds = sorted(REGISTRY) if args.attention == "all" else [k for k in args.attention.split(",") if k]
    unknown = [k for k in kinds if k not in REGISTRY]
    if unknown:
        raise ValueError(f"unknown attention kind(s): {', '.join(unknown)}")
    print(HEADER)
    for kind in kinds:
        for rec in bench_attention(kind, args.n_list, args.c, args.repetitions):
            print(rec.row(), flush=True)
    return 0


def _cmd_dump(args) -> int:
    from .dump import dump_votes
    from .model import VoteDetector
    from .scene import load_scene

    dist = dump_votes(VoteDetector.load(args.model), load_scene(args.scene), args.out)
    print(f"mean vote-to-centroid distance: {dist:.4f} m")
    print(f"wrote {args.out}")
    return 0


_COMMANDS = {"gen": _cmd_gen, "train": _cmd_train, "eval": _cmd_eval, "bench": _cmd_bench,
             "dump-votes": _cmd_dump}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse has already printed usage to stderr
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return _COMMANDS[args.command](args)
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"attnvote {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
