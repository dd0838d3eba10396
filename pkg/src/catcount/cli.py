"""``catcount`` command line: gen, train, infer, eval, export-pgm.

Every failure ends with one JSON line on stderr, ``{"error": kind, "message": ...}``.
Usage and configuration errors exit with status 2, runtime failures with 1.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from .config import Config, ConfigError, desk_profile, load_config
from .density import read_map, write_map, write_pgm
from .phase1 import read_keypoints
from .pipeline import SPLIT_FILE, Bundle, MissingArtifactError, infer, require
from .synth import Corpus, SceneConfig, corpus_checksum, generate_corpus, read_image
from .tensor import precision
from .training import PHASES, DatasetSplit, run_phase


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _fail(kind: str, message: str, status: int) -> int:
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)
    return status


def _config(args) -> Config:
    base = desk_profile() if args.profile == "desk" else Config()
    cfg = load_config(args.config, base)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


def cmd_gen(args) -> int:
    seed = args.seed if args.seed is not None else 0
    scene = SceneConfig(
        image_size=tuple(args.size),
        count_range=(args.count_min, args.count_max),
        sitting_fraction=args.sitting_fraction,
        occlusion=args.occlusion,
        person_height=tuple(args.person_height),
        layout=args.layout,
    )
    generate_corpus(args.out, args.scenes, scene, seed)
    print(json.dumps({"corpus": str(args.out), "scenes": args.scenes, "checksum": corpus_checksum(args.out)}))
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    result = run_phase(args.phase, Corpus(args.corpus), args.out, cfg, resume=args.resume)
    summary = {name: {"best_epoch": f.best_epoch, "best_metric": f.best_metric} for name, f in result.fits.items()}
    print(json.dumps({"phase": args.phase, "checkpoints": [str(p) for p in result.checkpoints], "fits": summary}))
    return 0


def cmd_infer(args) -> int:
    cfg = _config(args)
    image = read_image(args.image)
    records = read_keypoints(args.keypoints).records if args.keypoints else []
    with precision(cfg.precision):
        pred = infer(Bundle.load(args.model, cfg), image, records)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, m in (("crowd", pred.crowd), ("final_sit", pred.final_sit), ("final_stand", pred.final_stand)):
        write_map(out / f"{name}.ccdm", m)
    sit, stand = pred.counts
    d_sit, d_stand = pred.detection_counts
    counts = {"sitting": sit, "standing": stand, "detection_sitting": d_sit, "detection_standing": d_stand}
    (out / "counts.json").write_text(json.dumps(counts, indent=1, sort_keys=True) + "\n")
    print(json.dumps({"sitting": round(sit, 2), "standing": round(stand, 2)}))
    return 0


def cmd_eval(args) -> int:
    from .evaluate import evaluate, write_reports

    cfg = _config(args)
    split = DatasetSplit.load(require(args.model, SPLIT_FILE))
    corpus = Corpus(args.corpus)
    if split.n != len(corpus):
        raise ValueError(f"split covers {split.n} scenes but the corpus has {len(corpus)}")
    indices = split.test if args.subset == "test" else split.validation
    if not indices:
        raise ValueError(f"the {args.subset} split is empty")
    with precision(cfg.precision):
        reports = evaluate(Bundle.load(args.model, cfg), corpus, indices)
    jpath, cpath = write_reports(args.out, reports)
    brief = {m: {c: round(v["mae"], 3) for c, v in r.category.items()} for m, r in reports.items()}
    print(json.dumps({"report": str(jpath), "csv": str(cpath), "mae": brief}))
    return 0


def cmd_export_pgm(args) -> int:
    write_pgm(args.out, read_map(args.map).grid)
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="TOML file overriding the defaults")
    common.add_argument("--seed", type=int, help="random seed (overrides the config)")
    common.add_argument("--out", required=True, help="output file or directory")
    common.add_argument(
        "--profile",
        choices=("published", "desk"),
        default="desk",
        help="built-in defaults: full-length schedules or reduced desk-scale ones (default)",
    )

    parser = _Parser(prog="catcount", description="Categorised (sitting/standing) crowd counting.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", parents=[common], help="generate a synthetic corpus")
    g.add_argument("--scenes", type=int, required=True)
    g.add_argument("--size", type=int, nargs=2, default=(64, 64), metavar=("H", "W"))
    g.add_argument("--count-min", type=int, default=1)
    g.add_argument("--count-max", type=int, default=10)
    g.add_argument("--sitting-fraction", type=float, default=0.5)
    g.add_argument("--occlusion", type=float, default=0.0)
    g.add_argument("--person-height", type=float, nargs=2, default=(18.0, 24.0), metavar=("MIN", "MAX"))
    g.add_argument("--layout", choices=("mixed", "split"), default="mixed")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", parents=[common], help="train one step; --out is the model directory")
    t.add_argument("--phase", choices=PHASES, required=True)
    t.add_argument("--corpus", required=True)
    t.add_argument("--resume", action="store_true", help="continue from the saved optimiser state")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", parents=[common], help="count one image; --out receives maps and counts")
    i.add_argument("--model", required=True)
    i.add_argument("--image", required=True)
    i.add_argument("--keypoints", help="keypoint JSON; omitted means no detections")
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", parents=[common], help="evaluate both counting modes; --out receives the report")
    e.add_argument("--model", required=True)
    e.add_argument("--corpus", required=True)
    e.add_argument("--subset", choices=("test", "validation"), default="test")
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("export-pgm", parents=[common], help="write a density map as an 8-bit PGM image")
    x.add_argument("--map", required=True)
    x.set_defaults(func=cmd_export_pgm)
    return parser


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return _fail("usage", str(exc), 2)
    try:
        return args.func(args)
    except ConfigError as exc:
        return _fail("config", str(exc), 2)
    except MissingArtifactError as exc:
        return _fail("missing_artifact", str(exc), 1)
    except (OSError, ValueError, KeyError) as exc:
        return _fail(type(exc).__name__, str(exc), 1)


if __name__ == "__main__":
    sys.exit(main())
