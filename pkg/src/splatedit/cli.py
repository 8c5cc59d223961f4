"""Command-line entry point.

Every subcommand reads an optional ``--config`` JSON file; any flag given on
the command line overrides the corresponding config value. ``run`` executes
all stages, the other stage commands execute only their own stage (which
requires the earlier stages to have completed in the same workdir).
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
import typing
from pathlib import Path

from .errors import SplatEditError
from .pipeline import STAGES, PipelineConfig, read_manifest, run_pipeline

_HELP = {
    "workdir": "directory receiving all stage artifacts",
    "cameras": "camera JSON; an orbit of --n-views cameras is used when absent",
    "mode": "add (needs --bbox) or replace (needs --masks)",
    "T": "translation/selection rounds (default 2; 0 skips selection)",
    "k": "number of key views",
    "patch": "token patch size in pixels",
    "weighting": "key-view weighting by camera distance: direct or inverse",
    "translator": "identity, recolor (scripted) or external (directory protocol)",
    "lr": "Adam learning rate (default 0.001)",
    "iters": "fine-tuning epochs over all views",
    "lambda_mae": "weight of the mean absolute error",
    "lambda_perceptual": "weight of the D-SSIM term",
    "workers": "threads for row-band rendering (results do not depend on it)",
}


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON config file")
    hints = typing.get_type_hints(PipelineConfig)
    for f in dataclasses.fields(PipelineConfig):
        flag = "--" + f.name.replace("_", "-")
        hint = str(hints[f.name])
        kwargs: dict = {"dest": f.name, "default": None, "help": _HELP.get(f.name)}
        if "list" in hint:
            kwargs.update(type=float, nargs=3, metavar=("X", "Y", "Z"))
        elif "int" in hint:
            kwargs["type"] = int
        elif "float" in hint:
            kwargs["type"] = float
        p.add_argument(flag, **kwargs)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="splatedit",
                                     description="Reference-image driven editing of Gaussian splat scenes.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in [("integrate", "insert the asset into the source scene"),
                       ("render", "render color, depth and asset masks for every view"),
                       ("select", "translate renders and grow the training set"),
                       ("harmonize", "make guidance candidates consistent across views"),
                       ("finetune", "fit the edited scene to the guidance images"),
                       ("run", "run every stage in order")]:
        _add_config_flags(sub.add_parser(name, help=text))
    demo = sub.add_parser("demo", help="write synthetic demo inputs and a config")
    demo.add_argument("outdir", type=Path)
    demo.add_argument("--seed", type=int, default=0)
    demo.add_argument("--views", type=int, default=8)
    demo.add_argument("--size", type=int, default=64)
    demo.add_argument("--run", action="store_true", help="also run the pipeline on the demo config")
    return parser


def config_from_args(args: argparse.Namespace) -> PipelineConfig:
    base = PipelineConfig.from_file(args.config) if args.config else PipelineConfig()
    overrides = {f.name: getattr(args, f.name) for f in dataclasses.fields(PipelineConfig)}
    for key, value in overrides.items():
        if isinstance(value, list):
            overrides[key] = [float(v) for v in value]
    return base.with_overrides(**overrides)


def _progress(stage: str, status: str) -> None:
    print(f"{stage}: {status}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "demo":
            from .demo import write_demo
            path = write_demo(args.outdir, args.seed, args.views, args.size)
            print(f"wrote {path}")
            if not args.run:
                return 0
            config = PipelineConfig.from_file(path)
            stages = STAGES
        else:
            config = config_from_args(args)
            stages = STAGES if args.command == "run" else (args.command,)
        run_pipeline(config, stages, _progress)
    except SplatEditError as exc:
        where = ""
        for stage in STAGES:
            m = read_manifest(Path(config.workdir) / stage) if "config" in locals() else None
            if m is not None and m.get("status") == "failed":
                where = f" (stage {stage!r} failed; see its manifest)"
        print(f"error: {exc}{where}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
