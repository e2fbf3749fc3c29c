"""Command-line entry point.

    splatmesh <subcommand> --config <file> [--seed N] [--scale F] ...

Exit codes: 0 ok, 1 validation error (config/arguments), 2 runtime failure.
"""

from __future__ import annotations

import argparse
import sys
import traceback

from .config import PipelineConfig, ConfigError


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="splatmesh",
                                description="Triangle-bound Gaussian splat fitting, "
                                            "mesh refinement, lighting, and de-lit textures")
    p.add_argument("command",
                   choices=["synth", "fit", "refine-mesh", "lighting", "texture",
                            "bake-uv", "render", "gradcheck"])
    p.add_argument("--config", required=True, help="pipeline config JSON")
    p.add_argument("--seed", type=int, default=None, help="override config seed")
    p.add_argument("--scale", type=float, default=None,
                   help="override schedule scale (iteration counts)")
    p.add_argument("--ckpt", default=None, help="checkpoint path (render)")
    p.add_argument("--camera", type=int, default=0, help="camera index (render)")
    p.add_argument("--mode", default="world", choices=["world", "uvw", "sum2d"],
                   help="render mode")
    p.add_argument("--out-name", default="render", help="output dir name (render)")
    p.add_argument("--corrupt", default=None,
                   help="gradcheck: inject a gradient bug into the named loss")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = PipelineConfig.load(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.scale is not None:
            cfg.schedule_scale = args.scale
        if args.command == "render" and not args.ckpt:
            raise ConfigError("render requires --ckpt")
    except (ConfigError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1

    from . import pipeline as P
    try:
        if args.command == "synth":
            P.stage_synth(cfg)
        elif args.command == "fit":
            P.stage_fit(cfg)
        elif args.command == "refine-mesh":
            P.stage_refine_mesh(cfg)
        elif args.command == "lighting":
            P.stage_lighting(cfg)
        elif args.command == "texture":
            P.stage_texture(cfg)
        elif args.command == "bake-uv":
            P.stage_bake_uv(cfg)
        elif args.command == "render":
            P.stage_render(cfg, args.ckpt, args.camera, args.mode, args.out_name)
        elif args.command == "gradcheck":
            if not P.stage_gradcheck(cfg, corrupt=args.corrupt):
                print("gradcheck FAILED", file=sys.stderr)
                return 2
    except P.PipelineError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception:
        traceback.print_exc()
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
