"""Exporter CLI.

Exit codes: 0 success, 2 input error, 4 model unavailable, 5 shape drift
against an existing manifest.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .backbone import BackboneUnavailable, load_backbone
from .exporter import ShapeDriftError, export

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_MODEL = 4
EXIT_DRIFT = 5


def cmd_export(args) -> int:
    in_dir = Path(args.in_dir)
    if not in_dir.is_dir():
        raise ValueError(f"input directory not found: {in_dir}")
    images = sorted(in_dir.glob("*.png")) + sorted(in_dir.glob("*.jpg"))
    if not images:
        raise ValueError(f"{in_dir}: no PNG/JPG images")
    backbone = load_backbone(args.variant, args.backbone)
    manifest = export(images, variant=args.variant, out_dir=args.out,
                      backbone=backbone)
    print(f"exported {len(manifest.views)} views ({manifest.variant}, "
          f"layers {manifest.layer_ids}) to {args.out}")
    print(f"manifest hash {manifest.manifest_hash}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="monosplat-export",
        description="Export pretrained monocular backbone features to MTF files",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("export", help="run the backbone over a directory of images")
    p.add_argument("--variant", choices=("s", "b", "l"), default="s")
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--backbone", default="pretrained",
                   help="'pretrained' (default) or 'stub[:seed]' for offline runs")
    p.set_defaults(func=cmd_export)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except BackboneUnavailable as exc:
        print(f"model unavailable: {exc}", file=sys.stderr)
        return EXIT_MODEL
    except ShapeDriftError as exc:
        print(f"shape drift: {exc}", file=sys.stderr)
        return EXIT_DRIFT
    except (ValueError, OSError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
