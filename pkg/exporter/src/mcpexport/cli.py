"""Command-line exporter: image folder in, embedding stream out."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .export import ExportSpec, export
from .templates import DATASET_TEMPLATES, DEFAULT_TEMPLATES, load_templates


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mcpexport",
        description="Encode a class-per-subdirectory image folder into an "
        "embedding stream",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("export", help="encode a folder and write a stream file")
    p.add_argument("--root", required=True, help="image root, one subdirectory per class")
    p.add_argument("--templates", default=None, help="file with one {CLASS} template per line")
    p.add_argument(
        "--dataset",
        default=None,
        choices=sorted(DATASET_TEMPLATES),
        help="use the bundled templates for a known dataset",
    )
    p.add_argument("--encoder", default="toy:64", help="toy[:dim] or clip:<model-or-path>")
    p.add_argument("--views", type=int, default=32, help="views per image incl. the original")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    if args.templates and args.dataset:
        print("use either --templates or --dataset, not both", file=sys.stderr)
        return 2
    if args.templates:
        templates = load_templates(args.templates)
    elif args.dataset:
        templates = DATASET_TEMPLATES[args.dataset]
    else:
        templates = list(DEFAULT_TEMPLATES)
    try:
        spec = ExportSpec(
            root=args.root,
            out=args.out,
            templates=templates,
            encoder=args.encoder,
            views_per_image=args.views,
            seed=args.seed,
        )
        report = export(spec)
    except (ValueError, RuntimeError, OSError) as e:
        print(f"export failed: {e}", file=sys.stderr)
        return 3
    json.dump(
        {
            "out": args.out,
            "classes": report.classes,
            "records": report.records,
            "skipped": report.skipped,
            "dim": report.dim,
        },
        sys.stdout,
        indent=2,
    )
    sys.stdout.write("\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
