"""CLI: hf-exporter export --model <id> --prompts <file> --layers all
--tag forget --out <path.ulns> [--logprobs <csv>] [--pooling final|mean]"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .export import ExportError, ExportManifest, run_export


def _parse_layers(raw: str):
    if raw == "all":
        return "all"
    try:
        return tuple(int(part) for part in raw.split(",") if part.strip())
    except ValueError as err:
        raise ExportError(f"--layers must be 'all' or comma-separated indices: {err}") from err


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hf-exporter",
        description="Export transformer hidden states and token log-probs as ULNS dumps",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    export = sub.add_parser("export", help="run prompts through a model and dump activations")
    export.add_argument("--model", required=True, help="model identifier or local path")
    export.add_argument("--prompts", required=True, help="text file, one prompt per line")
    export.add_argument("--layers", default="all", help="'all' or comma-separated indices")
    export.add_argument("--tag", default="forget", choices=["forget", "retain", "unrelated"])
    export.add_argument("--out", required=True, help="output .ulns path")
    export.add_argument("--logprobs", default=None, help="sidecar CSV path (default: <out>.logprobs.csv)")
    export.add_argument("--pooling", default="final", choices=["final", "mean"])
    export.add_argument("--device", default="cpu")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    try:
        manifest = ExportManifest(
            model_id=args.model,
            prompts_path=Path(args.prompts),
            out_path=Path(args.out),
            tag=args.tag,
            layers=_parse_layers(args.layers),
            logprobs_path=None if args.logprobs is None else Path(args.logprobs),
            pooling=args.pooling,
            device=args.device,
        )
        dump, sidecar = run_export(manifest)
    except ExportError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    print(f"wrote {dump} and {sidecar}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
