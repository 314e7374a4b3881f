"""`export_graph` command line: ONNX model in, planner graph JSON out.

Exit codes mirror the planner CLI: 2 for configuration, parse, and I/O
problems, 1 for conversion failures, with a JSON error object on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .convert import UnsupportedModel, export_graph
from .model import ModelParseError


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="export_graph",
        description="Convert an ONNX model file into the sharding planner's "
        "JSON graph format.",
    )
    parser.add_argument("model", help="path to a .onnx model file")
    parser.add_argument("--out", "-o", help="output path (default: stdout)")
    parser.add_argument("--batch", type=int,
                        help="substitute for a symbolic leading batch dimension")
    return parser


def _error(kind: str, message: str, code: int) -> int:
    json.dump({"error": {"kind": kind, "message": message}}, sys.stderr)
    sys.stderr.write("\n")
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.batch is not None and args.batch < 1:
        return _error("config", f"--batch must be positive, got {args.batch}", 2)
    try:
        data = Path(args.model).read_bytes()
    except OSError as exc:
        return _error("io", f"cannot read {args.model}: {exc.strerror or exc}", 2)
    try:
        doc, report = export_graph(data, batch=args.batch)
    except ModelParseError as exc:
        return _error("parse", str(exc), 2)
    except UnsupportedModel as exc:
        return _error("unsupported", str(exc), 1)
    for warning in report.warnings:
        print(f"warning: {warning}", file=sys.stderr)
    print(
        f"converted {len(doc['nodes'])} nodes: {report.trainable_elements} "
        f"trainable elements, {report.skipped_elements} skipped",
        file=sys.stderr,
    )
    text = json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n"
    if args.out:
        try:
            Path(args.out).write_bytes(text.encode("utf-8"))
        except OSError as exc:
            return _error("io", f"cannot write {args.out}: {exc.strerror or exc}", 2)
    else:
        sys.stdout.write(text)
    return 0


if __name__ == "__main__":
    sys.exit(main())
