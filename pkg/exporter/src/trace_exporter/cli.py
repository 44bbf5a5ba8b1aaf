"""Command-line entry point: run an export job from flags or a job manifest.

The manifest is plain text, one ``key = value`` per line ('#' comments):

    model = ./checkpoints/tiny
    inputs = inputs.jsonl
    out_dir = traces
    top_m = 256          # or "dense"
    max_new_tokens = 32
    base_model = ./checkpoints/tiny-base   # optional: paired export
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .export import ExportError, ExportJob, export, load_inputs

_KEYS = {"model", "inputs", "out_dir", "top_m", "max_new_tokens", "base_model", "device"}


def parse_job_manifest(path: str | Path) -> dict[str, str]:
    values: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ExportError(f"{path}:{lineno}: expected 'key = value'")
            key, _, value = line.partition("=")
            key = key.strip()
            if key not in _KEYS:
                raise ExportError(f"{path}:{lineno}: unknown key {key!r}")
            values[key] = value.strip()
    return values


def build_job(args: argparse.Namespace) -> ExportJob:
    values: dict[str, str] = {}
    if args.job:
        values = parse_job_manifest(args.job)
    model = args.model or values.get("model")
    inputs_path = args.inputs or values.get("inputs")
    out_dir = args.out_dir or values.get("out_dir")
    if not model or not inputs_path or not out_dir:
        raise ExportError("model, inputs, and out_dir are required (flags or job manifest)")
    top_m_raw = args.top_m or values.get("top_m", "256")
    top_m = None if top_m_raw.lower() == "dense" else int(top_m_raw)
    return ExportJob(
        model=model,
        inputs=load_inputs(inputs_path),
        out_dir=out_dir,
        top_m=top_m,
        max_new_tokens=int(args.max_new_tokens or values.get("max_new_tokens", "32")),
        base_model=args.base_model or values.get("base_model"),
        device=args.device or values.get("device", "cpu"),
    )


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="trace-export", description=__doc__)
    parser.add_argument("--job", help="job manifest file")
    parser.add_argument("--model")
    parser.add_argument("--inputs", help="JSONL of {id?, prompt, image?, response?}")
    parser.add_argument("--out-dir")
    parser.add_argument("--top-m", help="sparsity (integer) or 'dense'")
    parser.add_argument("--max-new-tokens")
    parser.add_argument("--base-model", help="also export a base-model trace per input")
    parser.add_argument("--device")
    args = parser.parse_args(argv)
    try:
        written = export(build_job(args))
    except (ExportError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    for path in written:
        print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
