"""Command-line surface: decode, describe, rank, stats, and classify.

Every run emits a manifest next to its outputs with the resolved
configuration, backend descriptors, seed and wall time, so deterministic
backends can reproduce the run bit-exactly. Output files are never
overwritten without --force. Analysis commands write tab-separated data and,
unless --no-figure is passed, a rendered PNG alongside.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import dataclasses
import json
import os
import sys
import time
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .backends import (
    Backend,
    BackendError,
    HttpBackend,
    ToyBackend,
    load_toy_spec,
    load_trace,
)
from .decoding import (
    DecodeConfig,
    DecodeError,
    SamplerConfig,
    TruncationConfig,
    decode,
    default_describe_template,
    generate_description,
    load_decode_config,
)
from .dist import DistributionError, LogitStats, truncate_alpha, truncate_elbow
from .hallucination import (
    AnnotationError,
    StubRetrievalProvider,
    categorize_all,
    load_annotations,
)
from .ranks import BaseRankRecord, RankThresholds, base_rank_trace, rank_curve

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_BACKEND = 3

ENV_HTTP_URL = "VDGD_BACKEND_URL"


class CliError(ValueError):
    """Input-validation failure surfaced as exit code 2."""


def make_backend(descriptor: str) -> Backend:
    """Build a backend from ``toy:PATH``, ``trace:PATH``, or ``http[:URL]``
    (URL defaulting to $VDGD_BACKEND_URL)."""
    kind, _, arg = descriptor.partition(":")
    if kind == "toy":
        if not arg:
            raise CliError("toy backend needs a spec path: toy:PATH")
        return ToyBackend(load_toy_spec(arg))
    if kind == "trace":
        if not arg:
            raise CliError("trace backend needs a file path: trace:PATH")
        return load_trace(arg)
    if kind == "http":
        url = arg or os.environ.get(ENV_HTTP_URL, "")
        if not url:
            raise CliError(f"http backend needs a URL (http:URL or ${ENV_HTTP_URL})")
        return HttpBackend(url)
    raise CliError(f"unknown backend descriptor {descriptor!r} (expected toy:, trace:, or http:)")


def ensure_writable(path: Path, force: bool) -> Path:
    if path.exists() and not force:
        raise CliError(f"refusing to overwrite {path} (pass --force)")
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def fmt(x: float) -> str:
    return f"{x:.12g}"


def config_to_dict(cfg: DecodeConfig) -> dict:
    raw = dataclasses.asdict(cfg)
    raw["stop_tokens"] = sorted(cfg.stop_tokens) if cfg.stop_tokens is not None else None
    return raw


def write_manifest(
    path: Path | None,
    subcommand: str,
    config: dict,
    backends: list[str],
    inputs: list[str],
    outputs: list[str],
    seed: int,
    started: float,
) -> None:
    """Emit the run manifest: to a file next to the outputs, or (for runs
    with no file outputs) as one JSON line on stderr."""
    manifest = {
        "subcommand": subcommand,
        "config": config,
        "backends": backends,
        "inputs": inputs,
        "outputs": outputs,
        "seed": seed,
        "wall_time_s": round(time.perf_counter() - started, 6),
        "version": __version__,
    }
    if path is None:
        print(f"manifest: {json.dumps(manifest, sort_keys=True)}", file=sys.stderr)
        return
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _read_token_source(
    backend: Backend, what: str, text: str | None, text_file: str | None, ids_file: str | None
) -> list[int]:
    given = [src for src in (text, text_file, ids_file) if src is not None]
    if len(given) != 1:
        raise CliError(f"supply exactly one of --{what}, --{what}-file, --{what}-ids-file")
    if ids_file is not None:
        content = Path(ids_file).read_text(encoding="utf-8")
        return [int(t) for t in content.split()]
    if text_file is not None:
        text = Path(text_file).read_text(encoding="utf-8").rstrip("\n")
    try:
        return backend.encode(text)
    except BackendError as exc:
        raise CliError(f"cannot encode --{what} text: {exc}; use --{what}-ids-file instead") from exc


def render_tokens(backend: Backend, tokens: Sequence[int], stop: frozenset[int]) -> str:
    visible = [t for t in tokens if t not in stop]
    try:
        return backend.decode_tokens(visible)
    except BackendError:
        return " ".join(str(t) for t in visible)


def resolve_decode_config(args: argparse.Namespace) -> DecodeConfig:
    cfg = load_decode_config(args.config) if args.config else DecodeConfig()
    truncation = cfg.truncation
    if args.truncation is not None and args.alpha is not None and args.truncation == "elbow":
        print("warning: --alpha conflicts with --truncation elbow; elbow wins", file=sys.stderr)
        truncation = TruncationConfig(strategy="elbow", alpha=truncation.alpha)
    else:
        strategy = args.truncation or ("alpha" if args.alpha is not None else truncation.strategy)
        alpha = args.alpha if args.alpha is not None else truncation.alpha
        truncation = TruncationConfig(strategy=strategy, alpha=alpha)
    sampler = cfg.sampler
    sampler = SamplerConfig(
        kind=args.sampler or sampler.kind,
        top_p=args.top_p if args.top_p is not None else sampler.top_p,
        temperature=args.temperature if args.temperature is not None else sampler.temperature,
    )
    stop = cfg.stop_tokens
    if args.stop_tokens is not None:
        stop = frozenset(int(t) for t in args.stop_tokens.replace(",", " ").split())
    return DecodeConfig(
        truncation=truncation,
        grounding_positions=args.grounding_positions or cfg.grounding_positions,
        grounding_enabled=cfg.grounding_enabled if args.grounding_enabled is None else args.grounding_enabled,
        image_enabled=cfg.image_enabled if args.image_enabled is None else args.image_enabled,
        rescore_temperature=(
            args.rescore_temperature if args.rescore_temperature is not None else cfg.rescore_temperature
        ),
        sampler=sampler,
        max_tokens=args.max_tokens if args.max_tokens is not None else cfg.max_tokens,
        stop_tokens=stop,
        kl_floor=args.kl_floor if args.kl_floor is not None else cfg.kl_floor,
    )


def _resolve_truncate(args: argparse.Namespace):
    strategy = getattr(args, "truncation", None) or "elbow"
    alpha = getattr(args, "alpha", None)
    if strategy == "elbow":
        return truncate_elbow
    if strategy == "alpha":
        a = 0.1 if alpha is None else alpha
        return lambda d: truncate_alpha(d, a)
    raise CliError(f"unsupported truncation {strategy!r} here")


def _joiner_tokens(backend: Backend, joiner_text: str) -> tuple[int, ...]:
    if not joiner_text:
        return ()
    try:
        return tuple(backend.encode(joiner_text))
    except BackendError:
        return ()


# ---------------------------------------------------------------- decode


def cmd_decode(args: argparse.Namespace) -> int:
    started = time.perf_counter()
    backend = make_backend(args.backend)
    cfg = resolve_decode_config(args)
    rng = np.random.default_rng(args.seed)
    instruction = _read_token_source(
        backend, "instruction", args.instruction, args.instruction_file, args.instruction_ids_file
    )
    if args.describe_first:
        template = None
        if args.template_file:
            template_text = Path(args.template_file).read_text(encoding="utf-8")
        else:
            template_text = default_describe_template()
        try:
            template = backend.encode(template_text.strip())
        except BackendError:
            template = None
        description = generate_description(
            backend, args.image, cfg, template_tokens=template, rng=rng
        )
    else:
        if args.description is None and args.description_file is None and args.description_ids_file is None:
            if cfg.grounding_enabled:
                raise CliError(
                    "grounding needs a description: pass --description* or --describe-first"
                )
            description = []
        else:
            description = _read_token_source(
                backend, "description", args.description, args.description_file, args.description_ids_file
            )
    if description:
        joiner = _joiner_tokens(backend, args.joiner)
        response = decode(
            backend,
            description,
            instruction,
            image=args.image,
            cfg=cfg,
            joiner=joiner,
            diagnostics=args.diagnostics is not None,
            rng=rng,
        )
        tokens = response.tokens
        per_step = response.per_step
    else:
        # No description and grounding off: plain decode over the instruction.
        from .decoding import _plain_decode

        tokens = tuple(_plain_decode(backend, tuple(instruction), args.image, cfg, rng))
        per_step = None
    stop = cfg.stop_tokens if cfg.stop_tokens is not None else backend.capabilities().stop_tokens
    text = render_tokens(backend, tokens, stop)
    print(text)
    outputs = []
    if args.output:
        out = ensure_writable(Path(args.output), args.force)
        out.write_text(text + "\n", encoding="utf-8")
        outputs.append(str(out))
    if args.diagnostics is not None:
        diag_path = ensure_writable(Path(args.diagnostics), args.force)
        with open(diag_path, "w", encoding="utf-8") as fh:
            for i, step in enumerate(per_step or ()):
                fh.write(
                    json.dumps(
                        {
                            "step": i,
                            "candidates": step.candidates.entries(),
                            "grounding": None
                            if step.grounding is None
                            else {
                                "scores": step.grounding.scores_by_token(),
                                "argmin_position": {
                                    int(t): int(p)
                                    for t, p in zip(
                                        step.grounding.token_ids, step.grounding.argmin_position
                                    )
                                },
                            },
                            "sampled": step.sampled,
                            "rescored": [
                                [int(t), float(step.rescored[int(t)])]
                                for t in step.candidates.token_ids
                            ],
                        },
                        sort_keys=True,
                    )
                    + "\n"
                )
        outputs.append(str(diag_path))
    manifest_path = Path(args.output).with_suffix(".manifest.json") if args.output else None
    write_manifest(
        manifest_path,
        "decode",
        config_to_dict(cfg),
        [args.backend],
        [
            p
            for p in (
                args.instruction_file,
                args.instruction_ids_file,
                args.description_file,
                args.description_ids_file,
                args.config,
            )
            if p
        ],
        outputs,
        args.seed,
        started,
    )
    return EXIT_OK


def cmd_describe(args: argparse.Namespace) -> int:
    started = time.perf_counter()
    backend = make_backend(args.backend)
    cfg = resolve_decode_config(args)
    rng = np.random.default_rng(args.seed)
    template = None
    if args.template_file:
        template_text = Path(args.template_file).read_text(encoding="utf-8")
    else:
        template_text = default_describe_template()
    try:
        template = backend.encode(template_text.strip())
    except BackendError:
        template = None
    tokens = generate_description(backend, args.image, cfg, template_tokens=template, rng=rng)
    stop = cfg.stop_tokens if cfg.stop_tokens is not None else backend.capabilities().stop_tokens
    text = render_tokens(backend, tokens, stop)
    print(text)
    outputs = []
    manifest_path = None
    if args.output:
        out = ensure_writable(Path(args.output), args.force)
        out.write_text(text + "\n", encoding="utf-8")
        outputs.append(str(out))
        manifest_path = out.with_suffix(".manifest.json")
    write_manifest(
        manifest_path,
        "describe",
        config_to_dict(cfg),
        [args.backend],
        [args.template_file] if args.template_file else [],
        outputs,
        args.seed,
        started,
    )
    return EXIT_OK


# ---------------------------------------------------------------- rank


RANK_TRACE_HEADER = "# rank-trace v1"
RANK_CURVE_HEADER = "# rank-curve v1"


def write_rank_trace_tsv(path: Path, trace: Sequence[BaseRankRecord]) -> None:
    lines = [RANK_TRACE_HEADER, "# position\taligned_argmax\teta\tshift"]
    for rec in trace:
        lines.append(f"{rec.position}\t{rec.aligned_argmax}\t{rec.eta}\t{rec.shift}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_rank_trace_tsv(path: str | Path) -> list[BaseRankRecord]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        first = fh.readline().strip()
        if first != RANK_TRACE_HEADER:
            raise CliError(f"{path}: not a rank-trace file (header {first!r})")
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise CliError(f"{path}:{lineno}: expected 4 tab-separated fields")
            records.append(
                BaseRankRecord(
                    position=int(parts[0]),
                    aligned_argmax=int(parts[1]),
                    eta=int(parts[2]),
                    shift=parts[3],
                )
            )
    return records


def _load_sessions(path: str) -> list[dict]:
    sessions = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CliError(f"{path}:{lineno}: invalid JSON ({exc})") from exc
            for field in ("id", "instruction", "response"):
                if field not in record:
                    raise CliError(f"{path}:{lineno}: missing field {field!r}")
            sessions.append(record)
    return sessions


def cmd_rank(args: argparse.Namespace) -> int:
    started = time.perf_counter()
    aligned = make_backend(args.aligned)
    base = make_backend(args.base)
    thresholds = RankThresholds(marginal_upper=args.marginal_upper)
    sessions = _load_sessions(args.sessions)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    def run(session: dict) -> tuple[str, list[BaseRankRecord]]:
        trace = base_rank_trace(
            aligned,
            base,
            [int(t) for t in session["instruction"]],
            [int(t) for t in session["response"]],
            image=session.get("image"),
            thresholds=thresholds,
        )
        return str(session["id"]), trace

    if args.jobs > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(run, sessions))
    else:
        results = [run(s) for s in sessions]

    outputs = []
    for session_id, trace in results:
        trace_path = ensure_writable(out_dir / f"{session_id}.rank.tsv", args.force)
        write_rank_trace_tsv(trace_path, trace)
        outputs.append(str(trace_path))
    curve = rank_curve([trace for _, trace in results])
    curve_path = ensure_writable(out_dir / "curve.tsv", args.force)
    lines = [RANK_CURVE_HEADER, "# position\tmean_eta\tcount"]
    for position, mean_eta, count in curve.rows():
        lines.append(f"{position}\t{fmt(mean_eta)}\t{count}")
    curve_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    outputs.append(str(curve_path))
    if args.figure:
        from .figures import save_rank_curve_figure

        fig_path = ensure_writable(out_dir / "curve.png", args.force)
        save_rank_curve_figure(curve, fig_path)
        outputs.append(str(fig_path))
    write_manifest(
        out_dir / "manifest.json",
        "rank",
        {"marginal_upper": args.marginal_upper, "jobs": args.jobs},
        [args.aligned, args.base],
        [args.sessions],
        outputs,
        args.seed,
        started,
    )
    return EXIT_OK


# ---------------------------------------------------------------- stats


STATS_HEADER = "# logit-stats v1"


def _stats_for_annotation(backend: Backend, annotation_path: str, truncate) -> tuple[LogitStats | None, LogitStats | None]:
    ann = load_annotations(annotation_path)
    tokens = getattr(backend, "session", None)
    if tokens is None:
        raise CliError("stats requires a trace backend (trace:PATH)")
    recorded = backend.session.tokens
    response = ann.response_tokens
    prompt_len = len(recorded) - len(response)
    if prompt_len < 0 or recorded[prompt_len:] != response:
        raise CliError(
            f"{annotation_path}: response tokens are not a suffix of the recorded session"
        )
    from .ranks import stats_from_backend

    return stats_from_backend(
        backend,
        recorded[:prompt_len],
        response,
        halluc_spans=[p.token_span for p in ann.phrases],
        truncate=truncate,
        word_offsets=ann.word_offsets,
    )


def _combine_stats(parts: list[LogitStats]) -> LogitStats | None:
    parts = [p for p in parts if p is not None]
    if not parts:
        return None
    weights = np.array([p.n_sets for p in parts], dtype=np.float64)
    total = weights.sum()

    def avg(attr: str) -> float:
        return float(sum(getattr(p, attr) * w for p, w in zip(parts, weights)) / total)

    return LogitStats(
        k=avg("k"), variance=avg("variance"), range=avg("range"), avg=avg("avg"), n_sets=int(total)
    )


def cmd_stats(args: argparse.Namespace) -> int:
    started = time.perf_counter()
    truncate = _resolve_truncate(args)
    backends = [make_backend(d) for d in args.backend]
    if len(backends) == 1 and len(args.annotations) > 1:
        backends = backends * len(args.annotations)
    if len(backends) != len(args.annotations):
        raise CliError("--backend count must be 1 or match --annotations")

    def run(pair) -> tuple[LogitStats | None, LogitStats | None]:
        backend, annotation = pair
        return _stats_for_annotation(backend, annotation, truncate)

    pairs = list(zip(backends, args.annotations))
    if args.jobs > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(run, pairs))
    else:
        results = [run(p) for p in pairs]
    clean = _combine_stats([c for c, _ in results])
    halluc = _combine_stats([h for _, h in results])

    out = ensure_writable(Path(args.output), args.force)
    lines = [STATS_HEADER, "# population\tk\tvariance\trange\tavg\tn_tokens"]
    for label, stats in (("clean", clean), ("hallucinated", halluc)):
        if stats is None:
            lines.append(f"{label}\t-\t-\t-\t-\t0")
        else:
            lines.append(
                f"{label}\t{fmt(stats.k)}\t{fmt(stats.variance)}\t{fmt(stats.range)}"
                f"\t{fmt(stats.avg)}\t{stats.n_sets}"
            )
    out.write_text("\n".join(lines) + "\n", encoding="utf-8")
    outputs = [str(out)]
    if args.figure:
        from .figures import save_stats_figure

        fig_path = ensure_writable(out.with_suffix(".png"), args.force)
        save_stats_figure(clean, halluc, fig_path)
        outputs.append(str(fig_path))
    write_manifest(
        out.with_suffix(".manifest.json"),
        "stats",
        {"truncation": args.truncation or "elbow", "alpha": args.alpha, "jobs": args.jobs},
        list(args.backend),
        list(args.annotations),
        outputs,
        args.seed,
        started,
    )
    return EXIT_OK


# ---------------------------------------------------------------- classify


def cmd_classify(args: argparse.Namespace) -> int:
    started = time.perf_counter()
    if len(args.rank_trace) != len(args.annotations):
        raise CliError("--rank-trace count must match --annotations")
    provider = StubRetrievalProvider(args.retrieval)
    ks = [int(k) for k in args.k.replace(",", " ").split()]
    annotations = [load_annotations(p) for p in args.annotations]
    traces = [read_rank_trace_tsv(p) for p in args.rank_trace]
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = []
    for k in ks:
        def run(pair):
            ann, trace = pair
            return categorize_all(ann, trace, provider, k=k)

        pairs = list(zip(annotations, traces))
        if args.jobs > 1:
            with concurrent.futures.ThreadPoolExecutor(max_workers=args.jobs) as pool:
                reports = list(pool.map(run, pairs))
        else:
            reports = [run(p) for p in pairs]
        report_path = ensure_writable(out_dir / f"k{k}.report.json", args.force)
        report_path.write_text(
            json.dumps([r.to_json() for r in reports], indent=2, sort_keys=True) + "\n",
            encoding="utf-8",
        )
        outputs.append(str(report_path))
        totals = {c: sum(r.counts[c] for r in reports) for c in ("Language", "Vision", "Style", "IT")}
        skipped = sum(r.skipped for r in reports)
        errors = sum(r.errors for r in reports)
        counts_path = ensure_writable(out_dir / f"k{k}.counts.tsv", args.force)
        lines = ["# category-counts v1", "# category\tcount"]
        for cat, count in totals.items():
            lines.append(f"{cat}\t{count}")
        lines.append(f"Skipped\t{skipped}")
        lines.append(f"Errors\t{errors}")
        counts_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        outputs.append(str(counts_path))
        if args.figure:
            from .figures import save_category_figure

            fig_path = ensure_writable(out_dir / f"k{k}.counts.png", args.force)
            save_category_figure(totals, fig_path, skipped=skipped)
            outputs.append(str(fig_path))
    write_manifest(
        out_dir / "manifest.json",
        "classify",
        {"k": ks, "jobs": args.jobs},
        [],
        list(args.annotations) + list(args.rank_trace) + [args.retrieval],
        outputs,
        args.seed,
        started,
    )
    return EXIT_OK


# ---------------------------------------------------------------- parser


def _add_decode_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="DecodeConfig key=value file")
    parser.add_argument("--truncation", choices=("elbow", "alpha", "alpha_then_elbow"))
    parser.add_argument("--alpha", type=float)
    parser.add_argument("--grounding-positions", choices=("description_only", "full_prompt"))
    parser.add_argument(
        "--grounding-enabled",
        "--grounding",
        dest="grounding_enabled",
        action=argparse.BooleanOptionalAction,
        default=None,
    )
    parser.add_argument(
        "--image-enabled",
        dest="image_enabled",
        action=argparse.BooleanOptionalAction,
        default=None,
    )
    parser.add_argument("--rescore-temperature", type=float)
    parser.add_argument("--sampler", choices=("greedy", "multinomial"))
    parser.add_argument("--top-p", type=float)
    parser.add_argument("--temperature", type=float)
    parser.add_argument("--max-tokens", type=int)
    parser.add_argument("--stop-tokens", help="comma or space separated token ids")
    parser.add_argument("--kl-floor", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vdgd", description=__doc__)
    parser.add_argument("--version", action="version", version=f"vdgd {__version__}")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    common = dict(seed=0)

    p_decode = sub.add_parser("decode", help="grounded decode of an instruction")
    p_decode.add_argument("--backend", required=True)
    p_decode.add_argument("--instruction")
    p_decode.add_argument("--instruction-file")
    p_decode.add_argument("--instruction-ids-file")
    p_decode.add_argument("--description")
    p_decode.add_argument("--description-file")
    p_decode.add_argument("--description-ids-file")
    p_decode.add_argument("--describe-first", action="store_true")
    p_decode.add_argument("--template-file", help="description prompt template override")
    p_decode.add_argument("--image")
    p_decode.add_argument("--joiner", default="\n", help="text joining description and instruction")
    p_decode.add_argument("--diagnostics", help="write per-step candidate/grounding dump here")
    p_decode.add_argument("-o", "--output")
    p_decode.add_argument("--seed", type=int, default=common["seed"])
    p_decode.add_argument("--force", action="store_true")
    _add_decode_config_flags(p_decode)
    p_decode.set_defaults(func=cmd_decode)

    p_desc = sub.add_parser("describe", help="generate an image description")
    p_desc.add_argument("--backend", required=True)
    p_desc.add_argument("--image")
    p_desc.add_argument("--template-file")
    p_desc.add_argument("-o", "--output")
    p_desc.add_argument("--seed", type=int, default=common["seed"])
    p_desc.add_argument("--force", action="store_true")
    _add_decode_config_flags(p_desc)
    p_desc.set_defaults(func=cmd_describe)

    p_rank = sub.add_parser("rank", help="base-rank traces and positional curve")
    p_rank.add_argument("--aligned", required=True, help="aligned backend descriptor")
    p_rank.add_argument("--base", required=True, help="base backend descriptor")
    p_rank.add_argument("--sessions", required=True, help="JSONL of id/instruction/response records")
    p_rank.add_argument("--out-dir", required=True)
    p_rank.add_argument("--marginal-upper", type=int, default=2)
    p_rank.add_argument("--jobs", type=int, default=1)
    p_rank.add_argument("--figure", action=argparse.BooleanOptionalAction, default=True)
    p_rank.add_argument("--seed", type=int, default=common["seed"])
    p_rank.add_argument("--force", action="store_true")
    p_rank.set_defaults(func=cmd_rank)

    p_stats = sub.add_parser("stats", help="post-truncation statistics, clean vs hallucinated")
    p_stats.add_argument("--backend", required=True, nargs="+", help="trace backend descriptor(s)")
    p_stats.add_argument("--annotations", required=True, nargs="+")
    p_stats.add_argument("--truncation", choices=("elbow", "alpha"))
    p_stats.add_argument("--alpha", type=float)
    p_stats.add_argument("-o", "--output", required=True)
    p_stats.add_argument("--jobs", type=int, default=1)
    p_stats.add_argument("--figure", action=argparse.BooleanOptionalAction, default=True)
    p_stats.add_argument("--seed", type=int, default=common["seed"])
    p_stats.add_argument("--force", action="store_true")
    p_stats.set_defaults(func=cmd_stats)

    p_cls = sub.add_parser("classify", help="categorize hallucinated phrases")
    p_cls.add_argument("--annotations", required=True, nargs="+")
    p_cls.add_argument("--rank-trace", required=True, nargs="+")
    p_cls.add_argument("--retrieval", required=True, help="retrieval stub JSON")
    p_cls.add_argument("--k", default="25", help="retrieval cutoff, or a sweep like '10,25,40'")
    p_cls.add_argument("--out-dir", required=True)
    p_cls.add_argument("--jobs", type=int, default=1)
    p_cls.add_argument("--figure", action=argparse.BooleanOptionalAction, default=True)
    p_cls.add_argument("--seed", type=int, default=common["seed"])
    p_cls.add_argument("--force", action="store_true")
    p_cls.set_defaults(func=cmd_classify)

    return parser


def _exit_code_for(exc: Exception) -> int:
    if isinstance(exc, BackendError):
        return EXIT_BACKEND
    if isinstance(exc, DecodeError):
        cause = exc.__cause__
        return EXIT_BACKEND if isinstance(cause, BackendError) else EXIT_INPUT
    if isinstance(exc, (CliError, AnnotationError, DistributionError, ValueError, OSError)):
        return EXIT_INPUT
    raise exc


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - single choke point for exit codes
        code = _exit_code_for(exc)
        print(f"error: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
