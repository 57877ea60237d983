"""Command-line front end.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numeric/precondition error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .checkpoint import discover_files, load_matrix, open_checkpoint
from .errors import PresetError, WeightprintError
from .export import REPORT_EXPORTS, dist_csv
from .lora import adapter_alpha, collect_lora_pairs, read_adapter_config
from .report import (
    Metric,
    Parameters,
    build_lora_fingerprint,
    comparison_to_dict,
    compare_fingerprints,
    fingerprint_paths,
    read_report,
    serialize,
    with_comparison,
)
from .spectral import ProfileNormalization
from .stats import StdNormalization, sample_for_plot
from .taxonomy import KINDS, collect_layout, resolve_preset

log = logging.getLogger("weightprint")

EXIT_USAGE = 1


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _enum_arg(enum_cls, aliases=None):
    aliases = aliases or {}

    def parse(text: str):
        key = text.lower()
        if key in aliases:
            return aliases[key]
        for member in enum_cls:
            if member.value.lower() == key:
                return member
        choices = ", ".join([m.value for m in enum_cls] + sorted(aliases))
        raise argparse.ArgumentTypeError(f"invalid choice {text!r} (choose from {choices})")

    return parse


def _add_pipeline_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--preset", default="llama", help="llama, qwen2, or a preset JSON file (default: llama)")
    p.add_argument("--rank", type=int, default=16, help="singular values kept per matrix (default: 16)")
    p.add_argument("--k", type=int, default=2, help="number of K-Means clusters (default: 2)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--restarts", type=int, default=10)
    p.add_argument("--max-iter", type=int, default=300)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument(
        "--std-norm",
        type=_enum_arg(StdNormalization, {"max": StdNormalization.MaxOne, "l2": StdNormalization.UnitL2}),
        default=StdNormalization.MaxOne,
        help="MaxOne (default), MinMax or UnitL2",
    )
    p.add_argument(
        "--profile-norm",
        type=_enum_arg(ProfileNormalization, {"top": ProfileNormalization.NormalizeByTop, "l2": ProfileNormalization.UnitL2}),
        default=ProfileNormalization.NormalizeByTop,
        help="NormalizeByTop (default) or UnitL2",
    )
    p.add_argument("--model-id", default=None, help="identifier stored in the report (default: input name)")
    p.add_argument("--workers", type=int, default=1, help="threads for per-matrix work; output does not depend on it")


def _params(args, lora_scaling: bool = False) -> Parameters:
    return Parameters(
        preset=args.preset,
        rank=args.rank,
        k=args.k,
        seed=args.seed,
        restarts=args.restarts,
        max_iter=args.max_iter,
        tol=args.tol,
        std_normalization=args.std_norm,
        profile_normalization=args.profile_norm,
        lora_scaling=lora_scaling,
    )


def _preset(args):
    try:
        return resolve_preset(args.preset)
    except PresetError as exc:
        if args.preset.endswith(".json") or Path(args.preset).exists():
            raise
        raise UsageError(str(exc)) from None


def _emit(text: str, out: str | None) -> None:
    if out in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(out).write_text(text, encoding="utf-8")
        log.info("wrote %s", out)


def cmd_fingerprint(args) -> int:
    fp = fingerprint_paths(args.inputs, _preset(args), _params(args), args.model_id, args.workers)
    _emit(serialize(fp), args.out)
    return 0


def _adapter_config(args, files):
    if args.adapter_config:
        return read_adapter_config(args.adapter_config)
    for item in list(args.inputs) + [str(files[0].parent)]:
        cand = Path(item) / "adapter_config.json" if Path(item).is_dir() else None
        if cand is not None and cand.is_file():
            return read_adapter_config(cand)
    return None


def cmd_lora(args) -> int:
    preset = _preset(args)
    files = discover_files(args.inputs)
    index = open_checkpoint(files)
    # ranks come from tensor shapes; the config only contributes lora_alpha
    pairs = collect_lora_pairs(index, preset)
    cfg = _adapter_config(args, files)
    alpha = adapter_alpha(cfg, {p.r for p in pairs})
    if alpha is not None:
        pairs = [type(p)(p.layer, p.kind, p.A, p.B, alpha) for p in pairs]
    elif args.scale_alpha:
        log.warning("--scale-alpha given but no lora_alpha found; deltas left unscaled")

    base_layout = None
    if args.base_model:
        base_layout = collect_layout(open_checkpoint(discover_files(args.base_model)), preset)
    model_id = args.model_id or Path(args.inputs[0]).name
    fp = build_lora_fingerprint(
        pairs, _params(args, lora_scaling=args.scale_alpha), model_id, base_layout=base_layout, workers=args.workers
    )
    if args.base:
        fp = with_comparison(fp, read_report(args.base), args.metric)
    _emit(serialize(fp), args.out)
    return 0


def cmd_compare(args) -> int:
    a, b = read_report(args.a), read_report(args.b)
    result = compare_fingerprints(a, b, args.metric)
    sys.stdout.write(json.dumps(comparison_to_dict(result), indent=2) + "\n")
    return 0


def _is_report(inputs) -> bool:
    return len(inputs) == 1 and Path(inputs[0]).is_file() and inputs[0].endswith(".json")


def cmd_export_plot(args) -> int:
    report_input = _is_report(args.inputs)
    if args.what == "dist":
        if report_input:
            raise UsageError("--what dist needs the model checkpoint, not a report")
        index = open_checkpoint(discover_files(args.inputs))
        layout = collect_layout(index, _preset(args))
        seed = args.seed if args.sample_seed is None else args.sample_seed
        samples = {}
        for kind in KINDS:
            group = [load_matrix(index, meta.name) for meta in layout.groups[kind]]
            samples[kind] = sample_for_plot(group, args.sample, seed)
        _emit(dist_csv(samples, args.sample, seed), args.out)
        return 0

    if report_input:
        fp = read_report(args.inputs[0])
    else:
        fp = fingerprint_paths(args.inputs, _preset(args), _params(args), args.model_id, args.workers)
    _emit(REPORT_EXPORTS[args.what](fp), args.out)
    return 0


_METRIC = _enum_arg(Metric, {"maxabs": Metric.MaxAbsDiff})


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="weightprint", description="Weight-level fingerprints of transformer checkpoints.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("fingerprint", help="std vector + clustering vector of a checkpoint")
    p.add_argument("inputs", nargs="+", help="checkpoint directory or .safetensors shards")
    _add_pipeline_args(p)
    p.add_argument("--out", "-o", default="-", help="report path (default: stdout)")
    p.set_defaults(func=cmd_fingerprint)

    p = sub.add_parser("lora", help="fingerprint the B·A deltas of a LoRA adapter")
    p.add_argument("inputs", nargs="+", help="adapter directory or .safetensors files")
    _add_pipeline_args(p)
    p.add_argument("--scale-alpha", action="store_true", help="scale deltas by lora_alpha / r")
    p.add_argument("--adapter-config", default=None, help="adapter_config.json (default: looked up next to the adapter)")
    p.add_argument("--base", default=None, help="base model report to compare against")
    p.add_argument("--base-model", nargs="+", default=None, help="base checkpoint, for delta shape checks")
    p.add_argument("--metric", type=_METRIC, default=Metric.Cosine)
    p.add_argument("--out", "-o", default="-")
    p.set_defaults(func=cmd_lora)

    p = sub.add_parser("compare", help="compare two reports")
    p.add_argument("a")
    p.add_argument("b")
    p.add_argument("--metric", type=_METRIC, default=Metric.Cosine, help="Cosine (default), L2 or MaxAbsDiff")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("export-plot", help="write plot data as CSV")
    p.add_argument("inputs", nargs="+", help="a report .json, or a checkpoint")
    p.add_argument("--what", required=True, choices=["std", "cv", "heatmap", "scatter", "profiles", "dist"])
    p.add_argument("--sample", type=int, default=2000, help="values sampled per kind for --what dist")
    p.add_argument("--sample-seed", type=int, default=None, help="seed for --what dist (default: --seed)")
    _add_pipeline_args(p)
    p.add_argument("--out", "-o", default="-")
    p.set_defaults(func=cmd_export_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        _report_error("UsageError", str(exc), EXIT_USAGE)
        return EXIT_USAGE
    except WeightprintError as exc:
        _report_error(type(exc).__name__, str(exc), exc.exit_code)
        return exc.exit_code
    except OSError as exc:
        _report_error(type(exc).__name__, str(exc), 2)
        return 2


def _report_error(kind: str, message: str, code: int) -> None:
    sys.stderr.write(json.dumps({"error": kind, "message": message, "exit_code": code}) + "\n")


if __name__ == "__main__":
    sys.exit(main())
