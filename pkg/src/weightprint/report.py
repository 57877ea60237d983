"""End-to-end fingerprints, comparison, and the JSON report format."""

from __future__ import annotations

import enum
import json
import logging
import math
import os
from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import jsonschema
import numpy as np

from .checkpoint import TensorMatrix, discover_files, load_matrix, open_checkpoint
from .clustering import (
    ClusterModel,
    ClusteringVector,
    LabelGrid,
    align_labels,
    clustering_vector,
    kmeans_fit,
    raw_grid,
)
from .errors import (
    DegenerateError,
    LayoutError,
    PreconditionError,
    RankError,
    ReportError,
    SchemeMismatchError,
    WeightprintError,
)
from .lora import LoraAdapterPair, compose_delta
from .spectral import ProfileNormalization, ProfileSet, SingularProfile, make_profile, top_singular_values
from .stats import GroupStats, Moments, StdNormalization, StdVector, merge_all, std_vector
from .taxonomy import KIND_NAMES, KINDS, ArchPreset, ModelLayout, ProjectionKind, collect_layout

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class Parameters:
    preset: str = "llama"
    rank: int = 16
    k: int = 2
    seed: int = 0
    restarts: int = 10
    max_iter: int = 300
    tol: float = 1e-6
    std_normalization: StdNormalization = StdNormalization.MaxOne
    profile_normalization: ProfileNormalization = ProfileNormalization.NormalizeByTop
    lora_scaling: bool = False

    def validate(self) -> None:
        if self.rank < 1:
            raise RankError(f"rank must be positive, got {self.rank}")
        if self.k < 1:
            raise PreconditionError(f"k must be positive, got {self.k}")
        if self.seed < 0:
            raise PreconditionError(f"seed must be non-negative, got {self.seed}")
        if self.restarts < 1 or self.max_iter < 1:
            raise PreconditionError("restarts and max_iter must be positive")
        if not self.tol >= 0:
            raise PreconditionError(f"tol must be non-negative, got {self.tol}")


@dataclass(frozen=True)
class Fingerprint:
    model_id: str
    layer_count: int
    parameters: Parameters
    group_stats: tuple[GroupStats | None, ...]
    std_vector: StdVector
    clustering_vector: ClusteringVector | None
    label_grid: LabelGrid
    cluster_model: ClusterModel
    profiles: tuple[SingularProfile, ...]
    effective_rank: int
    source: str = "model"
    base_model_id: str | None = None
    warnings: tuple[str, ...] = ()
    comparison: "ComparisonResult | None" = None

    @property
    def kinds_present(self) -> list[ProjectionKind]:
        return [k for k, v in zip(KINDS, self.std_vector.normalized) if v is not None]

    def profile_set(self) -> ProfileSet:
        """Profiles that took part in clustering (zero LoRA deltas are left out)."""
        used = tuple(p for p in self.profiles if p.normalized)
        return ProfileSet(used, self.effective_rank, self.model_id, self.parameters.profile_normalization)


# ---------------------------------------------------------------- pipeline

Cell = tuple[int, ProjectionKind, object]


def _measure(cells: Sequence[Cell], to_matrix: Callable[[object], TensorMatrix], rank: int, workers: int):
    """Per-cell (moments, top singular values); order follows ``cells``."""

    def work(cell):
        layer, kind, handle = cell
        try:
            m = to_matrix(handle)
            return Moments.of(m.values), top_singular_values(m, rank)
        except WeightprintError as exc:
            exc.args = (f"(layer {layer}, {kind.value}): {exc}",)
            raise

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(work, cells))
    return [work(c) for c in cells]


def _assemble(
    cells: Sequence[Cell],
    measured,
    params: Parameters,
    model_id: str,
    effective_rank: int,
    source: str,
    lora: bool,
    base_model_id: str | None = None,
) -> Fingerprint:
    layers = max(layer for layer, _, _ in cells) + 1
    parts: dict[ProjectionKind, list[Moments]] = {}
    sigmas: dict[tuple[int, ProjectionKind], np.ndarray] = {}
    for (layer, kind, _), (mom, sig) in zip(cells, measured):
        parts.setdefault(kind, []).append(mom)
        sigmas[(layer, kind)] = sig
    stats = {k: GroupStats.from_moments(k, merge_all(parts[k])) for k in KINDS if k in parts}

    warnings: list[str] = []
    usable = [k for k in KINDS if k in stats]
    if lora:
        for k in list(usable):
            zero_layers = [layer for layer in range(layers) if not sigmas[(layer, k)][0] > 0]
            if stats[k].std == 0.0 or zero_layers:
                warnings.append(
                    f"{k.value}: delta is zero in layer(s) {zero_layers}; kind excluded from std and clustering vectors"
                )
                usable.remove(k)
        if not usable:
            raise DegenerateError("every adapter delta is zero; nothing to fingerprint")
    for w in warnings:
        logger.warning(w)

    sv = std_vector({k: stats[k] for k in usable}, params.std_normalization, allow_partial=lora)

    profiles = [
        make_profile(layer, k, sigmas[(layer, k)], params.profile_normalization)
        for layer in range(layers)
        for k in usable
    ]
    pset = ProfileSet(tuple(profiles), effective_rank, model_id, params.profile_normalization)
    if params.k > len(pset):
        raise PreconditionError(f"k={params.k} exceeds the number of profiles ({len(pset)})")
    model, raw = kmeans_fit(pset, params.k, params.seed, params.restarts, params.max_iter, params.tol)
    present = [k.index for k in usable]
    if params.k == 2 and ProjectionKind.Q in usable:
        grid = align_labels(raw, layers, present)
        cv = clustering_vector(grid, effective_rank, params.k)
    else:
        if params.k == 2:
            warnings.append("Q kind absent; labels left unaligned and no clustering vector computed")
        grid = raw_grid(raw, layers, present)
        cv = None

    all_profiles = tuple(
        SingularProfile(layer, k, tuple(sigmas[(layer, k)].tolist()), ())
        for layer in range(layers)
        for k in KINDS
        if (layer, k) in sigmas
    )
    # keep the normalized values only where they exist (zero deltas have none)
    normalized = {(p.layer, p.kind): p for p in profiles}
    all_profiles = tuple(normalized.get((p.layer, p.kind), p) for p in all_profiles)

    return Fingerprint(
        model_id=model_id,
        layer_count=layers,
        parameters=params,
        group_stats=tuple(stats.get(k) for k in KINDS),
        std_vector=sv,
        clustering_vector=cv,
        label_grid=grid,
        cluster_model=model,
        profiles=all_profiles,
        effective_rank=effective_rank,
        source=source,
        base_model_id=base_model_id,
        warnings=tuple(warnings),
    )


def build_model_fingerprint(
    layout: ModelLayout,
    params: Parameters = Parameters(),
    model_id: str = "model",
    workers: int = 1,
    loader: Callable[[object], TensorMatrix] | None = None,
) -> Fingerprint:
    params.validate()
    for layer, kind, meta in layout.cells():
        if params.rank > min(meta.shape):
            raise RankError(
                f"rank {params.rank} exceeds min dimension {min(meta.shape)} of {meta.name!r} "
                f"(layer {layer}, {kind.value})"
            )
    if loader is None:
        def loader(meta):
            return load_matrix({meta.name: meta}, meta.name)

    cells = list(layout.cells())
    measured = _measure(cells, loader, params.rank, workers)
    return _assemble(cells, measured, params, model_id, params.rank, "model", lora=False)


def build_lora_fingerprint(
    pairs: Sequence[LoraAdapterPair],
    params: Parameters = Parameters(),
    model_id: str = "adapter",
    base_layout: ModelLayout | None = None,
    base_model_id: str | None = None,
    workers: int = 1,
) -> Fingerprint:
    """Fingerprint of the B·A deltas; rank is capped at the adapter rank."""
    params.validate()
    if not pairs:
        raise LayoutError("adapter contains no LoRA pairs matching the preset")
    layers = max(p.layer for p in pairs) + 1
    kinds = {p.kind for p in pairs}
    have = {(p.layer, p.kind) for p in pairs}
    for k in KINDS:
        if k in kinds:
            gaps = [layer for layer in range(layers) if (layer, k) not in have]
            if gaps:
                raise LayoutError(f"adapter targets {k.value} but lacks layer(s) {gaps}")
    if base_layout is not None and base_layout.layers != layers:
        raise LayoutError(f"adapter covers {layers} layers, base model has {base_layout.layers}")
    effective = min([params.rank] + [p.r for p in pairs] + [min(p.shape) for p in pairs])

    ordered = sorted(pairs, key=lambda p: (p.layer, p.kind.index))
    cells = [(p.layer, p.kind, p) for p in ordered]

    def to_matrix(pair: LoraAdapterPair) -> TensorMatrix:
        base_shape = base_layout.groups[pair.kind][pair.layer].shape if base_layout is not None else None
        return compose_delta(pair, params.lora_scaling, base_shape)

    measured = _measure(cells, to_matrix, effective, workers)
    return _assemble(cells, measured, params, model_id, effective, "lora", lora=True, base_model_id=base_model_id)


def build_fingerprint(source, params: Parameters = Parameters(), model_id: str = "model", **kwargs) -> Fingerprint:
    """Dispatch on a ModelLayout or a list of LoRA pairs."""
    if isinstance(source, ModelLayout):
        return build_model_fingerprint(source, params, model_id, **kwargs)
    return build_lora_fingerprint(list(source), params, model_id, **kwargs)


def fingerprint_paths(
    inputs: Sequence[str | os.PathLike],
    preset: ArchPreset,
    params: Parameters,
    model_id: str | None = None,
    workers: int = 1,
) -> Fingerprint:
    files = discover_files(inputs)
    layout = collect_layout(open_checkpoint(files), preset)
    if model_id is None:
        model_id = Path(inputs[0]).name if len(inputs) == 1 else Path(files[0]).parent.name
    return build_model_fingerprint(layout, params, model_id, workers)


# ---------------------------------------------------------------- comparison


class Metric(enum.Enum):
    Cosine = "Cosine"
    L2 = "L2"
    MaxAbsDiff = "MaxAbsDiff"


@dataclass(frozen=True)
class ComparisonResult:
    metric: Metric
    a: str
    b: str
    std_vector_score: float
    clustering_vector_score: float | None
    std_vector_diffs: tuple[float | None, ...]
    clustering_vector_diffs: tuple[float | None, ...] | None


def _score(x: list[float], y: list[float], metric: Metric) -> float:
    if metric is Metric.Cosine:
        dot = math.fsum(a * b for a, b in zip(x, y))
        nx = math.fsum(a * a for a in x)
        ny = math.fsum(b * b for b in y)
        if nx == 0.0 or ny == 0.0:
            raise DegenerateError("cosine similarity of a zero vector is undefined")
        return max(-1.0, min(1.0, dot / math.sqrt(nx * ny)))
    diffs = [abs(a - b) for a, b in zip(x, y)]
    if metric is Metric.L2:
        return math.sqrt(math.fsum(d * d for d in diffs))
    return max(diffs)


def _compare_vectors(u, v, metric: Metric, what: str):
    if [a is None for a in u] != [b is None for b in v]:
        ku = [n for n, a in zip(KIND_NAMES, u) if a is not None]
        kv = [n for n, b in zip(KIND_NAMES, v) if b is not None]
        raise SchemeMismatchError(f"{what}: fingerprints cover different kinds ({ku} vs {kv})")
    x = [a for a in u if a is not None]
    y = [b for b in v if b is not None]
    diffs = tuple(None if a is None else abs(a - b) for a, b in zip(u, v))
    return _score(x, y, metric), diffs


def compare_fingerprints(a: Fingerprint, b: Fingerprint, metric: Metric = Metric.Cosine) -> ComparisonResult:
    pa, pb = a.parameters, b.parameters
    if pa.std_normalization != pb.std_normalization:
        raise SchemeMismatchError(
            f"std normalization differs: {a.model_id} uses {pa.std_normalization.value}, "
            f"{b.model_id} uses {pb.std_normalization.value}"
        )
    if pa.profile_normalization != pb.profile_normalization:
        raise SchemeMismatchError(
            f"profile normalization differs: {a.model_id} uses {pa.profile_normalization.value}, "
            f"{b.model_id} uses {pb.profile_normalization.value}"
        )
    std_score, std_diffs = _compare_vectors(a.std_vector.normalized, b.std_vector.normalized, metric, "std vector")
    cv_score = cv_diffs = None
    if a.clustering_vector is not None and b.clustering_vector is not None:
        cv_score, cv_diffs = _compare_vectors(
            a.clustering_vector.means, b.clustering_vector.means, metric, "clustering vector"
        )
    return ComparisonResult(metric, a.model_id, b.model_id, std_score, cv_score, std_diffs, cv_diffs)


# ---------------------------------------------------------------- serialization

_num = {"type": "number"}
_opt_num = {"type": ["number", "null"]}
_int = {"type": "integer"}
_vec7 = {"type": "array", "items": _opt_num, "minItems": 7, "maxItems": 7}

REPORT_SCHEMA = {
    "type": "object",
    "required": [
        "schema_version", "model_id", "source", "layer_count", "parameters", "groups",
        "std_vector", "clustering_vector", "label_grid", "profiles",
    ],
    "properties": {
        "schema_version": _int,
        "model_id": {"type": "string"},
        "source": {"enum": ["model", "lora"]},
        "base_model_id": {"type": ["string", "null"]},
        "layer_count": {"type": "integer", "minimum": 1},
        "effective_rank": {"type": "integer", "minimum": 1},
        "parameters": {
            "type": "object",
            "required": [
                "preset", "rank", "k", "seed", "restarts", "max_iter", "tol",
                "std_normalization", "profile_normalization", "lora_scaling",
            ],
            "properties": {
                "preset": {"type": "string"},
                "rank": _int, "k": _int, "seed": _int, "restarts": _int, "max_iter": _int,
                "tol": _num,
                "std_normalization": {"enum": [s.value for s in StdNormalization]},
                "profile_normalization": {"enum": [s.value for s in ProfileNormalization]},
                "lora_scaling": {"type": "boolean"},
            },
        },
        "groups": {
            "type": "array", "minItems": 7, "maxItems": 7,
            "items": {
                "type": "object",
                "required": ["kind", "count", "mean", "std", "min", "max"],
                "properties": {
                    "kind": {"enum": list(KIND_NAMES)},
                    "count": {"type": ["integer", "null"]},
                    "mean": _opt_num, "std": _opt_num, "min": _opt_num, "max": _opt_num,
                },
            },
        },
        "std_vector": {
            "type": "object",
            "required": ["raw", "normalized", "normalization"],
            "properties": {
                "raw": _vec7, "normalized": _vec7,
                "normalization": {"enum": [s.value for s in StdNormalization]},
            },
        },
        "clustering_vector": {
            "oneOf": [
                {"type": "null"},
                {
                    "type": "object",
                    "required": ["means", "rank", "k"],
                    "properties": {"means": _vec7, "rank": _int, "k": _int},
                },
            ]
        },
        "label_grid": {
            "type": "array",
            "items": {
                "type": "array", "minItems": 7, "maxItems": 7,
                "items": {"type": ["integer", "null"], "minimum": 0},
            },
        },
        "label_grid_aligned": {"type": "boolean"},
        "cluster_model": {
            "type": "object",
            "required": ["k", "centroids", "inertia", "seed", "restarts", "iterations_run", "restart"],
            "properties": {
                "centroids": {"type": "array", "items": {"type": "array", "items": _num}},
                "inertia": _num,
            },
        },
        "profiles": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["layer", "kind", "sigma"],
                "properties": {
                    "layer": {"type": "integer", "minimum": 0},
                    "kind": {"enum": list(KIND_NAMES)},
                    "sigma": {"type": "array", "items": _num},
                },
            },
        },
        "warnings": {"type": "array", "items": {"type": "string"}},
        "comparison": {"type": ["object", "null"]},
    },
}


def comparison_to_dict(c: ComparisonResult) -> dict:
    return {
        "metric": c.metric.value,
        "a": c.a,
        "b": c.b,
        "std_vector_score": c.std_vector_score,
        "clustering_vector_score": c.clustering_vector_score,
        "per_kind_diffs": {
            "kinds": list(KIND_NAMES),
            "std_vector": list(c.std_vector_diffs),
            "clustering_vector": None if c.clustering_vector_diffs is None else list(c.clustering_vector_diffs),
        },
    }


def comparison_from_dict(d: dict) -> ComparisonResult:
    diffs = d["per_kind_diffs"]
    cvd = diffs.get("clustering_vector")
    return ComparisonResult(
        Metric(d["metric"]),
        d["a"],
        d["b"],
        d["std_vector_score"],
        d.get("clustering_vector_score"),
        tuple(diffs["std_vector"]),
        None if cvd is None else tuple(cvd),
    )


def to_dict(f: Fingerprint) -> dict:
    p = f.parameters
    groups = []
    for kind, g in zip(KINDS, f.group_stats):
        if g is None:
            groups.append({"kind": kind.value, "count": None, "mean": None, "std": None, "min": None, "max": None})
        else:
            groups.append({
                "kind": kind.value, "count": g.count, "mean": g.mean, "std": g.std,
                "min": g.min, "max": g.max, "abs_mean_over_std": g.mean_over_std,
            })
    cm = f.cluster_model
    return {
        "schema_version": SCHEMA_VERSION,
        "model_id": f.model_id,
        "source": f.source,
        "base_model_id": f.base_model_id,
        "layer_count": f.layer_count,
        "effective_rank": f.effective_rank,
        "parameters": {
            "preset": p.preset,
            "rank": p.rank,
            "k": p.k,
            "seed": p.seed,
            "restarts": p.restarts,
            "max_iter": p.max_iter,
            "tol": p.tol,
            "std_normalization": p.std_normalization.value,
            "profile_normalization": p.profile_normalization.value,
            "lora_scaling": p.lora_scaling,
        },
        "groups": groups,
        "std_vector": {
            "raw": list(f.std_vector.raw),
            "normalized": list(f.std_vector.normalized),
            "normalization": f.std_vector.normalization.value,
        },
        "clustering_vector": None if f.clustering_vector is None else {
            "means": list(f.clustering_vector.means),
            "rank": f.clustering_vector.rank,
            "k": f.clustering_vector.k,
        },
        "label_grid": [list(row) for row in f.label_grid.labels],
        "label_grid_aligned": f.label_grid.aligned,
        "cluster_model": {
            "k": cm.k,
            "centroids": [list(c) for c in cm.centroids],
            "inertia": cm.inertia,
            "seed": cm.seed,
            "restarts": cm.restarts,
            "iterations_run": cm.iterations_run,
            "restart": cm.restart,
        },
        "profiles": [{"layer": pr.layer, "kind": pr.kind.value, "sigma": list(pr.values)} for pr in f.profiles],
        "warnings": list(f.warnings),
        "comparison": None if f.comparison is None else comparison_to_dict(f.comparison),
    }


def _json_path(error: jsonschema.ValidationError) -> str:
    return "$" + "".join(f"[{p}]" if isinstance(p, int) else f".{p}" for p in error.absolute_path)


def from_dict(d) -> Fingerprint:
    if isinstance(d, dict) and d.get("schema_version") != SCHEMA_VERSION:
        raise ReportError(f"unsupported schema_version {d.get('schema_version')!r} (expected {SCHEMA_VERSION})")
    errors = sorted(jsonschema.Draft202012Validator(REPORT_SCHEMA).iter_errors(d), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        raise ReportError(f"schema violation at {_json_path(e)}: {e.message}")

    pp = d["parameters"]
    params = Parameters(
        preset=pp["preset"],
        rank=pp["rank"],
        k=pp["k"],
        seed=pp["seed"],
        restarts=pp["restarts"],
        max_iter=pp["max_iter"],
        tol=pp["tol"],
        std_normalization=StdNormalization(pp["std_normalization"]),
        profile_normalization=ProfileNormalization(pp["profile_normalization"]),
        lora_scaling=pp["lora_scaling"],
    )
    stats = []
    for i, g in enumerate(d["groups"]):
        if g["kind"] != KIND_NAMES[i]:
            raise ReportError(f"schema violation at $.groups[{i}].kind: expected {KIND_NAMES[i]!r}")
        if g["count"] is None:
            stats.append(None)
        else:
            stats.append(GroupStats(KINDS[i], g["count"], g["mean"], g["std"], g["min"], g["max"]))
    sv = d["std_vector"]
    cvd = d["clustering_vector"]
    grid = d["label_grid"]
    if len(grid) != d["layer_count"]:
        raise ReportError(f"schema violation at $.label_grid: {len(grid)} rows for layer_count {d['layer_count']}")
    effective = d.get("effective_rank", params.rank)
    try:
        present = {KIND_NAMES[j] for j, v in enumerate(sv["normalized"]) if v is not None}
        profiles = []
        for pr in d["profiles"]:
            kind = ProjectionKind(pr["kind"])
            if kind.value in present:
                profiles.append(make_profile(pr["layer"], kind, pr["sigma"], params.profile_normalization))
            else:
                profiles.append(SingularProfile(pr["layer"], kind, tuple(float(s) for s in pr["sigma"]), ()))
    except (DegenerateError, ValueError) as exc:
        raise ReportError(f"schema violation at $.profiles: {exc}") from None
    cm = d["cluster_model"]
    return Fingerprint(
        model_id=d["model_id"],
        layer_count=d["layer_count"],
        parameters=params,
        group_stats=tuple(stats),
        std_vector=StdVector(tuple(sv["raw"]), tuple(sv["normalized"]), StdNormalization(sv["normalization"])),
        clustering_vector=None if cvd is None else ClusteringVector(tuple(cvd["means"]), cvd["rank"], cvd["k"]),
        label_grid=LabelGrid(tuple(tuple(r) for r in grid), d.get("label_grid_aligned", cvd is not None)),
        cluster_model=ClusterModel(
            k=cm["k"],
            centroids=tuple(tuple(c) for c in cm["centroids"]),
            inertia=cm["inertia"],
            seed=cm["seed"],
            restarts=cm["restarts"],
            iterations_run=cm["iterations_run"],
            restart=cm["restart"],
        ),
        profiles=tuple(profiles),
        effective_rank=effective,
        source=d["source"],
        base_model_id=d.get("base_model_id"),
        warnings=tuple(d.get("warnings", ())),
        comparison=None if d.get("comparison") is None else comparison_from_dict(d["comparison"]),
    )


def serialize(f: Fingerprint) -> str:
    # repr-based float output round-trips every double exactly
    return json.dumps(to_dict(f), indent=2, ensure_ascii=False, allow_nan=False) + "\n"


def parse(text: str | bytes) -> Fingerprint:
    if isinstance(text, bytes):
        try:
            text = text.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ReportError(f"report is not UTF-8 (byte offset {exc.start})") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        offset = len(text[: exc.pos].encode("utf-8"))
        raise ReportError(f"malformed report JSON at byte offset {offset}: {exc.msg}") from None
    return from_dict(data)


def write_report(f: Fingerprint, path: str | os.PathLike) -> None:
    Path(path).write_text(serialize(f), encoding="utf-8")


def read_report(path: str | os.PathLike) -> Fingerprint:
    return parse(Path(path).read_bytes())


def with_comparison(f: Fingerprint, base: Fingerprint, metric: Metric = Metric.Cosine) -> Fingerprint:
    return replace(f, base_model_id=base.model_id, comparison=compare_fingerprints(f, base, metric))
