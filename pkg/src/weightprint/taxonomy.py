"""Projection kinds, architecture presets and per-kind layer layouts."""

from __future__ import annotations

import enum
import json
import os
import re
from collections.abc import Mapping
from dataclasses import dataclass, field
from pathlib import Path

from .checkpoint import TensorMeta
from .errors import LayoutError, PresetError


class ProjectionKind(enum.Enum):
    Q = "Q"
    K = "K"
    V = "V"
    O = "O"  # noqa: E741
    Gate = "Gate"
    Up = "Up"
    Down = "Down"

    @property
    def index(self) -> int:
        return KINDS.index(self)

    @classmethod
    def parse(cls, text: str) -> "ProjectionKind":
        for kind in cls:
            if kind.value.lower() == str(text).lower():
                return kind
        raise ValueError(f"unknown projection kind {text!r}")


# Canonical order used for every serialized vector.
KINDS: tuple[ProjectionKind, ...] = tuple(ProjectionKind)
KIND_NAMES: tuple[str, ...] = tuple(k.value for k in KINDS)

LAYER_PLACEHOLDER = "{layer}"
WEIGHT_SUFFIX = ".weight"


def compile_pattern(pattern: str) -> re.Pattern:
    if pattern.count(LAYER_PLACEHOLDER) != 1:
        raise PresetError(f"pattern {pattern!r} must contain exactly one {LAYER_PLACEHOLDER} placeholder")
    if not pattern.endswith(WEIGHT_SUFFIX):
        raise PresetError(f"pattern {pattern!r} must end with {WEIGHT_SUFFIX!r}")
    head, tail = pattern.split(LAYER_PLACEHOLDER)
    return re.compile(re.escape(head) + r"(\d+)" + re.escape(tail))


@dataclass(frozen=True)
class ArchPreset:
    name: str
    patterns: Mapping[ProjectionKind, str]
    layer_count_hint: int | None = None
    _compiled: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        missing = [k.value for k in KINDS if k not in self.patterns]
        if missing:
            raise PresetError(f"preset {self.name!r} lacks patterns for {', '.join(missing)}")
        compiled = {k: compile_pattern(self.patterns[k]) for k in KINDS}
        object.__setattr__(self, "_compiled", compiled)

    @property
    def compiled(self) -> dict[ProjectionKind, re.Pattern]:
        return self._compiled

    def stem(self, kind: ProjectionKind) -> str:
        """Pattern without the trailing ``.weight``; used to derive adapter names."""
        return self.patterns[kind][: -len(WEIGHT_SUFFIX)]


_DECODER = {
    ProjectionKind.Q: "model.layers.{layer}.self_attn.q_proj.weight",
    ProjectionKind.K: "model.layers.{layer}.self_attn.k_proj.weight",
    ProjectionKind.V: "model.layers.{layer}.self_attn.v_proj.weight",
    ProjectionKind.O: "model.layers.{layer}.self_attn.o_proj.weight",
    ProjectionKind.Gate: "model.layers.{layer}.mlp.gate_proj.weight",
    ProjectionKind.Up: "model.layers.{layer}.mlp.up_proj.weight",
    ProjectionKind.Down: "model.layers.{layer}.mlp.down_proj.weight",
}

# SmolLM2 uses the llama names; Qwen2's attention biases never match the .weight suffix.
PRESETS: dict[str, ArchPreset] = {
    "llama": ArchPreset("llama", dict(_DECODER)),
    "qwen2": ArchPreset("qwen2", dict(_DECODER)),
}


def load_preset_file(path: str | os.PathLike) -> ArchPreset:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise PresetError(f"cannot read preset file {path}: {exc}") from exc
    if not isinstance(data, dict) or not isinstance(data.get("patterns"), dict):
        raise PresetError(f"{path}: preset must be an object with a 'patterns' object")
    patterns = {}
    for key, pattern in data["patterns"].items():
        try:
            kind = ProjectionKind.parse(key)
        except ValueError as exc:
            raise PresetError(f"{path}: {exc}") from None
        if not isinstance(pattern, str):
            raise PresetError(f"{path}: pattern for {key} is not a string")
        patterns[kind] = pattern
    hint = data.get("layer_count_hint")
    return ArchPreset(str(data.get("name", Path(path).stem)), patterns, hint)


def resolve_preset(name_or_path: str) -> ArchPreset:
    if name_or_path in PRESETS:
        return PRESETS[name_or_path]
    if os.path.isfile(name_or_path):
        return load_preset_file(name_or_path)
    raise PresetError(
        f"unknown preset {name_or_path!r}; choose one of {sorted(PRESETS)} or give a preset JSON file"
    )


def classify_tensor_name(name: str, preset: ArchPreset) -> tuple[int, ProjectionKind] | None:
    hits = []
    for kind, rx in preset.compiled.items():
        m = rx.fullmatch(name)
        if m:
            hits.append((int(m.group(1)), kind))
    if len(hits) > 1:
        kinds = ", ".join(k.value for _, k in hits)
        raise PresetError(f"preset {preset.name!r}: tensor {name!r} matches several kinds ({kinds})")
    return hits[0] if hits else None


@dataclass(frozen=True)
class ModelLayout:
    layers: int
    groups: Mapping[ProjectionKind, tuple[TensorMeta, ...]]

    def cells(self):
        """(layer, kind, meta) in layer-major, canonical-kind order."""
        for layer in range(self.layers):
            for kind in KINDS:
                yield layer, kind, self.groups[kind][layer]

    @property
    def size(self) -> int:
        return sum(len(g) for g in self.groups.values())


def collect_layout(index: Mapping[str, TensorMeta], preset: ArchPreset) -> ModelLayout:
    if not index:
        raise LayoutError("checkpoint index is empty")
    found: dict[tuple[int, ProjectionKind], TensorMeta] = {}
    for name in sorted(index):
        hit = classify_tensor_name(name, preset)
        if hit is None:
            continue
        meta = index[name]
        if not meta.is_matrix:
            continue
        if hit in found:
            raise LayoutError(
                f"duplicate ({hit[0]}, {hit[1].value}) projection: {found[hit].name!r} and {name!r}"
            )
        found[hit] = meta
    if not found:
        raise LayoutError(f"no projection tensors matched preset {preset.name!r}")

    layers = max(layer for layer, _ in found) + 1
    groups = {}
    for kind in KINDS:
        metas = []
        for layer in range(layers):
            meta = found.get((layer, kind))
            if meta is None:
                raise LayoutError(f"missing projection matrix for (layer {layer}, {kind.value})")
            metas.append(meta)
        shapes = {m.shape for m in metas}
        if len(shapes) > 1:
            raise LayoutError(
                f"inconsistent {kind.value} shapes across layers: {sorted(list(s) for s in shapes)}"
            )
        groups[kind] = tuple(metas)
    return ModelLayout(layers, groups)
