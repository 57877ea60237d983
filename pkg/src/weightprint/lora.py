"""LoRA adapter pairing and B·A delta composition."""

from __future__ import annotations

import json
import logging
import os
import re
from collections.abc import Mapping
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import TensorMatrix, TensorMeta, load_matrix
from .errors import FormatError, LoraPairingError, PreconditionError
from .taxonomy import KINDS, LAYER_PLACEHOLDER, ArchPreset, ProjectionKind

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class LoraAdapterPair:
    layer: int
    kind: ProjectionKind
    A: TensorMatrix  # r x in
    B: TensorMatrix  # out x r
    alpha: float | None = None

    @property
    def r(self) -> int:
        return self.A.rows

    @property
    def shape(self) -> tuple[int, int]:
        return (self.B.rows, self.A.cols)


def _adapter_regex(preset: ArchPreset, kind: ProjectionKind) -> re.Pattern:
    head, tail = preset.stem(kind).split(LAYER_PLACEHOLDER)
    return re.compile(
        r"(?:.*\.)?" + re.escape(head) + r"(\d+)" + re.escape(tail) + r"\.lora_([AB])(?:\.default)?\.weight"
    )


def read_adapter_config(path: str | os.PathLike) -> dict:
    try:
        cfg = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read adapter config {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise FormatError(f"{path}: adapter config is not a JSON object")
    return cfg


def match_adapter_tensors(names, preset: ArchPreset) -> dict[tuple[int, ProjectionKind], dict[str, str]]:
    regexes = {k: _adapter_regex(preset, k) for k in KINDS}
    slots: dict[tuple[int, ProjectionKind], dict[str, str]] = {}
    for name in sorted(names):
        for kind, rx in regexes.items():
            m = rx.fullmatch(name)
            if m is None:
                continue
            key = (int(m.group(1)), kind)
            side = m.group(2)
            slot = slots.setdefault(key, {})
            if side in slot:
                raise LoraPairingError(f"two lora_{side} tensors for (layer {key[0]}, {kind.value}): {slot[side]!r}, {name!r}")
            slot[side] = name
            break
    return slots


def collect_lora_pairs(
    index: Mapping[str, TensorMeta],
    preset: ArchPreset,
    alpha: float | None = None,
) -> list[LoraAdapterPair]:
    """All A/B pairs, ordered by (layer, canonical kind)."""
    slots = match_adapter_tensors(index, preset)
    pairs = []
    for (layer, kind) in sorted(slots, key=lambda lk: (lk[0], lk[1].index)):
        slot = slots[(layer, kind)]
        for side, other in (("A", "B"), ("B", "A")):
            if other not in slot:
                raise LoraPairingError(
                    f"unpaired adapter tensor {slot[side]!r}: no lora_{other} for (layer {layer}, {kind.value})"
                )
        a = load_matrix(index, slot["A"])
        b = load_matrix(index, slot["B"])
        if a.rows != b.cols:
            raise LoraPairingError(
                f"rank mismatch for (layer {layer}, {kind.value}): lora_A has {a.rows} rows, lora_B has {b.cols} columns"
            )
        pairs.append(LoraAdapterPair(layer, kind, a, b, alpha))
    return pairs


def compose_delta(
    pair: LoraAdapterPair,
    apply_scaling: bool = False,
    base_shape: tuple[int, int] | None = None,
) -> TensorMatrix:
    """B @ A, optionally times alpha / r."""
    a, b = pair.A.values, pair.B.values
    if a.shape[0] != b.shape[1]:
        raise PreconditionError(f"cannot compose B {b.shape} with A {a.shape}")
    if base_shape is not None and tuple(base_shape) != pair.shape:
        raise PreconditionError(
            f"delta shape {pair.shape} for (layer {pair.layer}, {pair.kind.value}) does not match base {tuple(base_shape)}"
        )
    delta = b @ a
    if apply_scaling and pair.alpha is not None:
        delta = delta * (pair.alpha / pair.r)
    delta.setflags(write=False)
    return TensorMatrix(delta, name=f"delta(layer {pair.layer}, {pair.kind.value})")


def adapter_alpha(config: Mapping | None, r_values: set[int]) -> float | None:
    if not config or config.get("lora_alpha") is None:
        return None
    cfg_r = config.get("r")
    if cfg_r is not None and r_values and {int(cfg_r)} != r_values:
        logger.warning("adapter_config r=%s differs from tensor ranks %s; scaling uses tensor ranks", cfg_r, sorted(r_values))
    return float(config["lora_alpha"])
