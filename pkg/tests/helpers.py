"""Fixture builders and independent oracles shared by the test modules."""

from __future__ import annotations

import itertools
import json
import math
from pathlib import Path

import numpy as np

from weightprint.checkpoint import save_checkpoint
from weightprint.taxonomy import KINDS, PRESETS, ProjectionKind

LLAMA = PRESETS["llama"]

# hidden 32, grouped-query K/V with 16 rows, MLP width 48
SHAPES = {
    ProjectionKind.Q: (32, 32),
    ProjectionKind.K: (16, 32),
    ProjectionKind.V: (16, 32),
    ProjectionKind.O: (32, 32),
    ProjectionKind.Gate: (48, 32),
    ProjectionKind.Up: (48, 32),
    ProjectionKind.Down: (32, 48),
}


def tensor_name(layer: int, kind: ProjectionKind) -> str:
    return LLAMA.patterns[kind].replace("{layer}", str(layer))


def random_orthogonal(n: int, rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


def with_spectrum(shape, sigmas, rng) -> np.ndarray:
    rows, cols = shape
    s = np.zeros((rows, cols))
    n = min(rows, cols)
    s[np.arange(n), np.arange(n)] = sigmas[:n]
    return random_orthogonal(rows, rng) @ s @ random_orthogonal(cols, rng).T


def write_model(directory: Path, matrices: dict, dtype: str = "F32", extras: dict | None = None, shards: int = 1) -> Path:
    """``matrices`` maps (layer, kind) -> array; written with llama tensor names."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tensors = {tensor_name(layer, kind): arr for (layer, kind), arr in matrices.items()}
    tensors.update(extras or {})
    names = list(tensors)
    for s in range(shards):
        part = {n: tensors[n] for n in names[s::shards]}
        save_checkpoint(directory / f"model-{s:05d}-of-{shards:05d}.safetensors", part, dtype=dtype)
    return directory


def engineered_matrices(layers: int = 2, scale: float = 1.0, seed: int = 0) -> dict:
    """Q and K get geometric spectra (2**-j), the other kinds flat spectra."""
    rng = np.random.default_rng(seed)
    out = {}
    for layer in range(layers):
        for kind in KINDS:
            n = min(SHAPES[kind])
            if kind in (ProjectionKind.Q, ProjectionKind.K):
                sig = 2.0 ** -np.arange(n)
            else:
                sig = np.ones(n)
            out[(layer, kind)] = scale * with_spectrum(SHAPES[kind], sig, rng)
    return out


def gaussian_matrices(stds, layers: int = 2, shape=(128, 128), seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    return {
        (layer, kind): rng.normal(0.0, std, size=shape)
        for layer in range(layers)
        for kind, std in zip(KINDS, stds)
    }


def write_adapter(directory: Path, pairs: dict, config: dict | None = None, infix: str = "", prefix: str = "base_model.model.") -> Path:
    """``pairs`` maps (layer, kind) -> (A, B) arrays; PEFT-style names."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tensors = {}
    for (layer, kind), (a, b) in pairs.items():
        stem = prefix + LLAMA.stem(kind).replace("{layer}", str(layer))
        tensors[f"{stem}.lora_A{infix}.weight"] = a
        tensors[f"{stem}.lora_B{infix}.weight"] = b
    save_checkpoint(directory / "adapter_model.safetensors", tensors, dtype="F64")
    if config is not None:
        (directory / "adapter_config.json").write_text(json.dumps(config))
    return directory


def random_adapter(layers: int = 2, r: int = 8, kinds=KINDS, seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    out = {}
    for layer in range(layers):
        for kind in kinds:
            rows, cols = SHAPES[kind]
            out[(layer, kind)] = (rng.standard_normal((r, cols)), rng.standard_normal((rows, r)))
    return out


# ---------------------------------------------------------------- oracles


def half_bits_oracle(bits: int) -> float:
    sign = -1.0 if bits & 0x8000 else 1.0
    exp = (bits >> 10) & 0x1F
    frac = bits & 0x3FF
    if exp == 0:
        return sign * frac * 2.0**-24
    if exp == 0x1F:
        return sign * math.inf if frac == 0 else math.nan
    return sign * (1.0 + frac / 1024.0) * 2.0 ** (exp - 15)


def bf16_bits_oracle(bits: int) -> float:
    sign = -1.0 if bits & 0x8000 else 1.0
    exp = (bits >> 7) & 0xFF
    frac = bits & 0x7F
    if exp == 0:
        return sign * frac * 2.0**-133
    if exp == 0xFF:
        return sign * math.inf if frac == 0 else math.nan
    return sign * (1.0 + frac / 128.0) * 2.0 ** (exp - 127)


def two_pass_stats(values) -> tuple[float, float]:
    vals = [float(v) for v in values]
    n = len(vals)
    mean = math.fsum(vals) / n
    return mean, math.sqrt(math.fsum((v - mean) ** 2 for v in vals) / n)


def partition_cost(points: np.ndarray, labels) -> float:
    total = 0.0
    for lab in set(labels):
        members = points[np.asarray(labels) == lab]
        c = members.mean(axis=0)
        total += float(((members - c) ** 2).sum())
    return total


def exhaustive_kmeans(points: np.ndarray, k: int) -> tuple[float, tuple[int, ...]]:
    """Optimal k-partition by enumerating every labelling with all k clusters used."""
    points = np.asarray(points, dtype=float).reshape(len(points), -1)
    best = (math.inf, ())
    for labels in itertools.product(range(k), repeat=len(points)):
        if labels[0] != 0 or len(set(labels)) != k:
            continue
        cost = partition_cost(points, labels)
        if cost < best[0]:
            best = (cost, labels)
    return best


def naive_matmul(b: np.ndarray, a: np.ndarray) -> np.ndarray:
    rows, inner = b.shape
    cols = a.shape[1]
    out = np.zeros((rows, cols))
    for i in range(rows):
        for j in range(cols):
            out[i, j] = math.fsum(float(b[i, t]) * float(a[t, j]) for t in range(inner))
    return out


def jordan_wielandt_singular_values(m: np.ndarray, rank: int) -> np.ndarray:
    """Singular values as the positive eigenvalues of [[0, M], [M^T, 0]]."""
    rows, cols = m.shape
    aug = np.zeros((rows + cols, rows + cols))
    aug[:rows, rows:] = m
    aug[rows:, :rows] = m.T
    eig = np.sort(np.linalg.eigvalsh(aug))[::-1]
    return eig[:rank]


def partitions_equal(labels_a, labels_b) -> bool:
    """Same partition up to relabelling."""
    mapping = {}
    for x, y in zip(labels_a, labels_b):
        if mapping.setdefault(x, y) != y:
            return False
    return len(set(mapping.values())) == len(mapping)
