"""Top singular values of projection matrices and their normalized profiles."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .checkpoint import TensorMatrix
from .errors import DegenerateError, NonFiniteError, RankError
from .taxonomy import KIND_NAMES, ProjectionKind


class ProfileNormalization(enum.Enum):
    NormalizeByTop = "NormalizeByTop"
    UnitL2 = "UnitL2"


def top_singular_values(m: TensorMatrix | np.ndarray, rank: int) -> np.ndarray:
    """The ``rank`` largest singular values, descending.

    Uses the eigenvalues of the smaller Gram matrix; only leading values are
    kept, so the squared conditioning does not matter at the tolerances we need.
    """
    a = m.values if isinstance(m, TensorMatrix) else np.asarray(m, dtype=np.float64)
    name = m.name if isinstance(m, TensorMatrix) else "<array>"
    if a.ndim != 2:
        raise RankError(f"{name}: expected a matrix, got shape {a.shape}")
    rows, cols = a.shape
    if not 1 <= rank <= min(rows, cols):
        raise RankError(f"{name}: rank {rank} outside [1, {min(rows, cols)}] for shape {rows}x{cols}")
    if not np.isfinite(a).all():
        i = int(np.argmax(~np.isfinite(a.ravel())))
        raise NonFiniteError(name, i, float(a.ravel()[i]))
    # pre-scale so the Gram matrix cannot overflow or underflow
    scale = float(np.abs(a).max())
    if scale == 0.0:
        return np.zeros(rank)
    b = a / scale
    gram = b @ b.T if rows <= cols else b.T @ b
    eig = np.linalg.eigvalsh(gram)
    top = np.clip(eig[::-1][:rank], 0.0, None)
    return np.sqrt(top) * scale


def normalize_profile(values, scheme: ProfileNormalization = ProfileNormalization.NormalizeByTop) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0 or not v[0] > 0:
        raise DegenerateError("singular-value profile is all zero (zero matrix)")
    if scheme is ProfileNormalization.NormalizeByTop:
        return v / v[0]
    return v / math.sqrt(math.fsum(float(x) ** 2 for x in v))


@dataclass(frozen=True)
class SingularProfile:
    layer: int
    kind: ProjectionKind
    values: tuple[float, ...]
    normalized: tuple[float, ...]

    @property
    def rank(self) -> int:
        return len(self.values)


@dataclass(frozen=True)
class ProfileSet:
    """All profiles of one model, layer-major with kinds in canonical order."""

    profiles: tuple[SingularProfile, ...]
    rank: int
    model_id: str = ""
    scheme: ProfileNormalization = ProfileNormalization.NormalizeByTop

    def __len__(self) -> int:
        return len(self.profiles)

    @property
    def normalized_matrix(self) -> np.ndarray:
        return np.array([p.normalized for p in self.profiles], dtype=np.float64).reshape(len(self.profiles), self.rank)

    @property
    def layers(self) -> int:
        return max(p.layer for p in self.profiles) + 1 if self.profiles else 0


def make_profile(layer: int, kind: ProjectionKind, values, scheme: ProfileNormalization) -> SingularProfile:
    values = np.asarray(values, dtype=np.float64)
    try:
        normalized = normalize_profile(values, scheme)
    except DegenerateError as exc:
        raise DegenerateError(f"(layer {layer}, {kind.value}): {exc}") from None
    return SingularProfile(layer, kind, tuple(values.tolist()), tuple(normalized.tolist()))


def order_key(p: SingularProfile) -> tuple[int, int]:
    return (p.layer, KIND_NAMES.index(p.kind.value))


def build_profile_set(
    layout,
    rank: int = 16,
    scheme: ProfileNormalization = ProfileNormalization.NormalizeByTop,
    loader=None,
    model_id: str = "",
    workers: int = 1,
) -> ProfileSet:
    """Profiles for every (layer, kind) cell of ``layout``.

    ``loader`` maps a TensorMeta to a TensorMatrix; the default reads from disk.
    """
    from .checkpoint import load_matrix

    cells = list(layout.cells())
    for layer, kind, meta in cells:
        if rank > min(meta.shape):
            raise RankError(
                f"rank {rank} exceeds min dimension {min(meta.shape)} of {meta.name!r} (layer {layer}, {kind.value})"
            )
    if loader is None:
        def loader(meta):
            return load_matrix({meta.name: meta}, meta.name)

    def work(cell):
        layer, kind, meta = cell
        return make_profile(layer, kind, top_singular_values(loader(meta), rank), scheme)

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(workers) as pool:
            profiles = list(pool.map(work, cells))
    else:
        profiles = [work(c) for c in cells]
    profiles.sort(key=order_key)
    return ProfileSet(tuple(profiles), rank, model_id, scheme)
