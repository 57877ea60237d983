"""CSV exports of plot data: std vector, clustering vector, heatmap, scatter, profiles, samples."""

from __future__ import annotations

import csv
import io
from collections.abc import Mapping

import numpy as np

from .clustering import heatmap_grid, pca_project
from .errors import PreconditionError
from .report import Fingerprint
from .spectral import normalize_profile
from .taxonomy import KIND_NAMES, KINDS, ProjectionKind


def _fmt(v) -> str:
    return "" if v is None else repr(v) if isinstance(v, float) else str(v)


def _write(header, rows, comments=()) -> str:
    buf = io.StringIO()
    for c in comments:
        buf.write(f"# {c}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def std_csv(f: Fingerprint) -> str:
    sv = f.std_vector
    return _write(
        ["kind", "raw", "normalized"],
        zip(KIND_NAMES, sv.raw, sv.normalized),
        [f"model_id={f.model_id} normalization={sv.normalization.value}"],
    )


def cv_csv(f: Fingerprint) -> str:
    if f.clustering_vector is None:
        raise PreconditionError(f"{f.model_id}: report has no clustering vector (k={f.parameters.k})")
    return _write(["kind", "mean"], zip(KIND_NAMES, f.clustering_vector.means))


def heatmap_csv(f: Fingerprint) -> str:
    rows = heatmap_grid(f.label_grid)
    return _write(["layer", *KIND_NAMES], ([i, *row] for i, row in enumerate(rows)))


def profiles_csv(f: Fingerprint) -> str:
    scheme = f.parameters.profile_normalization
    rows = []
    for p in f.profiles:
        normed = p.normalized or (normalize_profile(p.values, scheme).tolist() if p.values and p.values[0] > 0 else [None] * p.rank)
        for i, (s, sn) in enumerate(zip(p.values, normed)):
            rows.append([p.layer, p.kind.value, i, s, sn])
    return _write(["layer", "kind", "index", "sigma", "sigma_normalized"], rows)


def scatter_csv(f: Fingerprint) -> str:
    pset = f.profile_set()
    proj = pca_project(pset)
    labels = {}
    for layer, row in enumerate(f.label_grid.labels):
        for j, v in enumerate(row):
            labels[(layer, KINDS[j])] = v
    rows = [
        [p.layer, p.kind.value, float(x), float(y), labels.get((p.layer, p.kind))]
        for p, (x, y) in zip(pset.profiles, proj.points)
    ]
    comments = [f"explained_variance={proj.explained[0]!r},{proj.explained[1]!r} degenerate={proj.degenerate}"]
    return _write(["layer", "kind", "x", "y", "label"], rows, comments)


def dist_csv(samples: Mapping[ProjectionKind, np.ndarray], n: int, seed: int) -> str:
    rows = ([k.value, float(v)] for k in KINDS if k in samples for v in samples[k])
    return _write(["kind", "value"], rows, [f"seed={seed} n={n}"])


REPORT_EXPORTS = {
    "std": std_csv,
    "cv": cv_csv,
    "heatmap": heatmap_csv,
    "scatter": scatter_csv,
    "profiles": profiles_csv,
}
