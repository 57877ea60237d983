import json
import math
from dataclasses import replace

import numpy as np
import pytest

from helpers import LLAMA, engineered_matrices, gaussian_matrices, write_model
from weightprint.errors import DegenerateError, ReportError, SchemeMismatchError
from weightprint.report import (
    Metric,
    Parameters,
    compare_fingerprints,
    fingerprint_paths,
    parse,
    serialize,
    with_comparison,
)
from weightprint.stats import StdNormalization, StdVector
from weightprint.taxonomy import KINDS


@pytest.fixture(scope="module")
def engineered(tmp_path_factory):
    d = write_model(tmp_path_factory.mktemp("eng"), engineered_matrices(layers=2, seed=0))
    return fingerprint_paths([d], LLAMA, Parameters(), model_id="eng")


@pytest.fixture(scope="module")
def gaussian_pair(tmp_path_factory):
    up = write_model(tmp_path_factory.mktemp("up"), gaussian_matrices([1, 2, 3, 4, 5, 6, 7], shape=(256, 256), seed=1))
    down = write_model(tmp_path_factory.mktemp("down"), gaussian_matrices([7, 6, 5, 4, 3, 2, 1], shape=(256, 256), seed=2))
    params = Parameters(rank=8)
    return fingerprint_paths([up], LLAMA, params, "up"), fingerprint_paths([down], LLAMA, params, "down")


def test_engineered_spectra_give_query_key_block(engineered):
    assert engineered.clustering_vector.means == (1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0)
    assert engineered.label_grid.labels == ((1, 1, 0, 0, 0, 0, 0),) * 2
    assert engineered.layer_count == 2
    assert len(engineered.profiles) == 14
    assert engineered.parameters == Parameters()


def test_scaled_fixture_same_vectors(tmp_path, engineered):
    d = write_model(tmp_path, engineered_matrices(layers=2, scale=3.7, seed=0), dtype="F64")
    base_d = write_model(tmp_path / "b", engineered_matrices(layers=2, scale=1.0, seed=0), dtype="F64")
    scaled = fingerprint_paths([d], LLAMA, Parameters())
    base = fingerprint_paths([base_d], LLAMA, Parameters())
    assert scaled.clustering_vector == base.clustering_vector == engineered.clustering_vector
    assert scaled.label_grid == base.label_grid
    np.testing.assert_allclose(scaled.std_vector.normalized, base.std_vector.normalized, rtol=1e-12)


def test_sixteen_layers_give_112_labels(tmp_path):
    d = write_model(tmp_path, engineered_matrices(layers=16, seed=3))
    fp = fingerprint_paths([d], LLAMA, Parameters(rank=16))
    assert fp.layer_count == 16
    assert len(fp.label_grid.flatten()) == 112 and len(fp.profiles) == 112


def test_build_is_reproducible(tmp_path):
    d = write_model(tmp_path, engineered_matrices(layers=3, seed=4))
    a = fingerprint_paths([d], LLAMA, Parameters(seed=5))
    b = fingerprint_paths([d], LLAMA, Parameters(seed=5), workers=3)
    assert serialize(a) == serialize(b)


def test_k3_has_no_clustering_vector(tmp_path):
    d = write_model(tmp_path, engineered_matrices(layers=2, seed=0))
    fp = fingerprint_paths([d], LLAMA, Parameters(k=3))
    assert fp.clustering_vector is None
    assert not fp.label_grid.aligned
    assert set(fp.label_grid.flatten()) <= {0, 1, 2}
    assert parse(serialize(fp)) == fp


def test_errors_carry_cell_context(tmp_path):
    mats = engineered_matrices(layers=2, seed=0)
    mats[(1, KINDS[5])] = np.zeros_like(mats[(1, KINDS[5])])
    d = write_model(tmp_path, mats)
    with pytest.raises(DegenerateError, match=r"layer 1, Up"):
        fingerprint_paths([d], LLAMA, Parameters())


# ---------------------------------------------------------------- comparison


def test_compare_self(engineered):
    for metric, expected in [(Metric.Cosine, 1.0), (Metric.L2, 0.0), (Metric.MaxAbsDiff, 0.0)]:
        r = compare_fingerprints(engineered, engineered, metric)
        assert r.std_vector_score == expected and r.clustering_vector_score == expected
        assert r.std_vector_diffs == (0.0,) * 7


def test_compare_orthogonal_std_vectors(engineered):
    a = replace(engineered, std_vector=StdVector((1.0,) + (0.0,) * 6, (1.0,) + (0.0,) * 6, StdNormalization.MaxOne))
    b = replace(engineered, std_vector=StdVector((0.0, 1.0) + (0.0,) * 5, (0.0, 1.0) + (0.0,) * 5, StdNormalization.MaxOne))
    assert compare_fingerprints(a, b).std_vector_score == 0.0


def test_compare_hand_computed_l2(engineered):
    up = tuple(k / 7 for k in range(1, 8))
    down = tuple(k / 7 for k in range(7, 0, -1))
    a = replace(engineered, std_vector=StdVector(up, up, StdNormalization.MaxOne))
    b = replace(engineered, std_vector=StdVector(down, down, StdNormalization.MaxOne))
    # |2k - 8| / 7 for k = 1..7 -> sqrt(36+16+4+0+4+16+36) / 7
    expected = math.sqrt(112) / 7
    r = compare_fingerprints(a, b, Metric.L2)
    assert r.std_vector_score == pytest.approx(expected, rel=1e-15)
    assert compare_fingerprints(a, b, Metric.MaxAbsDiff).std_vector_score == pytest.approx(6 / 7, rel=1e-15)
    cos = (2 * (1 * 7 + 2 * 6 + 3 * 5) + 16) / 140
    assert compare_fingerprints(a, b).std_vector_score == pytest.approx(cos, rel=1e-15)


def test_compare_generator_fixtures(gaussian_pair):
    up, down = gaussian_pair
    r = compare_fingerprints(up, down, Metric.L2)
    assert r.std_vector_score == pytest.approx(math.sqrt(112) / 7, rel=0.02)


@pytest.mark.parametrize("metric", list(Metric))
def test_compare_symmetric(gaussian_pair, metric):
    up, down = gaussian_pair
    ab, ba = compare_fingerprints(up, down, metric), compare_fingerprints(down, up, metric)
    assert ab.std_vector_score == ba.std_vector_score
    assert ab.clustering_vector_score == ba.clustering_vector_score


def test_compare_scheme_mismatch(engineered):
    other = replace(engineered, parameters=replace(engineered.parameters, std_normalization=StdNormalization.MinMax))
    with pytest.raises(SchemeMismatchError, match="MaxOne.*MinMax"):
        compare_fingerprints(engineered, other)


def test_compare_partial_mismatch(engineered):
    sv = engineered.std_vector
    partial = replace(engineered, std_vector=replace(sv, normalized=(None,) + sv.normalized[1:]))
    with pytest.raises(SchemeMismatchError, match="different kinds"):
        compare_fingerprints(engineered, partial)


# ---------------------------------------------------------------- serialization


def test_round_trip(engineered, gaussian_pair):
    for fp in (engineered, *gaussian_pair, with_comparison(gaussian_pair[0], gaussian_pair[1])):
        text = serialize(fp)
        again = parse(text)
        assert again == fp
        assert serialize(again) == text


def test_reparsed_self_compare_is_exactly_one(engineered):
    again = parse(serialize(engineered))
    r = compare_fingerprints(again, engineered)
    assert r.std_vector_score == 1.0 and r.clustering_vector_score == 1.0


def test_report_fields(engineered):
    d = json.loads(serialize(engineered))
    for key in ("model_id", "layer_count", "parameters", "groups", "std_vector", "clustering_vector", "label_grid", "profiles"):
        assert key in d
    assert [g["kind"] for g in d["groups"]] == ["Q", "K", "V", "O", "Gate", "Up", "Down"]
    assert d["parameters"]["std_normalization"] == "MaxOne"
    assert d["parameters"]["profile_normalization"] == "NormalizeByTop"
    assert len(d["label_grid"]) == 2 and len(d["label_grid"][0]) == 7


def test_truncated_report(engineered):
    text = serialize(engineered)
    with pytest.raises(ReportError, match=r"byte offset \d+"):
        parse(text[:200])


def test_schema_violation_names_path(engineered):
    d = json.loads(serialize(engineered))
    d["groups"][3]["std"] = "wide"
    with pytest.raises(ReportError, match=r"\$\.groups\[3\]\.std"):
        parse(json.dumps(d))


def test_version_mismatch(engineered):
    d = json.loads(serialize(engineered))
    d["schema_version"] = 99
    with pytest.raises(ReportError, match="schema_version"):
        parse(json.dumps(d))
