import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedmt.errors import InvalidMatrix, PartitionMismatch, SingularNoise, UnsupportedK
from fedmt.projection import (
    LabelSpaceSpec,
    ProjectionMatrix,
    Role,
    build_hierarchical_q,
    build_semg_q,
    build_symmetric_noise_t,
    penrose_residuals,
    pseudo_inverse,
)


def test_hierarchical_two_one():
    q = build_hierarchical_q(LabelSpaceSpec(3, partition=(2, 1)))
    np.testing.assert_array_equal(q.entries, [[1, 1, 0], [0, 0, 1]])
    np.testing.assert_array_equal(q.pinv, [[0.5, 0], [0.5, 0], [0, 1]])
    assert q.role is Role.LABEL_SPACE


def test_hierarchical_singletons_is_identity():
    q = build_hierarchical_q((1, 1, 1))
    np.testing.assert_array_equal(q.entries, np.eye(3))
    np.testing.assert_array_equal(q.pinv, np.eye(3))
    assert q.is_identity


def test_hierarchical_closed_form_matches_svd():
    q = build_hierarchical_q((3, 2))
    np.testing.assert_allclose(q.pinv[:3, 0], 1 / 3)
    np.testing.assert_allclose(q.pinv[3:, 1], 1 / 2)
    np.testing.assert_allclose(q.pinv, np.linalg.pinv(q.entries), atol=1e-10)
    np.testing.assert_allclose(q.pinv, pseudo_inverse(q), atol=1e-10)


def test_row_stochastic_variant():
    q = build_hierarchical_q((2, 3), row_stochastic=True)
    np.testing.assert_allclose(q.entries.sum(axis=1), 1.0)
    np.testing.assert_allclose(q.pinv, np.linalg.pinv(q.entries), atol=1e-10)


def test_partition_mismatch():
    with pytest.raises(PartitionMismatch):
        LabelSpaceSpec(4, partition=(2, 1))
    with pytest.raises(PartitionMismatch):
        LabelSpaceSpec(2, partition=(2, 0))


def test_noise_two_classes_against_direct_inverse():
    t = build_symmetric_noise_t(2, 0.2)
    np.testing.assert_allclose(t.entries, [[0.8, 0.2], [0.2, 0.8]], atol=1e-15)
    (a, b), (c, d) = t.entries
    direct = np.array([[d, -b], [-c, a]]) / (a * d - b * c)
    np.testing.assert_allclose(t.pinv, direct, atol=1e-12)
    np.testing.assert_allclose(t.pinv, [[4 / 3, -1 / 3], [-1 / 3, 4 / 3]], atol=1e-12)


def test_noise_free_is_identity():
    t = build_symmetric_noise_t(5, 0.0)
    np.testing.assert_array_equal(t.entries, np.eye(5))
    np.testing.assert_array_equal(t.pinv, np.eye(5))


def test_noise_inverse_column_sums():
    t = build_symmetric_noise_t(10, 0.4)
    np.testing.assert_allclose(t.pinv.sum(axis=0), 1.0, atol=1e-12)
    np.testing.assert_allclose(np.diag(t.entries), 0.6)


def test_noise_singular_and_out_of_range():
    with pytest.raises(SingularNoise):
        build_symmetric_noise_t(2, 0.5)
    with pytest.raises(ValueError):
        build_symmetric_noise_t(3, 0.9)


def test_pseudo_inverse_identity_and_blocks():
    np.testing.assert_allclose(pseudo_inverse(np.eye(4)), np.eye(4), atol=1e-15)
    q = build_hierarchical_q((2, 2))
    closed = np.array([[0.5, 0], [0.5, 0], [0, 0.5], [0, 0.5]])
    np.testing.assert_allclose(pseudo_inverse(q), closed, atol=1e-10)


def test_pseudo_inverse_penrose_semg():
    q = build_semg_q(5)
    p = pseudo_inverse(q)
    assert max(penrose_residuals(q.entries, p)) < 1e-8
    np.testing.assert_allclose(q.entries @ p @ q.entries, q.entries, atol=1e-8)


def test_pseudo_inverse_drops_tiny_singular_values():
    a = np.diag([1.0, 1e-12])
    np.testing.assert_allclose(pseudo_inverse(a), np.diag([1.0, 0.0]))


def test_semg_matrices():
    q5 = build_semg_q(5)
    np.testing.assert_allclose(q5.entries[0], [0.6, 0.4, 0, 0, 0])
    np.testing.assert_allclose(q5.entries.sum(axis=1), 1.0, atol=1e-12)
    q10 = build_semg_q(10)
    np.testing.assert_allclose(q10.entries[1], [0, 0, 0, 0.2, 0.3, 0.3, 0.2, 0, 0, 0])
    np.testing.assert_allclose(q10.entries.sum(axis=1), 1.0, atol=1e-12)
    with pytest.raises(UnsupportedK):
        build_semg_q(7)


@pytest.mark.parametrize(
    "entries, role",
    [
        ([[0.5, 0.6]], Role.LABEL_SPACE),
        ([[1.2, -0.2], [0, 1]], Role.NOISE),
        ([[0.5, 0.5], [0.5, 0.5]], Role.NOISE),
        ([[1, 0, 0], [0, 1, 0]], Role.NOISE),
        ([[0, 0], [1, 1]], Role.LABEL_SPACE),
    ],
)
def test_invalid_matrices(entries, role):
    with pytest.raises(InvalidMatrix):
        ProjectionMatrix(entries, role)


def test_orientation_views():
    t = ProjectionMatrix([[0.7, 0.3], [0.1, 0.9]], Role.NOISE)
    np.testing.assert_array_equal(t.observation_map, t.entries.T)
    np.testing.assert_allclose(t.label_weights, np.linalg.inv(t.entries).T)
    np.testing.assert_allclose(t.class_weights, np.linalg.inv(t.entries).sum(axis=0))
    q = build_hierarchical_q((3, 1))
    np.testing.assert_allclose(q.class_weights, [1 / 3, 1 / 3, 1 / 3, 1.0])


def test_json_round_trip_is_bit_stable():
    for m in (build_symmetric_noise_t(7, 0.3), build_semg_q(10), build_hierarchical_q((2, 3))):
        text = m.to_json()
        doc = json.loads(text)
        assert set(doc) == {"rows", "cols", "role", "entries"}
        back = ProjectionMatrix.from_json(text)
        assert back == m
        assert back.entries.tobytes() == m.entries.tobytes()
        assert back.to_json() == text


def test_matrix_is_read_only():
    q = build_hierarchical_q((2, 1))
    with pytest.raises(ValueError):
        q.entries[0, 0] = 5.0


valid_noise = st.integers(2, 12).flatmap(
    lambda K: st.tuples(st.just(K), st.floats(0.0, (K - 1) / K - 1e-3))
)


@settings(max_examples=200, deadline=None)
@given(valid_noise)
def test_noise_inverse_properties(kx):
    K, xi = kx
    t = build_symmetric_noise_t(K, xi)
    np.testing.assert_allclose(t.entries @ t.pinv, np.eye(K), atol=1e-9)
    np.testing.assert_allclose(t.pinv.sum(axis=0), 1.0, atol=1e-9)
    np.testing.assert_allclose(t.class_weights, 1.0, atol=1e-9)


partitions = st.lists(st.integers(1, 5), min_size=1, max_size=6)


@settings(max_examples=200, deadline=None)
@given(partitions)
def test_hierarchical_pinv_properties(part):
    q = build_hierarchical_q(part)
    svd = pseudo_inverse(q.entries)
    np.testing.assert_allclose(q.pinv, svd, atol=1e-9)
    # full row rank, so pinv(pinv(Q)) == Q
    np.testing.assert_allclose(pseudo_inverse(q.pinv), q.entries, atol=1e-8)
    assert max(penrose_residuals(q.entries, svd)) < 1e-8
