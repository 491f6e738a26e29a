import math

import numpy as np
import pytest
from hypothesis import given
import hypothesis.strategies as st

from app.errors import DataError, DomainError, OracleAccessError, ShapeError
from app.models import ProbeSection
from app.services.data_service import DomainDataset
from app.services.divergence import (build_bound_report, compute_B, compute_V, estimate_h_divergence,
                                     estimate_lambda, js_distance, js_matrix, label_distribution,
                                     weighted_source_risk)

FAST_PROBE = ProbeSection(hidden=[8], epochs=10, batch_size=32, learning_rate=0.5, optimizer="sgd")


def simplex(size):
    return st.lists(st.floats(0.01, 1.0), min_size=size, max_size=size).map(lambda w: np.asarray(w) / np.sum(w))


# --- complexity terms ---------------------------------------------------------

def test_complexity_terms_reference_values():
    uniform = compute_B([1 / 3, 1 / 3, 1 / 3], M=3, d=5, n=300, delta=0.05)
    one_hot = compute_B([1.0, 0.0, 0.0], M=3, d=5, n=300, delta=0.05)
    assert abs(uniform - 0.95971) < 1e-4
    assert abs(one_hot - 1.66226) < 1e-4
    assert abs(compute_V(d=5, n=300, delta=0.05) - 0.95465) < 1e-4


@pytest.mark.parametrize("M", [2, 3, 5])
def test_one_hot_over_uniform_ratio_is_sqrt_m(M):
    one_hot = compute_B(np.eye(M)[0], M, d=3, n=500, delta=0.1)
    uniform = compute_B(np.full(M, 1.0 / M), M, d=3, n=500, delta=0.1)
    assert abs(one_hot / uniform - math.sqrt(M)) < 1e-12


@given(simplex(4))
def test_uniform_alpha_minimises_b(alpha):
    uniform = compute_B(np.full(4, 0.25), 4, d=5, n=1000, delta=0.05)
    assert compute_B(alpha, 4, d=5, n=1000, delta=0.05) >= uniform - 1e-12


def test_v_shrinks_with_more_samples_and_looser_delta():
    values = [compute_V(5, n, 0.05) for n in (100, 1000, 10_000)]
    assert values[0] > values[1] > values[2]
    assert compute_V(5, 1000, 0.01) > compute_V(5, 1000, 0.1)


@pytest.mark.parametrize("n, delta", [(0, 0.05), (100, 0.0), (100, 1.0), (-5, 0.5)])
def test_invalid_sample_terms_are_domain_errors(n, delta):
    with pytest.raises(DomainError):
        compute_V(5, n, delta)
    with pytest.raises(DomainError):
        compute_B([0.5, 0.5], 2, 5, n, delta)


def test_b_rejects_alpha_off_the_simplex_or_of_wrong_size():
    with pytest.raises(DomainError):
        compute_B([0.7, 0.7], 2, 5, 100, 0.05)
    with pytest.raises(ShapeError):
        compute_B([0.5, 0.5], 3, 5, 100, 0.05)


# --- Jensen-Shannon -----------------------------------------------------------

def test_js_reference_values():
    assert js_distance([0.2, 0.3, 0.5], [0.2, 0.3, 0.5]) == 0.0
    assert abs(js_distance([1.0, 0.0], [0.0, 1.0]) - 0.83255) < 1e-5
    assert abs(js_distance([0.5, 0.5], [1.0, 0.0]) - 0.46450) < 1e-5


@given(simplex(3), simplex(3), simplex(3))
def test_js_is_a_bounded_symmetric_metric(p, q, r):
    pq = js_distance(p, q)
    assert abs(pq - js_distance(q, p)) < 1e-12
    assert 0.0 <= pq <= math.sqrt(math.log(2.0)) + 1e-12
    assert pq <= js_distance(p, r) + js_distance(r, q) + 1e-9


def test_js_rejects_mismatched_histograms():
    with pytest.raises(ShapeError):
        js_distance([0.5, 0.5], [0.2, 0.3, 0.5])


def test_label_distribution_and_matrix():
    a = DomainDataset("a", np.zeros((4, 1)), [0, 0, 1, 2], num_classes=4)
    b = DomainDataset("b", np.zeros((2, 1)), oracle=[1, 1])
    np.testing.assert_allclose(label_distribution(a), [0.5, 0.25, 0.25, 0.0])
    with pytest.raises(DataError):
        label_distribution(b)
    np.testing.assert_allclose(label_distribution(b, use_oracle=True), [0.0, 1.0])

    matrix = np.asarray(js_matrix([a, b], use_oracle=True))
    assert matrix.shape == (2, 2)
    np.testing.assert_allclose(np.diag(matrix), 0.0)
    assert matrix[0, 1] == matrix[1, 0] > 0


# --- probes -------------------------------------------------------------------

def test_h_divergence_of_identical_samples_is_zero(rng):
    x = rng.standard_normal((200, 2))
    assert estimate_h_divergence(x, x, FAST_PROBE, seed=0) < 1e-12


def test_h_divergence_of_separated_clusters_is_near_two(rng):
    a = rng.standard_normal((200, 2))
    b = rng.standard_normal((200, 2)) + 20.0
    assert estimate_h_divergence(a, b, FAST_PROBE, seed=0) > 1.9


def test_h_divergence_of_same_distribution_is_small(rng):
    a = rng.standard_normal((2000, 2))
    b = rng.standard_normal((2000, 2))
    assert estimate_h_divergence(a, b, FAST_PROBE, seed=0) < 0.3


def test_h_divergence_rejects_mismatched_dimensions(rng):
    with pytest.raises(ShapeError):
        estimate_h_divergence(np.ones((5, 2)), np.ones((5, 3)), FAST_PROBE, seed=0)
    with pytest.raises(DataError):
        estimate_h_divergence(np.ones((0, 2)), np.ones((5, 2)), FAST_PROBE, seed=0)


def two_clusters(rng, n=100):
    x = np.concatenate([rng.normal(-4.0, 0.5, (n, 2)), rng.normal(4.0, 0.5, (n, 2))])
    return x, np.repeat([0, 1], n)


def test_lambda_is_near_zero_when_one_labeling_fits_all_domains(rng):
    x, y = two_clusters(rng)
    source = DomainDataset("source_0", x, y)
    target = DomainDataset("target", x, oracle=y)
    assert estimate_lambda([source], target, [1.0], FAST_PROBE, seed=0) < 0.05


def test_lambda_is_one_when_target_labels_are_flipped(rng):
    x, y = two_clusters(rng)
    source = DomainDataset("source_0", x, y)
    target = DomainDataset("target", x, oracle=1 - y)
    assert abs(estimate_lambda([source], target, [1.0], FAST_PROBE, seed=0) - 1.0) < 1e-12


def test_lambda_needs_oracle_labels(rng):
    x, y = two_clusters(rng, n=10)
    with pytest.raises(OracleAccessError):
        estimate_lambda([DomainDataset("s", x, y)], DomainDataset("t", x), [1.0], FAST_PROBE, seed=0)


# --- report -------------------------------------------------------------------

def test_weighted_source_risk():
    s0 = DomainDataset("s0", np.zeros((4, 1)), [0, 0, 0, 0])
    s1 = DomainDataset("s1", np.zeros((2, 1)), [1, 1])
    predict_zero = lambda x: np.zeros(len(x), dtype=np.int64)
    assert weighted_source_risk(predict_zero, [s0, s1], [0.25, 0.75]) == 0.75


def test_bound_report_reassembles_total():
    report = build_bound_report([0.2, 0.3, 0.5], d=5, n=300, delta=0.05, h_divergence=0.4, source_risk=0.1,
                                lambda_hat=0.05, target_error=0.2, provenance={"seed": 0})
    reassembled = (report.weighted_source_risk + 0.5 * report.h_divergence_estimate + report.lambda_hat
                   + report.B_alpha + report.V)
    assert abs(report.bound_total - reassembled) < 1e-12
    assert report.M == 3 and report.vc_dimension_kind == "surrogate"
    assert report.provenance == {"seed": 0}


def test_bound_report_without_lambda_counts_it_as_zero():
    report = build_bound_report([0.5, 0.5], d=2, n=100, delta=0.1, h_divergence=0.0, source_risk=0.0)
    assert report.lambda_hat is None
    assert abs(report.bound_total - (report.B_alpha + report.V)) < 1e-12
