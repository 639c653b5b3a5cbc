import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from matk.embedder import EmbedderConfig, extract_features, init_model
from matk.metrics import (MetricSpec, attack_loss, distance, load_mahalanobis, pairwise_distances,
                          project_psd, random_spd, save_mahalanobis)
from oracles import attack_loss_fd_error

CFG = EmbedderConfig((8, 8, 3), (32,), 8)
finite = st.floats(-1, 1, allow_nan=False)


def unit_rows(rng, n, d):
    v = rng.standard_normal((n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def test_distance_examples():
    e = MetricSpec()
    assert distance(e, [0.3, 0.4], [0.3, 0.4]) == 0
    assert distance(e, [1, 0], [0, 1]) == 2
    assert distance(MetricSpec.mahalanobis(np.diag([2.0, 1.0])), [1, 1], [0, 0]) == pytest.approx(3)


def test_distance_errors():
    with pytest.raises(ValueError, match="dimension"):
        distance(MetricSpec(), [1, 0], [1, 0, 0])
    with pytest.raises(ValueError, match="semidefinite"):
        MetricSpec.mahalanobis(np.diag([1.0, -0.1]))
    with pytest.raises(ValueError, match="symmetric"):
        MetricSpec.mahalanobis([[1.0, 0.5], [0.0, 1.0]])


def test_distance_clamped_non_negative():
    m = np.diag([1.0, -1e-9])
    d = distance(MetricSpec.mahalanobis(m), [0, 1], [0, 0])
    assert d == 0.0


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, 5, elements=finite), arrays(np.float64, 5, elements=finite), st.integers(0, 1000))
def test_distance_symmetric_exact(p, x, seed):
    m = random_spd(5, 10, seed)
    for metric in (MetricSpec(), MetricSpec.mahalanobis(m)):
        assert distance(metric, p, x) == distance(metric, x, p)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, 6, elements=finite), arrays(np.float64, 6, elements=finite))
def test_identity_mahalanobis_equals_euclidean(p, x):
    assert abs(distance(MetricSpec.mahalanobis(np.eye(6)), p, x) - distance(MetricSpec(), p, x)) <= 1e-6


def test_unit_norm_identity():
    rng = np.random.default_rng(0)
    p, x = unit_rows(rng, 50, 7), unit_rows(rng, 50, 7)
    for a, b in zip(p, x):
        assert abs(distance(MetricSpec(), a, b) - (2 - 2 * a @ b)) <= 1e-5


def test_pairwise_zero_diagonal():
    f = unit_rows(np.random.default_rng(1), 3, 4)
    assert np.all(np.diag(pairwise_distances(MetricSpec(), f, f)) <= 1e-12)


def test_pairwise_identity_m():
    rng = np.random.default_rng(2)
    p, x = rng.standard_normal((5, 3)), rng.standard_normal((4, 3))
    np.testing.assert_allclose(pairwise_distances(MetricSpec.mahalanobis(np.eye(3)), p, x),
                               pairwise_distances(MetricSpec(), p, x), atol=1e-6)


@pytest.mark.parametrize("kind", ["euclidean", "mahalanobis"])
def test_pairwise_matches_scalar_oracle(kind):
    rng = np.random.default_rng(3)
    metric = MetricSpec() if kind == "euclidean" else MetricSpec.mahalanobis(random_spd(2, 5, 0))
    p, x = rng.standard_normal((4, 2)), rng.standard_normal((3, 2))
    d = pairwise_distances(metric, p, x)
    for i in range(4):
        for j in range(3):
            assert d[i, j] == pytest.approx(distance(metric, p[i], x[j]), abs=1e-12)
    np.testing.assert_allclose(pairwise_distances(metric, x, p), d.T, atol=1e-12)


def test_pairwise_dim_mismatch():
    with pytest.raises(ValueError):
        pairwise_distances(MetricSpec(), np.ones((2, 3)), np.ones((2, 4)))


def test_project_psd_examples():
    np.testing.assert_allclose(project_psd(np.eye(3)), np.eye(3), atol=1e-12)
    np.testing.assert_allclose(project_psd(np.diag([1.0, -0.5])), np.diag([1.0, 0.0]), atol=1e-12)
    with pytest.raises(ValueError, match="symmetric"):
        project_psd([[1.0, 2.0], [0.0, 1.0]])


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 8), st.integers(0, 10_000))
def test_project_psd_random(n, seed):
    a = np.random.default_rng(seed).standard_normal((n, n))
    p = project_psd(a + a.T)
    assert np.linalg.eigvalsh(p).min() >= -1e-12
    assert np.linalg.norm(project_psd(p) - p) <= 1e-6


def test_random_spd_conditioning():
    m = random_spd(16, 10, 4)
    vals = np.linalg.eigvalsh(m)
    assert vals.min() == pytest.approx(1.0) and vals.max() == pytest.approx(10.0)


def test_load_mahalanobis_symmetrises_and_projects(tmp_path):
    m = np.array([[2.0, 0.3], [0.1, -1e-10]])
    path = tmp_path / "M.json"
    path.write_text(json.dumps({"dim": 2, "rows": m.tolist()}))
    spec = load_mahalanobis(path)
    np.testing.assert_allclose(spec.M, spec.M.T, atol=0)
    assert np.linalg.eigvalsh(spec.M).min() >= -1e-12
    save_mahalanobis(random_spd(3, 5, 1), tmp_path / "R.json")
    np.testing.assert_allclose(load_mahalanobis(tmp_path / "R.json").M, random_spd(3, 5, 1), atol=1e-12)


def _images(seed, n):
    return np.random.default_rng(seed).uniform(0, 255, (n, 8, 8, 3)).astype(np.float32)


def test_attack_loss_one_probe_is_distance():
    model = init_model(CFG, 0)
    probe, gal = _images(0, 1), _images(1, 1)[0]
    loss, grad = attack_loss([model], MetricSpec(), probe, gal)
    fp, fx = extract_features(model, probe)[0], extract_features(model, gal[None])[0]
    assert loss == pytest.approx(distance(MetricSpec(), fp, fx), rel=1e-5)
    assert grad.shape == gal.shape


@pytest.mark.parametrize("k", [2, 3])
def test_attack_loss_copies_invariant(k):
    model = init_model(CFG, 0)
    probes, gal = _images(2, 4), _images(3, 1)[0]
    l1, g1 = attack_loss([model], MetricSpec(), probes, gal)
    lk, gk = attack_loss([model] * k, MetricSpec(), probes, gal)
    assert lk == pytest.approx(l1, rel=1e-6)
    np.testing.assert_allclose(gk, g1, rtol=1e-5, atol=1e-9)


def test_attack_loss_is_mean_over_models_and_probes():
    a, b = init_model(CFG, 0), init_model(CFG, 1)
    probes, gal = _images(4, 3), _images(5, 1)[0]
    loss, _ = attack_loss([a, b], MetricSpec(), probes, gal)
    expect = np.mean([np.mean([distance(MetricSpec(), fp, extract_features(m, gal[None])[0])
                               for fp in extract_features(m, probes)]) for m in (a, b)])
    assert loss == pytest.approx(expect, rel=1e-5)


@pytest.mark.parametrize("kind", ["euclidean", "mahalanobis"])
def test_attack_loss_gradient_fd(kind):
    metric = MetricSpec() if kind == "euclidean" else MetricSpec.mahalanobis(random_spd(8, 10, 0))
    models = [init_model(CFG, 0), init_model(CFG, 1)]
    coords = np.random.default_rng(6).choice(CFG.input_dim, 20, replace=False)
    assert attack_loss_fd_error(models, metric, _images(6, 3), _images(7, 1)[0], coords) <= 1e-3


def test_attack_loss_errors():
    model = init_model(CFG, 0)
    with pytest.raises(ValueError, match="empty"):
        attack_loss([model], MetricSpec(), [], _images(0, 1)[0])
    other = init_model(EmbedderConfig((8, 4, 3), (32,), 8), 0)
    with pytest.raises(ValueError, match="input shape"):
        attack_loss([model, other], MetricSpec(), _images(0, 2), _images(1, 1)[0])
