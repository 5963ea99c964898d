import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from srcspace import inverse, sim
from srcspace.errors import InvalidConfigError, InvalidInputError


def _toy():
    # 3 sensors, 2 sources (3 components each)
    return np.array([
        [1.0, 0.5, 0.0, 0.2, 0.0, 0.3],
        [0.0, 1.0, 0.4, 0.0, 0.7, 0.1],
        [0.3, 0.0, 1.0, 0.5, 0.2, 0.0],
    ])


def test_lambda2_at_default_snr():
    op = inverse.make_inverse_operator(_toy(), np.eye(3), snr=3.0)
    assert op.lambda2 == pytest.approx(1 / 9, abs=0)


def test_min_norm_closed_form():
    G = _toy()
    lam2 = 1 / 9
    expected = G.T @ np.linalg.inv(G @ G.T + lam2 * np.eye(3))
    op = inverse.make_inverse_operator(G, np.eye(3), snr=3.0, method="min_norm")
    assert np.max(np.abs(op.weights - expected)) < 1e-10


def test_min_norm_hand_computed():
    # orthonormal gains: weights are G^T / (1 + lambda^2) = 0.9 G^T at SNR 3
    G = np.zeros((3, 6))
    G[0, 0] = G[1, 1] = G[2, 2] = 1.0
    op = inverse.make_inverse_operator(G, np.eye(3), snr=3.0)
    assert np.max(np.abs(op.weights - 0.9 * G.T)) < 1e-12
    # one sensor, one component: g / (g^2 + lambda^2) = 2 / (4 + 1) with snr 1
    op1 = inverse.make_inverse_operator(np.array([[2.0, 0.0, 0.0]]), np.eye(1), snr=1.0)
    assert op1.weights[0, 0] == pytest.approx(0.4, abs=1e-15)


def test_min_norm_with_noise_covariance_whitens():
    G = _toy()
    C = np.diag([4.0, 9.0, 1.0])
    W = np.diag(1 / np.sqrt(np.diag(C)))
    Gw = W @ G
    expected = Gw.T @ np.linalg.inv(Gw @ Gw.T + np.eye(3) / 9) @ W
    op = inverse.make_inverse_operator(G, C, snr=3.0)
    assert np.max(np.abs(op.weights - expected)) < 1e-10


def test_lcmv_unit_gain():
    rng = np.random.default_rng(0)
    G = rng.normal(size=(8, 6))
    X = rng.normal(size=(8, 500))
    op = inverse.make_inverse_operator(G, np.eye(8), method="lcmv", data_cov=inverse.data_covariance(X))
    gains = np.sum(op.weights * G.T, axis=1)
    assert np.max(np.abs(gains - 1.0)) < 1e-10
    assert not op.degenerate.any()


def test_lcmv_flags_degenerate_rows():
    G = _toy().copy()
    G[:, 4] = 0.0
    X = np.random.default_rng(1).normal(size=(3, 200))
    op = inverse.make_inverse_operator(G, np.eye(3), method="lcmv", data_cov=inverse.data_covariance(X))
    assert op.degenerate[4] and op.degenerate.sum() == 1
    assert np.all(op.weights[4] == 0)


def test_lcmv_needs_data_covariance():
    with pytest.raises(InvalidInputError):
        inverse.make_inverse_operator(_toy(), np.eye(3), method="lcmv")


@pytest.mark.parametrize("method", ["dspm", "sloreta"])
def test_normalised_rows_are_positive_rescalings(method):
    G = _toy()
    mn = inverse.make_inverse_operator(G, np.eye(3), method="min_norm")
    nr = inverse.make_inverse_operator(G, np.eye(3), method=method)
    ratio = nr.weights / mn.weights
    for i in range(len(ratio)):
        r = ratio[i][np.abs(mn.weights[i]) > 1e-12]
        assert np.all(r > 0) and np.allclose(r, r[0], rtol=1e-12)
    x = np.random.default_rng(2).normal(size=(3, 50))
    a = inverse.apply_inverse(mn, x).data
    b = inverse.apply_inverse(nr, x).data
    assert np.array_equal(np.argmax(a, axis=-1), np.argmax(b, axis=-1))


def test_dspm_rows_have_unit_noise_sd():
    op = inverse.make_inverse_operator(_toy(), np.eye(3), method="dspm")
    assert np.allclose(np.sqrt(np.sum(op.weights ** 2, axis=1)), 1.0, atol=1e-12)


def test_sloreta_resolution_diagonal_is_one():
    G = _toy()
    op = inverse.make_inverse_operator(G, np.eye(3), method="sloreta")
    mn = inverse.make_inverse_operator(G, np.eye(3), method="min_norm")
    res = np.sum(mn.weights * G.T, axis=1)
    assert np.allclose(op.normalization, 1 / np.sqrt(res), rtol=1e-12)


@given(st.integers(2, 20), st.integers(0, 10 ** 6))
@settings(max_examples=100, deadline=None)
def test_whitener_identity_on_retained_space(n, seed):
    rng = np.random.default_rng(seed)
    rank = int(rng.integers(1, n + 1))
    A = rng.normal(size=(n, rank)) * rng.uniform(0.1, 10, size=rank)
    C = A @ A.T
    W = inverse.build_whitener(C)
    # independent oracle: C C^+ projects onto the range of C
    P = C @ np.linalg.pinv(C, rcond=1e-10, hermitian=True)
    assert np.linalg.norm(W @ C @ W.T - P, "fro") < 1e-8


def test_whitener_rejects_zero():
    with pytest.raises(InvalidInputError):
        inverse.build_whitener(np.zeros((3, 3)))


def test_noise_covariance_forms():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(4, 400)) * np.array([[1.0], [2.0], [3.0], [4.0]])
    reg = inverse.estimate_noise_covariance(x, form="regular")
    xc = x - x.mean(axis=1, keepdims=True)
    assert np.allclose(reg.matrix, xc @ xc.T / 400)  # population normalisation
    diag = inverse.estimate_noise_covariance(x, form="diagonal")
    assert np.allclose(diag.matrix, np.diag(np.diag(reg.matrix)))
    sc = inverse.estimate_noise_covariance(x, form="scalar")
    assert np.allclose(sc.matrix, np.trace(reg.matrix) / 4 * np.eye(4))
    with pytest.raises(InvalidConfigError):
        inverse.estimate_noise_covariance(x, form="banded")
    with pytest.raises(InvalidInputError):
        inverse.estimate_noise_covariance(x[:, :5], form="regular")


def test_noise_covariance_defaults_to_silence(sensors):
    n = 400
    labels = np.r_[np.zeros(200), np.ones(200)].astype(np.int8)
    data = np.random.default_rng(0).normal(size=(sensors.n_sensors, n))
    data[:, 200:] *= 100.0
    rec = sim.SensorRecording(data, 100.0, sim.StimulusTrack(labels, 100.0), sensors)
    cov = inverse.estimate_noise_covariance(rec, form="diagonal")
    assert cov.n_samples == 200
    assert np.all(np.diag(cov.matrix) < 2.0)


def test_apply_inverse_vec_and_mag(template, sensors):
    lf = sim.compute_lead_field(template, sensors)
    op = inverse.make_inverse_operator(lf, np.eye(sensors.n_sensors))
    x = np.random.default_rng(0).normal(size=(sensors.n_sensors, 20))
    vec = inverse.apply_inverse(op, x, "vec", template)
    mag = inverse.apply_inverse(op, x, "mag", template)
    assert vec.data.shape == (template.n_voxels, 3, 20)
    assert np.all(mag.data >= 0)
    assert np.allclose(mag.data, np.linalg.norm(vec.data, axis=1))
    assert vec.flat().shape == (template.n_voxels * 3, 20)
    with pytest.raises(InvalidConfigError):
        inverse.apply_inverse(op, x, "abs")
    with pytest.raises(InvalidInputError):
        inverse.apply_inverse(op, x[:5])


def test_operator_errors():
    with pytest.raises(InvalidConfigError) as e:
        inverse.make_inverse_operator(_toy(), np.eye(3), method="beamformer")
    for m in ("min_norm", "dspm", "sloreta", "lcmv"):
        assert m in str(e.value)
    with pytest.raises(InvalidConfigError):
        inverse.make_inverse_operator(_toy(), np.eye(3), snr=0)
    with pytest.raises(InvalidInputError):
        inverse.make_inverse_operator(_toy(), np.eye(4))


def test_min_norm_recovers_focal_source_location(template, sensors):
    lf = sim.compute_lead_field(template, sensors)
    v = int(np.argmax(np.linalg.norm(template.centers, axis=1)))
    q = np.cross([0, 0, 1.0], template.centers[v])
    src = np.zeros((template.n_voxels, 3))
    src[v] = q / np.linalg.norm(q)
    b = sim.forward(lf, src.reshape(-1, 1))
    op = inverse.make_inverse_operator(lf, np.eye(sensors.n_sensors) * np.var(b) * 1e-4, snr=3.0, method="sloreta")
    est = inverse.apply_inverse(op, b, "mag")
    peak = int(np.argmax(est.data[:, 0]))
    assert np.linalg.norm(template.centers[peak] - template.centers[v]) <= 2 * template.voxel_size_mm
