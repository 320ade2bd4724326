import math

import numpy as np
import pytest

from fmi.numerics import make_rng, random_orthogonal
from fmi.scm import (
    FIIF,
    PIIF,
    DimensionError,
    EnvironmentSpec,
    Intervention,
    SCMSpec,
    mix,
    sample_latent,
    unmix,
)


def unit(m, k=0):
    w = np.zeros(m)
    w[k] = 1.0
    return w


def env_for(scm, intervention=Intervention()):
    return EnvironmentSpec(id="e", scm=scm, intervention=intervention)


def test_fixed_true_feature_gives_label_one():
    scm = SCMSpec(m=3, o=2, w_true=unit(3))
    iv = Intervention(target="true", kind="atomic", value=(1.0, 0.0, 0.0))
    _, _, y = sample_latent(env_for(scm, iv), 50, make_rng(0))
    assert np.all(y == 1)


def test_label_noise_rate():
    q, n = 0.25, 100_000
    scm = SCMSpec(m=4, o=2, w_true=unit(4, 2), q=q)
    z_true, _, y = sample_latent(env_for(scm), n, make_rng(1))
    clean = (z_true @ scm.w_true > 0).astype(int)
    rate = np.mean(y != clean)
    # 3 sigma binomial bound: 3 * sqrt(q (1 - q) / n) = 0.0041
    bound = 3 * math.sqrt(q * (1 - q) / n)
    assert bound <= 0.006
    assert abs(rate - q) <= bound


def test_atomic_spurious_is_exact():
    scm = SCMSpec(m=2, o=3, w_true=unit(2))
    iv = Intervention(target="spu", kind="atomic", value=(0.0, 0.0, 0.0))
    _, z_spu, _ = sample_latent(env_for(scm, iv), 200, make_rng(2))
    assert np.all(z_spu == 0.0)


def test_atomic_dimension_mismatch():
    scm = SCMSpec(m=2, o=3, w_true=unit(2))
    iv = Intervention(target="spu", kind="atomic", value=(0.0, 0.0))
    with pytest.raises(DimensionError):
        sample_latent(env_for(scm, iv), 10, make_rng(2))


@pytest.mark.parametrize("graph", [FIIF, PIIF])
def test_uniform_intervention_decorrelates(graph):
    scm = SCMSpec(m=3, o=4, w_true=unit(3), graph_kind=graph, q=0.1)
    iv = Intervention(target="spu", kind="stochastic", params={"family": "uniform", "low": -1, "high": 1})
    _, z_spu, y = sample_latent(env_for(scm, iv), 100_000, make_rng(3))
    for j in range(scm.o):
        assert abs(np.corrcoef(z_spu[:, j], y)[0, 1]) <= 0.02


def test_noiseless_label_ignores_spurious_resample():
    scm = SCMSpec(m=3, o=2, w_true=np.ones(3) / math.sqrt(3), q=0.0, graph_kind=PIIF)
    a = sample_latent(env_for(scm), 500, make_rng(4))
    iv = Intervention(target="spu", kind="stochastic", params={"family": "uniform"})
    b = sample_latent(env_for(scm, iv), 500, make_rng(4))
    # same seed -> same z_true draw; the spurious block was re-sampled differently
    assert np.array_equal(a[0], b[0])
    assert not np.array_equal(a[1], b[1])
    assert np.array_equal(a[2], b[2])


def test_piif_spurious_depends_on_true():
    scm = SCMSpec(m=2, o=2, w_true=unit(2), graph_kind=PIIF)
    z_true, z_spu, _ = sample_latent(env_for(scm), 20_000, make_rng(5))
    assert abs(np.corrcoef(z_true.sum(axis=1), z_spu[:, 0])[0, 1]) > 0.2


def test_fiif_spurious_tracks_label():
    scm = SCMSpec(m=2, o=2, w_true=unit(2), graph_kind=FIIF)
    z_true, z_spu, y = sample_latent(env_for(scm), 20_000, make_rng(6))
    assert np.corrcoef(z_spu[:, 1], y)[0, 1] > 0.3
    # given y, z_spu carries no more information about z_true
    ones = y == 1
    assert abs(np.corrcoef(z_true[ones, 0], z_spu[ones, 0])[0, 1]) < 0.05


def test_spec_validation():
    with pytest.raises(ValueError):
        SCMSpec(m=2, o=1, w_true=np.array([1.0, 1.0]))
    with pytest.raises(ValueError):
        SCMSpec(m=1, o=1, w_true=np.array([1.0]), q=0.5)
    with pytest.raises(ValueError):
        SCMSpec(m=1, o=1, w_true=np.array([1.0]), mixing=np.array([[1.0, 1.0], [0.0, 1.0]]))
    with pytest.raises(ValueError):
        Intervention(kind="stochastic", params={"family": "cauchy"})


def test_identity_mix_is_concatenation():
    scm = SCMSpec(m=2, o=3, w_true=unit(2))
    z_true, z_spu, _ = sample_latent(env_for(scm), 30, make_rng(7))
    assert np.array_equal(mix(z_true, z_spu, scm), np.hstack([z_true, z_spu]))


def test_orthogonal_mix_is_invertible_isometry():
    s = random_orthogonal(5, make_rng(8))
    scm = SCMSpec(m=2, o=3, w_true=unit(2), mixing=s)
    z_true, z_spu, _ = sample_latent(env_for(scm), 100, make_rng(9))
    x = mix(z_true, z_spu, scm)
    np.testing.assert_allclose(np.linalg.norm(x, axis=1), np.linalg.norm(np.hstack([z_true, z_spu]), axis=1), atol=1e-8)
    back_true, back_spu = unmix(x, scm)
    np.testing.assert_allclose(back_true, z_true, atol=1e-8)
    np.testing.assert_allclose(back_spu, z_spu, atol=1e-8)


def test_mix_row_mismatch():
    scm = SCMSpec(m=1, o=1, w_true=unit(1))
    with pytest.raises(DimensionError):
        mix(np.zeros((3, 1)), np.zeros((2, 1)), scm)
