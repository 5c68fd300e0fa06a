import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from streamcausal.model import (
    DataBatch,
    Family,
    ModelError,
    ModelSpec,
    Observation,
    OutcomeType,
    ParameterVector,
    expit,
    or_features,
    predict_outcome,
    ps_features,
)

finite = st.floats(-50, 50, allow_nan=False)


def test_expit_values():
    assert expit(0.0) == 0.5
    assert expit(800.0) == 1.0
    assert expit(-800.0) == 0.0
    assert expit(math.log(3.0)) == pytest.approx(0.75, abs=1e-15)


@given(st.floats(-700, 700))
def test_expit_symmetry(z):
    assert abs(expit(z) + expit(-z) - 1.0) <= 1e-15


@given(finite, finite)
def test_expit_monotone(z1, z2):
    lo, hi = sorted((z1, z2))
    assert expit(lo) <= expit(hi)


@pytest.mark.parametrize(
    "family, p, d",
    [(Family.GCOMP, 3, 7), (Family.IPTW, 3, 4), (Family.AIPTW, 3, 10), (Family.AIPTW, 1, 4)],
)
def test_dimension(family, p, d):
    assert ModelSpec(family, OutcomeType.CONTINUOUS, p).dim == d


@pytest.mark.parametrize("family", list(Family))
@given(data=st.data())
def test_pack_unpack_roundtrip(family, data):
    p = data.draw(st.integers(1, 5))
    spec = ModelSpec(family, "continuous", p)
    theta = data.draw(arrays(float, spec.dim, elements=finite))
    pv = ParameterVector(spec, theta)
    alpha, beta, delta = pv.unpack()
    again = ParameterVector.pack(spec, alpha, beta, delta)
    np.testing.assert_array_equal(again.theta, theta)
    assert pv.delta == theta[-1]


def test_pack_rejects_wrong_blocks():
    spec = ModelSpec("gcomp", "continuous", 2)
    with pytest.raises(ModelError):
        ParameterVector.pack(spec, alpha=[0, 0], beta=[0, 0, 0, 0])
    with pytest.raises(ModelError):
        ParameterVector.pack(ModelSpec("iptw", "continuous", 2), alpha=[0, 0], beta=[0, 0, 0, 0])
    with pytest.raises(ModelError):
        ParameterVector(spec, np.zeros(3))


def test_observation_invariants():
    with pytest.raises(ModelError):
        Observation(1.0, 2, (1.0,))
    with pytest.raises(ModelError):
        Observation(1.0, 1, (0.5, 1.0))
    assert Observation(1.0, 1, (1, 2)).p == 2


def test_batch_validation():
    with pytest.raises(ModelError):
        DataBatch(1, [], [], np.ones((0, 1)))
    with pytest.raises(ModelError):
        DataBatch(1, [1.0], [3], np.ones((1, 1)))
    with pytest.raises(ModelError):
        DataBatch(1, [np.nan], [1], np.ones((1, 1)))
    with pytest.raises(ModelError):
        DataBatch.from_observations(1, [Observation(0, 1, (1,)), Observation(0, 1, (1, 2))])
    b = DataBatch.from_observations(4, [Observation(0.5, 1, (1, 2))])
    assert (b.n, b.p, b.batch_index) == (1, 2, 4)
    assert b.observations() == [Observation(0.5, 1, (1.0, 2.0))]


def test_features():
    np.testing.assert_array_equal(ps_features(np.array([1, 0.3, -1.2])), [1, 0.3, -1.2])
    np.testing.assert_array_equal(ps_features(np.array([1.0])), [1.0])
    np.testing.assert_array_equal(or_features(1, np.array([1.0, 2.0])), [1, 2, 1, 2])
    np.testing.assert_array_equal(or_features(0, np.array([1.0, 2.0])), [1, 2, 0, 0])
    x = np.array([[1.0, 2.0], [1.0, -1.0]])
    np.testing.assert_array_equal(or_features(np.array([1.0, 0.0]), x), [[1, 2, 1, 2], [1, -1, 0, 0]])


@given(st.integers(1, 6), st.sampled_from([0, 1]))
def test_feature_shapes(p, a):
    x = np.concatenate([[1.0], np.linspace(-1, 1, p - 1)])
    assert ps_features(x).shape == (p,)
    assert or_features(a, x).shape == (2 * p,)


def test_predict_outcome():
    x = np.array([1.0, 1.0])
    assert predict_outcome(1, x, np.zeros(4), OutcomeType.CONTINUOUS) == 0.0
    assert predict_outcome(0, x, np.zeros(4), OutcomeType.BINARY) == 0.5
    assert predict_outcome(1, x, np.array([1.0, 0.0, 1.0, 0.0]), OutcomeType.CONTINUOUS) == 2.0
    # counterfactual arm regardless of the observed one
    beta = np.array([0.2, -0.1, 0.7, 0.3])
    assert predict_outcome(1, x, beta, "continuous") - predict_outcome(0, x, beta, "continuous") == pytest.approx(1.0)
    with pytest.raises(ModelError):
        predict_outcome(1, x, np.zeros(3), OutcomeType.CONTINUOUS)
