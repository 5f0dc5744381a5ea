import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pivotseg import autograd as ag
from pivotseg.autograd import Tensor, grad_check
from pivotseg.features import (
    FeatureEncoder,
    RecordFeatures,
    compose,
    modality_label,
    parse_modalities,
    pool_filterbank,
)
from pivotseg.model import HighlightModel

from conftest import GRAD_TOL, tiny_config


def test_pool_identity_for_eight_frames(rng):
    fb = rng.normal(size=(8, 5))
    np.testing.assert_array_equal(pool_filterbank(fb), fb)


def test_pool_constant_value():
    np.testing.assert_array_equal(pool_filterbank(np.full((13, 3), 2.5)), np.full((8, 3), 2.5))


def test_pool_ten_frames_by_hand():
    # edges floor(j*10/8) = 0,1,2,3,5,6,7,8,10
    fb = np.arange(10.0).reshape(10, 1)
    np.testing.assert_array_equal(pool_filterbank(fb)[:, 0], [0, 1, 2, 3.5, 5, 6, 7, 8.5])


def test_pool_short_input_widens_empty_bins():
    fb = np.arange(3.0).reshape(3, 1)
    np.testing.assert_array_equal(pool_filterbank(fb)[:, 0], [0, 0, 0, 1, 1, 1, 2, 2])


def test_pool_rejects_empty():
    with pytest.raises(ValueError):
        pool_filterbank(np.zeros((0, 4)))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_pool_invariant_to_frame_duplication(k, seed):
    fb = np.random.default_rng(seed).normal(size=(8, 3))
    np.testing.assert_allclose(pool_filterbank(np.repeat(fb, k, axis=0)), fb, rtol=1e-14)


def encoder(rng, **kw):
    return FeatureEncoder(8, rng, semantic_dim=12, n_mels=2, n_speakers=3, **kw)


def test_semantic_projection_zero_and_prefix(rng):
    enc = encoder(rng)
    assert np.all(enc.project_semantic(np.zeros((2, 12))).data == 0)
    enc.semantic.weight.data[...] = np.vstack([np.eye(8), np.zeros((4, 8))])
    x = rng.normal(size=(3, 12))
    np.testing.assert_array_equal(enc.project_semantic(x).data, x[:, :8])


def test_semantic_projection_shape_error(rng):
    with pytest.raises(ag.ShapeError):
        encoder(rng).project_semantic(np.zeros((2, 11)))


def test_semantic_projection_gradient(rng):
    enc = encoder(rng)
    x = Tensor(rng.normal(size=(3, 12)))
    loss = lambda: ag.tsum(ag.tanh(enc.project_semantic(x)))  # noqa: E731
    assert grad_check(loss, enc.semantic.parameters()) < GRAD_TOL


def test_pattern_embedding_duplication_invariance(rng):
    enc = encoder(rng)
    fb = rng.normal(size=(8, 2))
    a = enc.embed_pattern([fb]).data
    b = enc.embed_pattern([np.repeat(fb, 2, axis=0)]).data
    np.testing.assert_allclose(a, b, rtol=1e-13)
    assert a.shape == (1, 8)


def test_compose_masks(rng):
    s, k, p = (Tensor(rng.normal(size=(4, 8))) for _ in range(3))
    assert compose(s, k, p, {"S"}).data.tobytes() == s.data.tobytes()
    np.testing.assert_array_equal(compose(s, k, p, {"S", "K", "P"}).data, (s.data + k.data) + p.data)
    np.testing.assert_array_equal(compose(s, k, None, {"S", "K"}).data, s.data + k.data)
    zero = Tensor(np.zeros((4, 8)))
    assert np.all(compose(zero, zero, zero).data == 0)


@settings(max_examples=30, deadline=None)
@given(st.floats(-3, 3), st.integers(0, 2**31 - 1))
def test_compose_linear_and_order_free(alpha, seed):
    r = np.random.default_rng(seed)
    s, k, p = (r.normal(size=(3, 4)) for _ in range(3))
    full = compose(Tensor(s), Tensor(k), Tensor(p)).data
    scaled = compose(Tensor(alpha * s), Tensor(alpha * k), Tensor(alpha * p)).data
    np.testing.assert_allclose(scaled, alpha * full, atol=1e-12)
    np.testing.assert_allclose(compose(Tensor(p), Tensor(s), Tensor(k)).data, full, atol=1e-12)


def test_parse_modalities():
    assert parse_modalities("S+K+P") == {"S", "K", "P"}
    assert parse_modalities("s + p") == {"S", "P"}
    assert modality_label({"P", "S"}) == "S+P"
    for bad in ("K", "S+X", ""):
        with pytest.raises(ValueError):
            parse_modalities(bad)


def test_disabled_view_matches_all_zero_view(rng):
    L = 7
    feats = RecordFeatures(rng.normal(size=(L, 8)), rng.integers(0, 4, L), rng.normal(size=(L, 32)))
    full = HighlightModel(tiny_config(modalities="S+K+P"))
    full.features.speaker.table.data[...] = 0.0
    full.features.pattern.layers[-1].weight.data[...] = 0.0
    only_s = HighlightModel(tiny_config(modalities="S"))
    a, b = full(feats), only_s(feats)
    assert a.h.data.tobytes() == b.h.data.tobytes()
    assert a.b.data.tobytes() == b.b.data.tobytes()
