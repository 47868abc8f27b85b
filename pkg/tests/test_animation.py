import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from splatkit import animation as anim
from splatkit.core import ShapeError, ValidationError
from splatkit.rasterizer import render
from splatkit.synthetic import default_camera, random_params

vec = st.lists(st.floats(-5, 5), min_size=1, max_size=12)


def encoder(feature_dim=3, half=2, seed=0):
    return anim.AudioEncoder.init(feature_dim, 2 * half + 1, embed_dim=6, hidden=8, seed=seed)


# ---------------------------------------------------------------- embeddings


def test_positional_embedding_examples():
    np.testing.assert_allclose(anim.positional_embedding([0.0], 2), [0, 0, 1, 0, 1])
    np.testing.assert_allclose(anim.positional_embedding([1.0], 1), [1, 0, -1], atol=1e-15)


def test_camera_embedding_is_sixty_dims():
    assert anim.positional_embedding([0.1, -0.2, 2.0, 1.2], 7).shape == (60,)


@given(vec, st.integers(1, 9))
def test_positional_embedding_layout(xs, L):
    e = anim.positional_embedding(xs, L).reshape(len(xs), 1 + 2 * L)
    np.testing.assert_array_equal(e[:, 0], xs)
    assert np.all(np.abs(e[:, 1:]) <= 1.0)
    x0 = xs[0]
    for k in range(L):
        assert e[0, 1 + 2 * k] == pytest.approx(np.sin(2.0**k * np.pi * x0), abs=1e-9)
        assert e[0, 2 + 2 * k] == pytest.approx(np.cos(2.0**k * np.pi * x0), abs=1e-9)


def test_temporal_embedding_kinds():
    assert anim.temporal_embedding(0.3, "positional", 4).shape == (9,)
    assert anim.temporal_embedding(0.3, "fourier", 4).shape == (8,)
    assert anim.temporal_embedding(0.3, "none").shape == (0,)
    with pytest.raises(ValueError):
        anim.temporal_embedding(0.3, "wavelet")


# ---------------------------------------------------------------- film and pooling


def test_film_identity_and_zero_gamma(rng):
    x, b = rng.normal(size=(2, 7))
    np.testing.assert_array_equal(anim.film(x, np.ones(7), np.zeros(7)), x)
    np.testing.assert_array_equal(anim.film(x, np.zeros(7), b), b)
    with pytest.raises(ShapeError):
        anim.film(x, np.ones(6), np.zeros(7))


@given(st.lists(st.tuples(st.floats(-9, 9), st.floats(-9, 9), st.floats(-9, 9)), min_size=1, max_size=10))
def test_film_elementwise_oracle(rows):
    x, g, b = (np.array(c) for c in zip(*rows))
    out = anim.film(x, g, b)
    for i in range(len(x)):
        assert out[i] == g[i] * x[i] + b[i]


def test_pool_equal_logits_is_mean(rng):
    win = rng.normal(size=(5, 4))
    pooled, w = anim.audio_attention_pool(win, logits=np.full(5, 0.7))
    np.testing.assert_allclose(pooled, win.mean(axis=0), atol=1e-15)


def test_pool_saturates_on_huge_logit(rng):
    win = rng.normal(size=(5, 4))
    logits = np.zeros(5)
    logits[3] = 1e6
    pooled, _ = anim.audio_attention_pool(win, logits=logits)
    np.testing.assert_allclose(pooled, win[3], atol=1e-6)


def test_pool_matches_explicit_softmax(rng):
    win = rng.normal(size=(9, 6))
    w_vec = rng.normal(size=6)
    pooled, w = anim.audio_attention_pool(win, w_vec)
    lg = [float(np.dot(r, w_vec)) for r in win]
    e = [np.exp(v) for v in lg]
    ref_w = np.array(e) / sum(e)
    np.testing.assert_allclose(w, ref_w, rtol=1e-12)
    np.testing.assert_allclose(pooled, sum(wi * r for wi, r in zip(ref_w, win)), rtol=1e-12)


def test_pool_errors():
    with pytest.raises(ValueError):
        anim.audio_attention_pool(np.zeros((0, 3)), np.ones(3))
    with pytest.raises(ShapeError):
        anim.audio_attention_pool(np.zeros((4, 3)), logits=np.ones(3))


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=20), st.floats(-100, 100))
def test_attention_weights_properties(logits, shift):
    w = anim.softmax(logits)
    assert np.all(w >= 0)
    assert abs(w.sum() - 1) <= 1e-9
    np.testing.assert_allclose(anim.softmax(np.array(logits) + shift), w, atol=1e-12)


# ---------------------------------------------------------------- condition vector


def test_audio_sequence_validation():
    with pytest.raises(ValidationError):
        anim.AudioFeatureSequence(np.zeros((0, 2)))
    with pytest.raises(ValidationError):
        anim.AudioFeatureSequence(np.array([[np.nan]]))
    with pytest.raises(ValidationError):
        anim.AudioFeatureSequence(np.zeros((3, 2)), rate=0)


def test_condition_constant_audio_pools_to_embedded_constant():
    enc = encoder()
    audio = anim.AudioFeatureSequence(np.tile([0.3, -1.0, 2.0], (40, 1)))
    want = enc.embed(np.array([[0.3, -1.0, 2.0]]))[0]
    for t in (0.0, 0.37, 1.5, 10.0):
        c = anim.condition_vector(audio, t, enc, window_half=2, time_embedding="none")
        np.testing.assert_allclose(c, want, atol=1e-12)


def test_condition_edge_clamping(rng):
    enc = encoder()
    audio = anim.AudioFeatureSequence(rng.normal(size=(30, 3)))
    a = anim.condition_vector(audio, 0.0, enc, window_half=2)
    b = anim.condition_vector(audio, 0.0, enc, window_half=2)
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(anim.window_indices(30, 25.0, 0.0, 2), [0, 0, 0, 1, 2])
    np.testing.assert_array_equal(anim.window_indices(30, 25.0, 100.0, 2), [29] * 5)


def test_condition_window_oracle(rng):
    enc = encoder()
    audio = anim.AudioFeatureSequence(rng.normal(size=(50, 3)), rate=25.0)
    # t = 0.40 and 0.41 both round to frame 10
    t1, t2 = 0.40, 0.41
    assert int(np.floor(t1 * 25 + 0.5)) == int(np.floor(t2 * 25 + 0.5)) == 10
    a = anim.condition_vector(audio, t1, enc, window_half=2, time_embedding="none")
    b = anim.condition_vector(audio, t2, enc, window_half=2, time_embedding="none")
    np.testing.assert_array_equal(a, b)
    emb = enc.embed(audio.features[8:13])
    ref, _ = anim.audio_attention_pool(emb, enc.logits)
    np.testing.assert_allclose(a, ref, rtol=1e-13)
    full = anim.condition_vector(audio, t1, enc, window_half=2, time_frequencies=3)
    np.testing.assert_array_equal(full[:6], a)
    np.testing.assert_allclose(full[6:], anim.positional_embedding([t1], 3))


def test_condition_rejects_negative_time(rng):
    audio = anim.AudioFeatureSequence(rng.normal(size=(5, 3)))
    with pytest.raises(ValidationError):
        anim.condition_vector(audio, -0.1, encoder(), window_half=2)


def test_encoder_array_round_trip():
    enc = encoder()
    again = anim.AudioEncoder.from_arrays(enc.to_arrays())
    x = np.random.default_rng(0).normal(size=(5, 3))
    np.testing.assert_array_equal(again.logits(again.embed(x)), enc.logits(enc.embed(x)))


# ---------------------------------------------------------------- offsets


def test_apply_offsets(rng):
    cam = default_camera(16, 16)
    s = random_params(20, cam, rng).activate()
    same = anim.apply_dynamic_offsets(s, np.zeros((20, 3)))
    assert render(same, cam).color.tobytes() == render(s, cam).color.tobytes()
    d = rng.normal(0, 0.01, size=(20, 3))
    moved = anim.apply_dynamic_offsets(s, d)
    np.testing.assert_array_equal(moved.positions, s.positions + d)
    np.testing.assert_array_equal(moved.colors, s.colors)
    back = anim.apply_dynamic_offsets(moved, -d)
    np.testing.assert_allclose(back.positions, s.positions, atol=1e-15)
    with pytest.raises(ShapeError):
        anim.apply_dynamic_offsets(s, np.zeros((19, 3)))


def test_uniform_depth_offset_shifts_depth_map():
    cam = default_camera(16, 16)
    uv = cam.pixel_grid()
    d = 1.0
    p = np.stack([(uv[:, 0] - cam.cx) / cam.fx * d, (uv[:, 1] - cam.cy) / cam.fy * d, np.full(256, d)], 1)
    from splatkit.core import SplatSet

    s = SplatSet(p, np.tile([1.0, 0, 0, 0], (256, 1)), np.full((256, 3), 0.06), np.full(256, 0.99),
                 np.full((256, 3), 0.5), np.zeros((16, 16, 3)))
    eps = 0.01
    a = render(s, cam)
    b = render(anim.apply_dynamic_offsets(s, np.tile([0, 0, eps], (256, 1))), cam)
    mask = a.alpha > 0.999
    assert mask.sum() > 100
    np.testing.assert_allclose((b.depth - a.depth)[mask], eps, atol=1e-9)


def _head(rng, n=12, cdim=5, zero=True):
    pos = rng.normal(size=(n, 3))
    head = anim.OffsetHead.init(pos, cdim, latent_dim=4, hidden=7, seed=3)
    if not zero:
        head = head.replace(W2=rng.normal(size=head.W2.shape), b2=rng.normal(size=3))
    return head, pos


def test_zero_init_head_gives_zero_offsets(rng):
    head, pos = _head(rng)
    cam = default_camera(8, 8)
    s = random_params(12, cam, rng).activate()
    off = anim.dynamic_offset_field(s, rng.normal(size=5), head, rng.normal(size=(12, 4)))
    assert not np.any(off)


def test_zero_film_gives_bias(rng):
    head, pos = _head(rng, zero=False)
    out = anim.offset_field(head, pos, rng.normal(size=(12, 4)), np.zeros(7), np.zeros(7))
    np.testing.assert_allclose(out, np.tile(head.b2, (12, 1)), atol=1e-15)


def test_head_gradients_match_fd(rng):
    head, pos = _head(rng, zero=False)
    head = head.replace(Wg=rng.normal(size=head.Wg.shape), Wb=rng.normal(size=head.Wb.shape))
    cond = rng.normal(size=5)
    lat = rng.normal(size=(12, 4))
    G = rng.normal(size=(12, 3))
    s = type("S", (), {"positions": pos})()

    def loss(h, z):
        return float(np.sum(G * anim.dynamic_offset_field(s, cond, h, z)))

    _, cache = anim.dynamic_offset_field(s, cond, head, lat, return_cache=True)
    grads, d_lat = anim.dynamic_offset_backward(head, cache, G)
    eps = 1e-6
    for name in head.TRAINABLE:
        arr = getattr(head, name)
        fd = np.zeros_like(arr)
        for i in range(arr.size):
            up, dn = arr.copy().reshape(-1), arr.copy().reshape(-1)
            up[i] += eps
            dn[i] -= eps
            fd.reshape(-1)[i] = (loss(head.replace(**{name: up.reshape(arr.shape)}), lat)
                                 - loss(head.replace(**{name: dn.reshape(arr.shape)}), lat)) / (2 * eps)
        np.testing.assert_allclose(grads[name], fd, rtol=1e-4, atol=1e-7, err_msg=name)
    fd = np.zeros_like(lat)
    for i in range(lat.size):
        up, dn = lat.copy().reshape(-1), lat.copy().reshape(-1)
        up[i] += eps
        dn[i] -= eps
        fd.reshape(-1)[i] = (loss(head, up.reshape(lat.shape)) - loss(head, dn.reshape(lat.shape))) / (2 * eps)
    np.testing.assert_allclose(d_lat, fd, rtol=1e-4, atol=1e-7)


def test_head_shape_errors(rng):
    head, pos = _head(rng)
    with pytest.raises(ShapeError):
        head.film_params(np.zeros(4))
    with pytest.raises(ShapeError):
        anim.head_features(head, pos, np.zeros((12, 3)))


def test_head_array_round_trip(rng):
    head, _ = _head(rng, zero=False)
    again = anim.OffsetHead.from_arrays(head.to_arrays())
    for k in head.TRAINABLE:
        np.testing.assert_array_equal(getattr(again, k), getattr(head, k))
    assert again.extent == head.extent
