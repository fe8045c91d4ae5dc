import numpy as np
import pytest

from specprune import net as nm
from specprune.errors import FormatError, ShapeMismatch


def naive_conv2d(x, weight, bias, stride, padding):
    """Nested-loop conv reference, used as the oracle for the fast path."""
    n, ic, h, w = x.shape
    oc, _, kh, kw = weight.shape
    xp = np.zeros((n, ic, h + 2 * padding, w + 2 * padding))
    xp[:, :, padding:padding + h, padding:padding + w] = x
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((n, oc, oh, ow))
    for b in range(n):
        for o in range(oc):
            for i in range(oh):
                for j in range(ow):
                    patch = xp[b, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
                    out[b, o, i, j] = np.sum(patch * weight[o]) + bias[o]
    return out


def small_random_cnn(rng):
    layers = (
        nm.Conv2D(rng.normal(size=(4, 1, 3, 3)) * 0.5, rng.normal(size=4) * 0.1,
                  stride=1, padding=1),
        nm.ReLU(),
        nm.Conv2D(rng.normal(size=(6, 4, 3, 3)) * 0.5, rng.normal(size=6) * 0.1,
                  stride=2, padding=1),
        nm.ReLU(),
        nm.Flatten(),
        nm.Dense(rng.normal(size=(8, 6 * 4 * 4)) * 0.2, rng.normal(size=8) * 0.1),
        nm.ReLU(),
        nm.Dense(rng.normal(size=(3, 8)) * 0.2, rng.normal(size=3) * 0.1),
    )
    return nm.Network(layers, (1, 8, 8), capture_points=(1, 3, 6))


def test_dense_identity_relu():
    netw = nm.Network(
        (nm.Dense(np.eye(2), np.zeros(2)), nm.ReLU()), (2,), capture_points=(1,))
    logits, caps = nm.forward(netw, np.array([[-1.0, 2.0]]), capture=(1,))
    assert np.allclose(logits, [[0.0, 2.0]])
    assert np.allclose(caps[0].samples, [[0.0, 2.0]])


def test_conv_1x1_identity():
    w = np.ones((1, 1, 1, 1))
    netw = nm.Network((nm.Conv2D(w, np.zeros(1)),), (1, 5, 5))
    x = np.random.default_rng(0).normal(size=(2, 1, 5, 5))
    out, _ = nm.forward(netw, x)
    assert np.allclose(out, x)


def test_forward_matches_naive_loop():
    rng = np.random.default_rng(42)
    netw = small_random_cnn(rng)
    x = rng.normal(size=(3, 1, 8, 8))
    out, _ = nm.forward(netw, x)

    h = x
    for layer in netw.layers:
        if isinstance(layer, nm.Conv2D):
            h = naive_conv2d(h, layer.weight, layer.bias, layer.stride, layer.padding)
        else:
            h = nm.apply_layer(layer, h)
    assert np.allclose(out, h, atol=1e-5)


def test_forward_batch_order_equivariant():
    rng = np.random.default_rng(1)
    netw = small_random_cnn(rng)
    x = rng.normal(size=(5, 1, 8, 8))
    perm = rng.permutation(5)
    out, _ = nm.forward(netw, x)
    out_p, _ = nm.forward(netw, x[perm])
    assert np.array_equal(out[perm], out_p)


def test_capture_matches_next_layer_input():
    rng = np.random.default_rng(2)
    netw = small_random_cnn(rng)
    x = rng.normal(size=(2, 1, 8, 8))
    _, caps = nm.forward(netw, x, capture=(1,))
    # recompute the block by hand and compare exactly
    h = nm.apply_layer(netw.layers[0], x)
    h = nm.apply_layer(netw.layers[1], h)
    assert np.array_equal(caps[0].samples, nm.capture_rows(h))


def test_maxpool_and_batchnorm_inference():
    x = np.arange(16.0).reshape(1, 1, 4, 4)
    netw = nm.Network((nm.MaxPool2(),), (1, 4, 4))
    out, _ = nm.forward(netw, x)
    assert np.array_equal(out[0, 0], [[5.0, 7.0], [13.0, 15.0]])

    bn = nm.BatchNorm(scale=np.array([2.0]), shift=np.array([1.0]),
                      running_mean=np.array([3.0]), running_var=np.array([4.0]),
                      eps=0.0)
    netw = nm.Network((bn,), (1, 2, 2))
    out, _ = nm.forward(netw, np.full((1, 1, 2, 2), 5.0))
    assert np.allclose(out, 1.0 + 2.0 * (5.0 - 3.0) / 2.0)


def test_shape_mismatch_reports_layer():
    netw = nm.Network((nm.Dense(np.eye(3), np.zeros(3)),), (3,))
    with pytest.raises(ShapeMismatch):
        nm.forward(netw, np.zeros((1, 4)))
    with pytest.raises(ShapeMismatch) as err:
        nm.Network((nm.Dense(np.eye(3), np.zeros(3)),
                    nm.Dense(np.eye(4), np.zeros(4))), (3,))
    assert err.value.layer == 1


def test_capture_point_must_follow_activation():
    with pytest.raises(ValueError):
        nm.Network((nm.Dense(np.eye(2), np.zeros(2)), nm.ReLU()), (2,),
                   capture_points=(0,))


def test_count_params_dense_4096():
    w = np.zeros((4096, 4096), dtype=np.float64)
    netw = nm.Network((nm.Dense(w, np.zeros(4096)),), (4096,))
    assert nm.count_params(netw) == 16_781_312


def test_count_params_factored_pair():
    # two stacked factors (k x n then m x k) with one output-side bias: k(m+n)+m
    m, n, k = 30, 20, 5
    rng = np.random.default_rng(3)
    netw = nm.Network(
        (nm.Dense(rng.normal(size=(k, n)), np.zeros(k)),
         nm.Dense(rng.normal(size=(m, k)), rng.normal(size=m))), (n,))
    assert nm.count_params(netw) == k * (m + n) + m + k  # first factor bias is k zeros
    # dropping the intermediate bias from the count gives the exact k(m+n)+m rule
    assert nm.count_params(netw) - k == k * (m + n) + m


def test_count_params_and_flops_toy_cnn_hand_count():
    # scaled-down conv/conv/conv/dense/dense/classifier stack: hand arithmetic
    rng = np.random.default_rng(4)
    c1, c2, c3, d1, d2, cls = 8, 8, 16, 64, 64, 10
    layers = (
        nm.Conv2D(rng.normal(size=(c1, 1, 3, 3)), np.zeros(c1), 1, 1), nm.ReLU(),
        nm.Conv2D(rng.normal(size=(c2, c1, 3, 3)), np.zeros(c2), 2, 1), nm.ReLU(),
        nm.Conv2D(rng.normal(size=(c3, c2, 3, 3)), np.zeros(c3), 2, 1), nm.ReLU(),
        nm.Flatten(),
        nm.Dense(rng.normal(size=(d1, c3 * 4)), np.zeros(d1)), nm.ReLU(),
        nm.Dense(rng.normal(size=(d2, d1)), np.zeros(d2)), nm.ReLU(),
        nm.Dense(rng.normal(size=(cls, d2)), np.zeros(cls)),
    )
    netw = nm.Network(layers, (1, 8, 8))
    params = (c1 * 9 + c1) + (c2 * c1 * 9 + c2) + (c3 * c2 * 9 + c3) \
        + (d1 * c3 * 4 + d1) + (d2 * d1 + d2) + (cls * d2 + cls)
    assert nm.count_params(netw) == params
    flops = c1 * 1 * 9 * 64 + c2 * c1 * 9 * 16 + c3 * c2 * 9 * 4 \
        + d1 * c3 * 4 + d2 * d1 + cls * d2
    assert nm.count_flops(netw) == flops


def test_save_load_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(5)
    netw = small_random_cnn(rng)
    p1, p2 = tmp_path / "m1", tmp_path / "m2"
    nm.save_model(netw, p1)
    loaded = nm.load_model(p1)
    nm.save_model(loaded, p2)
    assert (p1 / "weights.bin").read_bytes() == (p2 / "weights.bin").read_bytes()
    assert (p1 / "model.json").read_text() == (p2 / "model.json").read_text()
    # loaded forward agrees with the float32 quantization of the original
    x = rng.normal(size=(2, 1, 8, 8))
    out1, _ = nm.forward(loaded, x)
    out2, _ = nm.forward(nm.load_model(p2), x)
    assert np.array_equal(out1, out2)


def test_load_rejects_truncated_blob(tmp_path):
    rng = np.random.default_rng(6)
    netw = small_random_cnn(rng)
    nm.save_model(netw, tmp_path / "m")
    blob = (tmp_path / "m" / "weights.bin").read_bytes()
    (tmp_path / "m" / "weights.bin").write_bytes(blob[:-8])
    with pytest.raises(FormatError):
        nm.load_model(tmp_path / "m")


def test_load_rejects_bad_magic_and_shape_disagreement(tmp_path):
    import json
    rng = np.random.default_rng(7)
    netw = small_random_cnn(rng)
    nm.save_model(netw, tmp_path / "m")
    manifest = json.loads((tmp_path / "m" / "model.json").read_text())

    bad = dict(manifest, magic="NOPE1")
    (tmp_path / "m" / "model.json").write_text(json.dumps(bad))
    with pytest.raises(FormatError):
        nm.load_model(tmp_path / "m")

    bad = json.loads(json.dumps(manifest))
    bad["tensors"][0]["shape"] = [99, 99, 9, 9]
    (tmp_path / "m" / "model.json").write_text(json.dumps(bad))
    with pytest.raises(FormatError):
        nm.load_model(tmp_path / "m")
