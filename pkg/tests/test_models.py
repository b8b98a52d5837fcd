import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from surgekit import tensor as tn
from surgekit.errors import ConfigError, DataError, DimensionError
from surgekit.models import ArchitectureKind, build_3dcnn, build_cnn_lstm, build_lstm, build_model, load_model
from surgekit.tensor import GradTape, Tensor

from helpers import naive_conv2d, naive_conv3d, naive_dense, naive_lstm

KINDS = list(ArchitectureKind)


def _dense(i, o):
    return i * o + o


def _conv(k, ci, co):
    return k * ci * co + co


def _lstm(i, u):
    return 4 * (i * u + u * u + u)


def _bn(f):
    return 2 * f


def expected_params(kind, grid=(15, 15, 3), units=128):
    h, w, c = grid
    if kind is ArchitectureKind.CNN_LSTM:
        return (_conv(9, c, 32) + _bn(32) + _conv(9, 32, 16) + _bn(16) + _dense(h * w * 16, 16)
                + _lstm(16, units) + _dense(units + 1, 64) + _dense(64, 1))
    if kind is ArchitectureKind.LSTM_ONLY:
        return _lstm(h * w * c, units) + _lstm(units, units) + _dense(units + 1, 64) + _dense(64, 1)
    return (_conv(27, c, 64) + _bn(64) + _conv(27, 64, 32) + _bn(32) + _dense(h * w * 32, 64) + _bn(64)
            + _dense(65, 32) + _dense(32, 1))


@pytest.mark.parametrize("kind", KINDS)
def test_default_shapes_and_param_counts(kind):
    model = build_model(kind, 36, (15, 15, 3), seed=0)
    rng = np.random.default_rng(0)
    out = model.forward(rng.standard_normal((36, 15, 15, 3)), rng.standard_normal((36, 1)))
    assert out.shape == (36, 1)
    assert model.count_params() == expected_params(kind)


@pytest.mark.parametrize("kind", KINDS)
def test_single_step_sequence(kind):
    model = build_model(kind, 1, (4, 4, 3), seed=0)
    assert model.forward(np.zeros((1, 4, 4, 3)), np.zeros((1, 1))).shape == (1, 1)


@settings(max_examples=12, deadline=None)
@given(st.sampled_from(KINDS), st.integers(1, 5), st.integers(1, 5), st.integers(1, 5), st.integers(1, 3),
       st.integers(1, 3))
def test_shape_contract_property(kind, t, h, w, c, n):
    model = build_model(kind, t, (h, w, c), seed=1, lstm_units=4)
    rng = np.random.default_rng(t * 31 + h)
    assert model.forward(rng.standard_normal((t, h, w, c)), rng.standard_normal((t, 1))).shape == (t, 1)
    batched = model.forward(rng.standard_normal((n, t, h, w, c)), rng.standard_normal((n, t, 1)))
    assert batched.shape == (n, t, 1)


def test_structure_is_distinct():
    cl, lo, c3 = build_cnn_lstm(4, (5, 5, 3)), build_lstm(4, (5, 5, 3)), build_3dcnn(4, (5, 5, 3))
    assert cl.count_layers("conv2d") == 2 and cl.count_layers("lstm") == 1
    assert lo.count_layers("conv2d") + lo.count_layers("conv3d") == 0 and lo.count_layers("lstm") == 2
    assert c3.count_layers("lstm") == 0 and c3.count_layers("conv3d") == 2
    assert lo.layers[1].in_features == 75


def test_3dcnn_intermediate_shape():
    model = build_3dcnn(36, (15, 15, 3))
    h = Tensor(np.zeros((36, 15, 15, 3)))
    for layer in model.encoder[:6]:
        h = layer(h)
    assert h.shape == (36, 15, 15, 32)


def test_bad_dimensions():
    with pytest.raises(ConfigError):
        build_cnn_lstm(0, (15, 15, 3))
    with pytest.raises(ConfigError):
        build_lstm(4, (15, 15))
    model = build_lstm(4, (3, 3, 2))
    with pytest.raises(DimensionError):
        model.forward(np.zeros((5, 3, 3, 2)), np.zeros((5, 1)))
    with pytest.raises(DataError):
        model.forward(np.full((4, 3, 3, 2), np.nan), np.zeros((4, 1)))


@pytest.mark.parametrize("kind", KINDS)
def test_infer_is_deterministic_and_train_consumes_dropout(kind):
    model = build_model(kind, 6, (5, 5, 3), seed=2)
    rng = np.random.default_rng(2)
    a, t = rng.standard_normal((4, 6, 5, 5, 3)), rng.standard_normal((4, 6, 1))
    np.testing.assert_array_equal(model.forward(a, t, "infer").data, model.forward(a, t, "infer").data)
    assert not np.array_equal(model.forward(a, t, "train").data, model.forward(a, t, "train").data)


def test_zeroed_lstm_model_outputs_constant_bias():
    model = build_lstm(5, (3, 3, 2))
    for p in model.parameters():
        p.assign(np.zeros(p.shape))
    model.layers[-1].bias.assign(np.array([0.7]))
    rng = np.random.default_rng(3)
    out = model.forward(rng.standard_normal((5, 3, 3, 2)), rng.standard_normal((5, 1))).data
    np.testing.assert_array_equal(out, np.full((5, 1), 0.7))


@pytest.mark.parametrize("kind", KINDS)
def test_every_parameter_receives_gradient(kind):
    model = build_model(kind, 5, (4, 4, 3), seed=4, dropout=0.0, lstm_units=6)
    rng = np.random.default_rng(4)
    with GradTape() as tape:
        out = model.forward(rng.standard_normal((3, 5, 4, 4, 3)), rng.standard_normal((3, 5, 1)), "train")
        loss = tn.reduce_mean(tn.square(out))
    grads = tn.backward(tape, loss, model.parameters())
    dead = [name for name, g in grads.items() if not np.any(g)]
    assert dead == []


@pytest.mark.parametrize("kind", KINDS)
def test_save_load_roundtrip_bit_identical(kind, tmp_path):
    model = build_model(kind, 4, (5, 5, 3), seed=5, lstm_units=8)
    rng = np.random.default_rng(5)
    a, t = rng.standard_normal((3, 4, 5, 5, 3)), rng.standard_normal((3, 4, 1))
    model.forward(a, t, "train")  # move batch-norm running stats away from defaults
    path = tmp_path / "m.ckpt"
    model.save(path, {"note": 1})
    loaded, meta = load_model(path)
    assert meta == {"note": 1}
    np.testing.assert_array_equal(model.forward(a, t).data, loaded.forward(a, t).data)


def _bn_infer(x, layer):
    return ((x - layer.running_mean) / np.sqrt(layer.running_var + layer.eps)
            * layer.gamma.value.data + layer.beta.value.data)


def _dense_seq(x, layer, relu=False):
    out = naive_dense(x, layer.weight.value.data, layer.bias.value.data)
    return np.maximum(out, 0) if relu else out


def test_cnn_lstm_matches_layer_by_layer_oracle():
    rng = np.random.default_rng(6)
    model = build_cnn_lstm(3, (4, 4, 2), lstm_units=3, seed=6)
    bns = [l for l in model.layers if l.kind == "batchnorm"]
    for bn in bns:
        bn.set_buffer("running_mean", rng.standard_normal(bn.features) * 0.1)
        bn.set_buffer("running_var", rng.uniform(0.5, 2, bn.features))
    a, tide = rng.standard_normal((3, 4, 4, 2)), rng.standard_normal((3, 1))
    conv1, conv2 = model.layers[0], model.layers[3]
    feats = []
    for t in range(3):
        h = naive_conv2d(a[t], conv1.kernel.value.data, conv1.bias.value.data)
        h = np.maximum(_bn_infer(h, bns[0]), 0)
        h = naive_conv2d(h, conv2.kernel.value.data, conv2.bias.value.data)
        h = np.maximum(_bn_infer(h, bns[1]), 0)
        feats.append(h.reshape(-1))
    d1, lstm = model.layers[7], model.layers[8]
    h = _dense_seq(np.array(feats), d1, relu=True)
    h = naive_lstm(h, lstm.W.value.data, lstm.U.value.data, lstm.b.value.data)
    h = np.concatenate([h, tide], axis=1)
    h = _dense_seq(h, model.head[0], relu=True)
    want = _dense_seq(h, model.head[2])
    got = model.forward(a, tide).data
    assert np.max(np.abs(got - want)) < 1e-10


def test_3dcnn_matches_layer_by_layer_oracle():
    rng = np.random.default_rng(7)
    model = build_3dcnn(3, (3, 3, 2), seed=7)
    bns = [l for l in model.layers if l.kind == "batchnorm"]
    for bn in bns:
        bn.set_buffer("running_mean", rng.standard_normal(bn.features) * 0.1)
        bn.set_buffer("running_var", rng.uniform(0.5, 2, bn.features))
    a, tide = rng.standard_normal((3, 3, 3, 2)), rng.standard_normal((3, 1))
    c1, c2 = model.layers[0], model.layers[3]
    h = np.maximum(_bn_infer(naive_conv3d(a, c1.kernel.value.data, c1.bias.value.data), bns[0]), 0)
    h = np.maximum(_bn_infer(naive_conv3d(h, c2.kernel.value.data, c2.bias.value.data), bns[1]), 0)
    h = _dense_seq(h.reshape(3, -1), model.layers[7])
    h = np.maximum(_bn_infer(h, bns[2]), 0)
    h = np.concatenate([h, tide], axis=1)
    h = _dense_seq(h, model.head[0], relu=True)
    want = _dense_seq(h, model.head[2])
    assert np.max(np.abs(model.forward(a, tide).data - want)) < 1e-10


def test_architecture_parse_aliases():
    assert ArchitectureKind.parse("CNN-LSTM") is ArchitectureKind.CNN_LSTM
    assert ArchitectureKind.parse("3dcnn") is ArchitectureKind.CNN_3D
    with pytest.raises(ConfigError):
        ArchitectureKind.parse("transformer")
