import numpy as np
import pytest

from matchtune.data import Dataset
from matchtune.encoders import EncoderConfig, encode, init_encoder, load_params, save_params
from matchtune.errors import ConfigError, DataError, ParseError


def tokens(rows, lengths=None):
    rows = np.asarray(rows)
    lengths = np.full(len(rows), rows.shape[1]) if lengths is None else np.asarray(lengths)
    return Dataset(np.zeros(len(rows), dtype=int), tokens=rows, lengths=lengths)


@pytest.mark.parametrize("kind", ["mlp", "embedding-bag", "attention-block"])
def test_init_deterministic_and_finite(kind):
    cfg = EncoderConfig(kind=kind, input_dim=10, hidden_dim=6, rep_dim=4, seed=7)
    a, b = init_encoder(cfg), init_encoder(cfg)
    for name in a.tensors:
        np.testing.assert_array_equal(a[name].data, b[name].data)
        assert np.all(np.isfinite(a[name].data))
    other = init_encoder(EncoderConfig(kind=kind, input_dim=10, hidden_dim=6, rep_dim=4, seed=8))
    assert any(not np.array_equal(a[n].data, other[n].data) for n in a.tensors)


@pytest.mark.parametrize("kind", ["mlp", "embedding-bag", "attention-block"])
def test_zero_scale_gives_zero_weights(kind):
    params = init_encoder(EncoderConfig(kind=kind, input_dim=5, hidden_dim=3, rep_dim=2, init_scale=0.0))
    for t in params.parameters():
        assert not np.any(t.data)


def test_mlp_shapes():
    params = init_encoder(EncoderConfig(kind="mlp", input_dim=4, hidden_dim=8, rep_dim=4))
    assert params.shapes() == {"w1": (4, 8), "b1": (8,), "w2": (8, 4), "b2": (4,)}


def test_bad_config_rejected():
    with pytest.raises(ConfigError):
        EncoderConfig(kind="transformer-xl")
    with pytest.raises(ConfigError):
        EncoderConfig(rep_dim=0)
    with pytest.raises(ConfigError):
        EncoderConfig.from_dict({"kind": "mlp", "depth": 3})


def test_embedding_bag_repeated_token():
    params = init_encoder(EncoderConfig(kind="embedding-bag", input_dim=6, hidden_dim=3, rep_dim=2, seed=1))
    H = encode(params, tokens([[4, 4, 4, 4]])).data
    expected = params["embed"].data[4] @ params["w"].data + params["b"].data
    np.testing.assert_allclose(H[0], expected, atol=1e-14)


def test_embedding_bag_ignores_padding():
    params = init_encoder(EncoderConfig(kind="embedding-bag", input_dim=6, hidden_dim=3, rep_dim=2, seed=1))
    short = encode(params, tokens([[2, 3]])).data
    padded = encode(params, tokens([[2, 3, 0, 0]], lengths=[2])).data
    np.testing.assert_allclose(short, padded, atol=1e-14)


def test_mlp_zero_weights_zero_output():
    params = init_encoder(EncoderConfig(kind="mlp", input_dim=3, hidden_dim=4, rep_dim=2, init_scale=0.0))
    x = Dataset(np.zeros(2, dtype=int), features=np.random.default_rng(0).standard_normal((2, 3)))
    np.testing.assert_array_equal(encode(params, x).data, np.zeros((2, 2)))


def test_attention_uniform_attention_is_mean_value():
    cfg = EncoderConfig(kind="attention-block", input_dim=8, hidden_dim=4, rep_dim=3, seed=2)
    p = init_encoder(cfg)
    p["wq"].data[...] = 0.0
    p["wk"].data[...] = 0.0
    batch = tokens([[1, 5, 7, 0]], lengths=[3])
    H = encode(p, batch).data
    # uniform weights over the CLS slot and the three real tokens
    x = np.vstack([p["cls"].data, p["embed"].data[[1, 5, 7]]])
    mean_value = (x @ p["wv"].data).mean(axis=0)
    expected = np.tanh(mean_value @ p["w1"].data + p["b1"].data) @ p["w2"].data + p["b2"].data
    np.testing.assert_allclose(H[0], expected, atol=1e-12)


def test_batch_validation():
    mlp = init_encoder(EncoderConfig(kind="mlp", input_dim=3))
    with pytest.raises(ConfigError):
        encode(mlp, Dataset(np.zeros(1, dtype=int), features=np.zeros((1, 4))))
    bag = init_encoder(EncoderConfig(kind="embedding-bag", input_dim=5))
    with pytest.raises(DataError):
        encode(bag, tokens([[1, 9]]))
    with pytest.raises(DataError):
        encode(bag, tokens([[1, 2]], lengths=[0]))


def test_params_roundtrip(tmp_path):
    params = init_encoder(EncoderConfig(kind="attention-block", input_dim=7, hidden_dim=3, rep_dim=2))
    path = tmp_path / "p.bin"
    save_params(path, params.tensors, {"note": "x"})
    arrays, meta = load_params(path)
    assert meta == {"note": "x"}
    for name, t in params.tensors.items():
        np.testing.assert_array_equal(arrays[name], t.data)
    assert path.read_bytes().startswith(b"MATCHTUNE-PARAMS 1\n")


def test_params_corrupt(tmp_path):
    path = tmp_path / "p.bin"
    path.write_bytes(b"hello\nworld\n")
    with pytest.raises(ParseError):
        load_params(path)
    params = init_encoder(EncoderConfig())
    save_params(path, params.tensors)
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(ParseError):
        load_params(path)
