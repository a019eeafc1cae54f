import json

import numpy as np
import pytest

from headprune import autodiff as ad
from headprune.gates import GateSet
from headprune.model import (CheckpointError, ModelConfig, Transformer, attention_records, causal_mask,
                             load_checkpoint, save_checkpoint, sinusoidal_positions)


@pytest.fixture(scope="module")
def model():
    return Transformer(ModelConfig(d_model=16, d_ff=32, src_vocab=9, tgt_vocab=11), seed=0)


def _batch(rng, B=2, S=5, T=4):
    src = rng.integers(2, 9, size=(B, S))
    src[:, -1] = 1
    tgt_in = rng.integers(2, 11, size=(B, T))
    tgt_in[:, 0] = 0
    return src, tgt_in


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(d_model=10, num_heads=4)
    with pytest.raises(ValueError):
        ModelConfig(num_layers=0)


def test_forward_shapes_and_records(model):
    src, tgt_in = _batch(np.random.default_rng(0))
    res = model.forward(src, tgt_in, record=True)
    assert res.logits.shape == (2, 4, 11)
    assert res.attention[("encoder-self", 1)].shape == (2, 4, 5, 5)
    assert res.attention[("decoder-encoder", 0)].shape == (2, 4, 4, 5)
    recs = attention_records(res, src, tgt_in, model.config)
    assert len(recs) == 3 * 2 * 4
    with pytest.raises(ad.ShapeError):
        model.forward(src[0], tgt_in)


def test_decoder_self_attention_is_causal(model):
    src, tgt_in = _batch(np.random.default_rng(1))
    w = model.forward(src, tgt_in, record=True).attention[("decoder-self", 0)]
    assert np.all(w[..., causal_mask(4)] < 1e-300)
    # changing a later target token leaves earlier logits untouched
    other = tgt_in.copy()
    other[:, 3] = (other[:, 3] + 1 - 2) % 9 + 2
    a = model.forward(src, tgt_in).logits.data
    b = model.forward(src, other).logits.data
    np.testing.assert_array_equal(a[:, :3], b[:, :3])


def test_positions_are_sinusoids():
    pe = sinusoidal_positions(6, 8)
    assert pe[0, 0] == 0.0 and pe[0, 1] == 1.0
    assert pe[3, 2] == pytest.approx(np.sin(3 / 10000 ** (2 / 8)))


def test_head_output_is_linear_in_gate(model):
    rng = np.random.default_rng(2)
    x = ad.Tensor(rng.normal(size=(1, 5, 16)))
    bo = model.params["enc.0.self.bo"].data

    def f(g):
        return model.multi_head(x, x, "enc.0.self", g).data - bo

    g1, g2 = rng.uniform(0, 0.5, 4), rng.uniform(0, 0.5, 4)
    np.testing.assert_allclose(f(g1 + g2), f(g1) + f(g2), atol=1e-12)
    np.testing.assert_allclose(f(1.8 * g1), 1.8 * f(g1), atol=1e-12)
    with pytest.raises(ValueError):
        f(np.full(4, 1.5))


def test_closed_gate_silences_head(model):
    src, tgt_in = _batch(np.random.default_rng(3))
    g = np.array([1.0, 0.0, 1.0, 1.0])
    gates = {("encoder-self", 0): g}
    before = model.forward(src, tgt_in, gates).logits.data
    other = model.copy()
    # perturb only head 1's value projection
    other.params["enc.0.self.wv"].data[:, 4:8] += 3.0
    after = other.forward(src, tgt_in, gates).logits.data
    np.testing.assert_allclose(before, after, atol=1e-12)
    assert not np.allclose(model.forward(src, tgt_in).logits.data, other.forward(src, tgt_in).logits.data)


def test_too_long_input_rejected():
    m = Transformer(ModelConfig(d_model=8, d_ff=8, max_len=4), seed=0)
    with pytest.raises(ValueError):
        m.forward(np.ones((1, 6), int), np.zeros((1, 2), int))


def test_greedy_decode_shape(model):
    src, _ = _batch(np.random.default_rng(4))
    out = model.greedy_decode(src, 3)
    assert out.shape == (2, 3) and out.dtype.kind == "i"


def test_checkpoint_round_trip_with_gates(model, tmp_path):
    gs = GateSet.create(2, 4, ["encoder-self", "decoder-self"], init=0.5)
    save_checkpoint(tmp_path / "m.npz", model, gs, {"step": 3})
    m2, gs2, meta = load_checkpoint(tmp_path / "m.npz")
    assert m2.config == model.config and meta == {"step": 3}
    for k, v in model.state().items():
        assert np.array_equal(v, m2.state()[k])
    assert gs2.gated_types == gs.gated_types
    # same checkpoint written twice is byte-identical
    save_checkpoint(tmp_path / "n.npz", m2, gs2, meta)
    assert (tmp_path / "m.npz").read_bytes() == (tmp_path / "n.npz").read_bytes()


def test_checkpoint_errors(model, tmp_path):
    save_checkpoint(tmp_path / "m.npz", model)
    with np.load(tmp_path / "m.npz") as npz:
        arrays = dict(npz)
    header = json.loads(bytes(arrays["__header__"]).decode())
    header["version"] = 99
    arrays["__header__"] = np.frombuffer(json.dumps(header).encode(), dtype=np.uint8)
    np.savez(tmp_path / "bad.npz", **arrays)
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(tmp_path / "bad.npz")
    (tmp_path / "junk.npz").write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "junk.npz")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.npz")
