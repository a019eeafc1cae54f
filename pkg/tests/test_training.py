import math

import numpy as np
import pytest

from headprune import autodiff as ad, training
from headprune.data import generate_task
from headprune.gates import GateSet, NOISE_EPS
from headprune.model import load_checkpoint, save_checkpoint
from headprune.training import (Adam, TrainConfig, cross_entropy, default_lambdas, lambda_sweep, lr_schedule,
                                make_batches, model_for, prune_finetune, train)


def test_lr_schedule_reference_values():
    assert lr_schedule(16000, 16000, 4) == pytest.approx(0.03162, abs=1e-5)
    assert lr_schedule(1, 16000, 4) == pytest.approx(1.98e-6, abs=5e-9)  # reference is rounded
    with pytest.raises(ValueError):
        lr_schedule(0, 10, 1.0)


def test_lr_schedule_shape():
    lrs = [lr_schedule(s, 50, 1.0) for s in range(1, 200)]
    assert all(a <= b for a, b in zip(lrs[:49], lrs[1:50]))
    assert all(a >= b for a, b in zip(lrs[49:], lrs[50:]))


def test_cross_entropy_examples():
    V = 7
    assert float(cross_entropy(ad.Tensor(np.zeros((2, 3, V))), np.zeros((2, 3), int)).data) == pytest.approx(math.log(V))
    logits = np.full((1, 2, V), -50.0)
    logits[0, 0, 3] = logits[0, 1, 5] = 50.0
    assert float(cross_entropy(ad.Tensor(logits), [[3, 5]]).data) < 1e-12
    with pytest.raises(IndexError):
        cross_entropy(ad.Tensor(np.zeros((1, 1, V))), [[V]])


def test_cross_entropy_matches_hand_oracle():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(3, 4, 6))
    t = rng.integers(0, 6, size=(3, 4))
    m = logits.max(-1, keepdims=True)
    logp = logits - m - np.log(np.exp(logits - m).sum(-1, keepdims=True))
    oracle = -np.mean(np.take_along_axis(logp, t[..., None], -1))
    assert float(cross_entropy(ad.Tensor(logits), t).data) == pytest.approx(oracle, abs=1e-10)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lam=-1)
    with pytest.raises(ValueError):
        TrainConfig(warmup_steps=0)
    with pytest.raises(ValueError):
        TrainConfig(gate_types=("cross",))


def test_adam_first_step_moves_by_lr():
    p = ad.parameter(np.array([1.0, -2.0]))
    p.grad = np.array([0.5, -3.0])
    Adam([p]).step(0.1)
    np.testing.assert_allclose(p.data, [0.9, -1.9], atol=1e-8)


@pytest.fixture(scope="module")
def small():
    corpus = generate_task("copy", 60, seed=1, n_symbols=6, min_len=3, max_len=5)
    return corpus


def _same_state(a, b):
    return all(np.array_equal(a[k], b[k]) for k in a)


def test_batches_cover_corpus_once(small):
    batches = make_batches(small, 40, np.random.default_rng(0))
    flat = sorted(i for b in batches for i in b)
    assert flat == list(range(len(small)))
    for b in batches:
        assert len({len(small.pairs[i].source) for i in b}) == 1


def test_zero_step_training_keeps_initialization(small):
    m = model_for(small, seed=2, d_model=16, d_ff=32)
    before = m.state()
    train(m, small, TrainConfig(max_steps=0))
    assert _same_state(before, m.state())


def test_training_is_deterministic_and_learns(small):
    cfg = TrainConfig(max_steps=40, batch_tokens=64, warmup_steps=10, scale=0.3)
    r1 = train(model_for(small, seed=2, d_model=16, d_ff=32), small, cfg)
    r2 = train(model_for(small, seed=2, d_model=16, d_ff=32), small, cfg)
    assert r1.losses == r2.losses
    assert np.mean(r1.losses[-5:]) < np.mean(r1.losses[:5])


def test_gates_at_one_match_ungated_step(small):
    cfg = TrainConfig(max_steps=1, batch_tokens=64)
    a = model_for(small, seed=3, d_model=16, d_ff=32)
    b = a.copy()
    train(a, small, cfg)
    ones = {("encoder-self", l): np.ones(4) for l in range(2)}
    train(b, small, cfg, fixed_gates=ones)
    assert _same_state(a.state(), b.state())


def test_log_alpha_gradient_with_fixed_noise(small):
    m = model_for(small, seed=4, d_model=16, d_ff=32)
    gs = GateSet.create(2, 4, ["encoder-self", "decoder-self"], init=0.3)
    rng = np.random.default_rng(0)
    noise = {k: rng.uniform(0.05, 0.95, size=4) for k in gs.keys()}
    idx = make_batches(small, 64)[0]
    from headprune.training import batch_arrays
    src, tgt_in, tgt = batch_arrays(small, idx, m.config.bos_id)
    lam = 0.05

    def objective():
        gates = gs.sample_with_noise(noise)
        return ad.add(cross_entropy(m.forward(src, tgt_in, gates).logits, tgt), ad.scale(gs.l_c(), lam))

    ad.backward(objective())
    for key in gs.keys():
        la = gs.log_alpha[key]
        for h in range(4):
            old = la.data[h]
            la.data[h] = old + 1e-5
            with ad.no_grad():
                fp = float(objective().data)
            la.data[h] = old - 1e-5
            with ad.no_grad():
                fm = float(objective().data)
            la.data[h] = old
            num = (fp - fm) / 2e-5
            assert abs(la.grad[h] - num) / (abs(la.grad[h]) + abs(num) + 1e-12) < 1e-4


def test_frozen_decoder_is_bitwise_unchanged(small):
    base = model_for(small, seed=5, d_model=16, d_ff=32)
    run = prune_finetune(base, small, TrainConfig(lam=0.05, max_steps=5, batch_tokens=64, freeze_decoder=True))
    before, after = base.state(), run.model.state()
    for k in base.decoder_params():
        assert before[k].tobytes() == after[k].tobytes()
    assert any(not np.array_equal(before[k], after[k]) for k in base.encoder_params())


def test_pruning_bookkeeping(small):
    base = model_for(small, seed=6, d_model=16, d_ff=32)
    cfg = TrainConfig(max_steps=3, batch_tokens=64)
    report = lambda_sweep(base, small, [0.0], cfg)
    run = report.runs[0]
    assert run.retained == {"encoder-self": 8, "decoder-self": 8, "decoder-encoder": 8}
    assert run.counts_str() == "8/8/8"
    with pytest.raises(ValueError):
        lambda_sweep(base, small, [0.1, 0.01], cfg)


def test_zero_lambda_is_ungated_finetuning(small):
    base = model_for(small, seed=6, d_model=16, d_ff=32)
    cfg = TrainConfig(lam=0.0, max_steps=30, batch_tokens=64, warmup_steps=5, freeze_decoder=True)
    run = prune_finetune(base, small, cfg)
    assert run.counts_str() == "8/8/8" and run.binarized == 1.0
    # same updates as plain training of the encoder
    plain = base.copy()
    training._run(plain, small, cfg, list(plain.encoder_params().values()), None, None, {})
    for k, p in plain.params.items():
        assert p.data.tobytes() == run.model.params[k].data.tobytes()


def test_huge_lambda_prunes_everything_and_still_runs(small):
    base = model_for(small, seed=7, d_model=16, d_ff=32)
    run = prune_finetune(base, small, TrainConfig(lam=50.0, max_steps=60, batch_tokens=64, warmup_steps=5,
                                                  gate_types=("encoder-self", "decoder-self", "decoder-encoder")))
    assert run.retained == {"encoder-self": 0, "decoder-self": 0, "decoder-encoder": 0}
    assert 0.0 <= run.metric <= 1.0 and math.isfinite(run.loss)


def test_default_grid():
    grid = default_lambdas()
    assert len(grid) == 8 and grid == sorted(grid)
    assert np.allclose(np.diff(np.log(grid)), np.log(grid[1] / grid[0]))


def test_checkpoint_round_trip(small, tmp_path):
    m = model_for(small, seed=8, d_model=16, d_ff=32)
    gs = GateSet.create(2, 4, ["encoder-self"], init=-1.0)
    save_checkpoint(tmp_path / "c.npz", m, gs, {"note": 1})
    m2, gs2, meta = load_checkpoint(tmp_path / "c.npz")
    assert _same_state(m.state(), m2.state()) and meta == {"note": 1}
    assert np.array_equal(gs2.log_alpha[("encoder-self", 0)].data, gs.log_alpha[("encoder-self", 0)].data)
    assert NOISE_EPS > 0
