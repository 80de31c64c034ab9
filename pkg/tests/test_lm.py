import json
import logging
import math

import numpy as np
import pytest

from mhmoe import lm
from mhmoe import tensor as T
from mhmoe.layers import MoEConfig
from mhmoe.parity import leading_ops_per_token


def tiny(**changes):
    base = dict(n_layers=2, d=12, n_heads_attn=2, context_len=16, d_ff=16,
                moe=MoEConfig(d=12, d_expert=32, E=4, k=1, activation="swiglu3mat"))
    base.update(changes)
    return lm.ModelConfig(**base)


def hyper(steps, **changes):
    return lm.TrainHyper(total_steps=steps, batch_size=4, **changes)


@pytest.fixture(scope="module")
def corpus():
    return lm.bundled_corpus()


# -- config and assembly --------------------------------------------------

def test_config_validation():
    with pytest.raises(lm.ConfigError, match="does not divide"):
        tiny(n_heads_attn=5)
    with pytest.raises(lm.ConfigError, match="differs"):
        tiny(moe=MoEConfig(d=8))
    with pytest.raises(lm.ConfigError, match="256"):
        tiny(vocab=512)
    with pytest.raises(lm.ConfigError, match="unknown"):
        lm.ModelConfig.from_dict({"layers": 3})
    cfg = tiny(bitnet=True)
    assert lm.ModelConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


def test_dense_param_count_closed_form():
    cfg = tiny(moe=None, ffn_activation="relu2mat")
    d, L, ff, ctx = 12, 2, 16, 16
    want = 256 * d + ctx * d + L * (4 * d * d + 2 * d + 2 * d * ff) + d + d * 256
    assert lm.build_model(cfg).n_params() == want == lm.model_param_count(cfg)


def test_moe_param_count_matches_model():
    for cfg in (tiny(), tiny(n_layers=4, moe=MoEConfig(d=12, h=3, d_expert=8, E=6, k=3, use_head_layer=True,
                                                      use_merge_layer=True, shared_expert_dim=10))):
        assert lm.build_model(cfg).n_params() == lm.model_param_count(cfg)


def test_moe_every_second_block():
    model = lm.build_model(tiny(n_layers=4))
    assert sorted(model.moe) == [1, 3] and sorted(model.ffn) == [0, 2]
    assert any(n.startswith("blocks.1.moe.") for n in model.params)
    assert not any(n.startswith("blocks.0.moe.") for n in model.params)
    assert lm.build_model(tiny(moe=None)).moe == {}


def test_same_seed_same_initial_loss(corpus):
    ids = corpus[:17].astype(np.int64)[None]
    a = lm.build_model(tiny(seed=5)).loss(ids[:, :-1], ids[:, 1:])[0].item()
    b = lm.build_model(tiny(seed=5)).loss(ids[:, :-1], ids[:, 1:])[0].item()
    c = lm.build_model(tiny(seed=6)).loss(ids[:, :-1], ids[:, 1:])[0].item()
    assert a == b != c


def test_context_limit():
    model = lm.build_model(tiny())
    with pytest.raises(lm.ConfigError, match="exceeds"):
        model.forward(np.zeros((1, 17), int))


@pytest.mark.parametrize("bitnet", [False, True])
def test_causality(bitnet):
    model = lm.build_model(tiny(bitnet=bitnet, n_layers=4))
    rng = np.random.default_rng(0)
    ids = rng.integers(0, 256, size=(2, 16))
    base = model.forward(ids)[0].data.reshape(2, 16, 256)
    for t in (0, 7, 15):
        bumped = ids.copy()
        bumped[:, t] = (bumped[:, t] + 1) % 256
        out = model.forward(bumped)[0].data.reshape(2, 16, 256)
        # routing changes alter the row count of expert products, so BLAS may
        # reassociate sums; earlier positions agree to round-off
        np.testing.assert_allclose(out[:, :t], base[:, :t], rtol=0, atol=1e-12)
        assert not np.array_equal(out[:, t], base[:, t])


def test_counter_sees_only_ffn_blocks(corpus):
    cfg = tiny(n_layers=4)
    model = lm.build_model(cfg)
    counter = T.OpCounter()
    ids = corpus[:32].astype(np.int64).reshape(2, 16)
    model.forward(ids, counter)
    n = ids.size
    dense = n * (6 * 12 * 16 - 16 - 12)
    moe = n * (6 * 12 * 32 - 32 - 12)
    assert counter.paper_count == 2 * dense + 2 * moe


# -- data -----------------------------------------------------------------

def test_split_is_disjoint_tail():
    data = np.arange(100, dtype=np.uint8)
    tr, va = lm.split_corpus(data)
    assert len(tr) == 90 and len(va) == 10 and va[0] == 90
    assert lm.split_corpus("abcdefghij")[1].tobytes() == b"j"


def test_sample_batch_shifts_targets(corpus):
    x, y = lm.sample_batch(corpus, T.Rng(0), 3, 16)
    assert x.shape == y.shape == (3, 16)
    np.testing.assert_array_equal(x[:, 1:], y[:, :-1])
    with pytest.raises(lm.ConfigError):
        lm.sample_batch(corpus[:10], T.Rng(0), 1, 16)


def test_eval_windows_cover_every_prediction():
    data = np.arange(40, dtype=np.uint8)
    ws = lm.eval_windows(data, 16)
    assert sum(len(w) - 1 for w in ws) == 39


# -- evaluation -----------------------------------------------------------

def test_zero_head_gives_uniform_perplexity(corpus):
    model = lm.build_model(tiny())
    model.params["head"].data = np.zeros_like(model.params["head"].data)
    assert lm.evaluate_perplexity(model, corpus[:500]) == pytest.approx(256.0, rel=1e-12)


def test_nll_matches_second_pass_oracle(corpus):
    model = lm.build_model(tiny())
    text = corpus[1000:1300]
    total, count = 0.0, 0
    for w in lm.eval_windows(text, 16):
        logits = model.forward(w[None, :-1])[0].data
        z = logits - logits.max(1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(1, keepdims=True))
        total += -logp[np.arange(len(w) - 1), w[1:]].sum()
        count += len(w) - 1
    assert math.exp(total / count) == pytest.approx(lm.evaluate_perplexity(model, text, batch_size=3), rel=1e-9)
    with pytest.raises(lm.ConfigError):
        lm.mean_nll(model, b"a")


def test_repeated_byte_is_memorized():
    data = b"a" * 4000
    state = lm.init_train_state(tiny())
    lm.train(state, data, 60, hyper(60, lr=1e-2))
    assert lm.evaluate_perplexity(state.model, data[:400]) < 1.05


# -- training -------------------------------------------------------------

def test_zero_lr_leaves_parameters(corpus):
    state = lm.init_train_state(tiny())
    before = {n: p.data.copy() for n, p in state.model.params.items()}
    ids = corpus[:17].astype(np.int64)[None]
    loss0 = state.model.loss(ids[:, :-1], ids[:, 1:])[0].item()
    lm.train(state, corpus, 5, hyper(5, lr=0.0))
    for n, p in state.model.params.items():
        np.testing.assert_array_equal(p.data, before[n])
    assert state.model.loss(ids[:, :-1], ids[:, 1:])[0].item() == loss0


def test_training_reduces_loss(corpus):
    state = lm.init_train_state(tiny())
    lm.train(state, corpus, 100, hyper(100))
    assert np.mean(state.losses[-10:]) < np.mean(state.losses[:10]) - 1.0


def test_bitnet_training_reduces_loss(corpus):
    state = lm.init_train_state(tiny(bitnet=True))
    lm.train(state, corpus, 100, hyper(100))
    assert np.mean(state.losses[-10:]) < np.mean(state.losses[:10]) - 1.0


def test_training_is_deterministic(corpus):
    a, b = (lm.train(lm.init_train_state(tiny(seed=3)), corpus, 15, hyper(15)) for _ in range(2))
    assert a.losses == b.losses


def test_lr_schedule():
    h = lm.TrainHyper(lr=1.0, total_steps=100)
    assert h.lr_at(1) == pytest.approx(0.2) and h.lr_at(5) == 1.0
    assert h.lr_at(100) == pytest.approx(0.1)
    assert all(h.lr_at(s) >= h.lr_at(s + 1) for s in range(5, 100))


def test_resume_matches_uninterrupted_run(corpus, tmp_path):
    hp = hyper(200)
    full = lm.train(lm.init_train_state(tiny()), corpus, 200, hp)
    half = lm.train(lm.init_train_state(tiny()), corpus, 100, hp)
    lm.save_checkpoint(half, tmp_path / "ck", hp)
    resumed, hp2 = lm.load_checkpoint(tmp_path / "ck")
    assert hp2 == hp and resumed.step == 100
    lm.train(resumed, corpus, 100, hp2)
    assert resumed.losses == full.losses
    for n, p in full.model.params.items():
        np.testing.assert_array_equal(resumed.model.params[n].data, p.data)


def test_checkpoint_layout(corpus, tmp_path):
    state = lm.train(lm.init_train_state(tiny()), corpus, 2, hyper(2))
    path = lm.save_checkpoint(state, tmp_path / "ck")
    header = json.loads((path / "header.json").read_text())
    assert header["dtype"] == "<f8" and header["step"] == 2
    blob = (path / "tensors.bin").read_bytes()
    entry = next(e for e in header["tensors"] if e["group"] == "param" and e["name"] == "head")
    arr = np.frombuffer(blob, "<f8", count=entry["nbytes"] // 8, offset=entry["offset"]).reshape(entry["shape"])
    np.testing.assert_array_equal(arr, state.model.params["head"].data)
    (tmp_path / "bad").mkdir()
    (tmp_path / "bad" / "header.json").write_text("{}")
    with pytest.raises(lm.ConfigError):
        lm.load_checkpoint(tmp_path / "bad")


def test_metrics_stream(corpus, tmp_path):
    path = tmp_path / "m.jsonl"
    lm.train(lm.init_train_state(tiny()), corpus, 3, hyper(3), metrics_path=path)
    lines = [json.loads(x) for x in path.read_text().splitlines()]
    assert [r["step"] for r in lines] == [1, 2, 3]
    assert set(lines[0]) == {"step", "loss", "ppl", "balance_loss", "ops_per_token"}
    dense = 6 * 12 * 16 - 16 - 12
    moe = 6 * 12 * 32 - 32 - 12
    assert lines[0]["ops_per_token"] == dense + moe


def test_empty_corpus_rejected():
    with pytest.raises(lm.ConfigError, match="empty"):
        lm.train(lm.init_train_state(tiny()), b"", 1)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_reported(corpus):
    with pytest.raises(lm.TrainingDivergedError, match="step .*lr=.*grad_norm="):
        lm.train(lm.init_train_state(tiny()), corpus, 10, hyper(10, lr=1e200, warmup_frac=0.0, grad_clip=0.0))


def test_starved_experts_are_logged(caplog):
    cfg = tiny(moe=MoEConfig(d=12, d_expert=8, E=8, k=1))
    state = lm.init_train_state(cfg)
    with caplog.at_level(logging.WARNING, logger="mhmoe.lm"):
        lm.train(state, b"abcdefghijklmnopqrstuvwxyz" * 4, 1, lm.TrainHyper(total_steps=1, batch_size=1))
    assert "no gradient reached" in caplog.text and "blocks.1.moe.experts" in caplog.text


def test_silent_parameters_after_full_batch(corpus):
    state = lm.init_train_state(tiny())
    x, y = lm.sample_batch(corpus, T.Rng(1), 8, 16)
    T.backward(state.model.loss(x, y, 0.01)[0])
    assert lm.silent_parameters(state.model) == []


# -- variant suite --------------------------------------------------------

SUITE_BASE = dict(moe=MoEConfig(d=12, d_expert=32, E=4, k=1, activation="swiglu3mat"))


def test_variant_configs_match_leading_ops():
    v = lm.variant_configs(tiny(**SUITE_BASE))
    assert list(v) == list(lm.VARIANTS)
    assert v["Dense"].moe is None and v["Dense"].d_ff == 32
    fg = v["Fine-grained SMoE"].moe
    assert (fg.d_expert, fg.E, fg.k) == (16, 8, 2)
    ops = {leading_ops_per_token(c.moe) for n, c in v.items() if c.moe is not None}
    assert len(ops) == 1
    assert v["MH-MoE (head=3)"].moe.h == 3 and v["MH-MoE (head=3)"].moe.k == 3


def test_shared_expert_suite_drops_dense():
    v = lm.variant_configs(tiny(**SUITE_BASE), shared_expert=True, bitnet=True)
    assert list(v) == list(lm.VARIANTS[1:])
    assert all(c.moe.shared_expert_dim == 32 and c.bitnet for c in v.values())


def test_precheck_passes_and_rejects_mismatch():
    v = lm.variant_configs(tiny(**SUITE_BASE))
    report = lm.parity_precheck(v)
    assert set(report) == set(lm.VARIANTS)
    bad = dict(v)
    bad["MH-MoE (head=2)"] = tiny(moe=v["MH-MoE (head=2)"].moe.with_(d_expert=13))
    with pytest.raises(lm.ParityError, match="residual"):
        lm.parity_precheck(bad)
    bad["MH-MoE (head=2)"] = tiny(moe=v["MH-MoE (head=2)"].moe.with_(E=30))
    with pytest.raises(lm.ParityError, match="residual"):
        lm.parity_precheck(bad)


def test_suite_table_shape(corpus):
    extra = {"tail": corpus[-800:]}
    res = lm.run_variant_suite(tiny(**SUITE_BASE), corpus[:20000], 10, hyper(10), eval_corpora=extra)
    assert [r["model"] for r in res.rows] == list(lm.VARIANTS)
    assert res.corpora == ["validation", "tail"]
    table = res.to_markdown().splitlines()
    assert len(table) == 2 + 5 and table[0].count("|") == 4


def test_suite_refuses_mismatched_variants(corpus):
    v = lm.variant_configs(tiny(**SUITE_BASE))
    v["SMoE"] = tiny(moe=v["SMoE"].moe.with_(k=2))
    with pytest.raises(lm.ParityError):
        lm.run_variant_suite(tiny(**SUITE_BASE), corpus, 1, variants=v)
