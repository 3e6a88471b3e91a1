import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ddx.errors import ConfigError, DataError, DivergedError, DomainError, ParseError
from ddx.knowledge_base import DiseaseDef, FindingDef, KbGenConfig, KnowledgeBase, Link, generate_synthetic_kb
from ddx.ml.convnet import (ConvNetConfig, ConvNetModel, convnet_backward, convnet_forward, convnet_train,
                            init_convnet, shuffle_tokens)
from ddx.ml.gradcheck import gradient_check, relative_error
from ddx.ml.io import load_model, model_hash, save_model
from ddx.ml.logreg import LRModel, lr_objective, lr_predict, lr_train
from ddx.ml.optim import TrainConfig
from ddx.ml.rankers import ConvNetRanker, LRRanker, fit_convnet, fit_lr, noisy_epoch_inputs
from ddx.ml.vocab import Encoder, build_vocabulary, encode_case, encode_dataset
from ddx.simulator import Case, prevalent_pool, simulate_dataset, split_dataset

from helpers import hand_kb


def _named_kb(names):
    findings = tuple(FindingDef(i, n, "symptom", 1) for i, n in enumerate(names))
    return KnowledgeBase(findings, (DiseaseDef(0, "x"),), tuple(Link(0, i, 1, 1) for i in range(len(names))))


# --- vocabulary and encoding --------------------------------------------------

def test_vocabulary_is_token_union():
    v = build_vocabulary(_named_kb(["abdomen pain", "pain severe"]))
    assert v.tokens == ("abdomen", "pain", "severe")
    assert v.token_to_id == {"abdomen": 1, "pain": 2, "severe": 3} and v.size == 4


def test_vocabulary_is_stable():
    kb = generate_synthetic_kb(KbGenConfig(n_diseases=8), 1)
    assert build_vocabulary(kb) == build_vocabulary(kb)


def test_empty_vocabulary():
    kb = KnowledgeBase((), (DiseaseDef(0, "x"),), ())
    with pytest.raises(DataError) as exc:
        build_vocabulary(kb)
    assert exc.value.code == "empty_vocabulary"


def test_encoding_dedups_and_pads():
    kb = _named_kb(["abdomen pain", "pain severe"])
    e = encode_case(build_vocabulary(kb), Case(0, 0, frozenset({0, 1})), kb)
    assert e.token_ids.shape == (200,)
    assert e.token_ids[:3].tolist() == [1, 2, 3] and not e.token_ids[3:].any()
    assert e.label == 0


def test_encoding_truncates_in_canonical_order():
    names = [f"w{i:03d}" for i in range(250)]
    kb = _named_kb(names)
    e = encode_case(build_vocabulary(kb), Case(0, 0, frozenset(range(250))), kb)
    assert e.token_ids.tolist() == list(range(1, 201))


@settings(max_examples=30)
@given(st.permutations(list(range(12))))
def test_encoding_ignores_finding_order(perm):
    kb = generate_synthetic_kb(KbGenConfig(n_diseases=4), 0)
    vocab = build_vocabulary(kb)
    a = encode_case(vocab, Case(0, 0, frozenset(range(12))), kb).token_ids
    b = encode_case(vocab, Case(0, 0, frozenset(perm)), kb).token_ids
    assert np.array_equal(a, b)


def test_bag_matches_sequence():
    kb = generate_synthetic_kb(KbGenConfig(n_diseases=6), 0)
    ds = simulate_dataset(kb, 40, 0)
    vocab = build_vocabulary(kb)
    enc = Encoder(vocab, kb)
    seqs, labels = encode_dataset(vocab, ds, kb)
    bags = enc.bags(ds.cases)
    for s, bag in zip(seqs, bags):
        assert set(s[s > 0].tolist()) == set((np.flatnonzero(bag) + 1).tolist())
    assert labels.tolist() == [kb.disease_ids.index(c.disease_id) for c in ds.cases]


def test_unknown_label():
    kb = hand_kb()
    with pytest.raises(DataError):
        Encoder(build_vocabulary(kb), kb).label(Case(0, 7, frozenset({1})))


# --- logistic regression ------------------------------------------------------

def _separable(n, rng):
    y = rng.integers(0, 2, size=n)
    X = np.zeros((n, 10), dtype=np.float32)
    for i, c in enumerate(y):
        cols = rng.choice(5, size=rng.integers(1, 4), replace=False) + 5 * c
        X[i, cols] = 1
    return X, y


def test_lr_separable_toy():
    rng = np.random.default_rng(0)
    tr, te = _separable(400, rng), _separable(200, rng)
    m = lr_train(tr, None, lam=0.01, config=TrainConfig(batch_size=32, learning_rate=0.5, epochs=5))
    assert np.mean(np.argmax(lr_predict(m, te[0]), axis=1) == te[1]) == 1.0


def test_lr_huge_penalty_gives_priors():
    rng = np.random.default_rng(1)
    X, _ = _separable(20_000, rng)
    y = (np.arange(20_000) % 4 == 0).astype(np.int64)  # prior (0.75, 0.25), unrelated to X
    # one long epoch: accuracy is flat once W vanishes, so later epochs would never be selected
    cfg = TrainConfig(batch_size=64, learning_rate=0.01, epochs=1)
    m = lr_train((X, y), None, lam=1e6, config=cfg)
    loose = lr_train((X, y), None, lam=0.01, config=cfg)
    assert np.linalg.norm(m.W) < 1e-2 * np.linalg.norm(loose.W)
    p = lr_predict(m, X).mean(axis=0)
    assert np.allclose(p, [0.75, 0.25], atol=0.03)


def test_lr_predict_examples():
    m = LRModel(np.zeros((3, 4)), np.zeros(3), 0.0, (0, 1, 2))
    assert np.allclose(lr_predict(m, np.ones(4)), 1 / 3, atol=1e-15)
    m2 = LRModel(np.zeros((2, 4)), np.array([10.0, 0.0]), 0.0, (0, 1))
    assert lr_predict(m2, np.zeros(4))[0] > 0.999
    with pytest.raises(DomainError):
        lr_predict(m, np.ones(5))


def test_lr_binary_features():
    rng = np.random.default_rng(2)
    m = LRModel(rng.normal(size=(3, 4)), rng.normal(size=3), 0.0, (0, 1, 2))
    # doubling the weight of an absent feature's bag entry (still 0) leaves predictions alone
    x = np.array([1.0, 0.0, 1.0, 0.0])
    assert np.array_equal(lr_predict(m, x), lr_predict(m, x * np.array([1, 2, 1, 2])))
    assert abs(lr_predict(m, x).sum() - 1) < 1e-12


def test_lr_gradient_check():
    rng = np.random.default_rng(3)
    m = LRModel(rng.normal(size=(3, 5)), rng.normal(size=3), 0.01, (0, 1, 2))
    X = (rng.random((4, 5)) < 0.5).astype(float)
    assert gradient_check(m, (X, rng.integers(0, 3, 4))) < 1e-6


def test_zero_model_bias_gradient():
    K = 4
    _, dW, db = lr_objective(np.zeros((K, 3)), np.zeros(K), np.ones((1, 3)), np.array([2]), 0.0)
    expected = np.full(K, 1 / K)
    expected[2] -= 1
    assert np.array_equal(db, expected)
    assert np.array_equal(dW, expected[:, None] * np.ones((1, 3)))


def test_relative_error_floor():
    assert relative_error(np.array([0.0]), np.array([1e-12]))[0] < 1e-3


def test_lr_divergence_is_reported():
    X = np.full((8, 2), 1e30, dtype=np.float32)
    y = np.array([0, 1] * 4)
    with np.errstate(all="ignore"), pytest.raises(DivergedError):
        lr_train((X, y), None, config=TrainConfig(batch_size=4, learning_rate=1e10, epochs=3))


def test_lr_needs_two_classes():
    with pytest.raises(DataError):
        lr_train((np.ones((3, 2)), np.zeros(3, dtype=int)), None)


# --- convnet ------------------------------------------------------------------

def test_tiny_preset():
    c = ConvNetConfig.tiny()
    assert (c.seq_len, c.embed_dim, c.filters, c.hidden) == (8, 4, (6, 4, 3), 10)


def test_full_scale_shapes():
    K = 17
    m = init_convnet(ConvNetConfig.full(), 300, K, seed=0)
    probs, cache = convnet_forward(m, np.arange(200) % 300)
    assert cache["shapes"] == [(200, 50), (200, 256), (200, 128), (200, 64), (12800,), (180,), (K,)]
    assert cache["shapes"] == ConvNetConfig.full().activation_shapes(K)
    assert abs(probs.sum() - 1) < 1e-6


def test_zero_network_is_uniform():
    m = init_convnet(ConvNetConfig.tiny(), 20, 5, dtype="float64")
    for v in m.params.values():
        v[...] = 0
    probs, _ = convnet_forward(m, np.zeros(8, dtype=int))
    assert np.allclose(probs, 0.2, atol=1e-15)


def test_eval_mode_is_deterministic():
    m = init_convnet(ConvNetConfig.tiny(), 20, 5, seed=3)
    ids = np.random.default_rng(0).integers(0, 20, size=(4, 8))
    a, _ = convnet_forward(m, ids)
    b, _ = convnet_forward(m, ids)
    assert np.array_equal(a, b)
    assert np.allclose(a.sum(axis=1), 1, atol=1e-6)


def test_forward_rejects_bad_input():
    m = init_convnet(ConvNetConfig.tiny(), 20, 5)
    with pytest.raises(DomainError):
        convnet_forward(m, np.zeros(9, dtype=int))
    with pytest.raises(DomainError):
        convnet_forward(m, np.full(8, 20))
    with pytest.raises(DomainError):
        convnet_forward(m, np.zeros(8, dtype=int), train_mode=True)


@pytest.mark.parametrize("seed", range(10))
def test_convnet_gradient_check(seed):
    m = init_convnet(ConvNetConfig.tiny(), 12, 5, seed=seed, dtype="float64")
    # zero biases put every pad window exactly on the ReLU kink; move off it
    rng = np.random.default_rng(seed)
    for k, v in m.params.items():
        if k.endswith("_b"):
            v[:] = rng.normal(0, 0.1, v.shape)
    ids = np.array([[3, 1, 7, 11, 2, 0, 0, 0], [5, 6, 9, 10, 4, 8, 0, 0]])
    assert gradient_check(m, (ids, np.array([2, 4]))) < 1e-4


def test_pad_embedding_row_gets_no_update():
    m = init_convnet(ConvNetConfig.tiny(), 12, 5, seed=1)
    _, cache = convnet_forward(m, np.array([[1, 2, 0, 0, 0, 0, 0, 0]]))
    _, g = convnet_backward(m, cache, np.array([0]))
    assert not g["embed"][0].any() and not g["embed"][5].any() and g["embed"][1].any()


def test_dropout_preserves_expectation():
    m = init_convnet(ConvNetConfig.tiny(), 12, 5, seed=2, dtype="float64")
    ids = np.tile(np.array([1, 4, 7, 9, 0, 0, 0, 0]), (10_000, 1))
    _, ev = convnet_forward(m, ids[:1])
    _, tr = convnet_forward(m, ids, train_mode=True, rng=np.random.default_rng(0))
    ratio = tr["d1"].mean(axis=0).sum() / ev["d1"][0].sum()
    assert abs(ratio - 1) < 0.02


def test_shuffle_tokens_keeps_pads():
    ids = np.array([[4, 5, 6, 0, 0], [1, 0, 0, 0, 0]])
    out = shuffle_tokens(ids, np.random.default_rng(0))
    assert sorted(out[0, :3]) == [4, 5, 6] and not out[0, 3:].any()
    assert out[1].tolist() == [1, 0, 0, 0, 0]


def _tiny_problem(seed=0, n=300):
    kb = generate_synthetic_kb(KbGenConfig(n_diseases=5), seed)
    vocab = build_vocabulary(kb)
    ds = simulate_dataset(kb, n, seed)
    enc = Encoder(vocab, kb, seq_len=16)
    return kb, vocab, (enc.sequences(ds.cases), enc.labels(ds.cases))


def test_convnet_training_is_deterministic():
    _, vocab, data = _tiny_problem()
    cfg = TrainConfig(batch_size=32, learning_rate=0.01, epochs=2, seed=4)
    mc = ConvNetConfig(seq_len=16, embed_dim=8, filters=(8, 8, 4), hidden=16)
    a = convnet_train(data, None, cfg, mc, vocab.size, 5)
    b = convnet_train(data, None, cfg, mc, vocab.size, 5)
    assert model_hash(a) == model_hash(b)


def test_first_epoch_beats_chance():
    _, vocab, data = _tiny_problem(1, n=2000)
    mc = ConvNetConfig(seq_len=16, embed_dim=8, filters=(8, 8, 4), hidden=16)
    cfg = TrainConfig(batch_size=16, learning_rate=0.01, epochs=1)
    probs, _ = convnet_forward(init_convnet(mc, vocab.size, 5, seed=cfg.seed), data[0])
    initial = -np.log(probs[np.arange(len(data[1])), data[1]]).mean()
    m = convnet_train(data, None, cfg, mc, vocab.size, 5)
    first = m.meta["history"][0]["train_nll"]
    assert first < math.log(5) and first < initial


def test_noise_augment_adds_at_most_two_findings():
    kb = generate_synthetic_kb(KbGenConfig(n_diseases=6), 2)
    ds = simulate_dataset(kb, 200, 2)
    cfg = TrainConfig(noise_augment=2, pool_size=10)
    enc = Encoder(build_vocabulary(kb), kb)
    inputs = noisy_epoch_inputs(ds, kb, enc, cfg)
    pool_tokens = set(enc.token_set(prevalent_pool(kb, 10)))
    two_max = max(len(enc.token_set([a, b])) for a in prevalent_pool(kb, 10) for b in prevalent_pool(kb, 10))
    grew = 0
    for epoch in (0, 1):
        noisy = inputs(epoch)
        for row, c in zip(noisy, ds.cases):
            base = set(enc.token_set(c.findings_present))
            got = set(row[row > 0].tolist())
            assert base <= got and got - base <= pool_tokens and len(got - base) <= two_max
            grew += got != base
    assert grew > 0
    assert not np.array_equal(inputs(0), inputs(1))


@pytest.mark.slow
def test_convnet_learns_ten_diseases():
    kb = generate_synthetic_kb(KbGenConfig(n_diseases=10), 3)
    ds = simulate_dataset(kb, 5000, 3)
    tr, va, te = split_dataset(ds, seed=3)
    cfg = TrainConfig(batch_size=64, learning_rate=0.01, epochs=20, seed=3)
    model, vocab = fit_convnet(tr, va, kb, cfg, ConvNetConfig.desk())
    hits = ConvNetRanker(model, vocab, kb).rank_many(te.cases)[:, 0] == te.labels()
    assert hits.mean() >= 0.9


def test_lr_ranker_on_simulated_cases():
    kb = generate_synthetic_kb(KbGenConfig(n_diseases=10), 4)
    tr, va, te = split_dataset(simulate_dataset(kb, 3000, 4), seed=4)
    model, vocab = fit_lr(tr, va, kb, config=TrainConfig(batch_size=64, learning_rate=0.5, epochs=10))
    r = LRRanker(model, vocab, kb)
    assert (r.rank_many(te.cases)[:, 0] == te.labels()).mean() >= 0.85
    rd = r.rank(te.cases[0])
    assert rd.disease_ids[0] == r.rank_many(te.cases[:1])[0, 0] and abs(sum(rd.scores) - 1) < 1e-5


# --- config and model files ---------------------------------------------------

@pytest.mark.parametrize("kw", [{"batch_size": 0}, {"learning_rate": 0}, {"momentum": 1.0}, {"epochs": 0}])
def test_train_config_validation(kw):
    with pytest.raises(ConfigError):
        TrainConfig(**kw)


def test_train_config_unknown_key():
    with pytest.raises(ConfigError) as exc:
        TrainConfig.from_dict({"batch": 3})
    assert exc.value.code == "usage"


def test_model_round_trip(tmp_path):
    kb, vocab, data = _tiny_problem()
    lr = LRModel(np.arange(6.0).reshape(2, 3), np.array([1.0, -1.0]), 0.5, (4, 9), {"k": 1})
    save_model(lr, vocab, tmp_path / "lr.npz")
    back, v = load_model(tmp_path / "lr.npz")
    assert model_hash(back) == model_hash(lr) and back.disease_ids == (4, 9) and v == vocab and back.lam == 0.5

    cn = init_convnet(ConvNetConfig(seq_len=16, embed_dim=8, filters=(8, 8, 4), hidden=16), vocab.size, 5, seed=1)
    save_model(cn, vocab, tmp_path / "cn.npz")
    back, _ = load_model(tmp_path / "cn.npz")
    assert isinstance(back, ConvNetModel) and back.config == cn.config and model_hash(back) == model_hash(cn)
    assert np.array_equal(convnet_forward(back, data[0][:3])[0], convnet_forward(cn, data[0][:3])[0])


def test_load_garbage(tmp_path):
    p = tmp_path / "x.npz"
    p.write_bytes(b"not a model")
    with pytest.raises(ParseError):
        load_model(p)
