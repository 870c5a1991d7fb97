import math

import numpy as np
import pytest

from bridge import tensor as T
from bridge.data import Graph, SyntheticSpec, generate_synthetic, split_edges, split_nodes
from bridge.layers import LayerSpec
from bridge.model import BridgeModel, ModelConfig
from bridge.tasks import (NegativeSamplingError, TrainConfig, TrainingError, classify_nodes,
                          evaluate_fraud, evaluate_link, link_loss, sample_negatives, score_link, train)
from bridge.tensor import Tensor

SMALL = dict(d=8, heads=2, blocks=1, max_len=8)


def link_data(seed=0, n=20, c=2):
    spec = SyntheticSpec(n, c, 6, 4 * c, 0.5, 0.02)
    return split_edges(generate_synthetic(spec, seed, max_len=8), seed)


# -- scoring and losses -------------------------------------------------------------


def test_score_link_examples():
    assert score_link(np.array([1.0, 0.0]), np.array([0.0, 3.0])).data == 0.0
    h = np.array([1.5, -2.0, 0.5])
    assert score_link(h, h).data == pytest.approx(float(h @ h), abs=0)
    rng = np.random.default_rng(0)
    for _ in range(100):
        a, b = rng.normal(size=(2, 7))
        assert score_link(a, b).data == score_link(b, a).data
    with pytest.raises(ValueError):
        score_link(np.ones(2), np.ones(3))


def test_link_loss_examples():
    assert link_loss(Tensor(np.zeros(3)), Tensor(np.zeros(5))).data == pytest.approx(math.log(2), abs=1e-15)
    assert link_loss(Tensor([20.0]), Tensor([-20.0, -20.0])).data < 1e-8
    with pytest.raises(ValueError):
        link_loss(Tensor(np.zeros(0)), Tensor(np.zeros(2)))


def test_link_loss_gradient():
    rng = np.random.default_rng(1)
    pos, neg = Tensor(rng.normal(size=4), requires_grad=True), Tensor(rng.normal(size=6), requires_grad=True)
    assert T.finite_difference_check(lambda: link_loss(pos, neg), [pos, neg]) < 1e-6


def test_classify_nodes():
    h = Tensor(np.zeros((3, 4)))
    w, b = Tensor(np.ones((4, 1)), requires_grad=True), Tensor(np.zeros(1), requires_grad=True)
    assert np.array_equal(classify_nodes(h, w, b).data, [0.5, 0.5, 0.5])
    hs = Tensor(np.linspace(-3, 3, 7)[:, None] * np.ones((1, 4)))
    p = classify_nodes(hs, w, b).data
    assert np.all(np.diff(p) > 0) and np.all((p > 0) & (p < 1))
    rng = np.random.default_rng(2)
    h = Tensor(rng.normal(size=(5, 4)))
    w.data[...] = rng.normal(size=(4, 1))
    fn = lambda: T.tsum(T.scale(classify_nodes(h, w, b), 1.0))
    assert T.finite_difference_check(fn, [w, b]) < 1e-6


# -- negative sampling ----------------------------------------------------------------


def test_negatives_exhaust_exact_pool():
    g = Graph(5, [(0, 4)])
    negs = sample_negatives(g, 0, 3, np.random.default_rng(0))
    assert sorted(negs.tolist()) == [1, 2, 3]


def test_negatives_deterministic_and_distinct():
    g = link_data().train_graph()
    a = sample_negatives(g, 3, 5, np.random.default_rng(7))
    b = sample_negatives(g, 3, 5, np.random.default_rng(7))
    assert np.array_equal(a, b) and len(set(a.tolist())) == 5
    assert 3 not in a and not np.isin(a, g.neighbors(3)).any()


def test_negatives_pool_too_small_names_node():
    g = Graph(4, [(2, 0), (2, 1)])
    with pytest.raises(NegativeSamplingError, match=r"node 2: only 1 "):
        sample_negatives(g, 2, 2, np.random.default_rng(0))


def test_negative_sampling_is_uniform():
    # 50-node pool: anchor 0 plus 9 neighbors out of 60 nodes.
    g = Graph(60, [(0, k) for k in range(1, 10)])
    rng = np.random.default_rng(123)
    counts = np.zeros(60)
    for _ in range(100_000):
        counts[sample_negatives(g, 0, 1, rng)[0]] += 1
    pool = counts[10:]
    assert counts[:10].sum() == 0
    expected = 100_000 / 50
    assert np.all(np.abs(pool - expected) / expected < 0.15)


# -- training -----------------------------------------------------------------------------


def test_zero_learning_rate_leaves_parameters_untouched():
    ds = link_data()
    model = BridgeModel(ModelConfig(**SMALL), len(ds.vocab), seed=0)
    before = {k: v.data.copy() for k, v in model.named_parameters().items()}
    train(ds, model, TrainConfig(epochs=2, lr=0.0), "link", seed=0)
    assert all(np.array_equal(before[k], v.data) for k, v in model.named_parameters().items())


def test_same_seed_same_history():
    ds = link_data(1)
    runs = [train(ds, BridgeModel(ModelConfig(**SMALL), len(ds.vocab), seed=1),
                  TrainConfig(epochs=3, lr=1e-2), "link", seed=1)[1] for _ in range(2)]
    assert runs[0] == runs[1]


def test_link_training_reduces_loss():
    ds = link_data(2)
    model = BridgeModel(ModelConfig(**SMALL), len(ds.vocab), seed=2)
    _, hist = train(ds, model, TrainConfig(epochs=30, lr=1e-2, batch_size=16), "link", seed=2)
    assert len(hist) == 30 and all(np.isfinite(hist))
    assert hist[-1] < hist[0]


def test_every_parameter_gets_a_gradient():
    ds = link_data(3, n=40, c=4)
    cfg = ModelConfig(**SMALL, layers=(LayerSpec(weights="learned"), LayerSpec("GCN")))
    model = BridgeModel(cfg, len(ds.vocab), seed=3)
    seen: dict[str, bool] = {}
    train(ds, model, TrainConfig(epochs=5, lr=1e-2, batch_size=32), "link", seed=3, grad_log=seen)
    assert set(seen) == set(model.named_parameters())
    dead = [k for k, v in seen.items() if not v]
    assert not dead, dead


def test_fraud_training_and_eval():
    spec = SyntheticSpec(60, 2, 6, 8, 0.2, 0.02, fraud_rate=0.3)
    ds = split_nodes(generate_synthetic(spec, 0, max_len=8), 0)
    model = BridgeModel(ModelConfig(**SMALL), len(ds.vocab), seed=0, head=True)
    _, hist = train(ds, model, TrainConfig(epochs=20, lr=1e-2), "fraud", seed=0)
    assert hist[-1] < hist[0]
    report = evaluate_fraud(ds, model, "test", 0)
    assert 0 <= report.pr_auc <= 1 and 0 <= report.max_f1 <= 1


def test_nan_loss_aborts_with_location():
    ds = link_data(4)
    model = BridgeModel(ModelConfig(**SMALL), len(ds.vocab), seed=4)
    model.encoder.params["tok_emb"].data[...] = 1e200
    with pytest.raises(TrainingError, match=r"epoch 0 step 0"):
        with np.errstate(all="ignore"):
            train(ds, model, TrainConfig(epochs=1), "link", seed=4)


def test_frozen_encoder_is_not_updated():
    ds = link_data(5)
    model = BridgeModel(ModelConfig(**SMALL), len(ds.vocab), seed=5)
    before = model.encoder.params["tok_emb"].data.copy()
    train(ds, model, TrainConfig(epochs=2, lr=1e-2, freeze_encoder=True), "link", seed=5)
    assert np.array_equal(before, model.encoder.params["tok_emb"].data)


# -- evaluation ---------------------------------------------------------------------------


def test_link_eval_is_deterministic_and_counts_both_directions():
    ds = link_data(6, n=40, c=2)
    model = BridgeModel(ModelConfig(**SMALL), len(ds.vocab), seed=6)
    a = evaluate_link(ds, model, "test", seed=6, negatives=10)
    b = evaluate_link(ds, model, "test", seed=6, negatives=10)
    assert a == b
    assert a.query_count == 2 * len(ds.split["test"])
    assert a.hits[1] <= a.hits[3] <= a.hits[5] <= a.hits[10]


def test_link_eval_too_many_negatives_names_node():
    ds = link_data(7)
    model = BridgeModel(ModelConfig(**SMALL), len(ds.vocab), seed=7)
    with pytest.raises(NegativeSamplingError, match=r"node \d+"):
        evaluate_link(ds, model, "test", seed=7, negatives=100)


def test_constant_scores_rank_last():
    # All representations equal -> every candidate ties -> pessimistic rank K + 1.
    ds = link_data(8, n=40, c=2)
    model = BridgeModel(ModelConfig(**SMALL, layers=(), graph_only=True), len(ds.vocab), seed=8)
    r = evaluate_link(ds, model, "test", seed=8, negatives=5)
    assert r.mrr == pytest.approx(1 / 6, abs=1e-15)


@pytest.mark.slow
def test_joint_training_beats_frozen_encoder():
    # Synthetic link task at acceptance scale; final training loss, majority of 10 seeds.
    spec = SyntheticSpec(200, 4, 16, 64, 0.10, 0.005)
    wins = []
    for seed in range(10):
        ds = split_edges(generate_synthetic(spec, seed), seed)
        final = []
        for freeze in (False, True):
            model = BridgeModel(ModelConfig(), len(ds.vocab), seed)
            cfg = TrainConfig(epochs=50, lr=1e-2, batch_size=128, freeze_encoder=freeze)
            final.append(train(ds, model, cfg, "link", seed)[1][-1])
        wins.append(final[0] < final[1])
    assert sum(wins) > 5, wins
