import math

import numpy as np
import pytest

from uibrec import scorers, training
from uibrec.dataset import InteractionSet, TrainBatch, prepare_bundle
from uibrec.evaluation import evaluate
from uibrec.losses import LossSpec, effective_pair_stats
from uibrec.presets import ALPHA_GRID
from uibrec.training import (AdagradState, Corrupted, TrainConfig, adagrad_step, adagrad_update,
                             batch_objective, corrupted_counts, corrupted_rate)


# -- Adagrad ---------------------------------------------------------------


def test_zero_gradient_is_a_no_op():
    st = scorers.init_state("mf", 4, 5, 3)
    before = {k: v.copy() for k, v in st.params.items()}
    g = scorers.Grads(st)
    g.add_rows("P", [0, 2], np.zeros((2, 3)))
    g.add_dense("W", np.zeros(3))
    adagrad_step(st, AdagradState.zeros_like(st), g, lr=0.7)
    for k in before:
        np.testing.assert_array_equal(st.params[k], before[k])


def test_first_step_moves_by_lr():
    theta, acc = np.array([0.25]), np.zeros(1)
    adagrad_update(theta, acc, np.array([2.0]), lr=1.0, eps=0.0)
    assert theta[0] == -0.75 and acc[0] == 4.0


def test_quadratic_trajectory_matches_scalar_reference():
    a, c, lr, eps, tau = 3.0, 1.5, 0.4, 1e-10, 0.05
    theta, acc = np.array([-2.0]), np.zeros(1)
    t, s = -2.0, 0.0
    for _ in range(10):
        adagrad_update(theta, acc, a * (theta - c), lr, tau, eps)
        g = a * (t - c) + tau * t
        s += g * g
        t -= lr * g / (math.sqrt(s) + eps)
        assert theta[0] == pytest.approx(t, abs=1e-12)


def test_sparse_step_matches_dense_on_touched_rows():
    rng = np.random.default_rng(0)
    st = scorers.init_state("mf", 6, 5, 3)
    ref = st.copy()
    opt, ref_acc = AdagradState.zeros_like(st), {k: np.zeros_like(v) for k, v in st.params.items()}
    for _ in range(4):
        rows = rng.choice(6, 3, replace=False)
        gv = rng.normal(size=(3, 3))
        g = scorers.Grads(st)
        g.add_rows("P", rows, gv)
        adagrad_step(st, opt, g, lr=0.3, tau=0.2)
        for r, v in zip(rows, gv):
            adagrad_update(ref.params["P"][r], ref_acc["P"][r], v, 0.3, 0.2)
    np.testing.assert_allclose(st.params["P"], ref.params["P"], atol=1e-14)
    np.testing.assert_allclose(opt.acc["P"], ref_acc["P"], atol=1e-14)


def test_accumulators_monotone_and_nonnegative(small_bundle):
    cfg = TrainConfig("bpr-uib", d=8, batch_size=128, lr=0.5, tau=0.1, seed=1)
    st = training.init_model(cfg, small_bundle)
    opt = AdagradState.zeros_like(st)
    rng = np.random.default_rng(0)
    from uibrec.dataset import sample_batch
    prev = {k: v.copy() for k, v in opt.acc.items()}
    for _ in range(20):
        res = batch_objective(st, cfg.loss_spec(), sample_batch(small_bundle.train, 128, 32, rng))
        adagrad_step(st, opt, res.grads, cfg.lr, cfg.tau)
        for k, v in opt.acc.items():
            assert np.all(v >= prev[k]) and np.all(v >= 0)
            prev[k] = v.copy()


def test_non_finite_gradient_aborts():
    st = scorers.init_state("mf", 2, 2, 2)
    g = scorers.Grads(st)
    g.add_rows("P", [0], np.array([[np.nan, 0.0]]))
    with pytest.raises(training.NumericalError):
        adagrad_step(st, AdagradState.zeros_like(st), g, 1.0)


def test_margins_clamped():
    st = scorers.init_state("metric", 2, 3, 2, margins=True)
    g = scorers.Grads(st)
    g.add_rows("margins", [0, 1], np.array([[-50.0, 50.0], [50.0, -50.0]]))
    adagrad_step(st, AdagradState.zeros_like(st), g, lr=10.0)
    assert st.params["margins"].min() >= 0 and st.params["margins"].max() <= scorers.MARGIN_MAX


# -- separability and learning ---------------------------------------------


def test_one_user_two_items_orders_boundary():
    data = InteractionSet.from_pairs([0], [0], 1, 2, "train")
    st = scorers.init_state("mf", 1, 2, 4, seed=3)
    opt = AdagradState.zeros_like(st)
    spec = LossSpec("uib-lnsig", alpha=1.0)
    rng = np.random.default_rng(0)
    from uibrec.dataset import sample_batch
    for _ in range(300):
        res = batch_objective(st, spec, sample_batch(data, 4, 8, rng))
        adagrad_step(st, opt, res.grads, lr=0.5)
    s0, s1 = scorers.score_mf(st, 0, 0), scorers.score_mf(st, 0, 1)
    assert s0 > scorers.boundary(st, 0) > s1


def block_bundle(seed=0):
    """20 users in 4 taste blocks of 50 items; each user holds 15 items of its block."""
    rng = np.random.default_rng(seed)
    us, xs = [], []
    for u in range(20):
        blk = u % 4
        items = blk * 50 + rng.choice(50, 15, replace=False)
        us += [u] * 15
        xs += items.tolist()
    data = InteractionSet.from_pairs(us, xs, 20, 200, timestamps=rng.permutation(len(us)))
    return prepare_bundle(data, "blocks", split_seed=seed)


def random_ndcg10(n_cand=101):
    return sum(1 / math.log2(r + 1) for r in range(1, 11)) / n_cand


def test_bpr_beats_random_on_blocks():
    b = block_bundle()
    res = training.train(TrainConfig("bpr", d=8, batch_size=64, epochs=40, lr=0.5, patience=40), b)
    # about a fifth of the sampled negatives share the positive's block, so
    # perfect block recovery tops out near 0.2; random order gives 0.045
    assert res.best_val_ndcg10 > 3 * random_ndcg10()
    assert random_ndcg10() == pytest.approx(0.04499, abs=1e-5)


def test_training_is_deterministic(tiny_bundle, tmp_path):
    cfg = TrainConfig("ncf-uib", d=8, batch_size=64, epochs=3, lr=0.5, tau=0.1, seed=4, mlp_layers=(8, 4))
    a = training.train(cfg, tiny_bundle, history_path=tmp_path / "a.jsonl")
    b = training.train(cfg, tiny_bundle, history_path=tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    assert scorers.checkpoint_bytes(a.state) == scorers.checkpoint_bytes(b.state)
    c = training.train(TrainConfig(**{**cfg.to_dict(), "seed": 5}), tiny_bundle)
    assert c.history != a.history


def test_history_schema(tiny_bundle, tmp_path):
    res = training.train(TrainConfig("bpr", d=4, batch_size=64, epochs=2), tiny_bundle)
    keys = {"epoch", "loss_total", "loss_pos", "loss_neg", "corrupted_rate", "val_hit1", "val_hit10",
            "val_ndcg10", "val_mrr10"}
    for row in res.history:
        assert keys <= set(row)
        assert 0 <= row["corrupted_rate"] <= 1


@pytest.mark.parametrize("method", ["bpr", "bpr-uib", "ncf", "ncf-uib", "sml", "sml-uib", "lightgcn",
                                    "lightgcn-uib"])
def test_early_stop_returns_history_max(method, tiny_bundle, tmp_path):
    cfg = TrainConfig.from_preset(method, "ml1m", d=8, batch_size=128, epochs=8, patience=3,
                                  mlp_layers=(8, 4), n_layers=2)
    ck = tmp_path / "best.ckpt"
    res = training.train(cfg, tiny_bundle, checkpoint_path=ck)
    vals = [r["val_ndcg10"] for r in res.history]
    assert res.best_val_ndcg10 == max(vals)
    assert res.history[res.best_epoch - 1]["val_ndcg10"] == max(vals)
    assert evaluate(res.state, tiny_bundle.cand_valid).mean["ndcg@10"] == max(vals)
    loaded = scorers.load_checkpoint(ck)
    assert evaluate(loaded, tiny_bundle.cand_valid).mean["ndcg@10"] == max(vals)
    if len(vals) < 8:
        assert len(vals) - res.best_epoch == 3


def test_epoch_batch_budget(tiny_bundle, monkeypatch):
    calls = []
    real = training.sample_batch

    def counting(train, batch_size, m_neg, rng):
        b = real(train, batch_size, m_neg, rng)
        calls.append((b.size, b.negatives.shape[1]))
        return b

    monkeypatch.setattr(training, "sample_batch", counting)
    cfg = TrainConfig("bpr-uib", d=4, batch_size=100, epochs=2, patience=5)
    res = training.train(cfg, tiny_bundle)
    n = math.ceil(tiny_bundle.train.n_interactions / 100)
    assert len(calls) == 2 * n
    assert all(c == (100, 32) for c in calls)
    assert res.trace.samples == [n * 100 * 33] * 2


def test_negatives_per_family():
    assert TrainConfig("bpr").negatives == 1
    assert TrainConfig("bpr-uib").negatives == 32
    assert TrainConfig("ncf").negatives == 4
    assert TrainConfig("sml-uib").negatives == 32
    assert TrainConfig("bpr", m_neg=7).negatives == 7


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig("bpr", batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig("bpr", lr=-1)
    with pytest.raises(ValueError):
        TrainConfig("bpr-uib", alpha=0)
    with pytest.raises(ValueError):
        TrainConfig("svd")
    assert TrainConfig.from_preset("bpr-uib", "lastfm").to_dict()["lr"] == 3.0


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_raises_with_last_good_state(tiny_bundle):
    cfg = TrainConfig("bpr", d=4, batch_size=64, epochs=5, lr=1e300)
    with pytest.raises(training.TrainingDiverged) as ei:
        training.train(cfg, tiny_bundle)
    assert ei.value.state is not None


# -- corrupted rate --------------------------------------------------------


def test_corrupted_rate_separated_is_zero():
    st = scorers.init_state("mf", 1, 4, 2)
    st.params["P"][0] = [1.0, 1.0]
    st.params["Q"][:] = [[2, 0], [1, 0], [-1, 0], [-2, 0]]
    st.params["W"][:] = [0.0, 0.0]
    batch = TrainBatch(np.array([0, 0]), np.array([0, 1]), np.array([[2, 3], [3, 2]]))
    assert corrupted_rate(st, LossSpec("pairwise-lnsig"), batch) == 0.0
    assert corrupted_rate(st, LossSpec("uib-lnsig"), batch) == 0.0


def test_corrupted_rate_half_at_random_init():
    st = scorers.init_state("mf", 200, 300, 32, seed=0)
    rng = np.random.default_rng(1)
    batch = TrainBatch(rng.integers(0, 200, 5000), rng.integers(0, 300, 5000), rng.integers(0, 300, (5000, 1)))
    assert corrupted_rate(st, LossSpec("pairwise-lnsig"), batch) == pytest.approx(0.5, abs=0.02)


def test_corrupted_rate_agrees_with_effective_pair_stats():
    rng = np.random.default_rng(2)
    for _ in range(50):
        s_p = rng.integers(-3, 4, 1).astype(float)
        s_n = rng.integers(-3, 4, (1, 9)).astype(float)
        c = corrupted_counts("pairwise-lnsig", s_p, s_n)
        assert c.per_comparison == effective_pair_stats(s_p, s_n, kind="pairwise")[0]
        B = 4
        s_p = rng.integers(-3, 4, B).astype(float)
        s_n = rng.integers(-3, 4, (B, 6)).astype(float)
        b = float(rng.integers(-2, 3))
        c = corrupted_counts("uib-lnsig", s_p, s_n, np.full(B, b))
        assert c.per_comparison == effective_pair_stats(s_p, s_n, b, kind="uib")[1]
        assert training.pooled_corrupted_rate(s_p, s_n, b) == c.per_comparison


def test_corrupted_balanced_vs_per_comparison():
    c = Corrupted(pos_bad=1, pos_n=2, neg_bad=0, neg_n=8)
    assert c.per_comparison == pytest.approx(0.1)
    assert c.balanced == pytest.approx(0.25)
    assert (c + c).balanced == c.balanced
    assert Corrupted(0, 0, 3, 6).balanced == 0.5


# -- grid search -----------------------------------------------------------


def test_grid_of_one(tiny_bundle, tmp_path):
    tmpl = TrainConfig("bpr", d=4, batch_size=128, epochs=2)
    best, report = training.grid_search(tmpl, {"lr": [0.3]}, tiny_bundle, tmp_path / "grid.csv")
    assert best.lr == 0.3 and len(report) == 1
    assert (tmp_path / "grid.csv").read_text().startswith("run,lr,")


def test_alpha_grid_enumerates_seven():
    cfgs = training.grid_configs(TrainConfig("bpr-uib"), {"alpha": list(ALPHA_GRID)})
    assert [c.alpha for c in cfgs] == [0.1, 0.2, 1.0, 2.0, 4.0, 8.0, 16.0]
    assert len(training.grid_configs(TrainConfig("bpr-uib"), {"alpha": [1, 2], "lr": [1, 2, 3]})) == 6
    with pytest.raises(ValueError):
        training.grid_configs(TrainConfig("bpr"), {})
    with pytest.raises(ValueError):
        training.grid_configs(TrainConfig("bpr"), {"bogus": [1]})


def test_grid_best_is_report_argmax(tiny_bundle):
    tmpl = TrainConfig("bpr-uib", d=4, batch_size=128, epochs=3)
    best, report = training.grid_search(tmpl, {"lr": [0.05, 0.5], "alpha": [1.0, 8.0]}, tiny_bundle)
    top = max(report, key=lambda r: r["val_ndcg10"])
    first_top = next(r for r in report if r["val_ndcg10"] == top["val_ndcg10"])
    assert (best.lr, best.alpha) == (first_top["lr"], first_top["alpha"])
