import numpy as np
import pytest

from uibrec import scorers
from uibrec.dataset import InteractionSet, TrainBatch
from uibrec.losses import LossSpec
from _gradcheck import check_batch_gradients, rel_err
from conftest import random_interactions

KINDS = ["mf", "metric", "mlp", "gcn"]


def make_state(kind, n_users=6, n_items=9, d=4, seed=0, K=2, boundary=True, margins=False, density=0.4):
    graph = None
    if kind == "gcn":
        data = random_interactions(np.random.default_rng(seed + 100), n_users, n_items, density, "train")
        graph = scorers.GraphEncoder.from_interactions(data, K)
    st = scorers.init_state(kind, n_users, n_items, d, seed, boundary=boundary, margins=margins,
                            layers=(5, 3), graph=graph)
    rng = np.random.default_rng(seed + 1)
    for k, v in st.params.items():
        if k != "margins":
            v[...] = rng.normal(0, 0.7, v.shape)
    return st


def test_mf_examples():
    st = scorers.init_state("mf", 2, 2, 3, boundary=False)
    st.params["P"][:] = 0
    assert scorers.score_mf(st, 0, 1) == 0.0
    st.params["P"][0] = [1, 0, 0]
    st.params["Q"][1] = [3, 0, 0]
    assert scorers.score_mf(st, 0, 1) == 3.0


def test_mf_matches_elementwise_sum():
    st = make_state("mf")
    P, Q = st.params["P"], st.params["Q"]
    for u in range(6):
        for x in range(9):
            assert scorers.score_mf(st, u, x) == pytest.approx(sum(P[u, j] * Q[x, j] for j in range(4)), abs=1e-12)


def test_metric_examples_and_oracle():
    st = scorers.init_state("metric", 1, 2, 2, boundary=False)
    st.params["Q"][0] = st.params["P"][0]
    assert scorers.score_metric(st, 0, 0) == 0.0
    st.params["P"][0] = [3.5, 4.0]
    st.params["Q"][1] = [0.5, 0.0]
    assert scorers.score_metric(st, 0, 1) == -25.0
    st = make_state("metric")
    P, Q = st.params["P"], st.params["Q"]
    for u, x in [(0, 0), (3, 7), (5, 8)]:
        assert scorers.score_metric(st, u, x) == pytest.approx(-sum((P[u, j] - Q[x, j]) ** 2 for j in range(4)),
                                                               abs=1e-12)


def test_metric_translation_invariance():
    st = make_state("metric")
    before = scorers.score_all_items(st, np.arange(6))
    shift = np.random.default_rng(9).normal(size=4)
    st.params["P"] += shift
    st.params["Q"] += shift
    np.testing.assert_allclose(scorers.score_all_items(st, np.arange(6)), before, atol=1e-12)


def test_mlp_zero_weights_give_final_bias():
    st = make_state("mlp")
    for k in st.params:
        if k.startswith("mlp.w"):
            st.params[k][:] = 0
    last = f"mlp.b{st.mlp_depth - 1}"
    assert scorers.score_mlp(st, 2, 3) == pytest.approx(float(st.params[last][0]))


def test_mlp_single_linear_identity_layer_sums_inputs():
    st = scorers.init_state("mlp", 2, 2, 3, layers=(), boundary=False)
    st.params["mlp.w0"][:] = 1.0
    st.params["mlp.b0"][:] = 0.0
    u, x = 1, 0
    assert scorers.score_mlp(st, u, x) == pytest.approx(st.params["P"][u].sum() + st.params["Q"][x].sum())


def test_mlp_straight_line_oracle():
    st = make_state("mlp")
    p = st.params
    for u, x in [(0, 1), (4, 8)]:
        h = list(p["P"][u]) + list(p["Q"][x])
        for i in range(3):
            W, b = p[f"mlp.w{i}"], p[f"mlp.b{i}"]
            z = [sum(h[a] * W[a, c] for a in range(len(h))) + b[c] for c in range(W.shape[1])]
            h = [max(v, 0.0) for v in z] if i < 2 else z
        assert scorers.score_mlp(st, u, x) == pytest.approx(h[0], abs=1e-10)


def test_gcn_k0_equals_mf():
    data = random_interactions(np.random.default_rng(0), 5, 7, 0.5, "train")
    st = make_state("mf", 5, 7)
    gst = scorers.ModelState("gcn", st.params, scorers.GraphEncoder.from_interactions(data, 0))
    for u in range(5):
        for x in range(7):
            assert scorers.score_gcn(gst, u, x) == scorers.score_mf(st, u, x)


def test_gcn_single_edge_hand_computed():
    g = scorers.GraphEncoder(np.array([0]), np.array([0]), 1, 1, n_layers=1)
    np.testing.assert_array_equal(g.dense(), [[0, 1], [1, 0]])
    st = scorers.ModelState("gcn", {"P": np.array([[2.0]]), "Q": np.array([[5.0]])}, g)
    # each side becomes (own + other) / 2
    assert scorers.score_gcn(st, 0, 0) == pytest.approx(3.5 * 3.5)


def test_gcn_sparse_matches_dense_oracle():
    data = random_interactions(np.random.default_rng(4), 5, 5, 0.5, "train")
    g = scorers.GraphEncoder.from_interactions(data, 2)
    st = make_state("mf", 5, 5)
    st = scorers.ModelState("gcn", st.params, g)
    A = np.zeros((10, 10))
    u, x = data.pairs()
    du, di = data.degrees(), np.bincount(x, minlength=5)
    for a, b in zip(u, x):
        A[a, 5 + b] = A[5 + b, a] = 1 / np.sqrt(du[a] * di[b])
    np.testing.assert_allclose(g.dense(), A, atol=1e-15)
    E0 = np.vstack([st.params["P"], st.params["Q"]])
    E = (E0 + A @ E0 + A @ A @ E0) / 3
    np.testing.assert_allclose(scorers.score_all_items(st, np.arange(5)), E[:5] @ E[5:].T, atol=1e-10)


def test_gcn_refuses_non_train_split():
    data = random_interactions(np.random.default_rng(0), 3, 4, 0.5, "valid")
    with pytest.raises(ValueError, match="train"):
        scorers.GraphEncoder.from_interactions(data)
    with pytest.raises(ValueError):
        scorers.GraphEncoder.from_interactions(data.with_role("raw"))


def test_boundary_examples_and_linearity():
    st = scorers.init_state("mf", 3, 2, 4)
    assert all(scorers.boundary(st, u) == 0.0 for u in range(3))
    st.params["W"][:] = [1, 0, 0, 0]
    st.params["P"][1, 0] = 2.5
    assert scorers.boundary(st, 1) == 2.5
    st = make_state("mf")
    W, P = st.params["W"], st.params["P"]
    assert scorers.boundary(st, 2) == pytest.approx(sum(W[j] * P[2, j] for j in range(4)), abs=1e-12)
    b = scorers.boundary(st, 2)
    st.params["P"][2] *= -3.25
    assert scorers.boundary(st, 2) == pytest.approx(-3.25 * b, rel=1e-13)


def test_boundary_missing_head():
    st = scorers.init_state("mf", 2, 2, 2, boundary=False)
    with pytest.raises(ValueError):
        scorers.boundary(st, 0)


@pytest.mark.parametrize("kind", KINDS)
def test_batched_scores_match_scalar(kind):
    st = make_state(kind)
    single = {"mf": scorers.score_mf, "metric": scorers.score_metric,
              "mlp": scorers.score_mlp, "gcn": scorers.score_gcn}[kind]
    full = scorers.score_all_items(st, np.arange(6))
    for u in range(6):
        for x in range(9):
            assert full[u, x] == pytest.approx(single(st, u, x), abs=1e-12)
    items = np.random.default_rng(0).integers(0, 9, (6, 5))
    np.testing.assert_allclose(scorers.score_matrix(st, np.arange(6), items),
                               np.take_along_axis(full, items, 1), atol=1e-12)


def test_grad_score_closed_forms():
    st = make_state("mf")
    g = scorers.grad_score(st, 1, 2).to_dense(st)
    np.testing.assert_allclose(g["P"][1], st.params["Q"][2])
    np.testing.assert_allclose(g["Q"][2], st.params["P"][1])
    assert np.count_nonzero(g["P"]) == 4 and np.count_nonzero(g["Q"]) == 4
    st = make_state("metric")
    g = scorers.grad_score(st, 1, 2, upstream=1.0).to_dense(st)
    np.testing.assert_allclose(g["P"][1], -2 * (st.params["P"][1] - st.params["Q"][2]))
    np.testing.assert_allclose(g["Q"][2], 2 * (st.params["P"][1] - st.params["Q"][2]))


@pytest.mark.parametrize("kind", KINDS)
def test_grad_score_finite_difference(kind):
    st = make_state(kind, seed=5)
    rng = np.random.default_rng(6)
    single = {"mf": scorers.score_mf, "metric": scorers.score_metric,
              "mlp": scorers.score_mlp, "gcn": scorers.score_gcn}[kind]
    h = 1e-4
    n_probes = 0
    while n_probes < 100:
        u, x = int(rng.integers(6)), int(rng.integers(9))
        up = float(rng.normal())
        g = scorers.grad_score(st, u, x, upstream=up).to_dense(st)
        name = rng.choice([k for k in st.params if k != "W"])
        idx = tuple(int(rng.integers(n)) for n in st.params[name].shape)
        if kind in ("mf", "metric") and name in ("P", "Q"):
            idx = (u if name == "P" else x,) + idx[1:]
        p = st.params[name]
        orig = p[idx]
        p[idx] = orig + h
        fp = single(st, u, x)
        p[idx] = orig - h
        fm = single(st, u, x)
        p[idx] = orig
        num = up * (fp - fm) / (2 * h)
        if kind == "mlp":
            # skip probes whose +-h straddle a ReLU kink
            p[idx] = orig + h; a1 = [a > 0 for a in scorers.mlp_forward(st.params, np.concatenate(
                [st.params["P"][u], st.params["Q"][x]])[None])[1][1:]]
            p[idx] = orig - h; a2 = [a > 0 for a in scorers.mlp_forward(st.params, np.concatenate(
                [st.params["P"][u], st.params["Q"][x]])[None])[1][1:]]
            p[idx] = orig
            if any(not np.array_equal(a, b) for a, b in zip(a1, a2)):
                continue
        assert rel_err(g[name][idx], num) < 1e-4, (name, idx, g[name][idx], num)
        n_probes += 1


def _batch(rng, n_users, n_items, B=5, M=3):
    return TrainBatch(rng.integers(0, n_users, B), rng.integers(0, n_items, B),
                      rng.integers(0, n_items, (B, M)))


FAMILY_CASES = [
    ("mf", "pairwise-lnsig"), ("mf", "uib-lnsig"), ("mlp", "pointwise-ce"), ("mlp", "uib-lnsig"),
    ("metric", "sml"), ("metric", "sml-uib"), ("gcn", "pairwise-lnsig"), ("gcn", "uib-lnsig"),
]


@pytest.mark.parametrize("kind,family", FAMILY_CASES)
def test_batch_objective_gradients(kind, family, backend):
    spec = LossSpec(family, alpha=2.0, lam=0.5, gamma=0.1)
    st = make_state(kind, seed=7, margins=spec.is_sml, boundary=spec.is_uib)
    if spec.is_sml:
        st.params["margins"][:] = np.random.default_rng(1).uniform(0.1, 0.9, st.params["margins"].shape)
    rng = np.random.default_rng(8)
    errs = check_batch_gradients(st, spec, _batch(rng, 6, 9), rng, probes=100, h=1e-5)
    assert len(errs) >= 60
    worst = max(errs, key=lambda e: e[4])
    assert worst[4] < 1e-5, worst
    names = {e[0] for e in errs}
    assert "P" in names and "Q" in names
    if spec.is_uib:
        assert "W" in names


def test_checkpoint_round_trip_bit_exact(tmp_path):
    for kind in KINDS:
        st = make_state(kind, margins=True)
        path = tmp_path / f"{kind}.ckpt"
        scorers.save_checkpoint(st, path)
        back = scorers.load_checkpoint(path)
        assert back.kind == kind and set(back.params) == set(st.params)
        for k in st.params:
            assert back.params[k].tobytes() == st.params[k].tobytes()
        assert scorers.checkpoint_bytes(back) == path.read_bytes()
        np.testing.assert_array_equal(scorers.score_all_items(back, np.arange(6)),
                                      scorers.score_all_items(st, np.arange(6)))


def test_checkpoint_rejects_garbage(tmp_path):
    p = tmp_path / "x.ckpt"
    p.write_bytes(b"not a checkpoint")
    with pytest.raises(ValueError):
        scorers.load_checkpoint(p)


def test_init_state_conventions():
    st = scorers.init_state("metric", 500, 400, 32, seed=1, margins=True)
    assert np.all(st.params["W"] == 0)
    assert st.params["P"].std() == pytest.approx(0.1, rel=0.05)
    assert np.all(st.params["margins"] == 0.5)
    st = scorers.init_state("mlp", 3, 3, 32)
    assert [st.params[f"mlp.w{i}"].shape for i in range(3)] == [(64, 64), (64, 32), (32, 1)]
    with pytest.raises(ValueError):
        scorers.init_state("gcn", 3, 3)
    with pytest.raises(ValueError):
        scorers.init_state("svd", 3, 3)
