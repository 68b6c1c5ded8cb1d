import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracle
from cmlbgnn import diffcore as dc
from cmlbgnn.diffcore import RngStream, Tensor
from cmlbgnn.episode import EpisodeSequence, apply_label_budget, build_sequence, make_synthetic_dataset, sample_episode
from cmlbgnn.errors import BaselineError, StructureError
from cmlbgnn.graph import build_graph, normalize_adjacency, stack_graphs
from cmlbgnn.model import (
    HistoryState,
    ModelOptions,
    ModelParams,
    PosteriorParams,
    amortize_posterior,
    degenerate_posterior,
    edge_inference,
    edge_update,
    forward_batch,
    forward_graphs,
    forward_sequence,
    history_transition,
    node_update,
    predict_labels,
    prototype_baseline,
)

DET = ModelOptions(dropout=0.0, n_samples=1)


@pytest.fixture(scope="module")
def ds():
    return make_synthetic_dataset(8, 3, 0.3, 12, RngStream(0))


def _posterior_eps(rng, t=0, b=0, s=0):
    """The standard-normal draw the forward pass uses for sample s of episode b."""
    return rng.sub(3, t).sub(s).sub(b).normal(2)


def _gru_params(dim, rng, bias=0.0):
    g = rng.generator()
    p = {}
    for gate in "zrh":
        p["W" + gate] = Tensor(g.normal(size=(dim, dim)) * 0.5)
        p["U" + gate] = Tensor(g.normal(size=(dim, dim)) * 0.5)
        p["b" + gate] = Tensor(np.full(dim, bias))
    return p


# ---------------------------------------------------------------------------
# hand-traced forward pass
# ---------------------------------------------------------------------------


def test_single_layer_matches_hand_trace(ds):
    ep = sample_episode(ds, 2, 1, 2, RngStream(4))  # V = 4
    params = ModelParams.init(3, 5, 1, RngStream(9))
    rng = RngStream(21)
    out = forward_sequence(EpisodeSequence([ep], 0.0), params, DET, train=False, rng=rng)
    graph = build_graph(ep)

    labels = np.concatenate([ep.support_y, [-1, -1]])
    ref = oracle.one_layer_step(
        graph.nodes, labels, [0, 0, 1, 1], [1, 1, 0, 0], oracle.split_params(params), _posterior_eps(rng)
    )
    np.testing.assert_allclose(graph.A0, ref["A0"], rtol=0, atol=1e-10)
    A0n = normalize_adjacency(graph.A0).A
    np.testing.assert_allclose(A0n.data, ref["A0n"], atol=1e-10)
    Xb = np.concatenate([graph.nodes, np.ones((4, 1))], axis=1)
    np.testing.assert_allclose(dc.matmul(A0n, Tensor(Xb)).data, ref["agg"], atol=1e-10)
    V = node_update(Tensor(Xb), A0n, params.group("layer0.node"), False, rng, 0.0)
    np.testing.assert_allclose(V.data, ref["V"], atol=1e-10)
    H = history_transition(V, Tensor(np.zeros((4, 5))), params.group("layer0.gru"))
    np.testing.assert_allclose(H.data, ref["H"], atol=1e-10)
    A1, A_tilde = edge_update(H, params.group("layer0.edge"), False, rng, 0.0)
    np.testing.assert_allclose(A_tilde.data, ref["A_tilde"], atol=1e-10)
    np.testing.assert_allclose(A1.data, ref["A1"], atol=1e-10)

    # the full forward pass agrees with the chained oracle
    np.testing.assert_allclose(out.history.layers[0].data[0], ref["H"], atol=1e-10)
    np.testing.assert_allclose(out.adjacency[0][0].data[0], ref["A1"], atol=1e-10)
    np.testing.assert_allclose(out.posteriors[0].mu.data[0], ref["mu"], atol=1e-10)
    np.testing.assert_allclose(out.posteriors[0].sigma2.data[0], ref["s2"], atol=1e-10)
    np.testing.assert_allclose(out.predictions[0][0].data[0], ref["P"], atol=1e-10)


def test_history_carries_across_steps(ds):
    seq = build_sequence(ds, 2, 2, 1, 2, 1.0, RngStream(5))
    params = ModelParams.init(3, 4, 1, RngStream(2))
    rng = RngStream(8)
    out = forward_sequence(seq, params, DET, rng=rng)
    p = oracle.split_params(params)
    H = None
    for t, ep in enumerate(seq.episodes):
        labels = np.concatenate([ep.support_y, [-1, -1]])
        nodes = np.concatenate([ep.support_x, ep.query_x])
        ref = oracle.one_layer_step(nodes, labels, [0, 0, 1, 1], [1, 1, 0, 0], p, _posterior_eps(rng, t), H)
        np.testing.assert_allclose(out.predictions[t][0].data[0], ref["P"], atol=1e-10)
        H = ref["H"]
    assert out.history.step == 2


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------


def test_node_update_identity_aggregation():
    g = np.random.default_rng(0)
    V = Tensor(g.normal(size=(3, 2)))
    theta = {"W1": Tensor(g.normal(size=(4, 5))), "b1": Tensor(g.normal(size=5)),
             "W2": Tensor(g.normal(size=(5, 2))), "b2": Tensor(g.normal(size=2))}
    out = node_update(V, Tensor(np.eye(3)), theta, False, RngStream(0), 0.0)
    x = np.concatenate([V.data, V.data], axis=1)
    ref = oracle.leaky(x @ theta["W1"].data + theta["b1"].data, 0.01) @ theta["W2"].data + theta["b2"].data
    np.testing.assert_allclose(out.data, ref, rtol=1e-13)


def test_node_update_two_node_average():
    V = Tensor(np.eye(2))
    A = normalize_adjacency(np.ones((2, 2))).A
    agg = dc.matmul(A, V).data
    np.testing.assert_allclose(agg, np.full((2, 2), 0.5), rtol=1e-11)


def test_node_update_shape_error():
    with pytest.raises(StructureError):
        node_update(Tensor(np.ones((3, 2))), Tensor(np.eye(4)), {}, False, RngStream(0))


def test_gru_closed_gate_keeps_state():
    p = _gru_params(3, RngStream(1))
    p["bz"] = Tensor(np.full(3, -800.0))
    h = np.random.default_rng(2).normal(size=(4, 3))
    v = np.random.default_rng(3).normal(size=(4, 3))
    out = history_transition(Tensor(v), Tensor(h), p)
    np.testing.assert_array_equal(out.data, h)


def test_gru_open_gate_from_zero_state():
    p = _gru_params(3, RngStream(1))
    p["bz"] = Tensor(np.full(3, 800.0))
    v = np.random.default_rng(3).normal(size=(4, 3))
    out = history_transition(Tensor(v), Tensor(np.zeros((4, 3))), p)
    np.testing.assert_allclose(out.data, np.tanh(v @ p["Wh"].data + p["bh"].data), rtol=1e-15)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_gru_matches_oracle(seed):
    p = _gru_params(4, RngStream(seed), bias=0.1)
    g = np.random.default_rng(seed)
    v, h = g.normal(size=(5, 4)), g.normal(size=(5, 4))
    out = history_transition(Tensor(v), Tensor(h), p)
    ref = oracle.gru(v, h, {k: t.data for k, t in p.items()})
    np.testing.assert_allclose(out.data, ref, atol=1e-12)


def _edge_params(dim, seed):
    return ModelParams.init(2, dim, 1, RngStream(seed)).group("layer0.edge")


def test_edge_update_symmetric_and_equal_rows():
    theta = _edge_params(4, 3)
    H = np.random.default_rng(0).normal(size=(5, 4))
    H[3] = H[1]
    A, At = edge_update(Tensor(H), theta, False, RngStream(0), 0.0)
    np.testing.assert_array_equal(At.data, At.data.T)
    np.testing.assert_array_equal(A.data, A.data.T)
    same = edge_update(Tensor(np.tile(H[0], (4, 1))), theta, False, RngStream(0), 0.0)[1].data
    off = same[~np.eye(4, dtype=bool)]
    np.testing.assert_array_equal(off, off[0])


def test_edge_update_dropout_changes_training_output():
    theta = _edge_params(6, 3)
    H = Tensor(np.random.default_rng(0).normal(size=(5, 6)))
    a = edge_update(H, theta, True, RngStream(1), 0.5)[1].data
    b = edge_update(H, theta, False, RngStream(1), 0.5)[1].data
    assert not np.allclose(a, b)


def test_posterior_examples():
    zero = {"W": Tensor(np.zeros((3, 2))), "b": Tensor(np.zeros(2))}
    post = amortize_posterior(Tensor(np.zeros((4, 3))), zero, zero)
    np.testing.assert_array_equal(post.mu.data, 0.0)
    np.testing.assert_allclose(post.sigma2.data, np.log(2.0) + 1e-6, rtol=1e-15)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_posterior_permutation_invariant_and_positive(seed):
    params = ModelParams.init(2, 4, 1, RngStream(seed))
    g = np.random.default_rng(seed)
    H = g.normal(size=(6, 4)) * 10
    perm = g.permutation(6)
    a = amortize_posterior(Tensor(H), params.group("post.mu"), params.group("post.delta"))
    b = amortize_posterior(Tensor(H[perm]), params.group("post.mu"), params.group("post.delta"))
    np.testing.assert_allclose(a.mu.data, b.mu.data, rtol=1e-13, atol=1e-13)
    np.testing.assert_allclose(a.sigma2.data, b.sigma2.data, rtol=1e-13)
    assert (a.sigma2.data > 0).all()


def _masks(V=4, S=2):
    Mq = np.zeros((V, V))
    Mq[S:] = 1
    Ms = np.zeros((V, V))
    Ms[:, :S] = 1
    return Mq, Ms


def test_edge_inference_degenerate_posterior():
    A = Tensor(np.random.default_rng(0).uniform(size=(4, 4)))
    Mq, Ms = _masks()
    P = edge_inference(A, degenerate_posterior(), Mq, Ms, RngStream(0))
    np.testing.assert_array_equal(P.data, Mq * dc.sigmoid(A).data * Ms)


def test_edge_inference_masks_absorb():
    A = Tensor(np.random.default_rng(0).uniform(size=(4, 4)))
    post = PosteriorParams(Tensor([0.5, 0.2]), Tensor([0.3, 0.1]))
    P = edge_inference(A, post, np.zeros((4, 4)), np.ones((4, 4)), RngStream(1), n_samples=3)
    np.testing.assert_array_equal(P.data, 0.0)
    Mq, Ms = _masks()
    P = edge_inference(A, post, Mq, Ms, RngStream(1), n_samples=3).data
    assert (P[:2] == 0).all() and (P[:, 2:] == 0).all()


def test_edge_inference_monte_carlo_mean():
    A = np.random.default_rng(0).uniform(size=(4, 4))
    mu, s2 = np.array([1.5, -0.5]), np.array([0.8, 0.3])
    Mq, Ms = _masks()
    n = 10_000
    P = edge_inference(Tensor(A), PosteriorParams(Tensor(mu), Tensor(s2)), Mq, Ms, RngStream(3), n_samples=n).data
    # independent sampler
    g = np.random.default_rng(12345)
    W = mu[0] + np.sqrt(s2[0]) * g.standard_normal(n)
    b = mu[1] + np.sqrt(s2[1]) * g.standard_normal(n)
    draws = oracle.sigmoid(W[:, None, None] * A + b[:, None, None])
    ref, se = draws.mean(0), draws.std(0) / np.sqrt(n)
    sel = (Mq * Ms) > 0
    # two independent estimates: the difference has standard error sqrt(2) * se
    assert (np.abs(P - Mq * ref * Ms)[sel] < 3 * np.sqrt(2) * se[sel]).all()


# ---------------------------------------------------------------------------
# full forward pass
# ---------------------------------------------------------------------------


def _permute_graph(g, perm):
    def pm(x):
        return x[np.ix_(perm, perm)]

    return dataclasses.replace(g, nodes=g.nodes[perm], A0=pm(g.A0), Mq=pm(g.Mq), Ms=pm(g.Ms),
                               targets=pm(g.targets), valid=pm(g.valid))


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_permutation_equivariance(ds, seed):
    ep = sample_episode(ds, 3, 2, 4, RngStream(seed))
    g = build_graph(ep)
    perm = np.random.default_rng(seed).permutation(ep.num_nodes)
    params = ModelParams.init(3, 6, 2, RngStream(1))
    a = forward_graphs([stack_graphs([g])], params, DET, rng=RngStream(2))
    b = forward_graphs([stack_graphs([_permute_graph(g, perm)])], params, DET, rng=RngStream(2))
    for k in range(2):
        Pa, Pb = a.predictions[0][k].data[0], b.predictions[0][k].data[0]
        np.testing.assert_allclose(Pa[np.ix_(perm, perm)], Pb, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(a.posteriors[0].mu.data, b.posteriors[0].mu.data, rtol=1e-10)


def test_zero_inputs_keep_zero_history(ds):
    params = ModelParams.init(3, 4, 2, RngStream(1))
    for name in params.names():
        if ".b" in name or name.endswith("ln_bias"):
            params[name].data[:] = 0.0
    # the constant input channel acts as a bias too
    params["layer0.node.W1"].data[3] = 0.0
    params["layer0.node.W1"].data[7] = 0.0
    seq = build_sequence(ds, 3, 2, 1, 2, 1.0, RngStream(0))
    zero = EpisodeSequence([dataclasses.replace(e, support_x=0 * e.support_x, query_x=0 * e.query_x)
                            for e in seq.episodes], 1.0)
    out = forward_sequence(zero, params, DET)
    for h in out.history.layers:
        np.testing.assert_array_equal(h.data, 0.0)


def test_no_history_equals_independent_episodes(ds):
    seq = build_sequence(ds, 3, 3, 1, 3, 0.5, RngStream(6))
    params = ModelParams.init(3, 5, 2, RngStream(3))
    opts = ModelOptions(dropout=0.3, n_samples=2, no_history=True)
    rng = RngStream(4)
    full = forward_sequence(seq, params, opts, train=True, rng=rng)
    for t, ep in enumerate(seq.episodes):
        H0 = HistoryState.zeros(1, ep.num_nodes, 5, 2)
        H0.step = t
        single = forward_sequence(EpisodeSequence([ep], 0.5), params, opts, H0=H0, train=True, rng=rng)
        for k in range(2):
            np.testing.assert_array_equal(full.predictions[t][k].data, single.predictions[0][k].data)


def test_no_bayes_is_degenerate_inference(ds):
    seq = build_sequence(ds, 2, 3, 1, 3, 1.0, RngStream(6))
    params = ModelParams.init(3, 5, 2, RngStream(3))
    out = forward_sequence(seq, params, ModelOptions(dropout=0.0, no_bayes=True, n_samples=8), rng=RngStream(0))
    g = out.graphs[-1]
    for k in range(2):
        A = out.adjacency[-1][k]
        np.testing.assert_array_equal(out.predictions[-1][k].data, g.Mq * dc.sigmoid(A).data * g.Ms)


def test_batch_matches_single_sequences(ds):
    seqs = [build_sequence(ds, 2, 3, 1, 3, 0.5, RngStream(i)) for i in range(3)]
    params = ModelParams.init(3, 5, 1, RngStream(3))
    opts = ModelOptions(dropout=0.3, n_samples=2)
    batch = forward_batch(seqs, params, opts, train=True, rng=RngStream(1))
    # episode b of a batch draws from substream b, so batch position matters, not batch size
    solo = forward_batch(seqs[:1], params, opts, train=True, rng=RngStream(1))
    np.testing.assert_allclose(batch.predictions[1][0].data[0], solo.predictions[1][0].data[0], rtol=1e-12)


def test_structure_errors(ds):
    params = ModelParams.init(3, 4, 1, RngStream(0))
    a = build_sequence(ds, 2, 3, 1, 3, 0.0, RngStream(0))
    b = build_sequence(ds, 2, 3, 1, 4, 0.0, RngStream(1))
    with pytest.raises(StructureError):
        forward_batch([a, b], params, DET)
    mixed = EpisodeSequence([a.episodes[0], b.episodes[1]], 0.0)
    with pytest.raises(StructureError):
        forward_sequence(mixed, params, DET)
    with pytest.raises(StructureError):
        forward_sequence(a, ModelParams.init(5, 4, 1, RngStream(0)), DET)
    with pytest.raises(StructureError):
        forward_sequence(a, params, DET, H0=HistoryState.zeros(1, 7, 4, 1))


# ---------------------------------------------------------------------------
# readouts and checkpoints
# ---------------------------------------------------------------------------


def test_predict_labels_mean_and_ties(ds):
    ep = sample_episode(ds, 3, 2, 3, RngStream(0))
    P = np.zeros((9, 9))
    P[6, [2, 3]] = [0.9, 0.1]  # slot 1 mean 0.5
    P[6, [0, 1]] = [0.6, 0.3]  # slot 0 mean 0.45
    P[7, :] = 0.0  # all tied -> slot 0
    P[8, [4, 5]] = 0.7
    np.testing.assert_array_equal(predict_labels(P, ep), [1, 0, 2])


def test_predict_labels_ignores_unlabeled(ds):
    ep = apply_label_budget(sample_episode(ds, 2, 2, 2, RngStream(0)), 0.5, RngStream(1))
    P = np.zeros((6, 6))
    hidden = np.flatnonzero(~ep.support_labeled)
    P[4:, hidden] = 1.0
    lab = np.flatnonzero(ep.support_labeled)
    P[4, lab[1]] = 0.2
    assert predict_labels(P, ep)[0] == ep.support_y[lab[1]]


def test_prototype_baseline_separable():
    ds = make_synthetic_dataset(10, 16, 0.01, 20, RngStream(0))
    accs = [np.mean(prototype_baseline(ep) == ep.query_y)
            for ep in (sample_episode(ds, 5, 1, 5, RngStream(1).sub(i)) for i in range(100))]
    assert np.mean(accs) >= 0.99


def test_prototype_baseline_needs_labels(ds):
    ep = sample_episode(ds, 2, 1, 2, RngStream(0))
    ep = dataclasses.replace(ep, support_labeled=np.array([True, False]))
    with pytest.raises(BaselineError):
        prototype_baseline(ep)


def test_checkpoint_round_trip(tmp_path):
    params = ModelParams.init(3, 4, 2, RngStream(5))
    path = tmp_path / "ck.json"
    params.save(path, train_config={"dim": 4})
    back, cfg = ModelParams.load_with_config(path)
    assert cfg == {"dim": 4}
    assert back.names() == params.names()
    for name in params.names():
        np.testing.assert_array_equal(back[name].data, params[name].data)
    assert back.parameter_count == params.parameter_count


def test_parameter_count_deterministic():
    a = ModelParams.init(3, 8, 2, RngStream(0)).parameter_count
    b = ModelParams.init(3, 8, 2, RngStream(99)).parameter_count
    assert a == b
