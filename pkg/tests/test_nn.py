import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bridgetrace import nn
from bridgetrace.nn import checkpoint
from bridgetrace.nn.crf import CrfParams


def brute_paths(emissions, params):
    T, K = emissions.shape
    for path in itertools.product(range(K), repeat=T):
        s = params.start[path[0]] + params.end[path[-1]]
        s += sum(emissions[t, y] for t, y in enumerate(path))
        s += sum(params.transitions[a, b] for a, b in zip(path, path[1:]))
        yield list(path), s


def random_crf(rng, T, K):
    return rng.normal(size=(T, K)), CrfParams(rng.normal(size=(K, K)), rng.normal(size=K), rng.normal(size=K))


# -- CRF ---------------------------------------------------------------------


def test_log_partition_single_step_closed_form():
    a, b = 0.3, -1.2
    val = nn.crf_log_partition(np.array([[a, b]]), CrfParams.zeros(2))
    assert val == pytest.approx(math.log(math.exp(a) + math.exp(b)), abs=1e-12)


def test_log_partition_uniform_paths():
    assert nn.crf_log_partition(np.zeros((2, 3)), CrfParams.zeros(3)) == pytest.approx(2 * math.log(3), abs=1e-12)


def test_log_partition_matches_enumeration():
    rng = np.random.default_rng(0)
    em, p = random_crf(rng, 3, 4)
    brute = math.log(sum(math.exp(s) for _, s in brute_paths(em, p)))
    assert abs(nn.crf_log_partition(em, p) - brute) <= 1e-9


def test_viterbi_matches_enumeration_many():
    rng = np.random.default_rng(1)
    for _ in range(60):
        T, K = rng.integers(1, 6), rng.integers(1, 5)
        em, p = random_crf(rng, T, K)
        best_path, best = max(brute_paths(em, p), key=lambda ps: ps[1])
        path, score = nn.crf_viterbi(em, p)
        assert path == best_path
        assert score == pytest.approx(best, abs=1e-9)


def test_viterbi_decoupled_case_is_per_position_argmax():
    em = np.array([[5.0, 0, 0], [0, 0, 5.0], [0, 5.0, 0]])
    assert nn.crf_viterbi(em, CrfParams.zeros(3))[0] == [0, 2, 1]


def test_viterbi_respects_forbidden_transition():
    rng = np.random.default_rng(2)
    for _ in range(50):
        em, p = random_crf(rng, 5, 3)
        p.transitions[0, 1] = -1e9
        path, _ = nn.crf_viterbi(em, p)
        assert (0, 1) not in set(zip(path, path[1:]))


def test_viterbi_ties_pick_lowest_tag():
    path, _ = nn.crf_viterbi(np.zeros((3, 4)), CrfParams.zeros(4))
    assert path == [0, 0, 0]


def test_max_marginals_peak_equals_viterbi_score():
    rng = np.random.default_rng(3)
    em, p = random_crf(rng, 4, 3)
    path, score = nn.crf_viterbi(em, p)
    mm = nn.crf_max_marginals(em, p)
    assert np.allclose(mm.max(axis=1), score)
    assert [int(np.argmax(r)) for r in mm] == path


def test_nll_single_tag_is_zero():
    loss, _, _ = nn.crf_nll_and_grad(np.array([[0.7], [1.1]]), [0, 0], CrfParams.zeros(1))
    assert loss == pytest.approx(0.0, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(1, 5), st.integers(0, 10_000))
def test_nll_nonnegative_and_dominates_paths(T, K, seed):
    rng = np.random.default_rng(seed)
    em, p = random_crf(rng, T, K)
    gold = rng.integers(0, K, size=T)
    loss, _, _ = nn.crf_nll_and_grad(em, gold, p)
    assert loss >= 0
    log_z = nn.crf_log_partition(em, p)
    for _ in range(5):
        path = rng.integers(0, K, size=T)
        assert log_z >= nn.path_score(em, path, p) - 1e-12


def test_nll_gradient_finite_differences():
    rng = np.random.default_rng(4)
    em, p = random_crf(rng, 5, 4)
    gold = rng.integers(0, 4, size=5)
    _, d_em, dp = nn.crf_nll_and_grad(em, gold, p)

    def loss():
        return nn.crf_log_partition(em, p) - nn.path_score(em, gold, p)

    errs = nn.check_gradients(
        loss,
        {"em": em, "trans": p.transitions, "start": p.start, "end": p.end},
        {"em": d_em, "trans": dp.transitions, "start": dp.start, "end": dp.end},
    )
    assert max(errs.values()) <= 1e-4, errs


def test_crf_shape_errors():
    with pytest.raises(nn.ShapeError):
        nn.crf_log_partition(np.zeros((3, 2)), CrfParams.zeros(3))
    with pytest.raises(nn.ShapeError):
        nn.crf_viterbi(np.zeros((0, 3)), CrfParams.zeros(3))


# -- LSTM ----------------------------------------------------------------------


def test_bilstm_single_token_both_directions_see_it():
    rng = np.random.default_rng(5)
    p = nn.init_bilstm(rng, 3, 4, "l")
    x = rng.normal(size=(1, 1, 3))
    out, _ = nn.bilstm_forward(p, "l", x, np.ones((1, 1)))
    for direction, sl in (("fw", slice(0, 4)), ("bw", slice(4, 8))):
        h, _, _ = nn.lstm_cell(p, f"l.{direction}", x[:, 0], np.zeros((1, 4)), np.zeros((1, 4)))
        assert np.allclose(out[0, 0, sl], h[0])


def test_lstm_zero_input_zero_weights_uses_biases_only():
    H = 3
    b = np.arange(4 * H) / 10.0 - 0.5
    p = {"c.Wx": np.zeros((2, 4 * H)), "c.Wh": np.zeros((H, 4 * H)), "c.b": b}
    out, _ = nn.lstm_forward(p, "c", np.zeros((1, 1, 2)), np.ones((1, 1)))
    sig = lambda z: 1 / (1 + np.exp(-z))  # noqa: E731
    i, g, o = sig(b[:H]), np.tanh(b[2 * H:3 * H]), sig(b[3 * H:])
    assert np.allclose(out[0, 0], o * np.tanh(i * g))


def test_bilstm_padding_does_not_leak():
    rng = np.random.default_rng(6)
    p = nn.init_bilstm(rng, 3, 4, "l")
    x = rng.normal(size=(1, 4, 3))
    full, _ = nn.bilstm_forward(p, "l", x[:, :2], np.ones((1, 2)))
    padded, _ = nn.bilstm_forward(p, "l", x, np.array([[1, 1, 0, 0]]))
    assert np.allclose(full, padded[:, :2])
    assert np.all(padded[:, 2:] == 0)


def test_bilstm_gradient_finite_differences():
    rng = np.random.default_rng(7)
    p = nn.init_bilstm(rng, 3, 4, "l")
    x = rng.normal(size=(2, 3, 3))
    mask = np.array([[1, 1, 1], [1, 1, 0]])
    R = rng.normal(size=(2, 3, 8))

    def loss():
        out, _ = nn.bilstm_forward(p, "l", x, mask)
        return float((out * R).sum())

    _, cache = nn.bilstm_forward(p, "l", x, mask)
    dx, grads = nn.bilstm_backward(p, R, cache)
    errs = nn.check_gradients(loss, {**p, "x": x}, {**grads, "x": dx})
    assert max(errs.values()) <= 1e-4, errs


def test_lstm_shape_error():
    p = nn.init_bilstm(np.random.default_rng(0), 3, 4, "l")
    with pytest.raises(nn.ShapeError):
        nn.bilstm_forward(p, "l", np.zeros((1, 2, 5)), np.ones((1, 2)))


# -- transformer ---------------------------------------------------------------


def test_transformer_permutation_equivariant():
    rng = np.random.default_rng(8)
    p = nn.init_transformer_block(rng, 8, 16, "t")
    x = rng.normal(size=(5, 8))
    perm = rng.permutation(5)
    y, _ = nn.transformer_block_forward(p, "t", x)
    yp, _ = nn.transformer_block_forward(p, "t", x[perm])
    assert np.allclose(yp, y[perm], rtol=0, atol=1e-12)


def test_transformer_singleton_attends_to_itself():
    from bridgetrace.nn.transformer import attention_weights

    rng = np.random.default_rng(9)
    p = nn.init_transformer_block(rng, 8, 16, "t")
    a = attention_weights(p, "t", rng.normal(size=(1, 8)))
    assert a.shape == (1, 1) and a[0, 0] == 1.0


def test_transformer_gradient_finite_differences_with_padding():
    rng = np.random.default_rng(10)
    p = nn.init_transformer_block(rng, 6, 10, "t")
    x = rng.normal(size=(2, 4, 6))
    mask = np.array([[1, 1, 1, 1], [1, 1, 0, 0]], dtype=bool)
    R = rng.normal(size=x.shape) * mask[..., None]

    def loss():
        y, _ = nn.transformer_block_forward(p, "t", x, mask)
        return float((y * R).sum())

    _, cache = nn.transformer_block_forward(p, "t", x, mask)
    dx, grads = nn.transformer_block_backward(p, R, cache)
    errs = nn.check_gradients(loss, {**p, "x": x}, {**grads, "x": dx})
    assert max(errs.values()) <= 1e-4, errs


# -- layer norm / dense / embeddings ---------------------------------------------


def test_layer_norm_constant_vector_is_zero():
    assert np.allclose(nn.layer_norm(np.full(5, 3.3), np.ones(5), np.zeros(5)), 0.0)


def test_layer_norm_unit_variance_pair():
    out = nn.layer_norm(np.array([1.0, -1.0]), np.ones(2), np.zeros(2), eps=1e-12)
    assert np.allclose(out, [1.0, -1.0], atol=1e-9)


def test_layer_norm_output_mean_is_beta_mean():
    rng = np.random.default_rng(11)
    x, beta = rng.normal(size=16), rng.normal(size=16)
    out = nn.layer_norm(x, np.ones(16), beta)
    assert out.mean() == pytest.approx(beta.mean(), abs=1e-6)
    # direct recomputation
    z = (x - x.mean()) / np.sqrt(x.var() + 1e-5)
    assert np.allclose(out, z + beta, atol=1e-12)


def test_layer_norm_and_dense_gradients():
    rng = np.random.default_rng(12)
    p = nn.init_dense(rng, 5, 7, "d")
    p.update(nn.init_layer_norm(7, "n"))
    p["n.gamma"] = rng.normal(size=7)
    x = rng.normal(size=(3, 5))
    R = rng.normal(size=(3, 7))

    def fwd():
        h, c1 = nn.dense_forward(p, "d", x)
        y, c2 = nn.layer_norm_forward(p, "n", h)
        return y, c1, c2

    def loss():
        return float((fwd()[0] * R).sum())

    _, c1, c2 = fwd()
    dh, g = nn.layer_norm_backward(R, c2)
    dx, g1 = nn.dense_backward(dh, c1)
    g.update(g1)
    errs = nn.check_gradients(loss, {**p, "x": x}, {**g, "x": dx})
    assert max(errs.values()) <= 1e-4, errs


def test_embed_mean_gradient_and_empty_rows():
    rng = np.random.default_rng(13)
    p = {"E": rng.normal(size=(10, 4))}
    ids = np.array([[1, 3, 3], [0, 0, 0]])
    mask = np.array([[1, 1, 1], [0, 0, 0]])
    out, cache = nn.embed_mean_forward(p, "E", ids, mask)
    assert np.allclose(out[1], 0)
    assert np.allclose(out[0], (p["E"][1] + 2 * p["E"][3]) / 3)
    R = rng.normal(size=out.shape)
    g = nn.embed_mean_backward(R, cache)
    errs = nn.check_gradients(lambda: float((nn.embed_mean_forward(p, "E", ids, mask)[0] * R).sum()), p, g)
    assert errs["E"] <= 1e-4


# -- siamese scorer ---------------------------------------------------------------


def test_siamese_gradient_finite_differences():
    rng = np.random.default_rng(14)
    p = nn.init_siamese(rng, 6, 5, 4, "s")
    p["s.norm.gamma"] = rng.normal(size=4)
    Q = rng.normal(size=(2, 6))
    D = rng.normal(size=(5, 6))
    qidx = np.array([0, 0, 1, 1, 1])
    R = rng.normal(size=5)

    def loss():
        return float(nn.siamese_forward(p, "s", Q, D, qidx)[0].scores @ R)

    _, cache = nn.siamese_forward(p, "s", Q, D, qidx)
    dq, dd, g = nn.siamese_backward(p, R, cache)
    errs = nn.check_gradients(loss, {**p, "Q": Q, "D": D}, {**g, "Q": dq, "D": dd})
    assert max(errs.values()) <= 1e-4, errs


def test_siamese_subset_scoring_has_no_cross_candidate_coupling():
    rng = np.random.default_rng(15)
    p = nn.init_siamese(rng, 6, 5, 4, "s")
    p["s.norm.gamma"] = rng.normal(size=4)
    q = rng.normal(size=(1, 6))
    D = rng.normal(size=(6, 6))
    full = nn.siamese_forward(p, "s", q, D, np.zeros(6, int))[0].scores
    for i in range(6):
        one = nn.siamese_forward(p, "s", q, D[i:i + 1], np.zeros(1, int))[0].scores
        assert one[0] == pytest.approx(full[i], abs=1e-12)
    perm = rng.permutation(6)
    permuted = nn.siamese_forward(p, "s", q, D[perm], np.zeros(6, int))[0].scores
    assert np.allclose(permuted, full[perm], atol=1e-12)


# -- optimizer / loss / checkpoint ---------------------------------------------------


def test_adam_zero_gradient_leaves_params():
    p = {"w": np.array([1.0, -2.0])}
    nn.adam_step(p, {"w": np.zeros(2)}, nn.AdamState())
    assert np.array_equal(p["w"], [1.0, -2.0])


def test_adam_step_decreases_quadratic():
    p = {"w": np.array([1.0])}
    nn.adam_step(p, {"w": 2 * p["w"]}, nn.AdamState())
    assert p["w"][0] ** 2 < 1.0


def test_softmax_xent_uniform_is_log_n():
    loss, grad = nn.softmax_xent(np.full(7, 0.4), 3)
    assert loss == pytest.approx(math.log(7), abs=1e-12)
    assert grad.sum() == pytest.approx(0.0, abs=1e-12)


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(16)
    params = {"a.W": rng.normal(size=(3, 2)), "b": rng.normal(size=4)}
    checkpoint.save(tmp_path / "m.ckpt", params, "toy", {"d": 3})
    back, header = checkpoint.load(tmp_path / "m.ckpt", "toy")
    assert header["hyper"] == {"d": 3}
    for k in params:
        assert np.array_equal(back[k], params[k])
    with pytest.raises(nn.CheckpointError):
        checkpoint.load(tmp_path / "m.ckpt", "other")
    (tmp_path / "bad").write_bytes(b"nope")
    with pytest.raises(nn.CheckpointError):
        checkpoint.load(tmp_path / "bad")
