import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from precor.errors import DimensionError, NumericFailure
from precor.graphnet import (GnnConfig, GnnParams, MlpWeights, backward, batch_graphs, flatten_params,
                             forward, forward_batch, graph_from_factor, init_params, load_checkpoint,
                             param_count, save_checkpoint, unflatten_params)
from precor.icfactor import ic0
from precor.pdegen import assemble_poisson, make_system
from precor.sparse import CsrMatrix


def random_factor(rng, n, density=0.5):
    M = np.tril(rng.standard_normal((n, n)) * (rng.random((n, n)) < density), -1)
    M += np.diag(rng.uniform(0.5, 2.0, n))
    return CsrMatrix.from_dense(M)


def with_alpha(params, alpha):
    return GnnParams(params.encoder, params.updater, params.decoder, alpha)


def test_graph_examples():
    g = graph_from_factor(CsrMatrix.diag([1.0, 2.0, 3.0]))
    assert g.edges == [(0, 0), (1, 1), (2, 2)]
    g = graph_from_factor(CsrMatrix.from_dense([[1.0, 0], [2, 3]]))
    assert g.edges == [(0, 0), (1, 0), (1, 1)]
    assert g.offsets.tolist() == [0, 1, 3]


def test_graph_grid32_edge_count():
    L = ic0(assemble_poisson(32)).L
    assert graph_from_factor(L).n_edges == 3008 == L.nnz


def test_graph_rejects_upper_and_missing_diagonal():
    with pytest.raises(ValueError):
        graph_from_factor(CsrMatrix.from_dense([[1.0, 1.0], [0.0, 1.0]]))
    with pytest.raises(ValueError):
        graph_from_factor(CsrMatrix.from_dense([[1.0, 0.0], [1.0, 0.0]]))


def test_batch_graphs_offsets(rng):
    gs = [graph_from_factor(random_factor(rng, n)) for n in (3, 5, 2)]
    b = batch_graphs(gs)
    assert b.n_nodes == 10 and b.n_edges == sum(g.n_edges for g in gs)
    assert b.offsets[-1] == b.n_edges
    assert np.all(b.receivers[b.offsets[3]:b.offsets[4]] == 3)


def test_config_validation():
    with pytest.raises(ValueError):
        GnnConfig(rounds_T=0)
    with pytest.raises(ValueError):
        GnnConfig(activation="gelu")
    with pytest.raises(ValueError):
        GnnConfig(processor="transformer")
    with pytest.raises(ValueError):
        GnnConfig(aggregation="sum")


def test_param_counts():
    mp = param_count(GnnConfig())
    mlp = param_count(GnnConfig(processor="mlp_only"))
    assert (mp, mlp) == (2466, 1954)
    assert mlp < mp
    assert 1000 <= mp < 10_000


def test_init_deterministic_and_alpha_zero():
    cfg = GnnConfig()
    a, b = init_params(cfg, 5), init_params(cfg, 5)
    np.testing.assert_array_equal(flatten_params(a), flatten_params(b))
    assert a.alpha == 0.0
    assert not np.array_equal(flatten_params(a), flatten_params(init_params(cfg, 6)))


@pytest.mark.parametrize("processor", ["message_passing", "mlp_only"])
def test_flatten_round_trip(processor, rng):
    cfg = GnnConfig(processor=processor, hidden=5, mlp_hidden_layers=1)
    vec = rng.standard_normal(param_count(cfg))
    np.testing.assert_array_equal(flatten_params(unflatten_params(vec, cfg)), vec)
    assert flatten_params(init_params(cfg)).shape == (param_count(cfg),)
    with pytest.raises(DimensionError):
        unflatten_params(vec[:-1], cfg)


@pytest.mark.parametrize("processor", ["message_passing", "mlp_only"])
def test_alpha_zero_gate_is_bitwise(processor):
    cfg = GnnConfig(processor=processor)
    L = ic0(make_system("diffusion", 8, 0.7, 3).A).L
    out = forward(init_params(cfg, 1), cfg, L)
    assert out.L.values.tobytes() == L.values.tobytes()
    assert out.provenance == "learned"


@given(st.integers(1, 9), st.integers(0, 2**32 - 1), st.floats(-1, 1))
def test_pattern_preserved(n, seed, alpha):
    rng = np.random.default_rng(seed)
    L = random_factor(rng, n)
    cfg = GnnConfig(hidden=4)
    out = forward(with_alpha(init_params(cfg, seed % 100), alpha), cfg, L).L
    np.testing.assert_array_equal(out.row_ptr, L.row_ptr)
    np.testing.assert_array_equal(out.col_idx, L.col_idx)


def _topological_relabel(rng, L):
    """A random node permutation that keeps the factor lower-triangular."""
    n = L.n_rows
    D = L.to_dense() != 0
    remaining, order = set(range(n)), []
    while remaining:
        ready = sorted(i for i in remaining if not any(D[i, j] for j in remaining if j != i))
        pick = ready[rng.integers(len(ready))]
        order.append(pick)
        remaining.remove(pick)
    perm = np.empty(n, dtype=int)
    perm[order] = np.arange(n)  # old index -> new index
    return perm


@given(st.integers(0, 2**32 - 1))
def test_permutation_equivariance(seed):
    rng = np.random.default_rng(seed)
    L = random_factor(rng, 5, 0.3)
    perm = _topological_relabel(rng, L)
    D = L.to_dense()
    P = np.zeros_like(D)
    P[np.ix_(perm, perm)] = D
    Lp = CsrMatrix.from_dense(P)
    assert Lp.is_lower_triangular()
    cfg = GnnConfig(hidden=6)
    params = with_alpha(init_params(cfg, 3), 0.7)
    out = forward(params, cfg, L).L.to_dense()
    out_p = forward(params, cfg, Lp).L.to_dense()
    np.testing.assert_allclose(out_p[np.ix_(perm, perm)], out, rtol=1e-13, atol=1e-14)


def test_encoder_inputs_in_unit_interval(rng):
    L = random_factor(rng, 12)
    cfg = GnnConfig(hidden=4)
    _, tape = forward_batch(init_params(cfg), cfg, [L])
    u = tape.enc_cache[0][0]
    assert np.all(np.abs(u) <= 1.0) and np.max(np.abs(u)) == 1.0


def test_shared_updater_weights():
    # one set of updater weights serves every round, whatever T is
    assert param_count(GnnConfig(hidden=4, rounds_T=1)) == param_count(GnnConfig(hidden=4, rounds_T=7))
    cfg = GnnConfig(hidden=4, rounds_T=3, activation="tanh")
    params = with_alpha(init_params(cfg), 1.0)
    L = random_factor(np.random.default_rng(2), 6)
    _, tape = forward_batch(params, cfg, [L])
    assert len(tape.rounds) == 3
    base = forward(params, cfg, L).L.values
    W = [w + 1e-3 for w in params.updater.weights]
    bumped = GnnParams(params.encoder, MlpWeights(W, params.updater.biases), params.decoder, 1.0)
    assert not np.array_equal(forward(bumped, cfg, L).L.values, base)


def test_batched_forward_matches_single(rng):
    cfg = GnnConfig(hidden=5)
    params = with_alpha(init_params(cfg, 4), 0.3)
    Ls = [random_factor(rng, n) for n in (4, 7, 3)]
    vals, _ = forward_batch(params, cfg, Ls)
    for L, v in zip(Ls, vals):
        np.testing.assert_allclose(v, forward(params, cfg, L).L.values, rtol=1e-14, atol=0)


@pytest.mark.parametrize("processor", ["message_passing", "mlp_only"])
@pytest.mark.parametrize("activation", ["relu", "tanh"])
def test_probe_gradient_matches_finite_differences(processor, activation):
    rng = np.random.default_rng(11)
    cfg = GnnConfig(processor=processor, activation=activation, hidden=6, rounds_T=3)
    L = random_factor(rng, 6, 0.6)
    w = rng.standard_normal(L.nnz)
    params = with_alpha(init_params(cfg, 2), 0.4)
    vec = flatten_params(params)

    def probe(v):
        return float(w @ forward(unflatten_params(v, cfg), cfg, L).L.values)

    _, tape = forward_batch(params, cfg, [L])
    g = backward(params, cfg, tape, [w])
    h = 1e-6
    for k in range(vec.size):
        e = np.zeros_like(vec)
        e[k] = h
        fd = (probe(vec + e) - probe(vec - e)) / (2 * h)
        assert abs(fd - g[k]) <= 1e-4 * max(abs(g[k]), 1e-3 * np.abs(g).max())


def test_nan_input_names_stage():
    cfg = GnnConfig(hidden=3)
    params = init_params(cfg)
    bad = GnnParams(MlpWeights([w * np.nan for w in params.encoder.weights], params.encoder.biases),
                    params.updater, params.decoder, 0.5)
    with pytest.raises(NumericFailure) as info:
        forward(bad, cfg, CsrMatrix.diag([1.0, 2.0]))
    assert info.value.stage == "encoder"


def test_checkpoint_round_trip(tmp_path, rng):
    cfg = GnnConfig(hidden=7, activation="tanh", processor="mlp_only")
    params = unflatten_params(rng.standard_normal(param_count(cfg)), cfg)
    save_checkpoint(tmp_path / "m.bin", params, cfg, {"note": "x"})
    p2, cfg2, extra = load_checkpoint(tmp_path / "m.bin")
    assert cfg2 == cfg and extra == {"note": "x"}
    assert flatten_params(p2).tobytes() == flatten_params(params).tobytes()
    data = (tmp_path / "m.bin").read_bytes()
    assert data[:8] == b"PRECORCK"
    assert data[-8:] == np.float64(params.alpha).astype("<f8").tobytes()


def test_checkpoint_rejects_garbage(tmp_path):
    from precor.errors import ConfigError
    (tmp_path / "bad.bin").write_bytes(b"not a checkpoint")
    with pytest.raises(ConfigError):
        load_checkpoint(tmp_path / "bad.bin")
