import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedmt.datagen import FederatedDataset, SyntheticTaskSpec, gen_gaussian_clusters
from fedmt.errors import BadWeights, ShapeMismatch
from fedmt.federation import (
    FederationConfig,
    FederationState,
    Participant,
    RoundTrace,
    Strategy,
    aggregate,
    local_update,
    participant_weights,
    read_trace_csv,
    read_trace_jsonl,
    rounds_to_fraction,
    run_baseline,
    run_fedavg,
    run_fedmt,
    run_multi_server,
    run_round_fedavg,
    run_round_fedmt,
    run_strategy,
    start_state,
    fedmt_participants,
    write_trace_csv,
    write_trace_jsonl,
)
from fedmt.losses import LabeledBatch, LossKind, Space
from fedmt.model import SgdConfig, init_mlp, init_ntk, sgd_step
from fedmt.projection import LabelSpaceSpec


def _tiny(K=3, partition=(2, 1), xi=0.0, C=2, seed=0, S=1, n=4, N_c=12, d=2):
    spec = SyntheticTaskSpec(
        d=d, K=K, space=LabelSpaceSpec(K, partition=partition), n=n, C=C, N_c=N_c,
        xi=xi, seed=seed, separation=3.0, n_test_per_class=20, S=S,
    )
    return gen_gaussian_clusters(spec)


def _cfg(**kw):
    base = dict(rounds=3, eta_agg=1.0, sgd=SgdConfig(0.5, batch_size=4, local_steps=2), seed=1)
    base.update(kw)
    return FederationConfig(**base)


def test_weighting_schemes():
    assert participant_weights("Equal", 4, 1) == [0.2] * 5
    w = participant_weights("ServerHalf", 10, 1)
    assert w[-1] == 0.5 and all(v == pytest.approx(0.05) for v in w[:-1])
    assert sum(participant_weights("ServerHalf", 3, 2)) == pytest.approx(1.0)


def test_aggregate_basics():
    g = {"u": np.ones((2, 2))}
    zero = [{"u": np.zeros((2, 2))}] * 3
    assert np.array_equal(aggregate(g, zero, [1 / 3] * 3, 0.7)["u"], g["u"])
    out = aggregate(g, [{"u": np.full((2, 2), 2.0)}, {"u": np.zeros((2, 2))}], [0.25, 0.75], 2.0)
    np.testing.assert_allclose(out["u"], 2.0)
    with pytest.raises(BadWeights):
        aggregate(g, zero, [0.3] * 3, 1.0)
    with pytest.raises(ShapeMismatch):
        aggregate(g, [{"u": np.zeros(3)}], [1.0], 1.0)


def test_aggregate_printed_rule_sign():
    g = {"u": np.zeros(2)}
    out = aggregate(g, [{"u": np.ones(2)}, {"u": np.ones(2)}], [0.5, 0.5], 0.5, rule="printed")
    np.testing.assert_allclose(out["u"], -1.0)


@settings(max_examples=40, deadline=None)
@given(
    st.integers(1, 5),
    st.floats(-3, 3, allow_nan=False),
    st.floats(0.01, 2.0),
    st.integers(0, 1000),
)
def test_aggregate_linearity(n, alpha, eta, seed):
    rng = np.random.default_rng(seed)
    g = {"u": rng.standard_normal((3, 4))}
    deltas = [{"u": rng.standard_normal((3, 4))} for _ in range(n)]
    w = rng.random(n) + 0.1
    w = list(w / w.sum())
    scaled = [{"u": alpha * d["u"]} for d in deltas]
    lhs = aggregate(g, scaled, w, eta)["u"]
    rhs = aggregate(g, deltas, w, alpha * eta)["u"]
    assert np.max(np.abs(lhs - rhs)) <= 1e-12 * max(1.0, np.max(np.abs(lhs)))


def test_zero_local_steps_leave_model_unchanged():
    ds = _tiny()
    net = init_ntk(2, 16, 3, seed=0)
    cfg = _cfg(sgd=SgdConfig(0.5, local_steps=0))
    state = run_round_fedavg(FederationState(net), ds.server_sets * 2, cfg)
    assert np.array_equal(state.global_model.u, net.u)


def test_single_client_round_equals_plain_sgd():
    ds = _tiny()
    net = init_ntk(2, 16, 3, seed=0)
    data = ds.server_sets[0]
    cfg = _cfg(sgd=SgdConfig(0.3, local_steps=3))
    state = run_round_fedavg(FederationState(net), [data], cfg)
    ref = net
    for _ in range(3):
        ref, _ = sgd_step(ref, data, LossKind.plain(), cfg.sgd)
    np.testing.assert_allclose(state.global_model.u, ref.u, rtol=0, atol=1e-14)


def test_identical_clients_give_identical_delta():
    ds = _tiny()
    net = init_ntk(2, 16, 3, seed=0)
    data = ds.server_sets[0]
    cfg = _cfg(sgd=SgdConfig(0.3, local_steps=2))
    two = run_round_fedavg(FederationState(net), [data, data], cfg)
    one = run_round_fedavg(FederationState(net), [data], cfg)
    np.testing.assert_allclose(two.global_model.u, one.global_model.u, atol=1e-14)


def test_fedavg_rejects_mixed_spaces():
    ds = _tiny()
    with pytest.raises(ShapeMismatch):
        run_round_fedavg(FederationState(init_ntk(2, 4, 3, 0)), [ds.server_sets[0], ds.client_sets[0]], _cfg())


def test_identity_projection_is_bitwise_fedavg():
    ds = _tiny(K=3, partition=(1, 1, 1), xi=0.0)
    net = init_ntk(2, 32, 3, seed=2)
    mt = run_fedmt(ds, _cfg(rounds=4, strategy="FedMT_P"), net)
    ml = run_fedmt(ds, _cfg(rounds=4, strategy="FedMT_L"), net)
    sets = [LabeledBatch(b.inputs, b.labels, Space.desired(3)) for b in ds.client_sets] + ds.server_sets
    avg = run_fedavg(sets, _cfg(rounds=4, strategy="FedAvg"), net, ds.test_set)
    for tr in (mt, ml):
        assert tr.global_model.u.tobytes() == avg.global_model.u.tobytes()
        assert [t.to_dict() for t in tr.trace] == [t.to_dict() for t in avg.trace]


def test_server_loss_is_plain_when_noise_free():
    ds = _tiny(xi=0.0)
    parts = fedmt_participants(ds, _cfg())
    server = parts[-1]
    net = init_ntk(2, 8, 3, seed=0)
    z = net.forward(server.data.inputs)
    assert server.loss(z, server.data)[0] == LossKind.plain()(z, server.data)[0]


def test_fedmt_loss_decreases():
    ds = _tiny()
    net = init_ntk(2, 64, 3, seed=0)
    state = run_fedmt(ds, _cfg(rounds=3, sgd=SgdConfig(0.5, local_steps=2)), net)
    assert [t.r for t in state.trace] == [0, 1, 2, 3]
    assert state.trace[3].overall_loss < state.trace[0].overall_loss
    assert state.trace[-1].wall_steps == 6


def test_overall_loss_is_weighted_sum():
    ds = _tiny(C=3)
    for weighting in ("Equal", "ServerHalf"):
        state = run_fedmt(ds, _cfg(rounds=2, weighting=weighting), init_ntk(2, 16, 3, seed=1))
        w = participant_weights(weighting, 3, 1)
        for tr in state.trace:
            assert abs(tr.overall_loss - sum(a * b for a, b in zip(w, tr.per_participant_losses))) < 1e-9
            assert 0.0 <= tr.test_accuracy <= 1.0


def test_round_function_matches_driver():
    ds = _tiny()
    net = init_ntk(2, 16, 3, seed=1)
    cfg = _cfg(rounds=2)
    full = run_fedmt(ds, cfg, net)
    state = start_state(net, fedmt_participants(ds, cfg), participant_weights("Equal", 2, 1), ds.test_set)
    for _ in range(2):
        state = run_round_fedmt(state, ds, cfg)
    assert state.global_model.u.tobytes() == full.global_model.u.tobytes()


def test_parallel_execution_is_order_independent():
    ds = _tiny(C=4)
    net = init_ntk(2, 16, 3, seed=1)
    serial = run_fedmt(ds, _cfg(workers=1), net)
    threaded = run_fedmt(ds, _cfg(workers=4), net)
    assert serial.global_model.u.tobytes() == threaded.global_model.u.tobytes()
    assert [t.to_dict() for t in serial.trace] == [t.to_dict() for t in threaded.trace]


def _halve(ds):
    srv = ds.server_sets[0]
    half = len(srv) // 2
    parts = [srv.subset(np.arange(half)), srv.subset(np.arange(half, len(srv)))]
    return FederatedDataset(parts, ds.client_sets, ds.test_set, ds.q, ds.t, ds.spec)


def test_two_servers_match_one_at_full_batch():
    ds = _tiny(n=6, xi=0.2)
    split = _halve(ds)
    net = init_ntk(2, 32, 3, seed=3)
    sgd = SgdConfig(0.4, batch_size=0, local_steps=1)
    one = run_round_fedmt(FederationState(net), ds, _cfg(sgd=sgd))
    w = 1.0 / 3
    two = run_multi_server(FederationState(net), split, _cfg(sgd=sgd, weights=(w, w, w / 2, w / 2)))
    assert np.max(np.abs(one.global_model.u - two.global_model.u)) < 1e-10


def test_many_servers_still_train():
    ds = _tiny(S=4, n=8)
    state = run_fedmt(ds, _cfg(rounds=10, sgd=SgdConfig(0.3, local_steps=2)), init_ntk(2, 64, 3, seed=0))
    assert state.trace[-1].overall_loss < state.trace[0].overall_loss
    with pytest.raises(ValueError):
        run_multi_server(FederationState(init_ntk(2, 8, 3, 0)), _tiny(), _cfg())


def test_single_learns_separable_task():
    spec = SyntheticTaskSpec(
        d=2, K=3, space=LabelSpaceSpec(3, partition=(2, 1)), n=60, C=1, N_c=3, separation=10.0, n_test_per_class=200
    )
    ds = gen_gaussian_clusters(spec)
    net = init_mlp([2, 16, 3], seed=0)
    trace = run_baseline("Single", ds, _cfg(rounds=40, sgd=SgdConfig(0.1, batch_size=30, local_epochs=1)), net)
    assert trace[-1].test_accuracy >= 0.95


def test_fedtrans_without_pretraining_is_single():
    ds = _tiny()
    net = init_mlp([2, 8, 3], seed=0)
    cfg = _cfg(rounds=3, pretrain_rounds=0, finetune_epochs=3)
    trans = run_baseline("FedTrans", ds, cfg, net)
    start = net.replace_head(ds.J, [cfg.seed, 1]).replace_head(ds.K, [cfg.seed, 2])
    single = run_baseline("Single", ds, cfg, start)
    assert [t.to_dict() for t in trans] == [t.to_dict() for t in single]


def test_fedtrans_pretrains_and_needs_mlp():
    ds = _tiny()
    trace = run_baseline("FedTrans", ds, _cfg(pretrain_rounds=2, finetune_epochs=2), init_mlp([2, 8, 3], 0))
    assert len(trace) == 3
    with pytest.raises(TypeError):
        run_baseline("FedTrans", ds, _cfg(), init_ntk(2, 8, 3, 0))


def test_fedrep_keeps_private_heads():
    ds = _tiny(C=2)
    net = init_mlp([2, 8, 3], seed=0)
    cfg = _cfg(rounds=3, strategy="FedRep")
    state = run_strategy(ds, cfg, net)
    assert len(state.heads) == 3
    assert state.heads[0]["W1"].shape == (8, 2) and state.heads[-1]["W1"].shape == (8, 3)
    assert not np.array_equal(state.heads[0]["W1"], state.heads[1]["W1"])
    assert state.trace[-1].overall_loss < state.trace[0].overall_loss
    with pytest.raises(ValueError):
        run_baseline("FedMT_P", ds, cfg, net)


def test_trace_files_round_trip(tmp_path):
    trace = [RoundTrace(0, 1.5, [1.0, 2.0], 0.25, 0), RoundTrace(1, 0.1, [0.05, 0.15], 0.75, 2)]
    write_trace_csv(tmp_path / "t.csv", trace)
    rows = read_trace_csv(tmp_path / "t.csv")
    assert list(rows[0]) == ["round", "overall_loss", "loss_p0", "loss_p1", "test_acc"]
    assert rows[1]["overall_loss"] == 0.1 and rows[1]["round"] == 1
    write_trace_jsonl(tmp_path / "t.jsonl", trace)
    assert [t.to_dict() for t in read_trace_jsonl(tmp_path / "t.jsonl")] == [t.to_dict() for t in trace]
    assert rounds_to_fraction(trace, 0.1) == 1
    assert rounds_to_fraction(trace, 0.01) is None


def test_local_update_counts_epochs():
    ds = _tiny(N_c=10)
    p = Participant("c", ds.client_sets[0], LossKind.plain())
    _, steps = local_update(init_ntk(2, 4, 2, 0), p, SgdConfig(0.1, batch_size=4, local_epochs=2), np.random.default_rng(0))
    assert steps == 6


def test_config_validation():
    with pytest.raises(ValueError):
        _cfg(rounds=0)
    with pytest.raises(ValueError):
        _cfg(eta_agg=0.0)
    with pytest.raises(ValueError):
        _cfg(strategy="FedProx")
    assert _cfg(strategy="FedRep").strategy is Strategy.FEDREP
