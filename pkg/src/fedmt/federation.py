"""FedAvg and FedMT rounds, multi-server runs and baseline strategies.

Participants are always ordered clients first, then servers.  Participant
``p`` in round ``r`` draws mini-batches from ``default_rng([seed, r, p])``,
so a round's result does not depend on the order local updates finish in.
"""

from __future__ import annotations

import csv
import enum
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .datagen import FederatedDataset
from .errors import BadWeights, NonfiniteLoss, ShapeMismatch
from .losses import LabeledBatch, LossKind, Space
from .model import BatchStream, MlpNet, SgdConfig, accuracy, sgd_step
from .projection import ProjectionMatrix

WEIGHT_SUM_TOL = 1e-9


class Strategy(str, enum.Enum):
    FEDAVG = "FedAvg"
    FEDMT_P = "FedMT_P"
    FEDMT_L = "FedMT_L"
    SINGLE = "Single"
    FEDTRANS = "FedTrans"
    FEDREP = "FedRep"


class Weighting(str, enum.Enum):
    EQUAL = "Equal"
    SERVER_HALF = "ServerHalf"


class AggregationRule(str, enum.Enum):
    MEAN = "mean"  # global + eta * sum_l w_l * delta_l
    PRINTED = "printed"  # global - eta * sum_l delta_l, kept for ablation


@dataclass(frozen=True)
class FederationConfig:
    rounds: int
    eta_agg: float
    sgd: SgdConfig
    strategy: Strategy = Strategy.FEDMT_P
    weighting: Weighting = Weighting.EQUAL
    servers: int | None = None
    objective: str = "ce"
    pretrain_rounds: int = 0
    finetune_epochs: int = 0
    weights: tuple[float, ...] | None = None
    aggregation: AggregationRule = AggregationRule.MEAN
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        object.__setattr__(self, "strategy", Strategy(self.strategy))
        object.__setattr__(self, "weighting", Weighting(self.weighting))
        object.__setattr__(self, "aggregation", AggregationRule(self.aggregation))
        if self.weights is not None:
            object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if not self.eta_agg > 0:
            raise ValueError("eta_agg must be > 0")
        if self.servers is not None and self.servers < 1:
            raise ValueError("servers must be >= 1")
        if self.objective not in ("ce", "wmse"):
            raise ValueError(f"objective must be 'ce' or 'wmse', got {self.objective!r}")
        if self.pretrain_rounds < 0 or self.finetune_epochs < 0:
            raise ValueError("pretrain_rounds and finetune_epochs must be >= 0")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")


@dataclass
class RoundTrace:
    r: int
    overall_loss: float
    per_participant_losses: list[float]
    test_accuracy: float
    wall_steps: int

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RoundTrace":
        return cls(
            int(d["r"]),
            float(d["overall_loss"]),
            [float(v) for v in d["per_participant_losses"]],
            float(d["test_accuracy"]),
            int(d["wall_steps"]),
        )


@dataclass
class Participant:
    name: str
    data: LabeledBatch
    loss: LossKind


@dataclass
class FederationState:
    """Global model plus bookkeeping.

    ``heads`` holds persistent per-participant output layers for split-head
    training and is ``None`` otherwise.
    """

    global_model: object
    r: int = 0
    trace: list[RoundTrace] = field(default_factory=list)
    heads: list | None = None


def participant_weights(weighting: Weighting | str, C: int, S: int) -> list[float]:
    weighting = Weighting(weighting)
    if C + S < 1:
        raise BadWeights("need at least one participant")
    if weighting is Weighting.EQUAL or C == 0 or S == 0:
        return [1.0 / (C + S)] * (C + S)
    return [0.5 / C] * C + [0.5 / S] * S


def _params(obj) -> dict:
    return obj.params if hasattr(obj, "params") else obj


def aggregate(global_model, deltas, weights, eta_agg: float, rule: AggregationRule | str = AggregationRule.MEAN):
    """``global + eta_agg * sum_l weights[l] * deltas[l]`` in participant order.

    ``global_model`` may be a network or a parameter dict; the same kind is
    returned.  Keys missing from a delta are left untouched.
    """
    rule = AggregationRule(rule)
    weights = [float(w) for w in weights]
    if len(weights) != len(deltas):
        raise BadWeights(f"{len(weights)} weights for {len(deltas)} deltas")
    if rule is AggregationRule.MEAN and abs(sum(weights) - 1.0) > WEIGHT_SUM_TOL:
        raise BadWeights(f"weights sum to {sum(weights)!r}, not 1")
    base = _params(global_model)
    keys = list(deltas[0]) if deltas else []
    out = dict(base)
    for key in keys:
        acc = np.zeros_like(base[key])
        for w, delta in zip(weights, deltas):
            if key not in delta or np.shape(delta[key]) != base[key].shape:
                raise ShapeMismatch(f"delta for {key!r} does not match the global parameter")
            acc = acc + (w * delta[key] if rule is AggregationRule.MEAN else delta[key])
        out[key] = base[key] + eta_agg * acc if rule is AggregationRule.MEAN else base[key] - eta_agg * acc
    if hasattr(global_model, "with_params"):
        return global_model.with_params(out)
    return out


def local_update(net, participant: Participant, sgd: SgdConfig, rng: np.random.Generator):
    """Run the configured number of local SGD steps; returns ``(net, steps)``."""
    steps = sgd.steps_for(len(participant.data))
    stream = BatchStream(len(participant.data), sgd.batch_size, rng)
    for _ in range(steps):
        idx = stream.next()
        batch = participant.data if stream.full else participant.data.subset(idx)
        net, _ = sgd_step(net, batch, participant.loss, sgd)
    for key, value in net.params.items():
        if not np.all(np.isfinite(value)):
            raise NonfiniteLoss(f"{participant.name}: parameter {key} became non-finite")
    return net, steps


def _delta(local, start, keys=None) -> dict:
    keys = keys if keys is not None else local.params.keys()
    return {k: local.params[k] - start.params[k] for k in keys}


def _map(fn, items, workers: int):
    if workers <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def full_loss(net, participant: Participant) -> float:
    loss, _ = participant.loss(net.forward(participant.data.inputs), participant.data)
    return float(loss)


def _record(state: FederationState, nets, participants, weights, test_set, steps: int) -> RoundTrace:
    losses = [full_loss(n, p) for n, p in zip(nets, participants)]
    overall = float(sum(w * l for w, l in zip(weights, losses)))
    acc = accuracy(nets[-1], test_set) if test_set is not None and len(test_set) else float("nan")
    prev = state.trace[-1].wall_steps if state.trace else 0
    tr = RoundTrace(state.r, overall, losses, acc, prev + steps)
    state.trace.append(tr)
    return tr


def _round(state: FederationState, participants, weights, cfg: FederationConfig, test_set) -> FederationState:
    start = state.global_model

    def work(p):
        rng = np.random.default_rng([cfg.seed, state.r, p])
        return local_update(start.copy(), participants[p], cfg.sgd, rng)

    results = _map(work, range(len(participants)), cfg.workers)
    deltas = [_delta(net, start) for net, _ in results]
    new_global = aggregate(start, deltas, weights, cfg.eta_agg, cfg.aggregation)
    steps = max((s for _, s in results), default=0)
    out = FederationState(new_global, state.r + 1, state.trace, state.heads)
    _record(out, [new_global] * len(participants), participants, weights, test_set, steps)
    return out


def _weights_for(cfg: FederationConfig, C: int, S: int) -> list[float]:
    if cfg.weights is not None:
        if len(cfg.weights) != C + S:
            raise BadWeights(f"{len(cfg.weights)} custom weights for {C + S} participants")
        return list(cfg.weights)
    return participant_weights(cfg.weighting, C, S)


def start_state(net, participants, weights, test_set) -> FederationState:
    """Initial state with the round-0 record of the untrained model."""
    state = FederationState(net)
    _record(state, [net] * len(participants), participants, weights, test_set, 0)
    return state


def plain_participants(datasets) -> list[Participant]:
    spaces = {b.space.size for b in datasets}
    if len(spaces) != 1:
        raise ShapeMismatch("FedAvg participants must share one label space")
    return [Participant(f"p{i}", b, LossKind.plain()) for i, b in enumerate(datasets)]


def run_round_fedavg(state: FederationState, datasets, cfg: FederationConfig, test_set=None) -> FederationState:
    participants = plain_participants(datasets)
    weights = cfg.weights if cfg.weights is not None else participant_weights(Weighting.EQUAL, len(datasets), 0)
    return _round(state, participants, list(weights), cfg, test_set)


def _corrected(kind: str, m: ProjectionMatrix, objective: str) -> LossKind:
    if objective == "wmse":
        return LossKind.wmse(m)
    return LossKind.forward(m) if kind == "P" else LossKind.backward(m)


def fedmt_participants(dataset: FederatedDataset, cfg: FederationConfig) -> list[Participant]:
    if cfg.strategy not in (Strategy.FEDMT_P, Strategy.FEDMT_L):
        raise ValueError(f"FedMT rounds need strategy FedMT_P or FedMT_L, got {cfg.strategy.value}")
    kind = "P" if cfg.strategy is Strategy.FEDMT_P else "L"
    out = [Participant(f"client{c}", b, _corrected(kind, dataset.q, cfg.objective)) for c, b in enumerate(dataset.client_sets)]
    out += [Participant(f"server{s}", b, _corrected(kind, dataset.t, cfg.objective)) for s, b in enumerate(dataset.server_sets)]
    return out


def _check_servers(dataset: FederatedDataset, cfg: FederationConfig):
    if cfg.servers is not None and cfg.servers != dataset.S:
        raise ValueError(f"config expects {cfg.servers} servers, dataset has {dataset.S}")


def run_round_fedmt(state: FederationState, dataset: FederatedDataset, cfg: FederationConfig) -> FederationState:
    _check_servers(dataset, cfg)
    participants = fedmt_participants(dataset, cfg)
    weights = _weights_for(cfg, dataset.C, dataset.S)
    return _round(state, participants, weights, cfg, dataset.test_set)


def run_multi_server(state: FederationState, dataset: FederatedDataset, cfg: FederationConfig) -> FederationState:
    if dataset.S < 2:
        raise ValueError("run_multi_server needs at least two server sets")
    return run_round_fedmt(state, dataset, cfg)


def run_fedmt(dataset: FederatedDataset, cfg: FederationConfig, net) -> FederationState:
    """``cfg.rounds`` FedMT rounds from ``net``; the trace starts at round 0."""
    _check_servers(dataset, cfg)
    participants = fedmt_participants(dataset, cfg)
    weights = _weights_for(cfg, dataset.C, dataset.S)
    state = start_state(net, participants, weights, dataset.test_set)
    for _ in range(cfg.rounds):
        state = _round(state, participants, weights, cfg, dataset.test_set)
    return state


def run_fedavg(datasets, cfg: FederationConfig, net, test_set=None) -> FederationState:
    participants = plain_participants(datasets)
    weights = list(cfg.weights) if cfg.weights is not None else participant_weights(Weighting.EQUAL, len(datasets), 0)
    state = start_state(net, participants, weights, test_set)
    for _ in range(cfg.rounds):
        state = _round(state, participants, weights, cfg, test_set)
    return state


# baselines


def _server_participants(dataset: FederatedDataset, objective: str) -> list[Participant]:
    loss = LossKind.wmse(dataset.t) if objective == "wmse" else LossKind.forward(dataset.t)
    return [Participant(f"server{s}", b, loss) for s, b in enumerate(dataset.server_sets)]


def _run_single(dataset: FederatedDataset, cfg: FederationConfig, net, rounds: int) -> FederationState:
    participants = _server_participants(dataset, cfg.objective)
    weights = participant_weights(Weighting.EQUAL, 0, len(participants))
    state = start_state(net, participants, weights, dataset.test_set)
    for _ in range(rounds):
        state = _round(state, participants, weights, cfg, dataset.test_set)
    return state


def _run_fedtrans(dataset: FederatedDataset, cfg: FederationConfig, net: MlpNet) -> FederationState:
    if not isinstance(net, MlpNet):
        raise TypeError("FedTrans needs an MlpNet so the head can be replaced")
    coarse = net if net.K == dataset.J else net.replace_head(dataset.J, [cfg.seed, 1])
    if cfg.pretrain_rounds:
        clients = [Participant(f"client{c}", b, LossKind.plain()) for c, b in enumerate(dataset.client_sets)]
        weights = participant_weights(Weighting.EQUAL, len(clients), 0)
        state = FederationState(coarse)
        for _ in range(cfg.pretrain_rounds):
            state = _round(state, clients, weights, cfg, None)
        coarse = state.global_model
    fine = coarse.replace_head(dataset.K, [cfg.seed, 2])
    return _run_single(dataset, cfg, fine, cfg.finetune_epochs)


def _split(net: MlpNet):
    head = set(net.head_keys)
    return [k for k in net.params if k not in head], list(net.head_keys)


def _with_head(net: MlpNet, backbone: dict, head: dict) -> MlpNet:
    p = dict(net.params)
    p.update(backbone)
    p.update(head)
    return net.with_params(p)


def _run_fedrep(dataset: FederatedDataset, cfg: FederationConfig, net: MlpNet) -> FederationState:
    """Shared backbone, private heads: J-way on clients, K-way on the server."""
    if not isinstance(net, MlpNet):
        raise TypeError("FedRep needs an MlpNet with a separable head")
    if net.K != dataset.K:
        net = net.replace_head(dataset.K, [cfg.seed, 2])
    back_keys, head_keys = _split(net)
    clients = [Participant(f"client{c}", b, LossKind.plain()) for c, b in enumerate(dataset.client_sets)]
    servers = _server_participants(dataset, "ce")
    participants = clients + servers
    weights = _weights_for(cfg, dataset.C, dataset.S)
    nets = [net.replace_head(dataset.J, [cfg.seed, 3, c]) for c in range(dataset.C)] + [net] * dataset.S
    heads = [{k: n.params[k] for k in head_keys} for n in nets]

    state = FederationState(net, heads=heads)
    _record(state, nets, participants, weights, dataset.test_set, 0)
    for _ in range(cfg.rounds):
        start = state.global_model
        backbone = {k: start.params[k] for k in back_keys}

        def work(p):
            rng = np.random.default_rng([cfg.seed, state.r, p])
            local = _with_head(nets[p], backbone, state.heads[p])
            return local_update(local, participants[p], cfg.sgd, rng)

        results = _map(work, range(len(participants)), cfg.workers)
        deltas = [{k: n.params[k] - backbone[k] for k in back_keys} for n, _ in results]
        new_backbone = aggregate(backbone, deltas, weights, cfg.eta_agg, cfg.aggregation)
        new_heads = [{k: n.params[k] for k in head_keys} for n, _ in results]
        nets = [_with_head(nets[p], new_backbone, new_heads[p]) for p in range(len(participants))]
        state = FederationState(nets[-1], state.r + 1, state.trace, new_heads)
        _record(state, nets, participants, weights, dataset.test_set, max(s for _, s in results))
    return state


def run_baseline(strategy: Strategy | str, dataset: FederatedDataset, cfg: FederationConfig, net) -> list[RoundTrace]:
    strategy = Strategy(strategy)
    if strategy is Strategy.SINGLE:
        return _run_single(dataset, cfg, net, cfg.rounds).trace
    if strategy is Strategy.FEDTRANS:
        return _run_fedtrans(dataset, cfg, net).trace
    if strategy is Strategy.FEDREP:
        return _run_fedrep(dataset, cfg, net).trace
    raise ValueError(f"{strategy.value} is not a baseline strategy")


def run_strategy(dataset: FederatedDataset, cfg: FederationConfig, net) -> FederationState:
    """Dispatch on ``cfg.strategy``; FedAvg uses only participants labelled in the desired space."""
    s = cfg.strategy
    if s in (Strategy.FEDMT_P, Strategy.FEDMT_L):
        return run_fedmt(dataset, cfg, net)
    if s is Strategy.FEDAVG:
        sets = list(dataset.server_sets)
        if dataset.J == dataset.K:
            sets = [LabeledBatch(b.inputs, b.labels, Space.desired(dataset.K)) for b in dataset.client_sets] + sets
        return run_fedavg(sets, cfg, net, dataset.test_set)
    if s is Strategy.SINGLE:
        return _run_single(dataset, cfg, net, cfg.rounds)
    if s is Strategy.FEDTRANS:
        return _run_fedtrans(dataset, cfg, net)
    return _run_fedrep(dataset, cfg, net)


# trace files


def trace_columns(n_participants: int) -> list[str]:
    return ["round", "overall_loss"] + [f"loss_p{i}" for i in range(n_participants)] + ["test_acc"]


def write_trace_csv(path, trace: list[RoundTrace]):
    n = len(trace[0].per_participant_losses) if trace else 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(trace_columns(n))
        for tr in trace:
            w.writerow([tr.r, repr(tr.overall_loss)] + [repr(v) for v in tr.per_participant_losses] + [repr(tr.test_accuracy)])


def read_trace_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k == "round" else float(v)) for k, v in row.items()} for row in csv.DictReader(fh)]


def write_trace_jsonl(path, trace: list[RoundTrace]):
    with open(path, "w") as fh:
        for tr in trace:
            fh.write(json.dumps(tr.to_dict()) + "\n")


def read_trace_jsonl(path) -> list[RoundTrace]:
    with open(path) as fh:
        return [RoundTrace.from_dict(json.loads(line)) for line in fh if line.strip()]


def rounds_to_fraction(trace: list[RoundTrace], fraction: float) -> int | None:
    """First round whose overall loss is at most ``fraction`` of round 0's."""
    if not trace:
        return None
    target = fraction * trace[0].overall_loss
    for tr in trace:
        if tr.overall_loss <= target:
            return tr.r
    return None

