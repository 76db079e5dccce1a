"""Declarative experiment runner: config -> dataset -> training -> traces on disk.

Config files are JSON with a ``schema_version`` field.  All randomness flows
from the root ``seed`` through named sub-streams so reruns are bitwise
identical and sweeps stay comparable.
"""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datagen import SemgTaskSpec, SyntheticTaskSpec, generate
from .errors import ConfigInvalid, FedMTError, RunError
from .federation import (
    FederationConfig,
    RoundTrace,
    Strategy,
    rounds_to_fraction,
    run_strategy,
    write_trace_csv,
    write_trace_jsonl,
)
from .model import SgdConfig, init_mlp, init_ntk
from .ntk import balanced_partition, corollary_checks
from .projection import LabelSpaceSpec

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
OUTPUT_ENV = "FEDMT_OUTPUT_DIR"
SWEEP_AXES = ("n", "xi", "C", "J", "local_steps", "batch")
LOSS_FRACTION = 0.1

_STREAMS = {"dataset": 1, "init": 2, "batching": 3, "ntk": 4}


def sub_seed(seed: int, name: str | int) -> int:
    """Deterministic child seed of ``seed`` for a named stream or run index."""
    key = _STREAMS[name] if isinstance(name, str) else 1000 + int(name)
    return int(np.random.SeedSequence([int(seed), key]).generate_state(1)[0])


@dataclass(frozen=True)
class ModelSpec:
    kind: str = "mlp"
    hidden: tuple[int, ...] = (32,)
    M: int = 64

    def build(self, d: int, K: int, seed: int):
        if self.kind == "ntk":
            return init_ntk(d, self.M, K, seed)
        return init_mlp([d, *self.hidden, K], seed)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "hidden": list(self.hidden), "M": self.M}


@dataclass(frozen=True)
class NtkCheckSpec:
    K: int = 8
    d: int = 4
    M: int = 1024
    clients: int = 2
    per_client: int = 4
    server: int = 4
    partitions: tuple[tuple[int, ...], ...] = ((8,), (4, 4), (2, 2, 2, 2), (1,) * 8)
    xis: tuple[float, ...] = (0.0, 0.2, 0.4)

    def to_dict(self) -> dict:
        return {
            "K": self.K,
            "d": self.d,
            "M": self.M,
            "clients": self.clients,
            "per_client": self.per_client,
            "server": self.server,
            "partitions": [list(p) for p in self.partitions],
            "xis": list(self.xis),
        }


@dataclass(frozen=True)
class ExperimentConfig:
    task: object
    federation: FederationConfig
    model: ModelSpec = ModelSpec()
    ntk_checks: NtkCheckSpec | None = None
    output_dir: str = "runs"
    seed: int = 0
    run_id: str | None = None
    raw: dict = field(default_factory=dict, compare=False, repr=False)

    @property
    def name(self) -> str:
        return self.run_id or f"{self.federation.strategy.value}-seed{self.seed}"


# parsing


def _take(doc: dict, key: str, default, cast, problems: list, prefix: str):
    if key not in doc:
        return default
    try:
        return cast(doc[key])
    except (TypeError, ValueError) as exc:
        problems.append((f"{prefix}.{key}", f"bad value {doc[key]!r}: {exc}"))
        return default


def _unknown(doc: dict, allowed, prefix: str, problems: list):
    for key in doc:
        if key not in allowed:
            problems.append((f"{prefix}.{key}", "unknown field"))


_TASK_FIELDS = {"kind", "d", "K", "partition", "q_rows", "n", "C", "N_c", "xi", "separation", "n_test_per_class", "S", "client_split", "noise_std"}
_SEMG_FIELDS = {"kind", "K", "n", "C", "N_c", "xi", "n_test_per_class", "S", "length", "fs"}
_FED_FIELDS = {
    "strategy", "rounds", "eta_agg", "eta_sgd", "batch_size", "local_steps", "local_epochs", "weighting",
    "objective", "pretrain_rounds", "finetune_epochs", "aggregation", "workers", "servers", "weights",
}


def _parse_task(doc, seed: int, problems: list):
    if not isinstance(doc, dict):
        problems.append(("task", "must be an object"))
        return None
    kind = doc.get("kind", "gaussian")
    data_seed = sub_seed(seed, "dataset")
    try:
        if kind == "semg":
            _unknown(doc, _SEMG_FIELDS, "task", problems)
            kw = {k: v for k, v in doc.items() if k != "kind"}
            return SemgTaskSpec(seed=data_seed, **kw)
        if kind != "gaussian":
            problems.append(("task.kind", f"unknown task kind {kind!r}"))
            return None
        _unknown(doc, _TASK_FIELDS, "task", problems)
        for key in ("d", "K", "n", "C", "N_c"):
            if key not in doc:
                problems.append((f"task.{key}", "required"))
        if any(p[0].startswith("task.") for p in problems):
            return None
        K = int(doc["K"])
        if "q_rows" in doc:
            space = LabelSpaceSpec(K, q_rows=tuple(tuple(r) for r in doc["q_rows"]))
        else:
            space = LabelSpaceSpec(K, partition=tuple(doc.get("partition", (1,) * K)))
        kw = {k: v for k, v in doc.items() if k not in ("kind", "partition", "q_rows", "K")}
        return SyntheticTaskSpec(K=K, space=space, seed=data_seed, **kw)
    except (TypeError, ValueError) as exc:
        problems.append(("task", str(exc)))
        return None


def _parse_federation(doc, seed: int, problems: list):
    if not isinstance(doc, dict):
        problems.append(("federation", "must be an object"))
        return None
    _unknown(doc, _FED_FIELDS, "federation", problems)
    p = "federation"
    try:
        sgd = SgdConfig(
            eta_sgd=_take(doc, "eta_sgd", 0.1, float, problems, p),
            batch_size=_take(doc, "batch_size", 0, int, problems, p),
            local_steps=_take(doc, "local_steps", 1, int, problems, p),
            local_epochs=_take(doc, "local_epochs", None, lambda v: None if v is None else int(v), problems, p),
        )
        if sgd.local_epochs is None and sgd.local_steps < 1:
            problems.append(("federation.local_steps", "must be >= 1"))
    except ValueError as exc:
        problems.append(("federation.sgd", str(exc)))
        return None
    try:
        return FederationConfig(
            rounds=_take(doc, "rounds", 1, int, problems, p),
            eta_agg=_take(doc, "eta_agg", 1.0, float, problems, p),
            sgd=sgd,
            strategy=doc.get("strategy", "FedMT_P"),
            weighting=doc.get("weighting", "Equal"),
            servers=_take(doc, "servers", None, lambda v: None if v is None else int(v), problems, p),
            objective=doc.get("objective", "ce"),
            pretrain_rounds=_take(doc, "pretrain_rounds", 0, int, problems, p),
            finetune_epochs=_take(doc, "finetune_epochs", 0, int, problems, p),
            weights=doc.get("weights"),
            aggregation=doc.get("aggregation", "mean"),
            seed=sub_seed(seed, "batching"),
            workers=_take(doc, "workers", 1, int, problems, p),
        )
    except ValueError as exc:
        problems.append(("federation", str(exc)))
        return None


def _parse_model(doc, problems: list) -> ModelSpec:
    if doc is None:
        return ModelSpec()
    if not isinstance(doc, dict):
        problems.append(("model", "must be an object"))
        return ModelSpec()
    _unknown(doc, {"kind", "hidden", "M"}, "model", problems)
    kind = doc.get("kind", "mlp")
    if kind not in ("mlp", "ntk"):
        problems.append(("model.kind", f"must be 'mlp' or 'ntk', got {kind!r}"))
    hidden = _take(doc, "hidden", (32,), lambda v: tuple(int(h) for h in v), problems, "model")
    M = _take(doc, "M", 64, int, problems, "model")
    if M < 1 or any(h < 1 for h in hidden):
        problems.append(("model", "layer widths must be >= 1"))
    return ModelSpec(kind, hidden, M)


def _parse_ntk(doc, problems: list):
    if doc is None:
        return None
    if not isinstance(doc, dict):
        problems.append(("ntk_checks", "must be an object"))
        return None
    allowed = set(NtkCheckSpec.__dataclass_fields__)
    _unknown(doc, allowed, "ntk_checks", problems)
    kw = {k: v for k, v in doc.items() if k in allowed}
    if "partitions" in kw:
        kw["partitions"] = tuple(tuple(int(k) for k in part) for part in kw["partitions"])
    if "xis" in kw:
        kw["xis"] = tuple(float(x) for x in kw["xis"])
    spec = NtkCheckSpec(**kw)
    for part in spec.partitions:
        if sum(part) != spec.K:
            problems.append(("ntk_checks.partitions", f"{list(part)} does not sum to K={spec.K}"))
    return spec


def _consistency(task, fed: FederationConfig, model: ModelSpec, problems: list):
    if task is None or fed is None:
        return
    s = fed.strategy
    if s in (Strategy.FEDREP, Strategy.FEDTRANS) and model.kind != "mlp":
        problems.append(("model.kind", f"{s.value} needs an mlp model with a replaceable head"))
    if s is Strategy.FEDTRANS and fed.finetune_epochs < 1:
        problems.append(("federation.finetune_epochs", "FedTrans needs at least one fine-tuning round"))
    if fed.objective == "wmse" and s not in (Strategy.FEDMT_P, Strategy.FEDMT_L, Strategy.SINGLE):
        problems.append(("federation.objective", f"weighted MSE is not defined for {s.value}"))
    if fed.servers is not None and fed.servers != task.S:
        problems.append(("federation.servers", f"task has S={task.S}"))
    if fed.weights is not None and len(fed.weights) != task.C + task.S:
        problems.append(("federation.weights", f"need {task.C + task.S} weights"))


def parse_config(doc: dict) -> ExperimentConfig:
    """Validate a config document; raises ``ConfigInvalid`` listing every problem found."""
    if not isinstance(doc, dict):
        raise ConfigInvalid([("config", "top level must be a JSON object")])
    problems: list = []
    version = doc.get("schema_version")
    if version != SCHEMA_VERSION:
        problems.append(("schema_version", f"expected {SCHEMA_VERSION}, got {version!r}"))
    _unknown(doc, {"schema_version", "seed", "output_dir", "run_id", "task", "federation", "model", "ntk_checks"}, "config", problems)
    seed = _take(doc, "seed", 0, int, problems, "config")
    if "task" not in doc:
        problems.append(("task", "required"))
    if "federation" not in doc:
        problems.append(("federation", "required"))
    task = _parse_task(doc.get("task", {}), seed, problems) if "task" in doc else None
    fed = _parse_federation(doc.get("federation", {}), seed, problems) if "federation" in doc else None
    model = _parse_model(doc.get("model"), problems)
    try:
        ntk = _parse_ntk(doc.get("ntk_checks"), problems)
    except (TypeError, ValueError) as exc:
        problems.append(("ntk_checks", str(exc)))
        ntk = None
    _consistency(task, fed, model, problems)
    if problems:
        raise ConfigInvalid(problems)
    return ExperimentConfig(
        task=task,
        federation=fed,
        model=model,
        ntk_checks=ntk,
        output_dir=str(doc.get("output_dir", "runs")),
        seed=seed,
        run_id=doc.get("run_id"),
        raw=copy.deepcopy(doc),
    )


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ConfigInvalid([("config", f"cannot read {path}: {exc}")]) from exc
    except json.JSONDecodeError as exc:
        raise ConfigInvalid([("config", f"invalid JSON: {exc}")]) from exc
    return parse_config(doc)


# metrics


@dataclass
class MetricsStore:
    """Append-only round traces; the summary is always derived from them."""

    run_id: str
    traces: list[RoundTrace] = field(default_factory=list)
    error: str | None = None

    def append(self, trace: RoundTrace):
        self.traces.append(trace)

    @property
    def ok(self) -> bool:
        return self.error is None

    def summary(self) -> dict:
        accs = [t.test_accuracy for t in self.traces if not math.isnan(t.test_accuracy)]
        return {
            "final_test_acc": self.traces[-1].test_accuracy if self.traces else None,
            "best_test_acc": max(accs) if accs else None,
            "rounds_to_loss_fraction": rounds_to_fraction(self.traces, LOSS_FRACTION),
        }

    def write(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_trace_csv(out / "trace.csv", self.traces)
        write_trace_jsonl(out / "trace.jsonl", self.traces)
        with open(out / "summary.json", "w") as fh:
            json.dump({"run_id": self.run_id, **self.summary()}, fh, indent=2)


def resolve_output(config: ExperimentConfig, override=None) -> Path:
    return Path(override or os.environ.get(OUTPUT_ENV) or config.output_dir)


def run_experiment(config: ExperimentConfig | dict, out_dir=None, write: bool = True) -> MetricsStore:
    if isinstance(config, dict):
        config = parse_config(config)
    run_id = config.name
    try:
        dataset = generate(config.task)
        net = config.model.build(dataset.d, dataset.K, sub_seed(config.seed, "init"))
        state = run_strategy(dataset, config.federation, net)
    except FedMTError as exc:
        raise RunError(run_id, exc) from exc
    except (ValueError, TypeError, FloatingPointError) as exc:
        raise RunError(run_id, exc) from exc
    store = MetricsStore(run_id)
    for tr in state.trace:
        store.append(tr)
    if write:
        out = resolve_output(config, out_dir)
        store.write(out)
        with open(out / "config.json", "w") as fh:
            json.dump(config.raw, fh, indent=2, sort_keys=True)
        log.info("run %s: final acc %.4f -> %s", run_id, store.summary()["final_test_acc"], out)
    return store


def apply_axis(doc: dict, axis: str, value) -> dict:
    doc = copy.deepcopy(doc)
    task, fed = doc.setdefault("task", {}), doc.setdefault("federation", {})
    if axis == "n":
        task["n"] = int(value)
    elif axis == "xi":
        task["xi"] = float(value)
    elif axis == "C":
        task["C"] = int(value)
    elif axis == "J":
        task.pop("q_rows", None)
        task["partition"] = list(balanced_partition(int(task["K"]), int(value)))
    elif axis == "local_steps":
        fed.pop("local_epochs", None)
        fed["local_steps"] = int(value)
    elif axis == "batch":
        fed["batch_size"] = int(value)
    else:
        raise ConfigInvalid([("axis", f"unknown axis {axis!r}; choose from {', '.join(SWEEP_AXES)}")])
    return doc


def run_sweep(base: dict, axis: str, values, out_dir=None) -> list[MetricsStore]:
    """One run per value; failures are recorded and the sweep carries on."""
    if axis not in SWEEP_AXES:
        raise ConfigInvalid([("axis", f"unknown axis {axis!r}; choose from {', '.join(SWEEP_AXES)}")])
    values = list(values)
    if not values:
        return []
    base_seed = int(base.get("seed", 0))
    root = Path(out_dir or os.environ.get(OUTPUT_ENV) or base.get("output_dir", "runs"))
    results = []
    for i, value in enumerate(values):
        doc = apply_axis(base, axis, value)
        doc["seed"] = sub_seed(base_seed, i)
        doc["run_id"] = f"{axis}={value}"
        try:
            store = run_experiment(parse_config(doc), root / f"{axis}={value}")
        except (ConfigInvalid, RunError) as exc:
            log.warning("sweep %s=%s failed: %s", axis, value, exc)
            store = MetricsStore(doc["run_id"], error=str(exc))
        results.append(store)
    root.mkdir(parents=True, exist_ok=True)
    with open(root / "sweep_summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["axis", "value", "run_id", "status", "final_test_acc", "best_test_acc", "rounds_to_loss_fraction"])
        for value, store in zip(values, results):
            s = store.summary() if store.ok else {}
            w.writerow([axis, value, store.run_id, "ok" if store.ok else f"error: {store.error}",
                        s.get("final_test_acc"), s.get("best_test_acc"), s.get("rounds_to_loss_fraction")])
    return results


def _unit_rows(rng, n, d):
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def run_ntk_check(config: ExperimentConfig, out_dir=None, write: bool = True) -> dict:
    spec = config.ntk_checks or NtkCheckSpec()
    seed = sub_seed(config.seed, "ntk")
    rng = np.random.default_rng(seed)
    net = init_ntk(spec.d, spec.M, spec.K, seed)
    clients = [_unit_rows(rng, spec.per_client, spec.d) for _ in range(spec.clients)]
    server = [_unit_rows(rng, spec.server, spec.d)] if spec.server else []
    try:
        report = corollary_checks(net, clients, server, spec.partitions, spec.xis)
    except FedMTError as exc:
        raise RunError(config.name, exc) from exc
    report["spec"] = spec.to_dict()
    if write:
        out = resolve_output(config, out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "ntk_report.json", "w") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
    return report
