"""Experiment runner: builds the simulated system from a config and trains it epoch by epoch."""

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from src.crom import MatchPlan
from src.data import (
    Dataset,
    DatasetSchema,
    Shard,
    SyntheticSpec,
    generate_synthetic,
    holdout,
    load_csv,
    minibatches,
    partition,
)
from src.errors import ConfigError, ContractError
from src.model_core import SplitModelParams, forward_range, init_params, mae
from src.protocols.csfl import run_round_csfl
from src.protocols.psl import run_round_psl
from src.protocols.sfl import run_round_sfl
from src.protocols.utils import fedavg
from src.state import RoundTrace, SystemState, TrainingSettings
from src.system_model import CostModel

PSL, SFL, CSFL = "psl", "sfl", "csfl-g"
PROTOCOLS = (PSL, SFL, CSFL)

__all__ = [
    "MetricsReport",
    "MetricsRow",
    "PROTOCOLS",
    "RoundRecord",
    "RoundTrace",
    "SystemState",
    "build_state",
    "evaluate",
    "evaluate_state",
    "fedavg",
    "run_experiment",
    "run_round",
    "run_round_csfl",
    "run_round_psl",
    "run_round_sfl",
    "throughput",
]


@dataclass(frozen=True)
class MetricsRow:
    protocol: str
    epoch: int
    train_mae: float
    eval_mae: float
    throughput: float
    sync_delay: float
    aggregations: int

    def as_list(self) -> List:
        return [
            self.protocol,
            self.epoch,
            self.train_mae,
            self.eval_mae,
            self.throughput,
            self.sync_delay,
            self.aggregations,
        ]


@dataclass(frozen=True)
class RoundRecord:
    protocol: str
    epoch: int
    round_in_epoch: int
    trace: RoundTrace
    plan: Optional[MatchPlan] = None

    def to_dict(self) -> Dict:
        return {
            "protocol": self.protocol,
            "epoch": self.epoch,
            "round": self.round_in_epoch,
            "plan": self.plan.to_dict() if self.plan is not None else None,
            **self.trace.to_dict(),
        }


@dataclass
class MetricsReport:
    rows: List[MetricsRow] = field(default_factory=list)
    records: List[RoundRecord] = field(default_factory=list)

    def for_protocol(self, protocol: str) -> List[MetricsRow]:
        return [row for row in self.rows if row.protocol == protocol]

    def final(self, protocol: str) -> MetricsRow:
        rows = self.for_protocol(protocol)
        if not rows:
            raise ContractError(f"No rows recorded for protocol {protocol}")
        return rows[-1]

    def traces(self, protocol: str) -> List[RoundTrace]:
        return [record.trace for record in self.records if record.protocol == protocol]


def evaluate(
    params_client: SplitModelParams, params_server: SplitModelParams, dataset: Dataset
) -> float:
    if dataset.size == 0:
        raise ContractError("Cannot evaluate on an empty dataset")
    if params_server.first_layer != params_client.last_layer + 1:
        raise ContractError(
            f"Client ends at layer {params_client.last_layer}, "
            f"server starts at {params_server.first_layer}"
        )
    smashed = forward_range(params_client, 1, params_client.last_layer, dataset.features())
    out = forward_range(params_server, params_server.first_layer, params_server.last_layer, smashed)
    return mae(out.values, dataset.targets())


def throughput(traces: Union[RoundTrace, Sequence[RoundTrace]]) -> float:
    """Samples per simulated second over the given rounds"""
    if isinstance(traces, RoundTrace):
        traces = [traces]
    wall = sum(trace.sync_delay for trace in traces)
    if wall <= 0:
        raise ContractError("Throughput needs a positive simulated wall time")
    return sum(trace.samples_processed for trace in traces) / wall


def run_round(protocol: str, state: SystemState, batches) -> Tuple[SystemState, RoundTrace]:
    """Route one round to the protocol implementation"""
    if protocol == PSL:
        return run_round_psl(state, batches)
    elif protocol == SFL:
        return run_round_sfl(state, batches)
    elif protocol == CSFL:
        return run_round_csfl(state, batches)
    raise ConfigError(f"Invalid protocol: {protocol}")


def build_dataset(config) -> Tuple[Dataset, List[Shard], Dataset]:
    data, arch = config.data, config.arch
    if data.csv_path:
        schema = DatasetSchema.for_width(arch.num_numeric_features)
        dataset = load_csv(data.csv_path, schema)
        if dataset.vocab1 > arch.vocab1 or dataset.vocab2 > arch.vocab2:
            raise ConfigError(
                f"{data.csv_path} has vocabularies ({dataset.vocab1}, {dataset.vocab2}), "
                f"arch allows ({arch.vocab1}, {arch.vocab2})"
            )
    else:
        spec = SyntheticSpec(
            num_numeric=arch.num_numeric_features,
            vocab1=arch.vocab1,
            vocab2=arch.vocab2,
            noise_sigma=data.noise_sigma,
            weight_scale=data.weight_scale,
        )
        size = data.num_users * data.per_user + data.eval_size
        dataset = generate_synthetic(config.seed, size, spec)

    shards = partition(
        dataset,
        data.num_users,
        data.per_user,
        config.seed,
        data_qualities=[p.data_quality for p in config.profiles],
        scheme=data.sharding,
        dirichlet_alpha=data.dirichlet_alpha,
    )
    held_out = holdout(dataset, shards)
    if held_out.size == 0:
        raise ConfigError("No samples left for evaluation; raise data.eval_size or the CSV size")
    return dataset, shards, held_out


def build_state(config, shards: Sequence[Shard], protocol: str) -> SystemState:
    arch = config.arch
    s, n = arch.split_layer_index, arch.total_layers
    initial = init_params(arch, config.seed)
    if protocol == PSL and config.training.psl_local_init:
        clients = tuple(
            init_params(arch, config.seed + user + 1).slice(1, s) for user in range(len(shards))
        )
    else:
        clients = tuple(initial.slice(1, s) for _ in shards)

    system = config.system
    return SystemState(
        arch=arch,
        client_params=clients,
        server_params=initial.slice(s + 1, n),
        profiles=tuple(config.profiles),
        shards=tuple(shards),
        cost_model=CostModel(
            arch,
            bytes_per_element=system.bytes_per_element,
            aggregation_latency=system.aggregation_latency,
            backward_factor=system.backward_factor,
            server_cpu_rate=system.server_cpu_rate,
            server_slots=system.server_slots,
        ),
        settings=TrainingSettings(
            lr=config.training.lr,
            batch_size=config.data.batch_size,
            seed=config.seed,
            channel_jitter=system.channel_jitter,
            crom=config.crom,
        ).validate(),
    )


def evaluate_state(state: SystemState, protocol: str, dataset: Dataset) -> float:
    """MAE of the models the users actually hold.

    PSL clients never share weights, so each one is scored with the shared server and the
    scores are weighted by shard size. After FedAvg every client holds the same copy.
    """
    if protocol != PSL:
        return evaluate(state.client_params[0], state.server_params, dataset)
    scores = [evaluate(client, state.server_params, dataset) for client in state.client_params]
    return float(np.average(scores, weights=state.shard_sizes))


def run_experiment(
    config, progress: Optional[Callable[[MetricsRow], None]] = None
) -> MetricsReport:
    """Train every configured protocol from the same data, profiles and initial model"""
    report = MetricsReport()
    if config.training.epochs == 0:
        return report

    dataset, shards, held_out = build_dataset(config)
    train_set = dataset.subset(np.concatenate([shard.indices for shard in shards]))
    batch_size = config.data.batch_size

    for protocol in config.protocols:
        state = build_state(config, shards, protocol)
        for epoch in range(1, config.training.epochs + 1):
            schedule = {
                shard.owner: minibatches(dataset, shard, batch_size, config.seed, epoch)
                for shard in shards
            }
            traces = []
            for index in range(max(len(batches) for batches in schedule.values())):
                batches = {u: b[index] for u, b in schedule.items() if index < len(b)}
                state, trace = run_round(protocol, state, batches)
                traces.append(trace)
                report.records.append(RoundRecord(protocol, epoch, index, trace, state.plan))

            row = MetricsRow(
                protocol=protocol,
                epoch=epoch,
                train_mae=evaluate_state(state, protocol, train_set),
                eval_mae=evaluate_state(state, protocol, held_out),
                throughput=throughput(traces),
                sync_delay=float(np.mean([trace.sync_delay for trace in traces])),
                aggregations=0 if protocol == PSL else len(traces),
            )
            report.rows.append(row)
            if progress is not None:
                progress(row)
    return report
