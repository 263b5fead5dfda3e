"""Shared round types: the simulated system state and the per-round event trace."""

from dataclasses import dataclass, field, replace
from typing import Dict, Mapping, Optional, Tuple

import numpy as np

from src.crom import CromSettings, MatchPlan, PartitionDecision
from src.data import Shard
from src.errors import ConfigError
from src.model_core import ArchSpec, SplitModelParams
from src.system_model import CostModel, UserProfile

EVENT_ORDER = (
    "stage1_start",
    "stage1_end",
    "handoff_send",
    "relay_start",
    "relay_end",
    "smashed_upload",
    "server_compute",
    "grad_return",
    "client_backward_end",
)


@dataclass(frozen=True)
class TrainingSettings:
    lr: float = 0.05
    batch_size: int = 32
    seed: int = 0
    channel_jitter: float = 0.0
    crom: CromSettings = field(default_factory=CromSettings)

    def validate(self) -> "TrainingSettings":
        if self.lr <= 0:
            raise ConfigError(f"training.lr must be > 0, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError(f"data.batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 <= self.channel_jitter < 1.0:
            raise ConfigError(
                f"system.channel_jitter must lie in [0, 1), got {self.channel_jitter}"
            )
        self.crom.validate()
        return self


@dataclass(frozen=True, eq=False)
class SystemState:
    arch: ArchSpec
    client_params: Tuple[SplitModelParams, ...]
    server_params: SplitModelParams
    profiles: Tuple[UserProfile, ...]
    shards: Tuple[Shard, ...]
    cost_model: CostModel
    settings: TrainingSettings = field(default_factory=TrainingSettings)
    round_index: int = 0
    rng_draws: int = 0
    plan: Optional[MatchPlan] = None
    last_gradients: Mapping[int, np.ndarray] = field(default_factory=dict)
    assist_streaks: Mapping[int, int] = field(default_factory=dict)

    @property
    def num_users(self) -> int:
        return len(self.profiles)

    @property
    def shard_sizes(self) -> Tuple[int, ...]:
        return tuple(shard.size for shard in self.shards)

    def advance(self, **changes) -> "SystemState":
        return replace(self, round_index=self.round_index + 1, **changes)

    def same_training_state(self, other: "SystemState") -> bool:
        """Bit-wise equality of parameters, round counter and RNG draw count"""
        if (self.round_index, self.rng_draws) != (other.round_index, other.rng_draws):
            return False
        if len(self.client_params) != len(other.client_params):
            return False
        pairs = list(zip(self.client_params, other.client_params))
        pairs.append((self.server_params, other.server_params))
        return all(np.array_equal(a.flatten(), b.flatten()) for a, b in pairs)


@dataclass(frozen=True)
class RoundTrace:
    round_index: int
    user_events: Dict[int, Dict[str, float]]
    sync_delay: float
    samples_processed: int
    aggregation_latency: float = 0.0
    flags: Tuple[str, ...] = ()
    decisions: Tuple[PartitionDecision, ...] = ()

    def completion_time(self, user_id: int) -> float:
        return self.user_events[user_id]["client_backward_end"]

    def to_dict(self) -> Dict:
        return {
            "round_index": self.round_index,
            "sync_delay": self.sync_delay,
            "samples_processed": self.samples_processed,
            "aggregation_latency": self.aggregation_latency,
            "flags": list(self.flags),
            "decisions": [d.to_dict() for d in self.decisions],
            "users": {
                str(user): {name: events[name] for name in EVENT_ORDER if name in events}
                for user, events in sorted(self.user_events.items())
            },
        }
