"""Collaborative relay planning: who is slow, who helps whom, and where the model is cut.

Everything here is a pure function of profiles, shard qualities and gradients, so
plans can be computed ahead of the round they apply to.
"""

import math
from dataclasses import dataclass, replace
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Set, Tuple

import numpy as np

from src.errors import ConfigError, ContractError
from src.model_core import ArchSpec, GradientBundle
from src.system_model import CostModel, UserProfile, compute_time, transfer_time

NORM_OF_DIFFERENCE = "norm_of_difference"
DIFFERENCE_OF_NORMS = "difference_of_norms"

Pair = Tuple[int, int]


@dataclass(frozen=True)
class CromSettings:
    alpha: float = 1.0 / 3.0
    beta: float = 1.0 / 3.0
    gamma: float = 1.0 / 3.0
    rematch_round: int = 5
    rematch_metric: str = NORM_OF_DIFFERENCE
    helper_budget: float = 2.0
    ship_weights: bool = False
    d2d_timeout: float = 1.0
    max_assist_streak: int = 0
    auxiliary_task: str = "none"

    def validate(self) -> "CromSettings":
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ConfigError("crom.alpha/beta/gamma must be >= 0")
        if self.rematch_round < 1:
            raise ConfigError("crom.rematch_round must be >= 1")
        if self.rematch_metric not in (NORM_OF_DIFFERENCE, DIFFERENCE_OF_NORMS):
            raise ConfigError(f"Unknown crom.rematch_metric: {self.rematch_metric}")
        if self.helper_budget <= 0 or self.d2d_timeout <= 0:
            raise ConfigError("crom.helper_budget and crom.d2d_timeout must be > 0")
        if self.max_assist_streak < 0:
            raise ConfigError(f"crom.max_assist_streak must be >= 0, got {self.max_assist_streak}")
        if self.auxiliary_task != "none":
            raise ConfigError(f"Unsupported crom.auxiliary_task: {self.auxiliary_task}")
        return self


@dataclass(frozen=True)
class MatchPlan:
    pairs: Tuple[Pair, ...]
    solo: Tuple[int, ...]
    round_index: int = 0
    efficient: Tuple[int, ...] = ()
    bottleneck: Tuple[int, ...] = ()
    fallback_users: Tuple[int, ...] = ()
    source: str = "initial"

    def to_dict(self) -> Dict:
        return {
            "round_index": self.round_index,
            "source": self.source,
            "pairs": [list(pair) for pair in self.pairs],
            "solo": list(self.solo),
            "efficient": list(self.efficient),
            "bottleneck": list(self.bottleneck),
            "fallback_users": list(self.fallback_users),
        }


@dataclass(frozen=True)
class PartitionDecision:
    helper_id: int
    bottleneck_id: int
    partition_point: int
    handoff_time: float
    intermediate_bytes: int

    def to_dict(self) -> Dict:
        return {
            "helper_id": self.helper_id,
            "bottleneck_id": self.bottleneck_id,
            "partition_point": self.partition_point,
            "handoff_time": self.handoff_time,
            "intermediate_bytes": self.intermediate_bytes,
        }


@dataclass(frozen=True)
class Candidate:
    profile: UserProfile
    data_quality: float = 1.0

    @property
    def user_id(self) -> int:
        return self.profile.user_id


@dataclass(frozen=True)
class ScoreBounds:
    rate_min: float
    rate_max: float
    cpu_min: float
    cpu_max: float


def classify_users(
    profiles: Sequence[UserProfile], arch: ArchSpec, batch: int
) -> Tuple[Set[int], Set[int]]:
    """Users at or below the median client-forward time are efficient"""
    if not profiles:
        raise ContractError("Cannot classify an empty user set")
    s = arch.split_layer_index
    times = {p.user_id: compute_time(p, arch, (1, s), batch) for p in profiles}
    median = float(np.median(list(times.values())))
    efficient = {u for u, t in times.items() if t <= median}
    return efficient, set(times) - efficient


def d2d_link(a: UserProfile, b: UserProfile) -> Tuple[float, float]:
    """A peer link runs at the slower endpoint's rate and the larger latency"""
    return min(a.d2d_rate, b.d2d_rate), max(a.link_latency, b.link_latency)


def score_bounds(helpers: Iterable[Candidate], bottlenecks: Iterable[Candidate]) -> ScoreBounds:
    helpers, bottlenecks = list(helpers), list(bottlenecks)
    rates = [d2d_link(h.profile, b.profile)[0] for h in helpers for b in bottlenecks]
    cpus = [h.profile.cpu_rate for h in helpers]
    return ScoreBounds(min(rates), max(rates), min(cpus), max(cpus))


def _normalized(value: float, low: float, high: float) -> float:
    return (value - low) / (high - low) if high > low else 1.0


def initial_match_score(
    helper: Candidate,
    bottleneck: Candidate,
    bounds: ScoreBounds,
    settings: CromSettings = CromSettings(),
) -> float:
    if helper.user_id == bottleneck.user_id:
        raise ContractError(f"User {helper.user_id} cannot help itself")
    rate = d2d_link(helper.profile, bottleneck.profile)[0]
    return (
        settings.alpha * min(helper.data_quality, bottleneck.data_quality)
        + settings.beta * _normalized(rate, bounds.rate_min, bounds.rate_max)
        + settings.gamma * _normalized(helper.profile.cpu_rate, bounds.cpu_min, bounds.cpu_max)
    )


def initial_score_matrix(
    efficient: Iterable[int],
    bottleneck: Iterable[int],
    candidates: Mapping[int, Candidate],
    settings: CromSettings = CromSettings(),
) -> Dict[Pair, float]:
    helpers = [candidates[u] for u in sorted(efficient)]
    slow = [candidates[u] for u in sorted(bottleneck)]
    if not helpers or not slow:
        return {}
    bounds = score_bounds(helpers, slow)
    return {
        (h.user_id, b.user_id): initial_match_score(h, b, bounds, settings)
        for h in helpers
        for b in slow
    }


def greedy_match(
    efficient: Iterable[int],
    bottleneck: Iterable[int],
    score_matrix: Mapping[Pair, float],
    round_index: int = 0,
) -> MatchPlan:
    """Take the best remaining cell until one side runs out; ties go to lower ids"""
    efficient, bottleneck = sorted(efficient), sorted(bottleneck)
    missing = [(h, b) for h in efficient for b in bottleneck if (h, b) not in score_matrix]
    if missing:
        raise ContractError(f"Score matrix lacks cells {missing}")

    cells = sorted(
        ((-score_matrix[(h, b)], h, b) for h in efficient for b in bottleneck),
    )
    used: Set[int] = set()
    pairs: List[Pair] = []
    for _, h, b in cells:
        if h in used or b in used:
            continue
        pairs.append((h, b))
        used.update((h, b))
        if len(pairs) == min(len(efficient), len(bottleneck)):
            break
    solo = tuple(sorted(u for u in efficient + bottleneck if u not in used))
    return MatchPlan(
        pairs=tuple(pairs),
        solo=solo,
        round_index=round_index,
        efficient=tuple(efficient),
        bottleneck=tuple(bottleneck),
    )


def _flat(gradient) -> np.ndarray:
    return gradient.flatten() if isinstance(gradient, GradientBundle) else np.ravel(gradient)


def gradient_distance(g_a, g_b, metric: str = NORM_OF_DIFFERENCE) -> float:
    a, b = _flat(g_a), _flat(g_b)
    if metric == DIFFERENCE_OF_NORMS:
        return abs(float(np.linalg.norm(a)) - float(np.linalg.norm(b)))
    if a.shape != b.shape:
        raise ContractError(f"Gradient shapes differ: {a.shape} vs {b.shape}")
    return float(np.linalg.norm(a - b))


def gradient_rematch(
    previous_plan: MatchPlan,
    per_user_gradients: Mapping[int, object],
    fallback_scores: Optional[Mapping[Pair, float]] = None,
    metric: str = NORM_OF_DIFFERENCE,
    round_index: Optional[int] = None,
) -> MatchPlan:
    """Greedy matching on negated gradient distances over the previous classification"""
    scores: Dict[Pair, float] = {}
    fallback: Set[int] = set()
    for h in previous_plan.efficient:
        for b in previous_plan.bottleneck:
            if h in per_user_gradients and b in per_user_gradients:
                scores[(h, b)] = -gradient_distance(
                    per_user_gradients[h], per_user_gradients[b], metric
                )
                continue
            if fallback_scores is None or (h, b) not in fallback_scores:
                raise ContractError(f"No gradients and no fallback score for pair {(h, b)}")
            scores[(h, b)] = fallback_scores[(h, b)]
            fallback.update(u for u in (h, b) if u not in per_user_gradients)

    plan = greedy_match(
        previous_plan.efficient,
        previous_plan.bottleneck,
        scores,
        previous_plan.round_index if round_index is None else round_index,
    )
    return replace(plan, fallback_users=tuple(sorted(fallback)), source="gradient")


def choose_partition_point(
    helper_stage1_time: float, bottleneck_layer_times: Sequence[float], split_layer_index: int
) -> int:
    """Deepest layer the bottleneck finishes by the time the helper is free, within [1, s]"""
    point, elapsed = 1, 0.0
    for k, duration in enumerate(bottleneck_layer_times[:split_layer_index], start=1):
        elapsed += duration
        if elapsed <= helper_stage1_time:
            point = k
        else:
            break
    return max(1, min(point, split_layer_index))


def determine_partition_point(
    pair: Pair, cost_model: CostModel, profiles: Mapping[int, UserProfile], batch: int
) -> PartitionDecision:
    helper, bottleneck = profiles[pair[0]], profiles[pair[1]]
    s = cost_model.arch.split_layer_index
    stage1 = cost_model.forward_time(helper, 1, s, batch)
    point = choose_partition_point(stage1, cost_model.layer_times(bottleneck, 1, s, batch), s)
    reached = cost_model.forward_time(bottleneck, 1, point, batch)
    return PartitionDecision(
        helper_id=helper.user_id,
        bottleneck_id=bottleneck.user_id,
        partition_point=point,
        handoff_time=max(stage1, reached),
        intermediate_bytes=cost_model.activation_bytes(point, batch),
    )


def handoff_bytes(decision: PartitionDecision, cost_model: CostModel, ship_weights: bool) -> int:
    extra = 0
    if ship_weights:
        extra = cost_model.param_bytes(
            decision.partition_point + 1, cost_model.arch.split_layer_index
        )
    return decision.intermediate_bytes + extra


def resolve_relays(
    plan: MatchPlan,
    cost_model: CostModel,
    profiles: Mapping[int, UserProfile],
    batch: int,
    settings: CromSettings = CromSettings(),
    assist_streaks: Optional[Mapping[int, int]] = None,
) -> Tuple[List[PartitionDecision], List[str]]:
    """Partition every pair and drop the ones that should not relay this round.

    With `max_assist_streak` set, a helper that relayed in that many consecutive rounds
    trains on its own for a round.
    """
    s = cost_model.arch.split_layer_index
    streaks = assist_streaks or {}
    decisions, flags = [], []
    for helper_id, bottleneck_id in plan.pairs:
        pair = (helper_id, bottleneck_id)
        decision = determine_partition_point(pair, cost_model, profiles, batch)
        tag = f"{helper_id}-{bottleneck_id}"
        if decision.partition_point >= s:
            flags.append(f"no_relay:{tag}")
            continue
        helper = profiles[helper_id]
        relay_time = cost_model.forward_time(helper, decision.partition_point + 1, s, batch)
        if relay_time > settings.helper_budget * cost_model.forward_time(helper, 1, s, batch):
            flags.append(f"helper_budget:{tag}")
            continue
        rate, latency = d2d_link(helper, profiles[bottleneck_id])
        payload = handoff_bytes(decision, cost_model, settings.ship_weights)
        d2d = transfer_time(payload, rate, latency)
        if d2d > settings.d2d_timeout or math.isinf(d2d):
            flags.append(f"d2d_timeout:{tag}")
            continue
        cap = settings.max_assist_streak
        if cap and streaks.get(helper_id, 0) >= cap:
            flags.append(f"assist_cap:{tag}")
            continue
        decisions.append(decision)
    return decisions, flags


def next_assist_streaks(
    streaks: Mapping[int, int], decisions: Sequence[PartitionDecision]
) -> Dict[int, int]:
    """Consecutive relaying rounds per helper; a round off resets the count"""
    return {d.helper_id: streaks.get(d.helper_id, 0) + 1 for d in decisions}


def plan_round(
    profiles: Mapping[int, UserProfile],
    qualities: Mapping[int, float],
    arch: ArchSpec,
    batch: int,
    settings: CromSettings,
    round_index: int,
    gradients: Optional[Mapping[int, object]] = None,
) -> MatchPlan:
    ordered = [profiles[u] for u in sorted(profiles)]
    efficient, bottleneck = classify_users(ordered, arch, batch)
    if not bottleneck:
        return MatchPlan(
            pairs=(),
            solo=tuple(sorted(profiles)),
            round_index=round_index,
            efficient=tuple(sorted(efficient)),
        )
    candidates = {u: Candidate(p, qualities.get(u, p.data_quality)) for u, p in profiles.items()}
    scores = initial_score_matrix(efficient, bottleneck, candidates, settings)
    if round_index >= settings.rematch_round and gradients:
        basis = MatchPlan(
            pairs=(),
            solo=(),
            round_index=round_index,
            efficient=tuple(sorted(efficient)),
            bottleneck=tuple(sorted(bottleneck)),
        )
        return gradient_rematch(basis, gradients, scores, settings.rematch_metric, round_index)
    return greedy_match(efficient, bottleneck, scores, round_index)
