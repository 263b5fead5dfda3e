import heapq
from dataclasses import replace
from typing import Dict, List, Mapping, Sequence, Tuple

import numpy as np

from src.crom import PartitionDecision, d2d_link, handoff_bytes
from src.data import Batch
from src.errors import ConfigError, ContractError, NumericError, RoundError
from src.model_core import (
    SplitModelParams,
    add_grads,
    average_grads,
    backward_range,
    forward_with_cache,
    map_layer,
    mse_loss_and_grad,
    sgd_step,
    zero_grads,
)
from src.state import SystemState
from src.system_model import CostModel, UserProfile, transfer_time

# (owner of the parameters, first layer, last layer)
Segment = Tuple[int, int, int]
Route = List[Segment]


def fedavg(param_sets: Sequence[SplitModelParams], weights: Sequence[float]) -> SplitModelParams:
    """Weighted elementwise average of congruent parameter sets"""
    if not param_sets:
        raise ContractError("fedavg needs at least one parameter set")
    if len(weights) != len(param_sets):
        raise ContractError(f"{len(param_sets)} parameter sets but {len(weights)} weights")
    weights = np.asarray(weights, dtype=np.float64)
    if np.any(weights < 0):
        raise ConfigError(f"fedavg weights must be non-negative, got {weights.tolist()}")
    if weights.sum() <= 0:
        raise ConfigError("fedavg weights must sum to a positive value")
    first = param_sets[0]
    for other in param_sets[1:]:
        if (other.first_layer, len(other.layers)) != (first.first_layer, len(first.layers)):
            raise ContractError("fedavg parameter sets cover different layer ranges")

    layers = []
    for position, layer in enumerate(first.layers):
        peers = [params.layers[position] for params in param_sets[1:]]
        layers.append(
            map_layer(
                layer,
                lambda *ts: np.average(np.stack(ts), axis=0, weights=weights),
                *peers,
            )
        )
    return SplitModelParams(tuple(layers), first.first_layer)


def solo_routes(user_ids, split_layer_index: int) -> Dict[int, Route]:
    return {u: [(u, 1, split_layer_index)] for u in user_ids}


def relay_routes(
    user_ids, split_layer_index: int, decisions: Sequence[PartitionDecision], ship_weights: bool
) -> Dict[int, Route]:
    routes = solo_routes(user_ids, split_layer_index)
    for d in decisions:
        tail_owner = d.bottleneck_id if ship_weights else d.helper_id
        routes[d.bottleneck_id] = [
            (d.bottleneck_id, 1, d.partition_point),
            (tail_owner, d.partition_point + 1, split_layer_index),
        ]
    return routes


def round_profiles(state: SystemState) -> Tuple[Dict[int, UserProfile], int]:
    """Profiles with this round's channel jitter applied, plus the number of draws consumed"""
    profiles = {p.user_id: p for p in state.profiles}
    jitter = state.settings.channel_jitter
    if jitter <= 0:
        return profiles, 0
    rng = np.random.default_rng([state.settings.seed, state.round_index])
    factors = rng.uniform(1.0 - jitter, 1.0 + jitter, size=(len(profiles), 2))
    for (uplink, d2d), user in zip(factors, sorted(profiles)):
        p = profiles[user]
        profiles[user] = replace(
            p, uplink_rate=p.uplink_rate * uplink, d2d_rate=p.d2d_rate * d2d
        )
    return profiles, int(factors.size)


def execute_round(
    state: SystemState, batches: Mapping[int, Batch], routes: Mapping[int, Route], aggregate: bool
) -> Tuple[Tuple[SplitModelParams, ...], SplitModelParams, Dict[int, np.ndarray], Dict[int, float]]:
    """Run every user's batch along its route and apply one update per parameter set.

    Server gradients are all taken at the round-start server parameters and averaged by
    batch size. Client gradients accrue to whoever owns the segment that produced them.
    """
    arch = state.arch
    s, n = arch.split_layer_index, arch.total_layers
    clients = state.client_params
    server = state.server_params

    accrued = {u: zero_grads(clients[u]) for u in range(len(clients))}
    per_user = {}
    losses = {}
    server_grads, server_weights = [], []
    for user in sorted(batches):
        batch = batches[user]
        route = routes[user]
        try:
            x = batch.features
            caches = []
            for owner, first, last in route:
                x, cache = forward_with_cache(clients[owner], first, last, x)
                caches.append(cache)
            out, server_cache = forward_with_cache(server, s + 1, n, x)
            loss, grad = mse_loss_and_grad(out.values, batch.target)
            if not np.isfinite(loss):
                raise RoundError(user, f"non-finite loss in round {state.round_index}")
            server_grad = backward_range(server, s + 1, n, server_cache, grad)
            upstream = server_grad.input_gradient
            owned = zero_grads(clients[user])
            for (owner, first, last), cache in reversed(list(zip(route, caches))):
                part = backward_range(clients[owner], first, last, cache, upstream)
                accrued[owner] = add_grads(accrued[owner], part)
                owned = add_grads(owned, part)
                upstream = part.input_gradient
        except RoundError:
            raise
        except NumericError as e:
            raise RoundError(user, str(e)) from None

        losses[user] = loss
        per_user[user] = owned.flatten()
        server_grads.append(server_grad)
        server_weights.append(batch.size)

    lr = state.settings.lr
    updated = [sgd_step(clients[u], accrued[u], lr) for u in range(len(clients))]
    server = sgd_step(server, average_grads(server_grads, server_weights), lr)
    if aggregate:
        merged = fedavg(updated, state.shard_sizes)
        updated = [merged] * len(updated)
    return tuple(updated), server, per_user, losses


def uplink_time(cost: CostModel, profile: UserProfile, batch: int) -> float:
    """Smashed data up, or its gradient back down, over the carrier's own link"""
    payload = cost.activation_bytes(cost.arch.split_layer_index, batch)
    return transfer_time(payload, profile.uplink_rate, profile.link_latency)


def schedule_round(
    cost: CostModel,
    profiles: Mapping[int, UserProfile],
    batch_sizes: Mapping[int, int],
    decisions: Sequence[PartitionDecision] = (),
    aggregation_latency: float = 0.0,
    ship_weights: bool = False,
) -> Tuple[Dict[int, Dict[str, float]], float]:
    """Event times for one round.

    Every device CPU and uplink is a sequential resource; a helper runs its own forward,
    the relayed forward, the relayed backward and its own backward in that order. The
    server serves uploads first come first served, ties broken by user id, on
    `server_slots` parallel slots (0 gives every user its own slot).
    """
    s = cost.arch.split_layer_index
    users = sorted(batch_sizes)
    relayed = {d.bottleneck_id: d for d in decisions}
    carrier = {u: relayed[u].helper_id if u in relayed else u for u in users}
    events: Dict[int, Dict[str, float]] = {u: {"stage1_start": 0.0} for u in users}
    cpu_free = {u: 0.0 for u in users}
    uplink_free = {u: 0.0 for u in users}
    ready = {}

    for u in users:
        last = relayed[u].partition_point if u in relayed else s
        end = cost.forward_time(profiles[u], 1, last, batch_sizes[u])
        events[u]["stage1_end"] = end
        cpu_free[u] = end
        ready[u] = end

    for b, d in sorted(relayed.items()):
        h = d.helper_id
        rate, latency = d2d_link(profiles[h], profiles[b])
        send = events[b]["stage1_end"]
        arrival = send + transfer_time(handoff_bytes(d, cost, ship_weights), rate, latency)
        start = max(arrival, cpu_free[h])
        end = start + cost.forward_time(profiles[h], d.partition_point + 1, s, batch_sizes[b])
        cpu_free[h] = end
        ready[b] = end
        events[b].update(handoff_send=send, relay_start=start, relay_end=end)

    queue: List[Tuple[float, int]] = []
    for u in sorted(users, key=lambda u: (ready[u], u)):
        c = carrier[u]
        start = max(ready[u], uplink_free[c])
        uploaded = start + uplink_time(cost, profiles[c], batch_sizes[u])
        uplink_free[c] = uploaded
        events[u]["smashed_upload"] = uploaded
        heapq.heappush(queue, (uploaded, u))

    slots = [0.0] * (cost.server_slots or len(users))
    grad_at_carrier = {}
    while queue:
        arrived, u = heapq.heappop(queue)
        done = max(arrived, heapq.heappop(slots)) + cost.server_time(batch_sizes[u])
        heapq.heappush(slots, done)
        events[u]["server_compute"] = done
        grad_at_carrier[u] = done + uplink_time(cost, profiles[carrier[u]], batch_sizes[u])

    for b, d in sorted(relayed.items()):
        h, p = d.helper_id, d.partition_point
        start = max(grad_at_carrier[b], cpu_free[h])
        cpu_free[h] = start + cost.backward_time(profiles[h], p + 1, s, batch_sizes[b])
        returned = d.intermediate_bytes
        if ship_weights:
            returned += cost.param_bytes(p + 1, s)
        rate, latency = d2d_link(profiles[h], profiles[b])
        events[b]["grad_return"] = cpu_free[h] + transfer_time(returned, rate, latency)

    for u in users:
        if u not in relayed:
            events[u]["grad_return"] = grad_at_carrier[u]
        last = relayed[u].partition_point if u in relayed else s
        start = max(events[u]["grad_return"], cpu_free[u])
        cpu_free[u] = start + cost.backward_time(profiles[u], 1, last, batch_sizes[u])
        events[u]["client_backward_end"] = cpu_free[u]

    completion = max(events[u]["client_backward_end"] for u in users)
    return events, completion + aggregation_latency
