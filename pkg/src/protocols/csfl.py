from typing import Mapping, Tuple

from src.crom import next_assist_streaks, plan_round, resolve_relays
from src.data import Batch
from src.protocols.utils import execute_round, relay_routes, round_profiles, schedule_round
from src.state import RoundTrace, SystemState


def run_round_csfl(
    state: SystemState, batches: Mapping[int, Batch]
) -> Tuple[SystemState, RoundTrace]:
    """Two-stage round: helpers relay the unfinished client layers of their bottleneck partner.

    The plan is made from this round's profiles and the previous round's client gradients,
    pairs that should not relay fall back to solo training, and the round closes with FedAvg.
    """
    crom = state.settings.crom
    profiles, draws = round_profiles(state)
    batch_sizes = {u: b.size for u, b in batches.items()}
    batch = max(batch_sizes.values())

    plan = plan_round(
        profiles,
        {shard.owner: shard.data_quality for shard in state.shards},
        state.arch,
        batch,
        crom,
        state.round_index,
        state.last_gradients,
    )
    decisions, flags = resolve_relays(
        plan, state.cost_model, profiles, batch, crom, state.assist_streaks
    )
    if plan.fallback_users:
        flags.append("rematch_fallback:" + ",".join(str(u) for u in plan.fallback_users))

    routes = relay_routes(batches, state.arch.split_layer_index, decisions, crom.ship_weights)
    clients, server, gradients, _ = execute_round(state, batches, routes, aggregate=True)
    latency = state.cost_model.aggregation_latency
    events, sync_delay = schedule_round(
        state.cost_model,
        profiles,
        batch_sizes,
        decisions,
        aggregation_latency=latency,
        ship_weights=crom.ship_weights,
    )
    trace = RoundTrace(
        round_index=state.round_index,
        user_events=events,
        sync_delay=sync_delay,
        samples_processed=sum(batch_sizes.values()),
        aggregation_latency=latency,
        flags=tuple(flags),
        decisions=tuple(decisions),
    )
    next_state = state.advance(
        client_params=clients,
        server_params=server,
        rng_draws=state.rng_draws + draws,
        plan=plan,
        last_gradients=gradients,
        assist_streaks=next_assist_streaks(state.assist_streaks, decisions),
    )
    return next_state, trace
