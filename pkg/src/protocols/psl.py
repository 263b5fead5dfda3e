from typing import Mapping, Tuple

from src.data import Batch
from src.protocols.utils import execute_round, round_profiles, schedule_round, solo_routes
from src.state import RoundTrace, SystemState


def run_round_psl(
    state: SystemState, batches: Mapping[int, Batch]
) -> Tuple[SystemState, RoundTrace]:
    """Every user trains its own client copy against the shared server; nothing is averaged"""
    profiles, draws = round_profiles(state)
    routes = solo_routes(batches, state.arch.split_layer_index)
    clients, server, gradients, _ = execute_round(state, batches, routes, aggregate=False)
    events, sync_delay = schedule_round(
        state.cost_model, profiles, {u: b.size for u, b in batches.items()}
    )
    trace = RoundTrace(
        round_index=state.round_index,
        user_events=events,
        sync_delay=sync_delay,
        samples_processed=sum(b.size for b in batches.values()),
    )
    next_state = state.advance(
        client_params=clients,
        server_params=server,
        rng_draws=state.rng_draws + draws,
        last_gradients=gradients,
    )
    return next_state, trace
