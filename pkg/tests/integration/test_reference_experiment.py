import filecmp
import os

import numpy as np
import pytest

from src.config import Config
from src.orchestrator import cmd_run
from src.sim_engine import CSFL, PSL, SFL, run_experiment

pytestmark = [pytest.mark.integration, pytest.mark.slow]

CONFIGS = os.path.join(os.path.dirname(os.path.dirname(os.path.dirname(__file__))), "configs")


@pytest.fixture(scope="module")
def reference_report():
    return run_experiment(Config().load(os.path.join(CONFIGS, "reference.yaml")))


def test_federation_beats_parallel_split(reference_report):
    assert reference_report.final(PSL).eval_mae > reference_report.final(SFL).eval_mae


def test_relays_keep_accuracy(reference_report):
    sfl = reference_report.final(SFL).eval_mae
    csfl = reference_report.final(CSFL).eval_mae
    assert abs(csfl - sfl) / sfl <= 0.15


def test_relays_roughly_double_throughput(reference_report):
    ratio = reference_report.final(CSFL).throughput / reference_report.final(SFL).throughput
    assert 1.5 <= ratio <= 2.5


def test_aggregation_costs_throughput(reference_report):
    assert reference_report.final(PSL).throughput > reference_report.final(SFL).throughput
    assert reference_report.final(PSL).aggregations == 0
    assert reference_report.final(SFL).aggregations == 7


def test_every_relayed_round_is_shorter(reference_report):
    sfl, csfl = reference_report.traces(SFL), reference_report.traces(CSFL)
    assert len(sfl) == len(csfl) == 30 * 7
    assert all(c.sync_delay < s.sync_delay for s, c in zip(sfl, csfl))


def test_rematching_takes_over(reference_report):
    plans = [r.plan for r in reference_report.records if r.protocol == CSFL]
    assert plans[0].source == "initial"
    assert plans[-1].source == "gradient"
    assert all(len(plan.pairs) == 3 for plan in plans)


def test_identical_devices_reduce_to_federated_split():
    report = run_experiment(Config().load(os.path.join(CONFIGS, "homogeneous.yaml")))
    sfl = [row.as_list()[1:] for row in report.for_protocol(SFL)]
    csfl = [row.as_list()[1:] for row in report.for_protocol(CSFL)]
    assert csfl == sfl


def test_reruns_are_byte_identical(reference_config, tmp_path):
    overrides = {"training.epochs": 3}
    first = Config().load(reference_config, overrides).with_output_dir(str(tmp_path / "a"))
    second = Config().load(reference_config, overrides).with_output_dir(str(tmp_path / "b"))
    cmd_run(first)
    cmd_run(second)
    assert filecmp.cmp(first.output.metrics_path, second.output.metrics_path, shallow=False)
    assert filecmp.cmp(first.output.trace_path, second.output.trace_path, shallow=False)


def test_optional_features_together(reference_config):
    overrides = {
        "training.epochs": 2,
        "data.sharding": "iid",
        "system.channel_jitter": 0.2,
        "system.server_slots": 2,
        "crom.ship_weights": True,
        "crom.rematch_round": 3,
        "crom.rematch_metric": "difference_of_norms",
        "crom.max_assist_streak": 2,
    }
    report = run_experiment(Config().load(reference_config, overrides))
    assert len(report.rows) == 6
    assert all(np.isfinite(row.eval_mae) for row in report.rows)
    flags = [flag for trace in report.traces(CSFL) for flag in trace.flags]
    assert any(flag.startswith("assist_cap:") for flag in flags)
