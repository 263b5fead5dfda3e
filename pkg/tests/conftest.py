import os

import pytest

from src.crom import CromSettings
from src.data import Batch, SyntheticSpec, generate_synthetic, minibatches, partition
from src.model_core import ArchSpec, init_params
from src.state import SystemState, TrainingSettings
from src.system_model import CostModel, UserProfile

ROOT = os.path.dirname(os.path.dirname(__file__))
REFERENCE_CONFIG = os.path.join(ROOT, "configs", "reference.yaml")

SMALL_CONFIG = """
seed: 3
arch:
  num_numeric_features: 3
  vocab1: 2
  vocab2: 3
  embed_dim1: 2
  embed_dim2: 2
  wide_out_dim: 2
  client_hidden: [8, 8, 8]
  server_hidden: [4]
data:
  num_users: 4
  per_user: 16
  batch_size: 8
  eval_size: 20
profiles:
  - {cpu_rate: 4.0e+4}
  - {cpu_rate: 4.0e+4}
  - {cpu_rate: 1.0e+4}
  - {cpu_rate: 1.0e+4}
training:
  epochs: 2
output:
  dir: OUTDIR
"""


@pytest.fixture
def small_arch():
    """Six layers, split after the third client dense layer (s = 4)"""
    return ArchSpec(
        num_numeric_features=3,
        vocab1=2,
        vocab2=3,
        embed_dim1=2,
        embed_dim2=2,
        wide_out_dim=2,
        client_hidden=(8, 8, 8),
        server_hidden=(4,),
    )


@pytest.fixture
def small_spec():
    return SyntheticSpec(num_numeric=3, vocab1=2, vocab2=3)


@pytest.fixture
def make_state(small_arch, small_spec):
    """Build a SystemState over a small synthetic dataset; returns (state, batches)"""

    def _make(cpu_rates=(4.0e4, 4.0e4, 1.0e4, 1.0e4), per_user=8, seed=0, **settings):
        crom = settings.pop("crom", CromSettings())
        profiles = tuple(UserProfile(u, rate) for u, rate in enumerate(cpu_rates))
        dataset = generate_synthetic(seed, per_user * len(profiles) + 4, small_spec)
        shards = partition(dataset, len(profiles), per_user, seed)
        params = init_params(small_arch, seed)
        s = small_arch.split_layer_index
        state = SystemState(
            arch=small_arch,
            client_params=tuple(params.slice(1, s) for _ in profiles),
            server_params=params.slice(s + 1, small_arch.total_layers),
            profiles=profiles,
            shards=tuple(shards),
            cost_model=CostModel(small_arch),
            settings=TrainingSettings(batch_size=per_user, seed=seed, crom=crom, **settings),
        )
        batches = {
            shard.owner: minibatches(dataset, shard, per_user, seed, 1)[0] for shard in shards
        }
        return state, batches

    return _make


@pytest.fixture
def raw_batch(small_spec):
    dataset = generate_synthetic(11, 5, small_spec)
    return Batch(dataset.features(), dataset.targets())


@pytest.fixture
def small_config(tmp_path):
    """Path to a tiny runnable experiment writing into tmp_path/out"""
    path = tmp_path / "small.yaml"
    path.write_text(SMALL_CONFIG.replace("OUTDIR", str(tmp_path / "out")))
    return str(path)


@pytest.fixture
def reference_config():
    return REFERENCE_CONFIG