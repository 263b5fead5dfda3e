"""Simulated-time cost model: linear FLOPs/rate compute and rate-plus-latency links."""

import math
from dataclasses import dataclass
from typing import Tuple

from src.errors import ConfigError, ContractError
from src.model_core import ArchSpec


@dataclass(frozen=True)
class UserProfile:
    user_id: int
    cpu_rate: float
    data_quality: float = 1.0
    uplink_rate: float = 1e8
    d2d_rate: float = 2e7
    link_latency: float = 0.001

    def validate(self) -> "UserProfile":
        values = (
            self.cpu_rate,
            self.data_quality,
            self.uplink_rate,
            self.d2d_rate,
            self.link_latency,
        )
        if not all(math.isfinite(v) for v in values):
            raise ConfigError(f"User {self.user_id}: profile values must be finite, got {values}")
        if self.cpu_rate <= 0:
            raise ConfigError(f"User {self.user_id}: cpu_rate must be > 0")
        if self.uplink_rate <= 0 or self.d2d_rate <= 0:
            raise ConfigError(f"User {self.user_id}: link rates must be > 0")
        if self.link_latency < 0:
            raise ConfigError(f"User {self.user_id}: link_latency must be >= 0")
        if not 0.0 <= self.data_quality <= 1.0:
            raise ConfigError(f"User {self.user_id}: data_quality must lie in [0, 1]")
        return self


def layer_flops(arch: ArchSpec, layer_index: int, batch: int) -> int:
    fan_in, fan_out = arch.layer_shape(layer_index)
    if layer_index == 1:
        # embedding lookups count one FLOP per gathered element
        return 2 * batch * fan_in * arch.wide_out_dim + batch * (arch.embed_dim1 + arch.embed_dim2)
    return 2 * batch * fan_in * fan_out


def range_flops(arch: ArchSpec, layer_range: Tuple[int, int], batch: int) -> int:
    first, last = layer_range
    if first > last:
        raise ContractError(f"Empty layer range {first}..{last}")
    return sum(layer_flops(arch, k, batch) for k in range(first, last + 1))


def compute_time(
    profile: UserProfile, arch: ArchSpec, layer_range: Tuple[int, int], batch: int
) -> float:
    return range_flops(arch, layer_range, batch) / profile.cpu_rate


def transfer_time(num_bytes: float, rate: float, latency: float) -> float:
    if rate <= 0:
        raise ConfigError(f"Link rate must be > 0, got {rate}")
    return latency + 8.0 * num_bytes / rate


def activation_bytes(
    arch: ArchSpec, layer_index: int, batch: int, bytes_per_element: int = 8
) -> int:
    return batch * arch.output_width(layer_index) * bytes_per_element


@dataclass(frozen=True)
class CostModel:
    arch: ArchSpec
    bytes_per_element: int = 8
    aggregation_latency: float = 0.05
    backward_factor: float = 2.0
    server_cpu_rate: float = 1e9
    server_slots: int = 0

    def flops(self, layer_index: int, batch: int) -> int:
        return layer_flops(self.arch, layer_index, batch)

    def forward_time(self, profile: UserProfile, first: int, last: int, batch: int) -> float:
        return compute_time(profile, self.arch, (first, last), batch)

    def backward_time(self, profile: UserProfile, first: int, last: int, batch: int) -> float:
        flops = range_flops(self.arch, (first, last), batch)
        return self.backward_factor * flops / profile.cpu_rate

    def layer_times(self, profile: UserProfile, first: int, last: int, batch: int):
        return [self.forward_time(profile, k, k, batch) for k in range(first, last + 1)]

    def server_time(self, batch: int) -> float:
        """Forward plus backward of the server-side layers for one upload"""
        flops = range_flops(
            self.arch, (self.arch.split_layer_index + 1, self.arch.total_layers), batch
        )
        return (1.0 + self.backward_factor) * flops / self.server_cpu_rate

    def activation_bytes(self, layer_index: int, batch: int) -> int:
        return activation_bytes(self.arch, layer_index, batch, self.bytes_per_element)

    def param_bytes(self, first: int, last: int) -> int:
        total = 0
        for k in range(first, last + 1):
            fan_in, fan_out = self.arch.layer_shape(k)
            if k == 1:
                total += fan_in * self.arch.wide_out_dim + self.arch.wide_out_dim
                total += self.arch.vocab1 * self.arch.embed_dim1
                total += self.arch.vocab2 * self.arch.embed_dim2
            else:
                total += fan_in * fan_out + fan_out
        return total * self.bytes_per_element
