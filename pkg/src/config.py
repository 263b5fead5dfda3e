import copy
import math
import os
from dataclasses import dataclass, replace
from typing import Any, Dict, List, Optional, Tuple

import yaml

from src.crom import CromSettings
from src.errors import ConfigError
from src.model_core import ArchSpec
from src.system_model import UserProfile

PROTOCOL_NAMES = ("psl", "sfl", "csfl-g")

DEFAULTS: Dict[str, Any] = {
    "seed": 0,
    "arch": {
        "num_numeric_features": 6,
        "vocab1": 3,
        "vocab2": 4,
        "embed_dim1": 4,
        "embed_dim2": 4,
        "wide_out_dim": 4,
        "client_hidden": [32, 32, 32],
        "server_hidden": [16],
        "output_dim": 1,
        "split_layer_index": None,
    },
    "data": {
        "csv_path": None,
        "num_users": 6,
        "per_user": 200,
        "batch_size": 32,
        "eval_size": 300,
        "noise_sigma": 0.1,
        "weight_scale": 1.0,
        "sharding": "iid",
        "dirichlet_alpha": 0.5,
    },
    "system": {
        "bytes_per_element": 8,
        "aggregation_latency": 0.05,
        "backward_factor": 2.0,
        "server_cpu_rate": 1.0e9,
        "server_slots": 0,
        "channel_jitter": 0.0,
        "cpu_scale": 1.0,
    },
    "protocols": list(PROTOCOL_NAMES),
    "training": {"epochs": 30, "lr": 0.05, "psl_local_init": True},
    "crom": {
        "alpha": 1.0 / 3.0,
        "beta": 1.0 / 3.0,
        "gamma": 1.0 / 3.0,
        "rematch_round": 5,
        "rematch_metric": "norm_of_difference",
        "helper_budget": 2.0,
        "ship_weights": False,
        "d2d_timeout": 1.0,
        "max_assist_streak": 0,
        "auxiliary_task": "none",
    },
    "output": {"dir": "results", "metrics_file": "metrics.csv", "trace_file": "trace.json"},
}

PROFILE_DEFAULTS: Dict[str, Any] = {
    "data_quality": 1.0,
    "uplink_rate": 1.0e8,
    "d2d_rate": 2.0e7,
    "link_latency": 0.001,
}
PROFILE_REQUIRED = ("cpu_rate",)


@dataclass(frozen=True)
class DataSection:
    csv_path: Optional[str]
    num_users: int
    per_user: int
    batch_size: int
    eval_size: int
    noise_sigma: float
    weight_scale: float
    sharding: str
    dirichlet_alpha: float


@dataclass(frozen=True)
class SystemSection:
    bytes_per_element: int
    aggregation_latency: float
    backward_factor: float
    server_cpu_rate: float
    server_slots: int
    channel_jitter: float
    cpu_scale: float


@dataclass(frozen=True)
class TrainingSection:
    epochs: int
    lr: float
    psl_local_init: bool


@dataclass(frozen=True)
class OutputSection:
    dir: str
    metrics_file: str
    trace_file: str

    @property
    def metrics_path(self) -> str:
        return os.path.join(self.dir, self.metrics_file)

    @property
    def trace_path(self) -> str:
        return os.path.join(self.dir, self.trace_file)


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int
    arch: ArchSpec
    data: DataSection
    profiles: Tuple[UserProfile, ...]
    system: SystemSection
    protocols: Tuple[str, ...]
    training: TrainingSection
    crom: CromSettings
    output: OutputSection
    defaulted: Tuple[str, ...] = ()
    source: Optional[str] = None

    def with_protocols(self, names) -> "ExperimentConfig":
        return replace(self, protocols=tuple(names))

    def with_output_dir(self, path: str) -> "ExperimentConfig":
        return replace(self, output=replace(self.output, dir=path))


def read_yaml(path: str) -> Dict[str, Any]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = yaml.safe_load(f)
    except yaml.YAMLError as e:
        raise ConfigError(f"{path} is not valid YAML: {e}") from None
    except OSError as e:
        raise ConfigError(f"Cannot read config {path}: {e.strerror or e}") from None
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path} must hold a mapping at the top level")
    return raw


def _step(node, key: str, path: str):
    if isinstance(node, list):
        try:
            return int(key)
        except ValueError:
            raise ConfigError(f"{path}: '{key}' is not a list index") from None
    return key


def get_path(tree: Dict[str, Any], dotted: str) -> Any:
    node: Any = tree
    for key in dotted.split("."):
        index = _step(node, key, dotted)
        try:
            node = node[index]
        except (KeyError, IndexError, TypeError):
            raise ConfigError(f"Unknown config key: {dotted}") from None
    return node


def set_path(tree: Dict[str, Any], dotted: str, value: Any) -> None:
    keys = dotted.split(".")
    node: Any = tree
    for position, key in enumerate(keys):
        index = _step(node, key, dotted)
        last = position == len(keys) - 1
        if isinstance(node, list):
            if not 0 <= index < len(node):
                raise ConfigError(f"{dotted}: index {index} outside list of {len(node)}")
        elif not isinstance(node, dict):
            raise ConfigError(f"{dotted}: cannot descend into a scalar")
        if last:
            node[index] = value
        else:
            if isinstance(node, dict) and index not in node:
                node[index] = {}
            node = node[index]


def _merge(raw: Dict[str, Any], defaults: Dict[str, Any], prefix: str, defaulted: List[str]):
    merged = {}
    for key in raw:
        if key not in defaults:
            raise ConfigError(f"Unknown config key: {prefix}{key}")
    for key, default in defaults.items():
        if key not in raw and not isinstance(default, dict):
            defaulted.append(prefix + key)
            merged[key] = copy.deepcopy(default)
        elif isinstance(default, dict):
            section = raw.get(key)
            section = {} if section is None else section
            if not isinstance(section, dict):
                raise ConfigError(f"{prefix}{key} must be a mapping")
            merged[key] = _merge(section, default, f"{prefix}{key}.", defaulted)
        else:
            merged[key] = raw[key]
    return merged


def _merge_profiles(raw_profiles, defaulted: List[str]) -> List[Dict[str, Any]]:
    if raw_profiles is None:
        raise ConfigError("profiles is required (one entry per user)")
    if not isinstance(raw_profiles, list):
        raise ConfigError("profiles must be a list")
    merged = []
    for index, entry in enumerate(raw_profiles):
        if not isinstance(entry, dict):
            raise ConfigError(f"profiles.{index} must be a mapping")
        for key in PROFILE_REQUIRED:
            if key not in entry:
                raise ConfigError(f"profiles.{index}.{key} is required")
        rest = {k: v for k, v in entry.items() if k not in PROFILE_REQUIRED}
        profile = _merge(rest, PROFILE_DEFAULTS, f"profiles.{index}.", defaulted)
        profile.update({key: entry[key] for key in PROFILE_REQUIRED})
        merged.append(profile)
    return merged


def _as_float(text: str):
    # YAML 1.1 reads exponents without a sign (2.0e6) as strings
    try:
        return float(text)
    except ValueError:
        return text


def parse_override(text: str) -> Any:
    """Parse a --set or --values entry the way the config file would read it"""
    try:
        value = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"Cannot parse override value {text!r}: {e}") from None
    return _as_float(value) if isinstance(value, str) else value


def _number(value, path: str, integer: bool = False):
    if isinstance(value, str):
        value = _as_float(value)
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{path} must be a number, got {value!r}")
    if not math.isfinite(value):
        raise ConfigError(f"{path} must be finite, got {value!r}")
    if integer and int(value) != value:
        raise ConfigError(f"{path} must be an integer, got {value!r}")
    return int(value) if integer else float(value)


def _flag(value, path: str) -> bool:
    if not isinstance(value, bool):
        raise ConfigError(f"{path} must be true or false, got {value!r}")
    return value


def _widths(value, path: str) -> Tuple[int, ...]:
    if not isinstance(value, list):
        raise ConfigError(f"{path} must be a list of widths")
    return tuple(_number(v, f"{path}.{i}", integer=True) for i, v in enumerate(value))


def build_experiment(tree: Dict[str, Any], defaulted=(), source=None) -> ExperimentConfig:
    seed = _number(tree["seed"], "seed", integer=True)
    if seed < 0:
        raise ConfigError(f"seed must be >= 0, got {seed}")

    a = tree["arch"]
    split = a["split_layer_index"]
    arch = ArchSpec(
        num_numeric_features=_number(a["num_numeric_features"], "arch.num_numeric_features", True),
        vocab1=_number(a["vocab1"], "arch.vocab1", True),
        vocab2=_number(a["vocab2"], "arch.vocab2", True),
        embed_dim1=_number(a["embed_dim1"], "arch.embed_dim1", True),
        embed_dim2=_number(a["embed_dim2"], "arch.embed_dim2", True),
        wide_out_dim=_number(a["wide_out_dim"], "arch.wide_out_dim", True),
        client_hidden=_widths(a["client_hidden"], "arch.client_hidden"),
        server_hidden=_widths(a["server_hidden"], "arch.server_hidden"),
        output_dim=_number(a["output_dim"], "arch.output_dim", True),
        split_layer_index=None if split is None else _number(split, "arch.split_layer_index", True),
    ).validate()

    d = tree["data"]
    data = DataSection(
        csv_path=d["csv_path"],
        num_users=_number(d["num_users"], "data.num_users", True),
        per_user=_number(d["per_user"], "data.per_user", True),
        batch_size=_number(d["batch_size"], "data.batch_size", True),
        eval_size=_number(d["eval_size"], "data.eval_size", True),
        noise_sigma=_number(d["noise_sigma"], "data.noise_sigma"),
        weight_scale=_number(d["weight_scale"], "data.weight_scale"),
        sharding=str(d["sharding"]),
        dirichlet_alpha=_number(d["dirichlet_alpha"], "data.dirichlet_alpha"),
    )
    if data.num_users < 1 or data.per_user < 1 or data.batch_size < 1:
        raise ConfigError("data.num_users, data.per_user and data.batch_size must be >= 1")
    if data.eval_size < 0 or data.noise_sigma < 0:
        raise ConfigError("data.eval_size and data.noise_sigma must be >= 0")
    if not data.csv_path and data.eval_size < 1:
        raise ConfigError("data.eval_size must be >= 1 for synthetic data")
    if data.sharding not in ("iid", "dirichlet"):
        raise ConfigError(f"Unknown data.sharding: {data.sharding}")
    if data.dirichlet_alpha <= 0:
        raise ConfigError("data.dirichlet_alpha must be > 0")

    s = tree["system"]
    system = SystemSection(
        bytes_per_element=_number(s["bytes_per_element"], "system.bytes_per_element", True),
        aggregation_latency=_number(s["aggregation_latency"], "system.aggregation_latency"),
        backward_factor=_number(s["backward_factor"], "system.backward_factor"),
        server_cpu_rate=_number(s["server_cpu_rate"], "system.server_cpu_rate"),
        server_slots=_number(s["server_slots"], "system.server_slots", True),
        channel_jitter=_number(s["channel_jitter"], "system.channel_jitter"),
        cpu_scale=_number(s["cpu_scale"], "system.cpu_scale"),
    )
    if system.bytes_per_element < 1 or system.server_cpu_rate <= 0 or system.cpu_scale <= 0:
        raise ConfigError(
            "system.bytes_per_element, system.server_cpu_rate and system.cpu_scale must be > 0"
        )
    if system.aggregation_latency < 0 or system.backward_factor < 0:
        raise ConfigError("system.aggregation_latency and system.backward_factor must be >= 0")
    if system.server_slots < 0:
        raise ConfigError(f"system.server_slots must be >= 0, got {system.server_slots}")
    if not 0.0 <= system.channel_jitter < 1.0:
        raise ConfigError(f"system.channel_jitter must lie in [0, 1), got {system.channel_jitter}")

    profiles = []
    for index, entry in enumerate(tree["profiles"]):
        path = f"profiles.{index}"
        profiles.append(
            UserProfile(
                user_id=index,
                cpu_rate=_number(entry["cpu_rate"], f"{path}.cpu_rate") * system.cpu_scale,
                data_quality=_number(entry["data_quality"], f"{path}.data_quality"),
                uplink_rate=_number(entry["uplink_rate"], f"{path}.uplink_rate"),
                d2d_rate=_number(entry["d2d_rate"], f"{path}.d2d_rate"),
                link_latency=_number(entry["link_latency"], f"{path}.link_latency"),
            ).validate()
        )
    if len(profiles) != data.num_users:
        raise ConfigError(
            f"data.num_users is {data.num_users} but profiles has {len(profiles)} entries"
        )

    protocols = tree["protocols"]
    if isinstance(protocols, str):
        protocols = [protocols]
    if not isinstance(protocols, list) or not protocols:
        raise ConfigError("protocols must be a non-empty list")
    for name in protocols:
        if name not in PROTOCOL_NAMES:
            expected = ", ".join(PROTOCOL_NAMES)
            raise ConfigError(f"Invalid protocol: {name} (expected one of {expected})")
    if len(set(protocols)) != len(protocols):
        raise ConfigError(f"protocols lists a name twice: {protocols}")

    t = tree["training"]
    training = TrainingSection(
        epochs=_number(t["epochs"], "training.epochs", True),
        lr=_number(t["lr"], "training.lr"),
        psl_local_init=_flag(t["psl_local_init"], "training.psl_local_init"),
    )
    if training.epochs < 0:
        raise ConfigError(f"training.epochs must be >= 0, got {training.epochs}")
    if training.lr <= 0:
        raise ConfigError(f"training.lr must be > 0, got {training.lr}")

    c = tree["crom"]
    crom = CromSettings(
        alpha=_number(c["alpha"], "crom.alpha"),
        beta=_number(c["beta"], "crom.beta"),
        gamma=_number(c["gamma"], "crom.gamma"),
        rematch_round=_number(c["rematch_round"], "crom.rematch_round", True),
        rematch_metric=str(c["rematch_metric"]),
        helper_budget=_number(c["helper_budget"], "crom.helper_budget"),
        ship_weights=_flag(c["ship_weights"], "crom.ship_weights"),
        d2d_timeout=_number(c["d2d_timeout"], "crom.d2d_timeout"),
        max_assist_streak=_number(c["max_assist_streak"], "crom.max_assist_streak", True),
        auxiliary_task=str(c["auxiliary_task"]),
    ).validate()

    o = tree["output"]
    output = OutputSection(
        dir=str(o["dir"]), metrics_file=str(o["metrics_file"]), trace_file=str(o["trace_file"])
    )

    return ExperimentConfig(
        seed=seed,
        arch=arch,
        data=data,
        profiles=tuple(profiles),
        system=system,
        protocols=tuple(protocols),
        training=training,
        crom=crom,
        output=output,
        defaulted=tuple(defaulted),
        source=source,
    )


class Config:
    def __init__(self, path=None, overrides=None):
        self.path = None
        self.tree: Dict[str, Any] = {}
        self.experiment: Optional[ExperimentConfig] = None
        if path:
            self.load(path, overrides)

    def load(self, path=None, overrides=None) -> ExperimentConfig:
        """Read the file, apply dotted-path overrides, fill defaults and validate"""
        path = path or self.path
        if not path:
            raise ConfigError("No config file given")
        raw = read_yaml(path)
        for dotted, value in (overrides or {}).items():
            set_path(raw, dotted, value)

        defaulted: List[str] = []
        profiles = _merge_profiles(raw.pop("profiles", None), defaulted)
        tree = _merge(raw, DEFAULTS, "", defaulted)
        tree["profiles"] = profiles

        self.experiment = build_experiment(tree, defaulted, source=path)
        self.path = path
        self.tree = tree
        return self.experiment

    def summary(self) -> str:
        if self.experiment is None:
            raise ConfigError("Config not loaded")
        return yaml.safe_dump(
            {
                "config": self.path,
                "users": len(self.experiment.profiles),
                "protocols": list(self.experiment.protocols),
                "defaulted": list(self.experiment.defaulted),
            },
            sort_keys=False,
        )


def validate_config(path: str, overrides=None) -> ExperimentConfig:
    return Config().load(path, overrides)


def scalar_axis(tree: Dict[str, Any], axis: str) -> Any:
    value = get_path(tree, axis)
    if isinstance(value, (dict, list)):
        raise ConfigError(f"Sweep axis {axis} is not a scalar field")
    return value


config = Config()
