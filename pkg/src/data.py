import csv
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from src.errors import ConfigError, DataError, SchemaError
from src.model_core import RawBatch


@dataclass(frozen=True)
class DatasetSchema:
    numeric: Tuple[str, ...] = ("num_0", "num_1", "num_2", "num_3", "num_4", "num_5")
    categorical: Tuple[str, str] = ("cat_0", "cat_1")
    target: str = "target"

    def __post_init__(self):
        object.__setattr__(self, "numeric", tuple(self.numeric))
        object.__setattr__(self, "categorical", tuple(self.categorical))
        if len(self.categorical) != 2:
            raise SchemaError(
                f"Schema needs exactly two categorical columns, got {list(self.categorical)}"
            )

    @property
    def columns(self) -> List[str]:
        return list(self.numeric) + list(self.categorical) + [self.target]

    @classmethod
    def for_width(cls, num_numeric: int) -> "DatasetSchema":
        return cls(numeric=tuple(f"num_{i}" for i in range(num_numeric)))


@dataclass(frozen=True)
class SyntheticSpec:
    num_numeric: int = 6
    vocab1: int = 3
    vocab2: int = 4
    noise_sigma: float = 0.1
    weight_scale: float = 1.0


@dataclass(frozen=True)
class Dataset:
    numeric: np.ndarray
    cat1: np.ndarray
    cat2: np.ndarray
    target: np.ndarray
    schema: DatasetSchema
    vocab1: int
    vocab2: int
    metadata: Dict = field(default_factory=dict, compare=False)

    @property
    def size(self) -> int:
        return self.numeric.shape[0]

    def subset(self, indices) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(
            numeric=self.numeric[indices],
            cat1=self.cat1[indices],
            cat2=self.cat2[indices],
            target=self.target[indices],
            schema=self.schema,
            vocab1=self.vocab1,
            vocab2=self.vocab2,
            metadata=self.metadata,
        )

    def features(self) -> RawBatch:
        return RawBatch(self.numeric, self.cat1, self.cat2)

    def targets(self) -> np.ndarray:
        return self.target.reshape(-1, 1)

    def category_labels(self, slot: int) -> List[str]:
        codes = self.cat1 if slot == 0 else self.cat2
        maps = self.metadata.get("category_maps")
        if not maps:
            return [str(code) for code in codes]
        return [maps[slot][code] for code in codes]


@dataclass(frozen=True)
class Shard:
    owner: int
    indices: np.ndarray
    data_quality: float = 1.0

    @property
    def size(self) -> int:
        return len(self.indices)


@dataclass(frozen=True)
class Batch:
    features: RawBatch
    target: np.ndarray

    @property
    def size(self) -> int:
        return self.features.size


def minibatches(
    dataset: Dataset, shard: Shard, batch_size: int, seed: int, epoch: int
) -> List[Batch]:
    """One pass over a shard, reshuffled per (seed, epoch, owner); the last batch may be short"""
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    rng = np.random.default_rng([seed, epoch, shard.owner])
    order = shard.indices[rng.permutation(shard.size)]
    batches = []
    for start in range(0, shard.size, batch_size):
        part = dataset.subset(order[start : start + batch_size])
        batches.append(Batch(part.features(), part.targets()))
    return batches


def standardize(numeric: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    mean = numeric.mean(axis=0)
    std = numeric.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    return (numeric - mean) / std, mean, std


def generate_synthetic(seed: int, n: int, spec: SyntheticSpec = SyntheticSpec()) -> Dataset:
    """target = numeric @ w + e1[cat1] + e2[cat2] + N(0, noise_sigma) on standardized numerics"""
    if n < 1:
        raise ConfigError(f"Synthetic dataset needs n >= 1, got {n}")
    if spec.num_numeric < 1 or spec.vocab1 < 1 or spec.vocab2 < 1:
        raise ConfigError("Synthetic spec widths and vocabularies must be >= 1")
    rng = np.random.default_rng(seed)
    w = spec.weight_scale * rng.uniform(-1.0, 1.0, size=spec.num_numeric)
    e1 = spec.weight_scale * rng.uniform(-1.0, 1.0, size=spec.vocab1)
    e2 = spec.weight_scale * rng.uniform(-1.0, 1.0, size=spec.vocab2)

    numeric, mean, std = standardize(rng.standard_normal((n, spec.num_numeric)))
    cat1 = rng.integers(0, spec.vocab1, size=n)
    cat2 = rng.integers(0, spec.vocab2, size=n)
    noise = spec.noise_sigma * rng.standard_normal(n)
    target = numeric @ w + e1[cat1] + e2[cat2] + noise

    schema = DatasetSchema.for_width(spec.num_numeric)
    return Dataset(
        numeric=numeric,
        cat1=cat1,
        cat2=cat2,
        target=target,
        schema=schema,
        vocab1=spec.vocab1,
        vocab2=spec.vocab2,
        metadata={
            "generator": {"w": w, "e1": e1, "e2": e2, "noise_sigma": spec.noise_sigma},
            "seed": seed,
            "category_maps": [
                [str(i) for i in range(spec.vocab1)],
                [str(i) for i in range(spec.vocab2)],
            ],
        },
    )


def write_csv(dataset: Dataset, path: str) -> None:
    """Numeric columns at full round-trip precision; categories written by their labels"""
    maps = dataset.metadata.get("category_maps") or [
        [str(i) for i in range(dataset.vocab1)],
        [str(i) for i in range(dataset.vocab2)],
    ]
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(dataset.schema.columns)
        for row in range(dataset.size):
            writer.writerow(
                [format(v, ".17g") for v in dataset.numeric[row]]
                + [maps[0][dataset.cat1[row]], maps[1][dataset.cat2[row]]]
                + [format(dataset.target[row], ".17g")]
            )


def load_csv(
    path: str, schema: DatasetSchema = DatasetSchema(), standardize_numeric=True
) -> Dataset:
    if not os.path.isfile(path):
        raise DataError(f"{path} does not exist")
    with open(path, "r", newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path} is empty")
        header = [name.strip() for name in header]
        missing = [name for name in schema.columns if name not in header]
        if missing:
            raise SchemaError(f"{path} is missing column(s): {', '.join(missing)}")
        positions = {name: header.index(name) for name in schema.columns}

        numeric_rows, target, codes = [], [], ([], [])
        category_maps: Tuple[Dict[str, int], Dict[str, int]] = ({}, {})
        for line_number, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            try:
                values = [float(row[positions[name]]) for name in schema.numeric]
                value = float(row[positions[schema.target]])
                labels = [row[positions[name]].strip() for name in schema.categorical]
            except (ValueError, IndexError) as e:
                raise DataError(f"{path}, line {line_number}: unparsable row ({e})") from None
            numeric_rows.append(values)
            target.append(value)
            for slot, label in enumerate(labels):
                # first-appearance order
                codes[slot].append(category_maps[slot].setdefault(label, len(category_maps[slot])))

    if not numeric_rows:
        raise DataError(f"{path} has a header but no data rows")

    numeric = np.array(numeric_rows, dtype=np.float64)
    metadata = {"category_maps": [list(m) for m in category_maps], "source": path}
    if standardize_numeric:
        numeric, mean, std = standardize(numeric)
        metadata["standardization"] = {"mean": mean, "std": std}
    return Dataset(
        numeric=numeric,
        cat1=np.array(codes[0], dtype=np.int64),
        cat2=np.array(codes[1], dtype=np.int64),
        target=np.array(target, dtype=np.float64),
        schema=schema,
        vocab1=len(category_maps[0]),
        vocab2=len(category_maps[1]),
        metadata=metadata,
    )


def partition(
    dataset: Dataset,
    num_users: int,
    per_user: int,
    seed: int,
    data_qualities: Optional[Sequence[float]] = None,
    scheme: str = "iid",
    dirichlet_alpha: float = 0.5,
) -> List[Shard]:
    if num_users < 1 or per_user < 1:
        raise ConfigError("num_users and per_user must be >= 1")
    if num_users * per_user > dataset.size:
        raise ConfigError(
            f"{num_users} users x {per_user} samples needs {num_users * per_user} rows, "
            f"dataset has {dataset.size}"
        )
    qualities = list(data_qualities) if data_qualities is not None else [1.0] * num_users
    if len(qualities) != num_users:
        raise ConfigError(f"Got {len(qualities)} data qualities for {num_users} users")

    rng = np.random.default_rng(seed)
    if scheme == "iid":
        order = rng.permutation(dataset.size)
        blocks = [order[u * per_user : (u + 1) * per_user] for u in range(num_users)]
    elif scheme == "dirichlet":
        blocks = _dirichlet_blocks(dataset, num_users, per_user, rng, dirichlet_alpha)
    else:
        raise ConfigError(f"Unknown sharding scheme: {scheme}")

    return [
        Shard(owner=u, indices=np.asarray(block, dtype=np.int64), data_quality=float(qualities[u]))
        for u, block in enumerate(blocks)
    ]


def _dirichlet_blocks(dataset, num_users, per_user, rng, alpha) -> List[np.ndarray]:
    """Each user draws a category mix over cat1; short pools spill into the next category"""
    if alpha <= 0:
        raise ConfigError(f"dirichlet_alpha must be > 0, got {alpha}")
    pools = [
        list(rng.permutation(np.flatnonzero(dataset.cat1 == c))) for c in range(dataset.vocab1)
    ]
    blocks = []
    for _ in range(num_users):
        counts = rng.multinomial(per_user, rng.dirichlet([alpha] * dataset.vocab1))
        block: List[int] = []
        for category, wanted in enumerate(counts):
            take = min(wanted, len(pools[category]))
            block.extend(pools[category][:take])
            del pools[category][:take]
        category = 0
        while len(block) < per_user:
            while not pools[category]:
                category += 1
            block.append(pools[category].pop(0))
        blocks.append(np.array(block, dtype=np.int64))
    return blocks


def holdout(dataset: Dataset, shards: Sequence[Shard]) -> Dataset:
    used = np.zeros(dataset.size, dtype=bool)
    for shard in shards:
        used[shard.indices] = True
    return dataset.subset(np.flatnonzero(~used))
