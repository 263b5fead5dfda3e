"""Split Wide&Deep network written directly against numpy.

Layer 1 is the encoder (wide linear branch plus two embedding tables, concatenated).
Layers 2..n are dense layers. A parameter set may hold any contiguous run of layers,
which is how the client side (1..s), the server side (s+1..n) and relayed segments
(p+1..s) are represented.
"""

import math
from dataclasses import dataclass, field, fields, replace
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from src.errors import ConfigError, ContractError, DimensionError, NumericError

RELU = "relu"
IDENTITY = "identity"


@dataclass(frozen=True)
class ArchSpec:
    num_numeric_features: int = 6
    vocab1: int = 3
    vocab2: int = 4
    embed_dim1: int = 4
    embed_dim2: int = 4
    wide_out_dim: int = 4
    client_hidden: Tuple[int, ...] = (32, 32, 32)
    server_hidden: Tuple[int, ...] = (16,)
    output_dim: int = 1
    split_layer_index: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "client_hidden", tuple(self.client_hidden))
        object.__setattr__(self, "server_hidden", tuple(self.server_hidden))
        if self.split_layer_index is None:
            object.__setattr__(self, "split_layer_index", 1 + len(self.client_hidden))

    @property
    def encoder_width(self) -> int:
        return self.wide_out_dim + self.embed_dim1 + self.embed_dim2

    @property
    def dense_widths(self) -> Tuple[int, ...]:
        return self.client_hidden + self.server_hidden + (self.output_dim,)

    @property
    def total_layers(self) -> int:
        return 1 + len(self.dense_widths)

    def layer_shape(self, layer_index: int) -> Tuple[int, int]:
        """(input width, output width) of a layer; the encoder reports numeric inputs"""
        if not 1 <= layer_index <= self.total_layers:
            raise ContractError(
                f"Layer index {layer_index} outside 1..{self.total_layers}"
            )
        if layer_index == 1:
            return self.num_numeric_features, self.encoder_width
        widths = (self.encoder_width,) + self.dense_widths
        return widths[layer_index - 2], widths[layer_index - 1]

    def output_width(self, layer_index: int) -> int:
        return self.layer_shape(layer_index)[1]

    def validate(self) -> "ArchSpec":
        named = {
            "num_numeric_features": self.num_numeric_features,
            "vocab1": self.vocab1,
            "vocab2": self.vocab2,
            "embed_dim1": self.embed_dim1,
            "embed_dim2": self.embed_dim2,
            "wide_out_dim": self.wide_out_dim,
            "output_dim": self.output_dim,
        }
        for name, value in named.items():
            if int(value) < 1:
                raise ConfigError(f"arch.{name} must be >= 1, got {value}")
        stacks = (("client_hidden", self.client_hidden), ("server_hidden", self.server_hidden))
        for name, widths in stacks:
            for width in widths:
                if int(width) < 1:
                    raise ConfigError(f"arch.{name} widths must be >= 1, got {list(widths)}")
        if not 1 <= self.split_layer_index < self.total_layers:
            raise ConfigError(
                f"arch.split_layer_index must lie in [1, {self.total_layers - 1}], "
                f"got {self.split_layer_index}"
            )
        return self


@dataclass(frozen=True)
class EncoderLayer:
    wide_weights: np.ndarray
    wide_bias: np.ndarray
    embed_table1: np.ndarray
    embed_table2: np.ndarray

    @property
    def output_width(self) -> int:
        return self.wide_weights.shape[1] + self.embed_table1.shape[1] + self.embed_table2.shape[1]


@dataclass(frozen=True)
class DenseLayer:
    weights: np.ndarray
    bias: np.ndarray
    activation: str = RELU

    @property
    def output_width(self) -> int:
        return self.weights.shape[1]


Layer = Union[EncoderLayer, DenseLayer]


def layer_tensors(layer: Layer) -> Dict[str, np.ndarray]:
    return {f.name: getattr(layer, f.name) for f in fields(layer) if f.name != "activation"}


def map_layer(layer: Layer, fn, *others: Layer) -> Layer:
    """Apply fn tensor-wise across congruent layers, keeping the first layer's activation"""
    updated = {}
    for name, tensor in layer_tensors(layer).items():
        peers = []
        for other in others:
            peer = getattr(other, name)
            if peer.shape != tensor.shape:
                raise ContractError(f"Tensor {name} shape {peer.shape} != {tensor.shape}")
            peers.append(peer)
        updated[name] = fn(tensor, *peers)
    return replace(layer, **updated)


@dataclass(frozen=True)
class SplitModelParams:
    layers: Tuple[Layer, ...]
    first_layer: int = 1

    @property
    def last_layer(self) -> int:
        return self.first_layer + len(self.layers) - 1

    @property
    def encoder(self) -> Optional[EncoderLayer]:
        return self.layers[0] if self.first_layer == 1 else None

    @property
    def dense_layers(self) -> Tuple[DenseLayer, ...]:
        return self.layers[1:] if self.first_layer == 1 else self.layers

    def layer(self, index: int) -> Layer:
        if not self.first_layer <= index <= self.last_layer:
            raise ContractError(
                f"Layer {index} not held by parameter set {self.first_layer}..{self.last_layer}"
            )
        return self.layers[index - self.first_layer]

    def slice(self, from_layer: int, to_layer: int) -> "SplitModelParams":
        self.layer(from_layer)
        self.layer(to_layer)
        start = from_layer - self.first_layer
        return SplitModelParams(self.layers[start : start + to_layer - from_layer + 1], from_layer)

    def num_parameters(self) -> int:
        return sum(t.size for layer in self.layers for t in layer_tensors(layer).values())

    def flatten(self) -> np.ndarray:
        return flatten_layers(self.layers)


def flatten_layers(layers: Sequence[Layer]) -> np.ndarray:
    parts = [t.ravel() for layer in layers for t in layer_tensors(layer).values()]
    return np.concatenate(parts) if parts else np.zeros(0)


@dataclass(frozen=True)
class RawBatch:
    numeric: np.ndarray
    cat1: np.ndarray
    cat2: np.ndarray

    @property
    def size(self) -> int:
        return self.numeric.shape[0]


@dataclass(frozen=True)
class Activation:
    values: np.ndarray
    produced_after_layer: int


@dataclass(frozen=True)
class GradientBundle:
    layer_grads: Tuple[Layer, ...]
    first_layer: int
    input_gradient: Optional[np.ndarray] = None

    @property
    def last_layer(self) -> int:
        return self.first_layer + len(self.layer_grads) - 1

    def flatten(self) -> np.ndarray:
        return flatten_layers(self.layer_grads)


@dataclass
class ForwardCache:
    from_layer: int
    to_layer: int
    layer_inputs: List[Union[RawBatch, np.ndarray]] = field(default_factory=list)
    pre_activations: List[Optional[np.ndarray]] = field(default_factory=list)


def init_params(arch: ArchSpec, seed: int) -> SplitModelParams:
    """Glorot-uniform weights, zero biases, embeddings uniform in [-0.05, 0.05]"""
    arch.validate()
    rng = np.random.default_rng(seed)

    def glorot(fan_in, fan_out):
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-bound, bound, size=(fan_in, fan_out))

    encoder = EncoderLayer(
        wide_weights=glorot(arch.num_numeric_features, arch.wide_out_dim),
        wide_bias=np.zeros(arch.wide_out_dim),
        embed_table1=rng.uniform(-0.05, 0.05, size=(arch.vocab1, arch.embed_dim1)),
        embed_table2=rng.uniform(-0.05, 0.05, size=(arch.vocab2, arch.embed_dim2)),
    )
    layers: List[Layer] = [encoder]
    for index in range(2, arch.total_layers + 1):
        fan_in, fan_out = arch.layer_shape(index)
        activation = IDENTITY if index == arch.total_layers else RELU
        layers.append(DenseLayer(glorot(fan_in, fan_out), np.zeros(fan_out), activation))
    return SplitModelParams(tuple(layers))


def _check_finite(values: np.ndarray, what: str):
    if not np.all(np.isfinite(values)):
        raise NumericError(f"Non-finite values in {what}")


def _encoder_forward(layer: EncoderLayer, batch: RawBatch) -> np.ndarray:
    numeric = np.asarray(batch.numeric, dtype=np.float64)
    if numeric.ndim != 2 or numeric.shape[1] != layer.wide_weights.shape[0]:
        raise DimensionError(
            f"Encoder expects numeric input of width {layer.wide_weights.shape[0]}, "
            f"got shape {numeric.shape}"
        )
    if len(batch.cat1) != numeric.shape[0] or len(batch.cat2) != numeric.shape[0]:
        raise DimensionError("Categorical columns and numeric rows differ in length")
    for name, codes, table in (
        ("cat1", batch.cat1, layer.embed_table1),
        ("cat2", batch.cat2, layer.embed_table2),
    ):
        if len(codes) and (np.min(codes) < 0 or np.max(codes) >= table.shape[0]):
            raise DimensionError(f"{name} index outside vocabulary of size {table.shape[0]}")
    _check_finite(numeric, "encoder input")
    wide = numeric @ layer.wide_weights + layer.wide_bias
    return np.concatenate(
        [wide, layer.embed_table1[batch.cat1], layer.embed_table2[batch.cat2]], axis=1
    )


def forward_with_cache(
    params: SplitModelParams,
    from_layer: int,
    to_layer: int,
    inputs: Union[Activation, RawBatch],
) -> Tuple[Activation, ForwardCache]:
    if from_layer > to_layer:
        raise ContractError(f"Empty layer range {from_layer}..{to_layer}")
    params.layer(from_layer)
    params.layer(to_layer)

    cache = ForwardCache(from_layer, to_layer)
    if from_layer == 1:
        if not isinstance(inputs, RawBatch):
            raise ContractError("A range starting at layer 1 needs a raw feature batch")
        x = inputs
    else:
        if not isinstance(inputs, Activation):
            raise ContractError(f"A range starting at layer {from_layer} needs an activation")
        if inputs.produced_after_layer != from_layer - 1:
            raise ContractError(
                f"Activation produced after layer {inputs.produced_after_layer} "
                f"cannot feed layer {from_layer}"
            )
        x = np.asarray(inputs.values, dtype=np.float64)
        _check_finite(x, f"input to layer {from_layer}")

    for index in range(from_layer, to_layer + 1):
        layer = params.layer(index)
        cache.layer_inputs.append(x)
        if isinstance(layer, EncoderLayer):
            x = _encoder_forward(layer, x)
            cache.pre_activations.append(None)
            continue
        if x.ndim != 2 or x.shape[1] != layer.weights.shape[0]:
            raise DimensionError(
                f"Layer {index} expects width {layer.weights.shape[0]}, got shape {x.shape}"
            )
        z = x @ layer.weights + layer.bias
        cache.pre_activations.append(z)
        x = np.maximum(z, 0.0) if layer.activation == RELU else z

    return Activation(x, to_layer), cache


def forward_range(params, from_layer, to_layer, inputs) -> Activation:
    return forward_with_cache(params, from_layer, to_layer, inputs)[0]


def backward_range(
    params: SplitModelParams,
    from_layer: int,
    to_layer: int,
    cache: ForwardCache,
    upstream_grad: np.ndarray,
) -> GradientBundle:
    if (cache.from_layer, cache.to_layer) != (from_layer, to_layer):
        raise ContractError(
            f"Cache covers {cache.from_layer}..{cache.to_layer}, "
            f"backward asked for {from_layer}..{to_layer}"
        )
    grad = np.asarray(upstream_grad, dtype=np.float64)
    expected = params.layer(to_layer).output_width
    if grad.ndim != 2 or grad.shape[1] != expected:
        raise DimensionError(f"Upstream gradient shape {grad.shape}, layer width {expected}")
    _check_finite(grad, "upstream gradient")

    grads: List[Layer] = []
    for index in range(to_layer, from_layer - 1, -1):
        layer = params.layer(index)
        x = cache.layer_inputs[index - from_layer]
        if isinstance(layer, EncoderLayer):
            wide_dim = layer.wide_weights.shape[1]
            dim1 = layer.embed_table1.shape[1]
            g_wide = grad[:, :wide_dim]
            d_table1 = np.zeros_like(layer.embed_table1)
            d_table2 = np.zeros_like(layer.embed_table2)
            np.add.at(d_table1, x.cat1, grad[:, wide_dim : wide_dim + dim1])
            np.add.at(d_table2, x.cat2, grad[:, wide_dim + dim1 :])
            grads.append(
                EncoderLayer(
                    wide_weights=np.asarray(x.numeric, dtype=np.float64).T @ g_wide,
                    wide_bias=g_wide.sum(axis=0),
                    embed_table1=d_table1,
                    embed_table2=d_table2,
                )
            )
            grad = g_wide @ layer.wide_weights.T
            continue
        z = cache.pre_activations[index - from_layer]
        dz = grad * (z > 0) if layer.activation == RELU else grad
        grads.append(DenseLayer(x.T @ dz, dz.sum(axis=0), layer.activation))
        grad = dz @ layer.weights.T

    grads.reverse()
    return GradientBundle(tuple(grads), from_layer, grad)


def mse_loss_and_grad(pred: np.ndarray, target: np.ndarray) -> Tuple[float, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise DimensionError(f"Prediction shape {pred.shape} != target shape {target.shape}")
    if pred.size == 0:
        raise DimensionError("Loss needs at least one sample")
    residual = pred - target
    return float(np.mean(residual**2)), 2.0 * residual / residual.size


def mae(pred: np.ndarray, target: np.ndarray) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise DimensionError(f"Prediction shape {pred.shape} != target shape {target.shape}")
    return float(np.mean(np.abs(pred - target)))


def sgd_step(params: SplitModelParams, grads: GradientBundle, lr: float) -> SplitModelParams:
    """p <- p - lr * g for every layer the bundle covers; other layers are kept as-is"""
    if lr <= 0:
        raise ConfigError(f"Learning rate must be > 0, got {lr}")
    if grads.first_layer < params.first_layer or grads.last_layer > params.last_layer:
        raise ContractError(
            f"Gradients for {grads.first_layer}..{grads.last_layer} do not fit parameters "
            f"{params.first_layer}..{params.last_layer}"
        )
    layers = list(params.layers)
    for offset, layer_grad in enumerate(grads.layer_grads):
        position = grads.first_layer + offset - params.first_layer
        if type(layer_grad) is not type(layers[position]):
            raise ContractError(f"Gradient type mismatch at layer {grads.first_layer + offset}")
        layers[position] = map_layer(layers[position], lambda p, g: p - lr * g, layer_grad)
    return SplitModelParams(tuple(layers), params.first_layer)


def zero_grads(params: SplitModelParams) -> GradientBundle:
    return GradientBundle(
        tuple(map_layer(layer, np.zeros_like) for layer in params.layers), params.first_layer
    )


def add_grads(total: GradientBundle, part: GradientBundle) -> GradientBundle:
    """Add a bundle covering a sub-range into an accumulator covering a wider range"""
    if part.first_layer < total.first_layer or part.last_layer > total.last_layer:
        raise ContractError("Partial gradient falls outside the accumulator range")
    layers = list(total.layer_grads)
    for offset, layer_grad in enumerate(part.layer_grads):
        position = part.first_layer + offset - total.first_layer
        layers[position] = map_layer(layers[position], np.add, layer_grad)
    return GradientBundle(tuple(layers), total.first_layer, total.input_gradient)


def average_grads(bundles: Sequence[GradientBundle], weights: Sequence[float]) -> GradientBundle:
    if not bundles:
        raise ContractError("Nothing to average")
    total = float(sum(weights))
    if total <= 0:
        raise ConfigError("Gradient weights must sum to a positive value")
    first = bundles[0]
    layers = []
    for position, layer in enumerate(first.layer_grads):
        peers = [bundle.layer_grads[position] for bundle in bundles[1:]]
        layers.append(
            map_layer(
                layer,
                lambda *ts: np.average(np.stack(ts), axis=0, weights=weights),
                *peers,
            )
        )
    return GradientBundle(tuple(layers), first.first_layer)
