# app/services/nn.py
import logging
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Union

import numpy as np

from app.errors import DataError, NonFiniteError, ShapeError
from app.services import autodiff as ad
from app.services.autodiff import Node

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"MODACKPT"
CHECKPOINT_VERSION = 1

ACTIVATIONS = ("relu", "identity")


class DenseLayer:
    """Fully-connected layer; weight is stored out x in."""

    def __init__(self, in_dim: int, out_dim: int, activation: str, rng: np.random.Generator, name: str):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        limit = np.sqrt(6.0 / (in_dim + out_dim))
        self.weight = ad.parameter(rng.uniform(-limit, limit, size=(out_dim, in_dim)), name=f"{name}.weight")
        self.bias = ad.parameter(np.zeros(out_dim), name=f"{name}.bias")
        self.activation = activation

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    def parameters(self) -> List[Node]:
        return [self.weight, self.bias]

    def __call__(self, x: Node) -> Node:
        if x.value.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeError(f"{self.weight.name}: expected batch x {self.in_dim} input, got {x.shape}")
        out = ad.matmul(x, ad.transpose(self.weight)) + self.bias
        return ad.relu(out) if self.activation == "relu" else out


class Mlp:
    """
    Stack of dense layers with optional dropout sites.

    Site k is the input of layer k; the final site is the network output, so
    there are len(layers) + 1 sites. Site probabilities default to 0.
    """

    def __init__(self, layers: Sequence[DenseLayer], dropout_sites: Optional[Sequence[float]] = None,
                 name: str = "mlp"):
        for previous, current in zip(layers, layers[1:]):
            if previous.out_dim != current.in_dim:
                raise ShapeError(f"{name}: layer widths do not chain ({previous.out_dim} -> {current.in_dim})")
        self.layers = list(layers)
        self.name = name
        sites = list(dropout_sites) if dropout_sites is not None else [0.0] * (len(self.layers) + 1)
        if len(sites) != len(self.layers) + 1:
            raise ShapeError(f"{name}: expected {len(self.layers) + 1} dropout sites, got {len(sites)}")
        self.dropout_sites = tuple(float(p) for p in sites)

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def num_sites(self) -> int:
        return len(self.dropout_sites)

    def parameters(self) -> List[Node]:
        return [p for layer in self.layers for p in layer.parameters()]


def build_mlp(widths: Sequence[int], rng: np.random.Generator, name: str,
              final_activation: str = "identity") -> Mlp:
    """Build an MLP from [in, hidden..., out]; hidden layers use relu."""
    if len(widths) < 2:
        raise ShapeError(f"{name}: need at least input and output widths, got {list(widths)}")
    layers = []
    for index, (fan_in, fan_out) in enumerate(zip(widths, widths[1:])):
        last = index == len(widths) - 2
        layers.append(DenseLayer(fan_in, fan_out, final_activation if last else "relu", rng,
                                 name=f"{name}.{index}"))
    return Mlp(layers, name=name)


def _apply_dropout(x: Node, rate: float, rng: Optional[np.random.Generator]) -> Node:
    if rate <= 0.0:
        return x
    if rng is None:
        raise ValueError("dropout requested without a random generator")
    keep = (rng.random(x.shape) >= rate).astype(np.float64)
    return ad.dropout_mask_apply(x, keep, rate)


def mlp_forward(net: Mlp, x: Union[Node, np.ndarray], rng: Optional[np.random.Generator] = None,
                dropout_rates: Optional[Sequence[float]] = None) -> Node:
    """
    Forward pass through ``net``.

    Args:
        net: network to evaluate
        x: batch x input_dim input
        rng: generator for dropout masks (only needed when a site rate is > 0)
        dropout_rates: per-site rates replacing ``net.dropout_sites`` for this pass

    Returns:
        Node: output activations (raw logits when the last layer is identity)
    """
    node = x if isinstance(x, Node) else ad.constant(x)
    if node.value.ndim != 2 or node.shape[1] != net.in_dim:
        raise ShapeError(f"{net.name}: expected batch x {net.in_dim} input, got {node.shape}")
    rates = net.dropout_sites if dropout_rates is None else tuple(dropout_rates)
    if len(rates) != net.num_sites:
        raise ShapeError(f"{net.name}: expected {net.num_sites} dropout rates, got {len(rates)}")
    for layer, rate in zip(net.layers, rates):
        node = layer(_apply_dropout(node, rate, rng))
    return _apply_dropout(node, rates[-1], rng)


class ParameterStore:
    """Named parameters in registration order."""

    def __init__(self):
        self._params: "OrderedDict[str, Node]" = OrderedDict()

    def register(self, params: Iterable[Node]) -> None:
        for param in params:
            if param.name in self._params:
                raise ValueError(f"parameter {param.name} registered twice")
            self._params[param.name] = param

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def __getitem__(self, name: str) -> Node:
        return self._params[name]

    def names(self) -> List[str]:
        return list(self._params)

    def count(self) -> int:
        return int(sum(p.size for p in self._params.values()))

    def snapshot(self) -> Dict[str, np.ndarray]:
        return {name: p.value.copy() for name, p in self._params.items()}

    def restore(self, snapshot: Dict[str, np.ndarray]) -> None:
        for name, value in snapshot.items():
            self._params[name].assign(value)

    def zero_grad(self) -> None:
        for param in self._params.values():
            param.zero_grad()


class OptimizerState:
    """SGD or AdaDelta state; AdaDelta keeps running averages of g^2 and update^2 per parameter."""

    def __init__(self, kind: str = "adadelta", learning_rate: float = 1.0, rho: float = 0.9, eps: float = 1e-6):
        if kind not in ("sgd", "adadelta"):
            raise ValueError(f"unknown optimizer {kind!r}")
        self.kind = kind
        self.learning_rate = float(learning_rate)
        self.rho = float(rho)
        self.eps = float(eps)
        self.square_avg: Dict[str, np.ndarray] = {}
        self.acc_delta: Dict[str, np.ndarray] = {}

    def snapshot(self) -> Dict[str, Dict[str, np.ndarray]]:
        return {
            "square_avg": {k: v.copy() for k, v in self.square_avg.items()},
            "acc_delta": {k: v.copy() for k, v in self.acc_delta.items()},
        }

    def restore(self, snapshot: Dict[str, Dict[str, np.ndarray]]) -> None:
        self.square_avg = {k: v.copy() for k, v in snapshot["square_avg"].items()}
        self.acc_delta = {k: v.copy() for k, v in snapshot["acc_delta"].items()}


def optimizer_step(state: OptimizerState, params: Iterable[Node]) -> None:
    """Apply one update from the populated gradients, then zero them."""
    params = list(params)
    for param in params:
        if not np.all(np.isfinite(param.grad)):
            raise NonFiniteError(param.name or "unnamed parameter",
                                 f"non-finite gradient for parameter {param.name}; step aborted")

    for param in params:
        grad = param.grad
        if state.kind == "sgd":
            param.assign(param.value - state.learning_rate * grad)
        else:
            key = param.name
            square_avg = state.square_avg.get(key, np.zeros_like(grad))
            acc_delta = state.acc_delta.get(key, np.zeros_like(grad))
            square_avg = state.rho * square_avg + (1.0 - state.rho) * grad * grad
            delta = np.sqrt(acc_delta + state.eps) / np.sqrt(square_avg + state.eps) * grad
            param.assign(param.value - state.learning_rate * delta)
            state.square_avg[key] = square_avg
            state.acc_delta[key] = state.rho * acc_delta + (1.0 - state.rho) * delta * delta
        param.zero_grad()


def save_checkpoint(store: ParameterStore, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(store)))
        for param in store:
            name = param.name.encode("utf-8")
            f.write(struct.pack("<I", len(name)))
            f.write(name)
            f.write(struct.pack("<I", param.value.ndim))
            f.write(struct.pack(f"<{param.value.ndim}I", *param.shape))
            f.write(np.ascontiguousarray(param.value, dtype="<f8").tobytes())
    logger.info(f"Saved {len(store)} parameters to {path}")
    return path


def load_checkpoint(path: Union[str, Path]) -> "OrderedDict[str, np.ndarray]":
    with open(path, "rb") as f:
        payload = f.read()
    if payload[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise DataError(f"{path} is not a parameter checkpoint")
    offset = len(CHECKPOINT_MAGIC)
    version, count = struct.unpack_from("<II", payload, offset)
    offset += 8
    if version != CHECKPOINT_VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    params: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", payload, offset)
        offset += 4
        name = payload[offset:offset + name_len].decode("utf-8")
        offset += name_len
        (ndim,) = struct.unpack_from("<I", payload, offset)
        offset += 4
        shape = struct.unpack_from(f"<{ndim}I", payload, offset)
        offset += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        params[name] = np.frombuffer(payload, dtype="<f8", count=size, offset=offset).reshape(shape).copy()
        offset += 8 * size
    return params


def load_into(store: ParameterStore, path: Union[str, Path]) -> None:
    values = load_checkpoint(path)
    missing = [name for name in store.names() if name not in values]
    if missing:
        raise DataError(f"checkpoint {path} lacks parameters: {missing}")
    store.restore({name: values[name] for name in store.names()})
