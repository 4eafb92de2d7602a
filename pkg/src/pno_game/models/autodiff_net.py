"""
Small fully connected networks with exact reverse-mode gradients.

All parameters of one network live in a single flat float64 vector. The layout
is stable and documented (see README, "Parameter layout"): layer by layer from
the input side,

    W_l  (fan_out x fan_in, row-major), b_l (fan_out), s_l (one slope scalar)

where the slope s_l only exists for hidden layers of an adaptive activation.
The output layer is affine. Torch (float64, CPU) is the differentiation engine;
the public functions below take and return numpy arrays so that checkpoints and
optimizer state stay plain vectors.
"""
import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F

from ..exceptions import DimensionMismatchError, InvalidShapeError, NonFiniteGradientError

logger = logging.getLogger(__name__)

DTYPE = torch.float64

#: Lower bound enforced on adaptive slopes after every optimizer update.
SLOPE_FLOOR = 1e-3


class Activation(str, Enum):
    TANH = "tanh"
    SINE = "sine"
    RELU = "relu"


@dataclass(frozen=True)
class ActivationKind:
    """Activation family plus the adaptive-slope switch.

    With ``adaptive`` the hidden layer ``l`` computes ``sigma(s_l * z)`` with a
    trainable scalar ``s_l`` (initialized to 1). Sine layers compute
    ``sin(omega0 * z)``.
    """

    kind: Activation = Activation.TANH
    adaptive: bool = False
    omega0: float = 30.0

    def __post_init__(self):
        object.__setattr__(self, "kind", Activation(self.kind))

    def apply(self, z: torch.Tensor, slope: Optional[torch.Tensor] = None) -> torch.Tensor:
        if slope is not None:
            z = slope * z
        if self.kind is Activation.TANH:
            return torch.tanh(z)
        if self.kind is Activation.SINE:
            return torch.sin(self.omega0 * z)
        return torch.relu(z)


@dataclass(frozen=True)
class NetworkShape:
    input_dim: int
    hidden_widths: Tuple[int, ...] = (64, 64, 64)
    output_dim: int = 1

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))

    def validate(self) -> None:
        dims = [self.input_dim, *self.hidden_widths, self.output_dim]
        if any(int(d) <= 0 for d in dims):
            raise InvalidShapeError(f"All network dimensions must be positive, got {dims}")

    @property
    def layer_dims(self) -> List[Tuple[int, int]]:
        """(fan_in, fan_out) per affine layer."""
        dims = [self.input_dim, *self.hidden_widths, self.output_dim]
        return list(zip(dims[:-1], dims[1:]))

    def parameter_count(self, adaptive: bool = False) -> int:
        count = sum(fan_in * fan_out + fan_out for fan_in, fan_out in self.layer_dims)
        if adaptive:
            count += len(self.hidden_widths)
        return count


class LayerSlices(NamedTuple):
    weight: slice
    bias: slice
    slope: Optional[int]
    fan_in: int
    fan_out: int


def compute_layout(shape: NetworkShape, adaptive: bool) -> Tuple[LayerSlices, ...]:
    """Offsets of every block inside the flat parameter vector."""
    layout = []
    offset = 0
    n_layers = len(shape.layer_dims)
    for idx, (fan_in, fan_out) in enumerate(shape.layer_dims):
        weight = slice(offset, offset + fan_in * fan_out)
        offset = weight.stop
        bias = slice(offset, offset + fan_out)
        offset = bias.stop
        slope = None
        if adaptive and idx < n_layers - 1:
            slope = offset
            offset += 1
        layout.append(LayerSlices(weight, bias, slope, fan_in, fan_out))
    return tuple(layout)


@dataclass(frozen=True, eq=False)
class ParameterSet:
    """Flat parameter vector of one network together with its architecture."""

    values: np.ndarray
    shape: NetworkShape
    activation: ActivationKind = field(default_factory=ActivationKind)

    def __post_init__(self):
        values = np.ascontiguousarray(self.values, dtype=np.float64)
        expected = self.shape.parameter_count(self.activation.adaptive)
        if values.ndim != 1 or values.size != expected:
            raise DimensionMismatchError(
                f"Parameter vector has {values.size} entries, layout needs {expected}"
            )
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return self.values.size

    @property
    def layout(self) -> Tuple[LayerSlices, ...]:
        return compute_layout(self.shape, self.activation.adaptive)

    def unflatten(self) -> List[Tuple[np.ndarray, np.ndarray, Optional[float]]]:
        """Per layer (weight matrix, bias vector, slope or None)."""
        blocks = []
        for layer in self.layout:
            weight = self.values[layer.weight].reshape(layer.fan_out, layer.fan_in).copy()
            bias = self.values[layer.bias].copy()
            slope = float(self.values[layer.slope]) if layer.slope is not None else None
            blocks.append((weight, bias, slope))
        return blocks

    @classmethod
    def from_blocks(
        cls,
        blocks: Sequence[Tuple[np.ndarray, np.ndarray, Optional[float]]],
        shape: NetworkShape,
        activation: ActivationKind = ActivationKind(),
    ) -> "ParameterSet":
        values = np.zeros(shape.parameter_count(activation.adaptive))
        layout = compute_layout(shape, activation.adaptive)
        if len(blocks) != len(layout):
            raise DimensionMismatchError(f"Expected {len(layout)} layer blocks, got {len(blocks)}")
        for layer, (weight, bias, slope) in zip(layout, blocks):
            values[layer.weight] = np.asarray(weight, dtype=np.float64).reshape(-1)
            values[layer.bias] = np.asarray(bias, dtype=np.float64).reshape(-1)
            if layer.slope is not None:
                values[layer.slope] = 1.0 if slope is None else slope
        return cls(values, shape, activation)

    def with_values(self, values: np.ndarray) -> "ParameterSet":
        return ParameterSet(np.array(values, dtype=np.float64), self.shape, self.activation)

    def slope_mask(self) -> np.ndarray:
        mask = np.zeros(self.values.size, dtype=bool)
        for layer in self.layout:
            if layer.slope is not None:
                mask[layer.slope] = True
        return mask


def apply_flat(
    flat: torch.Tensor, shape: NetworkShape, activation: ActivationKind, x: torch.Tensor
) -> torch.Tensor:
    """Evaluate the layer recursion on a batch ``x`` of shape (B, input_dim).

    ``flat`` may require grad and ``x`` may be part of a graph; this is the
    differentiable core every other evaluation goes through.
    """
    layout = compute_layout(shape, activation.adaptive)
    h = x
    last = len(layout) - 1
    for idx, layer in enumerate(layout):
        weight = flat[layer.weight].view(layer.fan_out, layer.fan_in)
        h = F.linear(h, weight, flat[layer.bias])
        if idx < last:
            slope = flat[layer.slope] if layer.slope is not None else None
            h = activation.apply(h, slope)
    return h


def _init_bound(activation: ActivationKind, layer_index: int, fan_in: int, fan_out: int) -> float:
    if activation.kind is Activation.SINE:
        if layer_index == 0:
            return 1.0 / fan_in
        return np.sqrt(6.0 / fan_in) / activation.omega0
    return np.sqrt(6.0 / (fan_in + fan_out))


def init_network(shape: NetworkShape, activation: ActivationKind, seed: int) -> ParameterSet:
    """Scaled-uniform weights, zero biases, unit slopes; deterministic in ``seed``.

    tanh/relu: U(+-sqrt(6/(fan_in+fan_out))). sine: first layer U(+-1/fan_in),
    later layers U(+-sqrt(6/fan_in)/omega0).
    """
    shape.validate()
    rng = np.random.default_rng(seed)
    values = np.zeros(shape.parameter_count(activation.adaptive))
    for idx, layer in enumerate(compute_layout(shape, activation.adaptive)):
        bound = _init_bound(activation, idx, layer.fan_in, layer.fan_out)
        values[layer.weight] = rng.uniform(-bound, bound, size=layer.fan_in * layer.fan_out)
        if layer.slope is not None:
            values[layer.slope] = 1.0
    return ParameterSet(values, shape, activation)


def _as_batch(params: ParameterSet, x: np.ndarray) -> Tuple[torch.Tensor, bool]:
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 1
    batch = arr.reshape(1, -1) if single else arr
    if batch.ndim != 2 or batch.shape[1] != params.shape.input_dim:
        raise DimensionMismatchError(
            f"Input has trailing dimension {batch.shape[-1]}, network expects {params.shape.input_dim}"
        )
    return torch.from_numpy(batch), single


def forward(params: ParameterSet, x: np.ndarray) -> np.ndarray:
    """Network output for one input vector or a (B, input_dim) batch."""
    xt, single = _as_batch(params, x)
    with torch.no_grad():
        out = apply_flat(torch.from_numpy(params.values), params.shape, params.activation, xt)
    out = out.numpy()
    return out[0] if single else out


def input_gradient(params: ParameterSet, x: np.ndarray) -> np.ndarray:
    """Jacobian d forward / d input, shape (output_dim, input_dim)."""
    xt, single = _as_batch(params, x)
    if not single:
        raise DimensionMismatchError("input_gradient takes a single input vector")
    flat = torch.from_numpy(params.values)

    def fn(z: torch.Tensor) -> torch.Tensor:
        return apply_flat(flat, params.shape, params.activation, z.unsqueeze(0)).squeeze(0)

    jac = torch.autograd.functional.jacobian(fn, xt[0])
    return jac.detach().numpy().reshape(params.shape.output_dim, params.shape.input_dim)


def parameter_gradient(params: ParameterSet, x: np.ndarray, output_adjoint: np.ndarray) -> np.ndarray:
    """Gradient of <adjoint, forward(x)> with respect to every parameter.

    A batch of inputs takes a matching (B, output_dim) adjoint; contributions
    are summed.
    """
    xt, single = _as_batch(params, x)
    adjoint = np.asarray(output_adjoint, dtype=np.float64).reshape(xt.shape[0], -1)
    if adjoint.shape[1] != params.shape.output_dim:
        raise DimensionMismatchError(
            f"Adjoint has length {adjoint.shape[1]}, network output is {params.shape.output_dim}"
        )
    flat = torch.tensor(params.values, dtype=DTYPE, requires_grad=True)
    out = apply_flat(flat, params.shape, params.activation, xt)
    (grad,) = torch.autograd.grad((out * torch.from_numpy(adjoint)).sum(), flat, allow_unused=True)
    if grad is None:
        return np.zeros_like(params.values)
    return grad.numpy().copy()


@dataclass(frozen=True, eq=False)
class OptimizerState:
    """Adam moments; ``step_count`` grows by one per update."""

    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, size: int, learning_rate: float = 1e-3, **kwargs) -> "OptimizerState":
        return cls(np.zeros(size), np.zeros(size), 0, learning_rate, **kwargs)

    def with_learning_rate(self, learning_rate: float) -> "OptimizerState":
        return replace(self, learning_rate=float(learning_rate))


ParamLike = Union[ParameterSet, np.ndarray]


def optimizer_step(
    params: ParamLike,
    grads: np.ndarray,
    state: OptimizerState,
    positive_mask: Optional[np.ndarray] = None,
) -> Tuple[ParamLike, OptimizerState]:
    """One bias-corrected Adam update.

    Entries flagged by ``positive_mask`` (adaptive slopes; taken from the
    ParameterSet layout when ``params`` is one) are floored at SLOPE_FLOOR.
    """
    values = params.values if isinstance(params, ParameterSet) else np.asarray(params, dtype=np.float64)
    if positive_mask is None and isinstance(params, ParameterSet):
        positive_mask = params.slope_mask()
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != values.shape:
        raise DimensionMismatchError(f"Gradient shape {grads.shape} does not match parameters {values.shape}")
    if not np.all(np.isfinite(grads)):
        bad = int(np.count_nonzero(~np.isfinite(grads)))
        raise NonFiniteGradientError(f"{bad} non-finite gradient entries rejected")

    step = state.step_count + 1
    m = state.beta1 * state.first_moment + (1.0 - state.beta1) * grads
    v = state.beta2 * state.second_moment + (1.0 - state.beta2) * grads * grads
    m_hat = m / (1.0 - state.beta1 ** step)
    v_hat = v / (1.0 - state.beta2 ** step)
    new_values = values - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)
    if positive_mask is not None and positive_mask.any():
        new_values[positive_mask] = np.maximum(new_values[positive_mask], SLOPE_FLOOR)

    new_state = replace(state, first_moment=m, second_moment=v, step_count=step)
    if isinstance(params, ParameterSet):
        return params.with_values(new_values), new_state
    return new_values, new_state
