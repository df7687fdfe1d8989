"""Dense tensor numerics with tape-based reverse-mode autodiff.

Every op takes and returns :class:`Tensor`. While a :class:`Tape` is active
(``with Tape() as tape:``), ops whose inputs require gradients are recorded in
execution order; ``tape.backward(loss)`` replays them in reverse and
accumulates gradients into the leaves. Outside a tape nothing is recorded.

All layers accept leading batch axes; compute precision is float64.
"""

import logging
import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from termcast import config
from termcast.config import ADAM_BETA1, ADAM_BETA2, ADAM_EPS, LAYER_NORM_EPS, LEARNING_RATE, PE_BASE
from termcast.errors import ConfigError, ContractError, NumericsError, ShapeError

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, float, int, Sequence]
_state = threading.local()


# ============= Tensors and the Tape =============

class Tensor:
    __array_priority__ = 100

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"<Tensor{label} shape={self.shape}>"

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return mul(self, -1.0)
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, index): return getitem(self, index)

    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)
    def transpose(self, *axes): return transpose(self, axes or None)
    def sum(self, axis=None, keepdims=False): return tsum(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)


class Parameter(Tensor):
    """Leaf tensor with a gradient buffer of the same shape."""

    def __init__(self, data: ArrayLike, trainable: bool = True, name: Optional[str] = None):
        super().__init__(data, requires_grad=trainable, name=name)
        self.trainable = trainable
        self.grad = np.zeros_like(self.data)

    @property
    def gradient(self) -> np.ndarray:
        return self.grad

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)


@dataclass
class TapeNode:
    op: str
    output: Tensor
    inputs: Tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tape:
    """Records differentiable ops in execution order."""

    def __init__(self):
        self.nodes: List[TapeNode] = []

    def __enter__(self) -> "Tape":
        stack = getattr(_state, "tapes", None)
        if stack is None:
            stack = _state.tapes = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.tapes.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, node: TapeNode) -> None:
        self.nodes.append(node)

    def backward(self, loss: Tensor) -> None:
        backward(loss, self)


def active_tape() -> Optional[Tape]:
    stack = getattr(_state, "tapes", None)
    return stack[-1] if stack else None


def backward(loss: Tensor, tape: Tape) -> None:
    """
    Reverse-mode sweep from a scalar ``loss`` over ``tape``.

    Gradients accumulate into ``Parameter.grad``; other leaf tensors created
    with ``requires_grad=True`` receive (or accumulate into) ``.grad``.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: Dict[int, Tensor] = {}
    produced = {id(node.output) for node in tape.nodes}

    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for inp, ig in zip(node.inputs, node.backward(g)):
            if ig is None or not inp.requires_grad:
                continue
            key = id(inp)
            grads[key] = grads[key] + ig if key in grads else ig
            if key not in produced:
                leaves[key] = inp

    for key, leaf in leaves.items():
        g = grads[key]
        if leaf.grad is None:
            leaf.grad = np.array(g, dtype=np.float64)
        else:
            leaf.grad = leaf.grad + g


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    if config.CHECK_FINITE and not np.all(np.isfinite(data)):
        raise NumericsError(f"non-finite values produced by {op}")
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(TapeNode(op, out, tuple(inputs), backward_fn))
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ============= Elementwise and Structural Ops =============

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _record("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _record("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _record("mul", a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data / b.data
    return _record("div", out, (a, b),
                   lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _record("exp", out, (x,), lambda g: (g * out,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _record("sqrt", out, (x,), lambda g: (g * 0.5 / out,))


def maximum(x: Tensor, floor: float) -> Tensor:
    """Elementwise max with a constant; gradient passes where x exceeds it."""
    mask = x.data > floor
    return _record("maximum", np.where(mask, x.data, floor), (x,), lambda g: (g * mask,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _record("relu", x.data * mask, (x,), lambda g: (g * mask,))


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim == 1:
        return reshape(matmul(reshape(a, (1, a.shape[0])), b), b.shape[:-2] + (b.shape[-1],))
    if b.ndim == 1:
        return reshape(matmul(a, reshape(b, (b.shape[0], 1))), a.shape[:-1])
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shapes {a.shape} and {b.shape} do not align")

    def grad_fn(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record("matmul", a.data @ b.data, (a, b), grad_fn)


def reshape(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    return _record("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))
    return _record("transpose", x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),))


def getitem(x: Tensor, index) -> Tensor:
    def grad_fn(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _record("getitem", x.data[index], (x,), grad_fn)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _record("concat", np.concatenate([t.data for t in tensors], axis=axis), tensors,
                   lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    n = len(tensors)
    return _record("stack", np.stack([t.data for t in tensors], axis=axis), tensors,
                   lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record("sum", np.sum(x.data, axis=axis, keepdims=keepdims), (x,), grad_fn)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(tsum(x, axis, keepdims), 1.0 / count)


# ============= Layers =============

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted exp-normalize along ``axis``."""
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)
    return _record("softmax", out, (x,),
                   lambda g: (out * (g - np.sum(g * out, axis=axis, keepdims=True)),))


def layer_norm(x: Tensor, gain: Tensor, shift: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize over the last axis, then scale by ``gain`` and add ``shift``."""
    d = x.shape[-1]
    if gain.shape != (d,) or shift.shape != (d,):
        raise ShapeError(f"layer_norm gain/shift must have shape ({d},)")
    centered = x.data - x.data.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt((centered ** 2).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std
    lead = tuple(range(x.ndim - 1))

    def grad_fn(g):
        gxhat = g * gain.data
        gx = inv_std * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                        - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, np.sum(g * xhat, axis=lead), np.sum(g, axis=lead)

    return _record("layer_norm", xhat * gain.data + shift.data, (x, gain, shift), grad_fn)


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor) -> Tensor:
    """
    Same-padded cross-correlation.

    Args:
        x: Input [C_in, H, W] or [B, C_in, H, W]
        kernels: [C_out, C_in, k, k] with odd k (3 in TERMCast)
        bias: [C_out]

    Returns:
        Tensor [C_out, H, W] or [B, C_out, H, W]
    """
    if x.ndim == 3:
        return reshape(conv2d(reshape(x, (1,) + x.shape), kernels, bias), (kernels.shape[0],) + x.shape[1:])
    if x.ndim != 4 or kernels.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and kernels, got {x.shape} and {kernels.shape}")
    c_out, c_in, k, k2 = kernels.shape
    if x.shape[1] != c_in:
        raise ShapeError(f"conv2d channel mismatch: input has {x.shape[1]}, kernels expect {c_in}")
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d kernels must be square with odd size, got {k}x{k2}")
    if bias.shape != (c_out,):
        raise ShapeError(f"conv2d bias must have shape ({c_out},)")

    pad = k // 2
    _, _, height, width = x.shape
    padded = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    windows = sliding_window_view(padded, (k, k), axis=(2, 3))  # [B, C_in, H, W, k, k]
    out = np.tensordot(windows, kernels.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    out = out + bias.data[None, :, None, None]

    def grad_fn(g):
        gk = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))
        gwin = np.tensordot(g, kernels.data, axes=([1], [0]))  # [B, H, W, C_in, k, k]
        gpad = np.zeros_like(padded)
        for i in range(k):
            for j in range(k):
                gpad[:, :, i:i + height, j:j + width] += gwin[..., i, j].transpose(0, 3, 1, 2)
        gx = gpad[:, :, pad:pad + height, pad:pad + width]
        return gx, gk, g.sum(axis=(0, 2, 3))

    return _record("conv2d", out, (x, kernels, bias), grad_fn)


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``x @ weight.T + bias`` with weight [m, n] over the last axis."""
    m, n = weight.shape
    if x.shape[-1] != n:
        raise ShapeError(f"dense input width {x.shape[-1]} does not match weight {weight.shape}")
    if bias.shape != (m,):
        raise ShapeError(f"dense bias must have shape ({m},)")
    return add(matmul(x, transpose(weight)), bias)


@dataclass
class DenseParams:
    weight: Parameter
    bias: Parameter


def mlp(x: Tensor, layers: Sequence[DenseParams]) -> Tensor:
    """Chain dense layers with relu between them and none after the last."""
    for i, layer in enumerate(layers):
        x = dense(x, layer.weight, layer.bias)
        if i < len(layers) - 1:
            x = relu(x)
    return x


@dataclass
class AttentionParams:
    wq: DenseParams
    wk: DenseParams
    wv: DenseParams
    wo: DenseParams


def multi_head_self_attention(
    seq: Tensor, params: AttentionParams, heads: int, return_weights: bool = False
):
    """
    Bidirectional scaled dot-product self-attention.

    Args:
        seq: [L, d] or [B, L, d]
        params: Q/K/V/output projections
        heads: Head count; must divide d
        return_weights: Also return the [B, heads, L, L] attention weights

    Returns:
        Tensor shaped like ``seq`` (and the weights when requested)
    """
    d = seq.shape[-1]
    if heads < 1 or d % heads:
        raise ConfigError(f"model width {d} is not divisible by {heads} heads")
    squeeze = seq.ndim == 2
    x = reshape(seq, (1,) + seq.shape) if squeeze else seq
    batch, length, _ = x.shape
    dh = d // heads

    def split_heads(t: Tensor) -> Tensor:
        return transpose(reshape(t, (batch, length, heads, dh)), (0, 2, 1, 3))

    q = split_heads(dense(x, params.wq.weight, params.wq.bias))
    k = split_heads(dense(x, params.wk.weight, params.wk.bias))
    v = split_heads(dense(x, params.wv.weight, params.wv.bias))
    scores = mul(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    weights = softmax(scores, axis=-1)
    context = reshape(transpose(matmul(weights, v), (0, 2, 1, 3)), (batch, length, d))
    out = dense(context, params.wo.weight, params.wo.bias)
    if squeeze:
        out = reshape(out, seq.shape)
    return (out, weights) if return_weights else out


@dataclass
class TransformerBlockParams:
    norm1_gain: Parameter
    norm1_shift: Parameter
    attention: AttentionParams
    norm2_gain: Parameter
    norm2_shift: Parameter
    ff1: DenseParams
    ff2: DenseParams


def transformer_block(x: Tensor, params: TransformerBlockParams, heads: int) -> Tensor:
    """Pre-norm block: x + MHSA(LN(x)), then + FF(LN(.)) with a relu hidden layer."""
    h = add(x, multi_head_self_attention(layer_norm(x, params.norm1_gain, params.norm1_shift), params.attention, heads))
    ff = mlp(layer_norm(h, params.norm2_gain, params.norm2_shift), [params.ff1, params.ff2])
    return add(h, ff)


def transformer_encoder(x: Tensor, blocks: Sequence[TransformerBlockParams], heads: int) -> Tensor:
    for block in blocks:
        x = transformer_block(x, block, heads)
    return x


def positional_encoding(pos_indices: ArrayLike, d: int, base: float = PE_BASE) -> Tensor:
    """Sinusoidal encoding: (i, 2k) = sin(pos / base^(2k/d)), (i, 2k+1) = cos(...)."""
    if d < 2 or d % 2:
        raise ConfigError(f"positional encoding width must be even, got {d}")
    pos = np.asarray(pos_indices, dtype=np.float64)
    freqs = base ** (-np.arange(0, d, 2, dtype=np.float64) / d)
    phase = pos[..., None] * freqs
    out = np.empty(pos.shape + (d,), dtype=np.float64)
    out[..., 0::2] = np.sin(phase)
    out[..., 1::2] = np.cos(phase)
    return Tensor(out)


# ============= Losses =============

def mse(pred: Tensor, target) -> Tensor:
    diff = sub(pred, target)
    return mean(mul(diff, diff))


def cosine_similarity(a: Tensor, b: Tensor, eps: float) -> Tensor:
    """Cosine along the last axis with each norm floored at ``eps``."""
    dot = tsum(mul(a, b), axis=-1)
    na2 = maximum(tsum(mul(a, a), axis=-1), eps * eps)
    nb2 = maximum(tsum(mul(b, b), axis=-1), eps * eps)
    return div(dot, sqrt(mul(na2, nb2)))


# ============= Initialization =============

def make_rng(seed: Union[int, np.random.Generator]) -> np.random.Generator:
    """PCG64-backed generator; passing a Generator returns it unchanged."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.PCG64(seed))


def seeded_init(shape: Tuple[int, ...], scheme: str, seed: Union[int, np.random.Generator] = 0) -> np.ndarray:
    """
    Deterministic parameter initialization.

    Args:
        shape: Parameter shape; fan-in is the product of all but the first axis
        scheme: 'uniform-fan-in' (U(-1/sqrt(fan_in), 1/sqrt(fan_in))), 'zeros' or 'ones'
        seed: Integer seed or a generator to draw from

    Returns:
        float64 array of ``shape``
    """
    shape = tuple(shape)
    if scheme == "zeros":
        return np.zeros(shape, dtype=np.float64)
    if scheme == "ones":
        return np.ones(shape, dtype=np.float64)
    if scheme != "uniform-fan-in":
        raise ConfigError(f"unknown init scheme: {scheme!r}")
    fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else shape[0]
    bound = 1.0 / math.sqrt(fan_in)
    return make_rng(seed).uniform(-bound, bound, size=shape)


# ============= Optimization =============

@dataclass
class AdamMoments:
    m: np.ndarray
    v: np.ndarray


def adam_step(
    params: Mapping[str, Parameter],
    moments: Dict[str, AdamMoments],
    lr: float = LEARNING_RATE,
    beta1: float = ADAM_BETA1,
    beta2: float = ADAM_BETA2,
    eps: float = ADAM_EPS,
    t: int = 1,
) -> None:
    """One bias-corrected Adam update in place; ``t`` counts from 1."""
    correction1 = 1.0 - beta1 ** t
    correction2 = 1.0 - beta2 ** t
    for name, param in params.items():
        if not param.trainable:
            continue
        state = moments.get(name)
        if state is None:
            state = moments[name] = AdamMoments(np.zeros_like(param.data), np.zeros_like(param.data))
        g = param.grad
        state.m = beta1 * state.m + (1.0 - beta1) * g
        state.v = beta2 * state.v + (1.0 - beta2) * g * g
        m_hat = state.m / correction1
        v_hat = state.v / correction2
        param.data = param.data - lr * m_hat / (np.sqrt(v_hat) + eps)


@dataclass
class Adam:
    params: Mapping[str, Parameter]
    lr: float = LEARNING_RATE
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS
    t: int = 0
    moments: Dict[str, AdamMoments] = field(default_factory=dict)

    def zero_grad(self) -> None:
        for param in self.params.values():
            param.zero_grad()

    def step(self) -> None:
        self.t += 1
        adam_step(self.params, self.moments, self.lr, self.beta1, self.beta2, self.eps, self.t)
