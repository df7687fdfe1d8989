"""TERMCast forward pass, weighted fusion, ablation variants, loss and checkpoints."""

import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from termcast.components import InputInstance, InstanceBatch, stack_instances
from termcast.config import COSINE_EPS, FusionMode, ModelConfig, Variant, parse_fusion
from termcast.errors import ConfigError, FormatError, ShapeError
from termcast.nn_core import (
    AttentionParams,
    DenseParams,
    Parameter,
    Tensor,
    TransformerBlockParams,
    add,
    concat,
    conv2d,
    cosine_similarity,
    dense,
    getitem,
    make_rng,
    mean,
    mlp,
    mse,
    mul,
    positional_encoding,
    relu,
    reshape,
    seeded_init,
    softmax,
    stack,
    sub,
    transformer_encoder,
)

logger = logging.getLogger(__name__)

TCM_MAGIC = b"TCM1"

# Weight index -> learnable under each mode; disabled weights act as all-ones
_ENABLED_WEIGHTS = {
    FusionMode.C0: {1, 2, 3},
    FusionMode.C1: {1, 2},
    FusionMode.C2: {1, 3},
    FusionMode.C3: {2, 3},
    FusionMode.C4: set(),
    FusionMode.C5: {1, 2, 3},
}


@dataclass
class ForwardOutput:
    """Batched forward results; relation fields are None when the variant drops them."""

    prediction: Tensor
    initial: Optional[Tensor]
    relation_decode: Optional[Tensor]
    extra_influence: Tensor
    predicted_relation: Optional[Tensor]
    inferred_relation: Optional[Tensor]


# ============= Parameters =============

def parameter_shapes(config: ModelConfig) -> Dict[str, tuple]:
    """Ordered parameter manifest for ``config``."""
    channels, height, width = config.grid_shape()
    flat = channels * height * width
    d = config.d_relation
    shapes: Dict[str, tuple] = {}

    def dense_layer(prefix: str, n_out: int, n_in: int) -> None:
        shapes[f"{prefix}.weight"] = (n_out, n_in)
        shapes[f"{prefix}.bias"] = (n_out,)

    c_in = config.closeness_len * channels
    for i in range(config.conv_layers):
        shapes[f"short.conv{i}.weight"] = (config.conv_filters, c_in, 3, 3)
        shapes[f"short.conv{i}.bias"] = (config.conv_filters,)
        c_in = config.conv_filters
    shapes[f"short.conv{config.conv_layers}.weight"] = (channels, c_in, 3, 3)
    shapes[f"short.conv{config.conv_layers}.bias"] = (channels,)

    dense_layer("g.0", config.g_width, 3 * flat)
    dense_layer("g.1", d, config.g_width)

    for b in range(config.transformer_depth):
        p = f"transformer.{b}"
        shapes[f"{p}.norm1.gain"] = (d,)
        shapes[f"{p}.norm1.shift"] = (d,)
        for proj in ("q", "k", "v", "o"):
            dense_layer(f"{p}.attn.{proj}", d, d)
        shapes[f"{p}.norm2.gain"] = (d,)
        shapes[f"{p}.norm2.shift"] = (d,)
        dense_layer(f"{p}.ff1", 4 * d, d)
        dense_layer(f"{p}.ff2", d, 4 * d)
    dense_layer("readout", d, d)

    dense_layer("mlp_r.0", config.mlp_r_width, d)
    dense_layer("mlp_r.1", flat, config.mlp_r_width)
    dense_layer("mlp_extra.0", config.mlp_extra_hidden, config.extra_dim)
    dense_layer("mlp_extra.1", flat, config.mlp_extra_hidden)

    for name in fusion_names(config):
        shapes[name] = (channels, height, width)
    return shapes


def fusion_names(config: ModelConfig) -> Tuple[str, str, str]:
    """Names of W1..W3. They carry the fusion mode and variant, so checkpoints record both."""
    tag = f"fusion.{config.fusion.value}.{config.variant.value}"
    return (f"{tag}.w1", f"{tag}.w2", f"{tag}.w3")


def _default_scheme(name: str, config: ModelConfig) -> str:
    if name.startswith("fusion."):
        return "zeros" if config.fusion == FusionMode.C5 else "ones"
    if name.endswith(".gain"):
        return "ones"
    if name.endswith(".bias") or name.endswith(".shift"):
        return "zeros"
    return "uniform-fan-in"


def _is_trainable(name: str, config: ModelConfig) -> bool:
    if name.startswith("fusion."):
        return int(name[-1]) in _ENABLED_WEIGHTS[config.fusion]
    return True


def init_parameters(config: ModelConfig, seed: int = 0, scheme: Optional[str] = None) -> Dict[str, Parameter]:
    """
    Create every parameter in manifest order from one seeded generator.

    Args:
        config: Resolved model configuration
        seed: PRNG seed
        scheme: Force one scheme ('zeros', 'ones', 'uniform-fan-in') for all
            parameters instead of the per-parameter defaults

    Returns:
        Ordered name -> Parameter mapping
    """
    rng = make_rng(seed)
    params = {}
    for name, shape in parameter_shapes(config).items():
        data = seeded_init(shape, scheme or _default_scheme(name, config), rng)
        params[name] = Parameter(data, trainable=_is_trainable(name, config), name=name)
    return params


def _dense(params: Mapping[str, Parameter], prefix: str) -> DenseParams:
    return DenseParams(params[f"{prefix}.weight"], params[f"{prefix}.bias"])


def _blocks(params: Mapping[str, Parameter], depth: int) -> List[TransformerBlockParams]:
    blocks = []
    for b in range(depth):
        p = f"transformer.{b}"
        blocks.append(TransformerBlockParams(
            norm1_gain=params[f"{p}.norm1.gain"],
            norm1_shift=params[f"{p}.norm1.shift"],
            attention=AttentionParams(*(_dense(params, f"{p}.attn.{proj}") for proj in ("q", "k", "v", "o"))),
            norm2_gain=params[f"{p}.norm2.gain"],
            norm2_shift=params[f"{p}.norm2.shift"],
            ff1=_dense(params, f"{p}.ff1"),
            ff2=_dense(params, f"{p}.ff2"),
        ))
    return blocks


# ============= Model Operations =============

def _flatten_grid(x: Tensor) -> Tensor:
    return reshape(x, x.shape[:-3] + (int(np.prod(x.shape[-3:])),))


def short_term_predict(closeness: Tensor, params: Mapping[str, Parameter], config: ModelConfig) -> Tensor:
    """
    Initial prediction from the closeness tensors (residual conv unit).

    Args:
        closeness: [6, 2, H, W] or [B, 6, 2, H, W], normalized
        params: Model parameters (``short.*``)
        config: Model configuration

    Returns:
        [2, H, W] or [B, 2, H, W]: conv stack output plus the latest closeness tensor
    """
    grid = config.grid_shape()
    expected = (config.closeness_len,) + grid
    if closeness.shape[-4:] != expected or closeness.ndim not in (4, 5):
        raise ShapeError(f"closeness must be [..., {expected}], got {closeness.shape}")
    lead = closeness.shape[:-4]
    x = reshape(closeness, lead + (config.closeness_len * grid[0],) + grid[1:])
    for i in range(config.conv_layers + 1):
        x = conv2d(x, params[f"short.conv{i}.weight"], params[f"short.conv{i}.bias"])
        if i < config.conv_layers:
            x = relu(x)
    latest = getitem(closeness, (Ellipsis, config.closeness_len - 1, slice(None), slice(None), slice(None)))
    return add(x, latest)


def relation_encode(xc: Tensor, xp: Tensor, xq: Tensor, params: Mapping[str, Parameter]) -> Tensor:
    """Relation vector g([c; p; q]) from three aligned flow tensors (any leading axes)."""
    if not (xc.shape == xp.shape == xq.shape):
        raise ShapeError(f"relation inputs disagree: {xc.shape}, {xp.shape}, {xq.shape}")
    if xc.ndim < 3 or xc.shape[-3] != 2:
        raise ShapeError(f"relation inputs must end in 2xHxW, got {xc.shape}")
    joined = concat([_flatten_grid(xc), _flatten_grid(xp), _flatten_grid(xq)], axis=-1)
    return mlp(joined, [_dense(params, "g.0"), _dense(params, "g.1")])


def relation_predict(
    relations: Tensor, pos_slots, params: Mapping[str, Parameter], config: ModelConfig
) -> Tensor:
    """
    Predict the target's relation vector from the six slot relations.

    Positions enter the sinusoidal encoding modulo intervals_per_day, so the
    encoding repeats daily. The readout is a dense projection of the last
    position's encoder output.

    Args:
        relations: [6, d_R] or [B, 6, d_R]
        pos_slots: Absolute periodic positions, shape [6] or [B, 6]
        params: Model parameters
        config: Model configuration

    Returns:
        [d_R] or [B, d_R]
    """
    d = config.d_relation
    if relations.shape[-2:] != (config.closeness_len, d) or relations.ndim not in (2, 3):
        raise ShapeError(f"relation sequence must be [..., {config.closeness_len}, {d}], got {relations.shape}")
    positions = np.asarray(pos_slots, dtype=np.int64)
    if positions.shape != relations.shape[:-1]:
        raise ShapeError(f"pos_slots shape {positions.shape} does not match relations {relations.shape[:-1]}")
    ipd = config.require_intervals_per_day()
    x = add(relations, positional_encoding(np.mod(positions, ipd), d))
    x = transformer_encoder(x, _blocks(params, config.transformer_depth), config.heads)
    last = getitem(x, (Ellipsis, config.closeness_len - 1, slice(None)))
    return dense(last, params["readout.weight"], params["readout.bias"])


def relation_decode(r: Tensor, params: Mapping[str, Parameter], config: ModelConfig) -> Tensor:
    """Decode a relation vector into the 2xHxW relation supplement."""
    if r.shape[-1] != config.d_relation:
        raise ShapeError(f"relation vector must have length {config.d_relation}, got {r.shape}")
    out = mlp(r, [_dense(params, "mlp_r.0"), _dense(params, "mlp_r.1")])
    return reshape(out, r.shape[:-1] + config.grid_shape())


def extra_influence(extra: Tensor, params: Mapping[str, Parameter], config: ModelConfig) -> Tensor:
    """Map the temporal one-hot features to a 2xHxW influence tensor."""
    if extra.shape[-1] != config.extra_dim:
        raise ShapeError(f"extra features must have length {config.extra_dim}, got {extra.shape}")
    out = mlp(extra, [_dense(params, "mlp_extra.0"), _dense(params, "mlp_extra.1")])
    return reshape(out, extra.shape[:-1] + config.grid_shape())


def fusion_weights(
    weights: Mapping[int, Tensor], mode: Union[str, FusionMode], present: Sequence[int] = (1, 2, 3)
) -> Dict[int, Optional[Tensor]]:
    """
    Effective per-term weights; None marks a term added unweighted.

    C5 normalizes the logits of the present terms with a softmax at every
    element, so the effective weights sum to 1 elementwise.
    """
    mode = parse_fusion(mode)
    if mode == FusionMode.C5:
        normalized = softmax(stack([weights[i] for i in present], axis=0), axis=0)
        return {i: getitem(normalized, j) for j, i in enumerate(present)}
    enabled = _ENABLED_WEIGHTS[mode]
    return {i: (weights[i] if i in enabled else None) for i in present}


def fuse(
    initial: Optional[Tensor],
    relation: Optional[Tensor],
    extra: Optional[Tensor],
    w1: Tensor,
    w2: Tensor,
    w3: Tensor,
    mode: Union[str, FusionMode],
) -> Tensor:
    """
    Weighted elementwise fusion W1∘X̃c + W2∘X̃r + W3∘X̃extra.

    A None input drops that term entirely (ablation variants). Disabled
    weights under C1-C4 behave as all-ones tensors.
    """
    terms = {i: x for i, x in ((1, initial), (2, relation), (3, extra)) if x is not None}
    if not terms:
        raise ShapeError("fuse needs at least one input tensor")
    shapes = {x.shape[-3:] for x in terms.values()}
    if len(shapes) != 1 or w1.shape != w2.shape or w2.shape != w3.shape or w1.shape not in shapes:
        raise ShapeError(f"fusion shapes disagree: inputs {shapes}, weights {w1.shape}")
    effective = fusion_weights({1: w1, 2: w2, 3: w3}, mode, tuple(terms))
    out = None
    for i, x in terms.items():
        term = x if effective[i] is None else mul(effective[i], x)
        out = term if out is None else add(out, term)
    return out


def infer_relation(prediction: Tensor, xp_t: Tensor, xq_t: Tensor, params: Mapping[str, Parameter]) -> Tensor:
    """Relation of the predicted tensor with the known period/trend observations (shared g)."""
    return relation_encode(prediction, xp_t, xq_t, params)


def loss(
    prediction: Tensor,
    target,
    inferred: Optional[Tensor],
    predicted_rel: Optional[Tensor],
    alpha: float = 1.0,
    beta: float = 1.0,
) -> Tensor:
    """
    alpha * MSE(prediction, target) + beta * mean(1 - cos(inferred, predicted_rel)).

    The consistency term is skipped when either relation is None or beta is 0.
    """
    total = mul(mse(prediction, target), alpha)
    if beta > 0 and inferred is not None and predicted_rel is not None:
        consistency = mean(sub(1.0, cosine_similarity(inferred, predicted_rel, COSINE_EPS)))
        total = add(total, mul(consistency, beta))
    return total


# ============= Model =============

class TermCastModel:
    """Parameters plus configuration; every operation is exposed as a method."""

    def __init__(self, config: ModelConfig, seed: int = 0, scheme: Optional[str] = None):
        config.grid_shape()
        config.require_intervals_per_day()
        self.config = config
        self.seed = seed
        self.params: Dict[str, Parameter] = init_parameters(config, seed, scheme)

    @property
    def variant(self) -> Variant:
        return self.config.variant

    @property
    def has_relations(self) -> bool:
        return self.variant != Variant.V2

    @property
    def has_short_term(self) -> bool:
        return self.variant != Variant.V1

    @property
    def consistency_weight(self) -> float:
        if self.variant in (Variant.V2, Variant.V3):
            return 0.0
        return self.config.beta

    def _require_relations(self, op: str) -> None:
        if not self.has_relations:
            raise ConfigError(f"{op} is unavailable: variant V2 has no long-term relation module")

    def short_term_predict(self, closeness) -> Tensor:
        if not self.has_short_term:
            raise ConfigError("short_term_predict is unavailable: variant V1 has no short-term module")
        return short_term_predict(_tensor(closeness), self.params, self.config)

    def relation_encode(self, xc, xp, xq) -> Tensor:
        self._require_relations("relation_encode")
        return relation_encode(_tensor(xc), _tensor(xp), _tensor(xq), self.params)

    def relation_predict(self, relations, pos_slots) -> Tensor:
        self._require_relations("relation_predict")
        return relation_predict(_tensor(relations), pos_slots, self.params, self.config)

    def relation_decode(self, r) -> Tensor:
        self._require_relations("relation_decode")
        return relation_decode(_tensor(r), self.params, self.config)

    def extra_influence(self, extra) -> Tensor:
        return extra_influence(_tensor(extra), self.params, self.config)

    def fuse(self, initial, relation, extra) -> Tensor:
        w1, w2, w3 = (self.params[name] for name in fusion_names(self.config))
        return fuse(initial, relation, extra, w1, w2, w3, self.config.fusion)

    def infer_relation(self, prediction, xp_t, xq_t) -> Tensor:
        self._require_relations("infer_relation")
        return infer_relation(_tensor(prediction), _tensor(xp_t), _tensor(xq_t), self.params)

    def forward(self, data: Union[InputInstance, InstanceBatch, Sequence[InputInstance]]) -> ForwardOutput:
        """
        Full TERMCast forward pass for the configured variant.

        A single InputInstance yields unbatched outputs; a batch or a list of
        instances yields outputs with a leading batch axis.
        """
        single = isinstance(data, InputInstance)
        batch = _as_batch(data)
        out = self._forward_batch(batch)
        if single:
            out = ForwardOutput(*(None if t is None else getitem(t, 0) for t in (
                out.prediction, out.initial, out.relation_decode, out.extra_influence,
                out.predicted_relation, out.inferred_relation)))
        return out

    def _forward_batch(self, batch: InstanceBatch) -> ForwardOutput:
        n = self.config.closeness_len
        xc = Tensor(batch.closeness)
        xp, xq = batch.period, batch.trend

        initial = short_term_predict(xc, self.params, self.config) if self.has_short_term else None
        extra = extra_influence(Tensor(batch.extra), self.params, self.config)
        predicted = decoded = None
        if self.has_relations:
            relations = relation_encode(xc, Tensor(xp[:, :n]), Tensor(xq[:, :n]), self.params)
            predicted = relation_predict(relations, batch.slot_positions, self.params, self.config)
            decoded = relation_decode(predicted, self.params, self.config)

        prediction = self.fuse(initial, decoded, extra)
        inferred = None
        if self.has_relations:
            inferred = infer_relation(prediction, Tensor(xp[:, n]), Tensor(xq[:, n]), self.params)
        return ForwardOutput(prediction, initial, decoded, extra, predicted, inferred)

    def loss(self, out: ForwardOutput, target) -> Tensor:
        return loss(out.prediction, target, out.inferred_relation, out.predicted_relation,
                    self.config.alpha, self.consistency_weight)

    def predict(self, data: Union[InstanceBatch, Sequence[InputInstance]]) -> np.ndarray:
        """Normalized predictions [B, 2, H, W] without recording a tape."""
        return self._forward_batch(_as_batch(data)).prediction.data

    def parameter_groups(self) -> Dict[str, List[str]]:
        groups: Dict[str, List[str]] = {}
        for name in self.params:
            groups.setdefault(name.split(".")[0], []).append(name)
        return groups

    def trainable_parameters(self) -> Dict[str, Parameter]:
        return {name: p for name, p in self.params.items() if p.trainable}

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        for name, param in self.params.items():
            if name not in state:
                raise FormatError(f"missing parameter {name}")
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != param.shape:
                raise FormatError(f"parameter {name}: expected shape {param.shape}, got {value.shape}")
            param.data = value.copy()


def _tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _as_batch(data) -> InstanceBatch:
    if isinstance(data, InstanceBatch):
        return data
    if isinstance(data, InputInstance):
        return stack_instances([data])
    return stack_instances(list(data))


# ============= Checkpoints =============

def checkpoint_bytes(model: TermCastModel) -> bytes:
    """Serialize to ``TCM1``: magic, manifest (names, shapes), float64 LE values."""
    parts = [TCM_MAGIC, struct.pack("<I", len(model.params))]
    for name, param in model.params.items():
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<B", param.ndim))
        parts.append(struct.pack(f"<{param.ndim}I", *param.shape))
    for param in model.params.values():
        parts.append(np.ascontiguousarray(param.data, dtype="<f8").tobytes())
    return b"".join(parts)


def save_checkpoint(model: TermCastModel, path: Union[str, Path]) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


def parse_checkpoint(data: bytes) -> Dict[str, np.ndarray]:
    """Decode ``TCM1`` bytes into an ordered name -> array mapping."""
    if data[:4] != TCM_MAGIC:
        raise FormatError(f"bad checkpoint magic {data[:4]!r}")
    try:
        offset = 4
        (count,) = struct.unpack_from("<I", data, offset)
        offset += 4
        manifest = []
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", data, offset)
            offset += 2
            name = data[offset:offset + name_len].decode("utf-8")
            offset += name_len
            (ndim,) = struct.unpack_from("<B", data, offset)
            offset += 1
            shape = struct.unpack_from(f"<{ndim}I", data, offset)
            offset += 4 * ndim
            manifest.append((name, shape))
        state = {}
        for name, shape in manifest:
            n = int(np.prod(shape))
            if offset + 8 * n > len(data):
                raise FormatError(f"checkpoint truncated in parameter {name}")
            state[name] = np.frombuffer(data, dtype="<f8", count=n, offset=offset).astype(np.float64).reshape(shape)
            offset += 8 * n
    except (struct.error, UnicodeDecodeError) as e:
        raise FormatError(f"corrupt checkpoint manifest: {e}") from None
    if offset != len(data):
        raise FormatError(f"checkpoint has {len(data) - offset} trailing bytes")
    return state


def load_checkpoint(path: Union[str, Path], config: ModelConfig) -> TermCastModel:
    """
    Load a checkpoint, validating names and shapes against ``config``.

    The fusion weight names record the mode and variant used in training; a
    checkpoint for another mode or variant is rejected with FormatError.
    """
    state = parse_checkpoint(Path(path).read_bytes())
    trained = next((name.rsplit(".", 1)[0] for name in state if name.startswith("fusion.")), None)
    wanted = fusion_names(config)[0].rsplit(".", 1)[0]
    if trained is not None and trained != wanted:
        _, mode, variant = trained.split(".", 2)
        raise FormatError(f"checkpoint was trained with fusion {mode}, variant {variant}; the configuration "
                          f"asks for fusion {config.fusion.value}, variant {config.variant.value}")
    expected = parameter_shapes(config)
    if list(state) != list(expected):
        raise FormatError("checkpoint parameter manifest does not match the model configuration")
    model = TermCastModel(config, scheme="zeros")
    model.load_state_dict(state)
    logger.info("Loaded checkpoint %s (%d parameters)", path, len(state))
    return model
