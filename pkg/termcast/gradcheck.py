"""
Central finite-difference checks for every differentiable operation.

Each case maps a list of input tensors to an output tensor. The scalar
objective is the output projected on a fixed random tensor, so every output
element contributes. Analytic gradients come from one taped backward pass;
numeric ones from central differences at sampled coordinates.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from termcast.components import InstanceBatch
from termcast.config import FusionMode, ModelConfig
from termcast.nn_core import (
    AttentionParams,
    DenseParams,
    Tape,
    Tensor,
    conv2d,
    dense,
    layer_norm,
    make_rng,
    mul,
    multi_head_self_attention,
    relu,
    softmax,
    tsum,
)
from termcast import termcast_model as tm

logger = logging.getLogger(__name__)

FD_STEP = 1e-5
REL_TOLERANCE = 1e-4
# Absolute errors below REL_TOLERANCE * DENOM_FLOOR count as agreement
DENOM_FLOOR = 1e-5
SAMPLES_PER_INPUT = 4
GRADCHECK_SEEDS = (0, 1, 2, 3, 4)

CaseFn = Callable[[Sequence[Tensor]], Tensor]


@dataclass
class CheckResult:
    name: str
    seed: int
    shape: str
    max_rel_error: float
    checked: int
    skipped: int

    @property
    def passed(self) -> bool:
        return self.checked > 0 and self.max_rel_error < REL_TOLERANCE


# ============= Finite Differences =============

def relative_error(analytic: float, numeric: float, floor: float = DENOM_FLOOR) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def _objective(fn: CaseFn, arrays: Sequence[np.ndarray], proj: np.ndarray) -> float:
    return float(np.sum(fn([Tensor(a) for a in arrays]).data * proj))


def _central_difference(fn: CaseFn, arrays: List[np.ndarray], proj, k: int, idx, h: float) -> float:
    original = arrays[k][idx]
    arrays[k][idx] = original + h
    plus = _objective(fn, arrays, proj)
    arrays[k][idx] = original - h
    minus = _objective(fn, arrays, proj)
    arrays[k][idx] = original
    return (plus - minus) / (2.0 * h)


def check_case(
    fn: CaseFn,
    inputs: Sequence[np.ndarray],
    rng: np.random.Generator,
    h: float = FD_STEP,
    samples: int = SAMPLES_PER_INPUT,
) -> Tuple[float, int, int]:
    """
    Compare taped gradients with central differences.

    A coordinate whose estimates at h and h/2 disagree sits on a relu kink
    within the step; it is skipped and counted.

    Returns:
        (max relative error, coordinates checked, coordinates skipped)
    """
    arrays = [np.array(x, dtype=np.float64) for x in inputs]
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    proj = rng.normal(size=fn([Tensor(a) for a in arrays]).shape)
    with Tape() as tape:
        objective = tsum(mul(fn(tensors), proj))
    tape.backward(objective)

    worst, checked, skipped = 0.0, 0, 0
    for k, (array, tensor) in enumerate(zip(arrays, tensors)):
        analytic = tensor.grad if tensor.grad is not None else np.zeros_like(array)
        for flat in rng.choice(array.size, size=min(samples, array.size), replace=False):
            idx = np.unravel_index(int(flat), array.shape)
            numeric = _central_difference(fn, arrays, proj, k, idx, h)
            half = _central_difference(fn, arrays, proj, k, idx, h / 2)
            if relative_error(numeric, half) >= REL_TOLERANCE:
                skipped += 1
                continue
            worst = max(worst, relative_error(float(analytic[idx]), numeric))
            checked += 1
    return worst, checked, skipped


# ============= Cases =============

def _away_from_zero(x: np.ndarray, margin: float = 0.05) -> np.ndarray:
    return x + margin * np.sign(x)


def _dense_arrays(rng, n_out: int, n_in: int) -> List[np.ndarray]:
    return [rng.normal(size=(n_out, n_in)) / np.sqrt(n_in), rng.normal(size=n_out)]


def case_conv2d(rng, shape_idx: int):
    batch, c_in, height, width, c_out = [(None, 2, 4, 4, 3), (2, 3, 5, 3, 2), (1, 1, 3, 6, 4)][shape_idx]
    lead = () if batch is None else (batch,)
    x = rng.normal(size=lead + (c_in, height, width))
    return (lambda t: conv2d(t[0], t[1], t[2]),
            [x, rng.normal(size=(c_out, c_in, 3, 3)), rng.normal(size=c_out)], x.shape)


def case_dense(rng, shape_idx: int):
    lead, n_in, n_out = [((), 3, 4), ((4,), 5, 2), ((2, 3), 4, 3)][shape_idx]
    x = rng.normal(size=lead + (n_in,))
    return (lambda t: dense(t[0], t[1], t[2]), [x] + _dense_arrays(rng, n_out, n_in), x.shape)


def case_relu(rng, shape_idx: int):
    x = _away_from_zero(rng.normal(size=[(5,), (3, 4), (2, 3, 4)][shape_idx]))
    return (lambda t: relu(t[0]), [x], x.shape)


def case_softmax(rng, shape_idx: int):
    shape, axis = [((5,), -1), ((3, 4), -1), ((2, 3, 4), 1)][shape_idx]
    x = rng.normal(size=shape)
    return (lambda t: softmax(t[0], axis=axis), [x], x.shape)


def case_layer_norm(rng, shape_idx: int):
    shape = [(6,), (3, 5), (2, 3, 4)][shape_idx]
    d = shape[-1]
    x = rng.normal(size=shape)
    gain, shift = 1.0 + 0.1 * rng.normal(size=d), 0.1 * rng.normal(size=d)
    return (lambda t: layer_norm(t[0], t[1], t[2]), [x, gain, shift], x.shape)


def case_attention(rng, shape_idx: int):
    shape, heads = [((4, 8), 2), ((2, 3, 8), 4), ((1, 5, 6), 3)][shape_idx]
    d = shape[-1]
    seq = rng.normal(size=shape)
    weights = [a for _ in range(4) for a in _dense_arrays(rng, d, d)]

    def fn(t):
        projections = [DenseParams(t[i], t[i + 1]) for i in range(1, 9, 2)]
        return multi_head_self_attention(t[0], AttentionParams(*projections), heads)

    return fn, [seq] + weights, seq.shape


def _toy_config(height: int, width: int, **updates) -> ModelConfig:
    options = dict(height=height, width=width, intervals_per_day=4, d_relation=8, heads=2,
                   conv_filters=4, conv_layers=3, transformer_depth=1, mlp_extra_hidden=8)
    options.update(updates)
    return ModelConfig(**options)


def _param_case(config: ModelConfig, seed: int, prefixes: Iterable[str]):
    """Named parameter arrays (generic, not zero) for the given prefixes."""
    rng = make_rng(seed + 1000)
    params = tm.init_parameters(config, seed)
    names = [n for n in params if n.split(".")[0] in prefixes]
    arrays = [params[n].data + 0.1 * rng.normal(size=params[n].shape) for n in names]
    return names, arrays


_GRID_SHAPES = [(2, 2), (3, 2), (2, 4)]


def case_relation_encode(rng, shape_idx: int):
    height, width = _GRID_SHAPES[shape_idx]
    config = _toy_config(height, width)
    names, params = _param_case(config, int(rng.integers(1 << 16)), ("g",))
    flows = [rng.uniform(size=(2, height, width)) for _ in range(3)]

    def fn(t):
        return tm.relation_encode(t[0], t[1], t[2], dict(zip(names, t[3:])))

    return fn, flows + params, (2, height, width)


def case_relation_predict(rng, shape_idx: int):
    height, width = _GRID_SHAPES[shape_idx]
    config = _toy_config(height, width)
    names, params = _param_case(config, int(rng.integers(1 << 16)), ("transformer", "readout"))
    relations = rng.normal(size=(6, config.d_relation))
    slots = np.arange(6) + int(rng.integers(24))

    def fn(t):
        return tm.relation_predict(t[0], slots, dict(zip(names, t[1:])), config)

    return fn, [relations] + params, relations.shape


def case_relation_decode(rng, shape_idx: int):
    height, width = _GRID_SHAPES[shape_idx]
    config = _toy_config(height, width)
    names, params = _param_case(config, int(rng.integers(1 << 16)), ("mlp_r",))
    r = rng.normal(size=config.d_relation)
    return (lambda t: tm.relation_decode(t[0], dict(zip(names, t[1:])), config), [r] + params, r.shape)


def case_extra_influence(rng, shape_idx: int):
    height, width = _GRID_SHAPES[shape_idx]
    config = _toy_config(height, width)
    names, params = _param_case(config, int(rng.integers(1 << 16)), ("mlp_extra",))
    extra = np.zeros(config.extra_dim)
    extra[int(rng.integers(4))] = 1.0
    extra[4 + int(rng.integers(7))] = 1.0
    return (lambda t: tm.extra_influence(t[0], dict(zip(names, t[1:])), config), [extra] + params, extra.shape)


def make_fuse_case(mode: FusionMode):
    def case(rng, shape_idx: int):
        height, width = _GRID_SHAPES[shape_idx]
        arrays = [rng.normal(size=(2, height, width)) for _ in range(6)]
        return (lambda t: tm.fuse(t[0], t[1], t[2], t[3], t[4], t[5], mode), arrays, (2, height, width))
    return case


def case_loss(rng, shape_idx: int):
    height, width = _GRID_SHAPES[shape_idx]
    d = 8
    arrays = [rng.uniform(size=(2, height, width)), rng.uniform(size=(2, height, width)),
              rng.normal(size=d), rng.normal(size=d)]
    return (lambda t: tm.loss(t[0], t[1], t[2], t[3], alpha=1.0, beta=0.5), arrays, (2, height, width))


def toy_batch(config: ModelConfig, rng: np.random.Generator, size: int = 2) -> InstanceBatch:
    """Random normalized batch matching ``config``'s grid."""
    grid = config.grid_shape()
    ipd = config.require_intervals_per_day()
    extra = np.zeros((size, config.extra_dim))
    extra[np.arange(size), rng.integers(ipd, size=size)] = 1.0
    extra[np.arange(size), ipd + rng.integers(7, size=size)] = 1.0
    starts = rng.integers(ipd * 7, size=size)
    return InstanceBatch(
        closeness=rng.uniform(size=(size, config.closeness_len) + grid),
        period=rng.uniform(size=(size, config.component_len) + grid),
        trend=rng.uniform(size=(size, config.component_len) + grid),
        extra=extra,
        target=rng.uniform(size=(size,) + grid),
        slot_positions=starts[:, None] + np.arange(config.closeness_len),
        target_indices=starts + config.closeness_len,
    )


def case_end_to_end(rng, shape_idx: int = 0):
    """Full model loss on a 2x4x4 toy batch, differentiated w.r.t. every parameter."""
    config = _toy_config(4, 4)
    model = tm.TermCastModel(config, seed=int(rng.integers(1 << 16)))
    names = list(model.params)
    arrays = [p.data + 0.05 * rng.normal(size=p.shape) for p in model.params.values()]
    batch = toy_batch(config, rng)

    def fn(t):
        saved = model.params
        model.params = dict(zip(names, t))
        try:
            return model.loss(model.forward(batch), batch.target)
        finally:
            model.params = saved

    return fn, arrays, (len(batch),) + config.grid_shape()


CASES = {
    "conv2d": case_conv2d,
    "dense": case_dense,
    "relu": case_relu,
    "softmax": case_softmax,
    "layer_norm": case_layer_norm,
    "attention": case_attention,
    "relation_encode": case_relation_encode,
    "relation_predict": case_relation_predict,
    "relation_decode": case_relation_decode,
    "extra_influence": case_extra_influence,
    **{f"fuse_{mode.value}": make_fuse_case(mode) for mode in FusionMode},
    "loss": case_loss,
}


# ============= Suite =============

def run_case(name: str, seed: int, shape_idx: int) -> CheckResult:
    rng = make_rng(seed)
    if name == "end_to_end":
        fn, inputs, shape = case_end_to_end(rng, shape_idx)
        samples = 2
    else:
        fn, inputs, shape = CASES[name](rng, shape_idx)
        samples = SAMPLES_PER_INPUT
    worst, checked, skipped = check_case(fn, inputs, rng, samples=samples)
    return CheckResult(name, seed, "x".join(str(s) for s in shape), worst, checked, skipped)


def run_suite(
    seeds: Sequence[int] = GRADCHECK_SEEDS,
    names: Optional[Sequence[str]] = None,
    include_end_to_end: bool = True,
    show_progress: bool = False,
) -> List[CheckResult]:
    """
    Run every case over ``seeds`` x three shapes (end-to-end: one shape).

    Returns:
        One CheckResult per (case, seed, shape), in deterministic order
    """
    jobs = [(n, s, i) for n in (names or list(CASES)) for s in seeds for i in range(3)]
    if include_end_to_end:
        jobs += [("end_to_end", s, 0) for s in seeds]
    results = []
    for name, seed, shape_idx in tqdm(jobs, desc="gradcheck", disable=not show_progress):
        result = run_case(name, seed, shape_idx)
        if not result.passed:
            logger.warning("Gradient check failed: %s seed=%d shape=%s rel_err=%.3g",
                           name, seed, result.shape, result.max_rel_error)
        results.append(result)
    return results


def suite_passed(results: Sequence[CheckResult]) -> bool:
    return all(r.passed for r in results)
