import numpy as np
import pytest

from termcast.components import stack_instances
from termcast.config import FusionMode, Variant, parse_fusion
from termcast.errors import ConfigError, FormatError, ShapeError
from termcast.gradcheck import run_case, run_suite, suite_passed, toy_batch
from termcast.nn_core import Tape, Tensor, make_rng
from termcast.termcast_model import (
    TermCastModel,
    checkpoint_bytes,
    fuse,
    fusion_names,
    fusion_weights,
    load_checkpoint,
    loss,
    parameter_shapes,
    save_checkpoint,
)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def model(tiny_config):
    return TermCastModel(tiny_config, seed=0)


def _grid(rng, shape=(2, 4, 4)):
    return rng.uniform(size=shape)


# ============= Short-term =============

def test_short_term_shape_and_determinism(tiny_config, rng):
    closeness = rng.uniform(size=(6, 2, 4, 4))
    first = TermCastModel(tiny_config, seed=3).short_term_predict(closeness)
    second = TermCastModel(tiny_config, seed=3).short_term_predict(closeness)
    assert first.shape == (2, 4, 4)
    np.testing.assert_array_equal(first.data, second.data)


def test_short_term_zero_in_zero_out(tiny_config):
    model = TermCastModel(tiny_config, scheme="zeros")
    assert not model.short_term_predict(np.zeros((6, 2, 4, 4))).data.any()


def test_short_term_wrong_count(model):
    with pytest.raises(ShapeError):
        model.short_term_predict(np.zeros((5, 2, 4, 4)))


# ============= Relations =============

def test_relation_encode_length_and_zero(tiny_config, model, rng):
    r = model.relation_encode(_grid(rng), _grid(rng), _grid(rng))
    assert r.shape == (tiny_config.d_relation,)
    zero = TermCastModel(tiny_config, scheme="zeros").relation_encode(*(np.zeros((2, 4, 4)),) * 3)
    assert not zero.data.any()


def test_relation_encode_order_matters(model, rng):
    xc, xp, xq = _grid(rng), _grid(rng), _grid(rng)
    assert not np.allclose(model.relation_encode(xc, xp, xq).data, model.relation_encode(xc, xq, xp).data)


def test_relation_encode_shape_mismatch(model):
    with pytest.raises(ShapeError):
        model.relation_encode(np.zeros((2, 4, 4)), np.zeros((2, 4, 3)), np.zeros((2, 4, 4)))


def test_relation_predict_is_day_periodic(tiny_config, model, rng):
    relations = rng.normal(size=(6, tiny_config.d_relation))
    slots = np.arange(6) + 2
    out = model.relation_predict(relations, slots)
    assert out.shape == (tiny_config.d_relation,)
    shifted = model.relation_predict(relations, slots + tiny_config.intervals_per_day)
    np.testing.assert_array_equal(out.data, shifted.data)
    np.testing.assert_array_equal(out.data, model.relation_predict(relations, slots).data)


def test_relation_predict_wrong_length(tiny_config, model):
    with pytest.raises(ShapeError):
        model.relation_predict(np.zeros((5, tiny_config.d_relation)), np.arange(5))


def test_relation_decode(tiny_config, model, rng):
    assert model.relation_decode(rng.normal(size=tiny_config.d_relation)).shape == (2, 4, 4)
    zero = TermCastModel(tiny_config, scheme="zeros").relation_decode(np.zeros(tiny_config.d_relation))
    assert not zero.data.any()


def test_extra_influence_depends_on_weekday(tiny_config, model):
    monday, tuesday = np.zeros(tiny_config.extra_dim), np.zeros(tiny_config.extra_dim)
    monday[[1, 4]] = 1.0
    tuesday[[1, 5]] = 1.0
    a, b = model.extra_influence(monday), model.extra_influence(tuesday)
    assert a.shape == (2, 4, 4)
    assert not np.allclose(a.data, b.data)
    assert not TermCastModel(tiny_config, scheme="zeros").extra_influence(monday).data.any()


def test_infer_relation_shares_g(model, rng):
    x, p, q = _grid(rng), _grid(rng), _grid(rng)
    np.testing.assert_array_equal(model.infer_relation(x, p, q).data, model.relation_encode(x, p, q).data)


# ============= Fusion =============

def _fuse_inputs(rng):
    return [Tensor(_grid(rng)) for _ in range(6)]


def test_c4_is_plain_sum(rng):
    a, b, c, w1, w2, w3 = _fuse_inputs(rng)
    out = fuse(a, b, c, w1, w2, w3, "C4")
    np.testing.assert_array_equal(out.data, a.data + b.data + c.data)


def test_c5_equal_logits_average(rng):
    a, b, c, _, _, _ = _fuse_inputs(rng)
    logits = Tensor(np.full((2, 4, 4), 0.7))
    out = fuse(a, b, c, logits, logits, logits, FusionMode.C5)
    np.testing.assert_allclose(out.data, (a.data + b.data + c.data) / 3, atol=1e-12)


def test_c5_weights_sum_to_one(rng):
    w = {i: Tensor(rng.normal(size=(2, 4, 4)) * 3) for i in (1, 2, 3)}
    effective = fusion_weights(w, "C5")
    total = effective[1].data + effective[2].data + effective[3].data
    np.testing.assert_allclose(total, 1.0, atol=1e-6)


@pytest.mark.parametrize("mode,ones", [("C1", 3), ("C2", 2), ("C3", 1)])
def test_crossed_out_weight_acts_as_ones(rng, mode, ones):
    inputs = _fuse_inputs(rng)
    a, b, c = inputs[:3]
    out = fuse(*inputs, mode)
    weights = {1: inputs[3].data, 2: inputs[4].data, 3: inputs[5].data}
    weights[ones] = np.ones((2, 4, 4))
    expected = weights[1] * a.data + weights[2] * b.data + weights[3] * c.data
    np.testing.assert_allclose(out.data, expected, atol=1e-12)


def test_fuse_is_linear_in_each_input(rng):
    x, y = Tensor(_grid(rng)), Tensor(_grid(rng))
    zero = Tensor(np.zeros((2, 4, 4)))
    _, _, _, w1, w2, w3 = _fuse_inputs(rng)
    for mode in FusionMode:
        combined = fuse(2.0 * x - 0.5 * y, zero, zero, w1, w2, w3, mode).data
        separate = 2.0 * fuse(x, zero, zero, w1, w2, w3, mode).data - 0.5 * fuse(y, zero, zero, w1, w2, w3, mode).data
        np.testing.assert_allclose(combined, separate, atol=1e-12)


def test_unknown_fusion_mode():
    with pytest.raises(ConfigError):
        parse_fusion("C9")


def test_fuse_drops_missing_term(rng):
    a, b, c, w1, w2, w3 = _fuse_inputs(rng)
    np.testing.assert_array_equal(fuse(None, b, c, w1, w2, w3, "C4").data, b.data + c.data)


# ============= Loss =============

def test_loss_examples(rng):
    target = _grid(rng)
    r = Tensor(rng.normal(size=8))
    assert loss(Tensor(target), target, r, r).item() == pytest.approx(0.0, abs=1e-12)

    a, b = np.zeros(8), np.zeros(8)
    a[0], b[1] = 2.0, 5.0
    assert loss(Tensor(target), target, Tensor(a), Tensor(b)).item() == pytest.approx(1.0)

    assert loss(Tensor(target + 2.0), target, r, r).item() == pytest.approx(4.0)


def test_consistency_term_in_range(rng):
    target = _grid(rng)
    for _ in range(50):
        value = loss(Tensor(target), target, Tensor(rng.normal(size=8)), Tensor(rng.normal(size=8))).item()
        assert 0.0 <= value <= 2.0


def test_loss_with_zero_relations_is_finite(rng):
    target = _grid(rng)
    value = loss(Tensor(target), target, Tensor(np.zeros(8)), Tensor(np.zeros(8))).item()
    assert value == pytest.approx(1.0)


# ============= Forward and Variants =============

def test_full_forward_populates_everything(model, small_dataset):
    out = model.forward(small_dataset.train_instances[0])
    assert out.prediction.shape == (2, 4, 4)
    for field in (out.initial, out.relation_decode, out.extra_influence):
        assert field.shape == (2, 4, 4)
    assert out.predicted_relation.shape == out.inferred_relation.shape == (8,)


def test_batched_forward_matches_single(model, small_dataset):
    instances = small_dataset.train_instances[:3]
    batched = model.forward(instances).prediction.data
    for i, inst in enumerate(instances):
        np.testing.assert_allclose(batched[i], model.forward(inst).prediction.data, atol=1e-10)


def test_v3_forward_equals_full(tiny_config, small_dataset):
    inst = small_dataset.train_instances[5]
    full = TermCastModel(tiny_config, seed=1).forward(inst)
    v3_model = TermCastModel(tiny_config.with_options(variant="V3"), seed=1)
    v3 = v3_model.forward(inst)
    np.testing.assert_array_equal(full.prediction.data, v3.prediction.data)
    assert v3_model.consistency_weight == 0.0


def test_v2_ignores_period_and_trend(tiny_config, small_dataset):
    model = TermCastModel(tiny_config.with_options(variant=Variant.V2), seed=2)
    batch = stack_instances(small_dataset.train_instances[:2])
    perturbed = batch.subset([0, 1])
    object.__setattr__(perturbed, "period", batch.period + 5.0)
    object.__setattr__(perturbed, "trend", batch.trend - 3.0)
    out = model.forward(batch)
    assert out.predicted_relation is None and out.inferred_relation is None
    np.testing.assert_array_equal(out.prediction.data, model.forward(perturbed).prediction.data)
    with pytest.raises(ConfigError):
        model.relation_encode(*(np.zeros((2, 4, 4)),) * 3)


def test_v1_drops_short_term_path(tiny_config, small_dataset):
    model = TermCastModel(tiny_config.with_options(variant="V1"), seed=2)
    out = model.forward(small_dataset.train_instances[0])
    assert out.initial is None
    assert out.predicted_relation is not None
    with pytest.raises(ConfigError):
        model.short_term_predict(np.zeros((6, 2, 4, 4)))


def test_forward_is_periodic_in_slot_positions(model, tiny_config):
    batch = toy_batch(tiny_config, make_rng(4))
    shifted = batch.subset([0, 1])
    object.__setattr__(shifted, "slot_positions", batch.slot_positions + tiny_config.intervals_per_day)
    np.testing.assert_array_equal(model.predict(batch), model.predict(shifted))


def test_fusion_weights_trainability(tiny_config):
    config = tiny_config.with_options(fusion="C2")
    w1, w2, w3 = (TermCastModel(config).params[name] for name in fusion_names(config))
    assert w1.trainable and w3.trainable
    assert not w2.trainable
    np.testing.assert_array_equal(w1.data, 1.0)
    plain_config = tiny_config.with_options(fusion="C4")
    plain = TermCastModel(plain_config)
    assert not any(plain.params[name].trainable for name in fusion_names(plain_config))


def test_every_variant_draws_the_same_parameters(tiny_config):
    base = TermCastModel(tiny_config, seed=6).state_dict()
    other = TermCastModel(tiny_config.with_options(variant="V2"), seed=6).state_dict()
    assert len(base) == len(other)
    for (name, value), (other_name, other_value) in zip(base.items(), other.items()):
        assert name == other_name or name.startswith("fusion.")
        np.testing.assert_array_equal(value, other_value)


# ============= Gradients =============

@pytest.mark.parametrize("name", ["relation_encode", "relation_predict", "relation_decode", "extra_influence",
                                  "loss"] + [f"fuse_{m.value}" for m in FusionMode])
def test_model_op_gradients(name):
    results = run_suite(seeds=(0, 1), names=[name], include_end_to_end=False)
    assert suite_passed(results), [r for r in results if not r.passed]


def test_end_to_end_gradient_on_toy_instance():
    result = run_case("end_to_end", 0, 0)
    assert result.passed, result


def test_forward_backward_is_deterministic(tiny_config):
    def grads():
        model = TermCastModel(tiny_config, seed=8)
        batch = toy_batch(tiny_config, make_rng(1))
        with Tape() as tape:
            value = model.loss(model.forward(batch), batch.target)
        tape.backward(value)
        return value.item(), {n: p.grad.copy() for n, p in model.params.items()}

    (l1, g1), (l2, g2) = grads(), grads()
    assert l1 == l2
    for name in g1:
        np.testing.assert_array_equal(g1[name], g2[name])


# ============= Checkpoints =============

def test_checkpoint_round_trip_is_byte_identical(tmp_path, tiny_config, model):
    first, second = tmp_path / "a.tcm", tmp_path / "b.tcm"
    save_checkpoint(model, first)
    loaded = load_checkpoint(first, tiny_config)
    save_checkpoint(loaded, second)
    assert first.read_bytes() == second.read_bytes()
    assert first.read_bytes()[:4] == b"TCM1"


def test_checkpoint_manifest_order(tiny_config, model):
    data = checkpoint_bytes(model)
    first_name = next(iter(parameter_shapes(tiny_config)))
    assert data[8 + 2:8 + 2 + len(first_name)] == first_name.encode()


def test_checkpoint_shape_mismatch(tmp_path, tiny_config, model):
    path = tmp_path / "model.tcm"
    save_checkpoint(model, path)
    with pytest.raises(FormatError):
        load_checkpoint(path, tiny_config.with_options(d_relation=12, heads=2))


def test_checkpoint_bad_magic(tmp_path, tiny_config, model):
    path = tmp_path / "model.tcm"
    path.write_bytes(b"NOPE" + checkpoint_bytes(model)[4:])
    with pytest.raises(FormatError):
        load_checkpoint(path, tiny_config)


def test_fusion_names_record_mode_and_variant(tiny_config):
    assert fusion_names(tiny_config.with_options(fusion="C3", variant="V1")) == (
        "fusion.C3.V1.w1", "fusion.C3.V1.w2", "fusion.C3.V1.w3")


@pytest.mark.parametrize("options", [{"fusion": "C0"}, {"variant": "V2"}, {"fusion": "C4", "variant": "V3"}])
def test_checkpoint_rejects_other_fusion_or_variant(tmp_path, tiny_config, model, options):
    path = tmp_path / "model.tcm"
    save_checkpoint(model, path)
    with pytest.raises(FormatError, match="trained with fusion C5, variant full"):
        load_checkpoint(path, tiny_config.with_options(**options))
