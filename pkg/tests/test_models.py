from pathlib import Path

import numpy as np
import pytest

from ymir_bench import autodiff as ad
from ymir_bench import models
from ymir_bench.features import FeatureMap
from ymir_bench.models import (
    ARCHITECTURE_NAMES,
    GeometryError,
    ModelInstance,
    adapt_input,
    build_architecture,
    build_ymcm,
    count_parameters,
    deserialize_spec,
    infer_shapes,
    serialize_spec,
)

GOLDEN = Path(__file__).parent / "goldens" / "ymcm.spec"

GEOMETRIES = {
    "melspec": (1, 128, 259),
    "chroma": (1, 64, 259),
    "filterbank": (1, 64, 599),
    "mfcc13": (1, 64, 259),
    "mfcc20": (1, 64, 259),
    "mfcc40": (1, 64, 259),
}


def test_ymcm_filter_sequence():
    spec = build_ymcm()
    filters = [l.filters for l in spec.layers if l.kind == "conv"]
    assert filters == [64, 192, 384, 256, 256]


def test_ymcm_dense_widths():
    spec = build_ymcm()
    units = [l.units for l in spec.layers if l.kind == "dense"]
    assert units == [1024, 512, 5]


def test_ymcm_first_conv_output_shape():
    chain = infer_shapes(build_ymcm(), (1, 128, 259))
    assert chain[0] == (64, 32, 65)
    assert chain[-1] == (5,)


def test_ymcm_spec_matches_golden():
    assert serialize_spec(build_ymcm()) == GOLDEN.read_text(encoding="utf-8")


def test_spec_serialization_roundtrip():
    for name in ARCHITECTURE_NAMES:
        spec = build_architecture(name)
        assert deserialize_spec(serialize_spec(spec)) == spec


def test_every_architecture_ends_in_softmax_over_five():
    for name in ARCHITECTURE_NAMES:
        spec = build_architecture(name)
        assert spec.layers[-1].kind == "softmax"
        dense_units = [l.units for l in spec.layers if l.kind == "dense"]
        assert dense_units[-1] == 5
        assert spec.num_classes == 5


def test_mobilenet_only_separable_after_stem():
    spec = build_architecture("mobilenet_mini")
    conv_kinds = [l.kind for l in spec.layers if l.kind in ("conv", "depthwise_sep_conv")]
    assert conv_kinds[0] == "conv"
    assert all(kind == "depthwise_sep_conv" for kind in conv_kinds[1:])
    assert len(conv_kinds) == 9  # stem + 8 blocks


def test_unknown_architecture_name():
    with pytest.raises(ValueError):
        build_architecture("resnet50")


def test_parameter_count_double_entry():
    for name in ARCHITECTURE_NAMES:
        for geometry in ((1, 128, 259), (1, 64, 259)):
            spec = build_architecture(name)
            model = ModelInstance(spec, geometry, seed=0)
            assert model.parameter_count() == count_parameters(spec, geometry), (name, geometry)


def test_grid_of_architectures_and_geometries_is_runnable():
    for name in ARCHITECTURE_NAMES:
        spec = build_architecture(name)
        for kind, geometry in GEOMETRIES.items():
            chain = infer_shapes(spec, geometry)
            assert chain[-1] == (5,), (name, kind)


def test_raw_chroma_collapses_without_adaptation():
    with pytest.raises(GeometryError) as exc_info:
        infer_shapes(build_ymcm(), (1, 12, 259))
    assert "layer" in str(exc_info.value)


def test_adaptive_pool_always_emits_configured_grid():
    spec = build_ymcm()
    chain = infer_shapes(spec, (1, 64, 259))
    pool_index = next(i for i, l in enumerate(spec.layers) if l.kind == "adaptive_avg_pool")
    assert chain[pool_index] == (256, 4, 4)


# -- Input adaptation ---------------------------------------------------------

def _feature(kind, f, t=259):
    values = np.random.default_rng(0).standard_normal((f, t)).astype(np.float32)
    return FeatureMap(values, kind, [str(i) for i in range(f)], 0.023)


def test_adapt_melspec_unchanged():
    fm = _feature("melspec", 128)
    adapted = adapt_input(fm)
    assert adapted.shape == (1, 1, 128, 259)
    assert np.array_equal(adapted[0, 0], fm.values)


def test_adapt_chroma_pads_symmetrically():
    fm = _feature("chroma", 12)
    adapted = adapt_input(fm)
    assert adapted.shape == (1, 1, 64, 259)
    assert np.all(adapted[0, 0, :26] == 0)
    assert np.all(adapted[0, 0, 38:] == 0)
    assert np.array_equal(adapted[0, 0, 26:38], fm.values)


@pytest.mark.parametrize("kind,f", [("filterbank", 26), ("mfcc13", 13), ("mfcc20", 20), ("mfcc40", 40)])
def test_adapt_preserves_central_band(kind, f):
    fm = _feature(kind, f, t=599 if kind == "filterbank" else 259)
    adapted = adapt_input(fm)
    top = (64 - f) // 2
    assert adapted.shape[2] == 64
    assert np.array_equal(adapted[0, 0, top : top + f], fm.values)


# -- Instances ---------------------------------------------------------

def test_forward_rows_sum_to_one(rng):
    model = ModelInstance(build_architecture("cnn"), (1, 64, 259), seed=1)
    batch = rng.standard_normal((3, 1, 64, 259)).astype(np.float32)
    probs = model.forward(batch)
    assert probs.shape == (3, 5)
    assert np.abs(probs.sum(axis=1) - 1.0).max() < 1e-6


def test_untrained_models_near_uniform(rng):
    batch = rng.standard_normal((2, 1, 64, 259)).astype(np.float32)
    for seed in range(20):
        model = ModelInstance(build_architecture("cnn"), (1, 64, 259), seed=seed)
        probs = model.forward(batch)
        assert np.all(probs >= 0.05) and np.all(probs <= 0.6), seed


def test_eval_forward_deterministic_after_checkpoint(tmp_path, rng):
    model = ModelInstance(build_ymcm(), (1, 64, 259), seed=3)
    batch = rng.standard_normal((2, 1, 64, 259)).astype(np.float32)
    # a training step so batchnorm has usable running statistics
    tape = ad.Tape()
    logits = model.forward_logits(batch, tape, training=True)
    loss = ad.softmax_cross_entropy(tape, logits, np.eye(5, dtype=np.float32)[[0, 1]])
    tape.backward(loss)
    ad.adam_step(model.parameters, lr=1e-4)
    model.zero_grad()

    before = model.forward(batch)
    path = tmp_path / "model.ymck"
    model.save_checkpoint(path)
    restored = ModelInstance(build_ymcm(), (1, 64, 259), seed=99)
    restored.load_checkpoint(path)
    after = restored.forward(batch)
    assert np.array_equal(before, after)


def test_batch_geometry_mismatch(rng):
    model = ModelInstance(build_architecture("cnn"), (1, 64, 259), seed=1)
    with pytest.raises(GeometryError):
        model.forward(rng.standard_normal((2, 1, 12, 259)).astype(np.float32))


def test_fresh_bn_model_warns_on_eval(rng):
    model = ModelInstance(build_ymcm(), (1, 64, 259), seed=0)
    with pytest.warns(UserWarning, match="identity statistics"):
        model.forward(rng.standard_normal((1, 1, 64, 259)).astype(np.float32))
