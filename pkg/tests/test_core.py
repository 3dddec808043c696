import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sifa.core import (
    ConfigError,
    DomainTag,
    Image,
    InvalidInputError,
    InvalidLabelError,
    LabelMask,
    LossWeights,
    Sample,
    normalize_zscore,
    one_hot,
    validate_loss_weights,
)


def test_constant_image_maps_to_zeros():
    out = normalize_zscore(np.full((4, 4), 7.0))
    assert np.array_equal(out, np.zeros((4, 4)))


def test_two_pixel_zscore():
    # mean 2, population std 1
    out = normalize_zscore(np.array([[1.0, 3.0]]))
    np.testing.assert_allclose(out, [[-1.0, 1.0]], atol=1e-12)


def test_normalized_input_is_fixed_point():
    x = normalize_zscore(np.random.default_rng(0).normal(size=(16, 16)))
    np.testing.assert_allclose(normalize_zscore(x), x, atol=1e-6)


def test_normalize_keeps_domain_tag():
    img = Image(np.arange(16, dtype=np.float32).reshape(4, 4), DomainTag.TARGET)
    out = normalize_zscore(img)
    assert out.domain == DomainTag.TARGET
    assert abs(out.data.mean()) <= 1e-5
    assert abs(out.data.std() - 1) <= 1e-4


def test_normalize_empty_raises():
    with pytest.raises(InvalidInputError):
        normalize_zscore(np.zeros((0, 4)))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (8, 8), elements=st.floats(-1e3, 1e3)))
def test_normalize_moments_and_idempotence(x):
    out = normalize_zscore(x)
    if np.all(out == 0):
        return
    assert abs(out.mean()) <= 1e-5
    assert abs(out.std() - 1) <= 1e-4
    np.testing.assert_allclose(normalize_zscore(out), out, atol=1e-6)


@pytest.mark.parametrize("label, expected", [(0, [1, 0, 0, 0, 0]), (4, [0, 0, 0, 0, 1])])
def test_one_hot_single_pixel(label, expected):
    assert one_hot(np.array([[label]]), 5)[0, 0].tolist() == expected


def test_one_hot_matches_loop_oracle():
    mask = np.array([[0, 1], [2, 3]])
    expected = np.zeros((2, 2, 5))
    for r in range(2):
        for c in range(2):
            expected[r, c, mask[r, c]] = 1.0
    assert np.array_equal(one_hot(mask, 5), expected)


def test_one_hot_rejects_out_of_range():
    with pytest.raises(InvalidLabelError):
        one_hot(np.array([[5]]), 5)


@settings(max_examples=100, deadline=None)
@given(arrays(np.int64, st.tuples(st.integers(1, 12), st.integers(1, 12)), elements=st.integers(0, 4)))
def test_one_hot_argmax_roundtrip(mask):
    oh = one_hot(mask, 5)
    assert np.all(oh.sum(-1) == 1)
    assert np.array_equal(oh.argmax(-1), mask)


def test_loss_weights_defaults_ok():
    validate_loss_weights(LossWeights(1, 1, 1, 1, 1, 1))


@pytest.mark.parametrize("field_name, value", [("lambda_cyc", -0.1), ("lambda_seg", 0.0), ("alpha", -1.0), ("lambda_adv_p", float("nan"))])
def test_loss_weights_errors_name_the_field(field_name, value):
    w = LossWeights()
    setattr(w, field_name, value)
    with pytest.raises(ConfigError) as exc:
        validate_loss_weights(w)
    assert exc.value.field == field_name
    assert field_name in str(exc.value)


def test_label_mask_and_sample_invariants():
    with pytest.raises(InvalidLabelError):
        LabelMask(np.array([[0, 5]]))
    with pytest.raises(InvalidInputError):
        Sample(Image(np.zeros((4, 4))), LabelMask(np.zeros((4, 2), dtype=np.uint8)))
