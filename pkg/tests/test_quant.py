import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from src.quant.bitpack import pack_codes, packed_nbytes, unpack_codes
from src.quant.quantizer import (FULL_PRECISION, bitwidth_for_ratio, dequantize, payload_nbytes, quantize,
                                 requantize)
from src.service.errors import FormatError, NumericError


@settings(max_examples=200, deadline=None)
@given(st.sampled_from([1, 2, 4, 8]).flatmap(
    lambda b: st.tuples(st.just(b), st.lists(st.integers(0, (1 << b) - 1), max_size=300))))
def test_pack_unpack_is_a_bijection(case):
    bitwidth, values = case
    codes = np.array(values, dtype=np.uint8)
    packed = pack_codes(codes, bitwidth)
    assert len(packed) == packed_nbytes(len(values), bitwidth)
    assert unpack_codes(packed, bitwidth, len(values)).tolist() == values


def test_first_code_lands_in_the_lowest_bits():
    assert pack_codes(np.array([1, 2, 3, 0]), 2) == bytes([0b00111001])
    assert pack_codes(np.array([0xA, 0x5]), 4) == bytes([0x5A])


def test_unpack_rejects_bad_payloads():
    with pytest.raises(FormatError):
        unpack_codes(b"\x00\x00", 4, 2)
    with pytest.raises(FormatError):
        unpack_codes(b"\xf0", 4, 1)
    with pytest.raises(FormatError):
        unpack_codes(b"\x00", 3, 1)


def test_pack_rejects_codes_that_do_not_fit():
    with pytest.raises(ValueError):
        pack_codes(np.array([4]), 2)


@pytest.mark.parametrize("bitwidth", [8, 4, 2])
def test_error_is_within_half_a_step(bitwidth, rng):
    block = rng.normal(0.0, 3.0, size=(2, 2, 25, 50, 20)).astype(np.float32)
    payload = quantize(block, bitwidth)
    error = np.abs(dequantize(payload) - block)
    bound = payload.scale[:, :, None] / 2
    assert np.all(error <= bound * (1 + 1e-5) + 1e-5)


def test_constant_channels_are_exact():
    block = np.full((1, 2, 16, 2, 4), 1.5, np.float32)
    payload = quantize(block, 2)
    assert np.all(payload.scale == 1.0)
    np.testing.assert_array_equal(dequantize(payload), block)


def test_full_precision_round_trip_is_exact(rng):
    block = rng.normal(size=(2, 2, 16, 4, 16)).astype(np.float32)
    payload = quantize(block, FULL_PRECISION)
    assert payload.nbytes == block.size * 4
    np.testing.assert_array_equal(dequantize(payload), block)


def test_payload_sizes(rng):
    block = rng.normal(size=(2, 2, 16, 4, 16)).astype(np.float32)
    for bitwidth in (8, 4, 2):
        payload = quantize(block, bitwidth)
        assert payload.nbytes == payload_nbytes(16, 256, bitwidth) == 16 * 256 * bitwidth // 8
        assert payload.metadata_nbytes == 2 * 4 * 256


def test_non_finite_values_are_rejected():
    block = np.zeros((1, 2, 4, 1, 2), np.float32)
    block[0, 0, 0, 0, 0] = np.nan
    with pytest.raises(NumericError):
        quantize(block, 8)


def test_requantize_only_goes_down(rng):
    block = rng.normal(size=(1, 2, 16, 2, 4)).astype(np.float32)
    payload = quantize(block, 8)
    lower = requantize(payload, 4)
    assert lower.bitwidth == 4 and lower.shape == payload.shape
    with pytest.raises(ValueError):
        requantize(lower, 8)


def test_bitwidth_for_ratio():
    assert [bitwidth_for_ratio(r) for r in (1.0, 0.5, 0.25)] == [8, 4, 2]
    with pytest.raises(ValueError):
        bitwidth_for_ratio(0.3)


def test_ramp_is_reconstructed_exactly_at_two_bits():
    block = np.array([0.0, 1.0, 2.0, 3.0], np.float32).reshape(1, 1, 4, 1, 1)
    payload = quantize(block, 2)
    assert payload.scale.item() == 1.0 and payload.zero_point.item() == 0.0
    assert payload.codes().ravel().tolist() == [0, 1, 2, 3]
    np.testing.assert_array_equal(dequantize(payload), block)


def test_requantize_halves_the_payload_each_step(rng):
    block = rng.normal(size=(2, 2, 16, 4, 16)).astype(np.float32)
    eight = quantize(block, 8)
    four = requantize(eight, 4)
    two = requantize(four, 2)
    assert [p.nbytes for p in (eight, four, two)] == [4096, 2048, 1024]
    assert requantize(eight, 2).nbytes == 1024


def test_requantized_error_is_bounded_by_the_new_step(rng):
    block = rng.normal(0.0, 2.0, size=(2, 2, 16, 4, 16)).astype(np.float32)
    eight = quantize(block, 8)
    two = requantize(eight, 2)
    error = np.abs(dequantize(two) - dequantize(eight))
    assert np.all(error <= two.scale[:, :, None] / 2 * (1 + 1e-5) + 1e-5)


@pytest.mark.parametrize("bitwidth", [8, 4, 2])
def test_quantizing_a_reconstruction_keeps_the_codes(bitwidth, rng):
    block = rng.normal(size=(2, 2, 16, 4, 16)).astype(np.float32)
    payload = quantize(block, bitwidth)
    again = quantize(dequantize(payload), bitwidth)
    np.testing.assert_array_equal(again.codes(), payload.codes())
