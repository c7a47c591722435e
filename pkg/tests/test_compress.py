import pytest
import torch

from reelnet.errors import ConfigError, SessionError
from reelnet.services.compress import (
    QuantizedStore,
    QuantizedTensor,
    bpp,
    dequantize,
    dequantize_tensor,
    quantize,
    quantize_tensor,
    size_breakdown,
)
from reelnet.services.model import decode_session
from reelnet.services.subnet import SessionMaskSet
from reelnet.services.training import train_session


def one_tensor_store(numel=10, bits=32, sessions=1):
    """Store with a single score-ranked tensor and no heads."""
    masks = SessionMaskSet({'w': (numel,)})
    for _ in range(sessions):
        masks.add_session({'w': torch.zeros(numel, dtype=torch.bool)})
    weights = {'w': quantize_tensor(torch.zeros(numel), bits)}
    return QuantizedStore(bits, weights, {}, masks)


class TestQuantizeTensor:
    def test_constant_tensor_is_exact(self):
        x = torch.full((5, 5), 0.37)
        assert torch.equal(dequantize_tensor(quantize_tensor(x, 8)), x)

    def test_thirty_two_bits_is_identity(self):
        x = torch.randn(7, 3)
        q = quantize_tensor(x, 32)
        assert q.bits == 32
        assert torch.equal(dequantize_tensor(q), x)

    @pytest.mark.parametrize('bits', [4, 8, 16])
    def test_error_within_half_step(self, bits):
        x = torch.linspace(-1.0, 1.0, 1000, dtype=torch.float64)
        restored = dequantize_tensor(quantize_tensor(x, bits))
        step = 2.0 / (2 ** bits - 1)
        assert (restored - x).abs().max().item() <= step / 2 + 1e-12

    def test_code_types(self):
        assert quantize_tensor(torch.randn(4), 8).codes.dtype == torch.uint8
        assert quantize_tensor(torch.randn(4), 16).codes.dtype == torch.int32

    def test_range_taken_over_support(self):
        x = torch.tensor([0.0, 1.0, 100.0])
        q = quantize_tensor(x, 8, support=torch.tensor([True, True, False]))
        assert q.minimum == [0.0]
        assert q.scale == pytest.approx([1.0 / 255])
        assert q.codes.tolist() == [0, 255, 0]

    @pytest.mark.parametrize('bits', [0, 3, 12, 64])
    def test_unsupported_bits(self, bits):
        with pytest.raises(ConfigError):
            quantize_tensor(torch.zeros(3), bits)

    def test_shape_helpers(self):
        q = QuantizedTensor(8, [0.0, 0.0], [1.0, 1.0], torch.zeros(2, 3, dtype=torch.uint8))
        assert q.shape == (2, 3)
        assert q.numel == 6
        assert q.channels == 2

    def test_one_range_per_output_channel(self):
        x = torch.stack([torch.linspace(0.0, 1.0, 50), torch.linspace(-500.0, 500.0, 50)]).double()
        q = quantize_tensor(x, 8)
        assert q.channels == 2
        assert q.minimum == pytest.approx([0.0, -500.0])
        restored = dequantize_tensor(q)
        assert (restored[0] - x[0]).abs().max().item() <= 0.5 / 255 + 1e-12
        assert (restored[1] - x[1]).abs().max().item() <= 500.0 / 255 + 1e-9

    def test_channels_follow_first_dim(self):
        assert quantize_tensor(torch.randn(3, 2, 2, 2), 8).channels == 3
        assert quantize_tensor(torch.randn(7), 8).channels == 1
        assert quantize_tensor(torch.randn(3, 2), 32).channels == 0

    def test_channel_without_support(self):
        x = torch.tensor([[1.0, 2.0], [3.0, 9.0]], dtype=torch.float64)
        support = torch.tensor([[True, True], [False, False]])
        q = quantize_tensor(x, 8, support=support)
        assert q.minimum == [1.0, 0.0]
        assert q.scale[1] == 0.0
        assert q.codes[1].tolist() == [0, 0]
        assert torch.allclose(dequantize_tensor(q)[0], x[0], atol=1e-12)

    def test_tensor_granularity_uses_one_range(self):
        x = torch.stack([torch.linspace(0.0, 1.0, 50), torch.linspace(-500.0, 500.0, 50)]).double()
        q = quantize_tensor(x, 8, granularity='tensor')
        assert q.channels == 1
        assert q.minimum == pytest.approx([-500.0])
        assert q.scale == pytest.approx([1000.0 / 255])
        assert (dequantize_tensor(q) - x).abs().max().item() <= 500.0 / 255 + 1e-9

    def test_unknown_granularity(self):
        with pytest.raises(ConfigError):
            quantize_tensor(torch.zeros(2, 2), 8, granularity='row')


class TestBitsPerPixel:
    def test_ten_bit_mask_over_one_pixel(self):
        assert bpp(one_tensor_store(), [(1, 1, 1)]) == pytest.approx(10.0)

    def test_padded_rounds_masks_to_bytes(self):
        assert bpp(one_tensor_store(), [(1, 1, 1)], mode='padded') == pytest.approx(16.0)

    def test_padded_adds_ranges(self):
        store = one_tensor_store(bits=8)
        breakdown = size_breakdown(store, [(1, 1, 1)], 'padded')
        assert breakdown.range_bits == 64
        assert breakdown.total_bits == 16 + 64

    def test_padded_charges_every_channel(self):
        masks = SessionMaskSet({'w': (3, 4)})
        masks.add_session({'w': torch.ones(3, 4, dtype=torch.bool)})
        store = QuantizedStore(8, {'w': quantize_tensor(torch.randn(3, 4), 8)}, {}, masks)
        assert size_breakdown(store, [(1, 1, 1)], 'padded').range_bits == 3 * 64
        assert size_breakdown(store, [(1, 1, 1)], 'exact').range_bits == 0

    def test_doubling_frames_halves_bpp(self):
        store = one_tensor_store()
        assert bpp(store, [(2, 1, 1)]) == pytest.approx(bpp(store, [(1, 1, 1)]) / 2)

    def test_unknown_mode(self):
        with pytest.raises(ConfigError):
            bpp(one_tensor_store(), [(1, 1, 1)], mode='approx')

    def test_missing_frame_dims(self):
        with pytest.raises(SessionError):
            bpp(one_tensor_store(sessions=2), [(1, 1, 1)])

    def test_weights_charged_to_first_session(self):
        masks = SessionMaskSet({'w': (4,)})
        masks.add_session({'w': torch.tensor([True, True, False, False])})
        masks.add_session({'w': torch.tensor([False, True, True, False])})
        store = QuantizedStore(8, {'w': quantize_tensor(torch.randn(4), 8)}, {}, masks)
        rows = size_breakdown(store, [(1, 1, 1), (1, 1, 1)]).per_session
        assert [r['weight_bits'] for r in rows] == [16, 8]
        assert [r['mask_bits'] for r in rows] == [4, 4]


class TestQuantizedModel:
    def test_quality_improves_with_bits(self, tiny_state, synthetic_sessions):
        video = synthetic_sessions[0]
        train_session(video, tiny_state, epochs=2)
        config = tiny_state.model_config
        reference = decode_session(tiny_state.params, tiny_state.masks, config, 0, 4)
        errors = []
        for bits in (4, 8, 16):
            params = dequantize(quantize(tiny_state.params, bits, tiny_state.masks))
            decoded = decode_session(params, tiny_state.masks, config, 0, 4)
            errors.append((decoded - reference).abs().max().item())
        assert errors[0] >= errors[1] >= errors[2]
        assert errors[2] < 1e-3

    def test_full_precision_store_decodes_identically(self, tiny_state, synthetic_sessions):
        train_session(synthetic_sessions[0], tiny_state, epochs=1)
        config = tiny_state.model_config
        store = quantize(tiny_state.params, 32, tiny_state.masks)
        assert store.stats['max_abs_error'] == 0.0
        assert torch.equal(
            decode_session(dequantize(store), tiny_state.masks, config, 0, 4),
            decode_session(tiny_state.params, tiny_state.masks, config, 0, 4),
        )

    def test_dequantized_store_has_no_scores(self, tiny_state, synthetic_sessions):
        train_session(synthetic_sessions[0], tiny_state, epochs=1)
        params = dequantize(quantize(tiny_state.params, 8, tiny_state.masks))
        assert len(params.scores) == 0
        assert set(params.heads) == {0}

    def test_channel_ranges_are_no_wider(self, tiny_state, synthetic_sessions):
        train_session(synthetic_sessions[0], tiny_state, epochs=2)
        per_channel = quantize(tiny_state.params, 4, tiny_state.masks)
        per_tensor = quantize(tiny_state.params, 4, tiny_state.masks, granularity='tensor')
        for name, q in per_tensor.weights.items():
            assert q.channels == 1
            assert max(per_channel.weights[name].scale) <= q.scale[0] * (1 + 1e-12)
