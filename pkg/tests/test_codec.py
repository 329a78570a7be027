import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from probestream.codec import (
    BLOCK_SIDE,
    MODE_DELTA,
    MODE_RAW,
    MODE_SKIP,
    CodecStreamState,
    CorruptFrameError,
    DimensionMismatchError,
    EncodedFrame,
    EntropyDecodeError,
    MissingReferenceError,
    SequenceError,
    block_mode_select,
    compression_ratio,
    decode_frame,
    encode_frame,
    entropy_decode,
    entropy_encode,
)
from probestream.packing import PlaneKind, PlaneSet
from probestream.varint import (
    decode_uvarint,
    decode_uvarint_array,
    encode_uvarint,
    encode_uvarint_array,
    unzigzag,
    zigzag,
)


def color_planes(rng, h=48, w=48):
    return PlaneSet(
        PlaneKind.COLOR_10IN16,
        rng.integers(0, 1024, size=(3, h, w), dtype=np.uint16),
    )


def vis_planes(rng, h=48, w=48):
    return PlaneSet(
        PlaneKind.VISIBILITY_BYTES,
        rng.integers(0, 256, size=(3, h, w), dtype=np.uint8),
    )


def stream_pair(gop=30):
    return (
        CodecStreamState(1, role="encoder", gop_length=gop),
        CodecStreamState(1, role="decoder", gop_length=gop),
    )


class TestVarint:
    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**34))
    def test_scalar_round_trip(self, value):
        value, offset = decode_uvarint(encode_uvarint(value) + b"xx")
        assert decode_uvarint(encode_uvarint(value))[0] == value

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.integers(0, 2**34), max_size=64))
    def test_array_round_trip(self, values):
        arr = np.array(values, dtype=np.uint64)
        blob = encode_uvarint_array(arr)
        # array path agrees with the scalar path byte for byte
        assert blob == b"".join(encode_uvarint(int(v)) for v in values)
        out, used = decode_uvarint_array(blob, len(values))
        assert used == len(blob)
        assert np.array_equal(out, arr)

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.integers(-(2**30), 2**30), max_size=32))
    def test_zigzag_round_trip(self, values):
        arr = np.array(values, dtype=np.int64)
        assert np.array_equal(unzigzag(zigzag(arr)), arr)

    def test_zigzag_keeps_small_magnitudes_small(self):
        assert list(zigzag(np.array([0, -1, 1, -2, 2]))) == [0, 1, 2, 3, 4]


class TestEntropy:
    def test_zeros_collapse(self):
        encoded = entropy_encode(b"\0" * 4096)
        assert len(encoded) <= 8
        assert entropy_decode(encoded) == b"\0" * 4096

    def test_random_expansion_bounded(self):
        rng = np.random.default_rng(0)
        data = rng.integers(0, 256, size=65536, dtype=np.uint8).tobytes()
        encoded = entropy_encode(data)
        assert len(encoded) <= len(data) * 1.03
        assert entropy_decode(encoded) == data

    def test_empty(self):
        assert entropy_encode(b"") == b""
        assert entropy_decode(b"") == b""

    def test_lone_zeros_stay_literal(self):
        data = b"\x01\x00\x02\x00\x03"
        assert entropy_decode(entropy_encode(data)) == data

    @settings(max_examples=60, deadline=None)
    @given(st.binary(max_size=2048))
    def test_round_trip_property(self, data):
        assert entropy_decode(entropy_encode(data)) == data

    def test_malformed_stream_rejected(self):
        with pytest.raises(EntropyDecodeError):
            entropy_decode(encode_uvarint(100 << 1) + b"short")
        with pytest.raises(EntropyDecodeError):
            entropy_decode(b"\xff")  # truncated varint


class TestBlockModes:
    def test_identical_blocks_skip(self):
        rng = np.random.default_rng(1)
        block = rng.integers(0, 1024, size=(16, 16), dtype=np.uint16)
        assert block_mode_select(block, block.copy()) == MODE_SKIP

    def test_constant_offset_prefers_delta(self):
        rng = np.random.default_rng(2)
        ref = rng.integers(0, 512, size=(16, 16), dtype=np.uint16)
        cur = ref + 3
        assert block_mode_select(cur, ref) == MODE_DELTA

    def test_no_reference_never_skip(self):
        rng = np.random.default_rng(3)
        block = rng.integers(0, 1024, size=(16, 16), dtype=np.uint16)
        assert block_mode_select(block, None) == MODE_RAW
        assert block_mode_select(block, block.copy()) == MODE_SKIP


class TestFrameCodec:
    def test_first_frame_is_key(self):
        rng = np.random.default_rng(4)
        enc, _ = stream_pair()
        frame = encode_frame(color_planes(rng), enc, force_key=False)
        assert frame.key

    def test_identical_p_frame_all_skip(self):
        rng = np.random.default_rng(5)
        enc, dec = stream_pair()
        planes = color_planes(rng, 64, 64)
        decode_frame(encode_frame(planes, enc), dec)
        frame = encode_frame(planes.copy(), enc)
        assert not frame.key
        # every block byte is SKIP, nothing else in the payload
        assert set(frame.payload) == {MODE_SKIP}
        assert frame.encoded_size <= planes.data.nbytes / 100
        assert decode_frame(frame, dec).equals(planes)

    def test_noise_iframe_expansion_bounded(self):
        rng = np.random.default_rng(6)
        enc, _ = stream_pair()
        planes = color_planes(rng, 64, 64)
        planes.data[:] = rng.integers(0, 2**16, size=planes.data.shape)
        frame = encode_frame(planes, enc, force_key=True)
        assert frame.encoded_size <= planes.data.nbytes * 1.05

    def test_round_trip_random_frames(self):
        rng = np.random.default_rng(7)
        enc, dec = stream_pair(gop=13)
        cur = color_planes(rng, 40, 56)
        for _ in range(60):
            mutate = rng.random(cur.data.shape) < 0.1
            cur.data[mutate] = rng.integers(0, 1024, size=int(mutate.sum()))
            frame = encode_frame(cur.copy(), enc)
            wire = EncodedFrame.from_bytes(frame.to_bytes())
            out = decode_frame(wire, dec)
            assert out.equals(cur)
            assert np.array_equal(enc.reference.data, dec.reference.data)

    def test_round_trip_uint8_planes(self):
        rng = np.random.default_rng(8)
        enc, dec = stream_pair()
        for _ in range(5):
            planes = vis_planes(rng, 36, 44)
            assert decode_frame(encode_frame(planes, enc), dec).equals(planes)

    def test_gop_boundary_forces_key(self):
        rng = np.random.default_rng(9)
        enc, _ = stream_pair(gop=4)
        planes = color_planes(rng, 32, 32)
        keys = [encode_frame(planes, enc).key for _ in range(9)]
        assert keys == [True, False, False, False, True, False, False, False, True]

    def test_key_frame_decodes_with_empty_state(self):
        rng = np.random.default_rng(10)
        enc, _ = stream_pair()
        planes = color_planes(rng)
        encode_frame(color_planes(rng), enc)  # advance the stream a bit
        frame = encode_frame(planes, enc, force_key=True)
        fresh = CodecStreamState(1, role="decoder")
        assert decode_frame(frame, fresh).equals(planes)

    def test_key_frame_decode_independent_of_prior_state(self):
        rng = np.random.default_rng(11)
        enc, _ = stream_pair()
        encode_frame(color_planes(rng), enc)
        frame = encode_frame(color_planes(rng), enc, force_key=True)
        poisoned = CodecStreamState(1, role="decoder")
        poisoned.reference = color_planes(rng)
        poisoned.frame_count = 999
        fresh = CodecStreamState(1, role="decoder")
        assert decode_frame(frame, poisoned).equals(decode_frame(frame, fresh))

    def test_p_frame_without_reference_errors(self):
        rng = np.random.default_rng(12)
        enc, _ = stream_pair()
        encode_frame(color_planes(rng), enc)
        p_frame = encode_frame(color_planes(rng), enc)
        assert not p_frame.key
        with pytest.raises(MissingReferenceError):
            decode_frame(p_frame, CodecStreamState(1, role="decoder"))

    def test_out_of_order_p_frame_errors(self):
        rng = np.random.default_rng(13)
        enc, dec = stream_pair()
        decode_frame(encode_frame(color_planes(rng), enc), dec)
        encode_frame(color_planes(rng), enc)  # dropped frame
        late = encode_frame(color_planes(rng), enc)
        with pytest.raises(SequenceError):
            decode_frame(late, dec)

    def test_corrupt_payload_detected(self):
        rng = np.random.default_rng(14)
        enc, _ = stream_pair()
        blob = bytearray(encode_frame(color_planes(rng), enc).to_bytes())
        blob[40] ^= 0xFF
        with pytest.raises(CorruptFrameError):
            EncodedFrame.from_bytes(bytes(blob))

    def test_dimension_mismatch_rejected(self):
        rng = np.random.default_rng(15)
        enc, _ = stream_pair()
        encode_frame(color_planes(rng, 32, 32), enc)
        with pytest.raises(DimensionMismatchError):
            encode_frame(color_planes(rng, 48, 32), enc)

    def test_static_sequence_ratios(self):
        rng = np.random.default_rng(16)
        enc, dec = stream_pair(gop=30)
        planes = color_planes(rng, 80, 80)
        sizes = []
        for _ in range(30):
            frame = encode_frame(planes.copy(), enc)
            assert decode_frame(frame, dec).equals(planes)
            sizes.append(frame.encoded_size)
        ratios = [planes.data.nbytes / s for s in sizes]
        mean_ratio = planes.data.nbytes * len(sizes) / sum(sizes)
        assert mean_ratio >= 20
        assert all(r >= 100 for r in ratios[1:])  # P-frames alone

    def test_edge_blocks_clipped_not_padded(self):
        rng = np.random.default_rng(17)
        enc, dec = stream_pair()
        planes = color_planes(rng, BLOCK_SIDE + 5, BLOCK_SIDE + 3)
        assert decode_frame(encode_frame(planes, enc), dec).equals(planes)

    def test_ratio_helper(self):
        rng = np.random.default_rng(18)
        enc, _ = stream_pair()
        planes = color_planes(rng)
        frame = encode_frame(planes, enc)
        assert compression_ratio(planes, frame) == planes.data.nbytes / frame.encoded_size
