import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lesionseg import CodecError, GeometryError, InvalidMaskError, RecordError
from lesionseg.data import (
    Sample,
    SynthOpts,
    normalize,
    pack_records,
    read_netpbm,
    read_records,
    resize,
    synth_generate,
    write_netpbm,
)


class TestNetpbm:
    def test_p6_header_bytes(self, tmp_path):
        img = np.arange(12, dtype=np.uint8).reshape(2, 2, 3)
        path = tmp_path / "t.ppm"
        write_netpbm(path, img)
        raw = path.read_bytes()
        assert raw.startswith(b"P6\n2 2\n255\n")
        assert len(raw) == len(b"P6\n2 2\n255\n") + 12

    def test_roundtrip_rgb(self, tmp_path, rng):
        img = rng.integers(0, 256, size=(7, 5, 3), dtype=np.uint8)
        path = tmp_path / "t.ppm"
        write_netpbm(path, img)
        assert np.array_equal(read_netpbm(path), img)

    def test_roundtrip_gray(self, tmp_path, rng):
        img = rng.integers(0, 256, size=(4, 9), dtype=np.uint8)
        path = tmp_path / "t.pgm"
        write_netpbm(path, img)
        assert np.array_equal(read_netpbm(path), img)

    def test_write_read_write_identical(self, tmp_path, rng):
        img = rng.integers(0, 256, size=(6, 6, 3), dtype=np.uint8)
        a, b = tmp_path / "a.ppm", tmp_path / "b.ppm"
        write_netpbm(a, img)
        write_netpbm(b, read_netpbm(a))
        assert a.read_bytes() == b.read_bytes()

    def test_maxval_65535_rejected(self, tmp_path):
        path = tmp_path / "bad.ppm"
        path.write_bytes(b"P6\n2 2\n65535\n" + bytes(24))
        with pytest.raises(CodecError):
            read_netpbm(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.ppm"
        path.write_bytes(b"P3\n1 1\n255\n0 0 0")
        with pytest.raises(CodecError):
            read_netpbm(path)

    def test_truncated_body_reports_offset(self, tmp_path):
        path = tmp_path / "bad.ppm"
        path.write_bytes(b"P6\n2 2\n255\n" + bytes(5))
        with pytest.raises(CodecError) as exc:
            read_netpbm(path)
        assert exc.value.offset is not None

    def test_comments_and_whitespace_tolerated(self, tmp_path):
        path = tmp_path / "c.pgm"
        path.write_bytes(b"P5 # gray\n# comment line\n  3\t1 # dims\n255\n" + bytes([9, 8, 7]))
        assert read_netpbm(path).tolist() == [[9, 8, 7]]

    @given(h=st.integers(1, 8), w=st.integers(1, 8),
           gray=st.booleans(), seed=st.integers(0, 2**32 - 1))
    @settings(max_examples=40, deadline=None)
    def test_roundtrip_property(self, tmp_path_factory, h, w, gray, seed):
        gen = np.random.default_rng(seed)
        shape = (h, w) if gray else (h, w, 3)
        img = gen.integers(0, 256, size=shape, dtype=np.uint8)
        path = tmp_path_factory.mktemp("pbm") / "x.pnm"
        write_netpbm(path, img)
        assert np.array_equal(read_netpbm(path), img)


class TestResize:
    def test_nearest_block_structure(self):
        src = np.array([[0, 255], [255, 0]], dtype=np.uint8)
        out = resize(src, 4, 4, "nearest")
        want = np.array([
            [0, 0, 255, 255],
            [0, 0, 255, 255],
            [255, 255, 0, 0],
            [255, 255, 0, 0],
        ], dtype=np.uint8)
        assert np.array_equal(out, want)

    @pytest.mark.parametrize("mode", ["nearest", "bilinear"])
    def test_identity_at_equal_dims(self, mode, rng):
        img = rng.integers(0, 256, size=(9, 7, 3), dtype=np.uint8)
        assert np.array_equal(resize(img, 9, 7, mode), img)

    def test_nearest_keeps_mask_binary(self, rng):
        mask = (rng.random((13, 11)) > 0.5).astype(np.uint8)
        out = resize(mask, 65, 65, "nearest")
        assert set(np.unique(out)) <= {0, 1}

    def test_bilinear_endpoints(self):
        row = np.array([[0, 16]], dtype=np.uint8)
        out = resize(row, 1, 3, "bilinear")
        assert out.tolist() == [[0, 8, 16]]

    def test_zero_target_rejected(self):
        with pytest.raises(GeometryError):
            resize(np.zeros((4, 4), dtype=np.uint8), 0, 4)

    def test_bilinear_range_clamped(self, rng):
        img = rng.integers(0, 256, size=(5, 5), dtype=np.uint8)
        out = resize(img, 31, 31, "bilinear")
        assert out.dtype == np.uint8
        assert out.min() >= 0 and out.max() <= 255


class TestNormalize:
    def test_extremes_and_midpoint(self):
        img = np.zeros((1, 3, 3), dtype=np.uint8)
        img[0, 0] = (0, 255, 51)
        t = normalize(img)
        assert t.shape == (3, 1, 3)
        assert t.dtype == np.float32
        assert t[0, 0, 0] == -1.0
        assert t[1, 0, 0] == 1.0
        assert abs(t[2, 0, 0] - (-0.6)) < 1e-6

    def test_rejects_grayscale(self):
        with pytest.raises(GeometryError):
            normalize(np.zeros((4, 4), dtype=np.uint8))


class TestSynth:
    def test_count_and_fraction_bounds(self):
        opts = SynthOpts(count=5, seed=9, size=65)
        samples = synth_generate(opts)
        assert len(samples) == 5
        for s in samples:
            frac = s.mask.mean()
            assert 0.05 <= frac <= 0.45
            assert set(np.unique(s.mask)) <= {0, 1}
            assert s.image.shape == (65, 65, 3)
            assert (s.orig_h, s.orig_w) == (65, 65)

    def test_deterministic_in_seed(self):
        a = synth_generate(SynthOpts(count=3, seed=4, size=65, hair_prob=1.0))
        b = synth_generate(SynthOpts(count=3, seed=4, size=65, hair_prob=1.0))
        for sa, sb in zip(a, b):
            assert sa.id == sb.id
            assert sa.image.tobytes() == sb.image.tobytes()
            assert sa.mask.tobytes() == sb.mask.tobytes()

    def test_different_seeds_differ(self):
        a = synth_generate(SynthOpts(count=1, seed=1, size=65))
        b = synth_generate(SynthOpts(count=1, seed=2, size=65))
        assert a[0].image.tobytes() != b[0].image.tobytes()

    def test_mask_matches_regenerated_region(self):
        a = synth_generate(SynthOpts(count=2, seed=31, size=65))
        b = synth_generate(SynthOpts(count=2, seed=31, size=65))
        for sa, sb in zip(a, b):
            inter = np.logical_and(sa.mask, sb.mask).sum()
            union = np.logical_or(sa.mask, sb.mask).sum()
            assert inter == union  # Jaccard exactly 1.0

    def test_hair_leaves_mask_untouched(self):
        bald = synth_generate(SynthOpts(count=4, seed=77, size=65, hair_prob=0.0))
        hairy = synth_generate(SynthOpts(count=4, seed=77, size=65, hair_prob=1.0))
        for sa, sb in zip(bald, hairy):
            assert np.array_equal(sa.mask, sb.mask)

    def test_lesion_darker_than_skin(self):
        for s in synth_generate(SynthOpts(count=3, seed=15, size=65, hair_prob=0.0)):
            inside = s.image[s.mask == 1].mean()
            outside = s.image[s.mask == 0].mean()
            assert inside < outside - 30


class TestRecords:
    @staticmethod
    def sample(ident, h, w, gen):
        return Sample(
            id=ident,
            image=gen.integers(0, 256, size=(h, w, 3), dtype=np.uint8),
            mask=(gen.random((h, w)) > 0.6).astype(np.uint8),
            orig_h=h * 3, orig_w=w * 2)

    def test_roundtrip(self, tmp_path, rng):
        samples = [self.sample(f"s{i}", 6, 5, rng) for i in range(4)]
        path = tmp_path / "d.lsr"
        pack_records(samples, path)
        back = read_records(path)
        assert len(back) == 4
        for a, b in zip(samples, back):
            assert a.id == b.id
            assert np.array_equal(a.image, b.image)
            assert np.array_equal(a.mask, b.mask)
            assert (a.orig_h, a.orig_w) == (b.orig_h, b.orig_w)

    def test_empty_file_is_eight_bytes(self, tmp_path):
        path = tmp_path / "empty.lsr"
        pack_records([], path)
        assert path.read_bytes() == b"LSR1" + bytes(4)
        assert read_records(path) == []

    def test_mask_byte_seven_rejected_on_read(self, tmp_path, rng):
        s = self.sample("x", 3, 3, rng)
        path = tmp_path / "bad.lsr"
        pack_records([s], path)
        raw = bytearray(path.read_bytes())
        raw[-1] = 7  # corrupt the final mask byte
        path.write_bytes(bytes(raw))
        with pytest.raises(RecordError):
            read_records(path)

    def test_nonbinary_mask_rejected_on_pack(self, tmp_path, rng):
        s = self.sample("x", 3, 3, rng)
        s.mask[0, 0] = 7
        with pytest.raises(InvalidMaskError):
            pack_records([s], tmp_path / "bad.lsr")

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.lsr"
        path.write_bytes(b"NOPE" + bytes(4))
        with pytest.raises(RecordError):
            read_records(path)

    def test_truncation_detected(self, tmp_path, rng):
        path = tmp_path / "t.lsr"
        pack_records([self.sample("x", 4, 4, rng)], path)
        path.write_bytes(path.read_bytes()[:-3])
        with pytest.raises(RecordError):
            read_records(path)

    def test_trailing_garbage_detected(self, tmp_path, rng):
        path = tmp_path / "t.lsr"
        pack_records([self.sample("x", 4, 4, rng)], path)
        path.write_bytes(path.read_bytes() + b"zz")
        with pytest.raises(RecordError):
            read_records(path)

    @given(n=st.integers(0, 4), h=st.integers(1, 6), w=st.integers(1, 6),
           seed=st.integers(0, 2**32 - 1))
    @settings(max_examples=30, deadline=None)
    def test_roundtrip_property(self, tmp_path_factory, n, h, w, seed):
        gen = np.random.default_rng(seed)
        samples = [self.sample(f"id_{i}", h, w, gen) for i in range(n)]
        path = tmp_path_factory.mktemp("lsr") / "x.lsr"
        pack_records(samples, path)
        pack_records(read_records(path), path.with_suffix(".2"))
        assert path.read_bytes() == path.with_suffix(".2").read_bytes()

    def test_binary_masks_survive_pipeline(self, rng, tmp_path):
        samples = synth_generate(SynthOpts(count=2, seed=3, size=33))
        path = tmp_path / "p.lsr"
        pack_records(samples, path)
        for s in read_records(path):
            small = resize(s.mask, 17, 17, "nearest")
            assert set(np.unique(small)) <= {0, 1}
