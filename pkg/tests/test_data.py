import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from crispedge.data import (
    AugmentSpec,
    Ellipse,
    Polygon,
    Sample,
    SynthSpec,
    augment,
    boundary_mask,
    expand_annotations,
    label_map,
    largest_inscribed_rect,
    load_annotation,
    load_dataset,
    load_image,
    load_manifest,
    render_scene,
    rotate_crop,
    sample_scales,
    save_image,
    synth_generate,
    synth_scenes,
    transform_sample,
    write_dataset,
)
from crispedge.errors import FormatError, UsageError


def rect_perimeter_pixels(top, left, height, width):
    """Pixels of a filled rectangle that touch the outside through a 4-neighbour."""
    count = 0
    for r in range(top, top + height):
        for c in range(left, left + width):
            if r in (top, top + height - 1) or c in (left, left + width - 1):
                count += 1
    return count


class TestSynth:
    @pytest.mark.parametrize("top,left,h,w", [(3, 4, 10, 7), (5, 5, 1, 9), (2, 10, 20, 20)])
    def test_rectangle_perimeter(self, top, left, h, w):
        _, ann = render_scene([Polygon.rectangle(top, left, h, w)], [1.0], 0.0, (32, 32))
        assert ann.sum() == rect_perimeter_pixels(top, left, h, w)
        assert ann.sum() == (2 * h + 2 * w - 4 if min(h, w) > 1 else h * w)

    def test_rectangle_fill_exact(self):
        labels = label_map([Polygon.rectangle(3, 4, 5, 6)], (16, 16))
        assert labels.sum() == 30 and labels[3:8, 4:10].all()

    def test_zero_shapes(self):
        (s,) = synth_generate(SynthSpec(shape_count=(0, 0)), 1)
        assert not s.annotation.any()

    def test_deterministic(self):
        a = synth_generate(SynthSpec(seed=3), 3)
        b = synth_generate(SynthSpec(seed=3), 3)
        for x, y in zip(a, b):
            assert x.image.tobytes() == y.image.tobytes()
            assert x.annotation.tobytes() == y.annotation.tobytes()
        c = synth_generate(SynthSpec(seed=4), 1)
        assert c[0].image.tobytes() != a[0].image.tobytes()

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10_000))
    def test_boundary_invariants(self, seed):
        (s,) = synth_generate(SynthSpec(dims=(32, 40), seed=seed), 1)
        a = s.annotation
        assert s.image.shape == a.shape == (32, 40)
        assert set(np.unique(a)) <= {0, 1}
        assert not (a[0].any() or a[-1].any() or a[:, 0].any() or a[:, -1].any())
        assert 0.0 <= s.image.min() and s.image.max() <= 1.0

    def test_boundary_one_pixel_wide(self):
        # a disc's contour never contains a full 2x2 block
        ann = boundary_mask(label_map([Ellipse(16, 16, 9, 9)], (32, 32)))
        blocks = ann[:-1, :-1] & ann[1:, :-1] & ann[:-1, 1:] & ann[1:, 1:]
        assert ann.sum() > 0 and not blocks.any()

    def test_jittered_annotators(self):
        (sc,) = synth_scenes(SynthSpec(annotators=3, jitter=1.0, shape_count=(2, 2)), 1)
        assert len(sc.annotations) == 3
        exact = synth_generate(SynthSpec(shape_count=(2, 2)), 1)[0]
        np.testing.assert_array_equal(sc.annotations[0], exact.annotation)
        np.testing.assert_array_equal(sc.image, exact.image)
        assert any((a != sc.annotations[0]).any() for a in sc.annotations[1:])

    def test_spec_validation(self):
        with pytest.raises(UsageError):
            SynthSpec(dims=(8, 64))
        with pytest.raises(UsageError):
            SynthSpec(noise_sigma=-1)
        with pytest.raises(UsageError):
            synth_generate(SynthSpec(), 0)


class TestExpand:
    def test_five_copies(self):
        img = np.zeros((4, 4))
        out = expand_annotations(img, [np.eye(4, dtype=np.uint8)] * 5)
        assert len(out) == 5 and all(s.image is img for s in out)

    def test_empty_and_mismatch(self):
        assert expand_annotations(np.zeros((4, 4)), []) == []
        with pytest.raises(UsageError):
            expand_annotations(np.zeros((4, 4)), [np.zeros((3, 4))])


def _sample(h=24, w=32, seed=0):
    rng = np.random.default_rng(seed)
    return Sample(rng.uniform(size=(h, w)), (rng.uniform(size=(h, w)) < 0.1).astype(np.uint8), "s")


class TestAugment:
    def test_identity(self):
        s = _sample()
        out = transform_sample(s, 1.0, 0, False)
        np.testing.assert_array_equal(out.image, s.image)
        np.testing.assert_array_equal(out.annotation, s.annotation)
        assert out.id == "s_s1.0_r0_f0"

    def test_right_angle_lossless(self):
        s = _sample()
        img, ann = rotate_crop(s.image, s.annotation, 4, 16)
        assert img.shape == (32, 24)
        np.testing.assert_array_equal(img, np.rot90(s.image))
        back_img, back_ann = rotate_crop(img, ann, 12, 16)
        np.testing.assert_array_equal(back_img, s.image)
        np.testing.assert_array_equal(back_ann, s.annotation)

    @pytest.mark.parametrize("side", [16, 33, 64, 100])
    def test_inscribed_square_at_45(self, side):
        w, h = largest_inscribed_rect(side, side, math.pi / 4)
        assert w == pytest.approx(h)
        assert abs(math.floor(w) - math.floor(side / math.sqrt(2))) <= 1
        img, _ = rotate_crop(np.zeros((side, side)), np.zeros((side, side), np.uint8), 2, 16)
        assert abs(img.shape[0] - math.floor(side / math.sqrt(2))) <= 1

    @settings(max_examples=50, deadline=None)
    @given(st.integers(4, 80), st.integers(4, 80), st.floats(0.01, math.pi / 2 - 0.01))
    def test_inscribed_rect_fits(self, w, h, a):
        cw, ch = largest_inscribed_rect(w, h, a)
        # rotate the crop corners back into the source frame: all inside the w x h box
        c, s = math.cos(a), math.sin(a)
        for sx, sy in ((1, 1), (1, -1), (-1, 1), (-1, -1)):
            x, y = sx * cw / 2, sy * ch / 2
            assert abs(x * c - y * s) <= w / 2 + 1e-6
            assert abs(x * s + y * c) <= h / 2 + 1e-6

    def test_count_formula(self):
        spec = AugmentSpec(scales_per_sample=2)
        res = augment(_sample(64, 64), spec)
        assert res.dropped == 0 and len(res.samples) == 2 * 16 * 2
        for out in res.samples:
            assert out.image.shape == out.annotation.shape
            assert set(np.unique(out.annotation)) <= {0, 1}

    def test_small_crops_dropped(self):
        res = augment(_sample(18, 18), AugmentSpec(scale_range=(1.0, 1.0)))
        assert res.dropped > 0 and len(res.samples) + res.dropped == 32

    def test_scales_stratified_and_deterministic(self):
        spec = AugmentSpec(scales_per_sample=4, seed=1)
        a = sample_scales(spec, "img1")
        assert a == sample_scales(spec, "img1") and a != sample_scales(spec, "img2")
        for j, v in enumerate(a):
            assert 0.7 + 0.15 * j <= v <= 0.7 + 0.15 * (j + 1)

    def test_bad_spec(self):
        with pytest.raises(UsageError):
            AugmentSpec(scale_range=(0.0, 1.0))


class TestNetpbm:
    @pytest.mark.parametrize("binary", [True, False])
    @pytest.mark.parametrize("rgb", [True, False])
    def test_round_trip(self, tmp_path, binary, rgb):
        rng = np.random.default_rng(0)
        shape = (5, 7, 3) if rgb else (5, 7)
        img = rng.integers(0, 256, size=shape) / 255.0
        path = tmp_path / "x.pnm"
        save_image(path, img, binary=binary)
        np.testing.assert_array_equal(load_image(path), img)

    def test_16bit_needs_opt_in(self, tmp_path):
        path = tmp_path / "p.pgm"
        save_image(path, np.full((2, 2), 0.5), maxval=65535)
        with pytest.raises(FormatError, match="maxval"):
            load_image(path)
        assert load_image(path, allow_16bit=True)[0, 0] == pytest.approx(0.5, abs=1e-5)

    def test_header_error_line(self, tmp_path):
        path = tmp_path / "bad.pgm"
        path.write_bytes(b"P2\n# comment\n3 x\n255\n")
        with pytest.raises(FormatError, match="line 3"):
            load_image(path)

    def test_missing_file_names_path(self, tmp_path):
        with pytest.raises(OSError, match="nope.pgm"):
            load_image(tmp_path / "nope.pgm")

    def test_annotation_threshold(self, tmp_path):
        path = tmp_path / "a.pgm"
        save_image(path, np.array([[127, 128, 255]]) / 255.0)
        np.testing.assert_array_equal(load_annotation(path), [[0, 1, 1]])

    def test_manifest_comments_and_relative_paths(self, tmp_path):
        samples = [_sample(8, 8, 1), _sample(8, 8, 2)]
        samples[1].id = "t"
        manifest = write_dataset(samples, tmp_path / "ds")
        text = "# header\n\n" + manifest.read_text() + "   \n"
        manifest.write_text(text)
        assert len(load_manifest(manifest)) == 2
        loaded = load_dataset(manifest)
        np.testing.assert_array_equal(loaded[1].annotation, samples[1].annotation)

    def test_manifest_malformed(self, tmp_path):
        m = tmp_path / "m.tsv"
        m.write_text("a.pgm\tb.pgm\nonly-one-column\n")
        with pytest.raises(FormatError, match="line 2"):
            load_manifest(m)
