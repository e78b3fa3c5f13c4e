import math

import numpy as np
import pytest
from scipy import stats

from flowmatte.core import ParameterError, composite, read_frames
from flowmatte.synth import (Background, ClipDataset, DatasetManifest, Element, MixtureConfig, MixtureEntry,
                             MixtureSampler, SceneSpec, SpecError, _derive, _strand_curves, compose_dataset,
                             crop_resize_batch, generate_preset, mixture_sampler, render_background,
                             render_scene, sample_sequence_length, soft_fraction)


def test_empty_scene_has_zero_alpha():
    fg, alpha = render_scene(SceneSpec(elements=[], duration=2, height=16, width=16))
    assert fg.shape == (2, 16, 16, 3) and np.all(alpha == 0)


def test_full_frame_rect_is_opaque_inside():
    el = Element(shape="rect", center=(16, 16), size=(20, 20), edge_softness=0.5)
    _, alpha = render_scene(SceneSpec(elements=[el], duration=1, height=32, width=32))
    assert np.all(alpha == 1.0)


def _oracle_strand_coverage(curve, width, soft, py, px, n=16):
    acc = 0.0
    for i in range(n):
        for j in range(n):
            y, x = py + (i + 0.5) / n, px + (j + 0.5) / n
            best = math.inf
            for (ax, ay), (bx, by) in zip(curve[:-1], curve[1:]):
                abx, aby = bx - ax, by - ay
                u = min(max(((x - ax) * abx + (y - ay) * aby) / max(abx * abx + aby * aby, 1e-12), 0.0), 1.0)
                best = min(best, math.hypot(x - ax - u * abx, y - ay - u * aby))
            acc += min(max(0.5 - (best - width / 2) / soft, 0.0), 1.0)
    return acc / (n * n)


def test_one_pixel_diagonal_strand_is_fractional():
    el = Element(shape="strand-bundle", center=(8, 8), angle=math.pi / 4, strand_count=1, strand_width=1.0,
                 strand_length=14.0, strand_spread=0.0, sway=0.0, edge_softness=0.5)
    spec = SceneSpec(seed=3, elements=[el], duration=1, height=32, width=32)
    _, alpha = render_scene(spec)
    curve = _strand_curves(el, 0.0, _derive(spec.seed, 0))[0]
    mx, my = curve[len(curve) // 2]
    py, px = int(my), int(mx)
    a = alpha[0, py, px]
    assert 0.0 < a < 1.0
    assert abs(a - _oracle_strand_coverage(curve, 1.0, 0.5, py, px)) < 0.05


def test_spec_validation():
    with pytest.raises(SpecError):
        render_scene(SceneSpec(elements=[Element(shape="disk", size=(0.0, 0.0))], height=16, width=16))
    with pytest.raises(SpecError):
        render_scene(SceneSpec(elements=[Element(shape="strand-bundle", strand_count=2, edge_softness=0.0)],
                               height=16, width=16))
    with pytest.raises(SpecError):
        render_scene(SceneSpec(elements=[Element(center=(100, 4))], height=16, width=16))


@pytest.mark.parametrize("mode", ["gradient", "band-limited-noise"])
def test_backgrounds_in_range_and_drift(mode):
    bg = render_background(Background(mode=mode, drift=(1.0, 0.0)), 3, 16, 16)
    assert bg.shape == (3, 16, 16, 3) and bg.min() >= 0 and bg.max() <= 1
    assert not np.array_equal(bg[0], bg[2])


@pytest.fixture(scope="module")
def small_sets(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    out = {}
    for name, preset, kind in [("m", "hair", "matte"), ("s", "person", "segmentation"), ("c", "composite", "matte")]:
        out[name] = generate_preset(root, name, preset, kind, 3, seed=7, T=3, H=32, W=32)
    return root, out


def test_matte_round_trip_within_quantization(tmp_path):
    spec = SceneSpec(seed=1, elements=[Element(center=(12, 12), size=(6, 6), edge_softness=2.0)],
                     duration=2, height=24, width=24)
    _, alpha = render_scene(spec)
    m = compose_dataset([spec], tmp_path / "d", "d")
    back = read_frames(tmp_path / "d" / m.clips[0]["path"] / "alpha")
    assert np.abs(back - alpha).max() <= 1 / 510 + 1e-12


def test_segmentation_labels_binary(small_sets):
    root, sets = small_sets
    m = sets["s"]
    for clip in m.clips:
        raw = np.round(read_frames(root / "s" / clip["path"] / "alpha") * 255)
        assert set(np.unique(raw)) <= {0.0, 255.0}


def test_soft_edges_on_matte_sets(small_sets):
    _, sets = small_sets
    for key in ("m", "c"):
        ds = ClipDataset(sets[key])
        for i in range(len(ds)):
            assert soft_fraction(ds.load(i)[1]) >= 0.005


def test_generation_is_byte_identical(tmp_path):
    a = generate_preset(tmp_path / "a", "x", "composite", "matte", 2, seed=11, T=2, H=16, W=16)
    b = generate_preset(tmp_path / "b", "x", "composite", "matte", 2, seed=11, T=2, H=16, W=16)
    assert a.to_json() == b.to_json()
    for clip in a.clips:
        for sub in ("rgb", "alpha"):
            for f in sorted((a.root / clip["path"] / sub).iterdir()):
                assert f.read_bytes() == (b.root / clip["path"] / sub / f.name).read_bytes()


def test_manifest_round_trip_and_validate(small_sets):
    root, sets = small_sets
    m = DatasetManifest.load(root / "m")
    assert m.clips == sets["m"].clips and m.kind == "matte"
    m.validate()
    with pytest.raises(ValueError):
        DatasetManifest(name="x", kind="bogus")


def _entries(ratios):
    rgb = [np.zeros((2, 8, 8, 3))]
    alpha = [np.zeros((2, 8, 8))]
    return [MixtureEntry(ClipDataset.from_arrays(rgb, alpha, name=f"d{i}"), r) for i, r in enumerate(ratios)]


def test_single_entry_mixture():
    s = MixtureSampler(MixtureConfig(_entries([1.0])), np.random.default_rng(0))
    assert {s.draw()[0] for _ in range(50)} == {0}
    (rgb, alpha), pix = next(mixture_sampler(MixtureConfig(_entries([1.0])), np.random.default_rng(0)))
    assert rgb.shape == (2, 8, 8, 3) and pix is True


def test_mixture_frequencies_and_chi_square():
    ratios = [0.4, 0.3, 0.3]
    s = MixtureSampler(MixtureConfig(_entries(ratios)), np.random.default_rng(2024))
    n = 100_000
    counts = np.bincount([s.draw()[0] for _ in range(n)], minlength=3)
    assert np.all(np.abs(counts / n - ratios) <= 0.01)
    chi2 = float(np.sum((counts - n * np.array(ratios)) ** 2 / (n * np.array(ratios))))
    assert chi2 < stats.chi2.ppf(0.999, df=2)


def test_mixture_validation():
    with pytest.raises(ValueError):
        MixtureConfig(_entries([0.5, 0.4]))
    with pytest.raises(ValueError):
        MixtureConfig([])
    empty = ClipDataset(DatasetManifest(name="e", kind="matte"))
    with pytest.raises(ValueError):
        MixtureSampler(MixtureConfig([MixtureEntry(empty, 1.0)]), np.random.default_rng(0))


def test_sequence_length():
    rng = np.random.default_rng(5)
    assert {sample_sequence_length(rng, 4, 4) for _ in range(20)} == {4}
    draws = np.array([sample_sequence_length(rng) for _ in range(100_000)])
    assert draws.min() >= 1 and draws.max() <= 12
    assert abs(draws.mean() - 6.5) <= 0.05
    capped = [sample_sequence_length(rng, 1, 12, resolution=(64, 64), pixel_budget=4 * 64 * 64) for _ in range(200)]
    assert max(capped) == 4
    with pytest.raises(ParameterError):
        sample_sequence_length(rng, 5, 2)


class _ZeroRng:
    """Stands in for a generator that always picks the first offset."""

    def integers(self, lo, hi=None, size=None):
        return 0

    def uniform(self, lo, hi):
        return hi


def test_crop_identity_with_zero_offsets():
    rng = np.random.default_rng(0)
    rgb, alpha = rng.random((4, 16, 16, 3)), rng.random((4, 16, 16))
    out_rgb, out_a = crop_resize_batch([rgb, alpha], (16, 16), 4, _ZeroRng(), scale_range=(1.0, 1.0))
    np.testing.assert_array_equal(out_rgb, rgb.astype(np.float32))
    np.testing.assert_array_equal(out_a, alpha.astype(np.float32))


def test_crop_commutes_with_compositing():
    rng = np.random.default_rng(1)
    fg, bg = rng.random((5, 40, 40, 3)), rng.random((5, 40, 40, 3))
    a = np.zeros((5, 40, 40))
    a[:, 10:30, 12:28] = 1.0
    a[:, 8:10, 12:28] = 0.5
    comp = composite(fg, bg, a).frames
    for seed in range(5):
        r = np.random.default_rng(seed)
        cf, cb, ca, cc = crop_resize_batch([fg, bg, a, comp], (20, 20), 3, r, scale_range=(0.5, 0.5))
        assert ca.shape == (3, 20, 20) and cf.shape == (3, 20, 20, 3)
        # the crop scale 0.5 of a 40-pixel frame lands exactly on the target, so no resampling error
        assert np.abs(composite(cf, cb, ca).frames - cc).max() <= 1e-3


def test_crop_resize_shapes_and_wrap():
    rng = np.random.default_rng(3)
    rgb, alpha = rng.random((3, 30, 50, 3)), rng.random((3, 30, 50))
    out_rgb, out_a = crop_resize_batch([rgb, alpha], (16, 24), 3, rng)
    assert out_rgb.shape == (3, 16, 24, 3) and out_a.shape == (3, 16, 24)
    with pytest.warns(UserWarning):
        out_rgb, _ = crop_resize_batch([rgb, alpha], (16, 24), 5, rng)
    assert out_rgb.shape[0] == 5
    with pytest.raises(ParameterError):
        crop_resize_batch([rgb, alpha], (15, 24), 2, rng)
