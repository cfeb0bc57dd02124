import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from crosscount import datagen
from crosscount.datagen import (
    AnnotationSet,
    SceneSpec,
    adaptive_sigmas,
    density_map,
    load_annotations,
    load_dataset,
    make_scenes,
    parse_annotations,
    save_annotations,
    save_dataset,
    sum_pool,
    synth_scene,
)
from crosscount.errors import ConfigurationError, ParseError


def random_points(rng, n, h=48, w=64):
    return np.column_stack([rng.uniform(0, w, n), rng.uniform(0, h, n)])


def direct_sum(arr):
    # plain python accumulation, independent of numpy's pairwise reduction
    total = 0.0
    for v in np.asarray(arr).ravel().tolist():
        total += v
    return total


def test_empty_scene_gives_zero_map():
    d = density_map(AnnotationSet(np.zeros((0, 2)), 10, 12))
    assert d.array.shape == (10, 12)
    assert d.array.sum() == 0.0
    assert d.fallback


def test_single_point_fixed_sigma_sums_to_one():
    d = density_map(AnnotationSet([[20.3, 11.7]], 32, 40), mode="fixed", sigma=3.0)
    assert abs(d.array.sum() - 1.0) < 1e-6
    assert not d.fallback


def test_fifty_points_stride_eight():
    rng = np.random.default_rng(0)
    d = density_map(AnnotationSet(random_points(rng, 50), 48, 64), stride=8)
    assert d.array.shape == (6, 8)
    assert abs(direct_sum(d.array) - 50) < 1e-4


def test_corner_point_mass_is_clipped_and_renormalized():
    d = density_map(AnnotationSet([[0.0, 0.0]], 16, 16), mode="fixed", sigma=4.0)
    assert abs(d.array.sum() - 1.0) < 1e-12


def test_adaptive_falls_back_below_k_plus_one_points():
    rng = np.random.default_rng(1)
    d = density_map(AnnotationSet(random_points(rng, 3), 48, 64), mode="adaptive", sigma=2.5)
    assert d.fallback
    assert np.all(d.sigmas == 2.5)
    d4 = density_map(AnnotationSet(random_points(rng, 4), 48, 64), mode="adaptive")
    assert not d4.fallback


def test_adaptive_sigma_against_brute_force():
    rng = np.random.default_rng(2)
    pts = random_points(rng, 12)
    sig = adaptive_sigmas(pts)
    for i, p in enumerate(pts):
        dists = sorted(np.hypot(*(pts[j] - p)) for j in range(len(pts)) if j != i)
        assert sig[i] == pytest.approx(0.3 * np.mean(dists[:3]), rel=1e-12)


def test_adaptive_sigma_scales_with_coordinates():
    rng = np.random.default_rng(3)
    pts = random_points(rng, 20)
    for alpha in (2.0, 4.0):
        assert np.allclose(adaptive_sigmas(alpha * pts), alpha * adaptive_sigmas(pts), rtol=1e-12, atol=0)


def test_bad_density_arguments():
    a = AnnotationSet([[1.0, 1.0]], 8, 8)
    with pytest.raises(ConfigurationError):
        density_map(a, mode="fixed", sigma=0.0)
    with pytest.raises(ConfigurationError):
        density_map(a, mode="blurry")
    with pytest.raises(ConfigurationError):
        sum_pool(np.ones((4, 4)), 0)


@settings(max_examples=40, deadline=None)
@given(n=st.integers(0, 40), stride=st.sampled_from([1, 2, 4, 8]), seed=st.integers(0, 2**31),
       h=st.integers(8, 50), w=st.integers(8, 50))
def test_count_conservation(n, stride, seed, h, w):
    rng = np.random.default_rng(seed)
    a = AnnotationSet(random_points(rng, n, h, w), h, w)
    full = density_map(a).array
    pooled = density_map(a, stride=stride).array
    assert pooled.shape == (-(-h // stride), -(-w // stride))
    assert abs(pooled.sum() - n) <= 1e-4 * max(n, 1)
    # pooling adds disjoint blocks, so the totals agree to rounding
    assert pooled.sum() == pytest.approx(full.sum(), rel=1e-12, abs=1e-12)


def test_sum_pool_blocks():
    arr = np.arange(30, dtype=float).reshape(5, 6)
    out = sum_pool(arr, 4)
    assert out.shape == (2, 2)
    assert out[0, 0] == arr[:4, :4].sum()
    assert out[1, 1] == arr[4:, 4:].sum()


def test_out_of_bounds_point_names_coordinates():
    with pytest.raises(ConfigurationError, match=r"\(70\.0, 3\.0\)"):
        AnnotationSet([[70.0, 3.0]], 48, 64)


# ------------------------------------------------------------------ scenes


def test_synth_is_deterministic():
    a, b = synth_scene(SceneSpec(seed=9)), synth_scene(SceneSpec(seed=9))
    for m in a.images:
        assert a.images[m].data.tobytes() == b.images[m].data.tobytes()
    assert a.annotations == b.annotations
    c = synth_scene(SceneSpec(seed=10))
    assert c.rgb.data.tobytes() != a.rgb.data.tobytes()


def test_dark_rgb_carries_no_person_signal():
    # same seed, so positions and background match; the dark image is the scaled background
    spec = SceneSpec(seed=4, persons=(20, 20), noise=0.0)
    bright, dark = synth_scene(spec), synth_scene(SceneSpec(seed=4, persons=(20, 20), noise=0.0,
                                                            illumination="dark"))
    assert np.array_equal(bright.annotations.points, dark.annotations.points)
    ratio = dark.rgb.data / 0.15
    # bright rgb = background - person blobs, so background >= bright everywhere
    assert np.all(ratio >= bright.rgb.data - 1e-12)
    assert (ratio - bright.rgb.data).max() > 0.1
    assert np.array_equal(dark.thermal.data, bright.thermal.data)


def test_distractors_only_in_thermal():
    s = synth_scene(SceneSpec(seed=5, persons=(0, 0), distractors=(5, 5), noise=0.0, shift=(0, 0)))
    assert s.annotations.count == 0
    assert len(s.distractor_points) == 5
    t = s.thermal.data[0, 0]
    for x, y in s.distractor_points:
        assert t[int(y), int(x)] > 0.2 + 0.1 + 0.3  # background ceiling plus a good part of the blob
    rgb = s.rgb.data
    assert rgb.min() >= 0.35 - 1e-12 and rgb.max() <= 0.65 + 1e-12


def test_thermal_is_translated():
    base = dict(seed=6, persons=(1, 1), distractors=(0, 0), noise=0.0)
    a = synth_scene(SceneSpec(**base, shift=(0, 0)))
    b = synth_scene(SceneSpec(**base, shift=(3, -2)))
    ta, tb = a.thermal.data[0, 0], b.thermal.data[0, 0]
    assert np.array_equal(tb[2:40, 6:50], ta[4:42, 3:47])


def test_scene_unpacks_as_triple():
    rgb, second, ann = synth_scene(SceneSpec(seed=1))
    assert rgb.shape == (1, 3, 48, 64)
    assert second.shape == (1, 1, 48, 64)
    assert isinstance(ann, AnnotationSet)


def test_depth_modality():
    s = synth_scene(SceneSpec(seed=2, second_modality="depth"))
    assert set(s.images) == {"rgb", "depth"}


@pytest.mark.parametrize("kw", [dict(shift=(5, 0)), dict(persons=(4, 2)), dict(illumination="dusk"),
                                dict(height=0), dict(noise=-1.0), dict(second_modality="lidar")])
def test_invalid_scene_specs(kw):
    with pytest.raises(ConfigurationError):
        SceneSpec(**kw)


def test_make_scenes_halves():
    scenes = make_scenes(10, seed=3)
    tags = [s.annotations.illumination for s in scenes]
    assert tags == ["bright"] * 5 + ["dark"] * 5
    assert len({s.name for s in scenes}) == 10
    assert make_scenes(0) == []


def test_scene_spec_from_dict():
    spec = SceneSpec.from_dict({"persons": "3", "shift": "1,-1", "noise": "0.1"})
    assert spec.persons == (3, 3) and spec.shift == (1, -1) and spec.noise == 0.1
    with pytest.raises(ConfigurationError, match="unknown"):
        SceneSpec.from_dict({"colour": "red"})


# ------------------------------------------------------------------ files


def test_annotation_round_trip(tmp_path):
    rng = np.random.default_rng(7)
    a = AnnotationSet(random_points(rng, 13), 48, 64, "dark")
    save_annotations(tmp_path / "a.txt", a)
    assert load_annotations(tmp_path / "a.txt") == a


def test_header_only_file_is_empty_set():
    a = parse_annotations("20 30 0 bright\n")
    assert a.count == 0 and (a.height, a.width) == (20, 30)


@pytest.mark.parametrize("text,line", [
    ("", 1),
    ("20 30 bright\n", 1),
    ("20 30 2 bright\n1 2\n", 2),
    ("20 30 2 bright\n1 2\n3 x\n", 3),
    ("20 30 1 bright\n31 2\n", 2),
    ("20 30 1 noon\n1 1\n", 1),
])
def test_parse_errors_carry_line_numbers(tmp_path, text, line):
    path = tmp_path / "bad.txt"
    path.write_text(text)
    with pytest.raises(ParseError) as info:
        load_annotations(path)
    assert info.value.line == line
    assert f"bad.txt:{line}:" in str(info.value)


def test_out_of_bounds_in_file_names_coordinates():
    with pytest.raises(ParseError, match=r"\(31\.0, 2\.0\)"):
        parse_annotations("20 30 1 bright\n31 2\n")


def test_dataset_round_trip(tmp_path):
    scenes = make_scenes(4, seed=8)
    save_dataset(tmp_path / "ds", scenes)
    ds = load_dataset(tmp_path / "ds")
    assert ds.modalities == ["rgb", "thermal"]
    assert len(ds) == 4
    for a, b in zip(scenes, ds.scenes):
        assert a.name == b.name and a.split == b.split
        assert a.annotations == b.annotations
        for m in a.images:
            assert a.images[m].data.tobytes() == b.images[m].data.tobytes()


def test_dataset_index_errors(tmp_path):
    with pytest.raises(ParseError):
        load_dataset(tmp_path)
    (tmp_path / "index.txt").write_text("something else\n")
    with pytest.raises(ParseError) as info:
        load_dataset(tmp_path)
    assert info.value.line == 1


def test_pgm_round_trip(tmp_path):
    arr = np.linspace(0, 5, 12).reshape(3, 4)
    datagen.write_pgm(tmp_path / "x.pgm", arr)
    back = datagen.read_pgm(tmp_path / "x.pgm")
    assert back.shape == (3, 4)
    assert back[0, 0] == 0 and back[-1, -1] == 255
    datagen.write_pgm(tmp_path / "flat.pgm", np.ones((2, 2)))
    assert datagen.read_pgm(tmp_path / "flat.pgm").max() == 0
