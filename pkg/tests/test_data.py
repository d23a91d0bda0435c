import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sarutil.data import (
    LOG_K,
    MAX_MAGNITUDE,
    ClassTemplate,
    CorruptionKind,
    CorruptionSpec,
    PreprocessConfig,
    Source,
    SynthSpec,
    TargetImage,
    center_crop,
    corrupt,
    decode_azimuth,
    default_templates,
    encode_azimuth,
    load_manifest,
    load_png,
    log_compress,
    log_expand,
    preprocess,
    render,
    render_components,
    save_manifest,
    save_png,
    synth_scene,
    synth_target,
)
from sarutil.errors import DanglingReference, DuplicateId, InvalidArgument, MalformedRecord, ManifestNotFound


@pytest.fixture(scope="module")
def spec():
    return SynthSpec(default_templates(4, 0), speckle_looks=4, background_level=0.04, image_size=40)


# -- azimuth ---------------------------------------------------------------


@pytest.mark.parametrize("deg, vec", [(0, [1, 0]), (90, [0, 1]), (30, [0.8660254, 0.5])])
def test_encode_azimuth_values(deg, vec):
    np.testing.assert_allclose(encode_azimuth(deg), vec, atol=1e-7)


@pytest.mark.parametrize("vec, deg", [([1, 0], 0.0), ([0, -1], 270.0),
                                      ([2 * math.cos(math.radians(123)), 2 * math.sin(math.radians(123))], 123.0)])
def test_decode_azimuth_values(vec, deg):
    assert decode_azimuth(vec) == pytest.approx(deg, abs=1e-9)


def test_decode_zero_vector_rejected():
    with pytest.raises(InvalidArgument):
        decode_azimuth([0.0, 0.0])


@given(st.floats(0, 360, exclude_max=True))
def test_azimuth_round_trip(theta):
    back = decode_azimuth(encode_azimuth(theta))
    d = abs(back - theta) % 360
    assert min(d, 360 - d) < 1e-9
    assert 0 <= back < 360


@given(st.floats(-1e4, 1e4))
def test_encode_is_unit_norm(theta):
    assert abs(np.linalg.norm(encode_azimuth(theta)) - 1) < 1e-12


# -- synthesis ---------------------------------------------------------------


def test_templates_distinct_and_validated():
    t = default_templates(4, 0)
    with pytest.raises(InvalidArgument):
        SynthSpec((t[0], t[0]))
    with pytest.raises(InvalidArgument):
        SynthSpec(t, speckle_looks=0.5)
    with pytest.raises(InvalidArgument):
        ClassTemplate("bad", [[0, 0]], [-1.0], 5, 3)


def test_synth_deterministic(spec):
    a = synth_target(spec, 0, 0.0, 7)
    b = synth_target(spec, 0, 0.0, 7)
    np.testing.assert_array_equal(a.pixels, b.pixels)
    c = synth_target(spec, 0, 0.0, 8)
    assert not np.array_equal(a.pixels, c.pixels)


def test_synth_unknown_class(spec):
    with pytest.raises(InvalidArgument):
        synth_target(spec, 4, 0.0, 1)


def test_huge_looks_matches_noise_free_render():
    s = SynthSpec(default_templates(4, 0), speckle_looks=1e9, background_level=0.0, image_size=40)
    im = synth_target(s, 1, 37.0, 3)
    clean = render(im.scene, speckle=False)
    assert np.max(np.abs(im.pixels - clean)) < 1e-3


def test_rotation_by_90_matches_rotated_render(spec):
    a = render(synth_scene(spec, 0, 0.0, 7), speckle=False)
    b = render(synth_scene(spec, 0, 90.0, 7), speckle=False)
    assert np.mean(np.abs(np.rot90(a) - b)) <= 2e-2


def test_speckle_statistics():
    looks = 4
    s = SynthSpec(default_templates(4, 0), speckle_looks=looks, background_level=0.05, image_size=40)
    ratios = []
    for seed in range(8):
        im = synth_target(s, seed % 4, 45.0 * seed, seed)
        clean = render(im.scene, speckle=False)
        ok = (clean > 0) & (im.pixels < 1.0)
        ratios.append(im.pixels[ok] / clean[ok])
    r = np.concatenate(ratios)
    n = len(r)
    assert n >= 10_000
    var = 1.0 / looks
    assert abs(r.mean() - 1.0) < 3 * math.sqrt(var / n)
    se_var = var * math.sqrt((2 + 6 / looks) / n)
    assert abs(r.var(ddof=1) - var) < 3 * se_var


def test_target_image_invariants():
    with pytest.raises(InvalidArgument):
        TargetImage(np.zeros((3, 4)), 0, 0.0)
    with pytest.raises(InvalidArgument):
        TargetImage(-np.ones((3, 3)), 0, 0.0)
    with pytest.raises(InvalidArgument):
        TargetImage(np.zeros((3, 3)), 0, 360.0)


# -- corruptions -------------------------------------------------------------


@pytest.mark.parametrize("kind", list(CorruptionKind))
def test_zero_magnitude_is_identity(spec, kind):
    im = synth_target(spec, 2, 100.0, 11)
    out = corrupt(im, CorruptionSpec(kind, 0.0), 5)
    np.testing.assert_array_equal(out.pixels, im.pixels)
    assert out.source is Source.SIMULATED
    assert out.azimuth_deg == im.azimuth_deg and out.class_id == im.class_id


@pytest.mark.parametrize("kind", list(CorruptionKind))
def test_magnitude_bounds(kind):
    with pytest.raises(InvalidArgument):
        CorruptionSpec(kind, MAX_MAGNITUDE[kind] * 1.01)
    with pytest.raises(InvalidArgument):
        CorruptionSpec(kind, -0.1)


@pytest.mark.parametrize("kind", list(CorruptionKind))
def test_corrupt_deterministic_and_keeps_metadata(spec, kind):
    im = synth_target(spec, 1, 200.0, 3)
    cs = CorruptionSpec(kind, MAX_MAGNITUDE[kind] / 2)
    a, b = corrupt(im, cs, 9), corrupt(im, cs, 9)
    np.testing.assert_array_equal(a.pixels, b.pixels)
    assert not np.array_equal(a.pixels, im.pixels)
    assert (a.class_id, a.azimuth_deg) == (im.class_id, im.azimuth_deg)
    assert a.id == f"{im.id}+{kind.value}"


def test_angle_jitter_moves_scatterers_not_label(spec):
    im = synth_target(spec, 0, 30.0, 4)
    out = corrupt(im, CorruptionSpec("angle_jitter", 10.0), 1)
    assert out.azimuth_deg == 30.0
    ref = synth_scene(spec, 0, 40.0, 4)
    np.testing.assert_allclose(out.scene.points, ref.points, atol=1e-9)
    # the hull keeps the labelled heading
    assert out.scene.body_azimuth_deg == 30.0
    _, _, scat = render_components(out.scene)
    _, _, scat_ref = render_components(ref)
    np.testing.assert_allclose(scat, scat_ref, atol=1e-9)


def test_dropout_full_magnitude_silences_a_scatterer(spec):
    im = synth_target(spec, 3, 0.0, 2)
    out = corrupt(im, CorruptionSpec("scatterer_dropout", 1.0), 0)
    _, body, _ = render_components(out.scene)
    bg = float(out.scene.background)
    x0 = render(out.scene, speckle=False)
    size = out.scene.size
    ctr = (size - 1) / 2
    probes = []
    for px, py in im.scene.points:
        r, c = int(round(ctr - py)), int(round(ctr + px))
        probes.append(x0[r, c] - body[r, c] - bg)
    assert min(probes) < 1e-6


def test_clutter_swap_changes_background_only(spec):
    im = synth_target(spec, 0, 0.0, 5)
    out = corrupt(im, CorruptionSpec("clutter_swap", 1.0), 3)
    np.testing.assert_array_equal(out.scene.points, im.scene.points)
    assert np.asarray(out.scene.background).shape == (40, 40)


def test_corrupt_needs_scene(spec):
    im = synth_target(spec, 0, 0.0, 5)
    bare = TargetImage(im.pixels, 0, 0.0)
    with pytest.raises(InvalidArgument):
        corrupt(bare, CorruptionSpec("clutter_swap", 0.5), 0)


# -- preprocessing -----------------------------------------------------------


def test_preprocess_examples():
    cfg = PreprocessConfig(crop_size=88)
    assert np.all(preprocess(np.zeros((96, 96)), cfg) == 0)
    one = np.ones((96, 96))
    assert np.all(preprocess(one, cfg) == 1.0)
    grid = np.arange(96 * 96, dtype=float).reshape(96, 96)
    np.testing.assert_array_equal(center_crop(grid, 88), grid[4:92, 4:92])


def test_log_compress_constant_and_inverse():
    p = np.linspace(0, 1, 11)
    np.testing.assert_allclose(log_compress(p), np.log(1 + p * 255) / np.log(256), atol=1e-15)
    np.testing.assert_allclose(log_expand(log_compress(p)), p, atol=1e-12)
    assert LOG_K == 255


def test_preprocess_augment_needs_seed():
    cfg = PreprocessConfig(crop_size=8, augment=True)
    with pytest.raises(InvalidArgument):
        preprocess(np.ones((8, 8)), cfg)
    a = preprocess(np.ones((8, 8)), cfg, seed=3)
    np.testing.assert_array_equal(a, preprocess(np.ones((8, 8)), cfg, seed=3))
    assert 0.8 <= a[0, 0] <= 1.2


def test_preprocess_config_invariants():
    with pytest.raises(InvalidArgument):
        PreprocessConfig(stretch_range=(1.2, 0.8))
    with pytest.raises(InvalidArgument):
        PreprocessConfig(stretch_range=(0.0, 1.0))
    with pytest.raises(InvalidArgument):
        preprocess(np.ones((8, 8)), PreprocessConfig(crop_size=9))


@given(st.lists(st.floats(0, 1), min_size=2, max_size=30), st.integers(0, 2 ** 32))
def test_preprocess_monotone_and_bounded(values, seed):
    cfg = PreprocessConfig(crop_size=1, augment=True)
    v = np.sort(np.asarray(values))
    out = np.array([preprocess(np.full((1, 1), x), cfg, seed=seed)[0, 0] for x in v])
    assert np.all(np.diff(out) >= 0)
    assert out.min() >= 0 and out.max() <= cfg.stretch_range[1] + 1e-12


# -- IO ----------------------------------------------------------------------


def test_png_round_trip(tmp_path, rng):
    px = np.round(rng.random((12, 12)) * 65535) / 65535
    save_png(tmp_path / "a.png", px)
    np.testing.assert_array_equal(load_png(tmp_path / "a.png"), px)


def _write_fixture(root, n=4, splits=("train", "test", "train", "test")):
    entries = []
    for i in range(n):
        save_png(root / f"img{i}.png", np.full((6, 6), i / 10))
        entries.append({"file": f"img{i}.png", "class_id": i % 2, "azimuth_deg": 10.0 * i,
                        "source": "real", "split": splits[i], "id": f"e{i}"})
    doc = {"class_names": ["a", "b"], "image_size": 6, "entries": entries}
    (root / "m.json").write_text(json.dumps(doc))
    return doc


def test_manifest_round_trip(tmp_path):
    _write_fixture(tmp_path)
    m = load_manifest(tmp_path / "m.json")
    assert m.n_classes == 2 and len(m.entries) == 4
    assert [e.id for e in m.entries] == ["e0", "e1", "e2", "e3"]
    assert m.split("val") == ()
    save_manifest(m, tmp_path / "copy.json")
    m2 = load_manifest(tmp_path / "copy.json")
    assert m2.entries == m.entries
    img = m.load_image(m.entries[1])
    assert img.class_id == 1 and img.pixels.shape == (6, 6)


def test_manifest_errors(tmp_path):
    with pytest.raises(ManifestNotFound):
        load_manifest(tmp_path / "none.json")
    doc = _write_fixture(tmp_path)
    (tmp_path / "img2.png").unlink()
    with pytest.raises(DanglingReference) as e:
        load_manifest(tmp_path / "m.json")
    assert e.value.entry == "img2.png"

    doc = _write_fixture(tmp_path)
    doc["entries"][3]["id"] = "e0"
    (tmp_path / "m.json").write_text(json.dumps(doc))
    with pytest.raises(DuplicateId) as e:
        load_manifest(tmp_path / "m.json")
    assert e.value.entry == "e0"

    doc = _write_fixture(tmp_path)
    doc["entries"][1]["class_id"] = 5
    (tmp_path / "m.json").write_text(json.dumps(doc))
    with pytest.raises(MalformedRecord) as e:
        load_manifest(tmp_path / "m.json")
    assert e.value.entry == "e1"


def test_manifest_image_size_checked(tmp_path):
    _write_fixture(tmp_path)
    save_png(tmp_path / "img0.png", np.zeros((7, 7)))
    m = load_manifest(tmp_path / "m.json")
    with pytest.raises(MalformedRecord):
        m.load_image(m.entries[0])
