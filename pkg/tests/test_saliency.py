import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bvsviz.labels import ClassLabel
from bvsviz.saliency import (PatchGrid, SaliencyMap, SignMode, assemble, default_mode, grid_shape,
                             normalize_for_display, predict_image, predict_patches, read_saliency,
                             round_half_up, shift_amounts, shifted_saliency, sign_select, single_saliency,
                             tile_patches, write_preview, write_saliency)

from _mocks import MeanIntensityModel, VoteModel, assembly_oracle, poisoned_saliency


# tiling

def test_tiles_for_224_patches():
    pos = tile_patches((496, 776), 224)
    assert grid_shape((496, 776), 224) == (4, 9)
    assert sorted({r for r, _ in pos}) == [0, 91, 181, 272]
    assert sorted({c for _, c in pos}) == [0, 69, 138, 207, 276, 345, 414, 483, 552]
    assert len(pos) == 36


def test_tiles_for_160_patches():
    pos = tile_patches((496, 776), 160)
    assert grid_shape((496, 776), 160) == (6, 6)
    assert sorted({r for r, _ in pos}) == [0, 67, 134, 202, 269, 336]
    assert sorted({c for _, c in pos}) == [0, 123, 246, 370, 493, 616]


def test_tiles_row_major():
    pos = tile_patches((496, 776), 160)
    assert pos[:2] == [(0, 0), (0, 123)] and pos[6] == (67, 0)


def test_degenerate_patch_collapses():
    assert tile_patches((64, 64), 64) == [(0, 0)] * 36


def test_patch_larger_than_image():
    with pytest.raises(ValueError):
        tile_patches((64, 80), 72)


@settings(max_examples=50, deadline=None)
@given(st.integers(16, 300), st.integers(16, 300), st.integers(8, 64))
def test_tiles_stay_inside_and_cover(h, w, p):
    p = min(p, h, w)
    pos = tile_patches((h, w), p)
    assert len(pos) == 36
    cover = np.zeros((h, w), dtype=bool)
    for r, c in pos:
        assert 0 <= r <= h - p and 0 <= c <= w - p
        cover[r:r + p, c:c + p] = True
    na, nd = grid_shape((h, w), p)
    if na * p >= h and nd * p >= w:
        assert cover.all()


def test_round_half_up():
    assert [round_half_up(x) for x in (0.5, 1.5, 2.5, 22.4, -0.5)] == [1, 2, 3, 22, 0]


# prediction

def test_identical_patch_predictions_pass_through():
    logits = np.tile([0.3, -1.0, 2.0], (36, 1))
    probs = predict_image(VoteModel(logits), np.zeros((64, 64)), 16)
    e = np.exp(logits[0] - logits[0].max())
    np.testing.assert_allclose(probs, e / e.sum(), rtol=1e-12)


def test_vote_counting():
    logits = np.full((36, 3), -1e3)
    logits[:20, 1] = 0.0
    logits[20:, 0] = 0.0
    probs = predict_image(VoteModel(logits), np.zeros((64, 64)), 16)
    assert probs.argmax() == int(ClassLabel.BVS)
    assert probs[1] == pytest.approx(20 / 36, abs=1e-12)
    assert probs[0] == pytest.approx(16 / 36, abs=1e-12)


def test_averaging_ignores_patch_order():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(36, 3))
    a = predict_image(VoteModel(logits), np.zeros((64, 64)), 16)
    b = predict_image(VoteModel(logits[rng.permutation(36)]), np.zeros((64, 64)), 16)
    np.testing.assert_allclose(a, b, rtol=1e-12)


# assembly

def _grid(image_shape, patch, predicted, saliency):
    pos = tile_patches(image_shape, patch)
    probs = np.eye(3)[predicted]
    return PatchGrid(patch, pos, probs, saliency)


def test_constant_saliency_is_idempotent_under_overlap():
    g = _grid((60, 70), 20, [1] * 36, np.full((36, 20, 20), 2.5))
    m = assemble(g, 1, image_shape=(60, 70))
    assert np.all(m.values[m.contribution_count > 0] == 2.5)
    assert np.all(m.values[m.contribution_count == 0] == 0)
    assert not m.empty and m.contributors == list(range(36))


def test_border_crop_224():
    g = PatchGrid(224, [(0, 0)], np.eye(3)[[0]], np.ones((1, 224, 224)))
    m = assemble(g, 0, image_shape=(224, 224))
    covered = np.argwhere(m.contribution_count > 0)
    assert covered.min(axis=0).tolist() == [22, 22] and covered.max(axis=0).tolist() == [201, 201]
    assert (m.contribution_count > 0).sum() == 180 * 180


def test_empty_assembly_is_flagged():
    g = _grid((60, 70), 20, [2] * 36, np.ones((36, 20, 20)))
    m = assemble(g, 0, image_shape=(60, 70))
    assert m.empty and not m.values.any() and not m.contribution_count.any()


def test_assemble_requires_saliency():
    with pytest.raises(ValueError):
        assemble(_grid((60, 70), 20, [0] * 36, None), 0)


@pytest.mark.parametrize("seed", range(5))
def test_assembly_matches_pixel_oracle(seed):
    rng = np.random.default_rng(seed)
    shape, patch = (48, 56), 20
    predicted = rng.integers(0, 3, 36)
    g = _grid(shape, patch, predicted, None)
    cls = int(np.bincount(predicted, minlength=3).argmax())
    g.saliency = poisoned_saliency(g, cls, rng)
    m = assemble(g, cls, image_shape=shape)
    assert np.all(np.isfinite(m.values))
    values, count = assembly_oracle(g, cls, shape)
    np.testing.assert_array_equal(m.contribution_count, count)
    np.testing.assert_allclose(m.values, values, rtol=1e-12, atol=1e-15)
    assert m.contributors == [i for i in range(36) if predicted[i] == cls]


def test_single_saliency_with_mean_model():
    rng = np.random.default_rng(3)
    img = np.clip(rng.uniform(size=(64, 80)) * np.linspace(0.1, 1, 80), 0, 1)
    model = MeanIntensityModel()
    m = single_saliency(model, img, 16)
    grid = predict_patches(model, img, 16)
    assert m.source_class == ClassLabel(grid.global_class)
    expected = model.w.data[grid.global_class, 0] / 256
    assert np.allclose(m.values[m.contribution_count > 0], expected)


# shift averaging

def test_shift_amounts():
    assert shift_amounts(496, 3) == [0, 165, 331]
    assert shift_amounts(256, 1) == [0]


def test_one_shift_equals_single_pass():
    img = np.random.default_rng(1).uniform(size=(64, 64))
    model = MeanIntensityModel()
    a = shifted_saliency(model, img, 16, k=1)
    b = single_saliency(model, img, 16)
    assert a.values.tobytes() == b.values.tobytes()
    assert a.contribution_count.tobytes() == b.contribution_count.tobytes()


def test_translation_invariant_model_gives_invariant_map():
    model = MeanIntensityModel(slope=(0.0, 0.0, 0.0), bias=(0.0, 1.0, 0.0))
    img = np.random.default_rng(2).uniform(size=(64, 64))
    base = shifted_saliency(model, img, 16, k=3)
    for s in (1, 7, 30):
        moved = shifted_saliency(model, np.roll(img, s, axis=0), 16, k=3)
        np.testing.assert_array_equal(np.roll(moved.values, -s, axis=0), base.values)


def test_shifted_saliency_is_deterministic():
    img = np.random.default_rng(4).uniform(size=(64, 64))
    a = shifted_saliency(MeanIntensityModel(), img, 16)
    b = shifted_saliency(MeanIntensityModel(), img, 16)
    assert a.values.tobytes() == b.values.tobytes()


def test_shifted_saliency_rejects_k0():
    with pytest.raises(ValueError):
        shifted_saliency(MeanIntensityModel(), np.zeros((32, 32)), 16, k=0)


# sign and display

def test_sign_select_examples():
    v = np.array([-2.0, 0.0, 3.0])
    np.testing.assert_array_equal(sign_select(v, SignMode.NEGATIVE), [2, 0, 0])
    np.testing.assert_array_equal(sign_select(v, SignMode.POSITIVE), [0, 0, 3])
    assert not sign_select(np.array([1.0, 2.0]), SignMode.NEGATIVE).any()


@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=50))
def test_sign_parts_reconstruct_magnitude(xs):
    v = np.array(xs)
    np.testing.assert_array_equal(sign_select(v, SignMode.NEGATIVE) + sign_select(v, SignMode.POSITIVE), np.abs(v))


def test_default_modes():
    assert default_mode(ClassLabel.METAL_STENT) is SignMode.POSITIVE
    assert default_mode(ClassLabel.BVS) is SignMode.NEGATIVE
    assert default_mode(ClassLabel.NO_DEVICE) is SignMode.NEGATIVE


def test_normalize_zero_map():
    assert not normalize_for_display(np.zeros((4, 4))).any()


def test_normalize_percentile():
    v = np.random.default_rng(0).uniform(size=10_000)
    out = normalize_for_display(v)
    assert out.min() >= 0 and out.max() <= 1
    ref = np.sort(v)[int(np.ceil(0.99 * v.size)) - 1]  # nearest-rank order statistic
    np.testing.assert_allclose(out, np.clip(v / ref, 0, 1), rtol=1e-15)
    assert np.percentile(out, 99) == pytest.approx(1.0, abs=1e-6)
    assert np.sort(out)[int(np.ceil(0.99 * out.size)) - 1] == pytest.approx(1.0, abs=1e-6)


@given(st.floats(1e-3, 1e3))
def test_normalize_scale_invariant(c):
    v = np.random.default_rng(1).exponential(size=500)
    np.testing.assert_allclose(normalize_for_display(c * v), normalize_for_display(v), rtol=1e-9, atol=1e-12)


# export

def test_saliency_file_round_trip(tmp_path):
    values = np.random.default_rng(0).normal(size=(12, 20)).astype(np.float32).astype(np.float64)
    m = SaliencyMap(values, np.ones((12, 20), dtype=np.int64), ClassLabel.BVS, 3)
    path = tmp_path / "s.sal"
    write_saliency(path, m, 64, SignMode.NEGATIVE)
    back, header = read_saliency(path)
    np.testing.assert_array_equal(back, values)
    assert header["class"] == "BVS" and header["k"] == "3" and header["patch"] == "64" and header["mode"] == "neg"
    assert path.stat().st_size == len(path.read_bytes().split(b"end_header\n")[0]) + 11 + 12 * 20 * 4


def test_preview_png(tmp_path):
    from PIL import Image

    write_preview(tmp_path / "p.png", np.linspace(0, 1, 16).reshape(4, 4))
    arr = np.asarray(Image.open(tmp_path / "p.png"))
    assert arr.dtype == np.uint8 and arr[0, 0] == 0 and arr[-1, -1] == 255
