import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from npgat.data import (
    BLUE, RED, SMALL_AREA_LIMIT, STYLES, DataError, Sample, augment, brightness,
    build_node_targets, difference_image, hflip, list_dsb_ids, load_dsb_sample,
    reconstruct_mask, resample_square, rot90, synth_generate, vflip,
)
from npgat.graph import build_base_graph


def write_dsb(root, sid, image, masks):
    (root / sid / "images").mkdir(parents=True)
    (root / sid / "masks").mkdir()
    Image.fromarray(image).save(root / sid / "images" / f"{sid}.png")
    for k, m in enumerate(masks):
        Image.fromarray(m.astype(np.uint8) * 255).save(root / sid / "masks" / f"m{k}.png")


def test_load_three_masks(tmp_path):
    img = np.random.default_rng(0).integers(0, 255, (8, 8, 3), dtype=np.uint8)
    masks = [np.zeros((8, 8), bool) for _ in range(3)]
    masks[0][0:2, 0:2] = masks[1][4:6, 4:6] = masks[2][7, 0:3] = True
    write_dsb(tmp_path, "s1", img, masks)
    s = load_dsb_sample(str(tmp_path), "s1")
    assert len(s.instances) == 3
    assert np.array_equal(s.mask, masks[0] | masks[1] | masks[2])
    np.testing.assert_allclose(s.image, img / 255.0)
    assert list_dsb_ids(str(tmp_path)) == ["s1"]


def test_load_grayscale(tmp_path):
    gray = np.arange(64, dtype=np.uint8).reshape(8, 8)
    write_dsb(tmp_path, "g", gray, [])
    s = load_dsb_sample(str(tmp_path), "g")
    assert s.image.shape == (8, 8, 3)
    assert np.array_equal(s.image[..., 0], s.image[..., 1]) and np.array_equal(s.image[..., 0], s.image[..., 2])


def test_load_empty_masks_warns(tmp_path, caplog):
    write_dsb(tmp_path, "e", np.zeros((4, 4, 3), np.uint8), [])
    with caplog.at_level(logging.WARNING):
        s = load_dsb_sample(str(tmp_path), "e")
    assert s.instances == [] and not s.mask.any()
    assert "no instance masks" in caplog.text


def test_load_overlap_warns(tmp_path, caplog):
    a = np.zeros((4, 4), bool)
    a[0:2, 0:2] = True
    b = np.zeros((4, 4), bool)
    b[1:3, 1:3] = True
    write_dsb(tmp_path, "o", np.zeros((4, 4, 3), np.uint8), [a, b])
    with caplog.at_level(logging.WARNING):
        s = load_dsb_sample(str(tmp_path), "o")
    assert "overlapping" in caplog.text
    assert np.array_equal(s.mask, a | b)


def test_load_errors(tmp_path):
    with pytest.raises(DataError, match="missing"):
        load_dsb_sample(str(tmp_path), "nope")
    (tmp_path / "bad" / "images").mkdir(parents=True)
    (tmp_path / "bad" / "images" / "bad.png").write_bytes(b"not a png")
    with pytest.raises(DataError, match="decode"):
        load_dsb_sample(str(tmp_path), "bad")


def test_synth_deterministic():
    a, b = synth_generate(3, 8), synth_generate(3, 8)
    for x, y in zip(a, b):
        assert x.image.tobytes() == y.image.tobytes() and x.mask.tobytes() == y.mask.tobytes()
        assert x.source_id == y.source_id


def test_synth_small_style_area():
    areas = [m.sum() for s in synth_generate(0, 1000, style="fluorescent-small") for m in s.instances]
    assert np.mean(areas) < SMALL_AREA_LIMIT


def test_synth_no_nuclei():
    s = synth_generate(0, 1, nuclei=0)[0]
    assert not s.mask.any() and s.instances == []


def test_synth_mixed_cycles_styles():
    tags = [s.class_tag for s in synth_generate(0, 8)]
    assert tags == list(STYLES) * 2


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from(list(STYLES)))
def test_synth_instances_partition_mask(seed, style):
    s = synth_generate(seed, 1, style=style)[0]
    cover = np.zeros(s.mask.shape, int)
    for m in s.instances:
        cover += m
    assert cover.max() <= 1
    assert np.array_equal(cover.astype(bool), s.mask)
    assert s.image.min() >= 0 and s.image.max() <= 1


def fixture():
    rng = np.random.default_rng(2)
    image = rng.random((6, 6, 3))
    a = np.zeros((6, 6), bool)
    a[0, 0:3] = True
    a[1, 0] = True
    b = np.zeros((6, 6), bool)
    b[4:6, 3] = True
    return Sample(image, a | b, [a, b], "f")


def test_flip_involution_and_brightness_identity():
    s = fixture()
    for f in (hflip, vflip):
        t = f(f(s))
        assert np.array_equal(t.image, s.image) and np.array_equal(t.mask, s.mask)
    assert np.array_equal(brightness(s, 1.0).image, s.image)
    assert np.array_equal(brightness(s, 3.0).mask, s.mask)
    assert brightness(s, 3.0).image.max() <= 1.0


def test_rot90_index_mapping():
    s = fixture()
    r = rot90(s, 1)
    n = 6
    for i in range(n):
        for j in range(n):
            # np.rot90 (counter-clockwise): out[i, j] = in[j, n-1-i]
            assert r.mask[i, j] == s.mask[j, n - 1 - i]
            assert np.array_equal(r.image[i, j], s.image[j, n - 1 - i])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_augment_preserves_instances(seed):
    s = fixture()
    t = augment(s, seed, ops=("hflip", "vflip", "rot90"))
    assert sorted(m.sum() for m in t.instances) == sorted(m.sum() for m in s.instances)
    assert np.array_equal(np.any(t.instances, axis=0), t.mask)


def test_augment_rejects_unknown():
    with pytest.raises(ValueError):
        augment(fixture(), 0, ops=("shear",))


def test_targets():
    g = build_base_graph(4, 4, 2)
    assert np.all(build_node_targets(g, np.ones((4, 4)))[0] == 1)
    assert np.all(build_node_targets(g, np.zeros((4, 4)))[0] == 0)
    mask = np.zeros((4, 4))
    mask[0, 0] = mask[0, 1] = 1
    t, _ = build_node_targets(g, mask)
    assert t[g.index(1, 0, 0)] == 0.5
    g.positions[g.index(1, 1, 1), 2] = 0.0
    g.positions[g.index(1, 1, 1), :2] = 0.5
    t, empty = build_node_targets(g, np.ones((4, 4)))
    assert t[g.index(1, 1, 1)] == 0 and empty[g.index(1, 1, 1)]
    with pytest.raises(ValueError):
        build_node_targets(g, np.ones((8, 8)))


def test_reconstruct_examples():
    g = build_base_graph(4, 4, 1)
    p = np.random.default_rng(0).random(16)
    binary, raw = reconstruct_mask(g, p)
    np.testing.assert_array_equal(raw, p.reshape(4, 4))
    g3 = build_base_graph(8, 8, 3)
    binary, raw = reconstruct_mask(g3, np.ones(g3.n_nodes), threshold=1.0)
    assert binary.all()
    g2 = build_base_graph(4, 4, 2)
    p = np.where(g2.level == 0, 0.6, 0.0)
    binary, raw = reconstruct_mask(g2, p)
    np.testing.assert_allclose(raw, 0.4, atol=1e-15)
    assert not binary.any()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_reconstruct_perfect_level0(seed):
    mask = np.random.default_rng(seed).random((8, 8)) < 0.4
    g = build_base_graph(8, 8, 1)
    binary, _ = reconstruct_mask(g, mask.ravel().astype(float))
    assert np.array_equal(binary, mask)


def test_resample_square():
    s = fixture()
    r = resample_square(s, 12)
    assert r.image.shape == (12, 12, 3) and r.mask.shape == (12, 12)
    assert np.array_equal(np.any(r.instances, axis=0), r.mask)


def test_difference_image_colors():
    img = np.full((4, 4, 3), 0.5)
    gt = np.zeros((4, 4), bool)
    gt[0] = True
    pred = np.zeros((4, 4), bool)
    pred[0, :2] = True
    pred[3, 3] = True
    d = difference_image(img, gt, pred)
    assert np.array_equal(d[3, 3], RED)
    assert np.array_equal(d[0, 3], BLUE)
    assert not np.array_equal(d[0, 0], RED) and not np.array_equal(d[0, 0], BLUE)
    # empty prediction: every gt pixel blue
    d = difference_image(img, gt, np.zeros_like(gt))
    assert np.all(d[gt] == BLUE) and not np.any(np.all(d[~gt] == BLUE, axis=1))
