import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.stats import chisquare

from camseg import data as D


# -- chain codes -------------------------------------------------------------------

def test_square_chain_area():
    chain = D.BoundaryChain((0, 0), (0, 6, 4, 2))  # east, south, west, north
    mask = D.decode_chain_code(chain, (4, 4))
    assert mask.sum() == 4 and mask[:2, :2].all()


def test_single_pixel_chain():
    mask = D.decode_chain_code(D.BoundaryChain((2, 3), ()), (5, 5))
    assert mask.sum() == 1 and mask[2, 3]


def test_rectangle_from_points():
    chain = D.chain_from_points([(1, 1), (1, 6), (4, 6), (4, 1)])
    mask = D.decode_chain_code(chain, (8, 8))
    expected = np.zeros((8, 8), bool)
    expected[1:5, 1:7] = True
    np.testing.assert_array_equal(mask, expected)


@pytest.mark.parametrize("r", [5, 12, 25])
def test_circle_area_within_perimeter(r):
    c = r + 2
    pts = []
    for k in range(8 * r):
        a = 2 * math.pi * k / (8 * r)
        p = (int(round(c + r * math.sin(a))), int(round(c + r * math.cos(a))))
        if not pts or p != pts[-1]:
            pts.append(p)
    mask = D.decode_chain_code(D.chain_from_points(pts), (2 * c + 1, 2 * c + 1))
    assert abs(mask.sum() - math.pi * r * r) <= 2 * math.pi * r


def test_open_chain_rejected():
    with pytest.raises(D.ChainCodeError, match="not closed"):
        D.decode_chain_code(D.BoundaryChain((0, 0), (0, 0, 6)), (4, 4))


def test_chain_out_of_bounds():
    with pytest.raises(D.ChainCodeError, match="leaves"):
        D.decode_chain_code(D.BoundaryChain((0, 0), (2, 6)), (4, 4))


def test_parse_and_format_round_trip():
    text = "# comment\n3 4: 0 6 4 2\n\n0 0:\n"
    chains = D.parse_chain_codes(text)
    assert chains == [D.BoundaryChain((3, 4), (0, 6, 4, 2)), D.BoundaryChain((0, 0), ())]
    assert D.parse_chain_codes(D.format_chain_codes(chains)) == chains


@pytest.mark.parametrize("bad", ["3 4 0 6", "3: 0", "1 1: 0 8", "a b: 1"])
def test_parse_rejects(bad):
    with pytest.raises(D.ChainCodeError):
        D.parse_chain_codes(bad)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 5), st.integers(0, 5), st.integers(1, 6), st.integers(1, 6))
def test_rectangle_chain_matches_slice(top, left, h, w):
    bottom, right = top + h - 1, left + w - 1
    chain = D.chain_from_points([(top, left), (top, right), (bottom, right), (bottom, left)])
    mask = D.decode_chain_code(chain, (12, 12))
    assert mask.sum() == h * w and mask[top:bottom + 1, left:right + 1].all()


# -- cropping ----------------------------------------------------------------------

class MinRng:
    """Stub generator that always returns the lower bound."""

    def uniform(self, low, high, size=None):
        return np.full(size, low)


class MaxRng:
    def uniform(self, low, high, size=None):
        return np.full(size, high)


def test_padding_pinned_minimum():
    bbox = D.CropRect(100, 100, 150, 200)  # 100 wide, 50 tall
    rect = D.padded_rect(bbox, (1000, 1000), MinRng())
    assert (rect.width, rect.height) == (120, 60)
    assert rect == D.CropRect(95, 90, 155, 210)


def test_padding_pinned_maximum_and_half_up():
    bbox = D.CropRect(100, 100, 200, 125)  # 100 x 25, 0.3 * 25 = 7.5 rounds to 8
    rect = D.padded_rect(bbox, (1000, 1000), MaxRng())
    assert rect == D.CropRect(70, 92, 230, 133)


def test_padding_clamped_to_image():
    rect = D.padded_rect(D.CropRect(0, 2, 50, 40), (55, 41), MaxRng())
    assert rect == D.CropRect(0, 0, 55, 41)


@pytest.mark.parametrize("seed", range(20))
def test_padding_law(seed):
    rng = np.random.default_rng(seed)
    bbox = D.CropRect(300, 300, 400, 350)
    rect = D.padded_rect(bbox, (1000, 1000), rng)
    assert rect.contains(bbox)
    for pad, d in [(bbox.top - rect.top, 100), (rect.bottom - bbox.bottom, 100),
                   (bbox.left - rect.left, 50), (rect.right - bbox.right, 50)]:
        assert math.floor(0.1 * d + 0.5) <= pad <= math.floor(0.3 * d + 0.5)


def test_crop_abnormal_roi(rng):
    image = rng.integers(0, 256, size=(60, 80)).astype(np.uint8)
    mask = np.zeros((60, 80), bool)
    mask[20:30, 30:50] = True
    roi, roi_mask, rect = D.crop_abnormal_roi(image, mask, rng)
    np.testing.assert_array_equal(roi, image[rect.slices()])
    assert roi_mask.sum() == mask.sum()
    with pytest.raises(ValueError):
        D.crop_abnormal_roi(image, np.zeros_like(mask), rng)


def test_normal_crop_mirrors():
    contra = np.zeros((20, 30), np.uint8)
    contra[5, 30 - 1 - 12] = 255  # mirror of column 12
    rect = D.CropRect(3, 10, 8, 15)
    out = D.crop_normal_roi(contra, rect)
    assert out.shape == (5, 5)
    # column 12 in the source maps to column 17 in the contralateral, i.e. offset 2 from the mirrored left edge
    assert out[2, 2] == 255 and out.sum() == 255


def test_normal_crop_skips():
    contra = np.zeros((20, 30), np.uint8)
    rect = D.CropRect(3, 10, 8, 15)
    with pytest.raises(D.SampleSkipped, match="overlaps"):
        D.crop_normal_roi(contra, rect, contralateral_abnormal=[D.CropRect(0, 16, 4, 18)])
    with pytest.raises(D.SampleSkipped, match="outside"):
        D.crop_normal_roi(contra, D.CropRect(3, 0, 8, 5), source_width=40)


def test_to_8bit():
    np.testing.assert_array_equal(D.to_8bit(np.array([[0, 65535]], np.uint16)), [[0, 255]])
    np.testing.assert_array_equal(D.to_8bit(np.array([[100, 300]], np.uint16)), [[0, 255]])
    assert not D.to_8bit(np.full((3, 3), 777, np.uint16)).any()
    np.testing.assert_array_equal(D.to_8bit(np.array([0, 1, 2], np.uint16)), [0, 128, 255])


@settings(max_examples=100, deadline=None)
@given(arrays(np.uint16, st.integers(2, 40)))
def test_to_8bit_monotone(x):
    y = D.to_8bit(x)
    order = np.argsort(x, kind="stable")
    assert np.all(np.diff(y[order].astype(int)) >= 0)


# -- synthetic data ----------------------------------------------------------------

SMALL = D.SynthConfig(count_per_class=6, image_size=32, canvas_size=96, blob_axes=(8, 14), seed=5)


def test_synth_files_byte_identical(tmp_path):
    D.synth_generate(SMALL, tmp_path / "a")
    D.synth_generate(SMALL, tmp_path / "b")
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert len(files) == 6 * 2 * 2 + 1
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_synth_samples_valid():
    samples = D.synth_samples(SMALL)
    assert [s.label for s in samples].count(D.ABNORMAL) == 6
    for s in samples:
        assert s.image.shape == (32, 32) and s.image.dtype == np.uint8
        if s.label == D.ABNORMAL:
            assert s.mask.any()
        else:
            assert not s.mask.any()


def test_synth_seed_changes_output():
    a = D.synth_case(SMALL, 0)[0].image
    b = D.synth_case(D.SynthConfig(count_per_class=6, image_size=32, canvas_size=96,
                                   blob_axes=(8, 14), seed=6), 0)[0].image
    assert not np.array_equal(a, b)


def test_synth_config_validation():
    with pytest.raises(ValueError):
        D.SynthConfig(canvas_size=40)
    with pytest.raises(ValueError):
        D.SynthConfig(contrast=(0.5, 0.2))


# -- filters -----------------------------------------------------------------------

def test_filters_checkerboard(rng):
    roi = rng.integers(1, 256, size=(6, 6)).astype(np.uint8)
    board = (np.indices((6, 6)).sum(axis=0) % 2).astype(bool)
    kept = D.mask_filter(roi, board)
    assert np.array_equal(kept[board], roi[board]) and not kept[~board].any()
    inv = D.inverse_mask_filter(roi, board)
    assert np.array_equal(inv[~board], roi[~board]) and not inv[board].any()


def test_filter_identities(rng):
    roi = rng.integers(0, 256, size=(5, 7)).astype(np.uint8)
    np.testing.assert_array_equal(D.cam_filter(roi, np.ones((5, 7))), roi)
    assert not D.cam_filter(roi, np.zeros((5, 7))).any()
    np.testing.assert_array_equal(D.mask_filter(roi, np.ones((5, 7))), roi)
    np.testing.assert_array_equal(D.cam_filter(np.array([[3]], np.uint8), np.array([[0.5]])), [[2]])
    with pytest.raises(ValueError):
        D.mask_filter(roi, np.ones((5, 6)))


@settings(max_examples=100, deadline=None)
@given(st.data())
def test_mask_partition(data):
    roi = data.draw(arrays(np.uint8, st.tuples(st.integers(1, 10), st.integers(1, 10))))
    mask = data.draw(arrays(bool, roi.shape))
    a, b = D.mask_filter(roi, mask), D.inverse_mask_filter(roi, mask)
    assert np.array_equal(a.astype(int) + b, roi) and not (a & b).any()


def _normals(n, size=4):
    return [D.RoiSample(np.zeros((size, size), np.uint8), D.NORMAL, id=f"n{i}") for i in range(n)]


def _marker_masks(k):
    masks = []
    for j in range(k):
        m = np.zeros((4, 4), bool)
        m.flat[j] = True
        masks.append(m)
    return masks


def test_random_mask_single_and_resize():
    m = np.zeros((4, 4), bool)
    m[:2, :2] = True
    out = D.random_mask_assign(_normals(3, size=8), [m], np.random.default_rng(0))
    for s in out:
        assert s.mask.shape == (8, 8) and s.mask[:4, :4].all() and s.mask.sum() == 16
    with pytest.raises(ValueError):
        D.random_mask_assign(_normals(1), [], np.random.default_rng(0))


def test_random_mask_seeded():
    masks = _marker_masks(5)
    a = D.random_mask_assign(_normals(30), masks, np.random.default_rng(7))
    b = D.random_mask_assign(_normals(30), masks, np.random.default_rng(7))
    assert all(np.array_equal(x.mask, y.mask) for x, y in zip(a, b))


def test_random_mask_uniform():
    k = 7
    out = D.random_mask_assign(_normals(10_000), _marker_masks(k), np.random.default_rng(11))
    counts = np.bincount([int(np.argmax(s.mask)) for s in out], minlength=k)
    assert chisquare(counts).pvalue > 1e-3


# -- manifests ---------------------------------------------------------------------

def test_manifest_round_trip(tmp_path):
    samples = D.synth_samples(SMALL)
    splits = {s.id: ("train" if i % 3 else "val") for i, s in enumerate(samples)}
    D.write_dataset(samples, tmp_path, splits, seed=5)
    manifest = D.load_manifest(tmp_path / "manifest.jsonl")
    assert manifest.counts == {D.NORMAL: 6, D.ABNORMAL: 6}
    assert {r.id: r.split for r in manifest.records} == splits
    back = D.load_samples(manifest)
    for a, b in zip(samples, back):
        assert a.id == b.id and a.label == b.label
        assert np.array_equal(a.image, b.image) and np.array_equal(a.mask, b.mask)


def test_manifest_missing_file(tmp_path):
    D.write_dataset(D.synth_case(SMALL, 0), tmp_path)
    (tmp_path / "images" / "case0000-abn.png").unlink()
    with pytest.raises(FileNotFoundError):
        D.load_manifest(tmp_path / "manifest.jsonl")


def test_manifest_bad_record(tmp_path):
    (tmp_path / "manifest.jsonl").write_text('{"id": "x"}\n')
    with pytest.raises(ValueError, match="bad manifest record"):
        D.load_manifest(tmp_path / "manifest.jsonl")
