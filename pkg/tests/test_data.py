import hashlib
from pathlib import Path

import numpy as np
import pytest

from taggan.core import ConfigError
from taggan.data import (
    ManifestError,
    PhantomConfig,
    PhantomError,
    generate_dataset,
    generate_phantom,
    iterate_minibatches,
    load_manifest,
    sample_rng,
    synthesize_dataset,
)
from taggan.tagging import label_components


def _flood_components(mask):
    """Independent 4-connected flood fill returning pixel sets."""
    h, w = mask.shape
    seen = np.zeros_like(mask, dtype=bool)
    comps = []
    for y in range(h):
        for x in range(w):
            if mask[y, x] and not seen[y, x]:
                stack, pix = [(y, x)], []
                seen[y, x] = True
                while stack:
                    cy, cx = stack.pop()
                    pix.append((cy, cx))
                    for ny, nx in ((cy + 1, cx), (cy - 1, cx), (cy, cx + 1), (cy, cx - 1)):
                        if 0 <= ny < h and 0 <= nx < w and mask[ny, nx] and not seen[ny, nx]:
                            seen[ny, nx] = True
                            stack.append((ny, nx))
                comps.append(pix)
    return comps


def test_normal_phantom_has_no_lesions():
    cfg = PhantomConfig(seed=3)
    s = generate_phantom(cfg, None, False, sample_rng(3, False, 0))
    assert not s.abnormal
    assert s.gt_mask.sum() == 0 and s.gt_boxes == []


def test_phantom_deterministic():
    cfg = PhantomConfig(seed=5)
    a = generate_phantom(cfg, 1, True, sample_rng(5, True, 4))
    b = generate_phantom(cfg, 1, True, sample_rng(5, True, 4))
    assert a.image.tobytes() == b.image.tobytes()
    assert a.gt_mask.tobytes() == b.gt_mask.tobytes()
    assert a.gt_boxes == b.gt_boxes


def test_phantom_anatomy():
    cfg = PhantomConfig(seed=1, noise_sigma=0.0)
    s = generate_phantom(cfg, None, False, sample_rng(1, False, 0))
    assert s.image[0, 0] == -1.0
    assert abs(s.image[32, 17] - 0.2) < 1e-6
    assert s.image.dtype == np.float32 and s.image.min() >= -1 and s.image.max() <= 1


@pytest.mark.parametrize("domain", [0, 1, 2, 3])
def test_two_lesions_each_large_enough(domain):
    cfg = PhantomConfig(seed=11, lesions_per_image=(2, 2), n_domains=4)
    for i in range(10):
        s = generate_phantom(cfg, domain, True, sample_rng(11, True, i))
        assert len(s.gt_boxes) == 2
        for b in s.gt_boxes:
            inside = s.gt_mask[b.y_min:b.y_max + 1, b.x_min:b.x_max + 1].sum()
            assert inside >= 28  # pi * 3**2


def test_lesion_styles_differ_by_domain():
    cfg = PhantomConfig(seed=2, noise_sigma=0.0, lesions_per_image=(1, 1), lesion_radius=(6, 6))
    profiles = []
    for d in range(3):
        s = generate_phantom(cfg, d, True, sample_rng(2, True, 0))
        vals = s.image[s.gt_mask > 0]
        profiles.append((round(float(vals.std()), 3), round(float(vals.min()), 2)))
    assert len(set(profiles)) == 3


def test_ground_truth_invariants():
    cfg = PhantomConfig(seed=9, n_abnormal=30, n_domains=4)
    for s in generate_dataset(cfg):
        assert s.gt_mask.sum() > 0
        comps = _flood_components(s.gt_mask)
        assert len(comps) == len(s.gt_boxes)
        tight = set()
        for pix in comps:
            ys, xs = zip(*pix)
            tight.add((min(xs), min(ys), max(xs), max(ys)))
        assert tight == {tuple(b) for b in s.gt_boxes}


def test_placement_failure_is_reported():
    cfg = PhantomConfig(seed=0, lesions_per_image=(8, 8), lesion_radius=(8, 8))
    with pytest.raises(PhantomError, match="after 100 attempts"):
        generate_phantom(cfg, 0, True, sample_rng(0, True, 0))


def test_config_validation():
    with pytest.raises(ConfigError):
        PhantomConfig(n_normal=-1)
    with pytest.raises(ConfigError):
        PhantomConfig(lesion_radius=(3, 20))
    with pytest.raises(ConfigError):
        PhantomConfig(image_size=30)


def _tree_hash(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_synthesize_counts_and_determinism(tmp_path):
    cfg = PhantomConfig(n_normal=5, n_abnormal=5, seed=7)
    m1 = synthesize_dataset(cfg, tmp_path / "a")
    m2 = synthesize_dataset(cfg, tmp_path / "b")
    assert len(m1.read_text().strip().splitlines()) == 11
    assert _tree_hash(tmp_path / "a") == _tree_hash(tmp_path / "b")


def test_synthesize_without_abnormal_writes_no_masks(tmp_path):
    synthesize_dataset(PhantomConfig(n_normal=3, n_abnormal=0, seed=1), tmp_path)
    assert not (tmp_path / "masks").exists()
    assert not (tmp_path / "boxes").exists()


def test_manifest_round_trip(tmp_path):
    cfg = PhantomConfig(n_normal=5, n_abnormal=5, seed=7)
    ds = load_manifest(synthesize_dataset(cfg, tmp_path), n_domains=3)
    ref = generate_dataset(cfg)
    assert len(ds) == 10
    for got, want in zip(ds, ref):
        assert got.id == want.id and got.label == want.label
        # 8-bit quantisation step is 2/255
        assert np.abs(got.image - want.image).max() <= 1 / 255 + 1e-6
        if want.abnormal:
            np.testing.assert_array_equal(got.gt_mask, want.gt_mask)
            assert got.gt_boxes == want.gt_boxes
        else:
            assert got.gt_mask is None and got.gt_boxes is None


def test_manifest_header_only(tmp_path):
    p = tmp_path / "m.csv"
    p.write_text("id,image_path,label,mask_path,boxes_path\n")
    assert load_manifest(p) == []


def test_manifest_missing_image(tmp_path):
    p = tmp_path / "m.csv"
    p.write_text("id,image_path,label\nx,nowhere.png,0\n")
    with pytest.raises(ManifestError, match="nowhere.png"):
        load_manifest(p)


def test_manifest_label_out_of_range(tmp_path):
    manifest = synthesize_dataset(PhantomConfig(n_abnormal=3, seed=1), tmp_path)
    with pytest.raises(ManifestError, match=r":4:"):
        load_manifest(manifest, n_domains=2)


def test_manifest_malformed_label(tmp_path):
    manifest = synthesize_dataset(PhantomConfig(n_normal=1, seed=1), tmp_path)
    text = manifest.read_text().replace(",normal,", ",sick,")
    manifest.write_text(text)
    with pytest.raises(ManifestError, match=r":2: bad label"):
        load_manifest(manifest)


def test_minibatch_counts():
    ds = generate_dataset(PhantomConfig(n_normal=7, seed=0))
    assert len(list(iterate_minibatches(ds, 1, 0))) == 7
    assert [len(b) for b in iterate_minibatches(ds, 3, 0)] == [3, 3, 1]


def test_minibatch_determinism_and_coverage():
    ds = generate_dataset(PhantomConfig(n_normal=6, n_abnormal=5, seed=0))
    order1 = [s.id for b in iterate_minibatches(ds, 2, 42) for s in b]
    order2 = [s.id for b in iterate_minibatches(ds, 2, 42) for s in b]
    order3 = [s.id for b in iterate_minibatches(ds, 2, 43) for s in b]
    assert order1 == order2
    assert order1 != order3
    assert sorted(order1) == sorted(s.id for s in ds)


def test_minibatch_errors():
    with pytest.raises(ConfigError):
        list(iterate_minibatches([], 1, 0))
    with pytest.raises(ConfigError):
        list(iterate_minibatches([1], 0, 0))


def test_label_components_agrees_with_flood_fill(rng):
    for _ in range(20):
        mask = (rng.random((16, 16)) < 0.4).astype(np.uint8)
        _, n = label_components(mask)
        assert n == len(_flood_components(mask))
