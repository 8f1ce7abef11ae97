import hashlib
import math

import numpy as np
import pytest

from inception_mamba.data import (BlobSpec, ManifestEntry, ManifestError, PnmError, SegSample, gen_blob_dataset,
                                  gen_blob_sample, load_manifest, read_image, read_manifest, read_mask,
                                  resize_mask, write_dataset, write_image, write_manifest, write_mask)

SMALL = BlobSpec(image_size=32, radius_min=4, radius_max=8, seed=3)
# SHA-256 over image and mask bytes of the first 8 samples of SMALL
SMALL_DIGEST = "d8e710a6b6c1a5ba49f1aee939985d07b4f646591351d50910732c603afaf204"


def digest(samples):
    h = hashlib.sha256()
    for s in samples:
        h.update(s.image.tobytes())
        h.update(s.mask.tobytes())
    return h.hexdigest()


def test_corpus_checksum_is_stable():
    assert digest(gen_blob_dataset(SMALL, 8)) == SMALL_DIGEST


def test_generation_is_deterministic_and_seeded():
    assert digest(gen_blob_dataset(SMALL, 4)) == digest(gen_blob_dataset(SMALL, 4))
    other = BlobSpec(image_size=32, radius_min=4, radius_max=8, seed=4)
    assert digest(gen_blob_dataset(other, 4)) != digest(gen_blob_dataset(SMALL, 4))


def test_samples_depend_only_on_index():
    tail = gen_blob_dataset(SMALL, 3, start=5)
    assert digest(tail) == digest(gen_blob_dataset(SMALL, 8)[5:])
    assert [s.id for s in tail] == ["blob00005", "blob00006", "blob00007"]


def test_sample_contract():
    for s in gen_blob_dataset(BlobSpec(), 10):
        assert s.image.shape == (3, 64, 64) and s.mask.shape == (64, 64)
        assert 0 <= s.image.min() and s.image.max() <= 1 and np.isfinite(s.image).all()
        assert set(np.unique(s.mask)) <= {0, 1} and s.mask.any()


def test_degenerate_spec_mask_is_thresholded_image():
    spec = BlobSpec(blobs_min=1, blobs_max=1, clutter_density=0.0, blur_sigma=0.0)
    for s in gen_blob_dataset(spec, 20):
        np.testing.assert_array_equal(s.mask, (s.image[0] > 0.5).astype(np.uint8))


def test_single_blob_area_matches_expectation():
    spec = BlobSpec(blobs_min=1, blobs_max=1, clutter_density=0.0, blur_sigma=0.0)
    frac = np.array([s.mask.mean() for s in gen_blob_dataset(spec, 1000)])
    sigma = frac.std(ddof=1) / math.sqrt(frac.size)
    assert abs(frac.mean() - spec.expected_single_blob_fraction()) < 3 * sigma


def test_clutter_does_not_touch_mask():
    quiet = gen_blob_sample(BlobSpec(clutter_density=0.0), 7)
    noisy = gen_blob_sample(BlobSpec(clutter_density=0.2), 7)
    np.testing.assert_array_equal(quiet.mask, noisy.mask)
    assert not np.array_equal(quiet.image, noisy.image)


@pytest.mark.parametrize("kwargs, field", [
    (dict(radius_max=40.0), "radius_max"), (dict(radius_min=0.0), "radius_min"),
    (dict(radius_min=20.0, radius_max=10.0), "radius_min"), (dict(blobs_min=0), "blobs_min"),
    (dict(blur_sigma=-1.0), "blur_sigma"), (dict(clutter_density=1.5), "clutter_density"),
    (dict(overlap_prob=-0.1), "overlap_prob"), (dict(image_size=2), "image_size"),
])
def test_invalid_spec_names_field(kwargs, field):
    with pytest.raises(ValueError, match=field):
        gen_blob_dataset(BlobSpec(**kwargs), 1)


# --- files ----------------------------------------------------------------------------

def test_image_roundtrip(tmp_path, rng):
    img = rng.integers(0, 256, (3, 5, 7)) / 255.0
    write_image(tmp_path / "a.ppm", img)
    assert read_image(tmp_path / "a.ppm").tobytes() == img.tobytes()


def test_mask_roundtrip(tmp_path, rng):
    mask = rng.integers(0, 2, (6, 4)).astype(np.uint8)
    write_mask(tmp_path / "m.pgm", mask)
    back = read_mask(tmp_path / "m.pgm")
    assert back.dtype == np.uint8 and back.tobytes() == mask.tobytes()


def test_header_comments_are_accepted(tmp_path):
    (tmp_path / "c.pgm").write_bytes(b"P5\n# made by hand\n2 1\n255\n\x00\x01")
    assert read_mask(tmp_path / "c.pgm").tolist() == [[0, 1]]


@pytest.mark.parametrize("data, match", [
    (b"P6\n4 4\n255\n" + bytes(15 * 3), "truncated"),
    (b"P6\n1 1\n255\n" + bytes(4), "trailing"),
    (b"P6\n1 1\n65535\n" + bytes(6), "maxval"),
    (b"P6\n1 x\n255\n" + bytes(3), "malformed"),
    (b"P5\n1 1\n255\n\x00", "P6"),
    (b"P6\n1 1\n255", "whitespace"),
])
def test_malformed_pixmaps(tmp_path, data, match):
    (tmp_path / "bad.ppm").write_bytes(data)
    with pytest.raises(PnmError, match=match):
        read_image(tmp_path / "bad.ppm")


def test_write_rejects_bad_arrays(tmp_path):
    with pytest.raises(ValueError):
        write_image(tmp_path / "x.ppm", np.zeros((4, 4)))
    with pytest.raises(ValueError):
        write_mask(tmp_path / "x.pgm", np.full((2, 2), 300))


# --- manifests ------------------------------------------------------------------------

def test_dataset_roundtrip_preserves_order(tmp_path):
    samples = gen_blob_dataset(SMALL, 3)
    manifest = write_dataset(tmp_path, samples[::-1])
    back = load_manifest(manifest)
    assert [s.id for s in back] == [s.id for s in samples[::-1]]
    assert digest(back) == digest(samples[::-1])


def test_large_manifest_roundtrip(tmp_path):
    entries = [ManifestEntry(f"id{i}", f"img/{i}.ppm", f"mask/{i}.pgm") for i in range(1000)]
    write_manifest(tmp_path / "m.tsv", entries)
    assert read_manifest(tmp_path / "m.tsv") == entries


def test_duplicate_id_names_both_lines(tmp_path):
    (tmp_path / "m.tsv").write_text("a\tx.ppm\tx.pgm\nb\ty.ppm\ty.pgm\na\tz.ppm\tz.pgm\n")
    with pytest.raises(ManifestError, match="lines 1 and 3"):
        read_manifest(tmp_path / "m.tsv")


def test_missing_field(tmp_path):
    (tmp_path / "m.tsv").write_text("a\tx.ppm\n")
    with pytest.raises(ManifestError, match="line 1"):
        read_manifest(tmp_path / "m.tsv")


def test_missing_files_reported_with_lines(tmp_path):
    manifest = write_dataset(tmp_path, gen_blob_dataset(SMALL, 3))
    (tmp_path / "masks" / "blob00001.pgm").unlink()
    with pytest.raises(ManifestError, match=r"line 2 \(blob00001\)"):
        load_manifest(manifest)


def test_load_resizes_to_model_input(tmp_path):
    manifest = write_dataset(tmp_path, gen_blob_dataset(SMALL, 2))
    back = load_manifest(manifest, size=(64, 64))
    assert back[0].image.shape == (3, 64, 64) and set(np.unique(back[0].mask)) <= {0, 1}


def test_nearest_mask_resize():
    mask = np.array([[0, 1], [2, 3]])
    assert resize_mask(mask, 4, 4).tolist() == [[0, 0, 1, 1], [0, 0, 1, 1], [2, 2, 3, 3], [2, 2, 3, 3]]
    assert resize_mask(resize_mask(mask, 4, 4), 2, 2).tolist() == mask.tolist()


def test_mismatched_sizes_in_manifest(tmp_path):
    s = SegSample(np.zeros((3, 4, 4)), np.zeros((4, 5), np.uint8), "odd")
    write_image(tmp_path / "i.ppm", s.image)
    write_mask(tmp_path / "m.pgm", s.mask)
    (tmp_path / "m.tsv").write_text("odd\ti.ppm\tm.pgm\n")
    with pytest.raises(ManifestError, match="odd"):
        load_manifest(tmp_path / "m.tsv")
