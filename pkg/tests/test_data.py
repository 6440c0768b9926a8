import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dpcqa.cellular import dilate
from dpcqa.data import (
    MANIFEST_FIELDS,
    DegradationSpec,
    ImageFormatError,
    apply_degradation,
    artefact_labels,
    decode_pnm,
    encode_pnm,
    gaussian_blur,
    gaussian_kernel,
    generate_clean_patch,
    load_dataset,
    load_image,
    load_patch,
    read_manifest,
    sample_degradation,
    save_image,
    split_sizes,
    synth_dataset,
    to_bytes,
    write_dataset,
)


# -- PPM / PGM -------------------------------------------------------------------------------

def test_single_white_pixel(tmp_path):
    f = tmp_path / "w.ppm"
    f.write_bytes(b"P6\n1 1\n255\n\xff\xff\xff")
    np.testing.assert_array_equal(load_image(f), np.ones((3, 1, 1)))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 9), st.integers(1, 9), st.integers(0, 2**16))
def test_canonical_p6_round_trip_is_byte_identical(h, w, seed):
    import tempfile
    from pathlib import Path

    raw = np.random.default_rng(seed).integers(0, 256, size=(h, w, 3), dtype=np.uint8)
    blob = encode_pnm(raw)
    with tempfile.TemporaryDirectory() as d:
        src, dst = Path(d) / "a.ppm", Path(d) / "b.ppm"
        src.write_bytes(blob)
        save_image(dst, load_image(src))
        assert dst.read_bytes() == blob


def test_float_round_trip_loss_bound(rng, tmp_path):
    img = rng.uniform(size=(3, 7, 5))
    save_image(tmp_path / "x.ppm", img)
    assert np.abs(load_image(tmp_path / "x.ppm") - img).max() <= 1 / 510 + 1e-7


def test_round_half_up():
    np.testing.assert_array_equal(to_bytes(np.array([0.5 / 255, 1.5 / 255, -0.2, 1.3])), [1, 2, 0, 255])


def test_header_comments_and_pgm():
    arr = decode_pnm(b"P5 # comment\n2 1\n# more\n255\n\x00\x80")
    np.testing.assert_array_equal(arr, [[0, 128]])


@pytest.mark.parametrize(
    "blob,offset,match",
    [
        (b"P3\n1 1\n255\n\x00\x00\x00", 0, "magic"),
        (b"P6\n1 1\n65535\n\x00\x00\x00\x00\x00\x00", 7, "maxval"),
        (b"P6\n2 2\n255\n\x00\x00", 13, "truncated"),
        (b"P6\n1 1", 6, "truncated header"),
        (b"P6\nx 1\n255\n\x00\x00\x00", 3, "non-integer"),
        (b"P6\n0 1\n255\n", 3, "dimensions"),
    ],
)
def test_malformed_inputs_report_offsets(blob, offset, match):
    with pytest.raises(ImageFormatError, match=match) as err:
        decode_pnm(blob)
    assert err.value.offset == offset
    assert f"byte offset {offset}" in str(err.value)


# -- clean patches -----------------------------------------------------------------------------

def test_no_cells_uniform_background():
    p = generate_clean_patch(3, n_cells=0)
    assert p.n_cells == 0 and p.s_star == 1.0
    assert not p.masks.nuc.any() and not p.masks.mem.any()
    assert np.ptp(p.image.reshape(3, -1), axis=1).max() == 0
    # eosin-like: red channel dominates green
    assert p.image[0, 0, 0] > p.image[1, 0, 0]


def test_clean_patch_determinism():
    a, b = generate_clean_patch(11, 40, 36, 5), generate_clean_patch(11, 40, 36, 5)
    assert a.image.tobytes() == b.image.tobytes()
    np.testing.assert_array_equal(a.masks.labels, b.masks.labels)
    assert generate_clean_patch(12, 40, 36, 5).image.tobytes() != a.image.tobytes()


def test_mask_bookkeeping_many_cells():
    p = generate_clean_patch(5, 64, 64, 12)
    labels = p.masks.labels
    ids = sorted(set(np.unique(labels)) - {0})
    assert ids == list(range(1, p.n_cells + 1))
    assert 1 <= p.n_cells <= 12
    # nuclei render purple, away from the background tone
    assert p.image[:, labels > 0].mean(axis=1)[1] < p.image[:, labels == 0].mean(axis=1)[1]
    # membrane rims never overlap nuclei, and no two rims share a pixel beyond label bookkeeping
    assert not (p.masks.mem & p.masks.nuc).any()


def test_clean_patch_preconditions():
    with pytest.raises(ValueError):
        generate_clean_patch(0, 16, 32, 1)
    with pytest.raises(ValueError):
        generate_clean_patch(0, n_cells=-1)


# -- blur ----------------------------------------------------------------------------------------

def test_gaussian_kernel_radius_and_mass():
    for sigma in (0.3, 1.0, 2.2):
        k = gaussian_kernel(sigma)
        assert len(k) == 2 * max(int(np.ceil(3 * sigma)), 1) + 1
        assert k.sum() == pytest.approx(1.0)


def test_blur_matches_direct_2d_sum(rng):
    img = rng.uniform(size=(1, 9, 8))
    sigma = 1.0
    k = gaussian_kernel(sigma)
    r = len(k) // 2
    padded = np.pad(img[0], r, mode="reflect")
    ref = np.zeros((9, 8))
    for y in range(9):
        for x in range(8):
            ref[y, x] = (np.outer(k, k) * padded[y:y + 2 * r + 1, x:x + 2 * r + 1]).sum()
    np.testing.assert_allclose(gaussian_blur(img, sigma)[0], ref, atol=1e-12)


# -- degradation ---------------------------------------------------------------------------------

def test_zero_spec_is_identity():
    p = generate_clean_patch(1)
    q = apply_degradation(p, DegradationSpec())
    assert q.image.tobytes() == p.image.tobytes() and q.s_star == p.s_star
    assert q.artefact_labels == frozenset()


def test_documented_blur_example():
    p = apply_degradation(generate_clean_patch(1), DegradationSpec(blur_sigma=3.0))
    assert DegradationSpec(blur_sigma=3.0).severity() == pytest.approx(0.6)
    assert p.s_star == pytest.approx(0.4)
    assert p.artefact_labels == {"membrane", "nucleus"}


def test_severity_map_components():
    spec = DegradationSpec(blur_sigma=1.5, stain_gain=(1.3, 1.0, 1.0), stain_offset=(0.0, 0.4, 0.0), noise_sigma=0.05)
    # 0.6 * 0.5 + 0.25 * 0.5 / 0.5 + 0.15 * 0.5
    assert spec.severity() == pytest.approx(0.3 + 0.25 + 0.075)
    assert DegradationSpec(blur_sigma=10, noise_sigma=1, stain_offset=(1, 1, 1)).severity() == 1.0


def test_increasing_blur_lowers_s_star():
    p = generate_clean_patch(2)
    stars = [apply_degradation(p, DegradationSpec(blur_sigma=s)).s_star for s in (0, 1, 2, 3)]
    assert all(a > b for a, b in zip(stars, stars[1:]))


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 5), st.floats(0, 0.5), st.floats(0, 0.2), st.floats(0, 2), st.sampled_from(["blur", "stain", "noise"]))
def test_severity_monotone_per_component(blur, stain, noise, bump, which):
    base = DegradationSpec(blur_sigma=blur, stain_offset=(stain, 0.0, 0.0), noise_sigma=noise)
    more = {
        "blur": DegradationSpec(blur_sigma=blur + bump, stain_offset=(stain, 0.0, 0.0), noise_sigma=noise),
        "stain": DegradationSpec(blur_sigma=blur, stain_offset=(stain + bump, 0.0, 0.0), noise_sigma=noise),
        "noise": DegradationSpec(blur_sigma=blur, stain_offset=(stain, 0.0, 0.0), noise_sigma=noise + bump),
    }[which]
    assert 0.0 <= base.severity() <= more.severity() <= 1.0


def test_masks_are_never_edited(rng):
    p = generate_clean_patch(4, 48, 48, 8)
    for target in ("global", "membrane", "nucleus"):
        spec = sample_degradation(rng, 0.9, noise_seed=3)
        spec.target = target
        q = apply_degradation(p, spec)
        assert q.masks is p.masks
        assert 0.0 <= q.image.min() and q.image.max() <= 1.0


def test_targeted_blur_stays_in_dilated_region():
    p = generate_clean_patch(6, 48, 48, 6)
    for target, mask in (("membrane", p.masks.mem), ("nucleus", p.masks.nuc)):
        q = apply_degradation(p, DegradationSpec(blur_sigma=2.0, target=target))
        changed = np.any(q.image != p.image, axis=0)
        assert changed.any()
        assert not (changed & ~dilate(mask, 1)).any()
        assert q.artefact_labels == {target}


def test_stain_shift_is_channel_affine():
    p = generate_clean_patch(7, n_cells=0)
    q = apply_degradation(p, DegradationSpec(stain_gain=(0.9, 1.0, 1.0), stain_offset=(0.0, -0.1, 0.0)))
    np.testing.assert_allclose(q.image[0], p.image[0] * 0.9, atol=1e-6)
    np.testing.assert_allclose(q.image[1], p.image[1] - 0.1, atol=1e-6)
    np.testing.assert_array_equal(q.image[2], p.image[2])
    # labels need a severity share of at least 0.1, i.e. a shift norm of 0.2
    assert "staining" not in artefact_labels(DegradationSpec(stain_offset=(0.0, -0.1, 0.0)))
    assert "staining" in artefact_labels(DegradationSpec(stain_offset=(0.0, -0.2, 0.0)))


def test_invalid_spec():
    with pytest.raises(ValueError):
        DegradationSpec(target="cytoplasm")
    with pytest.raises(ValueError):
        DegradationSpec(blur_sigma=-1)


def test_sampled_severity_hits_target(rng):
    for target in np.linspace(0, 1, 21):
        spec = sample_degradation(rng, float(target), noise_seed=0)
        assert spec.severity() == pytest.approx(min(target, 1.0), abs=1e-9)


# -- datasets ------------------------------------------------------------------------------------

def test_split_sizes():
    assert split_sizes(10) == (7, 1, 2)
    assert split_sizes(200) == (140, 20, 40)


def test_dataset_splits_disjoint_and_sized():
    ds = synth_dataset(7, 50)
    by_split = {s: {p.patch_id for p in ds.subset(s)} for s in ("train", "val", "test")}
    assert [len(by_split[s]) for s in ("train", "val", "test")] == [35, 5, 10]
    assert not (by_split["train"] & by_split["val"]) and not (by_split["train"] & by_split["test"])
    assert set().union(*by_split.values()) == {p.patch_id for p in ds.patches}


def test_severity_histogram_covers_deciles():
    ds = synth_dataset(7, 200)
    sev = np.array([1 - p.s_star for p in ds.patches])
    counts, _ = np.histogram(sev, bins=10, range=(0, 1))
    assert (counts > 0).sum() >= 8


def test_dataset_rejects_small_n():
    with pytest.raises(ValueError):
        synth_dataset(0, 9)


def test_written_dataset_is_deterministic_and_loadable(tmp_path):
    a = write_dataset(synth_dataset(3, 12), tmp_path / "a")
    b = write_dataset(synth_dataset(3, 12), tmp_path / "b")
    for fa in sorted(a.parent.iterdir()):
        assert fa.read_bytes() == (b.parent / fa.name).read_bytes()
    header = a.read_text().splitlines()[0]
    assert header == ",".join(MANIFEST_FIELDS)
    entries, patches = load_dataset(a.parent)
    assert len(entries) == 12 == len(patches)
    ds = synth_dataset(3, 12)
    for e, p in zip(entries, ds.patches):
        q = patches[e.patch_id]
        assert e.s_star == p.s_star and e.labels == p.artefact_labels and e.n_cells == q.n_cells == p.n_cells
        np.testing.assert_array_equal(q.masks.labels, p.masks.labels)
        assert np.abs(q.image - p.image).max() <= 1 / 510 + 1e-7


def test_missing_mask_means_no_cells(tmp_path):
    save_image(tmp_path / "x.ppm", np.full((3, 32, 32), 0.5))
    assert load_patch(tmp_path, "x").n_cells == 0


def test_manifest_missing_column(tmp_path):
    f = tmp_path / "manifest.csv"
    f.write_text("id,split\np0,train\n")
    with pytest.raises(ValueError, match="missing columns"):
        read_manifest(f)
