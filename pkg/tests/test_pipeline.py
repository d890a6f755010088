"""Data pipeline: ingestion, manifests, patient-disjoint splits,
augmentation, patches, resizing, normalization."""

import math

import numpy as np
import pytest

from irrcnn import data
from irrcnn.errors import ConfigError, DataError
from irrcnn.rng import fork_rng


def make_manifest(patient_sizes, dataset_id="breakhis", cls="benign"):
    """One manifest with the given patient -> sample-count layout."""
    records = []
    for pid, count in patient_sizes.items():
        for i in range(count):
            records.append(
                data.SampleRecord(f"{pid}_{i}.png", pid, "40", cls, "A")
            )
    return data.Manifest(dataset_id, records)


# ---------------------------------------------------------------------------
# filename parsing / ingestion
# ---------------------------------------------------------------------------


def test_ingest_breakhis_tree(breakhis_tree):
    manifest = data.ingest(breakhis_tree, "breakhis")
    assert len(manifest.records) == 32
    assert manifest.vocabulary == ("benign", "malignant")
    counts = manifest.counts()
    for cls in ("benign", "malignant"):
        for mag in ("40", "100"):
            assert counts[(cls, mag)] == 8
    patients = {r.patient_id for r in manifest.records}
    assert len(patients) == 8
    benign = [r for r in manifest.records if r.class_label == "benign"]
    assert all(r.subclass_label == "A" for r in benign)
    assert all(r.split == "unassigned" for r in manifest.records)
    assert manifest.metadata["warnings"] == []


def test_ingest_parses_the_naming_fields(tmp_path):
    from PIL import Image

    d = tmp_path / "x"
    d.mkdir()
    img = np.zeros((4, 4, 3), dtype=np.uint8)
    Image.fromarray(img).save(d / "SOB_M_DC-14-10926-400-011.png")
    with pytest.warns(UserWarning):  # the benign class has zero records here
        manifest = data.ingest(d, "breakhis")
    (rec,) = manifest.records
    assert rec.patient_id == "14-10926"
    assert rec.magnification == "400"
    assert rec.class_label == "malignant"
    assert rec.subclass_label == "DC"


def test_ingest_warns_on_junk_and_rejects_empty(tmp_path, breakhis_tree):
    from PIL import Image

    junk = breakhis_tree / "benign" / "IMG_0001.png"
    Image.fromarray(np.zeros((4, 4, 3), dtype=np.uint8)).save(junk)
    with pytest.warns(UserWarning, match="problem"):
        manifest = data.ingest(breakhis_tree, "breakhis")
    assert len(manifest.records) == 32  # junk skipped, not ingested
    assert any("IMG_0001" in w for w in manifest.metadata["warnings"])

    empty = tmp_path / "empty"
    empty.mkdir()
    with pytest.raises(DataError):
        data.ingest(empty, "breakhis")
    with pytest.raises(DataError):
        data.ingest(tmp_path / "missing", "breakhis")
    with pytest.raises(ConfigError):
        data.ingest(breakhis_tree, "imagenet")


def test_ingest_challenge_layout(tmp_path):
    from PIL import Image

    root = tmp_path / "c"
    for cls in ("normal", "benign", "insitu", "invasive"):
        (root / cls).mkdir(parents=True)
        for i in range(2):
            Image.fromarray(np.zeros((4, 4, 3), dtype=np.uint8)).save(
                root / cls / f"{cls}_{i}.png"
            )
    with pytest.warns(UserWarning):  # zero-record classes are impossible here,
        # but a stray class directory is flagged
        (root / "stroma").mkdir()
        Image.fromarray(np.zeros((4, 4, 3), dtype=np.uint8)).save(root / "stroma" / "s.png")
        manifest = data.ingest(root, "challenge2015")
    assert len(manifest.records) == 8
    assert all(r.patient_id == "" and r.magnification == "none" for r in manifest.records)


def test_parent_image_id_strips_derived_suffixes():
    assert data.parent_image_id("a/SOB_B_TA-14-4659-40-001__a003.png") == "SOB_B_TA-14-4659-40-001"
    assert data.parent_image_id("SOB_B_TA-14-4659-40-001__p017.png") == "SOB_B_TA-14-4659-40-001"
    assert data.parent_image_id("SOB_B_TA-14-4659-40-001.png") == "SOB_B_TA-14-4659-40-001"
    assert data.parent_image_id("weird__x01.png") == "weird__x01"  # unknown suffix kept


def test_sample_record_validation():
    with pytest.raises(DataError):
        data.SampleRecord("x.png", magnification="63")
    with pytest.raises(DataError):
        data.SampleRecord("x.png", split="holdout")
    with pytest.raises(DataError):
        data.SampleRecord("x.png", class_label="benign", subclass_label="DC")  # DC is malignant
    with pytest.raises(DataError):
        data.SampleRecord("x.png", class_label="benign", subclass_label="ZZ")


# ---------------------------------------------------------------------------
# manifest persistence
# ---------------------------------------------------------------------------


def test_manifest_round_trip(tmp_path):
    manifest = make_manifest({"P1": 3, "P2": 2})
    manifest.metadata["note"] = "fixture"
    path = tmp_path / "m.csv"
    manifest.save(path)

    assert path.exists() and path.with_suffix(".csv.meta.json").exists()
    header = path.read_text().splitlines()[0]
    assert header == ",".join(data.MANIFEST_HEADER)

    loaded = data.Manifest.load(path)
    assert loaded.dataset_id == "breakhis"
    assert loaded.vocabulary == ("benign", "malignant")
    assert loaded.metadata["note"] == "fixture"
    assert [(r.path, r.patient_id, r.split) for r in loaded.records] == [
        (r.path, r.patient_id, r.split) for r in manifest.records
    ]
    # no temp files left behind by the atomic writes
    assert list(tmp_path.glob("*.tmp")) == []


def test_manifest_load_rejects_wrong_header(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("path,patient,mag\nx.png,P1,40\n")
    with pytest.raises(DataError):
        data.Manifest.load(bad)
    with pytest.raises(DataError):
        data.Manifest.load(tmp_path / "nope.csv")


def test_manifest_rejects_duplicates_and_unknown_labels():
    rec = data.SampleRecord("same.png", "P1", "40", "benign", "A")
    with pytest.raises(DataError):
        data.Manifest("breakhis", [rec, data.SampleRecord("same.png", "P2", "40", "benign", "A")])
    with pytest.raises(DataError):
        data.Manifest("breakhis", [data.SampleRecord("x.png", "P1", "40", "stroma")])


def test_manifest_without_sidecar_infers_vocabulary(tmp_path):
    manifest = make_manifest({"P1": 2})
    path = tmp_path / "m.csv"
    manifest.save(path)
    path.with_suffix(".csv.meta.json").unlink()
    loaded = data.Manifest.load(path)
    assert loaded.vocabulary == ("benign",)  # alphabetical over observed labels


# ---------------------------------------------------------------------------
# patient-disjoint splitting
# ---------------------------------------------------------------------------


def test_split_greedy_walkthrough():
    # patients with 10, 10, 5, 5 samples at fraction 0.7 (target 21):
    # visiting order P1 P2 P3 P4 accumulates 10, 20, 25 -> stop; P4 tests.
    # seed 5 happens to permute the 4 sorted keys identically.
    manifest = make_manifest({"P1": 10, "P2": 10, "P3": 5, "P4": 5})
    order = fork_rng(5, "split").permutation(4)
    assert list(order) == [0, 1, 2, 3]  # precondition for the walkthrough

    out = split_train = data.split_by_patient(manifest, train_fraction=0.7, seed=5)
    train = {r.patient_id for r in out.records if r.split == "train"}
    test = {r.patient_id for r in out.records if r.split == "test"}
    assert train == {"P1", "P2", "P3"}
    assert test == {"P4"}
    assert len(split_train.subset("train")) == 25


@pytest.mark.parametrize("seed", range(40))
def test_split_disjoint_and_fraction(seed):
    sizes = {f"P{i:02d}": 3 + (i % 5) for i in range(12)}
    manifest = make_manifest(sizes)
    total = sum(sizes.values())
    out = data.split_by_patient(manifest, train_fraction=0.7, seed=seed)

    train = {r.patient_id for r in out.records if r.split == "train"}
    test = {r.patient_id for r in out.records if r.split == "test"}
    assert train & test == set()
    assert train | test == set(sizes)

    n_train = len(out.subset("train"))
    assert n_train >= 0.7 * total
    # minimal overshoot: some train patient's removal drops below target
    assert any(n_train - sizes[p] < 0.7 * total for p in train)


def test_split_preserves_record_order_and_metadata():
    manifest = make_manifest({"P1": 4, "P2": 4})
    out = data.split_by_patient(manifest, train_fraction=0.5, seed=3)
    assert [r.path for r in out.records] == [r.path for r in manifest.records]
    assert all(r.split == "unassigned" for r in manifest.records)  # input untouched
    assert out.metadata["split_seed"] == 3
    assert out.metadata["train_fraction"] == 0.5


def test_split_single_patient_warns():
    manifest = make_manifest({"P1": 6})
    with pytest.warns(UserWarning, match="single patient"):
        out = data.split_by_patient(manifest, train_fraction=0.7, seed=0)
    assert all(r.split == "train" for r in out.records)


def test_split_anonymous_records_are_singleton_patients():
    records = [
        data.SampleRecord(f"img{i}.png", "", "none", "benign") for i in range(10)
    ]
    manifest = data.Manifest("breakhis", records)
    out = data.split_by_patient(manifest, train_fraction=0.7, seed=1)
    assert len(out.subset("train")) == 7
    assert len(out.subset("test")) == 3


def test_split_validation():
    manifest = make_manifest({"P1": 2})
    with pytest.raises(ConfigError):
        data.split_by_patient(manifest, train_fraction=1.0)
    with pytest.raises(ConfigError):
        data.split_by_patient(manifest, train_fraction=0.0)
    with pytest.raises(DataError):
        data.split_by_patient(data.Manifest("breakhis", []), train_fraction=0.7)


def test_split_is_seed_deterministic():
    manifest = make_manifest({f"P{i}": 4 for i in range(9)})
    a = data.split_by_patient(manifest, 0.7, seed=11)
    b = data.split_by_patient(manifest, 0.7, seed=11)
    c = data.split_by_patient(manifest, 0.7, seed=12)
    assert [r.split for r in a.records] == [r.split for r in b.records]
    assert [r.split for r in a.records] != [r.split for r in c.records]


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


def checkerboard(h=12, w=10):
    rng = np.random.default_rng(0)
    return rng.integers(0, 256, size=(h, w, 3)).astype(np.uint8)


def test_augment_count_and_original_first():
    img = checkerboard()
    cfg = data.AugmentConfig(outputs_per_input=21, seed=0)
    outs = data.augment(img, cfg)
    assert len(outs) == 21
    np.testing.assert_array_equal(outs[0], img)
    assert outs[0] is not img and not np.shares_memory(outs[0], img)
    assert all(o.shape == img.shape and o.dtype == np.uint8 for o in outs)


def test_augment_is_deterministic_per_stream():
    img = checkerboard()
    cfg = data.AugmentConfig(outputs_per_input=5)
    a = data.augment(img, cfg, rng=fork_rng(3, "augment/x"))
    b = data.augment(img, cfg, rng=fork_rng(3, "augment/x"))
    c = data.augment(img, cfg, rng=fork_rng(3, "augment/y"))
    for ai, bi in zip(a, b):
        np.testing.assert_array_equal(ai, bi)
    assert any(not np.array_equal(ai, ci) for ai, ci in zip(a[1:], c[1:]))


def test_augment_flip_only_config_produces_flips():
    # with every geometric knob at zero the transform is exactly a flip choice
    img = checkerboard()
    cfg = data.AugmentConfig(
        rotation_max_deg=0.0, width_shift_frac=0.0, height_shift_frac=0.0,
        shear_frac=0.0, zoom_frac=0.0, outputs_per_input=12,
    )
    variants = [img, np.flip(img, 1), np.flip(img, 0), np.flip(np.flip(img, 0), 1)]
    for out in data.augment(img, cfg, rng=fork_rng(0, "a")):
        assert any(np.array_equal(out, v) for v in variants)


def test_augment_identity_when_everything_is_off():
    img = checkerboard()
    cfg = data.AugmentConfig(
        rotation_max_deg=0.0, width_shift_frac=0.0, height_shift_frac=0.0,
        shear_frac=0.0, zoom_frac=0.0, horizontal_flip=False, vertical_flip=False,
        outputs_per_input=4,
    )
    for out in data.augment(img, cfg, rng=fork_rng(0, "a")):
        np.testing.assert_array_equal(out, img)


def test_augment_single_output_is_just_the_original():
    img = checkerboard()
    outs = data.augment(img, data.AugmentConfig(outputs_per_input=1))
    assert len(outs) == 1
    np.testing.assert_array_equal(outs[0], img)


def test_augment_validation():
    with pytest.raises(DataError):
        data.augment(np.zeros((4, 4), dtype=np.uint8), data.AugmentConfig())
    with pytest.raises(ConfigError):
        data.AugmentConfig(outputs_per_input=0)
    with pytest.raises(ConfigError):
        data.AugmentConfig(zoom_frac=1.5)
    with pytest.raises(ConfigError):
        data.AugmentConfig(rotation_max_deg=-1.0)


def test_augment_table_arithmetic():
    # the x21 bookkeeping used on the real corpora
    img = np.zeros((4, 4, 3), dtype=np.uint8)
    cfg = data.AugmentConfig(outputs_per_input=21)
    per_call = len(data.augment(img, cfg))
    assert per_call == 21
    assert 1995 * per_call == 41895
    assert 249 * per_call == 5229


# ---------------------------------------------------------------------------
# patches
# ---------------------------------------------------------------------------


def test_center_patch_coordinates_on_slide_sized_image():
    # 2040 wide x 1536 tall: the 128 patch starts at x=956, y=704
    rng = np.random.default_rng(1)
    img = rng.integers(0, 256, size=(1536, 2040, 3)).astype(np.uint8)
    patch = data.extract_center_patch(img, size=128)
    assert patch.shape == (128, 128, 3)
    np.testing.assert_array_equal(patch, img[704:832, 956:1084])


def test_center_patch_exact_fit_is_identity():
    img = checkerboard(64, 64)
    np.testing.assert_array_equal(data.extract_center_patch(img, size=64), img)


def test_center_patch_too_small_names_dimensions():
    img = np.zeros((100, 100, 3), dtype=np.uint8)
    with pytest.raises(DataError, match=r"100x100 is smaller than the 128x128 patch"):
        data.extract_center_patch(img, size=128)


def test_random_patches_exact_count_and_bounds():
    img = checkerboard(40, 33)
    patches = data.extract_random_patches(img, count=200, size=16, seed=9)
    assert len(patches) == 200
    for p in patches:
        assert p.shape == (16, 16, 3)
    # every patch content actually occurs in the image (spot check a few)
    flat = img.reshape(-1, 3)
    for p in patches[:5]:
        assert any(np.array_equal(p[0, 0], px) for px in flat)


def test_random_patches_deterministic_and_validated():
    img = checkerboard(30, 30)
    a = data.extract_random_patches(img, count=8, size=8, seed=4)
    b = data.extract_random_patches(img, count=8, size=8, seed=4)
    for pa, pb in zip(a, b):
        np.testing.assert_array_equal(pa, pb)
    with pytest.raises(ConfigError):
        data.extract_random_patches(img, count=0, size=8)
    with pytest.raises(DataError):
        data.extract_random_patches(img, count=1, size=64)


def test_random_patches_cover_all_valid_offsets():
    # on a tiny image the uniform draw must reach the extreme corners
    img = checkerboard(6, 6)
    tops = set()
    patches = data.extract_random_patches(img, count=300, size=4, seed=0)
    for p in patches:
        for y0 in range(3):
            for x0 in range(3):
                if np.array_equal(p, img[y0 : y0 + 4, x0 : x0 + 4]):
                    tops.add((y0, x0))
    assert tops == {(y, x) for y in range(3) for x in range(3)}


# ---------------------------------------------------------------------------
# resize
# ---------------------------------------------------------------------------


def resize_oracle(img, size):
    """Independent per-pixel bilinear resample (half-pixel centers, edge clamp)."""
    h, w = img.shape[:2]
    out = np.zeros((size, size, 3))
    for i in range(size):
        for j in range(size):
            y = (i + 0.5) * h / size - 0.5
            x = (j + 0.5) * w / size - 0.5
            y0, x0 = math.floor(y), math.floor(x)
            fy, fx = y - y0, x - x0
            rows = np.clip([y0, y0 + 1], 0, h - 1)
            cols = np.clip([x0, x0 + 1], 0, w - 1)
            out[i, j] = (
                img[rows[0], cols[0]] * (1 - fy) * (1 - fx)
                + img[rows[0], cols[1]] * (1 - fy) * fx
                + img[rows[1], cols[0]] * fy * (1 - fx)
                + img[rows[1], cols[1]] * fy * fx
            )
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


@pytest.mark.parametrize("h,w,size", [(9, 7, 12), (16, 16, 8), (5, 11, 5)])
def test_resize_matches_independent_oracle(h, w, size):
    img = checkerboard(h, w)
    got = data.resize(img, size=size).astype(np.int64)
    want = resize_oracle(img.astype(np.float64), size).astype(np.int64)
    assert got.shape == (size, size, 3)
    assert np.max(np.abs(got - want)) <= 1  # identical up to rounding ties


def test_resize_same_size_returns_copy():
    img = checkerboard(8, 8)
    out = data.resize(img, size=8)
    np.testing.assert_array_equal(out, img)
    assert not np.shares_memory(out, img)


def test_resize_constant_image_stays_constant():
    img = np.full((10, 14, 3), 77, dtype=np.uint8)
    np.testing.assert_array_equal(data.resize(img, size=6), np.full((6, 6, 3), 77))


def test_resize_exact_downscale_averages_blocks():
    blocks = np.arange(4, dtype=np.uint8).reshape(2, 2)
    img = np.kron(blocks, np.ones((2, 2), dtype=np.uint8))[..., None].repeat(3, axis=2) * 60
    out = data.resize(img, size=2)
    np.testing.assert_array_equal(out[..., 0], blocks * 60)


# ---------------------------------------------------------------------------
# normalization and batching
# ---------------------------------------------------------------------------


def test_channel_stats_oracle():
    rng = np.random.default_rng(5)
    images = [rng.integers(0, 256, size=(6, 4, 3)).astype(np.uint8) for _ in range(3)]
    mean, std = data.channel_stats(images)
    pixels = np.concatenate([im.reshape(-1, 3) for im in images]) / 255.0
    np.testing.assert_allclose(mean, pixels.mean(axis=0), rtol=1e-12)
    np.testing.assert_allclose(std, pixels.std(axis=0), rtol=1e-9)
    with pytest.raises(DataError):
        data.channel_stats([])


def test_normalize_images_layout_and_values():
    img = np.full((4, 5, 3), 128, dtype=np.uint8)
    mean = np.array([0.25, 0.5, 0.75])
    std = np.array([0.5, 0.25, 1.0])
    batch = data.normalize_images([img, img], mean, std)
    assert batch.shape == (2, 3, 4, 5)
    assert batch.dtype == np.float32
    want = (128 / 255.0 - mean) / std
    np.testing.assert_allclose(batch[0, :, 0, 0], want, rtol=1e-5, atol=1e-6)  # float32 math
    # zero std channels fall back to an unscaled shift
    flat = data.normalize_images([img], mean, np.array([0.5, 0.0, 1.0]))
    np.testing.assert_allclose(flat[0, 1, 0, 0], 128 / 255.0 - 0.5, rtol=1e-5, atol=1e-6)


def test_records_to_arrays(tmp_path):
    from PIL import Image

    paths = []
    for i, val in enumerate((10, 200)):
        p = tmp_path / f"img{i}.png"
        Image.fromarray(np.full((4, 4, 3), val, dtype=np.uint8)).save(p)
        paths.append(str(p))
    records = [
        data.SampleRecord(paths[0], "P1", "40", "benign", "A"),
        data.SampleRecord(paths[1], "P2", "40", "malignant", "DC"),
    ]
    x, y, patients, seen = data.records_to_arrays(
        records, ("benign", "malignant"), np.zeros(3), np.ones(3)
    )
    assert x.shape == (2, 3, 4, 4)
    np.testing.assert_array_equal(y, [0, 1])
    assert patients == ["P1", "P2"]
    assert seen == paths
    np.testing.assert_allclose(x[0], 10 / 255.0, rtol=1e-6)

    with pytest.raises(DataError):
        data.records_to_arrays([], ("benign",), np.zeros(3), np.ones(3))
    with pytest.raises(DataError):
        data.records_to_arrays(records, ("benign",), np.zeros(3), np.ones(3))


def test_records_to_arrays_rejects_mixed_shapes(tmp_path):
    from PIL import Image

    p1, p2 = tmp_path / "a.png", tmp_path / "b.png"
    Image.fromarray(np.zeros((4, 4, 3), dtype=np.uint8)).save(p1)
    Image.fromarray(np.zeros((6, 6, 3), dtype=np.uint8)).save(p2)
    records = [
        data.SampleRecord(str(p1), "P1", "40", "benign", "A"),
        data.SampleRecord(str(p2), "P1", "40", "benign", "A"),
    ]
    with pytest.raises(DataError, match="mixed shapes"):
        data.records_to_arrays(records, ("benign",), np.zeros(3), np.ones(3))


def test_image_io_round_trip_and_errors(tmp_path):
    img = checkerboard(7, 9)
    path = tmp_path / "sub" / "img.png"  # parent dir created by the atomic write
    data.save_image(path, img)
    np.testing.assert_array_equal(data.load_image(path), img)
    assert list((tmp_path / "sub").glob("*.tmp")) == []

    with pytest.raises(DataError):
        data.load_image(tmp_path / "absent.png")
    with pytest.raises(DataError):
        data.save_image(tmp_path / "x.png", np.zeros((4, 4), dtype=np.uint8))
    bad = tmp_path / "corrupt.png"
    bad.write_bytes(b"not a png at all")
    with pytest.raises(DataError):
        data.load_image(bad)
