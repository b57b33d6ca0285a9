"""Unit tests for the synthetic benchmark, splits, and the file formats."""

import logging

import numpy as np
import pytest

from metacloud.data import (
    Dataset,
    DatasetFormatError,
    ShapeFamily,
    TORUS_MINOR,
    build_target_domain,
    default_families,
    generate_synthetic_dataset,
    load_cloud,
    load_dataset,
    sample_surface,
    save_cloud,
    save_dataset,
    split_train_val,
)
from metacloud.geometry import PointCloud, TransformSpec


# ------------------------------------------------------------------- families


def test_shape_family_validation():
    ShapeFamily("sphere")
    with pytest.raises(ValueError):
        ShapeFamily("pyramid")
    with pytest.raises(ValueError):
        ShapeFamily("cube", points=32)
    with pytest.raises(ValueError):
        ShapeFamily("cube", scale_jitter=(0.0, 1.0))
    with pytest.raises(ValueError):
        ShapeFamily("cube", aspect_jitter=(1.5, 1.0))


def test_default_families_alphabetical():
    fams = default_families(points=128)
    assert [f.name for f in fams] == ["cone", "cube", "cylinder", "sphere", "torus"]
    assert all(f.points == 128 for f in fams)


# ------------------------------------------------------------- surface samples


def test_sphere_points_on_unit_sphere():
    pts = sample_surface("sphere", 4000, np.random.default_rng(0))
    np.testing.assert_allclose(np.linalg.norm(pts, axis=1), 1.0, atol=1e-12)
    # roughly area uniform: each octant gets ~1/8
    octant = (pts > 0).astype(int) @ np.array([1, 2, 4])
    counts = np.bincount(octant, minlength=8) / 4000
    assert (np.abs(counts - 0.125) < 0.03).all()


def test_cube_points_on_faces():
    pts = sample_surface("cube", 4000, np.random.default_rng(1))
    on_face = np.isclose(np.abs(pts), 1.0).sum(axis=1)
    assert (on_face >= 1).all()
    assert (np.abs(pts) <= 1.0 + 1e-12).all()
    face = np.abs(np.abs(pts) - 1.0).argmin(axis=1)
    counts = np.bincount(face, minlength=3) / 4000
    assert (np.abs(counts - 1.0 / 3.0) < 0.05).all()


def test_cylinder_points_on_shell_or_caps():
    pts = sample_surface("cylinder", 4000, np.random.default_rng(2))
    r = np.hypot(pts[:, 0], pts[:, 1])
    lateral = np.isclose(r, 1.0)
    caps = np.isclose(np.abs(pts[:, 2]), 1.0)
    assert (lateral | caps).all()
    assert (np.abs(pts[lateral, 2]) <= 1.0 + 1e-12).all()
    assert (r[~lateral] <= 1.0 + 1e-12).all()
    # lateral share 2/3 by area
    assert abs(lateral.mean() - 2.0 / 3.0) < 0.05


def test_cone_points_on_slant_or_base():
    pts = sample_surface("cone", 4000, np.random.default_rng(3))
    r = np.hypot(pts[:, 0], pts[:, 1])
    base = np.isclose(pts[:, 2], -1.0)
    slant = np.isclose(r, (1.0 - pts[:, 2]) / 2.0)
    assert (base | slant).all()
    assert (r <= 1.0 + 1e-12).all()
    want = np.sqrt(5.0) / (np.sqrt(5.0) + 1.0)
    assert abs((~base).mean() - want) < 0.06


def test_torus_points_on_tube():
    pts = sample_surface("torus", 4000, np.random.default_rng(4))
    ring = np.hypot(pts[:, 0], pts[:, 1]) - 1.0
    tube = np.hypot(ring, pts[:, 2])
    np.testing.assert_allclose(tube, TORUS_MINOR, atol=1e-12)
    # rejection sampling favors the outer rim
    assert (ring > 0).mean() > 0.5


def test_sample_surface_unknown_kind():
    with pytest.raises(ValueError):
        sample_surface("plane", 10, np.random.default_rng(0))


# ------------------------------------------------------------------ generation


def test_generate_dataset_layout_and_determinism():
    fams = default_families(points=64)
    a = generate_synthetic_dataset(fams, per_class=3, seed=11)
    b = generate_synthetic_dataset(fams, per_class=3, seed=11)
    assert a.class_names == [f.name for f in fams]
    assert len(a.items) == 15
    labels = [item.label for item in a.items]
    assert labels == sorted(labels)  # class major
    assert np.bincount(labels).tolist() == [3] * 5
    for x, y in zip(a.items, b.items):
        np.testing.assert_array_equal(x.points, y.points)
    c = generate_synthetic_dataset(fams, per_class=3, seed=12)
    assert any((x.points != y.points).any() for x, y in zip(a.items, c.items))


def test_generate_dataset_normalized_and_sized():
    ds = generate_synthetic_dataset(default_families(points=64), per_class=2, seed=0)
    for item in ds.items:
        norms = np.linalg.norm(item.points, axis=1)
        assert item.points.shape == (64, 3)
        assert abs(norms.max() - 1.0) < 1e-9
        assert np.abs(item.points.mean(axis=0)).max() < 1e-9


def test_generate_dataset_points_override_and_validation():
    fams = default_families(points=128)
    ds = generate_synthetic_dataset(fams, per_class=1, seed=0, points=64)
    assert all(item.points.shape == (64, 3) for item in ds.items)
    with pytest.raises(ValueError):
        generate_synthetic_dataset([], per_class=1, seed=0)
    with pytest.raises(ValueError):
        generate_synthetic_dataset(fams, per_class=0, seed=0)
    with pytest.raises(ValueError):
        generate_synthetic_dataset(fams + [ShapeFamily("cone")], per_class=1, seed=0)
    with pytest.raises(ValueError):
        generate_synthetic_dataset(fams, per_class=1, seed=0, points=10)


# ---------------------------------------------------------------------- splits


def test_split_600_into_500_and_100():
    ds = generate_synthetic_dataset(default_families(points=64), per_class=120, seed=1)
    train, val = split_train_val(ds, seed=2)
    assert len(train.items) == 500
    assert len(val.items) == 100
    assert train.split == "train" and val.split == "val"
    val_labels = [item.label for item in val.items]
    assert np.bincount(val_labels).tolist() == [20] * 5


def test_split_is_a_disjoint_cover():
    ds = generate_synthetic_dataset(default_families(points=64), per_class=9, seed=3)
    train, val = split_train_val(ds, seed=4)
    assert len(train.items) + len(val.items) == len(ds.items)

    def keyed(items):
        return {(it.label, it.points.tobytes()) for it in items}

    k_train, k_val, k_all = keyed(train.items), keyed(val.items), keyed(ds.items)
    assert not k_train & k_val
    assert k_train | k_val == k_all


def test_split_deterministic_in_seed():
    ds = generate_synthetic_dataset(default_families(points=64), per_class=8, seed=5)
    t1, v1 = split_train_val(ds, seed=6)
    t2, v2 = split_train_val(ds, seed=6)
    for a, b in zip(v1.items, v2.items):
        np.testing.assert_array_equal(a.points, b.points)
    _, v3 = split_train_val(ds, seed=7)
    assert {id(i) for i in v1.items} != {id(i) for i in v3.items}


def test_split_largest_remainder_topup():
    """Four classes of 7: floors give 4 val items, target 5, lowest label wins."""
    rng = np.random.default_rng(8)
    items = []
    for label in range(4):
        for _ in range(7):
            items.append(PointCloud(rng.standard_normal((8, 3)), label))
    ds = Dataset(items=items, class_names=["a", "b", "c", "d"])
    train, val = split_train_val(ds, seed=9)
    val_counts = np.bincount([i.label for i in val.items], minlength=4)
    assert val_counts.tolist() == [2, 1, 1, 1]
    assert len(val.items) == 5


def test_split_warns_on_tiny_class(caplog):
    rng = np.random.default_rng(10)
    items = [PointCloud(rng.standard_normal((8, 3)), 0) for _ in range(12)]
    items += [PointCloud(rng.standard_normal((8, 3)), 1) for _ in range(3)]
    ds = Dataset(items=items, class_names=["big", "tiny"])
    with caplog.at_level(logging.WARNING):
        train, val = split_train_val(ds, seed=11)
    assert "tiny" in caplog.text
    assert sum(1 for i in val.items if i.label == 1) == 1
    with pytest.raises(ValueError):
        split_train_val(Dataset(items=items[:5], class_names=["big"]), seed=0)


# --------------------------------------------------------------- target domain


def test_build_target_domain_applies_both_stages():
    ds = generate_synthetic_dataset(default_families(points=256), per_class=2, seed=12)
    target = build_target_domain(ds, cell_size=0.25, drop_percent=30.0, seed=13)
    assert target.split == "target"
    assert [i.label for i in target.items] == [i.label for i in ds.items]
    for src, dst in zip(ds.items, target.items):
        assert len(dst.points) < len(src.points)


def test_build_target_domain_optional_stages():
    ds = generate_synthetic_dataset(default_families(points=64), per_class=1, seed=14)
    drop_only = build_target_domain(ds, cell_size=None, drop_percent=25.0, seed=15)
    for item in drop_only.items:
        assert len(item.points) == 48  # 64 minus 25%
    untouched = build_target_domain(ds, cell_size=None, drop_percent=None, seed=16)
    for src, dst in zip(ds.items, untouched.items):
        np.testing.assert_array_equal(src.points, dst.points)


def test_build_target_domain_deterministic():
    ds = generate_synthetic_dataset(default_families(points=128), per_class=2, seed=17)
    a = build_target_domain(ds, cell_size=0.3, drop_percent=40.0, seed=18)
    b = build_target_domain(ds, cell_size=0.3, drop_percent=40.0, seed=18)
    for x, y in zip(a.items, b.items):
        np.testing.assert_array_equal(x.points, y.points)


def test_build_target_domain_rejects_training_collision():
    ds = generate_synthetic_dataset(default_families(points=64), per_class=1, seed=19)
    forbid = [TransformSpec("occlusion", 0.022), TransformSpec("dropping", 36.0)]
    with pytest.raises(ValueError):
        build_target_domain(ds, cell_size=0.022, drop_percent=50.0, seed=0, forbid=forbid)
    with pytest.raises(ValueError):
        build_target_domain(ds, cell_size=0.3, drop_percent=36.0, seed=0, forbid=forbid)
    build_target_domain(ds, cell_size=0.3, drop_percent=50.0, seed=0, forbid=forbid)


# ----------------------------------------------------------------- cloud files


def test_cloud_file_roundtrip_exact(tmp_path):
    rng = np.random.default_rng(20)
    cloud = PointCloud(rng.standard_normal((17, 3)), 2)
    path = tmp_path / "c.txt"
    save_cloud(path, cloud)
    back = load_cloud(path)
    assert back.label == 2
    np.testing.assert_array_equal(back.points, cloud.points)
    first = path.read_text().splitlines()[0]
    assert first == "17 2"
    save_cloud(tmp_path / "c2.txt", cloud)
    assert path.read_bytes() == (tmp_path / "c2.txt").read_bytes()


def test_load_cloud_reports_file_and_line(tmp_path):
    bad_header = tmp_path / "h.txt"
    bad_header.write_text("5\n0 0 0\n")
    with pytest.raises(DatasetFormatError, match=r"h\.txt:1"):
        load_cloud(bad_header)

    bad_count = tmp_path / "n.txt"
    bad_count.write_text("3 0\n0 0 0\n1 1 1\n")
    with pytest.raises(DatasetFormatError, match="header says 3"):
        load_cloud(bad_count)

    bad_float = tmp_path / "f.txt"
    bad_float.write_text("1 0\n0 zero 0\n")
    with pytest.raises(DatasetFormatError, match=r"f\.txt:2"):
        load_cloud(bad_float)

    bad_width = tmp_path / "w.txt"
    bad_width.write_text("1 0\n0 0\n")
    with pytest.raises(DatasetFormatError, match="3 coordinates"):
        load_cloud(bad_width)

    empty = tmp_path / "e.txt"
    empty.write_text("")
    with pytest.raises(DatasetFormatError, match="empty"):
        load_cloud(empty)


# -------------------------------------------------------------- dataset on disk


def test_dataset_roundtrip_via_manifest(tmp_path):
    ds = generate_synthetic_dataset(default_families(points=64), per_class=2, seed=21)
    manifest = save_dataset(ds, tmp_path / "bench")
    assert manifest.name == "manifest.txt"
    rows = manifest.read_text().splitlines()
    assert len(rows) == 10
    assert rows[0] == "cone/cone_0000.txt cone"
    back = load_dataset(manifest)
    assert back.class_names == ds.class_names
    assert [i.label for i in back.items] == [i.label for i in ds.items]
    for a, b in zip(back.items, ds.items):
        np.testing.assert_array_equal(a.points, b.points)
    # loading by directory resolves the manifest too
    back2 = load_dataset(tmp_path / "bench")
    assert [i.label for i in back2.items] == [i.label for i in ds.items]


def test_dataset_loads_from_bare_tree(tmp_path):
    ds = generate_synthetic_dataset(default_families(points=64), per_class=2, seed=22)
    save_dataset(ds, tmp_path / "bench")
    (tmp_path / "bench" / "manifest.txt").unlink()
    back = load_dataset(tmp_path / "bench")
    assert back.class_names == ds.class_names
    assert len(back.items) == len(ds.items)


def test_dataset_labels_follow_alphabetical_class_names(tmp_path):
    """Saved label order is irrelevant: the loader reindexes alphabetically."""
    rng = np.random.default_rng(23)
    items = [
        PointCloud(rng.standard_normal((8, 3)), 0),  # torus
        PointCloud(rng.standard_normal((8, 3)), 1),  # cone
    ]
    ds = Dataset(items=items, class_names=["torus", "cone"])
    save_dataset(ds, tmp_path / "flip")
    back = load_dataset(tmp_path / "flip")
    assert back.class_names == ["cone", "torus"]
    by_label = {i.label: i.points for i in back.items}
    np.testing.assert_array_equal(by_label[1], items[0].points)  # torus now label 1
    np.testing.assert_array_equal(by_label[0], items[1].points)


def test_load_dataset_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path / "missing")
    empty_manifest = tmp_path / "m.txt"
    empty_manifest.write_text("\n")
    with pytest.raises(DatasetFormatError):
        load_dataset(empty_manifest)
    bad = tmp_path / "bad.txt"
    bad.write_text("only_one_field\n")
    with pytest.raises(DatasetFormatError, match="path name"):
        load_dataset(bad)
    bare = tmp_path / "no_classes"
    bare.mkdir()
    with pytest.raises(DatasetFormatError):
        load_dataset(bare)
