import numpy as np
import pytest
import torch

from latentgen.datapipe import (
    REFERENCE_BATCH_PRESETS,
    DatasetManifest,
    ManifestRow,
    ToyShapesConfig,
    build_reference_batch,
    foreground_area,
    gen_toy_dataset,
    gen_toy_shapes,
    load_image,
    load_manifest,
    preprocess,
    relabel,
    save_manifest,
    save_png,
    write_toy_dataset,
)
from latentgen.errors import ContractError, ManifestError


def _write(tmp_path, text, name="m.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


# ---------------------------------------------------------------------------
# manifests


def test_load_valid_manifest(tmp_path):
    p = _write(tmp_path, "path,label\na.png,0\nb.png,1\n")
    m = load_manifest(p)
    assert len(m) == 2
    assert m.rows[0] == ManifestRow(path="a.png", label=0)


def test_manifest_preserves_unknown(tmp_path):
    p = _write(tmp_path, "path,label\na.png,unknown\n")
    m = load_manifest(p)
    assert m.rows[0].label is None


def test_manifest_duplicate_path_names_line(tmp_path):
    p = _write(tmp_path, "path,label\na.png,0\nb.png,1\na.png,1\n")
    with pytest.raises(ManifestError, match=":4:"):
        load_manifest(p)


def test_manifest_bad_label(tmp_path):
    p = _write(tmp_path, "path,label\na.png,2\n")
    with pytest.raises(ManifestError, match=":2:"):
        load_manifest(p)


def test_manifest_bad_header(tmp_path):
    p = _write(tmp_path, "file,cls\na.png,0\n")
    with pytest.raises(ManifestError, match=":1:"):
        load_manifest(p)


def test_manifest_missing_file(tmp_path):
    with pytest.raises(ManifestError):
        load_manifest(tmp_path / "nope.csv")


def test_manifest_save_roundtrip(tmp_path):
    rows = (ManifestRow("a.png", 0), ManifestRow("b.png", None))
    m = DatasetManifest(rows=rows, name="x")
    save_manifest(m, tmp_path / "out.csv")
    again = load_manifest(tmp_path / "out.csv")
    assert again.rows == rows


# ---------------------------------------------------------------------------
# relabel


def test_relabel_identity_on_known(tmp_path):
    m = DatasetManifest(rows=(ManifestRow("a.png", 0), ManifestRow("b.png", 1)))
    out = relabel(m, "identity")
    assert out.rows == m.rows


def test_relabel_identity_rejects_unknown():
    m = DatasetManifest(rows=(ManifestRow("a.png", None),))
    with pytest.raises(ManifestError):
        relabel(m, "identity")


def test_relabel_all_unknown_to_0_counts():
    m = DatasetManifest(rows=(
        ManifestRow("a.png", 1), ManifestRow("b.png", 0),
        ManifestRow("c.png", None), ManifestRow("d.png", None),
    ))
    out = relabel(m, "unknown_to_0")
    counts = out.class_counts()
    assert len(out) == 4
    assert counts[0] == 3 and counts[1] == 1 and counts[None] == 0


def test_relabel_mapping_dict_must_cover():
    m = DatasetManifest(rows=(ManifestRow("a.png", None), ManifestRow("b.png", None)))
    with pytest.raises(ManifestError, match="b.png"):
        relabel(m, {"a.png": 1})
    out = relabel(m, {"a.png": 1, "b.png": 0})
    assert out.class_counts() == {0: 1, 1: 1, None: 0}


def test_relabel_never_touches_known_labels():
    m = DatasetManifest(rows=(ManifestRow("a.png", 1), ManifestRow("b.png", None)))
    out = relabel(m, "unknown_to_0")
    assert out.rows[0].label == 1


# ---------------------------------------------------------------------------
# preprocess


def test_preprocess_endpoint_mapping():
    img = np.array([[0, 255], [128, 64]], dtype=np.uint8)
    out = preprocess(img, 2)
    assert out.shape == (1, 2, 2)
    assert out[0, 0, 0].item() == pytest.approx(-1.0)
    assert out[0, 0, 1].item() == pytest.approx(1.0)
    assert out[0, 1, 0].item() == pytest.approx(2 * 128 / 255 - 1, abs=1e-6)


def test_preprocess_resize_constant():
    img = np.full((7, 9), 200, dtype=np.uint8)
    out = preprocess(img, 4)
    assert out.shape == (1, 4, 4)
    assert torch.allclose(out, torch.full((1, 4, 4), 2 * 200 / 255 - 1))


def test_preprocess_skips_resample_at_target_size():
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, size=(8, 8), dtype=np.uint8)
    direct = preprocess(img, 8)
    assert np.array_equal(direct.numpy(), (img.astype(np.float32) * 2 / 255 - 1)[None])


def test_preprocess_rgb_channels_first():
    img = np.zeros((6, 6, 3), dtype=np.uint8)
    out = preprocess(img, 6)
    assert out.shape == (3, 6, 6)


def test_preprocess_rejects_non_uint8():
    with pytest.raises(ContractError):
        preprocess(np.zeros((4, 4), dtype=np.float32), 4)


def test_png_roundtrip(tmp_path):
    img = torch.rand(1, 16, 16) * 2 - 1
    path = tmp_path / "img.png"
    save_png(img, path)
    back = preprocess(load_image(path), 16)
    # one 8-bit quantization step of the [-1, 1] range
    assert (back - img).abs().max().item() <= 1.0 / 255.0 + 1e-6


def test_load_image_undecodable(tmp_path):
    bad = tmp_path / "bad.png"
    bad.write_bytes(b"this is not a png")
    with pytest.raises(OSError):
        load_image(bad)


# ---------------------------------------------------------------------------
# reference batches


def _manifest(n0, n1):
    rows = tuple(ManifestRow(f"a{i}.png", 0) for i in range(n0)) + tuple(
        ManifestRow(f"b{i}.png", 1) for i in range(n1)
    )
    return DatasetManifest(rows=rows)


def test_reference_batch_exact_balance():
    ref = build_reference_batch(_manifest(2, 2), 4, seed=0)
    assert ref.per_class == {0: 2, 1: 2}
    labels = [r.label for r in ref.items]
    assert labels.count(0) == 2 and labels.count(1) == 2


def test_reference_batch_shortfall_reported():
    with pytest.raises(ContractError, match="short by 1"):
        build_reference_batch(_manifest(2, 10), 6, seed=0)


def test_reference_batch_deterministic_descriptor():
    m = _manifest(50, 50)
    a = build_reference_batch(m, 20, seed=3)
    b = build_reference_batch(m, 20, seed=3)
    c = build_reference_batch(m, 20, seed=4)
    assert a.items == b.items and a.descriptor == b.descriptor
    assert c.descriptor != a.descriptor and c.items != a.items


def test_reference_batch_rejects_odd_n():
    with pytest.raises(ContractError):
        build_reference_batch(_manifest(4, 4), 5, seed=0)


def test_reference_presets():
    assert REFERENCE_BATCH_PRESETS == {"airogs": 6540, "crcdx": 19958, "chexpert": 15738}


# ---------------------------------------------------------------------------
# toy shapes


def test_toy_deterministic():
    cfg = ToyShapesConfig(seed=5)
    a, _ = gen_toy_shapes(cfg, 8, 1)
    b, _ = gen_toy_shapes(cfg, 8, 1)
    assert torch.equal(a, b)
    prefix, _ = gen_toy_shapes(cfg, 4, 1)
    assert torch.equal(a[:4], prefix)


def test_toy_range_and_shape():
    images, manifest = gen_toy_shapes(ToyShapesConfig(size=32, seed=6), 10, 0)
    assert tuple(images.shape) == (10, 1, 32, 32)
    assert images.min() >= -1.0 and images.max() <= 1.0
    assert len(manifest) == 10


def test_toy_class_area_separation():
    cfg = ToyShapesConfig(seed=7)
    imgs0, _ = gen_toy_shapes(cfg, 1000, 0)
    imgs1, _ = gen_toy_shapes(cfg, 1000, 1)
    area0 = foreground_area(imgs0)
    area1 = foreground_area(imgs1)
    assert area1.mean() > area0.mean()
    threshold = (area0.mean() + area1.mean()) / 2
    accuracy = ((area0 < threshold).float().mean() + (area1 >= threshold).float().mean()) / 2
    assert accuracy >= 0.99


def test_toy_dataset_interleaves_classes():
    images, labels, manifest = gen_toy_dataset(ToyShapesConfig(seed=8), 5)
    assert labels.tolist() == [0, 1] * 5
    assert len(manifest) == 10
    assert images.shape[0] == 10


def test_write_toy_dataset_loads_back(tmp_path):
    cfg = ToyShapesConfig(seed=9)
    manifest_path = write_toy_dataset(cfg, 3, tmp_path)
    m = load_manifest(manifest_path)
    assert len(m) == 6
    first = preprocess(load_image(tmp_path / m.rows[0].path), 32)
    images, _, _ = gen_toy_dataset(cfg, 3)
    assert (first - images[0]).abs().max().item() <= 1.0 / 255.0 + 1e-6
