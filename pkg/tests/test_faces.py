import math
from collections import Counter

import numpy as np
import pytest
from PIL import Image

from circuitscope import faces
from circuitscope.faces import (
    DatasetConfig,
    FaceAttributes,
    build_dataset,
    default_correlation_table,
    load_external_images,
    read_manifest,
    render_face,
    sample_attributes,
    save_png,
)
from circuitscope.metrics import feature_complexity


def uniform_table():
    t = default_correlation_table()
    for attr, rows in t.items():
        for key, row in rows.items():
            rows[key] = [1.0 / len(row)] * len(row)
    return t


def draws(table, n, seed=0):
    cfg = DatasetConfig(count=1, correlation_table=table)
    rng = np.random.default_rng(seed)
    return [sample_attributes(cfg, rng) for _ in range(n)]


def test_degenerate_table_is_deterministic():
    t = default_correlation_table()
    t["gender"]["*"] = [0.0, 1.0]
    t["facial_hair"] = {"A": [1.0, 0.0], "B": [0.0, 1.0]}
    t["age"]["*"] = [0.0, 0.0, 1.0]
    t["accessory"] = {k: [0.0, 1.0, 0.0] for k in faces.AGES}
    t["expression"]["*"] = [0.0, 1.0, 0.0]
    t["hair_color"]["*"] = [0.0, 0.0, 1.0]
    want = FaceAttributes("smile", True, "B", "old", "glasses", "red")
    assert set(draws(t, 200)) == {want}


def test_uniform_table_marginals_within_three_sigma():
    n = 10_000
    sample = draws(uniform_table(), n, seed=7)
    fields = {
        "expression": faces.EXPRESSIONS,
        "facial_hair": faces.FACIAL_HAIR,
        "gender_presentation": faces.GENDERS,
        "age_band": faces.AGES,
        "accessory": faces.ACCESSORIES,
        "hair_color": faces.HAIR_COLORS,
    }
    for name, values in fields.items():
        counts = Counter(getattr(a, name) for a in sample)
        p = 1.0 / len(values)
        sigma = math.sqrt(n * p * (1 - p))
        for v in values:
            assert abs(counts[v] - n * p) <= 3 * sigma, (name, v, counts[v])


def test_conditional_frequency_oracle():
    t = default_correlation_table()
    t["facial_hair"]["A"] = [0.1, 0.9]
    t["gender"]["*"] = [1.0, 0.0]
    sample = draws(t, 10_000, seed=3)
    frac = np.mean([a.facial_hair for a in sample])
    assert 0.87 <= frac <= 0.93


def test_default_table_correlation_is_real():
    sample = draws(default_correlation_table(), 6_000, seed=11)
    a = [s.facial_hair for s in sample if s.gender_presentation == "A"]
    b = [s.facial_hair for s in sample if s.gender_presentation == "B"]
    assert np.mean(a) - np.mean(b) > 0.3


@pytest.mark.parametrize("row", [[0.5, 0.6], [1.0, -0.0000001 + 0.1], [0.3]])
def test_invalid_probability_row_rejected(row):
    t = default_correlation_table()
    t["facial_hair"]["A"] = row
    with pytest.raises(ValueError):
        DatasetConfig(correlation_table=t)


def test_unknown_attribute_value_rejected():
    with pytest.raises(ValueError):
        FaceAttributes(expression="wink")


@pytest.mark.parametrize("style", ["crisp", "textured"])
def test_render_deterministic_and_in_range(style):
    cfg = DatasetConfig(style=style)
    attrs = FaceAttributes("smile", True, "A", "old", "hat", "red")
    a = render_face(attrs, cfg, seed=42)
    b = render_face(attrs, cfg, seed=42)
    assert a.shape == (3, 32, 32)
    np.testing.assert_array_equal(a, b)
    assert a.min() >= -1 and a.max() <= 1


@pytest.mark.parametrize("seed", range(5))
def test_glasses_change_only_eye_band(seed):
    cfg = DatasetConfig()
    base = FaceAttributes(accessory="none")
    with_glasses = FaceAttributes(accessory="glasses")
    diff = np.any(render_face(base, cfg, seed) != render_face(with_glasses, cfg, seed), axis=0)
    rows = np.nonzero(diff.any(axis=1))[0]
    lo, hi = faces.EYE_BAND
    assert rows.size > 0
    assert rows.min() >= math.floor(lo * cfg.image_size) and rows.max() <= math.ceil(hi * cfg.image_size)


def test_textured_style_has_higher_pixel_complexity():
    crisp, textured = DatasetConfig(style="crisp"), DatasetConfig(style="textured")
    rng = np.random.default_rng(5)
    c_crisp, c_text = [], []
    for i in range(100):
        attrs = sample_attributes(crisp, rng)
        c_crisp.append(feature_complexity(render_face(attrs, crisp, seed=i)))
        c_text.append(feature_complexity(render_face(attrs, textured, seed=i)))
    assert np.mean(c_text) > np.mean(c_crisp)


def test_empty_dataset():
    ds = build_dataset(DatasetConfig(count=0))
    assert len(ds) == 0 and ds.manifest == []


def test_manifest_deterministic_and_matches_counts(tmp_path):
    cfg = DatasetConfig(count=64, seed=9)
    a = build_dataset(cfg, tmp_path / "a.csv")
    b = build_dataset(cfg, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    np.testing.assert_array_equal(a.images, b.images)
    header = (tmp_path / "a.csv").read_text().splitlines()[0]
    assert header == "index,expression,facial_hair,gender,age,accessory,hair_color,seed"
    rows = read_manifest(tmp_path / "a.csv")
    assert len(rows) == len(a.images) == 64


def test_image_stream_independent_of_count():
    """Image i depends only on (seed, i), so a prefix build matches the full build."""
    full = build_dataset(DatasetConfig(count=10, seed=4))
    prefix = build_dataset(DatasetConfig(count=4, seed=4))
    np.testing.assert_array_equal(full.images[:4], prefix.images)


def test_manifest_frequencies_match_table():
    ds = build_dataset(DatasetConfig(count=512, seed=1, image_size=8))
    n = len(ds.manifest)
    table = default_correlation_table()
    for value, p in zip(faces.HAIR_COLORS, table["hair_color"]["*"]):
        k = sum(r["hair_color"] == value for r in ds.manifest)
        assert abs(k - n * p) <= 4 * math.sqrt(n * p * (1 - p))


def test_png_round_trip_quantization(tmp_path):
    img = render_face(FaceAttributes(accessory="glasses"), DatasetConfig(style="textured"), seed=3)
    save_png(img, tmp_path / "face.png")
    back = load_external_images(tmp_path, 32, 3).images[0]
    assert np.max(np.abs(back - img)) <= 1 / 127 + 1e-6


def test_uniform_gray_png(tmp_path):
    Image.fromarray(np.full((20, 20), 100, np.uint8), mode="L").save(tmp_path / "gray.png")
    ds = load_external_images(tmp_path, 8, 1)
    assert ds.images.shape == (1, 1, 8, 8)
    assert np.all(ds.images == ds.images.flat[0])


def test_non_square_input_is_center_cropped(tmp_path):
    arr = np.zeros((8, 16), np.uint8)
    arr[:, 4:12] = 255  # the central square is white, the flanks black
    Image.fromarray(arr, mode="L").save(tmp_path / "wide.png")
    img = load_external_images(tmp_path, 8, 1).images[0, 0]
    np.testing.assert_array_equal(img, np.ones((8, 8)))


def test_unreadable_file_skipped_and_empty_dir_errors(tmp_path, caplog):
    (tmp_path / "junk.png").write_bytes(b"not an image")
    with pytest.raises(FileNotFoundError):
        load_external_images(tmp_path)
    Image.fromarray(np.zeros((4, 4, 3), np.uint8)).save(tmp_path / "ok.png")
    ds = load_external_images(tmp_path, 8, 3)
    assert len(ds) == 1
    assert any("junk.png" in r.message for r in caplog.records)
