import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from attrnet import tensor as T
from attrnet.data import (Dataset, SyntheticSpec, augment_dataset, compute_mean, crop_offsets, default_jitter_grid,
                          glyph_bank, iterate_batches, jitter_augment, latent_correlation, load_dataset,
                          orthant_probability, parse_label_file, parse_partition_file, preprocess, preprocess_batch,
                          read_image, read_ppm, read_raw_tensor, save_dataset, shift_clamped, synth_generate,
                          write_ppm, write_raw_tensor)
from attrnet.errors import ConfigError, DataError, DimensionError, ParseError
from attrnet.metrics import LabelMatrix
from attrnet.topology import AttributeVocab

FIX = Path(__file__).parent / "fixtures"


# --- label and partition files ----------------------------------------------

def test_parse_label_fixture_exact():
    vocab, records = parse_label_file(FIX / "labels_ok.txt")
    assert vocab == AttributeVocab.celeba()
    assert [r.image_id for r in records] == ["000001.jpg", "000002.jpg", "000003.jpg"]
    np.testing.assert_array_equal(records[0].labels, [1, 0] * 20)
    np.testing.assert_array_equal(records[1].labels, [0] * 40)
    np.testing.assert_array_equal(records[2].labels, [1] * 39 + [0])
    assert all(r.labels.dtype == np.uint8 for r in records)


@pytest.mark.parametrize("name,line,fragment", [
    ("labels_bad_count.txt", 1, "declares 4"),
    ("labels_39_names.txt", 2, "40 attribute names"),
    ("labels_extra_column.txt", 3, "42 columns"),
    ("labels_duplicate_id.txt", 4, "duplicate"),
    ("labels_zero_value.txt", 3, "-1 or 1"),
])
def test_parse_label_errors_carry_line(name, line, fragment):
    with pytest.raises(ParseError) as exc:
        parse_label_file(FIX / name)
    assert exc.value.line == line
    assert fragment in str(exc.value)


def test_parse_partition():
    assert parse_partition_file(FIX / "partition_ok.txt") == {
        "000001.jpg": "train", "000002.jpg": "val", "000003.jpg": "test"}
    with pytest.raises(ParseError) as exc:
        parse_partition_file(FIX / "partition_bad.txt")
    assert exc.value.line == 2


# --- image formats -------------------------------------------------------------

def test_ppm_roundtrip(tmp_path, rng):
    img = rng.integers(0, 256, (3, 5, 7)).astype(np.float32)
    write_ppm(tmp_path / "a", img)
    np.testing.assert_array_equal(read_ppm(tmp_path / "a"), img)
    np.testing.assert_array_equal(read_image(tmp_path / "a"), img)


def test_ppm_with_comment_and_truncation(tmp_path):
    data = b"P6\n# made by hand\n2 1\n255\n" + bytes([1, 2, 3, 4, 5, 6])
    (tmp_path / "c").write_bytes(data)
    np.testing.assert_array_equal(read_ppm(tmp_path / "c")[:, 0, 1], [4, 5, 6])
    (tmp_path / "t").write_bytes(data[:-1])
    with pytest.raises(DataError):
        read_ppm(tmp_path / "t")


def test_raw_tensor_roundtrip_exact(tmp_path, rng):
    arr = rng.standard_normal((3, 4, 4)).astype(np.float32)
    write_raw_tensor(tmp_path / "r", arr)
    np.testing.assert_array_equal(read_raw_tensor(tmp_path / "r"), arr)
    raw = (tmp_path / "r").read_bytes()
    (tmp_path / "r2").write_bytes(raw[:-2])
    with pytest.raises(DataError):
        read_raw_tensor(tmp_path / "r2")


def test_unknown_image_format(tmp_path):
    (tmp_path / "x.png").write_bytes(b"\x89PNG....")
    with pytest.raises(DataError):
        read_image(tmp_path / "x.png")


@pytest.mark.parametrize("fmt", ["ppm", "raw_tensor"])
def test_dataset_save_load_roundtrip(tmp_path, fmt):
    d = synth_generate(SyntheticSpec(n_train=6, n_val=2, n_test=3, noise=0.0, seed=4))
    if fmt == "ppm":
        d.images = np.clip(np.rint(d.images * 100 + 128), 0, 255).astype(np.float32)
    save_dataset(d, tmp_path, fmt)
    back = load_dataset(tmp_path)
    assert back.ids == d.ids
    np.testing.assert_array_equal(back.images, d.images)
    np.testing.assert_array_equal(back.labels.values, d.labels.values)
    np.testing.assert_array_equal(back.splits, d.splits)


# --- preprocessing --------------------------------------------------------------

def _toy_dataset(rng, n=30, size=8):
    images = rng.standard_normal((n, 3, size, size)).astype(np.float32) * 50 + 100
    labels = LabelMatrix(rng.integers(0, 2, (n, 40)))
    splits = np.array(["train"] * (n - 5) + ["test"] * 5)
    return Dataset(AttributeVocab.celeba(), [f"i{k}" for k in range(n)], images, labels, splits)


def test_mean_subtraction_zero_mean(rng):
    d = _toy_dataset(rng)
    mean = compute_mean(d)
    x = preprocess_batch(d.images[d.indices("train")], mean, (8, 8))
    assert np.abs(x.astype(np.float64).mean(axis=0)).max() < 1e-5
    pc = compute_mean(d, per_channel=True)
    assert np.allclose(pc[0], pc[0, 0, 0])


def test_eval_crop_is_centred_and_matches_batch(rng):
    d = _toy_dataset(rng, size=10)
    mean = compute_mean(d)
    one = preprocess(d.images[0], mean, (6, 6), mode="eval")
    np.testing.assert_array_equal(one, (d.images[0] - mean)[:, 2:8, 2:8])
    batch = preprocess_batch(d.images[:4], mean, (6, 6), mode="eval")
    np.testing.assert_array_equal(batch[0], one)


def test_train_batch_crops_match_offsets(rng):
    d = _toy_dataset(rng, size=10)
    mean = compute_mean(d)
    batch = preprocess_batch(d.images[:5], mean, (7, 6), np.random.default_rng(9), "train")
    oy, ox = crop_offsets((10, 10), (7, 6), np.random.default_rng(9), "train", count=5)
    for k in range(5):
        np.testing.assert_array_equal(batch[k], (d.images[k] - mean)[:, oy[k]:oy[k] + 7, ox[k]:ox[k] + 6])


def test_crop_too_large():
    with pytest.raises(DimensionError):
        crop_offsets((8, 8), (9, 8), None, "eval")


def test_random_crop_offsets_uniform():
    oy, ox = crop_offsets((20, 20), (16, 16), np.random.default_rng(0), "train", count=25_000)
    counts = np.bincount(oy * 5 + ox, minlength=25)
    assert stats.chisquare(counts).pvalue > 0.01


# --- jitter ---------------------------------------------------------------------

def test_default_jitter_nine_variants_labels_preserved(rng):
    img = rng.standard_normal((3, 40, 40))
    labels = rng.integers(0, 2, 40)
    variants = jitter_augment("x.jpg", img, labels)
    assert len(variants) == 9
    assert len({v[0] for v in variants}) == 9
    for vid, vimg, vlab in variants:
        np.testing.assert_array_equal(vlab, labels)
        assert vimg.shape == img.shape
    assert "x.jpg@+0,+0" in [v[0] for v in variants]
    np.testing.assert_array_equal(dict((v[0], v[1]) for v in variants)["x.jpg@+0,+0"], img)


def test_shift_clamped():
    img = np.arange(16.0).reshape(1, 4, 4)
    s = shift_clamped(img, 1, -1)
    np.testing.assert_array_equal(s[0, 1:, :3], img[0, :3, 1:])
    np.testing.assert_array_equal(s[0, 0], s[0, 1])  # top row clamped
    assert default_jitter_grid(3)[0] == (-3, -3)


def test_augment_dataset_only_train(rng):
    d = _toy_dataset(rng, n=10)
    a = augment_dataset(d, step=2)
    assert len(a) == 5 * 9 + 5
    assert (a.splits == "test").sum() == 5


# --- batching -------------------------------------------------------------------

@settings(max_examples=30, deadline=None)
@given(st.integers(1, 60), st.integers(1, 17), st.integers(0, 5), st.integers(0, 99))
def test_batches_cover_indices_once(n, bs, epoch, seed):
    idx = np.arange(100, 100 + n)
    batches = list(iterate_batches(idx, bs, epoch, seed))
    assert all(len(b) <= bs for b in batches)
    np.testing.assert_array_equal(np.sort(np.concatenate(batches)), idx)
    again = list(iterate_batches(idx, bs, epoch, seed))
    assert all(np.array_equal(a, b) for a, b in zip(batches, again))


# --- synthetic data ---------------------------------------------------------------

def test_orthant_probability_matches_scipy_mvn():
    for a, b, r in [(0.0, 0.0, 0.5), (0.3, -0.7, -0.4), (1.2, 0.4, 0.95)]:
        ref = stats.multivariate_normal(mean=[0, 0], cov=[[1, r], [r, 1]]).cdf([-a, -b])
        assert orthant_probability(a, b, r) == pytest.approx(ref, abs=1e-6)


@pytest.mark.parametrize("rho", [0.9, -0.9, 0.3, 0.0])
def test_latent_correlation_closed_form_at_half(rho):
    # for p = 0.5 the binary correlation is (2 / pi) * arcsin(r)
    assert latent_correlation(0.5, 0.5, rho) == pytest.approx(math.sin(math.pi * rho / 2), abs=1e-8)


def test_latent_correlation_infeasible():
    with pytest.raises(ConfigError):
        latent_correlation(0.1, 0.9, 0.9)


@pytest.mark.parametrize("prev", [0.5, 0.3])
def test_copula_hits_target_correlations(prev):
    spec = SyntheticSpec(n_train=40_000, n_test=0, image_size=4, prevalence=prev, seed=1,
                         correlations=[("Male", "Smiling", 0.6), ("Bald", "Young", -0.4)])
    y = synth_generate(spec).labels.values.astype(float)
    v = spec.vocab.index
    assert np.corrcoef(y[:, v["Male"]], y[:, v["Smiling"]])[0, 1] == pytest.approx(0.6, abs=0.02)
    assert np.corrcoef(y[:, v["Bald"]], y[:, v["Young"]])[0, 1] == pytest.approx(-0.4, abs=0.02)
    assert abs(np.corrcoef(y[:, v["Male"]], y[:, v["Blurry"]])[0, 1]) < 0.03
    assert np.abs(y.mean(axis=0) - prev).max() < 0.02


def test_label_noise_rate():
    spec = SyntheticSpec(n_train=5000, n_test=0, noise=0.0, label_noise=0.1, seed=2)
    d = synth_generate(spec)
    bank = glyph_bank(40, 16).reshape(40, -1)
    shown = (d.images.reshape(len(d), -1).astype(np.float64) @ bank.T / (bank * bank).sum(1)) > 0.5
    assert np.mean(shown != d.labels.values) == pytest.approx(0.1, abs=0.01)


def test_glyphs_orthogonal():
    b = glyph_bank(40, 16).reshape(40, -1)
    g = b @ b.T
    np.testing.assert_array_equal(g, np.diag(np.diag(g)))
    assert (np.diag(g) > 0).all()


def test_noise_free_labels_linearly_recoverable():
    d = synth_generate(SyntheticSpec(n_train=400, n_test=200, noise=0.0, seed=3))
    tr, te = d.indices("train"), d.indices("test")
    X = d.images.reshape(len(d), -1).astype(np.float64)
    X1 = np.hstack([X, np.ones((len(d), 1))])
    W, *_ = np.linalg.lstsq(X1[tr], d.labels.values[tr].astype(float), rcond=None)
    acc = np.mean((X1[te] @ W > 0.5) == d.labels.values[te])
    assert acc >= 0.95


def test_synthetic_deterministic_and_split_sizes():
    spec = SyntheticSpec(n_train=7, n_val=3, n_test=4, seed=11)
    a, b = synth_generate(spec), synth_generate(spec)
    np.testing.assert_array_equal(a.images, b.images)
    assert [(a.splits == s).sum() for s in ("train", "val", "test")] == [7, 3, 4]
    assert a.images.dtype == T.get_dtype()


@pytest.mark.parametrize("kwargs", [dict(prevalence=0.0), dict(label_noise=1.0), dict(image_size=2),
                                    dict(correlations=[("Male", "Male", 0.5)]),
                                    dict(correlations=[("Male", "Young", 1.5)])])
def test_synthetic_spec_validation(kwargs):
    with pytest.raises(ConfigError):
        synth_generate(SyntheticSpec(**kwargs))
