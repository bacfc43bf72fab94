import numpy as np
import pytest

from acid.evaluation import partial_correlation_test
from acid.synthgen import (
    LABELS,
    MODELS,
    TEST_SEED_RANGE,
    TRAIN_SEED_RANGE,
    ConfigError,
    ConfigSpace,
    Dataset,
    DatasetStream,
    GenConfig,
    balanced_corpus,
    check_disjoint,
    generate,
    sample_mechanism,
)


def test_mechanism_smoke_and_determinism():
    f = sample_mechanism(1, 1, 1, np.random.default_rng(0))
    assert np.isfinite(f(np.ones((1, 1)))).all()
    grid = np.linspace(-3, 3, 41)[:, None].repeat(3, axis=1)
    f1 = sample_mechanism(3, 2, 16, np.random.default_rng(7))
    f2 = sample_mechanism(3, 2, 16, np.random.default_rng(7))
    assert np.array_equal(f1(grid), f2(grid))


def test_mechanism_linear_variant_is_affine():
    f = sample_mechanism(2, 1, 4, np.random.default_rng(1), linear=True)
    a, b = np.array([[0.3, -1.0]]), np.array([[2.0, 0.5]])
    mid = f(0.5 * (a + b))
    np.testing.assert_allclose(mid, 0.5 * (f(a) + f(b)), atol=1e-12)


def test_mechanism_output_variance():
    f = sample_mechanism(5, 1, 16, np.random.default_rng(3))
    out = f(np.random.default_rng(4).standard_normal((10_000, 5)))
    assert np.isfinite(out).all()
    assert 0 < out.var() < np.inf


def test_mechanism_bad_dims():
    with pytest.raises(ConfigError):
        sample_mechanism(0, 1, 4, np.random.default_rng(0))


@pytest.mark.parametrize("model_id", MODELS)
def test_generate_labels_shapes_and_standardization(model_id):
    ds = generate(GenConfig(n=300, dx=2, dy=3, dz=4, model_id=model_id, seed=11))
    assert ds.label == LABELS[model_id]
    assert ds.shape == (300, 2, 3, 4)
    for m in (ds.x, ds.y, ds.z):
        assert np.isfinite(m).all()
        assert np.abs(m.mean(axis=0)).max() < 1e-9
        assert np.abs(m.var(axis=0) - 1).max() < 1e-6


def test_labels_are_function_of_model():
    assert {m: generate(GenConfig(n=20, model_id=m, seed=s)).label for m in MODELS for s in (1, 2)} == LABELS
    assert generate(GenConfig(model_id="M3", seed=5)).label == 0
    assert generate(GenConfig(model_id="M5", seed=5)).label == 1


def test_generate_is_deterministic():
    a = generate(GenConfig(model_id="M4", seed=99))
    b = generate(GenConfig(model_id="M4", seed=99))
    assert np.array_equal(a.x, b.x) and np.array_equal(a.y, b.y) and np.array_equal(a.z, b.z)
    c = generate(GenConfig(model_id="M4", seed=100))
    assert not np.array_equal(a.x, c.x)


def test_chain_linear_partial_correlation_small():
    ds = generate(GenConfig(n=10_000, dz=1, k=1, linear=True, model_id="M1", seed=4))
    assert abs(partial_correlation_test(ds)["r"]) < 0.05


@pytest.mark.parametrize(
    "kw",
    [dict(n=0), dict(dz=0), dict(k=0), dict(noise_scale=0.0), dict(model_id="M9")],
)
def test_gen_config_validation(kw):
    with pytest.raises(ConfigError):
        GenConfig(**kw)


def test_dataset_validation():
    with pytest.raises(ValueError):
        Dataset(np.ones((3, 1)), np.ones((4, 1)), np.ones((3, 1)))
    with pytest.raises(ValueError):
        Dataset(np.array([[np.nan]]), np.ones((1, 1)), np.ones((1, 1)))
    with pytest.raises(ValueError):
        Dataset(np.ones((2, 1)), np.ones((2, 1)), np.ones((2, 1)), label=2)


@pytest.mark.parametrize("model_id", ["M1", "M2", "M3"])
def test_h0_linear_fisher_z_rarely_rejects(model_id):
    rejections = sum(
        partial_correlation_test(generate(GenConfig(n=10_000, dz=1, k=1, linear=True, model_id=model_id, seed=s)))[
            "p_value"
        ]
        < 0.01
        for s in range(100)
    )
    assert rejections <= 5


@pytest.mark.parametrize("model_id", ["M4", "M5", "M6"])
def test_h1_linear_fisher_z_rejects(model_id):
    rejections = sum(
        partial_correlation_test(generate(GenConfig(n=10_000, dz=1, k=1, linear=True, model_id=model_id, seed=s)))[
            "p_value"
        ]
        < 0.01
        for s in range(100)
    )
    assert rejections >= 95


def test_stream_is_balanced():
    labels = [d.label for d in DatasetStream(ConfigSpace(n=(20,), dz=(2,)), seed=1).take(1000)]
    assert abs(np.mean(labels) - 0.5) <= 0.05


def test_stream_determinism():
    space = ConfigSpace(n=(20, 30), dz=(2, 3))
    a = DatasetStream(space, seed=5).take(10)
    b = DatasetStream(space, seed=5).take(10)
    for da, db in zip(a, b):
        assert da.seed == db.seed and da.model_id == db.model_id
        assert np.array_equal(da.x, db.x)


def test_stream_seeds_stay_in_range():
    s = DatasetStream(ConfigSpace(n=(10,), dz=(1,)), seed=3, seed_range=TEST_SEED_RANGE)
    s.take(200)
    lo, hi = TEST_SEED_RANGE
    assert all(lo <= x < hi for x in s.seeds_used)


def test_batches_share_shape():
    s = DatasetStream(ConfigSpace(n=(10, 20), dz=(1, 2, 3)), seed=8)
    for _ in range(5):
        batch = s.batch(6)
        assert len({d.shape for d in batch}) == 1


def test_seed_ranges_disjoint():
    check_disjoint(TRAIN_SEED_RANGE, TEST_SEED_RANGE)
    with pytest.raises(ConfigError):
        check_disjoint((0, 100), (50, 150))
    with pytest.raises(ConfigError):
        check_disjoint((5, 5), (10, 20))


def test_balanced_corpus():
    corpus = balanced_corpus(ConfigSpace(n=(15,), dz=(2,)), 12, seed=0)
    assert [d.label for d in corpus].count(1) == 6
    assert {d.model_id for d in corpus} == set(MODELS)


def test_subsample_with_replacement_warns(caplog):
    ds = generate(GenConfig(n=10, seed=1))
    rng = np.random.default_rng(0)
    assert ds.subsample(5, rng).n == 5
    with caplog.at_level("WARNING"):
        assert ds.subsample(20, rng).n == 20
    assert "with replacement" in caplog.text


def test_config_space_roundtrip():
    space = ConfigSpace(n=(50, 200), dz=(3, 5), models=("M1", "M4"))
    assert ConfigSpace.from_dict(space.to_dict()) == space
    with pytest.raises(ConfigError):
        ConfigSpace(models=("M7",))
