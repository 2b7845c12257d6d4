import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from leco.ontology import Taxonomy, coarsen_labels
from leco.synthdata import (
    TEST,
    TRAIN,
    UNALLOCATED,
    VAL,
    Augmentation,
    HierarchicalGaussianSpec,
    apply_annotation_strategy,
    augment,
    class_counts,
    generate_pool,
    load_pool,
    save_pool,
)

TAX = Taxonomy.balanced([4, 3])


def small_pool(seed=0, sizes=(240, 240), tail=0.0, test=120):
    spec = HierarchicalGaussianSpec(dim=6, tail_exponent=tail, seed=seed)
    return generate_pool(spec, TAX, list(sizes), test)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0.01, 10.0), min_size=1, max_size=30), st.integers(0, 5000))
def test_class_counts_sum_and_rounding(weights, total):
    w = np.array(weights)
    counts = class_counts(w, total)
    assert counts.sum() == total
    share = w / w.sum() * total
    assert np.all(np.abs(counts - share) < 1.0)


def test_balanced_blocks_and_test_split():
    pool = small_pool()
    for b in (0, 1):
        np.testing.assert_array_equal(np.bincount(pool.labels[pool.block == b, 1], minlength=12), 20)
    np.testing.assert_array_equal(np.bincount(pool.labels[pool.split == TEST, 1], minlength=12), 10)


def test_long_tail_is_monotone_in_rank():
    pool = small_pool(tail=1.0, sizes=(2000,))
    counts = np.sort(np.bincount(pool.labels[pool.block == 0, 1], minlength=12))[::-1]
    assert counts[0] > 4 * counts[-1]


def test_labels_follow_lineage():
    pool = small_pool()
    np.testing.assert_array_equal(pool.labels[:, 0], coarsen_labels(TAX, pool.labels[:, 1], 1, 0))


def test_generator_moments():
    spec = HierarchicalGaussianSpec(dim=4, sigma_coarse=3.0, sigma_fine=0.0, sigma_noise=0.5, seed=1)
    tax = Taxonomy.balanced([2, 2])
    pool = generate_pool(spec, tax, [40000], 0)
    f, y = pool.features, pool.labels
    # sigma_fine = 0: siblings share their parent's center exactly
    m = [f[y[:, 1] == c].mean(axis=0) for c in range(4)]
    np.testing.assert_allclose(m[0], m[1], atol=0.05)
    np.testing.assert_allclose(f[y[:, 1] == 2].std(axis=0), 0.5, rtol=0.05)


def test_same_seed_same_pool_different_seed_different_pool():
    a, b, c = small_pool(0), small_pool(0), small_pool(1)
    np.testing.assert_array_equal(a.features, b.features)
    assert not np.array_equal(a.features, c.features)


def test_label_new_allocates_fresh_samples():
    pool = small_pool()
    p0 = apply_annotation_strategy(pool, "LabelNew", 0, 240)
    p1 = apply_annotation_strategy(p0, "LabelNew", 1, 240)
    d = p1.datasets(1)
    s = d.summary()
    assert s["fine_labeled"] == 240 and s["distinct_labeled"] == 480
    assert s["coarse_history"] == 192 and s["val"] == 48
    assert np.all(p1.visible_level[p1.draw == 0] == 0)
    assert not np.intersect1d(d.train_new, d.history).size
    assert np.all(p1.split[d.val] == VAL)


def test_relabel_old_upgrades_previous_samples_only():
    p0 = apply_annotation_strategy(small_pool(), "LabelNew", 0, 240)
    p1 = apply_annotation_strategy(p0, "RelabelOld", 1, 240)
    s = p1.datasets(1).summary()
    assert s["fine_labeled"] == 240 and s["distinct_labeled"] == 240 and s["coarse_history"] == 0
    assert np.all(p1.split[p1.block == 1] == UNALLOCATED)


def test_relabel_old_respects_budget():
    p0 = apply_annotation_strategy(small_pool(), "LabelNew", 0, 240)
    p1 = apply_annotation_strategy(p0, "RelabelOld", 1, 100)
    assert (p1.visible_level == 1).sum() == 100


def test_all_fine_labels_everything_at_the_new_level():
    p0 = apply_annotation_strategy(small_pool(), "LabelNew", 0, 240)
    p1 = apply_annotation_strategy(p0, "AllFine", 1, 240)
    s = p1.datasets(1).summary()
    assert s["fine_labeled"] == 2 * 240 and s["coarse_history"] == 0


def test_annotation_errors():
    pool = small_pool()
    with pytest.raises(ValueError):
        apply_annotation_strategy(pool, "RelabelOld", 0, 10)
    with pytest.raises(ValueError):
        apply_annotation_strategy(pool, "LabelNew", 0, 10**6)
    with pytest.raises(ValueError):
        apply_annotation_strategy(pool, "Bogus", 0, 10)


def test_validation_fraction():
    p0 = apply_annotation_strategy(small_pool(), "LabelNew", 0, 240)
    assert (p0.split == VAL).sum() == 48 and (p0.split == TRAIN).sum() == 192


def test_degenerate_augmentation_is_identity():
    x = np.random.default_rng(0).normal(size=(5, 7))
    rng = np.random.default_rng(1)
    for mode in ("weak", "strong", "none"):
        np.testing.assert_array_equal(augment(x, mode, rng, 0.0, 0.0), x)
    with pytest.raises(ValueError):
        augment(x, "medium", rng, 0.1)


def test_strong_augmentation_preserves_expectation():
    x = np.random.default_rng(0).normal(size=16)
    aug = Augmentation(noise_std=0.05, drop_prob=0.2)
    draws = aug(np.broadcast_to(x, (100000, 16)), "strong", np.random.default_rng(2))
    se = draws.std(axis=0, ddof=1) / np.sqrt(len(draws))
    assert np.all(np.abs(draws.mean(axis=0) - x) < 3 * se + 1e-12)


def test_strong_dropout_rate_and_scaling():
    x = np.ones((20000, 10))
    out = augment(x, "strong", np.random.default_rng(3), 0.0, 0.2)
    zero = out == 0
    assert abs(zero.mean() - 0.2) < 0.01
    np.testing.assert_allclose(out[~zero], 1.25)


def test_weak_augmentation_rarely_flips_confident_predictions():
    spec = HierarchicalGaussianSpec(dim=8, sigma_coarse=4.0, sigma_fine=1.0, sigma_noise=0.6, seed=4)
    pool = generate_pool(spec, TAX, [3000], 0)
    centers = np.array([pool.features[pool.labels[:, 1] == c].mean(axis=0) for c in range(12)])

    def predict(x):
        return np.argmin(((x[:, None, :] - centers[None]) ** 2).sum(-1), axis=1)

    x = pool.features
    d = np.sort(((x[:, None, :] - centers[None]) ** 2).sum(-1), axis=1)
    confident = (d[:, 1] - d[:, 0]) > 1.0
    before = predict(x[confident])
    after = predict(Augmentation.for_spec(spec)(x[confident], "weak", np.random.default_rng(5)))
    assert (before != after).mean() < 0.01


def test_pool_round_trip(tmp_path):
    p0 = apply_annotation_strategy(small_pool(), "LabelNew", 0, 240)
    back = load_pool(save_pool(p0, tmp_path / "pool"))
    for name in ("features", "labels", "block", "split", "visible_level", "draw", "excluded"):
        np.testing.assert_array_equal(getattr(back, name), getattr(p0, name))
    assert back.spec == p0.spec
