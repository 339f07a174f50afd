from collections import Counter

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from trex.data.cohort import Cohort, ImageRef, Outcome, PatientRecord, Study, StudyKind
from trex.data.sampling import apply_d4, augment, balanced_batches, shuffled_batches, split_folds


def cohort(n_lr, n_cr):
    pats = []
    for i in range(n_lr + n_cr):
        out = Outcome.LR if i < n_lr else Outcome.CR
        pats.append(PatientRecord(f"P{i:03d}", out, (Study(StudyKind.RESTAGING, 0, (ImageRef(f"{i}.png"),)),)))
    return Cohort(tuple(pats))


@given(st.integers(5, 40), st.integers(5, 60), st.integers(2, 5), st.integers(0, 1000))
def test_folds_partition_patients_and_stratify(n_lr, n_cr, k, seed):
    c = cohort(n_lr, n_cr)
    fa = split_folds(c, k, seed)
    all_ids = {p.patient_id for p in c}
    val_sets = [set(fa.val_ids(f)) for f in range(k)]
    assert set().union(*val_sets) == all_ids
    assert sum(len(v) for v in val_sets) == len(all_ids)
    for f in range(k):
        assert not set(fa.train_ids(f)) & val_sets[f]
        assert set(fa.train_ids(f)) | val_sets[f] == all_ids
    lr = {p.patient_id for p in c if p.outcome is Outcome.LR}
    lr_counts = [len(v & lr) for v in val_sets]
    sizes = [len(v) for v in val_sets]
    assert max(lr_counts) - min(lr_counts) <= 1
    assert max(sizes) - min(sizes) <= 1


def test_folds_deterministic_and_seed_dependent():
    c = cohort(20, 30)
    assert split_folds(c, 5, 3) == split_folds(c, 5, 3)
    assert split_folds(c, 5, 3) != split_folds(c, 5, 4)
    with pytest.raises(ValueError):
        split_folds(cohort(3, 10), 5)


@given(st.integers(1, 30), st.integers(1, 200), st.integers(2, 12), st.integers(0, 50))
def test_balanced_batches_composition(n_pos, n_neg, batch, seed):
    labels = np.array([1] * n_pos + [0] * n_neg)
    batches = balanced_batches(labels, batch, seed)
    assert len(batches) == -(-len(labels) // batch)
    for i, b in enumerate(batches):
        assert len(b) == batch
        pos = int(labels[b].sum())
        assert pos in (batch // 2, -(-batch // 2))
    # minority class is cycled through full reshuffles: counts differ by at most one
    drawn = Counter(int(i) for b in batches for i in b if labels[i] == 1)
    counts = [drawn.get(i, 0) for i in range(n_pos)]
    assert max(counts) - min(counts) <= 1


def test_balanced_batches_needs_both_classes():
    with pytest.raises(ValueError):
        balanced_batches([1, 1, 1], 2)


def test_shuffled_batches_cover_everything():
    b = shuffled_batches(20, 8, 0)
    assert len(b) == 3
    assert set(np.concatenate(b)) == set(range(20))


def test_d4_group():
    img = np.arange(4 * 4 * 3).reshape(4, 4, 3)
    outs = [apply_d4(img, e) for e in range(8)]
    assert len({o.tobytes() for o in outs}) == 8
    for o in outs:
        assert sorted(o.ravel()) == sorted(img.ravel())
    # applying rotation 4 times returns the identity; flips are involutions
    x = img
    for _ in range(4):
        x = apply_d4(x, 1)
    np.testing.assert_array_equal(x, img)
    np.testing.assert_array_equal(apply_d4(apply_d4(img, 4), 4), img)


def test_augment_uniform_and_square_only():
    rng = np.random.default_rng(0)
    img = np.arange(9 * 3).reshape(3, 3, 3)
    outs = Counter(augment(img, rng).tobytes() for _ in range(8000))
    assert len(outs) == 8
    assert all(abs(n - 1000) < 150 for n in outs.values())
    with pytest.raises(ValueError):
        augment(np.zeros((3, 4, 3)), rng)
