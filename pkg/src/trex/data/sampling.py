"""Patient-level stratified folds, class-balanced batching and dihedral augmentation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .cohort import Cohort, Outcome


@dataclass(frozen=True)
class FoldAssignment:
    fold_of: dict[str, int]
    k: int

    def val_ids(self, fold: int) -> list[str]:
        return sorted(pid for pid, f in self.fold_of.items() if f == fold)

    def train_ids(self, fold: int) -> list[str]:
        return sorted(pid for pid, f in self.fold_of.items() if f != fold)


def split_folds(cohort: Cohort, k: int = 5, seed: int = 0) -> FoldAssignment:
    """Stratified k-fold split at the patient level.

    Each class is shuffled and dealt round-robin; the second class continues
    where the first stopped so fold sizes also stay within one patient.
    """
    if k < 2:
        raise ValueError("split_folds: k must be at least 2")
    rng = np.random.default_rng(seed)
    fold_of: dict[str, int] = {}
    start = 0
    for outcome in (Outcome.CR, Outcome.LR):
        ids = sorted(p.patient_id for p in cohort if p.outcome is outcome)
        if len(ids) < k:
            raise ValueError(f"split_folds: only {len(ids)} {outcome.value} patients for k={k}")
        for j, idx in enumerate(rng.permutation(len(ids))):
            fold_of[ids[idx]] = (start + j) % k
        start = (start + len(ids)) % k
    return FoldAssignment(fold_of, k)


def _stream(indices: np.ndarray, count: int, rng: np.random.Generator) -> np.ndarray:
    """``count`` draws cycling through fresh permutations of ``indices``."""
    reps = -(-count // len(indices))
    return np.concatenate([rng.permutation(indices) for _ in range(reps)])[:count]


def balanced_batches(
    labels: Sequence[int], batch: int = 8, rng: np.random.Generator | int = 0, n_batches: int | None = None
) -> list[np.ndarray]:
    """One epoch of index batches with both classes equally represented.

    Every batch carries ``ceil(batch/2)`` of one class and ``floor(batch/2)``
    of the other (the larger share alternates).  Each class is drawn from
    successive reshuffles, so the minority class repeats within an epoch.
    The epoch length defaults to ``ceil(len(labels)/batch)`` batches.
    """
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    labels = np.asarray(labels)
    pos = np.flatnonzero(labels == 1)
    neg = np.flatnonzero(labels == 0)
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("balanced_batches: both classes must be present")
    if n_batches is None:
        n_batches = -(-len(labels) // batch)
    big, small = -(-batch // 2), batch // 2
    n_pos = sum(big if i % 2 == 0 else small for i in range(n_batches))
    pos_draw = _stream(pos, n_pos, rng)
    neg_draw = _stream(neg, n_batches * batch - n_pos, rng)
    out, ip, ineg = [], 0, 0
    for i in range(n_batches):
        kp = big if i % 2 == 0 else small
        kn = batch - kp
        idx = np.concatenate([pos_draw[ip : ip + kp], neg_draw[ineg : ineg + kn]])
        ip += kp
        ineg += kn
        out.append(rng.permutation(idx))
    return out


def shuffled_batches(
    n: int, batch: int = 8, rng: np.random.Generator | int = 0, n_batches: int | None = None
) -> list[np.ndarray]:
    """Plain shuffled batching (the no-balance ablation)."""
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    if n_batches is None:
        n_batches = -(-n // batch)
    draw = _stream(np.arange(n), n_batches * batch, rng)
    return [draw[i * batch : (i + 1) * batch] for i in range(n_batches)]


# D4 elements are encoded 0..7: rotation by 90*(e % 4) degrees, then a
# horizontal flip when e >= 4.  Vertical flips are the products of the two.
D4_ORDER = 8


def apply_d4(image: np.ndarray, element: int) -> np.ndarray:
    out = np.rot90(image, k=element % 4, axes=(0, 1))
    if element >= 4:
        out = out[:, ::-1]
    return np.ascontiguousarray(out)


def augment(image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Uniformly sampled rotation-by-90 / flip of a square ``[H, W, C]`` image."""
    if image.shape[0] != image.shape[1]:
        raise ValueError(f"augment: image must be square, got {image.shape[:2]}")
    return apply_d4(image, int(rng.integers(D4_ORDER)))
