"""Loss, Adam, learning-rate schedule and the cross-validated training loop."""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from torch import Tensor, nn

from .data.cohort import Cohort, ImagePair, Task, assign_retrospective_labels, build_pairs
from .data.images import ImageStore, to_model_input
from .data.sampling import FoldAssignment, augment, balanced_batches, shuffled_batches, split_folds
from .fusion import ModelConfig, PairClassifier, build_model, lr_probability
from .nn_core import ConfigError, log_softmax

log = logging.getLogger(__name__)

LOG_HEADER = ("fold", "epoch", "lr", "train_loss", "val_bal_acc")


class NonFiniteError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 2e-4
    warmup_epochs: int = 10
    epochs: int = 30
    batch: int = 8
    seed: int = 0
    k_folds: int = 5
    model_kind: str = "trex"
    task: str = "surveillance"
    no_dca: bool = False
    no_dt: bool = False
    no_balance: bool = False
    no_augment: bool = False
    schedule: str = "linear"  # or "constant" after warmup
    clip_norm: float = 5.0
    weight_decay: float = 0.0
    epoch_pairs: int | None = None  # pairs drawn per epoch; None = one pass over the training pairs
    si_image: str = "later"  # single-image model input: "later" or "ref" image of each pair
    val_every: int = 0  # 0 = validate at the last epoch only

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError("train.lr must be positive")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError("train.warmup_epochs must be in [0, epochs)")
        if self.batch < 2:
            raise ConfigError("train.batch must be at least 2")
        if self.schedule not in ("linear", "constant"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if self.si_image not in ("later", "ref"):
            raise ConfigError(f"unknown si_image {self.si_image!r}")
        Task(self.task)

    def to_dict(self) -> dict:
        return asdict(self)


def cross_entropy(logits: Tensor, labels: Tensor | int) -> Tensor:
    """Mean of ``-log softmax(z)[label]`` over the batch (log-sum-exp stable)."""
    logp = log_softmax(logits, axis=-1)
    labels = torch.as_tensor(labels, dtype=torch.long)
    if logp.dim() == 1:
        return -logp[labels]
    return -logp.gather(-1, labels.reshape(-1, 1)).mean()


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``lr`` over ``warmup_epochs``, then linear decay reaching 0 at ``epochs``."""
    if not 0 <= epoch < cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs})")
    if epoch < cfg.warmup_epochs:
        return cfg.lr * (epoch + 1) / cfg.warmup_epochs
    if cfg.schedule == "constant":
        return cfg.lr
    return cfg.lr * (cfg.epochs - epoch) / (cfg.epochs - cfg.warmup_epochs)


@dataclass
class AdamState:
    m: list[Tensor]
    v: list[Tensor]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Sequence[Tensor], **kw) -> "AdamState":
        return cls([torch.zeros_like(p) for p in params], [torch.zeros_like(p) for p in params], **kw)


@torch.no_grad()
def adam_step(
    params: Sequence[Tensor], grads: Sequence[Tensor | None], state: AdamState, lr_t: float, weight_decay: float = 0.0
) -> None:
    """Bias-corrected Adam update, in place on ``params`` and ``state``."""
    present = [g for g in grads if g is not None]
    if present and not all(math.isfinite(float(n)) for n in torch._foreach_norm(present)):
        raise NonFiniteError("non-finite gradient in adam_step")
    for p, m in zip(params, state.m):
        if p.shape != m.shape:
            raise ValueError(f"adam_step: parameter shape {tuple(p.shape)} vs state {tuple(m.shape)}")
    params = list(params)
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
    if weight_decay:
        grads = torch._foreach_add(grads, params, alpha=weight_decay)
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    torch._foreach_mul_(state.m, b1)
    torch._foreach_add_(state.m, grads, alpha=1 - b1)
    torch._foreach_mul_(state.v, b2)
    torch._foreach_addcmul_(state.v, grads, grads, value=1 - b2)
    # p -= lr * (m / c1) / (sqrt(v / c2) + eps)
    denom = torch._foreach_sqrt(state.v)
    torch._foreach_div_(denom, math.sqrt(c2))
    torch._foreach_add_(denom, state.eps)
    torch._foreach_addcdiv_(params, state.m, denom, value=-lr_t / c1)


def clip_grad_norm(grads: Sequence[Tensor | None], max_norm: float) -> float:
    present = [g for g in grads if g is not None]
    if not present:
        return 0.0
    norm = float(torch.linalg.vector_norm(torch.stack(torch._foreach_norm(present))))
    if max_norm > 0 and norm > max_norm:
        torch._foreach_mul_(present, max_norm / (norm + 1e-6))
    return norm


# ---------------------------------------------------------------------------
# Batching
# ---------------------------------------------------------------------------


def units_for(pairs: Sequence[ImagePair], kind: str, si_image: str = "later") -> list[ImagePair]:
    """Training/scoring units: pairs for siamese models, one entry per distinct image for SI."""
    if kind != "si":
        return list(pairs)
    seen, out = set(), []
    for p in pairs:
        key = p.later_image if si_image == "later" else p.ref_image
        if key not in seen:
            seen.add(key)
            out.append(p)
    return out


def make_batch(
    units: Sequence[ImagePair],
    store: ImageStore,
    kind: str,
    si_image: str = "later",
    rng: np.random.Generator | None = None,
) -> tuple[Tensor | None, Tensor, Tensor]:
    def load(path: str) -> np.ndarray:
        img = store[path]
        return augment(img, rng) if rng is not None else img

    if kind == "si":
        paths = [u.later_image if si_image == "later" else u.ref_image for u in units]
        later = np.stack([load(p) for p in paths])
        ref = None
    else:
        ref = np.stack([load(u.ref_image) for u in units])
        later = np.stack([load(u.later_image) for u in units])
    dt = torch.tensor([u.dt_norm for u in units], dtype=torch.float32)
    x_ref = None if ref is None else torch.from_numpy(to_model_input(ref))
    return x_ref, torch.from_numpy(to_model_input(later)), dt


@torch.no_grad()
def predict_units(
    model: PairClassifier, units: Sequence[ImagePair], store: ImageStore, si_image: str = "later", batch: int = 64
) -> np.ndarray:
    """LR probability for each unit, in inference mode."""
    was_training = model.training
    model.eval()
    out = []
    for i in range(0, len(units), batch):
        x_ref, x_later, dt = make_batch(units[i : i + batch], store, model.cfg.kind, si_image)
        out.append(lr_probability(model(x_ref, x_later, dt)).numpy())
    model.train(was_training)
    return np.concatenate(out) if out else np.zeros(0, dtype=np.float32)


def pair_balanced_accuracy(probs: np.ndarray, labels: np.ndarray) -> float:
    pred = probs >= 0.5
    pos, neg = labels == 1, labels == 0
    parts = []
    if pos.any():
        parts.append(pred[pos].mean())
    if neg.any():
        parts.append((~pred[neg]).mean())
    return float(np.mean(parts)) if parts else float("nan")


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class FoldResult:
    fold: int
    model: PairClassifier
    train_ids: list[str]
    val_ids: list[str]
    log_rows: list[tuple] = field(default_factory=list)
    checkpoint: Path | None = None


def model_config_for(cfg: TrainConfig, base: ModelConfig) -> ModelConfig:
    return replace(base, kind=cfg.model_kind, no_dca=cfg.no_dca, no_dt=cfg.no_dt)


def set_threads() -> None:
    n = os.environ.get("TREX_THREADS")
    if n:
        torch.set_num_threads(max(1, int(n)))


def train_fold(
    train_pairs: Sequence[ImagePair],
    store: ImageStore,
    cfg: TrainConfig,
    model_cfg: ModelConfig,
    fold: int = 0,
    val_pairs: Sequence[ImagePair] = (),
) -> tuple[PairClassifier, list[tuple]]:
    """Train one model from scratch; returns it with its per-epoch log rows."""
    seed = cfg.seed * 1000 + fold
    model = build_model(model_cfg, seed=seed)
    model.train()
    rng = np.random.default_rng([cfg.seed, fold, 17])
    units = units_for(train_pairs, model_cfg.kind, cfg.si_image)
    if not units:
        raise ValueError(f"fold {fold}: no training pairs")
    labels = np.array([u.label.index for u in units])
    val_units = units_for(val_pairs, model_cfg.kind, cfg.si_image)
    val_labels = np.array([u.label.index for u in val_units])
    params = [p for p in model.parameters()]
    state = AdamState.for_params(params)
    n_batches = None if cfg.epoch_pairs is None else max(1, cfg.epoch_pairs // cfg.batch)
    rows = []
    for epoch in range(cfg.epochs):
        lr_t = lr_at(epoch, cfg)
        if cfg.no_balance:
            batches = shuffled_batches(len(units), cfg.batch, rng, n_batches)
        else:
            batches = balanced_batches(labels, cfg.batch, rng, n_batches)
        total = 0.0
        for idx in batches:
            x_ref, x_later, dt = make_batch(
                [units[i] for i in idx], store, model_cfg.kind, cfg.si_image, None if cfg.no_augment else rng
            )
            loss = cross_entropy(model(x_ref, x_later, dt), torch.from_numpy(labels[idx]))
            if not torch.isfinite(loss):
                raise NonFiniteError(f"fold {fold} epoch {epoch}: non-finite loss")
            grads = torch.autograd.grad(loss, params, allow_unused=True)
            clip_grad_norm(grads, cfg.clip_norm)
            adam_step(params, grads, state, lr_t, cfg.weight_decay)
            total += loss.item()
        train_loss = total / len(batches)
        last = epoch == cfg.epochs - 1
        val_acc = ""
        if len(val_units) and (last or (cfg.val_every and (epoch + 1) % cfg.val_every == 0)):
            probs = predict_units(model, val_units, store, cfg.si_image)
            val_acc = f"{pair_balanced_accuracy(probs, val_labels):.6f}"
        rows.append((fold, epoch, f"{lr_t:.8g}", f"{train_loss:.6f}", val_acc))
        log.info("fold %d epoch %d lr %.3g loss %.4f val %s", fold, epoch, lr_t, train_loss, val_acc)
    model.eval()
    return model, rows


def fold_pairs(cohort: Cohort, folds: FoldAssignment, fold: int, task: str) -> tuple[list[ImagePair], list[ImagePair]]:
    labelled = assign_retrospective_labels(cohort)
    train = build_pairs(labelled.subset(folds.train_ids(fold)), task)
    val = build_pairs(labelled.subset(folds.val_ids(fold)), task)
    return train, val


def fit(
    cohort: Cohort,
    store: ImageStore,
    cfg: TrainConfig,
    model_cfg: ModelConfig = ModelConfig(),
    out_dir: str | Path | None = None,
    folds: Iterable[int] | None = None,
) -> tuple[list[FoldResult], FoldAssignment]:
    """Train one last-epoch model per fold.

    When ``out_dir`` is given, writes ``fold{k}.ckpt`` and ``train_log.csv``.
    """
    from .persistence import save_checkpoint

    set_threads()
    model_cfg = model_config_for(cfg, model_cfg)
    assignment = split_folds(cohort, cfg.k_folds, cfg.seed)
    results = []
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    for fold in folds if folds is not None else range(cfg.k_folds):
        train, val = fold_pairs(cohort, assignment, fold, cfg.task)
        model, rows = train_fold(train, store, cfg, model_cfg, fold, val)
        res = FoldResult(fold, model, assignment.train_ids(fold), assignment.val_ids(fold), rows)
        if out is not None:
            res.checkpoint = out / f"fold{fold}.ckpt"
            save_checkpoint(model, {"seed": cfg.seed, "epoch": cfg.epochs - 1, "fold": fold}, res.checkpoint)
        results.append(res)
    if out is not None:
        write_train_log([r for res in results for r in res.log_rows], out / "train_log.csv")
    return results, assignment


def write_train_log(rows: Sequence[tuple], path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_HEADER)
        w.writerows(rows)
