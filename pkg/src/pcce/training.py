"""Two-phase trainer: portrait pre-training, projection-map fine-tuning.

Phase 1 trains from scratch on the portrait corpus; phase 2 resumes from a
phase-1 model on projection-atlas pairs at a halved learning rate and
fewer epochs. Loss is L1 restricted to occupied pixels (the mask doubles
as the occupancy map); validation tracks masked Y-PSNR through the same
inference path used at deployment, and the best-validating weights win.
"""

from __future__ import annotations

import csv
import json
import math
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .datasets import CorpusManifest, TrainingPair
from .errors import ContractError
from .metrics import psnr_2d
from .model import ModelHandle, enhance, load_checkpoint, save_checkpoint

ADAM_BETAS = (0.9, 0.999)

_PHASE_DEFAULTS = {
    1: dict(epochs=30, batch_size=30, learning_rate=1e-4, crop=128),
    2: dict(epochs=10, batch_size=30, learning_rate=5e-5, crop=256),
}


@dataclass
class PhaseConfig:
    phase: int
    epochs: int
    batch_size: int
    learning_rate: float
    crop: int
    seed: int = 0
    augment: bool = True
    masked_loss: bool = True
    min_crop_occupancy: float = 0.10

    def __post_init__(self):
        if self.phase not in (1, 2):
            raise ContractError(f"phase must be 1 or 2, got {self.phase}")
        if self.epochs < 1:
            raise ContractError("epochs must be >= 1")
        if self.batch_size < 1 or self.crop < 1:
            raise ContractError("batch_size and crop must be >= 1")

    @classmethod
    def defaults(cls, phase: int, **overrides) -> "PhaseConfig":
        if phase not in _PHASE_DEFAULTS:
            raise ContractError(f"phase must be 1 or 2, got {phase}")
        kw = dict(_PHASE_DEFAULTS[phase])
        kw.update(overrides)
        return cls(phase=phase, **kw)


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_psnr: float
    seconds: float


@dataclass
class TrainReport:
    phase: int
    initial_val_psnr: float
    epochs: list[EpochStats] = field(default_factory=list)
    best_epoch: int = 0
    best_val_psnr: float = -math.inf
    best_checkpoint: str = ""
    diverged: bool = False

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        data = {
            "phase": self.phase,
            "initial_val_psnr": _json_num(self.initial_val_psnr),
            "best_epoch": self.best_epoch,
            "best_val_psnr": _json_num(self.best_val_psnr),
            "best_checkpoint": self.best_checkpoint,
            "diverged": self.diverged,
            "epochs": [{"epoch": e.epoch, "train_loss": e.train_loss,
                        "val_psnr": _json_num(e.val_psnr), "seconds": e.seconds}
                       for e in self.epochs],
        }
        (out / "report.json").write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
        with open(out / "curves.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "val_psnr", "seconds"])
            for e in self.epochs:
                w.writerow([e.epoch, f"{e.train_loss:.6f}",
                            "inf" if math.isinf(e.val_psnr) else f"{e.val_psnr:.4f}",
                            f"{e.seconds:.2f}"])


def _json_num(v):
    return "inf" if math.isinf(v) else v


def masked_l1(pred: torch.Tensor, target: torch.Tensor,
              mask: torch.Tensor) -> torch.Tensor:
    """Mean absolute error over masked pixels, averaged across channels.

    mask broadcasts over the channel axis; an all-zero mask yields 0 with
    a warning rather than a NaN.
    """
    if pred.shape != target.shape:
        raise ContractError(f"pred {tuple(pred.shape)} != target {tuple(target.shape)}")
    if mask.shape[-2:] != pred.shape[-2:]:
        raise ContractError(
            f"mask spatial shape {tuple(mask.shape[-2:])} != {tuple(pred.shape[-2:])}")
    mask = mask.to(pred.dtype)
    denom = mask.sum() * pred.shape[-3]
    if denom.item() == 0:
        warnings.warn("masked_l1 over an empty mask; returning 0")
        return torch.zeros((), dtype=pred.dtype, device=pred.device)
    while mask.ndim < pred.ndim:
        mask = mask.unsqueeze(-3)
    return (torch.abs(pred - target) * mask).sum() / denom


def _pad_to(arr: np.ndarray, h: int, w: int) -> np.ndarray:
    ph, pw = max(0, h - arr.shape[0]), max(0, w - arr.shape[1])
    if not ph and not pw:
        return arr
    pad = ((0, ph), (0, pw)) + ((0, 0),) * (arr.ndim - 2)
    return np.pad(arr, pad, mode="reflect")


def _sample_crop(pair: TrainingPair, crop: int, min_occ: float,
                 rng: np.random.Generator, augment: bool):
    noisy = _pad_to(pair.noisy, crop, crop)
    clean = _pad_to(pair.clean, crop, crop)
    mask = _pad_to(pair.mask, crop, crop)
    h, w = mask.shape
    best = None
    for _ in range(40):
        y0 = int(rng.integers(0, h - crop + 1))
        x0 = int(rng.integers(0, w - crop + 1))
        occ = mask[y0:y0 + crop, x0:x0 + crop].mean()
        if best is None or occ > best[0]:
            best = (occ, y0, x0)
        if occ >= min_occ:
            break
    _, y0, x0 = best
    sl = np.s_[y0:y0 + crop, x0:x0 + crop]
    n, c, m = noisy[sl], clean[sl], mask[sl]
    if augment:
        if rng.integers(0, 2):
            n, c, m = n[::-1], c[::-1], m[::-1]
        if rng.integers(0, 2):
            n, c, m = n[:, ::-1], c[:, ::-1], m[:, ::-1]
        k = int(rng.integers(0, 4))
        if k:
            n, c, m = (np.rot90(a, k) for a in (n, c, m))
    return n.copy(), c.copy(), m.copy()


def _make_batch(pairs, cfg: PhaseConfig, rng: np.random.Generator):
    xs, ys, ms = [], [], []
    for pair in pairs:
        n, c, m = _sample_crop(pair, cfg.crop, cfg.min_crop_occupancy, rng,
                               cfg.augment)
        occ = m.astype(np.float32)
        xs.append(np.concatenate([n.astype(np.float32) / 255.0, occ[:, :, None]],
                                 axis=2).transpose(2, 0, 1))
        ys.append((c.astype(np.float32) / 255.0).transpose(2, 0, 1))
        ms.append(occ[None])
    return (torch.from_numpy(np.stack(xs)), torch.from_numpy(np.stack(ys)),
            torch.from_numpy(np.stack(ms)))


def _mean_val_psnr(model: ModelHandle, pairs) -> float:
    vals = [psnr_2d(p.clean, enhance(model, p.noisy, p.mask), p.mask)
            for p in pairs]
    return float(np.mean(vals))


def train_phase(model: ModelHandle, corpus: CorpusManifest, cfg: PhaseConfig,
                out_dir) -> tuple[ModelHandle, TrainReport]:
    """Run one training phase and return the best-validating model.

    Adam with standard betas at cfg.learning_rate; random occupancy-aware
    crops with flip/rot90 augmentation; masked Y-PSNR validation each
    epoch. A NaN loss aborts the run, keeping the best checkpoint so far.
    """
    if cfg.phase == 2 and 1 not in model.trained_phases:
        raise ContractError("phase 2 requires a phase-1 checkpoint to warm-start")
    mult = model.config.size_multiple
    if cfg.crop % mult:
        raise ContractError(f"crop {cfg.crop} not divisible by {mult}")
    train_items = corpus.split("train")
    val_items = corpus.split("val")
    if not train_items:
        raise ContractError("corpus has no training items")
    train_pairs = [corpus.load_pair(it) for it in train_items]
    val_pairs = [corpus.load_pair(it) for it in val_items] or train_pairs

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    best_path = out / "best.npz"

    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    opt = torch.optim.Adam(model.net.parameters(), lr=cfg.learning_rate,
                           betas=ADAM_BETAS)

    report = TrainReport(phase=cfg.phase,
                         initial_val_psnr=_mean_val_psnr(model, val_pairs))
    model.trained_phases = tuple(sorted(set(model.trained_phases) | {cfg.phase}))
    report.best_val_psnr = report.initial_val_psnr
    save_checkpoint(model, best_path)
    report.best_checkpoint = str(best_path)

    n = len(train_pairs)
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.time()
        order = rng.permutation(n)
        losses = []
        model.net.train()
        diverged = False
        for lo in range(0, n, cfg.batch_size):
            batch = [train_pairs[i] for i in order[lo:lo + cfg.batch_size]]
            x, y, mask = _make_batch(batch, cfg, rng)
            opt.zero_grad()
            pred = model.net(x)
            if cfg.masked_loss:
                loss = masked_l1(pred, y, mask)
            else:
                loss = torch.abs(pred - y).mean()
            if not torch.isfinite(loss):
                diverged = True
                break
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
        model.net.eval()
        if diverged:
            report.diverged = True
            warnings.warn(
                f"training diverged at epoch {epoch}; keeping best checkpoint")
            break
        val = _mean_val_psnr(model, val_pairs)
        report.epochs.append(EpochStats(
            epoch=epoch, train_loss=float(np.mean(losses)), val_psnr=val,
            seconds=time.time() - t0))
        if val > report.best_val_psnr:
            report.best_val_psnr = val
            report.best_epoch = epoch
            save_checkpoint(model, best_path)
    report.save(out)
    best = load_checkpoint(best_path)
    return best, report


@dataclass
class EvalRow:
    item_id: str
    qp: int
    psnr_before: float
    psnr_after: float


@dataclass
class EvalResult:
    mean_before: float
    mean_after: float
    rows: list[EvalRow]


def evaluate_checkpoint(model: ModelHandle, corpus: CorpusManifest,
                        split: str = "val") -> EvalResult:
    """Masked Y-PSNR of each pair before and after enhancement."""
    items = corpus.split(split)
    if not items:
        raise ContractError(f"corpus has no items in split {split!r}")
    rows = []
    for it in items:
        pair = corpus.load_pair(it)
        before = psnr_2d(pair.clean, pair.noisy, pair.mask)
        after = psnr_2d(pair.clean, enhance(model, pair.noisy, pair.mask), pair.mask)
        rows.append(EvalRow(item_id=it.item_id, qp=it.qp,
                            psnr_before=before, psnr_after=after))
    return EvalResult(
        mean_before=float(np.mean([r.psnr_before for r in rows])),
        mean_after=float(np.mean([r.psnr_after for r in rows])),
        rows=rows)
