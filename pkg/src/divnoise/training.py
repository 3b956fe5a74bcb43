"""Training loop: Adam, plateau LR decay, early stopping, KL annealing.

The loop is deliberately plain (no DataLoader machinery): batches are cut from
an in-memory patch array with a seeded permutation, each patch optionally gets
one of the eight dihedral transforms drawn on the fly, and every random draw
derives from the config seed so a rerun reproduces epoch losses exactly.
"""

import copy
import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import vae
from .data import apply_dihedral
from .errors import DivergenceError, InputError
from .seeding import derive_seed


@dataclass
class TrainConfig:
    batch_size: int = 32
    initial_lr: float = 1e-3
    lr_decay_factor: float = 0.5
    lr_patience_epochs: int = 30
    early_stop_patience_epochs: int = 100
    early_stop_min_delta: float = 1e-6
    beta: float = 1.0
    kl_anneal_epochs: int = 0
    max_steps: int = 22_000_000
    grad_clip_norm: float = 100.0
    augment: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise InputError("batch_size must be >= 1")
        if self.initial_lr <= 0 or not 0 < self.lr_decay_factor <= 1:
            raise InputError("initial_lr must be > 0 and lr_decay_factor in (0, 1]")
        if self.lr_patience_epochs < 1 or self.early_stop_patience_epochs < 1:
            raise InputError("patience values must be >= 1")
        if self.beta < 0 or self.kl_anneal_epochs < 0:
            raise InputError("beta and kl_anneal_epochs must be >= 0")
        if self.max_steps < 1:
            raise InputError("max_steps must be >= 1")


@dataclass
class EpochRecord:
    epoch: int
    train_total: float
    train_recon: float
    train_kl: float
    val_total: float
    val_recon: float
    val_kl: float
    lr: float
    beta_effective: float
    seconds: float


@dataclass
class TrainReport:
    records: list
    best_epoch: int
    best_val_total: float
    stop_reason: str
    presentations: int
    config: dict
    last_state: dict = field(repr=False, default=None)

    def to_csv(self, path) -> None:
        fields = [f.name for f in EpochRecord.__dataclass_fields__.values()]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(fields)
            for rec in self.records:
                writer.writerow([getattr(rec, name) for name in fields])

    def to_json(self, path) -> None:
        payload = {
            "best_epoch": self.best_epoch,
            "best_val_total": self.best_val_total,
            "stop_reason": self.stop_reason,
            "presentations": self.presentations,
            "epochs_run": len(self.records),
            "config": self.config,
        }
        Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True))


def effective_beta(epoch: int, config: TrainConfig) -> float:
    """KL weight at a 1-based epoch: linear ramp from 0 to beta over
    kl_anneal_epochs, constant beta when annealing is off."""
    if config.kl_anneal_epochs > 0:
        return config.beta * min(1.0, epoch / config.kl_anneal_epochs)
    return config.beta


class PlateauTracker:
    """Counts epochs without a val-loss improvement of at least min_delta.

    update() returns True when patience is exhausted; the stale counter then
    resets so a decay-style consumer can trigger repeatedly.
    """

    def __init__(self, patience: int, min_delta: float = 0.0):
        self.patience = patience
        self.min_delta = min_delta
        self.best = math.inf
        self.stale = 0

    def update(self, value: float) -> bool:
        if value < self.best - self.min_delta:
            self.best = value
            self.stale = 0
            return False
        self.stale += 1
        if self.stale >= self.patience:
            self.stale = 0
            return True
        return False


def _as_patches(obj) -> np.ndarray:
    arr = getattr(obj, "patches", obj)
    arr = np.asarray(arr)
    if arr.ndim != 3:
        raise InputError(f"expected (N, P, P) patches, got shape {arr.shape}")
    return arr


def _batch_tensor(patches, idx, aug_rng, augment, dtype):
    if augment:
        ks = aug_rng.integers(0, 8, size=len(idx))
        stack = np.stack([apply_dihedral(patches[i], int(k)) for i, k in zip(idx, ks)])
    else:
        stack = patches[idx]
    return torch.from_numpy(np.ascontiguousarray(stack)).to(dtype).unsqueeze(1)


def _run_epoch_val(model, val, config, beta, dtype, seed):
    gen = torch.Generator().manual_seed(seed)
    sums = np.zeros(3)
    count = 0
    was_training = model.training
    model.eval()
    with torch.no_grad():
        for start in range(0, len(val), config.batch_size):
            idx = np.arange(start, min(start + config.batch_size, len(val)))
            xb = _batch_tensor(val, idx, None, False, dtype)
            total, recon, kl = vae.loss(model, xb, beta, gen)
            sums += np.array([float(total), float(recon), float(kl)]) * len(idx)
            count += len(idx)
    if was_training:
        model.train()
    return sums / count


def train(model: vae.VaeModel, train_patches, val_patches, config: TrainConfig) -> TrainReport:
    """Train in place; the model is left holding the best-validation weights.

    Stops on the sample-presentation budget ("budget"), the early-stopping
    plateau ("plateau"), or a non-finite loss ("diverged", after restoring the
    best weights seen). Validation batches are never augmented and reuse one
    derived noise seed every epoch, so their losses compare across epochs.
    """
    train_arr = _as_patches(train_patches)
    val_arr = _as_patches(val_patches)
    if len(train_arr) == 0 or len(val_arr) == 0:
        raise InputError("training and validation sets must both be non-empty")
    if not model.data_stats.std > 0:
        raise InputError("model.data_stats.std must be > 0 before training")

    dtype = next(model.parameters()).dtype
    opt = torch.optim.Adam(model.parameters(), lr=config.initial_lr)
    shuffle_rng = np.random.default_rng(derive_seed(config.seed, "shuffle"))
    aug_rng = np.random.default_rng(derive_seed(config.seed, "augment"))
    train_gen = torch.Generator().manual_seed(derive_seed(config.seed, "reparam-train"))
    val_seed = derive_seed(config.seed, "reparam-val")

    stop_tracker = PlateauTracker(config.early_stop_patience_epochs, config.early_stop_min_delta)
    lr_tracker = PlateauTracker(config.lr_patience_epochs, 0.0)

    records = []
    best_val = math.inf
    best_epoch = 0
    best_state = None
    presentations = 0
    stop_reason = None
    epoch = 0
    model.train()

    while stop_reason is None:
        epoch += 1
        t0 = time.time()
        beta = effective_beta(epoch, config)
        perm = shuffle_rng.permutation(len(train_arr))
        sums = np.zeros(3)
        seen = 0
        try:
            for start in range(0, len(perm), config.batch_size):
                idx = perm[start : start + config.batch_size]
                xb = _batch_tensor(train_arr, idx, aug_rng, config.augment, dtype)
                total, recon, kl = vae.loss(model, xb, beta, train_gen)
                opt.zero_grad()
                total.backward()
                torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip_norm)
                opt.step()
                sums += np.array(
                    [total.detach().item(), recon.detach().item(), kl.detach().item()]
                ) * len(idx)
                seen += len(idx)
                presentations += len(idx)
        except DivergenceError:
            stop_reason = "diverged"
            break

        train_means = sums / max(seen, 1)
        val_means = _run_epoch_val(model, val_arr, config, beta, dtype, val_seed)
        records.append(
            EpochRecord(
                epoch=epoch,
                train_total=train_means[0],
                train_recon=train_means[1],
                train_kl=train_means[2],
                val_total=val_means[0],
                val_recon=val_means[1],
                val_kl=val_means[2],
                lr=opt.param_groups[0]["lr"],
                beta_effective=beta,
                seconds=time.time() - t0,
            )
        )

        val_total = float(val_means[0])
        if val_total < best_val - config.early_stop_min_delta:
            best_val = val_total
            best_epoch = epoch
            best_state = copy.deepcopy(model.state_dict())
        if stop_tracker.update(val_total):
            stop_reason = "plateau"
        elif lr_tracker.update(val_total):
            for group in opt.param_groups:
                group["lr"] *= config.lr_decay_factor
        if stop_reason is None and presentations >= config.max_steps:
            stop_reason = "budget"

    last_state = copy.deepcopy(model.state_dict())
    if best_state is not None:
        model.load_state_dict(best_state)
    return TrainReport(
        records=records,
        best_epoch=best_epoch,
        best_val_total=best_val,
        stop_reason=stop_reason,
        presentations=presentations,
        config=asdict(config),
        last_state=last_state,
    )
