"""Optimization protocol: label-smoothed cross-entropy, decoupled-weight-decay
Adam, reduce-on-plateau schedule, epoch loop, and checkpointing."""

import copy
import hashlib
import io
import json
import math
import struct
from dataclasses import dataclass, field, asdict

import numpy as np
import torch
import torch.nn.functional as F

from .data import AugmentConfig, sample_tensor
from .errors import (CheckpointError, ConfigurationError,
                     FingerprintMismatchError, NumericalError)

CHECKPOINT_MAGIC = b"SNXCKPT"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class SchedulerConfig:
    factor: float = 0.1
    patience: int = 3
    threshold: float = 1e-4
    min_lr: float = 1e-7


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 80
    lr: float = 1e-4
    weight_decay: float = 1e-5
    smoothing: float = 0.1
    scheduler: SchedulerConfig = field(default_factory=SchedulerConfig)
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigurationError("lr must be > 0")
        if not 0.0 <= self.smoothing < 1.0:
            raise ConfigurationError("smoothing must be in [0,1)")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")


def smoothed_ce(logits, targets, smoothing=0.1):
    """Mean cross-entropy against (1-eps)*onehot + eps/K targets."""
    k = logits.shape[1]
    logp = F.log_softmax(logits, dim=1)
    nll = -logp.gather(1, targets.view(-1, 1)).squeeze(1)
    return ((1.0 - smoothing) * nll - (smoothing / k) * logp.sum(dim=1)).mean()


def adamw_step(params, grads, state, lr, weight_decay,
               beta1=0.9, beta2=0.999, eps=1e-8):
    """One decoupled-weight-decay Adam update, in place.

    ``params``/``grads`` are dicts of tensors keyed by name; ``state`` holds
    per-parameter first/second moments plus the shared step counter and is
    created lazily on first use.
    """
    if "t" not in state:
        state["t"] = 0
        state["m"] = {k: torch.zeros_like(v) for k, v in params.items()}
        state["v"] = {k: torch.zeros_like(v) for k, v in params.items()}
    state["t"] += 1
    t = state["t"]
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    with torch.no_grad():
        for name, p in params.items():
            g = grads[name]
            m = state["m"][name]
            v = state["v"][name]
            m.mul_(beta1).add_(g, alpha=1.0 - beta1)
            v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
            m_hat = m / bc1
            v_hat = v / bc2
            p.add_(m_hat / (v_hat.sqrt() + eps), alpha=-lr)
            if weight_decay:
                p.add_(p, alpha=-lr * weight_decay)
    return params, state


class AdamW:
    """Thin optimizer wrapper around :func:`adamw_step` for a model."""

    def __init__(self, model, lr, weight_decay, beta1=0.9, beta2=0.999, eps=1e-8):
        self.model = model
        self.lr = lr
        self.weight_decay = weight_decay
        self.betas = (beta1, beta2)
        self.eps = eps
        self.state = {}

    def step(self):
        params = dict(self.model.named_parameters())
        grads = {k: (p.grad if p.grad is not None else torch.zeros_like(p))
                 for k, p in params.items()}
        adamw_step(params, grads, self.state, self.lr, self.weight_decay,
                   self.betas[0], self.betas[1], self.eps)

    def zero_grad(self):
        for p in self.model.parameters():
            p.grad = None

    def state_dict(self):
        return {"t": self.state.get("t", 0),
                "m": self.state.get("m", {}), "v": self.state.get("v", {}),
                "lr": self.lr, "weight_decay": self.weight_decay,
                "betas": self.betas, "eps": self.eps}

    def load_state_dict(self, sd):
        self.state = {"t": sd["t"], "m": sd["m"], "v": sd["v"]} if sd["t"] else {}
        self.lr = sd["lr"]
        self.weight_decay = sd["weight_decay"]
        self.betas = tuple(sd["betas"])
        self.eps = sd["eps"]


class PlateauScheduler:
    """Multiply lr by ``factor`` after ``patience`` epochs without the
    monitored loss improving by more than ``threshold``."""

    def __init__(self, lr, cfg=SchedulerConfig()):
        self.cfg = cfg
        self.lr = lr
        self.best = math.inf
        self.num_bad = 0

    def step(self, val_loss):
        if val_loss < self.best - self.cfg.threshold:
            self.best = val_loss
            self.num_bad = 0
        else:
            self.num_bad += 1
            if self.num_bad >= self.cfg.patience:
                self.lr = max(self.lr * self.cfg.factor, self.cfg.min_lr)
                self.num_bad = 0
        return self.lr

    def state_dict(self):
        return {"lr": self.lr, "best": self.best, "num_bad": self.num_bad}

    def load_state_dict(self, sd):
        self.lr = sd["lr"]
        self.best = sd["best"]
        self.num_bad = sd["num_bad"]


def plateau_step(sched, val_loss):
    return sched.step(val_loss)


@dataclass
class Checkpoint:
    model_state: dict
    optimizer_state: dict
    scheduler_state: dict
    epoch: int
    config: object  # ModelConfig
    split_seed: int


def _config_to_dict(config):
    return asdict(config)


def save_checkpoint(ckpt, path):
    """Versioned binary container: magic, header JSON, torch payload,
    payload checksum in the header."""
    buf = io.BytesIO()
    torch.save({"model": ckpt.model_state,
                "optimizer": ckpt.optimizer_state,
                "scheduler": ckpt.scheduler_state}, buf)
    payload = buf.getvalue()
    header = json.dumps({
        "version": CHECKPOINT_VERSION,
        "fingerprint": ckpt.config.fingerprint(),
        "config": _config_to_dict(ckpt.config),
        "epoch": ckpt.epoch,
        "split_seed": ckpt.split_seed,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<BI", CHECKPOINT_VERSION, len(header)))
        f.write(header)
        f.write(payload)


def load_checkpoint(path, expected_config=None):
    from .fusion import ModelConfig

    try:
        with open(path, "rb") as f:
            magic = f.read(len(CHECKPOINT_MAGIC))
            if magic != CHECKPOINT_MAGIC:
                raise CheckpointError(f"not a checkpoint file: {path}")
            version, hlen = struct.unpack("<BI", f.read(5))
            if version != CHECKPOINT_VERSION:
                raise CheckpointError(f"unsupported checkpoint version {version}")
            header = json.loads(f.read(hlen).decode())
            payload = f.read()
    except (OSError, struct.error, ValueError) as e:
        raise CheckpointError(f"corrupt checkpoint {path}: {e}") from e

    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CheckpointError(f"checkpoint checksum mismatch: {path}")
    config = ModelConfig(**header["config"])
    if expected_config is not None and expected_config.fingerprint() != config.fingerprint():
        raise FingerprintMismatchError(
            f"checkpoint fingerprint {config.fingerprint()} does not match "
            f"expected config {expected_config.fingerprint()}")
    try:
        state = torch.load(io.BytesIO(payload), weights_only=True)
    except Exception as e:
        raise CheckpointError(f"corrupt checkpoint payload {path}: {e}") from e
    return Checkpoint(model_state=state["model"],
                      optimizer_state=state["optimizer"],
                      scheduler_state=state["scheduler"],
                      epoch=header["epoch"], config=config,
                      split_seed=header["split_seed"])


def _load_batch(index, positions, augment_cfg, seed, epoch, image_size):
    xs, ys = [], []
    for pos in positions:
        s = index.samples[pos]
        rng = np.random.default_rng([seed, epoch, pos]) if augment_cfg and augment_cfg.enabled else None
        xs.append(sample_tensor(s, augment_cfg, rng, size=image_size))
        ys.append(s.label)
    return torch.stack(xs), torch.tensor(ys, dtype=torch.long)


def evaluate_loss(model, index, cfg, image_size=224, batch_size=None):
    """Deterministic loss/accuracy pass: no augmentation, no dropout, no
    normalization-statistic updates."""
    model.eval()
    bs = batch_size or cfg.batch_size
    total_loss, correct = 0.0, 0
    with torch.no_grad():
        for start in range(0, len(index), bs):
            pos = range(start, min(start + bs, len(index)))
            x, y = _load_batch(index, pos, None, 0, 0, image_size)
            logits = model(x)
            total_loss += smoothed_ce(logits, y, cfg.smoothing).item() * len(y)
            correct += int((logits.argmax(1) == y).sum())
    return total_loss / len(index), correct / len(index)


def train(model, train_index, val_index, cfg, augment_cfg=None,
          image_size=224, split_seed=0, progress=None):
    """Run the full epoch loop and return (best checkpoint, history).

    Augmentation draws derive from (seed, epoch, sample position) so results
    do not depend on loading order; shuffling uses a per-epoch seeded
    permutation. The checkpoint with the best validation loss is retained.
    """
    if len(train_index) == 0 or len(val_index) == 0:
        raise ConfigurationError("train and val splits must be non-empty")
    if augment_cfg is None:
        augment_cfg = AugmentConfig()
    torch.manual_seed(cfg.seed)

    opt = AdamW(model, cfg.lr, cfg.weight_decay)
    sched = PlateauScheduler(cfg.lr, cfg.scheduler)
    history = []
    best_val = math.inf
    best = None
    n = len(train_index)

    for epoch in range(cfg.epochs):
        model.train()
        perm = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        epoch_loss = 0.0
        for bi, start in enumerate(range(0, n, cfg.batch_size)):
            positions = perm[start:start + cfg.batch_size]
            x, y = _load_batch(train_index, positions, augment_cfg, cfg.seed, epoch, image_size)
            opt.zero_grad()
            loss = smoothed_ce(model(x), y, cfg.smoothing)
            if not torch.isfinite(loss):
                raise NumericalError(
                    f"non-finite loss at epoch {epoch}, batch {bi}",
                    epoch=epoch, batch_index=bi)
            loss.backward()
            opt.step()
            epoch_loss += loss.item() * len(y)

        val_loss, val_acc = evaluate_loss(model, val_index, cfg, image_size)
        opt.lr = sched.step(val_loss)
        entry = {"epoch": epoch, "train_loss": epoch_loss / n,
                 "val_loss": val_loss, "val_accuracy": val_acc, "lr": opt.lr}
        history.append(entry)
        if progress:
            progress(entry)

        if val_loss < best_val:
            best_val = val_loss
            best = Checkpoint(
                model_state=copy.deepcopy(model.state_dict()),
                optimizer_state=copy.deepcopy(opt.state_dict()),
                scheduler_state=sched.state_dict(),
                epoch=epoch, config=model.config, split_seed=split_seed)
    return best, history
