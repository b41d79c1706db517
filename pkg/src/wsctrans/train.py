"""AdamW optimizer, the training loop, k-fold cross-validation, and
checkpoint-driven prediction.

Everything downstream of the seed is deterministic: initialization, batch
order, augmentation draws, and therefore the entire loss trajectory and the
log file bytes.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor, Rng
from . import data as D
from .metrics import soft_dice_loss, one_hot, mean_foreground_dss, evaluate
from .network import NetworkConfig, Model, build, save_checkpoint, load_checkpoint


class NumericError(Exception):
    """Raised when training produces a non-finite loss."""


class AdamW:
    """Adam with decoupled weight decay.

    theta <- theta - lr * mhat / (sqrt(vhat) + eps) - lr * wd * theta
    """

    def __init__(self, named_params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=0.01):
        self.params = list(named_params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}

    def zero_grad(self):
        for _, p in self.params:
            p.zero_grad()

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for name, p in self.params:
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            mhat = m / bc1
            vhat = v / bc2
            p.data = (p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)
                      - self.lr * self.weight_decay * p.data)


def clip_gradients(named_params, max_norm: float):
    total = 0.0
    for _, p in named_params:
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    norm = math.sqrt(total)
    if norm > max_norm > 0:
        scale = max_norm / norm
        for _, p in named_params:
            if p.grad is not None:
                p.grad *= scale
    return norm


@dataclass
class TrainConfig:
    epochs: int = 40
    batch_size: int = 4
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    folds: int = 4
    seed: int = 0
    max_steps: int | None = None
    target_train_dss: float | None = None   # stop early once reached
    eval_every: int = 1                     # epochs between metric evaluations
    grad_clip: float | None = None
    augment_shift: bool = False             # in-place shift augmentation
    network: NetworkConfig = field(default_factory=NetworkConfig)

    def validate(self):
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        self.network.validate()


def apply_train_keys(config: TrainConfig, items: dict) -> TrainConfig:
    casts = {
        "train.epochs": ("epochs", int),
        "train.batch_size": ("batch_size", int),
        "train.lr": ("lr", float),
        "train.beta1": ("beta1", float),
        "train.beta2": ("beta2", float),
        "train.eps": ("eps", float),
        "train.weight_decay": ("weight_decay", float),
        "train.folds": ("folds", int),
        "train.seed": ("seed", int),
        "train.max_steps": ("max_steps", int),
        "train.target_train_dss": ("target_train_dss", float),
        "train.eval_every": ("eval_every", int),
        "train.grad_clip": ("grad_clip", float),
        "train.augment_shift": ("augment_shift", lambda v: v in ("1", "true", "yes")),
    }
    for key, value in items.items():
        if key not in casts:
            raise KeyError(f"unknown train config key: {key}")
        attr, cast = casts[key]
        setattr(config, attr, cast(value))
    return config


@dataclass
class TrainResult:
    model: Model
    history: list
    steps: int
    best_val_dss: float | None
    final_path: str | None
    best_path: str | None


def _batch_tensors(cases, idxs, num_classes, augment_rng=None):
    vols = []
    labs = []
    for i in idxs:
        vol, lab = cases[i]
        if augment_rng is not None:
            vol, lab = D.random_axis_shift(vol, lab, augment_rng)
        vols.append(vol.data[None])
        labs.append(one_hot(lab.data, num_classes))
    x = Tensor(np.stack(vols).astype(np.float32))
    t = Tensor(np.stack(labs))
    return x, t


def _predict_labels(model: Model, volume_data: np.ndarray) -> np.ndarray:
    with T.no_grad():
        probs = model.forward(Tensor(volume_data[None, None].astype(np.float32)))
    return np.argmax(probs.data[0], axis=0).astype(np.uint8)


def dataset_mean_dss(model: Model, cases, num_classes: int) -> float:
    vals = [mean_foreground_dss(_predict_labels(model, vol.data), lab.data,
                                num_classes)
            for vol, lab in cases]
    return float(np.mean(vals))


def train(config: TrainConfig, cases, val_cases=None, out_dir=None,
          log_path=None) -> TrainResult:
    """Mini-batch dice-loss training over in-memory (Volume, LabelMap) pairs.

    ``val_cases`` defaults to the training set; the best checkpoint is the
    one with the highest validation mean foreground dice. Raises
    NumericError on a non-finite loss.
    """
    config.validate()
    if not cases:
        raise ValueError("no training cases")
    ncls = config.network.num_classes
    e = config.network.input_extent
    for vol, lab in cases:
        if vol.data.shape != (e, e, e):
            raise ValueError(
                f"case extent {vol.data.shape} does not match network "
                f"input extent {e}")
        if lab.data.max() >= ncls:
            raise ValueError(
                f"label {int(lab.data.max())} out of range for {ncls} classes")
    if val_cases is None:
        val_cases = cases

    rng = Rng(config.seed)
    model = build(config.network, rng.child("init"))
    shuffle_rng = rng.child("shuffle")
    augment_rng = rng.child("augment") if config.augment_shift else None
    opt = AdamW([(n, t) for n, t in model.store.named()],
                lr=config.lr, betas=(config.beta1, config.beta2),
                eps=config.eps, weight_decay=config.weight_decay)

    history = []
    log_lines = []

    def log(record):
        line = json.dumps(record, sort_keys=True)
        history.append(record)
        log_lines.append(line)

    best_val = None
    best_path = None
    final_path = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        best_path = os.path.join(out_dir, "best.ckpt")
        final_path = os.path.join(out_dir, "final.ckpt")

    step = 0
    stop = False
    n = len(cases)
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(n)
        epoch_losses = []
        for start in range(0, n, config.batch_size):
            idxs = order[start:start + config.batch_size]
            x, t = _batch_tensors(cases, idxs, ncls, augment_rng)
            probs = model.forward(x)
            loss = soft_dice_loss(probs, t)
            value = float(loss.data)
            if not np.isfinite(value):
                raise NumericError(f"non-finite loss {value} at step {step}")
            opt.zero_grad()
            loss.backward()
            if config.grad_clip:
                clip_gradients(opt.params, config.grad_clip)
            opt.step()
            step += 1
            epoch_losses.append(value)
            log({"step": step, "epoch": epoch, "loss": value})
            if config.max_steps is not None and step >= config.max_steps:
                stop = True
                break
        record = {"step": step, "epoch": epoch,
                  "epoch_loss": float(np.mean(epoch_losses))}
        if (epoch + 1) % config.eval_every == 0 or stop or epoch == config.epochs - 1:
            val_dss = dataset_mean_dss(model, val_cases, ncls)
            record["val_dss"] = val_dss
            if best_val is None or val_dss > best_val:
                best_val = val_dss
                if best_path:
                    save_checkpoint(model, best_path, step=step)
            if (config.target_train_dss is not None
                    and dataset_mean_dss(model, cases, ncls)
                    >= config.target_train_dss):
                stop = True
        log(record)
        if stop:
            break

    if final_path:
        save_checkpoint(model, final_path, step=step)
    if log_path:
        with open(log_path, "w", encoding="utf-8") as f:
            f.write("\n".join(log_lines) + "\n")
    return TrainResult(model, history, step, best_val, final_path, best_path)


@dataclass
class FoldResult:
    fold: int
    val_indices: list
    report: object
    best_path: str | None


def cross_validate(config: TrainConfig, cases, pairs=None, out_dir=None,
                   class_names=None):
    """Train one model per fold and evaluate it on the held-out cases.

    Returns (fold results, aggregate averages dict). The aggregate is the
    arithmetic mean over folds of each per-fold average metric.
    """
    config.validate()
    rng = Rng(config.seed)
    folds = D.kfold_split(len(cases), config.folds, rng.child("folds"), pairs)
    ncls = config.network.num_classes
    results = []
    for fi, (train_idx, val_idx) in enumerate(folds):
        fold_dir = os.path.join(out_dir, f"fold{fi}") if out_dir else None
        fold_config = TrainConfig(**{**config.__dict__})
        fold_config.seed = Rng(config.seed).child(f"fold{fi}").seed
        result = train(fold_config,
                       [cases[i] for i in train_idx],
                       val_cases=[cases[i] for i in val_idx],
                       out_dir=fold_dir)
        model = result.model
        if result.best_path:
            model, _ = load_checkpoint(result.best_path)
        reports = []
        for i in val_idx:
            vol, lab = cases[i]
            pred = _predict_labels(model, vol.data)
            reports.append(evaluate(pred, lab.data, ncls,
                                    class_names=class_names))
        merged = _merge_reports(reports)
        results.append(FoldResult(fi, list(val_idx), merged, result.best_path))
    aggregate = {}
    for key in ("dss", "jss", "hd95", "assd"):
        vals = [r.report.average(key) for r in results
                if r.report.average(key) is not None]
        aggregate[key] = float(np.mean(vals)) if vals else None
    return results, aggregate


def _merge_reports(reports):
    """Average per-structure metrics across several evaluated cases."""
    from .metrics import MetricsReport, StructureMetrics
    base = reports[0]
    merged = []
    for si, s in enumerate(base.structures):
        dss_vals = [r.structures[si].dss for r in reports]
        jss_vals = [r.structures[si].jss for r in reports]
        hd_vals = [r.structures[si].hd95 for r in reports
                   if r.structures[si].hd95 is not None]
        as_vals = [r.structures[si].assd for r in reports
                   if r.structures[si].assd is not None]
        merged.append(StructureMetrics(
            name=s.name,
            dss=float(np.mean(dss_vals)),
            jss=float(np.mean(jss_vals)),
            hd95=float(np.mean(hd_vals)) if hd_vals else None,
            assd=float(np.mean(as_vals)) if as_vals else None,
        ))
    return MetricsReport(merged)


def predict(checkpoint_path, volume_path, output_path) -> np.ndarray:
    """Segment one volume file with a trained checkpoint; writes uint8 labels."""
    model, _ = load_checkpoint(checkpoint_path)
    obj = D.read_volume(volume_path)
    if not isinstance(obj, D.Volume):
        raise ValueError(f"{volume_path} holds labels, expected an intensity volume")
    e = model.config.input_extent
    if obj.data.shape != (e, e, e):
        raise ValueError(
            f"volume extent {obj.data.shape} does not match checkpoint "
            f"input extent {e}")
    labels = _predict_labels(model, obj.data)
    D.write_volume(output_path, D.LabelMap(labels, obj.spacing))
    return labels
