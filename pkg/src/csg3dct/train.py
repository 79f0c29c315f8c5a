"""Adam training loop, evaluation, inference and the 2D-pretrain-then-inflate warm start."""
from __future__ import annotations

import json
import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, model_config_from_meta, save_checkpoint
from .config import RunConfig
from .coupling import dual_head_loss
from .data import ClipSample, batch_clips, frame_dataset, load_clip, split_indices
from .inflation import InflationReport, inflate_checkpoint, make_plan, to_2d_checkpoint
from .metrics import Metrics, evaluate_metrics
from .model import CSG3DCT
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)

LOG_FIELDS = ("epoch", "train_loss", "train_accuracy", "val_loss", "val_accuracy", "val_precision",
              "val_recall", "val_f1")


class TrainingDiverged(FloatingPointError):
    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


class Adam:
    """Adam with L2 weight decay folded into the gradient."""

    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            if self.lr:
                p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


@dataclass
class TrainResult:
    model: CSG3DCT
    log: list = field(default_factory=list)
    best_checkpoint: Optional[Checkpoint] = None
    best_epoch: int = 0
    splits: tuple = ()
    inflation_report: Optional[InflationReport] = None

    def best_model(self) -> CSG3DCT:
        if self.best_checkpoint is None:
            return self.model
        model = CSG3DCT(self.model.cfg)
        load_checkpoint(self.best_checkpoint, model)
        return model


def predict_proba(model: CSG3DCT, clips: Sequence[ClipSample], batch_size: int = 8) -> np.ndarray:
    model.eval()
    out = []
    with no_grad():
        for i in range(0, len(clips), batch_size):
            x, _ = batch_clips(clips[i:i + batch_size])
            out.append(model(Tensor(x, dtype=model.encoder.stem.conv.weight.dtype)).probs)
    return np.concatenate(out, axis=0)


def evaluate(model: CSG3DCT, clips: Sequence[ClipSample], batch_size: int = 8) -> tuple:
    """(Metrics, mean summed dual-head loss) in eval mode."""
    model.eval()
    preds, losses = [], []
    with no_grad():
        for i in range(0, len(clips), batch_size):
            x, y = batch_clips(clips[i:i + batch_size])
            loss, pred = model.loss(Tensor(x), y)
            preds.append(pred.labels)
            losses.append(loss.item() * len(y))
    labels = np.array([c.label for c in clips])
    return evaluate_metrics(np.concatenate(preds), labels), float(np.sum(losses) / len(clips))


def _diagnostics(model, epoch: int, step: int, loss: float) -> dict:
    norms = OrderedDict()
    for name, p in model.named_parameters():
        norms[name] = {"norm": float(np.linalg.norm(p.data)), "finite": bool(np.isfinite(p.data).all())}
    return OrderedDict(epoch=epoch, step=step, loss=loss, parameters=norms)


def fit(model: CSG3DCT, train_clips: Sequence[ClipSample], val_clips: Sequence[ClipSample], *, lr: float,
        weight_decay: float, epochs: int, batch_size: int, seed: int, log_path: Union[str, Path, None] = None,
        diagnostics_dir: Union[str, Path, None] = None) -> TrainResult:
    """Train ``model`` in place; tracks the best validation accuracy (ties: lower val loss)."""
    rng = np.random.default_rng(seed)
    opt = Adam(model.parameters(), lr=lr, weight_decay=weight_decay)
    result = TrainResult(model)
    best_key = None
    log_file = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for epoch in range(1, epochs + 1):
            model.train()
            order = rng.permutation(len(train_clips))
            losses, correct = [], 0
            for step, i in enumerate(range(0, len(order), batch_size)):
                batch = [train_clips[j] for j in order[i:i + batch_size]]
                x, y = batch_clips(batch)
                loss, pred = model.loss(Tensor(x), y)
                value = loss.item()
                if not np.isfinite(value):
                    diag = _diagnostics(model, epoch, step, value)
                    if diagnostics_dir is not None:
                        Path(diagnostics_dir).mkdir(parents=True, exist_ok=True)
                        (Path(diagnostics_dir) / "diagnostics.json").write_text(json.dumps(diag, indent=1))
                    raise TrainingDiverged(f"non-finite loss {value} at epoch {epoch}, step {step}", diag)
                opt.zero_grad()
                loss.backward()
                opt.step()
                losses.append(value * len(y))
                correct += int((pred.labels == y).sum())
            record = OrderedDict(epoch=epoch, train_loss=float(np.sum(losses) / len(train_clips)),
                                 train_accuracy=correct / len(train_clips))
            if val_clips:
                metrics, val_loss = evaluate(model, val_clips)
                record.update(val_loss=val_loss, val_accuracy=metrics.accuracy, val_precision=metrics.precision,
                              val_recall=metrics.recall, val_f1=metrics.f1)
                key = (metrics.accuracy, -val_loss)
            else:
                record.update((k, None) for k in LOG_FIELDS[3:])
                key = (epoch, 0.0)
            result.log.append(record)
            if log_file:
                log_file.write(json.dumps(record) + "\n")
                log_file.flush()
            log.info("epoch %d  %s", epoch, "  ".join(f"{k}={v:.4f}" for k, v in record.items()
                                                        if isinstance(v, float)))
            if best_key is None or key > best_key:
                best_key = key
                result.best_epoch = epoch
                result.best_checkpoint = save_checkpoint(model, {"epoch": epoch})
    finally:
        if log_file:
            log_file.close()
    return result


def pretrain_2d(run: RunConfig, train_clips: Sequence[ClipSample]) -> CSG3DCT:
    """Train the per-frame (T=1, all temporal kernels 1) model on single frames."""
    model2d = CSG3DCT(run.model.as_2d(), seed=run.seed + 7919)
    frames = frame_dataset(train_clips, seed=run.seed)
    fit(model2d, frames, [], lr=run.pretrain_lr, weight_decay=run.weight_decay, epochs=run.pretrain_epochs,
        batch_size=max(run.batch_size * 4, 1), seed=run.seed + 1)
    return model2d


def inflate_into(model3d: CSG3DCT, model2d: CSG3DCT, seed: int = 0) -> InflationReport:
    ckpt2d = to_2d_checkpoint(save_checkpoint(model2d), model2d)
    ckpt3d, report = inflate_checkpoint(ckpt2d, make_plan(model3d, seed=seed))
    load_checkpoint(ckpt3d, model3d)
    return report


def train(run: RunConfig, data: Sequence[ClipSample], log_path=None, diagnostics_dir=None) -> TrainResult:
    """Split ``data`` by clip, optionally warm-start from an inflated 2D model, then fit."""
    train_idx, val_idx, test_idx = split_indices(len(data), run.seed, run.train_fraction, run.val_fraction)
    train_clips = [data[i] for i in train_idx]
    val_clips = [data[i] for i in val_idx]
    for c in data[:1]:
        if c.num_frames != run.model.frames:
            raise ValueError(f"clips have {c.num_frames} frames, config expects {run.model.frames}")
    model = CSG3DCT(run.model, seed=run.seed)
    report = None
    if run.init == "inflated":
        report = inflate_into(model, pretrain_2d(run, train_clips), seed=run.seed)
    result = fit(model, train_clips, val_clips, lr=run.lr, weight_decay=run.weight_decay, epochs=run.epochs,
                 batch_size=run.batch_size, seed=run.seed, log_path=log_path, diagnostics_dir=diagnostics_dir)
    result.splits = (train_idx, val_idx, test_idx)
    result.inflation_report = report
    return result


def model_from_checkpoint(ckpt: Union[Checkpoint, str, Path]) -> CSG3DCT:
    if not isinstance(ckpt, Checkpoint):
        ckpt = Checkpoint.load(ckpt)
    model = CSG3DCT(model_config_from_meta(ckpt.meta))
    load_checkpoint(ckpt, model)
    return model


def infer(ckpt: Union[Checkpoint, str, Path, CSG3DCT], clip: Union[ClipSample, str, Path]) -> tuple:
    """(label, probabilities rounded to 4 decimals) for one clip."""
    model = ckpt if isinstance(ckpt, CSG3DCT) else model_from_checkpoint(ckpt)
    if not isinstance(clip, ClipSample):
        clip = load_clip(clip)
    cfg = model.cfg
    T, C, H, W = clip.frames.shape
    if C != cfg.in_channels or H != cfg.image_size or W != cfg.image_size:
        raise ValueError(f"clip of shape {clip.frames.shape} does not fit the model "
                         f"({cfg.in_channels} channel(s), {cfg.image_size}x{cfg.image_size})")
    if T > cfg.max_frames:
        raise ValueError(f"clip has {T} frames; the model supports at most {cfg.max_frames}")
    probs = predict_proba(model, [clip])[0]
    return int(np.argmax(probs)), [round(float(p), 4) for p in probs]


def held_out_metrics(result: TrainResult, data: Sequence[ClipSample]) -> Metrics:
    """Metrics of the best-validation model on the held-out test split."""
    test_clips = [data[i] for i in result.splits[2]]
    metrics, _ = evaluate(result.best_model(), test_clips)
    return metrics
