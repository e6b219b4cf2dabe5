"""Seeded, deterministic training and evaluation of the two-stream model."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .data.coco import CATEGORIES, CocoDataset, dataset_from_samples
from .data.scenes import SceneSample
from .errors import ContractError, TrainingError
from .evaluation import ApReport, Detection, evaluate
from .losses import LossWeights, set_loss
from .model import Model, ModelConfig, decode_predictions, save_checkpoint, targets_for
from .tensor import Tape, Tensor

TRACE_COLUMNS = ("epoch", "loss", "cls", "l1", "giou", "dice", "bce", "aux", "lr", "ap_seg50", "ap_det50")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    lr: float = 1e-3
    batch_size: int = 4
    decay_at: float = 2.0 / 3.0  # fraction of epochs after which lr is multiplied by decay_factor
    decay_factor: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float = 0.0  # global-norm clip; 0 disables
    seed: int = 0
    eval_every: int = 1  # 0 = evaluate only after the last epoch
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ContractError("epochs must be >= 0 and batch_size >= 1")
        if self.lr < 0:
            raise ContractError(f"learning rate must be nonnegative, got {self.lr}")

    def lr_at(self, epoch: int) -> float:
        """Step schedule; ``epoch`` is 0-based."""
        return self.lr * (self.decay_factor if epoch >= int(round(self.decay_at * self.epochs)) else 1.0)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["weights"] = dataclasses.asdict(self.weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "weights" in d and isinstance(d["weights"], dict):
            d["weights"] = LossWeights(**d["weights"])
        return cls(**d)


class Adam:
    """Adaptive-moment optimiser over a flat ``name -> Tensor`` dict."""

    def __init__(self, params: dict[str, Tensor], beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros(v.shape) for k, v in params.items()}
        self.v = {k: np.zeros(v.shape) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, Tensor], grads: dict[str, np.ndarray], lr: float) -> dict[str, Tensor]:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        new = {}
        for k, p in params.items():
            g = grads[k]
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            if lr == 0.0:
                new[k] = p
                continue
            upd = lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            new[k] = Tensor(p.data - upd, requires_grad=True, tag=p.tag)
        return new


@dataclass
class TrainResult:
    model: Model
    trace: list[dict]
    report: ApReport | None
    seconds: float

    def trace_csv(self) -> str:
        return trace_to_csv(self.trace)


def trace_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_COLUMNS)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in TRACE_COLUMNS])
    return buf.getvalue()


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def batch_loss(model: Model, params: dict, batch: list[SceneSample], weights: LossWeights):
    """Mean per-image set loss over ``batch``; returns ``(loss tensor, component means)``."""
    out = model(batch, params)
    total = None
    comps: dict[str, float] = {}
    for b, sample in enumerate(batch):
        res = set_loss(out.prediction.image(b), targets_for(sample, model.cfg), weights=weights)
        total = res.total if total is None else total + res.total
        for k, v in res.components.items():
            comps[k] = comps.get(k, 0.0) + v / len(batch)
    return total * (1.0 / len(batch)), comps


def predict(model: Model, samples: list[SceneSample], batch_size: int = 16):
    dets = []
    for i in range(0, len(samples), batch_size):
        chunk = samples[i : i + batch_size]
        dets.extend(decode_predictions(model(chunk).prediction, model.cfg))
    return dets


def detections_for(model: Model, samples: list[SceneSample], image_ids: list[int]) -> list[Detection]:
    out = []
    for iid, d in zip(image_ids, predict(model, samples)):
        for q in range(len(d.scores)):
            out.append(Detection(iid, int(d.categories[q]), float(d.scores[q]), d.boxes[q].tolist(), d.masks[q]))
    return out


def evaluate_model(model: Model, samples: list[SceneSample], gt: CocoDataset | None = None) -> ApReport:
    gt = gt or dataset_from_samples(samples, CATEGORIES)
    ids = [img["id"] for img in gt.images]
    kept = [s for s in samples if any(np.asarray(m).any() for m in s.instance_masks)]
    return evaluate(gt, detections_for(model, kept, ids))


def train(cfg: ModelConfig, train_samples: list[SceneSample], val_samples: list[SceneSample] | None = None,
          tcfg: TrainConfig = TrainConfig(), out_dir=None, log: Callable[[str], None] | None = None) -> TrainResult:
    """Train with adaptive moments and a one-step lr decay; evaluate on ``val_samples``."""
    if not train_samples:
        raise ContractError("training set is empty")
    log = log or (lambda msg: print(msg, file=sys.stderr))
    start = time.perf_counter()
    model = Model(cfg)
    params = model.params
    names = sorted(params)
    opt = Adam(params, tcfg.beta1, tcfg.beta2, tcfg.eps)
    rng = np.random.default_rng(tcfg.seed)
    val_gt = dataset_from_samples(val_samples, CATEGORIES) if val_samples else None
    trace: list[dict] = []
    report = None
    n = len(train_samples)
    for epoch in range(tcfg.epochs):
        lr = tcfg.lr_at(epoch)
        order = rng.permutation(n)
        sums: dict[str, float] = {}
        steps = 0
        for bi, s in enumerate(range(0, n, tcfg.batch_size)):
            batch = [train_samples[i] for i in order[s : s + tcfg.batch_size]]
            with Tape() as tape:
                loss, comps = batch_loss(model, params, batch, tcfg.weights)
            value = float(loss.item())
            if not np.isfinite(value):
                diag = {"epoch": epoch + 1, "batch": bi, "loss": value, "components": comps}
                raise TrainingError(f"non-finite loss at epoch {epoch + 1}, batch {bi}: {comps}", diag)
            grads = dict(zip(names, tape.gradient(loss, [params[k] for k in names])))
            if tcfg.grad_clip > 0:
                norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
                if norm > tcfg.grad_clip:
                    grads = {k: g * (tcfg.grad_clip / norm) for k, g in grads.items()}
            params = opt.step(params, grads, lr)
            model.params = params
            sums["loss"] = sums.get("loss", 0.0) + value
            for k, v in comps.items():
                sums[k] = sums.get(k, 0.0) + v
            steps += 1
        row = {"epoch": epoch + 1, "lr": lr}
        row.update({k: v / steps for k, v in sums.items()})
        last = epoch + 1 == tcfg.epochs
        if val_gt is not None and ((tcfg.eval_every and (epoch + 1) % tcfg.eval_every == 0) or last):
            report = evaluate_model(model, val_samples, val_gt)
            row["ap_seg50"] = report.segm["ap50"]
            row["ap_det50"] = report.bbox["ap50"]
        trace.append(row)
        ap = "" if "ap_seg50" not in row else f" AP50 seg {row['ap_seg50']:.3f} det {row['ap_det50']:.3f}"
        log(f"epoch {epoch + 1}/{tcfg.epochs} loss {row['loss']:.4f}{ap} ({time.perf_counter() - start:.0f}s)")
    result = TrainResult(model, trace, report, time.perf_counter() - start)
    if out_dir is not None:
        write_run(out_dir, result, tcfg)
    return result


def write_run(out_dir, result: TrainResult, tcfg: TrainConfig) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "checkpoint", result.model.cfg, result.model.params)
    (out / "trace.csv").write_text(result.trace_csv())
    (out / "train_config.json").write_text(json.dumps(tcfg.to_dict(), sort_keys=True, indent=1) + "\n")
    if result.report is not None:
        (out / "report.json").write_text(result.report.to_json())


__all__ = [
    "Adam",
    "TRACE_COLUMNS",
    "TrainConfig",
    "TrainResult",
    "batch_loss",
    "detections_for",
    "evaluate_model",
    "predict",
    "train",
    "trace_to_csv",
    "write_run",
]
