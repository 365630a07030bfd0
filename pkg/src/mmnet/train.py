"""Training and evaluation: loss, Adam with polynomial learning-rate decay,
metric logging, and checkpointing."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import checkpoint as ckpt
from .config import TrainConfig, config_to_dict
from .data import downsample_gt, make_sample
from .errors import InputError
from .metrics import build_report, EvalReport
from .model import MMNet, ModelOutput


def loss_fn(out: ModelOutput, gt_lowres: np.ndarray, aggregate_probs=False):
    """Mean pixelwise binary cross-entropy against the low-res ground truth."""
    target = gt_lowres.astype(out.y.dtype)
    if aggregate_probs:
        # y is already a probability map; clamp away from {0, 1}
        eps = 1e-7
        y = out.y
        t = ad.as_tensor(target)
        one_m_t = ad.as_tensor(1.0 - target)
        pos = ad.mul(t, ad.log(ad.add(y, eps)))
        neg = ad.mul(one_m_t, ad.log(ad.add(ad.mul(y, -1.0), 1.0 + eps)))
        return ad.mul(ad.tmean(ad.add(pos, neg)), -1.0)
    return ad.bce_with_logits(out.y, target)


def poly_lr(base: float, step: int, total: int, power: float) -> float:
    """Polynomial decay: base * (1 - step/total) ** power."""
    frac = min(max(step / total, 0.0), 1.0)
    return base * (1.0 - frac) ** power


class Adam:
    def __init__(self, params: dict, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** self.t
        bias2 = 1.0 - b2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            mhat = self.m[k] / bias1
            vhat = self.v[k] / bias2
            p.data = p.data - lr * mhat / (np.sqrt(vhat) + self.eps)


def _split_samples(cfg: TrainConfig, split: str, count: int):
    return [make_sample(cfg.seed, split, i, cfg.model.image_size,
                        cfg.model.max_len, cfg.max_distractors)
            for i in range(count)]


def evaluate_model(model: MMNet, samples, iou_agg="mean") -> EvalReport:
    """IoU / Precision@X of the model over ``samples``.

    The low-res prediction is thresholded at probability 0.5 and
    nearest-neighbor upsampled to image resolution before pixel counting.
    """
    if not samples:
        raise InputError("cannot evaluate an empty split")
    records = []
    for s in samples:
        out = model.forward(s.image, s.tokens)
        prob = model.prediction_prob(out)
        pred_low = prob >= 0.5
        factor = s.gt_mask.shape[0] // pred_low.shape[0]
        pred = np.repeat(np.repeat(pred_low, factor, 0), factor, 1)
        inter = int(np.logical_and(pred, s.gt_mask).sum())
        union = int(np.logical_or(pred, s.gt_mask).sum())
        records.append({
            "id": f"{s.split}-{s.index:06d}",
            "iou": 1.0 if union == 0 else inter / union,
            "intersection": inter,
            "union": union,
        })
    return build_report(records, iou_agg)


def train(cfg: TrainConfig, out_dir, train_samples=None, val_samples=None,
          log_cb=None):
    """Run the training loop; returns (model, metrics log as list of dicts).

    Writes ``metrics.jsonl`` (one object per epoch) and ``checkpoint.bin``
    into ``out_dir``.  ``train_samples`` / ``val_samples`` default to the
    synthetic splits implied by the config.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if train_samples is None:
        train_samples = _split_samples(cfg, "train", cfg.train_size)
    if val_samples is None:
        val_samples = _split_samples(cfg, "val", cfg.val_size)

    model = MMNet(cfg.model, seed=cfg.seed)
    opt = Adam(model.params)
    steps_per_epoch = cfg.steps_per_epoch or max(
        1, -(-len(train_samples) // cfg.batch_size))
    total_steps = steps_per_epoch * cfg.epochs
    order_rng = np.random.default_rng(
        np.random.SeedSequence([cfg.seed, 12345]))

    log = []
    step = 0
    lr = cfg.lr
    for epoch in range(cfg.epochs):
        perm = order_rng.permutation(len(train_samples))
        epoch_losses = []
        for b in range(steps_per_epoch):
            idx = [perm[(b * cfg.batch_size + j) % len(train_samples)]
                   for j in range(cfg.batch_size)]
            lr = poly_lr(cfg.lr, step, total_steps, cfg.poly_power)
            model.store.zero_grads()
            batch_losses = []
            for i in idx:
                s = train_samples[i]
                out = model.forward(s.image, s.tokens)
                gt_low = downsample_gt(s.gt_mask)
                batch_losses.append(
                    loss_fn(out, gt_low, cfg.model.aggregate_probs))
            loss = ad.tmean(ad.concat(
                [ad.reshape(l, (1,)) for l in batch_losses], axis=0))
            if not np.isfinite(loss.data):
                bad = ad.find_nonfinite(loss) or "loss"
                raise RuntimeError(
                    f"non-finite loss at step {step}; first non-finite "
                    f"tensor: {bad}")
            loss.backward()
            opt.step(lr)
            epoch_losses.append(float(loss.data))
            step += 1
        report = evaluate_model(model, val_samples, cfg.iou_agg)
        entry = {
            "epoch": epoch,
            "loss": float(np.mean(epoch_losses)),
            "lr": lr,
            **report.to_dict(),
        }
        log.append(entry)
        if log_cb:
            log_cb(entry)

    with open(out_dir / "metrics.jsonl", "w") as f:
        for entry in log:
            f.write(json.dumps(entry, sort_keys=True) + "\n")
    ckpt.save(out_dir / "checkpoint.bin", config_to_dict(cfg),
              model.store.state())
    return model, log
