"""Optimiser, training loop, evaluation and checkpoint files."""

from __future__ import annotations

import base64
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from mtm import diff as D
from mtm.data import Normalizer, to_dense
from mtm.errors import ConfigError, DataError, NumericError
from mtm.metrics import MetricsReport, classification_report
from mtm.model import (MtmParams, ModelConfig, class_weights, collate, forward, init_params,
                       loss as model_loss, predict_proba)

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "mtm-checkpoint/1"


class Adam:
    def __init__(self, params: MtmParams, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# checkpoint -------------------------------------------------------------------------

@dataclass
class Checkpoint:
    config: ModelConfig
    params: MtmParams
    normalizer: Normalizer | None = None
    epoch: int = 0
    rng_state: dict = field(default_factory=dict)

    def to_dict(self):
        flat = self.params.flatten().astype("<f8")
        return {
            "format": CHECKPOINT_FORMAT,
            "config": self.config.to_dict(),
            "params": {
                "names": list(self.params.keys()),
                "shapes": [list(p.shape) for p in self.params.values()],
                "blob": base64.b64encode(flat.tobytes()).decode("ascii"),
            },
            "normalizer": self.normalizer.to_dict() if self.normalizer is not None else None,
            "epoch": int(self.epoch),
            "rng_state": self.rng_state,
        }

    def dumps(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.dumps())

    @classmethod
    def from_dict(cls, d):
        if d.get("format") != CHECKPOINT_FORMAT:
            raise DataError(f"not a checkpoint (format={d.get('format')!r})")
        config = ModelConfig.from_dict(d["config"])
        params = init_params(config)
        names = d["params"]["names"]
        if names != list(params.keys()):
            raise DataError("checkpoint parameter layout does not match its config")
        shapes = [tuple(s) for s in d["params"]["shapes"]]
        if shapes != [p.shape for p in params.values()]:
            raise DataError("checkpoint parameter shapes do not match its config")
        flat = np.frombuffer(base64.b64decode(d["params"]["blob"]), dtype="<f8")
        params.load_flat(flat)
        norm = Normalizer.from_dict(d["normalizer"]) if d.get("normalizer") else None
        return cls(config, params, norm, int(d.get("epoch", 0)), d.get("rng_state", {}))

    @classmethod
    def loads(cls, s):
        return cls.from_dict(json.loads(s))

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            try:
                return cls.loads(fh.read())
            except json.JSONDecodeError as e:
                raise DataError(f"{path}: invalid JSON ({e})") from None


# loops ------------------------------------------------------------------------------

def _dense(dataset):
    return [to_dense(s) for s in dataset], np.array([s.label for s in dataset], dtype=np.int64)


def _check_channels(dataset, config):
    for s in dataset:
        if s.n_channels != config.n_channels:
            raise ConfigError(f"sample {s.id!r} has {s.n_channels} channels, "
                              f"model expects {config.n_channels}")


def predict(views, params, config, batch_size=64):
    """Class probabilities (N, M) for a list of dense views, eval mode."""
    out = []
    for i in range(0, len(views), batch_size):
        out.append(predict_proba(collate(views[i:i + batch_size]), params, config))
    return np.concatenate(out) if out else np.zeros((0, config.n_classes))


def _report(views, labels, params, config):
    return classification_report(predict(views, params, config), labels,
                                 config_hash=config.digest(), seed=config.seed)


def train(train_set, val_set, config: ModelConfig, normalizer=None, on_epoch=None):
    """Fit on ``train_set``, keep the epoch with the best validation score.

    Returns ``(checkpoint, history)`` where history holds one dict per epoch.
    """
    config.validate()
    _check_channels(train_set, config)
    _check_channels(val_set, config)
    rng = np.random.default_rng(config.seed)
    params = init_params(config)
    ckpt = Checkpoint(config, params, normalizer, 0, {})
    history = []
    if config.epochs == 0:
        ckpt.rng_state = rng.bit_generator.state
        return ckpt, history

    tr_views, tr_labels = _dense(train_set)
    va_views, va_labels = _dense(val_set)
    weights = class_weights(tr_labels, config.n_classes) if config.class_weighting else None
    opt = Adam(params, lr=config.lr)
    best, best_score = None, -math.inf

    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(tr_views))
        total, seen = 0.0, 0
        for i in range(0, len(order), config.batch_size):
            idx = order[i:i + config.batch_size]
            batch = collate([tr_views[j] for j in idx], tr_labels[idx])
            params.zero_grad()
            with D.Tape() as tape:
                logits = forward(batch, params, config, train=True, rng=rng)
                lv = model_loss(logits, batch.labels, config, weights)
            value = float(lv.data)
            if not math.isfinite(value):
                raise NumericError(f"non-finite training loss at epoch {epoch}, batch {i // config.batch_size}")
            tape.backward(lv)
            opt.step()
            total += value * len(idx)
            seen += len(idx)
        rep = _report(va_views, va_labels, params, config)
        score = rep.selection_score()
        entry = {"epoch": epoch, "train_loss": total / max(seen, 1), "val": rep.to_dict()}
        history.append(entry)
        log.info("epoch %d loss %.4f val acc %.4f", epoch, entry["train_loss"], rep.accuracy)
        if on_epoch is not None:
            on_epoch(entry)
        if score is not None and score > best_score:
            best_score, best = score, (epoch, params.flatten().copy())

    if best is not None:
        params.load_flat(best[1])
        ckpt.epoch = best[0]
    else:
        ckpt.epoch = config.epochs
    ckpt.rng_state = rng.bit_generator.state
    return ckpt, history


def evaluate(checkpoint: Checkpoint, dataset) -> MetricsReport:
    """Eval-mode metrics of ``checkpoint`` on an already standardized dataset."""
    _check_channels(dataset, checkpoint.config)
    views, labels = _dense(dataset)
    if not views:
        raise DataError("cannot evaluate an empty dataset")
    return _report(views, labels, checkpoint.params, checkpoint.config)
