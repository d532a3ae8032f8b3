"""Irregular multivariate time series: events, dense views, datasets.

A sample is a list of ``(t, c, v)`` observations. The model consumes the
dense view: the sorted unique timepoints with a ``T x C`` value matrix and
an ``observed`` mask. Only timepoints carrying at least one observation
exist, so no all-missing row ever reaches the model.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from mtm.errors import DataError, ParseError, SchemaError

log = logging.getLogger(__name__)


class Event(NamedTuple):
    t: float
    c: int
    v: float


@dataclass
class EventSeries:
    """One sample, stored canonically as parallel arrays sorted by (t, c)."""

    id: str
    n_channels: int
    label: int
    t: np.ndarray
    c: np.ndarray
    v: np.ndarray

    @classmethod
    def from_events(cls, id, n_channels, label, events):
        if events:
            t, c, v = (np.array(col) for col in zip(*events))
        else:
            t, c, v = np.zeros(0), np.zeros(0, dtype=np.int64), np.zeros(0)
        return canonicalize(cls(str(id), int(n_channels), int(label), t, c, v))

    @property
    def events(self):
        return [Event(float(t), int(c), float(v)) for t, c, v in zip(self.t, self.c, self.v)]

    def __len__(self):
        return len(self.t)

    def to_record(self):
        return {
            "id": self.id,
            "label": self.label,
            "n_channels": self.n_channels,
            "events": [{"t": float(t), "c": int(c), "v": float(v)}
                       for t, c, v in zip(self.t, self.c, self.v)],
        }


@dataclass
class DenseView:
    times: np.ndarray      # (T,)
    values: np.ndarray     # (T, C), 0 where unobserved
    observed: np.ndarray   # (T, C) bool

    @property
    def n_times(self):
        return len(self.times)


def canonicalize(s: EventSeries) -> EventSeries:
    """Sort by (t, c) and validate; duplicate (t, c) pairs are a DataError."""
    t = np.asarray(s.t, dtype=np.float64)
    c = np.asarray(s.c, dtype=np.int64)
    v = np.asarray(s.v, dtype=np.float64)
    if not (len(t) == len(c) == len(v)):
        raise SchemaError(f"sample {s.id}: ragged event arrays")
    if len(c) and (c.min() < 0 or c.max() >= s.n_channels):
        raise SchemaError(f"sample {s.id}: channel index out of range [0, {s.n_channels})")
    if not (np.all(np.isfinite(t)) and np.all(np.isfinite(v))):
        raise DataError(f"sample {s.id}: non-finite time or value")
    if len(t) and t.min() < 0:
        raise DataError(f"sample {s.id}: negative observation time")
    order = np.lexsort((c, t))
    t, c, v = t[order], c[order], v[order]
    dup = (np.diff(t) == 0) & (np.diff(c) == 0)
    if dup.any():
        k = int(np.argmax(dup))
        raise DataError(f"sample {s.id}: duplicate event at t={t[k]}, c={c[k]}")
    return EventSeries(s.id, s.n_channels, s.label, t, c, v)


def to_dense(s: EventSeries) -> DenseView:
    times, row = np.unique(s.t, return_inverse=True)
    values = np.zeros((len(times), s.n_channels))
    observed = np.zeros((len(times), s.n_channels), dtype=bool)
    values[row, s.c] = s.v
    observed[row, s.c] = True
    return DenseView(times, values, observed)


# file I/O ---------------------------------------------------------------------

def parse_record(record, line=None):
    if not isinstance(record, dict):
        raise ParseError("record is not a JSON object", line)
    for key in ("id", "label", "n_channels", "events"):
        if key not in record:
            raise SchemaError(f"line {line}: missing key '{key}'")
    n_channels, label = record["n_channels"], record["label"]
    if not isinstance(n_channels, int) or n_channels < 1:
        raise SchemaError(f"line {line}: n_channels must be a positive integer")
    if not isinstance(label, int) or label < 0:
        raise SchemaError(f"line {line}: label must be a non-negative integer")
    events = []
    for ev in record["events"]:
        try:
            t, c, v = ev["t"], ev["c"], ev["v"]
        except (KeyError, TypeError):
            raise SchemaError(f"line {line}: event must have keys t, c, v") from None
        if not isinstance(c, int) or not 0 <= c < n_channels:
            raise SchemaError(f"line {line}: channel {c!r} not in [0, {n_channels})")
        events.append((float(t), c, float(v)))
    try:
        return EventSeries.from_events(record["id"], n_channels, label, events)
    except DataError as err:
        raise type(err)(f"line {line}: {err}") from None


def load_ndjson(path):
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as err:
                raise ParseError(f"malformed JSON ({err.msg})", lineno) from None
            out.append(parse_record(record, lineno))
    return out


def dump_ndjson(dataset, path):
    with open(path, "w", encoding="utf-8") as fh:
        for s in dataset:
            fh.write(json.dumps(s.to_record(), separators=(",", ":")) + "\n")


# preprocessing ------------------------------------------------------------------

@dataclass
class Normalizer:
    """Per-channel z-score statistics fitted on a training split."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, dataset, n_channels=None, floor=1e-8):
        C = n_channels if n_channels is not None else dataset[0].n_channels
        c = np.concatenate([s.c for s in dataset]) if dataset else np.zeros(0, dtype=np.int64)
        v = np.concatenate([s.v for s in dataset]) if dataset else np.zeros(0)
        mean, std = np.zeros(C), np.ones(C)
        for j in range(C):
            vals = v[c == j]
            if len(vals):
                mean[j] = vals.mean()
                std[j] = max(float(vals.std()), floor)
        return cls(mean, std)

    def apply(self, dataset):
        return [EventSeries(s.id, s.n_channels, s.label, s.t, s.c,
                            (s.v - self.mean[s.c]) / self.std[s.c]) for s in dataset]

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


def standardize(train, *others):
    """Fit on ``train`` and apply to it and to every other split.

    Returns ``(normalizer, train', *others')``.
    """
    norm = Normalizer.fit(train)
    return (norm, norm.apply(train), *(norm.apply(d) for d in others))


def mask_channels(dataset, ratio, seed):
    """Remove all events of a random ``floor(ratio * C)`` channels per sample."""
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"mask ratio must be in [0, 1), got {ratio}")
    rng = np.random.default_rng(seed)
    out = []
    for s in dataset:
        k = int(math.floor(ratio * s.n_channels))
        if k == 0:
            out.append(s)
            continue
        drop = rng.choice(s.n_channels, size=k, replace=False)
        keep = ~np.isin(s.c, drop)
        if not keep.any():
            log.warning("sample %s lost all events under channel masking; dropped", s.id)
            continue
        out.append(EventSeries(s.id, s.n_channels, s.label, s.t[keep], s.c[keep], s.v[keep]))
    return out


# synthetic data -----------------------------------------------------------------

@dataclass
class SynthSpec:
    """Synthetic asynchronous task.

    Every sample carries a latent sinusoid ``sin(2 pi f t + phase)`` with a
    random phase; channel ``j`` observes ``a_j * g(t) + noise``. The label is
    1 when a strict majority of channels ``1..C-1`` share the sign of
    ``a_0``. The random phase hides the absolute sign, so only cross-channel
    comparison reveals the label. ``alpha`` moves each channel's observation
    times from a shared grid (0) to private random times (1).
    """

    n_samples: int = 1000
    n_channels: int = 4
    alpha: float = 1.0
    events_per_channel: int = 8
    span: float = 48.0
    cycles: float = 1.0
    noise: float = 0.1
    seed: int = 0

    def validate(self):
        if self.n_channels < 2:
            raise ValueError("synthetic task needs at least 2 channels")
        if self.events_per_channel < 2:
            raise ValueError("events_per_channel must be >= 2")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must be in [0, 1]")
        if self.n_samples < 1:
            raise ValueError("n_samples must be positive")


def sign_label(signs):
    """Majority vote of channels 1.. on agreeing with channel 0's sign."""
    signs = np.asarray(signs)
    agree = int(np.sum(signs[1:] == signs[0]))
    return int(agree > (len(signs) - 1) / 2)


@dataclass
class Latent:
    amplitude: np.ndarray
    phase: float = 0.0


def synth_generate(spec: SynthSpec, return_latent=False):
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    C, K = spec.n_channels, spec.events_per_channel
    omega = 2.0 * np.pi * spec.cycles / spec.span
    dataset, latents = [], []
    for n in range(spec.n_samples):
        # draw everything up front so the same seed yields the same
        # streams for every alpha
        phase = rng.uniform(0.0, 2.0 * np.pi)
        amp = rng.uniform(0.5, 1.5, size=C) * rng.choice([-1.0, 1.0], size=C)
        shared = rng.uniform(0.0, spec.span, size=K)
        private = rng.uniform(0.0, spec.span, size=(C, K))
        coin = rng.random((C, K))
        noise = rng.normal(size=(C, K))
        times = np.where(coin < spec.alpha, private, shared[None, :])
        t = times.reshape(-1)
        c = np.repeat(np.arange(C), K)
        v = (amp[:, None] * np.sin(omega * times + phase) + spec.noise * noise).reshape(-1)
        label = sign_label(np.sign(amp))
        dataset.append(canonicalize(EventSeries(f"s{n:06d}", C, label, t, c, v)))
        latents.append(Latent(amp, phase))
    return (dataset, latents) if return_latent else dataset


def cooccurrence_histogram(dataset):
    """Counts of timepoints by number of simultaneously observed channels."""
    C = max(s.n_channels for s in dataset)
    hist = np.zeros(C + 1, dtype=np.int64)
    for s in dataset:
        counts = to_dense(s).observed.sum(axis=1)
        hist += np.bincount(counts, minlength=C + 1)
    return hist


def cooccurring_timepoints(s):
    return int((to_dense(s).observed.sum(axis=1) >= 2).sum())


# splits ------------------------------------------------------------------------

@dataclass
class SplitSpec:
    subset_id: int = 1
    fractions: tuple = (0.8, 0.1, 0.1)
    seed: int = 0

    def validate(self):
        if not 1 <= self.subset_id <= 5:
            raise ValueError("subset_id must be in 1..5")
        if abs(sum(self.fractions) - 1.0) > 1e-9 or min(self.fractions) < 0:
            raise ValueError("split fractions must be non-negative and sum to 1")


def split(dataset, spec: SplitSpec = SplitSpec()):
    """Stratified, seeded train/val/test partition.

    Samples of each class are shuffled and laid out on [0, 1) by their
    within-class rank; sorting the pooled positions interleaves the classes
    proportionally, and consecutive cuts of that order form the splits.
    """
    spec.validate()
    n = len(dataset)
    if n == 0:
        raise ValueError("cannot split an empty dataset")
    rng = np.random.default_rng([spec.seed, spec.subset_id])
    labels = np.array([s.label for s in dataset])
    classes, counts = np.unique(labels, return_counts=True)
    if counts.min() < 3:
        log.warning("class with fewer than 3 samples; falling back to an unstratified split")
        order = rng.permutation(n)
    else:
        pos = np.empty(n)
        for cls in classes:
            idx = np.flatnonzero(labels == cls)
            idx = idx[rng.permutation(len(idx))]
            pos[idx] = (np.arange(len(idx)) + rng.random()) / len(idx)
        order = np.lexsort((rng.random(n), pos))
    n_val = int(round(spec.fractions[1] * n))
    n_test = int(round(spec.fractions[2] * n))
    n_train = n - n_val - n_test
    parts = np.split(order, [n_train, n_train + n_val])
    return tuple([dataset[i] for i in sorted(p)] for p in parts)
