"""Full network: embedding, Token Mixing stack with pooling blocks, CLS head."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass

import numpy as np

from mtm import diff as D
from mtm import layers as L
from mtm.data import DenseView, to_dense
from mtm.errors import ConfigError


@dataclass
class ModelConfig:
    n_channels: int = 2
    n_classes: int = 2
    d_model: int = 16
    n_blocks: int = 2
    rate: float | list = 3
    heads: int = 1
    dropout: float = 0.1
    lr: float = 3e-3
    epochs: int = 30
    batch_size: int = 32
    seed: int = 0
    pooling: bool = True
    cls: bool = True
    mixing: bool = True
    channel_attention: bool = True
    channel_attention_as_mlp: bool = False
    pooling_kind: str = "concat"
    class_weighting: bool = False
    prenorm: bool = True
    ffn: bool = True
    channel_embed_std: float = 1.0

    def validate(self):
        if self.d_model < 2 or self.d_model % 2:
            raise ConfigError("d_model must be a positive even number")
        if self.n_blocks < 0:
            raise ConfigError("n_blocks must be >= 0")
        if self.heads < 1 or self.d_model % self.heads:
            raise ConfigError("heads must divide d_model")
        if any(r < 1 for r in self.rates):
            raise ConfigError("down-sampling rate must be >= 1")
        if self.pooling_kind not in ("concat", "max", "avg"):
            raise ConfigError(f"unknown pooling kind {self.pooling_kind!r}")
        if self.n_channels < 1 or self.n_classes < 2:
            raise ConfigError("need n_channels >= 1 and n_classes >= 2")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")
        if self.channel_embed_std <= 0:
            raise ConfigError("channel_embed_std must be positive")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        return self

    @property
    def rates(self):
        if isinstance(self.rate, (list, tuple)):
            if len(self.rate) != self.n_blocks:
                raise ConfigError("per-block rate list must have n_blocks entries")
            return [float(r) for r in self.rate]
        return [float(self.rate)] * self.n_blocks

    @property
    def flags(self):
        return L.MixingFlags(
            use_mixing=self.mixing,
            use_channel_attention=self.channel_attention,
            channel_attention_as_mlp=self.channel_attention_as_mlp,
            use_cls=self.cls,
            use_ffn=self.ffn,
        )

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d).validate()

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


class MtmParams(dict):
    """Ordered name -> DiffArray mapping of every trainable tensor."""

    def sub(self, prefix):
        n = len(prefix) + 1
        return {k[n:]: v for k, v in self.items() if k.startswith(prefix + ".")}

    def flatten(self):
        return np.concatenate([p.data.reshape(-1) for p in self.values()]) if self else np.zeros(0)

    def load_flat(self, vec):
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != self.size:
            raise ValueError(f"expected {self.size} parameters, got {vec.size}")
        pos = 0
        for p in self.values():
            n = p.data.size
            p.data[...] = vec[pos:pos + n].reshape(p.shape)
            pos += n

    @property
    def size(self):
        return sum(p.data.size for p in self.values())

    def copy(self):
        return MtmParams({k: D.parameter(v.data.copy()) for k, v in self.items()})

    def zero_grad(self):
        for p in self.values():
            p.grad = None


def _uniform(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _attention_params(out, prefix, dim, rng):
    out[f"{prefix}.ln_g"] = np.ones(dim)
    out[f"{prefix}.ln_b"] = np.zeros(dim)
    for w in ("wq", "wk", "wv"):
        out[f"{prefix}.{w}"] = _uniform(rng, dim, (dim, dim))


def _mlp_params(out, prefix, dim, hidden, rng):
    out[f"{prefix}.ln_g"] = np.ones(dim)
    out[f"{prefix}.ln_b"] = np.zeros(dim)
    out[f"{prefix}.w1"] = _uniform(rng, dim, (dim, hidden))
    out[f"{prefix}.b1"] = np.zeros(hidden)
    out[f"{prefix}.w2"] = _uniform(rng, hidden, (hidden, dim))
    out[f"{prefix}.b2"] = np.zeros(dim)


def init_params(config: ModelConfig, seed=None):
    """Initialise all parameter groups for ``config``.

    Attention and linear weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)),
    [CLS] embeddings ~ N(0, 0.02^2), channel embeddings ~ N(0, channel_embed_std^2),
    norms at identity. The channel embedding scales the observed value against the
    unit-norm-per-pair positional code, so a tiny std hides the values at init.
    """
    config.validate()
    rng = np.random.default_rng(config.seed if seed is None else seed)
    dim, C = config.d_model, config.n_channels
    raw = {
        "embed.channel": rng.normal(0.0, config.channel_embed_std, size=(C, dim)),
        "embed.cls": rng.normal(0.0, 0.02, size=(C, dim)),
    }
    for n in range(config.n_blocks + 1):
        if n > 0 and config.pooling:
            width = 2 * dim if config.pooling_kind == "concat" else dim
            raw[f"pool{n}.w"] = _uniform(rng, width, (width, dim))
            raw[f"pool{n}.b"] = np.zeros(dim)
        _attention_params(raw, f"tm{n}.temporal", dim, rng)
        if config.mixing:
            _attention_params(raw, f"tm{n}.mixing", dim, rng)
        if config.channel_attention_as_mlp:
            _mlp_params(raw, f"tm{n}.channel_mlp", dim, dim, rng)
        elif config.channel_attention:
            _attention_params(raw, f"tm{n}.channel", dim, rng)
        if config.ffn and config.prenorm:
            _mlp_params(raw, f"tm{n}.ffn", dim, 4 * dim, rng)
    raw["head.w1"] = _uniform(rng, dim, (dim, dim))
    raw["head.b1"] = np.zeros(dim)
    raw["head.w2"] = _uniform(rng, dim, (dim, config.n_classes))
    raw["head.b2"] = np.zeros(config.n_classes)
    return MtmParams({k: D.parameter(v) for k, v in raw.items()})


# batching ---------------------------------------------------------------------------

@dataclass
class Batch:
    values: np.ndarray     # (B, T, C)
    observed: np.ndarray   # (B, T, C)
    times: np.ndarray      # (B, T)
    n_times: np.ndarray    # (B,)
    labels: np.ndarray     # (B,)

    def __len__(self):
        return len(self.n_times)


def collate(views, labels=None):
    """Pad dense views to a common length; padding rows are unobserved."""
    views = [to_dense(v) if not isinstance(v, DenseView) else v for v in views]
    B = len(views)
    C = views[0].observed.shape[1]
    n = np.array([v.n_times for v in views], dtype=np.int64)
    if n.min() < 1:
        raise ValueError("samples with no timepoints cannot be batched")
    T = int(n.max())
    values = np.zeros((B, T, C))
    observed = np.zeros((B, T, C), dtype=bool)
    times = np.zeros((B, T))
    for b, v in enumerate(views):
        k = v.n_times
        values[b, :k] = v.values
        observed[b, :k] = v.observed
        times[b, :k] = v.times
        times[b, k:] = v.times[-1]
    labels = np.zeros(B, dtype=np.int64) if labels is None else np.asarray(labels, dtype=np.int64)
    return Batch(values, observed, times, n, labels)


def batch_from_series(series):
    return collate([to_dense(s) for s in series], [s.label for s in series])


# forward ----------------------------------------------------------------------------

def encode(batch: Batch, params: MtmParams, config: ModelConfig, train=False, rng=None, record=None):
    """Run embedding and all Token Mixing layers; returns the final grid."""
    flags = config.flags

    def settings(key):
        rec = None
        if record is not None:
            rec = record.setdefault(key, {})
        return L.LayerSettings(heads=config.heads, dropout=config.dropout, prenorm=config.prenorm,
                               train=train, rng=rng, record=rec)

    g = L.embed_input(batch.values, batch.observed, batch.times, batch.n_times,
                      params["embed.channel"], params["embed.cls"], use_cls=config.cls)
    g = L.token_mixing_layer(g, params.sub("tm0"), flags, settings("layer0"), layer=0)
    unit = L.default_unit(batch.times, batch.n_times)
    for n, rate in enumerate(config.rates, start=1):
        if config.pooling:
            g = L.masked_concat_pool(g, rate, unit, params.sub(f"pool{n}"),
                                     kind=config.pooling_kind)
            unit = unit * rate
        g = L.token_mixing_layer(g, params.sub(f"tm{n}"), flags, settings(f"layer{n}"), layer=n)
    return g


def head_input(g: L.TokenGrid, config: ModelConfig):
    B, T1, C, dim = g.emb.shape
    if config.cls:
        cls_tokens = D.getitem(g.emb, (slice(None), 0))                    # (B,C,D)
        return D.masked_max(cls_tokens, np.ones((1, C, 1), dtype=bool), axis=1)
    body = D.reshape(D.getitem(g.emb, (slice(None), slice(1, None))), (B, (T1 - 1) * C, dim))
    mask = g.observed[:, 1:].reshape(B, (T1 - 1) * C)[..., None]
    return D.masked_mean(body, mask, axis=1)


def forward(batch: Batch, params: MtmParams, config: ModelConfig, train=False, rng=None, record=None):
    """Logits of shape (B, n_classes)."""
    g = encode(batch, params, config, train=train, rng=rng, record=record)
    h = head_input(g, config)
    h = D.relu(D.linear(h, params["head.w1"], params["head.b1"]))
    h = D.dropout(h, config.dropout, rng, train)
    return D.linear(h, params["head.w2"], params["head.b2"])


def class_weights(labels, n_classes):
    counts = np.bincount(np.asarray(labels, dtype=np.int64), minlength=n_classes).astype(np.float64)
    w = np.zeros(n_classes)
    seen = counts > 0
    w[seen] = counts.sum() / (seen.sum() * counts[seen])
    return w


def loss(logits, labels, config: ModelConfig = None, weights=None):
    """Softmax cross-entropy; ``weights`` are per-class (used if class_weighting)."""
    if config is not None and not config.class_weighting:
        weights = None
    return D.softmax_cross_entropy(logits, labels, weights)


def predict_proba(batch: Batch, params, config):
    z = forward(batch, params, config, train=False).data
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


# gradient check ---------------------------------------------------------------------

def toy_batch(n_channels=2, events=3, alpha=0.5, n_samples=2, seed=0):
    """Small padded batch from the synthetic generator (T <= n_channels * events)."""
    from mtm.data import SynthSpec, synth_generate

    series = synth_generate(SynthSpec(n_samples=n_samples, n_channels=n_channels, alpha=alpha,
                                      events_per_channel=events, seed=seed))
    # drop one event from the first sample so the batch really needs padding
    s = series[0]
    series[0] = type(s)(s.id, s.n_channels, s.label, s.t[:-1], s.c[:-1], s.v[:-1])
    return batch_from_series(series)


def check_gradients(config: ModelConfig, batch: Batch = None, step=1e-5, rtol=1e-4, max_elements=None):
    """Finite-difference check of every parameter group of the full network.

    Runs in eval mode (no dropout) so the objective is deterministic.
    """
    batch = batch if batch is not None else toy_batch(config.n_channels)
    params = init_params(config)
    return D.grad_check(lambda: loss(forward(batch, params, config, train=False), batch.labels),
                        dict(params), step=step, rtol=rtol, max_elements=max_elements,
                        seed=config.seed)
