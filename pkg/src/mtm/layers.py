"""Token grid, input embedding, masked concat pooling and the Token Mixing layer.

All functions work on a padded batch. A :class:`TokenGrid` holds
``emb`` of shape ``(B, T+1, C, D)`` where row 0 carries the per-channel
[CLS] tokens and rows ``1..n_times[b]`` carry sample ``b``'s timepoints.
Rows past ``n_times[b]`` are padding: every channel is unobserved there, so
padding never participates in any attention or pooling group.

Unobserved positions physically hold zeros and are excluded from every
softmax and reduction through boolean masks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from mtm import diff as D


@dataclass
class TokenGrid:
    emb: D.DiffArray          # (B, T+1, C, D)
    observed: np.ndarray      # (B, T+1, C) bool; row 0 = CLS presence
    times: np.ndarray         # (B, T) float; padded entries are arbitrary
    n_times: np.ndarray       # (B,) current number of timepoints per sample

    @property
    def shape(self):
        return self.emb.shape

    @property
    def valid(self):
        """(B, T+1) rows that exist: CLS row (if present) plus real timepoints."""
        B, T1 = self.observed.shape[:2]
        rows = np.arange(T1)[None, :]
        v = (rows >= 1) & (rows <= self.n_times[:, None])
        v[:, 0] = self.observed[:, 0].any(axis=1)
        return v

    def sample(self, b):
        """Unpadded view of one sample: (emb[T+1, C, D], observed, times)."""
        n = int(self.n_times[b])
        return self.emb.data[b, : n + 1], self.observed[b, : n + 1], self.times[b, :n]


@dataclass
class PivotalChoice:
    pivot: np.ndarray   # (B, T) chosen channel per timepoint, -1 on padding
    filled: np.ndarray  # (B, T, C) True where a missing token gets the pivotal copy


@dataclass
class LayerSettings:
    heads: int = 1
    dropout: float = 0.0
    prenorm: bool = True
    train: bool = False
    rng: np.random.Generator | None = None
    record: dict | None = field(default=None, repr=False)


def positional_encoding(t, dim):
    """Sinusoidal encoding: sine on even dims, cosine on odd, base 1e4."""
    t = np.asarray(t, dtype=np.float64)
    k = np.arange(dim // 2)
    freq = 1.0 / (10000.0 ** (2.0 * k / dim))
    ang = t[..., None] * freq
    pe = np.zeros(t.shape + (dim,))
    pe[..., 0::2] = np.sin(ang)
    pe[..., 1::2] = np.cos(ang)
    return pe


def embed_input(values, observed, times, n_times, channel_emb, cls_emb, use_cls=True):
    """Observation tokens ``v * e_j + PE(t)`` below a row of [CLS] tokens.

    ``values``/``observed`` are (B, T, C), ``times`` is (B, T).
    """
    B, T, C = observed.shape
    dim = channel_emb.shape[1]
    pe = positional_encoding(times, dim)[:, :, None, :]                      # (B,T,1,D)
    z = D.mul(D.constant(values[..., None]), channel_emb) + D.constant(pe)     # (B,T,C,D)
    z = D.mask_fill(z, observed[..., None])
    cls = D.broadcast_to(D.reshape(cls_emb, (1, 1, C, dim)), (B, 1, C, dim))
    emb = D.concat([cls, z], axis=1)
    obs = np.concatenate([np.full((B, 1, C), bool(use_cls)), observed], axis=1)
    if not use_cls:
        emb = D.mask_fill(emb, obs[..., None])
    return TokenGrid(emb, obs, np.asarray(times, dtype=np.float64), np.asarray(n_times))


# attention core ---------------------------------------------------------------

def attention(x, key_mask, wq, wk, wv, heads=1, key_scale=None, settings=None):
    """Masked scaled dot-product self-attention over axis -2 of ``x``.

    ``x`` is (..., L, D); ``key_mask`` broadcasts to (..., 1, L) and marks
    the keys a query may attend. ``key_scale`` (broadcastable to the score
    matrix) multiplies raw scores before the softmax. Returns the attended
    values and the (pre-dropout) weights, shaped (..., H, L, L) when
    ``heads > 1`` and (..., L, L) otherwise.
    """
    dim = x.shape[-1]
    q, k, v = D.matmul(x, wq), D.matmul(x, wk), D.matmul(x, wv)
    mask = np.asarray(key_mask, dtype=bool)
    if heads > 1:
        dh = dim // heads
        lead, L = x.shape[:-2], x.shape[-2]

        def split(a):
            return D.swapaxes(D.reshape(a, lead + (L, heads, dh)), -2, -3)

        q, k, v = split(q), split(k), split(v)
        mask = np.expand_dims(mask, -3)
        if key_scale is not None:
            key_scale = np.expand_dims(key_scale, -3)
    else:
        dh = dim
    scores = D.scale(D.matmul(q, D.swapaxes(k, -1, -2)), 1.0 / np.sqrt(dh))
    if key_scale is not None:
        scores = D.mul(scores, key_scale)
    weights = D.masked_softmax(scores, mask, axis=-1, allow_empty=True)
    s = settings or LayerSettings()
    out = D.matmul(D.dropout(weights, s.dropout, s.rng, s.train), v)
    if heads > 1:
        out = D.reshape(D.swapaxes(out, -2, -3), x.shape)
    return out, weights.data


def _attend_block(x, key_mask, p, stage, settings, key_scale=None):
    h = D.layer_norm(x, p[f"{stage}.ln_g"], p[f"{stage}.ln_b"]) if settings.prenorm else x
    out, w = attention(h, key_mask, p[f"{stage}.wq"], p[f"{stage}.wk"], p[f"{stage}.wv"],
                       heads=settings.heads, key_scale=key_scale, settings=settings)
    return (D.add(x, out) if settings.prenorm else out), w


def _mlp_block(x, p, stage, settings):
    h = D.layer_norm(x, p[f"{stage}.ln_g"], p[f"{stage}.ln_b"]) if settings.prenorm else x
    h = D.relu(D.linear(h, p[f"{stage}.w1"], p[f"{stage}.b1"]))
    h = D.dropout(h, settings.dropout, settings.rng, settings.train)
    out = D.linear(h, p[f"{stage}.w2"], p[f"{stage}.b2"])
    return D.add(x, out) if settings.prenorm else out


def _record(settings, key, value):
    if settings.record is not None:
        settings.record[key] = value


def _head_mean(w, heads):
    return w.mean(axis=-3) if heads > 1 else w


# Token Mixing stages ------------------------------------------------------------

def temporal_attention(g: TokenGrid, p, settings: LayerSettings):
    """Per-channel attention over [CLS] + observed tokens.

    Returns the updated grid and ``cls_weights`` (B, T, C): the [CLS]
    query's softmax weight on each observation token of its own channel.
    """
    x = D.swapaxes(g.emb, 1, 2)                                   # (B,C,T1,D)
    key_mask = np.swapaxes(g.observed, 1, 2)[:, :, None, :]       # (B,C,1,T1)
    y, w = _attend_block(x, key_mask, p, "temporal", settings)
    w = _head_mean(w, settings.heads)                             # (B,C,T1,T1)
    _record(settings, "temporal", w)
    emb = D.mask_fill(D.swapaxes(y, 1, 2), g.observed[..., None])
    cls_weights = np.swapaxes(w[:, :, 0, 1:], 1, 2)               # (B,T,C)
    return TokenGrid(emb, g.observed, g.times, g.n_times), cls_weights


def select_pivotal(cls_weights, observed, valid=None):
    """Per timepoint, the observed channel with the largest [CLS] weight.

    ``observed`` covers timepoint rows only (B, T, C). Ties go to the
    lowest channel index. Rows with nothing observed (padding) get -1.
    """
    observed = np.asarray(observed, dtype=bool)
    if valid is None:
        valid = observed.any(axis=-1)
    scores = np.where(observed, cls_weights, -np.inf)
    pivot = np.where(valid, scores.argmax(axis=-1), -1)
    filled = valid[..., None] & ~observed
    return PivotalChoice(pivot, filled)


def _hash_uniform(*keys):
    x = sum(np.asarray(k, dtype=np.float64) * m for k, m in zip(keys, (12.9898, 78.233, 37.719)))
    return np.modf(np.abs(np.sin(x) * 43758.5453))[0]


def random_pivotal(observed, valid, layer, settings: LayerSettings):
    """Uniformly random observed channel per timepoint.

    Training draws from ``settings.rng``; otherwise a fixed hash of
    (timepoint, channel, layer) is used so evaluation is deterministic and
    independent of batch composition.
    """
    B, T, C = observed.shape
    if settings.train and settings.rng is not None:
        u = settings.rng.random((B, T, C))
    else:
        i = np.arange(T)[None, :, None]
        j = np.arange(C)[None, None, :]
        u = np.broadcast_to(_hash_uniform(i + 1, j + 1, layer + 1), (B, T, C))
    return select_pivotal(u, observed, valid)


def copy_fill(g: TokenGrid, choice: PivotalChoice):
    """Dense grid: missing slots of each real row take that row's pivotal token."""
    B, T1, C, dim = g.emb.shape
    src = np.broadcast_to(np.arange(C), (B, T1, C)).copy()
    body = src[:, 1:]
    body[choice.filled] = np.broadcast_to(choice.pivot[..., None], body.shape)[choice.filled]
    flat = (np.arange(B)[:, None, None] * T1 + np.arange(T1)[None, :, None]) * C + src
    return D.take_rows(D.reshape(g.emb, (B * T1 * C, dim)), flat)     # (B,T1,C,D)


def token_mixing_attention(g: TokenGrid, choice: PivotalChoice, p, settings: LayerSettings):
    """Copy pivotal tokens into missing slots, attend per channel, reset.

    Scores toward filled keys are divided by the sample's current number
    of timepoints before the softmax. The output observed mask is the
    input mask.
    """
    B, T1, C, dim = g.emb.shape
    valid = g.valid
    r = copy_fill(g, choice)
    filled = np.zeros((B, T1, C), dtype=bool)
    filled[:, 1:] = choice.filled
    x = D.swapaxes(r, 1, 2)                                          # (B,C,T1,D)
    key_mask = valid[:, None, None, :]                               # (B,1,1,T1)
    inv_t = 1.0 / np.maximum(g.n_times, 1).astype(np.float64)
    key_scale = np.where(np.swapaxes(filled, 1, 2), inv_t[:, None, None], 1.0)[:, :, None, :]
    y, w = _attend_block(x, key_mask, p, "mixing", settings, key_scale=key_scale)
    _record(settings, "mixing", _head_mean(w, settings.heads))
    emb = D.mask_fill(D.swapaxes(y, 1, 2), g.observed[..., None])
    return TokenGrid(emb, g.observed, g.times, g.n_times)


def channel_attention(g: TokenGrid, p, settings: LayerSettings):
    """Per-timepoint attention across observed channels (row 0 included)."""
    key_mask = g.observed[:, :, None, :]                             # (B,T1,1,C)
    y, w = _attend_block(g.emb, key_mask, p, "channel", settings)
    _record(settings, "channel", _head_mean(w, settings.heads))
    emb = D.mask_fill(y, g.observed[..., None])
    return TokenGrid(emb, g.observed, g.times, g.n_times)


def channel_mlp(g: TokenGrid, p, settings: LayerSettings):
    """Per-token MLP in place of channel attention (no cross-channel flow)."""
    emb = D.mask_fill(_mlp_block(g.emb, p, "channel_mlp", settings), g.observed[..., None])
    return TokenGrid(emb, g.observed, g.times, g.n_times)


def feed_forward(g: TokenGrid, p, settings: LayerSettings):
    emb = D.mask_fill(_mlp_block(g.emb, p, "ffn", settings), g.observed[..., None])
    return TokenGrid(emb, g.observed, g.times, g.n_times)


@dataclass
class MixingFlags:
    use_mixing: bool = True
    use_channel_attention: bool = True
    channel_attention_as_mlp: bool = False
    use_cls: bool = True
    use_ffn: bool = True


def token_mixing_layer(g: TokenGrid, p, flags: MixingFlags, settings: LayerSettings, layer=0):
    """temporal -> (mixing) -> (channel attention | per-token MLP | nothing) -> FFN."""
    g, cls_weights = temporal_attention(g, p, settings)
    valid_rows = g.valid[:, 1:]
    obs_rows = g.observed[:, 1:]
    choice = None
    if flags.use_mixing:
        if flags.use_cls:
            choice = select_pivotal(cls_weights, obs_rows, valid_rows)
        else:
            choice = random_pivotal(obs_rows, valid_rows, layer, settings)
        g = token_mixing_attention(g, choice, p, settings)
    if flags.channel_attention_as_mlp:
        g = channel_mlp(g, p, settings)
    elif flags.use_channel_attention:
        g = channel_attention(g, p, settings)
    if flags.use_ffn and settings.prenorm:
        g = feed_forward(g, p, settings)
    _record(settings, "cls_weights", cls_weights)
    if choice is not None:
        _record(settings, "pivot", choice.pivot)
    _record(settings, "observed", g.observed)
    _record(settings, "times", g.times)
    _record(settings, "n_times", g.n_times)
    return g


# pooling -------------------------------------------------------------------------

def pooling_windows(times, n_times, rate, unit):
    """Assign each timepoint to a window ``floor(t / (rate * unit))``.

    Returns ``(rows, member, new_times, new_n)``: for every sample and kept
    window, the 1-based grid rows it covers (padded with 0 and flagged
    off in ``member``), the window centres, and the new lengths.
    """
    B = len(n_times)
    groups, centres = [], []
    for b in range(B):
        n = int(n_times[b])
        width = rate * float(unit[b])
        win = np.floor(times[b, :n] / width).astype(np.int64)
        keys, start = np.unique(win, return_index=True)
        bounds = list(start) + [n]
        groups.append([np.arange(bounds[q], bounds[q + 1]) + 1 for q in range(len(keys))])
        centres.append((keys + 0.5) * width)
    new_n = np.array([len(g) for g in groups], dtype=np.int64)
    Tn = int(new_n.max())
    K = max(len(m) for g in groups for m in g)
    rows = np.zeros((B, Tn, K), dtype=np.int64)
    member = np.zeros((B, Tn, K), dtype=bool)
    new_times = np.zeros((B, Tn))
    for b, g in enumerate(groups):
        for q, m in enumerate(g):
            rows[b, q, : len(m)] = m
            member[b, q, : len(m)] = True
        new_times[b, : len(g)] = centres[b]
        if len(g) < Tn:
            new_times[b, len(g):] = centres[b][-1]
    return rows, member, new_times, new_n


def masked_concat_pool(g: TokenGrid, rate, unit, p, kind="concat"):
    """Down-sample the time axis with masked max/avg pooling per window.

    ``unit`` is the per-sample time unit (B,); windows have width
    ``rate * unit``. Within a window each channel's observed tokens are
    reduced by masked max and/or masked mean, the results concatenated and
    projected back to D with ``p["w"]``, ``p["b"]``. A pooled token is observed iff its channel had an
    observation in the window. [CLS] tokens pass through unchanged.
    """
    B, T1, C, dim = g.emb.shape
    unit = np.asarray(unit, dtype=np.float64)
    rows, member, new_times, new_n = pooling_windows(g.times, g.n_times, rate, unit)
    Tn, K = rows.shape[1:]
    flat = np.arange(B)[:, None, None] * T1 + rows
    gathered = D.take_rows(D.reshape(g.emb, (B * T1, C * dim)), flat)
    gathered = D.reshape(gathered, (B, Tn, K, C, dim))
    obs_g = member[..., None] & np.take_along_axis(
        g.observed, rows.reshape(B, -1)[..., None], axis=1).reshape(B, Tn, K, C)
    mask = obs_g[..., None]
    parts = []
    if kind in ("concat", "max"):
        parts.append(D.masked_max(gathered, mask, axis=2, allow_empty=True))
    if kind in ("concat", "avg"):
        parts.append(D.masked_mean(gathered, mask, axis=2, allow_empty=True))
    if not parts:
        raise ValueError(f"unknown pooling kind {kind!r}")
    pooled = parts[0] if len(parts) == 1 else D.concat(parts, axis=-1)
    new_obs = obs_g.any(axis=2)
    pooled = D.linear(pooled, p["w"], p["b"])
    pooled = D.mask_fill(pooled, new_obs[..., None])
    emb = D.concat([D.getitem(g.emb, (slice(None), slice(0, 1))), pooled], axis=1)
    observed = np.concatenate([g.observed[:, :1], new_obs], axis=1)
    return TokenGrid(emb, observed, new_times, new_n)


def default_unit(times, n_times):
    """(max t - min t) / T per sample, falling back to 1 for a single timepoint."""
    out = np.ones(len(n_times))
    for b, n in enumerate(n_times):
        n = int(n)
        if n > 1:
            span = times[b, n - 1] - times[b, 0]
            if span > 0:
                out[b] = span / n
    return out
