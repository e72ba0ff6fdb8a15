"""Differentiable classifier core with analytic gradients.

The model fuses projected content and speaker embeddings per segment,
encodes the segment sequence with a small multi-head self-attention encoder
(post-norm: attention + residual + layer norm, feed-forward + residual +
layer norm), mean-pools, and classifies through four fully connected layers.

The training objective combines mean cross-entropy with two hinge triplet
losses on squared Euclidean distances,

    total = L_SER + lambda1 * L_p + lambda2 * L_s,

where L_p / L_s average max(0, d2(a,p) - d2(a,n) + margin) over the
phoneme-space and speaker-space triplet lists. Both losses act on small
trainable projection heads so they provide real training signal; the heads
can be disabled, which freezes the triplet terms at constant values.

Everything runs in double precision and the backward pass is fully analytic;
the hinge subgradient at an exactly-zero argument is defined as 0.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .embstore import EMOTIONS, EMOTION_INDEX
from .errors import DomainError, NumericError

CHECKPOINT_VERSION = 1
_LN_EPS = 1e-5

INPUT_MODES = ("fused", "content_only", "speaker_only")


@dataclass
class ModelConfig:
    d_c: int
    d_s: int
    d_model: int = 16
    n_heads: int = 2
    n_layers: int = 1
    fc_widths: tuple[int, ...] = (32, 16, 8, 4)
    alpha: float = 0.4
    beta: float = 0.6
    lambda1: float = 0.5
    lambda2: float = 0.5
    d_proj: int = 16
    use_projections: bool = True
    activation: str = "tanh"
    input_mode: str = "fused"
    sequence_input: bool = True
    positional_encoding: bool = False

    def validate(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if len(self.fc_widths) != 4 or self.fc_widths[-1] != len(EMOTIONS):
            raise ValueError(f"fc_widths needs 4 entries ending in {len(EMOTIONS)}")
        if self.activation not in ("tanh", "relu"):
            raise ValueError(f"unsupported activation {self.activation!r}")
        if self.input_mode not in INPUT_MODES:
            raise ValueError(f"unknown input_mode {self.input_mode!r}")
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError("margins must be positive")

    def content_width(self) -> int:
        return self.d_proj if self.use_projections else self.d_c

    def speaker_width(self) -> int:
        return self.d_proj if self.use_projections else self.d_s

    def input_dim(self) -> int:
        if self.input_mode == "fused":
            return self.content_width() + self.speaker_width()
        if self.input_mode == "content_only":
            return self.content_width()
        return self.speaker_width()

    def d_ff(self) -> int:
        return 2 * self.d_model


def _param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {
        "proj_c.W": (cfg.d_proj, cfg.d_c),
        "proj_c.b": (cfg.d_proj,),
        "proj_s.W": (cfg.d_proj, cfg.d_s),
        "proj_s.b": (cfg.d_proj,),
        "input.W": (cfg.d_model, cfg.input_dim()),
        "input.b": (cfg.d_model,),
    }
    d, f = cfg.d_model, cfg.d_ff()
    for l in range(cfg.n_layers):
        for name in ("Wq", "Wk", "Wv", "Wo"):
            shapes[f"enc{l}.{name}"] = (d, d)
        for name in ("bq", "bk", "bv", "bo"):
            shapes[f"enc{l}.{name}"] = (d,)
        shapes[f"enc{l}.ln1.g"] = (d,)
        shapes[f"enc{l}.ln1.b"] = (d,)
        shapes[f"enc{l}.ff.W1"] = (f, d)
        shapes[f"enc{l}.ff.b1"] = (f,)
        shapes[f"enc{l}.ff.W2"] = (d, f)
        shapes[f"enc{l}.ff.b2"] = (d,)
        shapes[f"enc{l}.ln2.g"] = (d,)
        shapes[f"enc{l}.ln2.b"] = (d,)
    prev = cfg.d_model
    for i, width in enumerate(cfg.fc_widths):
        shapes[f"fc{i}.W"] = (width, prev)
        shapes[f"fc{i}.b"] = (width,)
        prev = width
    return shapes


@dataclass
class ModelParams:
    """Named parameter arrays plus the config they were shaped from."""

    config: ModelConfig
    arrays: dict[str, np.ndarray]

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.arrays.items()})

    def check_finite(self):
        for name, arr in self.arrays.items():
            if not np.all(np.isfinite(arr)):
                raise NumericError(f"non-finite values in parameter {name}")

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.arrays[k].ravel() for k in sorted(self.arrays)])

    def from_vector(self, vec: np.ndarray) -> "ModelParams":
        out = {}
        offset = 0
        for k in sorted(self.arrays):
            size = self.arrays[k].size
            out[k] = vec[offset:offset + size].reshape(self.arrays[k].shape).copy()
            offset += size
        if offset != vec.size:
            raise ValueError("vector length does not match parameter count")
        return ModelParams(self.config, out)


def init_params(cfg: ModelConfig, seed: int) -> ModelParams:
    """Seeded initialization: N(0, 1/fan_in) weights, zero biases, unit norms."""
    cfg.validate()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
    arrays: dict[str, np.ndarray] = {}
    for name, shape in _param_shapes(cfg).items():
        if name.endswith(".g"):
            arrays[name] = np.ones(shape)
        elif len(shape) == 1:
            arrays[name] = np.zeros(shape)
        else:
            arrays[name] = rng.normal(0.0, 1.0 / np.sqrt(shape[1]), size=shape)
    return ModelParams(cfg, arrays)


def save_params(params: ModelParams, path) -> None:
    meta = {
        "version": CHECKPOINT_VERSION,
        "config": {k: (list(v) if isinstance(v, tuple) else v)
                   for k, v in vars(params.config).items()},
    }
    arrays = dict(params.arrays)
    arrays["__meta__"] = np.frombuffer(
        json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8
    ).copy()
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_params(path) -> ModelParams:
    """Load a checkpoint, validating every array shape against its config."""
    with np.load(path) as data:
        files = {k: data[k] for k in data.files}
    raw = files.pop("__meta__", None)
    if raw is None:
        raise DomainError("checkpoint missing metadata")
    meta = json.loads(bytes(raw.tolist()).decode("utf-8"))
    if meta.get("version") != CHECKPOINT_VERSION:
        raise DomainError(f"unsupported checkpoint version {meta.get('version')}")
    cfg_dict = dict(meta["config"])
    if isinstance(cfg_dict.get("fc_widths"), list):
        cfg_dict["fc_widths"] = tuple(cfg_dict["fc_widths"])
    cfg = ModelConfig(**cfg_dict)
    expected = _param_shapes(cfg)
    if set(expected) != set(files):
        raise DomainError("checkpoint parameter names do not match config")
    for name, shape in expected.items():
        if files[name].shape != shape:
            raise DomainError(
                f"checkpoint shape mismatch for {name}: "
                f"{files[name].shape} vs {shape}"
            )
    return ModelParams(cfg, {k: np.asarray(v, dtype=np.float64) for k, v in files.items()})


# ---------------------------------------------------------------------------
# Fusion and triplet loss primitives
# ---------------------------------------------------------------------------

def fuse(content_segments, speaker_vec) -> np.ndarray:
    """Utterance-level fusion: [mean(content segments) || speaker vector]."""
    segments = [np.asarray(s, dtype=np.float64) for s in content_segments]
    if not segments:
        raise DomainError("fuse requires at least one content segment")
    dims = {s.shape for s in segments}
    if len(dims) != 1 or segments[0].ndim != 1:
        raise DomainError(f"inconsistent segment dimensions: {dims}")
    speaker_vec = np.asarray(speaker_vec, dtype=np.float64)
    if speaker_vec.ndim != 1:
        raise DomainError("speaker vector must be one-dimensional")
    return np.concatenate([np.mean(segments, axis=0), speaker_vec])


def fuse_sequence(content_segments, speaker_vec) -> np.ndarray:
    """Sequence fusion: one [segment || speaker vector] row per segment."""
    segments = np.asarray(content_segments, dtype=np.float64)
    if segments.ndim != 2 or segments.shape[0] == 0:
        raise DomainError("fuse_sequence requires a non-empty (S, d_c) segment array")
    speaker_vec = np.asarray(speaker_vec, dtype=np.float64)
    tiled = np.tile(speaker_vec, (segments.shape[0], 1))
    return np.concatenate([segments, tiled], axis=1)


def triplet_loss(a, p, n, margin: float) -> float:
    """max(0, ||a-p||^2 - ||a-n||^2 + margin) with squared Euclidean distances."""
    a = np.asarray(a, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    if not (a.shape == p.shape == n.shape):
        raise DomainError("triplet vectors must share one dimension")
    if margin <= 0:
        raise DomainError("margin must be positive")
    d_ap = float(np.sum((a - p) ** 2))
    d_an = float(np.sum((a - n) ** 2))
    return max(0.0, d_ap - d_an + margin)


# ---------------------------------------------------------------------------
# Batches
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    """Model inputs for a group of utterances plus triplet index lists.

    ``sequences`` holds the raw per-segment content vectors per utterance;
    fusion with the speaker vector happens inside the model because the
    projection heads are trainable. Triplet indices reference rows of the
    embedding banks.
    """

    sequences: list[np.ndarray]            # per utterance: (S_u, d_c)
    speaker_vecs: np.ndarray               # (B, d_s)
    labels: np.ndarray                     # (B,) class indices
    content_bank: np.ndarray               # (Nc, d_c)
    speaker_bank: np.ndarray               # (Ns, d_s)
    trip_p: np.ndarray                     # (Tp, 3) indices into content_bank
    trip_s: np.ndarray                     # (Ts, 3) indices into speaker_bank

    @property
    def size(self) -> int:
        return len(self.sequences)


def build_batch(utterances, phoneme_triplets, speaker_triplets, records_by_id,
                d_c: int, d_s: int) -> Batch:
    """Assemble a Batch from utterance groups and mined triplets."""
    sequences = []
    speaker_vecs = []
    labels = []
    for utt in utterances:
        segs = np.stack([r.vector for r in utt["content"]]) if utt["content"] else \
            np.zeros((0, d_c))
        sequences.append(segs)
        spk = utt["speaker"]
        speaker_vecs.append(spk.vector if spk is not None else np.zeros(d_s))
        labels.append(EMOTION_INDEX[utt["emotion"]])

    def bank_of(triplets, dim):
        index: dict[str, int] = {}
        rows = []
        idx = np.zeros((len(triplets), 3), dtype=np.int64)
        for t_i, t in enumerate(triplets):
            for slot, rid in enumerate((t.anchor_id, t.positive_id, t.negative_id)):
                if rid not in index:
                    index[rid] = len(rows)
                    rows.append(records_by_id[rid].vector)
                idx[t_i, slot] = index[rid]
        bank = np.stack(rows) if rows else np.zeros((0, dim))
        return bank, idx

    content_bank, trip_p = bank_of(phoneme_triplets, d_c)
    speaker_bank, trip_s = bank_of(speaker_triplets, d_s)
    return Batch(
        sequences=sequences,
        speaker_vecs=np.stack(speaker_vecs) if speaker_vecs else np.zeros((0, d_s)),
        labels=np.array(labels, dtype=np.int64),
        content_bank=content_bank,
        speaker_bank=speaker_bank,
        trip_p=trip_p,
        trip_s=trip_s,
    )


# ---------------------------------------------------------------------------
# Forward
# ---------------------------------------------------------------------------

def _act(cfg: ModelConfig, x: np.ndarray) -> np.ndarray:
    if cfg.activation == "tanh":
        return np.tanh(x)
    return np.maximum(x, 0.0)


def _dact(cfg: ModelConfig, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    # y = act(x) from the forward cache
    if cfg.activation == "tanh":
        return 1.0 - y * y
    return (x > 0.0).astype(np.float64)


def _layernorm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = (x - mu) * inv
    return xhat * g + b, (xhat, inv)


def _layernorm_back(dy, g, cache):
    xhat, inv = cache
    dxhat = dy * g
    dg = np.sum(dy * xhat, axis=tuple(range(dy.ndim - 1)))
    db = np.sum(dy, axis=tuple(range(dy.ndim - 1)))
    mean_dxhat = dxhat.mean(axis=-1, keepdims=True)
    mean_dxhat_xhat = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = inv * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat)
    return dx, dg, db


def _positional_encoding(s: int, d: int) -> np.ndarray:
    pos = np.arange(s)[:, None]
    i = np.arange(d // 2)[None, :]
    angle = pos / (10000.0 ** (2 * i / d))
    pe = np.zeros((s, d))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : d - d // 2])
    return pe


def _split_heads(x, n_heads):
    b, s, d = x.shape
    return x.reshape(b, s, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, s, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, s, h * dh)


def _check_finite(name, *arrays):
    for arr in arrays:
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"non-finite activation in {name}")


def _encode_group(params: ModelParams, x: np.ndarray):
    """Encoder + classifier over one equal-length group. Returns (logits, cache)."""
    cfg = params.config
    p = params.arrays
    cache: dict = {"x_in": x}
    h = x @ p["input.W"].T + p["input.b"]
    if cfg.positional_encoding:
        h = h + _positional_encoding(x.shape[1], cfg.d_model)
    _check_finite("input", h)
    cache["h0"] = h
    layer_caches = []
    scale = 1.0 / np.sqrt(cfg.d_model // cfg.n_heads)
    for l in range(cfg.n_layers):
        lc: dict = {"h_in": h}
        q = h @ p[f"enc{l}.Wq"].T + p[f"enc{l}.bq"]
        k = h @ p[f"enc{l}.Wk"].T + p[f"enc{l}.bk"]
        v = h @ p[f"enc{l}.Wv"].T + p[f"enc{l}.bv"]
        qh, kh, vh = (_split_heads(a, cfg.n_heads) for a in (q, k, v))
        scores = (qh @ kh.transpose(0, 1, 3, 2)) * scale
        scores = scores - scores.max(axis=-1, keepdims=True)
        expo = np.exp(scores)
        attn = expo / expo.sum(axis=-1, keepdims=True)
        ctx = _merge_heads(attn @ vh)
        attn_out = ctx @ p[f"enc{l}.Wo"].T + p[f"enc{l}.bo"]
        r1 = h + attn_out
        n1, ln1 = _layernorm(r1, p[f"enc{l}.ln1.g"], p[f"enc{l}.ln1.b"])
        f1 = n1 @ p[f"enc{l}.ff.W1"].T + p[f"enc{l}.ff.b1"]
        a1 = _act(cfg, f1)
        f2 = a1 @ p[f"enc{l}.ff.W2"].T + p[f"enc{l}.ff.b2"]
        r2 = n1 + f2
        n2, ln2 = _layernorm(r2, p[f"enc{l}.ln2.g"], p[f"enc{l}.ln2.b"])
        _check_finite(f"encoder layer {l}", n2)
        lc.update(qh=qh, kh=kh, vh=vh, attn=attn, ctx=ctx, ln1=ln1, ln2=ln2,
                  n1=n1, f1=f1, a1=a1)
        layer_caches.append(lc)
        h = n2
    cache["layers"] = layer_caches
    cache["encoded"] = h
    pooled = h.mean(axis=1)
    cache["pooled"] = pooled
    a = pooled
    fc_cache = []
    for i in range(4):
        z = a @ p[f"fc{i}.W"].T + p[f"fc{i}.b"]
        out = _act(cfg, z) if i < 3 else z
        fc_cache.append((a, z, out))
        a = out
    _check_finite("classifier head", a)
    cache["fc"] = fc_cache
    return a, cache


def _project_inputs(params: ModelParams, batch: Batch):
    """Build the per-group encoder inputs from raw content and speaker vectors."""
    cfg = params.config
    p = params.arrays
    cache: dict = {}
    b = batch.size
    if cfg.input_mode != "speaker_only":
        lengths = [seq.shape[0] for seq in batch.sequences]
        if any(s == 0 for s in lengths):
            raise DomainError("utterance without content segments")
    if cfg.input_mode == "speaker_only":
        groups = {1: list(range(b))}
    else:
        groups: dict[int, list[int]] = {}
        for i, seq in enumerate(batch.sequences):
            s = seq.shape[0] if cfg.sequence_input else 1
            groups.setdefault(s, []).append(i)
    inputs = {}
    for s, idxs in sorted(groups.items()):
        if cfg.input_mode == "speaker_only":
            spk = batch.speaker_vecs[idxs]
            if cfg.use_projections:
                x = (spk @ p["proj_s.W"].T + p["proj_s.b"])[:, None, :]
            else:
                x = spk[:, None, :]
            cache[s] = {"spk_raw": spk}
        else:
            if cfg.sequence_input:
                segs = np.stack([batch.sequences[i] for i in idxs])  # (B, S, d_c)
            else:
                segs = np.stack(
                    [batch.sequences[i].mean(axis=0, keepdims=True) for i in idxs]
                )
            seg_cache = {"segs_raw": segs, "n_raw": [batch.sequences[i].shape[0] for i in idxs]}
            if cfg.use_projections:
                cseg = segs @ p["proj_c.W"].T + p["proj_c.b"]
            else:
                cseg = segs
            if cfg.input_mode == "fused":
                spk = batch.speaker_vecs[idxs]
                if cfg.use_projections:
                    sp = spk @ p["proj_s.W"].T + p["proj_s.b"]
                else:
                    sp = spk
                x = np.concatenate(
                    [cseg, np.broadcast_to(sp[:, None, :], cseg.shape[:2] + sp.shape[1:])],
                    axis=2,
                )
                seg_cache["spk_raw"] = spk
            else:
                x = cseg
            cache[s] = seg_cache
        inputs[s] = (idxs, x)
    return inputs, cache


def forward(params: ModelParams, batch: Batch):
    """Logits for every utterance in the batch plus the backprop cache."""
    params.config.validate()
    # non-finite values are detected layer by layer and raised as
    # NumericError, so numpy's own warnings are redundant here
    with np.errstate(invalid="ignore", over="ignore"):
        inputs, proj_cache = _project_inputs(params, batch)
        logits = np.zeros((batch.size, len(EMOTIONS)))
        group_caches = {}
        for s, (idxs, x) in inputs.items():
            out, cache = _encode_group(params, x)
            logits[idxs] = out
            group_caches[s] = (idxs, cache)
    return logits, {"groups": group_caches, "proj": proj_cache}


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _triplet_terms(bank, trips, w, b, use_proj, margin):
    """Vectorized triplet losses over a bank. Returns (mean loss, cache)."""
    if trips.shape[0] == 0:
        return 0.0, None
    proj = bank @ w.T + b if use_proj else bank
    a, p, n = proj[trips[:, 0]], proj[trips[:, 1]], proj[trips[:, 2]]
    d_ap = np.sum((a - p) ** 2, axis=1)
    d_an = np.sum((a - n) ** 2, axis=1)
    arg = d_ap - d_an + margin
    active = arg > 0.0
    loss = float(np.sum(np.where(active, arg, 0.0)) / trips.shape[0])
    return loss, {"proj": proj, "a": a, "p": p, "n": n, "active": active}


def loss_components(params: ModelParams, batch: Batch):
    """(logits, caches, components dict) for one batch."""
    cfg = params.config
    logits, cache = forward(params, batch)
    probs = _softmax(logits)
    if batch.size:
        picked = probs[np.arange(batch.size), batch.labels]
        with np.errstate(divide="ignore"):
            l_ser = float(-np.mean(np.log(picked)))
    else:
        l_ser = 0.0
    l_p, cache_p = _triplet_terms(
        batch.content_bank, batch.trip_p, params.arrays["proj_c.W"],
        params.arrays["proj_c.b"], cfg.use_projections, cfg.alpha,
    )
    l_s, cache_s = _triplet_terms(
        batch.speaker_bank, batch.trip_s, params.arrays["proj_s.W"],
        params.arrays["proj_s.b"], cfg.use_projections, cfg.beta,
    )
    total = l_ser + cfg.lambda1 * l_p + cfg.lambda2 * l_s
    if not np.isfinite(total):
        raise NumericError("non-finite total loss")
    comps = {"L_SER": l_ser, "L_p": l_p, "L_s": l_s, "total": total}
    return logits, {"fwd": cache, "probs": probs, "trip_p": cache_p,
                    "trip_s": cache_s}, comps


def loss_total(params: ModelParams, batch: Batch):
    """Total objective and its component breakdown."""
    _, _, comps = loss_components(params, batch)
    return comps["total"], {k: comps[k] for k in ("L_SER", "L_p", "L_s")}


# ---------------------------------------------------------------------------
# Backward
# ---------------------------------------------------------------------------

@dataclass
class Gradients:
    """Gradient of the total loss for every parameter and triplet input."""

    arrays: dict[str, np.ndarray]
    trip_p_inputs: np.ndarray   # (Tp, 3, d_c) d total / d raw triplet vectors
    trip_s_inputs: np.ndarray   # (Ts, 3, d_s)


def _linear_back(dy, x, w):
    dw = dy.reshape(-1, dy.shape[-1]).T @ x.reshape(-1, x.shape[-1])
    db = dy.reshape(-1, dy.shape[-1]).sum(axis=0)
    dx = dy @ w
    return dx, dw, db


def _encode_group_back(params: ModelParams, cache: dict, dlogits: np.ndarray, grads):
    cfg = params.config
    p = params.arrays
    da = dlogits
    for i in reversed(range(4)):
        x, z, out = cache["fc"][i]
        if i < 3:
            da = da * _dact(cfg, z, out)
        da, dw, db = _linear_back(da, x, p[f"fc{i}.W"])
        grads[f"fc{i}.W"] += dw
        grads[f"fc{i}.b"] += db
    s_len = cache["encoded"].shape[1]
    dh = np.repeat(da[:, None, :], s_len, axis=1) / s_len
    scale = 1.0 / np.sqrt(cfg.d_model // cfg.n_heads)
    for l in reversed(range(cfg.n_layers)):
        lc = cache["layers"][l]
        dr2, dg, db = _layernorm_back(dh, p[f"enc{l}.ln2.g"], lc["ln2"])
        grads[f"enc{l}.ln2.g"] += dg
        grads[f"enc{l}.ln2.b"] += db
        df2 = dr2
        dn1 = dr2.copy()
        da1, dw2, db2 = _linear_back(df2, lc["a1"], p[f"enc{l}.ff.W2"])
        grads[f"enc{l}.ff.W2"] += dw2
        grads[f"enc{l}.ff.b2"] += db2
        df1 = da1 * _dact(cfg, lc["f1"], lc["a1"])
        dn1_ff, dw1, db1 = _linear_back(df1, lc["n1"], p[f"enc{l}.ff.W1"])
        grads[f"enc{l}.ff.W1"] += dw1
        grads[f"enc{l}.ff.b1"] += db1
        dn1 += dn1_ff
        dr1, dg1, db1n = _layernorm_back(dn1, p[f"enc{l}.ln1.g"], lc["ln1"])
        grads[f"enc{l}.ln1.g"] += dg1
        grads[f"enc{l}.ln1.b"] += db1n
        dattn_out = dr1
        dh_res = dr1
        dctx, dwo, dbo = _linear_back(dattn_out, lc["ctx"], p[f"enc{l}.Wo"])
        grads[f"enc{l}.Wo"] += dwo
        grads[f"enc{l}.bo"] += dbo
        dctx_h = _split_heads(dctx, cfg.n_heads)
        dattn = dctx_h @ lc["vh"].transpose(0, 1, 3, 2)
        dvh = lc["attn"].transpose(0, 1, 3, 2) @ dctx_h
        a = lc["attn"]
        dscores = a * (dattn - np.sum(dattn * a, axis=-1, keepdims=True))
        dqh = (dscores @ lc["kh"]) * scale
        dkh = (dscores.transpose(0, 1, 3, 2) @ lc["qh"]) * scale
        dq = _merge_heads(dqh)
        dk = _merge_heads(dkh)
        dv = _merge_heads(dvh)
        h_in = lc["h_in"]
        dh = dh_res
        for name, dmat in (("Wq", dq), ("Wk", dk), ("Wv", dv)):
            dx, dw, db = _linear_back(dmat, h_in, p[f"enc{l}.{name}"])
            grads[f"enc{l}.{name}"] += dw
            grads[f"enc{l}.b{name[1]}"] += db
            dh = dh + dx
    dx_in, dw_in, db_in = _linear_back(dh, cache["x_in"], p["input.W"])
    grads["input.W"] += dw_in
    grads["input.b"] += db_in
    return dx_in


def _triplet_back(bank, trips, w, b, use_proj, tcache, lam, grads, w_key, b_key):
    """Backprop the mean triplet loss; returns d loss / d raw bank rows."""
    d_bank_raw = np.zeros_like(bank)
    if tcache is None or trips.shape[0] == 0:
        return d_bank_raw, np.zeros((0, 3, bank.shape[1] if bank.ndim == 2 else 0))
    t = trips.shape[0]
    a, pp, nn = tcache["a"], tcache["p"], tcache["n"]
    active = tcache["active"][:, None].astype(np.float64)
    coef = lam / t
    da = coef * active * 2.0 * (nn - pp)
    dp = coef * active * 2.0 * (pp - a)
    dn = coef * active * 2.0 * (a - nn)
    d_proj = np.zeros_like(tcache["proj"])
    np.add.at(d_proj, trips[:, 0], da)
    np.add.at(d_proj, trips[:, 1], dp)
    np.add.at(d_proj, trips[:, 2], dn)
    if use_proj:
        grads[w_key] += d_proj.T @ bank
        grads[b_key] += d_proj.sum(axis=0)
        d_bank_raw = d_proj @ w
        da_raw, dp_raw, dn_raw = da @ w, dp @ w, dn @ w
    else:
        d_bank_raw = d_proj
        da_raw, dp_raw, dn_raw = da, dp, dn
    trip_inputs = np.stack([da_raw, dp_raw, dn_raw], axis=1)
    return d_bank_raw, trip_inputs


def backward(params: ModelParams, batch: Batch) -> Gradients:
    """Analytic gradient of loss_total for every parameter and triplet input."""
    _, grads = loss_and_grads(params, batch)
    return grads


def loss_and_grads(params: ModelParams, batch: Batch):
    """One combined pass returning (component dict, Gradients)."""
    cfg = params.config
    p = params.arrays
    logits, caches, comps = loss_components(params, batch)
    grads = {k: np.zeros_like(v) for k, v in p.items()}

    # cross-entropy head
    dlogits_all = caches["probs"].copy()
    if batch.size:
        dlogits_all[np.arange(batch.size), batch.labels] -= 1.0
        dlogits_all /= batch.size

    for s, (idxs, cache) in caches["fwd"]["groups"].items():
        dx_in = _encode_group_back(params, cache, dlogits_all[idxs], grads)
        pc = caches["fwd"]["proj"][s]
        if cfg.input_mode == "speaker_only":
            dspk = dx_in[:, 0, :]
            if cfg.use_projections:
                _, dw, db = _linear_back(dspk, pc["spk_raw"], p["proj_s.W"])
                grads["proj_s.W"] += dw
                grads["proj_s.b"] += db
            continue
        cw = cfg.content_width()
        dcseg = dx_in[..., :cw]
        if cfg.input_mode == "fused":
            dsp = dx_in[..., cw:].sum(axis=1)
            if cfg.use_projections:
                _, dw, db = _linear_back(dsp, pc["spk_raw"], p["proj_s.W"])
                grads["proj_s.W"] += dw
                grads["proj_s.b"] += db
        if cfg.use_projections:
            # segs_raw already holds averaged segments in utterance-vector mode,
            # so the same linear backward covers both input modes
            _, dw, db = _linear_back(dcseg, pc["segs_raw"], p["proj_c.W"])
            grads["proj_c.W"] += dw
            grads["proj_c.b"] += db

    _, trip_p_inputs = _triplet_back(
        batch.content_bank, batch.trip_p, p["proj_c.W"], p["proj_c.b"],
        cfg.use_projections, caches["trip_p"], cfg.lambda1, grads,
        "proj_c.W", "proj_c.b",
    )
    _, trip_s_inputs = _triplet_back(
        batch.speaker_bank, batch.trip_s, p["proj_s.W"], p["proj_s.b"],
        cfg.use_projections, caches["trip_s"], cfg.lambda2, grads,
        "proj_s.W", "proj_s.b",
    )
    return comps, Gradients(arrays=grads, trip_p_inputs=trip_p_inputs,
                            trip_s_inputs=trip_s_inputs)
