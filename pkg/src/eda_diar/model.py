"""Diarization network: stacked self-attention encoder producing frame
embeddings, and an LSTM encoder-decoder head that turns an embedding sequence
into per-speaker attractor vectors with existence probabilities.

The encoder uses no positional encodings by default (a config switch), which
makes it equivariant to frame permutations; time ordering only enters through
the attractor head's input order.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .errors import ShapeError
from .featfront import FeatureSequence


@dataclass
class EncoderConfig:
    n_blocks: int = 4
    d_model: int = 256
    n_heads: int = 4
    d_ff: int = 1024
    input_dim: int = 345
    positional_encoding: bool = False

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ShapeError("d_model must be divisible by n_heads")


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    max_attractors: int = 20

    def to_dict(self) -> dict:
        d = dict(self.encoder.__dict__)
        d["max_attractors"] = self.max_attractors
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        max_attractors = int(d.pop("max_attractors", 20))
        return cls(encoder=EncoderConfig(**d), max_attractors=max_attractors)

    def digest(self) -> str:
        return hashlib.sha256(
            json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        ).hexdigest()[:16]


def toy_config(input_dim: int = 345) -> ModelConfig:
    """Small configuration for desk-scale training runs."""
    return ModelConfig(
        encoder=EncoderConfig(n_blocks=2, d_model=64, n_heads=4, d_ff=256, input_dim=input_dim)
    )


def full_config(input_dim: int = 345) -> ModelConfig:
    """Four blocks, 256-wide embeddings."""
    return ModelConfig(
        encoder=EncoderConfig(n_blocks=4, d_model=256, n_heads=4, d_ff=1024, input_dim=input_dim)
    )


@dataclass
class EmbeddingSequence:
    E: np.ndarray  # (T, D)
    frame_period_s: float


@dataclass
class AttractorSet:
    A: np.ndarray  # (S_out, D)
    p: np.ndarray  # (S_out,), strictly inside (0, 1)
    order_seed: int | str = "chronological"


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


def _xavier(rng, fan_in, fan_out, dtype):
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out)).astype(dtype)


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> dict[str, dc.Tensor]:
    """Flat named-parameter dict; creation order is fixed for reproducibility."""
    rng = np.random.default_rng(seed)
    enc = cfg.encoder
    d, dff, fin = enc.d_model, enc.d_ff, enc.input_dim
    p: dict[str, dc.Tensor] = {}

    def w(name, fan_in, fan_out):
        p[name] = dc.Tensor(_xavier(rng, fan_in, fan_out, dtype), requires_grad=True)

    def zeros(name, n, value=0.0):
        p[name] = dc.Tensor(np.full(n, value, dtype=dtype), requires_grad=True)

    w("enc.in_proj.w", fin, d)
    zeros("enc.in_proj.b", d)
    for i in range(enc.n_blocks):
        pre = f"enc.b{i}"
        zeros(f"{pre}.ln1.g", d, 1.0)
        zeros(f"{pre}.ln1.b", d)
        for part in ("wq", "wk", "wv", "wo"):
            w(f"{pre}.attn.{part}", d, d)
        for part in ("bq", "bk", "bv", "bo"):
            zeros(f"{pre}.attn.{part}", d)
        zeros(f"{pre}.ln2.g", d, 1.0)
        zeros(f"{pre}.ln2.b", d)
        w(f"{pre}.ff.w1", d, dff)
        zeros(f"{pre}.ff.b1", dff)
        w(f"{pre}.ff.w2", dff, d)
        zeros(f"{pre}.ff.b2", d)
    zeros("enc.ln_out.g", d, 1.0)
    zeros("enc.ln_out.b", d)

    for name in ("eda.enc", "eda.dec"):
        lstm = dc.LstmParams.create(rng, d, d, dtype=dtype)
        p[f"{name}.w_x"] = lstm.w_x
        p[f"{name}.w_h"] = lstm.w_h
        p[f"{name}.b"] = lstm.b
    w("eda.exist.w", d, 1)
    zeros("eda.exist.b", 1)
    return p


def _lstm_of(params: dict[str, dc.Tensor], prefix: str) -> dc.LstmParams:
    return dc.LstmParams(params[f"{prefix}.w_x"], params[f"{prefix}.w_h"], params[f"{prefix}.b"])


def _sinusoid_table(t: int, d: int, dtype) -> np.ndarray:
    pos = np.arange(t)[:, None]
    i = np.arange(d // 2)[None, :]
    angles = pos / np.power(10000.0, 2.0 * i / d)
    table = np.zeros((t, d))
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles)
    return table.astype(dtype)


# ---------------------------------------------------------------------------
# forward passes (differentiable; batched over leading axis)
# ---------------------------------------------------------------------------


def encode_batch(x: dc.Tensor, cfg: EncoderConfig, params: dict[str, dc.Tensor]) -> dc.Tensor:
    """(B, T, F) features -> (B, T, D) embeddings after the output layer norm."""
    if x.ndim != 3 or x.shape[-1] != cfg.input_dim:
        raise ShapeError(f"expected (B, T, {cfg.input_dim}) input, got {x.shape}")
    b_sz, t, _ = x.shape
    d, heads = cfg.d_model, cfg.n_heads
    dh = d // heads

    h = dc.linear(x, params["enc.in_proj.w"], params["enc.in_proj.b"])
    if cfg.positional_encoding:
        h = dc.add(h, dc.Tensor(_sinusoid_table(t, d, h.data.dtype)[None]))

    for i in range(cfg.n_blocks):
        pre = f"enc.b{i}"
        u = dc.layer_norm(h, params[f"{pre}.ln1.g"], params[f"{pre}.ln1.b"])
        q = dc.linear(u, params[f"{pre}.attn.wq"], params[f"{pre}.attn.bq"])
        k = dc.linear(u, params[f"{pre}.attn.wk"], params[f"{pre}.attn.bk"])
        v = dc.linear(u, params[f"{pre}.attn.wv"], params[f"{pre}.attn.bv"])
        # (B, T, D) -> (B, heads, T, dh)
        q = dc.transpose(dc.reshape(q, (b_sz, t, heads, dh)), (0, 2, 1, 3))
        k = dc.transpose(dc.reshape(k, (b_sz, t, heads, dh)), (0, 2, 1, 3))
        v = dc.transpose(dc.reshape(v, (b_sz, t, heads, dh)), (0, 2, 1, 3))
        scores = dc.mul(dc.matmul(q, dc.swap_last2(k)), 1.0 / np.sqrt(dh))
        ctx = dc.matmul(dc.softmax(scores), v)
        ctx = dc.reshape(dc.transpose(ctx, (0, 2, 1, 3)), (b_sz, t, d))
        h = dc.add(h, dc.linear(ctx, params[f"{pre}.attn.wo"], params[f"{pre}.attn.bo"]))

        u = dc.layer_norm(h, params[f"{pre}.ln2.g"], params[f"{pre}.ln2.b"])
        u = dc.relu(dc.linear(u, params[f"{pre}.ff.w1"], params[f"{pre}.ff.b1"]))
        h = dc.add(h, dc.linear(u, params[f"{pre}.ff.w2"], params[f"{pre}.ff.b2"]))

    return dc.layer_norm(h, params["enc.ln_out.g"], params["enc.ln_out.b"])


def eda_batch(emb: dc.Tensor, order_idx: np.ndarray, n_steps: int,
              params: dict[str, dc.Tensor]) -> tuple[dc.Tensor, dc.Tensor]:
    """Run the attractor head on (B, T, D) embeddings.

    order_idx (B, T') selects the rows fed to the summary LSTM (shuffle,
    subsampling probes, ...). Returns attractors (B, n_steps, D) and
    existence probabilities (B, n_steps).
    """
    if emb.ndim != 3:
        raise ShapeError("eda_batch expects (B, T, D) embeddings")
    b_sz, _, d = emb.shape
    enc_lstm = _lstm_of(params, "eda.enc")
    dec_lstm = _lstm_of(params, "eda.dec")

    seq = dc.take_rows(emb, np.asarray(order_idx, dtype=np.intp))
    dtype = emb.data.dtype
    h = dc.Tensor(np.zeros((b_sz, d), dtype=dtype))
    c = dc.Tensor(np.zeros((b_sz, d), dtype=dtype))
    for t in range(seq.shape[1]):
        x_t = dc.slice_(seq, (slice(None), t, slice(None)))
        h, c = dc.lstm_cell(x_t, h, c, enc_lstm)

    zero_in = dc.Tensor(np.zeros((b_sz, d), dtype=dtype))
    rows = []
    for _ in range(n_steps):
        h, c = dc.lstm_cell(zero_in, h, c, dec_lstm)
        rows.append(dc.reshape(h, (b_sz, 1, d)))
    attractors = dc.concat(rows, axis=1) if len(rows) > 1 else rows[0]
    logits = dc.add(dc.matmul(attractors, params["eda.exist.w"]), params["eda.exist.b"])
    probs = dc.reshape(dc.sigmoid(logits), (b_sz, n_steps))
    return attractors, probs


def posterior_batch_single(attractors: dc.Tensor, emb_row: dc.Tensor) -> dc.Tensor:
    """sigma(A E^T) for one sample: (S, D) x (T, D) -> (S, T)."""
    return dc.sigmoid(dc.matmul(attractors, dc.swap_last2(emb_row)))


# ---------------------------------------------------------------------------
# single-sequence inference API
# ---------------------------------------------------------------------------


def order_indices(t: int, order, rng_seed: int | None = None) -> tuple[np.ndarray, int | str]:
    """Resolve an input-order spec to explicit indices.

    `order` is "chronological", "shuffled" (seed from rng_seed), or
    ("shuffled", seed).
    """
    if isinstance(order, tuple) and order[0] == "shuffled":
        seed = int(order[1])
        return np.random.default_rng(seed).permutation(t), seed
    if order == "shuffled":
        seed = 0 if rng_seed is None else int(rng_seed)
        return np.random.default_rng(seed).permutation(t), seed
    if order == "chronological":
        return np.arange(t), "chronological"
    raise ValueError(f"unknown order spec {order!r}")


def encode(x: FeatureSequence, cfg: EncoderConfig,
           params: dict[str, dc.Tensor]) -> EmbeddingSequence:
    """Embed one feature sequence (forward only)."""
    with dc.no_grad():
        dtype = params["enc.in_proj.w"].data.dtype
        batch = dc.Tensor(np.asarray(x.frames, dtype=dtype)[None])
        emb = encode_batch(batch, cfg, params)
    return EmbeddingSequence(E=emb.data[0], frame_period_s=x.frame_period_s)


def eda_forward(emb: EmbeddingSequence, order, max_attractors: int,
                params: dict[str, dc.Tensor]) -> AttractorSet:
    """Decode a fixed number of attractors from one embedding sequence."""
    if max_attractors < 1:
        raise ShapeError("max_attractors must be >= 1")
    t = emb.E.shape[0]
    if t < 1:
        raise ShapeError("empty embedding sequence")
    idx, seed = order_indices(t, order)
    with dc.no_grad():
        dtype = params["eda.enc.w_x"].data.dtype
        batch = dc.Tensor(np.asarray(emb.E, dtype=dtype)[None])
        attractors, probs = eda_batch(batch, idx[None], max_attractors, params)
    # Guard against float saturation so probabilities stay strictly inside (0, 1).
    p = np.clip(probs.data[0].astype(np.float64), 1e-12, 1.0 - 1e-12)
    return AttractorSet(A=attractors.data[0], p=p, order_seed=seed)


def eda_stream(emb: EmbeddingSequence, order, params: dict[str, dc.Tensor]):
    """Yield (attractor, existence probability) pairs one decoding step at a
    time, for threshold-stopped inference."""
    t = emb.E.shape[0]
    idx, _ = order_indices(t, order)
    enc_lstm = _lstm_of(params, "eda.enc")
    dec_lstm = _lstm_of(params, "eda.dec")
    dtype = params["eda.enc.w_x"].data.dtype
    with dc.no_grad():
        seq = np.asarray(emb.E, dtype=dtype)[idx]
        h = dc.Tensor(np.zeros((1, seq.shape[1]), dtype=dtype))
        c = dc.Tensor(np.zeros((1, seq.shape[1]), dtype=dtype))
        for t_i in range(seq.shape[0]):
            h, c = dc.lstm_cell(dc.Tensor(seq[t_i : t_i + 1]), h, c, enc_lstm)
        zero_in = dc.Tensor(np.zeros_like(h.data))
        w, b = params["eda.exist.w"], params["eda.exist.b"]
        while True:
            h, c = dc.lstm_cell(zero_in, h, c, dec_lstm)
            logit = float(h.data @ w.data + b.data)
            prob = float(np.clip(1.0 / (1.0 + np.exp(-logit)), 1e-12, 1.0 - 1e-12))
            yield h.data[0].copy(), prob
