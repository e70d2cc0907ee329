"""Inference: features -> embeddings -> attractors -> speaker count ->
posteriors -> binarized segments, plus the input-order / subsampling probes
and a 2-D projection export for plotting.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import model as mdl
from .errors import ConfigInvalid, EmptyDiarization, InputEmpty, ShapeError
from .featfront import FeatureSequence
from .score import RttmSegment, segments_from_activity


@dataclass
class InferConfig:
    tau: float = 0.5
    activity_threshold: float = 0.5
    median_filter_frames: int = 11
    order_mode: str = "shuffled"
    seed: int = 0
    oracle_speaker_count: int | None = None
    probe: tuple[str, int] | None = None  # ("subsample", N) or ("last", N)
    max_attractors: int = 20

    def __post_init__(self):
        if not (0.0 < self.tau < 1.0):
            raise ConfigInvalid("tau must be inside (0, 1)")
        if self.median_filter_frames < 1 or self.median_filter_frames % 2 == 0:
            raise ConfigInvalid("median_filter_frames must be odd and >= 1")
        if self.order_mode not in ("shuffled", "chronological"):
            raise ConfigInvalid(f"unknown order_mode {self.order_mode!r}")


@dataclass
class PosteriorMatrix:
    probs: np.ndarray  # (S, T), strictly inside (0, 1)
    frame_period_s: float

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=np.float64)
        if probs.ndim != 2:
            raise ShapeError("posterior matrix must be (S, T)")
        # float saturation guard keeps entries strictly inside (0, 1)
        self.probs = np.clip(probs, 1e-12, 1.0 - 1e-12)


@dataclass
class DiarizationResult:
    recording_id: str
    n_speakers: int
    segments: list[RttmSegment]
    activity: np.ndarray  # (T, S) binary
    posteriors: PosteriorMatrix | None
    existence_probs: np.ndarray
    attractors: np.ndarray  # (S, D)
    embeddings: mdl.EmbeddingSequence


def estimate_speaker_count(p, tau: float) -> int:
    """Largest 1-based index with p_s >= tau; 0 when no entry qualifies."""
    p = np.asarray(p, dtype=np.float64)
    if p.size == 0:
        raise InputEmpty("empty probability vector")
    hits = np.flatnonzero(p >= tau)
    return int(hits[-1] + 1) if hits.size else 0


def posteriors(attractors: np.ndarray, emb: mdl.EmbeddingSequence) -> PosteriorMatrix:
    """sigma(A E^T): activity probability of every attractor at every frame."""
    a = np.asarray(attractors, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] < 1:
        raise EmptyDiarization("no attractors; emit an empty hypothesis")
    if a.shape[1] != emb.E.shape[1]:
        raise ShapeError(f"attractor dim {a.shape[1]} != embedding dim {emb.E.shape[1]}")
    logits = a @ np.asarray(emb.E, dtype=np.float64).T
    return PosteriorMatrix(probs=1.0 / (1.0 + np.exp(-logits)),
                           frame_period_s=emb.frame_period_s)


def median_filter_rows(x: np.ndarray, width: int) -> np.ndarray:
    """Running median along axis 1 with edge replication."""
    if width <= 1:
        return x
    half = width // 2
    padded = np.pad(x, ((0, 0), (half, half)), mode="edge")
    windows = np.lib.stride_tricks.sliding_window_view(padded, width, axis=1)
    return np.median(windows, axis=-1)


def binarize(post: PosteriorMatrix, cfg: InferConfig,
             recording_id: str = "rec", speaker_ids=None):
    """Threshold median-filtered posteriors; returns (activity, segments)."""
    smooth = median_filter_rows(post.probs, cfg.median_filter_frames)
    activity = (smooth >= cfg.activity_threshold).astype(np.uint8).T  # (T, S)
    if speaker_ids is None:
        speaker_ids = [f"spk{i:02d}" for i in range(activity.shape[1])]
    segments = segments_from_activity(activity, post.frame_period_s, speaker_ids, recording_id)
    return activity, segments


def probe_transform(emb: mdl.EmbeddingSequence, probe) -> mdl.EmbeddingSequence:
    """Reduce the attractor-head input: keep every Nth row, or the last 1/N."""
    if probe is None:
        return emb
    kind, n = probe
    if n < 1:
        raise ConfigInvalid("probe factor must be >= 1")
    t = emb.E.shape[0]
    if kind == "subsample":
        rows = emb.E[::n]
    elif kind == "last":
        keep = -(-t // n)  # ceil(T / N)
        rows = emb.E[t - keep :]
    else:
        raise ConfigInvalid(f"unknown probe kind {kind!r}")
    if rows.shape[0] == 0:
        raise InputEmpty("probe transform removed every row")
    return mdl.EmbeddingSequence(E=rows, frame_period_s=emb.frame_period_s)


def decode_attractors(emb: mdl.EmbeddingSequence, params, cfg: InferConfig):
    """Decode until the existence probability drops below tau (or the cap).

    Returns (attractor matrix (k, D), probability vector (k,)).
    """
    order = ("shuffled", cfg.seed) if cfg.order_mode == "shuffled" else "chronological"
    rows, probs = [], []
    for a, p in mdl.eda_stream(emb, order, params):
        rows.append(a)
        probs.append(p)
        if p < cfg.tau or len(rows) >= cfg.max_attractors:
            break
    return np.stack(rows), np.asarray(probs)


def diarize(features: FeatureSequence, model_cfg: mdl.ModelConfig, params,
            cfg: InferConfig, recording_id: str = "rec") -> DiarizationResult:
    """Full pipeline on one recording.

    The probe transform only feeds the attractor head; posteriors are always
    computed against the full embedding sequence. A zero speaker estimate
    yields an empty hypothesis rather than an error.
    """
    emb = mdl.encode(features, model_cfg.encoder, params)
    head_input = probe_transform(emb, cfg.probe)
    order = ("shuffled", cfg.seed) if cfg.order_mode == "shuffled" else "chronological"

    if cfg.oracle_speaker_count is not None:
        n_spk = int(cfg.oracle_speaker_count)
        if n_spk < 0:
            raise ConfigInvalid("oracle_speaker_count must be >= 0")
        if n_spk > 0:
            att_set = mdl.eda_forward(head_input, order, n_spk, params)
            attractors, probs = att_set.A, att_set.p
        else:
            attractors, probs = np.zeros((0, emb.E.shape[1])), np.zeros(0)
    else:
        attractors, probs = decode_attractors(head_input, params, cfg)
        n_spk = estimate_speaker_count(probs, cfg.tau)
        attractors = attractors[:n_spk]

    if n_spk == 0:
        return DiarizationResult(
            recording_id=recording_id, n_speakers=0, segments=[],
            activity=np.zeros((features.num_frames, 0), dtype=np.uint8),
            posteriors=None, existence_probs=probs,
            attractors=np.zeros((0, emb.E.shape[1])), embeddings=emb,
        )

    post = posteriors(attractors, emb)
    activity, segments = binarize(post, cfg, recording_id)
    return DiarizationResult(
        recording_id=recording_id, n_speakers=n_spk, segments=segments,
        activity=activity, posteriors=post, existence_probs=probs,
        attractors=attractors, embeddings=emb,
    )


# ---------------------------------------------------------------------------
# 2-D projection export
# ---------------------------------------------------------------------------


def project2d(emb_rows: np.ndarray, attractors: np.ndarray | None = None):
    """Project embeddings (and attractors, with the same basis) onto the two
    principal components, ordered by explained variance.

    Returns (embedding_xy, attractor_xy, explained_variance).
    """
    e = np.asarray(emb_rows, dtype=np.float64)
    if e.ndim != 2 or e.shape[0] < 2:
        raise ShapeError("need at least two embedding rows")
    mean = e.mean(axis=0)
    centered = e - mean
    cov = centered.T @ centered / e.shape[0]
    evals, evecs = np.linalg.eigh(cov)
    top = np.argsort(evals)[::-1][:2]
    basis = evecs[:, top]
    # deterministic sign: largest-magnitude coefficient of each axis positive
    for k in range(basis.shape[1]):
        j = int(np.argmax(np.abs(basis[:, k])))
        if basis[j, k] < 0:
            basis[:, k] = -basis[:, k]
    emb_xy = centered @ basis
    att_xy = None
    if attractors is not None and len(attractors):
        att_xy = (np.asarray(attractors, dtype=np.float64) - mean) @ basis
    variance = np.maximum(evals[top], 0.0)
    return emb_xy, att_xy, variance


def projection_csv(emb_xy: np.ndarray, att_xy: np.ndarray | None,
                   silence_frames: np.ndarray | None = None) -> str:
    """CSV rows (x, y, kind, frame) for plotting; kind distinguishes
    embeddings, attractors and silence-frame embeddings."""
    silent = set() if silence_frames is None else set(int(i) for i in silence_frames)
    lines = ["x,y,kind,frame"]
    for t, (x, y) in enumerate(emb_xy):
        kind = "silence-frame" if t in silent else "embedding"
        lines.append(f"{x:.6f},{y:.6f},{kind},{t}")
    if att_xy is not None:
        for s, (x, y) in enumerate(att_xy):
            lines.append(f"{x:.6f},{y:.6f},attractor,{s}")
    return "\n".join(lines) + "\n"
