"""Batched training loop: corpus manifest -> chunked batches -> encoder +
attractor head -> permutation-free losses -> Adam with warm-up schedule.

Every random draw derives from (seed, epoch) alone, so checkpoints written at
epoch boundaries resume bit-identically in single-worker mode.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from . import model as mdl
from . import objective as obj
from .errors import CheckpointIncompatible, DivergenceError, InputEmpty
from .featfront import FrontendConfig
from .mixsim import read_manifest
from .tensorfile import read_container, read_tensor, write_container

CHECKPOINT_FORMAT = 1


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 8
    chunk_len_frames: int = 500
    alpha: float = obj.ALPHA_SIMULATED
    order_mode: str = "shuffled"  # attractor-head input order per sample
    seed: int = 0
    warmup_steps: int = dc.DESK_WARMUP_STEPS
    base_lr: float = 1.0
    clip_norm: float | None = 5.0
    max_speakers: int = 8
    finetune_from: str | None = None

    def __post_init__(self):
        if self.chunk_len_frames < 1 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("chunk_len_frames >= 1, batch_size >= 1, epochs >= 0 required")
        if self.order_mode not in ("shuffled", "chronological"):
            raise ValueError(f"unknown order_mode {self.order_mode!r}")


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, model_cfg: mdl.ModelConfig, params: dict[str, dc.Tensor],
                    optimizer: dc.Adam | None = None, extra_meta: dict | None = None) -> None:
    tensors = {f"param.{k}": t.data for k, t in params.items()}
    meta = {
        "format": CHECKPOINT_FORMAT,
        "model": model_cfg.to_dict(),
        "config_digest": model_cfg.digest(),
    }
    if optimizer is not None:
        opt_tensors, opt_meta = optimizer.state()
        tensors.update({f"opt.{k}": v for k, v in opt_tensors.items()})
        meta["optimizer"] = opt_meta
    if extra_meta:
        meta.update(extra_meta)
    write_container(path, tensors, meta)


def load_checkpoint(path) -> tuple[mdl.ModelConfig, dict[str, dc.Tensor], dict]:
    tensors, meta = read_container(path)
    model_cfg = mdl.ModelConfig.from_dict(meta["model"])
    params = {}
    for k, v in tensors.items():
        if k.startswith("param."):
            params[k[len("param.") :]] = dc.Tensor(v, requires_grad=True)
    expected = set(mdl.init_params(model_cfg, seed=0))
    if set(params) != expected:
        raise CheckpointIncompatible(
            f"{path}: parameter set does not match the stored model config"
        )
    return model_cfg, params, meta


def _load_optimizer(path, params: dict[str, dc.Tensor], meta: dict,
                    cfg: TrainConfig, d_model: int) -> dc.Adam:
    adam = dc.Adam(params, d_model=d_model, warmup_steps=cfg.warmup_steps,
                   base_lr=cfg.base_lr, clip_norm=cfg.clip_norm)
    if "optimizer" in meta:
        tensors, _ = read_container(path)
        opt_tensors = {k[len("opt.") :]: v for k, v in tensors.items() if k.startswith("opt.")}
        adam.load_state(opt_tensors, meta["optimizer"])
    return adam


# ---------------------------------------------------------------------------
# data plumbing
# ---------------------------------------------------------------------------


class _Corpus:
    def __init__(self, manifest_path):
        self.records = read_manifest(manifest_path)
        if not self.records:
            raise InputEmpty(f"{manifest_path}: manifest has no records")
        self.base = os.path.dirname(os.path.abspath(manifest_path))

    def __len__(self):
        return len(self.records)

    def load(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        rec = self.records[i]
        feats = read_tensor(os.path.join(self.base, rec["features"])).astype(np.float32)
        labels = read_tensor(os.path.join(self.base, rec["labels"]))
        return feats, labels


def _chunk_batch(corpus: _Corpus, idxs, rng: np.random.Generator,
                 cfg: TrainConfig) -> tuple[np.ndarray, list[np.ndarray], np.ndarray]:
    """Sample aligned feature/label chunks; silent speakers are dropped per chunk."""
    loaded = [corpus.load(i) for i in idxs]
    chunk = min(cfg.chunk_len_frames, min(f.shape[0] for f, _ in loaded))
    feats, labels, orders = [], [], []
    for f, y in loaded:
        start = int(rng.integers(f.shape[0] - chunk + 1)) if f.shape[0] > chunk else 0
        feats.append(f[start : start + chunk])
        y_chunk = y[start : start + chunk]
        active = y_chunk.any(axis=0)
        labels.append(y_chunk[:, active].astype(np.float32))
        if cfg.order_mode == "shuffled":
            orders.append(rng.permutation(chunk))
        else:
            orders.append(np.arange(chunk))
    return np.stack(feats), labels, np.stack(orders)


# ---------------------------------------------------------------------------
# trainer
# ---------------------------------------------------------------------------


class Trainer:
    def __init__(self, model_cfg: mdl.ModelConfig, params: dict[str, dc.Tensor],
                 cfg: TrainConfig, optimizer: dc.Adam | None = None):
        self.model_cfg = model_cfg
        self.params = params
        self.cfg = cfg
        self.adam = optimizer or dc.Adam(
            params, d_model=model_cfg.encoder.d_model, warmup_steps=cfg.warmup_steps,
            base_lr=cfg.base_lr, clip_norm=cfg.clip_norm,
        )

    def batch_losses(self, feats: np.ndarray, labels: list[np.ndarray],
                     orders: np.ndarray) -> tuple[dc.Tensor, float, float]:
        """Mean total loss over the batch plus detached l_d / l_a means."""
        b_sz = feats.shape[0]
        s_list = [y.shape[1] for y in labels]
        emb = mdl.encode_batch(dc.Tensor(feats), self.model_cfg.encoder, self.params)
        attractors, probs = mdl.eda_batch(emb, orders, max(s_list) + 1, self.params)

        total = None
        ld_sum = la_sum = 0.0
        for b in range(b_sz):
            s_b = s_list[b]
            p_b = dc.slice_(probs, (b, slice(0, s_b + 1)))
            l_a = obj.attractor_existence_loss(p_b, s_b)
            if s_b > 0:
                att = dc.slice_(attractors, (b, slice(0, s_b)))
                post = mdl.posterior_batch_single(att, dc.slice_(emb, (b,)))
                l_d, _ = obj.pit_loss(post, labels[b], use_hungarian=True,
                                      exhaustive_cap=self.cfg.max_speakers)
            else:
                l_d = dc.Tensor(np.zeros((), dtype=feats.dtype))
            sample_total = obj.total_loss(l_d, l_a, self.cfg.alpha)
            total = sample_total if total is None else dc.add(total, sample_total)
            ld_sum += float(l_d.data)
            la_sum += float(l_a.data)
        return dc.mul(total, 1.0 / b_sz), ld_sum / b_sz, la_sum / b_sz

    def train_step(self, feats, labels, orders) -> dict:
        loss, l_d, l_a = self.batch_losses(feats, labels, orders)
        total = float(loss.data)
        if not np.isfinite(total):
            raise DivergenceError(
                f"non-finite loss at optimizer step {self.adam.step_count + 1}: "
                f"l_d={l_d} l_a={l_a}"
            )
        self.adam.zero_grad()
        loss.backward()
        lr = self.adam.step()
        return {"l_d": l_d, "l_a": l_a, "total": total, "lr": lr}


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, 0xE0, epoch])


def train(manifest_path, cfg: TrainConfig, out_dir,
          model_cfg: mdl.ModelConfig | None = None,
          frontend: FrontendConfig | None = None,
          resume_from: str | None = None,
          progress=None) -> str:
    """Train (or resume) on a simulated corpus; returns the checkpoint path.

    Writes `metrics.jsonl` (one record per optimizer step) and a checkpoint
    per epoch under out_dir.
    """
    os.makedirs(out_dir, exist_ok=True)
    corpus = _Corpus(manifest_path)
    fe = frontend or FrontendConfig()

    start_epoch, step = 0, 0
    if resume_from is not None:
        model_cfg, params, meta = load_checkpoint(resume_from)
        adam = _load_optimizer(resume_from, params, meta, cfg, model_cfg.encoder.d_model)
        start_epoch = int(meta.get("epochs_done", 0))
        step = adam.step_count
    else:
        model_cfg = model_cfg or mdl.toy_config()
        params = mdl.init_params(model_cfg, seed=cfg.seed)
        adam = None

    trainer = Trainer(model_cfg, params, cfg, optimizer=adam)
    ckpt_path = os.path.join(out_dir, "checkpoint.edat")
    meta_common = {
        "frontend": fe.__dict__,
        "train_seed": cfg.seed,
        "order_mode": cfg.order_mode,
        "alpha": cfg.alpha,
    }

    mode = "a" if resume_from is not None else "w"
    with open(os.path.join(out_dir, "metrics.jsonl"), mode, encoding="utf-8") as log:
        for epoch in range(start_epoch, cfg.epochs):
            rng = _epoch_rng(cfg.seed, epoch)
            order = rng.permutation(len(corpus))
            for lo in range(0, len(order), cfg.batch_size):
                idxs = order[lo : lo + cfg.batch_size]
                feats, labels, orders = _chunk_batch(corpus, idxs, rng, cfg)
                metrics = trainer.train_step(feats, labels, orders)
                step += 1
                row = {"step": step, "epoch": epoch, **metrics}
                log.write(json.dumps(row) + "\n")
            log.flush()
            save_checkpoint(
                os.path.join(out_dir, f"ckpt-epoch{epoch:03d}.edat"),
                model_cfg, params, trainer.adam,
                {**meta_common, "epochs_done": epoch + 1, "step": step},
            )
            save_checkpoint(ckpt_path, model_cfg, params, trainer.adam,
                            {**meta_common, "epochs_done": epoch + 1, "step": step})
            if progress is not None:
                progress(epoch, step)
    if cfg.epochs == start_epoch:
        save_checkpoint(ckpt_path, model_cfg, params, trainer.adam,
                        {**meta_common, "epochs_done": start_epoch, "step": step})
    return ckpt_path


def finetune(checkpoint_path, manifest_path, cfg: TrainConfig, out_dir,
             frontend: FrontendConfig | None = None, progress=None) -> str:
    """Continue training from a checkpoint on a (possibly different) corpus.

    A fresh optimizer/schedule is used; alpha comes from cfg (0.01 preset for
    adaptation-style runs). Zero epochs copies the model through unchanged.
    """
    os.makedirs(out_dir, exist_ok=True)
    model_cfg, params, meta = load_checkpoint(checkpoint_path)
    fe = frontend or FrontendConfig(**meta.get("frontend", {}))
    corpus = _Corpus(manifest_path)
    sample_feats, _ = corpus.load(0)
    if sample_feats.shape[1] != model_cfg.encoder.input_dim:
        raise CheckpointIncompatible(
            f"corpus features have dim {sample_feats.shape[1]}, checkpoint expects "
            f"{model_cfg.encoder.input_dim}"
        )

    trainer = Trainer(model_cfg, params, cfg)
    ckpt_path = os.path.join(out_dir, "checkpoint.edat")
    meta_common = {
        "frontend": fe.__dict__,
        "train_seed": cfg.seed,
        "order_mode": cfg.order_mode,
        "alpha": cfg.alpha,
        "finetuned_from": str(checkpoint_path),
    }
    step = 0
    with open(os.path.join(out_dir, "metrics.jsonl"), "w", encoding="utf-8") as log:
        for epoch in range(cfg.epochs):
            rng = _epoch_rng(cfg.seed, epoch)
            order = rng.permutation(len(corpus))
            for lo in range(0, len(order), cfg.batch_size):
                idxs = order[lo : lo + cfg.batch_size]
                feats, labels, orders = _chunk_batch(corpus, idxs, rng, cfg)
                metrics = trainer.train_step(feats, labels, orders)
                step += 1
                log.write(json.dumps({"step": step, "epoch": epoch, **metrics}) + "\n")
            log.flush()
            save_checkpoint(ckpt_path, model_cfg, params, trainer.adam,
                            {**meta_common, "epochs_done": epoch + 1, "step": step})
            if progress is not None:
                progress(epoch, step)
    if cfg.epochs == 0:
        save_checkpoint(ckpt_path, model_cfg, params, None,
                        {**meta_common, "epochs_done": 0, "step": 0})
    return ckpt_path
