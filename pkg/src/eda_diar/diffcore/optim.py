"""Adam with the inverse-square-root warm-up learning-rate schedule."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor

# Warm-up length used for paper-scale runs; desk-scale presets shrink it so
# toy trainings actually leave the ramp.
PAPER_WARMUP_STEPS = 100_000
DESK_WARMUP_STEPS = 4_000


def lr_at(step: int, d_model: int, warmup_steps: int, base_lr: float = 1.0) -> float:
    """base_lr * d_model^-0.5 * min(step^-0.5, step * warmup^-1.5); peak at warmup."""
    if step < 1:
        raise ValueError("schedule is defined for step >= 1")
    return base_lr * d_model ** -0.5 * min(step ** -0.5, step * warmup_steps ** -1.5)


class Adam:
    """Adam over a named parameter dict, with optional global-norm clipping.

    Moment estimates live in the same dtype as the parameters. `state()` /
    `load_state()` round-trip everything needed to resume mid-schedule.
    """

    def __init__(self, params: dict[str, Tensor], d_model: int,
                 warmup_steps: int = DESK_WARMUP_STEPS, base_lr: float = 1.0,
                 betas: tuple[float, float] = (0.9, 0.98), eps: float = 1e-9,
                 clip_norm: float | None = None):
        self.params = params
        self.d_model = d_model
        self.warmup_steps = warmup_steps
        self.base_lr = base_lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.step_count = 0
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def step(self) -> float:
        """Apply one update from the accumulated gradients; returns the lr used."""
        self.step_count += 1
        lr = lr_at(self.step_count, self.d_model, self.warmup_steps, self.base_lr)

        grads = {}
        for k, t in self.params.items():
            g = t.grad if t.grad is not None else np.zeros_like(t.data)
            grads[k] = np.asarray(g, dtype=t.data.dtype)

        if self.clip_norm is not None:
            total = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            if total > self.clip_norm:
                scale = self.clip_norm / total
                grads = {k: g * scale for k, g in grads.items()}

        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.step_count
        bc2 = 1.0 - b2 ** self.step_count
        for k, t in self.params.items():
            g = grads[k]
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * (g * g)
            m_hat = self.m[k] / bc1
            v_hat = self.v[k] / bc2
            t.data = t.data - (lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(t.data.dtype)
        return lr

    def state(self) -> tuple[dict[str, np.ndarray], dict]:
        tensors = {}
        for k in self.params:
            tensors[f"m.{k}"] = self.m[k]
            tensors[f"v.{k}"] = self.v[k]
        meta = {
            "step_count": self.step_count,
            "warmup_steps": self.warmup_steps,
            "base_lr": self.base_lr,
            "d_model": self.d_model,
            "betas": [self.beta1, self.beta2],
            "eps": self.eps,
            "clip_norm": self.clip_norm,
        }
        return tensors, meta

    def load_state(self, tensors: dict[str, np.ndarray], meta: dict) -> None:
        self.step_count = int(meta["step_count"])
        self.warmup_steps = int(meta["warmup_steps"])
        self.base_lr = float(meta["base_lr"])
        self.d_model = int(meta["d_model"])
        self.beta1, self.beta2 = (float(b) for b in meta["betas"])
        self.eps = float(meta["eps"])
        self.clip_norm = None if meta["clip_norm"] is None else float(meta["clip_norm"])
        for k, t in self.params.items():
            self.m[k] = np.asarray(tensors[f"m.{k}"], dtype=t.data.dtype).reshape(t.data.shape)
            self.v[k] = np.asarray(tensors[f"v.{k}"], dtype=t.data.dtype).reshape(t.data.shape)
