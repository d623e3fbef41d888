"""First-order moment-based optimizer and the training learning-rate schedules."""

from __future__ import annotations

import numpy as np

from .errors import NumericsError

__all__ = ["Adam", "focal_lr", "ExponentialDecay"]


class Adam:
    """Adam over named parameter groups of numpy arrays.

    Each group keeps its own learning rate, moment buffers, and step counter;
    bias correction uses the per-group count. betas/epsilon default to
    (0.9, 0.999, 1e-8).
    """

    def __init__(self, learning_rates: dict, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.learning_rates = dict(learning_rates)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.steps: dict[str, int] = {}

    def step(self, params: dict, grads: dict, only: list | None = None) -> None:
        """Apply one update in place to every group present in ``grads``
        (restricted to ``only`` when given). Raises on non-finite gradients,
        naming the offending group."""
        for name, g in grads.items():
            if only is not None and name not in only:
                continue
            if name not in params:
                raise KeyError(f"unknown parameter group '{name}'")
            g = np.asarray(g, dtype=np.float64)
            if not np.all(np.isfinite(g)):
                raise NumericsError(f"non-finite gradient in parameter group '{name}'")
            p = params[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
                self.steps[name] = 0
            self.steps[name] += 1
            t = self.steps[name]
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            m_hat = self.m[name] / (1 - self.beta1**t)
            v_hat = self.v[name] / (1 - self.beta2**t)
            p -= self.learning_rates[name] * m_hat / (np.sqrt(v_hat) + self.eps)

    def ensure_rows(self, name: str, n_rows: int) -> None:
        """Grow a group's moment buffers to ``n_rows`` leading rows (new rows
        start at zero); used when the scene densifies."""
        if name not in self.m:
            return
        cur = self.m[name].shape[0]
        if n_rows <= cur:
            return
        pad = (n_rows - cur,) + self.m[name].shape[1:]
        self.m[name] = np.concatenate([self.m[name], np.zeros(pad)])
        self.v[name] = np.concatenate([self.v[name], np.zeros(pad)])

    def keep_rows(self, name: str, keep: np.ndarray) -> None:
        """Drop moment rows where ``keep`` is False (pruning)."""
        if name in self.m:
            self.m[name] = self.m[name][keep]
            self.v[name] = self.v[name][keep]


def focal_lr(step: int, base: float = 5e-3, floor: float = 1e-4,
             frozen_steps: int = 100, span: int = 500) -> float:
    """Focal-length learning rate: zero while frozen, then a linear decay with
    a floor: max(floor, base * (1 - step/span))."""
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    if step <= frozen_steps:
        return 0.0
    return max(floor, base * (1.0 - step / span))


class ExponentialDecay:
    """lr(k) = base * 0.5^(k / half_life): exponential decay indexed by the
    group's own step counter, continuing seamlessly across training phases."""

    def __init__(self, base: float, half_life: float = 250.0):
        if base < 0 or half_life <= 0:
            raise ValueError("base must be >= 0 and half_life > 0")
        self.base = base
        self.half_life = half_life

    def __call__(self, step: int) -> float:
        return self.base * 0.5 ** (step / self.half_life)
