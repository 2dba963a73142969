"""AdamW with a one-cycle learning rate; global-norm gradient clipping."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Iterable

import numpy as np

from ..nn.tensor import Parameter


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass(frozen=True)
class OptimConfig:
    peak_lr: float = 3e-3
    warmup_fraction: float = 0.3
    start_div: float = 25.0
    final_div: float = 1e4
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    micro_batch: int = 64
    accumulation_steps: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive")
        if self.micro_batch < 1 or self.accumulation_steps < 1:
            raise ValueError("micro_batch and accumulation_steps must be >= 1")
        if not 0.0 < self.warmup_fraction < 1.0:
            raise ValueError("warmup_fraction must be in (0, 1)")

    @property
    def effective_batch(self) -> int:
        return self.micro_batch * self.accumulation_steps

    def to_dict(self) -> dict:
        return asdict(self)


def one_cycle_lr(step: int, total_steps: int, config: OptimConfig) -> float:
    """Cosine ramp from ``peak/start_div`` to ``peak``, then cosine decay to ``peak/final_div``."""
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    peak = config.peak_lr
    start, final = peak / config.start_div, peak / config.final_div
    if total_steps == 1:
        return peak
    warm = min(max(1, round(config.warmup_fraction * total_steps)), total_steps - 1)
    if step <= warm:
        return start + (peak - start) * (1.0 - math.cos(math.pi * step / warm)) / 2.0
    span = total_steps - 1 - warm
    frac = (step - warm) / span
    return final + (peak - final) * (1.0 + math.cos(math.pi * frac)) / 2.0


def clip_gradients(params: Iterable[Parameter], max_norm: float) -> float:
    """Scale trainable gradients so their global L2 norm is at most ``max_norm``."""
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    trainable = [p for p in params if p.trainable and p.grad is not None]
    total = math.sqrt(sum(float(np.sum(np.square(p.grad, dtype=np.float64))) for p in trainable))
    if total <= max_norm or total == 0.0:
        return 1.0
    factor = max_norm / total
    for p in trainable:
        p.grad *= factor
    return factor


def _decays(name: str) -> bool:
    return not (name.endswith("bias") or name.endswith("fusion"))


class AdamW:
    """Decoupled weight decay Adam; frozen parameters are skipped entirely."""

    def __init__(self, params: dict[str, Parameter], config: OptimConfig):
        self.params = params
        self.config = config
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, lr: float, weight_decay: float | None = None) -> None:
        c = self.config
        wd = c.weight_decay if weight_decay is None else weight_decay
        live = [(n, p) for n, p in self.params.items() if p.trainable]
        for n, p in live:
            if p.grad is None or not np.isfinite(p.grad).all():
                raise NonFiniteGradient(f"non-finite gradient in {n}; step aborted")
        self.t += 1
        bc1 = 1.0 - c.beta1**self.t
        bc2 = 1.0 - c.beta2**self.t
        for n, p in live:
            g = p.grad
            m = self.m.setdefault(n, np.zeros_like(p.data))
            v = self.v.setdefault(n, np.zeros_like(p.data))
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * (g * g)
            if wd and _decays(n):
                p.data *= 1.0 - lr * wd
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + c.eps)

    def state_dict(self) -> dict:
        return {"t": self.t, "m": dict(self.m), "v": dict(self.v)}

    def load_state_dict(self, state: dict) -> None:
        self.t = int(state["t"])
        self.m = {k: np.array(v) for k, v in state["m"].items()}
        self.v = {k: np.array(v) for k, v in state["v"].items()}
