"""AdamW with decoupled weight decay and a warm-restart cosine schedule."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import torch


@dataclass
class OptimizerState:
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-6
    weight_decay: float = 0.01
    step: int = 0
    exp_avg: dict = field(default_factory=dict)
    exp_avg_sq: dict = field(default_factory=dict)

    def hyper(self) -> dict:
        return {"beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
                "weight_decay": self.weight_decay, "step": self.step}


@torch.no_grad()
def adamw_step(params: dict, grads: dict, state: OptimizerState, lr: float) -> None:
    """In-place AdamW update of ``params`` (name -> tensor).

    Parameters whose gradient is missing are left untouched, including by
    weight decay, so frozen tensors stay bit-identical.
    """
    state.step += 1
    t = state.step
    bias1 = 1.0 - state.beta1**t
    bias2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if name not in state.exp_avg:
            state.exp_avg[name] = torch.zeros_like(p)
            state.exp_avg_sq[name] = torch.zeros_like(p)
        m, v = state.exp_avg[name], state.exp_avg_sq[name]
        if m.shape != p.shape:
            raise ValueError(f"optimizer state for {name} has shape {tuple(m.shape)}")
        p.mul_(1.0 - lr * state.weight_decay)
        m.mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
        v.mul_(state.beta2).addcmul_(g, g, value=1.0 - state.beta2)
        denom = (v / bias2).sqrt_().add_(state.eps)
        p.addcdiv_(m, denom, value=-lr / bias1)


class AdamW:
    """Stateful wrapper over :func:`adamw_step` for an ``nn.Module``."""

    def __init__(self, module, beta1=0.9, beta2=0.98, eps=1e-6, weight_decay=0.01):
        self.params = dict(module.named_parameters())
        self.state = OptimizerState(beta1, beta2, eps, weight_decay)

    def step(self, lr: float) -> None:
        grads = {n: p.grad for n, p in self.params.items()
                 if p.requires_grad and p.grad is not None}
        adamw_step(self.params, grads, self.state, lr)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


@dataclass(frozen=True)
class LrSchedule:
    """Linear warm-up, then cosine cycles that shrink after every restart."""

    lr_max: float = 1e-3
    lr_min: float = 5e-7
    warmup_steps: int = 3000
    cycle_steps: int = 30000
    cycle_length_scale: float = 0.9
    lr_max_scale: float = 0.5

    def to_dict(self) -> dict:
        return asdict(self)

    def cycle_at(self, step: int):
        """``(cycle index, position in cycle, cycle length, cycle peak lr)``."""
        t = step - self.warmup_steps
        index, length, peak = 0, self.cycle_steps, self.lr_max
        while True:
            n = max(2, int(round(length)))
            if t < n:
                return index, t, n, peak
            t -= n
            index += 1
            length *= self.cycle_length_scale
            peak *= self.lr_max_scale
            if peak <= self.lr_min:
                return index, 0, 2, self.lr_min


def lr_at(step: int, schedule: LrSchedule | None = None) -> float:
    schedule = schedule or LrSchedule()
    if step < 0:
        raise ValueError("step must be non-negative")
    if step < schedule.warmup_steps:
        return schedule.lr_max * step / schedule.warmup_steps
    _, t, n, peak = schedule.cycle_at(step)
    if peak <= schedule.lr_min:
        return schedule.lr_min
    cosine = 0.5 * (1.0 + math.cos(math.pi * t / (n - 1)))
    return schedule.lr_min + (peak - schedule.lr_min) * cosine
