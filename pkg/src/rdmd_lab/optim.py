from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from rdmd_lab.errors import ShapeError, ValidationError

Params = dict[str, np.ndarray]


@dataclass
class AdamState:
    step: int = 0
    m: Params = field(default_factory=dict)
    v: Params = field(default_factory=dict)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def copy(self) -> "AdamState":
        return AdamState(
            step=self.step,
            m={k: a.copy() for k, a in self.m.items()},
            v={k: a.copy() for k, a in self.v.items()},
            beta1=self.beta1,
            beta2=self.beta2,
            eps=self.eps,
        )


def adam_step(params: Params, grads: Params, state: AdamState, lr: float) -> tuple[Params, AdamState]:
    """One bias-corrected Adam update. Inputs are not mutated."""
    if lr <= 0:
        raise ValidationError(f"adam_step: lr must be > 0, got {lr}")
    missing = sorted(set(params) - set(grads))
    if missing:
        raise ValidationError(f"adam_step: no gradient for {', '.join(missing)}")

    step = state.step + 1
    bc1 = 1.0 - state.beta1 ** step
    bc2 = 1.0 - state.beta2 ** step
    new_params: Params = {}
    new_m: Params = {}
    new_v: Params = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"adam_step: gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        elif m.shape != p.shape:
            raise ShapeError(f"adam_step: moment for {name} has shape {m.shape}, parameter {p.shape}")
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        new_params[name] = p - lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        new_m[name] = m
        new_v[name] = v

    new_state = AdamState(step=step, m=new_m, v=new_v, beta1=state.beta1, beta2=state.beta2, eps=state.eps)
    return new_params, new_state


class Adam:
    """Holds an ``AdamState`` and updates a parameter dict in place."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise ValidationError(f"Adam: lr must be > 0, got {lr}")
        self.lr = lr
        self.state = AdamState(beta1=beta1, beta2=beta2, eps=eps)

    def step(self, params: Params, grads: Params) -> None:
        updated, self.state = adam_step(params, grads, self.state, self.lr)
        params.update(updated)
