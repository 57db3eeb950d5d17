"""Training loop: BCE on decoded occupancy plus an auxiliary clean-feature term.

Each step simulates one (or a small batch of) freshly seeded scenarios just
long enough to fill the buffer and let packets flow, computes the loss on
the final tick, and applies one adaptive-moment update. The auxiliary term
pulls the denoiser-stage output toward the perfect-channel integration of
the same tick (weight 0.1), giving the denoiser a direct correction signal.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .ops import bce_with_logits, tmean
from .pipeline import Pipeline, PipelineConfig, simulate
from .tensor import Parameter, Tape, Tensor
from .world import make_scenario

AUX_WEIGHT = 0.1


class DivergenceError(RuntimeError):
    """Loss became nonfinite (CLI exit code 3)."""

    def __init__(self, step: int, value: float):
        super().__init__(f"loss diverged at step {step}: {value}")
        self.step = step
        self.value = value


class Adam:
    """First-order adaptive-moment optimizer with bias correction."""

    def __init__(self, params: dict[str, Parameter], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            update = (self.m[name] / b1c) / (np.sqrt(self.v[name] / b2c) + self.eps)
            p.data = p.data - self.lr * update
            p.grad = None


@dataclass
class TrainResult:
    pipeline: Pipeline
    loss_curve: list[tuple[int, float, float, float]]  # step, loss, bce, aux


def train_scenario_seed(cfg: PipelineConfig, step: int, index: int = 0) -> int:
    return (cfg.training.seed * 1_000_003 + step * 31 + index) & 0x7FFFFFFF


def train(cfg: PipelineConfig, pipe: Pipeline | None = None) -> TrainResult:
    cfg.validate()
    if pipe is None:
        pipe = Pipeline(cfg)
    opt = Adam(pipe.parameters(), lr=cfg.training.learning_rate)
    ticks = cfg.warmup_ticks_for() + 1
    curve: list[tuple[int, float, float, float]] = []

    for step in range(cfg.training.steps):
        with Tape() as tape:
            loss = None
            bce_val = aux_val = 0.0
            for b in range(cfg.training.batch_scenes):
                scen = make_scenario(train_scenario_seed(cfg, step, b), cfg.channel,
                                     ticks, n_agents=cfg.n_agents,
                                     n_objects=cfg.n_objects, bounds=cfg.bounds_m,
                                     fov_ego=cfg.fov_ego_m, fov_collab=cfg.fov_collab_m)
                out = simulate(pipe, scen, measure=lambda t: t == ticks - 1)[-1]
                bce = bce_with_logits(out.logits, out.gt_occupancy)
                diff = out.denoised - Tensor(out.clean_reference)
                aux = tmean(diff * diff)
                term = bce + AUX_WEIGHT * aux
                loss = term if loss is None else loss + term
                bce_val += bce.item()
                aux_val += aux.item()
            if cfg.training.batch_scenes > 1:
                loss = loss * (1.0 / cfg.training.batch_scenes)
        total = loss.item()
        if not math.isfinite(total):
            raise DivergenceError(step, total)
        curve.append((step, total, bce_val / cfg.training.batch_scenes,
                      aux_val / cfg.training.batch_scenes))
        tape.backward(loss)
        opt.step()
    return TrainResult(pipeline=pipe, loss_curve=curve)
