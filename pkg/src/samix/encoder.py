"""Small convolutional backbone with classifier and projector heads."""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import engine as E
from .engine import Tensor


@dataclass
class EncoderConfig:
    channels: tuple[int, ...] = (16, 32, 64, 128)
    in_channels: int = 3
    tap_stage: int = 3
    proj_hidden: int = 128
    proj_dim: int = 64
    num_classes: int = 4
    pool: str = "max"  # or "avg"

    @property
    def embed_dim(self) -> int:
        return self.channels[-1]

    @property
    def tap_channels(self) -> int:
        return self.channels[self.tap_stage - 1]


class EncoderOutput(NamedTuple):
    z_l: Tensor  # stage-`tap_stage` activation, before pooling
    embedding: Tensor  # global-average-pooled last stage
    logits: Tensor
    projected: Tensor  # unit-norm projector output


def _kaiming(rng, shape, fan_in):
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Encoder:
    """Four conv stages (3x3 conv, BN, ReLU, 2x2 pool) plus heads."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}
        c_in = cfg.in_channels
        for s, c in enumerate(cfg.channels, start=1):
            self.params[f"stage{s}.conv"] = E.parameter(_kaiming(rng, (c, c_in, 3, 3), c_in * 9))
            self.params[f"stage{s}.bn.weight"] = E.parameter(np.ones(c))
            self.params[f"stage{s}.bn.bias"] = E.parameter(np.zeros(c))
            self.buffers[f"stage{s}.bn.running_mean"] = np.zeros(c)
            self.buffers[f"stage{s}.bn.running_var"] = np.ones(c)
            c_in = c
        d = cfg.embed_dim
        self._linear("classifier", d, cfg.num_classes, rng)
        self._linear("projector.fc1", d, cfg.proj_hidden, rng)
        self._linear("projector.fc2", cfg.proj_hidden, cfg.proj_dim, rng)
        for name, p in self.params.items():
            p.name = name

    def _linear(self, name: str, fan_in: int, fan_out: int, rng) -> None:
        self.params[f"{name}.weight"] = E.parameter(_kaiming(rng, (fan_out, fan_in), fan_in))
        self.params[f"{name}.bias"] = E.parameter(np.zeros(fan_out))

    def _lin(self, name: str, x: Tensor) -> Tensor:
        return E.linear(x, self.params[f"{name}.weight"], self.params[f"{name}.bias"])

    def stages(self, x: Tensor, mode: str = "train", update_stats: bool = True, upto: int | None = None):
        """Run the conv stages; returns (tap activation, last stage output)."""
        train = mode == "train"
        tap = None
        n = len(self.cfg.channels) if upto is None else upto
        for s in range(1, n + 1):
            x = E.conv2d(x, self.params[f"stage{s}.conv"])
            x = E.batchnorm(
                x,
                self.params[f"stage{s}.bn.weight"],
                self.params[f"stage{s}.bn.bias"],
                self.buffers[f"stage{s}.bn.running_mean"],
                self.buffers[f"stage{s}.bn.running_var"],
                train=train,
                update_stats=update_stats,
            )
            x = E.relu(x)
            if s == self.cfg.tap_stage:
                tap = x
            x = E.max_pool2(x) if self.cfg.pool == "max" else E.avg_pool2(x)
        return tap, x

    def features(self, x, mode: str = "train", update_stats: bool = True) -> Tensor:
        """Layer-l feature maps only (stops after the tap stage)."""
        tap, _ = self.stages(E.as_tensor(x), mode, update_stats, upto=self.cfg.tap_stage)
        return tap

    def forward(self, x, mode: str = "train", update_stats: bool = True, heads=("logits", "projected")) -> EncoderOutput:
        x = E.as_tensor(x)
        tap, h = self.stages(x, mode, update_stats)
        emb = E.mean(h, axis=(2, 3))
        logits = self._lin("classifier", emb) if "logits" in heads else None
        proj = None
        if "projected" in heads:
            proj = E.l2_normalize(self._lin("projector.fc2", E.relu(self._lin("projector.fc1", emb))), axis=1)
        return EncoderOutput(tap, emb, logits, proj)

    # -- parameter plumbing ------------------------------------------------
    def state(self) -> dict[str, np.ndarray]:
        out = {k: v.data for k, v in self.params.items()}
        out.update(self.buffers)
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, v in state.items():
            if k in self.params:
                self.params[k].data[...] = v
            elif k in self.buffers:
                self.buffers[k][...] = v
            else:
                raise KeyError(k)

    def clone(self, requires_grad: bool = True) -> "Encoder":
        twin = copy.copy(self)
        twin.params = {k: Tensor(v.data.copy(), requires_grad=requires_grad, name=k) for k, v in self.params.items()}
        twin.buffers = {k: v.copy() for k, v in self.buffers.items()}
        return twin

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def ema_encoder(target: Encoder, source: Encoder, m: float) -> None:
    """Move every parameter and BN buffer of ``target`` toward ``source``."""
    for k, p in target.params.items():
        E.ema_update(p, source.params[k], m)
    for k, b in target.buffers.items():
        E.ema_update(b, source.buffers[k], m)


class SGD:
    """Classical momentum SGD: ``v = mu v + g + wd p``; ``p -= lr v``."""

    def __init__(self, params, lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        sgd_step(self.params, self.velocity, self.lr, self.momentum, self.weight_decay)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def sgd_step(params, velocity, lr: float, momentum: float, weight_decay: float) -> None:
    for p, v in zip(params, velocity):
        if p.grad is None:
            continue
        v *= momentum
        v += p.grad
        if weight_decay:
            v += weight_decay * p.data
        p.data -= lr * v


def cosine_lr(step: int, total: int, base: float, warmup_frac: float = 0.05) -> float:
    """Linear warmup over the first ``warmup_frac`` of steps, then cosine decay."""
    warm = max(1, int(round(total * warmup_frac)))
    if step < warm:
        return base * (step + 1) / warm
    progress = (step - warm) / max(1, total - warm)
    return 0.5 * base * (1.0 + math.cos(math.pi * min(progress, 1.0)))
