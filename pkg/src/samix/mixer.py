"""Learnable mixup-mask generator plus the Mixup and CutMix baselines.

Shapes: feature maps are NCHW ``(B, C, H, W)``; a mask ``s_i`` is
``(B, 1, H, W)`` for batched generation or ``(H, W)`` for a single pair.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import engine as E
from .engine import ContractError, DimensionError, Tensor


@dataclass
class MixMask:
    s_i: Tensor
    lam: float | np.ndarray
    s_j: Tensor = field(init=False)

    def __post_init__(self):
        self.s_j = 1.0 - self.s_i

    def detach(self) -> "MixMask":
        return MixMask(self.s_i.detach(), self.lam)

    def means(self) -> np.ndarray:
        """Spatial mean of ``s_i`` per sample."""
        d = self.s_i.data
        return d.mean(axis=(-2, -1)).reshape(-1)

    def spatial_var(self) -> np.ndarray:
        d = self.s_i.data
        return d.var(axis=(-2, -1)).reshape(-1)


def _check_lam(lam, op: str) -> np.ndarray:
    arr = np.asarray(lam, dtype=np.float64)
    if np.any(arr <= 0.0) or np.any(arr >= 1.0):
        raise ContractError(f"{op}: lambda must lie in the open interval (0, 1), got {lam}")
    return arr


# ---------------------------------------------------------------------------
# parameters


@dataclass
class MixerConfig:
    channels: int = 64
    proj_dim: int | None = None  # defaults to channels // 2
    hidden: int | None = None  # defaults to channels // 2
    dropout: float = 0.1
    content: str = "nonlinear"  # or "linear" (ablation)

    def __post_init__(self):
        if self.proj_dim is None:
            self.proj_dim = max(1, self.channels // 2)
        if self.hidden is None:
            self.hidden = max(1, self.channels // 2)
        if self.content not in ("nonlinear", "linear"):
            raise ContractError(f"content must be 'nonlinear' or 'linear', got {self.content}")


def _kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class MixerParams:
    """Parameters ``phi`` of the Mixer: gamma, W_P and the content module."""

    def __init__(self, cfg: MixerConfig, rng: np.random.Generator):
        self.cfg = cfg
        c, d, h = cfg.channels, cfg.proj_dim, cfg.hidden
        self.params: dict[str, Tensor] = {
            "gamma": E.parameter(np.zeros(1)),
            "w_p": E.parameter(_kaiming_uniform(rng, (d, c), c)),
        }
        self.buffers: dict[str, np.ndarray] = {}
        if cfg.content == "nonlinear":
            self.params.update(
                {
                    "content.w1": E.parameter(_kaiming_uniform(rng, (h, c), c)),
                    "content.bn.weight": E.parameter(np.ones(h)),
                    "content.bn.bias": E.parameter(np.zeros(h)),
                    "content.w2": E.parameter(_kaiming_uniform(rng, (1, h), h)),
                    "content.b2": E.parameter(np.zeros(1)),
                }
            )
            self.buffers = {
                "content.bn.running_mean": np.zeros(h),
                "content.bn.running_var": np.ones(h),
            }
        else:
            self.params.update(
                {
                    "content.w": E.parameter(_kaiming_uniform(rng, (1, c), c)),
                    "content.b": E.parameter(np.zeros(1)),
                }
            )
        for name, p in self.params.items():
            p.name = name

    @property
    def gamma(self) -> Tensor:
        return self.params["gamma"]

    def clamp(self) -> None:
        """Project gamma back onto [0, 1]; call after every optimiser step."""
        np.clip(self.gamma.data, 0.0, 1.0, out=self.gamma.data)

    def state(self) -> dict[str, np.ndarray]:
        out = {k: v.data for k, v in self.params.items()}
        out.update(self.buffers)
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, v in state.items():
            if k in self.params:
                self.params[k].data[...] = v
            else:
                self.buffers[k][...] = v

    def freeze(self) -> None:
        for p in self.params.values():
            p.requires_grad = False
            p.grad = None


# ---------------------------------------------------------------------------
# building blocks


def encode_lambda(z: Tensor, lam, gamma: Tensor) -> Tensor:
    """Adaptive lambda encoding ``(1 + gamma * lam) * z`` (per-sample lam)."""
    lam = np.asarray(lam, dtype=np.float64)
    lam_b = lam.reshape((-1,) + (1,) * (z.ndim - 1)) if lam.ndim else lam
    factor = E.add(1.0, E.mul(gamma.reshape((1,) * z.ndim) if z.ndim else gamma, lam_b))
    return E.mul(factor, z)


def tokens(z: Tensor) -> Tensor:
    """(B, C, H, W) -> (B, H*W, C)."""
    b, c, h, w = z.shape
    return E.transpose(E.reshape(z, (b, c, h * w)), (0, 2, 1))


def mixing_attention(z_tilde: Tensor, w_p: Tensor, norm: float | None = None) -> Tensor:
    """Row-stochastic attention over all tokens of both samples.

    ``z_tilde`` is (B, N, C) with N = 2*H*W; returns (B, N, N) where
    ``P = softmax((z W_P^T)(z W_P^T)^T / norm)`` row-wise over keys.
    """
    if z_tilde.shape[-2] % 2:
        raise ContractError(f"token count must be even, got {z_tilde.shape[-2]}")
    if w_p.shape[1] != z_tilde.shape[-1]:
        raise DimensionError("mixing_attention", (z_tilde.ndim - 1,), f"tokens {z_tilde.shape} vs W_P {w_p.shape}")
    if norm is None:
        norm = float(np.sqrt(w_p.shape[0]))
    q = E.linear(z_tilde, w_p)
    logits = E.scale(E.matmul(q, E.transpose(q, (0, 2, 1)) if q.ndim == 3 else E.transpose(q)), 1.0 / norm)
    return E.softmax(logits, axis=-1)


def content_forward(
    z_tilde: Tensor,
    mixer: MixerParams,
    mode: str = "train",
    rng: np.random.Generator | None = None,
    update_stats: bool = True,
) -> Tensor:
    """Per-token scalar content, (B, N, C) -> (B, N)."""
    train = _train(mode)
    p = mixer.params
    if mixer.cfg.content == "linear":
        c = E.linear(z_tilde, p["content.w"], p["content.b"])
        return E.reshape(c, c.shape[:-1])
    h = E.linear(z_tilde, p["content.w1"])  # (B, N, hidden)
    # batch-norm over every token of every sample, per hidden channel
    b, n, k = h.shape
    h = E.reshape(h, (b * n, k))
    h = E.batchnorm(
        h,
        p["content.bn.weight"],
        p["content.bn.bias"],
        mixer.buffers["content.bn.running_mean"],
        mixer.buffers["content.bn.running_var"],
        train=train,
        update_stats=update_stats,
    )
    h = E.relu(h)
    h = E.dropout(h, mixer.cfg.dropout, rng, train)
    c = E.linear(h, p["content.w2"], p["content.b2"])
    return E.reshape(c, (b, n))


def _train(mode: str) -> bool:
    if mode not in ("train", "eval"):
        raise ContractError(f"mode must be 'train' or 'eval', got {mode!r}")
    return mode == "train"


def generate_mask(
    z_i: Tensor,
    z_j: Tensor,
    lam,
    mixer: MixerParams,
    out_hw: tuple[int, int],
    mode: str = "train",
    rng: np.random.Generator | None = None,
    update_stats: bool = True,
) -> MixMask:
    """Predict ``s_i`` for each pair from layer-l features and ratio ``lam``.

    ``z_i``/``z_j`` are (B, C, H, W) (a single (C, H, W) pair is promoted)
    and ``lam`` is a scalar or a length-B array.
    """
    if z_i.shape != z_j.shape:
        raise DimensionError("generate_mask", tuple(range(z_i.ndim)), f"{z_i.shape} vs {z_j.shape}")
    single = z_i.ndim == 3
    if single:
        z_i = E.reshape(z_i, (1,) + z_i.shape)
        z_j = E.reshape(z_j, (1,) + z_j.shape)
    lam_arr = _check_lam(lam, "generate_mask")
    lam_b = np.broadcast_to(lam_arr, (z_i.shape[0],)).copy()
    b, c, h, w = z_i.shape
    hw = h * w
    gamma = mixer.gamma
    zt = E.concat([tokens(encode_lambda(z_i, lam_b, gamma)), tokens(encode_lambda(z_j, 1.0 - lam_b, gamma))], axis=1)
    attn = mixing_attention(zt, mixer.params["w_p"])  # (B, 2HW, 2HW)
    content = content_forward(zt, mixer, mode, rng, update_stats)  # (B, 2HW)
    rows = E.getitem(attn, (slice(None), slice(0, hw), slice(None)))  # queries of sample i
    logits = E.matmul(rows, E.reshape(content, (b, 2 * hw, 1)))  # (B, HW, 1)
    raw = E.sigmoid(E.reshape(logits, (b, 1, h, w)))
    s_i = E.bilinear_upsample(raw, out_hw)
    if single:
        s_i = E.reshape(s_i, out_hw)
        return MixMask(s_i, float(lam_arr))
    return MixMask(s_i, lam_b)


# ---------------------------------------------------------------------------
# mask post-processing and mixing


def lambda_adjust(mask: MixMask, lam=None) -> MixMask:
    """Rescale ``s_i`` so its spatial mean equals ``lam`` exactly (no grad).

    Above target, ``s_i`` shrinks by ``lam / mu``; below, ``s_j`` shrinks by
    ``(1 - lam) / (1 - mu)``. Both scalings move values toward the interior,
    so coordinates stay in [0, 1].
    """
    lam = mask.lam if lam is None else lam
    lam_arr = _check_lam(lam, "lambda_adjust")
    s = mask.s_i.data
    batched = s.ndim == 4
    flat = s.reshape(s.shape[0], -1) if batched else s.reshape(1, -1)
    lam_b = np.broadcast_to(lam_arr, (flat.shape[0],))[:, None]
    mu = flat.mean(axis=1, keepdims=True)
    out = flat.copy()
    hi = (mu > lam_b)[:, 0]
    lo = (mu < lam_b)[:, 0]
    out[hi] = flat[hi] * (lam_b[hi] / mu[hi])
    out[lo] = 1.0 - (1.0 - flat[lo]) * ((1.0 - lam_b[lo]) / (1.0 - mu[lo]))
    new = Tensor(out.reshape(s.shape))
    return MixMask(new, lam_arr if batched else float(lam_arr))


def mix_inputs(x_i, x_j, mask: MixMask) -> Tensor:
    """``s_i * x_i + s_j * x_j`` with the mask broadcast across channels."""
    x_i, x_j = E.as_tensor(x_i), E.as_tensor(x_j)
    if x_i.shape != x_j.shape:
        raise DimensionError("mix_inputs", tuple(range(x_i.ndim)), f"{x_i.shape} vs {x_j.shape}")
    if x_i.shape[-2:] != mask.s_i.shape[-2:]:
        raise DimensionError(
            "mix_inputs", (x_i.ndim - 2, x_i.ndim - 1), f"image {x_i.shape} vs mask {mask.s_i.shape}"
        )
    return E.add(E.mul(mask.s_i, x_i), E.mul(mask.s_j, x_j))


def _const_mask(values: np.ndarray, lam) -> MixMask:
    return MixMask(Tensor(values), lam)


def mixup_mask(lam, hw: tuple[int, int]) -> MixMask:
    """Constant mask: plain linear interpolation."""
    lam_arr = _check_lam(lam, "mixup_mask")
    if lam_arr.ndim == 0:
        return _const_mask(np.full(hw, float(lam_arr)), float(lam_arr))
    return _const_mask(np.broadcast_to(lam_arr[:, None, None, None], (lam_arr.size, 1) + tuple(hw)).copy(), lam_arr)


def cutmix_mask(
    lam: float,
    hw: tuple[int, int],
    rng: np.random.Generator,
    center: tuple[int, int] | None = None,
) -> MixMask:
    """Binary mask that is 0 inside a box of side fractions sqrt(1 - lam).

    The returned ``lam`` is the realised area fraction of ``x_i`` after the
    box is clipped to the image.
    """
    lam = float(_check_lam(lam, "cutmix_mask"))
    h, w = hw
    frac = np.sqrt(1.0 - lam)
    ch, cw = int(h * frac), int(w * frac)
    if center is None:
        cy, cx = int(rng.integers(0, h)), int(rng.integers(0, w))
    else:
        cy, cx = center
    y1, x1 = np.clip(cy - ch // 2, 0, h), np.clip(cx - cw // 2, 0, w)
    y2, x2 = np.clip(cy - ch // 2 + ch, 0, h), np.clip(cx - cw // 2 + cw, 0, w)
    s = np.ones(hw)
    s[y1:y2, x1:x2] = 0.0
    realised = 1.0 - (y2 - y1) * (x2 - x1) / (h * w)
    return _const_mask(s, realised)


def cutmix_batch(lam: np.ndarray, hw: tuple[int, int], rng: np.random.Generator) -> MixMask:
    masks = [cutmix_mask(float(v), hw, rng) for v in lam]
    s = np.stack([m.s_i.data for m in masks])[:, None]
    return _const_mask(s, np.array([m.lam for m in masks]))
