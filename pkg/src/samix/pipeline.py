"""Momentum alternating optimisation of the online networks and the Mixer.

One step of the online pipeline:

1. the momentum encoder produces layer-l feature maps (no gradient);
2. the Mixer builds two mixed batches with independently drawn ratios;
3. the online encoder is trained on the first with the Mixer path cut, the
   Mixer on the second through the frozen momentum encoder;
4. the momentum encoder moves toward the online one by EMA.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import engine as E
from .clustering import ClusterState, cluster_update, init_clusters
from .data import AugmentConfig, LambdaSampler, two_view_batch
from .encoder import SGD, Encoder, EncoderConfig, cosine_lr, ema_encoder
from .engine import ContractError, Tensor
from .losses import (
    NegativeQueue,
    beta_schedule,
    bce_instance,
    ce,
    eta_balanced,
    infonce,
    mask_loss,
    mixup_ce,
    mixup_infonce,
    pbce,
)
from .mixer import (
    MixerConfig,
    MixerParams,
    cutmix_batch,
    generate_mask,
    lambda_adjust,
    mix_inputs,
    mixup_mask,
)

POLICIES = ("samix", "mixup", "cutmix", "none")


class QueueColdError(RuntimeError):
    pass


class ConfigurationError(RuntimeError):
    pass


@dataclass
class PipelineConfig:
    alpha: float = 2.0
    eta: float = 0.5
    beta0: float = 0.1
    epsilon: float = 0.1
    temperature: float = 0.2
    variance_sign: int = -1
    lr: float = 0.05
    mixer_lr: float = 0.05
    sgd_momentum: float = 0.9
    weight_decay: float = 5e-4
    m: float = 0.999
    queue_len: int = 512
    clusters: int = 16
    lambda_adjust: bool = True
    mix_policy: str = "samix"
    total_steps: int = 1000
    warmup_frac: float = 0.05

    def __post_init__(self):
        if self.mix_policy not in POLICIES:
            raise ContractError(f"mix_policy must be one of {POLICIES}, got {self.mix_policy}")
        if not 0.0 <= self.m <= 1.0:
            raise ContractError(f"momentum coefficient m must lie in [0, 1], got {self.m}")


@dataclass
class StepMetrics:
    step: int
    loss_cls: float
    loss_gen: float = 0.0
    loss_mask: float = 0.0
    mask_mean: float = 0.0
    mask_var: float = 0.0
    beta: float = 0.0
    extras: dict = field(default_factory=dict)

    def line(self) -> str:
        return (
            f"step={self.step} loss_cls={self.loss_cls:.6f} loss_gen={self.loss_gen:.6f} "
            f"loss_mask={self.loss_mask:.6f} mask_mean={self.mask_mean:.6f} "
            f"mask_var={self.mask_var:.6f} beta={self.beta:.6f}"
        )


def parse_metrics_line(line: str) -> dict[str, float]:
    out = {}
    for tok in line.split():
        k, v = tok.split("=", 1)
        out[k] = int(v) if k == "step" else float(v)
    return out


class ClusterHead:
    """Linear cluster classifier fed by momentum-encoder embeddings."""

    def __init__(self, dim: int, k: int, rng: np.random.Generator):
        bound = np.sqrt(6.0 / dim)
        self.params = {
            "cluster_head.weight": E.parameter(rng.uniform(-bound, bound, (k, dim))),
            "cluster_head.bias": E.parameter(np.zeros(k)),
        }

    def __call__(self, emb: Tensor) -> Tensor:
        return E.linear(emb, self.params["cluster_head.weight"], self.params["cluster_head.bias"])


@dataclass
class ModelState:
    online: Encoder
    momentum: Encoder
    mixer: MixerParams
    opt_online: SGD
    opt_mixer: SGD | None
    rng: np.random.Generator
    m: float
    step: int = 0
    queue: NegativeQueue | None = None
    clusters: ClusterState | None = None
    cluster_head: ClusterHead | None = None
    mixer_frozen: bool = False

    def mixer_grads(self) -> list[np.ndarray | None]:
        return [p.grad for p in self.mixer.params.values()]

    def online_grads(self) -> list[np.ndarray | None]:
        return [p.grad for p in self.online.params.values()]


def init_state(
    enc_cfg: EncoderConfig,
    mix_cfg: MixerConfig,
    cfg: PipelineConfig,
    seed: int,
    ssl_variant: str | None = None,
    n_samples: int = 0,
) -> ModelState:
    rng = np.random.default_rng(seed)
    online = Encoder(enc_cfg, rng)
    momentum = online.clone(requires_grad=False)
    mixer = MixerParams(mix_cfg, rng)
    opt_online = SGD(online.params.values(), cfg.lr, cfg.sgd_momentum, cfg.weight_decay)
    head = None
    mixer_params = list(mixer.params.values())
    if ssl_variant == "C":
        head = ClusterHead(enc_cfg.embed_dim, cfg.clusters, rng)
        mixer_params += list(head.params.values())
    opt_mixer = SGD(mixer_params, cfg.mixer_lr, cfg.sgd_momentum, 0.0)
    state = ModelState(online, momentum, mixer, opt_online, opt_mixer, rng, cfg.m, cluster_head=head)
    if ssl_variant is not None:
        state.queue = NegativeQueue(cfg.queue_len, enc_cfg.proj_dim)
        if ssl_variant == "C":
            # centroids are seeded lazily from the first warm-up batch
            state.clusters = ClusterState(np.zeros((cfg.clusters, enc_cfg.proj_dim)), np.full(n_samples, -1))
    return state


def freeze_mixer(state: ModelState) -> None:
    state.mixer.freeze()
    state.mixer_frozen = True
    state.opt_mixer = None


def pair_permutation(n: int, rng: np.random.Generator) -> np.ndarray:
    """Random permutation with every fixed point swapped away (n >= 2)."""
    if n < 2:
        raise ContractError("pairing needs at least two samples")
    perm = rng.permutation(n)
    for i in np.flatnonzero(perm == np.arange(n)):
        if perm[i] != i:  # already repaired by an earlier swap
            continue
        k = int(rng.integers(n - 1))
        k += k >= i
        perm[i], perm[k] = perm[k], perm[i]
    return perm


def _schedules(state: ModelState, cfg: PipelineConfig) -> tuple[float, float]:
    step = min(state.step, cfg.total_steps)
    beta = beta_schedule(step, cfg.total_steps, cfg.beta0)
    scale = cosine_lr(step, cfg.total_steps, 1.0, cfg.warmup_frac)
    state.opt_online.lr = cfg.lr * scale
    if state.opt_mixer is not None:
        state.opt_mixer.lr = cfg.mixer_lr * scale
    return beta, scale


def _mixer_update(state: ModelState, loss: Tensor, check: bool) -> dict:
    flags = {}
    state.online.zero_grad()
    state.opt_mixer.zero_grad()
    E.backward(loss)
    if check:
        flags["online_grads_clear"] = all(g is None or not np.any(g) for g in state.online_grads())
    state.opt_mixer.step()
    state.mixer.clamp()
    return flags


def _online_update(state: ModelState, loss: Tensor, check: bool) -> dict:
    flags = {}
    state.online.zero_grad()
    for p in state.mixer.params.values():
        p.grad = None
    E.backward(loss)
    if check:
        flags["mixer_grads_clear"] = all(g is None or not np.any(g) for g in state.mixer_grads())
    state.opt_online.step()
    return flags


def _mask_stats(mask) -> tuple[float, float]:
    return float(mask.means().mean()), float(mask.spatial_var().mean())


# ---------------------------------------------------------------------------
# supervised


def train_step_sl(x: np.ndarray, y: np.ndarray, state: ModelState, cfg: PipelineConfig, check: bool = False) -> StepMetrics:
    """One online SAMix step on a labelled batch."""
    if cfg.mix_policy != "samix":
        return train_step_baseline(x, y, state, cfg)
    rng = state.rng
    n, hw = len(x), x.shape[-2:]
    perm = pair_permutation(n, rng)
    sampler = LambdaSampler(cfg.alpha, rng)
    lam_q, lam_k = sampler.sample(n), sampler.sample(n)
    beta, _ = _schedules(state, cfg)
    x_t, xp_t = Tensor(x), Tensor(x[perm])
    y_p = y[perm]

    with E.no_grad():
        z = state.momentum.features(x_t, "train", update_stats=False)
        z_p = Tensor(z.data[perm])
        mask_q = generate_mask(z, z_p, lam_q, state.mixer, hw, "train", rng)
    if cfg.lambda_adjust:
        mask_q = lambda_adjust(mask_q)
    x_q = mix_inputs(x_t, xp_t, mask_q)

    # online networks; the mask is a constant here
    logits = state.online.forward(x_q, "train", heads=("logits",)).logits
    loss_cls = mixup_ce(logits, y, y_p, lam_q)
    flags = _online_update(state, loss_cls, check)

    # Mixer through the momentum networks (their weights do not require grad)
    mask_k = generate_mask(z, z_p, lam_k, state.mixer, hw, "train", rng)
    x_k = mix_inputs(x_t, xp_t, mask_k)
    logits_k = state.momentum.forward(x_k, "train", update_stats=False, heads=("logits",)).logits
    l_plus = pbce(logits_k, y, y_p, lam_k, same_class="zero")
    l_minus = mixup_ce(logits_k, y, y_p, lam_k)
    loss_gen = eta_balanced(l_plus, l_minus, cfg.eta)
    loss_m = mask_loss(mask_k, lam_k, cfg.epsilon, beta, cfg.variance_sign)
    flags.update(_mixer_update(state, E.add(loss_gen, loss_m), check))

    ema_encoder(state.momentum, state.online, state.m)
    state.step += 1
    mm, mv = _mask_stats(mask_k)
    return StepMetrics(state.step, loss_cls.item(), loss_gen.item(), loss_m.item(), mm, mv, beta, flags)


def train_step_baseline(x: np.ndarray, y: np.ndarray, state: ModelState, cfg: PipelineConfig) -> StepMetrics:
    """Online-only step with a handcrafted policy (mixup, cutmix) or none."""
    rng = state.rng
    n, hw = len(x), x.shape[-2:]
    _schedules(state, cfg)
    if cfg.mix_policy == "none":
        logits = state.online.forward(x, "train", heads=("logits",)).logits
        loss = ce(logits, y)
        mm = mv = 0.0
    else:
        perm = pair_permutation(n, rng)
        lam = LambdaSampler(cfg.alpha, rng).sample(n)
        mask = mixup_mask(lam, hw) if cfg.mix_policy == "mixup" else cutmix_batch(lam, hw, rng)
        x_m = mix_inputs(x, x[perm], mask)
        logits = state.online.forward(x_m, "train", heads=("logits",)).logits
        loss = mixup_ce(logits, y, y[perm], mask.lam)
        mm, mv = _mask_stats(mask)
    _online_update(state, loss, False)
    ema_encoder(state.momentum, state.online, state.m)
    state.step += 1
    return StepMetrics(state.step, loss.item(), mask_mean=mm, mask_var=mv)


def train_pretrained(x: np.ndarray, y: np.ndarray, state: ModelState, cfg: PipelineConfig) -> StepMetrics:
    """Online step with a frozen, pre-trained Mixer (eval mode, lambda-adjusted)."""
    if not state.mixer_frozen:
        raise ConfigurationError("pre-trained pipeline needs a loaded, frozen Mixer")
    rng = state.rng
    n, hw = len(x), x.shape[-2:]
    perm = pair_permutation(n, rng)
    lam = LambdaSampler(cfg.alpha, rng).sample(n)
    _schedules(state, cfg)
    with E.no_grad():
        z = state.momentum.features(x, "train", update_stats=False)
        mask = generate_mask(z, Tensor(z.data[perm]), lam, state.mixer, hw, "eval")
    mask = lambda_adjust(mask)
    x_m = mix_inputs(x, x[perm], mask)
    logits = state.online.forward(x_m, "train", heads=("logits",)).logits
    loss = mixup_ce(logits, y, y[perm], lam)
    _online_update(state, loss, False)
    ema_encoder(state.momentum, state.online, state.m)
    state.step += 1
    mm, mv = _mask_stats(mask)
    return StepMetrics(state.step, loss.item(), mask_mean=mm, mask_var=mv)


# ---------------------------------------------------------------------------
# self-supervised


def warmup_queue(
    state: ModelState,
    images: np.ndarray,
    batch_size: int,
    aug: AugmentConfig | None = None,
    fill: float = 0.25,
) -> None:
    """Fill the negative queue from momentum keys without training."""
    queue = state.queue
    target = int(np.ceil(queue.capacity * fill))
    order = state.rng.permutation(len(images))
    pos = 0
    while len(queue) < target:
        idx = order[pos : pos + batch_size]
        if len(idx) < batch_size:
            order, pos = state.rng.permutation(len(images)), 0
            continue
        pos += batch_size
        _, xk = two_view_batch(images[idx], state.rng, aug)
        with E.no_grad():
            zk = state.momentum.forward(xk, "train", update_stats=False, heads=("projected",)).projected.data
        labels = None
        if state.clusters is not None:
            if not np.any(state.clusters.centroids):
                seeded = init_clusters(zk, state.clusters.k, len(state.clusters.assignments), state.rng)
                state.clusters.centroids = seeded.centroids
            labels = cluster_update(zk, state.clusters, idx, state.rng)
        queue.enqueue(zk, labels)


def train_step_ssl(
    x_q: np.ndarray,
    x_k: np.ndarray,
    indices: np.ndarray,
    state: ModelState,
    cfg: PipelineConfig,
    variant: str = "I",
    check: bool = False,
) -> StepMetrics:
    """One cross-view SAMix step on two augmented views per sample.

    Mixed samples are built from the query views and contrasted against
    key-view embeddings of their two sources.
    """
    if variant not in ("I", "C"):
        raise ContractError(f"variant must be 'I' or 'C', got {variant}")
    queue = state.queue
    if queue is None or len(queue) < queue.capacity / 4:
        raise QueueColdError(
            f"negative queue holds {0 if queue is None else len(queue)} keys; "
            f"run warmup_queue until at least {(queue.capacity if queue else 0) // 4} are stored"
        )
    if variant == "C" and state.cluster_head is None:
        raise ConfigurationError("variant C needs a state built with ssl_variant='C'")
    rng = state.rng
    n, hw = len(x_q), x_q.shape[-2:]
    perm = pair_permutation(n, rng)
    sampler = LambdaSampler(cfg.alpha, rng)
    lam_q, lam_k = sampler.sample(n), sampler.sample(n)
    beta, _ = _schedules(state, cfg)
    t = cfg.temperature
    keys = queue.snapshot()[0]
    xq_t, xqp_t = Tensor(x_q), Tensor(x_q[perm])

    with E.no_grad():
        k_out = state.momentum.forward(x_k, "train", update_stats=False, heads=("projected",))
        z_k = k_out.projected
        z_kp = Tensor(z_k.data[perm])
        feats = state.momentum.features(xq_t, "train", update_stats=False)
        feats_p = Tensor(feats.data[perm])
        mask_q = generate_mask(feats, feats_p, lam_q, state.mixer, hw, "train", rng)
    if cfg.lambda_adjust:
        mask_q = lambda_adjust(mask_q)
    x_mq = mix_inputs(xq_t, xqp_t, mask_q)

    q = state.online.forward(xq_t, "train", heads=("projected",)).projected
    z_m = state.online.forward(x_mq, "train", heads=("projected",)).projected
    loss_cls = E.add(infonce(q, z_k, keys, t), mixup_infonce(z_m, z_k, z_kp, keys, lam_q, t))
    flags = _online_update(state, loss_cls, check)

    pl = None
    if variant == "C":
        pl = cluster_update(z_k.data, state.clusters, indices, rng)
    mask_k = generate_mask(feats, feats_p, lam_k, state.mixer, hw, "train", rng)
    x_mk = mix_inputs(xq_t, xqp_t, mask_k)
    out_k = state.momentum.forward(x_mk, "train", update_stats=False, heads=("projected",))
    if variant == "I":
        l_plus = bce_instance(out_k.projected, z_k, z_kp, lam_k, t)
        l_minus = mixup_infonce(out_k.projected, z_k, z_kp, keys, lam_k, t)
        loss_gen = eta_balanced(l_plus, l_minus, cfg.eta)
        total = loss_gen
    else:
        logits_c = state.cluster_head(out_k.embedding)
        l_plus = pbce(logits_c, pl, pl[perm], lam_k, same_class="zero")
        l_minus = mixup_ce(logits_c, pl, pl[perm], lam_k)
        loss_gen = eta_balanced(l_plus, l_minus, cfg.eta)
        # keep the head tracking the current pseudo-labels on clean keys
        total = E.add(loss_gen, ce(state.cluster_head(k_out.embedding), pl))
    loss_m = mask_loss(mask_k, lam_k, cfg.epsilon, beta, cfg.variance_sign)
    flags.update(_mixer_update(state, E.add(total, loss_m), check))

    queue.enqueue(z_k.data, pl)
    ema_encoder(state.momentum, state.online, state.m)
    state.step += 1
    mm, mv = _mask_stats(mask_k)
    return StepMetrics(state.step, loss_cls.item(), loss_gen.item(), loss_m.item(), mm, mv, beta, flags)


# ---------------------------------------------------------------------------
# loops


def iterate_batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for s in range(0, n - batch_size + 1, batch_size):
        yield order[s : s + batch_size]


def steps_per_epoch(n: int, batch_size: int) -> int:
    return n // batch_size


def fit_supervised(
    state: ModelState,
    x: np.ndarray,
    y: np.ndarray,
    cfg: PipelineConfig,
    epochs: int,
    batch_size: int,
    scenario: str = "sl",
    on_step=None,
) -> list[StepMetrics]:
    step_fn = {"sl": train_step_sl, "sl-pretrained": train_pretrained}[scenario]
    history = []
    for _ in range(epochs):
        for idx in iterate_batches(len(x), batch_size, state.rng):
            t0 = time.perf_counter()
            met = step_fn(x[idx], y[idx], state, cfg)
            met.extras["seconds"] = time.perf_counter() - t0
            history.append(met)
            if on_step is not None:
                on_step(met)
    return history


def fit_ssl(
    state: ModelState,
    images: np.ndarray,
    cfg: PipelineConfig,
    epochs: int,
    batch_size: int,
    variant: str = "I",
    aug: AugmentConfig | None = None,
    on_step=None,
    max_steps: int | None = None,
) -> list[StepMetrics]:
    if len(state.queue) < state.queue.capacity / 4:
        warmup_queue(state, images, batch_size, aug)
    history = []
    for _ in range(epochs):
        for idx in iterate_batches(len(images), batch_size, state.rng):
            if max_steps is not None and len(history) >= max_steps:
                return history
            xq, xk = two_view_batch(images[idx], state.rng, aug)
            t0 = time.perf_counter()
            met = train_step_ssl(xq, xk, idx, state, cfg, variant)
            met.extras["seconds"] = time.perf_counter() - t0
            history.append(met)
            if on_step is not None:
                on_step(met)
    return history


def embed(encoder: Encoder, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Eval-mode global-pooled embeddings."""
    out = []
    with E.no_grad():
        for s in range(0, len(x), batch_size):
            out.append(encoder.forward(x[s : s + batch_size], "eval", heads=()).embedding.data)
    return np.concatenate(out)


def accuracy(encoder: Encoder, x: np.ndarray, y: np.ndarray, batch_size: int = 256) -> float:
    correct = 0
    with E.no_grad():
        for s in range(0, len(x), batch_size):
            logits = encoder.forward(x[s : s + batch_size], "eval", heads=("logits",)).logits.data
            correct += int((logits.argmax(axis=1) == y[s : s + batch_size]).sum())
    return correct / len(x)


def linear_probe(
    f_train: np.ndarray,
    y_train: np.ndarray,
    f_test: np.ndarray,
    y_test: np.ndarray,
    epochs: int = 30,
    lr: float = 0.1,
    batch_size: int = 64,
    seed: int = 0,
) -> float:
    """Train a linear classifier on frozen features; top-1 on the test split."""
    rng = np.random.default_rng(seed)
    mu, sd = f_train.mean(axis=0), f_train.std(axis=0) + 1e-6
    a, b = (f_train - mu) / sd, (f_test - mu) / sd
    k = int(max(y_train.max(), y_test.max())) + 1
    w = E.parameter(np.zeros((k, a.shape[1])))
    bias = E.parameter(np.zeros(k))
    opt = SGD([w, bias], lr, momentum=0.9)
    total = epochs * max(1, len(a) // batch_size)
    step = 0
    for _ in range(epochs):
        for idx in iterate_batches(len(a), min(batch_size, len(a)), rng):
            opt.lr = cosine_lr(step, total, lr, 0.0)
            opt.zero_grad()
            E.backward(ce(E.linear(Tensor(a[idx]), w, bias), y_train[idx]))
            opt.step()
            step += 1
    pred = (b @ w.data.T + bias.data).argmax(axis=1)
    return float((pred == y_test).mean())
