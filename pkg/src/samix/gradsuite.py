"""Finite-difference checks for every differentiable op and three loss paths."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import engine as E
from . import losses as L
from .engine import Tensor
from .mixer import MixerConfig, MixerParams, generate_mask, mix_inputs

TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    error: float
    failure: str | None = None  # set when the check raised

    @property
    def ok(self) -> bool:
        return self.failure is None and self.error < TOLERANCE


def _check_inputs(fn: Callable[..., Tensor], arrays: list[np.ndarray], weights: np.ndarray | None) -> float:
    """Max error over every input of ``sum(fn(*inputs) * weights)``."""
    worst = 0.0
    for k in range(len(arrays)):
        others = [Tensor(a.copy()) for a in arrays]

        def f(x, k=k, others=others):
            ins = list(others)
            ins[k] = x
            out = fn(*ins)
            if weights is None:
                return out
            return E.sum_(E.mul(out, weights))

        worst = max(worst, E.gradcheck(f, Tensor(arrays[k].copy())))
    return worst


def _op_cases(rng: np.random.Generator):
    r = rng.standard_normal
    pos = lambda *s: rng.uniform(0.5, 2.0, s)  # noqa: E731
    away = lambda *s: np.sign(r(s)) * rng.uniform(0.1, 1.0, s)  # noqa: E731  keeps off kinks
    bn_stats = (np.zeros(3), np.ones(3))
    drop_mask_seed = 3
    return [
        ("add", lambda a, b: E.add(a, b), [r((3, 4)), r((4,))]),
        ("sub", lambda a, b: E.sub(a, b), [r((3, 4)), r((3, 1))]),
        ("mul", lambda a, b: E.mul(a, b), [r((3, 4)), r((1, 4))]),
        ("scale", lambda a: E.scale(a, -1.7), [r((3, 4))]),
        ("relu", E.relu, [away(3, 4)]),
        ("sigmoid", E.sigmoid, [r((3, 4)) * 3]),
        ("exp", E.exp, [r((3, 4))]),
        ("log", E.log, [pos(3, 4)]),
        ("abs", E.abs_, [away(3, 4)]),
        ("sum", lambda a: E.sum_(a, axis=1), [r((3, 4))]),
        ("mean", lambda a: E.mean(a, axis=(0, 2)), [r((2, 3, 4))]),
        ("reshape", lambda a: E.reshape(a, (4, 3)), [r((3, 4))]),
        ("transpose", lambda a: E.transpose(a, (2, 0, 1)), [r((2, 3, 4))]),
        ("getitem", lambda a: E.getitem(a, (np.array([0, 2, 2]), slice(1, 3))), [r((3, 4))]),
        ("concat", lambda a, b: E.concat([a, b], axis=1), [r((2, 3)), r((2, 2))]),
        ("matmul", E.matmul, [r((2, 3, 4)), r((4, 5))]),
        ("linear", E.linear, [r((3, 4)), r((2, 4)), r((2,))]),
        ("conv1x1", E.conv1x1, [r((2, 3, 2, 2)), r((4, 3)), r((4,))]),
        ("conv2d", E.conv2d, [r((2, 2, 4, 4)), r((3, 2, 3, 3))]),
        ("avg_pool2", E.avg_pool2, [r((2, 2, 4, 4))]),
        ("max_pool2", E.max_pool2, [r((2, 2, 4, 4))]),
        (
            "batchnorm",
            lambda x, g, b: E.batchnorm(x, g, b, *[s.copy() for s in bn_stats], train=True, update_stats=False),
            [r((4, 3, 2, 2)), pos(3), r((3,))],
        ),
        ("softmax", lambda a: E.softmax(a, axis=1), [r((3, 4))]),
        ("log_softmax", lambda a: E.log_softmax(a, axis=1), [r((3, 4))]),
        ("l2_normalize", lambda a: E.l2_normalize(a, axis=1), [r((3, 4))]),
        (
            "dropout",
            lambda a: E.dropout(a, 0.3, np.random.default_rng(drop_mask_seed), train=True),
            [r((3, 4))],
        ),
        ("bilinear_upsample", lambda a: E.bilinear_upsample(a, (5, 7)), [r((2, 1, 3, 2))]),
    ]


def op_checks(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []
    for name, fn, arrays in _op_cases(rng):
        try:
            with E.no_grad():
                shape = fn(*[Tensor(a) for a in arrays]).shape
            weights = rng.standard_normal(shape)
            results.append(CheckResult(name, _check_inputs(fn, arrays, weights)))
        except E.NonFiniteError as exc:
            results.append(CheckResult(name, float("inf"), f"non-finite value in '{exc.op}'"))
    return results


# ---------------------------------------------------------------------------
# end-to-end paths through the Mixer


def _mixer_path(seed: int, loss_fn) -> float:
    """Gradcheck ``loss_fn(mask, x_m, lam)`` w.r.t. every Mixer parameter."""
    rng = np.random.default_rng(seed)
    b, c = 4, 4
    mixer = MixerParams(MixerConfig(channels=c), rng)
    mixer.params["gamma"].data[...] = 0.3
    z_i, z_j = Tensor(rng.standard_normal((b, c, 2, 2))), Tensor(rng.standard_normal((b, c, 2, 2)))
    x_i, x_j = rng.uniform(0, 1, (b, 3, 6, 6)), rng.uniform(0, 1, (b, 3, 6, 6))
    lam = rng.uniform(0.2, 0.8, b)
    worst = 0.0
    for name, p in mixer.params.items():

        def f(x, name=name):
            saved = mixer.params[name]
            mixer.params[name] = x
            try:
                mask = generate_mask(z_i, z_j, lam, mixer, (6, 6), "train", np.random.default_rng(11), update_stats=False)
                return loss_fn(mask, mix_inputs(x_i, x_j, mask), lam)
            finally:
                mixer.params[name] = saved

        worst = max(worst, E.gradcheck(f, Tensor(p.data.copy())))
    return worst


def _sl_generation(seed: int) -> float:
    rng = np.random.default_rng(seed + 100)
    w = Tensor(rng.standard_normal((3, 3 * 36)) * 0.3)
    y_i, y_j = np.array([0, 1, 2, 0]), np.array([1, 2, 0, 2])

    def loss(mask, x_m, lam):
        logits = E.linear(E.reshape(x_m, (x_m.shape[0], -1)), w)
        return L.eta_balanced(L.pbce(logits, y_i, y_j, lam), L.mixup_ce(logits, y_i, y_j, lam), 0.5)

    return _mixer_path(seed, loss)


def _ssl_instance(seed: int) -> float:
    rng = np.random.default_rng(seed + 200)
    w = Tensor(rng.standard_normal((8, 3 * 36)) * 0.3)
    unit = lambda a: a / np.linalg.norm(a, axis=1, keepdims=True)  # noqa: E731
    z_i, z_j = unit(rng.standard_normal((4, 8))), unit(rng.standard_normal((4, 8)))
    keys = unit(rng.standard_normal((16, 8)))

    def loss(mask, x_m, lam):
        z_m = E.l2_normalize(E.linear(E.reshape(x_m, (x_m.shape[0], -1)), w), axis=1)
        return L.eta_balanced(L.bce_instance(z_m, z_i, z_j, lam), L.mixup_infonce(z_m, z_i, z_j, keys, lam), 0.5)

    return _mixer_path(seed, loss)


def _mask_path(seed: int) -> float:
    # both variance signs, so the check does not rely on the default
    def loss(mask, x_m, lam):
        return E.add(L.mask_loss(mask, lam, 0.05, 0.7, -1), L.mask_loss(mask, lam, 0.05, 0.2, 1))

    return _mixer_path(seed, loss)


PATHS = {
    "path:sl_generation": _sl_generation,
    "path:ssl_instance": _ssl_instance,
    "path:mask_loss": _mask_path,
}


def path_checks(seed: int = 0) -> list[CheckResult]:
    out = []
    for name, fn in PATHS.items():
        try:
            out.append(CheckResult(name, fn(seed)))
        except E.NonFiniteError as exc:
            out.append(CheckResult(name, float("inf"), f"non-finite value in '{exc.op}'"))
    return out


def run_suite(seed: int = 0) -> list[CheckResult]:
    return op_checks(seed) + path_checks(seed)


def report(results: list[CheckResult]) -> str:
    lines = []
    for r in results:
        status = "ok" if r.ok else "FAIL"
        detail = r.failure or f"max_rel_err={r.error:.3e}"
        lines.append(f"{status:4s} {r.name:24s} {detail}")
    bad = [r.name for r in results if not r.ok]
    lines.append(f"{len(results) - len(bad)}/{len(results)} checks passed" + (f"; failing: {', '.join(bad)}" if bad else ""))
    return "\n".join(lines)
