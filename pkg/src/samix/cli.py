"""Command-line experiment driver: ``train``, ``mix``, ``probe``, ``gradcheck``."""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import engine as E
from .checkpoint import (
    CheckpointError,
    CheckpointShapeError,
    load_encoder,
    load_mixer,
    load_tensors,
    save_encoder,
    save_mixer,
)
from .config import ConfigError, ExperimentConfig, load_config, set_value, validate
from .data import DataFormatError, atomic_write_bytes, load_cifar_binary, stack, synth_shapes
from .encoder import Encoder, EncoderConfig
from .gradsuite import report, run_suite
from .imageio import read_pnm, tile_row, write_pnm
from .mixer import MixerConfig, MixerParams, MixMask, generate_mask, lambda_adjust, mix_inputs
from .pipeline import (
    ConfigurationError,
    PipelineConfig,
    accuracy,
    embed,
    fit_ssl,
    fit_supervised,
    freeze_mixer,
    init_state,
    linear_probe,
    steps_per_epoch,
)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class CliError(Exception):
    def __init__(self, msg: str, code: int):
        self.code = code
        super().__init__(msg)


# ---------------------------------------------------------------------------
# shared plumbing


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        set_value(cfg, "seed", str(args.seed))
    if getattr(args, "epochs", None) is not None:
        set_value(cfg, "epochs", str(args.epochs))
    validate(cfg)
    return cfg


def load_dataset(cfg: ExperimentConfig) -> tuple[np.ndarray, np.ndarray | None]:
    ds = cfg.dataset
    if ds.kind == "synth":
        return stack(synth_shapes(ds.n, ds.classes, seed=cfg.seed))
    return stack(load_cifar_binary(ds.path))


def split(x, y, holdout: int):
    """Last ``holdout`` samples form the test split."""
    if holdout <= 0:
        return (x, y), None
    return (x[:-holdout], None if y is None else y[:-holdout]), (x[-holdout:], None if y is None else y[-holdout:])


def model_configs(cfg: ExperimentConfig, num_classes: int) -> tuple[EncoderConfig, MixerConfig, PipelineConfig]:
    enc = EncoderConfig(num_classes=num_classes)
    mix = MixerConfig(channels=enc.tap_channels, content=cfg.content)
    ssl = cfg.scenario.startswith("ssl")
    pipe = PipelineConfig(
        alpha=cfg.alpha,
        eta=cfg.eta,
        beta0=cfg.beta0,
        epsilon=cfg.epsilon,
        temperature=cfg.temperature,
        lr=cfg.lr,
        mixer_lr=cfg.mixer_lr,
        weight_decay=cfg.weight_decay,
        m=cfg.momentum,
        queue_len=cfg.queue_len,
        clusters=cfg.clusters,
        lambda_adjust=cfg.lambda_adjust,
        mix_policy="samix" if ssl or cfg.scenario == "sl-pretrained" else cfg.mix_policy,
    )
    return enc, mix, pipe


def _check_sizes(n: int, cfg: ExperimentConfig) -> None:
    if n < cfg.batch_size:
        raise CliError(f"training split has {n} samples, fewer than batch_size={cfg.batch_size}", EXIT_CONFIG)


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    cfg = _config(args)
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    x, y = load_dataset(cfg)
    (x_tr, y_tr), test = split(x, y, cfg.holdout)
    _check_sizes(len(x_tr), cfg)
    classes = int(y.max()) + 1 if y is not None else 2
    enc_cfg, mix_cfg, pipe = model_configs(cfg, classes)
    pipe.total_steps = cfg.epochs * steps_per_epoch(len(x_tr), cfg.batch_size)
    variant = {"ssl-i": "I", "ssl-c": "C"}.get(cfg.scenario)
    state = init_state(enc_cfg, mix_cfg, pipe, cfg.seed, ssl_variant=variant, n_samples=len(x_tr))
    if cfg.scenario == "sl-pretrained":
        if not os.path.exists(cfg.mixer_checkpoint):
            raise ConfigurationError(f"mixer_checkpoint '{cfg.mixer_checkpoint}' does not exist")
        load_mixer(cfg.mixer_checkpoint, state.mixer)
        freeze_mixer(state)
    if cfg.encoder_checkpoint:
        load_encoder(cfg.encoder_checkpoint, state.online)
        state.momentum = state.online.clone(requires_grad=False)

    lines: list[str] = []

    def emit(met):
        lines.append(met.line())
        if not np.isfinite(met.loss_cls + met.loss_gen + met.loss_mask):
            raise FloatingPointError(f"non-finite loss at step {met.step}")

    if variant is not None:
        fit_ssl(state, x_tr, pipe, cfg.epochs, cfg.batch_size, variant, on_step=emit)
    else:
        if y is None:
            raise CliError("supervised scenarios need a labelled dataset", EXIT_DATA)
        fit_supervised(state, x_tr, y_tr, pipe, cfg.epochs, cfg.batch_size, cfg.scenario, on_step=emit)

    atomic_write_bytes(os.path.join(out, "metrics.txt"), ("\n".join(lines) + "\n").encode("ascii"))
    save_mixer(state.mixer, os.path.join(out, "mixer.ckpt"))
    save_encoder(state.online, os.path.join(out, "encoder.ckpt"))
    print(f"trained {state.step} steps; artifacts in {out}")
    if test is not None and test[1] is not None and variant is None:
        print(f"test_accuracy={accuracy(state.online, *test):.4f}")
    return EXIT_OK


def _parse_floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise CliError(f"expected comma-separated numbers, got {text!r}", EXIT_CONFIG) from None


def _parse_pairs(text: str) -> list[tuple[int, int]]:
    try:
        return [tuple(int(v) for v in p.split(":")) for p in text.split(",") if p.strip()]
    except ValueError:
        raise CliError(f"expected pairs like 0:1,2:3, got {text!r}", EXIT_CONFIG) from None


def render_row(x_i, x_j, lams, mixer, encoder, adjust: bool) -> tuple[np.ndarray, list[np.ndarray]]:
    """One grid row: x_i, (mask, mix) per lambda, x_j. Returns (row, masks)."""
    hw = x_i.shape[-2:]
    with E.no_grad():
        z = encoder.features(np.stack([x_i, x_j]), "eval")
    z_i, z_j = E.Tensor(z.data[0]), E.Tensor(z.data[1])
    tiles, masks = [x_i], []
    for lam in lams:
        if lam <= 0.0 or lam >= 1.0:
            # endpoints are the raw sources
            s = np.full(hw, 1.0 if lam >= 1.0 else 0.0)
            mixed = x_i if lam >= 1.0 else x_j
        else:
            with E.no_grad():
                mask = generate_mask(z_i, z_j, lam, mixer, hw, "eval")
                if adjust:
                    mask = lambda_adjust(mask)
                mixed = mix_inputs(x_i, x_j, MixMask(mask.s_i, lam)).data
            s = mask.s_i.data
        masks.append(s)
        tiles += [np.repeat(s[None], 3, axis=0), mixed]
    tiles.append(x_j)
    return tile_row(tiles), masks


def cmd_mix(args) -> int:
    cfg = _config(args)
    lams = _parse_floats(args.lambdas)
    if not lams or any(not 0.0 <= v <= 1.0 for v in lams):
        raise CliError("lambda values must lie in [0, 1]", EXIT_CONFIG)
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    if args.images:
        x_i, x_j = (read_pnm(p) for p in args.images)
        if x_i.ndim != 3 or x_i.shape != x_j.shape:
            raise CliError("--images needs two PPM files of equal size", EXIT_DATA)
        pairs_px = [(x_i, x_j)]
        classes = 2
    else:
        x, y = load_dataset(cfg)
        pairs = _parse_pairs(args.pairs)
        for i, j in pairs:
            if not (0 <= i < len(x) and 0 <= j < len(x)):
                raise CliError(f"pair {i}:{j} out of range for {len(x)} samples", EXIT_CONFIG)
        pairs_px = [(x[i], x[j]) for i, j in pairs]
        classes = int(y.max()) + 1 if y is not None else 2
    encoder_path = args.encoder or cfg.encoder_checkpoint
    if encoder_path:
        # the classifier width only has to agree with the checkpoint
        head = load_tensors(encoder_path).get("classifier.bias")
        classes = classes if head is None else head.shape[0]
    enc_cfg, mix_cfg, _ = model_configs(cfg, classes)
    rng = np.random.default_rng(cfg.seed)
    encoder = Encoder(enc_cfg, rng)
    if encoder_path:
        load_encoder(encoder_path, encoder)
    mixer = MixerParams(mix_cfg, rng)
    load_mixer(args.checkpoint or cfg.mixer_checkpoint, mixer)
    rows = []
    for r, (x_i, x_j) in enumerate(pairs_px):
        row, masks = render_row(x_i, x_j, lams, mixer, encoder, not args.no_adjust)
        rows.append(row)
        for k, s in enumerate(masks):
            write_pnm(os.path.join(out, f"mask_{r}_{k}.pgm"), s)
    write_pnm(os.path.join(out, "grid.ppm"), np.concatenate(rows, axis=1))
    print(f"wrote {len(rows)} rows x {2 + 2 * len(lams)} tiles to {out}")
    return EXIT_OK


def cmd_probe(args) -> int:
    cfg = _config(args)
    x, y = load_dataset(cfg)
    if y is None or np.any(y < 0):
        raise CliError("linear probing needs a labelled dataset", EXIT_DATA)
    holdout = cfg.holdout or max(1, len(x) // 5)
    (x_tr, y_tr), (x_te, y_te) = split(x, y, holdout)
    enc_cfg, _, _ = model_configs(cfg, int(y.max()) + 1)
    encoder = Encoder(enc_cfg, np.random.default_rng(cfg.seed))
    path = args.encoder or cfg.encoder_checkpoint
    if path:
        load_encoder(path, encoder)
    elif not args.random_init:
        raise CliError("probe needs --encoder (or encoder_checkpoint), or --random-init", EXIT_CONFIG)
    acc = linear_probe(embed(encoder, x_tr), y_tr, embed(encoder, x_te), y_te, epochs=args.probe_epochs, seed=cfg.seed)
    print(f"probe_accuracy={acc:.4f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = run_suite(args.seed or 0)
    print(report(results))
    return EXIT_OK if all(r.ok for r in results) else EXIT_NUMERIC


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="samix", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key = value experiment file")
        p.add_argument("--seed", type=int)
        p.add_argument("--epochs", type=int)
        p.add_argument("--out", help="output directory")

    p = sub.add_parser("train", help="run the configured scenario")
    common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("mix", help="render mask/mix grids from a Mixer checkpoint")
    common(p)
    p.add_argument("--checkpoint", help="Mixer checkpoint (default: mixer_checkpoint key)")
    p.add_argument("--encoder", help="encoder checkpoint providing the feature maps")
    p.add_argument("--pairs", default="0:1", help="dataset index pairs, e.g. 0:1,2:3")
    p.add_argument("--images", nargs=2, metavar="PPM", help="mix two PPM images instead of dataset pairs")
    p.add_argument("--lambdas", default="0.1,0.3,0.5,0.7,0.9")
    p.add_argument("--no-adjust", action="store_true", help="show raw masks without lambda adjusting")
    p.set_defaults(fn=cmd_mix)

    p = sub.add_parser("probe", help="linear probe on frozen embeddings")
    common(p)
    p.add_argument("--encoder", help="encoder checkpoint")
    p.add_argument("--random-init", action="store_true", help="probe a randomly initialised encoder")
    p.add_argument("--probe-epochs", type=int, default=30)
    p.set_defaults(fn=cmd_probe)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op")
    common(p)
    p.set_defaults(fn=cmd_gradcheck)
    return parser


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        # argparse signals usage errors with 2; 2 is reserved for data errors here
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        return args.fn(args)
    except (ConfigError, ConfigurationError, CheckpointShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (DataFormatError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (E.NonFiniteError, FloatingPointError) as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
