"""Command-line entry point: ``rldiff <verb> [--config FILE] [flags]``.

Verbs: train, denoise, evaluate, noise, gen-corpus, baseline-pm.

A config file holds one ``key = value`` per line (``#`` starts a comment);
keys are the long flag names with dashes or underscores. Flags given on the
command line override file values; unknown keys are an error. Every command
logs its fully resolved configuration before doing any work.
"""
import argparse
import csv
import logging
import os
import sys

import numpy as np

from . import classic, env, inference, trainer
from . import net as netlib
from .corpus import CorpusManifest, synthetic_corpus, write_corpus
from .image import load_image, psnr, save_image, save_ppm
from .noise import NoiseSpec

logger = logging.getLogger("rldiffusion")

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


class CommandError(Exception):
    """User-facing failure: bad inputs or configuration."""


def read_config_file(path):
    values = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise CommandError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            values[key.replace("-", "_")] = value
    return values


# -- argument definitions --------------------------------------------------------

def _add_noise_args(p, default_kind="gaussian"):
    p.add_argument("--noise", "--kind", dest="noise", default=default_kind, choices=("gaussian", "salt_pepper", "poisson"))
    p.add_argument("--sigma", type=float, default=25.0, help="Gaussian std on the 0-255 scale")
    p.add_argument("--density", type=float, default=0.5, help="salt-and-pepper corruption probability")
    p.add_argument("--peak", type=float, default=30.0, help="Poisson peak intensity")
    p.add_argument("--seed", type=int, default=0)


def _add_net_args(p):
    p.add_argument("--trunk-layers", type=int, default=4)
    p.add_argument("--trunk-channels", type=int, default=32)
    p.add_argument("--separate-trunks", action="store_true")
    p.add_argument("--net-seed", type=int, default=0)


def build_parser():
    parser = argparse.ArgumentParser(prog="rldiff", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train the policy/value network")
    p.add_argument("--config")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", default="checkpoint.bin", help="checkpoint path")
    p.add_argument("--log", default=None, help="CSV training log (default: <out>.csv)")
    _add_noise_args(p)
    _add_net_args(p)
    p.add_argument("--episodes", type=int, default=60000,
                   help="number of training episodes (called epochs in some write-ups)")
    p.add_argument("--T", type=int, default=5)
    p.add_argument("--gamma", type=float, default=0.95)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--patch-size", type=int, default=70)
    p.add_argument("--lr0", type=float, default=1e-3)
    p.add_argument("--entropy-beta", type=float, default=0.01)
    p.add_argument("--value-coef", type=float, default=0.5)
    p.add_argument("--reward-scale", type=float, default=255.0)
    p.add_argument("--clip-norm", type=float, default=40.0)
    p.add_argument("--advantage", choices=("bootstrap", "return"), default="bootstrap")
    p.add_argument("--omega-grad", choices=("both", "value"), default="both")
    p.add_argument("--omega-normalize", action="store_true")
    p.add_argument("--stage", type=int, choices=(1, 2), default=1)
    p.add_argument("--resume", default=None, help="checkpoint to start from (required for stage 2)")
    p.add_argument("--augment", action="store_true", help="random dihedral transform per patch")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--async", dest="asynchronous", action="store_true")
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--deterministic-log", action="store_true", help="write wall_ms as 0")

    p = sub.add_parser("denoise", help="denoise one image with a trained network")
    p.add_argument("--config")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--T", type=int, default=5)
    p.add_argument("--clamp", action="store_true", help="clip states to [0, 1] after each step")
    p.add_argument("--dump-actions", default=None, metavar="DIR")
    p.add_argument("--dump-kernels", default=None, metavar="X,Y;X,Y")
    p.add_argument("--kernel-dir", default=None, help="directory for kernel rasters (default: next to output)")
    p.add_argument("--kernel-zoom", type=int, default=8)

    p = sub.add_parser("evaluate", help="PSNR table over a test corpus")
    p.add_argument("--config")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True, help="CSV output")
    _add_noise_args(p)
    p.add_argument("--T", type=int, default=5)
    p.add_argument("--baseline", choices=("none", "pm"), default="none")
    p.add_argument("--kappa", type=float, default=0.2)
    p.add_argument("--iterations", type=int, default=20)
    p.add_argument("--contrast", type=float, default=0.1)

    p = sub.add_parser("noise", help="synthesize a noisy image")
    p.add_argument("--config")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    _add_noise_args(p)

    p = sub.add_parser("gen-corpus", help="write a synthetic piecewise-constant corpus")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=16)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--texture", action="store_true")

    p = sub.add_parser("baseline-pm", help="Perona-Malik diffusion of one image")
    p.add_argument("--config")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--kappa", type=float, default=0.2)
    p.add_argument("--iterations", type=int, default=20)
    p.add_argument("--diffusivity", choices=tuple(classic.DIFFUSIVITIES), default="pm")
    p.add_argument("--contrast", type=float, default=0.1)
    p.add_argument("--scheme", choices=("balanced", "printed"), default="balanced")
    return parser


def _subparser(parser, name):
    for action in parser._subparsers._group_actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise KeyError(name)


def parse_args(argv):
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    command = next((a for a in argv if a in COMMANDS), None)
    if known.config and command:
        sp = _subparser(parser, command)
        actions = {a.dest: a for a in sp._actions if a.dest not in ("help", "config")}
        try:
            file_values = read_config_file(known.config)
        except OSError as exc:
            raise CommandError(f"cannot read config file: {exc}") from exc
        unknown = sorted(set(file_values) - set(actions))
        if unknown:
            raise CommandError(f"unknown config keys: {', '.join(unknown)}")
        defaults = {}
        for key, raw in file_values.items():
            act = actions[key]
            if isinstance(act, argparse._StoreTrueAction):
                if raw.lower() not in _TRUE | _FALSE:
                    raise CommandError(f"config key {key}: expected a boolean, got {raw!r}")
                defaults[key] = raw.lower() in _TRUE
            else:
                defaults[key] = raw
            act.required = False
        sp.set_defaults(**defaults)
    return parser.parse_args(argv)


def echo_config(args):
    logger.info("resolved configuration for %s:", args.command)
    for key, value in sorted(vars(args).items()):
        if key not in ("command", "config"):
            logger.info("  %s = %s", key, value)


def noise_spec(args):
    level = {"gaussian": args.sigma, "salt_pepper": args.density, "poisson": args.peak}[args.noise]
    try:
        return NoiseSpec(args.noise, level, args.seed)
    except ValueError as exc:
        raise CommandError(str(exc)) from exc


class Outputs:
    """Tracks written files so a failed command can remove its partial outputs."""

    def __init__(self):
        self.paths = []

    def add(self, path):
        self.paths.append(path)
        return path

    def discard(self):
        for p in self.paths:
            if os.path.exists(p):
                os.remove(p)


def _require_file(path, what):
    if not os.path.isfile(path):
        raise CommandError(f"{what} {path!r} does not exist")


def _load_corpus(root, augment=False):
    try:
        manifest = CorpusManifest.scan(root, augment=augment)
    except FileNotFoundError as exc:
        raise CommandError(str(exc)) from exc
    if not manifest.paths:
        raise CommandError(f"corpus {root!r} contains no .pgm images")
    return manifest


# -- verbs ---------------------------------------------------------------------

def cmd_train(args, outputs):
    manifest = _load_corpus(args.corpus, args.augment)
    corpus = manifest.load()
    cfg = trainer.TrainConfig(
        T=args.T, gamma=args.gamma, batch_size=args.batch_size, patch_size=args.patch_size,
        episodes=args.episodes, lr0=args.lr0, workers=args.workers, asynchronous=args.asynchronous,
        entropy_beta=args.entropy_beta, stage=args.stage, seed=args.seed, noise=noise_spec(args),
        augment=args.augment, advantage=args.advantage, omega_grad=args.omega_grad,
        omega_normalize=args.omega_normalize, clip_norm=args.clip_norm, value_coef=args.value_coef,
        reward_scale=args.reward_scale, checkpoint_every=args.checkpoint_every,
        deterministic_log=args.deterministic_log,
    )
    net_cfg = netlib.NetConfig(trunk_layers=args.trunk_layers, trunk_channels=args.trunk_channels,
                               shared_trunk=not args.separate_trunks, seed=args.net_seed)
    omega = opt = None
    if args.resume:
        _require_file(args.resume, "checkpoint")
        ck = trainer.load_checkpoint(args.resume, expect=net_cfg)
        params, omega, opt = ck["params"], ck["omega"], ck["opt"]
    elif args.stage == 2:
        raise CommandError("stage 2 resumes a stage-1 model: pass --resume <checkpoint>")
    else:
        params = netlib.init_params(net_cfg)
    logger.info("corpus: %d images from %s", len(corpus), args.corpus)
    log_path = outputs.add(args.log or f"{args.out}.csv")
    outputs.add(args.out)

    def progress(row):
        if row["episode"] % 100 == 0 or row["episode"] == cfg.episodes - 1:
            logger.info("episode %d reward %.3e value_loss %.4f lr %.2e",
                        row["episode"], row["mean_reward"], row["value_loss"], row["lr"])

    trainer.train(corpus, cfg, params, omega=omega, opt=opt, log_path=log_path,
                  checkpoint_path=args.out, progress=progress)
    logger.info("wrote %s and %s", args.out, log_path)


def _parse_pixels(spec):
    pixels = []
    for item in filter(None, (s.strip() for s in spec.split(";"))):
        try:
            x, y = (int(v) for v in item.split(","))
        except ValueError as exc:
            raise CommandError(f"bad pixel {item!r}; expected 'x,y'") from exc
        pixels.append((x, y))
    return pixels


def cmd_denoise(args, outputs):
    _require_file(args.checkpoint, "checkpoint")
    _require_file(args.input, "input image")
    params = netlib.load_params(args.checkpoint)
    g = load_image(args.input)
    result = inference.denoise(g, params, args.T, clamp=args.clamp)
    save_image(result.denoised, outputs.add(args.output))
    if args.dump_actions:
        os.makedirs(args.dump_actions, exist_ok=True)
        for t, a in enumerate(result.action_maps):
            save_ppm(inference.render_action_map(a), outputs.add(os.path.join(args.dump_actions, f"actions_t{t}.ppm")))
            with open(outputs.add(os.path.join(args.dump_actions, f"actions_t{t}.am")), "wb") as fh:
                fh.write(env.encode_action_map(a, t))
    if args.dump_kernels:
        pixels = _parse_pixels(args.dump_kernels)
        kdir = args.kernel_dir or os.path.dirname(os.path.abspath(args.output))
        os.makedirs(kdir, exist_ok=True)
        try:
            kernels = env.composite_kernels(result.trace, pixels)
        except ValueError as exc:
            raise CommandError(str(exc)) from exc
        for (x, y), k in kernels.items():
            save_image(inference.render_kernel(k, args.kernel_zoom), outputs.add(os.path.join(kdir, f"kernel_{x}_{y}.pgm")))
    logger.info("wrote %s", args.output)


def cmd_evaluate(args, outputs):
    _require_file(args.checkpoint, "checkpoint")
    manifest = _load_corpus(args.corpus)
    params = netlib.load_params(args.checkpoint)
    spec = noise_spec(args)
    pm_cfg = classic.DiffusionConfig(kappa=args.kappa, iterations=args.iterations, contrast=args.contrast)
    header = ["image", "noisy_psnr", "denoised_psnr"] + (["pm_psnr"] if args.baseline == "pm" else [])
    rows = []
    for idx, (name, path) in enumerate(zip(manifest.names(), manifest.paths)):
        f = load_image(path)
        g = spec.apply(f, seed=args.seed + idx)
        res = inference.denoise(g, params, args.T, clamp=spec.exceeds_range)
        row = [name, psnr(np.clip(g, 0, 1), f), psnr(np.clip(res.denoised, 0, 1), f)]
        if args.baseline == "pm":
            row.append(psnr(np.clip(classic.pm_denoise(g, pm_cfg), 0, 1), f))
        rows.append(row)
        logger.info("%s: noisy %.2f dB, denoised %.2f dB", name, row[1], row[2])
    means = ["mean"] + [float(np.mean([r[k] for r in rows])) for k in range(1, len(header))]
    with open(outputs.add(args.out), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows + [means]:
            w.writerow([r[0]] + [repr(float(v)) for v in r[1:]])
    logger.info("mean: %s", ", ".join(f"{h} {v:.3f}" for h, v in zip(header[1:], means[1:])))


def cmd_noise(args, outputs):
    _require_file(args.input, "input image")
    spec = noise_spec(args)
    save_image(np.clip(spec.apply(load_image(args.input)), 0, 1), outputs.add(args.output))


def cmd_gen_corpus(args, outputs):
    if args.count < 1 or args.size < 8:
        raise CommandError("count must be >= 1 and size >= 8")
    images = synthetic_corpus(args.count, args.seed, args.size, texture=args.texture)
    for p in write_corpus(images, args.out):
        outputs.add(p)
    logger.info("wrote %d images to %s", args.count, args.out)


def cmd_baseline_pm(args, outputs):
    _require_file(args.input, "input image")
    try:
        cfg = classic.DiffusionConfig(kappa=args.kappa, iterations=args.iterations, diffusivity=args.diffusivity,
                                      contrast=args.contrast, scheme=args.scheme)
    except ValueError as exc:
        raise CommandError(str(exc)) from exc
    save_image(np.clip(classic.pm_denoise(load_image(args.input), cfg), 0, 1), outputs.add(args.output))


COMMANDS = {
    "train": cmd_train, "denoise": cmd_denoise, "evaluate": cmd_evaluate, "noise": cmd_noise,
    "gen-corpus": cmd_gen_corpus, "baseline-pm": cmd_baseline_pm,
}


def main(argv=None):
    argv = sys.argv[1:] if argv is None else argv
    try:
        args = parse_args(argv)
    except CommandError as exc:
        print(f"rldiff: error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr, force=True)
    threads = os.environ.get("RD_THREADS")
    if threads:
        import torch
        torch.set_num_threads(max(1, int(threads)))
    echo_config(args)
    outputs = Outputs()
    try:
        COMMANDS[args.command](args, outputs)
    except (CommandError, OSError, ValueError, trainer.TrainingError) as exc:
        outputs.discard()
        logger.error("%s", exc)
        return 1
    except BaseException:
        outputs.discard()
        raise
    return 0


if __name__ == "__main__":
    sys.exit(main())
