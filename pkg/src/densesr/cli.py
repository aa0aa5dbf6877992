"""``densesr`` command line: prepare | train | sr | eval | report | gradcheck."""

from __future__ import annotations

import argparse
import logging
import sys
import time
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import __version__
from .data import PATCH, load_cache, pairs_from_image, sanitize_id, write_cache
from .errors import CheckpointError, ConfigError, DenseSRError, PGMError
from .imgproc import BICUBIC_AA, KINDS, GrayImage, crop_to_multiple, downsample, read_pgm, retained_fraction, upscale, write_pgm
from .metrics import (
    MetricRow,
    aggregate,
    format_psnr,
    format_ssim,
    psnr,
    read_metric_csv,
    ssim,
    write_aggregate_csv,
    write_delta_csv,
    write_rows_csv,
)

log = logging.getLogger("densesr")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_VERIFY = 4
EXIT_MODEL = 5


class CommandError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _int_list(text: str) -> tuple[int, ...]:
    text = text.strip()
    if not text:
        return ()
    return tuple(int(t) for t in text.replace(",", " ").split())


def _bool(text: str) -> bool:
    v = str(text).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="key = value file; flags override its values")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=1, help="BLAS threads")
    common.add_argument("--deterministic", type=_bool, default=True, help="single-threaded batch assembly")
    common.add_argument("--log-level", default="INFO")

    parser = argparse.ArgumentParser(prog="densesr", description=__doc__)
    parser.add_argument("--version", action="version", version=f"densesr {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", parents=[common], help="cut HR images into LR/HR patch pairs")
    p.add_argument("hr_dir", type=Path)
    p.add_argument("out_dir", type=Path)
    p.add_argument("--scale", type=int, default=2)
    p.add_argument("--patch", type=int, default=PATCH)

    p = sub.add_parser("train", parents=[common], help="train the network on a prepared cache")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--preset", choices=("full", "small", "tiny"), default="full")
    p.add_argument("--scale", type=int, default=None, help="must match the cache")
    p.add_argument("--epochs", type=int, default=300)
    p.add_argument("--batch", type=int, default=128)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--drops", type=_int_list, default=(50, 200), help="epochs at which lr is divided by gamma")
    p.add_argument("--gamma", type=float, default=10.0)
    p.add_argument("--beta1", type=float, default=0.9)
    p.add_argument("--beta2", type=float, default=0.999)
    p.add_argument("--epsilon", type=float, default=1e-4)
    p.add_argument("--augment", type=_bool, default=True)
    p.add_argument("--val-fraction", type=float, default=0.0)
    p.add_argument("--checkpoint-every", type=int, default=10)
    p.add_argument("--max-iterations", type=int, default=None)
    p.add_argument("--time-budget", type=float, default=None, help="seconds")
    p.add_argument("--resume", type=Path, default=None)

    p = sub.add_parser("sr", parents=[common], help="super-resolve one PGM image")
    p.add_argument("model", type=Path)
    p.add_argument("input", type=Path)
    p.add_argument("output", type=Path)
    p.add_argument("--scale", type=int, default=None, help="fail unless the model has this scale")

    p = sub.add_parser("eval", parents=[common], help="score a model or baseline against HR images")
    p.add_argument("hr_dir", type=Path)
    p.add_argument("--scale", type=int, default=2)
    p.add_argument("--model", type=Path, default=None)
    p.add_argument("--name", default="DenseNet", help="method label for --model rows")
    p.add_argument("--baseline", default=None, help=f"one of {', '.join(KINDS)}, or 'all'")
    p.add_argument("--out", type=Path, required=True, help="output prefix for <prefix>_rows.csv / _aggregate.csv")
    p.add_argument("--patches", type=_bool, default=False, help="score 64x64 patches instead of full images")

    p = sub.add_parser("report", parents=[common], help="cross-method delta table from metric CSVs")
    p.add_argument("csv", type=Path, nargs="+")
    p.add_argument("--out", type=Path, default=None)

    sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every backward rule")
    return parser


def _subparser(parser: argparse.ArgumentParser, command: str) -> argparse.ArgumentParser:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[command]
    raise KeyError(command)


def read_config_file(path: Path) -> dict[str, str]:
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key.replace("-", "_")] = value
    return values


def parse_args(argv: list[str] | None = None) -> argparse.Namespace:
    """Parse flags, layering an optional config file underneath them."""
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", type=Path)
    known, _ = pre.parse_known_args(argv)
    command = next((a for a in argv if a in COMMANDS), None)
    if known.config is None or command is None:
        return parser.parse_args(argv)
    sub = _subparser(parser, command)
    actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}
    try:
        file_values = read_config_file(known.config)
    except OSError as exc:
        raise CommandError(f"cannot read config file: {exc}", EXIT_IO) from None
    unknown = sorted(set(file_values) - set(actions))
    if unknown:
        raise ConfigError(f"unknown config keys for '{command}': {', '.join(unknown)}")
    defaults = {}
    for key, text in file_values.items():
        action = actions[key]
        try:
            defaults[key] = action.type(text) if action.type else text
        except (ValueError, argparse.ArgumentTypeError) as exc:
            raise ConfigError(f"config key {key}: {exc}") from None
        if action.choices is not None and defaults[key] not in action.choices:
            raise ConfigError(f"config key {key}: {text!r} not in {sorted(action.choices)}")
        if action.required:
            action.required = False
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def resolved_config_lines(args: argparse.Namespace, extra: dict | None = None) -> list[str]:
    items = {k: v for k, v in vars(args).items() if k != "config"}
    items.update(extra or {})
    lines = [f"densesr {__version__}"]
    for key in sorted(items):
        value = items[key]
        if isinstance(value, (tuple, list)):
            value = ",".join(str(v) for v in value)
        lines.append(f"{key} = {value}")
    return lines


def _announce(args, extra: dict | None = None) -> list[str]:
    lines = resolved_config_lines(args, extra)
    print("\n".join(f"# {line}" for line in lines), flush=True)
    return lines


def _pgm_files(directory: Path) -> list[Path]:
    if not directory.is_dir():
        raise CommandError(f"{directory} is not a directory", EXIT_IO)
    return sorted(p for p in directory.iterdir() if p.suffix.lower() == ".pgm")


# -- commands -----------------------------------------------------------------


def cmd_prepare(args) -> int:
    _announce(args)
    if args.patch % args.scale:
        raise ConfigError(f"patch {args.patch} is not divisible by scale {args.scale}")
    files = _pgm_files(args.hr_dir)
    if not files:
        raise CommandError(f"no .pgm files in {args.hr_dir}", EXIT_IO)
    pairs, depth = [], 8
    for path in files:
        try:
            img = read_pgm(path)
            pairs += pairs_from_image(img, args.scale, sanitize_id(path.stem), args.patch)
            depth = max(depth, img.bit_depth)
        except (PGMError, OSError, ConfigError) as exc:
            print(f"warning: skipping {path}: {exc}", file=sys.stderr)
    if not pairs:
        raise CommandError("no patch pairs produced", EXIT_IO)
    write_cache(pairs, args.out_dir, args.scale, BICUBIC_AA, hr_bit_depth=depth)
    frac = retained_fraction(args.scale)
    print(f"pairs: {len(pairs)}")
    print(f"{100 * frac:g}% of HR pixels retained (scale x{args.scale})")
    return EXIT_OK


def _split_validation(pairs, fraction: float, seed: int):
    if fraction <= 0:
        return pairs, []
    ids = sorted({p.image_id for p in pairs})
    n_val = max(1, int(round(fraction * len(ids))))
    if n_val >= len(ids):
        raise ConfigError("validation fraction leaves no training images")
    val_ids = set(np.random.default_rng(seed).permutation(ids)[:n_val].tolist())
    return [p for p in pairs if p.image_id not in val_ids], [p for p in pairs if p.image_id in val_ids]


def cmd_train(args) -> int:
    from .model import NetworkConfig, build_network, config_dict, read_checkpoint, save_checkpoint
    from .optim import Adam, AdamConfig, LrSchedule, l1_loss, train
    from .tensor import Tensor, no_grad

    try:
        pairs, cache_scale = load_cache(args.data)
    except OSError as exc:
        raise CommandError(f"cannot read dataset cache: {exc}", EXIT_IO) from None
    if args.scale is not None and args.scale != cache_scale:
        raise ConfigError(f"--scale {args.scale} disagrees with the x{cache_scale} dataset cache")
    scale = cache_scale
    net_cfg = NetworkConfig.preset(args.preset, scale)
    adam_cfg = AdamConfig(args.lr, args.beta1, args.beta2, args.epsilon)
    schedule = LrSchedule(args.lr, tuple(args.drops), args.gamma)
    model_keys = {f"model.{k}": v for k, v in config_dict(net_cfg).items()}
    lines = _announce(args, {**model_keys, "dataset.pairs": len(pairs), "dataset.scale": scale})
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "resolved_config.txt").write_text("\n".join(lines) + "\n")

    train_pairs, val_pairs = _split_validation(pairs, args.val_fraction, args.seed)
    net = build_network(net_cfg, seed=args.seed)
    opt, start_epoch = None, 0
    if args.resume is not None:
        ckpt = read_checkpoint(args.resume)
        if ckpt.config != net_cfg:
            raise CommandError(f"checkpoint config {ckpt.config} does not match {net_cfg}", EXIT_MODEL)
        net.load_state(ckpt.tensors)
        opt = Adam(net.parameters(), adam_cfg)
        if ckpt.step is not None:
            opt.load_moments(net, ckpt.step, ckpt.moments)
        start_epoch = ckpt.epoch

    def on_epoch(epoch: int, loss: float) -> None:
        msg = f"epoch {epoch + 1} lr {schedule.lr_at(epoch):.3g} train_l1 {loss:.6f}"
        if val_pairs:
            with no_grad():
                lr = np.stack([p.lr for p in val_pairs])[:, None].astype(net.dtype)
                hr = np.stack([p.hr for p in val_pairs])[:, None].astype(net.dtype)
                msg += f" val_l1 {l1_loss(net(Tensor(lr)), hr).item():.6f}"
        print(msg, flush=True)

    result = train(
        net,
        train_pairs,
        adam_cfg,
        schedule,
        epochs=max(args.epochs - start_epoch, 0),
        batch=args.batch,
        seed=args.seed,
        augment=args.augment,
        deterministic=args.deterministic,
        max_iterations=args.max_iterations,
        time_budget=args.time_budget,
        log_path=args.out / "train_log.csv",
        checkpoint_dir=args.out,
        checkpoint_every=args.checkpoint_every,
        optimizer=opt,
        start_epoch=start_epoch,
        on_epoch=on_epoch,
    )
    save_checkpoint(net, args.out / "final.ckpt", result.epoch, result.optimizer)
    first = result.iteration_losses[0] if result.iteration_losses else float("nan")
    last = result.iteration_losses[-1] if result.iteration_losses else float("nan")
    print(f"iterations: {len(result.iteration_losses)} first_loss {first:.6f} final_loss {last:.6f}")
    print(f"checkpoint: {args.out / 'final.ckpt'}")
    return EXIT_OK


def _load_model(path: Path):
    from .model import load_checkpoint

    try:
        return load_checkpoint(path)
    except OSError as exc:
        raise CommandError(f"cannot read checkpoint: {exc}", EXIT_IO) from None
    except CheckpointError as exc:
        raise CommandError(f"invalid checkpoint {path}: {exc}", EXIT_MODEL) from None


def cmd_sr(args) -> int:
    _announce(args)
    net = _load_model(args.model)
    if args.scale is not None and args.scale != net.cfg.scale:
        raise CommandError(f"model is x{net.cfg.scale}, --scale asked for x{args.scale}", EXIT_MODEL)
    try:
        img = read_pgm(args.input)
    except OSError as exc:
        raise CommandError(f"cannot read {args.input}: {exc}", EXIT_IO) from None
    out = net.predict(img.pixels[None])[0].astype(np.float64)
    write_pgm(GrayImage(np.clip(out, 0.0, 1.0), img.bit_depth), args.output)
    print(f"wrote {args.output} ({out.shape[1]}x{out.shape[0]})")
    return EXIT_OK


def _eval_units(pixels: np.ndarray, image_id: str, scale: int, patches: bool):
    hr = crop_to_multiple(pixels, scale)
    if not patches:
        return [(image_id, hr)]
    return [(f"{image_id}@{r},{c}", hr[r * PATCH : (r + 1) * PATCH, c * PATCH : (c + 1) * PATCH])
            for r in range(hr.shape[0] // PATCH) for c in range(hr.shape[1] // PATCH)]


def cmd_eval(args) -> int:
    _announce(args)
    if (args.model is None) == (args.baseline is None):
        raise ConfigError("give exactly one of --model or --baseline")
    methods = []
    if args.model is not None:
        net = _load_model(args.model)
        if net.cfg.scale != args.scale:
            raise CommandError(f"model is x{net.cfg.scale} but --scale is {args.scale}", EXIT_MODEL)
        methods.append((args.name, lambda lr: net.predict(lr[None])[0].astype(np.float64)))
    else:
        kinds = KINDS if args.baseline == "all" else (args.baseline,)
        for kind in kinds:
            if kind not in KINDS:
                raise ConfigError(f"unknown baseline {kind!r}")
            methods.append((kind.capitalize(), lambda lr, kind=kind: upscale(lr, args.scale, kind)))

    rows, failures = [], 0
    files = _pgm_files(args.hr_dir)
    for path in files:
        try:
            units = _eval_units(read_pgm(path).pixels, sanitize_id(path.stem), args.scale, args.patches)
            for unit_id, hr in units:
                lr = downsample(hr, args.scale)
                for name, fn in methods:
                    pred = fn(lr)
                    rows.append(MetricRow(unit_id, name, args.scale, psnr(pred, hr), ssim(pred, hr)))
        except (PGMError, OSError, DenseSRError, ValueError) as exc:
            failures += 1
            print(f"warning: {path}: {exc}", file=sys.stderr)
    if not rows:
        raise CommandError(f"evaluation failed for all {len(files)} images", EXIT_IO)
    report = aggregate(rows)
    rows_path = Path(f"{args.out}_rows.csv")
    agg_path = Path(f"{args.out}_aggregate.csv")
    rows_path.parent.mkdir(parents=True, exist_ok=True)
    write_rows_csv(rows, rows_path)
    write_aggregate_csv(report, agg_path)
    for (method, scale), (p, s) in sorted(report.means.items()):
        print(f"{method:>10s} x{scale}  PSNR {format_psnr(p)}  SSIM {format_ssim(s)}")
    print(f"rows: {rows_path}\naggregate: {agg_path}")
    if failures:
        print(f"{failures} image(s) failed", file=sys.stderr)
    return EXIT_OK


def cmd_report(args) -> int:
    _announce(args)
    rows = []
    for path in args.csv:
        try:
            rows += read_metric_csv(path)
        except OSError as exc:
            raise CommandError(f"cannot read {path}: {exc}", EXIT_IO) from None
    report = aggregate(rows, strict=True)
    print("method_a,method_b,mean_psnr_delta,mean_ssim_delta")
    for d in report.deltas:
        print(f"{d.method_a},{d.method_b},{format_psnr(d.psnr_delta)},{format_ssim(d.ssim_delta)}")
    if args.out is not None:
        write_delta_csv(report, args.out)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_gradchecks

    _announce(args)
    start = time.perf_counter()
    results = run_gradchecks(seed=args.seed)
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status} {r.name:<14s} max_rel_error {r.max_rel_error:.3e} ({r.seconds:.2f}s)")
    print(f"total {time.perf_counter() - start:.1f}s")
    return EXIT_OK if all(r.passed for r in results) else EXIT_VERIFY


COMMANDS = {
    "prepare": cmd_prepare,
    "train": cmd_train,
    "sr": cmd_sr,
    "eval": cmd_eval,
    "report": cmd_report,
    "gradcheck": cmd_gradcheck,
}


def _thread_limit(threads: int):
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return nullcontext()
    return threadpool_limits(limits=max(threads, 1))


def main(argv: list[str] | None = None) -> int:
    try:
        args = parse_args(argv)
        logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO), format="%(message)s")
        with _thread_limit(args.threads):
            return COMMANDS[args.command](args)
    except CommandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as exc:
        print(f"model error: {exc}", file=sys.stderr)
        return EXIT_MODEL
    except (PGMError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
