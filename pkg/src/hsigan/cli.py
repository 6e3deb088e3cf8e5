"""Command-line front end: synth, train, compress, decompress, eval, rd.

Exit codes: 0 ok, 2 usage, 3 format or I/O error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import glob
import json
import math
import os
import sys

import numpy as np

from . import codec
from .coding import BitstreamError
from .evalio import CubeFormatError, RdPoint, rd_from_points, read_cube, synth_dataset, write_cube
from .networks import CheckpointError, ConfigError, ModelConfig, load_checkpoint
from .training import (TARGET_LAMBDAS, LossWeights, TrainingDiverged, load_training_checkpoint,
                       train)

EXIT_OK, EXIT_USAGE, EXIT_FORMAT, EXIT_NUMERIC = 0, 2, 3, 4
MANIFEST = "manifest.json"
CUBE_SUFFIX = ".hsraw"


class UsageError(ValueError):
    pass


# ---------------------------------------------------------------------------
# data helpers


def manifest_path(data):
    return os.path.join(data, MANIFEST) if os.path.isdir(data) else data


def load_split(data, split):
    path = manifest_path(data)
    with open(path) as fh:
        man = json.load(fh)
    root = os.path.dirname(os.path.abspath(path))
    names = man[split]
    if not names:
        raise UsageError(f"the {split} split is empty")
    return names, [read_cube(os.path.join(root, n)) for n in names]


def run_info_path(ckpt):
    return ckpt + ".json"


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args):
    if args.n < 10:
        raise UsageError(f"--n must be at least 10, got {args.n}")
    cubes, split = synth_dataset(args.n, args.bands, args.size, args.size, args.seed)
    os.makedirs(args.out_dir, exist_ok=True)
    names = [f"cube_{i:05d}{CUBE_SUFFIX}" for i in range(args.n)]
    for name, cube in zip(names, cubes):
        write_cube(os.path.join(args.out_dir, name), cube)
    man = {k: [names[i] for i in v] for k, v in split.as_dict().items()}
    man.update(bands=args.bands, size=args.size, seed=args.seed, n=args.n)
    with open(os.path.join(args.out_dir, MANIFEST), "w") as fh:
        json.dump(man, fh, indent=1, sort_keys=True)
    print(f"wrote {args.n} cubes to {args.out_dir} "
          f"(train {len(man['train'])}, val {len(man['val'])}, test {len(man['test'])})")


def _weights(args):
    w = LossWeights()
    if args.lambda_a is not None:
        return w.with_lambda_a(args.rt, args.lambda_a) if args.rt is not None else \
            w.with_lambda_a(0.0, args.lambda_a)
    if args.rt is None:
        raise UsageError("give --rt or --lambda-a")
    if not any(math.isclose(args.rt, k, abs_tol=1e-9) for k in TARGET_LAMBDAS):
        keys = ", ".join(str(k) for k in sorted(TARGET_LAMBDAS))
        raise UsageError(f"unknown --rt {args.rt}; known target rates are {keys} (or pass --lambda-a)")
    return w


def cmd_train(args):
    weights = _weights(args)
    r_t = args.rt if args.rt is not None else 0.0
    lam_a = weights.lambda_a[min(weights.lambda_a, key=lambda k: abs(k - r_t))]
    _, cubes = load_split(args.data, "train")
    data = np.stack([c.values for c in cubes])
    log_path = args.log or args.out + ".csv"
    resume = None
    if args.resume:
        resume = load_training_checkpoint(args.resume)
        config = resume[0].config
    else:
        config = ModelConfig(
            variant=args.variant, bands=data.shape[1], width_scale=args.width_scale,
            se_placement=args.se_placement, conv3d_placement=args.conv3d_placement,
            band_by_band=args.band_by_band, entropy_model=args.entropy_model, seed=args.seed)
    print(f"r_t={r_t} lambda_a={lam_a} lambda_b={weights.lambda_b}")
    res = train(config, data, weights, r_t=r_t, steps_pretrain=args.steps_pretrain,
                steps_gan=args.steps_gan, seed=args.seed, batch_size=args.batch_size,
                lr=args.lr, lr_d=args.lr_d, rate_mode=args.rate_mode, log_path=log_path,
                checkpoint_path=args.out, checkpoint_every=args.checkpoint_every,
                resume=resume, stop_after=args.stop_after)
    info = {"variant": config.variant, "r_t": r_t, "lambda_a": lam_a,
            "lambda_b": weights.lambda_b, "steps": res.state.step, "log": log_path,
            "config_digest": config.digest().hex()}
    with open(run_info_path(args.out), "w") as fh:
        json.dump(info, fh, indent=1, sort_keys=True)
    last = res.log[-1] if res.log else None
    if last:
        print(f"step {last['step']} rate_bpp={last['rate_bpp']:.4f} "
              f"distortion={last['distortion']:.4f} lambda={last['lambda']}")
    print(f"checkpoint written to {args.out}")


def cmd_compress(args):
    bundle, _ = load_checkpoint(args.ckpt)
    cube = read_cube(args.input).values
    data, _ = codec.compress(bundle, cube)
    with open(args.out, "wb") as fh:
        fh.write(data)
    recon, _ = codec.decompress(bundle, data)
    rt = codec.measure(cube, recon, data)
    s = "n/a" if rt.ssim is None else f"{rt.ssim:.6f}"
    print(f"bits={8 * len(data)} bpp={rt.bpp!r} psnr_db={rt.psnr:.4f} ssim={s}")


def cmd_decompress(args):
    bundle, _ = load_checkpoint(args.ckpt)
    with open(args.input, "rb") as fh:
        data = fh.read()
    recon, _ = codec.decompress(bundle, data)
    write_cube(args.out, recon)
    print(f"wrote {args.out} {recon.shape[0]}x{recon.shape[1]}x{recon.shape[2]}")


def evaluate(reconstruct, names, cubes):
    """Per-image rows (name, bpp, psnr_db, ssim) and the aggregate row.

    ``reconstruct(cube) -> (recon, bitstream bytes)``.
    """
    rows = []
    for name, cube in zip(names, cubes):
        recon, data = reconstruct(cube.values)
        m = codec.measure(cube.values, recon, data)
        rows.append({"image": name, "bpp": m.bpp, "psnr_db": m.psnr,
                     "ssim": m.ssim if m.ssim is not None else float("nan")})
    agg = {"image": "mean"}
    for k in ("bpp", "psnr_db", "ssim"):
        agg[k] = float(np.mean([r[k] for r in rows]))
    return rows, agg


def _codec_reconstruct(bundle):
    def run(cube):
        data, _ = codec.compress(bundle, cube)
        recon, _ = codec.decompress(bundle, data)
        return recon, data
    return run


def write_eval_csv(path, rows, agg):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["image", "bpp", "psnr_db", "ssim"])
        for r in rows + [agg]:
            wr.writerow([r["image"], repr(r["bpp"]), repr(r["psnr_db"]), repr(r["ssim"])])


def cmd_eval(args):
    bundle, _ = load_checkpoint(args.ckpt)
    names, cubes = load_split(args.data, args.split)
    rows, agg = evaluate(_codec_reconstruct(bundle), names, cubes)
    write_eval_csv(args.out_csv, rows, agg)
    print(f"{len(rows)} images: bpp={agg['bpp']:.6f} psnr_db={agg['psnr_db']:.4f} "
          f"ssim={agg['ssim']:.6f}")


def cmd_rd(args):
    paths = sorted(glob.glob(os.path.join(args.ckpt_dir, "*.ckpt")))
    if not paths:
        raise UsageError(f"no *.ckpt files in {args.ckpt_dir}")
    names, cubes = load_split(args.data, args.split)
    points = []
    for p in paths:
        bundle, _ = load_checkpoint(p)
        info_path = run_info_path(p)
        r_t = float("nan")
        if os.path.exists(info_path):
            with open(info_path) as fh:
                r_t = float(json.load(fh)["r_t"])
        _, agg = evaluate(_codec_reconstruct(bundle), names, cubes)
        points.append(RdPoint(bundle.config.variant, r_t, agg["bpp"], agg["psnr_db"],
                              agg["ssim"] if not math.isnan(agg["ssim"]) else 0.0))
    curve = rd_from_points(points)
    with open(args.out_csv, "w", newline="") as fh:
        fh.write(curve.to_csv())
    for variant, a, b in curve.non_monotone:
        print(f"non-monotone segment in {variant}: r_t {a} -> {b}")
    print(f"wrote {len(curve.points)} RD points to {args.out_csv}")


# ---------------------------------------------------------------------------
# parser


def _bool(v):
    if isinstance(v, bool):
        return v
    if str(v).lower() in ("1", "true", "yes", "on"):
        return True
    if str(v).lower() in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {v!r}")


def build_parser():
    parser = argparse.ArgumentParser(prog="hsigan", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key=value file; command-line flags win")
    sub = parser.add_subparsers(dest="command", required=True)
    sub_add = sub.add_parser

    def add(name, **kw):
        return sub_add(name, parents=[common], **kw)

    sub.add_parser = add

    p = sub.add_parser("synth", help="write a synthetic dataset and split manifest")
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--bands", type=int, default=8)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model and write a checkpoint + metrics CSV")
    p.add_argument("--variant", choices=["opt", "se", "3d"], default="opt")
    p.add_argument("--rt", type=float)
    p.add_argument("--lambda-a", type=float)
    p.add_argument("--width-scale", type=float, default=0.125)
    p.add_argument("--se-placement", help="se variant only; default encoder_and_generator")
    p.add_argument("--conv3d-placement", help="3d variant only; default first_and_last")
    p.add_argument("--band-by-band", type=_bool, default=False)
    p.add_argument("--entropy-model", choices=["factorized", "hyperprior"], default="factorized")
    p.add_argument("--steps-pretrain", type=int, default=200)
    p.add_argument("--steps-gan", type=int, default=200)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--lr-d", type=float, default=1e-4)
    p.add_argument("--rate-mode", choices=["pixel", "band_pixel"], default="pixel")
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--stop-after", type=int, help="stop after this many total steps")
    p.add_argument("--data", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--log")
    p.add_argument("--resume")
    p.set_defaults(func=cmd_train)

    for name, fn, helptext in (("compress", cmd_compress, "cube -> bitstream file"),
                               ("decompress", cmd_decompress, "bitstream file -> cube")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--ckpt", required=True)
        p.add_argument("--in", dest="input", required=True)
        p.add_argument("--out", required=True)
        p.set_defaults(func=fn)

    p = sub.add_parser("eval", help="per-image and mean metrics over a split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out-csv", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("rd", help="rate-distortion CSV across checkpoints")
    p.add_argument("--ckpt-dir", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out-csv", required=True)
    p.set_defaults(func=cmd_rd)
    return parser


def read_config_file(path):
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key=value")
            k, v = line.split("=", 1)
            out[k.strip().lstrip("-").replace("-", "_")] = v.strip()
    return out


def _config_arg(argv):
    for i, a in enumerate(argv):
        if a == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if a.startswith("--config="):
            return a.split("=", 1)[1]
    return None


def parse_args(argv):
    """Parse flags; values from a ``--config`` file act as defaults."""
    parser = build_parser()
    path = _config_arg(argv)
    if path is not None:
        choices = parser._subparsers._group_actions[0].choices
        command = next((a for a in argv if a in choices), None)
        if command is None:
            parser.parse_args(argv)
        values = read_config_file(path)
        values.pop("config", None)
        sub = choices[command]
        known = {a.dest for a in sub._actions}
        unknown = sorted(set(values) - known)
        if unknown:
            raise UsageError(f"unknown config keys for {command}: {', '.join(unknown)}")
        sub.set_defaults(**values)
        for a in sub._actions:
            if a.dest in values:
                a.required = False
    return parser.parse_args(argv)


def main(argv=None):
    argv = sys.argv[1:] if argv is None else argv
    try:
        args = parse_args(argv)
        args.func(args)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    except (UsageError, ConfigError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except codec.ModelMismatch as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except (BitstreamError, CubeFormatError, CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except (TrainingDiverged, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
