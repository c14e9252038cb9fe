"""Command-line surface: simulate, synth, train, eval, gradcheck, dump-features.

Exit codes: 0 success, 1 usage, 2 IO/parse/contract, 3 check failure.
With identical arguments, input files, and seed every subcommand writes
byte-identical artifacts.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, DimensionError
from .config import ConfigError, config_from_file
from .fileio import (FileFormatError, read_checkpoint, read_cube, read_mask,
                     write_checkpoint, write_csv, write_cube, write_mask,
                     write_pgm)
from .network import forward_tensors, infer_config
from .objective import corollary_probe
from .optics import (HyperCube, ShearRule, form_measurement, init_input,
                     make_mask, make_synthetic_cube)
from .training import fit, psnr, ssim

HISTORY_COLUMNS = ("epoch", "phase", "lr", "recon", "me", "ma", "total",
                   "masked_mae", "unmasked_mae")
REPORT_COLUMNS = ("scene", "psnr", "ssim", "masked_mae", "unmasked_mae",
                  "psnr_infinite")


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage errors; the contract reserves 2 for IO
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _build_parser() -> _Parser:
    p = _Parser(prog="s2cassi", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="form one coded measurement from a cube")
    sim.add_argument("--cube", required=True)
    sim.add_argument("--mask", required=True)
    sim.add_argument("--out", required=True)
    sim.add_argument("--noise-sigma", type=float, default=0.0)
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--d", type=int, default=2, help="disperser step in pixels per channel")

    syn = sub.add_parser("synth", help="write a synthetic scene set plus a mask")
    syn.add_argument("--out", required=True)
    syn.add_argument("--count", type=int, default=8)
    syn.add_argument("--h", type=int, default=64)
    syn.add_argument("--w", type=int, default=64)
    syn.add_argument("--nl", type=int, default=8)
    syn.add_argument("--seed", type=int, default=0)
    syn.add_argument("--mask-density", type=float, default=0.5)

    tr = sub.add_parser("train", help="fit the reconstruction model on a scene directory")
    tr.add_argument("--config", required=True)
    tr.add_argument("--data", required=True)
    tr.add_argument("--mask", required=True)
    tr.add_argument("--out", required=True)
    tr.add_argument("--history", default=None, help="write per-epoch CSV here")

    ev = sub.add_parser("eval", help="score a checkpoint on a scene directory")
    ev.add_argument("--ckpt", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--mask", required=True)
    ev.add_argument("--report", required=True)
    ev.add_argument("--dump-difficulty", default=None,
                    help="directory for per-channel residual PGM maps")
    ev.add_argument("--d", type=int, default=2)

    gc = sub.add_parser("gradcheck", help="run the finite-difference suite")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--tol", type=float, default=1e-3,
                    help="single-path tolerance; the double path runs at tol/10")

    df = sub.add_parser("dump-features", help="write per-channel feature maps at one tap")
    df.add_argument("--ckpt", required=True)
    df.add_argument("--cube", required=True)
    df.add_argument("--mask", required=True)
    df.add_argument("--stage", type=int, required=True)
    df.add_argument("--block", type=int, required=True)
    df.add_argument("--out", required=True)
    df.add_argument("--d", type=int, default=2)
    return p


def _load_scenes(data_dir: str) -> list:
    try:
        names = sorted(n for n in os.listdir(data_dir) if n.endswith(".hsc"))
    except NotADirectoryError:
        raise FileFormatError(f"{data_dir}: not a directory")
    if not names:
        raise FileFormatError(f"{data_dir}: no .hsc scene files")
    return [read_cube(os.path.join(data_dir, n)) for n in names]


def _reconstruct(cube: HyperCube, mask, params, cfg, rule: ShearRule) -> np.ndarray:
    y = form_measurement(cube, mask, rule)
    y_prime = init_input(y, mask, rule)
    with ad.no_grad():
        res = forward_tensors(ad.tensor(y_prime.data), params, cfg)
    return np.clip(res.recon.data, 0.0, 1.0)


def cmd_simulate(args) -> int:
    cube = read_cube(args.cube)
    mask = read_mask(args.mask)
    rule = ShearRule(d=args.d)
    y = form_measurement(cube, mask, rule, noise_sigma=args.noise_sigma,
                         seed=args.seed)
    write_cube(args.out, HyperCube(y.data[:, :, None]))
    print(f"wrote {args.out} ({y.h}x{y.w_ext})")
    return 0


def cmd_synth(args) -> int:
    if args.count < 1:
        raise ContractError(f"synth: count must be >= 1, got {args.count}")
    os.makedirs(args.out, exist_ok=True)
    for i in range(args.count):
        cube = make_synthetic_cube(args.h, args.w, args.nl, seed=args.seed + i)
        write_cube(os.path.join(args.out, f"scene_{i:03d}.hsc"), cube)
    mask = make_mask(args.h, args.w, kind="binary", density=args.mask_density,
                     seed=args.seed)
    write_mask(os.path.join(args.out, "mask.msk"), mask)
    print(f"wrote {args.count} scenes ({args.h}x{args.w}x{args.nl}) and mask.msk to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = config_from_file(args.config)
    scenes = _load_scenes(args.data)
    mask = read_mask(args.mask)
    params, history = fit(scenes, mask, cfg.network_config(), cfg.schedule(),
                          seed=cfg["seed"], opt=cfg.optimizer_state(),
                          rule=cfg.shear_rule(), **cfg.fit_kwargs())
    write_checkpoint(args.out, params)
    if args.history:
        rows = [(r.epoch, r.phase, r.lr, r.recon, r.me, r.ma, r.total,
                 r.masked_mae, r.unmasked_mae) for r in history]
        write_csv(args.history, HISTORY_COLUMNS, rows)
    last = history[-1]
    print(f"trained {len(history)} epochs on {len(scenes)} scenes, "
          f"final total {last.total:.6g}; wrote {args.out}")
    return 0


def cmd_eval(args) -> int:
    params = read_checkpoint(args.ckpt)
    cfg = infer_config(params)
    scenes = _load_scenes(args.data)
    mask = read_mask(args.mask)
    rule = ShearRule(d=args.d)
    if args.dump_difficulty:
        os.makedirs(args.dump_difficulty, exist_ok=True)
    rows = []
    for i, cube in enumerate(scenes):
        recon = _reconstruct(cube, mask, params, cfg, rule)
        val = psnr(recon, cube.data)
        probe = corollary_probe(recon, cube.data, mask)
        rows.append((i, val, ssim(recon, cube.data), probe.masked_mae,
                     probe.unmasked_mae, not np.isfinite(val)))
        if args.dump_difficulty:
            for c in range(probe.difficulty.shape[2]):
                name = f"scene_{i:03d}_ch{c:02d}.pgm"
                write_pgm(os.path.join(args.dump_difficulty, name),
                          probe.difficulty[:, :, c])
    write_csv(args.report, REPORT_COLUMNS, rows)
    mean_psnr = float(np.mean([r[1] for r in rows]))
    print(f"evaluated {len(rows)} scenes, mean PSNR {mean_psnr:.6g} dB; "
          f"wrote {args.report}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradsuite import run_suite
    results = run_suite(seed=args.seed, tol_double=args.tol / 10.0,
                        tol_single=args.tol)
    failed = 0
    for r in results:
        mark = "ok  " if r.passed else "FAIL"
        failed += not r.passed
        print(f"{mark} {r.name:28s} rel {r.max_rel_err:.3e} (tol {r.tol:.1e})")
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return 3 if failed else 0


def cmd_dump_features(args) -> int:
    params = read_checkpoint(args.ckpt)
    cfg = infer_config(params)
    if not 0 <= args.stage < cfg.k:
        raise ContractError(
            f"dump-features: stage must be in [0, {cfg.k}), got {args.stage}")
    if not 0 <= args.block < cfg.l:
        raise ContractError(
            f"dump-features: block must be in [0, {cfg.l}), got {args.block}")
    cube = read_cube(args.cube)
    mask = read_mask(args.mask)
    rule = ShearRule(d=args.d)
    y = form_measurement(cube, mask, rule)
    y_prime = init_input(y, mask, rule)
    with ad.no_grad():
        res = forward_tensors(ad.tensor(y_prime.data), params, cfg,
                              tap_stage=args.stage, tap_block=args.block)
    feat = res.tap.data
    os.makedirs(args.out, exist_ok=True)
    for c in range(feat.shape[2]):
        write_pgm(os.path.join(args.out, f"ch{c:02d}.pgm"), feat[:, :, c])
    print(f"wrote {feat.shape[2]} feature maps ({feat.shape[0]}x{feat.shape[1]}) to {args.out}")
    return 0


_COMMANDS = {
    "simulate": cmd_simulate,
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "dump-features": cmd_dump_features,
}


def _apply_thread_cap() -> None:
    raw = os.environ.get("S2_THREADS", "0").strip()
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"S2_THREADS: expected an integer, got {raw!r}")
    if n < 0:
        raise ConfigError(f"S2_THREADS: must be >= 0, got {n}")
    if n > 0:
        import threadpoolctl

        threadpoolctl.threadpool_limits(limits=n)


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        _apply_thread_cap()
        return _COMMANDS[args.command](args)
    except (FileFormatError, ConfigError, ContractError, DimensionError,
            OSError) as exc:
        print(f"s2cassi {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
