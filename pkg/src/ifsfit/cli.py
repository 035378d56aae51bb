"""Command-line entry point: ``ifsfit {invert,generate,render,eval,gradcheck}``.

Exit codes: 0 success, 1 I/O or format error, 2 numerical failure (exploded
optimisation or a failed gradient check).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import __version__
from .data_io import generate_fractaldb_target, load_idx_target, load_target, write_pgm
from .errors import CorruptFile, NonFiniteGradient, UnsupportedFormat
from .grad import finite_difference_check
from .ifs import FractalSystem, random_system, sample_index_batch, sample_start_points, transform_probabilities
from .optim import OptimizerConfig, evaluate_min_mse, fit, sample_min_mse
from .render import RenderConfig

log = logging.getLogger("ifsfit")

EXIT_IO = 1
EXIT_NUMERIC = 2

# Flags left unset fall back to the --fast profile (if requested) and then to these.
DEFAULTS = {
    "n_transforms": 10, "t_len": 300, "tau": 1.0, "batch_size": 50, "lr": 0.05, "steps": 1000,
    "lr_decay": 0.5, "decay_every": 250, "noise_std": 0.1, "noise_every": 5,
}
FAST_PROFILE = {"batch_size": 16, "steps": 500, "t_len": 200}


def _threads(n):
    if not n:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def _resolve_seed(seed):
    if seed is not None:
        return seed
    return int(np.random.SeedSequence().entropy % (2**63))


def _resolved(args, name):
    value = getattr(args, name, None)
    if value is not None:
        return value
    if getattr(args, "fast", False) and name in FAST_PROFILE:
        return FAST_PROFILE[name]
    return DEFAULTS[name]


def _render_config(args) -> RenderConfig:
    return RenderConfig(
        h=args.height, w=args.width, tau=_resolved(args, "tau"), clamp=args.clamp,
        truncation_radius=args.truncation_radius,
    )


def _optimizer_config(args, seed) -> OptimizerConfig:
    return OptimizerConfig(
        objective=args.objective,
        batch_size=_resolved(args, "batch_size"),
        steps=_resolved(args, "steps"),
        lr=_resolved(args, "lr"),
        lr_decay=_resolved(args, "lr_decay"),
        decay_every=_resolved(args, "decay_every"),
        noise_std=_resolved(args, "noise_std"),
        noise_every=_resolved(args, "noise_every"),
        noise_enabled=args.noise,
        t_len=_resolved(args, "t_len"),
        seed=seed,
        render=_render_config(args),
        optimizer=args.optimizer,
        reparameterize=not args.raw_matrices,
    )


def _eval_config(args, seed) -> OptimizerConfig:
    return OptimizerConfig(t_len=_resolved(args, "t_len"), seed=seed, render=_render_config(args))


def _load_system(path) -> FractalSystem:
    try:
        return FractalSystem.from_json(Path(path).read_text())
    except (KeyError, TypeError, ValueError) as err:
        raise CorruptFile(f"{path}: not a fractal parameter file ({err})") from err


def _load_target_arg(args):
    if args.idx_index is not None:
        return load_idx_target(args.target, args.idx_index, args.height, args.width, args.threshold)
    return load_target(args.target, args.height, args.width, args.threshold)


def _write_json(path, payload):
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")


def _progress(step, _system):
    if (step + 1) % 100 == 0:
        log.info("step %d done", step + 1)


def cmd_invert(args) -> int:
    seed = _resolve_seed(args.seed)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    target = _load_target_arg(args)
    cfg = _optimizer_config(args, seed)
    init = random_system(np.random.default_rng([seed, 1]), _resolved(args, "n_transforms"))
    outputs = {k: str(out / name) for k, name in (
        ("learned", "learned.json"), ("loss", "loss.csv"), ("best_render", "best_render.pgm"),
        ("manifest", "manifest.json"))}
    manifest = {
        "command": "invert", "version": __version__, "seed": seed, "target": target.source,
        "threshold": args.threshold, "n_transforms": init.n, "eval_samples": args.eval_samples,
        "threads": args.threads, "config": cfg.to_dict(), "initial_system": init.to_dict(),
        "outputs": outputs,
    }
    try:
        result = fit(init, target.canvas, cfg, callback=_progress)
    except NonFiniteGradient as err:
        log.error("optimisation aborted: %s", err)
        Path(outputs["learned"]).write_text(err.last_system.to_json() + "\n")
        manifest["status"] = f"aborted at step {err.step}: non-finite gradient"
        del outputs["best_render"], outputs["loss"]
        _write_json(outputs["manifest"], manifest)
        return EXIT_NUMERIC
    Path(outputs["learned"]).write_text(result.learned.to_json() + "\n")
    result.write_loss_csv(outputs["loss"])
    losses, best = sample_min_mse(result.learned, target.canvas, args.eval_samples, cfg,
                                  np.random.default_rng([seed, 2]))
    write_pgm(outputs["best_render"], best)
    manifest["status"] = "ok"
    manifest["min_mse"] = float(losses.min())
    _write_json(outputs["manifest"], manifest)
    print(f"min-MSE over {args.eval_samples} samples: {losses.min():.6f} (seed {seed})")
    return 0


def cmd_generate(args) -> int:
    seed = _resolve_seed(args.seed)
    out = Path(args.out_dir)
    if args.count <= 0:
        return 0
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for i in range(args.count):
        ft = generate_fractaldb_target([seed, i], args.height, args.width, args.n_transforms, args.t_len)
        stem = out / f"fractal_{i:04d}"
        write_pgm(stem.with_suffix(".pgm"), ft.image.canvas)
        stem.with_suffix(".json").write_text(ft.system.to_json() + "\n")
        files.append(stem.name)
    _write_json(out / "manifest.json", {
        "command": "generate", "version": __version__, "seed": seed, "count": args.count,
        "n_transforms": args.n_transforms, "t_len": args.t_len, "height": args.height,
        "width": args.width, "item_seed": "[seed, index]", "outputs": files,
    })
    print(f"wrote {args.count} targets to {out} (seed {seed})")
    return 0


def cmd_render(args) -> int:
    seed = _resolve_seed(args.seed)
    system = _load_system(args.params)
    cfg = _eval_config(args, seed)
    rng = np.random.default_rng(seed)
    z = sample_index_batch(transform_probabilities(system), 1, cfg.t_len, rng)
    v0 = sample_start_points(rng, 1)
    from .grad import evaluate_batch

    img = evaluate_batch(system.params, system.flips, z, v0, np.zeros(cfg.render.shape), cfg.render,
                         need_grad=False).pixels[0]
    write_pgm(args.out, img, binary=not args.ascii)
    print(f"rendered {args.params} -> {args.out} (seed {seed})")
    return 0


def cmd_eval(args) -> int:
    seed = _resolve_seed(args.seed)
    system = _load_system(args.params)
    target = _load_target_arg(args)
    cfg = _eval_config(args, seed)
    value = evaluate_min_mse(system, target.canvas, args.n, cfg, np.random.default_rng(seed))
    print(f"min-MSE over {args.n} samples: {value:.6f} (seed {seed})")
    return 0


def gradcheck_configs(seed: int, count: int):
    """Random small configurations: N=3, T=20, 8x8 canvas, sigma in [0.2, 0.8]."""
    rng = np.random.default_rng(seed)
    cfg = RenderConfig(h=8, w=8, tau=1.0, clamp=False)
    for _ in range(count):
        system = random_system(rng, 3)
        params = system.params
        params[:, 2:4] = rng.uniform(0.2, 0.8, size=(3, 2))
        system = FractalSystem.from_arrays(params, system.flips)
        z = sample_index_batch(transform_probabilities(system), 2, 20, rng)
        v0 = sample_start_points(rng, 2)
        target = (rng.uniform(size=(8, 8)) < 0.3).astype(float)
        yield system, z, v0, target, cfg


def cmd_gradcheck(args) -> int:
    seed = 0 if args.seed is None else args.seed
    worst = {}
    for system, z, v0, target, cfg in gradcheck_configs(seed, args.configs):
        report = finite_difference_check(system, z, target, args.step, v0s=v0, cfg=cfg)
        for kind, err in report.max_rel_error.items():
            worst[kind] = max(worst.get(kind, 0.0), err)
    ok = all(err < args.threshold for err in worst.values())
    print(f"{'parameter':<10} {'max rel error':>14}  status")
    for kind, err in worst.items():
        print(f"{kind:<10} {err:>14.3e}  {'ok' if err < args.threshold else 'FAIL'}")
    print(f"{args.configs} configurations, threshold {args.threshold:g}: {'PASS' if ok else 'FAIL'}")
    return 0 if ok else EXIT_NUMERIC


def _add_render_flags(p):
    p.add_argument("--height", type=int, default=32, help="canvas height in pixels (default 32)")
    p.add_argument("--width", type=int, default=32, help="canvas width in pixels (default 32)")
    p.add_argument("--tau", type=float, default=None, help="RBF kernel bandwidth (default 1.0)")
    p.add_argument("--clamp", action=argparse.BooleanOptionalAction, default=True,
                   help="clamp rendered pixels to [0, 1] (default on)")
    p.add_argument("--truncation-radius", type=float, default=None,
                   help="drop kernel contributions farther than this many pixels (default: exact kernel)")
    p.add_argument("--t-len", type=int, default=None, help="chaos-game iterations per image (default 300)")


def _add_common(p):
    p.add_argument("--seed", type=int, default=None, help="RNG seed; drawn and recorded if omitted")
    p.add_argument("--threads", type=int, default=None, help="limit BLAS threads")


def _add_target_flags(p):
    p.add_argument("target", help="target image (PGM P2/P5, PNG, or IDX with --idx-index)")
    p.add_argument("--idx-index", type=int, default=None, help="read image INDEX from an IDX file")
    p.add_argument("--threshold", type=float, default=0.5, help="binarization threshold (default 0.5)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ifsfit", description="Fit iterated-function-system fractals to images.")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("invert", help="learn fractal parameters that reconstruct a target image")
    _add_target_flags(p)
    p.add_argument("--out-dir", required=True, help="directory for learned.json, loss.csv, ...")
    p.add_argument("--objective", choices=["expectation", "fixed"], default="expectation",
                   help="resample sequences every step (expectation) or fix them once (fixed)")
    p.add_argument("--noise", action=argparse.BooleanOptionalAction, default=True,
                   help="inject Gaussian parameter noise (default on)")
    p.add_argument("--noise-std", type=float, default=None, help="noise standard deviation (default 0.1)")
    p.add_argument("--noise-every", type=int, default=None, help="steps between injections (default 5)")
    p.add_argument("--steps", type=int, default=None, help="optimisation steps (default 1000)")
    p.add_argument("--batch-size", type=int, default=None, help="index sequences per step (default 50)")
    p.add_argument("--lr", type=float, default=None, help="initial learning rate (default 0.05)")
    p.add_argument("--lr-decay", type=float, default=None, help="decay factor (default 0.5)")
    p.add_argument("--decay-every", type=int, default=None, help="steps between decays (default 250)")
    p.add_argument("--n-transforms", type=int, default=None, help="transforms per system (default 10)")
    p.add_argument("--optimizer", choices=["adam", "sgd"], default="adam",
                   help="update rule (default adam; sgd uses momentum 0.9)")
    p.add_argument("--raw-matrices", action="store_true",
                   help="optimise raw 2x2 matrices instead of the rotation/scale factorisation")
    p.add_argument("--eval-samples", type=int, default=100, help="renders scored for min-MSE (default 100)")
    p.add_argument("--fast", action="store_true", help="CI profile: batch 16, 500 steps, T=200")
    _add_render_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_invert)

    p = sub.add_parser("generate", help="write random FractalDB-style targets and their parameters")
    p.add_argument("--count", type=int, required=True, help="number of targets to write")
    p.add_argument("--out-dir", required=True, help="directory for fractal_NNNN.{pgm,json}")
    p.add_argument("--n-transforms", type=int, default=10, help="transforms per system (default 10)")
    p.add_argument("--t-len", type=int, default=300, help="chaos-game iterations (default 300)")
    p.add_argument("--height", type=int, default=32, help="canvas height in pixels (default 32)")
    p.add_argument("--width", type=int, default=32, help="canvas width in pixels (default 32)")
    _add_common(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("render", help="render one sampled image of a parameter file")
    p.add_argument("params", help="parameter JSON")
    p.add_argument("--out", required=True, help="output PGM path")
    p.add_argument("--ascii", action="store_true", help="write plain-text P2 instead of binary P5")
    _add_render_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", help="minimum MSE of n sampled renders against a target")
    p.add_argument("params", help="parameter JSON")
    _add_target_flags(p)
    p.add_argument("-n", "--n", type=int, default=100, help="number of sampled renders (default 100)")
    _add_render_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="compare analytic and finite-difference gradients")
    p.add_argument("--configs", type=int, default=50, help="random configurations (default 50)")
    p.add_argument("--step", type=float, default=1e-5, help="central-difference step (default 1e-5)")
    p.add_argument("--threshold", type=float, default=1e-4, help="max relative error (default 1e-4)")
    _add_common(p)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _threads(args.threads):
            return args.func(args)
    except (OSError, UnsupportedFormat, CorruptFile) as err:
        print(f"ifsfit: error: {err}", file=sys.stderr)
        return EXIT_IO
    except ValueError as err:
        print(f"ifsfit: error: {err}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
