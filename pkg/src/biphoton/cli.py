"""Command-line front end.

Subcommands map onto the pipeline stages: ``simulate`` (medium synthesis),
``acquire`` (frame generation), ``calibrate`` (dark-stack analysis),
``analyze-epr``, ``certify``, ``optimize`` (wavefront shaping), ``plateau``
(frame-count noise model), ``run`` (full pipeline), ``emit-figures``.

Exit codes: 0 success, 2 configuration error, 3 stage failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_STAGE = 3


def _add_config_arg(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="JSON run configuration file")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="biphoton", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="synthesize a scattering medium and save it")
    p.add_argument("--kind", default="thin_phase", choices=["thin_phase", "thick_iid_gaussian", "multi_screen"])
    p.add_argument("--size", type=int, default=16, help="grid side length (modes)")
    p.add_argument("--pitch", type=float, default=4.5e-6, help="input mode pitch (m)")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("acquire", help="generate signal + dark frame stacks for a run config")
    _add_config_arg(p)

    p = sub.add_parser("calibrate", help="hot-pixel map and cross-talk reference from a dark stack")
    p.add_argument("--dark", required=True, help="dark frame stack file")
    p.add_argument("--threshold", type=float, default=0.10)
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("analyze-epr", help="uncertainty-product test from stored projections")
    p.add_argument("--run-dir", required=True)

    p = sub.add_parser("certify", help="dimension witness from stored correlation matrices")
    p.add_argument("--run-dir", required=True)

    p = sub.add_parser("optimize", help="two-plane wavefront-shaping optimization on a thick medium")
    p.add_argument("--size", type=int, default=16)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--budget", type=int, default=20000)
    p.add_argument("--phases", type=int, default=16)
    p.add_argument("--two-planes", action="store_true")
    p.add_argument("--plane-distance", type=float, default=0.2)
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("plateau", help="fidelity/dimension vs frame count noise model")
    p.add_argument("--d", type=int, default=45)
    p.add_argument("--alpha", type=float, default=1.0 / 45.0)
    p.add_argument("--alpha-prime", type=float, default=0.0)
    p.add_argument("--noise-scale", type=float, default=1.0)
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--frame-counts", type=float, nargs="+", default=None)
    p.add_argument("--out", required=True)

    p = sub.add_parser("run", help="full pipeline for one configured arm")
    _add_config_arg(p)

    p = sub.add_parser("emit-figures", help="render figures + plot CSVs from completed runs")
    p.add_argument("run_dirs", nargs="+")
    p.add_argument("--plateau-csv", default=None)
    p.add_argument("--out-dir", required=True)

    return parser


def _cmd_simulate(args) -> int:
    from .optics import ModeGrid, MediumSpec, synth_medium, save_transfer_matrix

    spec = MediumSpec(args.kind, ModeGrid(args.size, args.size, args.pitch), seed=args.seed)
    save_transfer_matrix(synth_medium(spec), args.out)
    print(f"medium written to {args.out}")
    return EXIT_OK


def _cmd_acquire(args) -> int:
    from .pipeline import RunConfig
    from . import pipeline

    config = RunConfig.from_file(args.config)
    out = Path(config.output)
    out.mkdir(parents=True, exist_ok=True)
    medium = pipeline._build_medium(config)
    from .states import GaussianPairSpec, flat_mask, input_state, propagate
    import warnings

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        grid = medium.in_grid
        psi = input_state(
            grid,
            GaussianPairSpec(config.sigma_r_px * config.crystal_pitch, config.sigma_k_px * config.momentum_bin),
        )
        psi_m = propagate(psi, medium, flat_mask(grid), "momentum")
    from . import spadsim

    stack = spadsim.simulate_frames(psi_m, pipeline._sensor(config, "momentum"), config.frames)
    stack.save(out / "frames_momentum.spad")
    dark = spadsim.dark_stack(pipeline._sensor(config, "dark"), config.dark_frames)
    dark.save(out / "dark.spad")
    print(f"stacks written to {out}")
    return EXIT_OK


def _cmd_calibrate(args) -> int:
    from .spadsim import FrameStack
    from .calibration import characterize_crosstalk, find_hot_pixels

    dark = FrameStack.load(args.dark)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    hot = find_hot_pixels(dark, args.threshold)
    hot.save(out / "hot_pixels.txt")
    ref = characterize_crosstalk(dark)
    ref.save(out / "crosstalk_reference.bin")
    print(f"{hot.count} hot pixels; cross-talk support exceeded: {ref.support_exceeded}")
    return EXIT_OK


def _cmd_analyze_epr(args) -> int:
    from .jpd import Projection
    from .pipeline import RunConfig
    from . import epr as eprmod

    run = Path(args.run_dir)
    config = RunConfig.from_file(run / "config.json")
    optcal = config.calibration()
    fit_r = eprmod.fit_gaussian_width(Projection.load_csv(run / "projection_position_minus.csv"))
    fit_k = eprmod.fit_gaussian_width(Projection.load_csv(run / "projection_momentum_sum.csv"))
    report = eprmod.epr_criterion(
        eprmod.pixel_to_physical(fit_r.width, optcal, "position"),
        eprmod.pixel_to_physical(fit_k.width, optcal, "momentum"),
        eprmod.pixel_to_physical(fit_r.width_err, optcal, "position"),
        eprmod.pixel_to_physical(fit_k.width_err, optcal, "momentum"),
        approximate=fit_r.approximate or fit_k.approximate,
    )
    print(report.to_text(), end="")
    return EXIT_OK


def _cmd_certify(args) -> int:
    from .certify import CorrelationMatrix, fidelity_bound

    run = Path(args.run_dir)
    pos = CorrelationMatrix.load_csv(run / "correlation_position.csv")
    mom = CorrelationMatrix.load_csv(run / "correlation_momentum.csv")
    print(fidelity_bound(pos, mom).to_text(), end="")
    return EXIT_OK


def _cmd_optimize(args) -> int:
    from .optics import ModeGrid, MediumSpec, synth_medium
    from .shaping import ShapingProblem, optimize_masks
    from .states import flat_mask

    grid = ModeGrid(args.size, args.size, 120e-6)
    medium = synth_medium(MediumSpec("thick_iid_gaussian", grid, seed=args.seed))
    mask2 = flat_mask(grid) if args.two_planes else None
    problem = ShapingProblem(medium, flat_mask(grid), mask2, plane_distance=args.plane_distance)
    result = optimize_masks(problem, args.budget, n_phases=args.phases)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result.mask1.save(out / "mask1.txt")
    if result.mask2 is not None:
        result.mask2.save(out / "mask2.txt")
    np.savetxt(out / "trace.csv", result.trace, delimiter=",", header="objective")
    print(
        f"objective {result.trace[0]:.4g} -> {result.trace[-1]:.4g} "
        f"({result.evaluations} evaluations{', budget exhausted' if result.exhausted_mid_pass else ''})"
    )
    return EXIT_OK


def _cmd_plateau(args) -> int:
    from .plateau import DEFAULT_FRAME_COUNTS, PlateauSpec, plateau_curve, save_curve_csv

    counts = tuple(int(n) for n in args.frame_counts) if args.frame_counts else DEFAULT_FRAME_COUNTS
    spec = PlateauSpec(
        d=args.d,
        alpha=args.alpha,
        alpha_prime=args.alpha_prime,
        noise_scale=args.noise_scale,
        frame_counts=counts,
        trials=args.trials,
        seed=args.seed,
    )
    points = plateau_curve(spec)
    save_curve_csv(points, args.out)
    for p in points:
        print(f"N={p.n_frames:<12d} mean_F={p.mean_f:+.4f} mean_r={p.mean_r:.2f}")
    return EXIT_OK


def _cmd_run(args) -> int:
    from .pipeline import RunConfig, run_pipeline

    config = RunConfig.from_file(args.config)
    result = run_pipeline(config)
    print(f"run directory: {result.directory}")
    print(f"condition scores: {result.scores['score2_momentum_refocus']:.4f} / {result.scores['score3_position_refocus']:.4f}")
    print(f"EPR product: {result.epr.product:.4f} violated: {result.epr.violated}")
    print(f"witness F_tilde: {result.witness.f_tilde:.4f} certified_r: {result.witness.certified_r}")
    return EXIT_OK


def _cmd_emit_figures(args) -> int:
    from .pipeline import emit_figures

    written = emit_figures(args.run_dirs, args.out_dir, plateau_csv=args.plateau_csv)
    for path in written:
        print(f"wrote {path}")
    return EXIT_OK


_COMMANDS = {
    "simulate": _cmd_simulate,
    "acquire": _cmd_acquire,
    "calibrate": _cmd_calibrate,
    "analyze-epr": _cmd_analyze_epr,
    "certify": _cmd_certify,
    "optimize": _cmd_optimize,
    "plateau": _cmd_plateau,
    "run": _cmd_run,
    "emit-figures": _cmd_emit_figures,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    from .pipeline import ConfigError, StageError

    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(f"stage failure: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except FileNotFoundError as exc:
        print(f"missing input: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
