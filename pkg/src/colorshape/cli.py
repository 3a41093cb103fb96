"""Command-line entry point.

Exit codes: 0 success (no signal), 1 runtime failure, 2 missing input file,
3 monitoring signal raised, 64 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from .config import StudyConfig, load_config
from .exceptions import ColorShapeError, ConfigError, ParameterError

EXIT_OK, EXIT_FAIL, EXIT_MISSING, EXIT_SIGNAL, EXIT_USAGE = 0, 1, 2, 3, 64


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _positive(kind):
    def conv(text):
        try:
            v = kind(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
        if v <= 0:
            raise argparse.ArgumentTypeError(f"must be positive, got {text}")
        return v
    return conv


def _global_flags(suppress):
    # subcommands repeat the global flags without defaults so that values
    # given before the subcommand name survive
    d = argparse.SUPPRESS if suppress else None
    g = _Parser(add_help=False)
    g.add_argument("--config", metavar="PATH", default=d, help="study configuration (key = value)")
    g.add_argument("--seed", type=int, default=d, help="random seed (overrides rng_seed)")
    g.add_argument("--threads", type=_positive(int), default=d, help="worker threads")
    g.add_argument("--out", metavar="DIR", default=argparse.SUPPRESS if suppress else ".",
                   help="output directory")
    g.add_argument("-v", "--verbose", action="store_true",
                   default=argparse.SUPPRESS if suppress else False)
    return g


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags(True)
    p = _Parser(prog="colorshape", description="Spectral monitoring of 4D point clouds.",
                parents=[_global_flags(False)])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def k_arg(sp):
        sp.add_argument("--k", type=_positive(int), dest="k_eig", help="number of eigenpairs")
        sp.add_argument("--neighbors", type=_positive(int), dest="n_neighbors")

    sp = sub.add_parser("extract", parents=[common], help="spectral features of clouds")
    sp.add_argument("inputs", nargs="*", help="cloud files (.ply or .csv)")
    sp.add_argument("--manifest", help="file listing cloud paths")
    k_arg(sp)

    sp = sub.add_parser("calibrate", parents=[common], help="fit standardizers and limits")
    sp.add_argument("--reference", help="manifest of in-control reference clouds")
    k_arg(sp)
    for name in ("m1", "m2", "m3", "n_bootstrap", "max_run_length"):
        sp.add_argument(f"--{name.replace('_', '-')}", dest=name, type=_positive(int))
    sp.add_argument("--arl0", type=_positive(float))
    sp.add_argument("--ks", dest="k_s", type=_positive(float))
    sp.add_argument("--kc", dest="k_c", type=_positive(float))

    sp = sub.add_parser("monitor", parents=[common], help="run the charts over a stream")
    sp.add_argument("--calibration", help="calibration file from 'calibrate'")
    sp.add_argument("--stream", help="manifest of clouds in arrival order")

    sp = sub.add_parser("diagnose", parents=[common], help="color test after a signal")
    sp.add_argument("--calibration", help="calibration file (supplies k)")
    sp.add_argument("--reference-cloud", dest="reference_cloud", required=True,
                    help="reference (nominal) cloud")
    sp.add_argument("--ic", help="manifest of in-control clouds")
    sp.add_argument("--oc", help="manifest of out-of-control clouds")
    k_arg(sp)
    sp.add_argument("--alpha", type=_positive(float))
    sp.add_argument("--permutations", dest="n_permutations", type=_positive(int))
    sp.add_argument("--eta", type=float)

    sp = sub.add_parser("simulate", parents=[common], help="Monte Carlo ARL study")
    k_arg(sp)
    sp.add_argument("--replications", dest="n_replications", type=int)
    sp.add_argument("--method", choices=("smac", "gl"))

    sp = sub.add_parser("gen", parents=[common], help="generate synthetic clouds")
    sp.add_argument("--count", type=_positive(int), default=10)
    sp.add_argument("--kind", choices=("ic", "oc", "nominal"), default="ic")
    sp.add_argument("--format", choices=("ply", "csv"), default="ply")
    sp.add_argument("--shape", choices=("sphere", "torus", "two_lobe"))
    sp.add_argument("--n", type=_positive(int))
    sp.add_argument("--n-min", dest="n_min", type=_positive(int))
    sp.add_argument("--n-max", dest="n_max", type=_positive(int))
    sp.add_argument("--defect", dest="defect_kind",
                    choices=("none", "roughness", "color_spots", "combined"))
    sp.add_argument("--snr", type=float)
    sp.add_argument("--color-shift", dest="color_shift", type=float)
    sp.add_argument("--prefix", default="cloud")
    return p


_OVERRIDES = ("k_eig", "n_neighbors", "m1", "m2", "m3", "n_bootstrap", "max_run_length", "arl0",
              "k_s", "k_c", "alpha", "n_permutations", "eta", "n_replications", "method",
              "shape", "n", "n_min", "n_max", "defect_kind", "snr", "color_shift", "reference", "stream",
              "calibration", "ic", "oc")


def resolve_config(args) -> StudyConfig:
    cfg = load_config(args.config) if args.config else StudyConfig()
    changes = {k: getattr(args, k) for k in _OVERRIDES if hasattr(args, k)}
    if args.seed is not None:
        changes["rng_seed"] = args.seed
    try:
        return cfg.updated(**changes)
    except ParameterError as exc:
        raise ConfigError(str(exc)) from None


def set_threads(n):
    """Cap BLAS and numba worker threads at ``n``; returns the BLAS thread count in effect.

    Pools are never raised above the size they were loaded with: OpenBLAS
    allocates per-thread buffers at import and crashes if asked for more.
    """
    if n is None:
        return None
    from threadpoolctl import ThreadpoolController
    import numba

    effective = 1
    for lib in ThreadpoolController().lib_controllers:
        m = max(1, min(n, lib.num_threads))
        lib.set_num_threads(m)
        effective = max(effective, m)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", numba.NumbaWarning)  # threading-layer probing
        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
    return effective


def _need(value, flag):
    if not value:
        raise UsageError(f"missing required option {flag}")
    return value


def _manifest(path):
    from .pointcloud import read_manifest

    return read_manifest(path)


def _load_all(paths):
    from .pointcloud import load_cloud

    return [load_cloud(p) for p in paths]


def _echo(cfg: StudyConfig, out: Path):
    (out / "resolved_config.txt").write_text(cfg.to_text(), encoding="utf-8")


# --------------------------------------------------------------------------
# subcommands


def cmd_extract(args, cfg, out):
    from .spectral import extract_features, write_features_csv

    paths = list(args.inputs)
    if args.manifest:
        paths += _manifest(args.manifest)
    if not paths:
        raise UsageError("extract needs input clouds or --manifest")
    clouds = _load_all(paths)
    feats = [extract_features(c, cfg.k_eig, cfg.n_neighbors, cfg.epsilon_fraction) for c in clouds]
    write_features_csv(out / "features.csv", feats)
    print(f"wrote {out / 'features.csv'} ({len(feats)} samples, k = {cfg.k_eig})")
    return EXIT_OK


def cmd_calibrate(args, cfg, out):
    from .monitoring import run_monitoring, save_calibration

    clouds = _load_all(_manifest(_need(cfg.reference, "--reference")))
    report = run_monitoring(clouds, [], cfg.calibration_config(), cfg.k_eig, cfg.n_neighbors)
    mon = report.monitor
    save_calibration(mon, out / "calibration.txt")
    lim = mon.limits_
    print(f"h_s = {lim.h_s:.3f}, h_c = {lim.h_c:.3f} (combined bootstrap ARL {lim.arl_combined:.2f})")
    print(f"whitening discrepancy: shape {mon.shape_standardizer_.discrepancy_:.3g}, "
          f"color {mon.color_standardizer_.discrepancy_:.3g}")
    return EXIT_OK


def cmd_monitor(args, cfg, out):
    from .monitoring import load_calibration
    from .plotting import control_chart_svg
    from .spectral import SpectralFeatureExtractor

    mon = load_calibration(_need(cfg.calibration, "--calibration"))
    clouds = _load_all(_manifest(_need(cfg.stream, "--stream")))
    ext = SpectralFeatureExtractor(mon.n_eigs, cfg.n_neighbors, cfg.epsilon_fraction).fit()
    X = ext.transform(clouds) if clouds else np.empty((0, 2 * mon.n_eigs - 1))
    report = mon.monitor(X)
    with open(out / "monitor.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "s", "c", "Cs", "Cc", "signal"])
        for r in report.steps:
            w.writerow([r.t, repr(r.s), repr(r.c), repr(r.Cs), repr(r.Cc), r.signal or ""])
    control_chart_svg([r.Cs for r in report.steps], [r.Cc for r in report.steps],
                      mon.shape_chart_.h, mon.color_chart_.h, out / "chart.svg")
    if report.signaled:
        print(f"signal at t = {report.run_length} (source: {report.signal_source})")
        return EXIT_SIGNAL
    print(f"no signal in {len(report.steps)} samples")
    return EXIT_OK


def cmd_diagnose(args, cfg, out):
    from .diagnostics import TextureTransporter, pointwise_test
    from .monitoring import load_calibration
    from .pointcloud import build_knn, load_cloud, save_cloud

    k = cfg.k_eig
    if cfg.calibration:
        k = load_calibration(cfg.calibration).n_eigs
    ic_paths = _manifest(_need(cfg.ic, "--ic"))
    oc_paths = _manifest(_need(cfg.oc, "--oc"))
    if len(ic_paths) + len(oc_paths) < 3:
        raise ParameterError(
            f"F-test undefined: {len(ic_paths)} IC and {len(oc_paths)} OC clouds leave zero "
            "within-group degrees of freedom"
        )
    ref = load_cloud(args.reference_cloud)
    tt = TextureTransporter(k, cfg.n_neighbors, cfg.eta, epsilon_fraction=cfg.epsilon_fraction).fit(ref)
    ic = tt.transform(_load_all(ic_paths))
    oc = tt.transform(_load_all(oc_paths))
    graph = build_knn(ref, min(cfg.tfce_neighbors, ref.n - 1))
    rep = pointwise_test(ic, oc, graph, cfg.alpha, cfg.n_permutations, cfg.rng_seed)
    with open(out / "diagnose.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["point_index", "f_stat", "tfce", "p_value", "significant"])
        for q in range(ref.n):
            w.writerow([q, repr(float(rep.f_stat[q])), repr(float(rep.tfce[q])),
                        repr(float(rep.p_values[q])), int(rep.significant_mask[q])])
    save_cloud(ref, out / "mask.ply", extra={"significant": rep.significant_mask.astype(float)})
    print(f"verdict: {rep.verdict} ({int(rep.significant_mask.sum())} significant points, "
          f"alpha = {rep.alpha})")
    return EXIT_OK


def _design(cfg):
    from .simulation import make_nominal

    return make_nominal(cfg.shape, cfg.n, cfg.rng_seed, path=cfg.design_path)


def cmd_simulate(args, cfg, out):
    from .simulation import run_arl_study, write_arl_summary_csv, write_run_lengths_csv

    summary = run_arl_study(
        _design(cfg), cfg.noise_spec(), cfg.defect_spec(), cfg.calibration_config(), cfg.method,
        cfg.n_replications, cfg.rng_seed, cfg.k_eig, cfg.n_neighbors,
        stream_pool=cfg.stream_pool or None, runs_per_replication=cfg.runs_per_replication,
        cross_references=cfg.cross_references,
    )
    write_arl_summary_csv(out / "arl_summary.csv", [summary])
    write_run_lengths_csv(out / "run_lengths.csv", summary)
    print(f"AARL = {summary.aarl:.2f} (sd {summary.sd:.2f}, {summary.n_reps} replications)")
    return EXIT_OK


def cmd_gen(args, cfg, out):
    from .pointcloud import save_cloud
    from .simulation import sample_ic, sample_oc

    design = _design(cfg)
    ext = args.format
    written = []
    if args.kind == "nominal":
        path = out / f"{args.prefix}_nominal.{ext}"
        save_cloud(design.base_cloud, path)
        written.append(path)
    else:
        defect = cfg.defect_spec()
        if args.kind == "oc" and defect is None:
            raise UsageError("--kind oc needs a defect (--defect or defect_kind in the config)")
        for i in range(args.count):
            seed = (cfg.rng_seed, i)
            if args.kind == "ic":
                cloud = sample_ic(design, cfg.noise_spec(), seed)
            else:
                cloud, _ = sample_oc(design, cfg.noise_spec(), defect, seed)
            path = out / f"{args.prefix}_{i:04d}.{ext}"
            save_cloud(cloud, path)
            written.append(path)
    (out / f"{args.prefix}_manifest.txt").write_text(
        "".join(f"{p.name}\n" for p in written), encoding="utf-8")
    print(f"wrote {len(written)} clouds to {out}")
    return EXIT_OK


COMMANDS = {
    "extract": cmd_extract, "calibrate": cmd_calibrate, "monitor": cmd_monitor,
    "diagnose": cmd_diagnose, "simulate": cmd_simulate, "gen": cmd_gen,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        set_threads(args.threads)
        cfg = resolve_config(args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _echo(cfg, out)
        return COMMANDS[args.command](args, cfg, out)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (UsageError, ConfigError, ParameterError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ColorShapeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
