"""Command-line front end: simulate, reconstruct, map, validate-forward, bench."""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .cube import TransientCube, load_cube, save_cube
from .errors import ConfigError, CubeFormatError, EmptyInput, NoChangeDetected
from .geometry import EdgeSpec
from .inversion import FrameEstimate, InitParams, ReconstructionSettings, reconstruct_frame
from .mapper import accumulate_map
from .mcmc import MhSettings
from .simulator import load_config, noisy_reference, sample_counts
from .transport import (
    Panel,
    QuadratureSettings,
    SensorConfig,
    fast_rates,
    oracle_rates,
    relative_l1,
)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NO_CHANGE = 0, 2, 3, 4

log = logging.getLogger("cornercam")


def write_manifest(out: Path, args: argparse.Namespace, extra: dict | None = None) -> None:
    params = {k: v for k, v in vars(args).items() if k not in ("func", "argv")}
    manifest = {
        "tool": "cornercam",
        "version": __version__,
        "subcommand": args.command,
        "config": params.get("config"),
        "out": str(out),
        "seed": params.get("seed"),
        "params": params,
        "argv": args.argv,
        "cwd": os.getcwd(),
    }
    if extra:
        manifest.update(extra)
    (out / f"manifest_{args.command}.json").write_text(json.dumps(manifest, indent=2, default=str))


def write_pgm(path: Path, image: np.ndarray) -> None:
    """8-bit binary PGM, linearly scaled to the image's range."""
    img = np.asarray(image, dtype=float)
    lo, hi = float(img.min()), float(img.max())
    scaled = np.zeros_like(img) if hi <= lo else (img - lo) / (hi - lo)
    data = np.round(255 * scaled).astype(np.uint8)
    h, w = data.shape
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode() + data.tobytes())


def _grid_shape(sensor: SensorConfig) -> tuple[int, int]:
    n = int(round(math.sqrt(sensor.n_pixels)))
    return (n, n) if n * n == sensor.n_pixels else (1, sensor.n_pixels)


def _frame_seed(seed: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, index])


def _recon_settings(cfg: dict, seed: int) -> ReconstructionSettings:
    inv = cfg.get("inversion", {})
    try:
        init = InitParams(**inv.get("init", {}))
        fg = MhSettings(**{"iterations": 4000, **inv.get("foreground", {}), "seed": seed})
        bg = MhSettings(**{"iterations": 2500, **inv.get("background", {}), "seed": seed + 1})
        quad = QuadratureSettings(**cfg.get("quadrature", {}))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"config error in inversion settings: {exc}") from exc
    return ReconstructionSettings(init, fg, bg, quad)


# ------------------------------------------------------------ subcommands


def cmd_simulate(args) -> int:
    exp = load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    b = exp.background()
    ref = exp.reference_rates(b)
    if exp.reference_time:
        ref_meas = noisy_reference(ref, exp.reference_time, _frame_seed(args.seed, 10**6))
    else:
        ref_meas = ref
    save_cube(ref_meas, out / "reference.cube")
    save_cube(ref, out / "reference_true.cube")
    shape = _grid_shape(exp.sensor)
    rows = []
    for i in range(len(exp.script.frames)):
        rates = exp.frame_rates(i, b)
        counts = sample_counts(rates, seed=_frame_seed(args.seed, i))
        save_cube(rates, out / f"truth_{i:03d}.cube")
        save_cube(counts, out / f"frame_{i:03d}.cube")
        diff = counts.values.astype(float) - ref_meas.values
        write_pgm(out / f"penumbra_{i:03d}.pgm", diff.sum(axis=1).reshape(shape))
        rows.append(diff.sum(axis=0))
    with open(out / "histograms.csv", "w") as fh:
        d = exp.sensor.bin_centers()
        fh.write("bin,round_trip_m,reference," + ",".join(f"diff_{i:03d}" for i in range(len(rows))) + "\n")
        for k in range(exp.sensor.n_bins):
            vals = [ref_meas.values[:, k].sum()] + [r[k] for r in rows]
            fh.write(f"{k},{d[k]:.6f}," + ",".join(f"{v:.6f}" for v in vals) + "\n")
    write_manifest(out, args, {"frames": len(rows), "intensity": exp.sensor.intensity})
    print(f"wrote reference and {len(rows)} frame(s) to {out}")
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    if not args.frames:
        print("reconstruct: at least one --frames cube is required", file=sys.stderr)
        return EXIT_CONFIG
    exp = load_config(args.config)
    settings = _recon_settings(exp.raw, args.seed)
    ref = load_cube(args.reference)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    status = EXIT_OK
    written = []
    for i, path in enumerate(args.frames):
        x = load_cube(path)
        if x.kind != "counts":
            raise CubeFormatError(f"{path}: expected a count cube")
        if x.shape != ref.shape:
            raise CubeFormatError(f"{path}: shape {x.shape} does not match reference {ref.shape}")
        if x.frame_time != ref.frame_time:
            ref_i = ref.with_values(ref.values * (x.frame_time / ref.frame_time))
        else:
            ref_i = ref
        try:
            est = reconstruct_frame(x, ref_i, exp.sensor, settings, strict=args.strict)
        except NoChangeDetected as exc:
            print(f"{path}: no change detected ({exc})", file=sys.stderr)
            status = EXIT_NO_CHANGE
            continue
        target = out / f"estimate_{i:03d}.json"
        est.to_json(target)
        written.append(str(target))
        print(f"{path}: M = {est.M}, kappa = {est.kappa:.4f}")
    write_manifest(out, args, {"estimates": written})
    return status


def cmd_map(args) -> int:
    if not args.estimates:
        raise EmptyInput("map needs at least one estimate file")
    estimates = [FrameEstimate.load(p) for p in args.estimates]
    edge = load_config(args.config).sensor.edge if args.config else EdgeSpec()
    hidden = accumulate_map(estimates, edge)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    hidden.write_json(out / "map.json")
    hidden.write_csv(out / "map.csv")
    write_manifest(out, args)
    print(f"{len(hidden.segments)} centerline(s), {len(hidden.panels)} panel(s)")
    return EXIT_OK


def fidelity_suites(rotations=(0.0, math.pi / 8, 2 * math.pi / 8, 3 * math.pi / 8)) -> dict:
    """Person- and child-sized facets yawed about their vertical center axis."""
    edge = EdgeSpec()
    center_az, rng = math.pi / 2, 1.25

    def panel(width, height, rot):
        c = rng * edge.direction(center_az)
        n0 = -edge.direction(center_az)
        t0 = np.array([-n0[1], n0[0], 0.0])
        t = math.cos(rot) * t0 + math.sin(rot) * n0
        n = -math.sin(rot) * t0 + math.cos(rot) * n0
        return Panel(c - width / 2 * t, c + width / 2 * t, height, 1.0, normal=n)

    return {
        "person": [(rot, panel(0.75, 2.0, rot)) for rot in rotations],
        "child": [(rot, panel(0.75, 1.0, rot)) for rot in rotations],
    }


def fidelity_sensor(n_side: int = 8, n_bins: int = 64) -> SensorConfig:
    return SensorConfig.grid((0.06, 0.0), (0.0, -0.25), 0.5, n_side, bin_width=390e-12, n_bins=n_bins)


def suites_from_config(section: dict, edge: EdgeSpec) -> dict:
    """Named lists of (label, panel) read from a config's ``validate`` section."""
    from .simulator import object_from_config

    suites = {}
    for name, objs in section.get("suites", {}).items():
        cases = []
        for i, obj in enumerate(objs):
            o = object_from_config(obj, edge)
            cases.append((obj.get("label", i), o if isinstance(o, Panel) else o.to_panel(edge)))
        suites[name] = cases
    return suites


def validate_forward(
    quad: QuadratureSettings,
    workers: int = 1,
    sensor: SensorConfig | None = None,
    suites: dict | None = None,
) -> dict:
    sensor = sensor or fidelity_sensor()
    suites = suites or fidelity_suites()
    report = {"oracle_resolution": quad.oracle_resolution, "d_max_annulus": quad.d_max_annulus, "suites": {}}
    fast_total = oracle_total = 0.0
    for name, cases in suites.items():
        rows = []
        for rot, panel in cases:
            t = time.perf_counter()
            fast = fast_rates(panel, sensor, quad)
            t_fast = time.perf_counter() - t
            t = time.perf_counter()
            exact = oracle_rates(panel, sensor, quad, workers)
            t_oracle = time.perf_counter() - t
            fast_total += t_fast
            oracle_total += t_oracle
            rows.append({
                "case": rot,
                "relative_l1": relative_l1(exact, fast),
                "fast_seconds": t_fast,
                "oracle_seconds": t_oracle,
            })
        report["suites"][name] = rows
    report["fast_seconds"] = fast_total
    report["oracle_seconds"] = oracle_total
    report["speedup"] = oracle_total / fast_total
    return report


def cmd_validate_forward(args) -> int:
    from .simulator import sensor_from_config

    raw = load_config(args.config).raw if args.config else {}
    section = raw.get("validate", {})
    q = raw.get("quadrature", {})
    if args.oracle_resolution is not None:
        q = {**q, "oracle_resolution": args.oracle_resolution}
    try:
        quad = QuadratureSettings(**q)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    try:
        sensor = sensor_from_config(section["sensor"]) if "sensor" in section else None
        suites = suites_from_config(section, (sensor or fidelity_sensor()).edge) or None
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"validate section: {exc}") from exc
    report = validate_forward(quad, workers=args.threads, sensor=sensor, suites=suites)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "validate_forward.json").write_text(json.dumps(report, indent=2))
    for name, rows in report["suites"].items():
        errs = ", ".join(f"{r['relative_l1']:.4f}" for r in rows)
        print(f"{name}: relative L1 = {errs}")
    print(f"speedup: {report['speedup']:.1f}x (fast {report['fast_seconds']:.3f}s, oracle {report['oracle_seconds']:.2f}s)")
    write_manifest(out, args)
    return EXIT_OK


def cmd_bench(args) -> int:
    from .inversion import log_likelihood

    exp = load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sensor = exp.sensor
    quad = exp.quad
    frame = exp.script.frames[0]
    panels = [o.to_panel(sensor.edge) if not isinstance(o, Panel) else o for o in frame.objects] or exp.scene.panels[:1]
    reps = max(1, args.repeats)
    t = time.perf_counter()
    for _ in range(reps):
        for p in panels:
            rates = fast_rates(p, sensor, quad)
    per_fast = (time.perf_counter() - t) / (reps * len(panels))
    lam = rates + 1.0
    x = sample_counts(TransientCube(lam, sensor.bin_width), seed=args.seed).values
    t = time.perf_counter()
    for _ in range(reps):
        log_likelihood(x, lam)
    per_ll = (time.perf_counter() - t) / reps
    t = time.perf_counter()
    oracle_rates(panels[0], sensor, quad, args.threads)
    t_oracle = time.perf_counter() - t
    result = {
        "pixels": sensor.n_pixels,
        "bins": sensor.n_bins,
        "fast_ms": 1e3 * per_fast,
        "log_likelihood_ms": 1e3 * per_ll,
        "oracle_ms": 1e3 * t_oracle,
    }
    (out / "bench.json").write_text(json.dumps(result, indent=2))
    print(json.dumps(result, indent=2))
    write_manifest(out, args)
    return EXIT_OK


# ------------------------------------------------------------ entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cornercam", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("--from-manifest", metavar="PATH", help="replay the command recorded in a manifest")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command")

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="experiment config (JSON)")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=0, help="64-bit RNG seed")
        p.add_argument("--threads", type=int, default=1, help="worker cap for parallel sections")
        return p

    p = common(sub.add_parser("simulate", help="simulate reference and frame cubes"))
    p.set_defaults(func=cmd_simulate)

    p = common(sub.add_parser("reconstruct", help="estimate objects and occluded regions per frame"))
    p.add_argument("--reference", required=True, help="reference cube (rates)")
    p.add_argument("--frames", nargs="*", default=[], help="frame cubes (counts)")
    p.add_argument("--strict", action="store_true", help="exit 4 when a frame shows no change")
    p.set_defaults(func=cmd_reconstruct)

    p = common(sub.add_parser("map", help="accumulate estimates into a hidden-scene map"), config_required=False)
    p.add_argument("--estimates", nargs="*", default=[], help="estimate JSON files, in acquisition order")
    p.set_defaults(func=cmd_map)

    p = common(sub.add_parser("validate-forward", help="fast model vs oracle fidelity and timing"), config_required=False)
    p.add_argument("--oracle-resolution", type=float, default=None, help="oracle samples per meter")
    p.set_defaults(func=cmd_validate_forward)

    p = common(sub.add_parser("bench", help="time the forward model and likelihood"))
    p.add_argument("--repeats", type=int, default=20)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.from_manifest:
        manifest = json.loads(Path(args.from_manifest).read_text())
        recorded = manifest["argv"]
        args = parser.parse_args(recorded)
        # relative paths in the recorded command resolve against its original directory
        os.chdir(manifest.get("cwd", "."))
        argv = recorded
    if not args.command:
        parser.print_usage(sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    args.argv = argv
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CubeFormatError, EmptyInput, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NoChangeDetected as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NO_CHANGE


if __name__ == "__main__":
    sys.exit(main())
