"""Command line: ``latentgeo {generate,train,geodesic,field,eval}``.

Exit codes: 0 success, 1 usage error, 2 numeric failure (including failed
evaluation criteria), 3 IO failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .datasets import (
    Dataset,
    IKError,
    PendulumConfig,
    RobotArmConfig,
    load_dataset,
    mnist_load,
    pendulum_generate,
    robot_generate,
    save_dataset,
)
from .experiments import (
    choose_pairs,
    encode_means,
    flat_metric_suite,
    latent_grid,
    oracle_suite,
    pendulum_ordering_suite,
    robot_smoothness,
    robot_suite,
    run_pairs,
    write_pairs_csv,
)
from .geodesic import GeodesicConfig, GeodesicResult, interpolate_and_decode, optimize_geodesic, write_result
from .iwae import PRESETS, IwaeModel, TrainConfig, TrainingDivergedError, load_checkpoint, save_checkpoint, train
from .numerics import DimensionError, FileFormatError
from .riemann import (
    BrokenMetricError,
    GridGraph,
    GridSpec,
    graph_distance_field,
    mf_field,
    straight_line,
    velocities,
    write_field,
)

log = logging.getLogger("latentgeo")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3
DATA_DIR_ENV = "LATENTGEO_DATA_DIR"
MANIFEST = "run_manifest.json"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# ---------------------------------------------------------------------------
# config resolution: defaults < key=value file < explicit flags

def read_config_file(path) -> dict:
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        k, v = line.split("=", 1)
        out[k.strip().replace("-", "_")] = v.strip()
    return out


def _coerce(value, like):
    if not isinstance(value, str):
        return value
    if isinstance(like, bool):
        return value.lower() in ("1", "true", "yes", "on")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    if like is None and value.lower() in ("none", ""):
        return None
    if like is None:
        try:
            return int(value)
        except ValueError:
            return float(value)
    return value


def resolve(args, defaults: dict) -> dict:
    """Merge ``defaults``, the ``--config`` file and explicit flags (flags win)."""
    file_cfg = read_config_file(args.config) if getattr(args, "config", None) else {}
    unknown = set(file_cfg) - set(defaults)
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    out = {}
    for k, d in defaults.items():
        v = getattr(args, k, None)
        if v is None:
            v = file_cfg.get(k, d)
        try:
            out[k] = _coerce(v, d)
        except ValueError as exc:
            raise UsageError(f"bad value for {k}: {v!r}") from exc
    return out


def parse_vector(text: str) -> np.ndarray:
    try:
        return np.array([float(v) for v in text.split(",")])
    except ValueError as exc:
        raise UsageError(f"cannot parse vector {text!r}") from exc


def data_dir() -> Path:
    return Path(os.environ.get(DATA_DIR_ENV, "latentgeo-data"))


def out_dir(args, name: str) -> Path:
    d = Path(args.out) if args.out else data_dir() / name
    d.mkdir(parents=True, exist_ok=True)
    return d


def find_input(path) -> Path:
    """Resolve an input path, falling back to the default data directory."""
    p = Path(path)
    if p.exists():
        return p
    alt = data_dir() / p
    if alt.exists():
        return alt
    raise FileNotFoundError(f"{path} not found (also looked in {alt})")


# ---------------------------------------------------------------------------
# manifests

def _digest(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(directory: Path, command: str, config: dict, seed, inputs, outputs,
                   started: float) -> Path:
    files = []
    for p in inputs:
        p = Path(p)
        for f in ([p / "model.params", p / "model.json"] if p.is_dir() else [p]):
            if f.exists():
                files.append(f)
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "inputs": {str(f): _digest(f) for f in files},
        "version": __version__,
        "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(started)),
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "outputs": sorted(str(Path(o).relative_to(directory)) for o in outputs),
    }
    path = directory / MANIFEST
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


# ---------------------------------------------------------------------------
# loading helpers

def load_data(path) -> Dataset:
    p = find_input(path)
    with open(p, "rb") as fh:
        magic = fh.read(4)
    if magic == b"LGDS":
        return load_dataset(p)
    return mnist_load(p)


def load_model(path) -> tuple[IwaeModel, dict]:
    return load_checkpoint(find_input(path))


def write_pgm(path: Path, img) -> None:
    pix = np.rint(255 * np.clip(img, 0, 1)).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{pix.shape[1]} {pix.shape[0]}\n255\n".encode())
        fh.write(pix.tobytes())


# ---------------------------------------------------------------------------
# generate

def cmd_generate(args) -> int:
    started = time.time()
    d = out_dir(args, args.dataset)
    if args.dataset == "pendulum":
        cfg = resolve(args, {"seed": 0, "count": 15000, "noise_std": 0.05, "image_size": 16})
        ds = pendulum_generate(PendulumConfig(image_size=cfg["image_size"], sample_count=cfg["count"],
                                              noise_std=cfg["noise_std"], rng_seed=cfg["seed"]))
        outputs = save_dataset(ds, d / "pendulum.lgds")
    else:
        cfg = resolve(args, {"seed": 0, "count": 6284, "noise_std": 0.03, "validation_count": 150})
        tr, va = robot_generate(RobotArmConfig(timestep_count=cfg["count"], noise_std=cfg["noise_std"],
                                               validation_count=cfg["validation_count"],
                                               rng_seed=cfg["seed"]))
        outputs = save_dataset(tr, d / "robot_train.lgds") + save_dataset(va, d / "robot_validation.lgds")
    write_manifest(d, f"generate {args.dataset}", cfg, cfg["seed"], [], outputs, started)
    print(d)
    return EXIT_OK


# ---------------------------------------------------------------------------
# train

ARCH_DEFAULTS = {
    "pendulum": dict(likelihood="gaussian", hidden=512, residual_blocks=0),
    "robot": dict(likelihood="gaussian", hidden=512, residual_blocks=0),
    "mnist": dict(likelihood="bernoulli", hidden=512, residual_blocks=7),
}


def cmd_train(args) -> int:
    started = time.time()
    preset = PRESETS[args.preset]
    arch = ARCH_DEFAULTS[args.preset]
    cfg = resolve(args, {
        "seed": 0, "latent_dim": 2, "hidden": arch["hidden"], "likelihood": arch["likelihood"],
        "residual_blocks": arch["residual_blocks"], "residual_width": 128,
        "k": preset.K, "learning_rate": preset.learning_rate, "batch_size": preset.batch_size,
        "epochs": preset.epochs, "limit": 0,
    })
    ds = load_data(args.data)
    X = ds.samples[: cfg["limit"]] if cfg["limit"] else ds.samples
    ss = np.random.SeedSequence(cfg["seed"])
    init_seed, train_seed = (int(s.generate_state(1)[0]) for s in ss.spawn(2))
    model = IwaeModel.create(X.shape[1], cfg["latent_dim"], np.random.default_rng(init_seed),
                             hidden=cfg["hidden"], likelihood=cfg["likelihood"],
                             residual_blocks=cfg["residual_blocks"],
                             residual_width=cfg["residual_width"])
    tcfg = TrainConfig(K=cfg["k"], learning_rate=cfg["learning_rate"], batch_size=cfg["batch_size"],
                       epochs=cfg["epochs"], rng_seed=train_seed)
    d = out_dir(args, f"train-{args.preset}")

    def progress(epoch, bound):
        log.info("epoch %d bound %.4f", epoch, bound)

    res = train(model, X, tcfg, progress=progress)
    final = res.trace[-1] if res.trace else None
    outputs = save_checkpoint(res.model, d, tcfg, final, {"preset": args.preset, "cli_config": cfg})
    trace_path = d / "trace.csv"
    with open(trace_path, "w") as fh:
        fh.write("epoch,bound\n")
        for e, b in enumerate(res.trace):
            fh.write(f"{e},{b!r}\n")
    outputs.append(trace_path)
    write_manifest(d, "train", cfg, cfg["seed"], [find_input(args.data)], outputs, started)
    print(d)
    return EXIT_OK


# ---------------------------------------------------------------------------
# geodesic

GEODESIC_DEFAULTS = {
    "seed": 0, "n": 500, "learning_rate": 1e-2, "max_iters": 2000, "patience": 200,
    "lambda_s": 0.0, "rank": None, "lambda_phi": 1.0, "pretrain_curves": 8,
    "bezier_controls": 5, "fit_iters": 500, "frames": 0, "pairs": 0, "grid": 100, "radius": 1,
}


def geodesic_config(cfg: dict) -> GeodesicConfig:
    return GeodesicConfig(n=cfg["n"], learning_rate=cfg["learning_rate"], max_iters=cfg["max_iters"],
                          patience=cfg["patience"], lambda_s=cfg["lambda_s"], rank=cfg["rank"],
                          lambda_phi=cfg["lambda_phi"], pretrain_curves=cfg["pretrain_curves"],
                          bezier_control_count=cfg["bezier_controls"], fit_iters=cfg["fit_iters"],
                          rng_seed=cfg["seed"])


def _straight_result(model, res: GeodesicResult, smoothing) -> GeodesicResult:
    z, dz = straight_line(res.z0, res.z1)(res.t)
    return dataclasses.replace(res, path=z, velocity=velocities(model.decoder, z, dz, smoothing),
                               length=res.straight_length, validation=res.straight_validation,
                               curve=None, trace=[], improved=False)


def _export_frames(model, res, frames: int, d: Path, smoothing) -> list[Path]:
    itp = interpolate_and_decode(model, res, frames, smoothing)
    side = int(round(math.sqrt(model.data_dim)))
    out = []
    if side * side == model.data_dim:
        for name, imgs in (("geodesic", itp.geodesic_decoded), ("straight", itp.straight_decoded)):
            for k, img in enumerate(imgs):
                p = d / f"{name}_frame_{k:03d}.pgm"
                write_pgm(p, img.reshape(side, side))
                out.append(p)
    p = d / "frames.csv"
    with open(p, "w") as fh:
        fh.write("path,frame,t,velocity," + ",".join(f"x_{j + 1}" for j in range(model.data_dim)) + "\n")
        for name, X, V in (("geodesic", itp.geodesic_decoded, itp.geodesic_velocity),
                           ("straight", itp.straight_decoded, itp.straight_velocity)):
            for k, (t, x, v) in enumerate(zip(itp.t, X, V)):
                fh.write(f"{name},{k},{t!r},{float(v)!r}," + ",".join(repr(float(a)) for a in x) + "\n")
    out.append(p)
    return out


def cmd_geodesic(args) -> int:
    started = time.time()
    cfg = resolve(args, GEODESIC_DEFAULTS)
    model, _ = load_model(args.checkpoint)
    gcfg = geodesic_config(cfg)
    d = out_dir(args, "geodesic")
    inputs = [find_input(args.checkpoint)]
    if cfg["pairs"]:
        if not args.data:
            raise UsageError("--pairs needs --data")
        ds = load_data(args.data)
        inputs.append(find_input(args.data))
        Z = encode_means(model, ds.samples)
        angles = ds.annotations.get("angle")
        rng = np.random.default_rng(np.random.SeedSequence([cfg["seed"], 0]))
        pairs = choose_pairs(cfg["pairs"], len(ds), rng, angles=angles)
        graph = GridGraph(model.decoder, latent_grid(Z, cfg["grid"]), gcfg.smoothing, cfg["radius"]) \
            if model.latent_dim == 2 else None

        def progress(k, rec):
            log.info("pair %d: geodesic %.4f straight %.4f", k, rec.geodesic_length, rec.straight_length)

        records, _ = run_pairs(model, Z, pairs, gcfg, cfg["seed"], angles, graph, progress)
        path = d / "pairs.csv"
        write_pairs_csv(records, path)
        outputs = [path]
    else:
        if args.z0 is None or args.z1 is None:
            raise UsageError("give --z0 and --z1, or --pairs")
        z0, z1 = parse_vector(args.z0), parse_vector(args.z1)
        if z0.shape != (model.latent_dim,) or z1.shape != z0.shape:
            raise UsageError(f"endpoints must have {model.latent_dim} components")
        res = optimize_geodesic(model, z0, z1, gcfg)
        outputs = write_result(res, d, "geodesic", gcfg)
        outputs += write_result(_straight_result(model, res, gcfg.smoothing), d, "straight", gcfg)
        if cfg["frames"]:
            outputs += _export_frames(model, res, cfg["frames"], d, gcfg.smoothing)
        print(json.dumps({"length": res.length, "straight_length": res.straight_length,
                          "euclidean": res.euclidean}))
    write_manifest(d, "geodesic", cfg, cfg["seed"], inputs, outputs, started)
    return EXIT_OK


# ---------------------------------------------------------------------------
# field

def cmd_field(args) -> int:
    started = time.time()
    cfg = resolve(args, {"grid": 100, "radius": 1, "lambda_s": 0.0, "rank": None, "seed": 0})
    model, _ = load_model(args.checkpoint)
    if model.latent_dim != 2:
        raise UsageError(f"fields need a 2-d latent space, checkpoint has {model.latent_dim}")
    inputs = [find_input(args.checkpoint)]
    if args.bounds:
        b = parse_vector(args.bounds)
        if b.shape != (4,):
            raise UsageError("--bounds takes xmin,xmax,ymin,ymax")
        grid = GridSpec(b[0], b[1], b[2], b[3], cfg["grid"], cfg["grid"])
    elif args.data:
        grid = latent_grid(encode_means(model, load_data(args.data).samples), cfg["grid"])
        inputs.append(find_input(args.data))
    else:
        grid = GridSpec.square(-3.0, 3.0, cfg["grid"])
    d = out_dir(args, f"field-{args.kind}")
    if args.kind == "mf":
        fld = mf_field(model.decoder, grid)
    else:
        if not args.source:
            raise UsageError("distance fields need --source")
        smoothing = GeodesicConfig(lambda_s=cfg["lambda_s"], rank=cfg["rank"]).smoothing
        try:
            fld = graph_distance_field(model.decoder, grid, parse_vector(args.source), smoothing,
                                       cfg["radius"])
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
    outputs = write_field(fld, d, args.kind)
    write_manifest(d, f"field {args.kind}", {**cfg, "grid_spec": grid.to_dict()}, cfg["seed"],
                   inputs, outputs, started)
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval

SUITES = ("flat-metric", "pendulum-ordering", "oracle", "robot")


def cmd_eval(args) -> int:
    started = time.time()
    cfg = resolve(args, {**GEODESIC_DEFAULTS, "pairs": 50, "lambda_s": 2000.0})
    model, _ = load_model(args.checkpoint)
    gcfg = geodesic_config(cfg)
    inputs = [find_input(args.checkpoint)]
    if args.suite == "flat-metric":
        report = flat_metric_suite(model, cfg["seed"])
    else:
        if not args.data:
            raise UsageError(f"suite {args.suite} needs --data")
        ds = load_data(args.data)
        inputs.append(find_input(args.data))
        Z = encode_means(model, ds.samples)
        rng = np.random.default_rng(np.random.SeedSequence([cfg["seed"], 0]))
        if args.suite == "robot":
            ts = ds.annotations.get("timestep")
            pairs = choose_pairs(cfg["pairs"], len(ds), rng, timesteps=ts,
                                 min_gap=len(ds) // 8 if ts is not None else 0, period=len(ds))
            _, results = run_pairs(model, Z, pairs, gcfg, cfg["seed"])
            report = robot_suite(robot_smoothness(model, results))
        else:
            angles = ds.annotations.get("angle")
            if angles is None:
                raise UsageError(f"suite {args.suite} needs angle annotations")
            pairs = choose_pairs(cfg["pairs"], len(ds), rng, angles=angles)
            graph = GridGraph(model.decoder, latent_grid(Z, cfg["grid"]), gcfg.smoothing,
                              cfg["radius"]) if args.suite == "oracle" else None
            records, _ = run_pairs(model, Z, pairs, gcfg, cfg["seed"], angles, graph)
            if args.suite == "oracle":
                report = oracle_suite(records, graph, np.random.default_rng([cfg["seed"], 1]))
            else:
                report = pendulum_ordering_suite(records)
    d = out_dir(args, f"eval-{args.suite}")
    path = d / "report.json"
    path.write_text(json.dumps({"suite": args.suite, "results": report,
                                "pass": all(r["pass"] for r in report)}, indent=2) + "\n")
    write_manifest(d, f"eval {args.suite}", cfg, cfg["seed"], inputs, [path], started)
    for r in report:
        print(f"{'PASS' if r['pass'] else 'FAIL'} {r['criterion']}: {r['measured']} (threshold {r['threshold']})")
    return EXIT_OK if all(r["pass"] for r in report) else EXIT_NUMERIC


# ---------------------------------------------------------------------------
# parser

def _geodesic_flags(p):
    p.add_argument("--n", type=int, help="curve sample count")
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--max-iters", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--lambda-s", type=float, help="singular-value smoothing strength")
    p.add_argument("--rank", type=int, help="metric rank kept by smoothing")
    p.add_argument("--lambda-phi", type=float, help="max-velocity weight in the validation value")
    p.add_argument("--pretrain-curves", type=int)
    p.add_argument("--bezier-controls", type=int)
    p.add_argument("--fit-iters", type=int)
    p.add_argument("--grid", type=int, help="oracle grid resolution per axis")
    p.add_argument("--radius", type=int, help="oracle stencil radius (1 = 8-neighbour)")


def build_parser() -> argparse.ArgumentParser:
    top = _Parser(prog="latentgeo", description="Latent-space geodesics of deep generative models.")
    top.add_argument("-v", "--verbose", action="store_true")
    top.add_argument("--version", action="version", version=__version__)
    sub = top.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--out", help=f"output directory (default under ${DATA_DIR_ENV})")
        p.add_argument("--seed", type=int)
        p.add_argument("--config", help="key=value config file; explicit flags win")

    p = sub.add_parser("generate", help="generate a synthetic dataset")
    p.add_argument("dataset", choices=("pendulum", "robot"))
    common(p)
    p.add_argument("--count", type=int)
    p.add_argument("--noise-std", type=float)
    p.add_argument("--image-size", type=int)
    p.add_argument("--validation-count", type=int)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train an IWAE")
    p.add_argument("data", help="dataset file (.lgds) or MNIST file")
    p.add_argument("--preset", choices=sorted(PRESETS), required=True)
    common(p)
    p.add_argument("--latent-dim", type=int)
    p.add_argument("--hidden", type=int)
    p.add_argument("--likelihood", choices=("gaussian", "bernoulli"))
    p.add_argument("--residual-blocks", type=int)
    p.add_argument("--residual-width", type=int)
    p.add_argument("-k", "--k", type=int, dest="k", help="importance samples")
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--limit", type=int, help="use only the first N samples")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("geodesic", help="solve geodesics")
    p.add_argument("checkpoint")
    common(p)
    p.add_argument("--z0")
    p.add_argument("--z1")
    p.add_argument("--pairs", type=int, help="random data pairs (needs --data)")
    p.add_argument("--data")
    p.add_argument("--frames", type=int, help="export decoded frames")
    _geodesic_flags(p)
    p.set_defaults(func=cmd_geodesic)

    p = sub.add_parser("field", help="magnification or distance field on a grid")
    p.add_argument("checkpoint")
    p.add_argument("kind", choices=("mf", "distance"))
    common(p)
    p.add_argument("--source")
    p.add_argument("--grid", type=int)
    p.add_argument("--radius", type=int, help="graph stencil radius (1 = 8-neighbour)")
    p.add_argument("--bounds", help="xmin,xmax,ymin,ymax")
    p.add_argument("--data", help="fit the grid window to the encoded data")
    p.add_argument("--lambda-s", type=float)
    p.add_argument("--rank", type=int)
    p.set_defaults(func=cmd_field)

    p = sub.add_parser("eval", help="run a pass/fail suite")
    p.add_argument("checkpoint")
    p.add_argument("--suite", choices=SUITES, required=True)
    p.add_argument("--data")
    common(p)
    p.add_argument("--pairs", type=int)
    _geodesic_flags(p)
    p.set_defaults(func=cmd_eval)
    return top


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(message)s")
        return args.func(args)
    except UsageError as exc:
        print(f"latentgeo: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDivergedError, FloatingPointError, BrokenMetricError, IKError) as exc:
        print(f"latentgeo: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DimensionError as exc:
        print(f"latentgeo: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, FileFormatError, json.JSONDecodeError) as exc:
        print(f"latentgeo: io failure: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
