"""Command-line entry point: ``propsplat <subcommand> [options]``.

Configuration precedence (lowest to highest): built-in defaults, the JSON
file given with ``--config``, then command-line flags. Every subcommand
writes its outputs and a single ``manifest.json`` into ``--out``.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .data_io import (RandomFraction, SchemaDescriptor, Spatial, file_crc32, load_measurements,
                      load_model, save_measurements, save_model, split_dataset)
from .errors import (FrequencyMismatchError, InvalidArgumentError, ModelFileError,
                     PropSplatError, SchemaError)
from .evaluation import (build_fingerprint_db, coverage_grid, diagnostics, error_metrics,
                         knn_localize_detail, localization_report, write_raster,
                         write_raster_csv)
from .measurements import MeasurementSet
from .model import predict_batch
from .synth import (FIXTURES, format_world, generate_drive_test, grid_positions, load_fixture,
                    parse_world)
from .training import (DEFAULT_LEARNING_RATES, TrainConfig, apply_ablation,
                       finite_difference_check, random_gradcheck_case, train)

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2
EXIT_MISSING_FILE = 3
EXIT_SCHEMA = 4
EXIT_FREQUENCY = 5
EXIT_MODEL_FILE = 6
EXIT_INVALID = 7
EXIT_CHECK_FAILED = 8

EXIT_CODES_HELP = """exit codes:
  0  success
  1  internal error
  2  usage error (unknown flag, missing argument)
  3  input file missing or unreadable
  4  schema error in a CSV, world or config file
  5  frequency mismatch between model and data
  6  model file error (bad magic, version, truncation, checksum)
  7  invalid argument value
  8  verification failed (gradcheck above tolerance)

errors are printed to stderr as one tab-separated line:
  error<TAB>code=<n><TAB>kind=<name><TAB>message=<text>"""

ABLATION_FLAGS = {"no-gaussians": "no_gaussians", "iso": "isotropic", "fixed-ple": "fixed_ple"}

DEFAULTS = {
    "seed": 0,
    "threads": 1,
    "strict": False,
    "train": {},
}


class CheckFailed(PropSplatError):
    pass


# ---------------------------------------------------------------------------
# Run context and manifest

class Run:
    """Resolved settings plus bookkeeping for the manifest."""

    def __init__(self, args, settings: dict):
        self.args = args
        self.settings = settings
        self.out = Path(args.out)
        self.inputs: dict = {}
        self.outputs: list = []
        self.timings: dict = {}
        self._t0 = time.perf_counter()

    @property
    def seed(self) -> int:
        return int(self.settings["seed"])

    @property
    def strict(self) -> bool:
        return bool(self.settings["strict"])

    @property
    def parallel(self) -> bool:
        return not self.strict and int(self.settings["threads"]) > 1

    def rng(self) -> np.random.Generator:
        return np.random.default_rng(self.seed)

    def input(self, path) -> Path:
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"input file not found: {path}")
        self.inputs[str(path)] = hashlib.sha256(path.read_bytes()).hexdigest()
        return path

    def output(self, name: str) -> Path:
        path = self.out / name
        self.outputs.append(name)
        return path

    def time(self, label: str, start: float) -> None:
        self.timings[label] = round(time.perf_counter() - start, 6)

    def write_manifest(self, extra: dict) -> None:
        self.timings["total_s"] = round(time.perf_counter() - self._t0, 6)
        manifest = {
            "artifact_version": __version__,
            "command": self.args.command,
            "argv": self.args.argv,
            "seed": self.seed,
            "config": self.settings,
            "inputs": self.inputs,
            "outputs": sorted(set(self.outputs)),
            "timings_s": self.timings,
            **extra,
        }
        (self.out / "manifest.json").write_text(
            json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")


def resolve_settings(args) -> dict:
    """Merge defaults, the optional JSON config file and explicit flags."""
    settings = json.loads(json.dumps(DEFAULTS))
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise SchemaError([(exc.lineno, "", f"invalid JSON: {exc.msg}")]) from None
        if not isinstance(data, dict):
            raise SchemaError([(1, "", "config file must hold a JSON object")])
        unknown = set(data) - set(DEFAULTS)
        if unknown:
            raise SchemaError([(1, k, "unknown config key") for k in sorted(unknown)])
        train_cfg = data.pop("train", {})
        settings.update(data)
        settings["train"].update(train_cfg)
    for key in ("seed", "threads"):
        if getattr(args, key) is not None:
            settings[key] = getattr(args, key)
    if args.strict:
        settings["strict"] = True
    if int(settings["threads"]) < 1:
        raise InvalidArgumentError("--threads must be >= 1")
    return settings


def _apply_threads(settings: dict) -> None:
    import numba

    n = 1 if settings["strict"] else int(settings["threads"])
    numba.set_num_threads(max(1, min(n, numba.config.NUMBA_NUM_THREADS)))


# ---------------------------------------------------------------------------
# CSV helpers

QUERY_COLUMNS = ("tx_x_m", "tx_y_m", "tx_z_m", "rx_x_m", "rx_y_m", "rx_z_m", "freq_hz")


def read_queries(path) -> tuple[np.ndarray, np.ndarray, np.ndarray, list]:
    """Link queries from a local-coordinate CSV; other columns are ignored."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in QUERY_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise SchemaError([(1, c, "required column missing from header") for c in missing])
        rows, problems = [], []
        for lineno, row in enumerate(reader, start=2):
            try:
                rows.append([float(row[c]) for c in QUERY_COLUMNS])
            except (TypeError, ValueError):
                problems.append((lineno, "", "non-numeric query field"))
        if problems:
            raise SchemaError(problems)
    arr = np.array(rows, dtype=np.float64).reshape(-1, 7)
    return (np.ascontiguousarray(arr[:, 0:3]), np.ascontiguousarray(arr[:, 3:6]), arr[:, 6],
            list(QUERY_COLUMNS))


def _load_data(run: Run, path, rssi_mode: bool = False) -> MeasurementSet:
    path = run.input(path)
    schema = None
    if rssi_mode:
        with open(path, newline="", encoding="utf-8") as fh:
            header = next(csv.reader(fh), [])
        schema = SchemaDescriptor.detect(header)
        if schema.mode == "geodetic" and schema.value_kind != "rssi":
            schema = SchemaDescriptor.geodetic(value_kind="rssi",
                                               columns={"value": schema.columns["value"]})
    data, manifest = load_measurements(path, schema)
    if rssi_mode and not data.rssi_mode:
        raise SchemaError([(0, "value_kind", "--rssi-mode given but the file holds path loss")])
    run.dataset_origin = manifest.origin
    return data


# ---------------------------------------------------------------------------
# Subcommands

def cmd_synth(run: Run) -> dict:
    a = run.args
    if a.fixture:
        fx = load_fixture(a.fixture)
        run.output("world.txt").write_text(format_world(fx.world), encoding="utf-8")
        if isinstance(fx.train, list):
            rows = ["id,x,y,z"] + [f"gw{k},{float(g[0])!r},{float(g[1])!r},{float(g[2])!r}"
                                   for k, g in enumerate(fx.gateways)]
            run.output("gateways.csv").write_text("\n".join(rows) + "\n", encoding="utf-8")
            for k, ds in enumerate(fx.train):
                save_measurements(ds, run.output(f"gw{k}.csv"))
            return {"fixture": a.fixture, "records": sum(len(d) for d in fx.train)}
        save_measurements(fx.train, run.output("train.csv"))
        save_measurements(fx.test, run.output("test.csv"))
        return {"fixture": a.fixture, "train": len(fx.train), "test": len(fx.test)}
    if not (a.world and a.tx and a.waypoints):
        raise InvalidArgumentError("synth needs --fixture, or --world with --tx and --waypoints")
    world = parse_world(run.input(a.world).read_text(encoding="utf-8"))
    waypoints = [[float(v) for v in p.split(",")] for p in a.waypoints.split(";")]
    data = generate_drive_test(world, waypoints, a.spacing, a.tx, a.frequency,
                               np.random.default_rng(world.seed))
    save_measurements(data, run.output("drive_test.csv"))
    return {"records": len(data)}


def cmd_split(run: Run) -> dict:
    a = run.args
    data = _load_data(run, a.data)
    if (a.fraction is None) == (a.spacing_m is None):
        raise InvalidArgumentError("give exactly one of --fraction or --spacing-m")
    strategy = RandomFraction(a.fraction) if a.fraction is not None else Spatial(a.spacing_m)
    tr, te = split_dataset(data, strategy, run.rng())
    save_measurements(tr, run.output("train.csv"))
    save_measurements(te, run.output("test.csv"))
    return {"train": len(tr), "test": len(te), "strategy": asdict(strategy)}


def _train_config(run: Run) -> TrainConfig:
    a = run.args
    opts = dict(run.settings["train"])
    lrs = dict(opts.pop("learning_rates", {}))
    for group in DEFAULT_LEARNING_RATES:
        value = getattr(a, f"lr_{group}")
        if value is not None:
            lrs[group] = value
    for name in ("n_gaussians", "iterations", "batch_size", "weight_exponent", "weight_eps",
                 "init_sigma0", "init_offset_std", "log_every"):
        value = getattr(a, name)
        if value is not None:
            opts[name] = value
    opts["learning_rates"] = lrs
    opts["rng_seed"] = run.seed
    opts["strict"] = run.strict
    config = TrainConfig.from_dict(opts)
    return apply_ablation(config, [ABLATION_FLAGS[f] for f in (a.ablate or [])])


def cmd_train(run: Run) -> dict:
    data = _load_data(run, run.args.data, run.args.rssi_mode)
    config = _train_config(run)
    run.settings["train"] = config.to_dict()
    freqs = data.frequencies()
    models = {}
    for f in freqs:
        subset = data[data.frequency_hz == f]
        name = "model.pspl" if len(freqs) == 1 else f"model_{f:.0f}hz.pspl"
        start = time.perf_counter()
        with open(run.output(name.replace(".pspl", "_log.tsv")), "w", encoding="utf-8") as log:
            model, history = train(subset, config, np.random.default_rng(run.seed), log=log,
                                   n_chunks=0 if run.strict else 16)
        run.time(f"train_{f:.0f}hz", start)
        model.origin = getattr(run, "dataset_origin", None)
        path = run.output(name)
        save_model(model, path)
        models[name] = {"frequency_hz": float(f), "crc32": f"{file_crc32(path):08x}",
                        "final_loss": history[-1].loss, "gamma": model.gamma,
                        "n_gaussians": model.n_gaussians}
        print(f"{name}\tfinal_loss={history[-1].loss:.6f}\tgamma={model.gamma:.6f}")
    return {"models": models}


def _load_model(run: Run, path):
    return load_model(run.input(path))


def cmd_predict(run: Run) -> dict:
    model = _load_model(run, run.args.model)
    tx, rx, freq, _ = read_queries(run.input(run.args.queries))
    pred = predict_batch(model, (tx, rx, freq), parallel=run.parallel)
    label = "pred_rssi_dbm" if model.rssi_mode else "pred_path_loss_db"
    with open(run.output("predictions.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(QUERY_COLUMNS) + [label])
        for i in range(len(pred)):
            w.writerow([repr(float(v)) for v in (*tx[i], *rx[i], freq[i], pred[i])])
    return {"queries": int(len(pred))}


def cmd_evaluate(run: Run) -> dict:
    model = _load_model(run, run.args.model)
    data = _load_data(run, run.args.data)
    if data.rssi_mode != model.rssi_mode:
        raise InvalidArgumentError(f"data holds {data.value_kind} but the model predicts "
                                   f"{'RSSI' if model.rssi_mode else 'path loss'}")
    pred = predict_batch(model, (data.tx, data.rx, data.frequency_hz), parallel=run.parallel)
    report = error_metrics(pred, data.target)
    run.output("metrics.tsv").write_text(report.to_tsv(), encoding="utf-8")
    print(report.to_table())
    return {"metrics": report.as_dict()}


def cmd_grid(run: Run) -> dict:
    a = run.args
    model = _load_model(run, a.model)
    raster = coverage_grid(model, a.tx, a.extent, a.cell, a.rx_height, a.offset_only,
                           parallel=run.parallel)
    write_raster(raster, run.output("raster.bin"))
    run.outputs.append("raster.bin.hdr")
    write_raster_csv(raster, run.output("raster.csv"))
    return {"width": raster.width, "height": raster.height, "kind": raster.kind}


def _read_gateways(run: Run, path) -> tuple[dict, dict]:
    gateways, models, problems = {}, {}, []
    base = Path(path).parent
    with open(run.input(path), newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        need = {"id", "x", "y", "z", "model"}
        if not need <= set(reader.fieldnames or []):
            raise SchemaError([(1, c, "required column missing from header")
                               for c in sorted(need - set(reader.fieldnames or []))])
        for lineno, row in enumerate(reader, start=2):
            try:
                gateways[row["id"]] = [float(row[c]) for c in ("x", "y", "z")]
            except ValueError:
                problems.append((lineno, "", "non-numeric gateway position"))
                continue
            mpath = Path(row["model"])
            models[row["id"]] = _load_model(run, mpath if mpath.is_absolute() else base / mpath)
    if problems:
        raise SchemaError(problems)
    return gateways, models


def cmd_localize(run: Run) -> dict:
    a = run.args
    gateways, models = _read_gateways(run, a.gateways)
    positions = grid_positions(a.extent, a.grid_spacing, a.height)
    db = build_fingerprint_db(models, gateways, positions, parallel=run.parallel)
    ids = list(gateways)
    with open(run.input(a.observations), newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [g for g in ids if g not in (reader.fieldnames or [])]
        if missing:
            raise SchemaError([(1, g, "gateway column missing from observations")
                               for g in missing])
        has_truth = {"x", "y", "z"} <= set(reader.fieldnames or [])
        obs, truth = [], []
        for lineno, row in enumerate(reader, start=2):
            try:
                obs.append([float(row[g]) if row[g].strip() else np.nan for g in ids])
                if has_truth:
                    truth.append([float(row[c]) for c in ("x", "y", "z")])
            except ValueError:
                raise SchemaError([(lineno, "", "non-numeric observation field")]) from None
    estimates = []
    with open(run.output("estimates.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["est_x", "est_y", "est_z", "gateways_used"])
        for o in obs:
            res = knn_localize_detail(db, o, a.k)
            estimates.append(res.position)
            w.writerow([repr(float(v)) for v in res.position] + [int(res.used_mask.sum())])
    extra = {"queries": len(obs), "grid_points": len(db)}
    if has_truth and obs:
        rep = localization_report(estimates, truth, dims=a.dims)
        text = f"mean_m\tmedian_m\tn\n{float(rep.mean_m)!r}\t{float(rep.median_m)!r}\t{rep.n}\n"
        run.output("localization.tsv").write_text(text, encoding="utf-8")
        print(f"mean error {rep.mean_m:.3f} m, median {rep.median_m:.3f} m over {rep.n} queries")
        extra["report"] = asdict(rep)
    return extra


def cmd_diagnose(run: Run) -> dict:
    a = run.args
    model = _load_model(run, a.model)
    if a.queries:
        tx, rx, _, _ = read_queries(run.input(a.queries))
    else:
        rng = run.rng()
        if model.n_gaussians:
            lo, hi = model.mu.min(axis=0) - 1.0, model.mu.max(axis=0) + 1.0
        else:
            lo, hi = np.full(3, -100.0), np.full(3, 100.0)
        tx = rng.uniform(lo, hi, (a.n_queries, 3))
        rx = rng.uniform(lo, hi, (a.n_queries, 3))
    rep = diagnostics(model, tx, rx)
    out = asdict(rep)
    out["sign_set_empty"] = rep.sign_set_empty
    run.output("diagnostics.json").write_text(json.dumps(out, indent=2) + "\n", encoding="utf-8")
    print(f"max_additivity_error_db={rep.max_additivity_error_db:.3e}\t"
          f"sign_consistency={rep.sign_consistency:.6f}\tpairs={rep.n_sign_pairs}")
    return {"diagnostics": out}


def cmd_gradcheck(run: Run) -> dict:
    a = run.args
    rng = run.rng()
    worst = 0.0
    config = TrainConfig()
    for case in range(a.cases):
        model, batch = random_gradcheck_case(rng, a.n, a.batch, rssi=bool(case % 2))
        worst = max(worst, finite_difference_check(model, batch, config, a.h))
    print(f"max_relative_error={worst:.3e}\tcases={a.cases}\tn={a.n}\tbatch={a.batch}\th={a.h:g}")
    if not worst < a.tol:
        raise CheckFailed(f"gradient check failed: {worst:.3e} >= {a.tol:g}")
    return {"max_relative_error": worst}


# ---------------------------------------------------------------------------
# Parser

def _point(text: str) -> list:
    parts = text.replace(",", " ").split()
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected three coordinates, got {text!r}")
    return [float(p) for p in parts]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", default=".", help="output directory (created if missing)")
    common.add_argument("--seed", type=int, default=None, help="seed for every random choice")
    common.add_argument("--threads", type=int, default=None, help="cap on worker threads")
    common.add_argument("--strict", action="store_true",
                        help="sequential, bit-reproducible execution")
    common.add_argument("--config", default=None, help="JSON config file (flags override it)")

    p = argparse.ArgumentParser(prog="propsplat", description=__doc__.splitlines()[0],
                                epilog=EXIT_CODES_HELP,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        return sub.add_parser(name, parents=[common], help=help_text, epilog=EXIT_CODES_HELP,
                              formatter_class=argparse.RawDescriptionHelpFormatter)

    s = add("synth", "generate synthetic datasets from a world file or a shipped fixture")
    s.add_argument("--fixture", choices=FIXTURES)
    s.add_argument("--world", help="world specification file")
    s.add_argument("--tx", type=_point, help="transmitter position 'x,y,z'")
    s.add_argument("--waypoints", help="route as 'x,y;x,y;...' (receiver height 1.5 m)")
    s.add_argument("--spacing", type=float, default=10.0, help="sample spacing along the route")
    s.add_argument("--frequency", type=float, default=2.4e9)

    s = add("split", "split a dataset at random or by spatial subsampling")
    s.add_argument("--data", required=True)
    s.add_argument("--fraction", type=float, help="train fraction for a random split")
    s.add_argument("--spacing-m", type=float, help="minimum receiver spacing of the train set")

    s = add("train", "fit a model to a measurement CSV")
    s.add_argument("--data", required=True)
    s.add_argument("--ablate", action="append", choices=sorted(ABLATION_FLAGS))
    s.add_argument("--rssi-mode", action="store_true", help="treat values as RSSI and learn P0")
    for name in ("n_gaussians", "iterations", "batch_size", "log_every"):
        s.add_argument("--" + name.replace("_", "-"), dest=name, type=int)
    for name in ("weight_exponent", "weight_eps", "init_sigma0", "init_offset_std"):
        s.add_argument("--" + name.replace("_", "-"), dest=name, type=float)
    for group in DEFAULT_LEARNING_RATES:
        s.add_argument(f"--lr-{group.replace('_', '-')}", dest=f"lr_{group}", type=float)

    s = add("predict", "predict path loss for a query CSV")
    s.add_argument("--model", required=True)
    s.add_argument("--queries", required=True)

    s = add("evaluate", "score a model against a labeled CSV")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)

    s = add("grid", "rasterize predictions around a transmitter")
    s.add_argument("--model", required=True)
    s.add_argument("--tx", type=_point, required=True)
    s.add_argument("--extent", type=float, nargs=4, required=True, metavar=("X0", "Y0", "X1", "Y1"))
    s.add_argument("--cell", type=float, required=True, help="cell size in meters")
    s.add_argument("--rx-height", type=float, default=1.5)
    s.add_argument("--offset-only", action="store_true",
                   help="Gaussian offset field minus its spatial mean")

    s = add("localize", "fingerprint localization with per-gateway RSSI models")
    s.add_argument("--gateways", required=True, help="CSV with id,x,y,z,model")
    s.add_argument("--observations", required=True,
                   help="CSV with one RSSI column per gateway id (optional x,y,z truth)")
    s.add_argument("--extent", type=float, nargs=4, required=True, metavar=("X0", "Y0", "X1", "Y1"))
    s.add_argument("--grid-spacing", type=float, default=0.25)
    s.add_argument("--height", type=float, default=1.0, help="fingerprint grid height")
    s.add_argument("--k", type=int, default=5)
    s.add_argument("--dims", type=int, choices=(2, 3), default=2)

    s = add("diagnose", "leave-one-out additivity and sign consistency")
    s.add_argument("--model", required=True)
    s.add_argument("--queries", help="query CSV (default: random links)")
    s.add_argument("--n-queries", type=int, default=200)

    s = add("gradcheck", "compare analytic and finite-difference gradients")
    s.add_argument("--n", type=int, default=5, help="Gaussians per case")
    s.add_argument("--batch", type=int, default=8, help="links per case")
    s.add_argument("--cases", type=int, default=1)
    s.add_argument("--h", type=float, default=1e-4)
    s.add_argument("--tol", type=float, default=1e-4)
    return p


COMMANDS = {
    "synth": cmd_synth, "split": cmd_split, "train": cmd_train, "predict": cmd_predict,
    "evaluate": cmd_evaluate, "grid": cmd_grid, "localize": cmd_localize,
    "diagnose": cmd_diagnose, "gradcheck": cmd_gradcheck,
}


def _fail(code: int, exc: BaseException) -> int:
    message = " ".join(str(exc).split())
    sys.stderr.write(f"error\tcode={code}\tkind={type(exc).__name__}\tmessage={message}\n")
    return code


def run(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    args.argv = argv
    try:
        settings = resolve_settings(args)
        _apply_threads(settings)
        Path(args.out).mkdir(parents=True, exist_ok=True)
        ctx = Run(args, settings)
        extra = COMMANDS[args.command](ctx)
        ctx.write_manifest(extra or {})
        return EXIT_OK
    except FileNotFoundError as exc:
        return _fail(EXIT_MISSING_FILE, exc)
    except SchemaError as exc:
        return _fail(EXIT_SCHEMA, exc)
    except FrequencyMismatchError as exc:
        return _fail(EXIT_FREQUENCY, exc)
    except ModelFileError as exc:
        return _fail(EXIT_MODEL_FILE, exc)
    except CheckFailed as exc:
        return _fail(EXIT_CHECK_FAILED, exc)
    except (InvalidArgumentError, ValueError) as exc:
        return _fail(EXIT_INVALID, exc)
    except OSError as exc:
        return _fail(EXIT_MISSING_FILE, exc)
    except Exception as exc:  # pragma: no cover - last-resort reporting
        return _fail(EXIT_INTERNAL, exc)


def main() -> None:
    sys.exit(run())
