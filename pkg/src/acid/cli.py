"""Command-line front end.

Every command writes a ``manifest.json`` next to its outputs holding the
fully resolved parameters, seed ranges, input/output hashes, tool version and
wallclock. ``acid replay MANIFEST`` re-runs a command from that file alone.

Exit codes: 0 success, 2 usage/configuration error, 3 seed-range guard,
4 numerical failure.
"""

from __future__ import annotations

import json
import logging
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path

import click
import torch

from . import io
from .calibration import NullDistribution, calibrate, decide, p_value
from .evaluation import folded_eval
from .model import ACID, ModelConfig
from .synthgen import (
    MODELS,
    TEST_SEED_RANGE,
    TRAIN_SEED_RANGE,
    ConfigError,
    ConfigSpace,
    DatasetStream,
    check_disjoint,
)
from .trainer import NumericalError, TrainConfig, Trainer, finetune

log = logging.getLogger("acid")

EXIT_USAGE, EXIT_SEED_GUARD, EXIT_NUMERIC = 2, 3, 4
THREADS_ENV = "ACID_NUM_THREADS"
KS_WARN = 0.15


class SeedGuardError(ConfigError):
    pass


def tool_version() -> str:
    try:
        return version("artifact")
    except PackageNotFoundError:
        return "0.0.0+local"


# -- parameter parsing --------------------------------------------------------

def _ints(text) -> list[int]:
    if isinstance(text, (list, tuple)):
        return [int(v) for v in text]
    try:
        return [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from None


def _range(text) -> tuple[int, int]:
    if isinstance(text, (list, tuple)):
        lo, hi = text
    else:
        try:
            lo, hi = (int(v) for v in str(text).split(":"))
        except ValueError:
            raise ConfigError(f"seed range must look like LO:HI, got {text!r}") from None
    if not 0 <= lo < hi:
        raise ConfigError(f"seed range must satisfy 0 <= LO < HI, got {lo}:{hi}")
    return int(lo), int(hi)


def _cols(text):
    return None if text is None else [c.strip() for c in text.split(",") if c.strip()]


def _space(p: dict) -> ConfigSpace:
    models = p["models"].split(",") if isinstance(p["models"], str) else p["models"]
    return ConfigSpace(n=_ints(p["n"]), dz=_ints(p["dz"]), k=_ints(p["k"]), dx=p["dx"], dy=p["dy"],
                       models=tuple(m.strip() for m in models), noise_scale=p["noise_scale"], linear=p["linear"])


def _guard(seed_range, manifests) -> None:
    """Refuse seed ranges that overlap any range recorded in the given manifests."""
    for path in manifests or ():
        recorded = io.read_json(path).get("seed_ranges", {})
        for name, other in recorded.items():
            try:
                check_disjoint(tuple(seed_range), tuple(other))
            except ConfigError:
                raise SeedGuardError(f"seed range {list(seed_range)} overlaps {name} range {other} from {path}") from None


def _dataset_files(paths) -> list[Path]:
    out = []
    for p in map(Path, paths):
        if p.is_dir():
            out += sorted(f for f in p.iterdir() if f.suffix in (".bin", ".csv"))
        else:
            out.append(p)
    if not out:
        raise ConfigError("no dataset files given")
    return out


def _hashes(paths) -> dict:
    return {str(p): io.sha256_file(p) for p in paths if Path(p).is_file()}


# -- runners: params dict -> (outputs, manifest extras) ------------------------
# Each runner is a pure function of its params so a manifest can replay it.

def run_generate(p: dict) -> dict:
    space = _space(p)
    seed_range = _range(p["seed_range"])
    _guard(seed_range, p.get("train_manifest"))
    out = Path(p["out"])
    out.mkdir(parents=True, exist_ok=True)
    stream = DatasetStream(space, p["seed"], seed_range)
    written = []
    for i in range(p["count"]):
        # Shapes are drawn per dataset here; the one-shape-per-batch rule only concerns training.
        ds = stream.take(1)[0]
        path = out / f"dataset_{i:05d}.{'csv' if p['format'] == 'csv' else 'bin'}"
        if p["format"] == "csv":
            io.write_dataset_csv(ds, path)
        else:
            io.write_dataset(ds, path)
        written.append(path)
    return {"outputs": written, "seed_ranges": {"generate": list(seed_range)}}


def run_train(p: dict) -> dict:
    space = _space(p)
    seed_range = _range(p["seed_range"])
    out = Path(p["out"])
    out.mkdir(parents=True, exist_ok=True)
    cfg = TrainConfig(steps=p["steps"], batch_size=p["batch_size"], lr=p["lr"], config_space=space,
                      seed_range=seed_range, checkpoint_every=p["checkpoint_every"], seed=p["seed"])
    forbidden = [TEST_SEED_RANGE]
    for path in p.get("test_manifest") or ():
        forbidden += [tuple(r) for r in io.read_json(path).get("seed_ranges", {}).values()]
    try:
        for r in forbidden:
            check_disjoint(seed_range, r)
    except ConfigError as e:
        raise SeedGuardError(str(e)) from None
    ckpt, log_path = out / "model.ckpt", out / "train_log.jsonl"
    if p.get("resume"):
        model, info = io.load_checkpoint(p["resume"])
    else:
        model, info = ACID(ModelConfig(e=p["e"], h=p["h"], L=p["L"]), seed=p["seed"]), None
        if p["precision"] == "float64":
            model = model.double()
        log_path.unlink(missing_ok=True)
    tr = Trainer(model, cfg, log_path=log_path, checkpoint_path=ckpt)
    if info is not None:
        tr.restore(info)
    tr.run()
    # The log carries wallclock stamps, so it is hashed apart from the reproducible outputs.
    return {"outputs": [ckpt], "logs": [log_path], "inputs": [p["resume"]] if p.get("resume") else [],
            "seed_ranges": {"train": list(seed_range)}}


def run_calibrate(p: dict) -> dict:
    model, info = io.load_checkpoint(p["checkpoint"])
    space = _space(p) if p.get("n") else ConfigSpace.from_dict(info["extra"]["train_config"]["config_space"])
    seed_range = _range(p["seed_range"])
    null = calibrate(model, space, count=p["null_count"], seed=p["seed"], seed_range=seed_range,
                     model_fingerprint=io.sha256_file(p["checkpoint"]))
    out = Path(p["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    io.write_json(out, null.to_dict())
    warnings = []
    if null.ks_statistic > KS_WARN:
        warnings.append(f"poor null fit: KS statistic {null.ks_statistic:.3f} > {KS_WARN}")
        log.warning(warnings[-1])
    return {"outputs": [out], "inputs": [p["checkpoint"]], "seed_ranges": {"calibrate": list(seed_range)},
            "warnings": warnings}


def _test_one(model, null, path: Path, p: dict) -> dict:
    row = {"file": str(path)}
    try:
        kw = {}
        if path.suffix == ".csv":
            kw = dict(x_cols=_cols(p["x_cols"]), y_cols=_cols(p["y_cols"]), z_cols=_cols(p["z_cols"]))
        ds = io.load_dataset(path, **kw)
        logit = model.logit(ds)
        pv = p_value(logit, null)
        row.update(n=ds.n, dX=ds.dx, dY=ds.dy, dZ=ds.dz, logit=logit, p_value=pv, decision=decide(pv, p["alpha"]))
    except (io.FormatError, FloatingPointError, ValueError) as e:
        row["error"] = str(e)
    return row


def run_test(p: dict) -> dict:
    files = _dataset_files(p["datasets"])
    if any(f.suffix == ".csv" for f in files) and not all(p.get(k) for k in ("x_cols", "y_cols", "z_cols")):
        raise click.UsageError("CSV inputs need --x-cols, --y-cols and --z-cols")
    model, _ = io.load_checkpoint(p["checkpoint"])
    null = NullDistribution.from_dict(io.read_json(p["calibration"]))
    with ThreadPoolExecutor(max_workers=max(1, torch.get_num_threads())) as pool:
        rows = list(pool.map(lambda f: _test_one(model, null, f, p), files))
    out = Path(p["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    io.write_json(out, {"alpha": p["alpha"], "rows": rows})
    for r in rows:
        if "error" in r:
            click.echo(f"{r['file']}\terror: {r['error']}")
        else:
            click.echo(f"{r['file']}\tlogit={r['logit']:.6g}\tp={r['p_value']:.6g}\t{r['decision']}")
    return {"outputs": [out], "inputs": [p["checkpoint"], p["calibration"], *files]}


def run_finetune(p: dict) -> dict:
    files = _dataset_files(p["corpus"])
    corpus = [io.read_dataset(f) for f in files]
    model, info = io.load_checkpoint(p["checkpoint"])
    out = Path(p["out"])
    out.mkdir(parents=True, exist_ok=True)
    seed_range = _range(p["seed_range"])
    cfg = TrainConfig(steps=p["steps"], batch_size=p["batch_size"], lr=p["lr"], seed=p["seed"],
                      seed_range=seed_range, checkpoint_every=0)
    finetune(model, corpus, cfg, down_sample=p["down_sample"], optimizer_state=info.get("optimizer"),
             log_path=out / "finetune_log.jsonl")
    ckpt = out / "model.ckpt"
    # Output location stays out of the file so replays elsewhere are byte-identical.
    recipe = {k: v for k, v in p.items() if k != "out"}
    io.save_checkpoint(ckpt, model, step=info["step"] + p["steps"], extra={"finetune": recipe})
    return {"outputs": [ckpt], "logs": [out / "finetune_log.jsonl"], "inputs": [p["checkpoint"], *files]}


def run_eval(p: dict) -> dict:
    files = _dataset_files(p["corpus"])
    corpus = [io.read_dataset(f) for f in files]
    model, _ = io.load_checkpoint(p["checkpoint"])
    null = NullDistribution.from_dict(io.read_json(p["calibration"]))
    report = folded_eval(model, null, corpus, n_folds=p["folds"], alpha=p["alpha"], fold_seed=p["fold_seed"])
    out = Path(p["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    d = report.to_dict(with_rows=p["rows"])
    d.pop("inference_ms_per_dataset")  # timing would break artifact reproducibility
    if not p["per_fold"]:
        d.pop("folds")
    io.write_json(out, d)
    for name in ("auc", "f1", "type1", "type2"):
        iv = d[name]
        click.echo(f"{name}\t" + ("n/a" if iv is None else f"{iv['mean']:.4f} [{iv['ci95_low']:.4f}, {iv['ci95_high']:.4f}]"))
    return {"outputs": [out], "inputs": [p["checkpoint"], p["calibration"], *files],
            "timing": {"inference_ms_per_dataset": report.inference_ms_per_dataset}}


RUNNERS = {
    "generate": run_generate, "train": run_train, "calibrate": run_calibrate,
    "test": run_test, "finetune": run_finetune, "eval": run_eval,
}


def manifest_path(params: dict) -> Path:
    out = Path(params["out"])
    return out / "manifest.json" if out.suffix == "" else out.with_name(out.name + ".manifest.json")


def execute(command: str, params: dict) -> Path:
    """Run ``command`` and write its manifest; returns the manifest path."""
    t0 = time.perf_counter()
    result = RUNNERS[command](params)
    manifest = {
        "command": command,
        "config": params,
        "seed_ranges": result.get("seed_ranges", {}),
        "inputs": _hashes(result.get("inputs", [])),
        "outputs": _hashes(result.get("outputs", [])),
        "logs": _hashes(result.get("logs", [])),
        "warnings": result.get("warnings", []),
        "tool_version": tool_version(),
        "torch_version": torch.__version__,
        "wallclock_s": round(time.perf_counter() - t0, 3),
    }
    if "timing" in result:
        manifest["timing"] = result["timing"]
    path = manifest_path(params)
    io.write_json(path, manifest)
    return path


def _invoke(command: str, params: dict) -> None:
    try:
        path = execute(command, params)
    except click.UsageError:
        raise
    except SeedGuardError as e:
        click.echo(f"seed guard: {e}", err=True)
        sys.exit(EXIT_SEED_GUARD)
    except NumericalError as e:
        click.echo(f"numerical failure: {e}", err=True)
        sys.exit(EXIT_NUMERIC)
    except (ConfigError, io.FormatError, FileNotFoundError) as e:
        click.echo(f"error: {e}", err=True)
        sys.exit(EXIT_USAGE)
    click.echo(f"manifest: {path}", err=True)


# -- click wiring ------------------------------------------------------------

def space_options(f):
    opts = [
        click.option("--n", default="50,200", show_default=True, help="Sample sizes, comma separated."),
        click.option("--dz", default="5,10,20", show_default=True, help="Conditioning-set sizes."),
        click.option("--k", default="16", show_default=True, help="Mechanism hidden widths."),
        click.option("--dx", default=1, show_default=True),
        click.option("--dy", default=1, show_default=True),
        click.option("--models", default=",".join(MODELS), show_default=True),
        click.option("--noise-scale", default=0.3, show_default=True),
        click.option("--linear", is_flag=True, help="Affine mechanisms instead of tanh MLPs."),
    ]
    for o in reversed(opts):
        f = o(f)
    return f


@click.group()
@click.option("--threads", type=int, envvar=THREADS_ENV, default=None,
              help=f"Torch intra-op threads (also ${THREADS_ENV}).")
@click.option("-v", "--verbose", is_flag=True)
def main(threads, verbose):
    """Amortized conditional independence testing."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if threads:
        torch.set_num_threads(threads)


@main.command("generate")
@space_options
@click.option("--count", type=click.IntRange(min=1), required=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--seed-range", default=f"{TEST_SEED_RANGE[0]}:{TEST_SEED_RANGE[1]}", show_default=True)
@click.option("--format", "format_", type=click.Choice(["binary", "csv"]), default="binary", show_default=True)
@click.option("--train-manifest", multiple=True, type=click.Path(exists=True),
              help="Refuse seed ranges overlapping ranges recorded here.")
@click.option("--out", type=click.Path(file_okay=False), required=True)
def cmd_generate(format_, train_manifest, **kw):
    """Write synthetic datasets."""
    _invoke("generate", {**kw, "format": format_, "train_manifest": list(train_manifest)})


@main.command("train")
@space_options
@click.option("--steps", type=click.IntRange(min=0), default=2000, show_default=True)
@click.option("--batch-size", type=click.IntRange(min=1), default=32, show_default=True)
@click.option("--lr", type=float, default=1e-4, show_default=True)
@click.option("--e", type=click.IntRange(min=1), default=32, show_default=True)
@click.option("--h", type=click.IntRange(min=1), default=8, show_default=True)
@click.option("--L", "L", type=click.IntRange(min=1), default=4, show_default=True)
@click.option("--precision", type=click.Choice(["float32", "float64"]), default="float32", show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--seed-range", default=f"{TRAIN_SEED_RANGE[0]}:{TRAIN_SEED_RANGE[1]}", show_default=True)
@click.option("--checkpoint-every", type=int, default=500, show_default=True)
@click.option("--resume", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--test-manifest", multiple=True, type=click.Path(exists=True))
@click.option("--out", type=click.Path(file_okay=False), required=True)
def cmd_train(test_manifest, **kw):
    """Train a model on a stream of fresh synthetic datasets."""
    _invoke("train", {**kw, "test_manifest": list(test_manifest)})


@main.command("calibrate")
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--null-count", type=int, default=2000, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--seed-range", default=f"{TRAIN_SEED_RANGE[0]}:{TRAIN_SEED_RANGE[1]}", show_default=True)
@click.option("--n", default=None, help="Override the training config space (also --dz, --k, ...).")
@click.option("--dz", default="5,10,20")
@click.option("--k", default="16")
@click.option("--dx", default=1)
@click.option("--dy", default=1)
@click.option("--models", default=",".join(MODELS))
@click.option("--noise-scale", default=0.3)
@click.option("--linear", is_flag=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True)
def cmd_calibrate(**kw):
    """Fit the skew-normal null to H0 logits."""
    _invoke("calibrate", kw)


@main.command("test")
@click.argument("datasets", nargs=-1, required=True, type=click.Path(exists=True))
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--calibration", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--alpha", type=click.FloatRange(0, 1, min_open=True, max_open=True), default=0.05, show_default=True)
@click.option("--x-cols", default=None, help="CSV columns for X (names or positions).")
@click.option("--y-cols", default=None)
@click.option("--z-cols", default=None)
@click.option("--out", type=click.Path(dir_okay=False), required=True)
def cmd_test(datasets, **kw):
    """Test X _||_ Y | Z on each dataset file."""
    _invoke("test", {**kw, "datasets": list(datasets)})


@main.command("finetune")
@click.argument("corpus", nargs=-1, required=True, type=click.Path(exists=True))
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--steps", type=click.IntRange(min=0), default=500, show_default=True)
@click.option("--batch-size", type=click.IntRange(min=1), default=32, show_default=True)
@click.option("--lr", type=float, default=1e-4, show_default=True)
@click.option("--down-sample", type=click.IntRange(min=1), default=50, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--seed-range", default=f"{TRAIN_SEED_RANGE[0]}:{TRAIN_SEED_RANGE[1]}", show_default=True)
@click.option("--out", type=click.Path(file_okay=False), required=True)
def cmd_finetune(corpus, **kw):
    """Continue training on a labeled corpus."""
    _invoke("finetune", {**kw, "corpus": list(corpus)})


@main.command("eval")
@click.argument("corpus", nargs=-1, required=True, type=click.Path(exists=True))
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--calibration", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--folds", type=int, default=5, show_default=True)
@click.option("--fold-seed", type=int, default=0, show_default=True)
@click.option("--alpha", type=click.FloatRange(0, 1, min_open=True, max_open=True), default=0.05, show_default=True)
@click.option("--per-fold", is_flag=True, help="Include the per-fold table.")
@click.option("--rows", is_flag=True, help="Include per-dataset rows.")
@click.option("--out", type=click.Path(dir_okay=False), required=True)
def cmd_eval(corpus, **kw):
    """Folded AUC / F1 / Type I / Type II on a labeled corpus."""
    if kw["folds"] < 2:
        raise click.UsageError("--folds must be at least 2")
    _invoke("eval", {**kw, "corpus": list(corpus)})


@main.command("replay")
@click.argument("manifest", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", default=None, help="Write to a different location than recorded.")
def cmd_replay(manifest, out):
    """Re-run a command from its manifest."""
    m = json.loads(Path(manifest).read_text())
    params = dict(m["config"])
    if out:
        params["out"] = out
    _invoke(m["command"], params)


if __name__ == "__main__":
    main()
