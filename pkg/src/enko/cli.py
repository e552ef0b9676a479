"""Command-line entry point.

    enko <command> [--config FILE] [--key value ...]

Commands: generate, train, evaluate, gradvar, sweep, compare.  Every command
writes ``config.resolved`` into ``out_dir``; passing that file back with
``--config`` repeats the run.  Exit codes: 0 success, 2 configuration error,
3 I/O error, 4 runtime failure.

``ENKO_NUM_THREADS`` caps the BLAS thread pools; it is applied before numpy
is imported.
"""

from __future__ import annotations

import csv
import os
import sys

from .config import SCHEMA, ConfigError, RunConfig, load

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_RUNTIME = 0, 2, 3, 4
COMMANDS = ("generate", "train", "evaluate", "gradvar", "sweep", "compare")
CHECKPOINT_MAGIC = b"ENKC"


def _apply_thread_env() -> None:
    n = os.environ.get("ENKO_NUM_THREADS")
    if n:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = n


def parse_args(argv: list[str]) -> tuple[str, str | None, dict[str, str]]:
    if not argv or argv[0] in ("-h", "--help"):
        raise ConfigError(usage())
    cmd, rest = argv[0], argv[1:]
    if cmd not in COMMANDS:
        raise ConfigError(f"unknown command {cmd!r}\n{usage()}")
    path, overrides = None, {}
    i = 0
    while i < len(rest):
        tok = rest[i]
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, val = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(rest):
                raise ConfigError(f"missing value for --{key}")
            val = rest[i + 1]
            i += 2
        if key == "config":
            path = val
        else:
            overrides[key] = val
    return cmd, path, overrides


def usage() -> str:
    keys = "\n".join(f"  --{k} (default {v.default!r}) {v.doc}".rstrip() for k, v in SCHEMA.items())
    return ("usage: enko {" + ",".join(COMMANDS) + "} [--config FILE] [--key value ...]\n"
            "keys:\n" + keys)


# ----------------------------------------------------------------- helpers

def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def read_csv(path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _out_dir(cfg: RunConfig) -> str:
    out = cfg["out_dir"]
    try:
        os.makedirs(out, exist_ok=True)
    except OSError as err:
        raise OSError(f"cannot create output directory {out}: {err.strerror}") from None
    with open(os.path.join(out, "config.resolved"), "w") as fh:
        fh.write(cfg.dump())
    return out


def _objective(cfg: RunConfig, kind: str | None = None, method: str | None = None,
               alpha: float | None = None):
    from .filters import FilterConfig, InflationConfig
    from .objectives import ObjectiveKind
    try:
        fc = FilterConfig(cfg["filter.jitter"], cfg["filter.resampling_scheme"],
                          cfg["filter.resample_trigger"])
        infl = InflationConfig(method or cfg["inflation.method"],
                               cfg["inflation.alpha"] if alpha is None else alpha)
        return ObjectiveKind(kind or cfg["objective.kind"], cfg["objective.n_particles"], fc, infl)
    except ValueError as err:
        raise ConfigError(str(err)) from None


def _train_config(cfg: RunConfig, objective, seed: int):
    from .training import TrainConfig
    try:
        return TrainConfig(objective, cfg["train.learning_rate"], cfg["train.epochs"],
                           cfg["train.batch_size"], seed, cfg["train.grad_clip_norm"])
    except ValueError as err:
        raise ConfigError(str(err)) from None


def _load_dataset(cfg: RunConfig):
    from .data import Dataset
    path = cfg["data.path"]
    if not path:
        raise ConfigError("data.path is required for this command")
    try:
        return Dataset.load(path)
    except OSError as err:
        raise OSError(f"cannot read dataset {path}: {err.strerror}") from None


def init_model(cfg: RunConfig, d_x: int, seed: int):
    from .distributions import Rng
    from .models import LinearGaussianSSM, NeuralSSM, NonlinearStudentSSM
    kind, d_z = cfg["model.kind"], cfg["model.d_z"]
    want = cfg["model.d_x"]
    if want and want != d_x:
        raise ConfigError(f"model.d_x={want} does not match the dataset's d_x={d_x}")
    rng = Rng(seed).child("model-init")
    if kind == "neural":
        return NeuralSSM.initialize(d_z, d_x, cfg["model.hidden"], rng)
    if kind == "lgssm":
        return LinearGaussianSSM.default_init(d_z, d_x, rng)
    if kind == "nonlinear_student":
        return NonlinearStudentSSM.default_init(d_z, d_x, rng)
    raise ConfigError(f"unknown model.kind {kind!r}")


def save_checkpoint(path, model, objective, meta: dict) -> None:
    from .storage import write_container
    obj = {"kind": objective.kind, "n_particles": objective.n_particles,
           "jitter": objective.filter_cfg.jitter,
           "resampling_scheme": objective.filter_cfg.resampling_scheme,
           "resample_trigger": objective.filter_cfg.resample_trigger,
           "inflation_method": objective.inflation.method,
           "inflation_alpha": objective.inflation.alpha}
    write_container(path, CHECKPOINT_MAGIC, {"model": model.config(), "objective": obj, **meta},
                    {"params": model.params})


def load_checkpoint(path):
    from .filters import FilterConfig, InflationConfig
    from .models import build_model
    from .objectives import ObjectiveKind
    from .storage import read_container
    try:
        meta, arrays = read_container(path, CHECKPOINT_MAGIC)
    except OSError as err:
        raise OSError(f"cannot read checkpoint {path}: {err.strerror}") from None
    o = meta["objective"]
    kind = ObjectiveKind(o["kind"], o["n_particles"],
                         FilterConfig(o["jitter"], o["resampling_scheme"], o["resample_trigger"]),
                         InflationConfig(o["inflation_method"], o["inflation_alpha"]))
    return build_model(meta["model"], arrays["params"]), kind, meta


def _horizons(cfg: RunConfig, T: int) -> tuple[list[int], int]:
    horizons = sorted(set(cfg["eval.horizons"]))
    if not horizons:
        raise ConfigError("eval.horizons is empty")
    ctx = cfg["eval.context_len"] or T - horizons[-1]
    if ctx < 1 or ctx + horizons[-1] > T:
        raise ConfigError(f"context_len {ctx} with max horizon {horizons[-1]} does not fit T={T}")
    return horizons, ctx


HISTORY_HEADER = ["epoch", "train_objective", "valid_objective", "grad_norm", "mean_ess", "status"]


def _history_rows(hist):
    return [[r.epoch, r.train_objective, r.valid_objective, r.grad_norm, r.mean_ess, r.status]
            for r in hist]


# ---------------------------------------------------------------- commands

def cmd_generate(cfg: RunConfig) -> list[str]:
    from . import data as D
    from .distributions import Rng
    from .models import LinearGaussianSSM, NonlinearStudentSSM
    gen, seed = cfg["data.generator"], cfg["seed"]
    kw = {}
    for key in ("n_samples", "T", "dt"):
        if cfg["data." + key]:
            kw[key] = cfg["data." + key]
    if cfg.raw["data.splits"]:
        try:
            kw["splits"] = tuple(int(s) for s in cfg.raw["data.splits"].split(","))
        except ValueError:
            raise ConfigError("data.splits must be three comma-separated integers") from None
        if len(kw["splits"]) != 3:
            raise ConfigError("data.splits must have three entries")
    try:
        if gen in ("fhn", "lorenz"):
            fn = D.fhn_generate if gen == "fhn" else D.lorenz_generate
            ds = fn(obs_std=cfg["data.obs_std"], seed=seed, scale=cfg["data.scale"], **kw)
        elif gen in ("lgssm", "nonlinear_student"):
            cls = LinearGaussianSSM if gen == "lgssm" else NonlinearStudentSSM
            teacher = cls.default_init(cfg["data.d_z"], cfg["data.d_x"], Rng(seed).child("teacher"))
            n = kw.get("n_samples", 100)
            splits = kw.get("splits", (n - 2 * (n // 5), n // 5, n // 5))
            ds = D.simulate(teacher, kw.get("T", 50), n, Rng(seed).child("simulate"), splits, seed)
        else:
            raise ConfigError(f"unknown data.generator {gen!r}")
    except ValueError as err:
        if isinstance(err, ConfigError):
            raise
        raise ConfigError(str(err)) from None
    out = _out_dir(cfg)
    files = [os.path.join(out, f) for f in ("dataset.enkd", "dataset_summary.txt", "dataset.csv")]
    ds.save(files[0])
    with open(files[1], "w") as fh:
        fh.write(ds.summary())
    ds.to_csv(files[2])
    if cfg["plot"]:
        from .plotting import plot_dataset
        files.append(os.path.join(out, "dataset.png"))
        plot_dataset(ds, files[-1])
    return files


def _train_seeds(cfg, ds, objective, out, tag=""):
    """Train once per seed; returns (models, histories, summary rows)."""
    from .training import train
    seeds = cfg["train.seeds"]
    if not seeds:
        raise ConfigError("train.seeds is empty")
    models, hists, rows = {}, {}, []
    for seed in seeds:
        model = init_model(cfg, ds.d_x, seed)
        tc = _train_config(cfg, objective, seed)
        model, hist = train(model, ds, tc)
        models[seed], hists[seed] = model, hist
        name = f"{tag}seed{seed}"
        write_csv(os.path.join(out, f"history_{name}.csv"), HISTORY_HEADER, _history_rows(hist))
        best = max((r.valid_objective for r in hist), default=float("nan"))
        first = hist[0].valid_objective if hist else float("nan")
        save_checkpoint(os.path.join(out, f"checkpoint_{name}.enkc"), model, objective,
                        {"seed": seed, "epochs": tc.epochs, "best_valid_objective": best})
        rows.append([str(seed), first, best, hist[-1].valid_objective if hist else float("nan")])
    return models, hists, rows


def cmd_train(cfg: RunConfig) -> list[str]:
    import numpy as np
    ds = _load_dataset(cfg)
    objective = _objective(cfg)
    if objective.kind == "fivor":
        raise ConfigError("objective.kind=fivor is a gradient-study estimator; train with enko, fivo or iwae")
    init_model(cfg, ds.d_x, 0)   # validates dims before any training
    out = _out_dir(cfg)
    _, hists, rows = _train_seeds(cfg, ds, objective, out)
    arr = np.array([r[1:] for r in rows], dtype=float)
    rows.append(["mean"] + [float(v) for v in arr.mean(axis=0)])
    path = os.path.join(out, "train_summary.csv")
    write_csv(path, ["seed", "initial_valid_objective", "best_valid_objective", "final_valid_objective"], rows)
    files = [path]
    if cfg["plot"]:
        from .plotting import plot_history
        files.append(os.path.join(out, "history.png"))
        plot_history({f"seed {s}": h for s, h in hists.items()}, files[-1])
    return files


def cmd_evaluate(cfg: RunConfig) -> list[str]:
    from dataclasses import replace
    from .distributions import Rng
    from .training import predict_mse
    ds = _load_dataset(cfg)
    ck = cfg["eval.checkpoint"]
    if not ck:
        raise ConfigError("eval.checkpoint is required for evaluate")
    model, kind, _ = load_checkpoint(ck)
    if model.d_x != ds.d_x:
        raise ConfigError(f"checkpoint d_x={model.d_x} does not match dataset d_x={ds.d_x}")
    if cfg["eval.n_particles"]:
        kind = replace(kind, n_particles=cfg["eval.n_particles"])
    split = cfg["eval.split"]
    if split not in ds.splits or len(ds.splits[split]) == 0:
        raise ConfigError(f"dataset has no {split!r} sequences")
    horizons, ctx = _horizons(cfg, ds.T)
    res = predict_mse(model, ds.split(split), kind, ctx, horizons, Rng(cfg["seed"]).child("eval"))
    out = _out_dir(cfg)
    path = os.path.join(out, "mse.csv")
    write_csv(path, ["horizon", "mse", "stderr"],
              [[h, float(m), float(s)] for h, m, s in zip(res.horizons, res.mse, res.stderr)])
    files = [path]
    if cfg["plot"]:
        from .plotting import plot_mse
        files.append(os.path.join(out, "mse.png"))
        plot_mse({kind.kind: (res.horizons, res.mse, res.stderr)}, files[-1])
    return files


GRADVAR_HEADER = ["estimator", "d_x", "d_z", "parameter_group", "variance", "log_rel_var_vs_fivo"]


def cmd_gradvar(cfg: RunConfig) -> list[str]:
    import math
    from .gradvar import GradVarSpec, grad_variance_experiment, log_relative_variance
    ests = tuple(e.strip() for e in cfg["gradvar.estimators"].split(",") if e.strip())
    grid = cfg["gradvar.grid"]
    if not grid:
        raise ConfigError("gradvar.grid is empty")
    specs = []
    try:
        for dx, dz in grid:
            specs.append(GradVarSpec(cfg["gradvar.model_kind"], dx, dz, cfg["gradvar.T"],
                                     cfg["gradvar.n_particles"], cfg["gradvar.batch"],
                                     cfg["gradvar.n_simulations"], cfg["seed"], ests))
    except ValueError as err:
        raise ConfigError(str(err)) from None
    out = _out_dir(cfg)
    rows, dict_rows = [], []
    for spec in specs:
        reports = grad_variance_experiment(spec)
        rel = log_relative_variance(reports) if "fivo" in reports else {}
        for est, rep in reports.items():
            for g, v in rep.groups.items():
                lr = rel.get(est, {}).get(g, math.nan)
                rows.append([est, spec.d_x, spec.d_z, g, v, lr])
                dict_rows.append({"estimator": est, "d_x": spec.d_x, "d_z": spec.d_z,
                                  "parameter_group": g, "variance": v})
    path = os.path.join(out, "gradvar.csv")
    write_csv(path, GRADVAR_HEADER, rows)
    files = [path]
    if cfg["plot"]:
        from .plotting import plot_gradvar
        files.append(os.path.join(out, "gradvar.png"))
        plot_gradvar(dict_rows, files[-1])
    return files


def cmd_sweep(cfg: RunConfig) -> list[str]:
    import numpy as np
    from .training import SWEEP_AXES, select_best, sweep
    axis, values = cfg["sweep.axis"], cfg["sweep.values"]
    if axis not in SWEEP_AXES:
        raise ConfigError(f"sweep.axis must be one of {SWEEP_AXES}")
    if not values:
        raise ConfigError("sweep.values is empty")
    ds = _load_dataset(cfg)
    init_model(cfg, ds.d_x, 0)
    objective = _objective(cfg)
    if axis == "inflation_factor" and objective.inflation.method == "none":
        raise ConfigError("an inflation sweep needs inflation.method rtpp, rtps or rtps_anomaly")
    seed = cfg["train.seeds"][0] if cfg["train.seeds"] else cfg["seed"]
    base = _train_config(cfg, objective, seed)
    horizons, ctx = _horizons(cfg, ds.T)
    out = _out_dir(cfg)
    rows = sweep(axis, values, base, ds, lambda s: init_model(cfg, ds.d_x, s), ctx, horizons)
    try:
        chosen = select_best(rows).value
    except ValueError:
        chosen = float("nan")
    header = ["value", "mean_mse"] + [f"mse_h{h}" for h in horizons] + ["valid_objective", "status", "selected"]
    table = [[r.value, float(np.mean(r.mse))] + [float(m) for m in r.mse]
             + [r.valid_objective, r.status, int(r.value == chosen)] for r in rows]
    path = os.path.join(out, "sweep.csv")
    write_csv(path, header, table)
    sel = os.path.join(out, "selected.txt")
    with open(sel, "w") as fh:
        fh.write(f"{axis} = {chosen!r}\n")
    files = [path, sel]
    if cfg["plot"]:
        from .plotting import plot_sweep
        files.append(os.path.join(out, "sweep.png"))
        plot_sweep([r.value for r in rows], [float(np.mean(r.mse)) for r in rows], files[-1], axis)
    return files


METHODS = {
    "iwae": ("iwae", "none"), "fivo": ("fivo", "none"), "enko": ("enko", "none"),
    "enko_rtpp": ("enko", "rtpp"), "enko_rtps": ("enko", "rtps"),
}


def cmd_compare(cfg: RunConfig) -> list[str]:
    """Train each method over the seed list and tabulate test MSE per horizon."""
    import numpy as np
    from .distributions import Rng
    from .training import predict_mse
    ds = _load_dataset(cfg)
    init_model(cfg, ds.d_x, 0)
    methods = [m.strip() for m in cfg["compare.methods"].split(",") if m.strip()]
    bad = [m for m in methods if m not in METHODS]
    if bad or not methods:
        raise ConfigError(f"unknown compare.methods {bad}; choose from {sorted(METHODS)}")
    horizons, ctx = _horizons(cfg, ds.T)
    split = cfg["eval.split"]
    out = _out_dir(cfg)
    mse_rows, hist_rows, curves = [], [], {}
    for name in methods:
        kind, infl = METHODS[name]
        alpha = {"rtpp": cfg["compare.rtpp_alpha"], "rtps": cfg["compare.rtps_alpha"]}.get(infl, 0.0)
        objective = _objective(cfg, kind, infl, alpha)
        models, hists, rows = _train_seeds(cfg, ds, objective, out, tag=f"{name}_")
        per_seed = []
        for seed, model in models.items():
            res = predict_mse(model, ds.split(split), objective, ctx, horizons,
                              Rng(cfg["seed"]).child("eval", seed))
            per_seed.append(res.mse)
            for h, m, s in zip(res.horizons, res.mse, res.stderr):
                mse_rows.append([name, str(seed), h, float(m), float(s)])
        per_seed = np.array(per_seed)
        mean = per_seed.mean(axis=0)
        se = per_seed.std(axis=0, ddof=1) / np.sqrt(len(per_seed)) if len(per_seed) > 1 else np.zeros_like(mean)
        for h, m, s in zip(horizons, mean, se):
            mse_rows.append([name, "mean", h, float(m), float(s)])
        curves[name] = (horizons, mean, se)
        for r in rows:
            hist_rows.append([name] + r)
    path = os.path.join(out, "compare_mse.csv")
    write_csv(path, ["method", "seed", "horizon", "mse", "stderr"], mse_rows)
    summ = os.path.join(out, "compare_train.csv")
    write_csv(summ, ["method", "seed", "initial_valid_objective", "best_valid_objective",
                     "final_valid_objective"], hist_rows)
    files = [path, summ]
    if cfg["plot"]:
        from .plotting import plot_mse
        files.append(os.path.join(out, "compare_mse.png"))
        plot_mse(curves, files[-1])
    return files


HANDLERS = {"generate": cmd_generate, "train": cmd_train, "evaluate": cmd_evaluate,
            "gradvar": cmd_gradvar, "sweep": cmd_sweep, "compare": cmd_compare}


def run(argv: list[str]) -> tuple[int, list[str]]:
    from numpy.linalg import LinAlgError
    try:
        cmd, path, overrides = parse_args(argv)
        cfg = load(path, overrides)
        files = HANDLERS[cmd](cfg)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG, []
    except OSError as err:
        print(f"i/o error: {err}", file=sys.stderr)
        return EXIT_IO, []
    except (ValueError, ArithmeticError, LinAlgError) as err:
        print(f"runtime error: {err}", file=sys.stderr)
        return EXIT_RUNTIME, []
    for f in files:
        print(f)
    return EXIT_OK, files


def main(argv: list[str] | None = None) -> int:
    _apply_thread_env()
    return run(sys.argv[1:] if argv is None else argv)[0]


if __name__ == "__main__":
    sys.exit(main())
