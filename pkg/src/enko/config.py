"""Flat dotted ``key = value`` run configuration.

Every key has a declared type and default; unknown keys are rejected.  The
resolved mapping is written back in the same format, so a run can be
repeated from its echo.
"""

from __future__ import annotations

from dataclasses import dataclass


class ConfigError(ValueError):
    """Invalid configuration (unknown key, bad value, inconsistent settings)."""


def _bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _opt_float(s: str):
    return None if s.strip().lower() in ("", "none") else float(s)


def int_list(s: str) -> list[int]:
    """``"1-3,5"`` -> ``[1, 2, 3, 5]``."""
    out: list[int] = []
    for part in filter(None, (p.strip() for p in s.split(","))):
        cut = part.find("-", 1)
        if cut > 0:
            out.extend(range(int(part[:cut]), int(part[cut + 1:]) + 1))
        else:
            out.append(int(part))
    return out


def float_list(s: str) -> list[float]:
    return [float(p) for p in s.split(",") if p.strip()]


def grid_list(s: str) -> list[tuple[int, int]]:
    """``"2x2,3x3"`` -> ``[(2, 2), (3, 3)]`` as ``(d_x, d_z)`` pairs."""
    out = []
    for part in filter(None, (p.strip() for p in s.split(","))):
        a, b = part.lower().split("x")
        out.append((int(a), int(b)))
    return out


@dataclass(frozen=True)
class Key:
    default: str
    parse: object = str
    doc: str = ""


SCHEMA: dict[str, Key] = {
    "seed": Key("0", int, "top-level seed for all randomness"),
    "out_dir": Key("out", str, "output directory"),
    "plot": Key("true", _bool, "render PNG figures next to the CSV outputs"),
    # data
    "data.generator": Key("fhn", str, "fhn | lorenz | lgssm | nonlinear_student"),
    "data.path": Key("", str, "dataset file for train/evaluate/sweep/compare"),
    "data.n_samples": Key("0", int, "0 = generator default"),
    "data.T": Key("0", int, "0 = generator default"),
    "data.dt": Key("0", float, "0 = generator default"),
    "data.obs_std": Key("0.1", float),
    "data.splits": Key("", str, "train,valid,test sizes; empty = generator default"),
    "data.scale": Key("true", _bool, "divide each channel by its max |x| on the train split"),
    "data.d_x": Key("2", int, "observation dim for model-simulated data"),
    "data.d_z": Key("2", int, "latent dim for model-simulated data"),
    # model
    "model.kind": Key("neural", str, "neural | lgssm | nonlinear_student"),
    "model.d_z": Key("2", int),
    "model.d_x": Key("0", int, "0 = take from the dataset"),
    "model.hidden": Key("32", int),
    # objective / filter
    "objective.kind": Key("enko", str, "enko | fivo | fivor | iwae"),
    "objective.n_particles": Key("16", int),
    "filter.jitter": Key("1e-6", float),
    "filter.resampling_scheme": Key("multinomial", str),
    "filter.resample_trigger": Key("every_step", str),
    "inflation.method": Key("none", str, "none | rtpp | rtps | rtps_anomaly"),
    "inflation.alpha": Key("0", float),
    # training
    "train.learning_rate": Key("0.001", float),
    "train.epochs": Key("100", int),
    "train.batch_size": Key("20", int),
    "train.grad_clip_norm": Key("none", _opt_float),
    "train.seeds": Key("0", int_list, "seed list, e.g. 0,1,2"),
    # evaluation
    "eval.checkpoint": Key("", str),
    "eval.split": Key("test", str),
    "eval.horizons": Key("1-20", int_list),
    "eval.context_len": Key("0", int, "0 = T - max(horizons)"),
    "eval.n_particles": Key("0", int, "0 = as trained"),
    # gradient variance
    "gradvar.model_kind": Key("lgssm", str),
    "gradvar.grid": Key("2x2", grid_list, "d_x x d_z pairs"),
    "gradvar.T": Key("100", int),
    "gradvar.n_particles": Key("16", int),
    "gradvar.batch": Key("10", int),
    "gradvar.n_simulations": Key("100", int),
    "gradvar.estimators": Key("enko,fivo,fivor,iwae", str),
    # sweeps
    "sweep.axis": Key("inflation_factor", str, "n_particles | inflation_factor"),
    "sweep.values": Key("0.1,0.2,0.3", float_list),
    # method comparison
    "compare.methods": Key("iwae,fivo,enko,enko_rtpp,enko_rtps", str),
    "compare.rtpp_alpha": Key("0.2", float),
    "compare.rtps_alpha": Key("0.1", float),
}


class RunConfig:
    """Raw string values plus typed access."""

    def __init__(self, values: dict[str, str] | None = None):
        self.raw = {k: spec.default for k, spec in SCHEMA.items()}
        for k, v in (values or {}).items():
            self.set(k, v)

    def set(self, key: str, value) -> None:
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        text = str(value).strip()
        try:
            SCHEMA[key].parse(text)
        except (ValueError, TypeError) as err:
            raise ConfigError(f"bad value for {key}: {text!r} ({err})") from None
        self.raw[key] = text

    def __getitem__(self, key: str):
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        return SCHEMA[key].parse(self.raw[key])

    def dump(self) -> str:
        return "".join(f"{k} = {self.raw[k]}\n" for k in sorted(self.raw))


def parse_text(text: str) -> dict[str, str]:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value', got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def load(path=None, overrides: dict[str, str] | None = None) -> RunConfig:
    values = {}
    if path:
        try:
            with open(path) as fh:
                values = parse_text(fh.read())
        except OSError as err:
            raise ConfigError(f"cannot read config file {path}: {err.strerror}") from None
    values.update(overrides or {})
    return RunConfig(values)
