"""Flat ``section.key = value`` run configuration.

Every accepted key is declared once in :data:`REGISTRY` with its type and
default; files and command-line overrides naming anything else are rejected.
The resolved mapping renders back to the same text format, so a manifest's
``resolved.cfg`` can be fed to ``--config`` to repeat a run.
"""
import json
from dataclasses import dataclass, fields, replace

from .forecaster import MAX_LEAD
from .experiment import DESK_TRAIN, DataConfig, EvalConfig, ModelConfig, TrainConfig


class ConfigError(ValueError):
    """Unknown key, malformed line or value of the wrong type."""


@dataclass(frozen=True)
class Key:
    kind: type  # bool, int, float, str, or tuple for comma-separated floats
    default: object
    doc: str
    choices: tuple = ()


def _section(prefix, cls, instance, docs, choices=None):
    out = {}
    for f in fields(cls):
        value = getattr(instance, f.name)
        if f.name == "seed":
            continue
        kind = tuple if isinstance(value, tuple) else type(value)
        out[f"{prefix}.{f.name}"] = Key(kind, value, docs.get(f.name, ""), (choices or {}).get(f.name, ()))
    return out


REGISTRY = {
    "run.experiment": Key(str, "multistage", "what train runs: the staged curriculum or the naive baseline", ("multistage", "naive")),
    "run.seed": Key(int, 0, "seed for data generation, initialisation and batching"),
    "run.out": Key(str, "runs/default", "output directory"),
    **_section(
        "data", DataConfig, DataConfig(),
        {
            "system": "channel (two-level Lorenz-96 with seasonal forcing) or l63",
            "forcing": "mean forcing F0",
            "seasonal_amplitude": "forcing amplitude A of the annual cycle",
            "dt": "integrator step in model time units",
            "steps_per_day": "integrator steps per recorded day",
            "window": "day-of-year smoothing window for the climatology",
        },
        {"system": ("channel", "l63")},
    ),
    **_section(
        "model", ModelConfig, ModelConfig(),
        {"kind": "backbone: patch_transformer or mlp", "adapter_ratio": "adapter set size as a fraction of the backbone"},
        {"kind": ("patch_transformer", "mlp")},
    ),
    **_section("train", TrainConfig, DESK_TRAIN, {"stage2_lr": "cosine peak,minimum", "stage3_lr": "cosine peak,minimum"}),
    **_section("eval", EvalConfig, EvalConfig(), {"lead_first": "first lead of the long-lead mean", "lead_last": "last lead of the long-lead mean"}),
    "eval.metrics": Key(str, "pcc,tcc,cka", "comma-separated subset of pcc, tcc, cka"),
    "diagnose.horizon": Key(int, 42, "rollout length for the Jacobian growth curve"),
    "diagnose.n_starts": Key(int, 4, "test start days averaged in the growth curve"),
    "diagnose.method": Key(str, "auto", "Jacobian norm: dense, power or auto", ("auto", "dense", "power")),
    "diagnose.window": Key(int, 20, "trailing window of the divergence monitor"),
    "diagnose.spike_factor": Key(float, 10.0, "spike threshold as a multiple of the window median"),
    "linear.d": Key(int, 3, "matrix size"),
    "linear.depths": Key(tuple, (1, 2, 4, 8, 16, 32, 64), "depths L of the phase sweep"),
    "linear.initial_losses": Key(tuple, (0.001, 0.01, 0.1, 0.3, 1.0, 2.0, 2.7, 3.5, 10.0), "initial losses of the phase sweep"),
    "linear.slack": Key(float, 0.02, "slack added to R(0) in the step-size policy"),
    "linear.max_iter": Key(int, 100_000, "iteration budget per run"),
    "linear.tol": Key(float, 1e-10, "convergence threshold on the loss"),
    "linear.trace_depth": Key(int, 8, "depth of the single traced run"),
    "linear.trace_loss": Key(float, 0.3, "initial loss of the single traced run"),
    "linear.bound_samples": Key(int, 50, "random probes per depth for the gradient inequality"),
}


def _parse_value(key, text):
    entry = REGISTRY[key]
    text = text.strip()
    try:
        if entry.kind is bool:
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            value = low in ("true", "1", "yes")
        elif entry.kind is int:
            value = int(text)
        elif entry.kind is float:
            value = float(text)
        elif entry.kind is tuple:
            value = tuple(float(part) for part in text.split(",") if part.strip())
            if not value:
                raise ValueError(text)
        else:
            value = text
    except ValueError:
        raise ConfigError(f"{key}: cannot read {text!r} as {entry.kind.__name__}") from None
    if entry.choices and value not in entry.choices:
        raise ConfigError(f"{key}: {value!r} is not one of {', '.join(entry.choices)}")
    return value


def _format_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(int(v)) if float(v).is_integer() and abs(v) < 1e15 else repr(float(v)) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_assignment(line, source="<override>"):
    """``"section.key = value"`` to ``(key, value)``."""
    if "=" not in line:
        raise ConfigError(f"{source}: expected 'section.key = value', got {line!r}")
    key, text = line.split("=", 1)
    key = key.strip()
    if key not in REGISTRY:
        raise ConfigError(f"{source}: unknown key {key!r}")
    return key, _parse_value(key, text)


def parse_config_text(text, source="<config>"):
    values = {}
    for number, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, value = parse_assignment(line, f"{source}:{number}")
        if key in values:
            raise ConfigError(f"{source}:{number}: {key!r} set twice")
        values[key] = value
    return values


def resolve(path=None, overrides=()):
    """Defaults, then the file at ``path``, then ``overrides`` (assignment strings)."""
    values = {k: entry.default for k, entry in REGISTRY.items()}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        if text.lstrip().startswith("{"):
            text = _manifest_config(text, path)
        values.update(parse_config_text(text, str(path)))
    for item in overrides:
        key, value = parse_assignment(item)
        values[key] = value
    _validate(values)
    return values


def _manifest_config(text, path):
    """A run manifest is accepted as a config: its resolved text is replayed."""
    try:
        manifest = json.loads(text)
        return manifest["config_text"]
    except (ValueError, KeyError, TypeError):
        raise ConfigError(f"{path}: not a config file or run manifest") from None


def selected_metrics(values):
    names = tuple(part.strip().lower() for part in values["eval.metrics"].split(",") if part.strip())
    unknown = [n for n in names if n not in ("pcc", "tcc", "cka")]
    if unknown or not names:
        raise ConfigError(f"eval.metrics: expected a subset of pcc,tcc,cka, got {values['eval.metrics']!r}")
    return names


def _validate(values):
    positive = ("data.n_lat", "data.n_lon", "data.steps_per_day", "data.train_years", "data.test_years", "data.window",
                "model.width", "model.depth", "model.patch", "train.batch_size", "eval.horizon", "eval.stride",
                "diagnose.horizon", "diagnose.n_starts", "linear.d", "linear.max_iter", "linear.trace_depth")
    for key in positive:
        if values[key] < 1:
            raise ConfigError(f"{key} must be at least 1")
    for key in ("eval.horizon", "diagnose.horizon"):
        if values[key] > MAX_LEAD:
            raise ConfigError(f"{key} cannot exceed the {MAX_LEAD}-day lead encoding")
    if not values["data.dt"] > 0:
        raise ConfigError("data.dt must be positive")
    if not 1 <= values["eval.lead_first"] <= values["eval.lead_last"] <= values["eval.horizon"]:
        raise ConfigError("need 1 <= eval.lead_first <= eval.lead_last <= eval.horizon")
    if values["model.kind"] == "patch_transformer":
        for axis in ("n_lat", "n_lon"):
            if values["data.system"] == "channel" and values[f"data.{axis}"] % values["model.patch"]:
                raise ConfigError(f"data.{axis} must be a multiple of model.patch")
        if values["data.system"] == "l63":
            raise ConfigError("the l63 system needs model.kind = mlp")
    for key in ("train.stage2_lr", "train.stage3_lr"):
        if len(values[key]) != 2:
            raise ConfigError(f"{key} needs two values: peak,minimum")
    selected_metrics(values)
    for key in ("linear.depths",):
        if any(v < 1 or v != int(v) for v in values[key]):
            raise ConfigError(f"{key} must hold positive integers")


def render(values):
    """The resolved mapping in the file format, one sorted key per line."""
    return "".join(f"{k} = {_format_value(values[k])}\n" for k in sorted(values))


def _build(cls, prefix, values, **extra):
    kwargs = {f.name: values[f"{prefix}.{f.name}"] for f in fields(cls) if f"{prefix}.{f.name}" in values}
    return cls(**kwargs, **extra)


def data_config(values):
    return _build(DataConfig, "data", values, seed=values["run.seed"])


def model_config(values):
    return _build(ModelConfig, "model", values)


def train_config(values):
    return replace(_build(TrainConfig, "train", values), stage2_lr=tuple(values["train.stage2_lr"]), stage3_lr=tuple(values["train.stage3_lr"]))


def eval_config(values):
    return _build(EvalConfig, "eval", values)
