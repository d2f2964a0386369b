"""Command-line runner: ``rollcast generate | train | evaluate | diagnose | linear-lab``.

Every command resolves its configuration (defaults, ``--config`` file or
manifest, ``--set`` overrides, then ``--seed``/``--out``), writes its files
under the output directory and finishes with a JSON manifest listing the
resolved configuration and the SHA-256 of every input and output file.
Output files carry no timestamps or paths, so repeating a command from its
manifest reproduces them byte for byte.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 divergence.
"""
import argparse
import hashlib
import json
import sys
import time
import warnings
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__, config as cfg
from ._accel import backend_name
from .dynamics import ClimatologyTable, TrajectoryFormatError, read_trajectory, write_trajectory
from .experiment import backbone_for, generate
from .forecaster import AdapterBank, BackboneConfig, ModelParams, create_adapter_bank, model_init, param_shapes
from .linear_lab import (
    LinearLabConfig, frontier, frontier_is_monotone, gradient_bound_sweep, run_gd, shrink_target, stability_sweep,
    write_bound_csv, write_phase_csv,
)
from .metrics import (
    DegenerateSampleWarning, MetricSeries, cka_rollout_curve, divergence_monitor, evaluation_starts, forecast_anomalies,
    growth_slope, jacobian_growth, latitude_weights, metric_pcc, model_lyapunov, skill_curves, write_metric_csv,
)
from .tensor import CheckpointError, read_checkpoint, write_checkpoint
from .training import DivergenceError, TrainingData, TrainRecord, naive_stage, save_model, train_naive_baseline, train_stage

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4


class DataError(RuntimeError):
    """Missing, malformed or mismatched input files."""


# ---------------------------------------------------------------- helpers
def sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Run:
    """Output bookkeeping shared by the commands."""

    def __init__(self, command, values, args, subdir):
        self.command = command
        self.values = values
        self.args = args
        self.root = Path(values["run.out"])
        self.dir = self.root / subdir
        self.inputs = {}
        self.outputs = {}
        self.started = time.perf_counter()

    def claim(self, *names):
        """Paths for the outputs ``names``; refuses to clobber without ``--force``."""
        paths = [self.dir / n for n in names]
        existing = [str(p) for p in paths if p.exists()]
        if existing and not self.args.force:
            raise cfg.ConfigError(f"output exists: {', '.join(existing)} (use --force to overwrite)")
        self.dir.mkdir(parents=True, exist_ok=True)
        return paths if len(paths) > 1 else paths[0]

    def need(self, path):
        path = Path(path)
        if not path.is_file():
            raise DataError(f"missing input: expected {path}")
        self.inputs[self._rel(path)] = sha256(path)
        return path

    def wrote(self, *paths):
        for p in paths:
            self.outputs[self._rel(p)] = sha256(p)

    def _rel(self, path):
        path = Path(path)
        try:
            return str(path.resolve().relative_to(self.root.resolve()))
        except ValueError:
            return str(path)

    def manifest(self, name="manifest.json", extra=None):
        path = self.dir / name
        body = {
            "command": self.command,
            "arguments": {k: v for k, v in sorted(vars(self.args).items()) if k not in ("func", "config", "overrides", "force")},
            "artifact_version": __version__,
            "backend": backend_name(),
            "numpy_version": np.__version__,
            "config": {k: cfg._format_value(v) for k, v in sorted(self.values.items())},
            "config_text": cfg.render(self.values),
            "inputs": self.inputs,
            "outputs": self.outputs,
            "wall_clock_seconds": round(time.perf_counter() - self.started, 3),
        }
        if extra:
            body.update(extra)
        self.dir.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
        return path


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _load_trajectory(run, path):
    try:
        traj = read_trajectory(run.need(path))
    except TrajectoryFormatError as exc:
        raise DataError(str(exc)) from None
    if not np.all(np.isfinite(traj.states)):
        raise DataError(f"{path}: contains non-finite values")
    return traj


def _load_split(run, names=("train", "test")):
    data_dir = run.root / "data"
    trajs = {name: _load_trajectory(run, data_dir / f"{name}.rctj") for name in names}
    table = _load_trajectory(run, data_dir / "climatology.rctj")
    if len(table) != 365:
        raise DataError(f"{data_dir / 'climatology.rctj'}: expected 365 days, found {len(table)}")
    for name, traj in trajs.items():
        if traj.grid != table.grid:
            raise DataError(f"{name} trajectory grid {traj.grid.shape} does not match the climatology grid {table.grid.shape}")
    clim = ClimatologyTable(table.grid, table.states, run.values["data.window"])
    return trajs, clim


def _meta_path(checkpoint):
    return Path(checkpoint).with_suffix(".json")


def save_checkpoint(run, path, params, bank, meta):
    save_model(path, params, bank)
    meta = dict(meta)
    meta["backbone"] = asdict(params.config)
    meta["seed"] = params.seed
    meta["adapters"] = None if bank is None else {"bottleneck": bank.bottleneck, "n_sets": bank.n_sets}
    meta_path = _meta_path(path)
    _write_json(meta_path, meta)
    run.wrote(path, meta_path)


def load_checkpoint(run, path):
    """``(params, bank, meta)`` from a checkpoint and its JSON sidecar."""
    path = run.need(path)
    meta_path = run.need(_meta_path(path))
    try:
        meta = json.loads(meta_path.read_text())
        config = BackboneConfig(**meta["backbone"])
        tensors = read_checkpoint(path)
    except (ValueError, KeyError, TypeError, CheckpointError) as exc:
        raise DataError(f"{path}: unreadable checkpoint or sidecar ({exc})") from None
    backbone = {k: v for k, v in tensors.items() if not k.startswith("adapter/")}
    expected = param_shapes(config)
    if set(backbone) != set(expected) or any(backbone[k].shape != tuple(expected[k]) for k in expected):
        raise DataError(f"{path}: tensors do not match the backbone described in {meta_path}")
    params = ModelParams(config, int(meta["seed"]), backbone)
    bank = None
    if meta.get("adapters"):
        adapters = {k: v for k, v in tensors.items() if k.startswith("adapter/")}
        bank = AdapterBank(int(meta["adapters"]["bottleneck"]), config.n_blocks, config.width, adapters, int(meta["adapters"]["n_sets"]))
        if set(adapters) != {n for s in range(bank.n_sets) for n in bank.set_names(s)}:
            raise DataError(f"{path}: adapter tensors are incomplete")
    return params, bank, meta


def _check_grid(meta_config, grid, checkpoint):
    if (meta_config.n_vars, meta_config.n_lat, meta_config.n_lon) != grid.shape:
        raise DataError(
            f"grid mismatch: checkpoint {checkpoint} expects {(meta_config.n_vars, meta_config.n_lat, meta_config.n_lon)}, data has {grid.shape}"
        )


# ---------------------------------------------------------------- commands
def cmd_generate(values, args):
    run = Run("generate", values, args, "data")
    paths = run.claim("train.rctj", "test.rctj", "climatology.rctj")
    _, split = generate(cfg.data_config(values))
    write_trajectory(paths[0], split.train)
    write_trajectory(paths[1], split.test)
    write_trajectory(paths[2], split.climatology.as_trajectory())
    run.wrote(*paths)
    for p in paths:
        print(f"{run.outputs[run._rel(p)]}  {p}")
    run.manifest()
    return EXIT_OK


def _stage_meta(kind, stage, record, anom_scale):
    return {"kind": kind, "stage": stage, "steps": len(record), "work": record.work, "diverged": record.diverged, "anom_scale": anom_scale}


def cmd_train(values, args):
    naive = args.naive or values["run.experiment"] == "naive"
    if naive and args.stage:
        raise cfg.ConfigError("--stage and --naive are mutually exclusive")
    run = Run("train", values, args, "train")
    trajs, clim = _load_split(run, ("train",))
    data = TrainingData.from_trajectory(trajs["train"], clim)
    model_cfg, train_cfg = cfg.model_config(values), cfg.train_config(values)
    seed = values["run.seed"]
    backbone = backbone_for(model_cfg, trajs["train"].grid, data)
    params0 = model_init(backbone, seed)
    plan = train_cfg.plan()
    if naive:
        return _train_naive(run, data, params0, plan, train_cfg, seed)

    stages = [args.stage] if args.stage else [1, 2, 3]
    names = [f"stage{n}.{ext}" for n in stages for ext in ("rcpt", "json")] + [f"records-stage{n}.csv" for n in stages]
    if 3 in stages:
        names += ["adapters.rcpt"]
    run.claim(*names)
    params = params0
    if stages[0] > 1:
        params, _, _ = load_checkpoint(run, run.dir / f"stage{stages[0] - 1}.rcpt")
        if params.config != backbone:
            raise DataError(f"stage{stages[0] - 1}.rcpt was trained on different data or model settings")
    bank0 = create_adapter_bank(backbone, seed, model_cfg.adapter_ratio, model_cfg.adapter_tol)
    status = EXIT_OK
    for n in stages:
        stage = plan.stages[n - 1]
        try:
            params, bank, record = train_stage(stage, data, params, bank0 if stage.uses_adapters else None, seed=seed)
        except DivergenceError as exc:
            exc.record.write_csv(run.dir / f"records-stage{n}.csv")
            run.wrote(run.dir / f"records-stage{n}.csv")
            print(f"stage {n} diverged: {exc}", file=sys.stderr)
            status = EXIT_DIVERGED
            break
        record.write_csv(run.dir / f"records-stage{n}.csv")
        run.wrote(run.dir / f"records-stage{n}.csv")
        save_checkpoint(run, run.dir / f"stage{n}.rcpt", params, bank, _stage_meta("multistage", n, record, data.anom_scale))
        if bank is not None:
            write_checkpoint(run.dir / "adapters.rcpt", bank.tensors)
            run.wrote(run.dir / "adapters.rcpt")
        print(f"stage {n}: {len(record)} steps, horizon {stage.horizon}, final loss {record.loss[-1]:.6g}")
    run.manifest("manifest.json" if not args.stage else f"manifest-stage{args.stage}.json", {"budget": plan.budget(len(data))})
    return status


def _train_naive(run, data, params0, plan, train_cfg, seed):
    ckpt, meta, records = run.claim("naive.rcpt", "naive.json", "records-naive.csv")
    budget = plan.budget(len(data))
    stage = naive_stage(budget, 42, train_cfg.batch_size, train_cfg.naive_lr, train_cfg.naive_lr, grad_clip=train_cfg.grad_clip)
    params, record = train_naive_baseline(data, params0, stage=stage, seed=seed)
    record.write_csv(records)
    run.wrote(records)
    save_checkpoint(run, ckpt, params, None, _stage_meta("naive", 0, record, data.anom_scale))
    run.manifest("manifest-naive.json", {"budget": budget})
    if record.diverged:
        print(f"naive baseline diverged after {len(record)} steps", file=sys.stderr)
        return EXIT_DIVERGED
    print(f"naive: {len(record)} steps of horizon 42 for budget {budget}, final loss {record.loss[-1]:.6g}")
    return EXIT_OK


def _checkpoint_arg(run, args):
    return Path(args.checkpoint) if args.checkpoint else run.root / "train" / "stage3.rcpt"


def climatology_reference(true_anom, lat_weights, variable_names):
    """PCC rows for the zero-anomaly forecast.

    The correlation is undefined when the forecast anomaly is zero, so every
    sample is excluded and a warning raised; the row reports 0, the skill of
    a forecast that carries no anomaly information.  Returns the series and
    the number of excluded samples.
    """
    T = true_anom.shape[0]
    excluded = 0
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", DegenerateSampleWarning)
        for t in range(T):
            for v in range(true_anom.shape[2]):
                metric_pcc(np.zeros_like(true_anom[t, :, v]), true_anom[t, :, v], lat_weights, lead=t + 1)
    excluded = sum(1 for w in caught if issubclass(w.category, DegenerateSampleWarning))
    series = [MetricSeries("PCC", name, "climatology", np.zeros(T)) for name in variable_names]
    return series, excluded


def cmd_evaluate(values, args):
    run = Run("evaluate", values, args, "eval")
    checkpoint = _checkpoint_arg(run, args)
    params, bank, meta = load_checkpoint(run, checkpoint)
    trajs, clim = _load_split(run, ("test",))
    test = trajs["test"]
    _check_grid(params.config, test.grid, checkpoint)
    run.dir = run.dir / checkpoint.stem
    skill_path, cka_path = run.claim("skill.csv", "cka.csv")
    ev = cfg.eval_config(values)
    metrics = cfg.selected_metrics(values)
    data = TrainingData.from_trajectory(test, clim, anom_scale=meta.get("anom_scale"))
    latw = latitude_weights(test.grid.latitudes)
    run_id = checkpoint.stem
    written = []
    if "pcc" in metrics or "tcc" in metrics:
        pred, true = forecast_anomalies(params, bank, data, ev.horizon, ev.stride)
        series = [s for s in skill_curves(pred, true, latw, run_id) if s.metric.lower() in metrics]
        ref, excluded = climatology_reference(true, latw, sorted({s.variable for s in series}) or ["x"])
        print(f"climatology reference: {excluded} lead/variable cells had every sample excluded (zero forecast anomaly)", file=sys.stderr)
        write_metric_csv(skill_path, series + ref)
        written.append(skill_path)
        for s in series:
            print(f"{s.metric} {s.variable}: lead 1 {s.values[0]:.4f}, mean over leads {ev.lead_first}-{ev.lead_last} {s.mean_over(ev.lead_first, ev.lead_last):.4f}")
    if "cka" in metrics:
        curve = cka_rollout_curve(params, bank, data, ev.horizon, ev.stride, run_id=run_id)
        write_metric_csv(cka_path, [curve])
        written.append(cka_path)
        print(f"CKA at lead {ev.horizon}: {curve.values[-1]:.4f}")
    run.wrote(*written)
    run.manifest()
    return EXIT_OK


def cmd_diagnose(values, args):
    run = Run("diagnose", values, args, "diagnose")
    checkpoint = _checkpoint_arg(run, args)
    params, bank, meta = load_checkpoint(run, checkpoint)
    trajs, clim = _load_split(run, ("test",))
    test = trajs["test"]
    _check_grid(params.config, test.grid, checkpoint)
    run.dir = run.dir / checkpoint.stem
    growth_path, report_path = run.claim("jacobian_growth.csv", "stability.json")
    horizon = values["diagnose.horizon"]
    data = TrainingData.from_trajectory(test, clim, anom_scale=meta.get("anom_scale"))
    starts = evaluation_starts(data, horizon)
    picks = starts[np.linspace(0, len(starts) - 1, values["diagnose.n_starts"]).round().astype(int)]
    x0, aux, _, _ = data.batch(picks, horizon)
    method = values["diagnose.method"]
    curves = np.stack([jacobian_growth(params, bank, x0[i], aux[:, i], method=method) for i in range(len(picks))])
    mean_curve = curves.mean(axis=0)
    with open(growth_path, "w") as fh:
        fh.write("lead_day,log_norm_mean," + ",".join(f"start{int(s)}" for s in picks) + "\n")
        for t in range(horizon):
            fh.write(f"{t + 1},{mean_curve[t]!r}," + ",".join(repr(float(c[t])) for c in curves) + "\n")
    lam = model_lyapunov(params, bank, x0[0], aux[:, 0], method=method)
    report = {
        "checkpoint": checkpoint.name,
        "state_size": params.config.state_size,
        "jacobian_method": method,
        "growth_slope": growth_slope(mean_curve, min(5, horizon), min(30, horizon)) if horizon >= 2 else None,
        "lyapunov_max_per_day": lam,
        "records": {},
    }
    record_dir = checkpoint.parent
    for path in sorted(record_dir.glob("records-*.csv")):
        label = path.stem.removeprefix("records-")
        record = TrainRecord.read_csv(run.need(path), label=label)
        if len(record):
            report["records"][label] = divergence_monitor(record, values["diagnose.window"], values["diagnose.spike_factor"]).as_dict()
    recs = report["records"]
    if "naive" in recs and "stage3" in recs:
        a, b = recs["naive"]["max_loss_jump"], recs["stage3"]["max_loss_jump"]
        report["max_jump_comparison"] = {"naive": a, "stage3": b, "naive_exceeds_stage3": bool(a > b)}
        print(f"max loss jump: naive {a:.6g} vs stage3 {b:.6g}")
    _write_json(report_path, report)
    run.wrote(growth_path, report_path)
    print(f"lambda_max {lam:.6g} per day; growth slope {report['growth_slope']}")
    run.manifest()
    return EXIT_OK


def cmd_linear_lab(values, args):
    run = Run("linear-lab", values, args, "linear")
    d = values["linear.d"]
    trace_path = run.claim("trace.csv")
    tr = run_gd(LinearLabConfig(
        shrink_target(d, values["linear.trace_loss"]), values["linear.trace_depth"],
        max_iter=values["linear.max_iter"], tol=values["linear.tol"], slack=values["linear.slack"],
    ))
    tr.write_csv(trace_path)
    run.wrote(trace_path)
    print(f"trace: L={values['linear.trace_depth']} loss(0)={values['linear.trace_loss']} -> {tr.status} after {tr.iterations} steps")
    if not args.single:
        phase_path, bound_path = run.claim("phase.csv", "bound.csv")
        depths = [int(v) for v in values["linear.depths"]]
        cells = stability_sweep(depths, values["linear.initial_losses"], d, values["linear.slack"], values["linear.max_iter"], values["linear.tol"])
        write_phase_csv(phase_path, cells)
        write_bound_csv(bound_path, gradient_bound_sweep(d, n_samples=values["linear.bound_samples"], seed=values["run.seed"]))
        run.wrote(phase_path, bound_path)
        front = frontier(cells)
        print("frontier: " + ", ".join(f"L={k}: {v:g}" for k, v in front.items()) + f" (monotone: {frontier_is_monotone(front)})")
    run.manifest()
    return EXIT_OK


# ---------------------------------------------------------------- entry point
def build_parser():
    # Shared flags are accepted before or after the subcommand; SUPPRESS keeps
    # the subparser from overwriting a value given at the top level.
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", metavar="PATH", help="config file or a run manifest to replay")
    common.add_argument("--set", dest="overrides", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")
    common.add_argument("--seed", type=int, help="overrides run.seed")
    common.add_argument("--out", metavar="DIR", help="overrides run.out")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")

    parser = argparse.ArgumentParser(prog="rollcast", description=__doc__.splitlines()[0], parents=[common])
    parser.add_argument("--version", action="version", version=f"rollcast {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("generate", parents=[common], help="simulate and split the training system")
    p.set_defaults(func=cmd_generate)
    p = sub.add_parser("train", parents=[common], help="staged training or the naive baseline")
    p.add_argument("--stage", type=int, choices=(1, 2, 3), help="run only this stage, resuming from the previous checkpoint")
    p.add_argument("--naive", action="store_true", help="train the single-stage 42-day baseline at equal budget")
    p.set_defaults(func=cmd_train)
    for name, func, text in (("evaluate", cmd_evaluate, "skill and CKA curves"), ("diagnose", cmd_diagnose, "Jacobian growth, Lyapunov and loss-jump report")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--checkpoint", metavar="PATH", help="defaults to <out>/train/stage3.rcpt")
        p.set_defaults(func=func)
    p = sub.add_parser("linear-lab", parents=[common], help="deep linear gradient-descent experiments")
    p.add_argument("--single", action="store_true", help="only the single traced run")
    p.set_defaults(func=cmd_linear_lab)
    return parser


def _resolve(args):
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"run.seed = {args.seed}")
    if args.out is not None:
        overrides.append(f"run.out = {args.out}")
    return cfg.resolve(args.config, overrides)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    for name, default in (("config", None), ("overrides", []), ("seed", None), ("out", None), ("force", False)):
        if not hasattr(args, name):
            setattr(args, name, default)
    try:
        values = _resolve(args)
        return args.func(values, args)
    except cfg.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
