"""Per-stage trainer, the staged curriculum driver and the single-stage baseline."""
import csv
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from ..forecaster import AdapterBank, ModelParams, encode_aux, trainable_mask
from ..metrics.skill import latitude_weights
from ..tensor import AdamWState, LrSchedule, NonFiniteGradientError, adamw_step, backward_grad, forward_eval, lr_at, warmup_steps_for, write_checkpoint
from .rollout import TeacherForcingSchedule, build_rollout_graph, flat_weights, rollout_inputs


class DivergenceError(FloatingPointError):
    """Training produced a non-finite loss or gradient; the record is kept."""

    def __init__(self, message, record=None, stage=None):
        super().__init__(message)
        self.record = record
        self.stage = stage
        self.params = None
        self.bank = None


@dataclass
class TrainingData:
    """Flattened daily states aligned with their climatology and calendar."""

    states: np.ndarray  # (N, n)
    clim: np.ndarray  # (N, n)
    days: np.ndarray  # (N,)
    weights: np.ndarray  # (n,)
    anom_scale: float

    @classmethod
    def from_trajectory(cls, traj, climatology, anom_scale=None):
        if climatology.grid != traj.grid:
            raise ValueError("climatology grid does not match the trajectory")
        n = traj.grid.size
        states = traj.states.reshape(len(traj), n)
        clim = climatology.values[traj.doy].reshape(len(traj), n)
        if anom_scale is None:
            anom_scale = float(np.std(states - clim))
        w = flat_weights(latitude_weights(traj.grid.latitudes), traj.grid.n_vars, traj.grid.n_lon)
        return cls(states, clim, traj.days.copy(), w, float(anom_scale))

    def __len__(self):
        return self.states.shape[0]

    def n_starts(self, horizon):
        return len(self) - horizon

    def batch(self, starts, horizon):
        """``x0``, ``aux (T, B, 3)``, observed and climatology ``(T, B, n)``."""
        starts = np.asarray(starts)
        if starts.size and (starts.min() < 0 or starts.max() + horizon >= len(self)):
            raise ValueError(f"window of {horizon + 1} days does not fit the data")
        idx = starts[None, :] + np.arange(1, horizon + 1)[:, None]
        aux = np.stack([encode_aux(self.days[idx[t - 1]], t) for t in range(1, horizon + 1)])
        return self.states[starts], aux, self.states[idx], self.clim[idx]


@dataclass(frozen=True)
class StageConfig:
    stage: int
    horizon: int
    mode: str = "segment"
    period: int = 0
    lr_kind: str = "constant"
    lr_peak: float = 1e-4
    lr_min: float = 1e-4
    warmup_fraction: float = 0.05
    epochs: int = 1
    batch_size: int = 32
    max_steps: int = 0  # 0: no cap beyond the epoch count
    full_ft: bool = False
    weight_decay: float = 0.0
    grad_clip: float = 0.0  # 0: no clipping

    def __post_init__(self):
        if self.stage not in (1, 2, 3):
            raise ValueError(f"stage must be 1, 2 or 3, got {self.stage}")
        if self.epochs < 0 or self.batch_size < 1 or self.max_steps < 0:
            raise ValueError("epochs, batch size and max_steps must be non-negative (batch >= 1)")

    @property
    def schedule(self):
        return TeacherForcingSchedule(self.mode, self.horizon, self.period)

    @property
    def uses_adapters(self):
        return self.stage == 3

    def planned_steps(self, n_starts):
        per_epoch = math.ceil(n_starts / self.batch_size) if n_starts > 0 else 0
        steps = self.epochs * per_epoch
        return min(steps, self.max_steps) if self.max_steps else steps

    def lr_schedule(self, total_steps):
        last = max(total_steps - 1, 0)
        warm = warmup_steps_for(last, self.warmup_fraction) if self.lr_kind == "cosine" else 0
        return LrSchedule(self.lr_kind, self.lr_peak, self.lr_min, last, warm)


@dataclass(frozen=True)
class StagePlan:
    stages: tuple

    def __post_init__(self):
        stages = tuple(self.stages)
        if not stages:
            raise ValueError("a plan needs at least one stage")
        horizons = [s.horizon for s in stages]
        if any(b < a for a, b in zip(horizons, horizons[1:])):
            raise ValueError(f"rollout horizons must be non-decreasing, got {horizons}")
        object.__setattr__(self, "stages", stages)

    @classmethod
    def three_stage(cls, epochs=(20, 2, 1), batch_size=32, peaks=(1e-4, 2e-6, 2e-6), minimums=(1e-4, 1e-6, 1e-6), full_ft=False):
        """The 1 -> 7 -> 42 curriculum: constant rate first, cosine decay after."""
        return cls(
            (
                StageConfig(1, 1, lr_kind="constant", lr_peak=peaks[0], lr_min=minimums[0], epochs=epochs[0], batch_size=batch_size),
                StageConfig(2, 7, lr_kind="cosine", lr_peak=peaks[1], lr_min=minimums[1], epochs=epochs[1], batch_size=batch_size),
                StageConfig(3, 42, lr_kind="cosine", lr_peak=peaks[2], lr_min=minimums[2], epochs=epochs[2], batch_size=batch_size, full_ft=full_ft),
            )
        )

    def budget(self, n_days):
        """Total optimizer steps times rollout length over all stages."""
        return sum(s.planned_steps(n_days - s.horizon) * s.horizon for s in self.stages)


@dataclass
class TrainRecord:
    label: str = ""
    step: list = field(default_factory=list)
    loss: list = field(default_factory=list)
    grad_norm: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    forced_fraction: list = field(default_factory=list)
    wall_time: float = 0.0
    diverged: bool = False
    nonfinite_steps: list = field(default_factory=list)
    horizon: int = 0

    def __len__(self):
        return len(self.step)

    @property
    def work(self):
        """Optimizer steps times rollout length."""
        return len(self) * self.horizon

    def append(self, step, loss, grad_norm, lr, forced_fraction):
        self.step.append(int(step))
        self.loss.append(float(loss))
        self.grad_norm.append(float(grad_norm))
        self.lr.append(float(lr))
        self.forced_fraction.append(float(forced_fraction))

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "loss", "grad_norm", "lr", "forced_fraction"])
            for row in zip(self.step, self.loss, self.grad_norm, self.lr, self.forced_fraction):
                writer.writerow([row[0]] + [repr(v) for v in row[1:]])

    @classmethod
    def read_csv(cls, path, label="", horizon=1):
        record = cls(label=label, horizon=horizon)
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                record.append(int(row["step"]), float(row["loss"]), float(row["grad_norm"]), float(row["lr"]), float(row["forced_fraction"]))
        return record


def _copy_params(params):
    return ModelParams(params.config, params.seed, {k: v.copy() for k, v in params.tensors.items()})


def _copy_bank(bank):
    return None if bank is None else replace(bank, tensors={k: v.copy() for k, v in bank.tensors.items()})


def train_stage(stage, data, params, bank=None, seed=0, label=None, progress=None):
    """Run one stage; returns ``(params, bank, record)`` with fresh copies.

    Every epoch visits every valid start day once in a seeded random order.
    A non-finite loss or gradient raises :class:`DivergenceError` carrying the
    record up to that point.
    """
    schedule = stage.schedule
    record = TrainRecord(label=label or f"stage{stage.stage}", horizon=stage.horizon)
    params = _copy_params(params)
    bank = _copy_bank(bank)
    if stage.uses_adapters and bank is None:
        raise ValueError("stage 3 needs an adapter bank")
    n_starts = data.n_starts(stage.horizon)
    if n_starts < 1 and stage.epochs > 0:
        raise ValueError(f"data has {len(data)} days; stage needs at least {stage.horizon + 1}")
    total = stage.planned_steps(n_starts)
    if total == 0:
        return params, bank, record

    trainable = sorted(trainable_mask(stage.stage, params, bank if stage.uses_adapters else None, stage.full_ft))
    active_bank = bank if stage.uses_adapters else None
    graph = build_rollout_graph(params.config, schedule, active_bank is not None, data.weights, data.anom_scale)
    # Adapter sets for leads beyond the horizon never enter the graph; they stay untouched.
    trainable = [name for name in trainable if name in graph.leaves]
    lr_sched = stage.lr_schedule(total)
    opt = AdamWState(weight_decay=stage.weight_decay)
    rng = np.random.default_rng([int(seed), stage.stage])
    forced_fraction = schedule.forced_fraction
    values = dict(params.tensors)
    if active_bank is not None:
        values.update(active_bank.tensors)

    started = time.perf_counter()
    step = 0
    try:
        while step < total:
            order = rng.permutation(n_starts)
            for lo in range(0, n_starts, stage.batch_size):
                if step >= total:
                    break
                x0, aux, obs, clim = data.batch(order[lo : lo + stage.batch_size], stage.horizon)
                inputs = dict(values)
                inputs.update(rollout_inputs(schedule, x0, aux, obs, clim, data.anom_scale))
                loss = float(forward_eval(graph, inputs)["loss"])
                if not math.isfinite(loss):
                    record.nonfinite_steps.append(step)
                    raise DivergenceError(f"non-finite loss at step {step}", record, stage.stage)
                grads = backward_grad(graph, "loss", wrt=trainable, release=True)
                gnorm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
                if stage.grad_clip and gnorm > stage.grad_clip:
                    grads = {k: g * (stage.grad_clip / gnorm) for k, g in grads.items()}
                lr = lr_at(lr_sched, step)
                try:
                    values, opt = adamw_step(values, grads, opt, lr)
                except NonFiniteGradientError as exc:
                    record.nonfinite_steps.append(step)
                    raise DivergenceError(str(exc), record, stage.stage) from exc
                record.append(step, loss, gnorm, lr, forced_fraction)
                if progress is not None:
                    progress(record)
                step += 1
    except DivergenceError as exc:
        record.diverged = True
        _store(values, params, active_bank)
        exc.params, exc.bank = params, bank
        raise
    finally:
        record.wall_time = time.perf_counter() - started
    _store(values, params, active_bank)
    return params, bank, record


def _store(values, params, bank):
    for name in params.tensors:
        params.tensors[name] = values[name]
    if bank is not None:
        for name in bank.tensors:
            bank.tensors[name] = values[name]


@dataclass
class MultistageResult:
    params: ModelParams
    bank: AdapterBank
    records: list
    snapshots: dict  # stage number -> (params, bank)


def save_model(path, params, bank=None):
    tensors = dict(params.tensors)
    if bank is not None:
        tensors.update(bank.tensors)
    write_checkpoint(path, tensors)


def run_multistage(plan, data, params, bank=None, seed=0, checkpoint_dir=None, progress=None):
    """Chain the stages of ``plan``; every stage's output is snapshotted and optionally saved."""
    records, snapshots = [], {}
    for index, stage in enumerate(plan.stages):
        try:
            params, bank, record = train_stage(stage, data, params, bank, seed=seed, progress=progress)
        except DivergenceError as exc:
            exc.stage = index + 1
            exc.args = (f"stage {index + 1}: {exc.args[0]}",)
            raise
        records.append(record)
        snapshots[stage.stage] = (_copy_params(params), _copy_bank(bank) if stage.uses_adapters else None)
        if checkpoint_dir is not None:
            save_model(f"{checkpoint_dir}/stage{stage.stage}.rcpt", params, bank if stage.uses_adapters else None)
    return MultistageResult(params, bank, records, snapshots)


def naive_stage(budget, horizon=42, batch_size=32, lr_peak=1e-4, lr_min=1e-4, lr_kind="constant", grad_clip=0.0):
    """A single free-rollout stage whose step count matches ``budget`` step-work."""
    steps = max(int(round(budget / horizon)), 0)
    return StageConfig(2, horizon, lr_kind=lr_kind, lr_peak=lr_peak, lr_min=lr_min, epochs=steps, batch_size=batch_size, max_steps=steps, grad_clip=grad_clip)


def train_naive_baseline(data, params, budget=None, horizon=42, stage=None, seed=0, progress=None):
    """Train directly on ``horizon``-step free rollouts with every weight trainable.

    Divergence is recorded on the returned record rather than raised, so an
    ablation can report it.
    """
    if stage is None:
        if budget is None:
            raise ValueError("give either a budget or an explicit stage")
        stage = naive_stage(budget, horizon)
    try:
        params, _, record = train_stage(stage, data, params, None, seed=seed, label="naive", progress=progress)
    except DivergenceError as exc:
        params, record = exc.params, exc.record
    return params, record
