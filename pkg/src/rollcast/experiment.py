"""Desk-scale ablation harness on the seasonally forced channel system.

One call trains, from the same initialisation and data, a three-stage model
(keeping every stage snapshot), a single-stage 42-day baseline with the same
step-work budget and a stage-3 variant that fine-tunes every weight, then
scores all of them on the held-out years.
"""
from dataclasses import dataclass, field, replace

import numpy as np

from .dynamics import GridSpec, simulate_channel, simulate_l63, split_dataset
from .dynamics.grid import DAYS_PER_YEAR
from .forecaster import BackboneConfig, create_adapter_bank, model_init
from .metrics import cka_rollout_curve, divergence_monitor, forecast_anomalies, latitude_weights, skill_curves
from .training import StageConfig, StagePlan, TrainingData, naive_stage, run_multistage, train_naive_baseline, train_stage


@dataclass(frozen=True)
class DataConfig:
    system: str = "channel"  # channel | l63
    n_lat: int = 16
    n_lon: int = 32
    forcing: float = 8.0
    seasonal_amplitude: float = 2.0
    dt: float = 0.01
    steps_per_day: int = 1
    spinup_days: int = 180
    train_years: int = 10
    test_years: int = 2
    window: int = 11
    seed: int = 0

    @property
    def grid(self):
        if self.system == "l63":
            return GridSpec(1, 1, (0.0,), 3)
        return GridSpec.uniform(self.n_lat, self.n_lon)


@dataclass(frozen=True)
class ModelConfig:
    kind: str = "patch_transformer"
    width: int = 32
    depth: int = 2
    patch: int = 4
    init_gain: float = 1.0
    adapter_ratio: float = 0.04
    adapter_tol: float = 0.01


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    stage1_epochs: int = 20
    stage2_epochs: int = 2
    stage3_epochs: int = 1
    stage1_lr: float = 1e-4
    stage2_lr: tuple = (2e-6, 1e-6)
    stage3_lr: tuple = (2e-6, 1e-6)
    stage1_max_steps: int = 0
    stage2_max_steps: int = 0
    stage3_max_steps: int = 0
    naive_lr: float = 1e-4
    warmup_fraction: float = 0.05
    grad_clip: float = 0.0
    weight_decay: float = 0.0

    def plan(self, full_ft=False):
        common = dict(batch_size=self.batch_size, warmup_fraction=self.warmup_fraction, grad_clip=self.grad_clip, weight_decay=self.weight_decay)
        return StagePlan(
            (
                StageConfig(1, 1, lr_kind="constant", lr_peak=self.stage1_lr, lr_min=self.stage1_lr, epochs=self.stage1_epochs, max_steps=self.stage1_max_steps, **common),
                StageConfig(2, 7, lr_kind="cosine", lr_peak=self.stage2_lr[0], lr_min=self.stage2_lr[1], epochs=self.stage2_epochs, max_steps=self.stage2_max_steps, **common),
                StageConfig(3, 42, lr_kind="cosine", lr_peak=self.stage3_lr[0], lr_min=self.stage3_lr[1], epochs=self.stage3_epochs, max_steps=self.stage3_max_steps, full_ft=full_ft, **common),
            )
        )


@dataclass(frozen=True)
class EvalConfig:
    horizon: int = 42
    stride: int = 1
    lead_first: int = 15
    lead_last: int = 42


# Desk preset: rates are raised over the full-scale values because at this
# size a 2e-6 peak barely moves the weights within the step budget.
DESK_TRAIN = TrainConfig(
    batch_size=32,
    stage1_epochs=6,
    stage2_epochs=1,
    stage3_epochs=1,
    stage1_lr=1e-3,
    stage2_lr=(1e-4, 5e-5),
    stage3_lr=(1e-3, 5e-4),
    stage3_max_steps=40,
    naive_lr=1e-3,
)


def generate(data):
    """Simulate the configured system and split it; returns ``(trajectory, Split)``."""
    years = data.train_years + data.test_years
    if data.system == "channel":
        traj = simulate_channel(
            data.grid, F0=data.forcing, A=data.seasonal_amplitude, dt=data.dt, n_days=years * DAYS_PER_YEAR,
            seed=data.seed, steps_per_day=data.steps_per_day, spinup_days=data.spinup_days,
        )
    elif data.system == "l63":
        rng = np.random.default_rng(data.seed)
        y0 = np.array([1.0, 1.0, 1.0]) + 0.01 * rng.standard_normal(3)
        spin = simulate_l63(y0=tuple(y0), dt=data.dt, n_steps=data.spinup_days * data.steps_per_day, record_every=data.steps_per_day)
        traj = simulate_l63(y0=tuple(spin.states[-1].ravel()), dt=data.dt, n_steps=years * DAYS_PER_YEAR * data.steps_per_day, record_every=data.steps_per_day)
        traj = traj.slice(0, years * DAYS_PER_YEAR)
    else:
        raise ValueError(f"unknown system {data.system!r}")
    split = split_dataset(traj, (1, data.train_years), (data.train_years + 1, years), window=data.window)
    return traj, split


def prepare(split):
    train = TrainingData.from_trajectory(split.train, split.climatology)
    test = TrainingData.from_trajectory(split.test, split.climatology, anom_scale=train.anom_scale)
    return train, test


def backbone_for(model, grid, train):
    """Backbone config with input/output scalings measured on the training states."""
    increments = np.diff(train.states, axis=0)
    return BackboneConfig(
        model.kind, grid.n_vars, grid.n_lat, grid.n_lon, width=model.width, depth=model.depth, patch=model.patch,
        init_gain=model.init_gain, center=float(train.states.mean()), scale=float(train.states.std()), out_scale=float(increments.std()),
    )


@dataclass
class ModelScore:
    pcc: np.ndarray
    tcc: np.ndarray
    cka: np.ndarray

    def mean_pcc(self, first, last):
        return float(np.mean(self.pcc[first - 1 : last]))


def score_model(params, bank, test, grid, evaluation, run_id=""):
    pred, true = forecast_anomalies(params, bank, test, evaluation.horizon, evaluation.stride)
    series = skill_curves(pred, true, latitude_weights(grid.latitudes), run_id)
    cka = cka_rollout_curve(params, bank, test, evaluation.horizon, evaluation.stride, run_id=run_id)
    return ModelScore(series[0].values, series[1].values, cka.values)


@dataclass
class DeskResult:
    seed: int
    scores: dict  # label -> ModelScore
    records: dict  # label -> TrainRecord
    reports: dict  # label -> StabilityReport
    budget: int
    naive_work: int
    evaluation: EvalConfig = field(default_factory=EvalConfig)

    def mean_pcc(self, label):
        return self.scores[label].mean_pcc(self.evaluation.lead_first, self.evaluation.lead_last)

    def cka_at(self, label, lead=42):
        return float(self.scores[label].cka[lead - 1])


def run_desk_experiment(seed, data=None, model=None, train=None, evaluation=None, progress=None):
    data = replace(data or DataConfig(), seed=seed)
    model = model or ModelConfig()
    train = train or DESK_TRAIN
    evaluation = evaluation or EvalConfig()
    _, split = generate(data)
    train_data, test_data = prepare(split)
    config = backbone_for(model, data.grid, train_data)
    params0 = model_init(config, seed)
    bank0 = create_adapter_bank(config, seed, model.adapter_ratio, model.adapter_tol)

    plan = train.plan()
    multi = run_multistage(plan, train_data, params0, bank0, seed=seed, progress=progress)
    budget = sum(r.work for r in multi.records)
    stage = naive_stage(budget, 42, train.batch_size, train.naive_lr, train.naive_lr, grad_clip=train.grad_clip)
    naive_params, naive_record = train_naive_baseline(train_data, params0, stage=stage, seed=seed, progress=progress)
    stage3_full = replace(plan.stages[2], full_ft=True)
    s2_params, _ = multi.snapshots[2]
    full_params, full_bank, full_record = train_stage(stage3_full, train_data, s2_params, bank0, seed=seed, label="stage3_full", progress=progress)

    models = {
        "stage1": multi.snapshots[1],
        "stage2": multi.snapshots[2],
        "stage3": multi.snapshots[3],
        "naive": (naive_params, None),
        "stage3_full": (full_params, full_bank),
    }
    scores = {k: score_model(p, b, test_data, data.grid, evaluation, run_id=f"{k}-seed{seed}") for k, (p, b) in models.items()}
    records = {"stage1": multi.records[0], "stage2": multi.records[1], "stage3": multi.records[2], "naive": naive_record, "stage3_full": full_record}
    reports = {k: divergence_monitor(r) for k, r in records.items() if len(r)}
    return DeskResult(seed, scores, records, reports, budget, naive_record.work, evaluation)
