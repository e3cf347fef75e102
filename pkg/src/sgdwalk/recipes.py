"""Experiment recipes: named end-to-end runs that emit CSV artifacts.

Each recipe is a function (config, context, dataset) -> extras dict. The
context provides the output directory and phase timing; the runner hashes
whatever files the recipe leaves behind. Learning rates default to
self-tuning: the largest grid value that finishes its probe run without
diverging and improves the full-dataset loss. Whatever rate wins is
recorded in the run manifest.
"""

import csv
import math

import numpy as np

from .config import ConfigError, derive_seed
from .curvature import spectral_norm, write_curvature_csv
from .data import SamplerConfig, full_batch, load_idx, synth_blobs
from .interpolate import slice_all, write_interp_csv
from .metrics import (
    cosine,
    distance_from_init,
    epoch_summaries,
    fmt,
    param_norm,
    smoothed_series,
    write_epochs_csv,
    write_trajectory_csv,
)
from .mlp import MlpSpec, NonFiniteError, accuracy, forward_loss, init_params
from .optim import (
    DivergenceError,
    NoiseConfig,
    Schedule,
    TrainConfig,
    freeze_noise_scale,
    save_trajectory,
    train,
)
from .quadratic import contraction_rate, damping_class, write_rates_csv

RECIPES = {}

HEIGHT_VS_LR_HEADER = ["variant", "lr", "epoch", "mean_height", "height_sem"]
COSINE_STUDY_HEADER = ["series", "kind", "batch_size", "lr", "t", "cosine", "smoothed"]
ISO_NOISE_HEADER = [
    "variant", "factor", "sigma2", "final_full_loss", "final_accuracy",
    "end_distance", "end_param_norm",
]
SCHEDULES_HEADER = ["t", "stepwise", "cyclical", "trapezoid"]
SCHEDULE_COMPARE_HEADER = ["variant", "final_full_loss", "final_accuracy"]


def recipe(name, needs_data=True):
    def register(fn):
        RECIPES[name] = (fn, needs_data)
        return fn
    return register


def build_dataset(cfg):
    if cfg.source == "idx":
        return load_idx(cfg.images, cfg.labels, limit=cfg.limit)
    return synth_blobs(
        seed=derive_seed(cfg.master_seed, "data"),
        n_per_class=cfg.per_class,
        num_classes=cfg.classes,
        dim=cfg.dim,
        separation=cfg.separation,
    )


def build_val_dataset(cfg, fallback):
    """Held-out data for accuracy tracking; falls back to the training set."""
    if cfg.source == "idx":
        if cfg.val_images and cfg.val_labels:
            return load_idx(cfg.val_images, cfg.val_labels, limit=cfg.limit)
        return fallback
    return synth_blobs(
        seed=derive_seed(cfg.master_seed, "val-data"),
        n_per_class=cfg.val_per_class,
        num_classes=cfg.classes,
        dim=cfg.dim,
        separation=cfg.separation,
    )


def model_spec(cfg, dataset):
    sizes = (dataset.features.shape[1],) + tuple(cfg.hidden) + (dataset.num_classes,)
    return MlpSpec(
        layer_sizes=sizes,
        init_seed=derive_seed(cfg.master_seed, "init"),
        init_scale=cfg.init_scale,
    )


def schedule_from_cfg(cfg, rate):
    if cfg.schedule == "constant":
        return Schedule.constant(rate)
    if cfg.schedule == "stepwise":
        return Schedule.stepwise(rate, cfg.decay, cfg.period)
    if cfg.schedule == "cyclical":
        return Schedule.cyclical(cfg.lr_min, rate, cfg.half_cycle)
    return Schedule.trapezoid(cfg.lr_min, rate, cfg.ramp_up, cfg.plateau,
                              cfg.ramp_down)


def tune_constant_lr(cfg, spec, dataset, batch_size, noise=None, probe_updates=30):
    """Largest grid rate whose probe run finishes and improves the full loss."""
    whole = full_batch(dataset)
    initial = forward_loss(spec, init_params(spec), whole)
    sampler = SamplerConfig(batch_size, derive_seed(cfg.master_seed, "shuffle"),
                            drop_last=True)
    full_mode = batch_size == dataset.n or (noise is not None)
    iters = 1 if full_mode else dataset.n // batch_size
    epochs = max(1, math.ceil(probe_updates / iters))
    for rate in sorted(set(cfg.lr_grid), reverse=True):
        probe = TrainConfig(
            spec=spec, sampler=sampler, schedule=Schedule.constant(rate),
            noise=noise or NoiseConfig(), epochs=epochs,
            eval_period_epochs=epochs,
        )
        try:
            log = train(probe, dataset)
            final = forward_loss(spec, log.theta_final, whole)
        except (DivergenceError, NonFiniteError):
            continue
        if math.isfinite(final) and final < initial:
            return rate
    raise ConfigError("no learning rate in lr_grid trains stably; set [optim] lr")


def pick_lr(cfg, spec, dataset, batch_size, noise=None):
    if cfg.lr > 0:
        return cfg.lr, False
    if cfg.schedule != "constant":
        raise ConfigError(f"{cfg.schedule} schedule needs an explicit lr")
    return tune_constant_lr(cfg, spec, dataset, batch_size, noise=noise), True


def run_training(cfg, spec, dataset, rate, *, batch_size, epochs, schedule=None,
                 noise=None, drop_last=False, record_full_gradient_cosine=False):
    sampler = SamplerConfig(batch_size, derive_seed(cfg.master_seed, "shuffle"),
                            drop_last)
    config = TrainConfig(
        spec=spec,
        sampler=sampler,
        schedule=schedule if schedule is not None else schedule_from_cfg(cfg, rate),
        noise=noise or NoiseConfig(),
        epochs=epochs,
        eval_period_epochs=cfg.eval_period,
        record_full_gradient_cosine=record_full_gradient_cosine,
    )
    return train(config, dataset)


def epochs_or(cfg, fallback):
    return cfg.epochs if cfg.was_set("optim", "epochs") else fallback


def parse_slice_epochs(text, total_epochs):
    if text.strip() == "all":
        return list(range(total_epochs))
    chosen = set()
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if part == "first":
            chosen.add(0)
        elif part == "last":
            chosen.add(total_epochs - 1)
        else:
            try:
                epoch = int(part)
            except ValueError as exc:
                raise ConfigError(f"bad slice_epochs entry {part!r}") from exc
            if not 0 <= epoch < total_epochs:
                raise ConfigError(
                    f"slice_epochs entry {epoch} outside [0, {total_epochs})"
                )
            chosen.add(epoch)
    return sorted(chosen)


@recipe("walk-gd")
def walk_gd(cfg, ctx, dataset):
    """Full-batch descent with first-segment slices, cosines, distances."""
    spec = model_spec(cfg, dataset)
    iterations = epochs_or(cfg, 80)
    with ctx.phase("tune"):
        rate, tuned = pick_lr(cfg, spec, dataset, dataset.n)
    with ctx.phase("train"):
        log = run_training(cfg, spec, dataset, rate,
                           batch_size=dataset.n, epochs=iterations)
    with ctx.phase("slice"):
        slices = slice_all(log, spec, dataset, 0, min(40, log.num_iterations),
                           workers=cfg.workers)
    with ctx.phase("write"):
        write_trajectory_csv(log, ctx.path("trajectory.csv"))
        write_interp_csv(slices, ctx.path("interp.csv"))
    return {"lr": rate, "lr_tuned": tuned, "iterations": iterations}


def _sgd_walk_common(cfg, ctx, dataset, default_epochs, slice_spec):
    spec = model_spec(cfg, dataset)
    epochs = epochs_or(cfg, default_epochs)
    with ctx.phase("tune"):
        rate, tuned = pick_lr(cfg, spec, dataset, cfg.batch_size)
    with ctx.phase("train"):
        log = run_training(cfg, spec, dataset, rate,
                           batch_size=cfg.batch_size, epochs=epochs)
    iters = log.metadata["iters_per_epoch"]
    slice_epoch_list = parse_slice_epochs(slice_spec, epochs)
    slices = []
    with ctx.phase("slice"):
        for epoch in slice_epoch_list:
            start = epoch * iters
            stop = min((epoch + 1) * iters, log.num_iterations)
            slices.extend(slice_all(log, spec, dataset, start, stop,
                                    workers=cfg.workers))
    with ctx.phase("write"):
        write_trajectory_csv(log, ctx.path("trajectory.csv"))
        write_interp_csv(slices, ctx.path("interp.csv"))
        summaries = epoch_summaries(slices, log, iters,
                                    significance_rel=cfg.significance_rel)
        write_epochs_csv(summaries, ctx.path("epochs.csv"))
        save_trajectory(log, ctx.path("trajectory.bin"))
    return {
        "lr": rate, "lr_tuned": tuned, "epochs": epochs,
        "iters_per_epoch": iters, "sliced_epochs": slice_epoch_list,
    }


@recipe("walk-sgd")
def walk_sgd(cfg, ctx, dataset):
    """Minibatch descent; slices for the first and last epochs by default."""
    return _sgd_walk_common(cfg, ctx, dataset, 6, cfg.slice_epochs)


@recipe("barrier-census")
def barrier_census(cfg, ctx, dataset):
    """Slice every update of every epoch and count interpolation barriers."""
    return _sgd_walk_common(cfg, ctx, dataset, 10, "all")


@recipe("height-vs-lr")
def height_vs_lr(cfg, ctx, dataset):
    """Same run at a tuned rate and at half that rate; per-epoch heights."""
    spec = model_spec(cfg, dataset)
    epochs = epochs_or(cfg, 3)
    with ctx.phase("tune"):
        rate, tuned = pick_lr(cfg, spec, dataset, cfg.batch_size)
    summary_rows = []
    for name, factor in (("full_lr", 1.0), ("half_lr", 0.5)):
        variant_rate = rate * factor
        with ctx.phase(f"train-{name}"):
            log = run_training(cfg, spec, dataset, variant_rate,
                               batch_size=cfg.batch_size, epochs=epochs)
        iters = log.metadata["iters_per_epoch"]
        with ctx.phase(f"slice-{name}"):
            slices = slice_all(log, spec, dataset, 0, log.num_iterations,
                               workers=cfg.workers)
        summaries = epoch_summaries(slices, log, iters,
                                    significance_rel=cfg.significance_rel)
        write_trajectory_csv(log, ctx.path(f"{name}/trajectory.csv"))
        write_interp_csv(slices, ctx.path(f"{name}/interp.csv"))
        write_epochs_csv(summaries, ctx.path(f"{name}/epochs.csv"))
        for row in summaries:
            summary_rows.append([name, fmt(variant_rate), row.epoch,
                                 fmt(row.mean_height), fmt(row.height_sem)])
    with open(ctx.path("height_vs_lr.csv"), "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(HEIGHT_VS_LR_HEADER)
        writer.writerows(summary_rows)
    return {"lr": rate, "lr_tuned": tuned, "epochs": epochs}


@recipe("cosine-study")
def cosine_study(cfg, ctx, dataset):
    """Consecutive-gradient cosines across a batch-size grid and an lr grid.

    All series share the update budget and the starting point. The rate is
    tuned on the smallest batch size so every series stays stable.
    """
    spec = model_spec(cfg, dataset)
    budget = cfg.budget_updates
    sizes = []
    for part in cfg.batch_grid.split(","):
        part = part.strip()
        if not part:
            continue
        if part == "full":
            sizes.append(dataset.n)
        else:
            try:
                sizes.append(int(part))
            except ValueError as exc:
                raise ConfigError(f"bad batch_grid entry {part!r}") from exc
    if not sizes:
        raise ConfigError("batch_grid is empty")
    for size in sizes:
        if not 1 <= size <= dataset.n:
            raise ConfigError(f"batch_grid size {size} outside [1, {dataset.n}]")
    smallest = min(sizes)
    with ctx.phase("tune"):
        rate, tuned = pick_lr(cfg, spec, dataset, smallest)

    series = [(f"batch-{size}", "batch", size, rate) for size in sizes]
    series.append((f"lr-x{cfg.lr_factor}", "lr", smallest, rate * cfg.lr_factor))

    rows = []
    for name, kind, size, series_rate in series:
        iters = 1 if size == dataset.n else dataset.n // size
        epochs = max(1, math.ceil(budget / iters))
        with ctx.phase(f"train-{name}"):
            log = run_training(cfg, spec, dataset, series_rate,
                               batch_size=size, epochs=epochs, drop_last=True)
        count = min(budget, log.num_iterations)
        raw = []
        for t in range(1, count):
            raw.append(cosine(log.grad_at(t - 1), log.grad_at(t)))
        defined = np.array([v for v in raw if v is not None])
        window = max(1, min(cfg.smooth_window, len(defined)))
        smoothed = smoothed_series(defined, window)
        j = 0
        for t, value in enumerate(raw, start=1):
            if value is None:
                rows.append([name, kind, size, fmt(series_rate), t, "", ""])
            else:
                rows.append([name, kind, size, fmt(series_rate), t,
                             fmt(value), fmt(smoothed[j])])
                j += 1
    with ctx.phase("write"):
        with open(ctx.path("cosine_study.csv"), "w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(COSINE_STUDY_HEADER)
            writer.writerows(rows)
    return {"lr": rate, "lr_tuned": tuned, "budget_updates": budget,
            "batch_sizes": sizes}


@recipe("iso-noise")
def iso_noise(cfg, ctx, dataset):
    """Full-batch descent against the same descent plus isotropic noise.

    The noise variance per coordinate is the configured factor times the
    largest per-coordinate gradient variance at the starting point, frozen
    there for the whole run. The second variant halves the factor.
    """
    spec = model_spec(cfg, dataset)
    updates = cfg.budget_updates
    factor = cfg.noise_factor if cfg.noise.startswith("iso") else 0.1
    noise_seed = derive_seed(cfg.master_seed, "noise")
    theta0 = init_params(spec)
    with ctx.phase("freeze"):
        base = freeze_noise_scale(spec, theta0, dataset,
                                  NoiseConfig("isotropic", 1.0, noise_seed))
    variants = [("gd", None)]
    for fct in (factor, factor / 2.0):
        noise = NoiseConfig("isotropic", fct, noise_seed,
                            sigma2=fct * base.sigma2)
        variants.append((f"iso-{fct:g}", noise))
    with ctx.phase("tune"):
        rate, tuned = pick_lr(cfg, spec, dataset, dataset.n,
                              noise=variants[1][1])

    whole = full_batch(dataset)
    rows = []
    for name, noise in variants:
        with ctx.phase(f"train-{name}"):
            log = run_training(cfg, spec, dataset, rate,
                               batch_size=dataset.n, epochs=updates,
                               noise=noise)
        write_trajectory_csv(log, ctx.path(f"{name}/trajectory.csv"))
        rows.append([
            name,
            fmt(noise.factor if noise else 0.0),
            fmt(noise.sigma2 if noise else 0.0),
            fmt(forward_loss(spec, log.theta_final, whole)),
            fmt(accuracy(spec, log.theta_final, whole)),
            fmt(distance_from_init(log.theta_final, log.theta0)),
            fmt(param_norm(log.theta_final)),
        ])
    with open(ctx.path("iso_noise.csv"), "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(ISO_NOISE_HEADER)
        writer.writerows(rows)
    return {"lr": rate, "lr_tuned": tuned, "updates": updates,
            "sigma2_base": base.sigma2, "factors": [factor, factor / 2.0]}


@recipe("spectral-track")
def spectral_track(cfg, ctx, dataset):
    """Hessian spectral norm and held-out accuracy along an SGD run."""
    spec = model_spec(cfg, dataset)
    epochs = epochs_or(cfg, 6)
    val = build_val_dataset(cfg, dataset)
    val_batch = full_batch(val)
    with ctx.phase("tune"):
        rate, tuned = pick_lr(cfg, spec, dataset, cfg.batch_size)
    with ctx.phase("train"):
        log = run_training(cfg, spec, dataset, rate,
                           batch_size=cfg.batch_size, epochs=epochs)
    iters = log.metadata["iters_per_epoch"]
    power_seed = derive_seed(cfg.master_seed, "power")
    tracked = list(range(0, epochs, cfg.period_epochs)) + [epochs]
    rows = []
    with ctx.phase("spectral"):
        for epoch in tracked:
            params = log.theta_at(min(epoch * iters, log.num_iterations))
            estimate = spectral_norm(spec, dataset, params,
                                     max_iters=cfg.power_iters,
                                     tol=cfg.power_tol, seed=power_seed)
            rows.append((epoch, estimate, accuracy(spec, params, val_batch)))
    with ctx.phase("write"):
        write_trajectory_csv(log, ctx.path("trajectory.csv"))
        write_curvature_csv(rows, ctx.path("curvature.csv"))
    return {"lr": rate, "lr_tuned": tuned, "epochs": epochs,
            "tracked_epochs": tracked}


@recipe("quad-rates", needs_data=False)
def quad_rates(cfg, ctx, dataset):
    """Contraction rate |1 - eta * lambda| over an (eta, lambda) grid."""
    del dataset
    count = int(math.floor((cfg.eta_stop - cfg.eta_start) / cfg.eta_step + 1e-9)) + 1
    etas = [cfg.eta_start + k * cfg.eta_step for k in range(count)]
    rows = []
    with ctx.phase("grid"):
        for lam in cfg.lambdas:
            for eta in etas:
                rows.append((lam, eta, contraction_rate(lam, eta),
                             damping_class(lam, eta)))
        write_rates_csv(rows, ctx.path("rates.csv"))
    return {"lambdas": list(cfg.lambdas), "eta_count": len(etas)}


@recipe("schedule-compare")
def schedule_compare(cfg, ctx, dataset):
    """Stepwise vs cyclical vs trapezoid schedules at one tuned peak rate."""
    spec = model_spec(cfg, dataset)
    budget = cfg.budget_updates
    with ctx.phase("tune"):
        rate, tuned = pick_lr(cfg, spec, dataset, cfg.batch_size)
    iters = (1 if cfg.batch_size == dataset.n
             else dataset.n // cfg.batch_size)
    epochs = max(1, math.ceil(budget / iters))
    total = epochs * iters
    floor_rate = rate / 10.0
    schedules = {
        "stepwise": Schedule.stepwise(rate, cfg.decay, max(1, total // 3)),
        "cyclical": Schedule.cyclical(floor_rate, rate, max(1, total // 8)),
        "trapezoid": Schedule.trapezoid(floor_rate, rate, max(1, total // 4),
                                        max(1, total // 4), max(1, total // 4)),
    }
    whole = full_batch(dataset)
    summary = []
    lr_columns = {}
    for name, schedule in schedules.items():
        with ctx.phase(f"train-{name}"):
            log = run_training(cfg, spec, dataset, rate, batch_size=cfg.batch_size,
                               epochs=epochs, schedule=schedule, drop_last=True)
        write_trajectory_csv(log, ctx.path(f"{name}/trajectory.csv"))
        lr_columns[name] = [rec.lr for rec in log.records]
        summary.append([
            name,
            fmt(forward_loss(spec, log.theta_final, whole)),
            fmt(accuracy(spec, log.theta_final, whole)),
        ])
    with ctx.phase("write"):
        with open(ctx.path("schedules.csv"), "w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(SCHEDULES_HEADER)
            for t in range(total):
                writer.writerow([t] + [fmt(lr_columns[k][t])
                                       for k in ("stepwise", "cyclical", "trapezoid")])
        with open(ctx.path("schedule_compare.csv"), "w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(SCHEDULE_COMPARE_HEADER)
            writer.writerows(summary)
    return {"lr": rate, "lr_tuned": tuned, "epochs": epochs}
