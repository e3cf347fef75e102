"""End-to-end acceptance gate.

Each test checks one shipping criterion at a pinned tolerance and records a
PASS/FAIL line for the terminal summary. The run fixtures execute the real
recipes at the default desk scale (5000 samples, 1994 parameters, seed 0),
so this module doubles as an integration test of the whole pipeline.
"""

import csv
import statistics

import numpy as np
import pytest

from sgdwalk.config import build_config, derive_seed
from sgdwalk.curvature import (
    full_hessian_bruteforce,
    gauss_newton_residual,
    spectral_norm,
    spectral_norm_from_hvp,
)
from sgdwalk.data import SamplerConfig, full_batch, synth_blobs
from sgdwalk.mlp import MlpSpec, forward_loss, init_params, loss_and_grad
from sgdwalk.optim import Schedule, TrainConfig, gd_step, load_trajectory, train
from sgdwalk.quadratic import QuadSurface, quad_gd_trajectory
from sgdwalk.runner import run_experiment

SEED = 0


def read_rows(path):
    with open(path, newline="") as handle:
        rows = list(csv.reader(handle))
    return rows[0], rows[1:]


@pytest.fixture(scope="module")
def walk_gd_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("acc-walk-gd") / "run"
    return run_experiment(build_config("walk-gd", out, SEED)), out


@pytest.fixture(scope="module")
def walk_sgd_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("acc-walk-sgd") / "run"
    return run_experiment(build_config("walk-sgd", out, SEED)), out


@pytest.fixture(scope="module")
def height_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("acc-height") / "run"
    return run_experiment(build_config("height-vs-lr", out, SEED)), out


@pytest.fixture(scope="module")
def cosine_study_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("acc-cosine") / "run"
    return run_experiment(build_config("cosine-study", out, SEED)), out


@pytest.fixture(scope="module")
def iso_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("acc-iso") / "run"
    return run_experiment(build_config("iso-noise", out, SEED)), out


def test_01_gradient_matches_finite_differences(record_acceptance):
    dataset = synth_blobs(seed=5, n_per_class=15, num_classes=4, dim=10,
                          separation=2.5)
    spec = MlpSpec(layer_sizes=(10, 16, 4), init_seed=9)
    params = init_params(spec)
    batch = full_batch(dataset)
    _, grad = loss_and_grad(spec, params, batch)

    base = np.cbrt(np.finfo(np.float64).eps)
    fd = np.empty_like(params)
    for i in range(params.size):
        h = base * (1.0 + abs(params[i]))
        up = params.copy()
        up[i] += h
        down = params.copy()
        down[i] -= h
        fd[i] = (forward_loss(spec, up, batch)
                 - forward_loss(spec, down, batch)) / (2.0 * h)
    rel = float(np.linalg.norm(grad - fd) / np.linalg.norm(fd))
    ok = rel < 1e-6
    record_acceptance(1, "analytic gradient matches finite differences", ok,
                      f"rel={rel:.2e} tol=1e-06 over {params.size} coords")
    assert ok


def test_02_hessian_decomposition_closes(record_acceptance):
    dataset = synth_blobs(seed=31, n_per_class=10, num_classes=2, dim=4,
                          separation=2.5)
    spec = MlpSpec(layer_sizes=(4, 3, 2), init_seed=7)
    gap, rel = gauss_newton_residual(spec, dataset, init_params(spec))
    ok = rel < 1e-3
    record_acceptance(2, "loss Hessian equals covariance + mean outer + "
                         "probability term", ok,
                      f"rel gap={rel:.2e} tol=1e-03")
    assert ok


def test_03_power_iteration_matches_dense_spectrum(record_acceptance):
    # network route: HVP power iteration vs brute-force dense Hessian
    dataset = synth_blobs(seed=31, n_per_class=10, num_classes=2, dim=4,
                          separation=2.5)
    spec = MlpSpec(layer_sizes=(4, 3, 2), init_seed=7)
    params = init_params(spec)
    estimate = spectral_norm(spec, dataset, params, max_iters=500, tol=1e-5)
    dense = full_hessian_bruteforce(spec, dataset, params)
    expected = float(np.abs(np.linalg.eigvalsh(dense)).max())
    net_rel = abs(estimate.value - expected) / expected

    # synthetic route: extreme eigenvalue negative, exact spectrum known
    rng = np.random.default_rng(12)
    basis = np.linalg.qr(rng.standard_normal((25, 25)))[0]
    eigs = np.linspace(-6.0, 4.0, 25)
    matrix = basis @ np.diag(eigs) @ basis.T
    synth = spectral_norm_from_hvp(lambda v: matrix @ v, 25,
                                   max_iters=500, tol=1e-5, seed=3)
    synth_rel = abs(synth.value - 6.0) / 6.0

    ok = (estimate.converged and net_rel < 1e-3
          and synth.converged and synth_rel < 1e-3)
    record_acceptance(3, "power iteration matches dense eigensolver", ok,
                      f"network rel={net_rel:.2e}, negative-extreme "
                      f"rel={synth_rel:.2e}, tol=1e-03")
    assert ok


def test_04_quadratic_descent_matches_closed_form(record_acceptance):
    lambdas = np.array([0.5, 1.0, 1.5, 2.0, 2.5])
    start = np.array([1.0, -2.0, 0.5, 1.5, 1e-3])
    points = quad_gd_trajectory(QuadSurface(lambdas), 1.0, start, 100)
    worst = 0.0
    for t, x in enumerate(points):
        for j, lam in enumerate(lambdas):
            expected = (1.0 - lam) ** t * start[j]
            err = abs(x[j] - expected)
            if expected != 0.0:
                err /= abs(expected)
            worst = max(worst, err)
    ok = worst < 1e-10
    record_acceptance(4, "quadratic descent follows the closed form in all "
                         "five damping classes", ok,
                      f"worst err={worst:.2e} tol=1e-10 over 100 steps")
    assert ok


def test_05_full_batch_cosine_approaches_minus_one(walk_gd_run,
                                                   record_acceptance):
    _, out = walk_gd_run
    _, rows = read_rows(out / "trajectory.csv")
    cosines = [float(row[4]) for row in rows
               if row[4] != "" and 20 <= int(row[0]) <= 60]
    median = statistics.median(cosines)
    ok = median <= -0.8
    record_acceptance(5, "full-batch descent settles into back-and-forth "
                         "steps", ok,
                      f"median cosine over t in [20,60] = {median:.3f}, "
                      f"required <= -0.8")
    assert ok


def test_06_sgd_travels_farther_than_gd(record_acceptance):
    dataset = synth_blobs(seed=derive_seed(SEED, "data"), n_per_class=500,
                          num_classes=10, dim=20, separation=3.0)
    spec = MlpSpec(layer_sizes=(20, 64, 10), init_seed=derive_seed(SEED, "init"))
    start = init_params(spec)
    shuffle = derive_seed(SEED, "shuffle")
    rate = 1.0

    sgd_log = train(TrainConfig(
        spec=spec,
        sampler=SamplerConfig(16, shuffle, drop_last=True),
        schedule=Schedule.constant(rate),
        epochs=1,
        eval_period_epochs=1,
    ), dataset)
    gd_log = train(TrainConfig(
        spec=spec,
        sampler=SamplerConfig(dataset.n, shuffle),
        schedule=Schedule.constant(rate),
        epochs=sgd_log.num_iterations,
        eval_period_epochs=sgd_log.num_iterations,
    ), dataset)
    assert gd_log.num_iterations == sgd_log.num_iterations

    sgd_dist = float(np.linalg.norm(sgd_log.theta_final - start))
    gd_dist = float(np.linalg.norm(gd_log.theta_final - start))
    ok = sgd_dist > gd_dist
    record_acceptance(6, "minibatch noise carries the walk farther than "
                         "full-batch descent", ok,
                      f"SGD dist={sgd_dist:.2f} vs GD dist={gd_dist:.2f} "
                      f"after {sgd_log.num_iterations} matched updates")
    assert ok


def test_07_early_epoch_slices_are_barrier_free(walk_sgd_run,
                                                record_acceptance):
    manifest, out = walk_sgd_run
    _, rows = read_rows(out / "epochs.csv")
    first = rows[0]
    assert first[0] == "0"
    significant = int(first[4])
    slices = manifest["result"]["iters_per_epoch"]
    limit = 0.02 * slices
    ok = significant <= limit
    record_acceptance(7, "epoch-0 iterate pairs interpolate without "
                         "significant barriers", ok,
                      f"{significant} significant of {slices} slices, "
                      f"allowed <= {limit:g}")
    assert ok


def test_08_smaller_lr_lowers_valley_height(height_run, record_acceptance):
    _, out = height_run
    _, rows = read_rows(out / "height_vs_lr.csv")
    means = {(row[0], row[2]): float(row[3]) for row in rows}
    full = means[("full_lr", "0")]
    half = means[("half_lr", "0")]
    ok = half < full
    record_acceptance(8, "halving the step size lowers epoch-0 valley "
                         "height", ok,
                      f"half_lr mean={half:.3f} < full_lr mean={full:.3f}")
    assert ok


def test_09_batch_size_drives_cosine_gap(cosine_study_run, record_acceptance):
    _, out = cosine_study_run
    _, rows = read_rows(out / "cosine_study.csv")
    values = {}
    kinds = {}
    for row in rows:
        if row[6] == "":
            continue
        values.setdefault(row[0], []).append(float(row[6]))
        kinds[row[0]] = row[1]
    means = {name: statistics.fmean(vals) for name, vals in values.items()}

    batch_means = [means[n] for n in means if kinds[n] == "batch"]
    lr_name = next(n for n in means if kinds[n] == "lr")
    smallest = min((n for n in means if kinds[n] == "batch"),
                   key=lambda n: int(n.split("-")[1]))
    batch_gap = max(batch_means) - min(batch_means)
    lr_gap = abs(means[lr_name] - means[smallest])
    ok = batch_gap >= 3.0 * lr_gap
    record_acceptance(9, "batch size moves the cosine far more than the "
                         "step size", ok,
                      f"batch gap={batch_gap:.3f} vs lr gap={lr_gap:.3f}, "
                      f"required ratio >= 3")
    assert ok


def test_10_gradient_noise_alone_expands_the_walk(iso_run, record_acceptance):
    _, out = iso_run
    _, rows = read_rows(out / "iso_noise.csv")
    summary = {row[0]: (float(row[3]), float(row[5]), float(row[6]))
               for row in rows}
    gd = summary["gd"]
    iso = summary["iso-0.1"]
    ok = iso[0] > gd[0] and iso[1] > gd[1] and iso[2] > gd[2]
    record_acceptance(10, "isotropic gradient noise raises loss, travel, "
                          "and norm over plain descent", ok,
                      f"loss {iso[0]:.2f}>{gd[0]:.2f}, "
                      f"distance {iso[1]:.2f}>{gd[1]:.2f}, "
                      f"norm {iso[2]:.2f}>{gd[2]:.2f}")
    assert ok


def test_11_reruns_are_bitwise_reproducible(walk_gd_run, tmp_path,
                                            record_acceptance):
    manifest, _ = walk_gd_run
    rerun_cfg = build_config("walk-gd", tmp_path / "rerun", SEED,
                             overrides={("walk", "workers"): 2})
    rerun = run_experiment(rerun_cfg)
    ok = rerun["files"] == manifest["files"]
    record_acceptance(11, "a rerun with a different worker count reproduces "
                          "every artifact byte", ok,
                      f"{len(manifest['files'])} artifact checksums compared")
    assert ok


def test_12_interpolation_endpoints_match_training_iterates(
        walk_sgd_run, record_acceptance):
    manifest, out = walk_sgd_run
    config = manifest["config"]
    master = config["master_seed"]
    dataset = synth_blobs(seed=derive_seed(master, "data"),
                          n_per_class=config["per_class"],
                          num_classes=config["classes"],
                          dim=config["dim"],
                          separation=config["separation"])
    spec = MlpSpec(
        layer_sizes=(config["dim"], *config["hidden"], config["classes"]),
        init_seed=derive_seed(master, "init"),
        init_scale=config["init_scale"],
    )
    param_count, _, records = load_trajectory(out / "trajectory.bin")
    assert param_count == spec.param_count
    whole = full_batch(dataset)

    def theta_at(t):
        if t < len(records):
            return records[t][3]
        last_t, lr, _, theta, grad = records[-1]
        assert t == last_t + 1
        return gd_step(theta, grad, lr)

    cache = {}

    def loss_at(t):
        if t not in cache:
            cache[t] = forward_loss(spec, theta_at(t), whole)
        return cache[t]

    _, rows = read_rows(out / "interp.csv")
    checked = 0
    mismatched = 0
    for row in rows:
        alpha = float(row[1])
        if alpha == 0.0:
            expected = loss_at(int(row[0]))
        elif alpha == 1.0:
            expected = loss_at(int(row[0]) + 1)
        else:
            continue
        checked += 1
        if float(row[2]) != expected:
            mismatched += 1

    ok = mismatched == 0 and checked == 200
    record_acceptance(12, "interpolation endpoint losses equal the losses "
                          "of the recorded iterates bitwise", ok,
                      f"{checked} endpoints rebuilt from the manifest and "
                      f"binary trajectory, {mismatched} mismatched")
    assert ok
