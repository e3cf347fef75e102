"""Plain gradient-descent training with schedules, noise, and an exact log.

The update rule is always ``params - lr * grad``; no momentum, no weight
decay. The trajectory log keeps every iterate and gradient so that the
recurrence ``theta[t+1] = theta[t] - lr[t] * grad[t]`` can be replayed
bit-for-bit. Logs past a configurable size spill to a binary file instead
of holding every vector in memory.

Randomness is keyed: batch order by (shuffle_seed, epoch), noise draws by
(noise_seed, iteration), so any single piece of the run can be reproduced
in isolation.
"""

import hashlib
import math
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .data import epoch_batches, full_batch
from .metrics import cosine
from .mlp import (
    NonFiniteError,
    accuracy,
    forward_loss,
    init_params,
    iter_per_sample_grads,
    loss_and_grad,
)

TRAJECTORY_MAGIC = b"SGDWALK1"

SCHEDULE_KINDS = ("constant", "stepwise", "cyclical", "trapezoid")


class DivergenceError(RuntimeError):
    """Training hit a non-finite loss; carries the last good iteration."""

    def __init__(self, last_good_iteration):
        super().__init__(
            f"non-finite loss; last good iteration was {last_good_iteration}"
        )
        self.last_good_iteration = last_good_iteration


@dataclass(frozen=True)
class Schedule:
    """Learning-rate schedule; build instances through the classmethods."""

    kind: str
    rate: float = 0.0
    rate_min: float = 0.0
    rate_max: float = 0.0
    decay: float = 0.0
    period: int = 0
    half_cycle: int = 0
    ramp_up: int = 0
    plateau: int = 0
    ramp_down: int = 0

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ValueError(f"unknown schedule kind {self.kind!r}")

    @classmethod
    def constant(cls, rate):
        if rate <= 0:
            raise ValueError("constant rate must be positive")
        return cls(kind="constant", rate=float(rate))

    @classmethod
    def stepwise(cls, rate, decay, period):
        if rate <= 0 or not (0 < decay <= 1) or period < 1:
            raise ValueError("stepwise needs rate > 0, 0 < decay <= 1, period >= 1")
        return cls(kind="stepwise", rate=float(rate), decay=float(decay),
                   period=int(period))

    @classmethod
    def cyclical(cls, rate_min, rate_max, half_cycle):
        if rate_min < 0 or rate_max < rate_min or half_cycle < 1:
            raise ValueError(
                "cyclical needs 0 <= rate_min <= rate_max and half_cycle >= 1"
            )
        return cls(kind="cyclical", rate_min=float(rate_min),
                   rate_max=float(rate_max), half_cycle=int(half_cycle))

    @classmethod
    def trapezoid(cls, rate_min, rate_max, ramp_up, plateau, ramp_down):
        if rate_min < 0 or rate_max < rate_min:
            raise ValueError("trapezoid needs 0 <= rate_min <= rate_max")
        if ramp_up < 1 or plateau < 0 or ramp_down < 1:
            raise ValueError("trapezoid ramps need at least 1 iteration")
        return cls(kind="trapezoid", rate_min=float(rate_min),
                   rate_max=float(rate_max), ramp_up=int(ramp_up),
                   plateau=int(plateau), ramp_down=int(ramp_down))


def lr_at(schedule, t):
    """Learning rate at iteration t (t counts from 0)."""
    if t < 0:
        raise ValueError("iteration index must be nonnegative")
    if schedule.kind == "constant":
        return schedule.rate
    if schedule.kind == "stepwise":
        return schedule.rate * schedule.decay ** (t // schedule.period)
    if schedule.kind == "cyclical":
        # triangle wave starting at rate_min, peak at half_cycle; the branch
        # structure keeps the extremes exact instead of lerp-rounded
        span = schedule.rate_max - schedule.rate_min
        phase = t % (2 * schedule.half_cycle)
        if phase == 0:
            return schedule.rate_min
        if phase == schedule.half_cycle:
            return schedule.rate_max
        if phase < schedule.half_cycle:
            return schedule.rate_min + span * phase / schedule.half_cycle
        return schedule.rate_min + span * (2 * schedule.half_cycle - phase) / schedule.half_cycle
    if schedule.kind == "trapezoid":
        span = schedule.rate_max - schedule.rate_min
        if t < schedule.ramp_up:
            return schedule.rate_min + span * t / schedule.ramp_up
        hold_end = schedule.ramp_up + schedule.plateau
        if t <= hold_end:
            return schedule.rate_max
        if t < hold_end + schedule.ramp_down:
            return schedule.rate_max - span * (t - hold_end) / schedule.ramp_down
        return schedule.rate_min
    raise ValueError(f"unknown schedule kind {schedule.kind!r}")


@dataclass(frozen=True)
class NoiseConfig:
    """Gradient noise: 'none', or 'isotropic' with a frozen per-run variance.

    ``sigma2`` is the per-coordinate variance of the injected Gaussian; it is
    set once from the gradient spread at the starting point (see
    ``freeze_noise_scale``) and never re-estimated during the run.
    """

    mode: str = "none"
    factor: float = 0.0
    noise_seed: int = 0
    sigma2: float | None = None

    def __post_init__(self):
        if self.mode not in ("none", "isotropic"):
            raise ValueError(f"unknown noise mode {self.mode!r}")
        if self.mode == "isotropic" and self.factor < 0:
            raise ValueError("noise factor must be nonnegative")


def gd_step(params, grad, lr):
    """One descent update: ``params - lr * grad``."""
    params = np.asarray(params, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if params.shape != grad.shape:
        raise ValueError("parameter and gradient shapes differ")
    if not (lr > 0) or not math.isfinite(lr):
        raise ValueError("learning rate must be positive and finite")
    return params - lr * grad


def freeze_noise_scale(spec, params_init, dataset, noise):
    """Fix sigma2 = factor * max per-coordinate gradient variance at the start.

    Variance is the population variance of per-sample gradients over the full
    dataset, computed in two passes. Returns a new NoiseConfig with sigma2
    filled in.
    """
    if noise.mode != "isotropic":
        raise ValueError("freeze_noise_scale applies to isotropic noise only")
    if dataset.n < 2:
        raise ValueError("need at least 2 samples to estimate gradient variance")
    batch = full_batch(dataset)
    total = np.zeros(spec.param_count)
    for _, _, grads in iter_per_sample_grads(spec, params_init, batch):
        total += grads.sum(axis=0)
    mean = total / dataset.n
    sq = np.zeros(spec.param_count)
    for _, _, grads in iter_per_sample_grads(spec, params_init, batch):
        sq += ((grads - mean) ** 2).sum(axis=0)
    variance = sq / dataset.n
    return replace(noise, sigma2=float(noise.factor * variance.max()))


def isotropic_grad(grad, noise, t):
    """Add N(0, sigma2 * I) to a gradient; draw keyed by (noise_seed, t)."""
    if noise.mode != "isotropic":
        raise ValueError("isotropic_grad requires isotropic noise mode")
    if noise.sigma2 is None:
        raise RuntimeError("noise scale not frozen; call freeze_noise_scale first")
    if t < 0:
        raise ValueError("iteration index must be nonnegative")
    rng = np.random.default_rng([noise.noise_seed, t])
    grad = np.asarray(grad, dtype=np.float64)
    return grad + math.sqrt(noise.sigma2) * rng.standard_normal(grad.shape)


@dataclass(frozen=True)
class TrainConfig:
    spec: object
    sampler: object
    schedule: Schedule
    noise: NoiseConfig = NoiseConfig()
    epochs: int = 1
    eval_period_epochs: int = 1
    record_full_gradient_cosine: bool = False
    spill_path: str | None = None
    spill_cap: int = 100_000

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be nonnegative")
        if self.eval_period_epochs < 1:
            raise ValueError("eval_period_epochs must be at least 1")


@dataclass
class IterationRecord:
    t: int
    theta: np.ndarray | None
    grad: np.ndarray | None
    minibatch_loss: float
    lr: float
    full_loss: float | None = None
    full_accuracy: float | None = None
    full_grad_cosine: float | None = None


@dataclass
class TrajectoryLog:
    """Everything needed to replay a run: (t, theta, grad, loss, lr) records.

    When a run spills, per-record vectors live in the binary trajectory file
    instead of the records; ``theta_at`` transparently reads them back.
    """

    spec: object
    theta0: np.ndarray
    theta_final: np.ndarray
    records: list
    metadata: dict = field(default_factory=dict)
    spill_path: str | None = None

    @property
    def num_iterations(self):
        return len(self.records)

    def _ensure_loaded(self):
        if self.spill_path is None:
            return
        _, _, rows = load_trajectory(self.spill_path)
        if len(rows) != len(self.records):
            raise ValueError("spill file does not match the in-memory log")
        for rec, (t, _, _, theta, grad) in zip(self.records, rows):
            if rec.t != t:
                raise ValueError("spill file iteration order mismatch")
            rec.theta = theta
            rec.grad = grad
        self.spill_path = None

    def theta_at(self, t):
        """Parameter vector before update t; t == num_iterations gives the end."""
        if t < 0 or t > self.num_iterations:
            raise ValueError(f"iteration {t} outside [0, {self.num_iterations}]")
        if t == self.num_iterations:
            return self.theta_final
        self._ensure_loaded()
        return self.records[t].theta

    def grad_at(self, t):
        if t < 0 or t >= self.num_iterations:
            raise ValueError(f"iteration {t} outside [0, {self.num_iterations})")
        self._ensure_loaded()
        return self.records[t].grad


def config_digest(config):
    """SHA-256 over the config's stable repr; 32 raw bytes."""
    return hashlib.sha256(repr(config).encode("utf-8")).digest()


def train(config, dataset):
    """Run plain (S)GD and return the full trajectory log.

    Full-batch mode (batch_size == n, or any isotropic-noise run) evaluates
    the dataset in stored order and never consults the shuffle seed.
    Non-finite losses abort with a DivergenceError naming the last good
    iteration.
    """
    spec = config.spec
    theta = init_params(spec)
    theta0 = theta.copy()
    noise = config.noise
    if noise.mode == "isotropic" and noise.sigma2 is None:
        noise = freeze_noise_scale(spec, theta0, dataset, noise)
    isotropic = noise.mode == "isotropic"

    whole = full_batch(dataset)
    full_mode = isotropic or config.sampler.batch_size == dataset.n
    if full_mode:
        iters_per_epoch = 1
    else:
        n_batches = dataset.n // config.sampler.batch_size
        if not config.sampler.drop_last and dataset.n % config.sampler.batch_size:
            n_batches += 1
        iters_per_epoch = n_batches
    total_planned = config.epochs * iters_per_epoch

    digest = config_digest(config)
    spill = config.spill_path is not None and total_planned > config.spill_cap
    writer = None
    if spill:
        writer = TrajectoryWriter(config.spill_path, spec.param_count, digest)

    records = []
    prev_full_grad = None
    t = 0
    try:
        for epoch in range(config.epochs):
            if full_mode:
                batches = [whole]
            else:
                batches = epoch_batches(dataset, config.sampler, epoch)
            eval_epoch = epoch % config.eval_period_epochs == 0
            for k, batch in enumerate(batches):
                full_loss = full_acc = None
                if eval_epoch and k == 0:
                    full_loss = forward_loss(spec, theta, whole)
                    full_acc = accuracy(spec, theta, whole)
                loss, grad = loss_and_grad(spec, theta, batch)
                if not math.isfinite(loss):
                    raise NonFiniteError("non-finite loss")
                full_grad_cos = None
                if config.record_full_gradient_cosine:
                    if full_mode:
                        fgrad = grad
                    else:
                        fgrad = loss_and_grad(spec, theta, whole)[1]
                    if prev_full_grad is not None:
                        full_grad_cos = cosine(prev_full_grad, fgrad)
                    prev_full_grad = fgrad
                if isotropic:
                    grad = isotropic_grad(grad, noise, t)
                lr = lr_at(config.schedule, t)
                if writer is not None:
                    writer.append(t, lr, loss, theta, grad)
                records.append(IterationRecord(
                    t=t,
                    theta=None if spill else theta,
                    grad=None if spill else grad,
                    minibatch_loss=loss,
                    lr=lr,
                    full_loss=full_loss,
                    full_accuracy=full_acc,
                    full_grad_cosine=full_grad_cos,
                ))
                theta = gd_step(theta, grad, lr)
                t += 1
    except NonFiniteError as exc:
        if writer is not None:
            writer.close()
        raise DivergenceError(t - 1) from exc
    if writer is not None:
        writer.close()

    metadata = {
        "config_digest": digest.hex(),
        "iters_per_epoch": iters_per_epoch,
        "epochs": config.epochs,
        "batch_size": config.sampler.batch_size,
        "full_batch_mode": full_mode,
        "init_seed": spec.init_seed,
        "shuffle_seed": config.sampler.shuffle_seed,
        "noise_mode": noise.mode,
        "noise_sigma2": noise.sigma2,
        "noise_seed": noise.noise_seed if isotropic else None,
    }
    return TrajectoryLog(
        spec=spec,
        theta0=theta0,
        theta_final=theta,
        records=records,
        metadata=metadata,
        spill_path=config.spill_path if spill else None,
    )


class TrajectoryWriter:
    """Streams trajectory records into the binary spill format.

    Layout: 8-byte magic ``SGDWALK1``, little-endian u64 parameter count,
    32-byte config digest, then per record: u64 t, f64 lr, f64 minibatch
    loss, P f64 parameters, P f64 gradients. All little-endian.
    """

    def __init__(self, path, param_count, digest):
        if len(digest) != 32:
            raise ValueError("config digest must be 32 bytes")
        self.param_count = int(param_count)
        self.handle = open(path, "wb")
        self.handle.write(TRAJECTORY_MAGIC)
        self.handle.write(struct.pack("<Q", self.param_count))
        self.handle.write(digest)

    def append(self, t, lr, minibatch_loss, theta, grad):
        if theta.shape != (self.param_count,) or grad.shape != (self.param_count,):
            raise ValueError("vector length does not match the file header")
        self.handle.write(struct.pack("<Qdd", t, lr, minibatch_loss))
        self.handle.write(theta.astype("<f8", copy=False).tobytes())
        self.handle.write(grad.astype("<f8", copy=False).tobytes())

    def close(self):
        if not self.handle.closed:
            self.handle.close()


def save_trajectory(log, path):
    """Write a fully in-memory log to the binary trajectory format."""
    digest = bytes.fromhex(log.metadata.get("config_digest", "00" * 32))
    writer = TrajectoryWriter(path, log.theta0.shape[0], digest)
    try:
        for rec in log.records:
            writer.append(rec.t, rec.lr, rec.minibatch_loss,
                          log.theta_at(rec.t), log.grad_at(rec.t))
    finally:
        writer.close()


def load_trajectory(path):
    """Read a binary trajectory file; returns (param_count, digest, rows).

    Rows are (t, lr, minibatch_loss, theta, grad) tuples.
    """
    with open(path, "rb") as handle:
        magic = handle.read(len(TRAJECTORY_MAGIC))
        if magic != TRAJECTORY_MAGIC:
            raise ValueError(f"bad trajectory magic {magic!r}")
        header = handle.read(8 + 32)
        if len(header) != 40:
            raise ValueError("truncated trajectory header")
        param_count = struct.unpack("<Q", header[:8])[0]
        digest = header[8:]
        record_bytes = 8 + 8 + 8 + 16 * param_count
        rows = []
        while True:
            blob = handle.read(record_bytes)
            if not blob:
                break
            if len(blob) != record_bytes:
                raise ValueError("truncated trajectory record")
            t, lr, loss = struct.unpack_from("<Qdd", blob, 0)
            vecs = np.frombuffer(blob, dtype="<f8", offset=24)
            theta = vecs[:param_count].astype(np.float64)
            grad = vecs[param_count:].astype(np.float64)
            rows.append((t, lr, loss, theta, grad))
    return param_count, digest, rows
