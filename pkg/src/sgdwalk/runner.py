"""Run orchestration: output directory, phase timing, manifest, verify.

A run is a recipe executed into a fresh directory. After the recipe
finishes, every file under the directory is hashed and the checksums are
written into run_manifest.json together with the resolved configuration.
`verify_run` replays the hashing and reports any drift.
"""

import hashlib
import json
import time
from contextlib import contextmanager
from pathlib import Path

from . import __version__
from .recipes import RECIPES, build_dataset

MANIFEST_NAME = "run_manifest.json"


class ManifestError(ValueError):
    """A run manifest is missing, unreadable, or structurally wrong."""


class RunContext:
    """Output directory handle with per-phase wall-clock accounting."""

    def __init__(self, out_dir):
        self.out = Path(out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.phase_seconds = {}

    def path(self, relative):
        target = self.out / relative
        target.parent.mkdir(parents=True, exist_ok=True)
        return target

    @contextmanager
    def phase(self, name):
        start = time.perf_counter()
        try:
            yield
        finally:
            elapsed = time.perf_counter() - start
            self.phase_seconds[name] = round(
                self.phase_seconds.get(name, 0.0) + elapsed, 6)


def file_sha256(path):
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for block in iter(lambda: handle.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def hash_run_files(run_dir):
    """Checksums of every file under run_dir except the manifest itself."""
    run_dir = Path(run_dir)
    checksums = {}
    for path in sorted(run_dir.rglob("*")):
        if not path.is_file():
            continue
        relative = path.relative_to(run_dir).as_posix()
        if relative == MANIFEST_NAME:
            continue
        checksums[relative] = file_sha256(path)
    return checksums


def run_experiment(cfg):
    """Execute the configured recipe and write the run manifest."""
    fn, needs_data = RECIPES[cfg.experiment]
    ctx = RunContext(cfg.out_dir)
    dataset = None
    if needs_data:
        with ctx.phase("data"):
            dataset = build_dataset(cfg)
    extras = fn(cfg, ctx, dataset)
    manifest = {
        "experiment": cfg.experiment,
        "version": __version__,
        "master_seed": cfg.master_seed,
        "config": cfg.resolved(),
        "config_digest": cfg.digest(),
        "result": extras,
        "files": hash_run_files(ctx.out),
        "phase_seconds": dict(sorted(ctx.phase_seconds.items())),
    }
    with open(ctx.out / MANIFEST_NAME, "w") as handle:
        json.dump(manifest, handle, indent=2, sort_keys=True)
        handle.write("\n")
    return manifest


def refresh_manifest(run_dir):
    """Re-hash run files into an existing manifest (after plotting)."""
    run_dir = Path(run_dir)
    manifest_path = run_dir / MANIFEST_NAME
    if not manifest_path.is_file():
        return None
    with open(manifest_path) as handle:
        manifest = json.load(handle)
    manifest["files"] = hash_run_files(run_dir)
    with open(manifest_path, "w") as handle:
        json.dump(manifest, handle, indent=2, sort_keys=True)
        handle.write("\n")
    return manifest


def verify_run(run_dir):
    """Re-hash a finished run; return a sorted list of problem strings."""
    run_dir = Path(run_dir)
    manifest_path = run_dir / MANIFEST_NAME
    if not manifest_path.is_file():
        raise FileNotFoundError(f"no {MANIFEST_NAME} in {run_dir}")
    with open(manifest_path) as handle:
        try:
            manifest = json.load(handle)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"unreadable manifest {manifest_path}: {exc}") from exc
    expected = manifest.get("files")
    if not isinstance(expected, dict):
        raise ManifestError(f"manifest {manifest_path} has no files map")
    actual = hash_run_files(run_dir)
    problems = []
    for name in sorted(set(expected) | set(actual)):
        if name not in actual:
            problems.append(f"missing: {name}")
        elif name not in expected:
            problems.append(f"unlisted: {name}")
        elif expected[name] != actual[name]:
            problems.append(f"changed: {name}")
    return problems
