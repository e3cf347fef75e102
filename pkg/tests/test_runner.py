import csv
import json
import shutil

import pytest

from sgdwalk import cli
from sgdwalk.config import ConfigError, build_config
from sgdwalk.plots import PlotDataError, interp_geometry, render_plots
from sgdwalk.recipes import parse_slice_epochs
from sgdwalk.runner import (
    MANIFEST_NAME,
    ManifestError,
    RunContext,
    file_sha256,
    refresh_manifest,
    run_experiment,
    verify_run,
)

TINY_DATA = {
    ("data", "per_class"): 12,
    ("data", "classes"): 3,
    ("data", "dim"): 5,
    ("model", "hidden"): (8,),
}


@pytest.fixture(scope="module")
def quad_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("quad") / "run"
    cfg = build_config("quad-rates", out, 0)
    manifest = run_experiment(cfg)
    return cfg, manifest, out


@pytest.fixture(scope="module")
def sgd_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("sgd") / "run"
    overrides = dict(TINY_DATA)
    overrides.update({
        ("optim", "batch_size"): 6,
        ("optim", "epochs"): 2,
        ("optim", "lr"): 0.5,
    })
    cfg = build_config("walk-sgd", out, 0, overrides=overrides)
    manifest = run_experiment(cfg)
    return cfg, manifest, out


def copy_run(src, dst_parent):
    dst = dst_parent / "copy"
    shutil.copytree(src, dst)
    return dst


@pytest.fixture(scope="module")
def hvl_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("hvl") / "run"
    overrides = dict(TINY_DATA)
    overrides.update({
        ("optim", "batch_size"): 6,
        ("optim", "epochs"): 2,
        ("optim", "lr"): 0.5,
    })
    cfg = build_config("height-vs-lr", out, 0, overrides=overrides)
    run_experiment(cfg)
    return out


@pytest.fixture(scope="module")
def cosine_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("cosine") / "run"
    overrides = dict(TINY_DATA)
    overrides.update({
        ("optim", "lr"): 0.5,
        ("optim", "budget_updates"): 20,
        ("metrics", "smooth_window"): 5,
        ("study", "batch_grid"): "4,full",
    })
    cfg = build_config("cosine-study", out, 0, overrides=overrides)
    manifest = run_experiment(cfg)
    return out, manifest


class TestRunContext:
    def test_path_creates_parents(self, tmp_path):
        ctx = RunContext(tmp_path / "run")
        target = ctx.path("sub/dir/file.csv")
        assert target.parent.is_dir()
        assert target == tmp_path / "run" / "sub" / "dir" / "file.csv"

    def test_phase_accumulates(self, tmp_path):
        ctx = RunContext(tmp_path / "run")
        with ctx.phase("work"):
            pass
        with ctx.phase("work"):
            sum(range(1000))
        assert set(ctx.phase_seconds) == {"work"}
        assert ctx.phase_seconds["work"] >= 0.0


class TestRunExperiment:
    def test_manifest_contents(self, quad_run):
        cfg, manifest, out = quad_run
        assert manifest["experiment"] == "quad-rates"
        assert manifest["master_seed"] == 0
        assert manifest["config_digest"] == cfg.digest()
        assert manifest["config"] == cfg.resolved()
        # default grid: 0.1 .. 2.2 in steps of 0.1
        assert manifest["result"]["eta_count"] == 22
        assert manifest["result"]["lambdas"] == [0.5, 1.0, 2.0]
        assert "grid" in manifest["phase_seconds"]
        assert set(manifest["files"]) == {"rates.csv"}
        assert manifest["files"]["rates.csv"] == file_sha256(out / "rates.csv")

    def test_manifest_file_round_trips(self, quad_run):
        _, manifest, out = quad_run
        with open(out / MANIFEST_NAME) as handle:
            on_disk = json.load(handle)
        assert on_disk == manifest

    def test_rates_row_count(self, quad_run):
        _, _, out = quad_run
        with open(out / "rates.csv", newline="") as handle:
            rows = list(csv.reader(handle))
        assert len(rows) == 1 + 3 * 22

    def test_verify_clean(self, quad_run):
        _, _, out = quad_run
        assert verify_run(out) == []


class TestVerifyRun:
    def test_changed_file(self, quad_run, tmp_path):
        _, _, out = quad_run
        run = copy_run(out, tmp_path)
        with open(run / "rates.csv", "a") as handle:
            handle.write("tamper\n")
        assert verify_run(run) == ["changed: rates.csv"]

    def test_missing_and_unlisted(self, quad_run, tmp_path):
        _, _, out = quad_run
        run = copy_run(out, tmp_path)
        (run / "rates.csv").unlink()
        (run / "stray.txt").write_text("extra")
        assert verify_run(run) == ["missing: rates.csv", "unlisted: stray.txt"]

    def test_no_manifest(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            verify_run(tmp_path)

    def test_corrupt_manifest(self, tmp_path):
        (tmp_path / MANIFEST_NAME).write_text("not json at all{")
        with pytest.raises(ManifestError, match="unreadable manifest"):
            verify_run(tmp_path)

    def test_manifest_without_files_map(self, tmp_path):
        (tmp_path / MANIFEST_NAME).write_text('{"experiment": "x"}')
        with pytest.raises(ManifestError, match="no files map"):
            verify_run(tmp_path)

    def test_refresh_without_manifest_is_noop(self, tmp_path):
        assert refresh_manifest(tmp_path) is None


class TestSgdWalkRecipe:
    def test_artifacts_and_result(self, sgd_run):
        _, manifest, out = sgd_run
        assert manifest["result"] == {
            "lr": 0.5,
            "lr_tuned": False,
            "epochs": 2,
            "iters_per_epoch": 6,
            "sliced_epochs": [0, 1],
        }
        names = set(manifest["files"])
        assert {"trajectory.csv", "interp.csv", "epochs.csv",
                "trajectory.bin"} <= names

    def test_interp_covers_both_epochs(self, sgd_run):
        _, _, out = sgd_run
        with open(out / "interp.csv", newline="") as handle:
            rows = list(csv.reader(handle))
        # 12 slices (6 per epoch), 12 interpolation points each
        assert len(rows) == 1 + 12 * 12
        slice_ids = [int(row[0]) for row in rows[1:]]
        assert sorted(set(slice_ids)) == list(range(12))

    def test_epochs_csv_has_one_row_per_epoch(self, sgd_run):
        _, _, out = sgd_run
        with open(out / "epochs.csv", newline="") as handle:
            rows = list(csv.reader(handle))
        assert len(rows) == 3
        assert [row[0] for row in rows[1:]] == ["0", "1"]

    def test_binary_trajectory_size(self, sgd_run):
        _, _, out = sgd_run
        # (5, 8, 3) network: 48 + 27 = 75 parameters, 12 records
        expected = 48 + 12 * (24 + 16 * 75)
        assert (out / "trajectory.bin").stat().st_size == expected

    def test_verify_clean(self, sgd_run):
        _, _, out = sgd_run
        assert verify_run(out) == []


class TestHeightVsLrRecipe:
    def test_summary_rows(self, hvl_run):
        run_dir = hvl_run
        with open(run_dir / "height_vs_lr.csv", newline="") as handle:
            rows = list(csv.reader(handle))
        assert rows[0] == ["variant", "lr", "epoch", "mean_height", "height_sem"]
        assert len(rows) == 1 + 2 * 2
        assert [row[0] for row in rows[1:]] == ["full_lr", "full_lr",
                                                "half_lr", "half_lr"]
        assert rows[1][1] == "0.5"
        assert rows[3][1] == "0.25"

    def test_variant_directories(self, hvl_run):
        for name in ("full_lr", "half_lr"):
            for artifact in ("trajectory.csv", "interp.csv", "epochs.csv"):
                assert (hvl_run / name / artifact).is_file()


class TestCosineStudyRecipe:
    def test_series_shapes(self, cosine_run):
        out, manifest = cosine_run
        assert manifest["result"]["batch_sizes"] == [4, 36]
        assert manifest["result"]["lr"] == 0.5
        with open(out / "cosine_study.csv", newline="") as handle:
            rows = list(csv.reader(handle))
        by_series = {}
        for row in rows[1:]:
            by_series.setdefault(row[0], []).append(row)
        assert set(by_series) == {"batch-4", "batch-36", "lr-x0.5"}
        # budget 20 updates -> cosines at t = 1..19 for every series
        for name, series_rows in by_series.items():
            assert len(series_rows) == 19
            assert [int(r[4]) for r in series_rows] == list(range(1, 20))
        assert by_series["lr-x0.5"][0][3] == "0.25"

    def test_smoothed_values_bounded(self, cosine_run):
        out, _ = cosine_run
        with open(out / "cosine_study.csv", newline="") as handle:
            rows = list(csv.reader(handle))
        smoothed = [float(row[6]) for row in rows[1:] if row[6] != ""]
        assert smoothed
        assert all(-1.0 <= v <= 1.0 for v in smoothed)


class TestParseSliceEpochs:
    def test_forms(self):
        assert parse_slice_epochs("all", 4) == [0, 1, 2, 3]
        assert parse_slice_epochs("first,last", 5) == [0, 4]
        assert parse_slice_epochs("1, 3", 5) == [1, 3]
        assert parse_slice_epochs("first,0,last", 1) == [0]

    def test_errors(self):
        with pytest.raises(ConfigError, match="bad slice_epochs entry"):
            parse_slice_epochs("first,middle", 5)
        with pytest.raises(ConfigError, match="outside"):
            parse_slice_epochs("7", 5)


class TestPlots:
    def test_render_quad_run(self, quad_run, tmp_path):
        _, _, out = quad_run
        run = copy_run(out, tmp_path)
        written = render_plots(run)
        assert [p.name for p in written] == ["rates.svg"]
        assert (run / "rates.svg").stat().st_size > 0

    def test_render_is_byte_deterministic(self, quad_run, tmp_path):
        _, _, out = quad_run
        run = copy_run(out, tmp_path)
        render_plots(run)
        first = (run / "rates.svg").read_bytes()
        render_plots(run)
        assert (run / "rates.svg").read_bytes() == first

    def test_render_sgd_run_and_refresh(self, sgd_run, tmp_path):
        _, _, out = sgd_run
        run = copy_run(out, tmp_path)
        written = {p.name for p in render_plots(run)}
        assert written == {"interp.svg", "loss.svg", "cosine.svg",
                           "distance.svg", "heights.svg"}
        assert verify_run(run) != []
        refresh_manifest(run)
        assert verify_run(run) == []

    def test_missing_directory(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            render_plots(tmp_path / "nowhere")

    def test_no_plottable_files(self, tmp_path):
        (tmp_path / "notes.csv").write_text("a,b\n1,2\n")
        with pytest.raises(PlotDataError, match="no plottable"):
            render_plots(tmp_path)

    def test_bad_header_names_line(self, tmp_path):
        (tmp_path / "rates.csv").write_text("lambda,eta,rate\n1,1,0\n")
        with pytest.raises(PlotDataError, match=r"rates\.csv:1: header"):
            render_plots(tmp_path)

    def test_bad_field_count_names_line(self, tmp_path):
        (tmp_path / "rates.csv").write_text(
            "lambda,eta,rate,class\n1.0,1.0,0.0,critical\n1.0,2.0\n")
        with pytest.raises(PlotDataError, match="3: 2 fields, expected 4"):
            render_plots(tmp_path)

    def test_empty_and_headeronly_files(self, tmp_path):
        (tmp_path / "rates.csv").write_text("")
        with pytest.raises(PlotDataError, match="empty file"):
            render_plots(tmp_path)
        (tmp_path / "rates.csv").write_text("lambda,eta,rate,class\n")
        with pytest.raises(PlotDataError, match="no data rows"):
            render_plots(tmp_path)


class TestInterpGeometry:
    @staticmethod
    def write_slices(path, slices):
        with open(path, "w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(["t", "alpha", "loss"])
            for t, losses in slices:
                for j, loss in enumerate(losses):
                    writer.writerow([t, repr(j / 11), repr(float(loss))])

    def test_floors_boundaries_and_gap(self, tmp_path):
        path = tmp_path / "interp.csv"
        self.write_slices(path, [
            (0, [3, 2, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10]),
            (1, [9, 8, 7, 0.5, 6, 5, 4, 3, 2, 1.5, 1.2, 9]),
            (5, [2, 0.25, 1, 1, 1, 1, 1, 1, 1, 1, 1, 2]),
        ])
        xs, ys, floor_x, floor_y, boundaries = interp_geometry(path)
        assert boundaries == [0, 1, 5, 6]
        assert floor_x == [0 + 2 / 11, 1 + 3 / 11, 5 + 1 / 11]
        assert floor_y == [1.0, 0.5, 0.25]
        # one NaN separator for the single gap between t=1 and t=5
        nan_count = sum(1 for x in xs if x != x)
        assert nan_count == 1
        assert len(xs) == 3 * 12 + 1
        assert xs[0] == 0.0
        assert xs[11] == 0 + 1.0
        assert ys[2] == 1.0

    def test_short_slice_rejected(self, tmp_path):
        path = tmp_path / "interp.csv"
        with open(path, "w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(["t", "alpha", "loss"])
            writer.writerow([0, "0.0", "1.0"])
            writer.writerow([0, "1.0", "2.0"])
        with pytest.raises(PlotDataError, match="slice t=0 has 2 points"):
            interp_geometry(path)


class TestCli:
    def test_run_plot_verify_cycle(self, tmp_path, capsys):
        out = tmp_path / "run"
        assert cli.main(["run", "--experiment", "quad-rates",
                         "--out", str(out)]) == 0
        stdout = capsys.readouterr().out
        assert "run complete: quad-rates" in stdout
        assert "config digest:" in stdout
        assert (out / MANIFEST_NAME).is_file()

        assert cli.main(["verify", "--run", str(out)]) == 0
        assert "verify OK" in capsys.readouterr().out

        assert cli.main(["plot", "--run", str(out)]) == 0
        stdout = capsys.readouterr().out
        assert "rates.svg" in stdout
        assert "manifest refreshed" in stdout

        assert cli.main(["verify", "--run", str(out)]) == 0

    def test_verify_detects_tampering(self, tmp_path, capsys):
        out = tmp_path / "run"
        cli.main(["run", "--experiment", "quad-rates", "--out", str(out)])
        with open(out / "rates.csv", "a") as handle:
            handle.write("tamper\n")
        capsys.readouterr()
        assert cli.main(["verify", "--run", str(out)]) == 1
        stdout = capsys.readouterr().out
        assert "changed: rates.csv" in stdout
        assert "verify FAILED: 1 mismatched artifacts" in stdout

    def test_unknown_experiment_exits_two(self):
        with pytest.raises(SystemExit) as exc:
            cli.main(["run", "--experiment", "walk-everywhere"])
        assert exc.value.code == 2

    def test_config_error_exits_two(self, tmp_path, capsys):
        code = cli.main(["run", "--experiment", "walk-sgd",
                         "--out", str(tmp_path / "run"),
                         "--lr-schedule", "cyclical"])
        assert code == 2
        assert "config error:" in capsys.readouterr().err

    def test_divergence_exits_three(self, tmp_path, capsys):
        cfg_file = tmp_path / "tiny.cfg"
        cfg_file.write_text(
            "[data]\nper_class = 12\nclasses = 3\ndim = 5\n"
            "[model]\nhidden = 8\n"
        )
        code = cli.main(["run", "--experiment", "walk-gd",
                         "--out", str(tmp_path / "run"),
                         "--config", str(cfg_file),
                         "--lr", "1e9"])
        assert code == 3
        assert "divergence:" in capsys.readouterr().err

    def test_io_errors_exit_four(self, tmp_path, capsys):
        empty = tmp_path / "empty"
        empty.mkdir()
        assert cli.main(["plot", "--run", str(empty)]) == 4
        assert cli.main(["plot", "--run", str(tmp_path / "nowhere")]) == 4
        assert cli.main(["verify", "--run", str(empty)]) == 4
        err = capsys.readouterr().err
        assert err.count("i/o error:") == 3

    def test_missing_idx_file_exits_four(self, tmp_path, capsys):
        code = cli.main(["run", "--experiment", "walk-sgd",
                         "--out", str(tmp_path / "run"),
                         "--data", "idx",
                         "--images", str(tmp_path / "missing-images"),
                         "--labels", str(tmp_path / "missing-labels"),
                         "--lr", "0.5"])
        assert code == 4
        assert "i/o error:" in capsys.readouterr().err
