import numpy as np
import pytest

from pastaflow.cli import main


def run(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """A synthetic dataset plus a trained checkpoint directory."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "flows.txt"
    assert (
        main(
            [
                "synth",
                "--out",
                str(data),
                "--n",
                "4",
                "--m",
                "4",
                "--days",
                "3",
                "--hotspots",
                "1,1",
                "--seed",
                "3",
            ]
        )
        == 0
    )
    out_dir = root / "run"
    assert (
        main(
            [
                "train",
                "--data",
                str(data),
                "--out-dir",
                str(out_dir),
                "--epochs",
                "2",
                "--seed",
                "1",
                "--tc",
                "2",
                "--tp",
                "1",
                "--tt",
                "0",
                "--test-days",
                "1",
            ]
        )
        == 0
    )
    return root, data, out_dir


class TestSynth:
    def test_deterministic_output(self, tmp_path, capsys):
        a, b = tmp_path / "a.txt", tmp_path / "b.txt"
        for out in (a, b):
            code, _, _ = run(capsys, "synth", "--out", str(out), "--n", "4", "--m", "4", "--days", "2", "--seed", "7")
            assert code == 0
        assert a.read_bytes() == b.read_bytes()

    def test_zero_extent_is_usage_error(self, tmp_path, capsys):
        code, _, err = run(capsys, "synth", "--out", str(tmp_path / "x.txt"), "--n", "0", "--seed", "1")
        assert code == 1
        assert err.startswith("error[usage]:")

    def test_default_frame_count(self, tmp_path, capsys):
        out = tmp_path / "big.txt"
        code, _, _ = run(capsys, "synth", "--out", str(out), "--seed", "1")
        assert code == 0
        lines = out.read_text().splitlines()
        assert len(lines) == 1 + 35 * 24
        assert lines[0].startswith("#pasta-flow v1 n=16 m=16 ")

    def test_env_seed_fallback(self, tmp_path, capsys, monkeypatch):
        explicit = tmp_path / "explicit.txt"
        fallback = tmp_path / "fallback.txt"
        run(capsys, "synth", "--out", str(explicit), "--n", "3", "--m", "3", "--days", "1", "--seed", "12")
        monkeypatch.setenv("PASTA_SEED", "12")
        run(capsys, "synth", "--out", str(fallback), "--n", "3", "--m", "3", "--days", "1")
        assert explicit.read_bytes() == fallback.read_bytes()

    def test_bad_hotspot_format(self, tmp_path, capsys):
        code, _, err = run(capsys, "synth", "--out", str(tmp_path / "x.txt"), "--hotspots", "1;2", "--seed", "0")
        assert code == 1 and "usage" in err


class TestMoran:
    def test_constant_frame_zero_stats(self, tmp_path, capsys):
        data = tmp_path / "const.txt"
        data.write_text(
            "#pasta-flow v1 n=2 m=2 interval_minutes=60 start=2021-04-05T00:00:00\n"
            "5.0,5.0,5.0,5.0\n"
        )
        out = tmp_path / "moran.csv"
        code, _, _ = run(capsys, "moran", "--data", str(data), "--t", "0", "--out", str(out))
        assert code == 0
        lines = out.read_text().splitlines()
        assert lines[0] == "# morans_i t=0"
        assert lines[1] == "0.0,0.0" and lines[2] == "0.0,0.0"
        assert lines[3] == "# quadrants t=0"
        assert lines[4] == "NONE,NONE"

    def test_hotspot_frame_has_hl(self, workdir, capsys):
        root, data, _ = workdir
        out = root / "moran_peak.csv"
        # frame 8 is 08:00 on the first day, a configured peak hour
        code, stdout, _ = run(capsys, "moran", "--data", str(data), "--t", "8", "--out", str(out))
        assert code == 0
        assert "HL" in out.read_text()

    def test_missing_file(self, tmp_path, capsys):
        code, _, err = run(capsys, "moran", "--data", str(tmp_path / "nope.txt"), "--t", "0", "--out", str(tmp_path / "o.csv"))
        assert code == 2 and err.startswith("error[")

    def test_frame_out_of_range(self, workdir, capsys):
        root, data, _ = workdir
        code, _, err = run(capsys, "moran", "--data", str(data), "--t", "99999", "--out", str(root / "x.csv"))
        assert code == 2 and err.startswith("error[data]:")


class TestTrain:
    def test_outputs_exist(self, workdir):
        _, _, out_dir = workdir
        for name in ("checkpoint.json", "best.json", "history.csv"):
            assert (out_dir / name).exists()
        history = (out_dir / "history.csv").read_text().splitlines()
        assert history[0] == "epoch,train_loss,val_rmse,seconds"
        assert len(history) == 3

    def test_checkpoint_determinism(self, workdir, tmp_path, capsys):
        _, data, out_dir = workdir
        again = tmp_path / "again"
        code, _, _ = run(
            capsys,
            "train",
            "--data",
            str(data),
            "--out-dir",
            str(again),
            "--epochs",
            "2",
            "--seed",
            "1",
            "--tc",
            "2",
            "--tp",
            "1",
            "--tt",
            "0",
            "--test-days",
            "1",
        )
        assert code == 0
        assert (again / "checkpoint.json").read_bytes() == (out_dir / "checkpoint.json").read_bytes()

    def test_divergence_exit_code(self, workdir, tmp_path, capsys):
        _, data, _ = workdir
        code, _, err = run(
            capsys,
            "train",
            "--data",
            str(data),
            "--out-dir",
            str(tmp_path / "div"),
            "--epochs",
            "2",
            "--lr",
            "1e200",
            "--seed",
            "1",
            "--tc",
            "2",
            "--tp",
            "1",
            "--tt",
            "0",
            "--test-days",
            "1",
        )
        assert code == 3
        assert err.startswith("error[divergence]:")


class TestEval:
    def test_metrics_csv(self, workdir, capsys):
        root, data, out_dir = workdir
        out = root / "metrics.csv"
        code, stdout, _ = run(
            capsys,
            "eval",
            "--data",
            str(data),
            "--checkpoint",
            str(out_dir / "checkpoint.json"),
            "--test-days",
            "1",
            "--baseline",
            "persistence",
            "--out",
            str(out),
        )
        assert code == 0
        lines = out.read_text().splitlines()
        assert lines[0] == "model,segment,rmse,mape,count"
        assert lines[1].startswith("pasta,ALL,")
        assert lines[2].startswith("persistence,ALL,")
        assert "pasta" in stdout

    def test_segment_report(self, workdir, capsys):
        root, data, out_dir = workdir
        code, stdout, _ = run(
            capsys,
            "eval",
            "--data",
            str(data),
            "--checkpoint",
            str(out_dir / "checkpoint.json"),
            "--test-days",
            "1",
            "--segment",
            "HL",
            "--mape-threshold",
            "1",
        )
        assert code == 0
        assert "segment=HL" in stdout

    def test_checkpoint_grid_mismatch(self, workdir, tmp_path, capsys):
        root, _, out_dir = workdir
        other = tmp_path / "other.txt"
        run(capsys, "synth", "--out", str(other), "--n", "5", "--m", "4", "--days", "3", "--seed", "2")
        code, _, err = run(
            capsys,
            "eval",
            "--data",
            str(other),
            "--checkpoint",
            str(out_dir / "checkpoint.json"),
            "--test-days",
            "1",
        )
        assert code == 2
        assert err.startswith("error[checkpoint]:")

    def test_checkpoint_required_without_ablation(self, workdir, capsys):
        _, data, _ = workdir
        code, _, err = run(capsys, "eval", "--data", str(data))
        assert code == 1 and "checkpoint" in err

    def test_ablation_csv(self, workdir, tmp_path, capsys):
        _, data, _ = workdir
        out = tmp_path / "ablation.csv"
        code, stdout, _ = run(
            capsys,
            "eval",
            "--data",
            str(data),
            "--ablation",
            "--epochs",
            "1",
            "--seed",
            "1",
            "--tc",
            "2",
            "--tp",
            "1",
            "--tt",
            "0",
            "--test-days",
            "1",
            "--mape-threshold",
            "1",
            "--out",
            str(out),
        )
        assert code == 0
        lines = out.read_text().splitlines()
        assert lines[0] == "sag,tag,msr,rmse,mape"
        assert len(lines) == 7
        assert lines[6].startswith("1,1,1,")


class TestPredict:
    def test_prediction_grid(self, workdir, capsys):
        root, data, out_dir = workdir
        out = root / "pred.csv"
        code, _, _ = run(
            capsys,
            "predict",
            "--data",
            str(data),
            "--checkpoint",
            str(out_dir / "checkpoint.json"),
            "--target-index",
            "60",
            "--out",
            str(out),
        )
        assert code == 0
        rows = [line.split(",") for line in out.read_text().splitlines()]
        grid = np.array([[float(v) for v in row] for row in rows])
        assert grid.shape == (4, 4)
        assert np.all(grid >= 0.0)

    def test_one_past_end_allowed(self, workdir, capsys):
        root, data, out_dir = workdir
        code, _, _ = run(
            capsys,
            "predict",
            "--data",
            str(data),
            "--checkpoint",
            str(out_dir / "checkpoint.json"),
            "--target-index",
            "72",
            "--out",
            str(root / "future.csv"),
        )
        assert code == 0

    def test_bad_target_is_data_error(self, workdir, capsys):
        root, data, out_dir = workdir
        code, _, err = run(
            capsys,
            "predict",
            "--data",
            str(data),
            "--checkpoint",
            str(out_dir / "checkpoint.json"),
            "--target-index",
            "500",
            "--out",
            str(root / "x.csv"),
        )
        assert code == 2 and err.startswith("error[history]:")


class TestAttention:
    def test_dump_shape_and_range(self, workdir, capsys):
        root, data, out_dir = workdir
        out = root / "attention.csv"
        code, _, _ = run(
            capsys,
            "attention",
            "--data",
            str(data),
            "--checkpoint",
            str(out_dir / "checkpoint.json"),
            "--out",
            str(out),
        )
        assert code == 0
        lines = out.read_text().splitlines()
        header = lines[0].split(",")
        assert header[0] == "target_index"
        assert header[1:] == ["closeness-1h", "closeness-2h", "periodic-1d"]
        assert lines[-1].startswith("mean,")
        for line in lines[1:]:
            weights = [float(v) for v in line.split(",")[1:]]
            assert len(weights) == 3
            assert all(0.0 < w < 1.0 for w in weights)


class TestUsage:
    def test_no_subcommand(self, capsys):
        code, _, err = run(capsys)
        assert code == 1 and err.startswith("error[usage]:")

    def test_unknown_flag(self, tmp_path, capsys):
        code, _, err = run(capsys, "synth", "--out", str(tmp_path / "x.txt"), "--frobnicate", "1")
        assert code == 1 and err.startswith("error[usage]:")

    def test_unknown_subcommand(self, capsys):
        code, _, err = run(capsys, "dance")
        assert code == 1

    def test_help_exits_zero(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["--help"])
        assert exc.value.code == 0
        out = capsys.readouterr().out
        for sub in ("synth", "moran", "train", "eval", "predict", "attention"):
            assert sub in out

    def test_subcommand_help_lists_flags(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["synth", "--help"])
        assert exc.value.code == 0
        out = capsys.readouterr().out
        for flag in ("--out", "--n", "--m", "--days", "--interval", "--hotspots", "--noise", "--seed"):
            assert flag in out
