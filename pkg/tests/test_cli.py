import numpy as np
import pytest

from lapsegan.cli import main
from lapsegan.data import read_manifest, read_ppm, write_ppm


@pytest.fixture(scope="session")
def workspace(tmp_path_factory):
    """A store plus a tiny trained stage-1/stage-2 pair, built via the CLI."""
    root = tmp_path_factory.mktemp("cli")
    store = root / "store"
    run1 = root / "run1"
    run2 = root / "run2"
    assert main(["synth-data", "--out", str(store), "--n-sources", "4",
                 "--frames-per-source", "64", "--resolution", "64",
                 "--test-fraction", "0.25", "--seed", "3"]) == 0
    common = ["--resolution", "64", "--width-multiplier", "0.125",
              "--batch-size", "2", "--iterations", "2", "--seed", "0",
              "--log-every", "100", "--checkpoint-every", "1000"]
    assert main(["train-stage1", "--store", str(store), "--out", str(run1)]
                + common) == 0
    g1 = run1 / "stage1_final.mdck"
    assert main(["train-stage2", "--store", str(store), "--out", str(run2),
                 "--g1-checkpoint", str(g1)] + common) == 0
    return {"store": store, "run1": run1, "run2": run2, "g1": g1,
            "g2": run2 / "stage2_final.mdck"}


class TestSynthData:
    def test_store_layout(self, workspace):
        records = read_manifest(workspace["store"])
        assert len(records) == 8
        splits = {r.split for r in records}
        assert splits == {"train", "test"}

    def test_too_few_sources_exit_2(self, tmp_path):
        code = main(["synth-data", "--out", str(tmp_path / "s"),
                     "--n-sources", "1", "--resolution", "64"])
        assert code == 2


class TestTrain:
    def test_outputs_exist(self, workspace):
        assert (workspace["run1"] / "losses.csv").exists()
        assert workspace["g1"].exists()
        header = (workspace["run1"] / "losses.csv").read_text().splitlines()[0]
        assert header == "iter,adv_d,adv_g,content,rank,total_g,total_d"

    def test_progress_lines(self, workspace, capsys, tmp_path):
        code = main(["train-stage1", "--store", str(workspace["store"]),
                     "--out", str(tmp_path / "r"), "--resolution", "64",
                     "--width-multiplier", "0.125", "--iterations", "1",
                     "--log-every", "1"])
        assert code == 0
        out = capsys.readouterr().out
        assert "iter=1 adv_d=" in out and "rank=" in out

    def test_unknown_config_key_in_file_exit_2(self, workspace, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("banana = 7\n")
        code = main(["train-stage1", "--store", str(workspace["store"]),
                     "--out", str(tmp_path / "r"), "--config", str(cfg)])
        assert code == 2

    def test_config_file_and_flag_precedence(self, workspace, tmp_path, capsys):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("# desk-scale settings\nresolution = 64\n"
                       "width_multiplier = 0.125\niterations = 1\nseed = 9\n")
        out = tmp_path / "r"
        code = main(["train-stage1", "--store", str(workspace["store"]),
                     "--out", str(out), "--config", str(cfg), "--seed", "11",
                     "--log-every", "100"])
        assert code == 0
        capsys.readouterr()
        assert main(["inspect", str(out / "stage1_final.mdck")]) == 0
        echo = capsys.readouterr().out
        assert "seed = 11" in echo            # flag beats file
        assert "width_multiplier = 0.125" in echo

    def test_missing_g1_checkpoint_exit_3(self, workspace, tmp_path):
        code = main(["train-stage2", "--store", str(workspace["store"]),
                     "--out", str(tmp_path / "r"),
                     "--g1-checkpoint", str(tmp_path / "missing.mdck")])
        assert code == 3


class TestGenerate:
    def test_stage2_generates_frames(self, workspace, tmp_path):
        frame = read_ppm(workspace["store"] / "frames" / "synth000" /
                         "frame_0000.ppm")
        inp = tmp_path / "in.ppm"
        write_ppm(inp, frame)
        out = tmp_path / "gen"
        assert main(["generate", "--checkpoint", str(workspace["g2"]),
                     "--frame", str(inp), "--out", str(out)]) == 0
        frames = sorted(out.glob("frame_*.ppm"))
        assert len(frames) == 32
        assert read_ppm(frames[0]).shape == (64, 64, 3)

    def test_resolution_mismatch_exit_2(self, workspace, tmp_path):
        inp = tmp_path / "big.ppm"
        write_ppm(inp, np.zeros((128, 128, 3), np.uint8))
        code = main(["generate", "--checkpoint", str(workspace["g1"]),
                     "--frame", str(inp), "--out", str(tmp_path / "g")])
        assert code == 2

    def test_corrupt_checkpoint_exit_3(self, workspace, tmp_path):
        bad = tmp_path / "bad.mdck"
        raw = bytearray(workspace["g1"].read_bytes())
        raw[30] ^= 0xFF
        bad.write_bytes(bytes(raw))
        inp = tmp_path / "in.ppm"
        write_ppm(inp, np.zeros((64, 64, 3), np.uint8))
        code = main(["generate", "--checkpoint", str(bad),
                     "--frame", str(inp), "--out", str(tmp_path / "g")])
        assert code == 3


class TestEvaluate:
    def test_writes_csv(self, workspace, tmp_path, capsys):
        out = tmp_path / "eval.csv"
        code = main(["evaluate", "--checkpoint", str(workspace["g1"]),
                     "--store", str(workspace["store"]), "--n", "2",
                     "--seed", "1", "--out", str(out)])
        assert code == 0
        lines = out.read_text().splitlines()
        assert lines[0] == "clip_id,mse,psnr_db,ssim"
        assert lines[-1].startswith("MEAN,")
        assert len(lines) == 4
        assert "psnr(mean mse)" in capsys.readouterr().out


class TestInspect:
    def test_spec_table(self, capsys):
        assert main(["inspect", "spec", "--stage", "1",
                     "--resolution", "128"]) == 0
        out = capsys.readouterr().out
        for name in ("conv1", "conv6", "deconv6", "score"):
            assert name in out
        assert "(3, 32, 128, 128)" in out

    def test_store_counts(self, workspace, capsys):
        assert main(["inspect", str(workspace["store"])]) == 0
        out = capsys.readouterr().out
        assert "8 clips" in out and "train" in out and "test" in out

    def test_checkpoint_meta(self, workspace, capsys):
        assert main(["inspect", str(workspace["g2"])]) == 0
        out = capsys.readouterr().out
        assert "stage 2" in out and "d2, g1, g2" in out

    def test_missing_target_exit_3(self, tmp_path):
        assert main(["inspect", str(tmp_path / "nope.mdck")]) == 3


class TestUsage:
    def test_unknown_flag_exit_1(self):
        with pytest.raises(SystemExit) as exc:
            main(["train-stage1", "--bogus"])
        assert exc.value.code == 1

    def test_no_command_exit_1(self):
        with pytest.raises(SystemExit) as exc:
            main([])
        assert exc.value.code == 1

    def test_console_script(self):
        import subprocess
        out = subprocess.run(["lapsegan", "--version"], capture_output=True,
                             text=True)
        assert out.returncode == 0
