import numpy as np
import pytest

from gofl.cli import run
from gofl.flow_io import load_image, save_flo, zero_flow
from gofl.trainer import TrainConfig


@pytest.fixture(scope="module")
def pipeline_dirs(tmp_path_factory):
    """Miniature end-to-end pipeline driven entirely through the CLI."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    proxy = root / "proxy"
    train = root / "train"
    assert run(["gen-data", "--count", "10", "--size", "64x64", "--seed", "3",
                "--out", str(data)]) == 0
    assert run(["proxy", "--manifest", str(data / "manifest.txt"), "--out", str(proxy),
                "--hs-iters", "40"]) == 0
    cfg = TrainConfig(stage="guided", base_lr=1e-4, max_iters=8, schedule_start=100,
                      schedule_period=10, batch_size=4, seed=1)
    cfg_path = root / "guided.cfg"
    cfg_path.write_text(cfg.to_text())
    assert run(["train", "--manifest", str(proxy / "manifest.txt"), "--config", str(cfg_path),
                "--out", str(train), "--base-channels", "2"]) == 0
    return root


class TestExitCodes:
    def test_unknown_flag_is_usage_error(self, capsys):
        assert run(["gen-data", "--count", "4", "--frobnicate"]) == 1
        assert "usage" in capsys.readouterr().err

    def test_unknown_command(self, capsys):
        assert run(["transmogrify"]) == 1

    def test_missing_required_flag(self):
        assert run(["gen-data", "--count", "4"]) == 1

    def test_runtime_error_is_exit_2(self, tmp_path, capsys):
        assert run(["viz", "--flo", str(tmp_path / "nope.flo"), "--out",
                    str(tmp_path / "o.ppm")]) == 2
        assert "error" in capsys.readouterr().err

    def test_bad_size_is_usage_error(self, tmp_path):
        assert run(["gen-data", "--count", "1", "--size", "64by64",
                    "--out", str(tmp_path)]) == 1


class TestViz:
    def test_zero_flow_renders_white(self, tmp_path):
        save_flo(zero_flow(8, 8), tmp_path / "zero.flo")
        out = tmp_path / "zero.ppm"
        assert run(["viz", "--flo", str(tmp_path / "zero.flo"), "--out", str(out)]) == 0
        img = load_image(out)
        assert np.allclose(img.pixels, 1.0)

    def test_ckpt_mode_needs_pair_and_manifest(self, pipeline_dirs, tmp_path):
        ckpt = pipeline_dirs / "train" / "ckpt_final.gofl"
        assert run(["viz", "--ckpt", str(ckpt), "--out", str(tmp_path / "x.ppm")]) == 1

    def test_ckpt_pair_rendering(self, pipeline_dirs, tmp_path):
        ckpt = pipeline_dirs / "train" / "ckpt_final.gofl"
        manifest = pipeline_dirs / "proxy" / "manifest.txt"
        out = tmp_path / "pred.ppm"
        assert run(["viz", "--ckpt", str(ckpt), "--pair", "pair_00000",
                    "--manifest", str(manifest), "--out", str(out)]) == 0
        assert out.is_file()


class TestPipeline:
    def test_artifacts_exist(self, pipeline_dirs):
        assert (pipeline_dirs / "data" / "manifest.txt").is_file()
        assert len(list((pipeline_dirs / "proxy").glob("*.flo"))) == 10
        assert (pipeline_dirs / "train" / "ckpt_final.gofl").is_file()
        assert (pipeline_dirs / "train" / "train_summary.txt").is_file()

    def test_eval_command(self, pipeline_dirs, tmp_path, capsys):
        summary = tmp_path / "eval.txt"
        code = run(["eval", "--manifest", str(pipeline_dirs / "proxy" / "manifest.txt"),
                    "--ckpt", str(pipeline_dirs / "train" / "ckpt_final.gofl"),
                    "--split", "test", "--out", str(summary)])
        assert code == 0
        printed = capsys.readouterr().out
        assert "MEAN" in printed and "zero-flow" in printed
        assert "mean_epe\t" in summary.read_text()

    def test_finetune_command(self, pipeline_dirs, tmp_path):
        cfg = TrainConfig(stage="finetune", base_lr=1e-6, max_iters=4, batch_size=4, seed=2)
        cfg_path = tmp_path / "ft.cfg"
        cfg_path.write_text(cfg.to_text())
        out = tmp_path / "ft"
        assert run(["finetune", "--manifest", str(pipeline_dirs / "proxy" / "manifest.txt"),
                    "--config", str(cfg_path),
                    "--init", str(pipeline_dirs / "train" / "ckpt_final.gofl"),
                    "--out", str(out)]) == 0
        assert (out / "ckpt_final.gofl").is_file()

    def test_wrong_stage_config_rejected(self, pipeline_dirs, tmp_path):
        cfg_path = tmp_path / "wrong.cfg"
        cfg_path.write_text(TrainConfig.desk_finetune().to_text())
        assert run(["train", "--manifest", str(pipeline_dirs / "proxy" / "manifest.txt"),
                    "--config", str(cfg_path), "--out", str(tmp_path / "t")]) == 1

    def test_gen_data_idempotent(self, tmp_path):
        for d in ("a", "b"):
            assert run(["gen-data", "--count", "3", "--size", "64x64", "--seed", "7",
                        "--out", str(tmp_path / d)]) == 0
        files_a = sorted(p.relative_to(tmp_path / "a")
                         for p in (tmp_path / "a").rglob("*") if p.is_file())
        for rel in files_a:
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


class TestGradcheckCommand:
    def test_passes(self, capsys):
        assert run(["gradcheck", "--points", "4"]) == 0
        out = capsys.readouterr().out
        assert "conv2d" in out and "passed" in out
