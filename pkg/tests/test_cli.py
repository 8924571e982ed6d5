import numpy as np
import pytest

import geopool.cli as cli
from geopool.pointcloud import load_cloud

SMOKE_CFG = """\
# tiny run: two camera scenes, one held out
divisor = 4
stages = 2
voxel_size = 0.25
k = 4
patch_cap = 64
num_classes = 4
epochs = 1
lr = 0.01
dataset.cam = synth:camera:2:50
heldout = synth:camera:1:60
scene.extent = 1.5
scene.objects = 2
scene.density = 60.0
"""


def write_cfg(path, text=SMOKE_CFG):
    path.write_text(text, encoding="utf-8")
    return str(path)


@pytest.fixture(scope="module")
def trained_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli_train")
    cfg = write_cfg(root / "run.cfg")
    out = root / "out"
    rc = cli.main(["train", "--config", cfg, "--out", str(out),
                   "--desk-scale", "--seed", "0"])
    assert rc == 0
    return root, cfg, out


class TestTrain:
    def test_artifacts(self, trained_dir, capsys):
        _, _, out = trained_dir
        for name in ("config.resolved", "model.ckpt", "pools.bin",
                     "metrics.csv"):
            assert (out / name).exists(), name
        head = (out / "metrics.csv").read_text().splitlines()[0]
        assert head == "epoch,split,loss,miou,macc"

    def test_resolved_config_echoes_settings(self, trained_dir):
        _, _, out = trained_dir
        resolved = (out / "config.resolved").read_text()
        assert "seed=0" in resolved and "desk_scale=True" in resolved
        assert "dataset.cam=synth:camera:2:50" in resolved
        assert "voxel_size=0.25" in resolved

    def test_same_seed_is_bit_identical(self, trained_dir, tmp_path):
        _, cfg, out = trained_dir
        out2 = tmp_path / "again"
        rc = cli.main(["train", "--config", cfg, "--out", str(out2),
                       "--desk-scale", "--seed", "0"])
        assert rc == 0
        assert (out2 / "metrics.csv").read_bytes() \
            == (out / "metrics.csv").read_bytes()
        assert (out2 / "model.ckpt").read_bytes() \
            == (out / "model.ckpt").read_bytes()

    def test_unknown_key_is_usage_error(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path / "bad.cfg", SMOKE_CFG + "banana = 1\n")
        rc = cli.main(["train", "--config", cfg, "--out",
                       str(tmp_path / "o"), "--desk-scale"])
        assert rc == 2
        assert "banana" in capsys.readouterr().err

    def test_desk_keys_require_desk_scale(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path / "run.cfg")
        rc = cli.main(["train", "--config", cfg, "--out", str(tmp_path / "o")])
        assert rc == 2
        assert "--desk-scale" in capsys.readouterr().err

    def test_missing_config_file(self, tmp_path, capsys):
        rc = cli.main(["train", "--config", str(tmp_path / "nope.cfg"),
                       "--out", str(tmp_path / "o"), "--desk-scale"])
        assert rc == 2

    def test_divergence_is_runtime_error(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path / "hot.cfg",
                        SMOKE_CFG.replace("lr = 0.01", "lr = 1e200"))
        with np.errstate(over="ignore", invalid="ignore"):
            rc = cli.main(["train", "--config", cfg,
                           "--out", str(tmp_path / "o"), "--desk-scale"])
        assert rc == 3
        assert "non-finite" in capsys.readouterr().err


class TestInfer:
    def test_labels_cloud_and_reports_purity(self, trained_dir, tmp_path,
                                             capsys):
        root, cfg, out = trained_dir
        scene_bin = tmp_path / "scene.bin"
        # make an input file from the same generator family
        import geopool.experiments as ex
        from geopool.pointcloud import SensorKind, save_rawbin
        ds = ex.synth_dataset(SensorKind.CameraLike, "cam", [61],
                              extent=1.5, n_objects=2, density=60.0)
        save_rawbin(ds.scenes[0], scene_bin)

        pred_bin = tmp_path / "pred.bin"
        rc = cli.main(["infer", "--model", str(out / "model.ckpt"),
                       "--pools", str(out / "pools.bin"),
                       "--input", str(scene_bin), "--output", str(pred_bin)])
        assert rc == 0
        got = capsys.readouterr().out
        assert "point-branch ops during inference: 0" in got
        assert "pool mutations: 0" in got
        labeled = load_cloud(pred_bin)
        assert labeled.labels is not None
        assert len(labeled.labels) == len(ds.scenes[0].positions)
        assert set(np.unique(labeled.labels)) <= set(range(4))

    def test_cold_start_warns(self, trained_dir, tmp_path, capsys):
        root, cfg, out = trained_dir
        import geopool.experiments as ex
        from geopool.pointcloud import SensorKind, save_rawbin
        ds = ex.synth_dataset(SensorKind.CameraLike, "cam", [61],
                              extent=1.5, n_objects=2, density=60.0)
        save_rawbin(ds.scenes[0], tmp_path / "s.bin")
        rc = cli.main(["infer", "--model", str(out / "model.ckpt"),
                       "--input", str(tmp_path / "s.bin"),
                       "--output", str(tmp_path / "p.bin")])
        assert rc == 0
        assert "cold start" in capsys.readouterr().err

    def test_bad_model_path(self, trained_dir, tmp_path, capsys):
        rc = cli.main(["infer", "--model", str(tmp_path / "no.ckpt"),
                       "--input", str(tmp_path / "no.bin"),
                       "--output", str(tmp_path / "p.bin")])
        assert rc == 2


class TestBench:
    def test_compare_csv(self, trained_dir, tmp_path, capsys):
        root, cfg, out = trained_dir
        import geopool.experiments as ex
        from geopool.pointcloud import SensorKind, save_rawbin
        ds = ex.synth_dataset(SensorKind.CameraLike, "cam", [61],
                              extent=1.5, n_objects=2, density=60.0)
        save_rawbin(ds.scenes[0], tmp_path / "s.bin")
        rc = cli.main(["bench", "--model", str(out / "model.ckpt"),
                       "--pools", str(out / "pools.bin"),
                       "--input", str(tmp_path / "s.bin"),
                       "--warmup", "1", "--iters", "2",
                       "--compare-voxel-only"])
        assert rc == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert lines[0] == "variant,mean_ms,throughput,iters,warmup"
        assert lines[1].startswith("full,")
        assert lines[2].startswith("voxel_only,")
        assert lines[3].startswith("ratio,")


class TestAnalyze:
    def test_ablate_writes_table(self, trained_dir, tmp_path, capsys):
        root, cfg, out = trained_dir
        dest = tmp_path / "ab"
        rc = cli.main(["analyze", "ablate", "--config", cfg, "--out",
                       str(dest), "--desk-scale", "--seed", "0"])
        assert rc == 0
        lines = (dest / "ablation.csv").read_text().strip().splitlines()
        assert lines[0] == "variant,hypernet,rel_pos,stage_code,miou,macc"
        assert [l.split(",")[0] for l in lines[1:]] == list(
            __import__("geopool.experiments", fromlist=["LADDER"]).LADDER)

    def test_pool_hist_needs_heldout(self, trained_dir, tmp_path, capsys):
        root, cfg, out = trained_dir
        bare = write_cfg(tmp_path / "bare.cfg",
                         SMOKE_CFG.replace("heldout = synth:camera:1:60\n", ""))
        rc = cli.main(["analyze", "pool-hist", "--model",
                       str(out / "model.ckpt"), "--pools",
                       str(out / "pools.bin"), "--config", bare,
                       "--out", str(tmp_path / "h")])
        assert rc == 2
        assert "heldout" in capsys.readouterr().err

    def test_pool_hist_csv(self, trained_dir, tmp_path, capsys):
        root, cfg, out = trained_dir
        dest = tmp_path / "hist"
        rc = cli.main(["analyze", "pool-hist", "--model",
                       str(out / "model.ckpt"), "--pools",
                       str(out / "pools.bin"), "--config", cfg,
                       "--out", str(dest)])
        assert rc == 0
        lines = (dest / "pool_hist.csv").read_text().strip().splitlines()
        assert lines[0] == "sensor,stage,bin_lo,bin_hi,count"
        assert len(lines) > 1
        assert "median max-similarity" in capsys.readouterr().out
