import numpy as np
import pytest

import geopool.experiments as ex
import geopool.model as gm
import geopool.training as tr
from geopool.pointcloud import SensorKind

# micro versions of the study knobs so the whole file stays in seconds
MICRO = dict(extent=1.5, n_objects=2, density=60.0)


def micro_config(**ov):
    base = dict(voxel_size=0.25, k=4, patch_cap=64, pool_capacities=(4, 6),
                num_classes=4)
    base.update(ov)
    return gm.desk_config(divisor=4, stages=2, **base)


def micro_data(n_train=2, n_heldout=1):
    cam = ex.synth_dataset(SensorKind.CameraLike, "cam", range(100, 100 + n_train), **MICRO)
    lid = ex.synth_dataset(SensorKind.LidarLike, "lid", range(200, 200 + n_train), **MICRO)
    held = (ex.synth_dataset(SensorKind.CameraLike, "cam", range(300, 300 + n_heldout), **MICRO).scenes
            + ex.synth_dataset(SensorKind.LidarLike, "lid", range(400, 400 + n_heldout), **MICRO).scenes)
    return [cam, lid], held


class TestVariants:
    def test_ladder_labels_exist(self):
        for label in ex.LADDER:
            assert label in ex.VARIANTS

    def test_ladder_enables_flags_cumulatively(self):
        # each rung clears strictly fewer flags than the one before it
        flags = ("use_hypernet", "use_rel_pos", "use_stage_code")
        cleared = [sum(1 for f in flags if not ex.VARIANTS[l].get(f, True))
                   for l in ex.LADDER]
        assert cleared == [3, 2, 1, 0]

    def test_voxel_only_is_a_pure_backbone(self):
        d = ex.VARIANTS["voxel_only"]
        assert d["use_fusion"] is False
        assert d["mu"] == 0.0  # no auxiliary loss leaking into the baseline

    def test_full_is_the_unmodified_config(self):
        assert ex.VARIANTS["full"] == {}


class TestSynthData:
    def test_dataset_shape_and_sensor(self):
        ds = ex.synth_dataset(SensorKind.CameraLike, "cam", range(3), **MICRO)
        assert ds.name == "cam" and len(ds.scenes) == 3
        for sc in ds.scenes:
            assert sc.sensor.kind is SensorKind.CameraLike
            assert sc.sensor.dataset == "cam"
            assert sc.labels is not None and len(sc.labels) == len(sc.positions)

    def test_scene_seeds_are_fixed(self):
        (cam1, _), h1 = ex.benchmark_data(n_train=1, n_heldout=1, **MICRO)
        (cam2, _), h2 = ex.benchmark_data(n_train=1, n_heldout=1, **MICRO)
        np.testing.assert_array_equal(cam1.scenes[0].positions,
                                      cam2.scenes[0].positions)
        np.testing.assert_array_equal(h1[0].positions, h2[0].positions)

    def test_heldout_mixes_both_kinds(self):
        _, held = ex.benchmark_data(n_train=1, n_heldout=1, **MICRO)
        kinds = {sc.sensor.kind for sc in held}
        assert kinds == {SensorKind.CameraLike, SensorKind.LidarLike}


class TestQualityStudy:
    def test_scores_shape_and_median(self):
        data = micro_data()
        scores = ex.quality_study(variants=("voxel_only", "full"),
                                  seeds=(0,), config=micro_config(),
                                  epochs=1, lr=0.01, data=data)
        assert set(scores) == {"voxel_only", "full"}
        for s in scores.values():
            assert len(s.per_seed) == 1
            assert s.miou == s.per_seed[0].miou  # single seed: median is it
            assert 0.0 <= s.miou <= 1.0

    def test_format_scores_orders_rows(self):
        scores = {"b": ex.VariantScore("b", 0.5, 0.6, []),
                  "a": ex.VariantScore("a", 0.25, 0.3, [])}
        txt = ex.format_scores(scores, order=("a", "b"))
        lines = txt.strip().splitlines()
        assert lines[0] == "variant,miou,macc"
        assert lines[1].startswith("a,0.25") and lines[2].startswith("b,0.5")


class TestSensorPoolStudy:
    def test_per_stage_similarities(self):
        cfg = micro_config()
        # enough steps that the seeded sampler visits all three datasets
        res, rows = ex.sensor_pool_study(config=cfg, seed=0, n_scenes=2,
                                         epochs=3, lr=0.01, **MICRO)
        assert [r.stage for r in rows] == list(range(cfg.stages))
        for r in rows:
            assert -1.0 <= r.cam_cam <= 1.0 and -1.0 <= r.cam_lidar <= 1.0
        # per-dataset sharing: three distinct pools at stage 0
        keys = {k for k, _ in res.registry.items() if k[-1] == 0}
        assert len(keys) == 3


@pytest.fixture(scope="module")
def trained():
    datasets, held = micro_data()
    cfg = micro_config()
    res = tr.train(cfg, datasets, epochs=2, heldout=held, lr=0.01)
    return res, held


class TestRepresentativeness:
    def test_stats_keys_and_hist(self, trained):
        res, held = trained
        stats = ex.pool_representativeness(res.params, res.registry, held)
        sensors = {sc.sensor for sc in held}
        assert set(stats) == {(sn, s) for sn in sensors
                              for s in range(res.params.config.stages)}
        for st in stats.values():
            assert st.hist.sum() == len(st.similarities)
            assert -1.0 <= st.median <= 1.0

    def test_overall_median_pools_everything(self, trained):
        res, held = trained
        stats = ex.pool_representativeness(res.params, res.registry, held)
        med = ex.overall_median_similarity(stats)
        allsims = np.concatenate([st.similarities for st in stats.values()])
        assert med == pytest.approx(float(np.median(allsims)))

    def test_format_hist_rows(self, trained):
        res, held = trained
        stats = ex.pool_representativeness(res.params, res.registry, held)
        lines = ex.format_hist(stats).strip().splitlines()
        assert lines[0] == "sensor,stage,bin_lo,bin_hi,count"
        assert len(lines) == 1 + 20 * len(stats)
        # counts reproduce the histogram
        assert sum(int(l.rsplit(",", 1)[1]) for l in lines[1:]) \
            == sum(len(st.similarities) for st in stats.values())

    def test_counters_stay_quiet_on_pools(self, trained):
        from geopool.instrumentation import counters
        res, held = trained
        counters.reset()
        ex.pool_representativeness(res.params, res.registry, held)
        assert counters.pool_mutations == 0  # frozen pools are read-only
