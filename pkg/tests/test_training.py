import numpy as np
import pytest

from ganova import autodiff as ad
from ganova import training as tr
from ganova.data import Dataset, mixture_dataset
from ganova.nn import ConfigError
from ganova.objectives import LossBundle


def tiny_cfg(**kw):
    base = dict(iters=20, m=20, hidden_g=[16], hidden_d=[16], noise_dim=8, per_class=50)
    base.update(kw)
    return tr.TrainConfig(**base)


def mixture_for(cfg):
    return mixture_dataset(cfg.n_classes, cfg.per_class, cfg.sigma, np.random.default_rng(cfg.data_seed))


def assert_bundles_equal(a, b):
    assert a.iteration == b.iteration
    for x, y in ((a.gen, b.gen), (a.critic, b.critic), (a.adam_g.m, b.adam_g.m), (a.adam_g.v, b.adam_g.v),
                 (a.adam_d.m, b.adam_d.m), (a.adam_d.v, b.adam_d.v)):
        assert x.keys() == y.keys()
        for k in x:
            np.testing.assert_array_equal(x[k], y[k])
    assert (a.adam_g.t, a.adam_d.t) == (b.adam_g.t, b.adam_d.t)
    assert a.rng_state == b.rng_state


class TestConfig:
    def test_method_defaults(self):
        assert tiny_cfg(method="em").k == 5
        assert tiny_cfg(method="js").k == 1
        assert tiny_cfg(method="acgan").k == 1
        assert tr.TrainConfig(dataset="mnist", n_classes=10).hidden_d == [512] * 4

    def test_learning_rate_presets(self):
        mnist = tr.TrainConfig(dataset="mnist", n_classes=10, method="js")
        assert (mnist.lr_g, mnist.lr_d) == (1e-4, 1e-4)
        assert (tiny_cfg().lr_g, tiny_cfg().lr_d) == (2e-5, 1e-3)
        assert tiny_cfg(lr_g=5e-4).lr_g == 5e-4

    def test_dropout_presets(self):
        assert tr.TrainConfig(dataset="mnist", n_classes=10).dropout == 0.3
        assert tiny_cfg().dropout == 0.0
        assert tiny_cfg(dropout=0.2).critic_spec().dropout[0] == 0.2

    @pytest.mark.parametrize("kw", [dict(method="kl"), dict(dataset="cifar"), dict(m=0), dict(iters=0),
                                    dict(lam=-1.0), dict(lr_g=-1e-4), dict(beta2_d=1.0), dict(noise_dim=0)])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            tiny_cfg(**kw)

    def test_from_dict_names_unknown_keys(self):
        with pytest.raises(ConfigError, match="learning_rate"):
            tr.TrainConfig.from_dict({"learning_rate": 1.0})

    def test_dict_round_trip(self):
        cfg = tiny_cfg(seed=3)
        assert tr.TrainConfig.from_dict(cfg.to_dict()) == cfg

    def test_dataset_mismatch(self):
        cfg = tiny_cfg()
        with pytest.raises(ConfigError):
            tr.Trainer(cfg, mixture_dataset(3, 10, 0.05, np.random.default_rng(0)))
        with pytest.raises(ConfigError):
            tr.Trainer(cfg, Dataset(np.zeros((8, 2)), np.arange(8) % 4, 4, "mnist"))


class TestTrainingLoop:
    @pytest.mark.parametrize("method,k", [("js", 1), ("em", 5), ("acgan", 1)])
    def test_update_counts(self, method, k):
        cfg = tiny_cfg(method=method, iters=7)
        res = tr.train(cfg, mixture_for(cfg))
        assert res.bundle.adam_g.t == 7
        assert res.bundle.adam_d.t == 7 * k
        assert [r.iter for r in res.rows] == list(range(1, 8))

    def test_em_rows_carry_gap(self):
        cfg = tiny_cfg(method="em", iters=3)
        rows = tr.train(cfg, mixture_for(cfg)).rows
        assert all(r.w_estimate is not None and r.penalty is not None for r in rows)

    def test_js_rows_have_no_gap(self):
        cfg = tiny_cfg(method="js", iters=3)
        rows = tr.train(cfg, mixture_for(cfg)).rows
        assert all(r.w_estimate is None and r.penalty is None for r in rows)

    def test_fresh_batch_per_critic_step(self, monkeypatch):
        cfg = tiny_cfg(method="em", iters=2)
        seen = []
        orig = tr.BatchIterator.__next__

        def spy(self):
            b = orig(self)
            seen.append(b.samples.values.copy())
            return b

        monkeypatch.setattr(tr.BatchIterator, "__next__", spy)
        tr.train(cfg, mixture_for(cfg))
        assert len(seen) == 10
        for i in range(len(seen) - 1):
            assert not np.array_equal(seen[i], seen[i + 1])

    def test_log_interval(self, tmp_path):
        cfg = tiny_cfg(iters=10, log_interval=3, metrics=str(tmp_path / "m.csv"))
        res = tr.train(cfg, mixture_for(cfg))
        assert [r.iter for r in res.rows] == [3, 6, 9, 10]
        assert [r.iter for r in tr.read_metrics(cfg.metrics)] == [3, 6, 9, 10]

    def test_determinism(self, tmp_path):
        path = tmp_path / "a.gova"
        cfg = tiny_cfg(method="em", iters=100, checkpoint=str(path))
        tr.train(cfg, mixture_for(cfg))
        first = path.read_bytes()
        path.unlink()
        tr.train(tiny_cfg(method="em", iters=100, checkpoint=str(path)), mixture_for(cfg))
        assert path.read_bytes() == first

    def test_different_seeds_differ(self):
        a = tr.train(tiny_cfg(iters=2, seed=0), mixture_for(tiny_cfg())).bundle
        b = tr.train(tiny_cfg(iters=2, seed=1), mixture_for(tiny_cfg())).bundle
        assert not np.array_equal(a.gen["weight_0"], b.gen["weight_0"])

    def test_non_finite_abort_keeps_last_checkpoint(self, tmp_path, monkeypatch):
        ckpt = tmp_path / "c.gova"
        cfg = tiny_cfg(method="em", iters=6, checkpoint=str(ckpt), checkpoint_interval=2,
                       metrics=str(tmp_path / "m.csv"))
        calls = {"n": 0}
        orig = tr.loss_g_em

        def poisoned(*args, **kw):
            calls["n"] += 1
            if calls["n"] == 5:
                return LossBundle(ad.Tensor(np.array(np.nan)))
            return orig(*args, **kw)

        monkeypatch.setattr(tr, "loss_g_em", poisoned)
        with pytest.raises(tr.NonFiniteLossError) as info:
            tr.train(cfg, mixture_for(cfg))
        assert info.value.row.iter == 5
        assert tr.load_checkpoint(ckpt).iteration == 4
        assert [r.iter for r in tr.read_metrics(cfg.metrics)] == [1, 2, 3, 4]


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        cfg = tiny_cfg(method="em", iters=3)
        bundle = tr.train(cfg, mixture_for(cfg)).bundle
        tr.save_checkpoint(bundle, tmp_path / "c.gova")
        loaded = tr.load_checkpoint(tmp_path / "c.gova")
        assert_bundles_equal(bundle, loaded)
        assert loaded.config == cfg
        np.testing.assert_array_equal(loaded.batch_perm, bundle.batch_perm)
        assert loaded.batch_pos == bundle.batch_pos

    @pytest.mark.parametrize("method", ["em", "js"])
    def test_resume_matches_uninterrupted(self, tmp_path, method):
        full_cfg = tiny_cfg(method=method, iters=100, checkpoint=str(tmp_path / "full.gova"))
        tr.train(full_cfg, mixture_for(full_cfg))
        half_cfg = tiny_cfg(method=method, iters=50, checkpoint=str(tmp_path / "half.gova"))
        tr.train(half_cfg, mixture_for(half_cfg))
        resume = tr.load_checkpoint(tmp_path / "half.gova")
        rest_cfg = tiny_cfg(method=method, iters=100, checkpoint=str(tmp_path / "resumed.gova"))
        tr.train(rest_cfg, mixture_for(rest_cfg), resume=resume)
        assert_bundles_equal(tr.load_checkpoint(tmp_path / "full.gova"),
                             tr.load_checkpoint(tmp_path / "resumed.gova"))

    def _saved(self, tmp_path):
        cfg = tiny_cfg(iters=1)
        path = tmp_path / "c.gova"
        tr.save_checkpoint(tr.train(cfg, mixture_for(cfg)).bundle, path)
        return path

    def test_magic_mismatch(self, tmp_path):
        path = self._saved(tmp_path)
        path.write_bytes(b"XOVA" + path.read_bytes()[4:])
        with pytest.raises(tr.MagicMismatchError):
            tr.load_checkpoint(path)

    def test_version_mismatch(self, tmp_path):
        path = self._saved(tmp_path)
        raw = path.read_bytes()
        path.write_bytes(raw[:4] + bytes([tr.FORMAT_VERSION + 1]) + raw[5:])
        with pytest.raises(tr.VersionMismatchError):
            tr.load_checkpoint(path)

    @pytest.mark.parametrize("keep", [3, 7, 100, -1])
    def test_truncated(self, tmp_path, keep):
        path = self._saved(tmp_path)
        raw = path.read_bytes()
        path.write_bytes(raw[:keep])
        with pytest.raises(tr.TruncatedCheckpointError):
            tr.load_checkpoint(path)

    def test_trailing_bytes(self, tmp_path):
        path = self._saved(tmp_path)
        path.write_bytes(path.read_bytes() + b"\0")
        with pytest.raises(tr.CheckpointError):
            tr.load_checkpoint(path)

    def test_container_layout(self, tmp_path):
        path = tmp_path / "t.gova"
        tr.write_gova(path, {"kind": "x"}, {"a": np.array([[1.5, -2.0]])})
        raw = path.read_bytes()
        assert raw[:4] == b"GOVA" and raw[4] == tr.FORMAT_VERSION
        assert raw[-16:] == np.array([1.5, -2.0], dtype="<f8").tobytes()
        meta, tensors = tr.read_gova(path)
        assert meta == {"kind": "x"}
        np.testing.assert_array_equal(tensors["a"], [[1.5, -2.0]])


class TestMetrics:
    def test_csv_format(self, tmp_path):
        path = tmp_path / "m.csv"
        w = tr.MetricsWriter(path)
        w.write(tr.MetricsRow(1, 0.5, 0.25, None, None, 0.1))
        w.write(tr.MetricsRow(2, 0.5, 0.25, 1.0, 0.01, 0.2))
        w.close()
        lines = path.read_text().splitlines()
        assert lines[0] == "iter,d_loss,g_loss,w_estimate,penalty,seconds"
        assert lines[1].split(",")[3:5] == ["", ""]
        rows = tr.read_metrics(path)
        assert rows[0].w_estimate is None and rows[1].w_estimate == 1.0

    def test_append_only(self, tmp_path):
        path = tmp_path / "m.csv"
        for i in (1, 2):
            w = tr.MetricsWriter(path)
            w.write(tr.MetricsRow(i, 0.0, 0.0, None, None, 0.0))
            w.close()
        assert path.read_text().count("iter,") == 1
        assert [r.iter for r in tr.read_metrics(path)] == [1, 2]

    def test_finite(self):
        assert tr.MetricsRow(1, 0.0, 0.0, None, None, 0.0).finite()
        assert not tr.MetricsRow(1, 0.0, float("inf"), None, None, 0.0).finite()
        assert not tr.MetricsRow(1, 0.0, 0.0, float("nan"), 0.0, 0.0).finite()
