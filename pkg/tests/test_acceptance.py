"""Acceptance criteria, one marked group per criterion.

A summary line per criterion is printed at the end of the pytest run.
"""
import struct
import time

import numpy as np
import pytest

from conftest import rel_err
from test_objectives import nested_fd_param_grad, np_penalty
from ganova import autodiff as ad
from ganova import data as gd
from ganova import eval as ev
from ganova import objectives as ob
from ganova import training as tr
from ganova.gradcheck import FIRST_ORDER, SECOND_ORDER, run_gradcheck

MIXTURE_SEEDS = (0, 1, 2)


def criterion(number, title):
    return pytest.mark.criterion(number, title)


def detail(request, text):
    request.node.user_properties.append(("detail", text))


def mnist_available():
    root = gd.mnist_dir()
    return all((root / name).is_file() for pair in gd.MNIST_FILES.values() for name in pair)


needs_mnist = pytest.mark.skipif(not mnist_available(),
                                 reason="MNIST IDX files not found (set GANOVA_DATA_DIR)")


def mixture_for(cfg):
    return gd.mixture_dataset(cfg.n_classes, cfg.per_class, cfg.sigma, np.random.default_rng(cfg.data_seed))


# ------------------------------------------------------------------ 1


@criterion(1, "first-order gradient checks, rel err <= 1e-5, under 60 s")
class TestGradientCorrectness:
    def test_every_primitive(self, request):
        start = time.perf_counter()
        results = run_gradcheck(points=10, seed=0)
        elapsed = time.perf_counter() - start
        first = [r for r in results if r.op in FIRST_ORDER]
        worst = max(r.worst for r in first)
        detail(request, f"{len(first)} ops, worst {worst:.1e}, {elapsed:.1f} s")
        assert set(ad.BACKWARD) - {"leaf"} <= {r.op for r in first}
        assert all(r.tol == 1e-5 for r in first)
        assert [r.op for r in first if not r.passed] == []
        assert elapsed < 60.0


# ------------------------------------------------------------------ 2


@criterion(2, "gradient-penalty parameter gradient vs nested FD (1e-4), linear cases (1e-10)")
class TestSecondOrder:
    def test_two_layer_critic_nested_fd(self, request):
        rng = np.random.default_rng(7)
        d, h, n, m = 3, 5, 3, 6
        theta = [rng.standard_normal((d, h)), 0.1 * rng.standard_normal(h),
                 rng.standard_normal((h, n)), 0.1 * rng.standard_normal(n)]
        x = rng.standard_normal((m, d))
        labels = rng.integers(0, n, m)
        tape = ad.Tape()
        ps = [tape.watch(p) for p in theta]

        def critic(v):
            return ad.add_bias(ad.matmul(ad.tanh(ad.add_bias(ad.matmul(v, ps[0]), ps[1])), ps[2]), ps[3])

        pen = ob.gradient_penalty(critic, tape.watch(x), labels, ob.TargetScheme(ob.EM, n), tape)
        grads = ad.backward(pen.loss, tape)
        analytic = [grads[p].values if p in grads else np.zeros(p.shape) for p in ps]
        errs = [rel_err(a, b) for a, b in zip(analytic, nested_fd_param_grad(theta, x, labels))]
        detail(request, f"worst {max(errs):.1e}")
        assert abs(pen.value - np_penalty(theta, x, labels)) <= 1e-8 * max(1.0, pen.value)
        assert max(errs) <= 1e-4

    def test_engine_self_check(self):
        results = run_gradcheck(points=3, seed=1)
        assert all(r.passed for r in results if r.op in SECOND_ORDER)

    @pytest.mark.parametrize("w,expect", [([[0.6], [0.8]], 0.0), ([[3.0], [0.0]], 4.0),
                                          ([[0.0], [0.0], [1.0]], 0.0), ([[2.0], [-2.0], [1.0]], 4.0)])
    def test_linear_critic(self, w, expect):
        w = np.array(w)
        x = np.random.default_rng(3).standard_normal((8, w.shape[0]))
        tape = ad.Tape()
        wt = tape.watch(w)
        pen = ob.gradient_penalty(lambda v: ad.matmul(v, wt), tape.watch(x), [0] * 8,
                                  ob.TargetScheme(ob.EM, 1), tape)
        assert abs(pen.value - expect) <= 1e-10


# ------------------------------------------------------------------ 3


@criterion(3, "single-class reductions: EM = WGAN (1e-12), JS = 2-class softmax (1e-9)")
class TestReductions:
    def test_em_matches_wgan(self, request):
        rng = np.random.default_rng(11)
        s = ob.TargetScheme(ob.EM, 1)
        worst = 0.0
        for _ in range(200):
            m = int(rng.integers(1, 65))
            r, f = 3 * rng.standard_normal((m, 1)), 3 * rng.standard_normal((m, 1))
            zeros = np.zeros(m, dtype=int)
            d = ob.loss_d_em(ad.Tensor(r), ad.Tensor(f), zeros, zeros, s, cfg=ob.PenaltyConfig(0.0)).value
            g = ob.loss_g_em(ad.Tensor(f), zeros, s).value
            worst = max(worst, abs(d - (f.mean() - r.mean())), abs(g + f.mean()),
                        abs(d - ob.loss_wgan_d(ad.Tensor(r), ad.Tensor(f)).value),
                        abs(g - ob.loss_wgan_g(ad.Tensor(f)).value))
        detail(request, f"worst {worst:.1e}")
        assert worst <= 1e-12

    def test_js_matches_two_class_softmax(self, request):
        rng = np.random.default_rng(12)
        s = ob.TargetScheme(ob.JS, 1)
        worst = 0.0
        for _ in range(200):
            m = int(rng.integers(1, 65))
            lr, lf = 4 * rng.standard_normal((m, 2)), 4 * rng.standard_normal((m, 2))
            zeros = np.zeros(m, dtype=int)
            # real rows should be class 0 and fake rows class 1 of a 2-way softmax
            log_real = lr[:, 0] - np.logaddexp(lr[:, 0], lr[:, 1])
            log_fake = lf[:, 1] - np.logaddexp(lf[:, 0], lf[:, 1])
            expect_d = -(np.sum(log_real) + np.sum(log_fake)) / (2 * m)
            expect_g = -np.mean(lf[:, 0] - np.logaddexp(lf[:, 0], lf[:, 1]))
            d = ob.loss_d_js(ad.Tensor(lr), ad.Tensor(lf), zeros, zeros, s).value
            g = ob.loss_g_js(ad.Tensor(lf), zeros, s).value
            worst = max(worst, abs(d - expect_d), abs(g - expect_g))
        detail(request, f"worst {worst:.1e}")
        assert worst <= 1e-9


# ---------------------------------------------------------------- 4, 5


@pytest.fixture(scope="module")
def mixture_runs():
    """Full-size EM runs on the 4-class mixture, one per seed."""
    runs = []
    for seed in MIXTURE_SEEDS:
        cfg = tr.TrainConfig(method="em", dataset="mixture", m=100, k=5, lam=10.0, iters=5000, seed=seed)
        ds = mixture_for(cfg)
        start = time.perf_counter()
        res = tr.train(cfg, ds)
        elapsed = time.perf_counter() - start
        gen = ev.ConditionalGenerator.from_bundle(res.bundle)
        report = ev.conditional_fidelity(gen.sample, ds, 1000, np.random.default_rng(100 + seed))
        runs.append({"seed": seed, "seconds": elapsed, "report": report, "rows": res.rows})
    return runs


@criterion(4, "mixture conditional fidelity >= 0.90, class-mean error <= 0.10, <= 15 min (median of 3 seeds)")
class TestConditionalGeneration:
    def test_fidelity_and_mean_error(self, mixture_runs, request):
        fid = [r["report"].fidelity for r in mixture_runs]
        err = [float(r["report"].mean_error.max()) for r in mixture_runs]
        secs = [r["seconds"] for r in mixture_runs]
        detail(request, "fidelity " + ", ".join(f"{v:.3f}" for v in fid)
               + " | worst class error " + ", ".join(f"{v:.3f}" for v in err)
               + " | seconds " + ", ".join(f"{v:.0f}" for v in secs))
        assert np.median(fid) >= 0.90
        assert np.median(err) <= 0.10
        assert np.median(secs) <= 15 * 60


@criterion(5, "smoothed W estimate over last 10% <= 50% of first 10% (median of 3 seeds)")
class TestConvergenceTrend:
    def test_wasserstein_drop(self, mixture_runs, request):
        ratios = []
        for run in mixture_runs:
            curve = ev.wasserstein_estimate(run["rows"])
            tenth = len(curve.smoothed) // 10
            first, last = curve.smoothed[:tenth].mean(), curve.smoothed[-tenth:].mean()
            ratios.append(last / first)
        detail(request, "ratio " + ", ".join(f"{v:.3f}" for v in ratios))
        assert np.median(ratios) <= 0.5


# ------------------------------------------------------------------ 6


def mnist_js_config(**kw):
    base = dict(method="js", dataset="mnist", n_classes=10, m=100, k=1)
    base.update(kw)
    return tr.TrainConfig(**base)


def synthetic_idx_dir(root, per_class=60, seed=0):
    """Digit-shaped IDX files: one bright 10x10 block per class at a class-specific spot."""
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(10), per_class)
    rng.shuffle(labels)
    pix = rng.integers(0, 40, (labels.size, 28, 28)).astype(np.uint8)
    for i, c in enumerate(labels):
        r, q = divmod(int(c), 4)
        pix[i, 2 + 8 * r:12 + 8 * r, 2 + 6 * q:12 + 6 * q] = 255
    for prefix in ("train", "t10k"):
        gd.write_idx_images(root / f"{prefix}-images-idx3-ubyte", pix)
        gd.write_idx_labels(root / f"{prefix}-labels-idx1-ubyte", labels)
    return root


@criterion(6, "MNIST JS smoke: 1 epoch finite with the reference MLP and Adam(1e-4, 0, 0.9)")
class TestMnistSmoke:
    def test_reference_hyperparameters(self):
        cfg = mnist_js_config(iters=1)
        assert (cfg.lr_g, cfg.beta1_g, cfg.beta2_g) == (1e-4, 0.0, 0.9)
        assert (cfg.lr_d, cfg.beta1_d, cfg.beta2_d) == (1e-4, 0.0, 0.9)
        assert cfg.hidden_d == [512] * 4 and cfg.critic_width == 11

    @needs_mnist
    def test_one_epoch_real_data(self, request):
        ds = gd.load_mnist(split="train")
        cfg = mnist_js_config(iters=gd.iterations_per_epoch(len(ds), 100, 1))
        start = time.perf_counter()
        rows = tr.train(cfg, ds).rows
        detail(request, f"{len(rows)} iterations in {time.perf_counter() - start:.0f} s")
        assert len(rows) == cfg.iters and all(r.finite() for r in rows)

    def test_one_epoch_synthetic_idx(self, tmp_path, request):
        ds = gd.load_mnist(synthetic_idx_dir(tmp_path), "full")
        cfg = mnist_js_config(iters=gd.iterations_per_epoch(len(ds), 100, 1))
        rows = tr.train(cfg, ds).rows
        detail(request, f"synthetic IDX, {len(rows)} iterations")
        assert len(rows) == cfg.iters and all(r.finite() for r in rows)

    @pytest.mark.slow
    @needs_mnist
    def test_ten_epochs_oracle_accuracy(self, request):
        train_ds = gd.load_mnist(split="train")
        cfg = mnist_js_config(iters=10 * gd.iterations_per_epoch(len(train_ds), 100, 1))
        gen = ev.ConditionalGenerator.from_bundle(tr.train(cfg, train_ds).bundle)
        oracle = ev.train_oracle(train_ds, gd.load_mnist(split="test"), seed=0)
        report = ev.conditional_fidelity(gen.sample, train_ds, 500, np.random.default_rng(0), oracle)
        detail(request, f"oracle {oracle.accuracy:.3f}, conditional accuracy {report.fidelity:.3f}")
        assert report.fidelity >= 0.70


# ------------------------------------------------------------------ 7


@criterion(7, "identical config and seed give bit-identical checkpoints at iteration 100 and PGMs")
class TestDeterminism:
    @pytest.mark.parametrize("method", ["em", "js"])
    def test_checkpoint_and_pgm_bytes(self, tmp_path, method):
        outputs = []
        for run in range(2):
            path = tmp_path / "c.gova"
            cfg = tr.TrainConfig(method=method, iters=100, seed=5, checkpoint=str(path))
            tr.train(cfg, mixture_for(cfg))
            gen = ev.ConditionalGenerator.from_bundle(tr.load_checkpoint(path))
            pgm = ev.render_grid_pgm(gen.generate(2, 16, 3), 4, 4, tmp_path / f"g{run}.pgm")
            outputs.append((path.read_bytes(), pgm.read_bytes()))
            path.unlink()
        assert outputs[0][0] == outputs[1][0]
        assert outputs[0][1] == outputs[1][1]


# ------------------------------------------------------------------ 8


def _corrupt_magic(root):
    gd.write_idx_labels(root / "f", np.array([1, 2]))
    return lambda: gd.load_idx_images(root / "f"), gd.IdxMagicError


def _corrupt_truncated(root):
    gd.write_idx_images(root / "f", np.zeros((10, 28, 28), dtype=np.uint8))
    (root / "f").write_bytes((root / "f").read_bytes()[:-784])
    return lambda: gd.load_idx_images(root / "f"), gd.IdxTruncatedError


def _corrupt_dimension(root):
    (root / "f").write_bytes(struct.pack(">iIII", gd.IDX_IMAGE_MAGIC, 2**31, 28, 28))
    return lambda: gd.load_idx_images(root / "f"), gd.IdxDimensionError


def _corrupt_trailing(root):
    gd.write_idx_labels(root / "f", np.array([1, 2]))
    (root / "f").write_bytes((root / "f").read_bytes() + b"\x07")
    return lambda: gd.load_idx_labels(root / "f"), gd.IdxTrailingDataError


def _corrupt_count(root):
    gd.write_idx_images(root / "train-images-idx3-ubyte", np.zeros((3, 28, 28), dtype=np.uint8))
    gd.write_idx_labels(root / "train-labels-idx1-ubyte", np.array([0, 1]))
    return lambda: gd.load_mnist(root, "full"), gd.IdxCountMismatchError


@criterion(8, "IDX loader accepts MNIST, rejects 5 corruptions by kind; resume is bit-exact")
class TestFormatFidelity:
    @needs_mnist
    def test_official_files(self):
        full, test = gd.load_mnist(split="full"), gd.load_mnist(split="test")
        assert (len(full), len(test)) == (60000, 10000)
        assert full.samples.shape[1] == 784 and full.samples.min() >= -1 and full.samples.max() <= 1
        assert len(gd.load_mnist(split="train")) + len(gd.load_mnist(split="holdout")) == 60000

    @pytest.mark.parametrize("make", [_corrupt_magic, _corrupt_truncated, _corrupt_dimension,
                                      _corrupt_trailing, _corrupt_count],
                             ids=["magic", "truncated", "dimension", "trailing", "count"])
    def test_corruption_kind(self, tmp_path, make):
        load, kind = make(tmp_path)
        with pytest.raises(gd.IdxError) as info:
            load()
        assert type(info.value) is kind

    @pytest.mark.parametrize("method", ["em", "js"])
    def test_resume_bit_exact(self, tmp_path, method):
        def run(iters, name, resume=None):
            cfg = tr.TrainConfig(method=method, iters=iters, seed=2, checkpoint=str(tmp_path / name))
            tr.train(cfg, mixture_for(cfg), resume=resume)
            return tmp_path / name

        full = tr.load_checkpoint(run(40, "full.gova"))
        resumed = tr.load_checkpoint(run(40, "resumed.gova", tr.load_checkpoint(run(20, "half.gova"))))
        assert full.iteration == resumed.iteration == 40
        for a, b in ((full.gen, resumed.gen), (full.critic, resumed.critic),
                     (full.adam_g.m, resumed.adam_g.m), (full.adam_d.v, resumed.adam_d.v)):
            for key in a:
                assert a[key].tobytes() == b[key].tobytes()
        assert full.rng_state == resumed.rng_state
        assert (full.adam_g.t, full.adam_d.t) == (resumed.adam_g.t, resumed.adam_d.t)


# ------------------------------------------------------------------ 9


@pytest.fixture(scope="module")
def trained_generator(tmp_path_factory):
    path = tmp_path_factory.mktemp("probe") / "c.gova"
    cfg = tr.TrainConfig(method="em", iters=30, checkpoint=str(path))
    tr.train(cfg, mixture_for(cfg))
    return ev.ConditionalGenerator.from_bundle(tr.load_checkpoint(path))


@criterion(9, "sweep and interpolation endpoints equal direct generation; default sweep [0.5, 1.85]")
class TestProbeMechanics:
    def test_default_range(self):
        spec = ev.SweepSpec(0)
        assert (spec.code_min, spec.code_max) == (0.5, 1.85)

    @pytest.mark.parametrize("cls,seed", [(0, 0), (3, 17)])
    def test_sweep_endpoints(self, trained_generator, cls, seed):
        gen = trained_generator
        spec = ev.SweepSpec(cls, seed=seed)
        out = ev.condition_sweep(gen, spec, gen.n_classes)
        z = gen.noise(1, seed)
        for row, value in ((0, spec.code_min), (-1, spec.code_max)):
            code = np.zeros((1, gen.n_classes))
            code[0, cls] = value
            assert out[row].tobytes() == gen(z, code)[0].tobytes()

    @pytest.mark.parametrize("a,b,seed", [(0, 1, 4), (3, 2, 9)])
    def test_interpolation_endpoints(self, trained_generator, a, b, seed):
        gen = trained_generator
        out = ev.condition_interpolation(gen, a, b, 10, seed=seed)
        assert out[0].tobytes() == gen.generate(a, 1, seed)[0].tobytes()
        assert out[-1].tobytes() == gen.generate(b, 1, seed)[0].tobytes()
