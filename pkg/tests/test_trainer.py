import math

import numpy as np
import pytest

from dsfuse.errors import NumericalError, UsageError
from dsfuse.fusion import dempster_fuse, dempster_fuse_backward
from dsfuse.losses import LossWeights, multitask_loss
from dsfuse.nn import ModelConfig, init_model, load_checkpoint
from dsfuse.synth import PhantomConfig, generate_dataset, read_manifest
from dsfuse.training import METHODS, AugmentConfig, TrainConfig, evaluate, init_branches, train
from dsfuse.training import loop
from dsfuse.training.check import graph_grad_check
from dsfuse.training.loop import MethodSummary

TINY = PhantomConfig(dims=(8, 16, 16), lesion_count=(1, 2), lesion_radius=(2.0, 3.0))
TINY_MODEL = ModelConfig(levels=2, base_channels=2)


@pytest.fixture(scope="module")
def manifest(tmp_path_factory):
    # 6 cases -> 4 train, 1 val, 1 test
    return generate_dataset(TINY, 6, 21, tmp_path_factory.mktemp("tiny"))


@pytest.fixture(scope="module")
def graph():
    rng = np.random.default_rng(8)
    mcfg = ModelConfig(levels=2, base_channels=2)
    ma, mb = init_model(mcfg, 1, np.float64), init_model(mcfg, 2, np.float64)
    x_a, x_b = rng.standard_normal((2, 8, 8, 8))
    mask = np.zeros((8, 8, 8))
    mask[2:5, 3:6, 2:6] = 1
    return ma, mb, x_a, x_b, mask


@pytest.fixture(scope="module")
def table(manifest):
    a, b = init_model(TINY_MODEL, 0), init_model(TINY_MODEL, 1)
    return evaluate(a, b, manifest, "train")


def cfg(**kw):
    base = dict(epochs=2, lr=3e-3, seed=4, model=TINY_MODEL, augment=AugmentConfig())
    base.update(kw)
    return TrainConfig(**base)


class TestTrain:
    def test_loss_decreases(self, manifest):
        _, _, hist = train(cfg(), manifest, evaluate_test=False)
        assert len(hist.epochs) == 2
        assert hist.epochs[1].loss_all < hist.epochs[0].loss_all

    def test_zero_lr_keeps_parameters(self, manifest, tmp_path):
        c = cfg(lr=0.0, epochs=1)
        a, b, _ = train(c, manifest, tmp_path, evaluate_test=False)
        init_a, init_b = init_branches(c)
        for model, ref in ((a, init_a), (b, init_b),
                           (load_checkpoint(tmp_path / "last_a.ckpt"), init_a)):
            for k in ref.params:
                assert model.params[k].tobytes() == ref.params[k].tobytes()

    def test_outputs_written(self, manifest, tmp_path):
        _, _, hist = train(cfg(epochs=1), manifest, tmp_path)
        for name in ("last_a.ckpt", "last_b.ckpt", "best_a.ckpt", "best_b.ckpt",
                     "trainer_state.ckpt", "history.csv"):
            assert (tmp_path / name).exists()
        lines = (tmp_path / "history.csv").read_text().splitlines()
        assert lines[0] == "epoch,loss_all,loss_pet,loss_ct,loss_f,val_loss_all"
        assert len(lines) == 2 and lines[1].startswith("1,")
        assert hist.test is not None and hist.test.case_ids == ["case0005"]

    def test_resume_matches_straight_run(self, manifest, tmp_path):
        _, _, straight = train(cfg(), manifest, tmp_path / "s", evaluate_test=False)
        train(cfg(epochs=1), manifest, tmp_path / "r", evaluate_test=False)
        a, _, resumed = train(cfg(), manifest, tmp_path / "r", resume=True, evaluate_test=False)
        assert resumed.to_csv() == straight.to_csv()
        assert (tmp_path / "r" / "last_a.ckpt").read_bytes() == \
            (tmp_path / "s" / "last_a.ckpt").read_bytes()

    def test_resume_rejects_other_config(self, manifest, tmp_path):
        train(cfg(epochs=1), manifest, tmp_path, evaluate_test=False)
        with pytest.raises(UsageError):
            train(cfg(lr=1e-2), manifest, tmp_path, resume=True)

    def test_deterministic(self, manifest, tmp_path):
        train(cfg(epochs=1), manifest, tmp_path / "x", evaluate_test=False)
        train(cfg(epochs=1), manifest, tmp_path / "y", evaluate_test=False)
        for name in ("history.csv", "last_a.ckpt", "last_b.ckpt", "trainer_state.ckpt"):
            assert (tmp_path / "x" / name).read_bytes() == (tmp_path / "y" / name).read_bytes()

    def test_batch_size_two_runs(self, manifest):
        _, _, hist = train(cfg(epochs=1, batch_size=3, optimizer="sgd"), manifest,
                           evaluate_test=False)
        assert math.isfinite(hist.epochs[0].loss_all)

    def test_warmup_excludes_fusion_term(self, manifest):
        w = LossWeights()
        _, _, hist = train(cfg(epochs=1, warmup_epochs=1), manifest, evaluate_test=False)
        r = hist.epochs[0]
        assert r.loss_all == pytest.approx(w.w_ct * r.loss_ct + w.w_pet * r.loss_pet, abs=1e-9)

    def test_branch_b_starts_neutral(self):
        a, b = init_branches(cfg(output_prior_b=0.5))
        x = np.random.default_rng(0).standard_normal((1, 1, 8, 8, 8))
        # head weights are random, so check the bias rather than the output
        assert b.params["head.bias"].tolist() == [0.0]
        assert a.params["head.bias"][0] == pytest.approx(np.log(0.01 / 0.99), abs=1e-6)
        assert a.forward(x)[0].shape == (1, 1, 8, 8, 8)

    def test_early_stopping(self, manifest):
        _, _, hist = train(cfg(epochs=4, lr=0.0, patience=1), manifest, evaluate_test=False)
        # lr=0 never improves after epoch 1, so patience 1 stops after epoch 2
        assert len(hist.epochs) == 2 and hist.stopped_early and hist.best_epoch == 1

    def test_no_training_cases(self, tmp_path, manifest):
        entries = [e for e in read_manifest(manifest) if e.split != "train"]
        with pytest.raises(UsageError):
            train(cfg(), entries)

    def test_non_finite_loss_aborts(self, manifest):
        entries = read_manifest(manifest)
        model = init_model(TINY_MODEL, 0)
        model.params["head.bias"][:] = np.nan
        case = loop.load_split(entries, "train")[0]
        with pytest.raises(NumericalError, match="loss_"):
            loop.mean_loss(model, model.copy(), [case], LossWeights())


class TestGradientRouting:
    def test_fd_of_loss_all_wrt_branch_a_output(self):
        rng = np.random.default_rng(2)
        shape = (4, 4, 4)
        p = rng.uniform(0.05, 0.95, shape)
        q = rng.uniform(0.05, 0.95, shape)
        g = (rng.random(shape) < 0.3).astype(np.float64)

        def total(pp):
            return multitask_loss(pp, q, dempster_fuse(pp, q)[0], g).loss_all

        rep = multitask_loss(p, q, dempster_fuse(p, q)[0], g)
        da, _ = dempster_fuse_backward(p, q, rep.grad_f)
        routed = rep.grad_pet + da
        h = 1e-6
        for idx in np.ndindex(shape):
            up, dn = p.copy(), p.copy()
            up[idx] += h
            dn[idx] -= h
            fd = (total(up) - total(dn)) / (2 * h)
            assert abs(fd - routed[idx]) <= 1e-4 * max(abs(fd), abs(routed[idx]), 1e-8)

    def test_full_graph_parameter_gradients(self, graph):
        rep = graph_grad_check(*graph, n_samples=200, seed=1)
        assert rep.n_checked == 200 and rep.max_rel_err < 1e-4, rep

    def test_full_graph_catches_wrong_routing(self, graph):
        ma, mb, x_a, x_b, mask = graph
        # dropping the fusion term from branch B's gradient must be detected
        original = loop.dempster_fuse_backward
        try:
            loop.dempster_fuse_backward = lambda p, q, g: (original(p, q, g)[0], 0 * q)
            rep = graph_grad_check(ma, mb, x_a, x_b, mask, n_samples=100, seed=1)
        finally:
            loop.dempster_fuse_backward = original
        assert rep.max_rel_err > 0.1


class TestEvaluate:
    def test_five_rows(self, table):
        assert tuple(table.rows) == METHODS
        assert len(table.format().splitlines()) == 6
        assert len(table.to_csv().splitlines()) == 6

    def test_mean_is_arithmetic_mean(self, table):
        for row in table.rows.values():
            vals = [m.dice for m in row.per_case]
            assert row.dice[0] == pytest.approx(sum(vals) / len(vals), abs=1e-12)
            assert len(row.per_case) == 4

    def test_metrics_in_unit_interval(self, table):
        for row in table.rows.values():
            for m in row.per_case:
                assert 0 <= m.dice <= 1 and 0 <= m.precision <= 1 and 0 <= m.recall <= 1

    def test_key_values(self, table):
        kv = dict(line.split("=", 1) for line in table.key_values().splitlines())
        assert kv["split"] == "train" and kv["cases"] == "4"
        assert float(kv["fused.dice_mean"]) == pytest.approx(table.row("fused").dice[0], abs=1e-6)

    def test_empty_split(self, manifest):
        entries = [e for e in read_manifest(manifest) if e.split == "train"]
        with pytest.raises(UsageError):
            evaluate(init_model(TINY_MODEL, 0), init_model(TINY_MODEL, 1), entries, "test")

    def test_summary_std(self):
        from dsfuse.losses import Metrics

        s = MethodSummary("x", [Metrics(0.2, 0, 0, 0, 0, 0), Metrics(0.6, 0, 0, 0, 0, 0)])
        assert s.dice == pytest.approx((0.4, 0.2))
