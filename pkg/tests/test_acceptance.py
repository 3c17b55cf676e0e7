"""Acceptance suite: one check per criterion, each printing a PASS/FAIL line.

The desk-scale training run dominates the runtime (tens of minutes on one
CPU core). Set ``DSFUSE_SKIP_SLOW=1`` to skip it during development.
"""

import itertools
import math
import os
import time

import numpy as np
import pytest

from dsfuse.cli import main as cli_main
from dsfuse.dst import BinaryMass, combine, vacuous
from dsfuse.fusion import dempster_fuse, dempster_fuse_backward
from dsfuse.losses import dice_loss, metrics, multitask_loss
from dsfuse.nn import ModelConfig, init_model
from dsfuse.synth import PhantomConfig, generate_dataset
from dsfuse.training import TrainConfig, train
from dsfuse.training.check import graph_grad_check
from dsfuse.volume import Modality, Volume, load_volume, save_volume

# complementary phantoms and the schedule used for the desk-scale comparison
TABLE_PHANTOM = PhantomConfig(dims=(32, 64, 64), p_visible_a=0.95, p_visible_b=0.7)
TABLE_CASES, TABLE_SEED = 60, 2024
TABLE_TRAIN = TrainConfig(epochs=12, seed=0)


@pytest.fixture
def verdict(pytestconfig):
    """Print ``PASS``/``FAIL`` for a criterion even with output capture on."""
    capman = pytestconfig.pluginmanager.getplugin("capturemanager")

    def emit(name, ok, detail):
        line = f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}"
        with capman.global_and_fixture_disabled():
            print("\n" + line, flush=True)
        assert ok, line

    return emit


def test_worked_example(verdict):
    fused, conflict = dempster_fuse(np.array([0.26]), np.array([0.85]))
    f, k = float(fused[0]), float(conflict[0])
    m = combine(BinaryMass(0.74, 0.26), BinaryMass(0.15, 0.85))
    ok = abs(f - 0.67) <= 0.005 and abs(f - 0.6657) < 5e-5 and abs(k - 0.668) <= 1e-6 \
        and abs(m.mass.m1 - f) < 1e-12 and abs(m.conflict - k) < 1e-12
    verdict("worked example", ok, f"fused={f:.6f} conflict={k:.9f}")


def _random_mass(rng):
    lo, hi = np.sort(rng.random(2))
    return BinaryMass(lo, hi - lo, 1.0 - hi)


def _bayes(rng):
    p = rng.random()
    return BinaryMass(1.0 - p, p)


def _gap(a, b):
    return max(abs(x - y) for x, y in zip(a.as_tuple(), b.as_tuple()))


def test_dempster_algebra(verdict):
    rng = np.random.default_rng(7)
    n = 10_000
    t0 = time.perf_counter()
    worst = dict.fromkeys(("commutativity", "associativity", "neutrality", "normalization"), 0.0)
    reinforce_fail = 0
    checked_assoc = 0
    for _ in range(n):
        a, b, c = _random_mass(rng), _random_mass(rng), _random_mass(rng)
        ab, ba = combine(a, b), combine(b, a)
        worst["commutativity"] = max(worst["commutativity"], _gap(ab.mass, ba.mass),
                                     abs(ab.conflict - ba.conflict))
        try:
            left = combine(ab.mass, c).mass
            right = combine(a, combine(b, c).mass).mass
        except ArithmeticError:
            pass
        else:
            checked_assoc += 1
            worst["associativity"] = max(worst["associativity"], _gap(left, right))
        v = combine(a, vacuous())
        worst["neutrality"] = max(worst["neutrality"], _gap(v.mass, a), v.conflict)
        worst["normalization"] = max(worst["normalization"], abs(sum(ab.mass.as_tuple()) - 1.0))
        pa, pb = _bayes(rng), _bayes(rng)
        if pa.m1 > 0.5 and pb.m1 > 0.5:
            if combine(pa, pb).mass.m1 < max(pa.m1, pb.m1):
                reinforce_fail += 1
    elapsed = time.perf_counter() - t0
    ok = (worst["commutativity"] <= 1e-12 and worst["associativity"] <= 1e-9
          and worst["neutrality"] <= 1e-12 and worst["normalization"] <= 1e-12
          and reinforce_fail == 0 and checked_assoc > 0.99 * n and elapsed < 5.0)
    detail = ", ".join(f"{k}={v:.1e}" for k, v in worst.items())
    verdict("Dempster algebra", ok,
            f"{detail}, reinforcement failures={reinforce_fail}, n={n}, {elapsed:.2f}s")


def test_fusion_gradient(verdict):
    rng = np.random.default_rng(11)
    t0 = time.perf_counter()
    p = rng.uniform(0.01, 0.99, 1000)
    q = rng.uniform(0.01, 0.99, 1000)
    dp, dq = dempster_fuse_backward(p, q, np.ones_like(p))
    h = 1e-5
    fd_p = (dempster_fuse(p + h, q)[0] - dempster_fuse(p - h, q)[0]) / (2 * h)
    fd_q = (dempster_fuse(p, q + h)[0] - dempster_fuse(p, q - h)[0]) / (2 * h)
    # closed form, independently of the backward kernel
    d = p * q + (1 - p) * (1 - q)
    closed_p, closed_q = q * (1 - q) / d**2, p * (1 - p) / d**2
    rel = max(np.max(np.abs(closed_p - fd_p) / np.abs(fd_p)),
              np.max(np.abs(closed_q - fd_q) / np.abs(fd_q)))
    kernel_gap = max(np.max(np.abs(dp - closed_p)), np.max(np.abs(dq - closed_q)))
    elapsed = time.perf_counter() - t0
    ok = rel < 1e-4 and kernel_gap < 1e-12 and elapsed < 1.0
    verdict("fusion gradient", ok,
            f"max rel err={rel:.2e} kernel vs closed form={kernel_gap:.1e}, {elapsed:.3f}s")


def test_end_to_end_gradcheck(verdict):
    rng = np.random.default_rng(5)
    cfg = ModelConfig(levels=2, base_channels=2)
    model_a, model_b = init_model(cfg, 1, np.float64), init_model(cfg, 2, np.float64)
    x_a, x_b = rng.standard_normal((2, 8, 8, 8))
    mask = np.zeros((8, 8, 8))
    mask[2:6, 1:5, 3:7] = 1.0
    t0 = time.perf_counter()
    total = model_a.num_parameters() + model_b.num_parameters()
    rep = graph_grad_check(model_a, model_b, x_a, x_b, mask, h=1e-5, n_samples=total)
    elapsed = time.perf_counter() - t0
    ok = rep.max_rel_err < 1e-4 and rep.n_checked == total and elapsed < 120
    verdict("end-to-end gradcheck", ok,
            f"max rel err={rep.max_rel_err:.2e} over {rep.n_checked} parameters "
            f"(kinks skipped={rep.n_kinks}), {elapsed:.1f}s")


def _confusion_oracle(pred, truth, threshold):
    tp = fp = fn = 0
    for x, g in zip(pred.ravel().tolist(), truth.ravel().tolist()):
        pos = x > threshold
        if pos and g == 1.0:
            tp += 1
        elif pos:
            fp += 1
        elif g == 1.0:
            fn += 1
    if tp + fp + fn == 0:
        return 1.0, 1.0, 1.0
    return (2 * tp / (2 * tp + fp + fn), tp / (tp + fp) if tp + fp else 0.0,
            tp / (tp + fn) if tp + fn else 0.0)


def test_loss_arithmetic(verdict):
    rng = np.random.default_rng(3)
    t0 = time.perf_counter()
    recon = 0.0
    metric_mismatch = 0
    for _ in range(50):
        s1, s2, sf = rng.random((3, 8, 8, 8))
        g = (rng.random((8, 8, 8)) < rng.uniform(0.05, 0.5)).astype(np.float64)
        r = multitask_loss(s1, s2, sf, g)
        recon = max(recon, abs(r.loss_all - (0.75 * r.loss_ct + 0.25 * r.loss_pet + r.loss_f)))
        for pred in (s1, (rng.random((8, 8, 8)) < 0.1).astype(float)):
            for thr in (0.3, 0.5):
                m = metrics(pred, g, thr)
                if (m.dice, m.precision, m.recall) != _confusion_oracle(pred, g, thr):
                    metric_mismatch += 1
    perfect = (rng.random((8, 8, 8)) < 0.3).astype(np.float64)
    dice_perfect = dice_loss(perfect, perfect)[0]
    elapsed = time.perf_counter() - t0
    ok = recon <= 1e-9 and abs(dice_perfect) <= 1e-12 and metric_mismatch == 0 and elapsed < 5
    verdict("loss arithmetic", ok,
            f"reconstruction err={recon:.1e} perfect-overlap dice loss={dice_perfect:.1e} "
            f"metric mismatches={metric_mismatch}, {elapsed:.2f}s")


@pytest.mark.skipif(os.environ.get("DSFUSE_SKIP_SLOW") == "1", reason="DSFUSE_SKIP_SLOW=1")
def test_table_pattern(verdict, tmp_path):
    t0 = time.perf_counter()
    manifest = generate_dataset(TABLE_PHANTOM, TABLE_CASES, TABLE_SEED, tmp_path / "data")
    _, _, history = train(TABLE_TRAIN, manifest, tmp_path / "run")
    elapsed = time.perf_counter() - t0
    t = history.test
    a, b, f = t.row("A-only"), t.row("B-only"), t.row("fused")
    checks = {
        "fused dice >= A dice - 0.02": f.dice[0] >= a.dice[0] - 0.02,
        "fused dice > B dice": f.dice[0] > b.dice[0],
        "fused recall >= A recall": f.recall[0] >= a.recall[0],
        "epochs <= 50": len(history.epochs) <= 50,
    }
    failed = [k for k, v in checks.items() if not v]
    detail = (f"dice A={a.dice[0]:.4f} B={b.dice[0]:.4f} fused={f.dice[0]:.4f}; "
              f"recall A={a.recall[0]:.4f} fused={f.recall[0]:.4f}; "
              f"{len(history.epochs)} epochs, {elapsed / 60:.1f} min"
              + (f"; failed: {', '.join(failed)}" if failed else ""))
    with_table = detail + "\n" + t.format()
    verdict("desk-scale comparison", not failed, with_table)
    if elapsed > 30 * 60:
        print(f"note: runtime {elapsed / 60:.1f} min exceeds the 30 min target")


def test_train_determinism(verdict, tmp_path):
    import json

    cfg = {"dims": [8, 16, 16], "lesion_count": [1, 2], "lesion_radius": [2.0, 3.0]}
    (tmp_path / "p.json").write_text(json.dumps(cfg))
    assert cli_main(["synth", "--config", str(tmp_path / "p.json"), "--count", "6",
                     "--seed", "1", "--out", str(tmp_path / "ds")]) == 0
    tcfg = {"epochs": 2, "seed": 9, "model": {"levels": 2, "base_channels": 2}}
    (tmp_path / "t.json").write_text(json.dumps(tcfg))
    for run in ("r1", "r2"):
        assert cli_main(["--threads", "1", "train", "--manifest", str(tmp_path / "ds"),
                         "--config", str(tmp_path / "t.json"), "--out", str(tmp_path / run),
                         "--skip-test"]) == 0
    names = sorted(p.name for p in (tmp_path / "r1").iterdir())
    differing = [n for n in names
                 if (tmp_path / "r1" / n).read_bytes() != (tmp_path / "r2" / n).read_bytes()]
    ok = not differing and {"history.csv", "best_a.ckpt", "last_b.ckpt"} <= set(names)
    verdict("training determinism", ok,
            f"{len(names)} files compared, differing={differing or 'none'}")


def test_volume_round_trip(verdict, tmp_path):
    rng = np.random.default_rng(17)
    mismatches = 0
    for i in range(100):
        dims = tuple(int(d) for d in rng.integers(1, 12, size=3))
        spacing = tuple(float(s) for s in rng.uniform(0.1, 5.0, size=3))
        modality = list(Modality)[i % len(Modality)]
        if modality == Modality.MASK:
            data = (rng.random(dims) < 0.5).astype(np.float32)
        elif modality in (Modality.PROB, Modality.CONFLICT):
            data = rng.random(dims, dtype=np.float32)
        else:
            # arbitrary finite bit patterns, including subnormals and signed zeros
            bits = rng.integers(0, 2**32, size=dims, dtype=np.uint32)
            data = bits.view(np.float32)
            data = np.where(np.isfinite(data), data, np.float32(i))
        v = Volume(data, spacing, modality)
        back = load_volume(save_volume(v, tmp_path / f"v{i}"))
        if not (back == v and back.data.tobytes() == v.data.tobytes() and back.spacing == spacing):
            mismatches += 1
    verdict("volume round trip", mismatches == 0, f"100 volumes, mismatches={mismatches}")
