"""Acceptance criteria, one test each; every test reports a PASS/FAIL line.

The lines are printed immediately and repeated in pytest's terminal summary.
"""
import math
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from oracles import PAIRED_A, PAIRED_B, PAIRED_P, SequenceTree
from surfseg.baseline import DpConfig, check_constraints, objective, segment_volume_dp, solve_slice
from surfseg.infer import plan_tiling, segment_volume
from surfseg.metrics import ci95, evaluate, paired_t
from surfseg.model import (
    ModelConfig,
    TrainConfig,
    build_net,
    predict_voxels,
    save_model,
    train,
    train_step,
)
from surfseg.numerics import euclidean_loss, gradient_check, make_rng
from surfseg.pipeline import MAX_ATTEMPTS, AugmentSpec, augment, build_dataset, extract_patches, preprocess
from surfseg.synthdata import SynthConfig, generate

MODES = ("normal", "amd")
E2E_EPOCHS = 30
E2E_STRIDE = 4


def report(number, title, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'}  criterion {number}: {title}; {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


# -- 1 ------------------------------------------------------------------------

def test_1_gradient_check():
    t0 = time.perf_counter()
    cfg = ModelConfig(N=8, Z=32, lam=2, conv_channels=(4, 8, 8), fc_hidden=32)
    net = build_net(cfg, make_rng(1), dtype="float64")
    rng = np.random.default_rng(1)
    x = rng.uniform(-1, 1, size=(1, 32, 8))
    target = rng.uniform(0, 1, size=cfg.m2)
    rep = gradient_check(net, x, target, h=1e-3, tol=1e-4)
    elapsed = time.perf_counter() - t0
    n_params = sum(p.weights.size + p.bias.size for p in net.layers if p.trainable)
    name = max(rep.max_rel_error, key=rep.max_rel_error.get)
    worst = rep.worst
    ok = rep.passed and rep.checked + rep.skipped == n_params and elapsed < 60
    report(1, "gradient check", ok,
           f"max rel err {worst:.2e} ({name}) over {rep.checked} params, {rep.skipped} kink params "
           f"excluded of {n_params}, {elapsed:.1f}s")
    assert ok


# -- 2 ------------------------------------------------------------------------

def test_2_loss_oracle():
    rng = np.random.default_rng(2)
    worst = 0.0
    for trial in range(100):
        lam = (1, 2, 3)[trial % 3]
        m1 = int(rng.integers(1, 33))
        pred_s = rng.uniform(0, 1, size=(lam, m1))
        targ_s = rng.uniform(0, 1, size=(lam, m1))
        pred = np.zeros(lam * m1)
        targ = np.zeros(lam * m1)
        for i in range(lam):
            for k in range(m1):
                pred[i * m1 + k] = pred_s[i, k]
                targ[i * m1 + k] = targ_s[i, k]
        expected = math.fsum((pred_s[i, k] - targ_s[i, k]) ** 2 for i in range(lam) for k in range(m1))
        got, _ = euclidean_loss(pred, targ, lam)
        worst = max(worst, abs(got - expected))
    ok = worst <= 1e-12
    report(2, "loss oracle", ok, f"max |E - oracle| = {worst:.1e} over 100 pairs, lambda in {{1,2,3}}")
    assert ok


# -- 3 ------------------------------------------------------------------------

def test_3_baseline_exactness():
    t0 = time.perf_counter()
    tree = SequenceTree(6, 8, 2, 2, 1, 4)
    weights = np.array([0.0, 0.5, 1.0, 2.0])
    mismatches = 0
    for seed in range(200):
        rng = np.random.default_rng(seed)
        costs = rng.integers(-5, 6, size=(2, 6, 8)).astype(float)
        w = tuple(float(v) for v in rng.choice(weights, size=2))
        cfg = DpConfig(delta_max=2, smooth_weight=w, delta_min_sep=1, delta_max_sep=4)
        objs = tree.objectives(costs, w)
        surf, best = solve_slice(costs, cfg)
        if best != objs.min() or objective(costs, surf, cfg) != best or check_constraints(surf, cfg):
            mismatches += 1
    elapsed = time.perf_counter() - t0
    ok = mismatches == 0 and elapsed < 120
    report(3, "baseline exactness", ok,
           f"{mismatches} mismatches in 200 instances ({tree.n_sequences} sequences each), {elapsed:.1f}s")
    assert ok


# -- 4 and 7 ------------------------------------------------------------------

def memorization_run(path, seed=0, max_iter=2000, check_every=25):
    """Train on 32 augmented patches until training UMSPE < 0.5 voxel."""
    rng = make_rng(seed)
    vol, surf = generate(SynthConfig(seed=1))
    ds = build_dataset([(preprocess(vol), surf)], 32, True, rng)
    idx = rng.choice(len(ds), 32, replace=False)
    patches, targets = ds.patches[idx], ds.targets[idx].astype(np.float64)
    net = build_net(ModelConfig(), rng, "float32")
    # one full batch per iteration; decay disabled (see notes in README)
    cfg = TrainConfig(decay_every=0)
    u = math.inf
    it = 0
    while it < max_iter:
        train_step(net, patches, targets, cfg)
        it += 1
        if it % check_every == 0:
            u = float(np.mean(np.abs(predict_voxels(net, patches) - targets)))
            if u < 0.5:
                break
    save_model(net, path)
    return it, u


@pytest.fixture(scope="module")
def memorized(tmp_path_factory):
    path = tmp_path_factory.mktemp("mem") / "run1.lcm"
    t0 = time.perf_counter()
    it, u = memorization_run(path)
    return path, it, u, time.perf_counter() - t0


def test_4_memorization(memorized):
    _, it, u, elapsed = memorized
    ok = u < 0.5 and it <= 2000 and elapsed < 600
    report(4, "memorization", ok, f"training UMSPE {u:.3f} vox after {it} iterations, {elapsed:.0f}s")
    assert ok


def test_7_determinism(memorized, tmp_path):
    path, it, _, _ = memorized
    it2, _ = memorization_run(tmp_path / "run2.lcm")
    same = path.read_bytes() == (tmp_path / "run2.lcm").read_bytes()
    ok = same and it == it2
    report(7, "determinism", ok, f"model files {'identical' if same else 'differ'} "
           f"({path.stat().st_size} bytes, {it} vs {it2} iterations)")
    assert ok


# -- 5 and 6 ------------------------------------------------------------------

@pytest.fixture(scope="module")
def held_out():
    vols = []
    for k in range(4):
        vol, surf = generate(SynthConfig(mode=MODES[k % 2], seed=1000 + k))
        vols.append((preprocess(vol), surf))
    return vols


@pytest.fixture(scope="module")
def baseline_surfaces(held_out):
    return [segment_volume_dp(v, DpConfig()) for v, _ in held_out]


def test_5_end_to_end(held_out, baseline_surfaces):
    t0 = time.perf_counter()
    rng = make_rng(7)
    train_set = []
    for k in range(8):
        vol, surf = generate(SynthConfig(mode=MODES[k % 2], seed=k))
        train_set.append((preprocess(vol), surf))
    ds = build_dataset(train_set, 32, True, rng, stride=E2E_STRIDE, border=True, edge_stride=1)
    net = build_net(ModelConfig(), rng, "float32")
    train(net, ds.patches, ds.targets.astype(np.float64), TrainConfig(epochs=E2E_EPOCHS), rng)
    results = [segment_volume(net, v) for v, _ in held_out]
    preds = [r.surfaces for r in results]
    refs = [s for _, s in held_out]
    rep = evaluate(preds, refs, plan_tiling(refs[0].X, 32), [b.surfaces for b in baseline_surfaces])
    elapsed = time.perf_counter() - t0
    print(rep.text())
    defined = all(p.positions.shape == r.positions.shape and np.all(np.isfinite(p.positions))
                  for p, r in zip(preds, refs))
    ok = (len(ds) >= 2000 and all(u < 2.0 for u in rep.umspe) and defined
          and rep.ordering_violation_rate < 0.01 and rep.seam.max <= 3.0 and elapsed < 7200)
    report(5, "end-to-end synthetic", ok,
           f"{len(ds)} patches; UMSPE " + "/".join(f"{u:.3f}" for u in rep.umspe)
           + f" vox (published CNN 0.98/1.56, graph 1.45/3.17); ordering violations "
           f"{100 * rep.ordering_violation_rate:.2f}%; max seam {rep.seam.max:.2f} vox; {elapsed:.0f}s")
    assert ok


def test_6_baseline_on_held_out(held_out, baseline_surfaces):
    preds = [b.surfaces for b in baseline_surfaces]
    rep = evaluate(preds, [s for _, s in held_out])
    violations = sum(b.violations for b in baseline_surfaces)
    ok = all(u < 1.0 for u in rep.umspe) and violations == 0
    report(6, "baseline on held-out set", ok,
           "UMSPE " + "/".join(f"{u:.3f}" for u in rep.umspe) + f" vox; {violations} constraint violations")
    assert ok


# -- 8 ------------------------------------------------------------------------

def noise_free_patches():
    for seed in range(20):
        vol, surf = generate(SynthConfig(mode=MODES[seed % 2], seed=200 + seed, noise=0.0))
        yield from extract_patches(preprocess(vol), surf, 32)


def test_8_augmentation_round_trips():
    rng = make_rng(8)
    exact = 0
    sq_errors, rejected_draws, skipped = [], 0, 0
    for patch, target in noise_free_patches():
        if len(sq_errors) == 100:
            break
        t = int(rng.integers(-32, 33))
        fwd = augment(patch, target, AugmentSpec("translate", t=t))
        if fwd is not None:
            back = augment(fwd[0], fwd[1], AugmentSpec("translate", t=-t))
            exact += int(np.array_equal(fwd[1] - target, np.full_like(target, t))
                         and np.array_equal(back[1], target))
        else:
            exact += 1 if target.min() + t < 0 or target.max() + t > 63 else 0
        for _ in range(MAX_ATTEMPTS):
            theta = float(rng.uniform(-45, 45))
            fwd = augment(patch, target, AugmentSpec("rotate", theta=theta))
            back = augment(fwd[0], fwd[1], AugmentSpec("rotate", theta=-theta)) if fwd else None
            if back is not None:
                sq_errors.append(np.mean((back[1] - target) ** 2))
                break
            rejected_draws += 1
        else:
            skipped += 1
    rms = float(np.sqrt(np.mean(sq_errors)))
    worst = float(np.sqrt(np.max(sq_errors)))
    n_trans = len(sq_errors) + skipped
    ok = exact == n_trans and len(sq_errors) == 100 and rms <= 0.75
    report(8, "augmentation round trips", ok,
           f"translation exact on {exact}/{n_trans}; rotation RMS {rms:.4f} vox over {len(sq_errors)} "
           f"patches (worst patch {worst:.4f}, {rejected_draws} angle redraws, {skipped} patches skipped)")
    assert ok


# -- 9 ------------------------------------------------------------------------

def test_9_statistics():
    res = paired_t(PAIRED_A, PAIRED_B)
    mean, half = ci95([1, 2, 3])
    dp = abs(res.p - PAIRED_P)
    ok = dp <= 1e-3 and abs(mean - 2) <= 1e-3 and abs(half - 2.484) <= 1e-3
    report(9, "statistics", ok, f"paired p {res.p:.6f} vs oracle {PAIRED_P:.6f} (|diff| {dp:.1e}); "
           f"ci95 {{1,2,3}} = {mean:.3f} +/- {half:.4f}")
    assert ok
