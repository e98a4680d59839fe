"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

The expensive fixture (the tiny-overfit training run) is shared at module
scope; everything else builds its own small inputs. Stated tolerances and
runtime ceilings are asserted, not just reported.
"""

import math
import time

import numpy as np
import pytest

from fdvm import model as M
from fdvm import spectral, ssm
from fdvm.degrade import build_dataset, lecarm_apply, write_demo_sources
from fdvm.imgio import read_image
from fdvm.metrics import psnr, ssim
from fdvm.tensor import Graph, Tensor, backward, hadamard, tsum
from fdvm.train import (TrainConfig, load_checkpoint, train_loop,
                        weights_from_checkpoint)

from conftest import rand_tensor


def report(criterion: str, ok: bool, detail: str):
    print(f"{criterion} {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, f"{criterion}: {detail}"


@pytest.fixture(scope="module")
def overfit_run(tmp_path_factory):
    """A3's training fixture: 4 pairs at 64x64, C=16, N=8, 2 blocks/path,
    lr 2e-4, 200 Adam steps (full-batch, so 200 epochs)."""
    root = tmp_path_factory.mktemp("overfit")
    write_demo_sources(root / "src", n=4, hw=64, seed=1001)
    manifest = build_dataset(root / "src", root / "ds", 4, 1.0, seed=2002)
    pairs = [(read_image(r.degraded_path), read_image(r.clean_path))
             for r in manifest.records]
    cfg = M.ModelConfig(channels=16, blocks_per_path=2, ssm_state_dim=8,
                        ssm_fixed_hw=64)
    weights = M.build_model(cfg, seed=3003)
    tcfg = TrainConfig(lr=2e-4, batch_size=4, epochs=200, patch_size=64,
                       seed=4004, checkpoint_path=str(root / "m.ckpt"))
    t0 = time.perf_counter()
    ckpt, lines = train_loop(weights, manifest, tcfg)
    elapsed = time.perf_counter() - t0
    losses = [float(line.split("\t")[1]) for line in lines]
    return dict(weights=weights, pairs=pairs, losses=losses, elapsed=elapsed,
                ckpt_path=root / "m.ckpt", log_lines=lines, manifest=manifest,
                tcfg=tcfg, cfg=cfg)


def test_a1_spectral_identity():
    rng = np.random.default_rng(11)
    t0 = time.perf_counter()
    worst = 0.0
    for h, w in ((4, 4), (5, 7), (17, 13), (64, 64)):
        for _ in range(5):
            x = Tensor(rng.uniform(0, 1, (3, h, w)))
            back = spectral.pair_to_image(spectral.image_to_pair(x))
            worst = max(worst, float(np.abs(back.data - x.data).max()))
    elapsed = time.perf_counter() - t0
    report("A1", worst < 1e-9 and elapsed < 5.0,
           f"decompose/compress/expand/recompose max err {worst:.2e} "
           f"over 20 images ({elapsed:.2f} s)")


def test_a2_scan_equivalence():
    rng = np.random.default_rng(22)
    t0 = time.perf_counter()
    all_equal = True
    for _ in range(20):
        B = int(rng.integers(1, 3))
        L = int(rng.integers(1, 33))
        C = int(rng.integers(1, 9))
        N = int(rng.integers(1, 9))
        p = ssm.init_ssm(C, N, rng)
        p.w_dt.data = rng.normal(0, 0.5, (C, 1))
        p.w_b.data = rng.normal(0, 0.5, (C, N))
        p.w_c.data = rng.normal(0, 0.5, (C, N))
        u = Tensor(rng.uniform(-2, 2, (B, L, C)))
        if not np.array_equal(ssm.selective_scan(u, p).data,
                              ssm.scan_reference(u, p).data):
            all_equal = False
    y = ssm.scan_diagnostic(abar=np.full((1, 3, 1, 1), 0.5),
                            bu=np.ones((1, 3, 1, 1)),
                            c_seq=np.ones((1, 3, 1)),
                            d_skip=np.zeros(1), u=np.ones((1, 3, 1)))
    unrolled_exact = np.array_equal(y.ravel(), [1.0, 1.5, 1.75])
    elapsed = time.perf_counter() - t0
    report("A2", all_equal and unrolled_exact and elapsed < 5.0,
           f"20 random cases bit-identical={all_equal}, "
           f"hand-unrolled exact={unrolled_exact} ({elapsed:.2f} s)")


def test_a3_tiny_overfit_convergence(overfit_run):
    losses = overfit_run["losses"]
    halved = losses[-1] <= 0.5 * losses[0]
    base = [psnr(deg, clean) for deg, clean in overfit_run["pairs"]]
    outs = []
    for deg, clean in overfit_run["pairs"]:
        out = M.fdvm_forward(Tensor(deg[None]), overfit_run["weights"])
        outs.append(psnr(np.clip(out.data[0], 0, 1), clean))
    gain = float(np.mean(outs) - np.mean(base))
    ok = halved and gain >= 3.0 and overfit_run["elapsed"] < 900.0
    report("A3", ok,
           f"loss {losses[0]:.4f}->{losses[-1]:.4f} "
           f"(ratio {losses[-1] / losses[0]:.3f}), "
           f"psnr {np.mean(base):.2f}->{np.mean(outs):.2f} dB "
           f"({gain:+.2f} dB), {overfit_run['elapsed']:.0f} s")


def test_a3_loss_smoothed_monotone(overfit_run):
    """Training invariant on the overfit fixture: 20-step window means of
    the loss never increase."""
    losses = overfit_run["losses"]
    windows = [float(np.mean(losses[i:i + 20]))
               for i in range(0, len(losses) - 19, 20)]
    diffs = np.diff(windows)
    ok = bool(np.all(diffs <= 0.0))
    report("A3-smoothed", ok,
           f"window means {windows[0]:.4f}..{windows[-1]:.4f}, "
           f"max rise {diffs.max():+.2e}")


def _param_group(name: str) -> str:
    if ".ln." in name:
        return "layer_norm"
    if ".ssm." in name or ".ssm_linear." in name:
        return "ssm"
    if ".proj." in name:
        return "projections"
    if name.startswith("head_"):
        return "heads"
    return "convs"   # lift/head 3x3 convs and all in-block convolutions


def test_a4_gradient_correctness():
    rng = np.random.default_rng(44)
    t0 = time.perf_counter()
    cfg = M.ModelConfig(channels=4, blocks_per_path=2, ssm_state_dim=2,
                        ssm_fixed_hw=8)
    w = M.build_model(cfg, seed=4)
    params = M.named_parameters(w)
    for _, t in params:      # zero-init groups need signal for the check
        if np.all(t.data == 0):
            t.data = rng.normal(0, 0.05, t.data.shape)
    x = rand_tensor(rng, (1, 3, 8, 8), lo=0.0, hi=1.0)
    probe = rand_tensor(rng, (1, 3, 8, 8))

    def forward():
        return tsum(hadamard(M.fdvm_forward(x, w), probe))

    for _, t in params:
        t.zero_grad()
    with Graph() as g:
        loss = forward()
    backward(loss, g)

    h = 1e-4
    checked = 0
    worst = 0.0
    groups_seen = set()
    for name, t in params:
        groups_seen.add(_param_group(name))
        flat = t.data.reshape(-1)
        gflat = t.grad.reshape(-1)
        idx = int(rng.integers(flat.size))
        orig = flat[idx]
        flat[idx] = orig + h
        fp = forward().item()
        flat[idx] = orig - h
        fm = forward().item()
        flat[idx] = orig
        fd = (fp - fm) / (2 * h)
        ana = gflat[idx]
        rel = abs(fd - ana) / max(abs(fd), abs(ana), 1e-4)
        worst = max(worst, rel)
        checked += 1
    elapsed = time.perf_counter() - t0
    expected_groups = {"convs", "layer_norm", "ssm", "projections", "heads"}
    ok = (checked >= 50 and groups_seen == expected_groups
          and worst < 1e-3 and elapsed < 600.0)
    report("A4", ok,
           f"{checked} parameters across {sorted(groups_seen)}, "
           f"worst rel err {worst:.2e} ({elapsed:.1f} s)")


def test_a5_arbitrary_resolution():
    rng = np.random.default_rng(55)
    t0 = time.perf_counter()
    cfg = M.ModelConfig(channels=8, blocks_per_path=2, ssm_state_dim=4,
                        ssm_fixed_hw=32)
    w = M.build_model(cfg, seed=5)
    ok = True
    details = []
    for h, wd in ((8, 8), (48, 60), (100, 100), (129, 97)):
        x = rand_tensor(rng, (1, 3, h, wd), lo=0.0, hi=1.0)
        out = M.fdvm_forward(x, w)
        good = out.dims == x.dims and bool(np.isfinite(out.data).all())
        ok = ok and good
        details.append(f"{h}x{wd}:{'ok' if good else 'BAD'}")
    elapsed = time.perf_counter() - t0
    report("A5", ok and elapsed < 60.0,
           f"shape+finite at {', '.join(details)} ({elapsed:.1f} s)")


def test_a6_identity_at_initialization():
    rng = np.random.default_rng(66)
    t0 = time.perf_counter()
    cfg = M.ModelConfig(channels=8, blocks_per_path=2, ssm_state_dim=4,
                        ssm_fixed_hw=16)
    w = M.build_model(cfg, seed=6)
    worst = 0.0
    for _ in range(5):
        x = rand_tensor(rng, (1, 3, 20, 16), lo=0.0, hi=1.0)
        out = M.fdvm_forward(x, w)
        worst = max(worst, float(np.abs(out.data - x.data).max()))
    elapsed = time.perf_counter() - t0
    report("A6", worst < 1e-6 and elapsed < 60.0,
           f"max |f(x) - x| = {worst:.2e} over 5 random inputs ({elapsed:.1f} s)")


@pytest.fixture(scope="module")
def ablation_fixture(tmp_path_factory):
    root = tmp_path_factory.mktemp("ablation")
    write_demo_sources(root / "src", n=2, hw=32, seed=7001)
    manifest = build_dataset(root / "src", root / "ds", 2, 1.0, seed=7002)
    return root, manifest


def _train_ablation(root, manifest, ablation, steps=50):
    cfg = M.ModelConfig(channels=8, blocks_per_path=1, ssm_state_dim=4,
                        ssm_fixed_hw=8, ablation=ablation)
    w = M.build_model(cfg, seed=7003)
    tcfg = TrainConfig(lr=1e-3, batch_size=2, epochs=steps, patch_size=32,
                       seed=7004, checkpoint_path=str(root / f"{ablation}.ckpt"))
    _, lines = train_loop(w, manifest, tcfg)
    losses = [float(line.split("\t")[1]) for line in lines]
    outs = []
    for r in manifest.records:
        deg = read_image(r.degraded_path)
        clean = read_image(r.clean_path)
        out = M.fdvm_forward(Tensor(deg[None]), w)
        outs.append(psnr(np.clip(out.data[0], 0, 1), clean))
    return losses, float(np.mean(outs))


def test_a7_ablation_wiring(ablation_fixture):
    root, manifest = ablation_fixture
    rng = np.random.default_rng(77)

    # independence under no_cross_attention: amp map blind to the phase path
    cfg = M.ModelConfig(channels=4, blocks_per_path=2, ssm_state_dim=2,
                        ssm_fixed_hw=8, ablation="no_cross_attention")
    w = M.build_model(cfg, seed=7)
    for _, t in M.named_parameters(w):
        if np.all(t.data == 0):
            t.data = rng.normal(0, 0.05, t.data.shape)
    x = rand_tensor(rng, (1, 3, 16, 16), lo=0.0, hi=1.0)
    _, amp_before, _ = M.fdvm_forward_maps(x, w)
    for b in w.blocks_phase:
        b.conv_b2_w.data += rng.normal(0, 0.3, b.conv_b2_w.data.shape)
    w.lift_phase_w.data += 0.25
    _, amp_after, _ = M.fdvm_forward_maps(x, w)
    independent = np.array_equal(amp_before.data, amp_after.data)

    # the substitute linear layer must actually train
    losses, psnr_no_ssm = _train_ablation(root, manifest, "no_ssm")
    no_ssm_decreases = losses[-1] < losses[0]

    # recorded trend (not gated): the full model should tend to win
    _, psnr_full = _train_ablation(root, manifest, "full")
    _, psnr_no_cross = _train_ablation(root, manifest, "no_cross_attention")
    print(f"A7 note: tiny-fixture psnr full={psnr_full:.2f} "
          f"no_ssm={psnr_no_ssm:.2f} no_cross={psnr_no_cross:.2f} "
          f"(expected trend full > no_ssm > no_cross; not gated)")

    report("A7", independent and no_ssm_decreases,
           f"no_cross independence={independent}, no_ssm 50-step loss "
           f"{losses[0]:.4f}->{losses[-1]:.4f}")


def test_a8_metric_oracles():
    p = psnr(np.zeros((3, 8, 8)), np.full((3, 8, 8), 0.5))
    s = ssim(np.full((3, 16, 16), 0.2), np.full((3, 16, 16), 0.4))
    same = np.random.default_rng(88).uniform(0, 1, (3, 12, 12))
    p_same = psnr(same, same.copy())
    s_same = ssim(same, same.copy())
    ok = (abs(p - 6.0206) < 1e-3 and abs(s - 0.80010) < 1e-4
          and math.isinf(p_same) and s_same == 1.0)
    report("A8", ok,
           f"psnr(0,0.5)={p:.4f} dB, ssim(0.2,0.4)={s:.5f}, "
           f"identical -> ({p_same}, {s_same})")


def test_a9_degradation_oracles(tmp_path):
    rng = np.random.default_rng(99)
    img = rng.uniform(0, 1, (3, 8, 8))
    ident = float(np.abs(lecarm_apply(img, 0.0) - img).max())
    mid = float(lecarm_apply(np.full((3, 1, 1), 0.5), 1.0)[0, 0, 0])
    write_demo_sources(tmp_path / "src", n=3, hw=16, seed=9001)
    manifest = build_dataset(tmp_path / "src", tmp_path / "ds", 12, 5.0 / 6.0,
                             seed=9002)
    n_train = len(manifest.split("train"))
    n_test = len(manifest.split("test"))
    ok = ident <= 1e-12 and abs(mid - 0.7248) < 1e-3 and (n_train, n_test) == (10, 2)
    report("A9", ok,
           f"E=0 max dev {ident:.1e}, f(0.5,k=2)={mid:.4f}, "
           f"split {n_train}/{n_test}")


def test_a10_determinism_and_persistence(tmp_path):
    write_demo_sources(tmp_path / "src", n=2, hw=24, seed=1010)
    manifest = build_dataset(tmp_path / "src", tmp_path / "ds", 3, 1.0, seed=1011)
    logs = []
    trained = None
    for run in range(2):
        cfg = M.ModelConfig(channels=4, blocks_per_path=1, ssm_state_dim=2,
                            ssm_fixed_hw=8)
        w = M.build_model(cfg, seed=12)
        tcfg = TrainConfig(lr=2e-4, batch_size=3, epochs=4, patch_size=16,
                           seed=13, checkpoint_path=str(tmp_path / f"r{run}.ckpt"))
        _, lines = train_loop(w, manifest, tcfg)
        logs.append(lines)
        trained = w
    reproducible = logs[0] == logs[1]

    # trained weights are float64; the stored copy is float32
    reloaded = weights_from_checkpoint(load_checkpoint(tmp_path / "r1.ckpt"))
    rng = np.random.default_rng(1012)
    x = Tensor(rng.uniform(0, 1, (1, 3, 16, 16)))
    delta = float(np.abs(M.fdvm_forward(x, trained).data
                         - M.fdvm_forward(x, reloaded).data).max())
    report("A10", reproducible and delta <= 1e-6,
           f"loss log bit-identical={reproducible}, "
           f"round-trip forward delta {delta:.2e}")
