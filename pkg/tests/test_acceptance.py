"""One test per acceptance criterion, each at its stated tolerance.

Every test records a pass/fail line in ``conftest.ACCEPTANCE``; the terminal
summary prints them in a fixed order after the run.
"""

from __future__ import annotations

import io
import math
import time
from contextlib import redirect_stderr, redirect_stdout

import numpy as np

import conftest
from gradcases import cases
from oracles import contingency_loop, mhsa_loop, msta_loop, mse_loop, psnr_loop, scores_loop, ssim_loop
from tempee.attention import (
    AttentionConfig,
    complexity_msta,
    complexity_mhsa,
    identity_mhsa,
    init_mhsa,
    init_msta,
    mhsa_forward,
    msta_forward,
    multihead_attention,
    window_spec,
)
from tempee.cli import main
from tempee.data import gen_synthetic, read_est, write_est
from tempee.experiments import GeneralizationConfig, OverfitConfig, generalization_experiment, overfit_experiment
from tempee.metrics import categorical_scores, contingency, mse, psnr, ssim
from tempee.model import ModelConfig, TempEE, extrapolate, load_checkpoint, save_checkpoint
from tempee.sampling import RssSchedule, apply_prompts, sample_mask
from tempee.tensor import Tensor, grad_check, precision, tsum
from tempee.training import LrSchedule, TrainConfig, lr_at, train_loop

from test_sampling import CountingTargets


def record(key: str, ok: bool, detail: str) -> None:
    conftest.ACCEPTANCE[key] = (bool(ok), detail)
    assert ok, f"{conftest.CRITERIA[key]}: {detail}"


def _lists(t):
    return t.data.astype(np.float64).tolist()


# ---------------------------------------------------------------- complexity


def test_complexity_oracles():
    started = time.perf_counter()
    mhsa = complexity_mhsa(3, 360, 360)
    msta = complexity_msta(3, 360, 360, 2)
    elapsed = time.perf_counter() - started
    ratio = msta / mhsa
    ok = mhsa == 100_780_459_200 and msta == 25_202_599_200 and 0.249 <= ratio <= 0.251 and elapsed < 1e-3
    record("complexity", ok, f"mhsa={mhsa} msta={msta} ratio={ratio:.5f} in {elapsed * 1e3:.3f} ms")


# ---------------------------------------------------------------- gradients


def _toy_e2e_error(seed: int) -> float:
    cfg = ModelConfig(n_in=4, k_out=4, image_edge=24, patch=6, d_model=8, te_blocks=1, se_blocks=1, tsd_blocks=1,
                      attention=AttentionConfig(heads=2, g=2, g_prime=2))
    model = TempEE(cfg, seed=seed)
    rng = np.random.default_rng(seed)
    obs = rng.uniform(0, 255, (1, 4, 24, 24))
    prompts = rng.uniform(0, 255, (1, 4, 24, 24)) * (rng.random((1, 4, 1, 1)) < 0.5)
    r = rng.normal(size=(1, 4, 24, 24)) / 255
    worst = 0.0
    for name in sorted(model.params):
        base = model.params[name]

        def f(w, name=name, base=base):
            model.params[name] = w
            try:
                return tsum(model.forward(obs, prompts) * Tensor(r))
            finally:
                model.params[name] = base

        worst = max(worst, grad_check(f, base, max_entries=2, seed=seed))
    return worst


def test_gradient_suite():
    started = time.perf_counter()
    worst_op, worst_label = 0.0, ""
    for seed in range(20):
        for label, f, x in cases(seed):
            err = grad_check(f, x, max_entries=40, seed=seed)
            if err > worst_op:
                worst_op, worst_label = err, label
    worst_e2e = max(_toy_e2e_error(seed) for seed in range(20))
    elapsed = time.perf_counter() - started
    ok = worst_op < 1e-3 and worst_e2e < 1e-3 and elapsed < 300
    record("gradients", ok, f"20 seeds, worst op {worst_op:.2e} ({worst_label}), toy model {worst_e2e:.2e}, {elapsed:.0f} s")


# ---------------------------------------------------------------- attention


def test_attention_oracles():
    worst, worst_rows = 0.0, 0.0
    for seed in range(5):
        rng = np.random.default_rng(seed)
        with precision(np.float64):
            x = Tensor(rng.normal(size=(2, 8, 8)))
            cfg = AttentionConfig(heads=2, g=4, g_prime=2, alpha=0.7, beta=1.3)
            wm, ws = init_mhsa(2, rng), init_msta(2, rng)
            got_m, att = mhsa_forward(x, wm, cfg, return_weights=True)
            got_s = msta_forward(x, ws, cfg)
            _, att1 = multihead_attention(window_spec(x.shape, 4).apply(x), ws.q1, ws.k1, ws.v1, 2, cfg, return_weights=True)
        ref_m = mhsa_loop(x.data, *(_lists(t) for t in (wm.wq, wm.wk, wm.wv, wm.wp)), 2)
        ref_s = msta_loop(x.data, {k: _lists(v) for k, v in ws.tensors().items()}, 2, 4, 2, 0.7, 1.3)
        worst = max(worst, np.abs(got_m.data - ref_m).max(), np.abs(got_s.data - ref_s).max())
        for a in (att, att1):
            worst_rows = max(worst_rows, np.abs(a.data.sum(-1) - 1).max())
    _, single = mhsa_forward(Tensor(np.array([0.3, -1.2]).reshape(2, 1, 1)), identity_mhsa(2), AttentionConfig(heads=2), return_weights=True)
    exact_one = bool(np.all(single.data == 1.0))
    ok = worst < 1e-5 and worst_rows < 1e-6 and exact_one
    record("attention", ok, f"loop gap {worst:.1e}, row-sum gap {worst_rows:.1e}, single-token weight exactly 1: {exact_one}")


# ---------------------------------------------------------------- metrics


def test_metric_oracles():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(100):
        a = rng.integers(0, 256, (16, 16)).astype(float)
        b = rng.integers(0, 256, (16, 16)).astype(float)
        worst = max(worst, abs(mse(a, b) - mse_loop(a, b)), abs(psnr(a, b) - psnr_loop(a, b)), abs(ssim(a, b) - ssim_loop(a, b)))
        tau = float(rng.choice([5, 10, 20, 30, 40]))
        t = contingency(a, b, tau)
        ref = contingency_loop(a, b, tau)
        if (t.tp, t.fn, t.fp, t.tn) != ref:
            worst = math.inf
        got, exp = categorical_scores(t), scores_loop(*ref)
        for k in exp:
            if not (math.isnan(got[k]) and math.isnan(exp[k])):
                worst = max(worst, abs(got[k] - exp[k]))
    frame = rng.integers(0, 256, (16, 16)).astype(float)
    perfect = categorical_scores(contingency(frame, frame, 5))
    perfect_ok = perfect["pod"] == 1 and perfect["csi"] == 1 and perfect["far"] == 0
    ok = worst < 1e-6 and perfect_ok
    record("metrics", ok, f"100 pairs, max gap {worst:.1e}; perfect forecast POD={perfect['pod']} CSI={perfect['csi']} FAR={perfect['far']}")


# ---------------------------------------------------------------- one-step


def test_one_step_property():
    cfg = ModelConfig(n_in=4, k_out=4, image_edge=24, patch=6, d_model=8, te_blocks=1, se_blocks=1, tsd_blocks=1,
                      attention=AttentionConfig(heads=2, g=2, g_prime=2))
    model = TempEE(cfg, seed=7)
    obs = np.random.default_rng(7).uniform(0, 255, (4, 24, 24))
    first = extrapolate(model, obs)
    calls = model.forward_calls
    ok = calls == 1
    for i in range(cfg.k_out):
        edited = first.copy()
        edited[i] = np.random.default_rng(i).uniform(0, 255, edited[i].shape)
        again = extrapolate(model, obs)
        others = [j for j in range(cfg.k_out) if j != i]
        ok = ok and np.array_equal(again, first) and np.array_equal(edited[others], again[others])
    record("one_step", ok, f"{cfg.k_out} frames from {calls} forward pass; other frames bit-identical under each perturbation")


# ---------------------------------------------------------------- overfit


def test_overfit_criterion():
    cfg = OverfitConfig()
    res = overfit_experiment(cfg)
    ok = res.steps_to_target is not None and res.steps_to_target <= 2000 and res.seconds < 600
    record("overfit", ok, f"MSE {res.best_mse:.2f} < {cfg.target_mse:g} at step {res.steps_to_target}, {res.seconds:.0f} s")


# ---------------------------------------------------------------- generalization


def test_generalization_direction():
    cfg = GeneralizationConfig()
    res = generalization_experiment(cfg)
    ok = res.n_train == 180 and res.n_val == 20 and res.margin >= 0.05 and res.seconds < 3600
    record(
        "generalization",
        ok,
        f"CSI@{cfg.tau:g} model {res.csi_model:.3f} vs persistence {res.csi_persistence:.3f} "
        f"(margin {res.margin:+.3f}), {res.epochs_run} epochs, {res.seconds:.0f} s",
    )


# ---------------------------------------------------------------- sampling


def test_sampling_schedule():
    s = RssSchedule(0.5, 0.5, 1, seed=99)
    draws = 10_000
    kept = sum(sample_mask(s, 0, 2, "train", i).keep[0] for i in range(draws))
    rate = kept / draws
    targets = CountingTargets(np.ones((20, 8, 8), dtype=np.float32))
    prompts = apply_prompts(targets, sample_mask(RssSchedule(), 0, 20, "test"))
    ok = abs(rate - 0.5) <= 0.02 and targets.reads == 0 and not prompts.any()
    record("sampling", ok, f"keep rate {rate:.4f} over {draws} draws; test-mode target reads {targets.reads}")


# ---------------------------------------------------------------- schedule


def test_schedule_continuity_and_patience():
    sched = LrSchedule(1e-3, 50, 1000)
    w, eps = sched.warmup_steps, 1e-9
    jump = abs(lr_at(sched, w - eps) - lr_at(sched, w + eps))
    end = lr_at(sched, sched.total_steps)
    cfg = ModelConfig(n_in=2, k_out=2, image_edge=32, patch=8, d_model=4, te_blocks=1, se_blocks=1, tsd_blocks=1,
                      attention=AttentionConfig(heads=2, g=2, g_prime=2))
    data = [gen_synthetic("sparse-stationary", 2, 2, 32, 32, s) for s in range(2)]
    res = train_loop(TempEE(cfg), data, [], TrainConfig(epochs=100, batch_size=2, patience=10, patience_delay=0),
                     val_fn=lambda model, epoch: 1.0)
    stagnant = res.epochs_run - 1 - res.best_epoch
    ok = jump < 1e-9 * sched.lr_max and abs(end) < 1e-15 and res.stopped_early and stagnant == 10
    record("schedule", ok, f"warmup jump {jump:.1e}, lr(T)={end:.1e}, stopped after {stagnant} stagnant epochs")


# ---------------------------------------------------------------- formats


def _exit_code(argv) -> int:
    with redirect_stdout(io.StringIO()), redirect_stderr(io.StringIO()):
        return main(argv)


def test_format_round_trips(tmp_path):
    seq = gen_synthetic("dense-nonstationary", 20, 20, 96, 96, 5)
    write_est(tmp_path / "seq_000000.est", seq)
    est_ok = np.array_equal(read_est(tmp_path / "seq_000000.est").frames, seq.frames)
    write_est(tmp_path / "again.est", read_est(tmp_path / "seq_000000.est"))
    est_ok = est_ok and (tmp_path / "again.est").read_bytes() == (tmp_path / "seq_000000.est").read_bytes()

    cfg = ModelConfig(n_in=20, k_out=20, image_edge=96, patch=12, d_model=8, te_blocks=1, se_blocks=1, tsd_blocks=1,
                      attention=AttentionConfig(heads=2, g=4, g_prime=2))
    model = TempEE(cfg, seed=5)
    save_checkpoint(tmp_path / "m.ckpt", model)
    back = load_checkpoint(tmp_path / "m.ckpt")
    ckpt_ok = back.cfg == cfg and all(np.array_equal(model.params[k].data, back.params[k].data) for k in model.params)
    save_checkpoint(tmp_path / "m2.ckpt", back)
    ckpt_ok = ckpt_ok and (tmp_path / "m2.ckpt").read_bytes() == (tmp_path / "m.ckpt").read_bytes()

    (tmp_path / "bad.ckpt").write_bytes(b"JUNK" + (tmp_path / "m.ckpt").read_bytes()[4:])
    (tmp_path / "manifest.txt").write_text("[train]\n[val]\n[test]\n0\n")
    report = str(tmp_path / "rep")
    ckpt_code = _exit_code(["eval", "--checkpoint", str(tmp_path / "bad.ckpt"), "--data", str(tmp_path), "--report", report])
    raw = (tmp_path / "seq_000000.est").read_bytes()
    (tmp_path / "seq_000000.est").write_bytes(b"JUNK" + raw[4:])
    est_code = _exit_code(["eval", "--checkpoint", str(tmp_path / "m.ckpt"), "--data", str(tmp_path), "--report", report])
    ok = est_ok and ckpt_ok and ckpt_code == 3 and est_code == 3
    record("formats", ok, f"est bit-exact {est_ok}, checkpoint bit-exact {ckpt_ok}, bad magic exit codes {ckpt_code}/{est_code}")

