"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v -s``; the lines are also
collected into the terminal summary of any pytest run.
"""

import time

import numpy as np
import pytest

from hiercon import tensor as tc
from hiercon.data import (
    FeatureFileError,
    FeatureStack,
    decode_feature_stack,
    encode_feature_stack,
    synthetic_stacks,
)
from hiercon.gradcheck import END_TO_END_TOLERANCE, OP_TOLERANCE, run_gradcheck
from hiercon.losses import LossConfig, brute_force_contrastive, contrastive_margin
from hiercon.metrics import eer
from hiercon.model import fixture_config, forward_batch, init_params, save_checkpoint, tiny_config
from hiercon.training import evaluate, train

from conftest import ACCEPTANCE_LINES, as_arrays, fixture_spec, fixture_train_config
from oracles import brute_force_eer


def report(number: int, passed: bool, detail: str) -> None:
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def test_criterion_1_gradient_correctness():
    start = time.perf_counter()
    results = run_gradcheck(seed=0)
    elapsed = time.perf_counter() - start
    ops = [r for r in results if not r.component.startswith("composite:")]
    e2e = next(r for r in results if r.component == "composite:hiercon_total_loss")
    worst_op = max(ops, key=lambda r: r.error)
    failed = [r.component for r in results if not r.passed]
    passed = not failed and elapsed < 60 and e2e.tolerance == END_TO_END_TOLERANCE and all(
        r.tolerance == OP_TOLERANCE for r in ops
    )
    report(
        1,
        passed,
        f"{len(ops)} ops, worst {worst_op.component} {worst_op.error:.1e} (tol 1e-5); "
        f"full loss {e2e.error:.1e} (tol 1e-4); {elapsed:.1f}s",
    )
    assert passed, failed


def test_criterion_2_contrastive_oracle():
    rng = np.random.default_rng(20)
    worst, degenerate_ok, n_degenerate = 0.0, True, 0
    for k in range(200):
        n = int(rng.integers(2, 17))
        f = rng.normal(size=(n, int(rng.integers(1, 33))))
        single = k % 8 == 0
        labels = np.full(n, k % 2) if single else rng.integers(0, 2, size=n)
        got = contrastive_margin(tc.Tensor(f), labels, 0.5).item()
        worst = max(worst, abs(got - brute_force_contrastive(f, labels, 0.5)))
        if single:
            n_degenerate += 1
            degenerate_ok &= got == 0.0
    passed = worst <= 1e-12 and degenerate_ok
    report(2, passed, f"200 batches, max |diff| {worst:.1e}; {n_degenerate} single-class batches gave 0: {degenerate_ok}")
    assert passed


def test_criterion_3_simplex_invariants():
    worst_sum, min_weight, worst_perm = 0.0, 1.0, 0.0
    for i in range(100):
        cfg = tiny_config() if i % 2 else fixture_config()
        rng = np.random.default_rng(300 + i)
        params = init_params(cfg, seed=i)
        values = rng.normal(size=cfg.feature_shape) * rng.uniform(0.1, 3.0)
        out = forward_batch(values, params, cfg)
        for w in (out.record.alpha, out.record.beta, out.record.gamma):
            worst_sum = max(worst_sum, float(np.abs(w.sum(-1) - 1).max()))
            min_weight = min(min_weight, float(w.min()))
        layer = int(rng.integers(cfg.num_layers))
        shuffled = values.copy()
        shuffled[layer] = values[layer, rng.permutation(cfg.frames)]
        moved = forward_batch(shuffled, params, cfg).logits.data
        worst_perm = max(worst_perm, float(np.abs(moved - out.logits.data).max()))
    passed = min_weight >= 0 and worst_sum <= 1e-9 and worst_perm <= 1e-9
    report(3, passed, f"100 passes: min weight {min_weight:.2e}, max |sum-1| {worst_sum:.1e}, "
                      f"max logit change under frame permutation {worst_perm:.1e}")
    assert passed


def test_criterion_4_eer_oracle():
    rng = np.random.default_rng(40)
    worst, rank_worst = 0.0, 0.0
    for _ in range(500):
        n = int(rng.integers(2, 51))
        labels = rng.integers(0, 2, size=n)
        labels[:2] = (0, 1)
        scores = np.round(rng.normal(size=n) + labels, int(rng.integers(0, 3)))
        value = eer(scores, labels)
        worst = max(worst, abs(value - brute_force_eer(scores, labels)))
        rank_worst = max(rank_worst, abs(eer(np.arctan(scores) * 5 + 2, labels) - value))
    perfect = eer([0.1, 0.2, 0.3, 0.8, 0.9], [0, 0, 0, 1, 1])
    identical = eer([0.4] * 6, [0, 1, 0, 1, 0, 1])
    passed = worst <= 1e-12 and perfect == 0.0 and identical == 0.5 and rank_worst <= 1e-12
    report(4, passed, f"500 sets, max |diff| {worst:.1e}; separable {perfect}; identical {identical}; "
                      f"rank transform drift {rank_worst:.1e}")
    assert passed


def test_criterion_5_synthetic_end_to_end(trained):
    result = trained.result
    history_eer = [r["val_eer"] for r in result.history]
    epochs = result.history[-1]["epoch"]

    control = fixture_spec(signal_scale=0.0)
    start = time.perf_counter()
    ctrl = train(trained.cfg, as_arrays(control, "train"), as_arrays(control, "val"), fixture_train_config())
    ctrl_seconds = time.perf_counter() - start
    ctrl_eer = [r["val_eer"] for r in ctrl.history]

    passed = (
        result.best_val_eer <= 0.05
        and epochs <= 50
        and trained.seconds < 300
        and all(0.4 <= e <= 0.6 for e in ctrl_eer)
    )
    report(
        5,
        passed,
        f"val EER {100 * result.best_val_eer:.2f}% at epoch {result.best_epoch} "
        f"(epoch 0: {100 * history_eer[0]:.2f}%), {epochs} epochs in {trained.seconds:.1f}s; "
        f"signal-0 control EER range [{min(ctrl_eer):.3f}, {max(ctrl_eer):.3f}] over {len(ctrl_eer)} evaluations "
        f"({ctrl_seconds:.1f}s)",
    )
    assert passed


def test_criterion_6_attention_localization(trained, corpus):
    cfg, result = trained
    spec = corpus.spec
    x_val, y_val = corpus.val
    fake = y_val == 1
    rec = evaluate(cfg, result.params, corpus.val, with_attention=True).records
    gamma_fake = rec.gamma[fake].mean(0)
    gamma_all = rec.gamma.mean(0)
    uniform = 1.0 / cfg.num_groups
    gamma_ok = gamma_fake[spec.planted_group] >= 2 * uniform

    alpha = rec.alpha[fake][:, list(spec.planted_layers)].mean((0, 1))
    window = np.zeros(spec.frames, dtype=bool)
    window[list(spec.planted_frames)] = True
    alpha_in, alpha_out = alpha[window].mean(), alpha[~window].mean()
    alpha_ok = alpha_in > alpha_out

    # untrained model over all train + val utterances (>= 100 samples)
    x_all = np.concatenate([corpus.train[0], x_val])
    y_all = np.concatenate([corpus.train[1], y_val])
    untrained = init_params(cfg, seed=fixture_train_config().seed, zero_residual=True)
    gamma0 = evaluate(cfg, untrained, (x_all, y_all), with_attention=True).records.gamma.mean(0)
    untrained_ok = bool(np.all(np.abs(gamma0 - uniform) <= 0.05))

    passed = bool(gamma_ok and alpha_ok and untrained_ok)
    report(
        6,
        passed,
        f"gamma[planted] {gamma_fake[spec.planted_group]:.3f} on fakes ({gamma_all[spec.planted_group]:.3f} on all) "
        f"vs required >= {2 * uniform:.3f} with {cfg.num_groups} groups: {gamma_ok}; "
        f"alpha in-window {alpha_in:.4f} vs out {alpha_out:.4f}: {alpha_ok}; "
        f"untrained gamma {np.round(gamma0, 3).tolist()} within 0.05 of uniform: {untrained_ok}",
    )
    assert passed


def test_criterion_7_ablation_direction(corpus):
    spec = fixture_spec(signal_scale=1.0)
    train_data, val_data = as_arrays(spec, "train"), as_arrays(spec, "val")
    cfg = fixture_config()
    means = {}
    for lam in (0.1, 0.0):
        runs = [
            train(cfg, train_data, val_data, fixture_train_config(seed=s, loss=LossConfig(margin=0.5, lambda_con=lam)))
            for s in range(3)
        ]
        means[lam] = (float(np.mean([r.best_val_eer for r in runs])), [r.best_val_eer for r in runs])
    passed = means[0.1][0] <= means[0.0][0]
    report(7, passed, f"signal 1.0, seeds 0-2: mean val EER lambda 0.1 = {means[0.1][0]:.4f} {means[0.1][1]}, "
                      f"lambda 0 = {means[0.0][0]:.4f} {means[0.0][1]}")
    assert passed


def test_criterion_8_determinism_and_formats(tmp_path, corpus):
    cfg = fixture_config()
    tcfg = fixture_train_config(max_epochs=6, patience=6)
    a = train(cfg, corpus.train, corpus.val, tcfg, history_path=tmp_path / "a.jsonl")
    b = train(cfg, corpus.train, corpus.val, tcfg, history_path=tmp_path / "b.jsonl")
    save_checkpoint(tmp_path / "a.hcc", cfg, a.params)
    save_checkpoint(tmp_path / "b.hcc", cfg, b.params)
    history_same = (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    ckpt_same = (tmp_path / "a.hcc").read_bytes() == (tmp_path / "b.hcc").read_bytes()

    round_trip = True
    for uid, _, values in synthetic_stacks(fixture_spec(n_real=4, n_fake=4)):
        back = decode_feature_stack(encode_feature_stack(FeatureStack(values, uid)))
        round_trip &= back.values.tobytes() == values.tobytes()
    rng = np.random.default_rng(8)
    wide = FeatureStack(rng.normal(size=(2, 3, 4)) * 1e30)
    back = decode_feature_stack(encode_feature_stack(wide))
    round_trip &= np.array_equal(back.values, wide.values.astype(np.float32).astype(np.float64))

    buf = encode_feature_stack(FeatureStack(rng.normal(size=(3, 4, 5))))
    cuts, parse_errors = 0, 0
    for cut in range(len(buf)):
        cuts += 1
        try:
            decode_feature_stack(buf[:cut])
        except FeatureFileError:
            parse_errors += 1
    fuzz_ok = parse_errors == cuts

    passed = history_same and ckpt_same and round_trip and fuzz_ok
    report(8, passed, f"history bytes identical: {history_same}; checkpoint bytes identical: {ckpt_same}; "
                      f"32-bit round trip lossless: {round_trip}; {parse_errors}/{cuts} truncations -> parse error")
    assert passed


@pytest.mark.parametrize("train_seed", [7, 0])
def test_supplementary_localization_with_four_groups(train_seed):
    """Not a numbered criterion: with 4 groups the planted one must win gamma."""
    spec = fixture_spec(num_layers=12)
    cfg = fixture_config(num_layers=12)
    val = as_arrays(spec, "val")
    result = train(cfg, as_arrays(spec, "train"), val, fixture_train_config(seed=train_seed))
    gamma = evaluate(cfg, result.params, val, with_attention=True).records.gamma
    assert int(np.argmax(gamma[val[1] == 1].mean(0))) == spec.planted_group
    assert int(np.argmax(gamma.mean(0))) == spec.planted_group
