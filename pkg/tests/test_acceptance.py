"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line."""

import csv
import io
import time

import numpy as np
import pytest

from pit import layers as L
from pit.analysis import count_flops, interaction_ratio, resnet_interaction_approx
from pit.data import synthetic_dataset
from pit.gradcheck import SUITES, run_suite
from pit.layers import AttentionRecord
from pit.models import PRESETS, build, forward, toy_config
from pit.tensor import Tensor
from pit.training import SWEEP_COLUMNS, TrainConfig, overfit_probe, sweep, sweep_csv

TABLE_GRIDS = {"vit_ti": [14], "vit_s": [14], "vit_b": [14], "pit_ti": [27, 14, 7], "pit_xs": [27, 14, 7],
               "pit_s": [27, 14, 7], "pit_b": [31, 16, 8]}
TABLE_PARAMS = {"vit_ti": 5.7e6, "pit_ti": 4.9e6, "pit_xs": 10.6e6, "vit_s": 22.1e6, "pit_s": 23.5e6,
                "vit_b": 86.6e6, "pit_b": 73.8e6}
TABLE_MACS = {"vit_ti": 1.3e9, "pit_ti": 0.7e9, "pit_xs": 1.4e9, "vit_s": 4.6e9, "pit_s": 2.9e9,
              "vit_b": 17.6e9, "pit_b": 12.5e9}


def report(capsys, n, title, ok, detail, seconds, budget):
    within = seconds < budget
    status = "PASS" if ok and within else "FAIL"
    with capsys.disabled():
        print(f"\n[{status}] criterion {n:2d} {title}: {detail} ({seconds:.2f}s, budget {budget:g}s)")
    assert ok, detail
    assert within, f"took {seconds:.2f}s, budget {budget}s"


def test_criterion_01_stage_geometry(capsys):
    t0 = time.perf_counter()
    bad = {name: cfg.spatial_sizes() for name, cfg in PRESETS.items()
           if cfg.spatial_sizes() != [(g, g) for g in TABLE_GRIDS[name]]}
    report(capsys, 1, "stage geometry", not bad, f"mismatches {bad}" if bad else "7/7 presets exact",
           time.perf_counter() - t0, 1)


def test_criterion_02_parameter_counts(capsys):
    t0 = time.perf_counter()
    errs = {n: count_flops(PRESETS[n]).total_params / v - 1 for n, v in TABLE_PARAMS.items()}
    # the analytic count must agree with an instantiated model
    built = build(PRESETS["pit_ti"], 0).num_params() == count_flops(PRESETS["pit_ti"]).total_params
    worst = max(errs, key=lambda k: abs(errs[k]))
    ok = all(abs(e) <= 0.05 for e in errs.values()) and built
    report(capsys, 2, "parameter reconciliation", ok,
           f"worst {worst} {errs[worst]:+.2%} (limit 5%), built pit_ti matches: {built}",
           time.perf_counter() - t0, 5)


def test_criterion_03_flops(capsys):
    t0 = time.perf_counter()
    errs = {n: count_flops(PRESETS[n]).total_macs / v - 1 for n, v in TABLE_MACS.items()}
    worst = max(errs, key=lambda k: abs(errs[k]))
    report(capsys, 3, "FLOPs reconciliation", all(abs(e) <= 0.10 for e in errs.values()),
           f"worst {worst} {errs[worst]:+.2%} (limit 10%)", time.perf_counter() - t0, 1)


@pytest.mark.slow
def test_criterion_04_gradient_suite(capsys):
    t0 = time.perf_counter()
    checks = {}
    for scope in SUITES:
        checks.update({f"{scope}/{k}": v for k, v in run_suite(scope, range(5)).items()})
    failed = [k for k, c in checks.items() if not c.ok]
    worst = max((k for k, c in checks.items() if c.kind == "rel"), key=lambda k: checks[k].error)
    report(capsys, 4, "gradient suite", not failed,
           f"{len(checks)} items x 5 seeds, worst rel {worst} {checks[worst].error:.2e}, failed {failed}",
           time.perf_counter() - t0, 120)


@pytest.mark.slow
def test_criterion_05_attention_normalization(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    worst = 0.0
    for name, cfg in PRESETS.items():
        model = build(cfg, 0)
        x = rng.random((1, 3, cfg.image_size, cfg.image_size)).astype(np.float32)
        _, recs = forward(model, x, capture_attention=True)
        worst = max(worst, max(float(np.abs(r.attn.sum(-1) - 1).max()) for r in recs))
        del model
    report(capsys, 5, "attention normalization", worst <= 1e-5, f"max |row sum - 1| = {worst:.2e}",
           time.perf_counter() - t0, 30)


def _loop_ratio(rec, thr):
    b, heads, t, _ = rec.attn.shape
    count = 0
    for n in range(b):
        for q in range(t):
            for k in range(rec.n_cls, t):
                if any(rec.attn[n, h, q, k] > thr for h in range(heads)):
                    count += 1
    return count / (b * t * rec.height * rec.width)


def test_criterion_06_interaction_oracle(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    mismatches = 0
    for _ in range(100):
        b, heads, n_cls = rng.integers(1, 3), rng.integers(1, 5), rng.integers(0, 2)
        h = rng.integers(1, 4)
        w = rng.integers(1, (12 - n_cls) // h + 1)
        t = n_cls + h * w
        a = np.exp(rng.standard_normal((b, heads, t, t)) * rng.uniform(0.5, 3))
        rec = AttentionRecord(0, 0, a / a.sum(-1, keepdims=True), int(n_cls), int(h), int(w))
        thr = float(rng.choice([0.01, 0.05, 0.1, 0.2, rng.uniform(0.001, 0.9)]))
        mismatches += interaction_ratio([rec], thr).ratios[0] != _loop_ratio(rec, thr)
    u64 = interaction_ratio([AttentionRecord(0, 0, np.full((1, 2, 64, 64), 1 / 64), 0, 8, 8)], 0.01).ratios
    u729 = interaction_ratio([AttentionRecord(0, 0, np.full((1, 1, 729, 729), 1 / 729), 0, 27, 27)], 0.01).ratios
    ok = mismatches == 0 and u64 == [1.0] and u729 == [0.0]
    report(capsys, 6, "interaction-ratio oracle", ok,
           f"{mismatches}/100 mismatches, uniform 1/64 -> {u64[0]}, 1/729 -> {u729[0]}",
           time.perf_counter() - t0, 10)


def test_criterion_07_resnet_approximation(capsys):
    t0 = time.perf_counter()
    sides = [56, 28, 14, 7]
    got = resnet_interaction_approx([(s, s) for s in sides])
    hand = [9 / 3136, 9 / 784, 9 / 196, 9 / 49]
    err = max(abs(a - b) for a, b in zip(got, hand))
    report(capsys, 7, "ResNet approximation", err <= 1e-12,
           f"ratios {[round(g, 6) for g in got]}, max err {err:.1e}", time.perf_counter() - t0, 1)


@pytest.mark.slow
def test_criterion_08_overfit_probe(capsys):
    t0 = time.perf_counter()
    ds = synthetic_dataset(0, 32)
    cfg = toy_config()
    runs = [overfit_probe(build(cfg, 0), ds.images, ds.labels, steps=200) for _ in range(2)]
    first, final = runs[0][0], runs[0][-1]
    identical = np.array(runs[0]).tobytes() == np.array(runs[1]).tobytes()
    ratio = final / first
    report(capsys, 8, "overfit probe", ratio < 0.1 and identical,
           f"loss {first:.4f} -> {final:.4f} (ratio {ratio:.4f}, limit 0.1), bit-identical: {identical}",
           time.perf_counter() - t0, 120)


@pytest.mark.slow
def test_criterion_09_sweep(capsys, tmp_path):
    t0 = time.perf_counter()
    tr, te = synthetic_dataset(0, 128), synthetic_dataset(1, 64, split="test")
    cfg = TrainConfig(epochs=2, batch_size=32, warmup_epochs=1, base_lr=5e-4, seed=0)
    rows = sweep([0.5, 1.0], tr, te, cfg, out_path=tmp_path / "a.csv")
    sweep([0.5, 1.0], tr, te, cfg, out_path=tmp_path / "b.csv")
    text = (tmp_path / "a.csv").read_text()
    parsed = list(csv.DictReader(io.StringIO(text)))
    schema = (tuple(parsed[0]) == SWEEP_COLUMNS and len(parsed) == 4
              and {r["family"] for r in parsed} == {"vit", "pit"}
              and all(int(r["flops"]) == count_flops(toy_config(float(r["width_scale"]), family=r["family"])).total_macs
                      for r in parsed)
              and all(0 <= float(r[k]) <= 1 for r in parsed for k in ("train_acc", "val_acc")))
    deterministic = text.encode() == (tmp_path / "b.csv").read_bytes() and text == sweep_csv(rows)
    report(capsys, 9, "sweep demonstrator", schema and deterministic,
           f"{len(parsed)} rows, schema ok: {schema}, byte-identical rerun: {deterministic}",
           time.perf_counter() - t0, 900)


def test_criterion_10_pooling_subsample(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    worst = 0.0
    for h, w, c in [(27, 27, 4), (14, 14, 8), (31, 31, 2), (16, 16, 3), (5, 9, 2), (2, 2, 1)]:
        x = L.TokenBatch(Tensor(rng.standard_normal((2, 1 + h * w, c))), 1, h, w)
        k = np.zeros((2 * c, 1, 3, 3))
        k[:, 0, 1, 1] = 1.0
        cls_w = np.repeat(np.eye(c), 2, axis=1)
        p = {"dw_kernel": Tensor(k), "dw_bias": Tensor(np.zeros(2 * c)),
             "cls_w": Tensor(cls_w), "cls_b": Tensor(np.zeros(2 * c))}
        y = L.token_pooling(x, p).tokens.data
        grid = x.tokens.data[:, 1:].reshape(2, h, w, c)[:, ::2, ::2].reshape(2, -1, c)
        oracle = np.repeat(np.concatenate([x.tokens.data[:, :1], grid], axis=1), 2, axis=-1)
        worst = max(worst, float(np.abs(y - oracle).max()) if y.shape == oracle.shape else np.inf)
    report(capsys, 10, "pooling subsample oracle", worst <= 1e-12, f"max abs diff {worst:.1e}",
           time.perf_counter() - t0, 5)
