"""Acceptance criteria 1-9.  Each test records a PASS/FAIL line printed at the end of the run."""
import json
import math
import time

import numpy as np
import pytest

from sevmil import losses, metrics, synth
from sevmil.cli import main
from sevmil.config import dump_config, parse_config
from sevmil.hierarchy import Hierarchy
from sevmil.remix import SfrParams, bench_remix, sfr, sfr_select
from sevmil.synth import Bag, SynthSpec
from sevmil.trainer import TrainConfig, evaluate, train

from gradcases import LOSSES, flat_gradients, make_case
from oracles import (chain_under_diagnosis, discrimination_pair, enumerate_confusions, naive_ascc, naive_asmc,
                     naive_risk, relative_error, wheel)
from test_config import random_config


def test_1_gradients_match_finite_differences(verdict):
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst = {}
    for name in LOSSES:
        errs = []
        for _ in range(100):
            f, z = make_case(name, rng)
            a, n = flat_gradients(f, z)
            errs.append(relative_error(a, n))
        worst[name] = max(errs)
    elapsed = time.perf_counter() - t0
    ok = all(v <= 1e-4 for v in worst.values()) and elapsed <= 30
    summary = ", ".join(f"{k}={v:.1e}" for k, v in worst.items())
    verdict(1, ok, f"800 instances, worst relative error {summary}; {elapsed:.1f}s")


def test_2_metrics_match_naive_evaluator_exhaustively(verdict):
    t0 = time.perf_counter()
    S = enumerate_confusions(5, 6)
    h = Hierarchy.chain(5)
    w = metrics.build_confusion_weights(h, 0, 2.0)
    sev = chain_under_diagnosis(5)
    W = wheel(5, 2, sev)
    a = metrics.ascc(S, w)
    m = metrics.asmc(S, w)
    has_err = np.trace(S, axis1=1, axis2=2) < S.sum(axis=(1, 2))
    r = np.full(len(S), np.nan)
    r[has_err] = metrics.expected_risk(S[has_err], w)
    rows = S.tolist()
    bad = 0
    for i, Si in enumerate(rows):
        if a[i] != naive_ascc(Si, W) or m[i] != naive_asmc(Si, W):
            bad += 1
        elif has_err[i] and r[i] != naive_risk(Si, W, sev):
            bad += 1
    elapsed = time.perf_counter() - t0
    verdict(2, bad == 0 and elapsed <= 60,
            f"{len(S)} matrices (5 classes, total <= 6), {bad} mismatches, bit-equal; {elapsed:.1f}s")


def test_3_discrimination_pair(verdict):
    pair = discrimination_pair()
    assert pair is not None
    A, B = (np.array(x) for x in pair)
    h = Hierarchy.chain(5)
    w0 = metrics.build_confusion_weights(h, 0, 0.0)
    w2 = metrics.build_confusion_weights(h, 0, 2.0)
    same = (np.trace(A) * B.sum() == np.trace(B) * A.sum()
            and metrics.ascc(A, w0) == metrics.ascc(B, w0) and metrics.asmc(A, w0) == metrics.asmc(B, w0))
    d_ascc = abs(metrics.ascc(A, w2) - metrics.ascc(B, w2))
    d_asmc = abs(metrics.asmc(A, w2) - metrics.asmc(B, w2))
    again = discrimination_pair()
    deterministic = again == pair
    verdict(3, same and d_ascc >= 0.01 and d_asmc >= 0.01 and deterministic,
            f"equal accuracy and P=0 scores; P=2 gaps AsCC {d_ascc:.4f}, AsMC {d_asmc:.4f}")


def test_4_hand_derived_values(verdict):
    h = Hierarchy.chain(3)
    w = metrics.build_confusion_weights(h, 0, 2.0)
    sev = chain_under_diagnosis(3)
    W = wheel(3, 2, sev)
    single = [[0, 0, 0], [0, 0, 0], [1, 0, 0]]
    checks = {
        "W[0][2]=5": w.entries[0, 2] == 5 and W[0][2] == 5,
        "W[2][0]=3": w.entries[2, 0] == 3 and W[2][0] == 3,
        "AsCC=0.2": metrics.ascc(np.array(single), w) == 0.2 and naive_ascc(single, W) == 0.2,
        "AsMC=0.25": metrics.asmc(np.array(single), w) == 0.25 and naive_asmc(single, W) == 0.25,
        "risk(flip)=10": metrics.expected_risk(np.array(single), w, 2.0) == 10.0
                         and naive_risk(single, W, sev, 2) == 10.0,
    }
    (M,) = losses.build_loss_weights(Hierarchy.chain(2), 1.6)
    v = losses.msce([np.zeros(2)], [1], [M]).value
    checks["MSCE=1.3 ln2"] = abs(v - 1.3 * math.log(2)) <= 1e-9
    failed = [k for k, ok in checks.items() if not ok]
    verdict(4, not failed, "all hand values match" if not failed else f"mismatch: {failed}")


def _donor_only_purity(seed, top_k=6):
    h = Hierarchy.chain(2, [0, 0, 1])
    centers = synth.make_centers(4, 16, 6.0, seed)   # class centers and background, >= 6 sigma apart
    s = SynthSpec(h, 16, (20, 40), centers[:3], 1.0, 1, background_fraction=0.3,
                  background_center=centers[3], seed=seed)
    bags = synth.generate(s)
    a, b = bags[2], bags[0]
    sel = sfr_select(a, b, h, SfrParams(top_k=top_k, seed=seed))
    chosen = a.instance_labels[sel.selected_a]
    donor_only = np.setdiff1d(a.instance_labels, b.instance_labels)
    return float(np.mean(np.isin(chosen, donor_only))) if chosen.size else 0.0


def test_5_sfr(verdict, tmp_path, capsys):
    t0 = time.perf_counter()
    h2 = Hierarchy.chain(2)
    u = np.array([1.0, 0.0], dtype=np.float32)
    a = Bag("a", [u] * 3, (1,))
    b = Bag("b", [-u] * 3, (0,))
    out = sfr(a, b, h2, SfrParams(2, 0, 1))
    hand = (out.n == 6 and out.labels == (1,) and out.instances[:3].tobytes() == b.instances.tobytes()
            and out.instances[3:].tobytes() == a.instances.tobytes())

    purity = float(np.median([_donor_only_purity(s) for s in range(20)]))
    purity_top1 = float(np.median([_donor_only_purity(s, top_k=1) for s in range(20)]))   # context only

    # byte-identical CLI output for 1 vs 4 threads
    rng = np.random.default_rng(0)
    big_a = Bag("big_a", rng.standard_normal((2000, 64)), (1,))
    big_b = Bag("big_b", rng.standard_normal((1500, 64)), (0,))
    entries = [synth.write_bag(big_a, tmp_path / "a.milb"), synth.write_bag(big_b, tmp_path / "b.milb")]
    for e in entries:
        e["path"] = e["path"].rsplit("/", 1)[-1]
    (tmp_path / "manifest.json").write_text(json.dumps(entries))
    (tmp_path / "c.yaml").write_text("hierarchy:\n  levels:\n    - names: [lo, hi]\n      tiers: [[0], [1]]\n")
    blobs = []
    for threads in (1, 4):
        od = tmp_path / f"t{threads}"
        code = main(["remix", str(tmp_path / "a.milb"), str(tmp_path / "b.milb"), "--manifest",
                     str(tmp_path / "manifest.json"), "--config", str(tmp_path / "c.yaml"),
                     "--threads", str(threads), "--out", str(od)])
        capsys.readouterr()
        assert code == 0
        blobs.append(((od / "remixed.milb").read_bytes(), (od / "selection.json").read_bytes()))
    same = blobs[0] == blobs[1]
    elapsed = time.perf_counter() - t0
    ok = hand and purity >= 0.9 and same and elapsed <= 60
    verdict(5, ok, f"hand trace {'ok' if hand else 'WRONG'}; median donor-only purity {purity:.3f} "
                   f"at (L,T,k)=(11,6,6), need >= 0.9 (k=1 gives {purity_top1:.3f}); threads 1 vs 4 identical: {same}; {elapsed:.1f}s")


def test_6_hxe_telescopes(verdict):
    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(100):
        leaves = int(rng.integers(4, 9))
        coarse = int(rng.integers(2, leaves))
        cuts = np.sort(rng.choice(np.arange(1, leaves), coarse - 1, replace=False))
        h = Hierarchy.chain(coarse, np.searchsorted(cuts, np.arange(leaves), side="right").tolist())
        p = rng.dirichlet(np.ones(leaves))
        y = int(rng.integers(leaves))
        z = np.log(p)
        worst = max(worst, abs(losses.hxe(z, y, h, 0.0).value - losses.cross_entropy([z], [y]).value))
    verdict(6, worst <= 1e-9, f"100 distributions, max |hxe - ce| = {worst:.1e}")


@pytest.mark.slow
def test_7_severity_reduction(verdict):
    t0 = time.perf_counter()
    h = Hierarchy.chain(2, [0, 0, 1])
    wins, gaps, rows = 0, [], []
    for seed in range(10):
        centers = synth.make_centers(3, 16, 3.0, seed)
        train_set = synth.generate(SynthSpec(h, 16, (4, 12), centers, 1.5, 300, 0.3, None, seed))
        test_set = synth.generate(SynthSpec(h, 16, (4, 12), centers, 1.5, 300, 0.3, None, seed + 1000, "test"))
        res = {}
        for loss in ("ce", "msce_ha"):
            model, _ = train(train_set, h, TrainConfig(epochs=30, batch_size=32, loss=loss, lr=0.01, seed=seed))
            res[loss] = evaluate(model, test_set, h)[0][-1]
        ce, ms = res["ce"], res["msce_ha"]
        win = ms.severe_error_count <= ce.severe_error_count and ms.asmc >= ce.asmc
        wins += win
        gaps.append(abs(ms.accuracy - ce.accuracy))
        rows.append(f"{ce.severe_error_count}->{ms.severe_error_count}")
    elapsed = time.perf_counter() - t0
    ok = wins >= 8 and max(gaps) <= 0.05 and elapsed <= 600
    verdict(7, ok, f"{wins}/10 seeds win (severe errors CE->MSCE: {' '.join(rows)}); "
                   f"max accuracy gap {100 * max(gaps):.1f}pp; {elapsed:.0f}s")


@pytest.mark.slow
def test_8_bench_ordering(verdict):
    h = Hierarchy.chain(2)
    rng = np.random.default_rng(8)
    corpus = [Bag(str(i), rng.standard_normal((1000, 128)).astype(np.float32), (i % 2,)) for i in range(100)]
    rm = bench_remix(corpus, h, "random_mix", SfrParams(), 0.5, repetitions=3)
    sf = bench_remix(corpus, h, "sfr", SfrParams(), repetitions=3)
    t_rm = rm["timing"]["mean_seconds_per_sample"]
    t_sf = sf["timing"]["mean_seconds_per_sample"]
    verdict(8, t_rm <= t_sf, f"random_mix {1e3 * t_rm:.2f} ms/sample <= sfr {1e3 * t_sf:.2f} ms/sample")


def test_9_round_trips(verdict, tmp_path):
    bag_ok = 0
    for seed in range(10):
        rng = np.random.default_rng(seed)
        n, d = int(rng.integers(1, 400)), int(rng.integers(1, 300))
        x = (rng.standard_normal((n, d)) * 10.0 ** rng.uniform(-30, 30)).astype(np.float32)
        labels = (int(rng.integers(0, 2)),)
        path = tmp_path / f"{seed}.milb"
        entry = synth.write_bag(Bag(f"b{seed}", x, labels, rng.integers(-1, 2, n)), path)
        raw = path.read_bytes()
        back = synth.read_bag(path, entry)
        synth.write_bag(back, tmp_path / "again.milb")
        bag_ok += (back.instances.tobytes() == x.tobytes() and back.labels == labels
                   and (tmp_path / "again.milb").read_bytes() == raw)
    cfg_ok = 0
    for seed in range(10):
        cfg = random_config(100 + seed)
        text = dump_config(cfg)
        again = parse_config(text)
        cfg_ok += again == cfg and dump_config(again) == text
    verdict(9, bag_ok == 10 and cfg_ok == 10, f"bag files {bag_ok}/10, configs {cfg_ok}/10 bit-identical")
