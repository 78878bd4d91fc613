"""Acceptance suite: one test per criterion, each logging a PASS/FAIL line.

The lines are printed in the "acceptance criteria" section of the pytest
terminal summary.
"""

import math
import os
import random
import threading
import time
from decimal import ROUND_HALF_EVEN, Decimal

import numpy as np
import pytest

from acceptance_log import record
from oracles import oracle_aq, oracle_sq, oracle_vpq
from vipseval.core import CategoryTable, VideoPanopticSequence
from vipseval.dataset_io import (LogitVolume, WeightMap, read_id_png, read_logits, read_weights,
                                 write_id_png, write_logits, write_weights)
from vipseval.ema import ema
from vipseval.fusion import average_softmax
from vipseval.overlap import default_threads
from vipseval.stq import stq
from vipseval.synth import SplitMix64, generate, random_scenario
from vipseval.vpq import aggregate_vpq, vpq

WINDOWS = (1, 2, 4, 6)
N_SCENES = 1000

LEADERBOARD = [
    ("zhangtao-whu", (54.7484, 54.0604, 53.2963, 52.8467), "53.7380"),
    ("yknykn", (54.3543, 53.1442, 52.2927, 51.7809), "52.8930"),
    ("yyyds", (51.6104, 50.5923, 49.4210, 48.5340), "50.0394"),
    ("SUtech", (51.6154, 50.5523, 49.1890, 48.0851), "49.8604"),
    ("korpusose", (52.7642, 49.7589, 46.9454, 44.8198), "48.5721"),
]


def _scene_spec(seed):
    """Corpus scene: canvas up to 8x8, up to 6 frames, <= 3 classes, <= 4 tracks."""
    shape = SplitMix64(seed ^ 0x5EED5EED)
    h, w, t = shape.randint(1, 8), shape.randint(1, 8), shape.randint(1, 6)
    min_things = 1 if seed % 4 else 0
    return random_scenario(seed, h, w, t, max_classes=3, max_things=4, min_things=min_things)


@pytest.fixture(scope="module")
def corpus():
    return [generate(_scene_spec(seed)) for seed in range(N_SCENES)]


def _close(a, b, tol=1e-9):
    if a is None or b is None:
        return a is None and b is None
    return abs(float(a) - float(b)) <= tol


# -- aggregation identity ------------------------------------------------------

def test_leaderboard_aggregation():
    t = time.perf_counter()
    details, ok = [], True
    for name, scores, published in LEADERBOARD:
        got = aggregate_vpq(list(scores))
        exact = sum(Decimal(repr(s)) for s in scores) / 4
        within = abs(exact - Decimal(published)) <= Decimal("0.00005")
        float_within = abs(got - float(published)) <= 0.00005 + 1e-9
        ok &= within and float_within
        details.append(f"{name} {exact} vs {published}")
    ms = 1000 * (time.perf_counter() - t)
    record("Leaderboard aggregation (+/-0.00005)", ok, "; ".join(details) + f"; {ms:.2f} ms")
    assert ok
    assert f"{aggregate_vpq([51.6104, 50.5923, 49.4210, 48.5340]):.4f}" == "50.0394"


def test_leaderboard_boundary_rows_are_exact_half_units():
    # Two rows average to exactly half a unit in the fourth decimal; the
    # published value sits on the boundary of the tolerance band.
    for name, scores, published in LEADERBOARD:
        exact = sum(Decimal(repr(s)) for s in scores) / 4
        if name in ("zhangtao-whu", "SUtech"):
            assert abs(exact - Decimal(published)) == Decimal("0.00005")
        else:
            assert exact.quantize(Decimal("0.0001"), ROUND_HALF_EVEN) == Decimal(published)


# -- oracle equivalence --------------------------------------------------------

def test_oracle_equivalence_vpq(corpus):
    t = time.perf_counter()
    worst, bad = 0.0, []
    for pair in corpus:
        engine = vpq([pair.gt], [pair.pred], WINDOWS, pair.categories)
        ref = oracle_vpq([(pair.gt, pair.pred)], WINDOWS)
        for k in WINDOWS:
            d = abs(engine.vpq_k[k] - float(ref[k][0]))
            worst = max(worst, d)
            if d > 1e-9:
                bad.append((pair.gt.video_id, k))
            if set(engine.per_window[k].classes) != set(ref[k][1]):
                bad.append((pair.gt.video_id, k, "classes"))
            for c, s in ref[k][1].items():
                e = engine.per_window[k].classes[c]
                if (e.tp, e.fp, e.fn) != (s["tp"], s["fp"], s["fn"]) or not _close(e.iou_sum, s["iou_sum"]):
                    bad.append((pair.gt.video_id, k, c))
    elapsed = time.perf_counter() - t
    ok = not bad and elapsed < 60
    record("Oracle equivalence (VPQ)", ok,
           f"{len(corpus)} scenes x k={WINDOWS}, max |diff| {worst:.3g}, {elapsed:.1f} s")
    assert not bad, bad[:10]
    assert elapsed < 60


def test_oracle_equivalence_vpq_pooled():
    # Pooling across videos sharing one category table.
    cats = CategoryTable([{"category_id": c, "name": f"c{c}", "is_thing": c > 1} for c in (1, 2, 3)])
    for group in range(20):
        pairs = []
        for i in range(5):
            seed = 10_000 + 5 * group + i
            spec = random_scenario(seed, 6, 6, 5, categories=cats, min_things=1,
                                   video_id=f"g{group}v{i}")
            p = generate(spec)
            pairs.append((p.gt, p.pred))
        engine = vpq([g for g, _ in pairs], [p for _, p in pairs], WINDOWS, cats)
        ref = oracle_vpq(pairs, WINDOWS)
        for k in WINDOWS:
            assert abs(engine.vpq_k[k] - float(ref[k][0])) <= 1e-9
        s = stq([g for g, _ in pairs], [p for _, p in pairs], cats)
        assert _close(s.sq, oracle_sq(pairs, cats)[0])
        assert _close(s.aq, oracle_aq(pairs, cats))


def test_oracle_equivalence_stq(corpus):
    t = time.perf_counter()
    worst, bad, undefined = 0.0, [], 0
    for pair in corpus:
        rep = stq([pair.gt], [pair.pred], pair.categories)
        pairs = [(pair.gt, pair.pred)]
        sq_ref, ious = oracle_sq(pairs, pair.categories)
        aq_ref = oracle_aq(pairs, pair.categories)
        stq_ref = None if aq_ref is None else math.sqrt(aq_ref * sq_ref)
        if aq_ref is None:
            undefined += 1
        for got, want in ((rep.sq, sq_ref), (rep.aq, aq_ref), (rep.stq, stq_ref)):
            if not _close(got, want):
                bad.append(pair.gt.video_id)
            elif got is not None:
                worst = max(worst, abs(float(got) - float(want)))
        if set(rep.class_iou) != set(ious) or any(not _close(rep.class_iou[c], ious[c]) for c in ious):
            bad.append(pair.gt.video_id)
    elapsed = time.perf_counter() - t
    ok = not bad and elapsed < 60
    record("Oracle equivalence (STQ)", ok,
           f"{len(corpus)} scenes, max |diff| {worst:.3g}, {undefined} scenes without gt tracks "
           f"(AQ/STQ null on both sides), {elapsed:.1f} s")
    assert not bad, bad[:10]
    assert elapsed < 60


# -- identity ------------------------------------------------------------------

def _has_thing_pixels(seq):
    return bool(seq.thing_segments())


def test_identity_suite(corpus):
    bad, with_tracks, without, empty = [], 0, 0, 0
    for pair in corpus:
        gt = pair.gt
        rep = vpq([gt], [gt], WINDOWS, pair.categories)
        s = stq([gt], [gt], pair.categories)
        if not gt.segments:
            # All-void gt: nothing to score, no classes enter the mean.
            empty += 1
            if any(rep.per_window[k].classes for k in WINDOWS) or s.aq is not None:
                bad.append(gt.video_id)
            continue
        if any(rep.vpq_k[k] != 1.0 for k in WINDOWS) or rep.overall_vpq != 1.0:
            bad.append(gt.video_id)
        if _has_thing_pixels(gt):
            with_tracks += 1
            if not (s.stq == 1.0 and s.aq == 1.0 and s.sq == 1.0):
                bad.append(gt.video_id)
        else:
            # No gt thing tracks: AQ and STQ are null by design, SQ is still 1.
            without += 1
            if not (s.aq is None and s.stq is None and s.sq == 1.0):
                bad.append(gt.video_id)
    record("Identity suite", not bad,
           f"VPQ^k = 1 on all {len(corpus) - empty} gts with a non-void pixel; STQ = 1 exactly on "
           f"{with_tracks} gts with thing tracks; {without} stuff-only gts give STQ null (SQ = 1); "
           f"{empty} all-void gts have no scorable class")
    assert not bad, bad[:10]


# -- metamorphic ---------------------------------------------------------------

def _visible(seq, track, frames):
    return bool(np.any(seq.frames[list(frames)] == track))


def _id_switch_cases(n):
    cases, seed = [], 0
    while len(cases) < n:
        spec = random_scenario(20_000 + seed, 8, 8, 6, max_perturbations=0, min_things=1)
        seed += 1
        base = generate(spec)
        track = next((t.track_id for t in spec.things
                      if _visible(base.gt, t.track_id, range(0, 3))
                      and _visible(base.gt, t.track_id, range(3, 6))), None)
        if track is None:
            continue
        spec.perturbations = [{"type": "id_switch", "track": track, "frame": 3}]
        cases.append((base, generate(spec)))
    return cases, seed


def test_metamorphic_id_switch():
    cases, drawn = _id_switch_cases(100)
    bad = []
    for base, switched in cases:
        cats = base.categories
        v0 = vpq([base.gt], [base.pred], WINDOWS, cats)
        v1 = vpq([switched.gt], [switched.pred], WINDOWS, cats)
        s0 = stq([base.gt], [base.pred], cats)
        s1 = stq([switched.gt], [switched.pred], cats)
        if not (v1.vpq_k[1] == v0.vpq_k[1] and s1.sq == s0.sq
                and v1.vpq_k[6] < v0.vpq_k[6] and s1.aq < s0.aq):
            bad.append(base.gt.video_id)
    record("Metamorphic: id_switch", not bad,
           f"{len(cases)} cases (switch at frame 3 of 6 on a track visible in both halves; "
           f"{drawn} seeds drawn): VPQ^1, SQ unchanged; VPQ^6, AQ strictly lower")
    assert not bad, bad


def test_metamorphic_erosion():
    bad, n, rng = [], 0, random.Random(7)
    for seed in range(30_000, 30_100):
        spec = random_scenario(seed, 8, 8, 6, perturbation_types=("drop",), min_things=1)
        base = generate(spec)
        targets = ["all"] + [t.track_id for t in spec.things]
        spec.perturbations = spec.perturbations + [
            {"type": "erode", "radius": rng.randint(1, 2), "track": rng.choice(targets)}
            for _ in range(rng.randint(1, 2))
        ]
        eroded = generate(spec)
        r0 = vpq([base.gt], [base.pred], WINDOWS, base.categories)
        r1 = vpq([eroded.gt], [eroded.pred], WINDOWS, base.categories)
        n += 1
        for k in WINDOWS:
            for c, s1 in r1.per_window[k].classes.items():
                s0 = r0.per_window[k].classes.get(c)
                if s1.vpq is not None and (s0 is None or s0.vpq is None or s1.vpq > s0.vpq):
                    bad.append((seed, k, c))
    record("Metamorphic: erosion", not bad,
           f"{n} cases (gt-consistent preds with optional drops, then erosion): "
           "no VPQ_c^k increased")
    assert not bad, bad


def _rename(seq, rng):
    ids = sorted(seq.segments)
    new = rng.sample(range(1, 1 << 24), len(ids))
    mapping = dict(zip(ids, new))
    lut_keys = np.array([0] + ids, dtype=np.uint32)
    lut_vals = np.array([0] + new, dtype=np.uint32)
    frames = lut_vals[np.searchsorted(lut_keys, seq.frames)]
    segs = {mapping[s]: c for s, c in seq.segments.items()}
    return VideoPanopticSequence(seq.video_id, frames, segs, seq.categories)


def test_metamorphic_renaming(corpus):
    rng = random.Random(11)
    bad = []
    cases = corpus[:100]
    for pair in cases:
        renamed = _rename(pair.pred, rng)
        a = vpq([pair.gt], [pair.pred], WINDOWS, pair.categories).to_json()
        b = vpq([pair.gt], [renamed], WINDOWS, pair.categories).to_json()
        sa = stq([pair.gt], [pair.pred], pair.categories).to_json()
        sb = stq([pair.gt], [renamed], pair.categories).to_json()
        sa.pop("tracks", None)
        sb.pop("tracks", None)
        if a != b or sa != sb:
            bad.append(pair.gt.video_id)
    record("Metamorphic: pred-id renaming", not bad,
           f"{len(cases)} cases: VPQ and STQ reports identical")
    assert not bad, bad


# -- fusion --------------------------------------------------------------------

def test_fusion_properties():
    rng = np.random.default_rng(3)
    worst_sum, shift_bad, n = 0.0, 0, 200
    for _ in range(n):
        t, h, w, c = rng.integers(1, 4), rng.integers(1, 6), rng.integers(1, 6), rng.integers(2, 6)
        k = int(rng.integers(1, 4))
        # Logits on a 1/8 grid and integer shifts keep every float32 sum exact.
        srcs = [rng.integers(-64, 65, (t, h, w, c)) / 8.0 for _ in range(k)]
        vols = [LogitVolume(s.astype(np.float32), list(range(1, c + 1))) for s in srcs]
        p = average_softmax(vols)
        worst_sum = max(worst_sum, float(np.max(np.abs(p.values.sum(-1) - 1.0))))
        shifted = [LogitVolume((s + rng.integers(-100, 101, (t, h, w, 1))).astype(np.float32),
                               list(range(1, c + 1))) for s in srcs]
        if not np.array_equal(average_softmax(shifted).argmax_category(), p.argmax_category()):
            shift_bad += 1
        cont = [LogitVolume(rng.normal(0, 5, (t, h, w, c)).astype(np.float32), list(range(1, c + 1)))
                for _ in range(k)]
        worst_sum = max(worst_sum, float(np.max(np.abs(average_softmax(cont).values.sum(-1) - 1.0))))
    ex = average_softmax([LogitVolume(np.array([[[[0.0, 0.0]]]], np.float32), [1, 2]),
                          LogitVolume(np.array([[[[2.0, -2.0]]]], np.float32), [1, 2])])
    worked = np.round(ex.values[0, 0, 0], 4).tolist()
    ok = worst_sum <= 1e-6 and shift_bad == 0 and worked == [0.8808, 0.1192]
    record("Fusion", ok, f"{n} random volumes: max |row sum - 1| {worst_sum:.2g}, "
           f"{shift_bad} argmax changes under shifts, worked example {worked}")
    assert ok


# -- EMA -----------------------------------------------------------------------

def test_ema_properties():
    rng = np.random.default_rng(5)
    hull_bad, degenerate_bad = 0, 0
    for _ in range(100):
        n = int(rng.integers(1, 12))
        shapes = {"a": (int(rng.integers(1, 4)),), "b": (2, int(rng.integers(1, 4)))}
        snaps = [WeightMap({k: rng.normal(0, 10, s) for k, s in shapes.items()}) for _ in range(n)]
        for alpha in (0.0, 0.5, 0.999, 1.0):
            out = ema(snaps, alpha)
            for name in shapes:
                stack = np.stack([s[name] for s in snaps])
                if np.any(out[name] < stack.min(0)) or np.any(out[name] > stack.max(0)):
                    hull_bad += 1
            if alpha == 1.0 and out != snaps[0]:
                degenerate_bad += 1
            if alpha == 0.0 and out != snaps[-1]:
                degenerate_bad += 1
    ok = hull_bad == 0 and degenerate_bad == 0
    record("EMA", ok, f"100 streams x alpha {{0, 0.5, 0.999, 1}}: {hull_bad} hull violations, "
           f"{degenerate_bad} inexact degenerate cases")
    assert ok


# -- determinism ---------------------------------------------------------------

def test_determinism_and_round_trips(tmp_path):
    rng = np.random.default_rng(9)
    fails = []
    for i in range(20):
        ids = rng.integers(0, 1 << 24, (int(rng.integers(1, 9)), int(rng.integers(1, 9))), dtype=np.uint32)
        p = tmp_path / f"{i}.png"
        write_id_png(ids, p)
        first = p.read_bytes()
        back = read_id_png(p)
        write_id_png(back, p)
        if not (np.array_equal(back, ids) and p.read_bytes() == first):
            fails.append(("png", i))

        vol = LogitVolume(rng.normal(0, 3, (2, 3, 4, 3)).astype(np.float32), [5, 1, 9])
        q = tmp_path / f"{i}.lgt"
        write_logits(vol, q)
        first = q.read_bytes()
        vb = read_logits(q)
        write_logits(vb, q)
        if not (vb == vol and q.read_bytes() == first):
            fails.append(("lgt", i))

        wm = WeightMap({"z": rng.normal(size=(3,)), "a.b": rng.normal(size=(2, 2))}, attrs={"i": i})
        r = tmp_path / f"{i}.wgt"
        write_weights(wm, r)
        first = r.read_bytes()
        wb = read_weights(r)
        write_weights(wb, r)
        if not (wb == wm and wb.attrs == wm.attrs and r.read_bytes() == first):
            fails.append(("wgt", i))

    cats = CategoryTable([{"category_id": c, "name": f"c{c}", "is_thing": c > 1} for c in (1, 2, 3)])
    pairs = [generate(random_scenario(40_000 + i, 8, 8, 6, categories=cats, min_things=1,
                                      video_id=f"v{i:02d}")) for i in range(24)]
    gts, preds = [p.gt for p in pairs], [p.pred for p in pairs]
    ref_v = vpq(gts, preds, WINDOWS, cats, threads=1)
    ref_s = stq(gts, preds, cats, threads=1)
    worst = 0.0
    order = list(range(len(pairs)))
    for threads in (2, 4, 8):
        random.Random(threads).shuffle(order)
        for g, p in ((gts, preds), ([gts[j] for j in order], [preds[j] for j in order])):
            v = vpq(g, p, WINDOWS, cats, threads=threads)
            s = stq(g, p, cats, threads=threads)
            worst = max(worst, *(abs(v.vpq_k[k] - ref_v.vpq_k[k]) for k in WINDOWS),
                        abs(s.stq - ref_s.stq))
            if v.to_json()["per_window"] != ref_v.to_json()["per_window"]:
                fails.append(("vpq", threads))
    ok = not fails and worst <= 1e-9
    record("Determinism & round trips", ok,
           f"PNG/.lgt/.wgt bit-exact over 20 files each; threads 1/2/4/8 and shuffled video "
           f"order: max |diff| {worst:.3g}")
    assert ok, fails


# -- throughput ----------------------------------------------------------------

def test_throughput_soft():
    cats = CategoryTable([{"category_id": c, "name": f"c{c}", "is_thing": c > 3} for c in range(1, 7)])
    n_videos, T, H, W = 100, 30, 480, 854
    threads = default_threads()
    gen_seconds = [0.0]
    pending, lock = {}, threading.Lock()

    def spec(i):
        return random_scenario(i, H, W, T, max_things=8, min_things=1, categories=cats,
                               perturbation_types=("id_switch", "drop", "class_flip", "spurious"),
                               video_id=f"b{i:03d}")

    def gt_loader(i):
        def load():
            t = time.perf_counter()
            pair = generate(spec(i))
            dt = time.perf_counter() - t
            with lock:
                pending[i] = pair.pred
                gen_seconds[0] += dt
            return pair.gt
        return load

    def pred_loader(i):
        def load():
            with lock:
                return pending.pop(i)
        return load

    t = time.perf_counter()
    rep = vpq({f"b{i:03d}": gt_loader(i) for i in range(n_videos)},
              {f"b{i:03d}": pred_loader(i) for i in range(n_videos)}, WINDOWS, cats, threads=threads)
    total = time.perf_counter() - t
    # With one worker, rendering and evaluation never overlap, so the split is exact.
    evaluation = total - gen_seconds[0] if threads == 1 else total
    cpus = os.cpu_count() or 1
    scaling = ("1-to-8 thread scaling not measurable: this machine has 1 CPU" if cpus < 2
               else f"{cpus} CPUs available")
    ok = evaluation < 60 and 0.0 <= rep.overall_vpq <= 1.0
    record("Throughput (soft)", ok,
           f"{n_videos} videos x {T} frames at {H}x{W}, windows {WINDOWS}, {threads} thread(s): "
           f"evaluation {evaluation:.1f} s (+ {gen_seconds[0]:.1f} s rendering); {scaling}")
    assert ok
