"""Acceptance suite: one test per release criterion, each printing PASS/FAIL.

Verification paths that compare against finite differences or a
brute-force reference run the engine in float64 so the stated tolerances
measure correctness rather than accumulation noise.
"""

import math
import os
import time

import numpy as np
import pytest

import care.autodiff as ad
from care.autodiff import Tensor
from care.img_repr import render_composite, render_spatial_image, render_temporal_image
from care.model import CareModel, ModelConfig
from care.objective import ContrastiveConfig, care_loss, ce_loss, positive_sets, sica_loss
from care.preprocess import PreprocessConfig, filter_events, pad_truncate, process_segment
from care.robustness import corrupt_malfunction, perturb_positions
from care.train_eval import TrainConfig, run_pipeline
from synthetic import make_fixture, make_registry
from test_objective import brute_force_sica


def _report(criterion: int, ok: bool, detail: str):
    print(f"\ncriterion {criterion}: {'PASS' if ok else 'FAIL'} ({detail})")
    assert ok, f"criterion {criterion}: {detail}"


def _unit_rows(rng, b, d):
    z = rng.normal(0, 1, (b, d))
    return z / np.linalg.norm(z, axis=1, keepdims=True)


# -- criterion 1: contrastive loss equals the brute-force reference ----------


def test_criterion_1_sica_oracle_equivalence():
    rng = np.random.default_rng(12345)
    temperatures = [0.05, 0.5, 1.0]
    start = time.perf_counter()
    worst = 0.0
    for i in range(200):
        b = int(rng.integers(2, 9))
        d = int(rng.integers(2, 5))
        c = int(rng.integers(2, 5))
        tau = temperatures[i % 3]
        mode = "cross_view" if i % 2 == 0 else "within_view"
        labels = rng.integers(0, c, size=b)
        z_seq, z_img = _unit_rows(rng, b, d), _unit_rows(rng, b, d)
        cfg = ContrastiveConfig(temperature=tau, mode=mode)
        got = sica_loss(Tensor(z_seq), Tensor(z_img), labels, cfg).item()
        want = brute_force_sica(z_seq, z_img, labels, tau, mode)
        worst = max(worst, abs(got - want))
    elapsed = time.perf_counter() - start
    _report(1, worst <= 1e-5 and elapsed < 5.0,
            f"max abs err {worst:.2e} over 200 batches in {elapsed:.2f}s")


# -- criterion 2: end-to-end gradients match finite differences --------------


def _toy_graph_loss(model, seq, mask, images, labels, ccfg):
    r_seq = model.seq_encode(seq, mask)
    r_img = model.img_encode(images)
    logits = model.classify(r_seq, r_img)
    ce = ce_loss(logits, labels)
    if ccfg.beta == 0.0:
        return care_loss(None, ce, 0.0)
    sica = sica_loss(model.project(r_seq, "seq"), model.project(r_img, "img"),
                     labels, ccfg)
    return care_loss(sica, ce, ccfg.beta)


def test_criterion_2_gradient_correctness():
    start = time.perf_counter()
    worst = 0.0
    for seed in range(10):
        rng = np.random.default_rng(seed)
        cfg = ModelConfig(input_dim=6, n_classes=3, seq_encoder="bilstm",
                          hidden_size=4, img_widths=(3,), img_blocks=1,
                          embed_dim=5, proj_dim=4, clf_hidden=6,
                          img_downsample=2, seed=seed)
        model = CareModel(cfg).astype(np.float64)
        b = 4
        seq = rng.normal(0, 1, (b, 5, 6))
        mask = (rng.random((b, 5)) < 0.8).astype(np.float64)
        mask[:, 0] = 1.0
        images = rng.random((b, 3, 16, 16))
        labels = rng.integers(0, 3, size=b)
        beta = [0.0, 0.5, 1.0][seed % 3]
        ccfg = ContrastiveConfig(temperature=0.5, mode="cross_view", beta=beta)
        err = ad.finite_diff_check(
            lambda: _toy_graph_loss(model, seq, mask, images, labels, ccfg),
            model.parameters(), h=1e-3, max_coords=64, seed=seed)
        worst = max(worst, err)
    elapsed = time.perf_counter() - start
    _report(2, worst <= 1e-3 and elapsed < 60.0,
            f"max rel err {worst:.2e} over 10 seeds (>=64 coords each) in {elapsed:.1f}s")


# -- criterion 3: encoding invariants over randomized segments ---------------


def test_criterion_3_encoding_invariants():
    from care.seq_repr import build_sequence_tensor

    registry = make_registry()
    prep = PreprocessConfig(temperature_range=(15.0, 30.0))
    rng = np.random.default_rng(77)
    segments, _ = make_fixture(1000, noise=0.5, seed=7)
    start = time.perf_counter()
    checked = 0
    for raw in segments:
        length = int(rng.integers(8, 40))
        # filter monotonicity and non-emptiness on the raw segment
        last_size = len(raw.events) + 1
        for theta in (0.05, 0.3, 0.8):
            kept = filter_events(raw, theta)
            assert 1 <= len(kept.events) <= last_size
            last_size = len(kept.events)

        processed = process_segment(raw, registry, prep, length)
        assert processed.length == length  # pad/truncate exactness
        tensor = build_sequence_tensor(processed, len(registry), prep.bins_per_day, length)
        one_hot = tensor.data[:, : len(registry) + 1]
        assert np.allclose(one_hot.sum(axis=1), 1.0)

        temporal = render_temporal_image(processed, registry, prep.bins_per_day)
        spatial = render_spatial_image(processed, registry)
        composite = render_composite(processed, registry, prep.bins_per_day)
        for img in (temporal, spatial, composite):
            assert img.min() >= 0.0 and img.max() <= 1.0
        checked += 1

    # edge-weight max = 1 when transitions exist: two alternating sensors
    from care.preprocess import BinnedEvent, ProcessedSegment
    alt = ProcessedSegment(label=0, mask=[1, 1, 1],
                           events=[BinnedEvent(0, 0, 1.0), BinnedEvent(0, 1, 1.0),
                                   BinnedEvent(0, 0, 1.0)],
                           kept_fraction=1.0)
    img = render_spatial_image(alt, registry)
    node_free = img[0].copy()
    for entry in registry.entries[:2]:
        u, v = int(entry.coord[0]), int(entry.coord[1])
        node_free[v - 6 : v + 7, u - 6 : u + 7] = 0.0
    assert node_free.max() == pytest.approx(1.0)

    # inactive events leave no trace in the spatial image
    off = ProcessedSegment(label=0, mask=[1, 1],
                           events=[BinnedEvent(0, 0, 0.0), BinnedEvent(0, 1, 0.0)],
                           kept_fraction=1.0)
    assert render_spatial_image(off, registry).sum() == 0.0

    elapsed = time.perf_counter() - start
    _report(3, checked >= 1000 and elapsed < 30.0,
            f"{checked} segments checked in {elapsed:.1f}s")


# -- criterion 4: permutation and view-swap invariance ------------------------


def test_criterion_4_loss_invariances():
    rng = np.random.default_rng(99)
    worst = 0.0
    for i in range(100):
        b = int(rng.integers(2, 9))
        d = int(rng.integers(2, 6))
        labels = rng.integers(0, int(rng.integers(2, 5)), size=b)
        z_seq, z_img = _unit_rows(rng, b, d), _unit_rows(rng, b, d)
        mode = "cross_view" if i % 2 == 0 else "within_view"
        cfg = ContrastiveConfig(temperature=0.2, mode=mode)
        base = sica_loss(Tensor(z_seq), Tensor(z_img), labels, cfg).item()

        perm = rng.permutation(b)
        permuted = sica_loss(Tensor(z_seq[perm]), Tensor(z_img[perm]),
                             labels[perm], cfg).item()
        swapped = sica_loss(Tensor(z_img), Tensor(z_seq), labels, cfg).item()
        worst = max(worst, abs(base - permuted), abs(base - swapped))
    _report(4, worst <= 1e-6, f"max deviation {worst:.2e} over 100 batches")


# -- criterion 5: learning smoke test on the bundled fixture ------------------


def test_criterion_5_learning_smoke_test():
    segments, registry = make_fixture(400, noise=0.0, seed=0)
    tcfg = TrainConfig(max_epochs=30, patience=30, seeds=(0,))
    start = time.perf_counter()
    _, report, log = run_pipeline(segments, registry, PreprocessConfig(),
                                  ModelConfig(input_dim=1, n_classes=4),
                                  ContrastiveConfig(), tcfg, seed=0)
    elapsed = time.perf_counter() - start
    train_acc = report.extras["train_accuracy"]
    ok = train_acc >= 0.95 and report.accuracy >= 0.85 and elapsed < 300.0
    _report(5, ok, f"train acc {train_acc:.3f}, test acc {report.accuracy:.3f}, "
                   f"best epoch {log['best_epoch']}, {elapsed:.0f}s")


# -- criterion 6: ablation ordering on the noisy fixture ----------------------


def test_criterion_6_ablation_ordering():
    segments, registry = make_fixture(200, noise=0.3, seed=0)
    tcfg = TrainConfig(max_epochs=30, patience=30, seeds=(0,))
    start = time.perf_counter()

    def mean_f1(view, mode, beta):
        scores = []
        for seed in range(5):
            _, report, _ = run_pipeline(
                segments, registry, PreprocessConfig(),
                ModelConfig(input_dim=1, n_classes=4, view=view),
                ContrastiveConfig(mode=mode, beta=beta), tcfg, seed=seed)
            scores.append(report.f1)
        return float(np.mean(scores))

    cross = mean_f1("both", "cross_view", 0.5)
    within = mean_f1("both", "within_view", 0.5)
    uni_seq = mean_f1("seq", "off", 0.0)
    uni_img = mean_f1("img", "off", 0.0)
    best_uni = max(uni_seq, uni_img)
    elapsed = time.perf_counter() - start
    ok = cross >= within >= best_uni
    _report(6, ok, f"cross {cross:.3f} >= within {within:.3f} >= best uni "
                   f"{best_uni:.3f} (seq {uni_seq:.3f}, img {uni_img:.3f}), "
                   f"{elapsed:.0f}s")


# -- criterion 7: corruption harness exactness --------------------------------


def test_criterion_7_corruption_exactness():
    import datetime as dt

    from care.ingest import ActivitySegment, Modality, SensorEvent

    # 100 all-ON motion segments of length 40, so every replacement is visible
    base = dt.datetime(2024, 1, 1)
    segments = []
    for si in range(100):
        events = [SensorEvent(timestamp=base + dt.timedelta(days=si, seconds=k),
                              sensor_id=f"M{k % 16 + 1:03d}", raw_value="ON",
                              modality=Modality.MOTION)
                  for k in range(40)]
        segments.append(ActivitySegment(label=si % 4, events=events, span=(0, 39)))

    corrupted, _ = corrupt_malfunction(segments, 10.0, 5.0, seed=0)
    per_segment = [sum(1 for a, b in zip(s.events, c.events) if a.raw_value != b.raw_value)
                   for s, c in zip(segments, corrupted)]
    touched = [n for n in per_segment if n]
    malfunction_ok = len(touched) == 10 and all(n == 2 for n in touched)

    registry = make_registry()
    variance = 4.0
    deltas = []
    draws_needed = 10_000
    seed = 0
    while len(deltas) < draws_needed:
        noisy, _ = perturb_positions(registry, variance, seed=seed)
        for a, b in zip(registry.entries, noisy.entries):
            deltas.extend([b.coord[0] - a.coord[0], b.coord[1] - a.coord[1]])
        seed += 1
    empirical = float(np.var(np.asarray(deltas[:draws_needed])))
    reposition_ok = abs(empirical - variance) / variance <= 0.05

    _report(7, malfunction_ok and reposition_ok,
            f"malfunction touched {len(touched)} segments x "
            f"{sorted(set(touched)) or [0]} events; empirical variance "
            f"{empirical:.3f} vs {variance}")


# -- criterion 8 (optional): real-dataset direction checks --------------------


@pytest.mark.skipif("CARE_CASAS_DIR" not in os.environ,
                    reason="set CARE_CASAS_DIR to a directory of CASAS logs to enable")
def test_criterion_8_casas_directions():
    from care.ingest import (build_sensor_registry, load_coords, load_label_map,
                             parse_log, segment_activities)
    from care.train_eval import sweep

    root = os.environ["CARE_CASAS_DIR"]
    log = os.path.join(root, "cairo.log")
    labels = os.path.join(root, "cairo_labels.csv")
    coords_path = os.path.join(root, "cairo_coords.csv")
    events, _ = parse_log(log)
    label_map = load_label_map(labels)
    segments = segment_activities(events, label_map)
    coords = load_coords(coords_path) if os.path.exists(coords_path) else {}
    registry = build_sensor_registry(events, coords)

    mcfg = ModelConfig(input_dim=1, n_classes=label_map.n_classes, seq_encoder="bilstm")
    tcfg = TrainConfig()
    rows = sweep(segments, registry, PreprocessConfig(), mcfg, tcfg,
                 {"theta": [0.01, None]}, seed=0)
    acc = {row["theta"]: row["acc"] for row in rows}
    theta_ok = acc[0.01] >= acc["off"]

    rows = sweep(segments, registry, PreprocessConfig(), mcfg, tcfg,
                 {"bin_hours": [1.0, "no_time"]}, seed=0)
    acc = {row["bin_hours"]: row["acc"] for row in rows}
    time_ok = acc[1.0] >= acc["no_time"]
    _report(8, theta_ok and time_ok, f"theta 1% vs off and 1h vs no-time on {log}")
