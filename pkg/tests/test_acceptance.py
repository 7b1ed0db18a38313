"""End-to-end acceptance checks for the primary toolkit.

Each test prints a single PASS/FAIL line with its headline numbers so a full
run doubles as a release scorecard.
"""

import json
import time

import numpy as np
import pytest
from scipy.special import expit

from cropseg.corpus import (
    Manifest,
    SampleRecord,
    ScreeningDecision,
    assign_full_coverage,
    load_manifest,
    record_decision,
    replay_journal,
)
from cropseg.fade import fade_forward, grad_check, init_params
from cropseg.metrics import ConfusionCounts, aggregate, biou, confusion, miou
from cropseg.pseudolabel import (
    BinaryMask,
    PseudoLabelOptions,
    SigmoidFit,
    depth_to_mask,
    fit_sigmoid,
    select_threshold,
)
from cropseg.raster import FeatureMap, Raster2D
from cropseg.selftrain import TrainOptions, build_trimap, masked_bce_loss, run_two_stage
from cropseg.synthetic import build_corpus, two_plane_scene

from test_fade import _randomized, _with_gate_bias, loop_oracle
from test_metrics import brute_biou, brute_confusion
from test_pseudolabel import _flat_histogram


def _verdict(name, ok, detail):
    print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    assert ok, f"{name}: {detail}"


class TestAcceptance:
    def test_pseudolabel_fidelity(self):
        t0 = time.perf_counter()
        accs = []
        for seed in range(50):
            depth, gt = two_plane_scene(seed, size=256)
            mask, _ = depth_to_mask(depth, PseudoLabelOptions(rule="inflection"))
            accs.append((mask.raster.data.astype(bool) == gt).mean())
        elapsed = time.perf_counter() - t0
        mean_acc = float(np.mean(accs))
        ok = mean_acc >= 0.99 and elapsed < 10.0
        _verdict(
            "pseudo-label fidelity",
            ok,
            f"mean acc {mean_acc:.4f} (min {min(accs):.4f}) over 50 scenes in {elapsed:.1f}s",
        )

    def test_sigmoid_fit_recovery(self):
        x = np.linspace(0.0, 1.0, 256)
        worst_clean = 0.0
        for b in (-0.05, 0.0, 0.05):
            for L in (0.9, 1.0, 1.1):
                for k in (8.0, 20.0, 50.0):
                    for x0 in (0.3, 0.5, 0.7):
                        f = fit_sigmoid(x, b + L * expit(k * (x - x0)))
                        rel = max(
                            abs(f.base - b) / max(abs(b), 1.0),
                            abs(f.amplitude - L) / L,
                            abs(f.steepness - k) / k,
                            abs(f.center - x0) / x0,
                        )
                        worst_clean = max(worst_clean, rel)

        rng = np.random.default_rng(0)
        worst_noisy = 0.0
        for b, L, k, x0 in [(0.0, 1.0, 20.0, 0.5), (0.03, 0.95, 12.0, 0.4), (-0.02, 1.05, 30.0, 0.6)]:
            y = b + L * expit(k * (x - x0)) + rng.normal(0.0, 1e-3, x.size)
            f = fit_sigmoid(x, y)
            worst_noisy = max(
                worst_noisy,
                abs(f.amplitude - L) / L,
                abs(f.steepness - k) / k,
                abs(f.center - x0) / x0,
            )

        xs = np.linspace(0.0, 1.0, 100001)
        worst_rule = 0.0
        hist = _flat_histogram()
        for k, x0 in [(10.0, 0.45), (25.0, 0.55), (40.0, 0.35)]:
            fit = SigmoidFit(
                base=0.0, amplitude=1.0, steepness=k, center=x0,
                residual_rms=0.0, iterations=1, converged=True,
            )
            f1 = np.gradient(fit(xs), xs)
            f2 = np.gradient(f1, xs)
            half = xs < x0
            grid = {
                "inflection": xs[np.argmax(f1)],
                "max_curvature_left": xs[half][np.argmax(np.abs(f2[half]))],
                "max_curvature_right": xs[~half][np.argmax(np.abs(f2[~half]))],
            }
            for rule, ref in grid.items():
                worst_rule = max(worst_rule, abs(select_threshold(fit, hist, rule) - ref))

        ok = worst_clean < 1e-6 and worst_noisy < 0.02 and worst_rule < 1e-4
        _verdict(
            "sigmoid fit recovery",
            ok,
            f"clean rel {worst_clean:.2e}, noisy rel {worst_noisy:.2e}, rule gap {worst_rule:.2e}",
        )

    def test_fade_correctness(self):
        rng = np.random.default_rng(1)
        worst_fwd = 0.0
        worst_simplex = 0.0
        for trial in range(20):
            C = int(rng.integers(1, 5))
            h = int(rng.integers(1, 7))
            w = int(rng.integers(1, 7))
            K = int(rng.choice([3, 5]))
            p = _randomized(init_params(C, Cm=int(rng.integers(1, 6)), K=K, seed=trial), rng)
            dec = rng.normal(size=(C, h, w))
            enc = rng.normal(size=(C, 2 * h, 2 * w))
            out = fade_forward(FeatureMap(dec), FeatureMap(enc), p)
            worst_fwd = max(worst_fwd, float(np.abs(out.y.data - loop_oracle(dec, enc, p)).max()))
            worst_simplex = max(worst_simplex, float(np.abs(out.kernels.sum(axis=0) - 1.0).max()))

        p = _randomized(init_params(2, Cm=3, K=5, seed=99), rng)
        dec = rng.normal(size=(2, 4, 4))
        enc = rng.normal(size=(2, 8, 8))
        closed = fade_forward(
            FeatureMap(dec), FeatureMap(enc), _with_gate_bias(p, -50.0)
        ).y.data
        padded = np.pad(dec, ((0, 0), (2, 2), (2, 2)), mode="edge")
        convex_ok = all(
            padded[c, i // 2 : i // 2 + 5, j // 2 : j // 2 + 5].min() - 1e-12
            <= closed[c, i, j]
            <= padded[c, i // 2 : i // 2 + 5, j // 2 : j // 2 + 5].max() + 1e-12
            for c in range(2)
            for i in range(8)
            for j in range(8)
        )
        skip = fade_forward(FeatureMap(dec), FeatureMap(enc), _with_gate_bias(p, 50.0)).y.data
        skip_exact = float(np.abs(skip - enc).max())

        t0 = time.perf_counter()
        report = grad_check(C=3, h=4, w=4, K=5, Cm=8, seed=1, eps=1e-5)
        gc_time = time.perf_counter() - t0
        grad_rel = report.max_rel()

        ok = (
            worst_fwd < 1e-12
            and worst_simplex < 1e-6
            and convex_ok
            and skip_exact == 0.0
            and grad_rel < 1e-4
            and gc_time < 30.0
        )
        _verdict(
            "fade correctness",
            ok,
            f"fwd {worst_fwd:.1e}, simplex {worst_simplex:.1e}, convex {convex_ok}, "
            f"skip {skip_exact:.1e}, grad rel {grad_rel:.1e} in {gc_time:.1f}s",
        )

    def test_metric_oracle_equivalence(self):
        rng = np.random.default_rng(2)
        mismatches = 0
        for _ in range(100):
            h, w = rng.integers(2, 65, 2)
            p = rng.integers(0, 2, (h, w)).astype(np.uint8)
            g = rng.integers(0, 2, (h, w)).astype(np.uint8)
            c = confusion(BinaryMask(Raster2D(p)), Raster2D(g))
            tp, fp, fn, tn, _ = brute_confusion(p, g)
            ref = miou(ConfusionCounts(tp, fp, fn, tn)) if tp + fp + fn + tn else None
            if miou(c) != ref:
                mismatches += 1
            if biou(BinaryMask(Raster2D(p)), BinaryMask(Raster2D(g)), 2) != brute_biou(p, g, 2):
                mismatches += 1

        identity_ok = True
        for seed in range(10):
            a = np.random.default_rng(seed).integers(0, 2, (16, 16)).astype(np.uint8)
            rep = aggregate([(BinaryMask(Raster2D(a)), Raster2D(a))], radius=1)
            identity_ok &= rep.miou == 100.0 and rep.biou == 100.0

        columns = set(
            aggregate(
                [(BinaryMask(Raster2D(np.eye(4, dtype=np.uint8))), Raster2D(np.eye(4, dtype=np.uint8)))],
                radius=1,
            ).to_dict()
        )
        columns_ok = columns == {"miou", "iou_fg", "iou_bg", "biou", "images", "biou_radius"}

        ok = mismatches == 0 and identity_ok and columns_ok
        _verdict(
            "metric oracle equivalence",
            ok,
            f"{mismatches} mismatches over 100 pairs, identity {identity_ok}, columns {columns_ok}",
        )

    def test_trimap_law(self):
        rng = np.random.default_rng(3)
        exact = True
        for _ in range(100):
            h, w = rng.integers(1, 25, 2)
            a = rng.integers(0, 2, (h, w)).astype(np.uint8)
            b = rng.integers(0, 2, (h, w)).astype(np.uint8)
            t = build_trimap(
                BinaryMask(Raster2D(a)), BinaryMask(Raster2D(b))
            )
            exact &= t.ignore_fraction == (a != b).sum() / (h * w)

        p = rng.uniform(0.05, 0.95, (8, 8))
        tri = build_trimap(
            BinaryMask(Raster2D(rng.integers(0, 2, (8, 8)).astype(np.uint8))),
            BinaryMask(Raster2D(rng.integers(0, 2, (8, 8)).astype(np.uint8))),
        )
        _, grad = masked_bce_loss(Raster2D(p), tri)
        ignore_zero = bool(np.all(grad.data[tri.raster.data == 255] == 0.0))
        eps = 1e-7
        worst_fd = 0.0
        for i in range(8):
            for j in range(8):
                if tri.raster.data[i, j] == 255:
                    continue
                shifted = p.copy()
                shifted[i, j] += eps
                hi, _ = masked_bce_loss(Raster2D(shifted), tri)
                shifted[i, j] -= 2 * eps
                lo, _ = masked_bce_loss(Raster2D(shifted), tri)
                numeric = (hi - lo) / (2 * eps)
                worst_fd = max(
                    worst_fd, abs(numeric - grad.data[i, j]) / max(abs(numeric), 1e-10)
                )

        ok = exact and ignore_zero and worst_fd < 1e-6
        _verdict(
            "trimap law",
            ok,
            f"fraction exact {exact}, ignore-grad zero {ignore_zero}, fd rel {worst_fd:.1e}",
        )

    def test_two_stage_direction(self, tmp_path):
        t0 = time.perf_counter()
        results = []
        for seed in range(5):
            root = tmp_path / f"corpus-{seed}"
            m = build_corpus(root, n_train=4, n_test=2, seed=seed, size=64, flip_fraction=0.2)
            r1, r2 = run_two_stage(m, TrainOptions(epochs=120))
            results.append((r1.eval_miou, r2.eval_miou))
        elapsed = time.perf_counter() - t0
        direction_ok = all(s2 >= s1 for s1, s2 in results)
        ok = direction_ok and elapsed < 60.0
        summary = ", ".join(f"{s1:.2f}->{s2:.2f}" for s1, s2 in results)
        _verdict("two-stage direction", ok, f"{summary} over 5 seeds in {elapsed:.1f}s")

    def test_full_coverage_rule(self, tmp_path):
        from PIL import Image

        img_path = tmp_path / "field.png"
        Image.fromarray(np.zeros((31, 57, 3), np.uint8)).save(img_path)
        s = SampleRecord(id="field", image_path=str(img_path), depth_path="unused")
        mask = assign_full_coverage(s)
        dims_ok = mask.raster.data.shape == (31, 57) and (mask.raster.data == 1).all()
        score = miou(confusion(mask, Raster2D(np.ones((31, 57), np.uint8))))
        ok = dims_ok and score == 100.0
        _verdict("full-coverage rule", ok, f"dims {mask.raster.data.shape}, mIoU {score:.1f}")

    def test_journal_durability(self, tmp_path):
        root = tmp_path / "data"
        build_corpus(root, n_train=5, n_test=0, seed=7, size=16)
        journal = tmp_path / "journal.jsonl"
        acknowledged = [
            ScreeningDecision("scene-000", "accept"),
            ScreeningDecision("scene-001", "reject"),
            ScreeningDecision("scene-002", "accept"),
            ScreeningDecision("scene-002", "reject"),
        ]
        for d in acknowledged:
            record_decision(journal, d)
        # a crash mid-append leaves a torn final line on disk
        with open(journal, "a", encoding="utf-8") as f:
            f.write(json.dumps(ScreeningDecision("scene-003", "accept").to_dict())[:17])

        manifest_path = root / "manifest.json"
        replayed = replay_journal(journal, load_manifest(manifest_path))
        reference = load_manifest(manifest_path)
        for d in acknowledged:
            s = reference.by_id(d.sample_id)
            s.status = {"accept": "accepted", "reject": "rejected"}[d.verdict]
        same = [r.to_dict() for r in replayed.samples] == [r.to_dict() for r in reference.samples]
        torn_dropped = replayed.by_id("scene-003").status == "pending"
        ok = same and torn_dropped
        _verdict(
            "journal durability",
            ok,
            f"acknowledged state identical {same}, torn line dropped {torn_dropped}",
        )
