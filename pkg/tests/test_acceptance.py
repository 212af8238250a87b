"""End-to-end acceptance checks; one summary line per criterion is printed at the end of the run."""

import math
import os
import time
from concurrent.futures import ProcessPoolExecutor

import numpy as np
import pytest

from crossmodal.autodiff import Tensor, frozen_statistics, grad_check, grad_check_report, ops
from crossmodal.datasets import assemble_batch, build_eval_pairs, build_store, generate_toy_dataset
from crossmodal.encoders import (EncoderConfig, forward_fusion, forward_image, forward_point, forward_segmentation,
                                 init_params, knn_graph)
from crossmodal.evalkit import (cross_modality_accuracy, object_image_features, pair_distance_stats, point_features,
                                recognition_probe, retrieval_topk, segmentation_metrics)
from crossmodal.mesh_io import TriangleMesh, fit_to_view, mesh_centroid
from crossmodal.objectives import LossConfig, combined_loss, cross_modality_loss, triplet_loss
from crossmodal.pointcloud import fps_indices
from crossmodal.render import Camera, Light, RenderConfig, rasterize, render_view, sample_viewpoints
from crossmodal.trainer import (FinetuneConfig, TrainConfig, finetune_segmentation, joint_loss, part_mask,
                                predict_parts, pretrain)
from conftest import cube_mesh, uv_sphere
from test_autodiff import _primitive_programs
from test_encoders import knn_oracle
from test_pointcloud import greedy_oracle

TOY = EncoderConfig.toy()
SEEDS = (0, 1, 2)
STUDY_CLASSES = ["sphere", "box", "cylinder"]

# criterion id -> (passed, detail); printed by the terminal-summary hook in conftest
RESULTS: dict[str, tuple[bool, str]] = {}


def record(cid: str, ok: bool, detail: str) -> bool:
    RESULTS[cid] = (bool(ok), detail)
    return bool(ok)


@pytest.fixture(scope="module")
def toy_store():
    ds = generate_toy_dataset(STUDY_CLASSES, 100, np.random.default_rng(2024))
    return build_store(ds, RenderConfig.toy(), 256, np.random.default_rng(2025))


# ------------------------------------------------------------------ 1. gradient checks

def _probe(out, rng):
    return ops.sum(ops.mul(out, Tensor(rng.standard_normal(out.shape))))


def _network_programs(seed):
    rng = np.random.default_rng(seed)
    p = init_params(TOY, seed, dtype=np.float64, num_parts=4)
    imgs = rng.random((3, 1, 32, 32))
    x = Tensor(rng.standard_normal((2, 16, 3)), requires_grad=True)
    fi = Tensor(rng.standard_normal((4, 64)), requires_grad=True)
    fp = Tensor(rng.standard_normal((4, 64)), requires_grad=True)
    # anchor/positive/negative with every hinge well inside its active or inactive region
    a = rng.standard_normal((6, 8))
    pos = Tensor(a + 0.1 * rng.standard_normal((6, 8)), requires_grad=True)
    neg = Tensor(a + np.where(np.arange(6)[:, None] < 3, 0.2, 3.0) * rng.standard_normal((6, 8)),
                 requires_grad=True)
    anchor = Tensor(a, requires_grad=True)
    probs = Tensor(rng.uniform(0.1, 0.9, (5, 3)), requires_grad=True)
    labels = np.tile([1, 1, 0], (5, 1))

    def frozen(f):
        def run():
            with frozen_statistics():
                return f()
        return run

    return [
        ("F_img", frozen(lambda: _probe(forward_image(p, imgs, "train"), np.random.default_rng(seed + 10))),
         list(p.network("img").values()), 8),
        ("F_p", frozen(lambda: _probe(forward_point(p, x, "train")[1], np.random.default_rng(seed + 20))),
         list(p.network("pt").values()) + [x], 8),
        ("F_f", lambda: _probe(forward_fusion(p, fi, fp), np.random.default_rng(seed + 30)),
         list(p.network("fuse").values()) + [fi, fp], 20),
        ("seg_head", frozen(lambda: _probe(forward_segmentation(p, x.data, "train"), np.random.default_rng(seed + 40))),
         list(p.network("seg").values()), 10),
        ("L_triplet", lambda: triplet_loss(anchor, pos, neg, 1.0), [anchor, pos, neg], 50),
        ("L_cross", lambda: cross_modality_loss(probs, labels), [probs], 50),
    ]


def test_criterion_1_gradient_checks():
    t0 = time.perf_counter()
    worst, failures, skipped = 0.0, [], 0
    for seed in SEEDS:
        rng = np.random.default_rng(seed)
        for name, build in _primitive_programs(rng):
            fn, params = build()
            err = grad_check(fn, params, epsilon=1e-5, rng=rng)
            worst = max(worst, err)
            if not err < 1e-4:
                failures.append(f"{name}@{seed}={err:.2e}")
        for name, fn, params, coords in _network_programs(seed):
            rep = grad_check_report(fn, params, epsilon=1e-5, coords_per_param=coords, rng=rng)
            worst, skipped = max(worst, rep.max_error), skipped + rep.skipped
            if not rep.max_error < 1e-4 or rep.skipped > 0.1 * (rep.checked + rep.skipped):
                failures.append(f"{name}@{seed}={rep.max_error:.2e}")
    elapsed = time.perf_counter() - t0
    ok = record("1", not failures and elapsed < 300,
                f"max rel err {worst:.2e} over 3 seeds, {skipped} kink-adjacent coords skipped, "
                f"{elapsed:.0f}s{'; failing ' + ', '.join(failures) if failures else ''}")
    assert ok, RESULTS["1"]


# ------------------------------------------------------------------ 2. geometry oracles

def test_criterion_2_geometry_oracles():
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    fps_ok = knn_ok = 0
    for _ in range(200):
        m = int(rng.integers(1, 65))
        pts = rng.standard_normal((m, 3))
        n, start = int(rng.integers(1, m + 1)), int(rng.integers(m))
        fps_ok += list(fps_indices(pts, n, start)) == greedy_oracle(pts, n, start)
        m = int(rng.integers(2, 65))
        f = rng.standard_normal((1, m, int(rng.integers(1, 6))))
        k = int(rng.integers(1, m))
        knn_ok += np.array_equal(knn_graph(f, k), knn_oracle(f, k))
    # centroid: Monte-Carlo surface sampling by rejection on each face's parallelogram
    mesh = TriangleMesh([[0, 0, 0], [2, 0, 0], [0, 2, 0], [0, 0, 1], [1, 0, 1], [0, 1, 1], [3, 3, 3]],
                        [[0, 1, 2], [3, 4, 5], [1, 6, 2]])
    v = mesh.vertices[mesh.faces]
    areas = 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)
    face = rng.choice(len(areas), 400_000, p=areas / areas.sum())
    uv = rng.random((len(face), 2))
    keep = uv.sum(1) <= 1
    face, uv = face[keep], uv[keep]
    pts = v[face, 0] + uv[:, :1] * (v[face, 1] - v[face, 0]) + uv[:, 1:] * (v[face, 2] - v[face, 0])
    cerr = float(np.abs(mesh_centroid(mesh) - pts.mean(0)).max())
    elapsed = time.perf_counter() - t0
    ok = record("2", fps_ok == 200 and knn_ok == 200 and cerr < 1e-2 and elapsed < 120,
                f"FPS {fps_ok}/200, KNN {knn_ok}/200, centroid |err| {cerr:.1e}, {elapsed:.0f}s")
    assert ok, RESULTS["2"]


# ------------------------------------------------------------------ 3. renderer analytics

def test_criterion_3_renderer():
    t0 = time.perf_counter()
    tri = TriangleMesh([[-0.5, -0.4, 0], [0.5, -0.4, 0], [0, 0.6, 0]], [[0, 1, 2]])
    front = Camera(90.0, 90.0, 3.5)

    def diffuse(light):
        return RenderConfig(width=32, height=32, view_count=2, lights=(light,),
                            k_ambient=0.0, k_diffuse=1.0, k_specular=0.0)

    perp = render_view(tri, front, diffuse(Light((0.0, 0.0, 1e6)))).pixels[16, 16]
    oblique = render_view(tri, front, diffuse(Light((0.0, 1e6, 1e6)))).pixels[16, 16]
    cfg = RenderConfig.toy()
    rng = np.random.default_rng(11)
    lit = 0
    for mesh in (fit_to_view(uv_sphere()), fit_to_view(cube_mesh())):
        for cam in sample_viewpoints(50, cfg, rng):
            img, depth = rasterize(mesh, cam, cfg)
            fg = np.isfinite(depth)
            lit += bool(fg.any() and img[fg].mean() > cfg.k_ambient * cfg.ambient_intensity)
    elapsed = time.perf_counter() - t0
    ok = record("3", abs(perp - 1.0) <= 1e-3 and abs(oblique - math.sqrt(0.5)) <= 1e-3 and lit == 100
                and elapsed < 120,
                f"perpendicular {perp:.4f}, 45 deg {oblique:.4f}, lit foreground {lit}/100 cameras "
                f"(sphere + cube), {elapsed:.0f}s")
    assert ok, RESULTS["3"]


# ------------------------------------------------------------------ 4. loss identities

def test_criterion_4_loss_identities(toy_store):
    t0 = time.perf_counter()
    a = Tensor(np.ones((2, 3)))
    zero = triplet_loss(a, a, Tensor(a.data + 2.0), 1.0).item()
    uniform = cross_modality_loss(Tensor(np.full((4, 3), 0.5)), np.tile([1, 1, 0], (4, 1))).item()
    lt, lc = Tensor(np.array(1.3)), Tensor(np.array(0.7))
    lin = max(abs(combined_loss(lt, lc, b).item() - (1.3 + b * 0.7)) for b in (0.0, 0.5, 1.0, 2.0, 10.0))
    _, trace = pretrain(toy_store, TOY, TrainConfig.toy(total_iterations=50, seed=3), LossConfig(cross_weight=0.0),
                        log_every=0)
    equal = sum(r[3] == r[1] for r in trace)
    elapsed = time.perf_counter() - t0
    ok = record("4", zero == 0.0 and abs(uniform - 3 * math.log(2)) <= 1e-9 and lin < 1e-12 and equal == 50
                and elapsed < 180,
                f"triplet zero case {zero}, uniform BCE {uniform:.12f} (3 ln2 {3 * math.log(2):.12f}), "
                f"beta linearity err {lin:.1e}, beta=0 trace equal {equal}/50, {elapsed:.0f}s")
    assert ok, RESULTS["4"]


# ------------------------------------------------------------------ 5. toy training study

def _seg_miou(params, store, objects):
    cats = [store.classes[i] for i in objects]
    preds = predict_parts(params, store.clouds[objects], part_mask(cats, params.num_parts))
    return segmentation_metrics(preds, store.parts[objects], cats).instance_miou


def study_seed(seed, store):
    t0 = time.perf_counter()
    params, trace = pretrain(store, TOY, TrainConfig.toy(seed=seed), log_every=0)
    out = {"seed": seed, "first100": float(np.mean([r[3] for r in trace[:100]])),
           "last100": float(np.mean([r[3] for r in trace[-100:]]))}
    rng = np.random.default_rng(1000 + seed)
    tr, te, y = store.indices("train"), store.indices("test"), store.labels
    out["cm_acc"] = cross_modality_accuracy(params, store, build_eval_pairs(store, "2D-3D", rng))
    out["pairs"] = pair_distance_stats(params, store, build_eval_pairs(store, "2D-2D", rng))
    fp_tr, fp_te = point_features(params, store.clouds[tr]), point_features(params, store.clouds[te])
    out["fp_probe"] = recognition_probe(fp_tr, y[tr], fp_te, y[te])
    for v in (1, 8):
        out[f"img_probe_v{v}"] = recognition_probe(object_image_features(params, store, tr, v), y[tr],
                                                   object_image_features(params, store, te, v), y[te])
    out["retrieval"] = retrieval_topk(fp_te, None, y[te], ks=(1, 5, 10, 20, 50))
    seg = {}
    runs = [("unfrozen", params, "unfrozen", 1.0), ("frozen", params, "frozen", 1.0),
            ("random_frozen", init_params(TOY, seed + 500), "frozen", 1.0), ("scratch", None, "scratch", 1.0),
            ("unfrozen_10", params, "unfrozen", 0.1), ("scratch_10", None, "scratch", 0.1)]
    for name, base, regime, fraction in runs:
        tuned, _ = finetune_segmentation(base, store, regime, FinetuneConfig(seed=seed, fraction=fraction),
                                         enc_cfg=TOY)
        seg[name] = _seg_miou(tuned, store, te)
    out["seg"] = seg
    out["seconds"] = time.perf_counter() - t0
    return out


@pytest.fixture(scope="module")
def study(toy_store):
    t0 = time.perf_counter()
    workers = min(len(SEEDS), os.cpu_count() or 1)
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(study_seed, SEEDS, [toy_store] * len(SEEDS)))
    else:
        results = [study_seed(s, toy_store) for s in SEEDS]
    return results, time.perf_counter() - t0


def _fmt(values, spec=".3f"):
    return "[" + ", ".join(format(v, spec) for v in values) + "]"


def test_criterion_5a_cross_modality(study):
    acc = [r["cm_acc"] for r in study[0]]
    ok = record("5a", min(acc) >= 0.85, f"cross-modality accuracy per seed {_fmt(acc)} (need >= 0.85)")
    assert ok, RESULTS["5a"]


def test_criterion_5b_pair_distance(study):
    rows = [r["pairs"] for r in study[0]]
    ok = record("5b", all(p.positive_mpd + p.positive_std < p.negative_mpd for p in rows),
                "pos mPD+std " + _fmt([p.positive_mpd + p.positive_std for p in rows])
                + " vs neg mPD " + _fmt([p.negative_mpd for p in rows]))
    assert ok, RESULTS["5b"]


def test_criterion_5c_point_probe(study):
    acc = [r["fp_probe"] for r in study[0]]
    ok = record("5c", min(acc) >= 0.90, f"F_p linear probe per seed {_fmt(acc)} (need >= 0.90)")
    assert ok, RESULTS["5c"]


def test_criterion_5d_multiview(study):
    v1 = [r["img_probe_v1"] for r in study[0]]
    v8 = [r["img_probe_v8"] for r in study[0]]
    ok = record("5d", all(b >= a - 0.02 for a, b in zip(v1, v8)) and np.mean(v8) > np.mean(v1),
                f"2D probe v=1 {_fmt(v1)} -> v=8 {_fmt(v8)}, means {np.mean(v1):.3f} -> {np.mean(v8):.3f}")
    assert ok, RESULTS["5d"]


def test_criterion_5e_retrieval(study):
    tops = [r["retrieval"] for r in study[0]]
    monotone = all(list(t.values()) == sorted(t.values()) for t in tops)
    ok = record("5e", min(t[1] for t in tops) >= 0.80 and monotone,
                f"Top-1 per seed {_fmt([t[1] for t in tops])}, top-k nondecreasing: {monotone}")
    assert ok, RESULTS["5e"]


def test_criterion_5f_segmentation(study):
    seg = {k: float(np.mean([r["seg"][k] for r in study[0]])) for k in study[0][0]["seg"]}
    gap_full = seg["unfrozen"] - seg["scratch"]
    gap_low = seg["unfrozen_10"] - seg["scratch_10"]
    ok = record("5f", seg["unfrozen"] >= seg["frozen"] >= seg["random_frozen"] and seg["unfrozen"] >= 0.75
                and gap_low >= gap_full - 0.02,
                f"instance mIoU unfrozen {seg['unfrozen']:.3f} >= frozen {seg['frozen']:.3f} >= random-init "
                f"frozen {seg['random_frozen']:.3f}; gap vs scratch at 10% {gap_low:+.3f} vs 100% {gap_full:+.3f}")
    assert ok, RESULTS["5f"]


def test_criterion_5_budget_and_loss(study):
    results, elapsed = study
    ratios = [r["last100"] / r["first100"] for r in results]
    cores = os.cpu_count() or 1
    # the wall-clock budget is stated for a 4-core machine; with fewer cores only the measurement is reported
    budget_ok = elapsed < 45 * 60 if cores >= 4 else True
    ok = record("5", max(ratios) < 0.5 and budget_ok,
                f"study wall time {elapsed / 60:.1f} min on {cores} core(s); final/first 100-iteration "
                f"L_self ratio {_fmt(ratios)}")
    assert ok, RESULTS["5"]


# ------------------------------------------------------------------ 6. determinism

def test_criterion_6_determinism(toy_store):
    t0 = time.perf_counter()
    cfg = TrainConfig.toy(total_iterations=10, seed=7, deterministic=True)
    _, a = pretrain(toy_store, TOY, cfg, log_every=0)
    _, b = pretrain(toy_store, TOY, cfg, log_every=0)
    elapsed = time.perf_counter() - t0
    ok = record("6", a == b and elapsed < 60, f"10-iteration traces identical: {a == b}, {elapsed:.0f}s")
    assert ok, RESULTS["6"]


# ------------------------------------------------------------------ 7. joint-gradient structure

def test_criterion_7_gradient_structure(toy_store):
    batch = assemble_batch(toy_store, np.arange(8), np.random.default_rng(0))

    def grads(beta):
        p = init_params(TOY, 5)
        joint_loss(p, batch.images, batch.clouds, batch.labels, LossConfig(cross_weight=beta)).loss.backward()
        return {net: sum(float(np.abs(t.grad).sum()) for t in p.network(net).values() if t.grad is not None)
                for net in ("img", "pt", "fuse")}

    full, zero = grads(1.0), grads(0.0)
    ok = record("7", all(v > 0 for v in full.values()) and zero["pt"] == 0 and zero["fuse"] == 0 and zero["img"] > 0,
                "beta=1 |grad| img/pt/fuse " + _fmt(full.values(), ".2e")
                + "; beta=0 " + _fmt(zero.values(), ".2e"))
    assert ok, RESULTS["7"]
