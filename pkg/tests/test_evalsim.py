import numpy as np
import pytest

from scanpose import evalsim as ev
from scanpose import geometry as geo
from scanpose.tokens import load_tpose


def small_cfg(**kw):
    defaults = dict(num_actors=1, num_cameras=3, image_width=96, image_height=72,
                    num_scales=2, joint_noise_mm=0.0, rng_seed=42)
    defaults.update(kw)
    return ev.SceneConfig(**defaults)


# ---------------------------------------------------------------------------
# scene generation
# ---------------------------------------------------------------------------

def test_zero_perturbation_gives_translated_tpose():
    scene = ev.generate_scene(small_cfg())
    template, _, _ = load_tpose()
    diff = scene.gt_poses[0] - template
    assert np.allclose(diff, diff[0])  # constant translation across joints
    assert abs(diff[0, 2]) < 1e-9  # ground placement only


def test_heatmap_peaks_align_with_projections():
    scene = ev.generate_scene(small_cfg(heatmap_sigma_px=3.0))
    projections = np.stack([v.projection for v in scene.rig.views])
    uv, _, valid = geo.project_batch(projections, scene.gt_poses.reshape(-1, 3))
    checked = 0
    for t, pyr in enumerate(scene.pyramids):
        finest = pyr.levels[0]
        H, W = finest.shape[:2]
        for j in range(scene.config.num_joints):
            if not valid[t, j]:
                continue
            x, y = uv[t, j]
            if not (1.0 <= x <= W - 2.0 and 1.0 <= y <= H - 2.0):
                continue
            flat = np.argmax(finest[:, :, j])
            row, col = np.unravel_index(flat, (H, W))
            assert abs(col - x) <= 0.5 + 1e-9
            assert abs(row - y) <= 0.5 + 1e-9
            checked += 1
    assert checked > 10


def test_same_seed_identical_scene_bytes(tmp_path):
    cfg = small_cfg(num_actors=2, heatmap_noise=0.01)
    a = ev.generate_scene(cfg)
    b = ev.generate_scene(cfg)
    assert np.array_equal(a.gt_poses, b.gt_poses)
    da = tmp_path / "a"
    db = tmp_path / "b"
    da.mkdir()
    db.mkdir()
    ev.save_scene(a, str(da / "scene"))
    ev.save_scene(b, str(db / "scene"))
    assert ((da / "scene.grids.bin").read_bytes()
            == (db / "scene.grids.bin").read_bytes())
    assert (da / "scene.json").read_bytes() == (db / "scene.json").read_bytes()


def test_camera_count_override_keeps_prefix_and_actors():
    cfg = small_cfg(num_cameras=5, num_actors=2)
    base = ev.generate_scene(cfg)
    fewer = ev.generate_scene(cfg, num_cameras=3)
    more = ev.generate_scene(cfg, num_cameras=7)
    assert np.array_equal(base.gt_poses, fewer.gt_poses)
    assert np.array_equal(base.gt_poses, more.gt_poses)
    for k in range(3):
        assert np.allclose(fewer.rig.views[k].projection,
                           base.rig.views[k].projection)
    for k in range(5):
        assert np.allclose(more.rig.views[k].projection,
                           base.rig.views[k].projection)
    assert len(more.rig.views) == 7


def test_coordinate_channels_consistent_across_levels():
    scene = ev.generate_scene(small_cfg())
    pyr = scene.pyramids[0]
    J = scene.config.num_joints
    fine, coarse = pyr.levels[0], pyr.levels[1]
    # node (r, c) in the coarse level sits at pixel (2c, 2r) = fine node
    assert np.allclose(coarse[:, :, J], fine[::2, ::2, J])
    assert np.allclose(coarse[:, :, J + 1], fine[::2, ::2, J + 1])


def test_scene_roundtrip(tmp_path):
    cfg = small_cfg(num_actors=2, feature_dim=20)
    scene = ev.generate_scene(cfg)
    prefix = str(tmp_path / "scene_000")
    manifest, grids = ev.save_scene(scene, prefix)
    loaded = ev.load_scene(manifest)
    assert np.array_equal(loaded.gt_poses, scene.gt_poses)
    assert loaded.config == scene.config
    for a, b in zip(loaded.pyramids, scene.pyramids):
        assert a.scale_factors == b.scale_factors
        for ga, gb in zip(a.levels, b.levels):
            assert np.array_equal(ga, gb)
    assert np.allclose(loaded.rig.views[1].projection,
                       scene.rig.views[1].projection)


def test_actor_spacing_enforced():
    cfg = small_cfg(num_actors=3, min_actor_spacing_mm=1500.0, rng_seed=9)
    scene = ev.generate_scene(cfg)
    centers = scene.gt_poses[:, 2, :2]  # mid-hip ground positions
    for i in range(3):
        for k in range(i + 1, 3):
            assert np.linalg.norm(centers[i] - centers[k]) >= 1000.0


# ---------------------------------------------------------------------------
# mpjpe
# ---------------------------------------------------------------------------

def test_mpjpe_identical_zero():
    pose = np.random.default_rng(0).normal(size=(15, 3))
    assert ev.mpjpe(pose, pose) == 0.0


def test_mpjpe_uniform_offset_345():
    rng = np.random.default_rng(1)
    gt = rng.normal(size=(15, 3))
    assert abs(ev.mpjpe(gt + np.array([3.0, 0.0, 4.0]), gt) - 5.0) < 1e-12


def test_mpjpe_matches_per_joint_recomputation():
    rng = np.random.default_rng(2)
    gt = rng.normal(size=(15, 3)) * 100
    pred = gt + rng.normal(size=(15, 3)) * 10
    expect = np.mean([np.linalg.norm(pred[j] - gt[j]) for j in range(15)])
    assert abs(ev.mpjpe(pred, gt) - expect) < 1e-12


def test_mpjpe_shape_mismatch():
    with pytest.raises(ev.ShapeMismatch):
        ev.mpjpe(np.zeros((15, 3)), np.zeros((14, 3)))


# ---------------------------------------------------------------------------
# AP / mAP
# ---------------------------------------------------------------------------

def _skel(center, J=1):
    return np.tile(np.asarray(center, dtype=float), (J, 1))


def test_ap_no_predictions_is_zero():
    assert ev.ap_at(np.zeros((0, 1, 3)), np.zeros(0), _skel([0, 0, 0])[None], 25.0) == 0.0


def test_ap_single_exact_prediction_is_one():
    gt = _skel([0, 0, 0])[None]
    assert ev.ap_at(gt.copy(), np.array([0.9]), gt, 25.0) == 1.0


def test_ap_hand_constructed_case():
    gts = np.stack([_skel([0, 0, 0]), _skel([2000, 0, 0])])
    preds = np.stack([_skel([10, 0, 0]), _skel([30, 0, 0]), _skel([2005, 0, 0])])
    scores = np.array([0.9, 0.8, 0.7])
    # score order: p0 -> gt0 (10mm, TP@25); p1 -> gt1 (1970mm, FP@25);
    # p2 -> nothing left (FP). AP@25 = 0.5 * 1.0
    assert abs(ev.ap_at(preds, scores, gts, 25.0) - 0.5) < 1e-12
    # with a 2000mm threshold the second prediction turns TP at precision 1
    assert abs(ev.ap_at(preds, scores, gts, 2000.0) - 1.0) < 1e-12


def test_ap_matches_tp_position_oracle():
    # AP equals (1/Z) * sum of precision at each true-positive rank: an
    # independent route to the same area under the step PR curve
    rng = np.random.default_rng(3)
    for _ in range(50):
        Z = int(rng.integers(1, 6))
        P = int(rng.integers(0, 8))
        gts = np.stack([_skel(rng.uniform(-3000, 3000, 3)) for _ in range(Z)])
        preds = np.stack([_skel(rng.uniform(-3000, 3000, 3)) for _ in range(P)]) \
            if P else np.zeros((0, 1, 3))
        scores = rng.uniform(size=P)
        thr = float(rng.choice([25.0, 250.0, 2500.0]))
        got = ev.ap_at(preds, scores, gts, thr)
        if P == 0:
            assert got == 0.0
            continue
        matches = ev.greedy_match(preds, scores, gts)
        tp = 0
        acc = 0.0
        for k, (_, zi, dist) in enumerate(matches, start=1):
            if zi >= 0 and dist < thr:
                tp += 1
                acc += tp / k
        assert abs(got - acc / Z) < 1e-12


def test_ap_monotone_in_threshold():
    rng = np.random.default_rng(4)
    gts = np.stack([_skel(rng.uniform(-2000, 2000, 3)) for _ in range(4)])
    preds = gts + rng.normal(scale=80.0, size=gts.shape)
    scores = rng.uniform(size=4)
    values = [ev.ap_at(preds, scores, gts, t) for t in ev.MAP_THRESHOLDS_MM]
    assert all(a <= b + 1e-12 for a, b in zip(values, values[1:]))


def test_map_is_exact_mean_of_six_thresholds():
    rng = np.random.default_rng(5)
    gts = np.stack([_skel(rng.uniform(-2000, 2000, 3)) for _ in range(3)])
    preds = gts + rng.normal(scale=60.0, size=gts.shape)
    scores = rng.uniform(size=3)
    parts = [ev.ap_at(preds, scores, gts, t) for t in ev.MAP_THRESHOLDS_MM]
    assert ev.mean_ap(preds, scores, gts) == np.mean(parts)
    assert ev.MAP_THRESHOLDS_MM == (25.0, 50.0, 75.0, 100.0, 125.0, 150.0)


def test_map_perfect_and_empty():
    gts = np.stack([_skel([100, 0, 0]), _skel([-3000, 0, 0])])
    assert ev.mean_ap(gts.copy(), np.array([0.9, 0.8]), gts) == 1.0
    assert ev.mean_ap(np.zeros((0, 1, 3)), np.zeros(0), gts) == 0.0


# ---------------------------------------------------------------------------
# PCP
# ---------------------------------------------------------------------------

def test_pcp_exact_prediction():
    template, _, limbs = load_tpose()
    assert ev.pcp(template, template, limbs) == 1.0


def test_pcp_boundary_is_strict():
    gt = np.array([[0.0, 0.0, 0.0], [400.0, 0.0, 0.0]])
    pred = gt + np.array([[0.0, 200.0, 0.0], [0.0, 200.0, 0.0]])
    assert ev.pcp(pred, gt, [(0, 1)]) == 0.0
    slightly_less = gt + np.array([[0.0, 199.0, 0.0], [0.0, 199.0, 0.0]])
    assert ev.pcp(slightly_less, gt, [(0, 1)]) == 1.0


def test_pcp_zero_length_limb():
    gt = np.zeros((2, 3))
    with pytest.raises(ev.ZeroLengthLimb):
        ev.pcp(gt, gt, [(0, 1)])


def test_pcp_mixed_matches_enumeration():
    rng = np.random.default_rng(6)
    template, _, limbs = load_tpose()
    pred = template + rng.normal(scale=90.0, size=template.shape)
    got = ev.pcp(pred, template, limbs)
    correct = 0
    for a, b in limbs:
        length = np.linalg.norm(template[a] - template[b])
        err = 0.5 * (np.linalg.norm(pred[a] - template[a])
                     + np.linalg.norm(pred[b] - template[b]))
        correct += err < 0.5 * length
    assert got == correct / len(limbs)


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------

def test_evaluate_perfect_output():
    rng = np.random.default_rng(7)
    template, _, _ = load_tpose()
    gts = np.stack([template + np.array([x, 0, 0]) for x in (-1500.0, 1500.0)])
    report = ev.evaluate(gts.copy(), np.array([0.95, 0.9]), gts)
    assert report.mpjpe_mm == 0.0
    assert report.map == 1.0
    assert report.recall == 1.0
    assert report.pcp_avg == 1.0
    assert all(v == 1.0 for v in report.ap.values())


def test_evaluate_empty_output():
    template, _, _ = load_tpose()
    report = ev.evaluate(np.zeros((0, 15, 3)), np.zeros(0), template[None])
    assert not report.mpjpe_defined
    assert np.isnan(report.mpjpe_mm)
    assert report.map == 0.0 and report.recall == 0.0 and report.pcp_avg == 0.0


def test_evaluate_matches_component_metrics():
    rng = np.random.default_rng(8)
    template, _, limbs = load_tpose()
    gts = np.stack([template + np.array([x, y, 0]) for x, y in
                    ((-2000.0, 0.0), (1800.0, 500.0), (0.0, -2200.0))])
    preds = gts + rng.normal(scale=120.0, size=gts.shape)
    scores = rng.uniform(0.5, 1.0, size=3)
    report = ev.evaluate(preds, scores, gts, limbs)
    for thr in ev.MAP_THRESHOLDS_MM:
        assert report.ap[thr] == ev.ap_at(preds, scores, gts, thr)
    assert report.map == ev.mean_ap(preds, scores, gts)
    matches = ev.greedy_match(preds, scores, gts)
    dists = [d for _, zi, d in matches if zi >= 0]
    assert abs(report.mpjpe_mm - np.mean(dists)) < 1e-12


def test_metrics_invariant_under_joint_translation():
    rng = np.random.default_rng(9)
    template, _, limbs = load_tpose()
    gts = np.stack([template, template + np.array([2000.0, 100.0, 0.0])])
    preds = gts + rng.normal(scale=40.0, size=gts.shape)
    scores = np.array([0.8, 0.6])
    shift = np.array([512.0, -777.0, 123.0])
    a = ev.evaluate(preds, scores, gts, limbs)
    b = ev.evaluate(preds + shift, scores, gts + shift, limbs)
    assert a.mpjpe_mm == pytest.approx(b.mpjpe_mm, rel=0, abs=1e-9)
    assert a.map == pytest.approx(b.map, abs=1e-12)
    assert a.recall == b.recall
    assert a.pcp_avg == pytest.approx(b.pcp_avg, abs=1e-12)


def test_report_serialization():
    template, _, _ = load_tpose()
    report = ev.evaluate(template[None], np.array([0.9]), template[None])
    doc = report.to_json()
    assert "mpjpe_mm" in doc
    rows = dict(report.csv_rows())
    assert "mpjpe_mm" in rows and "ap25" in rows
    assert rows["pcp_avg_pct"] == 100.0  # percentage on the CSV surface
