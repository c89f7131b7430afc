import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_e_tc, brute_e_warp, brute_psnr
from recurvsr import data as D
from recurvsr import evaluation as E
from recurvsr.errors import ContractError, DimensionError
from recurvsr.flow import backward_warp


def brute_ssim(a, b):
    """Per-pixel SSIM with an explicit 11x11 Gaussian window and symmetric borders."""
    x = np.arange(11) - 5
    g = np.exp(-(x**2) / (2 * 1.5**2))
    win = np.outer(g, g) / np.outer(g, g).sum()
    c1, c2 = 0.01**2, 0.03**2
    vals = []
    for c in range(a.shape[-1]):
        pa = np.pad(a[..., c], 5, mode="symmetric")
        pb = np.pad(b[..., c], 5, mode="symmetric")
        total = 0.0
        for i in range(a.shape[0]):
            for j in range(a.shape[1]):
                wa, wb = pa[i : i + 11, j : j + 11], pb[i : i + 11, j : j + 11]
                ma, mb = (win * wa).sum(), (win * wb).sum()
                va = (win * wa * wa).sum() - ma * ma
                vb = (win * wb * wb).sum() - mb * mb
                cov = (win * wa * wb).sum() - ma * mb
                total += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        vals.append(total / (a.shape[0] * a.shape[1]))
    return float(np.mean(vals))


def test_static_clip_metrics_exactly_zero():
    clip = np.repeat(np.random.default_rng(0).random((1, 12, 12, 3)), 5, axis=0)
    zero = [np.zeros((12, 12, 2))] * 4
    assert E.e_tc(clip) == 0.0
    assert E.e_warp(clip, zero) == 0.0


@pytest.mark.parametrize("seed", range(3))
def test_metrics_match_brute_force(seed):
    rng = np.random.default_rng(seed)
    clip = rng.random((4, 8, 8, 3))
    flows = [rng.uniform(-2, 2, (8, 8, 2)) for _ in range(3)]
    assert abs(E.e_tc(clip) - brute_e_tc(clip)) <= 1e-9
    assert abs(E.e_warp(clip, flows) - brute_e_warp(clip, flows)) <= 1e-9
    other = rng.random((4, 8, 8, 3))
    assert abs(E.psnr(clip, other) - brute_psnr(clip, other)) <= 1e-9


def test_constant_offset_psnr():
    a = np.full((8, 8, 3), 0.5)
    assert E.psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-12)
    assert E.psnr(a, a) == math.inf
    with pytest.raises(DimensionError):
        E.psnr(a, a[:4])


def test_e_warp_with_exact_flow_vanishes_on_visible_region():
    spec = D.SceneSpec(pattern="checker", background_velocity=(2, 0), num_frames=4, height=32, width=32)
    r = D.render_scene(spec)
    pairs = [np.abs(backward_warp(r.frames[t], r.flows_prev[t]) - r.frames[t + 1])[r.vis_prev[t].astype(bool)].mean()
             for t in range(3)]
    assert max(pairs) <= 1e-6
    assert E.e_tc(r.frames) > 0.05


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), shift=st.floats(0.0, 0.5))
def test_e_tc_bounded_change_under_single_frame_offset(seed, shift):
    # offsetting one frame moves each adjacent pair difference by at most the offset
    rng = np.random.default_rng(seed)
    clip = rng.random((3, 4, 4, 1)) * 0.5
    jitter = clip + np.array([0, shift, 0]).reshape(3, 1, 1, 1)
    assert E.e_tc(jitter) >= 0 and E.e_tc(clip) >= 0
    assert abs(E.e_tc(jitter) - E.e_tc(clip)) <= shift + 1e-12


def test_ssim_matches_brute_force_and_identity():
    rng = np.random.default_rng(1)
    a = rng.random((14, 13, 3))
    b = np.clip(a + 0.1 * rng.standard_normal(a.shape), 0, 1)
    assert E.ssim(a, a) == pytest.approx(1.0, abs=1e-12)
    assert abs(E.ssim(a, b) - brute_ssim(a, b)) <= 1e-9
    assert E.ssim(a, b) == pytest.approx(E.ssim(b, a), abs=1e-12)


def test_temporal_profile_rows_are_frames():
    clip = np.random.default_rng(2).random((5, 6, 7, 3))
    prof = E.temporal_profile(clip, 3)
    assert prof.shape == (5, 7, 3)
    for t in range(5):
        np.testing.assert_array_equal(prof[t], clip[t, 3])
    with pytest.raises(ContractError):
        E.temporal_profile(clip, 6)


def test_evaluate_clip_report_and_json_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    gt = rng.random((3, 8, 8, 3))
    flows = [np.zeros((8, 8, 2))] * 2
    rep = E.evaluate_clip(gt, gt, flows=flows, gt_flows=flows, clip_id="c")
    assert rep.psnr == math.inf and rep.flow_source == "given" and rep.e_warp_gt == rep.e_warp
    back = E.MetricReport.from_json(rep.to_json())
    assert back == rep
    assert '"+inf"' in rep.to_json()
    E.write_summary([rep, E.evaluate_clip(gt * 0.9, gt, flows=flows, clip_id="d")], tmp_path / "s.csv")
    rows = list(csv.DictReader(open(tmp_path / "s.csv")))
    assert [r["clip_id"] for r in rows] == ["c", "d"] and rows[0]["psnr"] == "+inf"


def test_evaluate_clip_estimated_flows_and_quantization():
    r = D.render_scene(D.SceneSpec(pattern="sinusoid-texture", background_velocity=(1, 0), num_frames=3,
                                   height=32, width=32))
    rep = E.evaluate_clip(r.frames, r.frames, quantize=True)
    assert rep.flow_source == "estimated" and rep.psnr == math.inf
    assert rep.e_warp < rep.e_tc
    np.testing.assert_array_equal(E.quantize8(np.array([0.0, 0.5, 1.2])), np.array([0.0, 128 / 255, 1.0]))


def test_evaluate_clip_rejects_mismatch():
    with pytest.raises(ContractError):
        E.evaluate_clip(np.zeros((2, 4, 4, 3)), np.zeros((3, 4, 4, 3)))
    with pytest.raises(ContractError):
        E.MetricReport("x", 1.0, 1.0, -1.0, 0.0)


def test_save_profile_writes_png(tmp_path):
    clip = np.random.default_rng(4).random((4, 5, 6, 3))
    E.save_profile(clip, 2, tmp_path / "p.png")
    import cv2

    img = cv2.imread(str(tmp_path / "p.png"))
    assert img.shape == (4, 6, 3)
