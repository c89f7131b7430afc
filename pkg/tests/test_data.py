import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from recurvsr import data as D
from recurvsr.errors import ClipIOError, ConfigError, DimensionError
from recurvsr.flow import backward_warp


def sprite_scene(vx=2.0, vy=0.0, occluders=(), frames=4, size=32, pattern="textured-sprites", seed=3):
    return D.SceneSpec(pattern=pattern, sprites=[D.Sprite(6, 8, 10, 12, vx, vy)], occluders=list(occluders),
                       num_frames=frames, height=size, width=size, seed=seed)


def test_static_scene_has_identical_frames_zero_flow_full_visibility():
    clip, flows, vis = D.generate_synthetic_clip(sprite_scene(0.0, 0.0))
    assert all(np.array_equal(clip.frames[0], f) for f in clip.frames)
    assert all(not f.any() for f in flows)
    assert all(v.all() for v in vis)


def test_translating_sprite_flow_matches_pixel_correspondence():
    spec = sprite_scene(2.0, 0.0)
    r = D.render_scene(spec)
    # pixels covered by the sprite in frame 1 came from 2 px to the left in frame 0
    inside = r.layer_ids[1] == 1
    assert np.all(r.flows_prev[0][inside][:, 0] == -2.0)
    assert np.all(r.flows_prev[0][inside][:, 1] == 0.0)
    ys, xs = np.nonzero(inside)
    for y, x in zip(ys, xs):
        np.testing.assert_array_equal(r.frames[1][y, x], r.frames[0][y, x - 2])


def test_occluder_visibility_follows_z_order():
    occ = D.Sprite(14, 0, 6, 32, 0, 0)
    r = D.render_scene(sprite_scene(3.0, 0.0, occluders=[occ], frames=5))
    for i in range(4):
        ids_now, ids_before = r.layer_ids[i + 1], r.layer_ids[i]
        h, w = ids_now.shape
        for y in range(h):
            for x in range(w):
                sx = x + int(r.flows_prev[i][y, x, 0])
                sy = y + int(r.flows_prev[i][y, x, 1])
                ok = 0 <= sx < w and 0 <= sy < h and ids_before[sy, sx] == ids_now[y, x]
                assert r.vis_prev[i][y, x] == ok


@pytest.mark.parametrize("pattern", D.PATTERNS)
def test_warp_with_gt_flow_reproduces_next_frame_on_visible_pixels(pattern):
    occ = D.Sprite(0, 20, 32, 5, 0, 0)
    r = D.render_scene(sprite_scene(2.0, -1.0, occluders=[occ], frames=4, pattern=pattern))
    for i in range(3):
        warped = backward_warp(r.frames[i], r.flows_prev[i])
        vis = r.vis_prev[i].astype(bool)
        assert np.abs(warped - r.frames[i + 1])[vis].max() <= 2 / 255


def test_generation_deterministic():
    a = D.render_scene(D.SceneSampler(height=32, width=32, num_frames=5).sample(11))
    b = D.render_scene(D.SceneSampler(height=32, width=32, num_frames=5).sample(11))
    np.testing.assert_array_equal(a.frames, b.frames)


def test_invalid_scene_is_config_error():
    with pytest.raises(ConfigError):
        D.render_scene(D.SceneSpec(height=0))
    with pytest.raises(ConfigError):
        D.render_scene(D.SceneSpec(pattern="plaid"))
    with pytest.raises(ConfigError):
        D.render_scene(D.SceneSpec(sprites=[D.Sprite(0, 0, 4, 4, float("nan"), 0)]))
    with pytest.raises(ConfigError):
        D.render_scene(D.SceneSpec(texture_scale=0.0))


def test_texture_scale_coarsens_without_changing_geometry():
    base = D.SceneSampler(height=48, width=48, num_frames=3, patterns=("checker",)).sample(5)
    coarse = D.SceneSpec.from_dict(dict(base.to_dict(), texture_scale=3.0))
    a, b = D.render_scene(base), D.render_scene(coarse)
    np.testing.assert_array_equal(a.layer_ids, b.layer_ids)
    for fa, fb in zip(a.flows_prev, b.flows_prev):
        np.testing.assert_array_equal(fa, fb)
    # coarser cells mean fewer horizontal color changes
    edges = lambda f: (np.abs(np.diff(f, axis=2)).sum(-1) > 1e-6).sum()
    assert edges(b.frames) < edges(a.frames)


def test_default_clip_length_covers_window_plus_two():
    assert D.SceneSpec().num_frames >= 2 * 2 + 3


# -- degradation -------------------------------------------------------------


def _clip(n=3, h=32, w=32, seed=0):
    rng = np.random.default_rng(seed)
    return D.VideoClip(rng.random((n, h, w, 3)).astype(np.float32))


def test_identity_degradation_is_pixel_identical():
    cfg = D.DegradationConfig((0, 0), 1, (0, 0), (100, 100), seed=5)
    clip = _clip()
    np.testing.assert_array_equal(D.degrade_clip(clip, cfg).frames, clip.frames)


def test_factor_four_gives_quarter_resolution():
    lr = D.degrade_clip(_clip(2, 128, 128), D.DegradationConfig(seed=1))
    assert lr.frames.shape == (2, 32, 32, 3)
    assert lr.frames.min() >= 0 and lr.frames.max() <= 1


def test_one_parameter_draw_per_clip_noise_differs_per_frame():
    cfg = D.DegradationConfig((1.0, 1.0), 1, (0.05, 0.05), (100, 100), seed=2)
    static = D.VideoClip(np.full((2, 16, 16, 3), 0.5, np.float32))
    out = D.degrade_clip(static, cfg)
    params = out.meta["degradation"]
    assert params["blur_sigma"] == 1.0 and params["noise_sigma"] == 0.05
    assert not np.array_equal(out.frames[0], out.frames[1])
    # same blur and noise level on both frames: residual statistics agree
    r0, r1 = out.frames[0] - 0.5, out.frames[1] - 0.5
    assert abs(r0.std() - r1.std()) < 0.01


def test_degradation_pure_given_seed():
    cfg = D.DegradationConfig(seed=9)
    clip = _clip(2, 64, 64)
    np.testing.assert_array_equal(D.degrade_clip(clip, cfg).frames, D.degrade_clip(clip, cfg).frames)


def test_indivisible_dims_raise_dimension_error():
    with pytest.raises(DimensionError):
        D.degrade_clip(_clip(1, 30, 32), D.DegradationConfig(downscale_factor=4))


def test_degradation_config_validation():
    with pytest.raises(ConfigError):
        D.DegradationConfig(blur_sigma_range=(2, 1)).validate()
    with pytest.raises(ConfigError):
        D.DegradationConfig(downscale_factor=0).validate()


def test_jpeg_like_quantizes_but_stays_close():
    img = _clip(1, 32, 32).frames[0]
    out = D.jpeg_like(img, 50)
    assert out.shape == img.shape and not np.array_equal(out, img)
    smooth = np.tile(np.linspace(0.2, 0.8, 32, dtype=np.float32), (32, 1))[..., None].repeat(3, -1)
    assert np.abs(D.jpeg_like(smooth, 90) - smooth).max() < 0.05


# -- persistence -------------------------------------------------------------


@settings(max_examples=10, deadline=None)
@given(n=st.integers(1, 4), c=st.sampled_from([1, 3]), seed=st.integers(0, 10_000))
def test_clip_round_trip_within_16bit_quantization(tmp_path_factory, n, c, seed):
    d = tmp_path_factory.mktemp("clip")
    rng = np.random.default_rng(seed)
    clip = D.VideoClip(rng.random((n, 9, 7, c)).astype(np.float32), fps=24.0, id="x")
    D.save_clip(clip, d)
    back = D.load_clip(d)
    assert back.frames.shape == clip.frames.shape and back.fps == 24.0
    assert np.abs(back.frames - clip.frames).max() <= 1 / 65535 + 1e-7
    assert back.frames.min() >= 0 and back.frames.max() <= 1


def test_thirty_frame_clip_layout(tmp_path):
    D.save_clip(_clip(30, 8, 8), tmp_path)
    names = sorted(p.name for p in tmp_path.iterdir())
    assert names == [f"frame_{i:05d}.png" for i in range(30)] + ["manifest.json"]
    m = json.loads((tmp_path / "manifest.json").read_text())
    assert m["num_frames"] == 30 and m["bit_depth"] == 16 and m["height"] == 8


def test_empty_directory_load_is_error(tmp_path):
    with pytest.raises(ClipIOError):
        D.load_clip(tmp_path)


def test_missing_frame_reports_index(tmp_path):
    D.save_clip(_clip(3, 8, 8), tmp_path)
    (tmp_path / "frame_00001.png").unlink()
    with pytest.raises(ClipIOError) as info:
        D.load_clip(tmp_path)
    assert info.value.frame_index == 1


def test_flo_round_trip_and_header(tmp_path):
    rng = np.random.default_rng(0)
    flow = (rng.standard_normal((5, 7, 2)) * 3).astype(np.float32)
    p = tmp_path / "f.flo"
    D.write_flo(p, flow)
    raw = p.read_bytes()
    assert np.frombuffer(raw[:4], "<f4")[0] == np.float32(202021.25)
    assert tuple(np.frombuffer(raw[4:12], "<i4")) == (7, 5)
    np.testing.assert_array_equal(np.frombuffer(raw[12:], "<f4").reshape(5, 7, 2), flow)
    np.testing.assert_array_equal(D.read_flo(p), flow)


def test_bad_flo_magic(tmp_path):
    p = tmp_path / "bad.flo"
    p.write_bytes(b"\0" * 20)
    with pytest.raises(ClipIOError):
        D.read_flo(p)


def test_downsample_flow_scales_displacement():
    flow = np.zeros((8, 8, 2), np.float32)
    flow[..., 0] = 8.0
    np.testing.assert_array_equal(D.downsample_flow(flow, 4), np.full((2, 2, 2), [2.0, 0.0], np.float32))


def test_generate_dataset_deterministic_and_parallel_safe(tmp_path):
    sampler = D.SceneSampler(height=32, width=32, num_frames=7)
    deg = D.DegradationConfig()
    D.generate_dataset(tmp_path / "a", 2, 4, sampler, deg, jobs=1)
    D.generate_dataset(tmp_path / "b", 2, 4, sampler, deg, jobs=2)
    fa = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    fb = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
    assert fa == fb and fa
    for rel in fa:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()
    tc = D.load_training_clip(tmp_path / "a" / "clip_000")
    assert tc.scale == 4 and len(tc.flows_prev) == 6 and tc.lr.frames.shape == (7, 8, 8, 3)
