import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kptpose import skeleton, synthgen


def scene(seed, **kw):
    return synthgen.sample_scene(seed, synthgen.SceneConfig(**kw))


def test_same_seed_bitwise_identical():
    assert synthgen.samples_equal(scene(42), scene(42))


def test_zero_pose_matches_rest_template():
    # forcing all angles to zero must reproduce the rigidly placed template
    tpl = skeleton.right_template()
    joints = skeleton.forward_kinematics(np.zeros((16, 3)), np.zeros(10), tpl)
    np.testing.assert_array_equal(joints, tpl.rest_joints)


@pytest.mark.parametrize("seed", range(0, 40, 7))
def test_projection_consistency(seed):
    s = scene(seed)
    for h in range(2):
        if not s.hands_present[h]:
            continue
        proj = synthgen.pinhole_project(s.intrinsics, s.joints3d[h])
        assert np.max(np.abs(proj - s.joints2d[h])) < 1e-4
        assert s.z_root[h] == s.joints3d[h, 0, 2]


def test_many_seeds_in_frame_and_bone_lengths():
    templates = (skeleton.right_template(), skeleton.left_template())
    for seed in range(300):
        s = scene(seed)
        size = s.image.shape[-1]
        for h in range(2):
            if not s.hands_present[h]:
                continue
            assert np.all(s.joints2d[h] >= 0) and np.all(s.joints2d[h] <= size - 1)
            bones = s.joints3d[h, 1:] - s.joints3d[h, skeleton.PARENTS[1:]]
            want = templates[h].rest_bone_lengths * s.shape_scale
            assert np.max(np.abs(np.linalg.norm(bones, axis=1) - want)) < 1e-6


def test_generation_failure_reported():
    # an 8px frame cannot hold a hand at these depths
    cfg = synthgen.SceneConfig(image_size=8, z_range=(300.0, 350.0), max_tries=20)
    with pytest.raises(synthgen.GenerationError):
        synthgen.sample_scene(0, cfg)


def test_single_mode_has_right_hand_only():
    s = scene(3, hand_mode="single", with_object=False)
    assert s.hands_present[0] and not s.hands_present[1]
    assert not s.visibility[1].any()
    assert not s.object_present


# ---------------------------------------------------------------------------
# rendering

def test_empty_scene_uniform_background():
    s = scene(0, hand_mode="single", with_object=False)
    s.hands_present = np.array([False, False])
    img = synthgen.render_image(s)
    assert np.all(img == img[:, :1, :1])


def test_center_joint_max_intensity_at_center():
    # collapse the hand onto a single point that projects to a pixel center
    s = scene(0, hand_mode="single", with_object=False)
    size = s.image.shape[-1]
    f = s.intrinsics[0, 0]
    cpix = size // 2 + 4  # integer pixel, off the principal point
    x = (cpix - s.intrinsics[0, 2]) * 500.0 / f
    y = (cpix - s.intrinsics[1, 2]) * 500.0 / f
    s.joints3d[0] = np.tile([x, y, 500.0], (21, 1))
    s.joints2d[0] = synthgen.pinhole_project(s.intrinsics, s.joints3d[0])
    img = synthgen.render_image(s)
    dist_to_bg = np.abs(img - synthgen.BACKGROUND[:, None, None]).sum(axis=0)
    assert dist_to_bg[cpix, cpix] >= dist_to_bg.max() - 1e-6
    assert dist_to_bg[cpix, cpix] > 0.2


def test_object_in_front_overdraws_hand_joint():
    s = scene(0, hand_mode="single", with_object=True)
    # plant the object dead ahead of joint 10 and nearer to the camera
    j = s.joints3d[0, 10]
    pose = np.eye(4)
    pose[:3, 3] = [j[0], j[1], j[2] - 120.0]
    s.object_pose = pose
    s.object_id = 0
    s.object_present = True
    s.object_half_extents = np.array([30.0, 30.0, 10.0])
    img = synthgen.render_image(s)
    px = np.round(s.joints2d[0, 10]).astype(int)
    color = img[:, px[1], px[0]]
    # the pixel is painted with the object palette, not the hand's
    assert color[2] > color[1] and color[2] > color[0]


# ---------------------------------------------------------------------------
# heatmaps

def test_heatmap_no_visible_joints_all_zero():
    hm = synthgen.gaussian_heatmap([[4.0, 4.0]], [False], 2.0, (16, 16))
    assert not hm.any()


def test_heatmap_peak_and_falloff():
    hm = synthgen.gaussian_heatmap([[64.0, 64.0]], [True], 2.0, (128, 128))
    assert hm[0, 64, 64] == 1.0
    np.testing.assert_allclose(hm[0, 64, 65], np.exp(-1 / 8), rtol=1e-6)
    np.testing.assert_allclose(hm[0, 65, 64], np.exp(-1 / 8), rtol=1e-6)


def test_heatmap_coincident_joints_idempotent():
    one = synthgen.gaussian_heatmap([[10.3, 7.7]], [True], 2.0, (32, 32))
    two = synthgen.gaussian_heatmap([[10.3, 7.7], [10.3, 7.7]], [True, True], 2.0, (32, 32))
    np.testing.assert_array_equal(one, two)


@given(st.integers(0, 10 ** 6))
@settings(max_examples=20, deadline=None)
def test_heatmap_max_combine_property(seed):
    rng = np.random.default_rng(seed)
    joints = rng.uniform(0, 31, (4, 2))
    combined = synthgen.gaussian_heatmap(joints, [True] * 4, 2.0, (32, 32))
    singles = [synthgen.gaussian_heatmap(joints[i:i + 1], [True], 2.0, (32, 32))
               for i in range(4)]
    np.testing.assert_array_equal(combined, np.max(singles, axis=0))


def test_heatmap_rejects_bad_sigma():
    with pytest.raises(ValueError):
        synthgen.gaussian_heatmap([[1.0, 1.0]], [True], 0.0, (8, 8))


# ---------------------------------------------------------------------------
# segmentation mask

def test_mask_absent_object_zero():
    s = scene(1, with_object=False)
    assert not synthgen.object_segmentation_mask(s, 32).any()


def test_mask_object_behind_camera_zero():
    s = scene(0)
    assert s.object_present
    s.object_pose[:3, 3] = [0.0, 0.0, -400.0]
    assert not synthgen.object_segmentation_mask(s, 32).any()


def test_mask_axis_aligned_box_area():
    s = scene(0, hand_mode="single", with_object=True)
    size = s.image.shape[-1]
    s.hands_present = np.array([False, False])  # no hand clipping
    f = s.intrinsics[0, 0]
    z = 500.0
    half = (size / 4.0) * z / f  # projected half extent = size/4 -> center half
    s.object_pose = np.eye(4)
    s.object_pose[:3, 3] = [0.0, 0.0, z]
    s.object_half_extents = np.array([half, half, 1.0])
    mask = synthgen.object_segmentation_mask(s, size)
    area = mask.sum()
    np.testing.assert_allclose(area, (size / 2) ** 2, rtol=0.08)


def test_mask_subset_of_object_colored_pixels():
    # interior mask pixels must land on object-palette pixels in the render
    for seed in (0, 2, 5, 9):
        s = scene(seed)
        if not s.object_present:
            continue
        size = s.image.shape[-1]
        mask = synthgen.object_segmentation_mask(s, size)[0].astype(bool)
        # erode by one pixel to dodge anti-aliased edges
        interior = mask.copy()
        for dy, dx in ((0, 1), (0, -1), (1, 0), (-1, 0)):
            interior &= np.roll(mask, (dy, dx), axis=(0, 1))
        ys, xs = np.nonzero(interior)
        img = s.image
        blue_frac = np.mean(img[2, ys, xs] > np.maximum(img[0, ys, xs], img[1, ys, xs]))
        assert blue_frac > 0.97


# ---------------------------------------------------------------------------
# augmentation

def test_rotate_zero_is_identity_on_annotations():
    s = scene(4)
    r = synthgen.augment(s, "rotate", magnitude=0.0)
    np.testing.assert_allclose(r.joints3d, s.joints3d, atol=1e-12)
    np.testing.assert_allclose(r.joints2d, s.joints2d, atol=1e-9)
    np.testing.assert_allclose(r.image, s.image, atol=1e-6)


def test_mirror_twice_is_identity():
    s = scene(4)
    m2 = synthgen.augment(synthgen.augment(s, "mirror"), "mirror")
    np.testing.assert_array_equal(m2.image, s.image)
    np.testing.assert_allclose(m2.joints3d, s.joints3d, atol=1e-12)
    np.testing.assert_allclose(m2.joint_angles, s.joint_angles, atol=1e-12)
    np.testing.assert_array_equal(m2.hands_present, s.hands_present)


def test_mirror_swaps_hands_and_flips_x():
    s = scene(4)
    m = synthgen.augment(s, "mirror")
    size = s.image.shape[-1]
    assert np.array_equal(m.hands_present, s.hands_present[::-1])
    for h in range(2):
        if m.hands_present[h]:
            np.testing.assert_allclose(m.joints2d[h, :, 0],
                                       (size - 1) - s.joints2d[1 - h, :, 0], atol=1e-9)
            np.testing.assert_allclose(m.joints2d[h, :, 1], s.joints2d[1 - h, :, 1], atol=1e-9)


def test_mirror_t_lr():
    s = scene(4)
    assert s.interacting
    m = synthgen.augment(s, "mirror")
    t, mt = s.t_lr(), m.t_lr()
    np.testing.assert_allclose(mt, [t[0], -t[1], -t[2]], atol=1e-9)


def test_rotate_90_matches_2d_rotation_about_center():
    s = scene(7)
    r = synthgen.augment(s, "rotate", magnitude=90.0)
    c = (s.image.shape[-1] - 1) / 2.0
    ang = np.deg2rad(90.0)
    rot2 = np.array([[np.cos(ang), -np.sin(ang)], [np.sin(ang), np.cos(ang)]])
    for h in range(2):
        if s.hands_present[h]:
            want = (s.joints2d[h] - c) @ rot2.T + c
            np.testing.assert_allclose(r.joints2d[h], want, atol=1e-6)


def test_rotate_preserves_projection_and_bones():
    s = scene(7)
    r = synthgen.augment(s, "rotate", magnitude=33.0)
    for h in range(2):
        if r.hands_present[h]:
            proj = synthgen.pinhole_project(r.intrinsics, r.joints3d[h])
            np.testing.assert_allclose(proj, r.joints2d[h], atol=1e-9)
            bones_r = np.linalg.norm(r.joints3d[h, 1:] - r.joints3d[h, skeleton.PARENTS[1:]], axis=1)
            bones_s = np.linalg.norm(s.joints3d[h, 1:] - s.joints3d[h, skeleton.PARENTS[1:]], axis=1)
            np.testing.assert_allclose(bones_r, bones_s, atol=1e-9)


def test_scale_adjusts_intrinsics_not_3d():
    s = scene(7)
    sc = synthgen.augment(s, "scale", magnitude=1.15)
    np.testing.assert_array_equal(sc.joints3d, s.joints3d)
    c = (s.image.shape[-1] - 1) / 2.0
    for h in range(2):
        if s.hands_present[h]:
            want = (s.joints2d[h] - c) * 1.15 + c
            np.testing.assert_allclose(sc.joints2d[h], want, atol=1e-9)
            proj = synthgen.pinhole_project(sc.intrinsics, sc.joints3d[h])
            np.testing.assert_allclose(proj, sc.joints2d[h], atol=1e-9)


def test_mirror_equivariant_metric_is_zero():
    # augment(GT) scored against GT under relabeled (swapped) hands: exact zero
    from kptpose import metrics
    s = scene(11)
    m = synthgen.augment(s, "mirror")
    for h in range(2):
        if not m.hands_present[h]:
            continue
        pred = m.joints3d[h] - m.joints3d[h, 0]
        ref = s.joints3d[1 - h] - s.joints3d[1 - h, 0]
        ref_mirrored = ref * np.array([-1.0, 1.0, 1.0])
        assert metrics.mpjpe(pred, ref_mirrored) < 1e-9


# ---------------------------------------------------------------------------
# dataset io

def test_roundtrip_bitwise(tmp_path):
    path = tmp_path / "d.kpf"
    samples = [scene(i) for i in range(10)]
    synthgen.write_dataset(path, samples)
    loaded = synthgen.read_dataset(path)
    assert len(loaded) == 10
    assert all(synthgen.samples_equal(a, b) for a, b in zip(samples, loaded))


def test_write_rejects_empty(tmp_path):
    with pytest.raises(ValueError):
        synthgen.write_dataset(tmp_path / "e.kpf", [])


def test_truncated_file_raises(tmp_path):
    path = tmp_path / "d.kpf"
    synthgen.write_dataset(path, [scene(0), scene(1)])
    raw = path.read_bytes()
    (tmp_path / "t.kpf").write_bytes(raw[:len(raw) - 100])
    with pytest.raises(synthgen.TruncatedDatasetError):
        synthgen.read_dataset(tmp_path / "t.kpf")


def test_bad_magic_raises(tmp_path):
    path = tmp_path / "d.kpf"
    synthgen.write_dataset(path, [scene(0)])
    raw = bytearray(path.read_bytes())
    raw[:4] = b"XXXX"
    (tmp_path / "b.kpf").write_bytes(bytes(raw))
    with pytest.raises(synthgen.BadMagicError):
        synthgen.read_dataset(tmp_path / "b.kpf")


def test_version_mismatch_names_both(tmp_path):
    path = tmp_path / "d.kpf"
    synthgen.write_dataset(path, [scene(0)])
    raw = bytearray(path.read_bytes())
    raw[4] = 99
    (tmp_path / "v.kpf").write_bytes(bytes(raw))
    with pytest.raises(synthgen.VersionMismatchError, match="99.*1"):
        synthgen.read_dataset(tmp_path / "v.kpf")


# ---------------------------------------------------------------------------
# skeleton helpers

@given(st.integers(0, 10 ** 6))
@settings(max_examples=25, deadline=None)
def test_rodrigues_round_trip(seed):
    rng = np.random.default_rng(seed)
    v = skeleton.random_axis_angle(rng)
    r = skeleton.rodrigues(v)
    np.testing.assert_allclose(r @ r.T, np.eye(3), atol=1e-9)
    np.testing.assert_allclose(np.linalg.det(r), 1.0, atol=1e-9)
    v2 = skeleton.matrix_to_axis_angle(r)
    np.testing.assert_allclose(skeleton.rodrigues(v2), r, atol=1e-8)


def test_ancestor_matrix_matches_loop():
    rng = np.random.default_rng(1)
    off = rng.standard_normal((20, 3))
    a = skeleton.ancestor_matrix()
    np.testing.assert_allclose(a @ off, skeleton.accumulate_offsets(off), atol=1e-12)
