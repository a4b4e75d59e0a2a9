"""Ingestion, rasterization, normalization, sampling, augmentation."""

import json

import numpy as np
import pytest

from warpsynth.dataio import (
    AugmentParams,
    BoundingBox,
    EmptyMaskError,
    KeypointSet,
    NormalizationError,
    RasterStyle,
    augment,
    load_dataset,
    normalize_driving_mask,
    normalize_to_reference,
    rasterize_mask,
    reference_stats,
    sample_training_batch,
    write_clip,
)
from warpsynth.skeletons import get_schema

from conftest import face_keypoints, make_toy_dataset


SIZE = (64, 64)


def segment_distance_field(kps, size):
    """Brute-force oracle: per-pixel distance to the nearest drawable segment
    (or visible lone point)."""
    spec = get_schema(kps.schema)
    h, w = size
    ys, xs = np.mgrid[0:h, 0:w]
    dist = np.full((h, w), np.inf)
    pts = kps.points
    vis = kps.visibility
    segments = [(pts[a], pts[b]) for a, b, _ in spec.segments if vis[a] and vis[b]]
    segments += [(pts[i], pts[i]) for i in np.flatnonzero(vis)]
    for a, b in segments:
        ab = b - a
        denom = float(ab @ ab)
        if denom == 0.0:
            cx, cy = a
        else:
            t = np.clip(((xs - a[0]) * ab[0] + (ys - a[1]) * ab[1]) / denom, 0, 1)
            cx = a[0] + t * ab[0]
            cy = a[1] + t * ab[1]
        dist = np.minimum(dist, np.hypot(xs - cx, ys - cy))
    return dist


# ---------------------------------------------------------------------------
# bounding boxes
# ---------------------------------------------------------------------------

def test_bbox_rejects_inverted():
    with pytest.raises(ValueError):
        BoundingBox(5, 0, 1, 3)


def test_bbox_downsample_rounds_outward():
    box = BoundingBox(3, 9, 21, 30)
    down = box.downsampled(8)
    assert (down.x_min, down.y_min, down.x_max, down.y_max) == (0, 1, 2, 3)
    # the covered pixel span never shrinks below the true box
    assert down.x_min * 8 <= box.x_min and (down.x_max + 1) * 8 > box.x_max
    assert down.y_min * 8 <= box.y_min and (down.y_max + 1) * 8 > box.y_max


# ---------------------------------------------------------------------------
# rasterization
# ---------------------------------------------------------------------------

def test_rasterize_single_visible_point_is_one_dot():
    kps = face_keypoints(SIZE)
    vis = np.zeros(68, dtype=bool)
    vis[30] = True
    kps = KeypointSet(kps.points, vis, "face68")
    mask = rasterize_mask(kps, SIZE)
    assert mask.raster.shape == (1, 64, 64)
    nonzero = mask.raster[0] > 0
    assert nonzero.any()
    # dot: all nonzero pixels within the dilation radius of the single point
    radius = RasterStyle().radius_for(SIZE)
    ys, xs = np.nonzero(nonzero)
    d = np.hypot(xs - kps.points[30, 0], ys - kps.points[30, 1])
    assert d.max() < radius
    assert mask.bbox.width == 0 and mask.bbox.height == 0


def test_rasterize_face68_stays_within_dilation_radius():
    kps = face_keypoints((256, 256))
    mask = rasterize_mask(kps, (256, 256))
    assert (mask.raster > 0).sum() > 0
    dist = segment_distance_field(kps, (256, 256))
    nonzero = mask.raster[0] > 0
    assert dist[nonzero].max() < 3.0


def test_rasterize_is_deterministic():
    kps = face_keypoints(SIZE)
    a = rasterize_mask(kps, SIZE)
    b = rasterize_mask(kps, SIZE)
    assert np.array_equal(a.raster, b.raster)
    assert a.raster.dtype == np.float32


def test_rasterize_no_visible_points_errors():
    kps = KeypointSet(np.zeros((68, 2)), np.zeros(68, dtype=bool), "face68")
    with pytest.raises(EmptyMaskError):
        rasterize_mask(kps, SIZE)


def test_rasterize_bbox_matches_visible_extent():
    kps = face_keypoints(SIZE)
    mask = rasterize_mask(kps, SIZE)
    pts = kps.clamped(SIZE).points
    assert mask.bbox.x_min == pts[:, 0].min()
    assert mask.bbox.x_max == pts[:, 0].max()


def test_rasterize_body_schema_has_limb_channels():
    rng = np.random.default_rng(0)
    pts = rng.uniform(5, 59, size=(137, 2))
    kps = KeypointSet(pts, np.ones(137, dtype=bool), "body")
    mask = rasterize_mask(kps, SIZE)
    assert mask.raster.shape == (8, 64, 64)
    assert all((mask.raster[c] > 0).any() for c in range(8))


def test_keypoint_count_must_match_schema():
    with pytest.raises(ValueError):
        KeypointSet(np.zeros((10, 2)), np.ones(10, dtype=bool), "face68")


# ---------------------------------------------------------------------------
# driving-mask normalization
# ---------------------------------------------------------------------------

def test_normalize_identity_when_already_aligned():
    kps = face_keypoints(SIZE)
    out = normalize_driving_mask(kps, kps)
    assert np.array_equal(out.points, kps.points)


def test_normalize_inverts_similarity_transform():
    subject = face_keypoints(SIZE)
    driving = KeypointSet(subject.points * 2.0 + np.array([7.0, -3.0]),
                          subject.visibility, "face68")
    out = normalize_driving_mask(driving, subject)
    assert np.allclose(out.points, subject.points, atol=1e-6)


def test_normalize_is_equivariant_under_similarity_transforms():
    # oracle: explicit transform composition — normalizing T(driving) equals
    # normalizing driving, for scale+translate T
    rng = np.random.default_rng(1)
    subject = face_keypoints(SIZE)
    driving = face_keypoints(SIZE, center=(0.4, 0.6), scale=0.5)
    base = normalize_driving_mask(driving, subject)
    for _ in range(5):
        s = float(rng.uniform(0.3, 3.0))
        t = rng.uniform(-20, 20, size=2)
        transformed = KeypointSet(driving.points * s + t, driving.visibility, "face68")
        out = normalize_driving_mask(transformed, subject)
        assert np.allclose(out.points, base.points, atol=1e-9)


def test_normalize_degenerate_subject_errors():
    subject = KeypointSet(np.tile([[10.0, 20.0]], (68, 1)), np.ones(68, bool), "face68")
    driving = face_keypoints(SIZE)
    with pytest.raises(NormalizationError):
        normalize_driving_mask(driving, subject)
    with pytest.raises(NormalizationError):
        normalize_driving_mask(subject, driving)


def test_normalize_schema_mismatch_errors():
    face = face_keypoints(SIZE)
    body = KeypointSet(np.ones((137, 2)) * 10, np.ones(137, bool), "body")
    with pytest.raises(ValueError):
        normalize_driving_mask(face, body)


def test_reference_stats_are_medians():
    sets = [face_keypoints(SIZE, center=(0.5, 0.5), scale=s) for s in (0.4, 0.6, 0.8)]
    center, height = reference_stats(sets)
    assert height == pytest.approx(sets[1].bbox().height)
    out = normalize_to_reference(sets[0], center, height)
    assert out.bbox().height == pytest.approx(height)


# ---------------------------------------------------------------------------
# batch sampling
# ---------------------------------------------------------------------------

def test_sampling_minimal_clip_uses_left_out_frame(toy_dataset):
    small = make_toy_dataset(num_clips=1, num_frames=4, seed=3)
    batch = sample_training_batch(small, k=3, rng_seed=0, batch_size=8)
    for sample in batch:
        clip = small.clips[0]
        subject_set = {
            i for i in range(4)
            if any(np.array_equal(clip.frames[i], f) for f in sample.subject_frames)
        }
        assert len(subject_set) == 3
        (driving_idx,) = [
            i for i in range(4)
            if np.array_equal(clip.frames[i], sample.target_frame)
        ]
        assert driving_idx not in subject_set


def test_sampling_same_seed_is_identical(toy_dataset):
    a = sample_training_batch(toy_dataset, k=2, rng_seed=42, batch_size=4)
    b = sample_training_batch(toy_dataset, k=2, rng_seed=42, batch_size=4)
    for sa, sb in zip(a, b):
        assert np.array_equal(sa.subject_frames, sb.subject_frames)
        assert np.array_equal(sa.target_frame, sb.target_frame)
        assert np.array_equal(sa.driving_mask.raster, sb.driving_mask.raster)


def test_sampling_subject_selection_is_uniform():
    # oracle: exact binomial moments for P(frame in subject set) = K/T
    dataset = make_toy_dataset(num_clips=1, num_frames=30, size=(32, 32), seed=4)
    clip = dataset.clips[0]
    k, draws = 3, 1000
    counts = np.zeros(30)
    batch = sample_training_batch(dataset, k=k, rng_seed=7, batch_size=draws)
    for sample in batch:
        for frame in sample.subject_frames:
            for i in range(30):
                if np.array_equal(clip.frames[i], frame):
                    counts[i] += 1
                    break
    p = k / 30
    sigma = np.sqrt(draws * p * (1 - p))
    assert np.all(np.abs(counts - draws * p) <= 3 * sigma)


def test_sampling_skips_short_clips_with_warning():
    good = make_toy_dataset(num_clips=1, num_frames=8, seed=5)
    short = make_toy_dataset(num_clips=1, num_frames=2, seed=6)
    merged = make_toy_dataset(num_clips=0)
    merged.clips = [good.clips[0], short.clips[0]]
    with pytest.warns(UserWarning):
        batch = sample_training_batch(merged, k=3, rng_seed=0, batch_size=6)
    assert all(s.subject_id == good.clips[0].subject_id for s in batch)


def test_sampling_empty_dataset_errors():
    empty = make_toy_dataset(num_clips=0)
    with pytest.raises(ValueError):
        sample_training_batch(empty, k=2, rng_seed=0)


def test_sample_mask_raster_matches_rasterized_keypoints(toy_dataset):
    batch = sample_training_batch(toy_dataset, k=2, rng_seed=9, batch_size=2)
    for sample in batch:
        redrawn = rasterize_mask(sample.driving_mask.keypoints,
                                 sample.target_frame.shape[-2:])
        assert np.array_equal(sample.driving_mask.raster, redrawn.raster)


def test_cross_identity_sampling_uses_other_clip():
    dataset = make_toy_dataset(num_clips=3, num_frames=6, seed=8)
    batch = sample_training_batch(dataset, k=2, rng_seed=1, batch_size=6,
                                  cross_identity=True)
    for sample in batch:
        subject_clip = next(
            c for c in dataset.clips if c.subject_id == sample.subject_id
        )
        # target frame comes from some other clip
        assert not any(
            np.array_equal(f, sample.target_frame) for f in subject_clip.frames
        )
        # driving mask is normalized to the subject clip's median geometry
        _, ref_height = reference_stats([m.keypoints for m in subject_clip.masks])
        assert sample.driving_mask.bbox.height == pytest.approx(ref_height, rel=0.35)


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

def test_flip_twice_restores_frame_and_keypoints(toy_dataset):
    clip = toy_dataset.clips[0]
    frame, mask = clip.frames[0], clip.masks[0]
    params = AugmentParams(flip=True)
    f1, m1 = augment(frame, mask, params)
    f2, m2 = augment(f1, m1, params)
    assert np.array_equal(f2, frame)
    assert np.array_equal(m2.raster, mask.raster)
    # coordinate mirror (w-1)-x can round by an ulp for x < (w-1)/2
    assert np.allclose(m2.keypoints.points, mask.keypoints.points, atol=1e-9)
    assert np.array_equal(m2.keypoints.visibility, mask.keypoints.visibility)


def test_flip_twice_is_exact_on_grid_aligned_keypoints():
    # representable mirrors (half-integer coordinates) restore bit-exactly
    pts = np.stack([(np.arange(68) % 60) + 0.5, (np.arange(68) % 30) + 2.0], axis=1)
    kps = KeypointSet(pts, np.ones(68, dtype=bool), "face68")
    mask = rasterize_mask(kps, SIZE)
    frame = np.zeros((3, 64, 64), dtype=np.float32)
    params = AugmentParams(flip=True)
    f1, m1 = augment(frame, mask, params)
    _, m2 = augment(f1, m1, params)
    assert np.array_equal(m2.keypoints.points, kps.clamped(SIZE).points)


def test_zero_strength_jitter_is_identity(toy_dataset):
    clip = toy_dataset.clips[0]
    frame, mask = clip.frames[0], clip.masks[0]
    out, out_mask = augment(frame, mask, AugmentParams())
    assert np.array_equal(out, frame)
    assert out_mask is mask


def test_flip_maps_landmark_zero_to_mirrored_sixteen():
    # oracle: the schema mirror table applied pointwise
    kps = face_keypoints(SIZE)
    spec = get_schema("face68")
    flipped = kps.flipped(64)
    for i in (0, 16, 36, 45, 48):
        j = spec.flip_index[i]
        assert flipped.points[i, 0] == pytest.approx(63.0 - kps.points[j, 0])
        assert flipped.points[i, 1] == pytest.approx(kps.points[j, 1])
    assert spec.flip_index[0] == 16 and spec.flip_index[16] == 0


def test_flip_index_tables_are_involutions():
    for name in ("face68", "body"):
        spec = get_schema(name)
        idx = np.asarray(spec.flip_index)
        assert np.array_equal(idx[idx], np.arange(spec.num_points))
        ch = np.asarray(spec.channel_flip)
        assert np.array_equal(ch[ch], np.arange(spec.num_channels))


def test_color_jitter_leaves_mask_untouched(toy_dataset):
    clip = toy_dataset.clips[0]
    frame, mask = clip.frames[0], clip.masks[0]
    params = AugmentParams(brightness=1.2, contrast=0.9, saturation=1.1)
    out, out_mask = augment(frame, mask, params)
    assert out_mask is mask
    assert not np.array_equal(out, frame)
    assert out.min() >= 0.0 and out.max() <= 1.0


# ---------------------------------------------------------------------------
# disk round trip
# ---------------------------------------------------------------------------

def test_dataset_write_load_roundtrip(tmp_path):
    dataset = make_toy_dataset(num_clips=2, num_frames=3, seed=10)
    for clip in dataset.clips:
        write_clip(tmp_path, clip.clip_id, clip.subject_id, clip.frames,
                   [m.keypoints for m in clip.masks])
    loaded = load_dataset(tmp_path)
    assert loaded.schema == "face68"
    assert len(loaded) == 2
    for orig, back in zip(dataset.clips, loaded.clips):
        assert back.clip_id == orig.clip_id
        assert back.subject_id == orig.subject_id
        assert back.frames.shape == orig.frames.shape
        # PNG round trip quantizes to 8 bits
        assert np.abs(back.frames - orig.frames).max() <= 1.0 / 255.0 + 1e-6
        assert np.allclose(back.masks[0].raster, orig.masks[0].raster, atol=1e-6)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert {c["id"] for c in manifest["clips"]} == {"clip00", "clip01"}
