"""Shared fixtures: synthetic face-landmark clips whose frames are a
deterministic function of the mask plus a per-subject palette, so a small
model can overfit them quickly."""

import numpy as np
import pytest

from warpsynth.dataio import KeypointSet, VideoClip, VideoDataset, rasterize_mask


def face68_template():
    """A face-like 68-landmark layout inside the unit square."""
    pts = np.zeros((68, 2), dtype=np.float64)
    theta = np.linspace(np.pi, 2 * np.pi, 17)
    pts[0:17, 0] = 0.5 + 0.45 * np.cos(theta)
    pts[0:17, 1] = 0.5 - 0.47 * np.sin(theta)
    pts[17:22, 0] = np.linspace(0.18, 0.42, 5)
    pts[17:22, 1] = 0.30 - 0.03 * np.sin(np.linspace(0, np.pi, 5))
    pts[22:27, 0] = np.linspace(0.58, 0.82, 5)
    pts[22:27, 1] = 0.30 - 0.03 * np.sin(np.linspace(0, np.pi, 5))
    pts[27:31, 0] = 0.5
    pts[27:31, 1] = np.linspace(0.36, 0.54, 4)
    pts[31:36, 0] = np.linspace(0.42, 0.58, 5)
    pts[31:36, 1] = 0.60 + 0.015 * np.array([0.0, 1.0, 1.4, 1.0, 0.0])
    for start, cx in ((36, 0.30), (42, 0.70)):
        ang = np.linspace(0, 2 * np.pi, 6, endpoint=False)
        pts[start:start + 6, 0] = cx + 0.07 * np.cos(ang)
        pts[start:start + 6, 1] = 0.40 + 0.03 * np.sin(ang)
    ang = np.linspace(0, 2 * np.pi, 12, endpoint=False)
    pts[48:60, 0] = 0.5 + 0.16 * np.cos(ang)
    pts[48:60, 1] = 0.74 + 0.06 * np.sin(ang)
    ang = np.linspace(0, 2 * np.pi, 8, endpoint=False)
    pts[60:68, 0] = 0.5 + 0.09 * np.cos(ang)
    pts[60:68, 1] = 0.74 + 0.025 * np.sin(ang)
    return pts


def face_keypoints(size, center=(0.5, 0.5), scale=0.8):
    """Template placed into HxW pixel coordinates."""
    h, w = size
    pts = face68_template() - 0.5
    pts = pts * scale * min(h, w) + np.array([center[0] * w, center[1] * h])
    return KeypointSet(pts, np.ones(68, dtype=bool), "face68")


def render_frame(mask, fg, bg):
    """Deterministic frame from a mask raster and a subject palette; a pure
    function of (mask, identity) so reconstruction error can reach zero."""
    m = mask.raster.max(axis=0)
    h, w = m.shape
    ramp = np.linspace(0.0, 0.15, w, dtype=np.float32)[None, :]
    frame = np.empty((3, h, w), dtype=np.float32)
    for c in range(3):
        frame[c] = bg[c] * (1.0 - m) + fg[c] * m + ramp
    return np.clip(frame, 0.0, 1.0)


def make_toy_clip(clip_id, subject_id, num_frames, size, seed):
    rng = np.random.default_rng(seed)
    fg = rng.uniform(0.6, 1.0, size=3)
    bg = rng.uniform(0.0, 0.35, size=3)
    phase0 = rng.uniform(0, 2 * np.pi)
    frames, masks = [], []
    for t in range(num_frames):
        phase = phase0 + 2 * np.pi * t / max(num_frames, 1)
        center = (0.5 + 0.08 * np.cos(phase), 0.5 + 0.06 * np.sin(phase))
        scale = 0.72 + 0.05 * np.sin(phase / 2)
        kps = face_keypoints(size, center, scale)
        mask = rasterize_mask(kps, size)
        masks.append(mask)
        frames.append(render_frame(mask, fg, bg))
    return VideoClip(clip_id, subject_id, np.stack(frames), masks)


def make_toy_dataset(num_clips=2, num_frames=8, size=(64, 64), seed=0):
    clips = [
        make_toy_clip(f"clip{i:02d}", f"subject{i:02d}", num_frames, size, seed + i)
        for i in range(num_clips)
    ]
    return VideoDataset(clips, schema="face68")


@pytest.fixture(scope="session")
def toy_dataset():
    return make_toy_dataset()


@pytest.fixture(scope="session")
def toy_keypoints():
    return face_keypoints((64, 64))
