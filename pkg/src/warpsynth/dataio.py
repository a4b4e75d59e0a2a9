"""Video/keypoint ingestion, mask rasterization, geometry normalization, sampling.

Dataset directory layout::

    <root>/manifest.json                      {"schema": ..., "clips": [{"id", "subject"}]}
    <root>/<clip_id>/frames/%06d.png          RGB frames, all the same size
    <root>/<clip_id>/keypoints/%06d.json      {"schema", "points", "visibility"}

Datasets are immutable after construction; batch sampling takes an explicit
seed per call so concurrent loaders never share RNG state.
"""

import json
import logging
import warnings
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .skeletons import get_schema

log = logging.getLogger(__name__)


class EmptyMaskError(ValueError):
    """Raised when a keypoint set has nothing visible to rasterize."""


class NormalizationError(ValueError):
    """Raised when mask normalization hits a degenerate bounding box."""


@dataclass(frozen=True)
class BoundingBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if self.x_min > self.x_max or self.y_min > self.y_max:
            raise ValueError(f"inverted bounding box: {self}")

    @property
    def width(self):
        return self.x_max - self.x_min

    @property
    def height(self):
        return self.y_max - self.y_min

    @property
    def center(self):
        return ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)

    def downsampled(self, factor):
        """Inclusive cell-index box at 1/factor resolution, rounded outward."""
        return BoundingBox(
            float(np.floor(self.x_min / factor)),
            float(np.floor(self.y_min / factor)),
            float(np.floor(self.x_max / factor)),
            float(np.floor(self.y_max / factor)),
        )


@dataclass
class KeypointSet:
    points: np.ndarray       # (N, 2) float64, (x, y) in pixel units
    visibility: np.ndarray   # (N,) bool
    schema: str = "face68"

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.visibility = np.asarray(self.visibility, dtype=bool)
        spec = get_schema(self.schema)
        if self.points.shape != (spec.num_points, 2):
            raise ValueError(
                f"schema {self.schema!r} expects {spec.num_points} points, "
                f"got array of shape {self.points.shape}"
            )
        if self.visibility.shape != (spec.num_points,):
            raise ValueError("visibility must be one flag per point")

    def visible_points(self):
        return self.points[self.visibility]

    def num_visible(self):
        return int(self.visibility.sum())

    def bbox(self):
        pts = self.visible_points()
        if len(pts) == 0:
            raise EmptyMaskError("bounding box of a fully invisible keypoint set")
        return BoundingBox(
            float(pts[:, 0].min()), float(pts[:, 1].min()),
            float(pts[:, 0].max()), float(pts[:, 1].max()),
        )

    def clamped(self, size):
        h, w = size
        pts = self.points.copy()
        pts[:, 0] = np.clip(pts[:, 0], 0.0, w - 1.0)
        pts[:, 1] = np.clip(pts[:, 1], 0.0, h - 1.0)
        return replace(self, points=pts)

    def flipped(self, width):
        """Horizontal mirror: x -> width-1-x plus the schema's left/right index swap."""
        spec = get_schema(self.schema)
        idx = np.asarray(spec.flip_index)
        pts = self.points[idx].copy()
        pts[:, 0] = (width - 1.0) - pts[:, 0]
        return replace(self, points=pts, visibility=self.visibility[idx].copy())


@dataclass
class MaskFrame:
    raster: np.ndarray       # (C, H, W) float32 in [0, 1]
    keypoints: KeypointSet
    bbox: BoundingBox


@dataclass(frozen=True)
class RasterStyle:
    """Anti-aliased white skeleton segments on black.

    The dilation radius scales with resolution (3 px at 256) and is floored at
    1 px so masks survive the encoder's 1/8 downsampling even on tiny frames.
    """

    radius: float = 3.0
    reference_size: int = 256
    min_radius: float = 1.0

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("radius must be positive")

    def radius_for(self, size):
        h, w = size
        return max(self.min_radius, self.radius * min(h, w) / self.reference_size)


def _paint_capsule(canvas, a, b, radius):
    """Max-composite clip(radius - dist_to_segment, 0, 1) over a local window."""
    h, w = canvas.shape
    x0 = max(int(np.floor(min(a[0], b[0]) - radius - 1)), 0)
    x1 = min(int(np.ceil(max(a[0], b[0]) + radius + 1)), w - 1)
    y0 = max(int(np.floor(min(a[1], b[1]) - radius - 1)), 0)
    y1 = min(int(np.ceil(max(a[1], b[1]) + radius + 1)), h - 1)
    if x0 > x1 or y0 > y1:
        return
    xs = np.arange(x0, x1 + 1, dtype=np.float64)
    ys = np.arange(y0, y1 + 1, dtype=np.float64)
    px, py = np.meshgrid(xs, ys)
    ab = (b[0] - a[0], b[1] - a[1])
    denom = ab[0] * ab[0] + ab[1] * ab[1]
    if denom == 0.0:
        cx, cy = a
    else:
        t = np.clip(((px - a[0]) * ab[0] + (py - a[1]) * ab[1]) / denom, 0.0, 1.0)
        cx = a[0] + t * ab[0]
        cy = a[1] + t * ab[1]
    dist = np.hypot(px - cx, py - cy)
    cov = np.clip(radius - dist, 0.0, 1.0)
    window = canvas[y0:y1 + 1, x0:x1 + 1]
    np.maximum(window, cov, out=window)


def rasterize_mask(kps, size, style=RasterStyle()):
    """Rasterize a keypoint set into a MaskFrame.

    Segments are drawn where both endpoints are visible; every visible point
    additionally gets a dilated dot, so a single visible landmark still
    produces a nonempty raster. Raises EmptyMaskError when nothing is visible.
    """
    spec = get_schema(kps.schema)
    kps = kps.clamped(size)
    if kps.num_visible() == 0:
        raise EmptyMaskError("no visible keypoints to rasterize")
    h, w = size
    radius = style.radius_for(size)
    raster = np.zeros((spec.num_channels, h, w), dtype=np.float64)
    vis = kps.visibility
    pts = kps.points
    for a, b, ch in spec.segments:
        if vis[a] and vis[b]:
            _paint_capsule(raster[ch], pts[a], pts[b], radius)
    for i in np.flatnonzero(vis):
        _paint_capsule(raster[spec.point_channel[i]], pts[i], pts[i], radius)
    return MaskFrame(raster.astype(np.float32), kps, kps.bbox())


def reference_stats(keypoint_sets):
    """Median bbox center and height over a clip's frames; the per-subject
    anchor that driving masks are normalized against."""
    centers = []
    heights = []
    for kps in keypoint_sets:
        box = kps.bbox()
        centers.append(box.center)
        heights.append(box.height)
    centers = np.asarray(centers, dtype=np.float64)
    return (
        (float(np.median(centers[:, 0])), float(np.median(centers[:, 1]))),
        float(np.median(np.asarray(heights, dtype=np.float64))),
    )


def normalize_to_reference(driving, ref_center, ref_height, eps=1e-9):
    """Scale + translate driving keypoints so their bbox center/height match
    the reference; relative pose is preserved (global similarity only)."""
    box = driving.bbox()
    if box.height <= eps:
        raise NormalizationError("degenerate driving bounding box (zero height)")
    if ref_height <= eps:
        raise NormalizationError("degenerate subject bounding box (zero height)")
    scale = ref_height / box.height
    cx, cy = box.center
    # pts*scale + offset form keeps the identity transform bit-exact
    offset = (ref_center[0] - cx * scale, ref_center[1] - cy * scale)
    pts = driving.points * scale + np.asarray(offset, dtype=np.float64)
    return replace(driving, points=pts)


def normalize_driving_mask(driving, subject_ref):
    """Align driving keypoints to a subject reference keypoint set."""
    if driving.schema != subject_ref.schema:
        raise ValueError("driving and subject keypoints use different schemas")
    box = subject_ref.bbox()
    return normalize_to_reference(driving, box.center, box.height)


@dataclass
class VideoClip:
    clip_id: str
    subject_id: str
    frames: np.ndarray       # (T, 3, H, W) float32 in [0, 1]
    masks: list

    def __len__(self):
        return len(self.frames)

    def __post_init__(self):
        if len(self.frames) != len(self.masks):
            raise ValueError(f"clip {self.clip_id}: {len(self.frames)} frames vs {len(self.masks)} masks")

    @property
    def image_size(self):
        return tuple(self.frames.shape[-2:])


@dataclass
class TrainingSample:
    subject_frames: np.ndarray   # (K, 3, H, W)
    subject_masks: list          # K MaskFrames
    driving_mask: MaskFrame
    target_frame: np.ndarray     # (3, H, W)
    subject_id: str


class VideoDataset:
    """Immutable collection of clips; safe to share across workers."""

    def __init__(self, clips, schema="face68"):
        self.clips = list(clips)
        self.schema = schema

    def __len__(self):
        return len(self.clips)

    def __getitem__(self, i):
        return self.clips[i]

    @property
    def mask_channels(self):
        return get_schema(self.schema).num_channels

    def eligible_clips(self, min_frames):
        out = []
        for clip in self.clips:
            if len(clip) >= min_frames:
                out.append(clip)
            else:
                warnings.warn(
                    f"clip {clip.clip_id} has {len(clip)} frames < {min_frames}; skipped"
                )
        return out


def sample_training_batch(dataset, k, rng_seed, batch_size=20, cross_identity=False):
    """Draw TrainingSamples: K subject frames without replacement from one
    clip, driving frame from the disjoint remainder (or, in cross-identity
    mode, from a different clip with its mask normalized to the subject).

    Reproducible: the same (dataset, k, rng_seed, ...) yields the same batch.
    """
    rng = np.random.default_rng(rng_seed)
    clips = dataset.eligible_clips(k + 1)
    if not clips:
        raise ValueError(f"no clip has at least {k + 1} frames")
    if cross_identity and len(clips) < 2:
        raise ValueError("cross-identity sampling needs at least two clips")
    samples = []
    for _ in range(batch_size):
        ci = int(rng.integers(len(clips)))
        clip = clips[ci]
        subject_idx = np.sort(rng.choice(len(clip), size=k, replace=False))
        if cross_identity:
            dj = int(rng.integers(len(clips) - 1))
            if dj >= ci:
                dj += 1
            driving_clip = clips[dj]
            di = int(rng.integers(len(driving_clip)))
            ref_center, ref_height = reference_stats(
                [m.keypoints for m in clip.masks]
            )
            kps = normalize_to_reference(
                driving_clip.masks[di].keypoints, ref_center, ref_height
            )
            driving_mask = rasterize_mask(kps, clip.image_size)
            target = driving_clip.frames[di]
        else:
            remainder = np.setdiff1d(np.arange(len(clip)), subject_idx)
            di = int(rng.choice(remainder))
            driving_mask = clip.masks[di]
            target = clip.frames[di]
        samples.append(TrainingSample(
            subject_frames=clip.frames[subject_idx],
            subject_masks=[clip.masks[i] for i in subject_idx],
            driving_mask=driving_mask,
            target_frame=target,
            subject_id=clip.subject_id,
        ))
    return samples


@dataclass(frozen=True)
class AugmentParams:
    flip: bool = False
    brightness: float = 1.0
    contrast: float = 1.0
    saturation: float = 1.0


def sample_augment_params(rng, flip_prob=0.5, jitter=0.2):
    return AugmentParams(
        flip=bool(rng.random() < flip_prob),
        brightness=float(1.0 + rng.uniform(-jitter, jitter)),
        contrast=float(1.0 + rng.uniform(-jitter, jitter)),
        saturation=float(1.0 + rng.uniform(-jitter, jitter)),
    )


def _flip_mask(mask):
    spec = get_schema(mask.keypoints.schema)
    width = mask.raster.shape[-1]
    raster = np.flip(mask.raster, axis=-1)[list(spec.channel_flip)].copy()
    kps = mask.keypoints.flipped(width)
    return MaskFrame(raster, kps, kps.bbox())


def augment(frame, mask, params):
    """Apply flip (frame + mask geometry) and color jitter (frame only).

    Every sub-op is gated on its parameter so zero-strength params are the
    exact identity, and flips compose to an exact involution.
    """
    if params.flip:
        frame = np.flip(frame, axis=-1).copy()
        mask = _flip_mask(mask)
    if params.brightness != 1.0:
        frame = np.clip(frame * params.brightness, 0.0, 1.0)
    if params.contrast != 1.0:
        mean = frame.mean()
        frame = np.clip((frame - mean) * params.contrast + mean, 0.0, 1.0)
    if params.saturation != 1.0:
        gray = frame.mean(axis=0, keepdims=True)
        frame = np.clip(gray + (frame - gray) * params.saturation, 0.0, 1.0)
    return frame, mask


# ---------------------------------------------------------------------------
# On-disk layout
# ---------------------------------------------------------------------------

def load_keypoint_file(path, schema=None):
    with open(path) as f:
        data = json.load(f)
    return KeypointSet(
        points=np.asarray(data["points"], dtype=np.float64),
        visibility=np.asarray(data["visibility"], dtype=bool),
        schema=schema or data.get("schema", "face68"),
    )


def _load_frame(path):
    img = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
    return np.transpose(img, (2, 0, 1))  # (3, H, W)


def load_clip(clip_dir, schema=None, subject_id=None, style=RasterStyle()):
    clip_dir = Path(clip_dir)
    frame_paths = sorted((clip_dir / "frames").glob("*.png"))
    if not frame_paths:
        raise FileNotFoundError(f"no frames under {clip_dir / 'frames'}")
    frames = np.stack([_load_frame(p) for p in frame_paths])
    size = frames.shape[-2:]
    masks = []
    for p in frame_paths:
        kp_path = clip_dir / "keypoints" / (p.stem + ".json")
        kps = load_keypoint_file(kp_path, schema)
        masks.append(rasterize_mask(kps, size, style))
    return VideoClip(
        clip_id=clip_dir.name,
        subject_id=subject_id if subject_id is not None else clip_dir.name,
        frames=frames,
        masks=masks,
    )


def load_dataset(root, schema=None, style=RasterStyle()):
    root = Path(root)
    with open(root / "manifest.json") as f:
        manifest = json.load(f)
    schema = schema or manifest.get("schema", "face68")
    clips = []
    for entry in manifest["clips"]:
        clips.append(load_clip(root / entry["id"], schema, entry.get("subject"), style))
    log.info("loaded %d clips from %s", len(clips), root)
    return VideoDataset(clips, schema=schema)


def write_clip(root, clip_id, subject_id, frames, keypoint_sets):
    """Write one clip in the dataset layout and update the manifest."""
    root = Path(root)
    clip_dir = root / clip_id
    (clip_dir / "frames").mkdir(parents=True, exist_ok=True)
    (clip_dir / "keypoints").mkdir(parents=True, exist_ok=True)
    schema = keypoint_sets[0].schema
    for i, (frame, kps) in enumerate(zip(frames, keypoint_sets)):
        img = (np.clip(np.transpose(frame, (1, 2, 0)), 0.0, 1.0) * 255.0).round()
        Image.fromarray(img.astype(np.uint8)).save(clip_dir / "frames" / f"{i:06d}.png")
        payload = {
            "schema": kps.schema,
            "points": kps.points.tolist(),
            "visibility": kps.visibility.tolist(),
        }
        with open(clip_dir / "keypoints" / f"{i:06d}.json", "w") as f:
            json.dump(payload, f)
    manifest_path = root / "manifest.json"
    if manifest_path.exists():
        with open(manifest_path) as f:
            manifest = json.load(f)
    else:
        manifest = {"schema": schema, "clips": []}
    manifest["clips"] = [c for c in manifest["clips"] if c["id"] != clip_id]
    manifest["clips"].append({"id": clip_id, "subject": subject_id})
    manifest["clips"].sort(key=lambda c: c["id"])
    with open(manifest_path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
