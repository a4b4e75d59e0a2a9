"""Inference and evaluation: retargeting jobs, self-reconstruction metrics
(L2 + perceptual distance), and report/strip emission."""

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from PIL import Image

from .dataio import (
    EmptyMaskError,
    RasterStyle,
    TrainingSample,
    VideoClip,
    rasterize_mask,
    normalize_to_reference,
    reference_stats,
)
from .losses import FeatureExtractor
from .networks import generator_from_checkpoint
from .trainer import batch_to_tensors

log = logging.getLogger(__name__)


@dataclass
class RetargetJob:
    subject_clip: VideoClip
    driving_clip: VideoClip      # only masks/keypoints are consumed
    generator: object            # Generator, checkpoint path, or payload dict
    k: Optional[int] = None     # None: use the checkpoint's K
    seed: int = 0
    normalize: bool = True
    style: RasterStyle = field(default_factory=RasterStyle)


@dataclass
class RetargetResult:
    frames: np.ndarray           # (T', 3, H, W) float32
    driving_indices: list        # driving frames actually used
    subject_indices: list        # the K subject frames conditioned on


@dataclass
class VideoEval:
    video_id: str
    frame_indices: list
    l2_per_frame: list
    perceptual_per_frame: list

    @property
    def mean_l2(self):
        return float(np.mean(self.l2_per_frame))

    @property
    def mean_perceptual(self):
        return float(np.mean(self.perceptual_per_frame))


@dataclass
class EvalReport:
    videos: list
    perceptual_provenance: str
    config: dict

    def _all(self, attr):
        return [v for video in self.videos for v in getattr(video, attr)]

    @property
    def mean_l2(self):
        values = self._all("l2_per_frame")
        return float(np.mean(values)) if values else 0.0

    @property
    def mean_perceptual(self):
        values = self._all("perceptual_per_frame")
        return float(np.mean(values)) if values else 0.0

    def to_dict(self):
        return {
            "mean_l2": self.mean_l2,
            "mean_perceptual": self.mean_perceptual,
            "perceptual_provenance": self.perceptual_provenance,
            "config": self.config,
            "videos": [
                {
                    "video_id": v.video_id,
                    "frame_indices": list(v.frame_indices),
                    "l2_per_frame": [float(x) for x in v.l2_per_frame],
                    "perceptual_per_frame": [float(x) for x in v.perceptual_per_frame],
                    "mean_l2": v.mean_l2,
                    "mean_perceptual": v.mean_perceptual,
                }
                for v in self.videos
            ],
        }


def _resolve_generator(ref):
    if hasattr(ref, "forward"):
        return ref, ref.cfg
    return generator_from_checkpoint(ref)


def retarget(job):
    """Generate one frame per usable driving frame.

    The K subject frames are drawn once (seeded) and reused for the whole
    output video so appearance conditioning stays constant; driving frames
    without visible keypoints are skipped and logged.
    """
    generator, cfg = _resolve_generator(job.generator)
    k = job.k if job.k is not None else cfg.k
    if k != cfg.k:
        raise ValueError(f"checkpoint was trained with K={cfg.k}, job requests K={k}")
    subject = job.subject_clip
    if subject.masks[0].keypoints.schema != job.driving_clip.masks[0].keypoints.schema:
        raise ValueError("subject and driving clips use different keypoint schemas")
    rng = np.random.default_rng(job.seed)
    subject_indices = sorted(
        int(i) for i in rng.choice(len(subject), size=k, replace=False)
    )
    ref_center, ref_height = reference_stats([m.keypoints for m in subject.masks])

    frames = []
    used = []
    generator.eval()
    with torch.no_grad():
        for di, driving_mask in enumerate(job.driving_clip.masks):
            kps = driving_mask.keypoints
            if kps.num_visible() == 0:
                log.warning("driving frame %d has no visible keypoints; skipped", di)
                continue
            try:
                if job.normalize:
                    kps = normalize_to_reference(kps, ref_center, ref_height)
                mask = rasterize_mask(kps, subject.image_size, job.style)
            except (EmptyMaskError, ValueError) as err:
                log.warning("driving frame %d unusable (%s); skipped", di, err)
                continue
            sample = TrainingSample(
                subject_frames=subject.frames[subject_indices],
                subject_masks=[subject.masks[i] for i in subject_indices],
                driving_mask=mask,
                target_frame=subject.frames[subject_indices[0]],
                subject_id=subject.subject_id,
            )
            batch = batch_to_tensors([sample])
            out = generator(
                batch["subject_frames"], batch["subject_masks"],
                batch["driving_mask"], batch["subject_boxes"], batch["driving_boxes"],
            )
            frames.append(out.frame[0].numpy())
            used.append(di)
    return RetargetResult(
        frames=np.stack(frames) if frames else np.zeros((0, 3) + subject.image_size, np.float32),
        driving_indices=used,
        subject_indices=subject_indices,
    )


def l2_metric(generated, ground_truth):
    """Mean over frames of per-frame squared L2 distance divided by the
    element count (per-element MSE in [0, 1] space)."""
    generated = np.asarray(generated, dtype=np.float64)
    ground_truth = np.asarray(ground_truth, dtype=np.float64)
    if generated.shape != ground_truth.shape:
        raise ValueError(
            f"shape mismatch: {generated.shape} vs {ground_truth.shape}"
        )
    per_frame = [
        float(np.sum((g - t) ** 2) / g.size) for g, t in zip(generated, ground_truth)
    ]
    return float(np.mean(per_frame)), per_frame


def perceptual_metric(extractor, generated, ground_truth):
    """Mean per-frame perceptual distance under the given feature extractor
    (LPIPS when calibrated weights are available, a flagged proxy otherwise)."""
    gen = torch.from_numpy(np.asarray(generated, dtype=np.float32))
    gt = torch.from_numpy(np.asarray(ground_truth, dtype=np.float32))
    if gen.shape != gt.shape:
        raise ValueError(f"shape mismatch: {tuple(gen.shape)} vs {tuple(gt.shape)}")
    per_frame = []
    with torch.no_grad():
        feats_gen = extractor(gen)
        feats_gt = extractor(gt)
        dist = torch.zeros(gen.shape[0])
        for fg, ft in zip(feats_gen, feats_gt):
            dist = dist + (fg - ft).abs().mean(dim=(1, 2, 3))
        per_frame = [float(d) for d in dist]
    return float(np.mean(per_frame)) if per_frame else 0.0, per_frame


def _split_clip(clip):
    half = len(clip) // 2
    first = VideoClip(clip.clip_id + "/subject", clip.subject_id,
                      clip.frames[:half], clip.masks[:half])
    second = VideoClip(clip.clip_id + "/driving", clip.subject_id,
                       clip.frames[half:], clip.masks[half:])
    return first, second


def self_reconstruction_eval(dataset, generator, k=None, seed=0, extractor=None,
                             collect_media=False):
    """Split every clip into subject/driving halves, retarget, and score
    against the driving half's real frames. Returns (EvalReport, media) where
    media maps video id -> strip ingredients when collect_media is set."""
    generator, cfg = _resolve_generator(generator)
    extractor = extractor if extractor is not None else FeatureExtractor()
    k = k if k is not None else cfg.k
    videos = []
    media = {}
    for clip in dataset.clips:
        if len(clip) < 2 * max(k, 1):
            log.warning("clip %s too short to split for evaluation; skipped", clip.clip_id)
            continue
        subject_half, driving_half = _split_clip(clip)
        job = RetargetJob(
            subject_clip=subject_half, driving_clip=driving_half,
            generator=generator, k=k, seed=seed, normalize=False,
        )
        result = retarget(job)
        truth = driving_half.frames[result.driving_indices]
        _, l2_frames = l2_metric(result.frames, truth)
        _, perc_frames = perceptual_metric(extractor, result.frames, truth)
        videos.append(VideoEval(
            video_id=clip.clip_id,
            frame_indices=result.driving_indices,
            l2_per_frame=l2_frames,
            perceptual_per_frame=perc_frames,
        ))
        if collect_media:
            media[clip.clip_id] = {
                "subject": subject_half.frames[result.subject_indices[0]],
                "masks": [driving_half.masks[i].raster for i in result.driving_indices],
                "generated": result.frames,
            }
    report = EvalReport(
        videos=videos,
        perceptual_provenance=extractor.provenance,
        config={"k": k, "seed": seed, "mode": "self-reconstruction"},
    )
    return report, media


def _to_image(array):
    # (3, H, W) or (C, H, W) mask -> uint8 RGB
    arr = np.asarray(array, dtype=np.float32)
    if arr.shape[0] == 3:
        rgb = arr
    else:
        gray = arr.max(axis=0, keepdims=True)
        rgb = np.repeat(gray, 3, axis=0)
    rgb = np.clip(np.transpose(rgb, (1, 2, 0)), 0.0, 1.0)
    return (rgb * 255.0).round().astype(np.uint8)


def write_frames(frames, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, frame in enumerate(frames):
        path = out_dir / f"{i:06d}.png"
        Image.fromarray(_to_image(frame)).save(path)
        paths.append(path)
    return paths


def write_strips(subject, masks, generated, out_dir, gif_path=None):
    """Side-by-side (subject | driving mask | generated) strips, one per frame."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    subject_img = _to_image(subject)
    strips = []
    for i, (mask, frame) in enumerate(zip(masks, generated)):
        strip = np.concatenate([subject_img, _to_image(mask), _to_image(frame)], axis=1)
        img = Image.fromarray(strip)
        img.save(out_dir / f"{i:06d}.png")
        strips.append(img)
    if gif_path is not None and strips:
        strips[0].save(
            gif_path, save_all=True, append_images=strips[1:], duration=100, loop=0
        )
    return out_dir


def emit_report(report, out_dir, media=None, gif=False):
    """Write report.json and per-frame metrics.csv (byte-deterministic), plus
    strip images and optional GIFs when media is provided."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "report.json", "w") as f:
        json.dump(report.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")
    with open(out_dir / "metrics.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["video_id", "frame_index", "l2", "perceptual"])
        for video in report.videos:
            for idx, l2, perc in zip(
                video.frame_indices, video.l2_per_frame, video.perceptual_per_frame
            ):
                writer.writerow([video.video_id, idx, repr(float(l2)), repr(float(perc))])
    if media:
        for video_id, item in media.items():
            safe = video_id.replace("/", "_")
            write_strips(
                item["subject"], item["masks"], item["generated"],
                out_dir / "strips" / safe,
                gif_path=(out_dir / f"{safe}.gif") if gif else None,
            )
    return out_dir
