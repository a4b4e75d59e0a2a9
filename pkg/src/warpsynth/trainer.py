"""Self-supervised training loop: alternating discriminator/generator updates,
linear-decay learning-rate schedule, atomic checkpointing, ablation modes."""

import dataclasses
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .dataio import augment, sample_augment_params, sample_training_batch
from .losses import (
    FeatureExtractor,
    LossWeights,
    TrainingDivergedError,
    adversarial_loss,
    feature_matching_loss,
    gradient_difference_loss,
    perceptual_loss,
    total_generator_loss,
    transformation_loss,
)
from .networks import (
    Generator,
    GeneratorConfig,
    PatchDiscriminator,
    crop_face_region,
    load_checkpoint,
    save_checkpoint,
)
from .skeletons import FACE_POINT_RANGE

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    # sampling
    k: int = 3
    batch_size: int = 20
    epochs: int = 600
    steps_per_epoch: int = 0          # 0: one pass over the clips per epoch
    # optimizer / schedule
    lr: float = 2e-4
    lr_constant_epochs: int = 275
    adam_betas: tuple = (0.5, 0.999)
    disc_lr_scale: float = 1.0   # discriminator lr = lr * scale
    # loss weights
    alpha: float = 10.0
    beta: float = 10.0
    lam: float = 10.0
    gdl_weight: float = 0.0
    # architecture
    branch_mode: str = "dual"
    combine_mode: str = "concat"
    use_coord_conv: bool = True
    base_channels: int = 64
    image_size: tuple = (256, 256)
    mask_channels: int = 1
    tau: float = 100.0
    disc_base_channels: int = 64
    # modes
    cross_identity: bool = False
    use_face_discriminator: bool = False
    face_crop_size: int = 64
    # augmentation
    flip_prob: float = 0.5
    color_jitter: float = 0.2
    # bookkeeping
    seed: int = 0
    checkpoint_interval: int = 25

    def __post_init__(self):
        self.image_size = tuple(self.image_size)
        self.adam_betas = tuple(self.adam_betas)
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 <= self.lr_constant_epochs <= self.epochs:
            raise ValueError("lr_constant_epochs must lie within [0, epochs]")
        if self.use_face_discriminator and (
            self.face_crop_size < 32 or min(self.image_size) < 32
        ):
            # the 70x70 patch stack needs >= 32 px to keep a spatial score map
            raise ValueError("face discriminator needs face_crop_size >= 32")

    def generator_config(self):
        return GeneratorConfig(
            k=self.k,
            image_size=self.image_size,
            mask_channels=self.mask_channels,
            base_channels=self.base_channels,
            branch_mode=self.branch_mode,
            combine_mode=self.combine_mode,
            use_coord_conv=self.use_coord_conv,
            tau=self.tau,
        )

    def loss_weights(self):
        lam = self.lam
        if self.branch_mode == "synth_only" and lam != 0.0:
            log.warning("synth_only branch has no warped frames; forcing lam=0")
            lam = 0.0
        return LossWeights(self.alpha, self.beta, lam, self.gdl_weight)

    @classmethod
    def from_file(cls, path):
        """Flat JSON key/value config; unknown keys are rejected."""
        with open(path) as f:
            data = json.load(f)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)


def lr_schedule(epoch, cfg):
    """Constant for the first lr_constant_epochs, then linear decay reaching
    exactly zero at epoch == epochs."""
    if not 0 <= epoch <= cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs}]")
    if epoch < cfg.lr_constant_epochs:
        return cfg.lr
    decay_span = cfg.epochs - cfg.lr_constant_epochs
    if decay_span == 0:
        return 0.0
    return cfg.lr * (cfg.epochs - epoch) / decay_span


def _step_seed(seed, step):
    return np.random.SeedSequence([seed, step])


def batch_to_tensors(samples, rng=None, flip_prob=0.0, jitter=0.0):
    """Stack TrainingSamples into a training batch, applying one augmentation
    draw per sample (flip is shared by the sample's frames and masks)."""
    subject_frames, subject_masks, subject_boxes = [], [], []
    driving_rasters, driving_boxes, targets, face_centers = [], [], [], []
    for sample in samples:
        frames = list(sample.subject_frames)
        masks = list(sample.subject_masks)
        driving = sample.driving_mask
        target = sample.target_frame
        if rng is not None:
            params = sample_augment_params(rng, flip_prob, jitter)
            frames_masks = [augment(fr, m, params) for fr, m in zip(frames, masks)]
            frames = [fm[0] for fm in frames_masks]
            masks = [fm[1] for fm in frames_masks]
            target, driving = augment(target, driving, params)
        subject_frames.append(np.stack(frames))
        subject_masks.append(np.stack([m.raster for m in masks]))
        subject_boxes.append([m.bbox for m in masks])
        driving_rasters.append(driving.raster)
        driving_boxes.append(driving.bbox)
        targets.append(target)
        face_centers.append(_face_center(driving.keypoints))
    return {
        "subject_frames": torch.from_numpy(np.stack(subject_frames).astype(np.float32)),
        "subject_masks": torch.from_numpy(np.stack(subject_masks).astype(np.float32)),
        "driving_mask": torch.from_numpy(np.stack(driving_rasters).astype(np.float32)),
        "target": torch.from_numpy(np.stack(targets).astype(np.float32)),
        "subject_boxes": subject_boxes,
        "driving_boxes": driving_boxes,
        "face_centers": face_centers,
    }


def _face_center(kps):
    lo, hi = FACE_POINT_RANGE[kps.schema]
    vis = kps.visibility[lo:hi]
    pts = kps.points[lo:hi][vis]
    if len(pts) == 0:  # no visible face points: fall back to the mask bbox
        pts = kps.visible_points()
    return (float(pts[:, 0].mean()), float(pts[:, 1].mean()))


class Trainer:
    """Owns generator/discriminator parameters, optimizers, and counters."""

    def __init__(self, cfg, dataset, extractor=None):
        self.cfg = cfg
        self.dataset = dataset
        if dataset is not None and dataset.mask_channels != cfg.mask_channels:
            raise ValueError(
                f"config mask_channels={cfg.mask_channels} but dataset schema "
                f"{dataset.schema!r} rasterizes {dataset.mask_channels} channels"
            )
        torch.manual_seed(cfg.seed)
        self.generator = Generator(cfg.generator_config())
        self.discriminator = PatchDiscriminator(
            3, cfg.mask_channels, cfg.disc_base_channels
        )
        self.face_discriminator = (
            PatchDiscriminator(3, 0, cfg.disc_base_channels)
            if cfg.use_face_discriminator else None
        )
        self.extractor = extractor if extractor is not None else FeatureExtractor()
        self.opt_g = torch.optim.Adam(
            self.generator.parameters(), lr=cfg.lr, betas=cfg.adam_betas
        )
        d_params = list(self.discriminator.parameters())
        if self.face_discriminator is not None:
            d_params += list(self.face_discriminator.parameters())
        self.opt_d = torch.optim.Adam(
            d_params, lr=cfg.lr * cfg.disc_lr_scale, betas=cfg.adam_betas
        )
        self.weights = cfg.loss_weights()
        self.epoch = 0
        self.step = 0
        self.history = []
        self.last_checkpoint = None

    # -- batches ------------------------------------------------------------

    def next_batch(self):
        seed = _step_seed(self.cfg.seed, self.step)
        children = seed.spawn(2)
        samples = sample_training_batch(
            self.dataset, self.cfg.k, children[0],
            batch_size=self.cfg.batch_size,
            cross_identity=self.cfg.cross_identity,
        )
        rng = np.random.default_rng(children[1])
        return batch_to_tensors(
            samples, rng, self.cfg.flip_prob, self.cfg.color_jitter
        )

    # -- one optimization step ----------------------------------------------

    def set_lr(self, lr):
        for group in self.opt_g.param_groups:
            group["lr"] = lr
        for group in self.opt_d.param_groups:
            group["lr"] = lr * self.cfg.disc_lr_scale

    def _set_disc_requires_grad(self, flag):
        for p in self.discriminator.parameters():
            p.requires_grad_(flag)
        if self.face_discriminator is not None:
            for p in self.face_discriminator.parameters():
                p.requires_grad_(flag)

    def _face_crops(self, batch, *tensors):
        centers = batch["face_centers"]
        return [
            crop_face_region(t, centers, self.cfg.face_crop_size) for t in tensors
        ]

    def train_step(self, batch):
        """One discriminator update then one generator update; returns the
        per-component metric record."""
        cfg = self.cfg
        out = self.generator(
            batch["subject_frames"], batch["subject_masks"], batch["driving_mask"],
            batch["subject_boxes"], batch["driving_boxes"],
        )
        fake = out.frame
        target = batch["target"]
        mask = batch["driving_mask"]

        # discriminator update
        self._set_disc_requires_grad(True)
        self.opt_d.zero_grad()
        loss_d = adversarial_loss(
            self.discriminator, fake.detach(), target, mask, role="discriminator"
        )
        if self.face_discriminator is not None:
            fake_face, real_face = self._face_crops(batch, fake.detach(), target)
            empty = fake_face[:, :0]
            loss_d = loss_d + adversarial_loss(
                self.face_discriminator, fake_face, real_face, empty,
                role="discriminator",
            )
        if not torch.isfinite(loss_d):
            raise TrainingDivergedError(
                f"discriminator loss diverged at step {self.step}; "
                f"last checkpoint: {self.last_checkpoint}"
            )
        loss_d.backward()
        self.opt_d.step()

        # generator update (discriminator parameters frozen)
        self._set_disc_requires_grad(False)
        self.opt_g.zero_grad()
        parts = {
            "gan": adversarial_loss(self.discriminator, fake, target, mask, "generator")
        }
        if not cfg.cross_identity:
            parts["vgg"] = perceptual_loss(self.extractor, fake, target)
            parts["fm"] = feature_matching_loss(self.discriminator, fake, target, mask)
            if self.weights.lam > 0 and out.warped_frames:
                parts["tra"] = transformation_loss(out.warped_frames, target)
            if self.weights.gdl_weight > 0:
                parts["gdl"] = gradient_difference_loss(fake, target)
        if self.face_discriminator is not None:
            fake_face, real_face = self._face_crops(batch, fake, target)
            empty = fake_face[:, :0]
            parts["gan"] = parts["gan"] + adversarial_loss(
                self.face_discriminator, fake_face, real_face, empty, "generator"
            )
            if not cfg.cross_identity:
                parts["fm"] = parts["fm"] + feature_matching_loss(
                    self.face_discriminator, fake_face, real_face, empty
                )
        try:
            loss_g = total_generator_loss(parts, self.weights, cfg.cross_identity)
        except TrainingDivergedError as err:
            raise TrainingDivergedError(
                f"{err} at step {self.step}; last checkpoint: {self.last_checkpoint}"
            ) from err
        loss_g.backward()
        self.opt_g.step()
        self._set_disc_requires_grad(True)

        metrics = {
            "step": self.step,
            "epoch": self.epoch,
            "lr": self.opt_g.param_groups[0]["lr"],
            "loss_d": float(loss_d.detach()),
            "loss_g": float(loss_g.detach()),
        }
        for name in ("gan", "vgg", "fm", "tra", "gdl"):
            metrics[f"loss_{name}"] = float(parts[name].detach()) if name in parts else 0.0
        return metrics

    # -- checkpointing --------------------------------------------------------

    def save(self, path):
        extra = {
            "train_config": dataclasses.asdict(self.cfg),
            "discriminator": self.discriminator.state_dict(),
            "opt_g": self.opt_g.state_dict(),
            "opt_d": self.opt_d.state_dict(),
            "epoch": self.epoch,
            "step": self.step,
            "torch_rng": torch.get_rng_state(),
            "history": self.history,
            "extractor_provenance": self.extractor.provenance,
        }
        if self.face_discriminator is not None:
            extra["face_discriminator"] = self.face_discriminator.state_dict()
        self.last_checkpoint = save_checkpoint(path, self.generator, extra)
        return self.last_checkpoint

    @classmethod
    def restore(cls, path, dataset, extractor=None):
        payload = load_checkpoint(path)
        cfg = TrainConfig(**payload["train_config"])
        trainer = cls(cfg, dataset, extractor)
        trainer.generator.load_state_dict(payload["generator"])
        trainer.discriminator.load_state_dict(payload["discriminator"])
        if trainer.face_discriminator is not None:
            trainer.face_discriminator.load_state_dict(payload["face_discriminator"])
        trainer.opt_g.load_state_dict(payload["opt_g"])
        trainer.opt_d.load_state_dict(payload["opt_d"])
        trainer.epoch = payload["epoch"]
        trainer.step = payload["step"]
        trainer.history = list(payload["history"])
        torch.set_rng_state(payload["torch_rng"])
        trainer.last_checkpoint = str(path)
        return trainer


def train(cfg, dataset, out_dir, resume=None, extractor=None, log_every=10):
    """Run the full schedule; returns the final checkpoint path.

    Writes checkpoint-<epoch>.pt at the configured interval, checkpoint-final.pt
    at the end, and one JSON line per step to metrics.jsonl.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if resume is not None:
        trainer = Trainer.restore(resume, dataset, extractor)
        if dataclasses.asdict(trainer.cfg) != dataclasses.asdict(cfg):
            log.warning("resumed config differs from the requested one; using the checkpoint's")
        cfg = trainer.cfg
    else:
        trainer = Trainer(cfg, dataset, extractor)

    steps_per_epoch = cfg.steps_per_epoch or max(1, round(len(dataset) / cfg.batch_size))
    metrics_path = out_dir / "metrics.jsonl"
    mode = "a" if resume is not None else "w"

    if cfg.epochs == 0:
        final = trainer.save(out_dir / "checkpoint-final.pt")
        metrics_path.touch()
        return final

    with open(metrics_path, mode) as metrics_file:
        for epoch in range(trainer.epoch, cfg.epochs):
            trainer.epoch = epoch
            trainer.set_lr(lr_schedule(epoch, cfg))
            for _ in range(steps_per_epoch):
                batch = trainer.next_batch()
                record = trainer.train_step(batch)
                trainer.history.append(record)
                metrics_file.write(json.dumps(record, sort_keys=True) + "\n")
                trainer.step += 1
                if log_every and trainer.step % log_every == 0:
                    log.info(
                        "step %d epoch %d loss_g %.4f loss_d %.4f",
                        record["step"], epoch, record["loss_g"], record["loss_d"],
                    )
            trainer.epoch = epoch + 1
            if cfg.checkpoint_interval and (epoch + 1) % cfg.checkpoint_interval == 0:
                trainer.save(out_dir / f"checkpoint-{epoch + 1:04d}.pt")
    return trainer.save(out_dir / "checkpoint-final.pt")
