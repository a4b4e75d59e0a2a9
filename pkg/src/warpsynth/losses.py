"""Training objectives: LSGAN adversarial loss, perceptual loss against a
frozen feature stack, discriminator feature matching, warp-branch L1, optional
gradient-difference smoothness, and the weighted total."""

from dataclasses import dataclass

import torch
import torch.nn as nn


class TrainingDivergedError(RuntimeError):
    """Raised when a loss term goes non-finite."""


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 10.0       # perceptual
    beta: float = 10.0        # feature matching
    lam: float = 10.0         # transformation (warp) loss
    gdl_weight: float = 0.0   # gradient difference; 0 disables

    def __post_init__(self):
        if min(self.alpha, self.beta, self.lam, self.gdl_weight) < 0:
            raise ValueError("loss weights must be non-negative")


_IMAGENET_MEAN = (0.485, 0.456, 0.406)
_IMAGENET_STD = (0.229, 0.224, 0.225)


class FeatureExtractor(nn.Module):
    """Frozen multi-stage conv feature stack for perceptual distances.

    Uses the canonical five early stages of an ImageNet-pretrained VGG19 when
    torchvision weights are available; otherwise falls back to a fixed-seed
    random stack with the same layout. ``provenance`` records which one is in
    use so downstream reports can flag proxy metrics. Gradients flow to the
    inputs but never into the extractor weights.
    """

    _vgg_unavailable = False  # process-wide memo of a failed weight fetch

    def __init__(self, pretrained="auto", seed=0):
        super().__init__()
        self.pretrained = False
        self.provenance = f"random-stack-seed{seed}"
        stages = None
        if pretrained is True or (pretrained == "auto" and not type(self)._vgg_unavailable):
            try:
                stages = self._vgg19_stages()
                self.pretrained = True
                self.provenance = "imagenet-vgg19"
            except Exception:
                type(self)._vgg_unavailable = True
                if pretrained is True:
                    raise
        if stages is None:
            stages = self._random_stages(seed)
        self.stages = nn.ModuleList(stages)
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    @staticmethod
    def _vgg19_stages():
        from torchvision import models

        vgg = models.vgg19(weights=models.VGG19_Weights.IMAGENET1K_V1).features
        cuts = [(0, 2), (2, 7), (7, 12), (12, 21), (21, 30)]
        return [nn.Sequential(*[vgg[i] for i in range(a, b)]) for a, b in cuts]

    @staticmethod
    def _random_stages(seed):
        gen = torch.Generator().manual_seed(seed)
        widths = [3, 16, 32, 64, 64, 64]
        stages = []
        for i, (w_in, w_out) in enumerate(zip(widths[:-1], widths[1:])):
            layers = []
            if i > 0:
                layers.append(nn.AvgPool2d(2, ceil_mode=True))
            conv = nn.Conv2d(w_in, w_out, 3, padding=1)
            with torch.no_grad():
                conv.weight.normal_(0.0, 0.2, generator=gen)
                conv.bias.zero_()
            layers += [conv, nn.ReLU(inplace=True)]
            stages.append(nn.Sequential(*layers))
        return stages

    def _normalize(self, x):
        if self.pretrained:
            mean = x.new_tensor(_IMAGENET_MEAN).view(1, 3, 1, 1)
            std = x.new_tensor(_IMAGENET_STD).view(1, 3, 1, 1)
            return (x - mean) / std
        return x * 2.0 - 1.0

    def forward(self, x):
        """[0, 1] RGB batch -> list of per-stage activations."""
        feats = []
        x = self._normalize(x)
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats

    def train(self, mode=True):  # stays frozen in eval mode
        return super().train(False)


def adversarial_loss(disc, fake, real, mask, role):
    """Least-squares GAN objective over the patch score map.

    discriminator role: 0.5 E[(D(real, mask) - 1)^2] + 0.5 E[D(fake, mask)^2]
    generator role:     0.5 E[(D(fake, mask) - 1)^2]
    The caller detaches ``fake`` for the discriminator update.
    """
    if role == "discriminator":
        pred_real, _ = disc(real, mask)
        pred_fake, _ = disc(fake, mask)
        return 0.5 * ((pred_real - 1.0) ** 2).mean() + 0.5 * (pred_fake ** 2).mean()
    if role == "generator":
        pred_fake, _ = disc(fake, mask)
        return 0.5 * ((pred_fake - 1.0) ** 2).mean()
    raise ValueError(f"unknown role {role!r}")


def perceptual_loss(extractor, fake, real):
    """Sum over stages of the per-element L1 distance between activations."""
    feats_fake = extractor(fake)
    with torch.no_grad():
        feats_real = extractor(real)
    loss = fake.new_zeros(())
    for ff, fr in zip(feats_fake, feats_real):
        loss = loss + (ff - fr).abs().mean()
    return loss


def feature_matching_loss(disc, fake, real, mask):
    """Per-element L1 between discriminator activations on fake vs real pairs;
    the real branch is detached (no gradient target)."""
    _, feats_fake = disc(fake, mask)
    with torch.no_grad():
        _, feats_real = disc(real, mask)
    loss = fake.new_zeros(())
    for ff, fr in zip(feats_fake, feats_real):
        loss = loss + (ff - fr).abs().mean()
    return loss


def transformation_loss(warped_frames, target):
    """Sum over the K warped subject frames of mean |warped - target|."""
    if len(warped_frames) == 0:
        raise ValueError("transformation loss needs at least one warped frame")
    loss = target.new_zeros(())
    for warped in warped_frames:
        if warped.shape != target.shape:
            raise ValueError(
                f"warped frame shape {tuple(warped.shape)} != target {tuple(target.shape)}"
            )
        loss = loss + (warped - target).abs().mean()
    return loss


def gradient_difference_loss(fake, real):
    """Mean | |grad fake| - |grad real| | with horizontal and vertical forward
    differences; invariant to constant intensity offsets."""
    dh_f = (fake[..., :, 1:] - fake[..., :, :-1]).abs()
    dh_r = (real[..., :, 1:] - real[..., :, :-1]).abs()
    dv_f = (fake[..., 1:, :] - fake[..., :-1, :]).abs()
    dv_r = (real[..., 1:, :] - real[..., :-1, :]).abs()
    return (dh_f - dh_r).abs().mean() + (dv_f - dv_r).abs().mean()


def total_generator_loss(parts, weights, cross_identity=False):
    """Weighted sum of the generator objectives.

    parts maps {"gan", "vgg", "fm", "tra", "gdl"} to scalars; missing parts
    count as zero. Cross-identity training keeps only the adversarial term.
    """
    for name, value in parts.items():
        value = value if torch.is_tensor(value) else torch.as_tensor(float(value))
        if not torch.isfinite(value).all():
            raise TrainingDivergedError(f"non-finite loss component {name!r}: {value}")
    if cross_identity:
        return _part(parts, "gan")
    return (
        _part(parts, "gan")
        + weights.alpha * _part(parts, "vgg")
        + weights.beta * _part(parts, "fm")
        + weights.lam * _part(parts, "tra")
        + weights.gdl_weight * _part(parts, "gdl")
    )


def _part(parts, name):
    value = parts.get(name, 0.0)
    return value if torch.is_tensor(value) else torch.tensor(float(value))
