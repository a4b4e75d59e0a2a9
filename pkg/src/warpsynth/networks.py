"""Neural components: image/mask encoders, fusion, decoder, patch discriminator,
and the dual-branch generator that wires warping and synthesis together."""

import os
import tempfile
from dataclasses import asdict, dataclass, field
from typing import Optional

import torch
import torch.nn as nn

from .geometry import (
    cosine_similarity,
    mask_aware_similarity,
    regular_grid,
    warp_features,
    warp_image_patchwise,
    weighted_grid,
)

CHECKPOINT_VERSION = 1

BRANCH_MODES = ("dual", "transform_only", "synth_only")
COMBINE_MODES = ("concat", "matting")


@dataclass
class GeneratorConfig:
    k: int = 3
    image_size: tuple = (256, 256)
    mask_channels: int = 1
    base_channels: int = 64
    branch_mode: str = "dual"
    combine_mode: str = "concat"
    use_coord_conv: bool = True
    tau: float = 100.0
    num_res_blocks: int = 9

    def __post_init__(self):
        self.image_size = tuple(self.image_size)
        h, w = self.image_size
        if h % 8 != 0 or w % 8 != 0:
            raise ValueError(f"image size {self.image_size} must be divisible by 8")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.branch_mode not in BRANCH_MODES:
            raise ValueError(f"branch_mode must be one of {BRANCH_MODES}")
        if self.combine_mode not in COMBINE_MODES:
            raise ValueError(f"combine_mode must be one of {COMBINE_MODES}")
        if self.tau <= 0:
            raise ValueError("tau must be positive")


@dataclass
class GeneratorOutput:
    frame: torch.Tensor                       # (B, 3, H, W) in [0, 1]
    warped_frames: list = field(default_factory=list)   # K x (B, 3, H, W)
    grids: list = field(default_factory=list)           # K x (B, hf, wf, 2)
    warped_features: Optional[torch.Tensor] = None      # (B, C, hf, wf)
    synth_features: Optional[torch.Tensor] = None


def init_gan_weights(module, std=0.02):
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.normal_(m.weight, 0.0, std)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
    return module


def append_coord_channels(x):
    """Append normalized (u, v) coordinate channels to a (B, C, H, W) tensor."""
    b, _, h, w = x.shape
    u = torch.linspace(-1.0, 1.0, w, dtype=x.dtype, device=x.device)
    v = torch.linspace(-1.0, 1.0, h, dtype=x.dtype, device=x.device)
    uu = u.view(1, 1, 1, w).expand(b, 1, h, w)
    vv = v.view(1, 1, h, 1).expand(b, 1, h, w)
    return torch.cat([x, uu, vv], dim=1)


class ResidualBlock(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.block = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1, padding_mode="reflect"),
            nn.InstanceNorm2d(channels),
            nn.ReLU(inplace=True),
            nn.Conv2d(channels, channels, 3, padding=1, padding_mode="reflect"),
            nn.InstanceNorm2d(channels),
        )

    def forward(self, x):
        return x + self.block(x)


def _down_block(in_ch, out_ch):
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, 3, stride=2, padding=1),
        nn.InstanceNorm2d(out_ch),
        nn.ReLU(inplace=True),
    )


class ImageEncoder(nn.Module):
    """Three stride-2 convolutions plus residual blocks; output is 1/8 res."""

    def __init__(self, in_channels, base_channels=64, num_res_blocks=9):
        super().__init__()
        c = base_channels
        self.down = nn.Sequential(
            _down_block(in_channels, c),
            _down_block(c, 2 * c),
            _down_block(2 * c, 4 * c),
        )
        self.blocks = nn.Sequential(*[ResidualBlock(4 * c) for _ in range(num_res_blocks)])
        self.out_channels = 4 * c

    def forward(self, x):
        return self.blocks(self.down(x))


class MaskEncoder(nn.Module):
    """Three stride-2 convolutions, no residual blocks (masks carry less)."""

    def __init__(self, in_channels, base_channels=64):
        super().__init__()
        c = base_channels
        self.down = nn.Sequential(
            _down_block(in_channels, c),
            _down_block(c, 2 * c),
            _down_block(2 * c, 4 * c),
        )
        self.out_channels = 4 * c

    def forward(self, x):
        return self.down(x)


class FusionNetwork(nn.Module):
    """One residual block + 1x1 convolution over concatenated (e_k, f)."""

    def __init__(self, feature_channels):
        super().__init__()
        self.net = nn.Sequential(
            ResidualBlock(2 * feature_channels),
            nn.Conv2d(2 * feature_channels, feature_channels, 1),
        )

    def forward(self, e, f):
        if e.shape[-2:] != f.shape[-2:]:
            raise ValueError(
                f"fusion inputs disagree spatially: {tuple(e.shape)} vs {tuple(f.shape)}"
            )
        return self.net(torch.cat([e, f], dim=1))


class MattingNetwork(nn.Module):
    """Fusion-like attention head emitting a per-position blend weight in [0, 1]."""

    def __init__(self, feature_channels):
        super().__init__()
        self.net = nn.Sequential(
            ResidualBlock(2 * feature_channels),
            nn.Conv2d(2 * feature_channels, 1, 1),
        )

    def forward(self, v_t, v_s):
        return torch.sigmoid(self.net(torch.cat([v_t, v_s], dim=1)))


class Decoder(nn.Module):
    """4 residual blocks, then three (nearest upsample + conv) stages back to
    full resolution; bounded RGB output via scaled tanh."""

    def __init__(self, in_channels, base_channels=64):
        super().__init__()
        c = base_channels
        self.blocks = nn.Sequential(*[ResidualBlock(in_channels) for _ in range(4)])
        ups = []
        widths = [in_channels, 4 * c, 2 * c, c]
        for w_in, w_out in zip(widths[:-1], widths[1:]):
            ups += [
                nn.Upsample(scale_factor=2, mode="nearest"),
                nn.Conv2d(w_in, w_out, 3, padding=1),
                nn.InstanceNorm2d(w_out),
                nn.ReLU(inplace=True),
            ]
        self.up = nn.Sequential(*ups)
        self.head = nn.Conv2d(c, 3, 7, padding=3, padding_mode="reflect")

    def forward(self, x):
        x = self.up(self.blocks(x))
        return (torch.tanh(self.head(x)) + 1.0) / 2.0


class PatchDiscriminator(nn.Module):
    """70x70 PatchGAN over channel-concatenated (frame, mask); exposes the four
    intermediate activations for the feature-matching loss."""

    def __init__(self, frame_channels=3, mask_channels=1, base_channels=64):
        super().__init__()
        c = base_channels
        in_ch = frame_channels + mask_channels
        self.stages = nn.ModuleList([
            nn.Sequential(nn.Conv2d(in_ch, c, 4, stride=2, padding=1),
                          nn.LeakyReLU(0.2, inplace=True)),
            nn.Sequential(nn.Conv2d(c, 2 * c, 4, stride=2, padding=1),
                          nn.InstanceNorm2d(2 * c), nn.LeakyReLU(0.2, inplace=True)),
            nn.Sequential(nn.Conv2d(2 * c, 4 * c, 4, stride=2, padding=1),
                          nn.InstanceNorm2d(4 * c), nn.LeakyReLU(0.2, inplace=True)),
            nn.Sequential(nn.Conv2d(4 * c, 8 * c, 4, stride=1, padding=1),
                          nn.InstanceNorm2d(8 * c), nn.LeakyReLU(0.2, inplace=True)),
        ])
        self.head = nn.Conv2d(8 * c, 1, 4, stride=1, padding=1)

    def forward(self, frame, mask):
        x = torch.cat([frame, mask], dim=1)
        features = []
        for stage in self.stages:
            x = stage(x)
            features.append(x)
        return self.head(x), features


class Generator(nn.Module):
    """Dual-branch generator: a warp branch driven by similarity-weighted
    sampling grids and a warp-free fusion branch, combined before decoding."""

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.cfg = cfg
        coord_extra = 2 if cfg.use_coord_conv else 0
        self.image_encoder = ImageEncoder(
            3 + cfg.mask_channels + coord_extra, cfg.base_channels, cfg.num_res_blocks
        )
        self.mask_encoder = MaskEncoder(
            cfg.mask_channels + coord_extra, cfg.base_channels
        )
        feat = self.image_encoder.out_channels
        if cfg.branch_mode in ("dual", "synth_only"):
            self.fusion = FusionNetwork(feat)
        else:
            self.fusion = None
        if cfg.branch_mode == "dual" and cfg.combine_mode == "matting":
            self.matting = MattingNetwork(feat)
        else:
            self.matting = None
        self.decoder = Decoder(2 * feat, cfg.base_channels)
        init_gan_weights(self)

    @property
    def uses_transform_branch(self):
        return self.cfg.branch_mode in ("dual", "transform_only")

    @property
    def uses_synthesis_branch(self):
        return self.cfg.branch_mode in ("dual", "synth_only")

    def _maybe_coords(self, x):
        return append_coord_channels(x) if self.cfg.use_coord_conv else x

    def encode_image(self, frames, masks):
        """(B, 3, H, W) frames + (B, Cm, H, W) masks -> (B, C, H/8, W/8)."""
        return self.image_encoder(self._maybe_coords(torch.cat([frames, masks], dim=1)))

    def encode_mask(self, masks):
        return self.mask_encoder(self._maybe_coords(masks))

    def _transform_branch(self, e, f, subject_frames, subject_boxes, driving_boxes):
        b, k = e.shape[:2]
        hf, wf = e.shape[-2:]
        factor = subject_frames.shape[-1] // wf
        base_grid = regular_grid(hf, wf, dtype=f.dtype, device=f.device)
        grids = []
        warped_feats = []
        warped_frames = []
        for ki in range(k):
            grid_b = []
            for bi in range(b):
                if subject_boxes is not None and driving_boxes is not None:
                    sim = mask_aware_similarity(
                        f[bi], e[bi, ki],
                        driving_boxes[bi].downsampled(factor),
                        subject_boxes[bi][ki].downsampled(factor),
                    )
                else:
                    sim = cosine_similarity(f[bi], e[bi, ki])
                grid_b.append(weighted_grid(sim, base_grid, self.cfg.tau))
            grid = torch.stack(grid_b)                                  # (B, hf, wf, 2)
            grids.append(grid)
            warped_feats.append(torch.stack(
                [warp_features(e[bi, ki], grid[bi]) for bi in range(b)]
            ))
            warped_frames.append(torch.stack(
                [warp_image_patchwise(subject_frames[bi, ki], grid[bi]) for bi in range(b)]
            ))
        v_t = torch.stack(warped_feats, dim=1).mean(dim=1)              # (B, C, hf, wf)
        return v_t, grids, warped_frames

    def _synthesis_branch(self, e, f):
        b, k = e.shape[:2]
        f_rep = f.unsqueeze(1).expand(-1, k, -1, -1, -1)
        fused = self.fusion(
            e.reshape(b * k, *e.shape[2:]), f_rep.reshape(b * k, *f.shape[1:])
        )
        return fused.reshape(b, k, *fused.shape[1:]).mean(dim=1)

    def forward(self, subject_frames, subject_masks, driving_mask,
                subject_boxes=None, driving_boxes=None):
        """subject_frames (B, K, 3, H, W), subject_masks (B, K, Cm, H, W),
        driving_mask (B, Cm, H, W); boxes are pixel-unit BoundingBoxes
        (per-sample list of per-frame boxes for the subject, per-sample for
        the driving mask) enabling mask-aware similarity."""
        b, k, _, h, w = subject_frames.shape
        if k != self.cfg.k:
            raise ValueError(f"generator configured for K={self.cfg.k}, got {k}")
        enc_in = torch.cat([subject_frames, subject_masks], dim=2)
        e = self.image_encoder(self._maybe_coords(enc_in.reshape(b * k, -1, h, w)))
        e = e.reshape(b, k, *e.shape[1:])
        f = self.encode_mask(driving_mask)

        v_t = v_s = None
        grids, warped_frames = [], []
        if self.uses_transform_branch:
            v_t, grids, warped_frames = self._transform_branch(
                e, f, subject_frames, subject_boxes, driving_boxes
            )
        if self.uses_synthesis_branch:
            v_s = self._synthesis_branch(e, f)

        if self.cfg.branch_mode == "dual":
            if self.matting is not None:
                alpha = self.matting(v_t, v_s)
                blended = alpha * v_t + (1.0 - alpha) * v_s
                decoder_in = torch.cat([blended, blended], dim=1)
            else:
                decoder_in = torch.cat([v_t, v_s], dim=1)
        elif self.cfg.branch_mode == "transform_only":
            decoder_in = torch.cat([v_t, v_t], dim=1)
        else:
            decoder_in = torch.cat([v_s, v_s], dim=1)

        return GeneratorOutput(
            frame=self.decoder(decoder_in),
            warped_frames=warped_frames,
            grids=grids,
            warped_features=v_t,
            synth_features=v_s,
        )


def crop_face_region(frames, centers, crop_size):
    """Fixed-size square crops (clamped to the image) around per-sample centers;
    used by the auxiliary face discriminator. centers: (B, 2) pixel (x, y)."""
    b, _, h, w = frames.shape
    side = min(crop_size, h, w)
    crops = []
    for bi in range(b):
        cx, cy = centers[bi]
        x0 = int(round(float(cx))) - side // 2
        y0 = int(round(float(cy))) - side // 2
        x0 = max(0, min(x0, w - side))
        y0 = max(0, min(y0, h - side))
        crops.append(frames[bi, :, y0:y0 + side, x0:x0 + side])
    return torch.stack(crops)


def save_checkpoint(path, generator, extra=None):
    """Atomic single-archive checkpoint: version tag + generator config +
    named parameter tensors (+ any trainer extras)."""
    payload = {
        "version": CHECKPOINT_VERSION,
        "generator_config": asdict(generator.cfg),
        "generator": generator.state_dict(),
    }
    if extra:
        payload.update(extra)
    path = str(path)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            torch.save(payload, f)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load_checkpoint(path):
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version!r}")
    return payload


def generator_from_checkpoint(payload_or_path):
    payload = payload_or_path
    if not isinstance(payload, dict):
        payload = load_checkpoint(payload_or_path)
    cfg = GeneratorConfig(**payload["generator_config"])
    gen = Generator(cfg)
    gen.load_state_dict(payload["generator"])
    gen.eval()
    return gen, cfg
