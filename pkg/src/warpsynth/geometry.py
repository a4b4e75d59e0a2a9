"""Differentiable geometry core: regular grids, (mask-aware) cosine similarity,
similarity-weighted sampling grids, and bilinear warping.

Coordinate convention: normalized (u, v) in [-1, 1]^2 with align-corners
semantics — the grid endpoints map to the centers of the border pixels. Grids
are tensors of shape (H, W, 2) with u (= x) first.

Row/column convention: ``cosine_similarity(a, b)`` produces S[p, q] = affinity
of position p in map ``a`` with position q in map ``b``; the weighted grid is
row-softmaxed, so ``a`` is the map the output grid is indexed by (the driving
features, when warping subject features to the driving pose).
"""

import warnings
from dataclasses import dataclass
from typing import Optional

import torch

COSINE_EPS = 1e-8
# Unnormalized sample coordinates within SNAP_EPS of an integer are snapped to
# it (straight-through, gradients untouched) so that grids meant to address
# pixel centers exactly survive float32 normalized storage bit-for-bit.
SNAP_EPS = 1e-4


@dataclass
class SimilarityMatrix:
    values: torch.Tensor                       # (P, Q)
    valid_mask: Optional[torch.Tensor] = None  # (P, Q) bool; None = all valid
    computed_entries: int = 0

    def __post_init__(self):
        if self.computed_entries == 0:
            self.computed_entries = self.values.numel()


def regular_grid(h, w, dtype=torch.float32, device=None):
    """Regular align-corners grid: coords[i, j] = (-1 + 2j/(W-1), -1 + 2i/(H-1));
    a size-1 dimension collapses to coordinate 0."""
    if h < 1 or w < 1:
        raise ValueError("grid must have at least one cell per dimension")
    us = torch.linspace(-1.0, 1.0, w, dtype=dtype, device=device) if w > 1 \
        else torch.zeros(1, dtype=dtype, device=device)
    vs = torch.linspace(-1.0, 1.0, h, dtype=dtype, device=device) if h > 1 \
        else torch.zeros(1, dtype=dtype, device=device)
    vv, uu = torch.meshgrid(vs, us, indexing="ij")
    return torch.stack([uu, vv], dim=-1)


def _flatten_positions(features):
    # (C, H, W) -> (H*W, C)
    c = features.shape[0]
    return features.reshape(c, -1).transpose(0, 1).contiguous()


def _pairwise_cosine(pa, pb, na, nb, eps, row_chunk=64):
    """Cosine similarity block between position lists.

    Computed as broadcast-multiply + sum over channels rather than a gemm:
    the per-entry reduction order then depends only on the channel count, so
    sub-blocks are bitwise identical to the corresponding entries of the full
    matrix (mask-aware and full paths must agree exactly).
    """
    blocks = []
    for start in range(0, pa.shape[0], row_chunk):
        rows = pa[start:start + row_chunk]
        num = (rows.unsqueeze(1) * pb.unsqueeze(0)).sum(-1)
        denom = na[start:start + row_chunk].unsqueeze(1) * nb.unsqueeze(0) + eps
        blocks.append((num / denom).clamp(-1.0, 1.0))
    return torch.cat(blocks, dim=0)


def cosine_similarity(a, b, eps=COSINE_EPS):
    """Full pairwise cosine similarity between two feature maps.

    S[p, q] = <a_p, b_q> / (|a_p| |b_q| + eps), clamped into [-1, 1] to absorb
    float roundoff; eps keeps zero-feature positions finite.
    """
    if a.shape != b.shape:
        raise ValueError(f"feature shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    pa = _flatten_positions(a)
    pb = _flatten_positions(b)
    values = _pairwise_cosine(pa, pb, pa.norm(dim=1), pb.norm(dim=1), eps)
    return SimilarityMatrix(values, None, values.numel())


def _inside_indices(h, w, box, device):
    """Flat position indices inside an inclusive cell-index bounding box."""
    ii, jj = torch.meshgrid(
        torch.arange(h, device=device), torch.arange(w, device=device), indexing="ij"
    )
    inside = (
        (jj >= box.x_min) & (jj <= box.x_max) & (ii >= box.y_min) & (ii <= box.y_max)
    ).reshape(-1)
    idx = torch.arange(h * w, device=device)
    return idx[inside], idx[~inside]


def mask_aware_similarity(a, b, box_a, box_b, eps=COSINE_EPS):
    """Cosine similarity restricted to matching bbox partitions.

    Entries are computed only for (p inside box_a and q inside box_b) or
    (p outside box_a and q outside box_b); cross-partition entries carry
    valid_mask False and are never computed. Falls back to the full similarity
    (with a warning) when a partition would leave some row with no valid entry.
    Bounding boxes are inclusive cell-index boxes at feature resolution.
    """
    if a.shape != b.shape:
        raise ValueError(f"feature shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    _, h, w = a.shape
    in_a, out_a = _inside_indices(h, w, box_a, a.device)
    in_b, out_b = _inside_indices(h, w, box_b, b.device)
    degenerate = (
        len(in_a) == 0
        or len(in_b) == 0
        or (len(out_a) > 0 and len(out_b) == 0)
    )
    if degenerate:
        warnings.warn("degenerate bbox partition; falling back to full similarity")
        return cosine_similarity(a, b, eps)

    pa = _flatten_positions(a)
    pb = _flatten_positions(b)
    na = pa.norm(dim=1)
    nb = pb.norm(dim=1)
    p_total = pa.shape[0]
    values = pa.new_zeros(p_total, p_total)
    valid = torch.zeros(p_total, p_total, dtype=torch.bool, device=a.device)
    computed = 0
    for rows, cols in ((in_a, in_b), (out_a, out_b)):
        if len(rows) == 0 or len(cols) == 0:
            continue
        block = _pairwise_cosine(pa[rows], pb[cols], na[rows], nb[cols], eps)
        grid_r, grid_c = torch.meshgrid(rows, cols, indexing="ij")
        values = values.index_put((grid_r, grid_c), block)
        valid[grid_r, grid_c] = True
        computed += len(rows) * len(cols)
    return SimilarityMatrix(values, valid, computed)


def weighted_grid(sim, grid, tau=100.0):
    """Softmax-weight the regular grid by affinities: per row p,
    G'[p] = sum_q softmax_q(tau * S[p, q]) * G[q] over valid entries only."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    h, w = grid.shape[:2]
    coords = grid.reshape(-1, 2)
    values = sim.values
    if values.shape[0] != coords.shape[0]:
        raise ValueError(
            f"similarity rows ({values.shape[0]}) != grid positions ({coords.shape[0]})"
        )
    logits = values * tau
    if sim.valid_mask is not None:
        if not bool(sim.valid_mask.any(dim=1).all()):
            raise ValueError("similarity row with zero valid entries")
        logits = logits.masked_fill(~sim.valid_mask, float("-inf"))
    logits = logits - logits.max(dim=1, keepdim=True).values
    weights = torch.exp(logits)
    out = (weights @ coords.to(weights.dtype)) / weights.sum(dim=1, keepdim=True)
    return out.reshape(h, w, 2)


def _snap_to_integers(t, eps=SNAP_EPS):
    # forward: snapped where within eps of an integer; backward: identity.
    # (t - t.detach()) is exactly zero elementwise, so the forward value is
    # bitwise `snapped`; grouping matters, (snapped + t) - t would reround.
    rounded = t.round()
    snapped = torch.where((t - rounded).abs() < eps, rounded, t)
    return snapped.detach() + (t - t.detach())


def _unnormalize(coord, extent):
    # [-1, 1] -> [0, extent-1] pixel units (align corners); extent 1 -> center
    if extent == 1:
        return torch.zeros_like(coord)
    return (coord + 1.0) * ((extent - 1) / 2.0)


def warp_features(features, grid):
    """Bilinear sampling of (C, H, W) features at grid coordinates.

    Differentiable in both arguments; out-of-range coordinates clamp to the
    border. Coordinates that address a pixel center exactly (up to float32
    storage error) reproduce that pixel bit-for-bit.
    """
    c, h, w = features.shape
    gh, gw = grid.shape[:2]
    x = _snap_to_integers(_unnormalize(grid[..., 0], w)).clamp(0, w - 1)
    y = _snap_to_integers(_unnormalize(grid[..., 1], h)).clamp(0, h - 1)
    x0 = x.floor()
    y0 = y.floor()
    fx = (x - x0).to(features.dtype)
    fy = (y - y0).to(features.dtype)
    ix0 = x0.long().clamp(0, w - 1)
    iy0 = y0.long().clamp(0, h - 1)
    ix1 = (ix0 + 1).clamp(max=w - 1)
    iy1 = (iy0 + 1).clamp(max=h - 1)

    flat = features.reshape(c, h * w)
    def gather(iy, ix):
        idx = (iy * w + ix).reshape(-1)
        return flat.index_select(1, idx).reshape(c, gh, gw)

    v00 = gather(iy0, ix0)
    v01 = gather(iy0, ix1)
    v10 = gather(iy1, ix0)
    v11 = gather(iy1, ix1)
    return (
        v00 * (1 - fx) * (1 - fy)
        + v01 * fx * (1 - fy)
        + v10 * (1 - fx) * fy
        + v11 * fx * fy
    )


def upsample_grid(grid, factor):
    """Bilinearly upsample a (h, w, 2) grid by an integer factor in normalized
    coordinates (align corners), so each source cell moves as a coherent patch."""
    g = grid.permute(2, 0, 1).unsqueeze(0)
    up = torch.nn.functional.interpolate(
        g, scale_factor=factor, mode="bilinear", align_corners=True
    )
    return up.squeeze(0).permute(1, 2, 0)


def warp_image_patchwise(image, grid):
    """Warp a full-resolution image with a feature-resolution grid by first
    upsampling the grid; image size must be an integer multiple of grid size."""
    _, h, w = image.shape
    gh, gw = grid.shape[:2]
    if h % gh != 0 or w % gw != 0 or h // gh != w // gw:
        raise ValueError(
            f"image size {(h, w)} is not an integer multiple of grid size {(gh, gw)}"
        )
    return warp_features(image, upsample_grid(grid, h // gh))
