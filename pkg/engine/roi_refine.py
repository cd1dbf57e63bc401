"""
Refinement ROIs, patch-based high resolution inference and the merge back onto
the original image grid.
"""

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch

from engine.errors import EmptyMaskError, GeometryMismatchError, InvalidArgumentError, MissingLandmarkError, ShapeError
from engine.landmarks import LandmarkSet
from engine.provenance import Provenance, warn
from engine.volume import GridLike, RoiBox, Volume, as_grid, paste_into_reference
from utils.logger import get_logger

logger = get_logger()

MERGE_RULES = ('precedence', 'probability')


@dataclass(frozen=True)
class RoiPlan:
    """The refinement crops of one case.

    `thin_bone_rois` holds (landmark name, box) per side that could be placed;
    a side whose landmark is missing is listed in `skipped` instead.
    """
    global_roi: Optional[RoiBox]
    thin_bone_rois: Tuple[Tuple[str, RoiBox], ...] = ()
    tooth_roi: Optional[RoiBox] = None
    skipped: Tuple[str, ...] = field(default_factory=tuple)

    @property
    def roi_count(self) -> dict:
        return {
            'global': int(self.global_roi is not None),
            'thin_bone': len(self.thin_bone_rois),
            'tooth': int(self.tooth_roi is not None),
        }

    def to_dict(self) -> dict:
        return {
            'global_roi': None if self.global_roi is None else self.global_roi.to_dict(),
            'thin_bone_rois': {name: roi.to_dict() for name, roi in self.thin_bone_rois},
            'tooth_roi': None if self.tooth_roi is None else self.tooth_roi.to_dict(),
            'skipped': list(self.skipped),
            'counts': self.roi_count,
        }

    @classmethod
    def from_dict(cls, d: dict) -> 'RoiPlan':
        return cls(
            global_roi=None if d.get('global_roi') is None else RoiBox.from_dict(d['global_roi']),
            thin_bone_rois=tuple((n, RoiBox.from_dict(r)) for n, r in d.get('thin_bone_rois', {}).items()),
            tooth_roi=None if d.get('tooth_roi') is None else RoiBox.from_dict(d['tooth_roi']),
            skipped=tuple(d.get('skipped', ())),
        )


def write_roi_plan(plan: RoiPlan, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(plan.to_dict(), indent=2) + '\n', encoding='utf-8')


def compute_global_roi(coarse_mask: Volume, margin_mm: float = 5.0, target_spacing=0.4,
                       clip_to: GridLike = None) -> RoiBox:
    """Bounding box of every foreground voxel, grown by `margin_mm` and clipped.

    The box is clipped to the extent of `clip_to` (the original image) or, when
    not given, to the mask's own extent.
    """
    if margin_mm < 0:
        raise InvalidArgumentError(f'margin must be >= 0, got {margin_mm}')
    fg = np.argwhere(coarse_mask.data > 0)
    if fg.size == 0:
        raise EmptyMaskError('coarse mask has no foreground voxels')
    grid = coarse_mask.grid
    half = np.asarray(grid.spacing) / 2.0
    lower = grid.voxel_to_world(fg.min(axis=0)) - half - margin_mm
    upper = grid.voxel_to_world(fg.max(axis=0)) + half + margin_mm
    bounds = as_grid(clip_to) if clip_to is not None else grid
    lower = np.maximum(lower, bounds.lower_edge)
    upper = np.minimum(upper, bounds.upper_edge)
    if np.any(upper <= lower):
        raise EmptyMaskError('coarse foreground lies outside the image extent')
    return RoiBox(tuple(lower), tuple(upper), target_spacing)


def compute_thin_bone_roi(lms: LandmarkSet, name: str, half_extent_mm=(15.0, 15.0, 15.0),
                          target_spacing=0.4) -> RoiBox:
    lm = lms.get(name)
    if lm is None or not lm.present:
        raise MissingLandmarkError([name])
    p = np.asarray(lm.position)
    h = np.broadcast_to(np.asarray(half_extent_mm, dtype=np.float64), (3,))
    return RoiBox(tuple(p - h), tuple(p + h), target_spacing)


def compute_thin_bone_rois(lms: LandmarkSet, pair_names: Sequence[str], half_extent_mm=(15.0, 15.0, 15.0),
                           target_spacing=0.4) -> List[RoiBox]:
    """One box per (left, right) landmark, centred on it with the same half extent."""
    if len(pair_names) != 2:
        raise InvalidArgumentError(f'thin-bone ROIs need a (left, right) pair, got {list(pair_names)}')
    missing = [n for n in pair_names if lms.get(n) is None or not lms.get(n).present]
    if missing:
        raise MissingLandmarkError(missing)
    return [compute_thin_bone_roi(lms, n, half_extent_mm, target_spacing) for n in pair_names]


def compute_tooth_roi(lms: LandmarkSet, anchor_names: Sequence[str], patch_extent_mm=(25.6, 25.6, 25.6),
                      target_spacing=0.8) -> RoiBox:
    """Fixed-size box centred at the centroid of the present anchor landmarks."""
    present = [lms.get(n) for n in anchor_names if lms.get(n) is not None and lms.get(n).present]
    if not present:
        raise MissingLandmarkError(list(anchor_names))
    center = np.mean([lm.position for lm in present], axis=0)
    return RoiBox.around(center, patch_extent_mm, target_spacing)


def tile_starts(n: int, patch: int, stride: int) -> List[int]:
    """Start indices covering [0, n) with windows of `patch`; the last one is flush with the end."""
    if n <= patch:
        return [0]
    starts = list(range(0, n - patch + 1, stride))
    if starts[-1] != n - patch:
        starts.append(n - patch)
    return starts


def triangular_weights(patch: Sequence[int]) -> np.ndarray:
    """Separable centre-peaked blending weight, strictly positive at the borders."""
    axes = []
    for p in patch:
        i = np.arange(p, dtype=np.float64)
        axes.append(1.0 - np.abs(2.0 * (i + 0.5) / p - 1.0))
    return (axes[0][:, None, None] * axes[1][None, :, None] * axes[2][None, None, :]).astype(np.float32)


def _check_patch(model, patch: Tuple[int, int, int]):
    check = getattr(model, 'check_input', None)
    if check is not None:
        check(patch)
    if any(p < 1 for p in patch):
        raise ShapeError(f'patch extent must be positive, got {patch}')


@torch.no_grad()
def sliding_window_infer(model, volume: Volume, patch_extent=(48, 48, 48), overlap_fraction: float = 0.5,
                         provenance: Provenance = None) -> Volume:
    """Per-class probabilities over `volume` from overlapping patch predictions.

    Patches are visited in row-major tile order; each patch's softmax output is
    weighted by `triangular_weights` and the weighted sum is normalised per
    voxel.
    """
    if not 0.0 <= overlap_fraction < 1.0:
        raise InvalidArgumentError(f'overlap fraction must be in [0, 1), got {overlap_fraction}')
    patch = tuple(int(p) for p in np.broadcast_to(np.asarray(patch_extent), (3,)))
    _check_patch(model, patch)
    if hasattr(model, 'eval'):
        model.eval()
    shape = volume.shape
    data = volume.data.astype(np.float32)
    if any(n < p for n, p in zip(shape, patch)):
        warn(provenance, 'roi_refine',
             f'patch {patch} larger than volume {shape}; using a zero-padded patch along the short axes')
        data = np.pad(data, [(0, max(p - n, 0)) for n, p in zip(shape, patch)])
    padded = data.shape
    strides = [max(1, int(p * (1.0 - overlap_fraction))) for p in patch]
    starts = [tile_starts(n, p, s) for n, p, s in zip(padded, patch, strides)]
    weight = triangular_weights(patch)
    acc = None
    wsum = np.zeros(padded, dtype=np.float32)
    for sx, sy, sz in itertools.product(*starts):
        sl = (slice(sx, sx + patch[0]), slice(sy, sy + patch[1]), slice(sz, sz + patch[2]))
        x = torch.from_numpy(np.ascontiguousarray(data[sl]))[None, None]
        probs = torch.softmax(model(x).float(), dim=1)[0].numpy()
        if acc is None:
            acc = np.zeros((probs.shape[0],) + padded, dtype=np.float32)
        acc[(slice(None),) + sl] += probs * weight
        wsum[sl] += weight
    out = acc / wsum
    out = out[:, :shape[0], :shape[1], :shape[2]]
    return Volume(np.ascontiguousarray(out), volume.spacing, volume.origin, 'probability')


def probabilities_to_labels(prob: Volume) -> Volume:
    labels = np.argmax(prob.data, axis=0).astype(np.uint8)
    return Volume(labels, prob.spacing, prob.origin, 'label')


def _region(sub: Volume, reference: GridLike) -> np.ndarray:
    src = sub.grid
    return as_grid(reference).box_mask(src.lower_edge, src.upper_edge)


def merge_refined_masks(coarse_upsampled: Optional[Volume], global_refined: Optional[Volume],
                        thin_refined: Sequence[Volume], reference: GridLike, rule: str = 'precedence',
                        global_probs: Optional[Volume] = None,
                        thin_probs: Sequence[Volume] = ()) -> Volume:
    """Combine refined sub-volumes on the reference grid.

    precedence: thin-bone labels inside a thin ROI, else global labels inside
    the global ROI, else 0. probability: wherever ROIs overlap, the label with
    the highest summed probability wins (needs the probability volumes).
    Without a global refinement the coarse upsampled mask is the base.
    """
    if rule not in MERGE_RULES:
        raise InvalidArgumentError(f'unknown merge rule {rule!r}')
    ref = as_grid(reference)
    if global_refined is None:
        if coarse_upsampled is None:
            return Volume(np.zeros(ref.shape, dtype=np.uint8), ref.spacing, ref.origin, 'label')
        if not coarse_upsampled.grid.same_as(ref):
            raise GeometryMismatchError('coarse upsampled mask is not on the reference grid')
        base = coarse_upsampled.data.astype(np.uint8)
    else:
        base = np.zeros(ref.shape, dtype=np.uint8)
        region = _region(global_refined, ref)
        pasted = paste_into_reference(global_refined, ref).data
        base[region] = pasted[region]
    if rule == 'precedence' or not thin_refined:
        for sub in thin_refined:
            region = _region(sub, ref)
            pasted = paste_into_reference(sub, ref).data
            base[region] = pasted[region]
        return Volume(base, ref.spacing, ref.origin, 'label')

    probs = [p for p in ([global_probs] if global_probs is not None else []) + list(thin_probs)]
    if len(probs) != len(thin_refined) + (global_probs is not None):
        raise InvalidArgumentError('probability merge needs one probability volume per refined mask')
    score = None
    covered = np.zeros(ref.shape, dtype=bool)
    for p in probs:
        region = _region(p, ref)
        pasted = paste_into_reference(p, ref).data
        pasted = np.where(region[None], pasted, 0.0)
        score = pasted if score is None else score + pasted
        covered |= region
    fused = np.argmax(score, axis=0).astype(np.uint8)
    base[covered] = fused[covered]
    return Volume(base, ref.spacing, ref.origin, 'label')
