"""
Two-stage inference: coarse joint segmentation / detection on a downsampled
image, then ROI refinement on crops of the original image.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from engine.bundle import ModelBundle
from engine.config import EngineConfig
from engine.errors import ConfigurationError, EmptyMaskError, EmptyRoiError, MissingLandmarkError
from engine.landmarks import LandmarkManifest, LandmarkSet, decode_landmarks, write_landmarks
from engine.model_zoo import check_classes, predict_volume
from engine.provenance import Provenance
from engine.roi_refine import (
    RoiPlan,
    compute_global_roi,
    compute_thin_bone_roi,
    compute_tooth_roi,
    merge_refined_masks,
    probabilities_to_labels,
    sliding_window_infer,
    write_roi_plan,
)
from engine.trainer import SEGMENTATION_CLASSES, model_input
from engine.volume import Volume, crop, paste_into_reference, resample, write_volume
from utils.logger import get_logger

logger = get_logger()

MASK_NAME = 'mask.nii'
LANDMARKS_NAME = 'landmarks.csv'
PROVENANCE_NAME = 'provenance.json'
ROI_PLAN_NAME = 'roi_plan.json'


@dataclass
class CoarseOutput:
    image: Volume
    mask: Volume
    landmarks: LandmarkSet


@dataclass
class RefinementOutput:
    final_mask: Volume
    tooth_landmarks: LandmarkSet
    plan: RoiPlan
    degraded: bool = False


@dataclass
class PipelineResult:
    final_mask: Volume
    landmarks: LandmarkSet
    stage_provenance: dict = field(default_factory=dict)
    degraded: bool = False

    def write(self, out_dir) -> Dict[str, Path]:
        """Mask (NIfTI), landmarks (CSV), provenance and ROI plan (JSON)."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = {
            'mask': out_dir / MASK_NAME,
            'landmarks': out_dir / LANDMARKS_NAME,
            'provenance': out_dir / PROVENANCE_NAME,
            'roi_plan': out_dir / ROI_PLAN_NAME,
        }
        write_volume(self.final_mask, paths['mask'])
        write_landmarks(self.landmarks, paths['landmarks'])
        paths['provenance'].write_text(json.dumps(self.stage_provenance, indent=2, sort_keys=True) + '\n',
                                       encoding='utf-8')
        if 'roi_plan' in self.stage_provenance:
            write_roi_plan(RoiPlan.from_dict(self.stage_provenance['roi_plan']), paths['roi_plan'])
        return paths


def run_coarse(image: Volume, seg_model, bone_detector, face_detector, manifest: LandmarkManifest,
               config: EngineConfig, provenance: Provenance = None) -> CoarseOutput:
    """Downsample once, run the three coarse models on it and decode the detectors.

    Tooth landmarks are left absent.
    """
    check_classes(seg_model, SEGMENTATION_CLASSES, 'segmentation')
    check_classes(bone_detector, manifest.num_classes('bone'), 'bone detector')
    check_classes(face_detector, manifest.num_classes('face'), 'face detector')
    coarse = resample(image, config.data.coarse_spacing, 'linear')
    x = model_input(coarse, config)
    mask = probabilities_to_labels(predict_volume(seg_model, x))
    st = config.stage
    bone = decode_landmarks(predict_volume(bone_detector, x), manifest.template('bone'),
                            st.decode_threshold, st.decode_method)
    face = decode_landmarks(predict_volume(face_detector, x), manifest.template('face'),
                            st.decode_threshold, st.decode_method)
    landmarks = manifest.template().updated(bone).updated(face)
    if provenance is not None:
        provenance.record('coarse_grid', {'shape': list(coarse.shape), 'spacing': list(coarse.spacing)})
        provenance.record('coarse_labels', sorted(int(v) for v in np.unique(mask.data)))
    return CoarseOutput(coarse, mask, landmarks)


def _refine_segment(model, image: Volume, roi, config: EngineConfig, provenance: Provenance):
    sub = model_input(crop(image, roi, 'linear'), config)
    probs = sliding_window_infer(model, sub, config.stage.refine_patch, config.stage.overlap, provenance)
    return probabilities_to_labels(probs), probs


def run_refinement(image: Volume, coarse: CoarseOutput, refine_model, tooth_model, manifest: LandmarkManifest,
                   config: EngineConfig, thin_model=None, provenance: Provenance = None) -> RefinementOutput:
    """ROI plan from the coarse outputs, high resolution segmentation and tooth detection.

    Reads only the original image, the coarse mask and the coarse landmarks.
    An empty coarse mask gives the nearest-upsampled coarse mask, flagged
    degraded. A missing thin-bone landmark skips that side; missing tooth
    anchors leave the teeth absent.
    """
    provenance = provenance or Provenance()
    check_classes(refine_model, SEGMENTATION_CLASSES, 'refinement')
    check_classes(tooth_model, manifest.num_classes('teeth'), 'tooth detector')
    thin_model = thin_model or refine_model
    check_classes(thin_model, SEGMENTATION_CLASSES, 'thin-bone refinement')
    data, stage = config.data, config.stage
    teeth = manifest.template('teeth')
    reference = image.grid

    try:
        global_roi = compute_global_roi(coarse.mask, stage.global_margin_mm, data.refine_spacing, clip_to=reference)
    except EmptyMaskError as e:
        provenance.warn('pipeline', f'refinement skipped: {e}; returning the upsampled coarse mask')
        fallback = paste_into_reference(coarse.mask, reference)
        plan = RoiPlan(None, skipped=('global', *manifest.thin_bone_pair, 'tooth'))
        return RefinementOutput(fallback, teeth, plan, degraded=True)

    degraded = False
    skipped: List[str] = []
    thin_rois = []
    for name in manifest.thin_bone_pair:
        try:
            thin_rois.append((name, compute_thin_bone_roi(coarse.landmarks, name, stage.thin_half_extent_mm,
                                                          data.refine_spacing)))
        except MissingLandmarkError as e:
            provenance.warn('pipeline', f'thin-bone ROI for {name} skipped: {e}')
            skipped.append(name)
            degraded = True
    try:
        tooth_roi = compute_tooth_roi(coarse.landmarks, manifest.tooth_anchors, stage.tooth_patch_extent_mm,
                                      data.tooth_spacing)
    except MissingLandmarkError as e:
        provenance.warn('pipeline', f'tooth ROI skipped: {e}; tooth landmarks reported absent')
        tooth_roi = None
        skipped.append('tooth')
        degraded = True

    global_labels, global_probs = _refine_segment(refine_model, image, global_roi, config, provenance)
    thin_labels, thin_probs, placed = [], [], []
    for name, roi in thin_rois:
        try:
            labels, probs = _refine_segment(thin_model, image, roi, config, provenance)
        except EmptyRoiError as e:
            provenance.warn('pipeline', f'thin-bone ROI for {name} skipped: {e}')
            skipped.append(name)
            degraded = True
            continue
        thin_labels.append(labels)
        thin_probs.append(probs)
        placed.append((name, roi))
    final = merge_refined_masks(None, global_labels, thin_labels, reference, rule=stage.merge_rule,
                                global_probs=global_probs, thin_probs=thin_probs)

    if tooth_roi is not None:
        try:
            patch = model_input(crop(image, tooth_roi, 'linear'), config)
            teeth = decode_landmarks(predict_volume(tooth_model, patch), teeth,
                                     stage.decode_threshold, stage.decode_method)
        except EmptyRoiError as e:
            provenance.warn('pipeline', f'tooth ROI skipped: {e}; tooth landmarks reported absent')
            skipped.append('tooth')
            tooth_roi = None
            degraded = True
    plan = RoiPlan(global_roi, tuple(placed), tooth_roi, tuple(skipped))
    return RefinementOutput(final, teeth, plan, degraded)


def _check_spacing(bundle: ModelBundle, key: str, expected: float):
    spacing = bundle.weights[key].spacing
    if spacing is not None and not np.allclose(spacing, expected, rtol=0, atol=1e-6):
        raise ConfigurationError(f'{key} was trained at {spacing} mm but the config asks for {expected} mm')


def run_full(image: Volume, bundle: ModelBundle, config: Optional[EngineConfig] = None,
             provenance: Provenance = None) -> PipelineResult:
    """Coarse then refinement stage, with per-stage timings and model checksums."""
    config = config or bundle.config
    provenance = provenance or Provenance()
    manifest = bundle.landmarks
    for key, spacing in (('coarse_seg', config.data.coarse_spacing), ('bone_det', config.data.coarse_spacing),
                         ('face_det', config.data.coarse_spacing), ('refine_seg', config.data.refine_spacing),
                         ('tooth_det', config.data.tooth_spacing)):
        _check_spacing(bundle, key, spacing)
    thin_model = bundle.model('thin_seg') if bundle.has('thin_seg') else None
    if thin_model is None:
        logger.debug('No thin_seg model in bundle; refine_seg serves the thin-bone ROIs')

    with provenance.timed('coarse'):
        coarse = run_coarse(image, bundle.model('coarse_seg'), bundle.model('bone_det'), bundle.model('face_det'),
                            manifest, config, provenance)
    with provenance.timed('refinement'):
        refined = run_refinement(image, coarse, bundle.model('refine_seg'), bundle.model('tooth_det'), manifest,
                                 config, thin_model=thin_model, provenance=provenance)
    landmarks = coarse.landmarks.updated(refined.tooth_landmarks)
    provenance.record('roi_plan', refined.plan.to_dict())
    provenance.record('model_checksums', dict(bundle.checksums))
    provenance.record('degraded', refined.degraded)
    provenance.record('landmark_count', len(landmarks))
    logger.info(f'Pipeline finished: {"degraded" if refined.degraded else "clean"}, '
                f'{int(np.count_nonzero(refined.final_mask.data))} foreground voxels, '
                f'{int(landmarks.present.sum())}/{len(landmarks)} landmarks present')
    return PipelineResult(refined.final_mask, landmarks, provenance.to_dict(), refined.degraded)
