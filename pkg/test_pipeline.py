#!/usr/bin/env python3
"""Tests for the coarse stage, the refinement stage and the full pipeline."""

import math
import tempfile
import unittest
from pathlib import Path
from unittest import mock

import numpy as np
import torch
from torch import nn

from engine.bundle import bundle_from_weights
from engine.errors import ConfigurationError
from engine.landmarks import Landmark, LandmarkSet, encode_landmarks, labels_to_probabilities, read_landmarks
from engine.model_zoo import ModelWeights, VoxelClassifierSpec, build_model
from engine.pipeline import CoarseOutput, run_coarse, run_full, run_refinement
from engine.provenance import Provenance
from engine.volume import Volume, read_volume, resample
from test_trainer import tiny_config, toy_case, toy_manifest


class ConstantModel(nn.Module):
    """Voxel classifier stand-in that favours one class everywhere."""

    def __init__(self, num_classes, favoured=0):
        super().__init__()
        self.spec = VoxelClassifierSpec(num_classes, depth=2, base_channels=1)
        self.favoured = favoured

    def forward(self, x):
        b, _, *spatial = x.shape
        logits = torch.zeros(b, self.spec.num_classes, *spatial)
        logits[:, self.favoured] = 5.0
        return logits


def absent(name, group='bone'):
    return Landmark(name, group, (math.nan,) * 3, False)


class PipelineTestCase(unittest.TestCase):
    def setUp(self):
        self.config = tiny_config()
        self.manifest = toy_manifest()
        self.image, self.mask, self.landmarks = toy_case(0)
        coarse_image = resample(self.image, 2.0, 'linear')
        self.coarse = CoarseOutput(coarse_image, resample(self.mask, 2.0, 'nearest'), self.landmarks)

    def refine(self, coarse, provenance=None):
        return run_refinement(self.image, coarse, ConstantModel(3, 1), ConstantModel(2), self.manifest,
                              self.config, provenance=provenance)


class TestCoarseStage(PipelineTestCase):
    def test_all_models_share_one_input(self):
        seen = []
        bone = self.landmarks.group('bone')

        def fake_predict(model, x):
            seen.append(x)
            n = model.spec.num_classes
            if n == 4:
                return labels_to_probabilities(encode_landmarks(bone, x.grid, 1), 4)
            return labels_to_probabilities(Volume(np.zeros(x.shape, dtype=np.uint8), x.spacing, x.origin, 'label'), n)

        with mock.patch('engine.pipeline.predict_volume', side_effect=fake_predict):
            out = run_coarse(self.image, ConstantModel(3), ConstantModel(4), ConstantModel(2), self.manifest,
                             self.config)
        self.assertEqual(len(seen), 3)
        for x in seen[1:]:
            self.assertIs(x, seen[0])
        self.assertEqual(seen[0].spacing, (2.0, 2.0, 2.0))
        self.assertEqual(out.landmarks.names, ['a_left', 'a_right', 'anchor', 't1', 'f1'])
        self.assertFalse(out.landmarks['t1'].present)
        self.assertFalse(out.landmarks['f1'].present)
        for lm in bone:
            np.testing.assert_array_less(np.abs(np.subtract(out.landmarks[lm.name].position, lm.position)), 1.0 + 1e-9)

    def test_wrong_class_count_is_rejected(self):
        with self.assertRaises(ConfigurationError):
            run_coarse(self.image, ConstantModel(3), ConstantModel(3), ConstantModel(2), self.manifest, self.config)


class TestRefinementStage(PipelineTestCase):
    def test_healthy_plan(self):
        prov = Provenance()
        out = self.refine(self.coarse, prov)
        self.assertFalse(out.degraded)
        self.assertEqual(out.plan.roi_count, {'global': 1, 'thin_bone': 2, 'tooth': 1})
        self.assertEqual(out.plan.skipped, ())
        self.assertTrue(out.final_mask.grid.same_as(self.image.grid))
        self.assertTrue(np.any(out.final_mask.data == 1))
        self.assertFalse(any(w['module'] == 'pipeline' for w in prov.warnings))
        # the tooth model never fires
        self.assertFalse(out.tooth_landmarks.present.any())

    def test_empty_coarse_mask_degrades(self):
        empty = CoarseOutput(self.coarse.image, self.coarse.mask.with_data(np.zeros(self.coarse.mask.shape)),
                             self.landmarks)
        out = self.refine(empty)
        self.assertTrue(out.degraded)
        self.assertIsNone(out.plan.global_roi)
        self.assertEqual(out.final_mask.shape, self.image.shape)
        self.assertFalse(out.final_mask.data.any())

    def test_missing_landmarks_skip_their_rois(self):
        lms = self.landmarks.updated(LandmarkSet([absent('a_right'), absent('anchor')]))
        prov = Provenance()
        out = self.refine(CoarseOutput(self.coarse.image, self.coarse.mask, lms), prov)
        self.assertTrue(out.degraded)
        self.assertEqual(out.plan.roi_count, {'global': 1, 'thin_bone': 1, 'tooth': 0})
        self.assertEqual(set(out.plan.skipped), {'a_right', 'tooth'})
        self.assertEqual(len([w for w in prov.warnings if w['module'] == 'pipeline']), 2)


class TestFullPipeline(PipelineTestCase):
    def bundle(self):
        def weights(stage, classes, spacing, seed):
            spec = VoxelClassifierSpec(classes, depth=2, base_channels=2)
            return ModelWeights.from_model(build_model(spec, seed), stage, spacing=(spacing,) * 3)

        return bundle_from_weights({
            'coarse_seg': weights('coarse-seg', 3, 2.0, 1),
            'bone_det': weights('bone-det', 4, 2.0, 2),
            'face_det': weights('face-det', 2, 2.0, 3),
            'refine_seg': weights('refine-seg', 3, 1.0, 4),
            'tooth_det': weights('tooth-det', 2, 1.0, 5),
        }, self.manifest, self.config)

    def test_repeated_runs_write_identical_files(self):
        bundle = self.bundle()
        first = run_full(self.image, bundle)
        second = run_full(self.image, bundle)
        np.testing.assert_array_equal(first.final_mask.data, second.final_mask.data)
        self.assertEqual(first.landmarks, second.landmarks)
        self.assertEqual(len(first.landmarks), self.manifest.size)
        self.assertEqual(first.stage_provenance['landmark_count'], 5)
        self.assertIn('coarse', first.stage_provenance['timings_s'])
        self.assertIn('refinement', first.stage_provenance['timings_s'])
        with tempfile.TemporaryDirectory() as tmp:
            a = first.write(Path(tmp) / 'a')
            b = second.write(Path(tmp) / 'b')
            for key in ('mask', 'landmarks'):
                self.assertEqual(a[key].read_bytes(), b[key].read_bytes())
            self.assertTrue(read_volume(a['mask']).grid.same_as(self.image.grid))
            self.assertEqual(len(read_landmarks(a['landmarks'])), 5)

    def test_spacing_mismatch_is_rejected(self):
        bundle = self.bundle()
        config = tiny_config()
        config = config.model_copy(update={'data': config.data.model_copy(update={'refine_spacing': 0.5})})
        with self.assertRaises(ConfigurationError):
            run_full(self.image, bundle, config)


if __name__ == '__main__':
    unittest.main()
