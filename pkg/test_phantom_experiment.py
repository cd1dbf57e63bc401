#!/usr/bin/env python3
"""Tests for the phantom experiment's per-case scoring and acceptance checks."""

import tempfile
import unittest
from pathlib import Path
from unittest import mock

import phantom_experiment
from engine.bundle import bundle_from_weights
from engine.dataset import load_dataset_manifest
from engine.model_zoo import ModelWeights, VoxelClassifierSpec, build_model
from engine.pipeline import run_full
from test_trainer import make_toy_dataset, tiny_config, toy_manifest


def row(case_id, refined, coarse, rmse=1.0, tpr=100.0):
    return {
        'case_id': case_id,
        'inference_s': 1.0,
        'refined_dsc': {'midface': 0.95, 'mandible': 0.95},
        'coarse_dsc': {'midface': 0.92, 'mandible': 0.93},
        'thin_wall_dsc': {'refined': refined, 'coarse': coarse, 'gain': refined - coarse},
        'rmse': {'bone': rmse, 'face': rmse, 'teeth': rmse},
        'tpr': {'bone': tpr, 'face': tpr, 'teeth': tpr},
    }


class TestAcceptance(unittest.TestCase):
    def test_thin_wall_gain_must_hold_for_every_case(self):
        config = tiny_config()
        # mean gain 0.1 clears the bar, but the second case does not improve at all
        rows = [row('a', 0.9, 0.7), row('b', 0.8, 0.8)]
        gains = phantom_experiment.thin_wall_gains(rows)
        self.assertAlmostEqual(gains['mean'], 0.1)
        self.assertAlmostEqual(gains['min'], 0.0)
        self.assertEqual(set(gains['per_case']), {'a', 'b'})
        self.assertFalse(phantom_experiment.acceptance(rows, config)['thin_wall_gain'])

        rows = [row('a', 0.9, 0.84), row('b', 0.8, 0.72)]
        checks = phantom_experiment.acceptance(rows, config)
        self.assertTrue(checks['thin_wall_gain'])
        self.assertTrue(all(checks.values()), checks)

    def test_no_cases_never_pass(self):
        self.assertFalse(phantom_experiment.acceptance([], tiny_config())['thin_wall_gain'])
        self.assertIsNone(phantom_experiment.thin_wall_gains([])['mean'])


class TestEvaluateTestCase(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.root = Path(self.tmp.name)
        self.config = tiny_config()
        self.dataset = load_dataset_manifest(make_toy_dataset(self.root / 'toy'))

        def weights(stage, classes, spacing, seed):
            spec = VoxelClassifierSpec(classes, depth=2, base_channels=2)
            return ModelWeights.from_model(build_model(spec, seed), stage, spacing=(spacing,) * 3)

        self.bundle = bundle_from_weights({
            'coarse_seg': weights('coarse-seg', 3, 2.0, 1),
            'bone_det': weights('bone-det', 4, 2.0, 2),
            'face_det': weights('face-det', 2, 2.0, 3),
            'refine_seg': weights('refine-seg', 3, 1.0, 4),
            'tooth_det': weights('tooth-det', 2, 1.0, 5),
        }, toy_manifest(), self.config)

    def tearDown(self):
        self.tmp.cleanup()

    def test_scores_the_output_of_the_full_pipeline(self):
        entry = self.dataset.split('test')[0]
        out = self.root / 'pred' / entry.case_id
        with mock.patch('phantom_experiment.run_full', wraps=run_full) as full:
            result = phantom_experiment.evaluate_test_case(self.dataset, entry, self.bundle, self.config, out)
        full.assert_called_once()
        self.assertIs(full.call_args.args[1], self.bundle)
        self.assertTrue((out / 'mask.nii').exists())
        self.assertTrue((out / 'provenance.json').exists())
        thin = result['thin_wall_dsc']
        self.assertAlmostEqual(thin['gain'], thin['refined'] - thin['coarse'])
        self.assertEqual(result['metrics'].modality, entry.modality)
        self.assertEqual(result['metrics'].structures['midface']['dsc'], result['refined_dsc']['midface'])


if __name__ == '__main__':
    unittest.main()
