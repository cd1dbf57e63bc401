#!/usr/bin/env python3
"""Tests for the training loops, patch sampling and detector transfer."""

import tempfile
import unittest
from pathlib import Path
from unittest import mock

import numpy as np
import torch

from engine.config import parse_config
from engine.dataset import Case, CaseEntry, DatasetManifest, load_dataset_manifest, save_dataset_manifest
from engine.errors import ConfigurationError, DivergenceError, InvalidArgumentError, StructuralMismatchError
from engine.landmarks import Landmark, LandmarkManifest, LandmarkSet, save_landmark_manifest, write_landmarks
from engine.model_zoo import ModelWeights, VoxelClassifierSpec, build_model, transfer_init
from engine.provenance import Provenance
from engine.trainer import (
    PatchSampler,
    flip_batch,
    flip_permutation,
    group_landmarks,
    sample_refinement_patches,
    train_coarse_segmentation,
    train_landmark_detector,
    train_refinement_segmentation,
)
from engine.volume import Volume, write_volume

TOY_SPLITS = ('train', 'train', 'train', 'val', 'test')

TINY_CONFIG = {
    'data': {'coarse_spacing': 2.0, 'refine_spacing': 1.0, 'tooth_spacing': 1.0, 'sphere_radius': 1},
    'model': {'depth': 2, 'base_channels': 2},
    'train': {'epochs': 2, 'batch_size': 2, 'learning_rate': 0.01, 'patches_per_volume': 2,
              'validation_patches': 1},
    'stage': {'refine_patch': [8, 8, 8], 'global_margin_mm': 1.0, 'thin_half_extent_mm': [4.0, 4.0, 4.0],
              'tooth_patch_extent_mm': [8.0, 8.0, 8.0]},
}


def tiny_config(**train):
    raw = {k: dict(v) for k, v in TINY_CONFIG.items()}
    raw['train'].update(train)
    return parse_config(raw)


def toy_manifest() -> LandmarkManifest:
    return LandmarkManifest(bone=['a_left', 'a_right', 'anchor'], teeth=['t1'], face=['f1'],
                            thin_bone_pair=('a_left', 'a_right'), tooth_anchors=['anchor'],
                            flip_pairs=[('a_left', 'a_right')])


def toy_case(i: int):
    """16^3 volume at 1 mm: a midface block (1) above a mandible block (2)."""
    shift = i % 2
    mask = np.zeros((16, 16, 16), dtype=np.uint8)
    mask[3 + shift:13 + shift, 9:13, 8:13] = 1
    mask[4:12, 3:7, 2:6] = 2
    image = mask * 1000.0 + np.random.default_rng(i).normal(0.0, 50.0, mask.shape)
    landmarks = LandmarkSet([
        Landmark('a_left', 'bone', (3.0 + shift, 11.0, 10.0)),
        Landmark('a_right', 'bone', (12.0 + shift, 11.0, 10.0)),
        Landmark('anchor', 'bone', (8.0, 5.0, 4.0)),
        Landmark('t1', 'teeth', (8.0, 5.0, 6.0)),
        Landmark('f1', 'face', (8.0, 14.0, 10.0)),
    ])
    return (Volume(image.astype(np.float32), (1, 1, 1), (0, 0, 0)),
            Volume(mask, (1, 1, 1), (0, 0, 0), 'label'),
            landmarks)


def make_toy_dataset(root, splits=TOY_SPLITS, drop=None) -> Path:
    """Write a toy dataset under `root`; returns the manifest path.

    `drop` maps a case id to a landmark name left out of that case's file.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    save_landmark_manifest(toy_manifest(), root / 'landmarks.yaml')
    cases = []
    for i, split in enumerate(splits):
        case_id = f'toy_{i}'
        image, mask, landmarks = toy_case(i)
        if drop and case_id in drop:
            landmarks = LandmarkSet(lm for lm in landmarks if lm.name != drop[case_id])
        entry = CaseEntry(case_id=case_id, image=f'images/{case_id}.nii', mask=f'masks/{case_id}.nii',
                          landmarks=f'landmarks/{case_id}.csv', split=split)
        write_volume(image, root / entry.image)
        write_volume(mask, root / entry.mask)
        write_landmarks(landmarks, root / entry.landmarks)
        cases.append(entry)
    path = root / 'manifest.json'
    save_dataset_manifest(DatasetManifest(landmark_manifest='landmarks.yaml', cases=cases), path)
    return path


def same_tensors(a: ModelWeights, b: ModelWeights) -> bool:
    return a.tensors.keys() == b.tensors.keys() and all(torch.equal(a.tensors[k], b.tensors[k]) for k in a.tensors)


class ToyDatasetTestCase(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.root = Path(self.tmp.name)
        self.dataset = load_dataset_manifest(make_toy_dataset(self.root / 'toy'))

    def tearDown(self):
        self.tmp.cleanup()

    def coarse_source(self, depth=2):
        spec = VoxelClassifierSpec(3, depth=depth, base_channels=2)
        return ModelWeights.from_model(build_model(spec, seed=9), 'coarse-seg', spacing=(2.0, 2.0, 2.0))


class TestCoarseSegmentation(ToyDatasetTestCase):
    def test_training_is_deterministic(self):
        config = tiny_config()
        a = train_coarse_segmentation(self.dataset, config)
        b = train_coarse_segmentation(self.dataset, config)
        self.assertTrue(same_tensors(a.weights, b.weights))
        self.assertEqual(a.history, b.history)
        self.assertEqual(len(a.history), 2)
        self.assertEqual(a.weights.spacing, (2.0, 2.0, 2.0))

    def test_zero_learning_rate_keeps_initial_weights(self):
        config = tiny_config(learning_rate=0.0)
        result = train_coarse_segmentation(self.dataset, config)
        initial = ModelWeights.from_model(build_model(VoxelClassifierSpec(3, depth=2, base_channels=2), 0), 'init')
        self.assertTrue(same_tensors(result.weights, initial))

    def test_best_epoch_checkpoint(self):
        result = train_coarse_segmentation(self.dataset, tiny_config(epochs=3))
        scores = [row['val_dsc'] for row in result.history]
        self.assertEqual(result.best_epoch, int(np.argmax(scores)) + 1)
        self.assertEqual(result.weights.metadata['best_epoch'], result.best_epoch)
        shorter = train_coarse_segmentation(self.dataset, tiny_config(epochs=result.best_epoch))
        self.assertTrue(same_tensors(result.weights, shorter.weights))

    def test_empty_training_split(self):
        dataset = load_dataset_manifest(make_toy_dataset(self.root / 'test_only', splits=('test',) * 3))
        with self.assertRaises(ConfigurationError):
            train_coarse_segmentation(dataset, tiny_config())

    def test_non_finite_loss_stops_training(self):
        with mock.patch('engine.trainer.focal_loss', return_value=torch.tensor(float('nan'))):
            with self.assertRaises(DivergenceError) as ctx:
                train_coarse_segmentation(self.dataset, tiny_config())
        self.assertEqual(ctx.exception.batch_id, (1, 0))


class TestLandmarkDetector(ToyDatasetTestCase):
    def test_zero_epochs_returns_transfer_initialisation(self):
        source = self.coarse_source()
        result = train_landmark_detector(self.dataset, source, 'bone', tiny_config(epochs=0))
        expected, report = transfer_init(VoxelClassifierSpec(4, depth=2, base_channels=2), source, seed=0)
        self.assertTrue(same_tensors(result.weights, expected))
        self.assertEqual(result.history, [])
        self.assertEqual(result.weights.metadata['transfer']['reinitialized'], report.reinitialized)
        self.assertEqual(result.weights.metadata['landmarks'], ['a_left', 'a_right', 'anchor'])

    def test_transfer_needs_matching_depth(self):
        with self.assertRaises(StructuralMismatchError):
            train_landmark_detector(self.dataset, self.coarse_source(depth=3), 'bone', tiny_config())
        with self.assertRaises(ConfigurationError):
            train_landmark_detector(self.dataset, None, 'bone', tiny_config())

    def test_tooth_detector_trains_on_patches(self):
        result = train_landmark_detector(self.dataset, self.coarse_source(), 'teeth', tiny_config(epochs=1))
        self.assertEqual(result.weights.spec.num_classes, 2)
        self.assertEqual(result.weights.spacing, (1.0, 1.0, 1.0))
        self.assertEqual(result.weights.metadata['group'], 'teeth')
        self.assertIn('val_rmse', result.history[0])

    def test_missing_landmark_is_a_configuration_error(self):
        dataset = load_dataset_manifest(make_toy_dataset(self.root / 'dropped', drop={'toy_0': 'f1'}))
        with self.assertRaises(ConfigurationError):
            train_landmark_detector(dataset, None, 'face', tiny_config(), transfer=False)
        image, mask, landmarks = toy_case(0)
        case = Case('c', image, mask, LandmarkSet(lm for lm in landmarks if lm.name != 'anchor'))
        with self.assertRaises(ConfigurationError) as ctx:
            group_landmarks(case, toy_manifest(), 'bone')
        self.assertIn('anchor', str(ctx.exception))


class TestRefinementTraining(ToyDatasetTestCase):
    def test_thin_bone_stage(self):
        result = train_refinement_segmentation(self.dataset, tiny_config(epochs=1), stage='thin-seg')
        self.assertEqual(result.weights.stage, 'thin-seg')
        self.assertEqual(result.weights.spacing, (1.0, 1.0, 1.0))
        self.assertEqual(result.metric, 'val_dsc')
        with self.assertRaises(ConfigurationError):
            train_refinement_segmentation(self.dataset, tiny_config(), stage='bone-det')


class TestPatchSampling(unittest.TestCase):
    def setUp(self):
        ramp = np.broadcast_to(np.arange(16, dtype=np.float32)[:, None, None], (16, 16, 16))
        self.image = Volume(ramp, (1, 1, 1), (0, 0, 0))
        mask = np.zeros((16, 16, 16), dtype=np.uint8)
        mask[2:4, 10:12, 5:7] = 1
        self.mask = Volume(mask, (1, 1, 1), (0, 0, 0), 'label')

    def test_all_background_falls_back_to_uniform(self):
        prov = Provenance()
        empty = Volume(np.zeros((8, 8, 8), dtype=np.uint8), (1, 1, 1), (0, 0, 0), 'label')
        sampler = PatchSampler(empty, 'foreground', 1.0, seed=0, provenance=prov)
        self.assertTrue(sampler.fell_back)
        self.assertEqual(len(prov.warnings), 1)
        self.assertFalse(any(sampler.draw_center()[1] for _ in range(50)))

    def test_foreground_bias(self):
        sampler = PatchSampler(self.mask, 'foreground', 0.5, seed=1)
        on_foreground = 0
        for _ in range(1000):
            center, from_fg = sampler.draw_center()
            idx = tuple(np.rint(self.mask.grid.world_to_voxel(center)).astype(int).clip(0, 15))
            hit = self.mask.data[idx] > 0
            if from_fg:
                self.assertTrue(hit)
            on_foreground += hit
        self.assertGreaterEqual(on_foreground / 1000, 0.45)

    def test_landmark_rule_jitters_around_points(self):
        sampler = PatchSampler(self.mask, 'landmark', landmark_points=np.array([[5.0, 5.0, 5.0]]), jitter_mm=2.0)
        for _ in range(100):
            center, _ = sampler.draw_center()
            self.assertTrue(np.all(np.abs(center - 5.0) <= 2.0))
        with self.assertRaises(InvalidArgumentError):
            PatchSampler(self.mask, 'landmark')

    def test_patches_record_their_placement(self):
        patches = list(sample_refinement_patches(self.image, self.mask, 4, 0.5, rule='uniform', count=5, seed=3))
        self.assertEqual(len(patches), 5)
        for p in patches:
            self.assertEqual(p.image.shape, (4, 4, 4))
            self.assertTrue(p.image.grid.same_as(p.roi.grid))
            self.assertTrue(p.target.grid.same_as(p.roi.grid))
            grid = p.image.grid
            for idx in np.ndindex(*grid.shape):
                world = grid.voxel_to_world(idx)
                if np.all((world >= 0.0) & (world <= 15.0)):
                    self.assertAlmostEqual(float(p.image.data[idx]), world[0], places=4)

    def test_patches_remember_foreground_centring(self):
        fg = list(sample_refinement_patches(self.image, self.mask, 4, 1.0, foreground_fraction=1.0, count=10, seed=4))
        self.assertTrue(all(p.from_foreground for p in fg))
        self.assertTrue(all(p.target.data.any() for p in fg))
        uniform = list(sample_refinement_patches(self.image, self.mask, 4, 1.0, rule='uniform', count=10, seed=4))
        self.assertFalse(any(p.from_foreground for p in uniform))

    def test_oversized_patch_is_reported(self):
        prov = Provenance()
        patches = list(sample_refinement_patches(self.image, self.mask, 20, 1.0, count=1, provenance=prov))
        self.assertEqual(patches[0].image.shape, (20, 20, 20))
        self.assertTrue(any('exceeds the volume extent' in w['message'] for w in prov.warnings))


class TestFlipAugmentation(unittest.TestCase):
    def test_paired_classes_swap(self):
        perm = flip_permutation(['a_left', 'a_right', 'anchor'], [('a_left', 'a_right')])
        np.testing.assert_array_equal(perm, [0, 2, 1, 3])
        x = torch.arange(4, dtype=torch.float32).view(1, 1, 4, 1, 1)
        y = torch.tensor([1, 0, 3, 2]).view(1, 4, 1, 1)
        fx, fy = flip_batch(x, y, perm)
        self.assertEqual(fx.flatten().tolist(), [3.0, 2.0, 1.0, 0.0])
        self.assertEqual(fy.flatten().tolist(), [1, 3, 0, 2])


if __name__ == '__main__':
    unittest.main()
