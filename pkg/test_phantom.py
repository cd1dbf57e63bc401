#!/usr/bin/env python3
"""Tests for the phantom generator and the synthetic dataset writer."""

import tempfile
import unittest
from pathlib import Path

import numpy as np

from engine.dataset import load_dataset_manifest
from engine.errors import PhantomSpecError
from engine.landmarks import read_landmarks
from engine.phantom import (
    JitterRules,
    PhantomGeometry,
    PhantomSpec,
    generate,
    generate_dataset,
    load_phantom_spec,
    phantom_landmark_manifest,
    validate_spec,
)
from engine.volume import read_volume

SMALL = dict(shape=(64, 64, 64), spacing=(2.0, 2.0, 2.0))


class TestGenerate(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.spec = PhantomSpec(noise_sigma=0.0, smoothing_sigma_mm=0.0)
        cls.image, cls.mask, cls.landmarks = generate(cls.spec)

    def test_deterministic(self):
        spec = PhantomSpec(**SMALL, seed=4)
        a, b = generate(spec), generate(spec)
        np.testing.assert_array_equal(a[0].data, b[0].data)
        np.testing.assert_array_equal(a[1].data, b[1].data)
        self.assertEqual(a[2], b[2])

    def test_noise_free_image_is_two_valued(self):
        self.assertEqual(set(np.unique(self.image.data).tolist()), {0.0, 1000.0})
        self.assertEqual(set(np.unique(self.mask.data).tolist()), {0, 1, 2})
        np.testing.assert_array_equal(self.image.data > 0, self.mask.data > 0)

    def test_bone_landmarks_sit_on_their_surface(self):
        geometry = PhantomGeometry(self.spec)
        labels = {'midface': 1, 'mandible': 2}
        for lm in self.landmarks:
            structure = geometry.structure_of(lm.group, lm.name)
            if structure == 'envelope':
                c = geometry.midface_center
                p = np.asarray(lm.position)
                self.assertTrue(geometry.contains('envelope', c + 0.99 * (p - c)))
                self.assertFalse(geometry.contains('envelope', c + 1.01 * (p - c)))
                continue
            idx = np.rint(self.mask.grid.world_to_voxel(lm.position)).astype(int)
            block = self.mask.data[tuple(slice(i - 1, i + 2) for i in idx)]
            self.assertTrue(np.any(block == labels[structure]), lm.name)
            self.assertTrue(np.any(block != labels[structure]), lm.name)

    def test_left_right_mirror_symmetry(self):
        np.testing.assert_array_equal(self.mask.data, self.mask.data[::-1])
        pos = {lm.name: np.asarray(lm.position) for lm in self.landmarks}
        mirror = np.array([-1.0, 1.0, 1.0])
        for a, b in phantom_landmark_manifest(self.spec).flip_pairs:
            np.testing.assert_allclose(pos[a] * mirror, pos[b], atol=1e-6)
        teeth = self.spec.tooth_names
        for k in range(len(teeth)):
            np.testing.assert_allclose(pos[teeth[k]] * mirror, pos[teeth[-1 - k]], atol=1e-6)

    def test_teeth_are_closer_than_two_coarse_voxels(self):
        apex = np.array([lm.position for lm in self.landmarks.group('teeth')])
        gaps = np.linalg.norm(np.diff(apex, axis=0), axis=1)
        self.assertTrue(np.all(gaps < 2 * self.spec.coarse_spacing))

    def test_thin_wall_is_below_coarse_spacing(self):
        self.assertLess(self.spec.thin_wall_thickness_mm, self.spec.coarse_spacing)
        x_left = self.landmarks['thin_wall_left'].position
        j, k = np.rint(self.mask.grid.world_to_voxel(x_left)).astype(int)[1:]
        run = int(np.count_nonzero(self.mask.data[:64, j, k] == 1))
        self.assertLessEqual(run * self.spec.spacing[0], 2)


class TestSpecValidation(unittest.TestCase):
    def test_overlapping_structures(self):
        with self.assertRaises(PhantomSpecError):
            validate_spec(PhantomSpec(mandible_center=(0.0, 0.0, -10.0)))

    def test_thin_wall_must_stay_below_coarse_spacing(self):
        with self.assertRaises(PhantomSpecError):
            validate_spec(PhantomSpec(thin_wall_thickness_mm=2.5))

    def test_landmarks_must_fit_the_grid(self):
        with self.assertRaises(PhantomSpecError):
            validate_spec(PhantomSpec(shape=(64, 64, 64)))

    def test_spec_file_errors(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'phantom.yaml'
            path.write_text('phantom:\n  shape: [64, 64, 64]\nextra: {}\n', encoding='utf-8')
            with self.assertRaises(PhantomSpecError):
                load_phantom_spec(path)
            path.write_text('phantom:\n  arch_radius: 3\n', encoding='utf-8')
            with self.assertRaises(PhantomSpecError):
                load_phantom_spec(path)
            path.write_text('phantom:\n  shape: [64, 64, 64]\n  spacing: [2, 2, 2]\njitter:\n  enabled: false\n',
                            encoding='utf-8')
            spec, jitter = load_phantom_spec(path)
            self.assertEqual(spec.shape, (64, 64, 64))
            self.assertFalse(jitter.enabled)


class TestGenerateDataset(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.root = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def test_split_counts_and_files(self):
        manifest = generate_dataset(20, PhantomSpec(**SMALL), JitterRules(), self.root)
        self.assertEqual([len(manifest.split(s)) for s in ('train', 'val', 'test')], [14, 2, 4])
        loaded = load_dataset_manifest(self.root / 'manifest.json')
        self.assertEqual(len(loaded.landmarks().teeth), 6)
        for entry in loaded.cases:
            case = loaded.load_case(entry)
            self.assertEqual(case.image.shape, (64, 64, 64))
            self.assertEqual(case.mask.kind, 'label')
            self.assertEqual(len(case.landmarks), 17)
            self.assertEqual(case.modality, entry.modality)

    def test_disabled_jitter_keeps_the_geometry(self):
        generate_dataset(3, PhantomSpec(**SMALL), JitterRules(enabled=False), self.root)
        masks = [read_volume(self.root / 'masks' / f'case_{i:03d}.nii').data for i in range(3)]
        for m in masks[1:]:
            np.testing.assert_array_equal(m, masks[0])
        lms = [read_landmarks(self.root / 'landmarks' / f'case_{i:03d}.csv') for i in range(3)]
        self.assertEqual(lms[0], lms[2])

    def test_disabled_jitter_keeps_the_base_modality_and_noise_level(self):
        spec = PhantomSpec(**SMALL, modality='ct', noise_sigma=40.0)
        manifest = generate_dataset(4, spec, JitterRules(enabled=False, ct_fraction=0.0), self.root)
        self.assertEqual([c.modality for c in manifest.cases], ['ct'] * 4)
        images = [read_volume(self.root / 'images' / f'case_{i:03d}.nii').data.astype(np.float64) for i in range(4)]
        # identical geometry: differences are pure noise, CT sigma is half the base sigma
        for image in images[1:]:
            self.assertAlmostEqual(float(np.std(image - images[0])), 20.0 * np.sqrt(2.0), delta=1.0)

    def test_count_must_be_positive(self):
        with self.assertRaises(PhantomSpecError):
            generate_dataset(0, PhantomSpec(**SMALL), JitterRules(), self.root)


if __name__ == '__main__':
    unittest.main()
