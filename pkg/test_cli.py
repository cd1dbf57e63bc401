#!/usr/bin/env python3
"""End-to-end tests for the skullengine command line."""

import hashlib
import json
import shutil
import tempfile
import unittest
from pathlib import Path
from unittest import mock

import yaml

import skullengine
from engine.bundle import load_bundle
from engine.errors import BundleError
from test_trainer import TINY_CONFIG, make_toy_dataset


def checksums(root: Path) -> dict:
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob('*')) if p.is_file()}


class CliTestCase(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.root = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def run_cli(self, *argv):
        with mock.patch('skullengine.print_status') as status, mock.patch('builtins.print'):
            code = skullengine.main([str(a) for a in argv])
        return code, [call.args for call in status.call_args_list]

    def write_config(self, raw) -> Path:
        path = self.root / 'config.yaml'
        path.write_text(yaml.safe_dump(raw), encoding='utf-8')
        return path


class TestPhantomCommand(CliTestCase):
    def test_rerun_gives_identical_files(self):
        spec = self.root / 'phantom.yaml'
        spec.write_text('phantom:\n  shape: [64, 64, 64]\n  spacing: [2.0, 2.0, 2.0]\n', encoding='utf-8')
        code, status = self.run_cli('phantom', '--spec', spec, '--count', 3, '--out', self.root / 'a', '--seed', 5)
        self.assertEqual(code, 0)
        self.assertEqual(status[-1][0], 'clean')
        self.run_cli('phantom', '--spec', spec, '--count', 3, '--out', self.root / 'b', '--seed', 5)
        a, b = checksums(self.root / 'a'), checksums(self.root / 'b')
        self.assertIn('manifest.json', a)
        self.assertIn('images/case_000.nii', a)
        self.assertEqual(a, b)


class TestTrainCommand(CliTestCase):
    def test_detector_needs_init_or_no_transfer(self):
        code, status = self.run_cli('train', '--stage', 'bone-det', '--manifest', self.root / 'missing.json',
                                    '--out', self.root / 'bundle')
        self.assertEqual(code, 1)
        self.assertIn('--init', status[-1][1])

    def test_unknown_config_key_is_named(self):
        config = self.write_config({'train': {'epochz': 3}})
        code, status = self.run_cli('train', '--stage', 'coarse-seg', '--config', config,
                                    '--manifest', self.root / 'missing.json', '--out', self.root / 'bundle')
        self.assertEqual(code, 1)
        self.assertEqual(status[-1][0], 'failed')
        self.assertIn("'epochz'", status[-1][1])
        self.assertIn('[train]', status[-1][1])

    def test_coarse_segmentation_is_registered(self):
        manifest = make_toy_dataset(self.root / 'toy')
        config = self.write_config(TINY_CONFIG)
        bundle = self.root / 'bundle'
        code, _ = self.run_cli('train', '--stage', 'coarse-seg', '--config', config, '--manifest', manifest,
                               '--out', bundle)
        self.assertEqual(code, 0)
        loaded = load_bundle(bundle, require_all=False)
        self.assertTrue(loaded.has('coarse_seg'))
        self.assertEqual(loaded.weights['coarse_seg'].spec.num_classes, 3)
        self.assertEqual(loaded.config.model.depth, 2)
        history = json.loads((bundle / 'coarse_seg.history.json').read_text(encoding='utf-8'))
        self.assertEqual(len(history), 2)
        with self.assertRaises(BundleError):
            load_bundle(bundle)


class TestInferCommand(CliTestCase):
    def test_corrupt_bundle(self):
        bundle = self.root / 'bundle'
        bundle.mkdir()
        (bundle / 'bundle.json').write_text('{"format_version": 1, "models": {"coarse_seg": ', encoding='utf-8')
        code, status = self.run_cli('infer', '--bundle', bundle, '--input', self.root / 'image.nii',
                                    '--out', self.root / 'out')
        self.assertEqual(code, 1)
        self.assertEqual(status[-1][0], 'failed')


class TestEvalCommand(CliTestCase):
    def setUp(self):
        super().setUp()
        self.manifest = make_toy_dataset(self.root / 'toy')
        self.pred = self.root / 'pred'
        # a perfect prediction for the single test case
        case_dir = self.pred / 'toy_4'
        case_dir.mkdir(parents=True)
        shutil.copy(self.root / 'toy' / 'masks' / 'toy_4.nii', case_dir / 'mask.nii')
        shutil.copy(self.root / 'toy' / 'landmarks' / 'toy_4.csv', case_dir / 'landmarks.csv')

    def test_perfect_prediction(self):
        out = self.root / 'report.json'
        code, _ = self.run_cli('eval', '--pred', self.pred, '--gt', self.manifest, '--out', out)
        self.assertEqual(code, 0)
        report = json.loads(out.read_text(encoding='utf-8'))
        for structure in ('midface', 'mandible'):
            self.assertEqual(report['structures'][structure]['dsc']['mean'], 1.0)
        for group in ('bone', 'teeth', 'face'):
            self.assertEqual(report['landmarks'][group]['rmse']['mean'], 0.0)
            self.assertEqual(report['landmarks'][group]['tpr']['mean'], 100.0)
        self.assertEqual(report['by_modality']['cbct']['n_cases'], 1)
        self.assertEqual(report['by_modality']['cbct']['structures']['midface']['dsc']['mean'], 1.0)
        self.assertTrue(out.with_suffix('.html').exists())

    def test_missing_predictions_are_failed_cases(self):
        out = self.root / 'report.json'
        code, status = self.run_cli('eval', '--pred', self.pred, '--gt', self.manifest, '--out', out,
                                    '--split', 'all')
        self.assertEqual(code, 3)
        self.assertEqual(status[-1][0], 'degraded')
        report = json.loads(out.read_text(encoding='utf-8'))
        self.assertEqual(report['structures']['midface']['dsc']['n'], 1)
        self.assertEqual(sum(c['failed'] for c in report['cases']), 4)
        self.assertTrue(any('toy_0: failed' in f for f in report['footnotes']))

    def test_nothing_to_evaluate(self):
        code, _ = self.run_cli('eval', '--pred', self.root / 'empty', '--gt', self.manifest,
                               '--out', self.root / 'report.json')
        self.assertEqual(code, 1)


if __name__ == '__main__':
    unittest.main()
