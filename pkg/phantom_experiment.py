"""
End-to-end phantom experiment: generate phantoms, train every stage at reduced
model size, run the pipeline on the test split and compare the refined masks
with the upsampled coarse masks.

    python phantom_experiment.py --workdir runs/phantom --count 20
"""

import argparse
import json
import sys
import time
from pathlib import Path
from typing import Dict, List

import numpy as np

from utils.env import ensure_env_loaded as load_env
from utils.logger import get_logger, log_run_record
from utils.color import print_status
from engine.bundle import load_bundle, register_weights
from engine.config import EngineConfig, load_config, parse_config
from engine.dataset import load_dataset_manifest
from engine.errors import MissingLandmarkError, SkullEngineError
from engine.landmarks import GROUPS
from engine.metrics import STRUCTURES, build_report, dice, evaluate_case, landmark_rmse, landmark_tpr, roi_dice
from engine.phantom import JitterRules, PhantomSpec, generate_dataset, load_phantom_spec
from engine.pipeline import run_coarse, run_full
from engine.roi_refine import compute_thin_bone_roi
from engine.trainer import train_coarse_segmentation, train_landmark_detector, train_refinement_segmentation
from engine.volume import paste_into_reference

logger = get_logger()

# reduced model and schedule so the whole run fits on a desktop CPU
EXPERIMENT_CONFIG = {
    'model': {'depth': 3, 'base_channels': 8},
    'train': {'epochs': 30, 'batch_size': 2, 'learning_rate': 2e-3, 'lr_step_epochs': 15,
              'patches_per_volume': 8, 'validation_patches': 4},
    'stage': {'overlap': 0.25},
}

THRESHOLDS = {
    'structure_dsc': 0.90,
    'thin_wall_dsc_gain': 0.05,
    'coarse_rmse_factor': 2.0,
    'tooth_rmse_factor': 2.0,
    'tooth_tpr': 100.0,
}


def parse_args():
    parser = argparse.ArgumentParser(description="Run the phantom train / infer / evaluate experiment.")
    parser.add_argument('--workdir', type=str, default='runs/phantom', help='Where data, bundle and outputs go')
    parser.add_argument('--count', type=int, default=20, help='Number of phantoms to generate')
    parser.add_argument('--spec', type=str, help='Phantom spec YAML')
    parser.add_argument('--config', type=str, help='Run config YAML (default: reduced experiment config)')
    parser.add_argument('--seed', type=int, default=0)
    parser.add_argument('--skip-train', action='store_true', help='Reuse the bundle in <workdir>/bundle')
    parser.add_argument('--thin-seg', action='store_true', help='Also train the separate thin-bone model')
    parser.add_argument('--transfer-check', action='store_true',
                        help='Compare transfer and from-scratch bone detector validation losses')
    return parser.parse_args()


def experiment_config(path, seed: int) -> EngineConfig:
    config = load_config(path) if path else parse_config(EXPERIMENT_CONFIG)
    return config.model_copy(update={'train': config.train.model_copy(update={'seed': seed})})


def prepare_data(workdir: Path, count: int, spec_path, seed: int):
    manifest_path = workdir / 'data' / 'manifest.json'
    if manifest_path.exists():
        logger.info(f'Reusing phantom dataset at {manifest_path}')
        return load_dataset_manifest(manifest_path)
    spec, jitter = load_phantom_spec(spec_path) if spec_path else (PhantomSpec(), JitterRules())
    spec = spec.model_copy(update={'seed': seed})
    generate_dataset(count, spec, jitter, manifest_path.parent)
    return load_dataset_manifest(manifest_path)


def train_all(dataset, config: EngineConfig, bundle_dir: Path, thin_seg: bool) -> Dict[str, float]:
    """Train every stage in order and register it; returns seconds per stage."""
    landmarks = dataset.landmarks()
    timings = {}

    def register(stage, result):
        register_weights(bundle_dir, stage, result.weights, landmarks=landmarks, config=config,
                         history=result.history)

    start = time.perf_counter()
    seg = train_coarse_segmentation(dataset, config)
    register('coarse-seg', seg)
    timings['coarse-seg'] = time.perf_counter() - start
    for stage, group in (('bone-det', 'bone'), ('face-det', 'face'), ('tooth-det', 'teeth')):
        start = time.perf_counter()
        register(stage, train_landmark_detector(dataset, seg.weights, group, config))
        timings[stage] = time.perf_counter() - start
    stages = ['refine-seg'] + (['thin-seg'] if thin_seg else [])
    for stage in stages:
        start = time.perf_counter()
        register(stage, train_refinement_segmentation(dataset, config, stage=stage, init=seg.weights))
        timings[stage] = time.perf_counter() - start
    return timings


def transfer_check(dataset, config: EngineConfig, bundle_dir: Path) -> dict:
    """Epochs needed by the transfer-initialised bone detector to reach the scratch epoch-5 loss."""
    short = config.model_copy(update={'train': config.train.model_copy(update={'epochs': 5})})
    source = load_bundle(bundle_dir, require_all=False).weights['coarse_seg']
    scratch = train_landmark_detector(dataset, None, 'bone', short, transfer=False)
    transfer = train_landmark_detector(dataset, source, 'bone', short, transfer=True)
    target = scratch.history[-1]['val_loss']
    reached = next((row['epoch'] for row in transfer.history if row['val_loss'] <= target), None)
    return {
        'scratch_epoch5_val_loss': target,
        'transfer_val_loss': [row['val_loss'] for row in transfer.history],
        'scratch_val_loss': [row['val_loss'] for row in scratch.history],
        'epochs_to_reach': reached,
        'passed': reached is not None,
    }


def evaluate_test_case(dataset, entry, bundle, config: EngineConfig, out_dir: Path) -> dict:
    """Full pipeline on one test case, scored against the coarse stage alone."""
    case = dataset.load_case(entry)
    manifest = bundle.landmarks
    start = time.perf_counter()
    result = run_full(case.image, bundle, config)
    seconds = time.perf_counter() - start
    result.write(out_dir)

    # baseline: the same coarse models, nearest-upsampled onto the image grid
    coarse = run_coarse(case.image, bundle.model('coarse_seg'), bundle.model('bone_det'),
                        bundle.model('face_det'), manifest, config)
    coarse_up = paste_into_reference(coarse.mask, case.image.grid)
    thin_rois = []
    for name in manifest.thin_bone_pair:
        try:
            thin_rois.append(compute_thin_bone_roi(case.landmarks, name, config.stage.thin_half_extent_mm,
                                                   config.data.refine_spacing))
        except MissingLandmarkError:
            continue
    final = result.final_mask
    row = {
        'case_id': entry.case_id,
        'modality': entry.modality,
        'inference_s': seconds,
        'degraded': result.degraded,
        'refined_dsc': {n: dice(final, case.mask, label) for label, n in STRUCTURES.items()},
        'coarse_dsc': {n: dice(coarse_up, case.mask, label) for label, n in STRUCTURES.items()},
        'thin_wall_dsc': {'refined': roi_dice(final, case.mask, 1, thin_rois),
                          'coarse': roi_dice(coarse_up, case.mask, 1, thin_rois)},
        'rmse': {g: landmark_rmse(result.landmarks, case.landmarks, g) for g in GROUPS},
        'tpr': {g: landmark_tpr(result.landmarks, case.landmarks, g, config.stage.tau_mm) for g in GROUPS},
    }
    row['thin_wall_dsc']['gain'] = row['thin_wall_dsc']['refined'] - row['thin_wall_dsc']['coarse']
    row['metrics'] = evaluate_case(entry.case_id, final, case.mask, result.landmarks, case.landmarks,
                                   config.stage.tau_mm, modality=entry.modality)
    return row


def thin_wall_gains(rows: List[dict]) -> dict:
    gains = [r['thin_wall_dsc']['gain'] for r in rows]
    return {
        'per_case': {r['case_id']: g for r, g in zip(rows, gains)},
        'mean': float(np.mean(gains)) if gains else None,
        'min': float(np.min(gains)) if gains else None,
    }


def acceptance(rows: List[dict], config: EngineConfig) -> Dict[str, bool]:
    coarse_limit = THRESHOLDS['coarse_rmse_factor'] * config.data.coarse_spacing
    tooth_limit = THRESHOLDS['tooth_rmse_factor'] * config.data.tooth_spacing

    def rmse_ok(group, limit):
        values = [r['rmse'][group] for r in rows]
        return all(v is not None and v <= limit for v in values)

    gains = thin_wall_gains(rows)
    return {
        'structure_dsc': all(d >= THRESHOLDS['structure_dsc'] for r in rows for d in r['refined_dsc'].values()),
        'refined_not_worse': all(r['refined_dsc'][n] >= r['coarse_dsc'][n] for r in rows for n in STRUCTURES.values()),
        # every test case must gain, not only the average
        'thin_wall_gain': bool(rows) and gains['min'] >= THRESHOLDS['thin_wall_dsc_gain'],
        'bone_rmse': rmse_ok('bone', coarse_limit),
        'face_rmse': rmse_ok('face', coarse_limit),
        'teeth_rmse': rmse_ok('teeth', tooth_limit),
        'teeth_tpr': all(r['tpr']['teeth'] == THRESHOLDS['tooth_tpr'] for r in rows),
        'inference_time': all(r['inference_s'] <= 120.0 for r in rows),
    }


def main():
    load_env()
    args = parse_args()
    workdir = Path(args.workdir)
    bundle_dir = workdir / 'bundle'
    config = experiment_config(args.config, args.seed)
    log_run_record('phantom_experiment', config.to_dict(), seed=args.seed, count=args.count)
    started = time.perf_counter()
    try:
        dataset = prepare_data(workdir, args.count, args.spec, args.seed)
        train_timings = {}
        if not args.skip_train:
            train_timings = train_all(dataset, config, bundle_dir, args.thin_seg)
        bundle = load_bundle(bundle_dir)
        transfer = transfer_check(dataset, config, bundle_dir) if args.transfer_check else None
        rows = [evaluate_test_case(dataset, entry, bundle, config, workdir / 'predictions' / entry.case_id)
                for entry in dataset.split('test')]
    except SkullEngineError as e:
        logger.error(f'Experiment failed: {e}')
        print_status('failed', str(e))
        return 1

    report = build_report([r.pop('metrics') for r in rows], config.stage.tau_mm)
    report.write(workdir / 'report.json')
    checks = acceptance(rows, config)
    gains = thin_wall_gains(rows)
    if rows:
        logger.info(f"Thin-wall DSC gain over coarse: mean {gains['mean']:.3f}, worst case {gains['min']:.3f}")
    if transfer is not None:
        checks['transfer_efficiency'] = transfer['passed']
    summary = {
        'config': config.to_dict(),
        'train_seconds': train_timings,
        'total_seconds': time.perf_counter() - started,
        'cases': rows,
        'thin_wall_gain': gains,
        'transfer': transfer,
        'acceptance': checks,
    }
    (workdir / 'summary.json').write_text(json.dumps(summary, indent=2, default=str) + '\n', encoding='utf-8')
    print(report.to_text())
    for name, ok in checks.items():
        print_status('clean' if ok else 'failed', name)
    passed = all(checks.values())
    print_status('clean' if passed else 'failed', f'summary written to {workdir / "summary.json"}')
    return 0 if passed else 1


if __name__ == '__main__':
    sys.exit(main())
