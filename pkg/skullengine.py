"""
SkullEngine CLI: phantom generation, stage training, inference and evaluation.
"""

import argparse
import json
import sys
from pathlib import Path

import torch

from utils.logger import get_logger, log_run_record
from utils.color import print_colored, print_status, Color
from utils.env import ensure_env_loaded as load_env
from engine.bundle import load_bundle, register_weights
from engine.config import STAGES, load_config
from engine.dataset import SPLITS, load_dataset_manifest
from engine.errors import ConfigurationError, SkullEngineError
from engine.landmarks import read_landmarks
from engine.metrics import build_report, evaluate_case, failed_case
from engine.model_zoo import load_weights
from engine.phantom import JitterRules, PhantomSpec, generate_dataset, load_phantom_spec
from engine.pipeline import LANDMARKS_NAME, MASK_NAME, PROVENANCE_NAME, run_full
from engine.provenance import Provenance
from engine.trainer import train_coarse_segmentation, train_landmark_detector, train_refinement_segmentation
from engine.volume import read_volume

logger = get_logger()

EXIT_CLEAN = 0
EXIT_FAILED = 1
EXIT_DEGRADED = 3

DETECTOR_GROUPS = {'bone-det': 'bone', 'face-det': 'face', 'tooth-det': 'teeth'}


def parse_args(argv=None):
    parser = argparse.ArgumentParser(description="Coarse-to-fine skull segmentation and landmark detection.")
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('phantom', help='Generate a synthetic phantom dataset')
    p.add_argument('--spec', type=str, help='Phantom spec YAML (default: built-in phantom)')
    p.add_argument('--count', type=int, required=True, help='Number of phantoms')
    p.add_argument('--out', type=str, required=True, help='Output directory')
    p.add_argument('--seed', type=int, help='Overrides the phantom seed')

    t = sub.add_parser('train', help='Train one stage and register it in a bundle directory')
    t.add_argument('--stage', choices=STAGES, required=True)
    t.add_argument('--config', type=str, help='Run config YAML (default: built-in defaults)')
    t.add_argument('--manifest', type=str, required=True, help='Dataset manifest (JSON)')
    t.add_argument('--out', type=str, required=True, help='Bundle directory to write into')
    t.add_argument('--init', type=str, help='coarse-seg weights (archive or bundle directory) for transfer')
    t.add_argument('--no-transfer', action='store_true', help='Train a detector from scratch')
    t.add_argument('--seed', type=int, help='Overrides train.seed')

    i = sub.add_parser('infer', help='Run the two-stage pipeline on one image')
    i.add_argument('--bundle', type=str, required=True)
    i.add_argument('--input', type=str, required=True)
    i.add_argument('--out', type=str, required=True)
    i.add_argument('--config', type=str, help='Overrides the config stored in the bundle')
    i.add_argument('--seed', type=int, default=0)

    e = sub.add_parser('eval', help='Score predictions against a dataset manifest')
    e.add_argument('--pred', type=str, required=True, help='Directory with one <case_id>/ folder per prediction')
    e.add_argument('--gt', type=str, required=True, help='Ground-truth dataset manifest')
    e.add_argument('--tau', type=float, default=4.0, help='TPR distance threshold in mm')
    e.add_argument('--out', type=str, required=True, help='Report path (.json; .txt and .html written alongside)')
    e.add_argument('--split', choices=SPLITS + ('all',), default='test')
    e.add_argument('--seed', type=int, default=0)
    return parser.parse_args(argv)


def cmd_phantom(args) -> int:
    if args.spec:
        spec, jitter = load_phantom_spec(args.spec)
    else:
        spec, jitter = PhantomSpec(), JitterRules()
    if args.seed is not None:
        spec = spec.model_copy(update={'seed': args.seed})
    log_run_record('phantom', {'phantom': spec.model_dump(mode='json'), 'jitter': jitter.model_dump(mode='json'),
                               'count': args.count}, seed=spec.seed)
    manifest = generate_dataset(args.count, spec, jitter, args.out)
    counts = {s: len(manifest.split(s)) for s in SPLITS}
    modalities = {m: sum(c.modality == m for c in manifest.cases) for m in ('cbct', 'ct')}
    print_status('clean', f"{args.count} phantoms in {args.out}: "
                          f"train {counts['train']} / val {counts['val']} / test {counts['test']} "
                          f"(cbct {modalities['cbct']}, ct {modalities['ct']})")
    return EXIT_CLEAN


def _load_init(path):
    path = Path(path)
    if path.is_dir():
        path = path / 'coarse_seg.pt'
    return load_weights(path)


def cmd_train(args) -> int:
    config = load_config(args.config)
    if args.seed is not None:
        config = config.model_copy(update={'train': config.train.model_copy(update={'seed': args.seed})})
    stage = args.stage
    if stage in DETECTOR_GROUPS and not args.init and not args.no_transfer:
        raise ConfigurationError(
            f'{stage} is initialised by transfer from the segmentation model: pass --init <coarse-seg weights> '
            f'(or --no-transfer to train from scratch)')
    dataset = load_dataset_manifest(args.manifest)
    log_run_record('train', config.to_dict(), seed=config.train.seed, stage=stage, manifest=args.manifest)
    init = _load_init(args.init) if args.init else None
    if stage == 'coarse-seg':
        result = train_coarse_segmentation(dataset, config, init=init)
    elif stage in DETECTOR_GROUPS:
        result = train_landmark_detector(dataset, init, DETECTOR_GROUPS[stage], config,
                                         transfer=not args.no_transfer)
    else:
        result = train_refinement_segmentation(dataset, config, stage=stage, init=init)
    archive = register_weights(args.out, stage, result.weights, landmarks=dataset.landmarks(), config=config,
                               history=result.history)
    best = result.history[result.best_epoch - 1][result.metric] if result.best_epoch else None
    print_status('clean', f'{stage}: best epoch {result.best_epoch} ({result.metric} = {best}) -> {archive}')
    return EXIT_CLEAN


def cmd_infer(args) -> int:
    torch.manual_seed(args.seed)
    provenance = Provenance()
    with provenance.timed('load'):
        bundle = load_bundle(args.bundle)
        image = read_volume(args.input)
    config = load_config(args.config) if args.config else bundle.config
    log_run_record('infer', config.to_dict(), seed=args.seed, bundle=args.bundle, input=args.input,
                   model_checksums=bundle.checksums)
    result = run_full(image, bundle, config, provenance)
    with provenance.timed('io'):
        paths = result.write(args.out)
    result.stage_provenance = provenance.to_dict()
    paths['provenance'].write_text(_json(result.stage_provenance), encoding='utf-8')
    status = 'degraded' if result.degraded else 'clean'
    timings = ', '.join(f'{k} {v:.1f}s' for k, v in provenance.timings.items())
    print_status(status, f'{args.input} -> {args.out} ({timings})')
    for w in provenance.warnings:
        print_colored(f"  {w['module']}: {w['message']}", Color.YELLOW)
    return EXIT_DEGRADED if result.degraded else EXIT_CLEAN


def _json(data) -> str:
    return json.dumps(data, indent=2, sort_keys=True) + '\n'


def cmd_eval(args) -> int:
    dataset = load_dataset_manifest(args.gt)
    entries = dataset.cases if args.split == 'all' else dataset.split(args.split)
    log_run_record('eval', {'tau_mm': args.tau, 'split': args.split, 'gt': args.gt}, seed=args.seed)
    cases = []
    for entry in entries:
        case_dir = Path(args.pred) / entry.case_id
        mask_path, lms_path = case_dir / MASK_NAME, case_dir / LANDMARKS_NAME
        missing = [p.name for p in (mask_path, lms_path) if not p.exists()]
        if missing:
            cases.append(failed_case(entry.case_id, f'missing prediction file(s): {", ".join(missing)}',
                                     entry.modality))
            logger.warning(f'{entry.case_id}: missing prediction file(s) {missing}')
            continue
        try:
            gt = dataset.load_case(entry)
            pred_mask = read_volume(mask_path, kind='label')
            metrics = evaluate_case(entry.case_id, pred_mask, gt.mask, read_landmarks(lms_path),
                                    gt.landmarks, args.tau, modality=entry.modality)
        except (SkullEngineError, OSError) as e:
            cases.append(failed_case(entry.case_id, str(e), entry.modality))
            logger.warning(f'{entry.case_id}: {e}')
            continue
        provenance_path = case_dir / PROVENANCE_NAME
        if provenance_path.exists():
            logger.debug(f'{entry.case_id}: provenance at {provenance_path}')
        cases.append(metrics)
    report = build_report(cases, args.tau)
    report.write(args.out)
    print(report.to_text())
    failed = sum(c.failed for c in cases)
    if cases and failed == len(cases):
        print_status('failed', f'no case could be evaluated; report at {args.out}')
        return EXIT_FAILED
    if failed:
        print_status('degraded', f'{failed} of {len(cases)} cases failed; report at {args.out}')
        return EXIT_DEGRADED
    print_status('clean', f'{len(cases)} cases evaluated; report at {args.out}')
    return EXIT_CLEAN


COMMANDS = {
    'phantom': cmd_phantom,
    'train': cmd_train,
    'infer': cmd_infer,
    'eval': cmd_eval,
}


def main(argv=None) -> int:
    load_env()
    args = parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (SkullEngineError, OSError) as e:
        logger.error(f'{args.command} failed: {e}')
        print_status('failed', str(e))
        return EXIT_FAILED
    except Exception as e:
        logger.exception(f'Unexpected error in {args.command}')
        print_status('failed', f'{type(e).__name__}: {e}')
        return EXIT_FAILED


if __name__ == '__main__':
    sys.exit(main())
