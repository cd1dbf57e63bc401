"""
Model bundles: a directory holding the stage weight archives, the landmark
manifest and a version-checked `bundle.json` index.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional

from pydantic import ValidationError

from engine.config import EngineConfig, parse_config
from engine.errors import BundleError, ConfigurationError
from engine.landmarks import LandmarkManifest, load_landmark_manifest, save_landmark_manifest
from engine.model_zoo import ModelWeights, VoxelClassifier, file_checksum, instantiate, load_weights, save_weights
from utils.logger import get_logger

logger = get_logger()

BUNDLE_FORMAT_VERSION = 1
INDEX_NAME = 'bundle.json'
LANDMARKS_NAME = 'landmarks.yaml'

STAGE_KEYS = {
    'coarse-seg': 'coarse_seg',
    'bone-det': 'bone_det',
    'face-det': 'face_det',
    'refine-seg': 'refine_seg',
    'thin-seg': 'thin_seg',
    'tooth-det': 'tooth_det',
}
REQUIRED_MODELS = ('coarse_seg', 'bone_det', 'face_det', 'refine_seg', 'tooth_det')
OPTIONAL_MODELS = ('thin_seg',)


def _read_index(path: Path) -> dict:
    try:
        index = json.loads(path.read_text(encoding='utf-8'))
    except (OSError, json.JSONDecodeError) as e:
        raise BundleError(f'cannot read bundle index {path}: {e}') from e
    if not isinstance(index, dict):
        raise BundleError(f'{path}: bundle index must be a JSON object')
    version = index.get('format_version')
    if version != BUNDLE_FORMAT_VERSION:
        raise BundleError(f'{path}: unsupported bundle format_version {version!r} '
                          f'(expected {BUNDLE_FORMAT_VERSION})')
    if not isinstance(index.get('models'), dict):
        raise BundleError(f'{path}: bundle index has no models map')
    return index


def register_weights(bundle_dir, stage: str, weights: ModelWeights, landmarks: LandmarkManifest = None,
                     config: EngineConfig = None, history: list = None) -> Path:
    """Write the archive for `stage` into the bundle and update its index."""
    if stage not in STAGE_KEYS:
        raise ConfigurationError(f'unknown stage {stage!r}')
    bundle_dir = Path(bundle_dir)
    bundle_dir.mkdir(parents=True, exist_ok=True)
    index_path = bundle_dir / INDEX_NAME
    index = _read_index(index_path) if index_path.exists() else {'format_version': BUNDLE_FORMAT_VERSION,
                                                                  'models': {}}
    key = STAGE_KEYS[stage]
    archive = bundle_dir / f'{key}.pt'
    checksum = save_weights(weights, archive)
    index['models'][key] = {
        'file': archive.name,
        'sha256': checksum,
        'stage': stage,
        'spacing': None if weights.spacing is None else list(weights.spacing),
        'num_classes': weights.spec.num_classes,
    }
    if history is not None:
        history_path = bundle_dir / f'{key}.history.json'
        history_path.write_text(json.dumps(history, indent=2) + '\n', encoding='utf-8')
        index['models'][key]['history'] = history_path.name
    if landmarks is not None:
        save_landmark_manifest(landmarks, bundle_dir / LANDMARKS_NAME)
        index['landmark_manifest'] = LANDMARKS_NAME
    if config is not None:
        index['config'] = config.to_dict()
    index_path.write_text(json.dumps(index, indent=2, sort_keys=True) + '\n', encoding='utf-8')
    logger.info(f'Registered {stage} weights in {bundle_dir} ({checksum[:12]})')
    return archive


@dataclass
class ModelBundle:
    root: Path
    weights: Dict[str, ModelWeights]
    checksums: Dict[str, str]
    landmarks: LandmarkManifest
    config: EngineConfig
    _models: Dict[str, VoxelClassifier] = field(default_factory=dict, repr=False)

    def has(self, key: str) -> bool:
        return key in self.weights

    def model(self, key: str) -> VoxelClassifier:
        if key not in self.weights:
            raise BundleError(f'bundle {self.root} has no {key} model')
        if key not in self._models:
            self._models[key] = instantiate(self.weights[key])
        return self._models[key]


def load_bundle(bundle_dir, require_all: bool = True) -> ModelBundle:
    """Load and verify a bundle; every archive must match its recorded checksum."""
    bundle_dir = Path(bundle_dir)
    index_path = bundle_dir / INDEX_NAME
    if not index_path.exists():
        raise BundleError(f'no {INDEX_NAME} in {bundle_dir}')
    index = _read_index(index_path)
    models = index['models']
    unknown = set(models) - set(REQUIRED_MODELS) - set(OPTIONAL_MODELS)
    if unknown:
        raise BundleError(f'{index_path}: unknown model entries {sorted(unknown)}')
    if require_all:
        missing = [k for k in REQUIRED_MODELS if k not in models]
        if missing:
            raise BundleError(f'{index_path}: missing model archives {missing}')
    weights, checksums = {}, {}
    for key, entry in models.items():
        try:
            archive = bundle_dir / entry['file']
            expected = entry['sha256']
        except (KeyError, TypeError) as e:
            raise BundleError(f'{index_path}: malformed entry for {key}: {e}') from e
        if not archive.exists():
            raise BundleError(f'{index_path}: archive {archive.name} for {key} not found')
        actual = file_checksum(archive)
        if actual != expected:
            raise BundleError(f'{archive}: checksum mismatch (expected {expected[:12]}, got {actual[:12]})')
        weights[key] = load_weights(archive)
        checksums[key] = actual
    lm_name = index.get('landmark_manifest')
    if lm_name is None:
        raise BundleError(f'{index_path}: no landmark manifest recorded')
    try:
        landmarks = load_landmark_manifest(bundle_dir / lm_name)
        config = parse_config(index.get('config') or {})
    except (FileNotFoundError, ConfigurationError, ValidationError) as e:
        raise BundleError(f'{bundle_dir}: {e}') from e
    return ModelBundle(bundle_dir, weights, checksums, landmarks, config)


def bundle_from_weights(weights: Dict[str, ModelWeights], landmarks: LandmarkManifest,
                        config: Optional[EngineConfig] = None) -> ModelBundle:
    """In-memory bundle, mostly for tests and the phantom experiment."""
    return ModelBundle(Path('.'), dict(weights), {k: '' for k in weights}, landmarks, config or EngineConfig())
