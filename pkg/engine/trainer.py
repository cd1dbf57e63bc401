"""
Training loops for every stage.

coarse-seg trains from scratch on whole volumes at the coarse spacing; the
detectors start from the segmentation weights (transfer) and learn sphere-mask
targets; refine-seg and thin-seg learn from sampled high resolution patches.
"""

import copy
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch.utils.data import DataLoader, Dataset
from tqdm import tqdm

from engine.config import EngineConfig
from engine.dataset import Case, DatasetManifest
from engine.errors import ConfigurationError, DivergenceError, InvalidArgumentError
from engine.landmarks import GROUPS, LandmarkManifest, LandmarkSet, decode_landmarks, encode_landmarks
from engine.metrics import dice, landmark_rmse
from engine.model_zoo import (
    ModelWeights,
    VoxelClassifier,
    VoxelClassifierSpec,
    build_model,
    focal_loss,
    instantiate,
    predict_volume,
    transfer_init,
)
from engine.provenance import Provenance, warn
from engine.roi_refine import compute_tooth_roi
from engine.volume import RoiBox, Volume, crop, rescale_intensity, resample
from utils.env import get_verbosity
from utils.logger import get_logger

logger = get_logger()

SEGMENTATION_CLASSES = 3
SAMPLING_RULES = ('foreground', 'uniform', 'landmark')


@dataclass
class TrainingResult:
    weights: ModelWeights
    history: List[dict]
    best_epoch: int
    metric: str

    def to_dict(self) -> dict:
        return {'best_epoch': self.best_epoch, 'metric': self.metric, 'history': list(self.history)}


@dataclass
class Example:
    """One (input, target) pair sharing a grid."""
    image: np.ndarray
    target: np.ndarray
    case_id: str = ''


class ExampleDataset(Dataset):
    def __init__(self, examples: Sequence[Example]):
        self.examples = list(examples)

    def __len__(self):
        return len(self.examples)

    def __getitem__(self, i):
        ex = self.examples[i]
        return torch.from_numpy(ex.image[None]), torch.from_numpy(ex.target.astype(np.int64))


def load_cases(manifest: DatasetManifest, split: str) -> List[Case]:
    return [manifest.load_case(entry) for entry in manifest.split(split)]


def model_input(image: Volume, config: EngineConfig) -> Volume:
    return rescale_intensity(image, config.data.intensity_shift, config.data.intensity_scale)


def group_landmarks(case: Case, manifest: LandmarkManifest, group: str) -> LandmarkSet:
    """The case's landmarks of `group` in manifest class order."""
    if case.landmarks is None:
        raise ConfigurationError(f'{case.case_id}: no landmark file for detector training')
    names = manifest.group_names(group)
    missing = [n for n in names if n not in case.landmarks]
    if missing:
        raise ConfigurationError(
            f'{case.case_id}: {group} detector expects {len(names) + 1} classes but landmarks {missing} are missing')
    return LandmarkSet(case.landmarks[n] for n in names)


def _check_geometry(image: Volume, target: Volume, case_id: str):
    if not image.grid.same_as(target.grid):
        raise ConfigurationError(f'{case_id}: target grid {target.grid} differs from input grid {image.grid}')


def coarse_segmentation_example(case: Case, config: EngineConfig) -> Example:
    if case.mask is None:
        raise ConfigurationError(f'{case.case_id}: no mask for segmentation training')
    _check_geometry(case.image, case.mask, case.case_id)
    image = resample(case.image, config.data.coarse_spacing, 'linear')
    mask = resample(case.mask, config.data.coarse_spacing, 'nearest')
    _check_geometry(image, mask, case.case_id)
    return Example(model_input(image, config).data, mask.data, case.case_id)


def coarse_detection_example(case: Case, config: EngineConfig, manifest: LandmarkManifest, group: str) -> Example:
    image = resample(case.image, config.data.coarse_spacing, 'linear')
    target = encode_landmarks(group_landmarks(case, manifest, group), image.grid, config.data.sphere_radius)
    return Example(model_input(image, config).data, target.data, case.case_id)


def tooth_roi_for(lms: LandmarkSet, manifest: LandmarkManifest, config: EngineConfig) -> RoiBox:
    return compute_tooth_roi(lms, manifest.tooth_anchors, config.stage.tooth_patch_extent_mm,
                             config.data.tooth_spacing)


def tooth_example(case: Case, config: EngineConfig, manifest: LandmarkManifest,
                  offset_mm=(0.0, 0.0, 0.0)) -> Example:
    """Tooth patch cropped at the tooth spacing around the ground-truth anchors."""
    roi = tooth_roi_for(case.landmarks, manifest, config)
    roi = RoiBox.around(roi.center + np.asarray(offset_mm), roi.size, roi.target_spacing)
    image = crop(case.image, roi, 'linear')
    target = encode_landmarks(group_landmarks(case, manifest, 'teeth'), image.grid, config.data.sphere_radius)
    return Example(model_input(image, config).data, target.data, case.case_id)


def stack_examples(examples: Sequence[Example], divisor: int) -> List[Example]:
    """Zero-pad every example to one shape divisible by `divisor`."""
    if not examples:
        return []
    shape = np.max([ex.image.shape for ex in examples], axis=0)
    target = tuple(int(math.ceil(n / divisor) * divisor) for n in shape)
    out = []
    for ex in examples:
        pad = [(0, t - n) for n, t in zip(ex.image.shape, target)]
        out.append(Example(np.pad(ex.image, pad).astype(np.float32), np.pad(ex.target, pad), ex.case_id))
    return out


def flip_permutation(names: Sequence[str], flip_pairs: Sequence[Tuple[str, str]]) -> np.ndarray:
    """Class relabelling for a left-right flip: paired landmarks swap class ids."""
    perm = np.arange(len(names) + 1)
    index = {n: i + 1 for i, n in enumerate(names)}
    for a, b in flip_pairs:
        if a in index and b in index:
            perm[index[a]], perm[index[b]] = index[b], index[a]
    return perm


def flip_batch(x: torch.Tensor, y: torch.Tensor, perm: Optional[np.ndarray]):
    """Mirror a (B, 1, X, Y, Z) / (B, X, Y, Z) batch along x and relabel paired classes."""
    x = torch.flip(x, dims=[2])
    y = torch.flip(y, dims=[1])
    if perm is not None:
        y = torch.as_tensor(perm, dtype=y.dtype)[y]
    return x, y


def _loader(dataset: Dataset, config: EngineConfig, epoch: int) -> DataLoader:
    generator = torch.Generator()
    generator.manual_seed(config.train.seed * 1000003 + epoch)
    return DataLoader(dataset, batch_size=config.train.batch_size, shuffle=True, generator=generator,
                      num_workers=config.train.num_workers)


def _is_better(value, best, higher_is_better: bool) -> bool:
    if value is None:
        return False
    if best is None:
        return True
    return value > best if higher_is_better else value < best


def fit(model: VoxelClassifier, train_set: Callable[[int], Dataset], validate: Callable[[VoxelClassifier], dict],
        config: EngineConfig, stage: str, metric: str, higher_is_better: bool,
        flip_perm: Optional[np.ndarray] = None, spacing=None) -> TrainingResult:
    """Shared epoch loop: Adam with step decay, focal loss, best-validation checkpoint.

    `train_set(epoch)` yields the epoch's examples; `validate(model)` returns a
    dict with 'val_loss' and `metric`.
    """
    tc = config.train
    alpha = config.alpha(model.spec.num_classes)
    torch.manual_seed(tc.seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=tc.learning_rate)
    scheduler = torch.optim.lr_scheduler.StepLR(optimizer, step_size=tc.lr_step_epochs, gamma=tc.lr_decay)
    aug_rng = np.random.default_rng(tc.seed)
    best_state = copy.deepcopy(model.state_dict())
    best_value, best_epoch = None, 0
    history = []
    disable = get_verbosity() == 'quiet'
    for epoch in range(1, tc.epochs + 1):
        model.train()
        total, count = 0.0, 0
        loader = _loader(train_set(epoch), config, epoch)
        for batch_id, (x, y) in enumerate(tqdm(loader, desc=f'{stage} epoch {epoch}', leave=False, disable=disable)):
            if tc.flip_augmentation and aug_rng.random() < 0.5:
                x, y = flip_batch(x, y, flip_perm)
            optimizer.zero_grad()
            loss = focal_loss(model(x), y, tc.focal_gamma, alpha)
            if not torch.isfinite(loss):
                raise DivergenceError(f'{stage}: non-finite loss at epoch {epoch}, batch {batch_id}',
                                      batch_id=(epoch, batch_id))
            loss.backward()
            optimizer.step()
            total += float(loss.item()) * x.shape[0]
            count += x.shape[0]
        lr = optimizer.param_groups[0]['lr']
        scheduler.step()
        row = {'epoch': epoch, 'loss': total / max(count, 1), 'lr': lr}
        row.update(validate(model))
        history.append(row)
        logger.info(f"{stage} epoch {epoch}/{tc.epochs}: loss {row['loss']:.5f}, "
                    f"val_loss {row['val_loss']:.5f}, {metric} {row[metric]}")
        if best_epoch == 0 or _is_better(row[metric], best_value, higher_is_better):
            best_value, best_epoch = row[metric], epoch
            best_state = copy.deepcopy(model.state_dict())
    model.load_state_dict(best_state)
    weights = ModelWeights.from_model(model, stage, spacing=spacing, best_epoch=best_epoch,
                                      seed=tc.seed, epochs=tc.epochs, metric=metric, best_value=best_value)
    return TrainingResult(weights, history, best_epoch, metric)


@torch.no_grad()
def _validation_loss(model: VoxelClassifier, examples: Sequence[Example], config: EngineConfig) -> float:
    if not examples:
        return float('nan')
    model.eval()
    alpha = config.alpha(model.spec.num_classes)
    losses = []
    for ex in examples:
        x = torch.from_numpy(ex.image[None, None])
        y = torch.from_numpy(ex.target[None].astype(np.int64))
        losses.append(float(focal_loss(model(x), y, config.train.focal_gamma, alpha)))
    return float(np.mean(losses))


def _require(cases: Sequence[Case], what: str):
    if not cases:
        raise ConfigurationError(f'{what}: the training split is empty')


def _validation_cases(manifest: DatasetManifest, train: List[Case], what: str) -> List[Case]:
    val = load_cases(manifest, 'val')
    if not val:
        logger.warning(f'{what}: no validation cases; validating on the training split')
        return train
    return val


def train_coarse_segmentation(dataset: DatasetManifest, config: EngineConfig,
                              init: Optional[ModelWeights] = None) -> TrainingResult:
    """Coarse 3-class segmentation (background, midface, mandible), best mean DSC kept."""
    train = load_cases(dataset, 'train')
    _require(train, 'coarse-seg')
    val = _validation_cases(dataset, train, 'coarse-seg')
    spec = VoxelClassifierSpec(SEGMENTATION_CLASSES, depth=config.model.depth,
                               base_channels=config.model.base_channels)
    model = instantiate(transfer_init(spec, init, config.train.seed)[0]) if init else build_model(spec, config.train.seed)
    train_examples = ExampleDataset(stack_examples([coarse_segmentation_example(c, config) for c in train], spec.divisor))
    val_examples = stack_examples([coarse_segmentation_example(c, config) for c in val], spec.divisor)
    val_volumes = [(resample(c.image, config.data.coarse_spacing, 'linear'),
                    resample(c.mask, config.data.coarse_spacing, 'nearest')) for c in val]

    def validate(m):
        scores = []
        for image, mask in val_volumes:
            labels = predict_labels(m, model_input(image, config))
            scores += [dice(labels, mask, 1), dice(labels, mask, 2)]
        return {'val_loss': _validation_loss(m, val_examples, config), 'val_dsc': float(np.mean(scores))}

    perm = np.arange(SEGMENTATION_CLASSES)
    return fit(model, lambda epoch: train_examples, validate, config, 'coarse-seg', 'val_dsc', True,
               flip_perm=perm, spacing=(config.data.coarse_spacing,) * 3)


def predict_labels(model: VoxelClassifier, image: Volume) -> Volume:
    prob = predict_volume(model, image)
    return Volume(np.argmax(prob.data, axis=0).astype(np.uint8), image.spacing, image.origin, 'label')


def _detector_model(spec: VoxelClassifierSpec, source: Optional[ModelWeights], transfer: bool,
                    config: EngineConfig) -> Tuple[VoxelClassifier, dict]:
    if transfer:
        if source is None:
            raise ConfigurationError('transfer initialisation needs source weights (or disable transfer)')
        weights, report = transfer_init(spec, source, config.train.seed)
        return instantiate(weights), report.to_dict()
    return build_model(spec, config.train.seed), {}


def train_landmark_detector(dataset: DatasetManifest, source: Optional[ModelWeights], group: str,
                            config: EngineConfig, transfer: bool = True) -> TrainingResult:
    """Landmark detector for `group`; bone and face at the coarse spacing, teeth on tooth patches.

    Validation decodes the predicted sphere masks and keeps the epoch with the
    lowest RMSE.
    """
    if group not in GROUPS:
        raise ConfigurationError(f'unknown landmark group {group!r}')
    manifest = dataset.landmarks()
    train = load_cases(dataset, 'train')
    _require(train, f'{group}-det')
    val = _validation_cases(dataset, train, f'{group}-det')
    spec = VoxelClassifierSpec(manifest.num_classes(group), depth=config.model.depth,
                               base_channels=config.model.base_channels)
    model, transfer_report = _detector_model(spec, source, transfer, config)
    template = manifest.template(group)
    for case in train + val:
        group_landmarks(case, manifest, group)

    if group == 'teeth':
        spacing = (config.data.tooth_spacing,) * 3
        rng = np.random.default_rng(config.train.seed)
        jitter = config.train.landmark_jitter_mm / 2.0

        def train_set(epoch):
            examples = []
            for case in train:
                examples.append(tooth_example(case, config, manifest))
                for _ in range(config.train.patches_per_volume - 1):
                    examples.append(tooth_example(case, config, manifest, rng.uniform(-jitter, jitter, 3)))
            return ExampleDataset(stack_examples(examples, spec.divisor))

        val_examples = stack_examples([tooth_example(c, config, manifest) for c in val], spec.divisor)
        val_inputs = []
        for c in val:
            roi = tooth_roi_for(c.landmarks, manifest, config)
            val_inputs.append((model_input(crop(c.image, roi, 'linear'), config), c.landmarks))
    else:
        spacing = (config.data.coarse_spacing,) * 3
        train_examples = ExampleDataset(stack_examples(
            [coarse_detection_example(c, config, manifest, group) for c in train], spec.divisor))
        val_examples = stack_examples([coarse_detection_example(c, config, manifest, group) for c in val],
                                      spec.divisor)

        def train_set(epoch):
            return train_examples

        val_inputs = [(model_input(resample(c.image, config.data.coarse_spacing, 'linear'), config), c.landmarks)
                      for c in val]

    def validate(m):
        errors = []
        for image, gt in val_inputs:
            pred = decode_landmarks(predict_volume(m, image), template, config.stage.decode_threshold,
                                    config.stage.decode_method)
            errors.append(landmark_rmse(pred, gt, group))
        defined = [e for e in errors if e is not None]
        return {'val_loss': _validation_loss(m, val_examples, config),
                'val_rmse': float(np.mean(defined)) if defined else None}

    perm = flip_permutation(manifest.group_names(group), manifest.flip_pairs)
    result = fit(model, train_set, validate, config, f'{group}-det', 'val_rmse', False,
                 flip_perm=perm, spacing=spacing)
    result.weights.metadata.update({'group': group, 'landmarks': manifest.group_names(group),
                                    'transfer': transfer_report})
    return result


@dataclass
class TrainingPatch:
    image: Volume
    target: Volume
    roi: RoiBox
    from_foreground: bool = False


@dataclass
class PatchSampler:
    """Draws patch centres over one volume.

    Rules: 'foreground' picks a foreground voxel with probability
    `foreground_fraction` and a uniform position otherwise; 'uniform' ignores the
    mask; 'landmark' centres on a random one of `landmark_points` plus a uniform
    jitter of +-`jitter_mm`. A foreground rule on an all-background mask falls
    back to uniform and sets `fell_back`.
    """
    mask: Volume
    rule: str = 'foreground'
    foreground_fraction: float = 0.5
    landmark_points: Optional[np.ndarray] = None
    jitter_mm: float = 5.0
    seed: int = 0
    provenance: Optional[Provenance] = None
    fell_back: bool = False
    _rng: np.random.Generator = field(init=False, repr=False)
    _foreground: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.rule not in SAMPLING_RULES:
            raise InvalidArgumentError(f'unknown sampling rule {self.rule!r}')
        self._rng = np.random.default_rng(self.seed)
        self._foreground = np.flatnonzero(self.mask.data > 0) if self.rule == 'foreground' else np.empty(0, int)
        if self.rule == 'foreground' and self._foreground.size == 0:
            self.fell_back = True
            warn(self.provenance, 'trainer', 'no foreground voxels for foreground-biased sampling; sampling uniformly')
        if self.rule == 'landmark':
            pts = np.asarray(self.landmark_points if self.landmark_points is not None else [], dtype=np.float64)
            if pts.size == 0:
                raise InvalidArgumentError('landmark sampling needs at least one landmark position')
            self.landmark_points = pts.reshape(-1, 3)

    def draw_center(self) -> Tuple[np.ndarray, bool]:
        grid = self.mask.grid
        rng = self._rng
        if self.rule == 'landmark':
            p = self.landmark_points[rng.integers(len(self.landmark_points))]
            return p + rng.uniform(-self.jitter_mm, self.jitter_mm, 3), False
        if self.rule == 'foreground' and not self.fell_back and rng.random() < self.foreground_fraction:
            flat = self._foreground[rng.integers(self._foreground.size)]
            idx = np.asarray(np.unravel_index(flat, grid.shape), dtype=np.float64)
            return grid.voxel_to_world(idx + rng.uniform(-0.5, 0.5, 3)), True
        return rng.uniform(grid.lower_edge, grid.upper_edge), False


def sample_refinement_patches(image: Volume, mask: Optional[Volume], patch_size, spacing, rule: str = 'foreground',
                              count: Optional[int] = None, seed: int = 0, foreground_fraction: float = 0.5,
                              landmarks: Optional[LandmarkSet] = None, landmark_names: Sequence[str] = (),
                              jitter_mm: float = 5.0, sphere_radius: int = 3,
                              provenance: Provenance = None) -> Iterator[TrainingPatch]:
    """Stream of patches cropped at `spacing`, each recording its world placement.

    Targets come from `mask` (nearest) when given, else from the sphere
    encoding of `landmarks`. Endless unless `count` is set.
    """
    patch = np.broadcast_to(np.asarray(patch_size, dtype=np.int64), (3,))
    step = np.broadcast_to(np.asarray(spacing, dtype=np.float64), (3,))
    extent = patch * step
    if mask is None and landmarks is None:
        raise InvalidArgumentError('patches need a mask or landmark targets')
    reference = mask if mask is not None else Volume(np.ones(image.shape, dtype=np.uint8), image.spacing,
                                                     image.origin, 'label')
    points = None
    if rule == 'landmark':
        source = landmarks if landmarks is not None else LandmarkSet()
        names = list(landmark_names) or source.names
        points = [source[n].position for n in names if n in source and source[n].present]
    sampler = PatchSampler(reference, rule, foreground_fraction, None if points is None else np.asarray(points),
                           jitter_mm, seed, provenance)
    volume_extent = np.asarray(image.shape) * np.asarray(image.spacing)
    if np.any(extent > volume_extent + 1e-9):
        warn(provenance, 'trainer', f'patch extent {tuple(extent)} mm exceeds the volume extent '
                                    f'{tuple(volume_extent)} mm; patches are zero-padded')
    drawn = 0
    while count is None or drawn < count:
        center, from_fg = sampler.draw_center()
        roi = RoiBox.around(center, extent, tuple(step))
        sub = crop(image, roi, 'linear')
        if mask is not None:
            target = crop(mask, roi, 'nearest')
        else:
            target = encode_landmarks(landmarks, roi.grid, sphere_radius)
        drawn += 1
        yield TrainingPatch(sub, target, roi, from_fg)


def _refinement_patches(case: Case, config: EngineConfig, rule: str, count: int, seed: int,
                        landmark_names: Sequence[str]) -> List[Example]:
    out = []
    on_foreground = 0
    for p in sample_refinement_patches(case.image, case.mask, config.stage.refine_patch, config.data.refine_spacing,
                                       rule=rule, count=count, seed=seed,
                                       foreground_fraction=config.train.foreground_fraction,
                                       landmarks=case.landmarks, landmark_names=landmark_names,
                                       jitter_mm=config.train.landmark_jitter_mm):
        out.append(Example(model_input(p.image, config).data, p.target.data, case.case_id))
        on_foreground += p.from_foreground
    logger.debug(f'{case.case_id}: {on_foreground}/{len(out)} {rule} patches centred on foreground')
    return out


def train_refinement_segmentation(dataset: DatasetManifest, config: EngineConfig, stage: str = 'refine-seg',
                                  init: Optional[ModelWeights] = None) -> TrainingResult:
    """Patch-trained segmentation at the refinement spacing.

    refine-seg samples foreground-biased patches over the whole image; thin-seg
    centres patches on the thin-bone landmark pair. Validation uses a fixed set
    of patches and their mean DSC over both structures.
    """
    if stage not in ('refine-seg', 'thin-seg'):
        raise ConfigurationError(f'{stage} is not a refinement stage')
    train = load_cases(dataset, 'train')
    _require(train, stage)
    val = _validation_cases(dataset, train, stage)
    for case in train + val:
        if case.mask is None:
            raise ConfigurationError(f'{case.case_id}: no mask for {stage} training')
    rule, names = 'foreground', ()
    if stage == 'thin-seg':
        rule, names = 'landmark', dataset.landmarks().thin_bone_pair
    spec = VoxelClassifierSpec(SEGMENTATION_CLASSES, depth=config.model.depth,
                               base_channels=config.model.base_channels)
    for p in config.stage.refine_patch:
        if p % spec.divisor:
            raise ConfigurationError(f'refine_patch {config.stage.refine_patch} must be divisible by {spec.divisor}')
    model = instantiate(transfer_init(spec, init, config.train.seed)[0]) if init else build_model(spec, config.train.seed)
    seed = config.train.seed

    def train_set(epoch):
        examples = []
        for i, case in enumerate(train):
            examples += _refinement_patches(case, config, rule, config.train.patches_per_volume,
                                            seed * 7919 + epoch * 104729 + i, names)
        return ExampleDataset(examples)

    val_examples = []
    for i, case in enumerate(val):
        val_examples += _refinement_patches(case, config, rule, config.train.validation_patches, seed + 17 * i + 1,
                                            names)
    spacing = (config.data.refine_spacing,) * 3

    def validate(m):
        scores = []
        with torch.no_grad():
            m.eval()
            for ex in val_examples:
                pred = torch.argmax(m(torch.from_numpy(ex.image[None, None])), dim=1)[0].numpy()
                pv = Volume(pred.astype(np.uint8), spacing, (0.0, 0.0, 0.0), 'label')
                gv = Volume(ex.target, spacing, (0.0, 0.0, 0.0), 'label')
                scores += [dice(pv, gv, 1), dice(pv, gv, 2)]
        return {'val_loss': _validation_loss(m, val_examples, config), 'val_dsc': float(np.mean(scores))}

    return fit(model, train_set, validate, config, stage, 'val_dsc', True,
               flip_perm=np.arange(SEGMENTATION_CLASSES), spacing=spacing)
