"""
The shared 3D U-Net voxel classifier, focal loss and transfer initialisation.

Every stage (coarse segmentation, the landmark detectors and the refinement
models) uses the same architecture so that weights can be carried from one
model to another.
"""

import hashlib
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from engine.errors import (
    BundleError,
    ConfigurationError,
    InvalidArgumentError,
    InvalidTargetError,
    ShapeError,
    StructuralMismatchError,
)
from engine.volume import Volume
from utils.logger import get_logger

logger = get_logger()

ARCHIVE_FORMAT = 'skullengine-weights/1'
AXES = ('x', 'y', 'z')


@dataclass(frozen=True)
class VoxelClassifierSpec:
    num_classes: int
    in_channels: int = 1
    depth: int = 4
    base_channels: int = 16
    growth: int = 2

    def __post_init__(self):
        if self.num_classes < 2:
            raise InvalidArgumentError(f'num_classes must be >= 2, got {self.num_classes}')
        if self.depth < 2:
            raise InvalidArgumentError(f'depth must be >= 2, got {self.depth}')
        if self.in_channels < 1 or self.base_channels < 1 or self.growth < 1:
            raise InvalidArgumentError('in_channels, base_channels and growth must be positive')

    @property
    def divisor(self) -> int:
        """Spatial extents must be multiples of this."""
        return 2 ** (self.depth - 1)

    def channels(self, level: int) -> int:
        return self.base_channels * self.growth ** level

    def with_classes(self, num_classes: int) -> 'VoxelClassifierSpec':
        return VoxelClassifierSpec(num_classes, self.in_channels, self.depth, self.base_channels, self.growth)

    def to_dict(self) -> dict:
        return asdict(self)


class ConvBlock(nn.Sequential):
    """Two 3x3x3 convolutions, each followed by instance norm and ReLU."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__(
            nn.Conv3d(in_channels, out_channels, kernel_size=3, padding=1),
            nn.InstanceNorm3d(out_channels, affine=True),
            nn.ReLU(inplace=True),
            nn.Conv3d(out_channels, out_channels, kernel_size=3, padding=1),
            nn.InstanceNorm3d(out_channels, affine=True),
            nn.ReLU(inplace=True),
        )


class VoxelClassifier(nn.Module):
    """3D U-Net: max-pool down, trilinear up, skip concatenation, 1x1x1 head."""

    def __init__(self, spec: VoxelClassifierSpec):
        super().__init__()
        self.spec = spec
        self.encoders = nn.ModuleList()
        in_ch = spec.in_channels
        for level in range(spec.depth):
            self.encoders.append(ConvBlock(in_ch, spec.channels(level)))
            in_ch = spec.channels(level)
        self.decoders = nn.ModuleList()
        for level in reversed(range(spec.depth - 1)):
            self.decoders.append(ConvBlock(spec.channels(level + 1) + spec.channels(level), spec.channels(level)))
        self.head = nn.Conv3d(spec.channels(0), spec.num_classes, kernel_size=1)

    def check_input(self, shape: Sequence[int]):
        for axis, n in zip(AXES, shape[-3:]):
            if n % self.spec.divisor:
                raise ShapeError(
                    f'input extent {n} along axis {axis} is not divisible by {self.spec.divisor} '
                    f'(depth {self.spec.depth})', axis=axis)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        self.check_input(x.shape)
        skips = []
        for level, encoder in enumerate(self.encoders):
            if level:
                x = F.max_pool3d(x, kernel_size=2)
            x = encoder(x)
            skips.append(x)
        skips.pop()
        for decoder in self.decoders:
            x = F.interpolate(x, scale_factor=2, mode='trilinear', align_corners=False)
            x = decoder(torch.cat([skips.pop(), x], dim=1))
        return self.head(x)


def _fresh_init(module: nn.Module):
    """Fan-in scaled uniform weights, zero biases, identity norm affines."""
    for m in module.modules():
        if isinstance(m, nn.Conv3d):
            fan_in = m.in_channels * math.prod(m.kernel_size)
            bound = math.sqrt(6.0 / fan_in)
            with torch.no_grad():
                m.weight.uniform_(-bound, bound)
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, nn.InstanceNorm3d) and m.affine:
            with torch.no_grad():
                m.weight.fill_(1.0)
                m.bias.zero_()


def build_model(spec: VoxelClassifierSpec, seed: int = 0) -> VoxelClassifier:
    """Deterministically initialised classifier for `spec`."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = VoxelClassifier(spec)
        _fresh_init(model)
    return model


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def focal_loss(logits: torch.Tensor, target: torch.Tensor, gamma: float = 2.0,
               alpha: Optional[Sequence[float]] = None) -> torch.Tensor:
    """Mean over voxels of -alpha_t (1 - p_t)^gamma log(p_t).

    logits: (B, C, X, Y, Z) scores; target: (B, X, Y, Z) class ids.
    alpha defaults to 1 for every class.
    """
    if gamma < 0:
        raise InvalidArgumentError(f'gamma must be >= 0, got {gamma}')
    num_classes = logits.shape[1]
    if logits.shape[0] != target.shape[0] or logits.shape[2:] != target.shape[1:]:
        raise InvalidTargetError(f'logits {tuple(logits.shape)} and target {tuple(target.shape)} disagree')
    target = target.long()
    if target.numel() and (int(target.min()) < 0 or int(target.max()) >= num_classes):
        raise InvalidTargetError(f'target labels must lie in [0, {num_classes - 1}]')
    log_p = F.log_softmax(logits, dim=1)
    log_pt = log_p.gather(1, target.unsqueeze(1)).squeeze(1)
    pt = log_pt.exp()
    loss = -((1.0 - pt) ** gamma) * log_pt
    if alpha is not None:
        alpha_t = torch.as_tensor(alpha, dtype=logits.dtype, device=logits.device)
        if alpha_t.numel() != num_classes:
            raise InvalidArgumentError(f'alpha has {alpha_t.numel()} entries for {num_classes} classes')
        loss = alpha_t[target] * loss
    return loss.mean()


@dataclass
class ModelWeights:
    """Named tensors plus the metadata needed to rebuild and audit a model."""
    spec: VoxelClassifierSpec
    tensors: Dict[str, torch.Tensor]
    stage: str = 'untrained'
    spacing: Optional[Tuple[float, float, float]] = None
    metadata: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: VoxelClassifier, stage: str, spacing=None, **metadata) -> 'ModelWeights':
        tensors = OrderedDict((k, v.detach().clone()) for k, v in model.state_dict().items())
        return cls(model.spec, tensors, stage, None if spacing is None else tuple(spacing), dict(metadata))

    def manifest(self) -> dict:
        return {
            'format': ARCHIVE_FORMAT,
            'spec': self.spec.to_dict(),
            'stage': self.stage,
            'spacing': None if self.spacing is None else list(self.spacing),
            'tensors': {k: {'shape': list(t.shape), 'sha256': tensor_checksum(t)} for k, t in self.tensors.items()},
            'metadata': self.metadata,
        }


def tensor_checksum(t: torch.Tensor) -> str:
    return hashlib.sha256(t.detach().cpu().contiguous().numpy().tobytes()).hexdigest()


def instantiate(weights: ModelWeights) -> VoxelClassifier:
    """Model carrying `weights`, in eval mode."""
    model = VoxelClassifier(weights.spec)
    missing = set(model.state_dict()) ^ set(weights.tensors)
    if missing:
        raise StructuralMismatchError(f'weights do not match the classifier layer graph: {sorted(missing)}')
    model.load_state_dict(weights.tensors)
    model.eval()
    return model


def save_weights(weights: ModelWeights, path) -> str:
    """Write a single archive (manifest + tensors); returns its sha256."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({'manifest': weights.manifest(), 'tensors': dict(weights.tensors)}, str(path))
    return file_checksum(path)


def load_weights(path) -> ModelWeights:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f'weight archive not found: {path}')
    try:
        archive = torch.load(str(path), map_location='cpu', weights_only=True)
        manifest, tensors = archive['manifest'], archive['tensors']
    except Exception as e:
        raise BundleError(f'cannot read weight archive {path}: {e}') from e
    if manifest.get('format') != ARCHIVE_FORMAT:
        raise BundleError(f'{path}: unsupported archive format {manifest.get("format")!r}')
    for name, entry in manifest['tensors'].items():
        t = tensors.get(name)
        if t is None or list(t.shape) != entry['shape'] or tensor_checksum(t) != entry['sha256']:
            raise BundleError(f'{path}: tensor {name!r} fails its manifest check')
    spacing = manifest.get('spacing')
    return ModelWeights(
        spec=VoxelClassifierSpec(**manifest['spec']),
        tensors=OrderedDict((k, tensors[k]) for k in manifest['tensors']),
        stage=manifest.get('stage', 'untrained'),
        spacing=None if spacing is None else tuple(spacing),
        metadata=manifest.get('metadata', {}),
    )


def file_checksum(path) -> str:
    h = hashlib.sha256()
    with open(path, 'rb') as f:
        for chunk in iter(lambda: f.read(1 << 20), b''):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class TransferReport:
    copied: List[str]
    reinitialized: List[str]

    def to_dict(self) -> dict:
        return {'copied': list(self.copied), 'reinitialized': list(self.reinitialized)}


def transfer_init(target_spec: VoxelClassifierSpec, source: ModelWeights,
                  seed: int = 0) -> Tuple[ModelWeights, TransferReport]:
    """Initialise `target_spec` from `source`: copy every same-name, same-shape tensor.

    Tensors whose shape differs (the head, when class counts differ) keep a
    fresh initialisation drawn with `seed`.
    """
    src = source.spec
    for attr in ('in_channels', 'depth', 'base_channels', 'growth'):
        if getattr(src, attr) != getattr(target_spec, attr):
            raise StructuralMismatchError(
                f'cannot transfer: {attr} differs (source {getattr(src, attr)}, target {getattr(target_spec, attr)})')
    fresh = build_model(target_spec, seed=seed).state_dict()
    tensors = OrderedDict()
    copied, reinitialized = [], []
    for name, t in fresh.items():
        s = source.tensors.get(name)
        if s is not None and tuple(s.shape) == tuple(t.shape):
            tensors[name] = s.detach().clone()
            copied.append(name)
        else:
            tensors[name] = t.detach().clone()
            reinitialized.append(name)
    report = TransferReport(copied, reinitialized)
    logger.info(f'Transfer init from {source.stage}: {len(copied)} tensors copied, '
                f'{len(reinitialized)} re-initialised')
    weights = ModelWeights(target_spec, tensors, stage='transfer-init', spacing=source.spacing,
                           metadata={'transfer': report.to_dict(), 'source_stage': source.stage, 'seed': seed})
    return weights, report


def pad_to_multiple(array: np.ndarray, divisor: int) -> Tuple[np.ndarray, Tuple[int, int, int]]:
    """Zero-pad the trailing three axes up to multiples of `divisor`."""
    shape = array.shape[-3:]
    target = tuple(int(math.ceil(n / divisor) * divisor) for n in shape)
    pad = [(0, 0)] * (array.ndim - 3) + [(0, t - n) for n, t in zip(shape, target)]
    return np.pad(array, pad), shape


@torch.no_grad()
def predict_volume(model: VoxelClassifier, image: Volume) -> Volume:
    """Whole-volume softmax probabilities (C, x, y, z) for an intensity volume."""
    model.eval()
    padded, shape = pad_to_multiple(image.data.astype(np.float32), model.spec.divisor)
    x = torch.from_numpy(np.ascontiguousarray(padded))[None, None]
    probs = torch.softmax(model(x), dim=1)[0, :, :shape[0], :shape[1], :shape[2]]
    return Volume(probs.numpy(), image.spacing, image.origin, 'probability')


def check_classes(model: VoxelClassifier, expected: int, role: str):
    if model.spec.num_classes != expected:
        raise ConfigurationError(f'{role} model predicts {model.spec.num_classes} classes, expected {expected}')
