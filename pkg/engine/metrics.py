"""
Evaluation metrics and the comparison report.

Undefined values (empty denominators, no contributing landmarks) are returned
as None and never enter a mean; the report lists them as footnotes.
"""

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

import markdown
import numpy as np

from engine.errors import GeometryMismatchError
from engine.landmarks import GROUPS, LandmarkSet
from engine.volume import RoiBox, Volume

STRUCTURES = {1: 'midface', 2: 'mandible'}
OVERLAP_METRICS = ('dsc', 'sen', 'ppv')
LANDMARK_METRICS = ('rmse', 'tpr')
TPR_NOTE = ('TPR counts a ground-truth landmark as found when it is predicted present and '
            'within tau mm of its true position.')


def _sets(pred: Volume, gt: Volume, label: int):
    if not pred.grid.same_as(gt.grid):
        raise GeometryMismatchError(f'prediction grid {pred.grid} differs from ground truth grid {gt.grid}')
    p = pred.data == label
    g = gt.data == label
    return p, g


def _counts(pred: Volume, gt: Volume, label: int):
    p, g = _sets(pred, gt, label)
    return int(np.count_nonzero(p & g)), int(np.count_nonzero(p)), int(np.count_nonzero(g))


def dice(pred: Volume, gt: Volume, label: int) -> float:
    """2|P n G| / (|P| + |G|); 1.0 when both sets are empty."""
    inter, n_p, n_g = _counts(pred, gt, label)
    if n_p + n_g == 0:
        return 1.0
    return 2.0 * inter / (n_p + n_g)


def sensitivity(pred: Volume, gt: Volume, label: int) -> Optional[float]:
    inter, _, n_g = _counts(pred, gt, label)
    return None if n_g == 0 else inter / n_g


def ppv(pred: Volume, gt: Volume, label: int) -> Optional[float]:
    inter, n_p, _ = _counts(pred, gt, label)
    return None if n_p == 0 else inter / n_p


def roi_dice(pred: Volume, gt: Volume, label: int, rois: Sequence[RoiBox]) -> float:
    """Dice restricted to voxels whose centres fall inside any of `rois`."""
    p, g = _sets(pred, gt, label)
    grid = gt.grid
    region = np.zeros(grid.shape, dtype=bool)
    for roi in rois:
        region |= grid.box_mask(roi.lower, roi.upper)
    inter = np.count_nonzero(p & g & region)
    total = np.count_nonzero(p & region) + np.count_nonzero(g & region)
    return 1.0 if total == 0 else 2.0 * inter / total


def _pairs(pred: LandmarkSet, gt: LandmarkSet, group: str):
    for g in gt.group(group):
        yield g, pred.get(g.name)


def landmark_rmse(pred: LandmarkSet, gt: LandmarkSet, group: str) -> Optional[float]:
    """sqrt(mean squared distance, mm) over landmarks present in both sets."""
    sq = []
    for g, p in _pairs(pred, gt, group):
        if g.present and p is not None and p.present:
            sq.append(float(np.sum((np.asarray(p.position) - np.asarray(g.position)) ** 2)))
    if not sq:
        return None
    return math.sqrt(sum(sq) / len(sq))


def landmark_tpr(pred: LandmarkSet, gt: LandmarkSet, group: str, tau_mm: float = 4.0) -> Optional[float]:
    """Percentage of present ground-truth landmarks found within `tau_mm`."""
    total, hits = 0, 0
    for g, p in _pairs(pred, gt, group):
        if not g.present:
            continue
        total += 1
        if p is not None and p.present:
            if np.linalg.norm(np.asarray(p.position) - np.asarray(g.position)) <= tau_mm:
                hits += 1
    if total == 0:
        return None
    return 100.0 * hits / total


@dataclass
class CaseMetrics:
    case_id: str
    structures: Dict[str, Dict[str, Optional[float]]] = field(default_factory=dict)
    landmarks: Dict[str, Dict[str, Optional[float]]] = field(default_factory=dict)
    failed: bool = False
    note: str = ''
    modality: Optional[str] = None

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate_case(case_id: str, pred_mask: Volume, gt_mask: Volume,
                  pred_lms: LandmarkSet, gt_lms: LandmarkSet, tau_mm: float = 4.0,
                  modality: Optional[str] = None) -> CaseMetrics:
    m = CaseMetrics(case_id, modality=modality)
    for label, name in STRUCTURES.items():
        m.structures[name] = {
            'dsc': dice(pred_mask, gt_mask, label),
            'sen': sensitivity(pred_mask, gt_mask, label),
            'ppv': ppv(pred_mask, gt_mask, label),
        }
    for group in GROUPS:
        m.landmarks[group] = {
            'rmse': landmark_rmse(pred_lms, gt_lms, group),
            'tpr': landmark_tpr(pred_lms, gt_lms, group, tau_mm),
        }
    return m


def failed_case(case_id: str, reason: str, modality: Optional[str] = None) -> CaseMetrics:
    return CaseMetrics(case_id, failed=True, note=reason, modality=modality)


@dataclass
class Aggregate:
    mean: Optional[float]
    sd: Optional[float]
    n: int

    def to_dict(self) -> dict:
        return asdict(self)


def aggregate(values: Iterable[Optional[float]]) -> Aggregate:
    """Mean and population SD over defined values."""
    defined = [v for v in values if v is not None]
    if not defined:
        return Aggregate(None, None, 0)
    arr = np.asarray(defined, dtype=np.float64)
    return Aggregate(float(arr.mean()), float(arr.std()), len(defined))


def _cell(a: Aggregate, scale: float = 1.0, digits: int = 2) -> str:
    if a.mean is None:
        return 'n/a'
    return f'{a.mean * scale:.{digits}f}±{a.sd * scale:.{digits}f}'


def _aggregates_to_dict(groups: Dict[str, Dict[str, Aggregate]]) -> dict:
    return {name: {k: a.to_dict() for k, a in ms.items()} for name, ms in groups.items()}


@dataclass
class ModalitySummary:
    """Aggregates over the non-failed cases of one modality."""
    n_cases: int
    structures: Dict[str, Dict[str, Aggregate]]
    landmarks: Dict[str, Dict[str, Aggregate]]

    def to_dict(self) -> dict:
        return {
            'n_cases': self.n_cases,
            'structures': _aggregates_to_dict(self.structures),
            'landmarks': _aggregates_to_dict(self.landmarks),
        }


@dataclass
class Report:
    tau_mm: float
    cases: List[CaseMetrics]
    structures: Dict[str, Dict[str, Aggregate]]
    landmarks: Dict[str, Dict[str, Aggregate]]
    footnotes: List[str]
    by_modality: Dict[str, ModalitySummary] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            'tau_mm': self.tau_mm,
            'tpr_definition': TPR_NOTE,
            'structures': _aggregates_to_dict(self.structures),
            'landmarks': _aggregates_to_dict(self.landmarks),
            'by_modality': {m: s.to_dict() for m, s in self.by_modality.items()},
            'cases': [c.to_dict() for c in self.cases],
            'footnotes': list(self.footnotes),
        }

    def to_text(self) -> str:
        lines = ['Bone segmentation (mean±SD, %)']
        header = ['Structure', 'DSC', 'SEN', 'PPV']
        rows = [[s] + [_cell(self.structures[s][k], 100.0, 1) for k in OVERLAP_METRICS] for s in self.structures]
        lines += _table(header, rows)
        lines += ['', f'Landmark detection (mean±SD; RMSE in mm, TPR in % at tau = {self.tau_mm:g} mm)']
        header = ['Group', 'RMSE', 'TPR']
        rows = [[g, _cell(self.landmarks[g]['rmse']), _cell(self.landmarks[g]['tpr'], digits=1)]
                for g in self.landmarks]
        lines += _table(header, rows)
        if self.by_modality:
            lines += ['', 'Per modality (DSC mean±SD in %, RMSE mean±SD in mm)']
            header = ['Modality', 'Cases'] + [f'{s} DSC' for s in self.structures] + [f'{g} RMSE' for g in self.landmarks]
            rows = [[m, str(s.n_cases)]
                    + [_cell(s.structures[n]['dsc'], 100.0, 1) for n in self.structures]
                    + [_cell(s.landmarks[g]['rmse']) for g in self.landmarks]
                    for m, s in self.by_modality.items()]
            lines += _table(header, rows)
        lines += ['', f'Cases evaluated: {sum(not c.failed for c in self.cases)} of {len(self.cases)}', '']
        lines += [f'[{i + 1}] {note}' for i, note in enumerate(self.footnotes)]
        return '\n'.join(lines) + '\n'

    def to_markdown(self) -> str:
        text = self.to_text().splitlines()
        out = []
        for line in text:
            if line.startswith('|') or not line:
                out.append(line)
            elif line.startswith('['):
                out.append(f'- {line}')
            else:
                out.append(f'**{line}**\n')
        return '\n'.join(out) + '\n'

    def to_html(self) -> str:
        return markdown_to_html(self.to_markdown())

    def write(self, path):
        """Write <path> (JSON) plus .txt and .html renderings next to it."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2) + '\n', encoding='utf-8')
        path.with_suffix('.txt').write_text(self.to_text(), encoding='utf-8')
        path.with_suffix('.html').write_text(self.to_html(), encoding='utf-8')


def _table(header: List[str], rows: List[List[str]]) -> List[str]:
    lines = ['| ' + ' | '.join(header) + ' |', '|' + '|'.join(['---'] * len(header)) + '|']
    lines += ['| ' + ' | '.join(r) + ' |' for r in rows]
    return lines


def markdown_to_html(markdown_text: str) -> str:
    if not markdown_text:
        return ''
    body = markdown.markdown(markdown_text, extensions=['tables', 'sane_lists'], output_format='html5')
    return f'<!DOCTYPE html>\n<html><head><meta charset="utf-8"><title>SkullEngine report</title></head>\n<body>\n{body}\n</body></html>\n'


def _aggregate_cases(ok: Sequence[CaseMetrics], footnotes: Optional[List[str]] = None):
    structures = {}
    for name in STRUCTURES.values():
        structures[name] = {}
        for k in OVERLAP_METRICS:
            values = [c.structures.get(name, {}).get(k) for c in ok]
            if footnotes is not None:
                for c, v in zip(ok, values):
                    if v is None:
                        footnotes.append(f'{c.case_id}: {name} {k.upper()} undefined (empty denominator); excluded.')
            structures[name][k] = aggregate(values)
    landmarks = {}
    for group in GROUPS:
        landmarks[group] = {}
        for k in LANDMARK_METRICS:
            values = [c.landmarks.get(group, {}).get(k) for c in ok]
            if footnotes is not None:
                for c, v in zip(ok, values):
                    if v is None:
                        footnotes.append(
                            f'{c.case_id}: {group} {k.upper()} undefined (no contributing landmarks); excluded.')
            landmarks[group][k] = aggregate(values)
    return structures, landmarks


def build_report(cases: Sequence[CaseMetrics], tau_mm: float = 4.0) -> Report:
    """Mean±SD per structure / landmark group over non-failed cases.

    Cases tagged with a modality are also aggregated per modality; untagged
    cases only count towards the overall figures.
    """
    ok = [c for c in cases if not c.failed]
    footnotes = [f'TPR definition (tau = {tau_mm:g} mm): {TPR_NOTE}']
    for c in cases:
        if c.failed:
            footnotes.append(f'{c.case_id}: failed ({c.note}); excluded from aggregates.')
    structures, landmarks = _aggregate_cases(ok, footnotes)
    by_modality = {}
    for modality in sorted({c.modality for c in ok if c.modality}):
        subset = [c for c in ok if c.modality == modality]
        by_modality[modality] = ModalitySummary(len(subset), *_aggregate_cases(subset))
    return Report(tau_mm, list(cases), structures, landmarks, footnotes, by_modality)
