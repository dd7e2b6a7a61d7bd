"""
Per-patch feature vectors (mound count plus tree/water/debris area ratios)
and the training/inference datasets built from them.
"""

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Tuple

import numpy as np

from .annotations import AnnotationSet, ObjectClass
from .errors import DatasetConsistencyError, ParseError, ValidationError
from .geometry import rasterize_into
from .raster import PatchBounds, PatchGrid, iter_patches, patch_id

logger = logging.getLogger(__name__)

CSV_COLUMNS = ("block_id", "row", "col", "x1", "x2", "x3", "x4", "y")
RATIO_CLASSES = (ObjectClass.TREE, ObjectClass.WATER, ObjectClass.DEBRIS)


@dataclass(frozen=True)
class FeatureVector:
    """x1: detected mound count; x2, x3, x4: tree, water and debris area ratios."""
    x1: int
    x2: float = 0.0
    x3: float = 0.0
    x4: float = 0.0

    def __post_init__(self):
        if self.x1 < 0 or int(self.x1) != self.x1:
            raise ValidationError(f"x1 must be a non-negative integer, got {self.x1}")
        for name in ("x2", "x3", "x4"):
            value = getattr(self, name)
            if not (0.0 <= value <= 1.0):
                raise ValidationError(f"{name} must be a ratio in [0, 1], got {value}")

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.x2, self.x3, self.x4], dtype=float)


@dataclass(frozen=True)
class PatchSample:
    block_id: str
    row: int
    col: int
    features: FeatureVector
    target: Optional[float] = None

    @property
    def patch_id(self) -> str:
        return patch_id(self.block_id, self.row, self.col)


@dataclass(frozen=True)
class TrainingSet:
    """Row-major patch samples; every sample of a training set has a target."""
    samples: Tuple[PatchSample, ...] = field(default_factory=tuple)

    @property
    def N(self) -> int:
        return len(self.samples)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def has_targets(self) -> bool:
        return all(s.target is not None for s in self.samples)

    def feature_matrix(self) -> np.ndarray:
        if not self.samples:
            return np.zeros((0, 4))
        return np.vstack([s.features.as_array() for s in self.samples])

    def targets(self) -> np.ndarray:
        missing = [s.patch_id for s in self.samples if s.target is None]
        if missing:
            raise DatasetConsistencyError("samples without a target", missing)
        return np.array([s.target for s in self.samples], dtype=float)

    def to_arrays(self) -> Tuple[np.ndarray, np.ndarray]:
        return self.feature_matrix(), self.targets()

    def subset(self, indices) -> "TrainingSet":
        return TrainingSet(tuple(self.samples[i] for i in indices))

    def __add__(self, other: "TrainingSet") -> "TrainingSet":
        return TrainingSet(self.samples + other.samples)


def _check_extent(clipped: AnnotationSet, bounds: PatchBounds):
    if (clipped.x0, clipped.y0, clipped.image_width, clipped.image_height) != \
            (bounds.x0, bounds.y0, bounds.width, bounds.height):
        raise ValidationError(
            f"{clipped.image_id} covers x0={clipped.x0} y0={clipped.y0} "
            f"{clipped.image_width}x{clipped.image_height}, but patch ({bounds.row}, {bounds.col}) "
            f"is x0={bounds.x0} y0={bounds.y0} {bounds.width}x{bounds.height}")


def class_ratio(clipped: AnnotationSet, bounds: PatchBounds, object_class: ObjectClass) -> float:
    """Fraction of the patch's pixels covered by the union of one class's polygons."""
    union = np.zeros((bounds.height, bounds.width), dtype=bool)
    for obj in clipped.of_class(object_class):
        rasterize_into(union, obj.polygon, bounds.x0, bounds.y0)
    return float(np.count_nonzero(union)) / float(bounds.area)


def compute_features(clipped: AnnotationSet, bounds: PatchBounds) -> FeatureVector:
    """
    Feature vector of one clipped patch set.

    Ratios use the true (possibly clipped) patch area as denominator.
    """
    _check_extent(clipped, bounds)
    x1 = sum(1 for obj in clipped.mounds() if obj.counts_here is not False)
    x2, x3, x4 = (class_ratio(clipped, bounds, c) for c in RATIO_CLASSES)
    return FeatureVector(x1, x2, x3, x4)


def _serial_map(func: Callable, items: List) -> List:
    return [func(item) for item in items]


def _empty_patch_set(pid: str, bounds: PatchBounds) -> AnnotationSet:
    return AnnotationSet(pid, bounds.width, bounds.height, (), bounds.x0, bounds.y0)


def build_dataset(ground_truth: Optional[Mapping[str, AnnotationSet]],
                  detections: Mapping[str, AnnotationSet],
                  grid: PatchGrid, block_id: str,
                  mapper: Callable = None) -> TrainingSet:
    """
    One sample per grid patch: features from the detections, target from the
    ground-truth mound count of the same patch.

    Both mappings are keyed by patch id. Without ground truth the samples
    carry no target (inference set). A patch with detections but no ground
    truth is a consistency error. ``mapper`` may run patches in parallel; it
    must return results in input order.
    """
    mapper = mapper or _serial_map
    all_bounds = list(iter_patches(grid))
    ids = [patch_id(block_id, b.row, b.col) for b in all_bounds]

    unknown = sorted(set(detections) - set(ids))
    if ground_truth is not None:
        unknown += sorted(set(ground_truth) - set(ids) - set(unknown))
    if unknown:
        raise DatasetConsistencyError("patches not in the grid", unknown)
    if ground_truth is not None:
        missing = [pid for pid in ids if pid in detections and pid not in ground_truth]
        if missing:
            raise DatasetConsistencyError("detections without ground truth", missing)

    def make_sample(item):
        pid, bounds = item
        det = detections.get(pid) or _empty_patch_set(pid, bounds)
        features = compute_features(det, bounds)
        target = None
        if ground_truth is not None:
            truth = ground_truth.get(pid) or _empty_patch_set(pid, bounds)
            _check_extent(truth, bounds)
            target = float(sum(1 for obj in truth.mounds() if obj.counts_here is not False))
        return PatchSample(block_id, bounds.row, bounds.col, features, target)

    samples = mapper(make_sample, list(zip(ids, all_bounds)))
    logger.info("built %d samples for %s", len(samples), block_id)
    return TrainingSet(tuple(samples))


def inference_set(detections: Mapping[str, AnnotationSet], grid: PatchGrid, block_id: str,
                  mapper: Callable = None) -> TrainingSet:
    """Feature samples without targets, for counting a new block."""
    return build_dataset(None, detections, grid, block_id, mapper)


def _format(value: float) -> str:
    return format(value, ".9g")


def write_features_csv(training_set: TrainingSet, path):
    """Write samples with the fixed column order; y is blank for inference samples."""
    with open(path, 'w', encoding='utf-8', newline='') as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for s in training_set.samples:
            fv = s.features
            writer.writerow([
                s.block_id, s.row, s.col, fv.x1,
                _format(fv.x2), _format(fv.x3), _format(fv.x4),
                "" if s.target is None else _format(s.target),
            ])


def read_features_csv(path) -> TrainingSet:
    """Read a feature CSV; malformed rows raise with their line number."""
    try:
        with open(path, 'r', encoding='utf-8', newline='') as f:
            text = f.read()
    except FileNotFoundError as e:
        raise ValidationError(f"feature file not found: {path}") from e
    except UnicodeDecodeError as e:
        raise ParseError(f"not UTF-8 text: {e.reason}", source=str(path)) from e
    samples = []
    reader = csv.reader(io.StringIO(text, newline=''))
    header = next(reader, None)
    if header is None or tuple(h.strip() for h in header) != CSV_COLUMNS:
        raise ParseError(f"header must be {','.join(CSV_COLUMNS)}", source=str(path), line=1)
    for line_no, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(CSV_COLUMNS):
            raise ParseError(f"expected {len(CSV_COLUMNS)} columns, got {len(row)}",
                             source=str(path), line=line_no)
        block_id, r, c, x1, x2, x3, x4, y = row
        try:
            ratios = [float(v) for v in (x2, x3, x4)]
            target = float(y) if y.strip() else None
            sample = PatchSample(block_id, int(r), int(c), FeatureVector(int(x1), *ratios), target)
        except ValidationError as e:
            raise ValidationError(f"{path}, line {line_no}: {e}") from e
        except ValueError as e:
            raise ParseError(str(e), source=str(path), line=line_no) from e
        if target is not None and (math.isnan(target) or target < 0):
            raise ValidationError(f"{path}, line {line_no}: target must be a non-negative number")
        samples.append(sample)
    return TrainingSet(tuple(samples))


def group_by_block(training_set: TrainingSet) -> Dict[str, TrainingSet]:
    """Split a multi-block set into per-block sets, keeping first-seen order."""
    groups: Dict[str, List[PatchSample]] = {}
    for s in training_set.samples:
        groups.setdefault(s.block_id, []).append(s)
    return {k: TrainingSet(tuple(v)) for k, v in groups.items()}
