"""
Polygon annotations in the VGG Image Annotator (VIA) JSON dialect.

Ground truth and detector predictions share one schema; predictions carry a
``score`` in ``region_attributes``. Coordinates are continuous source-image
pixels.
"""

import json
import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, Optional, Sequence, Tuple

from .errors import ParseError, ValidationError
from .geometry import (
    AREA_EPS,
    BinaryMask,
    Point,
    Polygon,
    clip_polygon,
    interior_point,
    is_simple_polygon,
    polygon_area,
    polygon_centroid,
    rasterize_polygon,
)
from .raster import PatchBounds, PatchGrid, iter_patches, patch_id

logger = logging.getLogger(__name__)

DEFAULT_SCORE_THRESHOLD = 0.5

__all__ = [
    "AnnotatedObject", "AnnotationSet", "BinaryMask", "ObjectClass",
    "clip_to_patch", "load_via", "parse_via", "parse_via_all", "polygon_centroid",
    "rasterize_polygon", "save_via", "serialize_via", "split_by_grid",
]


class ObjectClass(Enum):
    MOUND = "mound"
    TREE = "tree"
    WATER = "water"
    DEBRIS = "debris"

    @classmethod
    def parse(cls, label) -> "ObjectClass":
        if isinstance(label, str):
            try:
                return cls(label.strip().lower())
            except ValueError:
                pass
        raise ValidationError(
            f"unknown object class {label!r}; expected one of {', '.join(c.value for c in cls)}")


@dataclass(frozen=True)
class AnnotatedObject:
    """
    One labeled polygon. ``score`` is None for ground truth. ``counts_here`` is
    set by clip_to_patch on mounds: True only in the patch holding the
    mound's anchor point.
    """
    object_class: ObjectClass
    polygon: Polygon
    score: Optional[float] = None
    counts_here: Optional[bool] = None

    @property
    def is_mound(self) -> bool:
        return self.object_class is ObjectClass.MOUND

    def area(self) -> float:
        return polygon_area(self.polygon)

    def centroid(self) -> Point:
        return polygon_centroid(self.polygon)

    def anchor(self) -> Point:
        """The centroid, or an interior point when a concave shape leaves the centroid outside."""
        return interior_point(self.polygon)


@dataclass(frozen=True)
class AnnotationSet:
    """
    All objects of one image, or of one patch after clipping. A patch set
    keeps source coordinates and records its window offset in (x0, y0).
    """
    image_id: str
    image_width: int
    image_height: int
    objects: Tuple[AnnotatedObject, ...] = field(default_factory=tuple)
    x0: int = 0
    y0: int = 0

    def __len__(self) -> int:
        return len(self.objects)

    def of_class(self, object_class: ObjectClass) -> Tuple[AnnotatedObject, ...]:
        return tuple(o for o in self.objects if o.object_class is object_class)

    def mounds(self) -> Tuple[AnnotatedObject, ...]:
        return self.of_class(ObjectClass.MOUND)

    def with_objects(self, objects: Sequence[AnnotatedObject]) -> "AnnotationSet":
        return replace(self, objects=tuple(objects))


def _field_error(message: str, path: str, source: Optional[str]) -> ParseError:
    return ParseError(message, source=source, field=path)


def _parse_number_list(values, path: str, source: Optional[str]) -> Tuple[float, ...]:
    if not isinstance(values, list):
        raise _field_error("expected an array of numbers", path, source)
    numbers = []
    for k, value in enumerate(values):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise _field_error(f"element {k} is not a number", path, source)
        if not math.isfinite(value):
            raise ValidationError(f"{path}[{k}] is not finite")
        numbers.append(float(value))
    return tuple(numbers)


def _parse_region(region, path: str, width: int, height: int,
                  score_threshold: Optional[float], source: Optional[str]) -> Optional[AnnotatedObject]:
    if not isinstance(region, dict):
        raise _field_error("region must be an object", path, source)
    shape = region.get("shape_attributes")
    attributes = region.get("region_attributes")
    if not isinstance(shape, dict):
        raise _field_error("missing shape_attributes", path, source)
    if not isinstance(attributes, dict):
        raise _field_error("missing region_attributes", path, source)

    name = shape.get("name")
    if name != "polygon":
        raise ValidationError(f"{path}.shape_attributes.name must be 'polygon', got {name!r}")
    if "class" not in attributes:
        raise _field_error("missing class label", f"{path}.region_attributes.class", source)
    object_class = ObjectClass.parse(attributes["class"])

    xs = _parse_number_list(shape.get("all_points_x"), f"{path}.shape_attributes.all_points_x", source)
    ys = _parse_number_list(shape.get("all_points_y"), f"{path}.shape_attributes.all_points_y", source)
    if len(xs) != len(ys):
        raise ValidationError(f"{path}: all_points_x has {len(xs)} values but all_points_y has {len(ys)}")
    if len(xs) < 3:
        raise ValidationError(f"{path}: polygon needs at least 3 vertices, got {len(xs)}")
    polygon = tuple(zip(xs, ys))
    if not is_simple_polygon(polygon):
        raise ValidationError(f"{path}: polygon is self-intersecting")
    if polygon_area(polygon) <= AREA_EPS:
        raise ValidationError(f"{path}: polygon has zero area")

    score = None
    if "score" in attributes:
        score = attributes["score"]
        if isinstance(score, bool) or not isinstance(score, (int, float)) or not 0.0 <= score <= 1.0:
            raise ValidationError(f"{path}.region_attributes.score must be a number in [0, 1], got {score!r}")
        score = float(score)
        if score_threshold is not None and score < score_threshold:
            logger.debug("%s: dropping %s with score %.3f", path, object_class.value, score)
            return None

    clamped = tuple((min(max(x, 0.0), float(width)), min(max(y, 0.0), float(height))) for x, y in polygon)
    if polygon_area(clamped) <= AREA_EPS:
        logger.warning("%s: polygon lies outside the %dx%d image, dropped", path, width, height)
        return None
    return AnnotatedObject(object_class, clamped, score)


def _parse_image(key: str, entry, image_width: Optional[int], image_height: Optional[int],
                 score_threshold: Optional[float], source: Optional[str]) -> AnnotationSet:
    if not isinstance(entry, dict):
        raise _field_error("image entry must be an object", key, source)
    filename = entry.get("filename")
    if not isinstance(filename, str):
        raise _field_error("missing filename", f"{key}.filename", source)

    attributes = entry.get("file_attributes") or {}
    width = image_width if image_width is not None else attributes.get("width")
    height = image_height if image_height is not None else attributes.get("height")
    if not isinstance(width, int) or not isinstance(height, int) or width < 1 or height < 1:
        raise ValidationError(
            f"{key}: image extent unknown; pass image_width/image_height or set file_attributes.width/height")

    regions = entry.get("regions", [])
    if isinstance(regions, dict):
        # VIA 1.x keys regions by index string
        regions = [regions[k] for k in sorted(regions, key=lambda s: int(s) if str(s).isdigit() else s)]
    if not isinstance(regions, list):
        raise _field_error("regions must be an array", f"{key}.regions", source)

    objects = []
    for index, region in enumerate(regions):
        parsed = _parse_region(region, f"{key}.regions[{index}]", width, height, score_threshold, source)
        if parsed is not None:
            objects.append(parsed)
    return AnnotationSet(image_id=filename, image_width=width, image_height=height, objects=tuple(objects))


def _load_document(document: str, source: Optional[str]) -> dict:
    try:
        data = json.loads(document)
    except json.JSONDecodeError as e:
        raise ParseError(f"{e.msg} (column {e.colno})", source=source, line=e.lineno) from e
    if not isinstance(data, dict):
        raise ParseError("top level must be an object mapping image keys to entries", source=source, line=1)
    return data


def parse_via_all(document: str, image_width: int = None, image_height: int = None,
                  score_threshold: Optional[float] = DEFAULT_SCORE_THRESHOLD,
                  source: str = None) -> Dict[str, AnnotationSet]:
    """Parse every image of a VIA document, keyed by image id."""
    data = _load_document(document, source)
    sets = {}
    for key, entry in data.items():
        parsed = _parse_image(key, entry, image_width, image_height, score_threshold, source)
        sets[parsed.image_id] = parsed
    return sets


def parse_via(document: str, image_width: int = None, image_height: int = None,
              score_threshold: Optional[float] = DEFAULT_SCORE_THRESHOLD,
              source: str = None) -> AnnotationSet:
    """
    Parse a single-image VIA document into an AnnotationSet.

    Regions keep document order. Class labels are case-insensitive; vertices
    are clamped to the image extent; predictions scoring below
    ``score_threshold`` are dropped (pass None to keep everything).
    """
    data = _load_document(document, source)
    if len(data) > 1:
        raise ValidationError(f"document holds {len(data)} images; use parse_via_all")
    if not data:
        raise ParseError("document holds no image entry", source=source, line=1)
    key, entry = next(iter(data.items()))
    return _parse_image(key, entry, image_width, image_height, score_threshold, source)


def _format_number(value: float):
    return int(value) if float(value).is_integer() else float(value)


def serialize_via(annotation_set: AnnotationSet) -> str:
    """Inverse of parse_via; the extent is written to file_attributes."""
    regions = []
    for obj in annotation_set.objects:
        region_attributes = {"class": obj.object_class.value}
        if obj.score is not None:
            region_attributes["score"] = obj.score
        regions.append({
            "shape_attributes": {
                "name": "polygon",
                "all_points_x": [_format_number(x) for x, _ in obj.polygon],
                "all_points_y": [_format_number(y) for _, y in obj.polygon],
            },
            "region_attributes": region_attributes,
        })
    document = {
        annotation_set.image_id: {
            "filename": annotation_set.image_id,
            "file_attributes": {
                "width": annotation_set.image_width,
                "height": annotation_set.image_height,
            },
            "regions": regions,
        }
    }
    return json.dumps(document, indent=2)


def load_via(path, image_width: int = None, image_height: int = None,
             score_threshold: Optional[float] = DEFAULT_SCORE_THRESHOLD) -> AnnotationSet:
    try:
        with open(path, 'r', encoding='utf-8') as f:
            document = f.read()
    except FileNotFoundError as e:
        raise ValidationError(f"annotation file not found: {path}") from e
    except UnicodeDecodeError as e:
        raise ParseError(f"not UTF-8 text: {e.reason}", source=str(path)) from e
    return parse_via(document, image_width, image_height, score_threshold, source=str(path))


def save_via(annotation_set: AnnotationSet, path):
    with open(path, 'w', encoding='utf-8') as f:
        f.write(serialize_via(annotation_set))
        f.write("\n")


def clip_to_patch(annotation_set: AnnotationSet, bounds: PatchBounds,
                  image_id: str = None) -> AnnotationSet:
    """
    Clip every polygon to ``bounds``; zero-area remainders are dropped.

    A mound that straddles patches appears in each of them, but only the
    patch containing its anchor point (half-open window) gets counts_here=True.
    The anchor lies inside the polygon, so that patch always keeps the mound.
    """
    if bounds.x1 > annotation_set.x0 + annotation_set.image_width or \
            bounds.y1 > annotation_set.y0 + annotation_set.image_height or \
            bounds.x0 < annotation_set.x0 or bounds.y0 < annotation_set.y0:
        raise ValidationError(
            f"bounds ({bounds.row}, {bounds.col}) exceed the extent of {annotation_set.image_id}")
    clipped = []
    for obj in annotation_set.objects:
        polygon = clip_polygon(obj.polygon, bounds.x0, bounds.y0, bounds.x1, bounds.y1)
        if len(polygon) < 3 or polygon_area(polygon) <= AREA_EPS:
            continue
        counts_here = None
        if obj.is_mound:
            ax, ay = obj.anchor()
            counts_here = bounds.x0 <= ax < bounds.x1 and bounds.y0 <= ay < bounds.y1
        clipped.append(AnnotatedObject(obj.object_class, polygon, obj.score, counts_here))
    return AnnotationSet(
        image_id=image_id or f"{annotation_set.image_id}_r{bounds.row}_c{bounds.col}",
        image_width=bounds.width,
        image_height=bounds.height,
        objects=tuple(clipped),
        x0=bounds.x0,
        y0=bounds.y0,
    )


def split_by_grid(annotation_set: AnnotationSet, grid: PatchGrid, block_id: str) -> Dict[str, AnnotationSet]:
    """Clip a whole-image set to every patch of ``grid``, in row-major order."""
    if (grid.source_width, grid.source_height) != (annotation_set.image_width, annotation_set.image_height):
        raise ValidationError(
            f"{annotation_set.image_id} is {annotation_set.image_width}x{annotation_set.image_height} "
            f"but the grid covers {grid.source_width}x{grid.source_height}")
    patches = {}
    for bounds in iter_patches(grid):
        pid = patch_id(block_id, bounds.row, bounds.col)
        patches[pid] = clip_to_patch(annotation_set, bounds, image_id=pid)
    return patches
