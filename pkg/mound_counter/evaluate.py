"""
Block-level counts, the relative counting precision (RCP) metric and the
per-block results table.
"""

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from typing import Dict, List, Sequence, Tuple

from .errors import ParseError, UndefinedMetricError, ValidationError

logger = logging.getLogger(__name__)

LOCAL = "local"
OVERALL = "overall"
AVERAGE = "average_precision"


def block_count(patch_predictions: Sequence[float]) -> int:
    """Sum of per-patch predictions rounded half-up to an integer count."""
    values = [float(p) for p in patch_predictions]
    if any(math.isnan(v) for v in values):
        raise ValidationError("patch predictions contain NaN")
    if any(v < 0 for v in values):
        raise ValidationError("patch predictions must be >= 0")
    return int(math.floor(math.fsum(values) + 0.5))


def rcp(predicted: float, ground_truth: float) -> float:
    """1 - |predicted - ground_truth| / ground_truth; negative when the error exceeds 100%."""
    if ground_truth <= 0:
        raise UndefinedMetricError(f"RCP is undefined for ground truth {ground_truth}")
    return 1.0 - abs(predicted - ground_truth) / ground_truth


def format_percent(value: float) -> str:
    """
    Percent rounded half-up to an integer, e.g. "93%". Values of 99% and above
    (but below 100%) keep two decimals, e.g. "99.99%".
    """
    percent = Decimal(repr(float(value))) * 100
    if Decimal(99) <= percent < Decimal(100):
        shown = percent.quantize(Decimal("0.01"), rounding=ROUND_HALF_UP)
        if shown < Decimal(100):
            return f"{shown.normalize():f}%"
    return f"{percent.quantize(Decimal(1), rounding=ROUND_HALF_UP)}%"


@dataclass(frozen=True)
class BlockResult:
    block_id: str
    ground_truth: int
    local_count: int
    corrected_counts: Tuple[Tuple[str, int], ...] = ()

    def __post_init__(self):
        counts = [self.ground_truth, self.local_count] + [c for _, c in self.corrected_counts]
        if any(c < 0 for c in counts):
            raise ValidationError(f"{self.block_id}: counts must be >= 0")
        object.__setattr__(self, 'corrected_counts',
                           tuple((str(m), int(c)) for m, c in self.corrected_counts))

    @property
    def models(self) -> Tuple[str, ...]:
        return tuple(m for m, _ in self.corrected_counts)

    def count(self, column: str) -> int:
        if column == LOCAL:
            return self.local_count
        return dict(self.corrected_counts)[column]

    @property
    def local_rcp(self) -> float:
        return rcp(self.local_count, self.ground_truth)

    def rcp(self, column: str) -> float:
        return rcp(self.count(column), self.ground_truth)

    @property
    def rcps(self) -> Dict[str, float]:
        """RCP per column, local first."""
        return {column: self.rcp(column) for column in (LOCAL,) + self.models}


@dataclass(frozen=True)
class Report:
    rows: Tuple[BlockResult, ...]
    overall: BlockResult
    average_precision: Dict[str, float] = field(default_factory=dict)

    @property
    def models(self) -> Tuple[str, ...]:
        return self.overall.models

    @property
    def columns(self) -> Tuple[str, ...]:
        return (LOCAL,) + self.models

    def improvement(self) -> Dict[str, float]:
        """Mean RCP gain of every corrected column over the local column."""
        base = self.average_precision[LOCAL]
        return {m: self.average_precision[m] - base for m in self.models}

    def overall_improvement(self) -> Dict[str, float]:
        base = self.overall.local_rcp
        return {m: self.overall.rcp(m) - base for m in self.models}


def build_report(blocks: Sequence[BlockResult]) -> Report:
    """
    Per-block rows, an overall row from the summed counts and the unweighted
    mean of the row RCPs per column.
    """
    blocks = tuple(blocks)
    if not blocks:
        raise ValidationError("a report needs at least one block")
    seen = set()
    for b in blocks:
        if b.block_id in seen:
            raise ValidationError(f"duplicate block_id {b.block_id!r}")
        seen.add(b.block_id)
    models = blocks[0].models
    for b in blocks:
        if b.models != models:
            raise ValidationError(f"{b.block_id} has model columns {b.models}, expected {models}")

    overall = BlockResult(
        OVERALL,
        sum(b.ground_truth for b in blocks),
        sum(b.local_count for b in blocks),
        tuple((m, sum(b.count(m) for b in blocks)) for m in models),
    )
    average = {column: math.fsum(b.rcp(column) for b in blocks) / len(blocks)
               for column in (LOCAL,) + models}
    negatives = [b.block_id for b in blocks if any(v < 0 for v in b.rcps.values())]
    if negatives:
        logger.warning("negative RCP (error above 100%%) in blocks %s", ", ".join(negatives))
    return Report(blocks, overall, average)


def _cell(value: float) -> str:
    text = format_percent(value)
    return text + "*" if value < 0 else text


def render_table(report: Report) -> str:
    """Aligned plain-text table: one row per block, then overall and average rows."""
    header = ["block_id", "ground_truth", "local_count", "local_rcp"]
    for m in report.models:
        header += [f"{m}_count", f"{m}_rcp"]

    def row_cells(b: BlockResult) -> List[str]:
        cells = [b.block_id, str(b.ground_truth), str(b.local_count), _cell(b.local_rcp)]
        for m in b.models:
            cells += [str(b.count(m)), _cell(b.rcp(m))]
        return cells

    body = [row_cells(b) for b in report.rows] + [row_cells(report.overall)]
    avg = [AVERAGE, "", "", _cell(report.average_precision[LOCAL])]
    for m in report.models:
        avg += ["", _cell(report.average_precision[m])]
    body.append(avg)

    widths = [max(len(r[k]) for r in [header] + body) for k in range(len(header))]
    lines = ["  ".join(c.ljust(w) if k == 0 else c.rjust(w) for k, (c, w) in enumerate(zip(r, widths))).rstrip()
             for r in [header] + body]
    lines.insert(1, "  ".join("-" * w for w in widths))
    if any(v < 0 for b in report.rows + (report.overall,) for v in b.rcps.values()):
        lines.append("* negative RCP: counting error above 100%")
    improvements = report.improvement()
    if improvements:
        lines.append("mean RCP improvement over local: " + ", ".join(
            f"{m} {improvements[m] * 100:+.2f} pts" for m in report.models))
    return "\n".join(lines) + "\n"


def _csv_header(models: Sequence[str]) -> List[str]:
    header = ["block_id", "ground_truth", "local_count", "local_rcp"]
    for m in models:
        header += [f"{m}_count", f"{m}_rcp"]
    return header


def write_report_csv(report: Report, path):
    with open(path, 'w', encoding='utf-8', newline='') as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(_csv_header(report.models))
        for b in report.rows + (report.overall,):
            row = [b.block_id, b.ground_truth, b.local_count, repr(b.local_rcp)]
            for m in report.models:
                row += [b.count(m), repr(b.rcp(m))]
            writer.writerow(row)
        row = [AVERAGE, "", "", repr(report.average_precision[LOCAL])]
        for m in report.models:
            row += ["", repr(report.average_precision[m])]
        writer.writerow(row)


def read_block_counts_csv(path) -> List[BlockResult]:
    """
    Block rows of a counts CSV: block_id, ground_truth, local_count and any
    number of ``<model>_count`` columns. RCP columns and the overall and
    average rows of a written report are ignored.
    """
    try:
        with open(path, 'r', encoding='utf-8', newline='') as f:
            text = f.read()
    except FileNotFoundError as e:
        raise ValidationError(f"counts file not found: {path}") from e
    except UnicodeDecodeError as e:
        raise ParseError(f"not UTF-8 text: {e.reason}", source=str(path)) from e
    blocks = []
    reader = csv.reader(io.StringIO(text, newline=''))
    header = [h.strip() for h in next(reader, [])]
    required = ["block_id", "ground_truth", "local_count"]
    if header[:3] != required:
        raise ParseError(f"header must start with {','.join(required)}", source=str(path), line=1)
    model_columns = [(k, h[:-len("_count")]) for k, h in enumerate(header)
                     if k >= 3 and h.endswith("_count")]
    for line_no, row in enumerate(reader, start=2):
        if not row or row[0] in (OVERALL, AVERAGE):
            continue
        if len(row) != len(header):
            raise ParseError(f"expected {len(header)} columns, got {len(row)}", source=str(path), line=line_no)
        try:
            blocks.append(BlockResult(row[0], int(row[1]), int(row[2]),
                                      tuple((m, int(row[k])) for k, m in model_columns)))
        except ValidationError as e:
            raise ValidationError(f"{path}, line {line_no}: {e}") from e
        except ValueError as e:
            raise ParseError(str(e), source=str(path), line=line_no) from e
    return blocks


def read_report_csv(path) -> Report:
    return build_report(read_block_counts_csv(path))
