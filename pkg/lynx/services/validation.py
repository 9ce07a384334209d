"""Checks for every file kind the CLI writes"""

import csv
import io
import json
import logging
from pathlib import Path
from typing import Any, Dict, FrozenSet, Tuple, Union

import numpy as np
from pydantic import BaseModel, ValidationError

from ..exceptions import FormatError
from ..models.bench_models import BenchReport
from ..models.report_models import SCHEMA_VERSION, ComparisonReport, SweepReport
from ..models.sparsity_models import CompensationGranularity, PackedNM, ScaleRecord, violations_summary
from ..utils.file_utils import MAGIC, TensorFile, read_bytes
from . import analysis, bench, dit_stack, lowrank, nm_format

logger = logging.getLogger(__name__)

# header -> columns that hold numbers (an empty cell stands for a missing value)
CSV_SCHEMAS: Dict[Tuple[str, ...], FrozenSet[str]] = {
    tuple(analysis.SWEEP_CSV_COLUMNS): frozenset({"depth", "rfe", "active_fraction"}),
    tuple(analysis.COMPARISON_CSV_COLUMNS): frozenset({"rfe"}),
    tuple(bench.CSV_COLUMNS): frozenset(bench.CSV_COLUMNS) - {"shape"},
}

# key that only one report kind carries -> model
_REPORTS = {"layers": SweepReport, "methods": ComparisonReport, "rows": BenchReport}

_SCALE_RANK = {
    CompensationGranularity.NONE: 0,
    CompensationGranularity.PER_TENSOR: 0,
    CompensationGranularity.PER_ROW: 1,
    CompensationGranularity.PER_GROUP: 2,
}


def validate_path(path: Union[str, Path]) -> str:
    """One-line summary of a valid file or directory; raises FormatError otherwise"""
    path = Path(path)
    logger.debug(f"validating {path}")
    if path.is_dir():
        return _validate_directory(path)
    if path.name in (dit_stack.MANIFEST_FILE, lowrank.LORA_META_FILE):
        return _validate_directory(path.parent)

    blob = read_bytes(path)
    if blob.startswith(MAGIC):
        return _validate_binary(path, blob)
    try:
        text = blob.decode("utf-8")
    except UnicodeDecodeError as e:
        raise FormatError(f"{path} is neither a LYNX tensor nor text") from e
    if text.lstrip().startswith("{"):
        return _validate_json(path, text)
    return _validate_csv(path, text)


def _validate_directory(path: Path) -> str:
    if (path / dit_stack.MANIFEST_FILE).exists():
        stack = dit_stack.load_stack(path)
        return f"stack with {len(stack.layers)} layers"
    if (path / lowrank.LORA_META_FILE).exists():
        pair = lowrank.load_lora(path)
        return f"LoRA pair rank {pair.rank}, {pair.d_out}x{pair.d_in}"
    raise FormatError(f"{path} is neither a stack nor a LoRA directory")


def _validate_binary(path: Path, blob: bytes) -> str:
    obj = TensorFile.decode(blob)
    if isinstance(obj, PackedNM):
        violations = nm_format.validate(obj)
        if violations:
            raise FormatError(f"{len(violations)} violations: {violations_summary(violations)}")
        return f"packed {obj.pattern} matrix {obj.rows}x{obj.cols}"
    if not np.all(np.isfinite(obj)):
        raise FormatError(f"{path} contains non-finite values")
    return f"tensor {'x'.join(str(d) for d in obj.shape)}"


def _validate_json(path: Path, text: str) -> str:
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as e:
        raise FormatError(f"{path} is not valid JSON: {e}") from e
    if not isinstance(payload, dict):
        raise FormatError(f"{path} does not hold a JSON object")

    if "scales" in payload:
        return _validate_scale_record(path, payload)
    if "schema_version" not in payload:
        raise FormatError(f"{path}: unrecognized JSON document, no schema_version or scales")
    if payload["schema_version"] != SCHEMA_VERSION:
        raise FormatError(f"{path}: schema_version {payload['schema_version']!r}, expected {SCHEMA_VERSION!r}")
    kinds = [key for key in _REPORTS if key in payload]
    if len(kinds) != 1:
        raise FormatError(f"{path}: cannot tell which report this is")
    model = _REPORTS[kinds[0]]
    report = _parse(path, model, payload)
    return f"{model.__name__} with {len(getattr(report, kinds[0]))} {kinds[0]}"


def _parse(path: Path, model: type, payload: Dict[str, Any]) -> BaseModel:
    try:
        return model.model_validate(payload)
    except ValidationError as e:
        raise FormatError(f"{path}: invalid {model.__name__}: {e.errors()[0]['msg']}") from e


def _validate_scale_record(path: Path, payload: Dict[str, Any]) -> str:
    try:
        scales = np.asarray(payload["scales"], dtype=np.float64)
        record = ScaleRecord(**{**payload, "scales": scales})
    except (ValidationError, ValueError, TypeError) as e:
        raise FormatError(f"{path}: invalid scale record: {e}") from e
    expected = _SCALE_RANK[record.granularity]
    if record.scales.ndim != expected:
        raise FormatError(f"{path}: {record.granularity.value} scales must have rank {expected}, got {record.scales.ndim}")
    if not np.all(np.isfinite(record.scales)) or np.any(record.scales < 0):
        raise FormatError(f"{path}: scales must be finite and non-negative")
    return f"{record.granularity.value} scale record, {record.scales.size} factors"


def _validate_csv(path: Path, text: str) -> str:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise FormatError(f"{path} is empty")
    header = tuple(rows[0])
    numeric = CSV_SCHEMAS.get(header)
    if numeric is None:
        raise FormatError(f"{path}: unknown CSV header {','.join(header)}")
    for line, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise FormatError(f"{path}:{line}: {len(row)} fields, expected {len(header)}")
        for column, cell in zip(header, row):
            if column in numeric and cell != "":
                try:
                    float(cell)
                except ValueError:
                    raise FormatError(f"{path}:{line}: {column} is not a number: {cell!r}") from None
    return f"CSV table with {len(rows) - 1} rows"
