"""Evaluation data model and JSONL/TSV loaders.

Four inputs feed the pipeline:

* ``records.jsonl``   -- ``{"id", "group", "instruction", "input", "target"}``
* ``responses.jsonl`` -- ``{"model", "id", "response"}``
* ``ratings.jsonl``   -- ``{"model", "id", "annotator", "grade"}``
* external score TSV  -- ``metric<TAB>model<TAB>id<TAB>score`` (``id`` may be ``*``)

Loaded collections are immutable tuples of frozen dataclasses.
"""

from __future__ import annotations

import enum
import json
import math
from collections.abc import Iterable, Iterator, Mapping
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

AGGREGATE_ID = "*"


class CorpusError(ValueError):
    """Raised when an input file violates its schema or invariants."""


class Grade(str, enum.Enum):
    A = "A"
    B = "B"
    C = "C"
    D = "D"


class Direction(str, enum.Enum):
    HIGHER_BETTER = "higher_better"
    LOWER_BETTER = "lower_better"


@dataclass(frozen=True)
class EvalRecord:
    record_id: str
    task_group: str
    instruction: str
    target_response: str
    instance_input: str | None = None


@dataclass(frozen=True)
class ModelResponse:
    model_id: str
    record_id: str
    response_text: str


@dataclass(frozen=True)
class HumanRating:
    model_id: str
    record_id: str
    annotator_id: str
    grade: Grade


@dataclass(frozen=True)
class Dataset:
    records: tuple[EvalRecord, ...]
    source_name: str = ""

    def __post_init__(self) -> None:
        seen: set[str] = set()
        for rec in self.records:
            if rec.record_id in seen:
                raise CorpusError(f"duplicate record id {rec.record_id!r}")
            seen.add(rec.record_id)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[EvalRecord]:
        return iter(self.records)

    @property
    def ids(self) -> list[str]:
        return [r.record_id for r in self.records]

    def get(self, record_id: str) -> EvalRecord:
        for rec in self.records:
            if rec.record_id == record_id:
                return rec
        raise KeyError(record_id)

    def by_id(self) -> dict[str, EvalRecord]:
        return {r.record_id: r for r in self.records}


def _iter_json_lines(path: Path) -> Iterator[tuple[int, dict[str, Any]]]:
    if not path.exists():
        raise CorpusError(f"no such file: {path}")
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from exc
            if not isinstance(obj, dict):
                raise CorpusError(f"{path}:{lineno}: expected a JSON object")
            yield lineno, obj


def _require_str(obj: Mapping[str, Any], key: str, where: str, *, allow_empty: bool = True) -> str:
    if key not in obj:
        raise CorpusError(f"{where}: missing key {key!r}")
    value = obj[key]
    if not isinstance(value, str):
        raise CorpusError(f"{where}: key {key!r} must be a string")
    if not allow_empty and not value.strip():
        raise CorpusError(f"{where}: key {key!r} is empty")
    return value


def load_records(path: str | Path) -> Dataset:
    """Load ``records.jsonl`` into a :class:`Dataset`, preserving file order."""
    path = Path(path)
    records: list[EvalRecord] = []
    first_line: dict[str, int] = {}
    for lineno, obj in _iter_json_lines(path):
        where = f"{path}:{lineno}"
        rid = _require_str(obj, "id", where, allow_empty=False)
        if rid in first_line:
            raise CorpusError(
                f"{path}: duplicate record id {rid!r} on lines {first_line[rid]} and {lineno}"
            )
        first_line[rid] = lineno
        group = obj.get("group", "")
        if not isinstance(group, str):
            raise CorpusError(f"{where}: key 'group' must be a string")
        instance_input = obj.get("input")
        if instance_input is not None and not isinstance(instance_input, str):
            raise CorpusError(f"{where}: key 'input' must be a string")
        records.append(
            EvalRecord(
                record_id=rid,
                task_group=group,
                instruction=_require_str(obj, "instruction", where, allow_empty=False),
                target_response=_require_str(obj, "target", where, allow_empty=False),
                instance_input=instance_input,
            )
        )
    return Dataset(records=tuple(records), source_name=path.name)


def dump_records(dataset: Dataset, path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for rec in dataset.records:
            obj: dict[str, Any] = {
                "id": rec.record_id,
                "group": rec.task_group,
                "instruction": rec.instruction,
            }
            if rec.instance_input is not None:
                obj["input"] = rec.instance_input
            obj["target"] = rec.target_response
            fh.write(json.dumps(obj, ensure_ascii=False) + "\n")


def load_responses(path: str | Path) -> tuple[ModelResponse, ...]:
    path = Path(path)
    out: list[ModelResponse] = []
    first_line: dict[tuple[str, str], int] = {}
    for lineno, obj in _iter_json_lines(path):
        where = f"{path}:{lineno}"
        model = _require_str(obj, "model", where, allow_empty=False)
        rid = _require_str(obj, "id", where, allow_empty=False)
        # a missing or null response is an empty generation, not a schema error
        text = obj.get("response")
        if text is None:
            text = ""
        if not isinstance(text, str):
            raise CorpusError(f"{where}: key 'response' must be a string")
        key = (model, rid)
        if key in first_line:
            raise CorpusError(
                f"{path}: duplicate response for model {model!r}, id {rid!r} "
                f"on lines {first_line[key]} and {lineno}"
            )
        first_line[key] = lineno
        out.append(ModelResponse(model_id=model, record_id=rid, response_text=text))
    return tuple(out)


def dump_responses(responses: Iterable[ModelResponse], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for r in responses:
            obj = {"model": r.model_id, "id": r.record_id, "response": r.response_text}
            fh.write(json.dumps(obj, ensure_ascii=False) + "\n")


def load_ratings(path: str | Path) -> tuple[HumanRating, ...]:
    path = Path(path)
    out: list[HumanRating] = []
    for lineno, obj in _iter_json_lines(path):
        where = f"{path}:{lineno}"
        raw = _require_str(obj, "grade", where)
        try:
            grade = Grade(raw.strip().upper())
        except ValueError:
            raise CorpusError(f"{where}: invalid grade {raw!r} (expected one of A, B, C, D)") from None
        out.append(
            HumanRating(
                model_id=_require_str(obj, "model", where, allow_empty=False),
                record_id=_require_str(obj, "id", where, allow_empty=False),
                annotator_id=_require_str(obj, "annotator", where, allow_empty=False),
                grade=grade,
            )
        )
    return tuple(out)


@dataclass
class ScoreMatrix:
    """Scores keyed by ``(metric_id, model_id, record_id)`` plus a direction per metric.

    ``record_id == "*"`` marks a per-model aggregate supplied from outside
    (e.g. averaged scores published without per-record values).  When
    ``models``/``record_ids`` are given, every added key is checked against them.
    """

    models: frozenset[str] | None = None
    record_ids: frozenset[str] | None = None
    entries: dict[tuple[str, str, str], float] = field(default_factory=dict)
    directions: dict[str, Direction] = field(default_factory=dict)

    def declare(self, metric_id: str, direction: Direction | str) -> None:
        direction = Direction(direction)
        existing = self.directions.get(metric_id)
        if existing is not None and existing is not direction:
            raise CorpusError(
                f"metric {metric_id!r} already declared {existing.value}, cannot redeclare {direction.value}"
            )
        self.directions[metric_id] = direction

    def add(self, metric_id: str, model_id: str, record_id: str, score: float) -> None:
        if metric_id not in self.directions:
            raise CorpusError(f"metric {metric_id!r} has no declared direction")
        if self.models is not None and model_id not in self.models:
            raise CorpusError(f"unknown model {model_id!r} for metric {metric_id!r}")
        if (
            self.record_ids is not None
            and record_id != AGGREGATE_ID
            and record_id not in self.record_ids
        ):
            raise CorpusError(f"unknown record {record_id!r} for metric {metric_id!r}")
        score = float(score)
        if not math.isfinite(score):
            raise CorpusError(f"non-finite score for {(metric_id, model_id, record_id)}")
        key = (metric_id, model_id, record_id)
        if key in self.entries:
            raise CorpusError(f"duplicate score for {key}")
        self.entries[key] = score

    @property
    def metrics(self) -> list[str]:
        return list(self.directions)

    def slice(self, metric_id: str) -> dict[str, dict[str, float]]:
        """Scores for one metric as ``{model_id: {record_id: score}}``."""
        if metric_id not in self.directions:
            raise KeyError(metric_id)
        out: dict[str, dict[str, float]] = {}
        for (metric, model, rid), score in self.entries.items():
            if metric == metric_id:
                out.setdefault(model, {})[rid] = score
        return out

    def merge(self, other: ScoreMatrix) -> None:
        for metric, direction in other.directions.items():
            self.declare(metric, direction)
        for (metric, model, rid), score in other.entries.items():
            self.add(metric, model, rid, score)


def load_external_scores(
    path: str | Path,
    metric_id: str,
    direction: Direction | str,
    matrix: ScoreMatrix | None = None,
) -> ScoreMatrix:
    """Merge precomputed scores for ``metric_id`` from a TSV file into ``matrix``.

    Rows whose first column names a different metric are skipped.  A fresh
    matrix is created when none is given; keys are validated against the
    matrix's known models and records.
    """
    path = Path(path)
    if not path.exists():
        raise CorpusError(f"no such file: {path}")
    matrix = matrix if matrix is not None else ScoreMatrix()
    matrix.declare(metric_id, direction)
    staged: list[tuple[str, str, float]] = []
    unknown: list[str] = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip() or line.startswith("#"):
                continue
            cols = line.split("\t")
            if len(cols) != 4:
                raise CorpusError(f"{path}:{lineno}: expected 4 tab-separated columns, got {len(cols)}")
            metric, model, rid, raw = cols
            if lineno == 1 and metric == "metric" and raw == "score":
                continue
            if metric != metric_id:
                continue
            try:
                score = float(raw)
            except ValueError:
                raise CorpusError(f"{path}:{lineno}: score {raw!r} is not a number") from None
            if matrix.models is not None and model not in matrix.models:
                unknown.append(f"{model}/{rid} (line {lineno})")
                continue
            if (
                matrix.record_ids is not None
                and rid != AGGREGATE_ID
                and rid not in matrix.record_ids
            ):
                unknown.append(f"{model}/{rid} (line {lineno})")
                continue
            staged.append((model, rid, score))
    if unknown:
        raise CorpusError(f"{path}: scores reference unknown model/record keys: {', '.join(unknown)}")
    if not staged:
        raise CorpusError(f"{path}: no rows for metric {metric_id!r}")
    for model, rid, score in staged:
        matrix.add(metric_id, model, rid, score)
    return matrix


class IssueKind(str, enum.Enum):
    MISSING_RESPONSE = "missing_response"
    UNKNOWN_RECORD = "unknown_record"
    ORPHAN_RATING = "orphan_rating"


@dataclass(frozen=True, order=True)
class JoinIssue:
    model_id: str
    record_id: str
    kind: IssueKind
    detail: str = ""


@dataclass(frozen=True)
class ValidationReport:
    issues: tuple[JoinIssue, ...] = ()

    def __bool__(self) -> bool:
        return bool(self.issues)

    def __len__(self) -> int:
        return len(self.issues)

    @property
    def ok(self) -> bool:
        return not self.issues

    def by_model(self) -> dict[str, list[JoinIssue]]:
        out: dict[str, list[JoinIssue]] = {}
        for issue in self.issues:
            out.setdefault(issue.model_id, []).append(issue)
        return out

    def summary(self) -> str:
        if self.ok:
            return "join is complete"
        lines = []
        for model, issues in sorted(self.by_model().items()):
            counts: dict[str, int] = {}
            for i in issues:
                counts[i.kind.value] = counts.get(i.kind.value, 0) + 1
            parts = ", ".join(f"{k}={v}" for k, v in sorted(counts.items()))
            lines.append(f"{model}: {parts}")
        return "\n".join(lines)


def validate_join(
    dataset: Dataset,
    responses: Iterable[ModelResponse],
    ratings: Iterable[HumanRating] = (),
) -> ValidationReport:
    """Report every gap in the records x responses x ratings join.

    One issue per missing (model, record) response, per response to an
    unknown record, and per rating with no matching response.
    """
    record_ids = set(dataset.ids)
    responses = list(responses)
    have = {(r.model_id, r.record_id) for r in responses}
    models = sorted({r.model_id for r in responses})
    issues: list[JoinIssue] = []
    for model in models:
        for rid in dataset.ids:
            if (model, rid) not in have:
                issues.append(JoinIssue(model, rid, IssueKind.MISSING_RESPONSE))
    for r in responses:
        if r.record_id not in record_ids:
            issues.append(JoinIssue(r.model_id, r.record_id, IssueKind.UNKNOWN_RECORD))
    for rating in ratings:
        if (rating.model_id, rating.record_id) not in have:
            issues.append(
                JoinIssue(
                    rating.model_id,
                    rating.record_id,
                    IssueKind.ORPHAN_RATING,
                    detail=f"annotator={rating.annotator_id}",
                )
            )
    return ValidationReport(tuple(sorted(issues)))
