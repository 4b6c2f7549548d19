"""Core value types and JSONL dataset ingestion."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping

from armor.errors import ArmorError

CORE_KEYS = ("idx", "reactants", "product", "label")


class Label(enum.IntEnum):
    INFEASIBLE = 0
    FEASIBLE = 1


class Prediction(enum.Enum):
    """A tool's output for one reaction. ``NA`` means the tool abstained or failed."""

    PRED0 = 0
    PRED1 = 1
    NA = "NA"

    @classmethod
    def parse(cls, raw: Any) -> "Prediction":
        if isinstance(raw, Prediction):
            return raw
        # bool is an int subclass; JSON true/false is not a valid prediction
        if isinstance(raw, bool):
            raise ValueError(f"prediction value out of domain: {raw!r}")
        if raw is None:
            return cls.NA
        if isinstance(raw, (int, float)) and raw in (0, 1):
            return cls.PRED1 if raw == 1 else cls.PRED0
        if isinstance(raw, str):
            s = raw.strip()
            if s in ("1", "1.0"):
                return cls.PRED1
            if s in ("0", "0.0"):
                return cls.PRED0
            if s.upper() in ("NA", "NONE", "NULL", "NAN", ""):
                return cls.NA
        raise ValueError(f"prediction value out of domain: {raw!r}")

    def as_label(self) -> Label | None:
        if self is Prediction.NA:
            return None
        return Label(self.value)

    def matches(self, label: Label | None) -> bool:
        """True iff this is a concrete prediction equal to ``label``; NA never matches."""
        return label is not None and self is not Prediction.NA and self.value == int(label)

    def to_json(self) -> int | str:
        return self.value

    @classmethod
    def from_label(cls, label: Label) -> "Prediction":
        return cls.PRED1 if label == Label.FEASIBLE else cls.PRED0


class Split(str, enum.Enum):
    VALIDATION = "validation"
    TEST = "test"
    SYNTHETIC = "synthetic"


@dataclass(frozen=True)
class Reaction:
    idx: int
    reactants: str
    product: str
    label: Label | None = None
    extra: Mapping[str, Any] = field(default_factory=dict, hash=False)

    @property
    def smiles(self) -> str:
        return f"{self.reactants}>>{self.product}"


@dataclass(frozen=True)
class Dataset:
    split: Split
    reactions: tuple[Reaction, ...]
    predictions: Mapping[str, Mapping[int, Prediction]] = field(default_factory=dict, hash=False)

    def __post_init__(self) -> None:
        by_idx = {}
        for r in self.reactions:
            if r.idx in by_idx:
                raise DuplicateIdx(r.idx)
            by_idx[r.idx] = r
        for tool_id, table in self.predictions.items():
            for idx in table:
                if idx not in by_idx:
                    raise DatasetError(f"prediction for tool {tool_id!r} references unknown idx {idx}")
        object.__setattr__(self, "_by_idx", by_idx)

    def __len__(self) -> int:
        return len(self.reactions)

    def __iter__(self):
        return iter(self.reactions)

    def __getitem__(self, idx: int) -> Reaction:
        return self._by_idx[idx]  # type: ignore[attr-defined]

    def __contains__(self, idx: object) -> bool:
        return idx in self._by_idx  # type: ignore[attr-defined]

    @property
    def tool_ids(self) -> list[str]:
        return sorted(self.predictions)

    @property
    def labeled(self) -> bool:
        return bool(self.reactions) and all(r.label is not None for r in self.reactions)

    def prediction(self, tool_id: str, idx: int) -> Prediction:
        """Missing tools and missing rows both resolve to NA."""
        return self.predictions.get(tool_id, {}).get(idx, Prediction.NA)

    def predictions_for(self, idx: int, tool_ids: Iterable[str]) -> dict[str, Prediction]:
        return {t: self.prediction(t, idx) for t in tool_ids}

    def correct(self, tool_id: str, idx: int) -> bool:
        return self.prediction(tool_id, idx).matches(self[idx].label)

    def with_predictions(self, tool_id: str, table: Mapping[int, Prediction]) -> "Dataset":
        merged = {t: dict(v) for t, v in self.predictions.items()}
        merged[tool_id] = {i: p for i, p in table.items() if i in self}
        return Dataset(self.split, self.reactions, merged)

    def subset(self, idxs: Iterable[int]) -> "Dataset":
        keep = set(idxs)
        reactions = tuple(r for r in self.reactions if r.idx in keep)
        preds = {t: {i: p for i, p in v.items() if i in keep} for t, v in self.predictions.items()}
        return Dataset(self.split, reactions, preds)


class DatasetError(ArmorError):
    code = "ValidationFailure"


class MalformedLine(DatasetError):
    def __init__(self, line_no: int, detail: str = ""):
        super().__init__(f"malformed JSON on line {line_no}: {detail}".rstrip(": "))
        self.line_no = line_no


class DuplicateIdx(DatasetError):
    def __init__(self, idx: int, line_no: int | None = None):
        where = f" (line {line_no})" if line_no is not None else ""
        super().__init__(f"duplicate idx {idx}{where}")
        self.idx = idx
        self.line_no = line_no


class MissingField(DatasetError):
    def __init__(self, name: str, line_no: int):
        super().__init__(f"missing field {name!r} on line {line_no}")
        self.field = name
        self.line_no = line_no


def _is_prediction_value(value: Any) -> bool:
    if isinstance(value, bool):
        return False
    return value is None or value in (0, 1) or (isinstance(value, str) and value.strip().upper() == "NA")


def load_dataset(
    path: str | Path,
    format: str = "jsonl",
    split: Split | str = Split.VALIDATION,
    tool_ids: Iterable[str] | None = None,
) -> Dataset:
    """Read a JSONL dataset.

    Keys other than ``idx``/``reactants``/``product``/``label`` are treated as
    per-tool prediction columns when their value is 0, 1, "NA" or null, or when
    they are listed in ``tool_ids``. Anything else is kept in ``Reaction.extra``.
    """
    if format != "jsonl":
        raise DatasetError(f"unsupported dataset format {format!r}")
    split = Split(split)
    declared = set(tool_ids) if tool_ids is not None else None
    reactions: list[Reaction] = []
    predictions: dict[str, dict[int, Prediction]] = {}
    seen: set[int] = set()
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedLine(line_no, exc.msg) from None
            if not isinstance(obj, dict):
                raise MalformedLine(line_no, "record is not an object")
            for key in ("idx", "reactants", "product"):
                if key not in obj:
                    raise MissingField(key, line_no)
            idx = obj["idx"]
            if isinstance(idx, bool) or not isinstance(idx, int) or idx < 0:
                raise MalformedLine(line_no, f"idx must be a non-negative integer, got {idx!r}")
            if idx in seen:
                raise DuplicateIdx(idx, line_no)
            seen.add(idx)
            label = obj.get("label")
            if label is not None:
                if isinstance(label, bool) or label not in (0, 1):
                    raise MalformedLine(line_no, f"label must be 0 or 1, got {label!r}")
                label = Label(label)
            extra = {}
            for key, value in obj.items():
                if key in CORE_KEYS:
                    continue
                is_tool = key in declared if declared is not None else _is_prediction_value(value)
                if is_tool:
                    try:
                        predictions.setdefault(key, {})[idx] = Prediction.parse(value)
                    except ValueError as exc:
                        raise MalformedLine(line_no, str(exc)) from None
                else:
                    extra[key] = value
            reactions.append(
                Reaction(idx, str(obj["reactants"]), str(obj["product"]), label, extra)
            )
    return Dataset(split, tuple(reactions), predictions)


def dataset_records(dataset: Dataset) -> list[dict[str, Any]]:
    records = []
    for r in dataset.reactions:
        rec: dict[str, Any] = {"idx": r.idx, "reactants": r.reactants, "product": r.product}
        if r.label is not None:
            rec["label"] = int(r.label)
        rec.update(r.extra)
        for tool_id in dataset.tool_ids:
            pred = dataset.predictions[tool_id].get(r.idx)
            if pred is not None:
                rec[tool_id] = pred.to_json()
        records.append(rec)
    return records


def dump_dataset(dataset: Dataset, path: str | Path) -> None:
    from armor.io import atomic_write_text

    lines = [json.dumps(rec, ensure_ascii=False) for rec in dataset_records(dataset)]
    atomic_write_text(path, "\n".join(lines) + ("\n" if lines else ""))


@dataclass(frozen=True)
class Violation:
    kind: str
    field: str
    detail: str = ""


@dataclass(frozen=True)
class ValidationResult:
    violations: tuple[Violation, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok


def validate_reaction(r: Reaction) -> ValidationResult:
    from armor.chem import SmilesError, tokenize_smiles

    violations = []
    for name, value in (("reactants", r.reactants), ("product", r.product)):
        if not value or not value.strip():
            violations.append(Violation("Empty" + name.capitalize(), name))
            continue
        try:
            tokenize_smiles(value)
        except SmilesError as exc:
            violations.append(Violation(type(exc).__name__, name, str(exc)))
    return ValidationResult(tuple(violations))
