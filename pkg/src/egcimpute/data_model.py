"""Variable schema, mixed dataset container and the latent index layout."""
from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

CONTINUOUS = "continuous"
ORDINAL = "ordinal"
CATEGORICAL = "categorical"
KINDS = (CONTINUOUS, ORDINAL, CATEGORICAL)


class SchemaError(ValueError):
    pass


class DataError(ValueError):
    """Invalid cell or layout in a dataset; message carries the location."""


@dataclass(frozen=True)
class VariableSpec:
    """One column: its name, kind and kind-specific parameters.

    Ordinals carry ``levels`` (values are coded 1..levels).  Categoricals
    carry ``labels``; the code of a label is its 1-based position.
    """

    name: str
    kind: str
    levels: int | None = None
    labels: tuple[str, ...] | None = None

    def __post_init__(self):
        if not self.name or any(c.isspace() for c in self.name):
            raise SchemaError(f"invalid variable name {self.name!r}")
        if self.kind not in KINDS:
            raise SchemaError(f"variable {self.name!r}: unknown kind {self.kind!r}")
        if self.kind == ORDINAL:
            if self.levels is None or int(self.levels) < 2:
                raise SchemaError(f"variable {self.name!r}: ordinal needs at least 2 levels")
            object.__setattr__(self, "levels", int(self.levels))
        if self.kind == CATEGORICAL:
            if self.labels is None or len(self.labels) < 2:
                raise SchemaError(f"variable {self.name!r}: categorical needs at least 2 labels")
            labels = tuple(str(lab) for lab in self.labels)
            if len(set(labels)) != len(labels):
                raise SchemaError(f"variable {self.name!r}: duplicate category labels")
            object.__setattr__(self, "labels", labels)

    @classmethod
    def continuous(cls, name: str) -> "VariableSpec":
        return cls(name, CONTINUOUS)

    @classmethod
    def ordinal(cls, name: str, levels: int) -> "VariableSpec":
        return cls(name, ORDINAL, levels=levels)

    @classmethod
    def categorical(cls, name: str, labels: Sequence[str] | int) -> "VariableSpec":
        if isinstance(labels, (int, np.integer)):
            labels = [str(k) for k in range(1, int(labels) + 1)]
        return cls(name, CATEGORICAL, labels=tuple(labels))

    @property
    def is_categorical(self) -> bool:
        return self.kind == CATEGORICAL

    @property
    def is_ordered(self) -> bool:
        return self.kind != CATEGORICAL

    @property
    def n_categories(self) -> int:
        return len(self.labels) if self.labels is not None else 0

    @property
    def latent_width(self) -> int:
        return self.n_categories if self.is_categorical else 1

    def describe(self) -> str:
        if self.kind == ORDINAL:
            return f"{self.name} {ORDINAL} {self.levels}"
        if self.kind == CATEGORICAL:
            return f"{self.name} {CATEGORICAL} {','.join(self.labels)}"
        return f"{self.name} {CONTINUOUS}"


@dataclass(frozen=True)
class VariableSchema:
    variables: tuple[VariableSpec, ...]

    def __post_init__(self):
        variables = tuple(self.variables)
        object.__setattr__(self, "variables", variables)
        names = [v.name for v in variables]
        if len(set(names)) != len(names):
            raise SchemaError("variable names must be unique")

    def __len__(self):
        return len(self.variables)

    def __iter__(self):
        return iter(self.variables)

    def __getitem__(self, j):
        return self.variables[j]

    @property
    def names(self) -> list[str]:
        return [v.name for v in self.variables]

    @property
    def p(self) -> int:
        return len(self.variables)

    @property
    def p_cat(self) -> int:
        return sum(v.is_categorical for v in self.variables)

    @property
    def p_ord(self) -> int:
        return self.p - self.p_cat

    def indices(self, kind: str) -> list[int]:
        return [j for j, v in enumerate(self.variables) if v.kind == kind]

    def to_text(self) -> str:
        return "".join(v.describe() + "\n" for v in self.variables)

    def hash(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()

    @classmethod
    def from_text(cls, text: str) -> "VariableSchema":
        """Parse the sidecar format: one ``name kind [params]`` line per variable.

        ``params`` is the level count for ordinals, and either a comma-separated
        label list or a category count (labels "1".."K") for categoricals.
        """
        specs = []
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(None, 2)
            if len(parts) < 2:
                raise SchemaError(f"schema line {lineno}: expected 'name kind [params]'")
            name, kind = parts[0], parts[1].lower()
            param = parts[2].strip() if len(parts) == 3 else None
            try:
                if kind == CONTINUOUS:
                    if param:
                        raise SchemaError("continuous takes no parameters")
                    specs.append(VariableSpec.continuous(name))
                elif kind == ORDINAL:
                    if param is None:
                        raise SchemaError("ordinal needs a level count")
                    specs.append(VariableSpec.ordinal(name, int(param)))
                elif kind == CATEGORICAL:
                    if param is None:
                        raise SchemaError("categorical needs labels")
                    if "," not in param and param.isdigit():
                        specs.append(VariableSpec.categorical(name, int(param)))
                    else:
                        specs.append(VariableSpec.categorical(name, [s.strip() for s in param.split(",")]))
                else:
                    raise SchemaError(f"unknown kind {kind!r}")
            except (SchemaError, ValueError) as exc:
                raise SchemaError(f"schema line {lineno}: {exc}") from None
        return cls(tuple(specs))

    @classmethod
    def read(cls, path: str | Path) -> "VariableSchema":
        return cls.from_text(Path(path).read_text())

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text())


@dataclass(frozen=True)
class LatentIndexMap:
    """Contiguous latent ranges, one per variable, in schema order.

    Indices are 0-based: variable ``j`` owns ``range(starts[j], starts[j] + widths[j])``.
    """

    starts: tuple[int, ...]
    widths: tuple[int, ...]
    categorical: tuple[bool, ...]

    @property
    def d(self) -> int:
        return (self.starts[-1] + self.widths[-1]) if self.starts else 0

    def __getitem__(self, j) -> range:
        return range(self.starts[j], self.starts[j] + self.widths[j])

    def __len__(self):
        return len(self.starts)

    def latent_indices(self, variables: Iterable[int]) -> np.ndarray:
        """Latent dims generating the given variables, the ``[I]`` of the model."""
        idx = [i for j in variables for i in self[j]]
        return np.asarray(idx, dtype=np.intp)

    def categorical_blocks(self) -> list[range]:
        return [self[j] for j in range(len(self)) if self.categorical[j]]


def build_latent_index_map(schema: VariableSchema) -> LatentIndexMap:
    starts, widths, cats = [], [], []
    pos = 0
    for v in schema:
        starts.append(pos)
        widths.append(v.latent_width)
        cats.append(v.is_categorical)
        pos += v.latent_width
    return LatentIndexMap(tuple(starts), tuple(widths), tuple(cats))


def _column_problem(spec: VariableSpec, col: np.ndarray) -> tuple[int, str] | None:
    """First invalid present cell of a column as (row index, reason)."""
    present = ~np.isnan(col)
    if spec.kind == CONTINUOUS:
        bad = present & ~np.isfinite(col)
        reason = "non-finite continuous value"
    else:
        upper = spec.levels if spec.kind == ORDINAL else spec.n_categories
        with np.errstate(invalid="ignore"):
            bad = present & ((col != np.round(col)) | (col < 1) | (col > upper))
        what = "ordinal value" if spec.kind == ORDINAL else "category code"
        reason = f"{what} out of range 1..{upper} or not an integer"
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        return i, f"{reason} ({col[i]!r})"
    return None


@dataclass(frozen=True)
class MixedDataset:
    """An n x p grid of optional values; ``NaN`` marks a missing cell.

    Continuous cells are reals, ordinal cells are levels 1..L and categorical
    cells are category codes 1..K (position of the label in the schema).
    """

    schema: VariableSchema
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        values = np.array(self.values, dtype=float, copy=True)
        if values.ndim != 2:
            values = values.reshape(-1, self.schema.p)
        if values.shape[1] != self.schema.p:
            raise DataError(f"expected {self.schema.p} columns, got {values.shape[1]}")
        for j, spec in enumerate(self.schema):
            problem = _column_problem(spec, values[:, j])
            if problem:
                raise DataError(f"row {problem[0] + 1}, column {spec.name!r}: {problem[1]}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def p(self) -> int:
        return self.schema.p

    @property
    def observed(self) -> np.ndarray:
        return ~np.isnan(self.values)

    def column(self, name_or_index) -> np.ndarray:
        j = name_or_index if isinstance(name_or_index, (int, np.integer)) else self.schema.names.index(name_or_index)
        return self.values[:, j]

    def with_values(self, values: np.ndarray) -> "MixedDataset":
        return MixedDataset(self.schema, values)

    def subset(self, rows) -> "MixedDataset":
        return MixedDataset(self.schema, self.values[rows])


def _parse_cell(spec: VariableSpec, text: str, na: str, where: str) -> float:
    if text == na or (na == "" and text.strip() == ""):
        return math.nan
    text = text.strip()
    if spec.kind == CATEGORICAL:
        try:
            return float(spec.labels.index(text) + 1)
        except ValueError:
            raise DataError(f"{where}: unknown label {text!r}") from None
    try:
        value = float(text)
    except ValueError:
        raise DataError(f"{where}: non-numeric value {text!r}") from None
    if spec.kind == ORDINAL:
        if value != int(value):
            raise DataError(f"{where}: ordinal value {text!r} is not an integer")
        if not 1 <= value <= spec.levels:
            raise DataError(f"{where}: ordinal value {text} out of range 1..{spec.levels}")
    elif not math.isfinite(value):
        raise DataError(f"{where}: non-finite value {text!r}")
    return value


def _data_lines(handle):
    for line in handle:
        if not line.startswith("#"):
            yield line


def load_dataset(csv_path: str | Path, schema: VariableSchema | str | Path, na: str = "") -> MixedDataset:
    """Read a CSV with a header row, validating every cell against ``schema``.

    Lines starting with ``#`` are comments.  Cells equal to ``na`` (empty by
    default) are missing.
    """
    if not isinstance(schema, VariableSchema):
        schema = VariableSchema.read(schema)
    with open(csv_path, newline="") as handle:
        reader = csv.reader(_data_lines(handle))
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{csv_path}: missing header row") from None
        if header != schema.names:
            raise DataError(f"{csv_path}: header {header} does not match schema columns {schema.names}")
        rows = []
        for rowno, record in enumerate(reader, start=1):
            if not record:
                continue
            if len(record) != schema.p:
                raise DataError(f"row {rowno}: expected {schema.p} cells, got {len(record)}")
            rows.append([
                _parse_cell(spec, cell, na, f"row {rowno}, column {spec.name!r}")
                for spec, cell in zip(schema, record)
            ])
    values = np.array(rows, dtype=float).reshape(len(rows), schema.p)
    return MixedDataset(schema, values)


def format_cell(spec: VariableSpec, value: float, na: str = "") -> str:
    if math.isnan(value):
        return na
    if spec.kind == CATEGORICAL:
        return spec.labels[int(value) - 1]
    if spec.kind == ORDINAL:
        return str(int(value))
    return repr(float(value))


def write_dataset(dataset: MixedDataset, csv_path: str | Path, na: str = "", comment: str | None = None) -> None:
    with open(csv_path, "w", newline="") as handle:
        if comment:
            handle.write(f"# {comment}\n")
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(dataset.schema.names)
        for row in dataset.values:
            writer.writerow([format_cell(spec, v, na) for spec, v in zip(dataset.schema, row)])
