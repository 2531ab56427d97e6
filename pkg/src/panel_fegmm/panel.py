"""Panel containers, validation and CSV ingestion."""

from __future__ import annotations

import csv
import math
from collections.abc import Iterator, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, ParseError, SchemaError, UnderIdentifiedError


@dataclass(frozen=True)
class IndividualBlock:
    """Time-ordered observations ``z_it`` for one individual.

    ``values`` is a ``(T_i, k)`` float array; row ``t`` is the raw record at
    ``times[t]``. The arrays are made read-only on construction.
    """

    id: str
    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=np.int64).reshape(-1)
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim == 1:
            values = values.reshape(-1, 1)
        if values.shape[0] != times.shape[0]:
            raise DataError(f"individual {self.id}: {times.shape[0]} times but {values.shape[0]} rows")
        if times.shape[0] < 1:
            raise DataError(f"individual {self.id}: no observations")
        if np.any(np.diff(times) <= 0):
            raise DataError(f"individual {self.id}: time index not strictly increasing")
        if not np.all(np.isfinite(values)):
            raise DataError(f"individual {self.id}: non-finite observation")
        times.setflags(write=False)
        values = np.array(values)
        values.setflags(write=False)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def arity(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class PanelDataset:
    """An immutable collection of individual blocks, in input order."""

    blocks: tuple[IndividualBlock, ...]
    columns: tuple[str, ...] = field(default=())

    def __post_init__(self):
        blocks = tuple(self.blocks)
        if len(blocks) < 1:
            raise DataError("panel needs at least one individual")
        ids = [b.id for b in blocks]
        if len(set(ids)) != len(ids):
            dup = next(i for i in ids if ids.count(i) > 1)
            raise DataError(f"duplicate individual id {dup!r}")
        object.__setattr__(self, "blocks", blocks)
        object.__setattr__(self, "columns", tuple(self.columns))

    @property
    def n(self) -> int:
        return len(self.blocks)

    @property
    def balanced(self) -> bool:
        return len({b.T for b in self.blocks}) == 1

    @property
    def T_i(self) -> np.ndarray:
        return np.array([b.T for b in self.blocks])

    @property
    def T_bar(self) -> float:
        return float(np.mean(self.T_i))

    @property
    def ids(self) -> list[str]:
        return [b.id for b in self.blocks]

    def __iter__(self) -> Iterator[IndividualBlock]:
        return iter(self.blocks)

    def __len__(self) -> int:
        return len(self.blocks)

    def __getitem__(self, i: int) -> IndividualBlock:
        return self.blocks[i]

    def stacked(self) -> np.ndarray:
        """Values of a balanced panel as an ``(n, T, k)`` array."""
        if not self.balanced:
            raise DataError("stacked() requires a balanced panel")
        return np.stack([b.values for b in self.blocks])

    @classmethod
    def from_arrays(cls, values, ids=None, times=None, columns=()) -> PanelDataset:
        """Build a balanced panel from an ``(n, T, k)`` array."""
        values = np.asarray(values, dtype=np.float64)
        if values.ndim == 2:
            values = values[:, :, None]
        n, T = values.shape[:2]
        ids = [str(i) for i in range(n)] if ids is None else [str(i) for i in ids]
        times = np.arange(1, T + 1) if times is None else np.asarray(times)
        return cls(tuple(IndividualBlock(ids[i], times, values[i]) for i in range(n)), columns)


@dataclass(frozen=True)
class CsvSchema:
    """Column mapping for :func:`load_csv`.

    ``values`` lists the value columns in the order the moment model expects
    them as the components of ``z_it``.
    """

    id: str
    time: str
    values: tuple[str, ...]
    delimiter: str = ","

    @classmethod
    def from_mapping(cls, m: Mapping) -> CsvSchema:
        try:
            id_col, time_col = m["id"], m["time"]
        except KeyError as exc:
            raise SchemaError(f"schema must name an {exc.args[0]!r} column") from None
        if "values" in m:
            values = tuple(m["values"])
        else:
            # grouped layout for the linear random-coefficient preset
            values = tuple(_as_list(m.get("y"))) + tuple(
                c for g in ("x1", "x2", "w2") for c in _as_list(m.get(g))
            )
        if not values:
            raise SchemaError("schema must name at least one value column")
        return cls(id_col, time_col, values, m.get("delimiter", ","))


def _as_list(v) -> list:
    if v is None:
        return []
    return [v] if isinstance(v, str) else list(v)


def load_csv(path, schema: CsvSchema | Mapping) -> PanelDataset:
    """Read a long-format CSV into a :class:`PanelDataset`.

    Rows are grouped by the id column (first-appearance order) and sorted by
    the integer time column.
    """
    if not isinstance(schema, CsvSchema):
        schema = CsvSchema.from_mapping(schema)
    path = Path(path)
    groups: dict[str, list[tuple[int, list[float]]]] = {}
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh, delimiter=schema.delimiter)
        header = reader.fieldnames or []
        missing = [c for c in (schema.id, schema.time, *schema.values) if c not in header]
        if missing:
            raise SchemaError(f"missing column(s) {missing} in {path}")
        for lineno, row in enumerate(reader, start=2):
            key = row[schema.id]
            try:
                t = int(row[schema.time])
            except (TypeError, ValueError):
                raise ParseError(f"row {lineno}: time {row[schema.time]!r} is not an integer") from None
            vals = []
            for c in schema.values:
                cell = row[c]
                try:
                    v = float(cell)
                except (TypeError, ValueError):
                    raise ParseError(f"row {lineno}: column {c!r} value {cell!r} is not numeric") from None
                if not math.isfinite(v):
                    raise ParseError(f"row {lineno}: column {c!r} value {cell!r} is not finite")
                vals.append(v)
            groups.setdefault(key, []).append((t, vals))
    blocks = []
    for key, rows in groups.items():
        rows.sort(key=lambda r: r[0])
        times = [r[0] for r in rows]
        for a, b in zip(times, times[1:]):
            if a == b:
                raise DataError(f"duplicate observation for id {key}, time {a}")
        blocks.append(IndividualBlock(key, np.array(times), np.array([r[1] for r in rows])))
    if not blocks:
        raise DataError(f"{path} has no data rows")
    return PanelDataset(tuple(blocks), schema.values)


def write_csv(panel: PanelDataset, path, columns: Sequence[str] | None = None,
              id_col: str = "id", time_col: str = "time", delimiter: str = ",") -> None:
    """Write ``panel`` in long format with 17 significant digits."""
    columns = list(columns or panel.columns or [f"z{k}" for k in range(panel[0].arity)])
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, delimiter=delimiter)
        w.writerow([id_col, time_col, *columns])
        for b in panel:
            for t, row in zip(b.times, b.values):
                w.writerow([b.id, int(t), *(f"{v:.17g}" for v in row)])


def validate(panel: PanelDataset, model) -> None:
    """Check arity and the per-individual order condition ``T_i > d_alpha``."""
    arity = getattr(model, "arity", None)
    for b in panel:
        if arity is not None and b.arity != arity:
            raise DataError(f"individual {b.id}: observation arity {b.arity}, model expects {arity}")
        if b.T <= model.dims.d_alpha:
            raise UnderIdentifiedError(
                f"individual {b.id} is under-identified: T_i={b.T} <= d_alpha={model.dims.d_alpha}",
                ids=[b.id],
            )
