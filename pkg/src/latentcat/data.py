"""Survey-extract ingestion, discretization, and contingency tables.

The observable record is a 4-tuple of discrete codes: a reported outcome
``x`` in {1..S_X}, a binary auxiliary indicator ``y`` in {0,1}, a second
discretized auxiliary measure ``z`` in {1..S_Z}, and a covariate-cell index
``w`` packing a short vector of binary covariates. Everything downstream
(tests, identification, estimation) consumes either the per-record code
arrays or the (x, y, z) contingency table of one covariate cell.

Discretization conventions
--------------------------
* ``median_split``: 1 iff strictly above the sample median (midpoint of the
  two central order statistics for even n).
* ``tercile_bin``: nearest-rank 33rd/66th percentiles; a value equal to a
  percentile boundary falls in the lower bin.
* Covariate cells: binary covariates packed little-endian in declared column
  order, so cell index = sum(bit_k * 2**k).
"""

from __future__ import annotations

import configparser
import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DataError, SchemaError

MAX_W_COLUMNS = 8

__all__ = [
    "Schema",
    "ExclusionReport",
    "Dataset",
    "ContingencyTable",
    "JointPmf",
    "load_schema",
    "ingest",
    "median_split",
    "tercile_bin",
    "tabulate",
    "frequency_pmf",
    "w_cell_bits",
    "w_cell_label",
]


# ---------------------------------------------------------------------------
# Schema
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Schema:
    """Column mapping and discretization rules for one survey extract.

    ``x_recode`` maps raw outcome codes to {1..S_X} and must be total on the
    declared raw codes and surjective onto {1..S_X}. ``z_binning`` is either
    the string ``"tercile"`` or an increasing tuple of explicit cuts
    (bin 1: v <= c1, bin k: c_{k-1} < v <= c_k, top bin: v > c_last).
    ``y_binning`` is either ``"median"`` or an explicit threshold (code 1
    iff value > threshold).
    """

    x_column: str
    y_column: str
    z_column: str
    w_columns: tuple[str, ...]
    x_recode: dict[int, int]
    z_binning: str | tuple[float, ...] = "tercile"
    y_binning: str | float = "median"
    w_letters: tuple[str, ...] | None = None

    def __post_init__(self):
        if len(self.w_columns) > MAX_W_COLUMNS:
            raise SchemaError(
                f"{len(self.w_columns)} covariate columns; at most "
                f"{MAX_W_COLUMNS} supported (2^|W| cells must stay enumerable)"
            )
        if not self.x_recode:
            raise SchemaError("x_recode is empty")
        targets = set(self.x_recode.values())
        s_x = max(targets)
        if targets != set(range(1, s_x + 1)):
            raise SchemaError(
                f"x_recode targets {sorted(targets)} are not exactly 1..{s_x}"
            )
        if isinstance(self.z_binning, tuple):
            cuts = self.z_binning
            if len(cuts) < 1 or any(a >= b for a, b in zip(cuts, cuts[1:])):
                raise SchemaError("explicit z cuts must be strictly increasing")
        elif self.z_binning != "tercile":
            raise SchemaError(f"unknown z_binning {self.z_binning!r}")
        if isinstance(self.y_binning, str) and self.y_binning != "median":
            raise SchemaError(f"unknown y_binning {self.y_binning!r}")
        if self.w_letters is not None:
            if len(self.w_letters) != len(self.w_columns):
                raise SchemaError("w_letters must match w_columns in length")
            if len(set(self.w_letters)) != len(self.w_letters):
                raise SchemaError("w_letters must be distinct")

    @property
    def s_x(self) -> int:
        return max(self.x_recode.values())

    @property
    def s_z(self) -> int:
        if self.z_binning == "tercile":
            return 3
        return len(self.z_binning) + 1

    @property
    def n_w_cells(self) -> int:
        return 2 ** len(self.w_columns)

    def letters(self) -> tuple[str, ...]:
        if self.w_letters is not None:
            return self.w_letters
        initials = tuple(c[0].upper() for c in self.w_columns)
        if len(set(initials)) == len(initials):
            return initials
        # Colliding initials would merge cell labels; fall back to positions.
        return tuple(chr(ord("A") + k) for k in range(len(self.w_columns)))


def load_schema(path_or_text) -> Schema:
    """Parse a schema configuration file (INI grammar, see README).

    Accepts a filesystem path, or an already-read text blob (anything
    containing a newline is treated as text).
    """
    parser = configparser.ConfigParser()
    text = str(path_or_text)
    try:
        if "\n" in text:
            parser.read_string(text)
        else:
            with open(text, encoding="utf-8") as handle:
                parser.read_file(handle)
    except OSError as exc:
        raise SchemaError(f"cannot read schema file: {exc}") from exc
    except configparser.Error as exc:
        raise SchemaError(f"malformed schema file: {exc}") from exc

    try:
        cols = parser["columns"]
        x_column = cols["x"].strip()
        y_column = cols["y"].strip()
        z_column = cols["z"].strip()
        w_columns = tuple(
            c.strip() for c in cols.get("w", "").split(",") if c.strip()
        )
        recode_txt = parser["recode"]["x"]
    except KeyError as exc:
        raise SchemaError(f"schema missing required key: {exc}") from exc

    x_recode: dict[int, int] = {}
    for pair in recode_txt.split():
        try:
            raw, code = pair.split(":")
            x_recode[int(raw)] = int(code)
        except ValueError as exc:
            raise SchemaError(f"bad recode pair {pair!r}") from exc

    z_binning: str | tuple[float, ...] = "tercile"
    y_binning: str | float = "median"
    if parser.has_section("binning"):
        binning = parser["binning"]
        if "z" in binning:
            spec = binning["z"].split()
            if spec[0] == "tercile":
                z_binning = "tercile"
            elif spec[0] == "cuts":
                z_binning = tuple(float(v) for v in spec[1:])
            else:
                raise SchemaError(f"unknown z binning rule {binning['z']!r}")
        if "y" in binning:
            spec = binning["y"].split()
            if spec[0] == "median":
                y_binning = "median"
            elif spec[0] == "above":
                y_binning = float(spec[1])
            else:
                raise SchemaError(f"unknown y binning rule {binning['y']!r}")

    w_letters = None
    if parser.has_option("labels", "w_letters"):
        w_letters = tuple(
            s.strip() for s in parser["labels"]["w_letters"].split(",") if s.strip()
        )

    return Schema(
        x_column=x_column,
        y_column=y_column,
        z_column=z_column,
        w_columns=w_columns,
        x_recode=x_recode,
        z_binning=z_binning,
        y_binning=y_binning,
        w_letters=w_letters,
    )


# ---------------------------------------------------------------------------
# Core record container
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ExclusionReport:
    """Counts of records dropped during ingestion, by reason."""

    n_read: int
    n_kept: int
    reasons: dict[str, int] = field(default_factory=dict)

    @property
    def n_excluded(self) -> int:
        return self.n_read - self.n_kept

    def to_dict(self) -> dict:
        return {
            "n_read": self.n_read,
            "n_kept": self.n_kept,
            "n_excluded": self.n_excluded,
            "reasons": dict(sorted(self.reasons.items())),
        }


def w_cell_bits(cell: int, n_cols: int) -> tuple[int, ...]:
    """Unpack a little-endian cell index into its covariate bits."""
    return tuple((cell >> k) & 1 for k in range(n_cols))


def w_cell_label(cell: int, letters: tuple[str, ...]) -> str:
    """Display label for a covariate cell: letters of the set bits, '0' if none."""
    marks = [letters[k] for k in range(len(letters)) if (cell >> k) & 1]
    return "".join(marks) if marks else "0"


@dataclass(frozen=True)
class Dataset:
    """Recoded survey records, immutable after construction.

    ``x`` in {1..S_X}, ``y`` in {0,1}, ``z`` in {1..S_Z}, ``w`` in
    {0..2^|W|-1}. ``w_labels`` holds one display label per covariate cell.
    """

    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    w: np.ndarray
    support: tuple[int, int, int]
    w_columns: tuple[str, ...] = ()
    w_labels: tuple[str, ...] = ("0",)

    def __post_init__(self):
        for name in ("x", "y", "z", "w"):
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.int64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        s_x, s_y, s_z = self.support
        if s_y != 2:
            raise DataError("the auxiliary indicator must be binary")
        n = self.x.shape[0]
        if n == 0:
            raise DataError("empty dataset")
        if not (self.y.shape[0] == self.z.shape[0] == self.w.shape[0] == n):
            raise DataError("code arrays differ in length")
        n_cells = 2 ** len(self.w_columns)
        for arr, lo, hi, name in (
            (self.x, 1, s_x, "x"),
            (self.y, 0, 1, "y"),
            (self.z, 1, s_z, "z"),
            (self.w, 0, n_cells - 1, "w"),
        ):
            if arr.size and (arr.min() < lo or arr.max() > hi):
                raise DataError(f"{name} codes outside declared support [{lo},{hi}]")
        if len(self.w_labels) != n_cells:
            raise DataError("w_labels length must be 2^|w_columns|")
        if len(set(self.w_labels)) != n_cells:
            raise DataError("covariate cell labels must be unique")

    @property
    def n(self) -> int:
        return int(self.x.shape[0])

    @property
    def n_w_cells(self) -> int:
        return 2 ** len(self.w_columns)

    def cell_counts(self) -> np.ndarray:
        """Record count per covariate cell, length 2^|W|."""
        return np.bincount(self.w, minlength=self.n_w_cells)

    def restrict(self, w_cell: int) -> Dataset:
        """Records of a single covariate cell, as a 0-covariate dataset."""
        mask = self.w == w_cell
        if not mask.any():
            raise DataError(f"covariate cell {self.w_labels[w_cell]!r} is empty")
        return Dataset(
            x=self.x[mask],
            y=self.y[mask],
            z=self.z[mask],
            w=np.zeros(int(mask.sum()), dtype=np.int64),
            support=self.support,
            w_columns=(),
            w_labels=(self.w_labels[w_cell],),
        )


# ---------------------------------------------------------------------------
# Discretization
# ---------------------------------------------------------------------------


def median_split(values) -> np.ndarray:
    """Binary-code a real list: 1 iff strictly above the sample median."""
    arr = np.asarray(values, dtype=float)
    if arr.size == 0:
        raise DataError("median_split of an empty list")
    return (arr > np.median(arr)).astype(np.int64)


def _nearest_rank(sorted_values: np.ndarray, level: float) -> float:
    rank = int(np.ceil(level * sorted_values.size))
    return float(sorted_values[max(rank, 1) - 1])


def tercile_bin(values) -> np.ndarray:
    """Code a real list into {1,2,3} by nearest-rank 33rd/66th percentiles.

    Boundary ties go to the lower bin: bin 1 is v <= p33, bin 2 is
    p33 < v <= p66, bin 3 is v > p66.
    """
    arr = np.asarray(values, dtype=float)
    if arr.size == 0:
        raise DataError("tercile_bin of an empty list")
    ordered = np.sort(arr)
    p33 = _nearest_rank(ordered, 0.33)
    p66 = _nearest_rank(ordered, 0.66)
    codes = np.ones(arr.size, dtype=np.int64)
    codes[arr > p33] = 2
    codes[arr > p66] = 3
    return codes


def _apply_cuts(values: np.ndarray, cuts: tuple[float, ...]) -> np.ndarray:
    codes = np.ones(values.size, dtype=np.int64)
    for cut in cuts:
        codes[values > cut] += 1
    return codes


# ---------------------------------------------------------------------------
# Ingestion
# ---------------------------------------------------------------------------


def _parse_number(token: str) -> float:
    token = token.strip()
    if not token:
        raise ValueError("empty field")
    value = float(token)
    if not np.isfinite(value):
        raise ValueError("non-finite field")
    return value


def ingest(source, schema: Schema) -> tuple[Dataset, ExclusionReport]:
    """Read a delimited extract, apply the schema, and drop unusable rows.

    ``source`` is a path or an open text stream with a header row naming all
    schema columns. Rows with missing/unparsable fields, x codes absent from
    the recode map, or non-binary covariate values are excluded (listwise)
    and tallied by reason in the returned report.
    """
    if hasattr(source, "read"):
        stream = source
        close = False
    else:
        try:
            stream = open(source, encoding="utf-8", newline="")
        except OSError as exc:
            raise DataError(f"cannot read input: {exc}") from exc
        close = True
    try:
        reader = csv.reader(stream)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError("input has no header row") from None
        header = [h.strip() for h in header]
        needed = [schema.x_column, schema.y_column, schema.z_column, *schema.w_columns]
        missing = [c for c in needed if c not in header]
        if missing:
            raise SchemaError(f"input is missing declared columns: {missing}")
        idx = {c: header.index(c) for c in needed}

        x_raw: list[int] = []
        y_raw: list[float] = []
        z_raw: list[float] = []
        w_cells: list[int] = []
        reasons: dict[str, int] = {}
        n_read = 0

        def drop(reason: str) -> None:
            reasons[reason] = reasons.get(reason, 0) + 1

        for row in reader:
            if not row or all(not f.strip() for f in row):
                continue
            n_read += 1
            try:
                xv = _parse_number(row[idx[schema.x_column]])
                yv = _parse_number(row[idx[schema.y_column]])
                zv = _parse_number(row[idx[schema.z_column]])
                wv = [_parse_number(row[idx[c]]) for c in schema.w_columns]
            except (ValueError, IndexError):
                drop("missing_or_nonnumeric")
                continue
            if xv != int(xv):
                drop("noninteger_x")
                continue
            if int(xv) not in schema.x_recode:
                drop("unmapped_x")
                continue
            bits = []
            ok = True
            for v in wv:
                if v not in (0.0, 1.0):
                    ok = False
                    break
                bits.append(int(v))
            if not ok:
                drop("nonbinary_w")
                continue
            x_raw.append(schema.x_recode[int(xv)])
            y_raw.append(yv)
            z_raw.append(zv)
            w_cells.append(sum(b << k for k, b in enumerate(bits)))
    finally:
        if close:
            stream.close()

    report = ExclusionReport(n_read=n_read, n_kept=len(x_raw), reasons=reasons)
    if not x_raw:
        raise DataError(
            f"no usable records after exclusions "
            f"(read {n_read}, dropped {report.n_excluded})"
        )

    y_vals = np.asarray(y_raw, dtype=float)
    z_vals = np.asarray(z_raw, dtype=float)
    if schema.y_binning == "median":
        y_codes = median_split(y_vals)
    else:
        y_codes = (y_vals > float(schema.y_binning)).astype(np.int64)
    if schema.z_binning == "tercile":
        z_codes = tercile_bin(z_vals)
    else:
        z_codes = _apply_cuts(z_vals, schema.z_binning)

    letters = schema.letters()
    labels = tuple(
        w_cell_label(c, letters) for c in range(schema.n_w_cells)
    )
    data = Dataset(
        x=np.asarray(x_raw, dtype=np.int64),
        y=y_codes,
        z=z_codes,
        w=np.asarray(w_cells, dtype=np.int64),
        support=(schema.s_x, 2, schema.s_z),
        w_columns=schema.w_columns,
        w_labels=labels,
    )
    return data, report


def ingest_text(text: str, schema: Schema) -> tuple[Dataset, ExclusionReport]:
    """Convenience wrapper: ingest from an in-memory CSV string."""
    return ingest(io.StringIO(text), schema)


# ---------------------------------------------------------------------------
# Tables and pmfs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ContingencyTable:
    """Integer counts over the full (x, y, z) grid of one (sub)sample.

    ``counts[x-1, y, z-1]`` is the number of records with those codes; zero
    cells are present, and the entries sum to ``n``.
    """

    counts: np.ndarray
    n: int
    w_cell: str | None = None

    def __post_init__(self):
        arr = np.ascontiguousarray(self.counts, dtype=np.int64)
        arr.setflags(write=False)
        object.__setattr__(self, "counts", arr)
        if arr.ndim != 3:
            raise DataError("counts must be a 3-d (x, y, z) array")
        if (arr < 0).any():
            raise DataError("negative cell count")
        if int(arr.sum()) != self.n:
            raise DataError("cell counts do not sum to n")

    @property
    def support(self) -> tuple[int, int, int]:
        return tuple(self.counts.shape)  # type: ignore[return-value]


@dataclass(frozen=True)
class JointPmf:
    """Joint probability mass over the (x, y, z) grid; sums to 1."""

    probs: np.ndarray
    support: tuple[int, int, int]

    def __post_init__(self):
        arr = np.ascontiguousarray(self.probs, dtype=float)
        arr.setflags(write=False)
        object.__setattr__(self, "probs", arr)
        if arr.shape != tuple(self.support):
            raise DataError("pmf shape does not match declared support")
        if (arr < 0).any():
            raise DataError("negative probability entry")
        if abs(float(arr.sum()) - 1.0) > 1e-12:
            raise DataError(f"pmf sums to {arr.sum()!r}, not 1")


def tabulate(data: Dataset, w_cell: int | None = None) -> ContingencyTable:
    """Count records over the full (x, y, z) grid, optionally for one W-cell."""
    s_x, _, s_z = data.support
    if w_cell is None:
        mask = slice(None)
        label = None
        n = data.n
    else:
        mask = data.w == w_cell
        n = int(np.count_nonzero(mask))
        label = data.w_labels[w_cell]
        if n == 0:
            raise DataError(f"covariate cell {label!r} has no records")
    flat = (
        (data.x[mask] - 1) * (2 * s_z)
        + data.y[mask] * s_z
        + (data.z[mask] - 1)
    )
    counts = np.bincount(flat, minlength=s_x * 2 * s_z).reshape(s_x, 2, s_z)
    return ContingencyTable(counts=counts, n=n, w_cell=label)


def frequency_pmf(table: ContingencyTable) -> JointPmf:
    """Cell counts divided by n: the maximum-likelihood pmf estimate."""
    if table.n <= 0:
        raise DataError("cannot normalize an empty table")
    return JointPmf(probs=table.counts / table.n, support=table.support)


def pmf_from_probs(probs: np.ndarray) -> JointPmf:
    """Wrap a raw (x, y, z) probability array, renormalizing rounding slack."""
    arr = np.asarray(probs, dtype=float)
    total = float(arr.sum())
    if total <= 0:
        raise ConfigurationError("probability array sums to zero")
    return JointPmf(probs=arr / total, support=tuple(arr.shape))  # type: ignore[arg-type]
