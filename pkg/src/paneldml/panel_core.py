"""Balanced clustered panels, time-blocked folds and CSV ingestion.

Internally items, periods and groups are dense 0-based indices; the original
string ids are kept on the dataset for output.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .errors import DataValidationError

__all__ = [
    "PanelDataset",
    "FoldPartition",
    "BetaSpec",
    "partition_folds",
    "load_panel_csv",
    "write_panel_csv",
]

DEFAULT_K_FOLDS = 5


def _frozen(a):
    if a is None:
        return None
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class PanelDataset:
    """Balanced (item x period) panel.

    Arrays are indexed ``[item, period, ...]``. ``controls`` holds the
    time-varying controls Z, ``zbar`` the optional time-invariant item
    descriptors. ``price`` is the optional base treatment from which
    technical treatments may be built (see :mod:`paneldml.demand`).
    """

    y: np.ndarray
    treatments: np.ndarray
    controls: np.ndarray
    group: np.ndarray
    price: Optional[np.ndarray] = None
    zbar: Optional[np.ndarray] = None
    weights: Optional[np.ndarray] = None
    item_ids: tuple = ()
    time_ids: tuple = ()
    group_ids: tuple = ()
    treatment_labels: tuple = ()
    control_names: tuple = ()
    zbar_names: tuple = ()
    dates: Optional[tuple] = None
    affine_maps: Optional[tuple] = None

    def __post_init__(self):
        y = _frozen(self.y)
        if y.ndim != 2:
            raise DataValidationError("outcome must be a 2-d (item, period) array")
        n_items, n_periods = y.shape
        d = _frozen(self.treatments)
        if d.ndim == 2:
            d = _frozen(d[:, :, None])
        z = _frozen(self.controls)
        if z.ndim == 2 and z.size == 0:
            z = _frozen(np.zeros((n_items, n_periods, 0)))
        if d.ndim != 3 or d.shape[:2] != (n_items, n_periods):
            raise DataValidationError("treatments must have shape (I, T, d)")
        if z.ndim != 3 or z.shape[:2] != (n_items, n_periods):
            raise DataValidationError("controls must have shape (I, T, p)")
        if d.shape[2] < 1:
            raise DataValidationError("at least one treatment column is required")
        group = np.asarray(self.group, dtype=int)
        if group.shape != (n_items,):
            raise DataValidationError("group must assign every item")
        group = group.copy()
        group.setflags(write=False)
        if group.min() < 0 or np.unique(group).size != group.max() + 1:
            raise DataValidationError("group ids must be dense 0..M-1 with every group nonempty")
        price = _frozen(self.price)
        if price is not None and price.shape != (n_items, n_periods):
            raise DataValidationError("price must have shape (I, T)")
        zbar = _frozen(self.zbar)
        if zbar is not None:
            if zbar.ndim != 2 or zbar.shape[0] != n_items:
                raise DataValidationError("zbar must have shape (I, q)")
        weights = _frozen(self.weights)
        if weights is not None and weights.shape != (n_items,):
            raise DataValidationError("weights must have shape (I,)")
        for name, arr in (("y", y), ("treatments", d), ("controls", z), ("price", price),
                          ("zbar", zbar), ("weights", weights)):
            if arr is not None and not np.all(np.isfinite(arr)):
                raise DataValidationError(f"non-finite entries in {name}")
        set_ = object.__setattr__
        for name, arr in (("y", y), ("treatments", d), ("controls", z), ("group", group),
                          ("price", price), ("zbar", zbar), ("weights", weights)):
            set_(self, name, arr)
        set_(self, "item_ids", tuple(self.item_ids) or tuple(str(i + 1) for i in range(n_items)))
        set_(self, "time_ids", tuple(self.time_ids) or tuple(str(t + 1) for t in range(n_periods)))
        set_(self, "group_ids",
             tuple(self.group_ids) or tuple(str(g + 1) for g in range(group.max() + 1)))
        set_(self, "treatment_labels",
             tuple(self.treatment_labels) or tuple(f"d_{j + 1}" for j in range(d.shape[2])))
        set_(self, "control_names",
             tuple(self.control_names) or tuple(f"z_{j + 1}" for j in range(z.shape[2])))
        if zbar is not None:
            set_(self, "zbar_names",
                 tuple(self.zbar_names) or tuple(f"zbar_{j + 1}" for j in range(zbar.shape[1])))
        if self.dates is not None:
            set_(self, "dates", tuple(self.dates))
            if len(self.dates) != n_periods:
                raise DataValidationError("dates must have one entry per period")
        if self.affine_maps is not None:
            set_(self, "affine_maps", tuple(self.affine_maps))
            if len(self.affine_maps) != d.shape[2]:
                raise DataValidationError("affine_maps must have one entry per treatment")
        if len(self.item_ids) != n_items or len(self.time_ids) != n_periods:
            raise DataValidationError("id tables do not match array shapes")
        if len(self.treatment_labels) != d.shape[2] or len(self.control_names) != z.shape[2]:
            raise DataValidationError("label tables do not match array shapes")

    @property
    def n_items(self) -> int:
        return self.y.shape[0]

    @property
    def n_periods(self) -> int:
        return self.y.shape[1]

    @property
    def n_treatments(self) -> int:
        return self.treatments.shape[2]

    @property
    def n_controls(self) -> int:
        return self.controls.shape[2]

    @property
    def n_groups(self) -> int:
        return int(self.group.max()) + 1

    @property
    def n_obs(self) -> int:
        return self.n_items * self.n_periods

    @property
    def within_group(self) -> np.ndarray:
        """Position of each item inside its group (0-based, item order)."""
        out = np.empty(self.n_items, dtype=int)
        counts = np.zeros(self.n_groups, dtype=int)
        for i, g in enumerate(self.group):
            out[i] = counts[g]
            counts[g] += 1
        return out

    @property
    def group_sizes(self) -> np.ndarray:
        return np.bincount(self.group, minlength=self.n_groups)

    def design(self) -> np.ndarray:
        """First-stage regressors: time-varying controls with zbar broadcast, (I, T, p+q)."""
        if self.zbar is None or self.zbar.shape[1] == 0:
            return np.asarray(self.controls)
        zb = np.broadcast_to(self.zbar[:, None, :], (self.n_items, self.n_periods, self.zbar.shape[1]))
        return np.concatenate([self.controls, zb], axis=2)

    def replace(self, **changes) -> "PanelDataset":
        kw = {f: getattr(self, f) for f in self.__dataclass_fields__}
        kw.update(changes)
        return PanelDataset(**kw)


@dataclass(frozen=True)
class FoldPartition:
    """Contiguous time blocks; ``ranges[k]`` is the half-open period range of fold k."""

    n_folds: int
    fold_of_time: np.ndarray
    ranges: tuple

    def periods(self, k: int) -> np.ndarray:
        start, stop = self.ranges[k]
        return np.arange(start, stop)

    def complement(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.fold_of_time != k)

    @property
    def n_periods(self) -> int:
        return len(self.fold_of_time)


def partition_folds(n_periods: int, n_folds: int = DEFAULT_K_FOLDS) -> FoldPartition:
    """Split periods 1..T into K blocks floor(T(k-1)/K)+1 <= t <= floor(Tk/K).

    Returned indices are 0-based, so block k (0-based) is
    ``range(T*k//K, T*(k+1)//K)``.
    """
    if n_folds < 2:
        raise DataValidationError("cross-fitting requires complement folds")
    if n_periods < n_folds:
        raise DataValidationError(
            f"insufficient periods: T={n_periods} < K={n_folds}")
    ranges = tuple((n_periods * k // n_folds, n_periods * (k + 1) // n_folds)
                   for k in range(n_folds))
    fold_of_time = np.empty(n_periods, dtype=int)
    for k, (a, b) in enumerate(ranges):
        fold_of_time[a:b] = k
    fold_of_time.setflags(write=False)
    return FoldPartition(n_folds, fold_of_time, ranges)


@dataclass(frozen=True)
class BetaSpec:
    coefficients: np.ndarray
    support: tuple = field(init=False)
    sparsity: int = field(init=False)

    def __post_init__(self):
        b = np.array(self.coefficients, dtype=float)
        b.setflags(write=False)
        object.__setattr__(self, "coefficients", b)
        support = tuple(int(j) for j in np.flatnonzero(b != 0))
        object.__setattr__(self, "support", support)
        object.__setattr__(self, "sparsity", len(support))


# --------------------------------------------------------------------- CSV io

_CANONICAL = ("item", "time", "group", "y", "price", "date", "weight")


def _natural_order(ids):
    try:
        return sorted(ids, key=float)
    except ValueError:
        return sorted(ids)


def _parse_float(raw, line, column):
    try:
        v = float(raw)
    except ValueError:
        raise DataValidationError(
            f"row {line}, column '{column}': non-numeric value {raw!r}") from None
    if not np.isfinite(v):
        raise DataValidationError(f"row {line}, column '{column}': non-finite value {raw!r}")
    return v


def load_panel_csv(path, schema: Optional[Mapping] = None) -> PanelDataset:
    """Read a long-format panel CSV.

    Parameters
    ----------
    path : path-like
        UTF-8, comma separated, header row.
    schema : mapping, optional
        Overrides for column names. Keys ``item, time, group, y, price, date,
        weight`` rename the canonical columns; keys ``treatments``,
        ``controls`` and ``zbar`` take explicit column lists instead of the
        default ``d_*``, ``z_*`` and ``zbar_*`` prefix detection.

    Row numbers in error messages are 1-based file lines (header is line 1).
    """
    schema = dict(schema or {})
    names = {k: schema.get(k, k) for k in _CANONICAL}
    path = Path(path)
    if not path.exists():
        raise DataValidationError(f"panel file not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataValidationError(f"{path}: empty file") from None
        rows = list(reader)

    col = {h: j for j, h in enumerate(header)}
    for key in ("item", "time", "group", "y"):
        if names[key] not in col:
            raise DataValidationError(f"missing required column '{names[key]}'")

    def _prefixed(prefix):
        out = [h for h in header if h.startswith(prefix)]
        return sorted(out, key=lambda h: (len(h), h))

    treat_cols = list(schema.get("treatments") or _prefixed("d_"))
    zbar_cols = list(schema.get("zbar") or _prefixed("zbar_"))
    ctrl_cols = list(schema.get("controls") or [h for h in _prefixed("z_")])
    has_price = names["price"] in col
    if not treat_cols and not has_price:
        raise DataValidationError("need a 'price' column or d_1..d_d treatment columns")
    for c in treat_cols + ctrl_cols + zbar_cols:
        if c not in col:
            raise DataValidationError(f"missing declared column '{c}'")

    records = {}
    item_group, item_zbar, item_weight, time_date = {}, {}, {}, {}
    for lineno, row in enumerate(rows, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise DataValidationError(
                f"row {lineno}: expected {len(header)} fields, found {len(row)}")
        item = row[col[names["item"]]].strip()
        time = row[col[names["time"]]].strip()
        grp = row[col[names["group"]]].strip()
        key = (item, time)
        if key in records:
            raise DataValidationError(
                f"duplicate (item, time) key ({item!r}, {time!r}) at row {lineno}")
        if item_group.setdefault(item, grp) != grp:
            raise DataValidationError(f"row {lineno}: item {item!r} changes group")
        vals = {
            "y": _parse_float(row[col[names["y"]]], lineno, names["y"]),
            "d": [_parse_float(row[col[c]], lineno, c) for c in treat_cols],
            "z": [_parse_float(row[col[c]], lineno, c) for c in ctrl_cols],
        }
        if has_price:
            vals["price"] = _parse_float(row[col[names["price"]]], lineno, names["price"])
        if zbar_cols:
            zb = tuple(_parse_float(row[col[c]], lineno, c) for c in zbar_cols)
            if item_zbar.setdefault(item, zb) != zb:
                raise DataValidationError(
                    f"row {lineno}: zbar columns must be constant within item {item!r}")
        if names["weight"] in col:
            w = _parse_float(row[col[names["weight"]]], lineno, names["weight"])
            if item_weight.setdefault(item, w) != w:
                raise DataValidationError(
                    f"row {lineno}: weight must be constant within item {item!r}")
        if names["date"] in col:
            dt = row[col[names["date"]]].strip()
            if time_date.setdefault(time, dt) != dt:
                raise DataValidationError(f"row {lineno}: period {time!r} has conflicting dates")
        records[key] = vals

    if not records:
        raise DataValidationError(f"{path}: no data rows")
    items = _natural_order(list(item_group))
    times = _natural_order(list({t for _, t in records}))
    groups = _natural_order(list(set(item_group.values())))
    g_index = {g: k for k, g in enumerate(groups)}
    n_i, n_t = len(items), len(times)
    y = np.empty((n_i, n_t))
    d = np.empty((n_i, n_t, len(treat_cols)))
    z = np.empty((n_i, n_t, len(ctrl_cols)))
    price = np.empty((n_i, n_t)) if has_price else None
    for a, item in enumerate(items):
        for b, time in enumerate(times):
            rec = records.get((item, time))
            if rec is None:
                raise DataValidationError(
                    f"unbalanced panel: item {item!r} missing period {time!r}")
            y[a, b] = rec["y"]
            d[a, b] = rec["d"]
            z[a, b] = rec["z"]
            if has_price:
                price[a, b] = rec["price"]
    labels = tuple(treat_cols)
    if not treat_cols:
        d = price[:, :, None].copy()
        labels = (names["price"],)
    return PanelDataset(
        y=y,
        treatments=d,
        controls=z,
        group=np.array([g_index[item_group[it]] for it in items]),
        price=price,
        zbar=np.array([item_zbar[it] for it in items]) if zbar_cols else None,
        weights=np.array([item_weight[it] for it in items]) if item_weight else None,
        item_ids=tuple(items),
        time_ids=tuple(times),
        group_ids=tuple(groups),
        treatment_labels=labels,
        control_names=tuple(ctrl_cols),
        zbar_names=tuple(zbar_cols),
        dates=tuple(time_date[t] for t in times) if time_date else None,
    )


def _price_only(ds: PanelDataset) -> bool:
    return (ds.price is not None and ds.n_treatments == 1
            and np.array_equal(ds.treatments[:, :, 0], ds.price)
            and ds.treatment_labels == ("price",))


def write_panel_csv(ds: PanelDataset, path) -> None:
    """Write ``ds`` in the long format read by :func:`load_panel_csv`.

    Floats are written with ``repr`` so a reload reproduces them bit for bit.
    """
    price_only = _price_only(ds)
    d_cols = [] if price_only else [
        lab if lab.startswith("d_") else f"d_{j + 1}" for j, lab in enumerate(ds.treatment_labels)]
    if len(set(d_cols)) != len(d_cols):
        d_cols = [f"d_{j + 1}" for j in range(ds.n_treatments)]
    z_cols = [n if n.startswith("z_") else f"z_{j + 1}" for j, n in enumerate(ds.control_names)]
    if len(set(z_cols)) != len(z_cols):
        z_cols = [f"z_{j + 1}" for j in range(ds.n_controls)]
    zb_cols = []
    if ds.zbar is not None:
        zb_cols = [n if n.startswith("zbar_") else f"zbar_{j + 1}" for j, n in enumerate(ds.zbar_names)]
    header = ["item", "time", "group", "y"]
    if ds.price is not None:
        header.append("price")
    header += d_cols + z_cols + zb_cols
    if ds.dates is not None:
        header.append("date")
    if ds.weights is not None:
        header.append("weight")
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(ds.n_items):
            for t in range(ds.n_periods):
                row = [ds.item_ids[i], ds.time_ids[t], ds.group_ids[ds.group[i]], repr(float(ds.y[i, t]))]
                if ds.price is not None:
                    row.append(repr(float(ds.price[i, t])))
                if not price_only:
                    row += [repr(float(v)) for v in ds.treatments[i, t]]
                row += [repr(float(v)) for v in ds.controls[i, t]]
                if ds.zbar is not None:
                    row += [repr(float(v)) for v in ds.zbar[i]]
                if ds.dates is not None:
                    row.append(ds.dates[t])
                if ds.weights is not None:
                    row.append(repr(float(ds.weights[i])))
                w.writerow(row)


def stack_periods(arr: np.ndarray, periods: Sequence[int]) -> np.ndarray:
    """Rows ``(i, t)`` for t in ``periods``, item-major, flattened to 2-d."""
    sub = arr[:, periods]
    return sub.reshape(sub.shape[0] * sub.shape[1], *sub.shape[2:])
