"""Demand-model treatments built from a product hierarchy.

Own-price columns interact the base (log) price with node membership,
cross-price columns use the leave-one-out average price of the node. Every
column is an affine map of the base price, ``D_j[:, t] = mix_j @ (scale_j[:, t]
* P[:, t])``, which is what lets one base-price first-stage model serve all
of them.
"""
from __future__ import annotations

import csv
import datetime as _dt
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
from scipy import sparse

from .errors import DataValidationError
from .panel_core import PanelDataset

__all__ = [
    "Hierarchy",
    "TreatmentSpec",
    "AffineMap",
    "load_hierarchy_csv",
    "build_treatments",
    "affine_nuisance_lift",
    "per_pair_cross_elasticity",
    "per_pair_conversions",
    "experimental_elasticity",
]


@dataclass(frozen=True)
class Hierarchy:
    """Rooted category tree over item ids.

    Node ids are ``/``-joined paths such as ``"Drinks/Water"``; ``level`` is
    the depth (1 for top-level categories).
    """

    members: dict
    level: dict
    parent: dict

    @classmethod
    def from_paths(cls, item_paths: dict) -> "Hierarchy":
        members, level, parent = {}, {}, {}
        for item, path in item_paths.items():
            prefix = None
            for depth, label in enumerate(path, start=1):
                if label == "":
                    break
                node = label if prefix is None else f"{prefix}/{label}"
                members.setdefault(node, set()).add(str(item))
                level[node] = depth
                parent[node] = prefix
                prefix = node
        return cls({k: frozenset(v) for k, v in members.items()}, level, parent)

    @property
    def nodes(self):
        return tuple(sorted(self.members, key=lambda n: (self.level[n], n)))

    def at_level(self, lvl: int):
        return tuple(n for n in self.nodes if self.level[n] == lvl)

    def nodes_of(self, item) -> tuple:
        item = str(item)
        return tuple(n for n in self.nodes if item in self.members[n])

    def children(self, node):
        return tuple(n for n in self.nodes if self.parent[n] == node)


def load_hierarchy_csv(path) -> Hierarchy:
    """CSV with columns ``item,level1,...,levelL`` (blank cells end a path)."""
    path = Path(path)
    if not path.exists():
        raise DataValidationError(f"hierarchy file not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader)]
        if not header or header[0] != "item" or len(header) < 2:
            raise DataValidationError("hierarchy header must be item,level1,...,levelL")
        paths = {}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataValidationError(f"hierarchy row {lineno}: wrong number of fields")
            item = row[0].strip()
            if item in paths:
                raise DataValidationError(f"hierarchy row {lineno}: duplicate item {item!r}")
            paths[item] = [c.strip() for c in row[1:]]
    return Hierarchy.from_paths(paths)


@dataclass(frozen=True)
class TreatmentSpec:
    own_nodes: tuple = ()
    cross_nodes: tuple = ()
    month_dummies: bool = False
    cross_weighting: str = "equal"

    @classmethod
    def from_levels(cls, hier: Hierarchy, own_level=None, cross_level=None, **kw):
        own = hier.at_level(own_level) if own_level is not None else ()
        cross = hier.at_level(cross_level) if cross_level is not None else ()
        return cls(own, cross, **kw)


@dataclass(frozen=True, eq=False)
class AffineMap:
    """``D[:, t] = mix @ (scale[:, t] * P[:, t])``; ``mix=None`` means identity."""

    scale: np.ndarray
    mix: Optional[sparse.csr_matrix] = None
    kind: str = "own"
    node: str = ""

    def apply(self, base):
        base = np.asarray(base, dtype=float)
        out = self.scale * base
        if self.mix is not None:
            out = np.asarray(self.mix @ out)
        return out


def _months(dates):
    out = []
    for s in dates:
        try:
            out.append(_dt.date.fromisoformat(str(s)[:10]).month)
        except ValueError:
            raise DataValidationError(f"date {s!r} is not ISO-8601") from None
    return np.array(out)


def _loo_matrix(member_mask, weights):
    """Row i: weights of the other members of the node, normalized; zero for non-members."""
    idx = np.flatnonzero(member_mask)
    w = weights[idx]
    rows, cols, vals = [], [], []
    total = w.sum()
    for a, i in enumerate(idx):
        denom = total - w[a]
        if denom <= 0:
            raise DataValidationError("leave-one-out average undefined (zero weight)")
        for b, j in enumerate(idx):
            if j != i:
                rows.append(i)
                cols.append(j)
                vals.append(w[b] / denom)
    n = len(member_mask)
    return sparse.csr_matrix((vals, (rows, cols)), shape=(n, n))


def build_treatments(data: PanelDataset, hier: Hierarchy, spec: TreatmentSpec):
    """Replace the dataset's treatments with own/cross/month price columns.

    Returns the new dataset (with ``affine_maps`` set) and a label table:
    one dict per column with keys ``column, label, kind, node``.
    """
    if data.price is None:
        raise DataValidationError("build_treatments needs a price column")
    n_i, n_t = data.n_items, data.n_periods
    items = [str(i) for i in data.item_ids]
    maps, labels = [], []
    for node in spec.own_nodes:
        if node not in hier.members:
            raise DataValidationError(f"unknown hierarchy node {node!r}")
        mask = np.array([it in hier.members[node] for it in items], dtype=float)
        maps.append(AffineMap(np.repeat(mask[:, None], n_t, axis=1), None, "own", node))
        labels.append(("own", node, f"own:{node}"))
    if spec.cross_weighting == "weight":
        if data.weights is None:
            raise DataValidationError("cross_weighting='weight' needs a weight column")
        w = np.asarray(data.weights, dtype=float)
    elif spec.cross_weighting == "equal":
        w = np.ones(n_i)
    else:
        raise DataValidationError(f"unknown cross_weighting {spec.cross_weighting!r}")
    for node in spec.cross_nodes:
        if node not in hier.members:
            raise DataValidationError(f"unknown hierarchy node {node!r}")
        mask = np.array([it in hier.members[node] for it in items])
        if mask.sum() < 2:
            raise DataValidationError(
                f"leave-one-out average undefined: node {node!r} has {int(mask.sum())} member(s)")
        maps.append(AffineMap(np.ones((n_i, n_t)), _loo_matrix(mask, w), "cross", node))
        labels.append(("cross", node, f"cross:{node}"))
    if spec.month_dummies:
        if data.dates is None:
            raise DataValidationError("month interactions need a 'date' column")
        month = _months(data.dates)
        for m in range(1, 13):
            s = np.repeat((month == m).astype(float)[None, :], n_i, axis=0)
            maps.append(AffineMap(s, None, "month", str(m)))
            labels.append(("month", str(m), f"month:{m}"))
    if not maps:
        raise DataValidationError("treatment spec selects no columns")
    D = np.stack([m.apply(data.price) for m in maps], axis=2)
    table = [dict(column=j, label=lab, kind=kind, node=node)
             for j, (kind, node, lab) in enumerate(labels)]
    new = data.replace(treatments=D, treatment_labels=tuple(lab for _, _, lab in labels),
                       affine_maps=tuple(maps))
    return new, table


def affine_nuisance_lift(p_hat, maps: Iterable[Optional[AffineMap]]):
    """Lift base-price predictions ``p_hat`` (I, T) to every affine column.

    Columns whose map is None are returned as NaN; callers fit those
    directly.
    """
    p_hat = np.asarray(p_hat, dtype=float)
    maps = list(maps)
    out = np.full(p_hat.shape + (len(maps),), np.nan)
    for j, m in enumerate(maps):
        if m is not None:
            out[:, :, j] = m.apply(p_hat)
    return out


def per_pair_cross_elasticity(coef: float, group_size: int) -> float:
    """Cross-price coefficient of a node average spread over its products."""
    if group_size < 1:
        raise DataValidationError("group_size must be at least 1")
    return coef / group_size


def per_pair_conversions(coef: float, group_size: int) -> dict:
    """Both readings: divide by the node size, or by the number of other members."""
    out = {"per_product": per_pair_cross_elasticity(coef, group_size)}
    out["per_other_member"] = coef / (group_size - 1) if group_size > 1 else float("nan")
    return out


def experimental_elasticity(q1, q1_hat, q2, q2_hat, p1, p2) -> float:
    """Own-price elasticity from a two-location price experiment.

    ``q_hat`` are price-blind sales forecasts, all inputs in levels.
    """
    vals = (q1, q1_hat, q2, q2_hat, p1, p2)
    if any(v <= 0 for v in vals):
        raise DataValidationError("sales, forecasts and prices must be positive")
    if p1 == p2:
        raise DataValidationError("no price variation")
    num = (np.log(q1) - np.log(q1_hat)) - (np.log(q2) - np.log(q2_hat))
    return float(num / (np.log(p1) - np.log(p2)))
