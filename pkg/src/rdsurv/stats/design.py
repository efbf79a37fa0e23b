"""Declarative model designs.

A design is a list of terms over named data columns; ``data`` is any
mapping from column name to a 1-d numpy array (a pandas DataFrame works
via ``[]``).  Binding a design to data fixes everything data-dependent —
factor levels in first-observed order, spline knots at quantiles — so the
same design evaluates identically at fit time, at prediction time, and
after a JSON round trip.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .splines import NaturalSplineBasis

__all__ = [
    "Intercept",
    "Numeric",
    "Factor",
    "Spline",
    "Interaction",
    "Design",
]


def _get(data: Mapping, name: str) -> np.ndarray:
    try:
        col = data[name]
    except KeyError:
        raise KeyError(f"design needs column {name!r} which is missing from the data") from None
    return np.asarray(col)


def _first_observed_levels(col: np.ndarray) -> list:
    seen = dict.fromkeys(col.tolist())
    return [k for k in seen]


@dataclass
class Intercept:
    kind: str = field(default="intercept", init=False)

    def bind(self, data):
        return None

    def names(self) -> list[str]:
        return ["(Intercept)"]

    def matrix(self, data, n: int) -> np.ndarray:
        return np.ones((n, 1))

    def columns(self) -> set[str]:
        return set()

    def to_dict(self):
        return {"kind": "intercept"}


@dataclass
class Numeric:
    col: str
    kind: str = field(default="numeric", init=False)

    def bind(self, data):
        return None

    def names(self) -> list[str]:
        return [self.col]

    def matrix(self, data, n: int) -> np.ndarray:
        return _get(data, self.col).astype(float).reshape(n, 1)

    def columns(self) -> set[str]:
        return {self.col}

    def to_dict(self):
        return {"kind": "numeric", "col": self.col}


@dataclass
class Factor:
    """Treatment-coded factor; the first level observed at bind time is the
    reference and gets no column."""

    col: str
    levels: list | None = None
    kind: str = field(default="factor", init=False)

    def bind(self, data):
        if self.levels is None:
            self.levels = _first_observed_levels(_get(data, self.col))
            if len(self.levels) < 1:
                raise ValueError(f"factor {self.col!r} has no data")

    def names(self) -> list[str]:
        return [f"{self.col}[{lv}]" for lv in self.levels[1:]]

    def matrix(self, data, n: int) -> np.ndarray:
        col = _get(data, self.col)
        known = np.isin(col, np.asarray(self.levels, dtype=col.dtype))
        if not known.all():
            bad = sorted(set(np.asarray(col)[~known].tolist()))
            raise ValueError(f"factor {self.col!r} saw unknown level(s) {bad}; fitted levels are {self.levels}")
        out = np.empty((n, len(self.levels) - 1), dtype=float)
        for j, lv in enumerate(self.levels[1:]):
            out[:, j] = col == lv
        return out

    def columns(self) -> set[str]:
        return {self.col}

    def to_dict(self):
        return {"kind": "factor", "col": self.col, "levels": list(self.levels)}


@dataclass
class Spline:
    """Natural cubic spline of a numeric column; knots frozen at bind time."""

    col: str
    df: int = 3
    basis: NaturalSplineBasis | None = None

    kind: str = field(default="spline", init=False)

    def bind(self, data):
        if self.basis is None:
            self.basis = NaturalSplineBasis.from_data(_get(data, self.col).astype(float), self.df)
            self.df = self.basis.df

    def names(self) -> list[str]:
        return [f"{self.col}.ns{i + 1}" for i in range(self.basis.df)]

    def matrix(self, data, n: int) -> np.ndarray:
        return self.basis.transform(_get(data, self.col).astype(float))

    def columns(self) -> set[str]:
        return {self.col}

    def to_dict(self):
        return {"kind": "spline", "col": self.col, "df": self.df, "basis": self.basis.to_dict()}


@dataclass
class Interaction:
    """Elementwise products of the two child terms' columns."""

    left: "Numeric | Factor | Spline"
    right: "Numeric | Factor | Spline"
    kind: str = field(default="interaction", init=False)

    def bind(self, data):
        self.left.bind(data)
        self.right.bind(data)

    def names(self) -> list[str]:
        return [f"{a}:{b}" for a in self.left.names() for b in self.right.names()]

    def matrix(self, data, n: int) -> np.ndarray:
        a = self.left.matrix(data, n)
        b = self.right.matrix(data, n)
        return (a[:, :, None] * b[:, None, :]).reshape(n, -1)

    def columns(self) -> set[str]:
        return self.left.columns() | self.right.columns()

    def to_dict(self):
        return {"kind": "interaction", "left": self.left.to_dict(), "right": self.right.to_dict()}


def _term_from_dict(d: dict):
    kind = d["kind"]
    if kind == "intercept":
        return Intercept()
    if kind == "numeric":
        return Numeric(d["col"])
    if kind == "factor":
        return Factor(d["col"], levels=list(d["levels"]))
    if kind == "spline":
        t = Spline(d["col"], df=d["df"])
        t.basis = NaturalSplineBasis.from_dict(d["basis"])
        return t
    if kind == "interaction":
        return Interaction(_term_from_dict(d["left"]), _term_from_dict(d["right"]))
    raise ValueError(f"unknown term kind {kind!r}")


class Design:
    """An ordered collection of terms that expands data into a model matrix."""

    def __init__(self, terms: Sequence):
        self.terms = list(terms)
        self._bound = all(self._term_ready(t) for t in self.terms)

    @staticmethod
    def _term_ready(t) -> bool:
        if isinstance(t, Factor):
            return t.levels is not None
        if isinstance(t, Spline):
            return t.basis is not None
        if isinstance(t, Interaction):
            return Design._term_ready(t.left) and Design._term_ready(t.right)
        return True

    def bind(self, data: Mapping) -> "Design":
        for t in self.terms:
            t.bind(data)
        self._bound = True
        return self

    def _require_bound(self):
        if not self._bound:
            raise RuntimeError("design must be bound to data before use")

    @property
    def column_names(self) -> list[str]:
        self._require_bound()
        out = []
        for t in self.terms:
            out.extend(t.names())
        return out

    def term_slices(self) -> list[tuple[object, slice]]:
        """(term, column slice) pairs in matrix order."""
        self._require_bound()
        out, start = [], 0
        for t in self.terms:
            w = len(t.names())
            out.append((t, slice(start, start + w)))
            start += w
        return out

    def matrix(self, data: Mapping) -> np.ndarray:
        self._require_bound()
        n = None
        for t in self.terms:
            for c in t.columns():
                n = len(_get(data, c))
                break
            if n is not None:
                break
        if n is None:  # intercept-only design
            n = len(next(iter(data.values())))
        blocks = [t.matrix(data, n) for t in self.terms]
        return np.hstack(blocks) if blocks else np.empty((n, 0))

    def columns_used(self) -> set[str]:
        used = set()
        for t in self.terms:
            used |= t.columns()
        return used

    def to_dict(self) -> dict:
        self._require_bound()
        return {"terms": [t.to_dict() for t in self.terms]}

    @classmethod
    def from_dict(cls, d: dict) -> "Design":
        return cls([_term_from_dict(td) for td in d["terms"]])
