"""SubRiemannian structures given by polynomial frames in one coordinate chart.

The frame is declared orthonormal, so the metric is implicit. Built-in models
are assembled from the same coefficient tables a user would write in a
FrameSpec file, and go through the same validation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from . import polyfield as pf
from .errors import (
    DerivativeMismatch,
    FrameDependent,
    NoSpan,
    NotBracketGenerating,
    OutOfChart,
    SpecError,
)

RANK_RTOL = 1e-9
MAX_DEGREE = 6
MAX_STEP = 8
BUILTINS = ("heisenberg", "martinet", "corank1_carnot", "euclidean_test")


@dataclass
class FrameSpec:
    """Coefficient tables describing a polynomial frame.

    ``fields[i][a]`` is the list of ``[exponent, coefficient]`` terms of the
    a-th chart component of the i-th frame field.
    """

    name: str
    dim: int
    rank: int
    fields: list
    chart_bounds: list
    density: list = field(default_factory=list)
    test_only: bool = False
    tag: str | None = None

    @classmethod
    def from_dict(cls, data):
        try:
            jsonschema.validate(data, framespec_schema())
        except jsonschema.ValidationError as exc:
            where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
            raise SpecError(f"frame spec invalid at {where}: {exc.message}") from None
        return cls(**data)

    @classmethod
    def from_file(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self):
        out = {
            "name": self.name,
            "dim": self.dim,
            "rank": self.rank,
            "fields": self.fields,
            "chart_bounds": self.chart_bounds,
            "density": self.density,
            "test_only": self.test_only,
        }
        if self.tag is not None:
            out["tag"] = self.tag
        return out


def framespec_schema():
    text = resources.files("srbm").joinpath("framespec.schema.json").read_text()
    return json.loads(text)


def _poly_from_terms(terms, n, where):
    poly = {}
    for exp, coeff in terms:
        if len(exp) != n:
            raise SpecError(f"{where}: exponent {exp} has length {len(exp)}, expected {n}")
        if sum(exp) > MAX_DEGREE:
            raise SpecError(f"{where}: degree {sum(exp)} exceeds {MAX_DEGREE}")
        e = tuple(int(v) for v in exp)
        poly[e] = poly.get(e, 0.0) + float(coeff)
    return pf.clean(poly)


def _terms_from_poly(poly):
    return [[list(e), c] for e, c in sorted(poly.items())]


@dataclass(frozen=True)
class HoermanderResult:
    step: int
    flag_dims: tuple

    @property
    def homogeneous_dimension(self):
        """Mitchell's formula: sum_i i * (d_i - d_{i-1})."""
        prev, total = 0, 0
        for i, d in enumerate(self.flag_dims, start=1):
            total += i * (d - prev)
            prev = d
        return total


class SRStructure:
    """A frame of ``rank`` polynomial vector fields on a box chart of R^dim."""

    def __init__(self, name, dim, fields, chart_bounds, density=None, test_only=False, tag=None):
        self.name = name
        self.dim = int(dim)
        self.fields = tuple(tuple(pf.clean(c) for c in X) for X in fields)
        self.rank = len(self.fields)
        self.chart_bounds = np.asarray(chart_bounds, dtype=float).reshape(self.dim, 2)
        self.density_poly = pf.clean(density) if density else {(0,) * self.dim: 1.0}
        self.test_only = bool(test_only)
        self.tag = tag if tag is not None else name
        self.compiled = pf.CompiledFrame(self.fields, self.dim)

    def __repr__(self):
        return f"SRStructure({self.name!r}, n={self.dim}, k={self.rank})"

    @property
    def strictly_subriemannian(self):
        return self.rank <= self.dim - 1 and not self.test_only

    # evaluation -----------------------------------------------------------
    def frame(self, x):
        """Frame vectors at ``x``: shape (k, n) for one point, (B, k, n) for many."""
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        xT = x.reshape(-1, self.dim).T
        X = self.compiled.values(xT)
        out = np.moveaxis(X, -1, 0)
        return out[0] if single else out

    def frame_jacobian(self, x):
        """d X_i^a / d x_c, shape (k, n, n) or (B, k, n, n)."""
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        _, DX = self.compiled.values_and_jacobians(x.reshape(-1, self.dim).T)
        out = np.moveaxis(DX, -1, 0)
        return out[0] if single else out

    def frame_hessian(self, x):
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        _, _, D2X = self.compiled.all_derivatives(x.reshape(-1, self.dim).T)
        out = np.moveaxis(D2X, -1, 0)
        return out[0] if single else out

    def density(self, x):
        return pf.evaluate(self.density_poly, x)

    def density_bounds(self, lo, hi):
        """Interval enclosure of the density on the box [lo, hi]."""
        return pf.interval_bounds(self.density_poly, np.asarray(lo), np.asarray(hi))

    def in_chart(self, x):
        x = np.asarray(x, dtype=float)
        lo, hi = self.chart_bounds[:, 0], self.chart_bounds[:, 1]
        return np.all((x >= lo) & (x <= hi), axis=-1)

    def require_in_chart(self, x):
        if not np.all(self.in_chart(x)):
            raise OutOfChart(f"point {np.asarray(x).tolist()} outside chart of {self.name}")

    # brackets ---------------------------------------------------------------
    @cached_property
    def _levels(self):
        return [list(pf.independent_fields(self.fields))]

    def bracket_levels(self, max_step):
        """R-bases of brackets of length exactly 1, 2, ..., max_step."""
        levels = self._levels
        while len(levels) < max_step:
            prev = levels[-1]
            new = [pf.bracket(X, Y) for X in self.fields for Y in prev]
            new = [Z for Z in new if not pf.is_zero_field(Z)]
            levels.append(list(pf.independent_fields(new)))
        return levels[:max_step]

    def flag_dimensions(self, x, max_step=MAX_STEP):
        """Dimensions of Delta, Delta + [Delta, Delta], ... at points ``x``.

        Returns an int array of shape (B, max_step).
        """
        x = np.atleast_2d(np.asarray(x, dtype=float))
        dims = np.zeros((x.shape[0], max_step), dtype=int)
        vecs = np.zeros((x.shape[0], 0, self.dim))
        for j, level in enumerate(self.bracket_levels(max_step)):
            if level:
                vals = np.stack(
                    [np.stack([pf.evaluate(c, x) for c in Z], axis=-1) for Z in level], axis=1
                )
                vecs = np.concatenate([vecs, vals], axis=1)
            dims[:, j] = numerical_rank(vecs) if vecs.shape[1] else 0
        return dims

    def to_spec(self):
        return FrameSpec(
            name=self.name,
            dim=self.dim,
            rank=self.rank,
            fields=[[_terms_from_poly(c) for c in X] for X in self.fields],
            chart_bounds=self.chart_bounds.tolist(),
            density=_terms_from_poly(self.density_poly),
            test_only=self.test_only,
            tag=self.tag,
        )


def numerical_rank(mats, rtol=RANK_RTOL):
    """Rank of each matrix in a stack, singular values above rtol * largest."""
    mats = np.asarray(mats, dtype=float)
    sv = np.linalg.svd(mats, compute_uv=False)
    top = sv[..., :1]
    return np.sum(sv > rtol * np.where(top > 0, top, np.inf), axis=-1)


def hoermander_check(s, x, max_step=MAX_STEP):
    """Smallest bracket length whose iterated brackets span T_xM, with the flag dims.

    >>> hoermander_check(load_structure("heisenberg"), [0, 0, 0])
    HoermanderResult(step=2, flag_dims=(2, 3))
    """
    if max_step > MAX_STEP:
        raise ValueError(f"max_step must be <= {MAX_STEP}")
    x = np.asarray(x, dtype=float)
    s.require_in_chart(x)
    dims = s.flag_dimensions(x[None, :], max_step)[0]
    hits = np.nonzero(dims == s.dim)[0]
    if len(hits) == 0:
        raise NoSpan(f"{s.name}: flag dims {tuple(dims)} do not reach {s.dim} at {x.tolist()}")
    step = int(hits[0]) + 1
    return HoermanderResult(step=step, flag_dims=tuple(int(d) for d in dims[:step]))


# built-ins -------------------------------------------------------------------
def _e(n, **powers):
    exp = [0] * n
    for k, v in powers.items():
        exp[int(k[1:])] = v
    return tuple(exp)


def _builtin_fields(name):
    if name == "heisenberg":
        n = 3
        X1 = ({_e(n): 1.0}, {}, {_e(n, x1=1): -0.5})
        X2 = ({}, {_e(n): 1.0}, {_e(n, x0=1): 0.5})
        return dict(dim=n, fields=[X1, X2], chart_bounds=[[-5, 5]] * n)
    if name == "martinet":
        n = 3
        X1 = ({_e(n): 1.0}, {}, {})
        X2 = ({}, {_e(n): 1.0}, {_e(n, x0=2): 0.5})
        return dict(dim=n, fields=[X1, X2], chart_bounds=[[-2, 2]] * n)
    if name == "corank1_carnot":
        # X_i = e_i - (A x)_i / 2 e_z with A block-diagonal, frequencies 1 and 2
        n = 5
        A = np.zeros((4, 4))
        A[0, 1], A[1, 0] = 1.0, -1.0
        A[2, 3], A[3, 2] = 2.0, -2.0
        fields = []
        for i in range(4):
            comps = [{} for _ in range(n)]
            comps[i] = {_e(n): 1.0}
            z = {}
            for j in range(4):
                if A[i, j] != 0.0:
                    z[_e(n, **{f"x{j}": 1})] = -0.5 * A[i, j]
            comps[4] = z
            fields.append(tuple(comps))
        return dict(dim=n, fields=fields, chart_bounds=[[-3, 3]] * n)
    if name == "euclidean_test":
        n = 3
        fields = [tuple({_e(n): 1.0} if a == i else {} for a in range(n)) for i in range(n)]
        return dict(dim=n, fields=fields, chart_bounds=[[-5, 5]] * n, test_only=True)
    raise SpecError(f"unknown built-in structure {name!r}; choose from {BUILTINS}")


def builtin_spec(name):
    kw = _builtin_fields(name)
    n = kw["dim"]
    return FrameSpec(
        name=name,
        dim=n,
        rank=len(kw["fields"]),
        fields=[[_terms_from_poly(c) for c in X] for X in kw["fields"]],
        chart_bounds=kw["chart_bounds"],
        density=[[[0] * n, 1.0]],
        test_only=kw.get("test_only", False),
        tag=name,
    )


def structure_from_spec(spec):
    n = spec.dim
    if len(spec.fields) != spec.rank:
        raise SpecError(f"declared rank {spec.rank} but {len(spec.fields)} fields given")
    if len(spec.chart_bounds) != n:
        raise SpecError(f"chart_bounds has {len(spec.chart_bounds)} axes, expected {n}")
    for lo, hi in spec.chart_bounds:
        if not lo < hi:
            raise SpecError(f"empty chart interval [{lo}, {hi}]")
    fields = []
    for i, comps in enumerate(spec.fields):
        if len(comps) != n:
            raise SpecError(f"field {i} has {len(comps)} components, expected {n}")
        fields.append(tuple(_poly_from_terms(t, n, f"fields[{i}][{a}]") for a, t in enumerate(comps)))
    density = _poly_from_terms(spec.density, n, "density") if spec.density else None
    if spec.rank >= n and not spec.test_only:
        raise SpecError("rank must be <= dim - 1 unless the structure is flagged test_only")
    return SRStructure(
        spec.name, n, fields, spec.chart_bounds, density=density, test_only=spec.test_only, tag=spec.tag
    )


def validate_structure(s, per_axis=5, fd_step=1e-5, fd_rtol=1e-6):
    """Check rank, bracket generation, density and derivative tables on a grid."""
    pts = pf.grid_points(s.chart_bounds, per_axis)
    X = s.frame(pts)
    ranks = numerical_rank(X)
    bad = np.nonzero(ranks != s.rank)[0]
    if len(bad):
        raise FrameDependent(f"{s.name}: frame rank {ranks[bad[0]]} < {s.rank} at {pts[bad[0]].tolist()}")

    dims = s.flag_dimensions(pts, MAX_STEP)
    bad = np.nonzero(dims[:, -1] != s.dim)[0]
    if len(bad):
        raise NotBracketGenerating(f"{s.name}: brackets do not span at {pts[bad[0]].tolist()}")

    dens = s.density(pts)
    if np.any(dens <= 0):
        i = int(np.argmin(dens))
        raise SpecError(f"{s.name}: density {dens[i]} not positive at {pts[i].tolist()}")

    DX = s.frame_jacobian(pts)
    D2X = s.frame_hessian(pts)
    for c in range(s.dim):
        e = np.zeros(s.dim)
        e[c] = fd_step
        fd1 = (s.frame(pts + e) - s.frame(pts - e)) / (2 * fd_step)
        fd2 = (s.frame_jacobian(pts + e) - s.frame_jacobian(pts - e)) / (2 * fd_step)
        for fd, an, what in ((fd1, DX[..., c], "first"), (fd2, D2X[..., c], "second")):
            scale = np.maximum(1.0, np.abs(an).max())
            err = np.abs(fd - an).max() / scale
            if err > fd_rtol:
                raise DerivativeMismatch(f"{s.name}: {what} derivative in x{c} off by {err:.2e}")
    return s


def load_structure(spec, validate=True):
    """Build and validate a structure from a FrameSpec, a dict, a JSON path or a built-in name."""
    if isinstance(spec, str) and spec in BUILTINS:
        spec = builtin_spec(spec)
    elif isinstance(spec, (str, Path)):
        path = Path(spec)
        if not path.exists():
            raise SpecError(f"unknown built-in or missing file: {spec!r}")
        spec = FrameSpec.from_file(path)
    elif isinstance(spec, dict):
        spec = FrameSpec.from_dict(spec)
    s = structure_from_spec(spec)
    if validate:
        validate_structure(s)
    return s
