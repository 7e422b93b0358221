"""Time bases for longitudinal models: polynomials and natural cubic splines.

Natural splines use the truncated-power construction with the linearity
constraint beyond both boundary knots, so extrapolation is linear by
construction. Both the basis and its first derivative are analytic.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class BasisSpec:
    """Description of a time basis.

    kind:
        "poly" -- (1, t, t^2, ..., t^degree)
        "ns"   -- natural cubic spline with the given interior and boundary
                  knots, intercept column included.
    """

    kind: str = "poly"
    degree: int = 1
    interior_knots: tuple = field(default_factory=tuple)
    boundary_knots: tuple | None = None

    def __post_init__(self):
        if self.kind not in ("poly", "ns"):
            raise ValueError(f"unknown basis kind {self.kind!r}")
        if self.kind == "poly":
            if self.degree < 0:
                raise ValueError("polynomial degree must be >= 0")
        else:
            if self.boundary_knots is None:
                raise ValueError("ns basis requires boundary knots")
            lo, hi = self.boundary_knots
            knots = (lo, *self.interior_knots, hi)
            if any(b <= a for a, b in zip(knots, knots[1:])):
                raise ValueError(
                    "knots must be strictly increasing with boundary knots "
                    f"bracketing interior knots, got {knots}"
                )

    @property
    def n_basis(self) -> int:
        if self.kind == "poly":
            return self.degree + 1
        # 1, t, and one constrained cubic term per knot beyond the first two
        return 2 + len(self.interior_knots)

    def all_knots(self) -> np.ndarray:
        lo, hi = self.boundary_knots
        return np.asarray([lo, *self.interior_knots, hi], dtype=float)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "degree": self.degree,
            "interior_knots": list(self.interior_knots),
            "boundary_knots": (
                list(self.boundary_knots) if self.boundary_knots else None
            ),
        }

    @staticmethod
    def from_dict(d: dict) -> "BasisSpec":
        return BasisSpec(
            kind=d["kind"],
            degree=d.get("degree", 1),
            interior_knots=tuple(d.get("interior_knots") or ()),
            boundary_knots=(
                tuple(d["boundary_knots"]) if d.get("boundary_knots") else None
            ),
        )


def _tp_cubic(t, knot, upper, deriv):
    """(t-knot)+^3 - (t-upper)+^3, divided by (upper-knot); or its derivative."""
    a = np.clip(t - knot, 0.0, None)
    b = np.clip(t - upper, 0.0, None)
    if deriv == 0:
        num = a**3 - b**3
    else:
        num = 3.0 * (a**2 - b**2)
    return num / (upper - knot)


def basis_matrix(t, spec: BasisSpec, deriv: int = 0) -> np.ndarray:
    """Evaluate the basis (deriv=0) or its first derivative (deriv=1).

    Returns an array of shape (len(t), spec.n_basis). Scalar t is accepted
    and still yields a 2-d (1, m) array.
    """
    if deriv not in (0, 1):
        raise ValueError("only deriv 0 or 1 supported")
    t = np.atleast_1d(np.asarray(t, dtype=float))
    n = t.shape[0]
    m = spec.n_basis
    out = np.empty((n, m))
    if spec.kind == "poly":
        for j in range(m):
            if deriv == 0:
                out[:, j] = t**j
            else:
                out[:, j] = 0.0 if j == 0 else j * t ** (j - 1)
        return out

    knots = spec.all_knots()
    upper = knots[-1]
    penult = knots[-2]
    out[:, 0] = 1.0 if deriv == 0 else 0.0
    out[:, 1] = t if deriv == 0 else 1.0
    d_last = _tp_cubic(t, penult, upper, deriv)
    for j in range(m - 2):
        out[:, 2 + j] = _tp_cubic(t, knots[j], upper, deriv) - d_last
    return out


def basis_row(t: float, spec: BasisSpec, deriv: int = 0) -> np.ndarray:
    """Basis values at a single time, as a flat vector."""
    return basis_matrix(np.asarray([t]), spec, deriv=deriv)[0]


def default_knots(times: np.ndarray, n_interior: int = 2) -> BasisSpec:
    """Natural-spline spec with interior knots at quantiles of observed times.

    With n_interior=2 the interior knots sit at the tertiles.
    """
    times = np.asarray(times, dtype=float)
    lo, hi = float(times.min()), float(times.max())
    qs = np.linspace(0, 1, n_interior + 2)[1:-1]
    interior = np.quantile(times, qs)
    # nudge interior knots strictly inside the boundary
    eps = 1e-8 * max(1.0, hi - lo)
    interior = np.clip(interior, lo + eps, hi - eps)
    interior = np.unique(interior)
    return BasisSpec(
        kind="ns", interior_knots=tuple(interior), boundary_knots=(lo, hi)
    )
