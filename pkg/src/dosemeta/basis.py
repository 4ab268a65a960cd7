"""Per-drug spline design rows for cumulative-dose effects.

Each drug gets its own fixed basis: boundary knots at dose 0 and at the
average (across trials) of per-trial maximum doses, interior knots at
symmetric quantiles of the pooled positive doses.  The first basis
function (the one carrying all mass at the left boundary) is dropped so
that every design row vanishes at dose 0 and the trial intercept alone
carries the treatment-free response.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["BasisSet", "build_basis", "eval_row", "eval_matrix"]

DEGREE = 3  # cubic; gives C2 curves


class DegenerateDoseError(ValueError):
    """Dose distribution cannot support the requested knot count."""


@dataclass(frozen=True)
class BasisSet:
    """Spline design specification for one drug.

    ``n_columns`` is ``len(interior_knots) + degree`` for spline models
    and 1 for the linear (0-knot) model, whose single column is the raw
    dose.  Immutable after construction; evaluation is a pure function.
    """

    drug_index: int
    degree: int
    interior_knots: tuple[float, ...]
    boundary_low: float
    boundary_high: float
    n_columns: int = field(init=False)

    def __post_init__(self):
        if self.boundary_low != 0.0:
            raise ValueError("lower boundary knot must sit at dose 0")
        if self.boundary_high <= 0.0:
            raise ValueError("upper boundary knot must be positive")
        knots = np.asarray(self.interior_knots, dtype=float)
        if knots.size:
            if np.any(knots <= self.boundary_low) or np.any(knots >= self.boundary_high):
                raise DegenerateDoseError(
                    f"interior knots {list(knots)} must lie strictly inside "
                    f"(0, {self.boundary_high})"
                )
            if np.any(np.diff(knots) <= 0):
                raise DegenerateDoseError(f"interior knots {list(knots)} must be strictly ascending")
        if self.is_linear:
            n_cols = 1
        else:
            n_cols = knots.size + self.degree
        object.__setattr__(self, "n_columns", int(n_cols))

    @property
    def is_linear(self) -> bool:
        return len(self.interior_knots) == 0

    @property
    def knot_vector(self) -> np.ndarray:
        """Full padded knot vector (boundary knots repeated degree+1 times)."""
        return np.concatenate([
            np.full(self.degree + 1, self.boundary_low),
            np.asarray(self.interior_knots, dtype=float),
            np.full(self.degree + 1, self.boundary_high),
        ])

    def to_dict(self) -> dict:
        return {
            "drug_index": self.drug_index,
            "degree": self.degree,
            "interior_knots": list(self.interior_knots),
            "boundary_low": self.boundary_low,
            "boundary_high": self.boundary_high,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BasisSet":
        return cls(
            drug_index=int(d["drug_index"]),
            degree=int(d["degree"]),
            interior_knots=tuple(float(k) for k in d["interior_knots"]),
            boundary_low=float(d["boundary_low"]),
            boundary_high=float(d["boundary_high"]),
        )


def build_basis(doses_by_trial, n_interior_knots: int, degree: int = DEGREE,
                drug_index: int = 0) -> BasisSet:
    """Construct the basis for one drug from its observed per-trial doses.

    Parameters
    ----------
    doses_by_trial : sequence of sequences of float
        Observed doses for this drug, one list per trial.  Trials with no
        positive dose for the drug contribute nothing.
    n_interior_knots : int
        0 gives the linear model (single raw-dose column); m >= 1 places
        interior knots at the i/(m+1) quantiles (linear interpolation
        between order statistics) of the pooled positive doses.
    degree : int
        Spline polynomial degree (cubic by default).

    Raises
    ------
    DegenerateDoseError
        If a quantile collides with a boundary or a duplicate knot
        results; the dose distribution is too degenerate for the
        requested knot count.
    """
    if n_interior_knots < 0:
        raise ValueError("n_interior_knots must be >= 0")
    pooled = []
    trial_maxima = []
    for trial_doses in doses_by_trial:
        arr = np.asarray(list(trial_doses), dtype=float)
        pos = arr[arr > 0]
        if pos.size:
            pooled.append(pos)
            trial_maxima.append(pos.max())
    if not pooled:
        raise DegenerateDoseError("no positive doses observed for this drug")
    pooled = np.concatenate(pooled)
    boundary_high = float(np.mean(trial_maxima))

    if n_interior_knots == 0:
        interior = ()
    else:
        probs = np.arange(1, n_interior_knots + 1) / (n_interior_knots + 1)
        knots = np.quantile(pooled, probs, method="linear")
        if len(set(knots.tolist())) != n_interior_knots:
            raise DegenerateDoseError(
                f"dose quantiles produce duplicate knots: {knots.tolist()}"
            )
        interior = tuple(float(k) for k in knots)

    return BasisSet(
        drug_index=drug_index,
        degree=degree,
        interior_knots=interior,
        boundary_low=0.0,
        boundary_high=boundary_high,
    )


def _cox_de_boor(x: np.ndarray, knots: np.ndarray, degree: int) -> np.ndarray:
    """All B-spline basis functions of ``degree`` at points ``x``.

    Vectorized bottom-up recursion.  ``x`` must lie in
    [knots[degree], knots[-degree-1]]; the right boundary is treated as
    closed so the last basis function saturates to 1 there.
    """
    n_basis = len(knots) - degree - 1
    b = np.zeros((x.size, n_basis + degree))
    # degree-0 indicators over knot spans; rightmost nonempty span is right-closed
    nonempty = np.nonzero(np.diff(knots) > 0)[0]
    spans = np.searchsorted(knots, x, side="right") - 1
    spans = np.clip(spans, nonempty[0], nonempty[-1])
    b[np.arange(x.size), spans] = 1.0

    for k in range(1, degree + 1):
        for i in range(n_basis + degree - k):
            denom_left = knots[i + k] - knots[i]
            denom_right = knots[i + k + 1] - knots[i + 1]
            left = np.zeros_like(x)
            right = np.zeros_like(x)
            if denom_left > 0:
                left = (x - knots[i]) / denom_left * b[:, i]
            if denom_right > 0:
                right = (knots[i + k + 1] - x) / denom_right * b[:, i + 1]
            b[:, i] = left + right
    return b[:, :n_basis]


def _basis_and_derivative_at(basis: BasisSet, x: np.ndarray):
    """Full spline basis matrix and its first derivative at in-range points."""
    knots = basis.knot_vector
    deg = basis.degree
    vals = _cox_de_boor(x, knots, deg)
    # derivative via the lower-degree basis on the same knot vector
    lower = _cox_de_boor(x, knots, deg - 1)
    n_basis = len(knots) - deg - 1
    deriv = np.zeros_like(vals)
    for i in range(n_basis):
        d_left = knots[i + deg] - knots[i]
        d_right = knots[i + deg + 1] - knots[i + 1]
        if d_left > 0:
            deriv[:, i] += deg / d_left * lower[:, i]
        if d_right > 0 and i + 1 < lower.shape[1]:
            deriv[:, i] -= deg / d_right * lower[:, i + 1]
    return vals, deriv


def eval_matrix(basis: BasisSet, doses) -> np.ndarray:
    """Design rows for an array of doses, shape (len(doses), n_columns).

    Spline rows are the full Cox-de Boor basis with the first column
    dropped; doses beyond the upper boundary are continued linearly with
    value and slope matched at the boundary.
    """
    x = np.asarray(doses, dtype=float).ravel()
    if np.any(x < 0):
        raise ValueError("doses must be nonnegative")
    if basis.is_linear:
        return x[:, None].copy()

    high = basis.boundary_high
    inside = x <= high
    out = np.empty((x.size, basis.n_columns))
    if inside.any():
        vals, _ = _basis_and_derivative_at(basis, x[inside])
        out[inside] = vals[:, 1:]
    if (~inside).any():
        edge = np.array([high])
        vals, deriv = _basis_and_derivative_at(basis, edge)
        excess = (x[~inside] - high)[:, None]
        out[~inside] = vals[:, 1:] + excess * deriv[:, 1:]
    return out


def eval_row(basis: BasisSet, dose: float) -> np.ndarray:
    """Design row for a single dose; zero vector at dose 0."""
    return eval_matrix(basis, [dose])[0]


def dropped_column(basis: BasisSet, doses) -> np.ndarray:
    """Value of the dropped first basis function (for partition-of-unity checks)."""
    x = np.asarray(doses, dtype=float).ravel()
    if basis.is_linear:
        raise ValueError("linear model has no dropped basis column")
    vals, _ = _basis_and_derivative_at(basis, np.clip(x, 0.0, basis.boundary_high))
    return vals[:, 0]
