"""B-spline bases over distance and their difference penalties.

The exposure term of the model sums a smooth curve f(d) over all feature
distances near a subject, so f is what turns raw distances into a design
row.  f is written in an equally spaced B-spline basis on [0, R] and
regularized by a difference penalty on its coefficients.  Because the
penalty matrix is rank deficient, the basis is reparameterized through an
eigendecomposition so that penalized (range-space) and unpenalized
(null-space) directions get independent normal priors.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import BSpline

# Eigenvalues below RANK_TOL * max eigenvalue count as the penalty null space.
RANK_TOL = 1e-10


@dataclass(frozen=True)
class SplineBasis:
    """Equally spaced B-spline basis of ``n_basis`` functions on [0, radius]."""

    degree: int
    n_basis: int
    radius: float
    knots: np.ndarray = field(repr=False)

    def evaluate(self, distances) -> np.ndarray:
        """Evaluate all basis functions at the given distances.

        Returns an array of shape ``(len(distances), n_basis)``.  Distances
        outside [0, radius] are a caller error: features beyond the radius
        must be filtered out before they reach the basis.
        """
        d = np.atleast_1d(np.asarray(distances, dtype=float))
        if d.ndim != 1:
            raise ValueError(f"distances must be one-dimensional, got shape {d.shape}")
        bad = (d < 0.0) | (d > self.radius) | ~np.isfinite(d)
        if bad.any():
            offenders = d[bad][:5]
            raise ValueError(
                f"{int(bad.sum())} distance(s) outside [0, {self.radius}]: {offenders}"
            )
        out = BSpline.design_matrix(d, self.knots, self.degree, extrapolate=False).toarray()
        return out


def build_basis(degree: int, n_basis: int, radius: float) -> SplineBasis:
    """Construct an equally spaced B-spline basis on [0, radius].

    Interior breakpoints are equally spaced; the boundary knots are padded
    at the same spacing so that every one of the ``n_basis`` functions is a
    plain shifted B-spline and the basis sums to one across the domain.
    """
    if degree < 0:
        raise ValueError(f"degree must be nonnegative, got {degree}")
    if n_basis <= degree:
        raise ValueError(f"need n_basis > degree, got n_basis={n_basis}, degree={degree}")
    if not np.isfinite(radius) or radius <= 0:
        raise ValueError(f"radius must be positive and finite, got {radius}")
    n_intervals = n_basis - degree
    step = radius / n_intervals
    knots = step * np.arange(-degree, n_intervals + degree + 1)
    # guard against accumulation error at the right boundary
    knots[degree + n_intervals] = radius
    return SplineBasis(degree=degree, n_basis=n_basis, radius=float(radius), knots=knots)


@dataclass(frozen=True)
class PenaltyDecomposition:
    """Difference penalty S = D'D and the reparameterization it induces.

    ``transform`` maps original basis coefficients to independent
    coordinates; ``inverse`` maps back.  In the independent coordinates the
    penalty quadratic form is the squared norm of the first ``rank``
    entries, so a ridge prior there is exactly the difference penalty.
    """

    matrix: np.ndarray = field(repr=False)  # S, (L, L)
    order: int
    rank: int
    transform: np.ndarray = field(repr=False)  # original -> independent, (L, L)
    inverse: np.ndarray = field(repr=False)  # independent -> original, (L, L)
    eigenvalues: np.ndarray = field(repr=False)  # descending, (L,)

    @property
    def n_basis(self) -> int:
        return self.matrix.shape[0]

    def to_independent(self, coef: np.ndarray) -> np.ndarray:
        """Map original coefficients (last axis) to independent coordinates."""
        return np.asarray(coef, dtype=float) @ self.transform.T

    def to_original(self, coef: np.ndarray) -> np.ndarray:
        """Map independent coordinates (last axis) back to original coefficients."""
        return np.asarray(coef, dtype=float) @ self.inverse.T

    def prior_covariance(self, tau_range: float, tau_null: float, sigma2: float = 1.0) -> np.ndarray:
        """Covariance of the original coefficients implied by the independent prior.

        Independent coordinates get variance sigma2/tau_range on the
        penalized block and sigma2/tau_null on the null-space block.
        """
        L, r = self.n_basis, self.rank
        scale = np.repeat([sigma2 / tau_range, sigma2 / tau_null], [r, L - r])
        return (self.inverse * scale) @ self.inverse.T


def difference_matrix(n_basis: int, order: int) -> np.ndarray:
    """Order-th difference operator on coefficient vectors, shape (L - order, L)."""
    if order < 1:
        raise ValueError(f"difference order must be >= 1, got {order}")
    if n_basis <= order:
        raise ValueError(f"need n_basis > order, got n_basis={n_basis}, order={order}")
    D = np.eye(n_basis)
    for _ in range(order):
        D = np.diff(D, axis=0)
    return D


def difference_penalty(n_basis: int, order: int) -> PenaltyDecomposition:
    """Build S = D'D for the order-th difference matrix and decompose it.

    The eigendecomposition S = U diag(lam) U' (eigenvalues descending)
    yields the transform rows sqrt(lam_i) u_i' over the range space and
    u_i' over the null space, whose inverse has columns u_i / sqrt(lam_i)
    and u_i.  Polynomials of degree < order lie in the null space and are
    left unpenalized.
    """
    D = difference_matrix(n_basis, order)
    S = D.T @ D
    lam, U = np.linalg.eigh(S)
    lam, U = lam[::-1], U[:, ::-1]
    rank = int(np.sum(lam > RANK_TOL * lam[0]))
    if rank != n_basis - order:
        raise ValueError(
            f"penalty rank {rank} does not match n_basis - order = {n_basis - order}; "
            "the difference matrix is ill-conditioned at this size"
        )
    lam = np.concatenate([lam[:rank], np.zeros(n_basis - rank)])
    root = np.sqrt(lam[:rank])
    transform = U.T.copy()
    transform[:rank] *= root[:, None]
    inverse = U.copy()
    inverse[:, :rank] /= root[None, :]
    return PenaltyDecomposition(
        matrix=S,
        order=order,
        rank=rank,
        transform=transform,
        inverse=inverse,
        eigenvalues=lam,
    )


def exposure_row(basis: SplineBasis, distances) -> np.ndarray:
    """Design row for one observation: basis functions summed over its distances.

    ``distances`` is any array-like of feature distances (a DistanceSet
    works through its ``values``).  An empty set contributes a zero row, so
    a subject with no nearby features gets no exposure signal.
    """
    values = getattr(distances, "values", distances)
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        return np.zeros(basis.n_basis)
    return basis.evaluate(values).sum(axis=0)


def exposure_matrix(basis: SplineBasis, distance_sets) -> np.ndarray:
    """Stack exposure rows for a sequence of distance sets, shape (n, n_basis)."""
    return np.array([exposure_row(basis, ds) for ds in distance_sets])


def curve_on_grid(
    basis: SplineBasis,
    coef: np.ndarray,
    grid,
    decomp: PenaltyDecomposition | None = None,
) -> np.ndarray:
    """Evaluate the curve f(d) on a grid; returns columns (d, f(d)).

    When ``decomp`` is given the coefficients are taken in the independent
    coordinates and mapped back through the inverse transform first.
    """
    grid = np.asarray(grid, dtype=float)
    coef = np.asarray(coef, dtype=float)
    if coef.shape != (basis.n_basis,):
        raise ValueError(f"expected {basis.n_basis} coefficients, got shape {coef.shape}")
    if decomp is not None:
        coef = decomp.to_original(coef)
    values = basis.evaluate(grid) @ coef
    return np.column_stack([grid, values])
