"""Legendre feature maps and offline estimation of population moments.

The feature map turns a covariate vector (intercept first) into a vector of
Legendre polynomial evaluations; moments of the covariate law under that map
(second-moment matrix, cross-moment with the features, null-space basis of
the cross-moment) are estimated once from historical draws and cached.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import NotSPD, SingularSigma
from .numerics import invert_spd, null_space_basis

MAX_LEGENDRE_DEGREE = 12


def legendre(degree: int, x):
    """Legendre polynomial P_degree evaluated via the three-term recurrence.

    Accepts scalars or arrays; degree must be <= 12.
    """
    if degree < 0 or degree > MAX_LEGENDRE_DEGREE:
        raise ValueError(f"degree {degree} outside supported range 0..{MAX_LEGENDRE_DEGREE}")
    x = np.asarray(x, dtype=float)
    prev = np.ones_like(x)
    if degree == 0:
        return prev if prev.ndim else float(prev)
    cur = x.copy()
    for k in range(1, degree):
        prev, cur = cur, ((2 * k + 1) * x * cur - k * prev) / (k + 1)
    return cur if cur.ndim else float(cur)


@dataclass(frozen=True)
class SieveBasis:
    """A list of (coordinate, degree) Legendre terms with per-coordinate clamps.

    Each input coordinate is clamped to its [lo, hi] range before the
    polynomial is evaluated at the clamped value, keeping features bounded
    without shrinking their scale (a bias term weighted at the published
    nu^2 needs the raw polynomial magnitudes to carry any weight against
    the variance term). The intercept coordinate evaluates at 1 exactly.
    """

    terms: tuple[tuple[int, int], ...]
    clamp: tuple[tuple[float, float], ...]

    def __post_init__(self):
        for coord, degree in self.terms:
            if coord < 0 or coord >= len(self.clamp):
                raise ValueError(f"term references coordinate {coord} with no clamp range")
            if degree < 0:
                raise ValueError("negative polynomial degree")
        for lo, hi in self.clamp:
            if not (np.isfinite(lo) and np.isfinite(hi) and lo < hi):
                raise ValueError(f"bad clamp range ({lo}, {hi})")

    @property
    def dim(self) -> int:
        return len(self.terms)

    @property
    def n_coords(self) -> int:
        return len(self.clamp)

    @classmethod
    def bandit_default(cls) -> "SieveBasis":
        """Degree-0..3 terms on the intercept, degrees 1-2 on the second
        coordinate and degree 3 on the third (the 7-feature bandit basis)."""
        terms = ((0, 0), (0, 1), (0, 2), (0, 3), (1, 1), (1, 2), (2, 3))
        clamp = ((-1.0, 1.0), (-3.0, 3.0), (-3.0, 3.0))
        return cls(terms=terms, clamp=clamp)

    @classmethod
    def dynamic_default(cls) -> "SieveBasis":
        """P_0 on the intercept plus degrees 1..3 on each of three
        continuous coordinates (10 features over 4 covariates)."""
        terms = [(0, 0)]
        for coord in (1, 2, 3):
            terms.extend((coord, d) for d in (1, 2, 3))
        clamp = ((-1.0, 1.0),) + ((-3.0, 3.0),) * 3
        return cls(terms=tuple(terms), clamp=clamp)


def _mapped_coords(basis: SieveBasis, x: np.ndarray) -> np.ndarray:
    lo = np.array([c[0] for c in basis.clamp])
    hi = np.array([c[1] for c in basis.clamp])
    return np.clip(x, lo, hi)


def featurize(basis: SieveBasis, x: np.ndarray) -> np.ndarray:
    """Feature vector of length basis.dim for a single covariate vector."""
    x = np.asarray(x, dtype=float)
    if x.shape != (basis.n_coords,):
        raise ValueError(f"expected covariate of length {basis.n_coords}, got {x.shape}")
    u = _mapped_coords(basis, x)
    return np.array([legendre(d, u[c]) for c, d in basis.terms])


def featurize_batch(basis: SieveBasis, xs: np.ndarray) -> np.ndarray:
    """Feature matrix (n, L) for covariate rows (n, p); vectorized."""
    xs = np.asarray(xs, dtype=float)
    u = _mapped_coords(basis, xs)
    cols = [legendre(d, u[:, c]) for c, d in basis.terms]
    return np.stack(cols, axis=1)


@dataclass
class PopulationMoments:
    """Pre-estimated covariate moments consumed by the design objectives.

    sigma   -- E[X X'] (p x p), SPD
    xi      -- E[Psi(X) X'] (L x p)
    u_basis -- orthonormal basis of the orthogonal complement of col(xi)
    mean_x  -- E[X]
    nu2     -- robustness weight (eta^2 = nu2 * sigma^2 in the objectives)
    """

    sigma: np.ndarray
    xi: np.ndarray
    u_basis: np.ndarray
    mean_x: np.ndarray
    nu2: float
    sigma_inv: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.sigma = np.asarray(self.sigma, dtype=float)
        self.xi = np.asarray(self.xi, dtype=float)
        self.u_basis = np.asarray(self.u_basis, dtype=float)
        self.mean_x = np.asarray(self.mean_x, dtype=float)
        if self.nu2 < 0:
            raise ValueError("nu2 must be >= 0")
        gram = self.u_basis.T @ self.u_basis
        if gram.size and np.max(np.abs(gram - np.eye(gram.shape[0]))) > 1e-10:
            raise ValueError("u_basis columns are not orthonormal")
        try:
            self.sigma_inv = invert_spd(self.sigma)
        except NotSPD as exc:
            raise SingularSigma(str(exc)) from exc

    @property
    def p(self) -> int:
        return self.sigma.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.xi.shape[0]

    def to_json(self) -> str:
        payload = {
            "sigma": self.sigma.tolist(),
            "xi": self.xi.tolist(),
            "u_basis": self.u_basis.tolist(),
            "mean_x": self.mean_x.tolist(),
            "nu2": self.nu2,
        }
        return json.dumps(payload, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "PopulationMoments":
        payload = json.loads(text)
        return cls(
            sigma=np.array(payload["sigma"], dtype=float),
            xi=np.array(payload["xi"], dtype=float),
            u_basis=np.array(payload["u_basis"], dtype=float),
            mean_x=np.array(payload["mean_x"], dtype=float),
            nu2=float(payload["nu2"]),
        )


def estimate_moments(
    basis: SieveBasis, historical_x: np.ndarray, nu2: float
) -> PopulationMoments:
    """Empirical moments from historical covariate draws (intercept first).

    Requires at least p + L draws; raises SingularSigma when the empirical
    second-moment matrix is not SPD.
    """
    xs = np.asarray(historical_x, dtype=float)
    if xs.ndim != 2:
        raise ValueError("historical_x must be a 2-d array of covariate rows")
    n, p = xs.shape
    if p != basis.n_coords:
        raise ValueError(f"covariate dim {p} != basis coordinate count {basis.n_coords}")
    if n < p + basis.dim:
        raise ValueError(f"need at least p + L = {p + basis.dim} draws, got {n}")
    if np.max(np.abs(xs[:, 0] - 1.0)) > 1e-12:
        raise ValueError("first coordinate of every draw must be the intercept 1")
    sigma = xs.T @ xs / n
    try:
        invert_spd(sigma)
    except NotSPD as exc:
        raise SingularSigma(str(exc)) from exc
    feats = featurize_batch(basis, xs)
    xi = feats.T @ xs / n
    u_basis = null_space_basis(xi)
    return PopulationMoments(
        sigma=sigma, xi=xi, u_basis=u_basis, mean_x=xs.mean(axis=0), nu2=float(nu2)
    )
