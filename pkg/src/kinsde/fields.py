"""Concrete drift, diffusion, and Lyapunov field families.

All evaluation is pure and reentrant; vectorized over particle arrays.
Singular fields carry their own regularization floor so that nothing in
the package ever divides by zero.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from kinsde.core import CoefficientSet, EmpiricalLaw, PhaseState


@dataclass(frozen=True)
class RieszDrift:
    """Superposition of Riesz-type kernels around finitely many atoms.

    b(x) = sum_j w_j (x - y_j) / max(|x - y_j|, eta_sing)^(alpha + 1)

    The floor ``eta_sing`` keeps evaluation total; away from the atoms the
    value does not depend on it.
    """

    locations: np.ndarray   # (k, d)
    weights: np.ndarray     # (k,), positive
    alpha: float
    eta_sing: float = 1e-6

    def __init__(self, atoms, alpha: float, eta_sing: float = 1e-6):
        if len(atoms) == 0:
            raise ValueError("need at least one atom")
        locs = np.asarray([np.atleast_1d(a[0]) for a in atoms], dtype=float)
        w = np.asarray([a[1] for a in atoms], dtype=float)
        if not (0.0 < alpha < 1.0):
            raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
        if np.any(w <= 0):
            raise ValueError("atom weights must be positive")
        if eta_sing <= 0:
            raise ValueError("eta_sing must be positive")
        object.__setattr__(self, "locations", locs)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "alpha", float(alpha))
        object.__setattr__(self, "eta_sing", float(eta_sing))

    @property
    def total_weight(self) -> float:
        return float(np.sum(self.weights))

    @property
    def d(self) -> int:
        return self.locations.shape[1]

    def __call__(self, x: np.ndarray) -> np.ndarray:
        """Evaluate at points x of shape (n, d); always finite."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        diff = x[:, None, :] - self.locations[None, :, :]          # (n, k, d)
        dist = np.sqrt(np.sum(diff * diff, axis=2))                # (n, k)
        floored = np.maximum(dist, self.eta_sing)
        contrib = diff / floored[..., None] ** (self.alpha + 1.0)
        return np.einsum("nkd,k->nd", contrib, self.weights)

    def magnitude_field(self) -> Callable:
        """|b| as a scalar field (t, pts) -> (n,), for norm estimation."""
        return lambda t, pts: np.sqrt(np.sum(self(pts) ** 2, axis=1))


def riesz_eval(drift: RieszDrift, x) -> np.ndarray:
    """Single-point convenience wrapper; returns a (d,) vector."""
    return drift(np.atleast_2d(np.asarray(x, dtype=float)))[0]


@dataclass(frozen=True)
class ConfiningDrift:
    """Polynomially confining drift pair with an optional perturbation.

    z1(x, y) = -c1 (1 + |x|)^delta x + c2 y
    z2(x, y) = Z(x, y) - c3 (1 + |y|)^delta y

    ``delta = 0`` keeps both drifts globally Lipschitz; ``delta > 0`` makes
    them superlinear, which the integrators must handle with taming.
    """

    c1: float
    c2: float
    c3: float
    delta: float = 0.0
    perturbation: Callable | None = None
    perturbation_sublinear: bool = True

    def __post_init__(self):
        if self.c1 <= 0 or self.c3 <= 0:
            raise ValueError("c1 and c3 must be positive")
        if self.delta < 0:
            raise ValueError("delta must be nonnegative")

    @property
    def growth(self) -> str:
        return "superlinear" if self.delta > 0 else "linear"

    def z1(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        r = np.sqrt(np.sum(x * x, axis=1, keepdims=True))
        return -self.c1 * (1.0 + r) ** self.delta * x + self.c2 * y

    def z2(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        r = np.sqrt(np.sum(y * y, axis=1, keepdims=True))
        out = -self.c3 * (1.0 + r) ** self.delta * y
        if self.perturbation is not None:
            out = out + self.perturbation(x, y)
        return out


def bounded_sine_perturbation(scale: float) -> Callable:
    """Bounded smooth perturbation scale * sin(x), visibly sublinear."""
    return lambda x, y: scale * np.sin(x)


class LyapunovBlocks(NamedTuple):
    value: float
    grad_x: np.ndarray
    grad_y: np.ndarray
    hess_xy: np.ndarray  # (d1, d2) mixed block
    hess_yy: np.ndarray  # (d2, d2) block


@dataclass(frozen=True)
class LyapunovV:
    """V(x, y) = (1 + |x|^2 + |y|^2)^theta with closed-form derivatives."""

    theta: float
    d1: int = 1
    d2: int = 1

    def __post_init__(self):
        if self.theta <= 0:
            raise ValueError("theta must be positive")

    def value(self, x, y) -> float:
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        s = 1.0 + float(np.sum(x * x) + np.sum(y * y))
        return s**self.theta

    def value_points(self, pts: np.ndarray) -> np.ndarray:
        """Vectorized V over rows of (n, d1+d2) points."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        s = 1.0 + np.sum(pts * pts, axis=1)
        return s**self.theta

    def blocks(self, x, y) -> LyapunovBlocks:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        y = np.atleast_1d(np.asarray(y, dtype=float))
        th = self.theta
        s = 1.0 + float(np.sum(x * x) + np.sum(y * y))
        v = s**th
        g = 2.0 * th * s ** (th - 1.0)
        g2 = 4.0 * th * (th - 1.0) * s ** (th - 2.0)
        grad_x = g * x
        grad_y = g * y
        hess_xy = g2 * np.outer(x, y)
        hess_yy = g * np.eye(y.size) + g2 * np.outer(y, y)
        return LyapunovBlocks(v, grad_x, grad_y, hess_xy, hess_yy)


def lyapunov_eval(V: LyapunovV, s: PhaseState) -> LyapunovBlocks:
    """Value plus the four derivative blocks used by the drift conditions."""
    return V.blocks(s.x, s.y)


@dataclass(frozen=True)
class PhiFamily:
    """Rate function for the Lyapunov drift condition.

    linear:      Phi(r) = c0 r
    superlinear: Phi(r) = c0 (1 + r^(1 + beta))

    Increasing on [1, inf) with Phi(n) -> inf either way.
    """

    kind: str
    c0: float
    beta: float | None = None

    def __post_init__(self):
        if self.kind not in ("linear", "superlinear"):
            raise ValueError(f"unknown Phi kind {self.kind!r}")
        if self.c0 <= 0:
            raise ValueError("c0 must be positive")
        if self.kind == "superlinear" and not (self.beta is not None and self.beta > 0):
            raise ValueError("superlinear Phi needs beta > 0")

    def __call__(self, r):
        r = np.asarray(r, dtype=float)
        if np.any(r < 0):
            raise ValueError("Phi is defined for r >= 0")
        if self.kind == "linear":
            out = self.c0 * r
        else:
            out = self.c0 * (1.0 + r ** (1.0 + self.beta))
        return float(out) if out.ndim == 0 else out

    def with_c0(self, c0: float) -> "PhiFamily":
        return PhiFamily(self.kind, c0, self.beta)


def phi_eval(phi: PhiFamily, r: float) -> float:
    return float(phi(r))


# --- mean-field interaction ------------------------------------------------------

@dataclass(frozen=True)
class MeanFieldKernel:
    """Bounded interaction kernel W(x, y, x', y') -> R^d2.

    ``structure`` picks the evaluation path:
      constant  -- W is a fixed vector (integral against any probability is W)
      target    -- W depends only on the primed arguments, one cloud pass
      pairwise  -- full broadcast over (particles x cloud), O(n*M) per step
    """

    structure: str
    bound: float
    func: Callable | None = None
    const_value: np.ndarray | None = None

    @staticmethod
    def constant(w) -> "MeanFieldKernel":
        w = np.atleast_1d(np.asarray(w, dtype=float))
        return MeanFieldKernel("constant", float(np.sqrt(np.sum(w * w))), None, w)

    @staticmethod
    def target(g: Callable, bound: float) -> "MeanFieldKernel":
        """g(xp, yp) -> (M, d2) evaluated on the cloud only."""
        return MeanFieldKernel("target", float(bound), g, None)

    @staticmethod
    def pairwise(func: Callable, bound: float) -> "MeanFieldKernel":
        """func(x, y, xp, yp) with broadcastable (n,1,*) / (1,M,*) blocks."""
        return MeanFieldKernel("pairwise", float(bound), func, None)

    def mean_against(self, x: np.ndarray, y: np.ndarray, law: EmpiricalLaw) -> np.ndarray:
        """integral of W(x, y, ., .) d law, as a weighted particle average."""
        if self.structure == "constant":
            return np.broadcast_to(self.const_value, (x.shape[0], self.const_value.size))
        if self.structure == "target":
            vals = np.atleast_2d(np.asarray(self.func(law.x, law.y), dtype=float))
            avg = law.weights @ vals
            return np.broadcast_to(avg, (x.shape[0], avg.size))
        vals = self.func(x[:, None, :], y[:, None, :], law.x[None, :, :], law.y[None, :, :])
        return np.einsum("nmd,m->nd", np.asarray(vals, dtype=float), law.weights)

    def sample_magnitudes(self, n: int, d1: int, d2: int, seed: int = 7) -> np.ndarray:
        """|W| at seeded sample arguments, for the construction spot check."""
        rng = np.random.Generator(np.random.Philox(key=np.uint64(seed)))
        x = 5.0 * rng.standard_normal((n, d1))
        y = 5.0 * rng.standard_normal((n, d2))
        xp = 5.0 * rng.standard_normal((n, d1))
        yp = 5.0 * rng.standard_normal((n, d2))
        if self.structure == "constant":
            vals = np.broadcast_to(self.const_value, (n, self.const_value.size))
        elif self.structure == "target":
            vals = np.atleast_2d(np.asarray(self.func(xp, yp), dtype=float))
        else:
            vals = np.asarray(
                self.func(x[:, None, :], y[:, None, :], xp[:, None, :], yp[:, None, :]),
                dtype=float,
            ).reshape(n, -1)
        return np.sqrt(np.sum(np.atleast_2d(vals) ** 2, axis=-1)).ravel()


def interaction_z2(
    base: Callable,
    kernel: MeanFieldKernel,
    kappa: float,
    d1: int = 1,
    d2: int = 1,
    n_check: int = 256,
) -> Callable:
    """Build Z2(x, y, mu) = base(x, y) + kappa * integral of W d mu.

    The declared kernel bound must be <= 1 and is spot-checked by sampling;
    a violated bound rejects the construction.  With ``mu = None`` the
    reference measure is the Dirac mass at the origin, matching how the
    classical (measure-free) reading of the field is defined elsewhere.
    The built field is Lipschitz in the measure argument in total variation
    with constant at most ``kappa * bound``.
    """
    if kappa < 0:
        raise ValueError("kappa must be nonnegative")
    if kernel.bound > 1.0 + 1e-12:
        raise ValueError(f"kernel bound {kernel.bound} exceeds 1; construction rejected")
    mags = kernel.sample_magnitudes(n_check, d1, d2)
    if np.any(mags > kernel.bound * (1.0 + 1e-9) + 1e-12):
        raise ValueError(
            f"kernel exceeds its declared bound at a sampled point "
            f"(max |W| = {mags.max():.6g} > {kernel.bound}); construction rejected"
        )
    origin = EmpiricalLaw(np.zeros((1, d1)), np.zeros((1, d2)))

    def z2(t, x, y, law):
        out = base(t, x, y)
        if kappa == 0.0:
            return out
        mu = law if law is not None else origin
        return out + kappa * kernel.mean_against(x, y, mu)

    return z2


# --- coefficient set builders ----------------------------------------------------

def _const_sigma(value, d2: int, m: int) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        return float(arr) * np.eye(d2, m)
    return arr.reshape(d2, m)


def sigma_bounds_of(mat: np.ndarray) -> tuple[float, float]:
    if not np.any(mat):
        return (0.0, 0.0)  # noise-free diagnostic dynamics
    a = mat @ mat.T
    return (float(np.linalg.norm(mat, 2)), float(np.linalg.norm(np.linalg.inv(a), 2)))


def build_coefficients(
    z1: Callable,
    z2: Callable,
    b: Callable | None,
    sigma,
    d1: int,
    d2: int,
    m: int | None = None,
    growth: str = "linear",
    measure_dependent: bool = False,
) -> CoefficientSet:
    m = d2 if m is None else m
    if not callable(sigma):
        sigma = _const_sigma(sigma, d2, m)
        bounds = sigma_bounds_of(sigma)
    else:
        raise ValueError("callable sigma needs explicit bounds; use CoefficientSet directly")
    return CoefficientSet(
        d1=d1, d2=d2, m=m, z1=z1, z2=z2, b=b, sigma=sigma,
        sigma_bounds=bounds, measure_dependent=measure_dependent, growth=growth,
    )


def confining_coefficients(
    drift: ConfiningDrift,
    b: RieszDrift | None = None,
    d: int = 1,
    sigma=1.0,
    kernel: MeanFieldKernel | None = None,
    kappa: float = 0.0,
) -> CoefficientSet:
    """Assemble the shipped drift family into a full coefficient set.

    ``kernel``/``kappa`` add a mean-field term to z2; ``b`` attaches the
    singular (floored) drift to the noisy block.
    """
    if b is not None and b.d != d:
        raise ValueError("singular drift dimension does not match d")

    def z1(t, x, y):
        return drift.z1(x, y)

    base = lambda t, x, y: drift.z2(x, y)
    if kernel is not None and kappa > 0.0:
        z2 = interaction_z2(base, kernel, kappa, d1=d, d2=d)
        dep = True
    else:
        z2 = lambda t, x, y, law: base(t, x, y)
        dep = False
    b_field = None if b is None else (lambda t, y: b(y))
    return build_coefficients(
        z1, z2, b_field, sigma, d1=d, d2=d, m=d,
        growth=drift.growth, measure_dependent=dep,
    )


def linear_langevin_coefficients(d: int = 1, sigma=None) -> CoefficientSet:
    """Kinetic benchmark: z1 = y, z2 = -x - y, constant noise (default sqrt(2))."""
    if sigma is None:
        sigma = np.sqrt(2.0)
    return build_coefficients(
        z1=lambda t, x, y: y.copy(),
        z2=lambda t, x, y, law: -x - y,
        b=None,
        sigma=sigma,
        d1=d, d2=d,
    )


def scalar_ou_coefficients(rate: float = 1.0, sigma=1.0, d: int = 1) -> CoefficientSet:
    """Frozen position block, Ornstein-Uhlenbeck velocity block."""
    return build_coefficients(
        z1=lambda t, x, y: np.zeros_like(x),
        z2=lambda t, x, y, law: -rate * y,
        b=None,
        sigma=sigma,
        d1=d, d2=d,
    )


def zero_coefficients(d1: int = 1, d2: int = 1, m: int | None = None, sigma=0.0) -> CoefficientSet:
    return build_coefficients(
        z1=lambda t, x, y: np.zeros_like(x),
        z2=lambda t, x, y, law: np.zeros_like(y),
        b=None,
        sigma=sigma,
        d1=d1, d2=d2, m=m,
        growth="bounded",
    )
