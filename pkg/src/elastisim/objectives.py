"""Finite-sum benchmark objectives with measurable regularity constants.

Each objective is a finite sum f(x) = (1/m) * sum_i f_i(x) over m samples.
The simulator draws per-sample gradients, so every objective exposes both the
full gradient and individual sample gradients, plus the constants the
convergence bounds consume: smoothness L, strong convexity c, a second-moment
bound M2 and a gradient-noise bound sigma2 over a stated region.

Three families are provided:

* quadratic: shared-Hessian least-squares with an exact spectrum, exact
  optimum (the sample-target mean) and exact noise variance (independent of x);
* logistic: l2-regularized binary logistic regression on synthetic Gaussian
  features (c = l2, L from the feature row norms);
* cosine_quadratic: the quadratic plus a per-coordinate cosine ripple of zero
  sample variance; non-convex once amp * omega^2 exceeds the quadratic's c,
  with an exactly known global minimizer and analytic L.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import substream

__all__ = [
    "ObjectiveConstants",
    "Objective",
    "QuadraticObjective",
    "LogisticObjective",
    "CosineQuadraticObjective",
    "make_quadratic",
    "make_logistic",
    "make_cosine_quadratic",
    "measure_constants",
    "objective_from_config",
]


@dataclass(frozen=True)
class ObjectiveConstants:
    """Regularity constants for one objective over one probe region.

    ``estimated`` is True when L and c are conservative bounds rather than
    exact spectral values.  ``sigma2`` and ``M2`` are always measured over the
    probe region (for the shared-Hessian quadratic the variance happens to be
    exact because it does not depend on x).
    """

    L: float
    c: float
    sigma2: float
    M2: float
    f_star: float
    region_radius: float
    estimated: bool = False


class Objective:
    """Base class: finite-sum objective over m samples in dimension d."""

    d: int
    m: int
    x_star: np.ndarray | None  # known minimizer, if any
    f_star: float  # exact minimum or a valid lower bound
    exact_constants: bool  # True when L/c are exact spectral values

    # -- per-sample pieces ------------------------------------------------
    def sample_value(self, i: int, x: np.ndarray) -> float:
        raise NotImplementedError

    def sample_gradient(self, i: int, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def sample_gradient_batch(self, idx: np.ndarray, views: np.ndarray) -> np.ndarray:
        """Gradient of sample idx[r] at row views[r]; default is a loop."""
        out = np.empty_like(views)
        for r in range(len(idx)):
            out[r] = self.sample_gradient(int(idx[r]), views[r])
        return out

    def all_sample_gradients(self, x: np.ndarray) -> np.ndarray:
        idx = np.arange(self.m)
        return self.sample_gradient_batch(idx, np.broadcast_to(x, (self.m, self.d)))

    # -- full objective ---------------------------------------------------
    def value(self, x: np.ndarray) -> float:
        return float(np.mean([self.sample_value(i, x) for i in range(self.m)]))

    def full_gradient(self, x: np.ndarray) -> np.ndarray:
        return self.all_sample_gradients(x).mean(axis=0)

    def stochastic_gradient(self, x: np.ndarray, rng: np.random.Generator) -> tuple[int, np.ndarray]:
        """Draw a uniform sample index and return (index, its gradient at x)."""
        i = int(rng.integers(self.m))
        return i, self.sample_gradient(i, x)

    # -- analytic constants ------------------------------------------------
    def smoothness(self) -> float:
        raise NotImplementedError

    def strong_convexity(self) -> float:
        raise NotImplementedError

    def describe(self) -> dict:
        raise NotImplementedError


class QuadraticObjective(Objective):
    """f(x) = (1/m) sum_i 0.5 (x-b_i)' A (x-b_i) with a shared SPD Hessian A.

    The minimizer is the target mean, and the per-sample gradient noise
    (1/m) sum_i ||A (b_mean - b_i)||^2 is the same at every x.
    """

    def __init__(self, A: np.ndarray, b: np.ndarray, eigs: np.ndarray, seed: int, spread: float, center: float):
        self.A = A
        self.b = b
        self.eigs = np.sort(eigs)
        self.d = A.shape[0]
        self.m = b.shape[0]
        self.seed = seed
        self.spread = spread
        self.center = center
        self.x_star = b.mean(axis=0)
        diffs = self.b - self.x_star
        self.f_star = float(0.5 * np.mean(np.einsum("ij,jk,ik->i", diffs, self.A, diffs)))
        self.sigma2_exact = float(np.mean(np.sum((diffs @ self.A.T) ** 2, axis=1)))
        self.exact_constants = True

    def sample_value(self, i: int, x: np.ndarray) -> float:
        e = x - self.b[i]
        return float(0.5 * e @ self.A @ e)

    def sample_gradient(self, i: int, x: np.ndarray) -> np.ndarray:
        return self.A @ (x - self.b[i])

    def sample_gradient_batch(self, idx: np.ndarray, views: np.ndarray) -> np.ndarray:
        return (views - self.b[idx]) @ self.A.T

    def value(self, x: np.ndarray) -> float:
        e = x - self.x_star
        return float(0.5 * e @ self.A @ e) + self.f_star

    def full_gradient(self, x: np.ndarray) -> np.ndarray:
        return self.A @ (x - self.x_star)

    def smoothness(self) -> float:
        return float(self.eigs[-1])

    def strong_convexity(self) -> float:
        return float(self.eigs[0])

    def describe(self) -> dict:
        return {
            "kind": "quadratic",
            "d": self.d,
            "m": self.m,
            "c": self.strong_convexity(),
            "L": self.smoothness(),
            "spread": self.spread,
            "center": self.center,
            "seed": self.seed,
        }


def _orthogonal(d: int, rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    return q * np.sign(np.diag(r))


def make_quadratic(
    d: int,
    m: int,
    c: float,
    L: float,
    spread: float,
    seed: int,
    center: float = 0.0,
) -> QuadraticObjective:
    """Build a shared-Hessian quadratic with spectrum spanning exactly [c, L].

    Targets are b_i = center * u + spread * z_i with z_i standard normal and u
    a seeded unit direction, so the optimum sits at their mean.  For d >= 2
    the extreme eigenvalues c and L are both present; d == 1 requires c == L.
    """
    if d < 1 or m < 1:
        raise ValueError("d and m must be >= 1")
    if not (0.0 < c <= L):
        raise ValueError("need 0 < c <= L")
    if d == 1 and c != L:
        raise ValueError("d == 1 admits a single eigenvalue; set c == L")
    if spread < 0.0:
        raise ValueError("spread must be >= 0")
    rng = substream(seed, "objective", "quadratic")
    if d == 1:
        eigs = np.array([L])
    else:
        eigs = np.concatenate([[c, L], rng.uniform(c, L, size=d - 2)])
    q = _orthogonal(d, rng)
    A = (q * eigs) @ q.T
    A = 0.5 * (A + A.T)  # exact symmetry
    u = rng.standard_normal(d)
    u /= np.sqrt(u @ u)
    b = center * u + spread * rng.standard_normal((m, d))
    return QuadraticObjective(A=A, b=b, eigs=eigs, seed=seed, spread=spread, center=center)


class LogisticObjective(Objective):
    """l2-regularized binary logistic regression on synthetic features.

    f_i(x) = log(1 + exp(-y_i a_i.x)) + (l2/2) ||x||^2, so the finite-sum mean
    carries the regularizer exactly once.  c = l2; L = l2 + max_i ||a_i||^2/4
    is a safe upper bound (flagged as estimated rather than exact).
    """

    def __init__(self, features: np.ndarray, labels: np.ndarray, l2: float, seed: int):
        self.features = features
        self.labels = labels.astype(np.float64)
        self.l2 = float(l2)
        self.m, self.d = features.shape
        self.seed = seed
        self.x_star = None
        self.f_star = 0.0  # valid lower bound: both loss terms are nonnegative
        self.exact_constants = False
        self._row_norm2 = float(np.max(np.sum(features**2, axis=1)))

    def _margins(self, x: np.ndarray) -> np.ndarray:
        return self.labels * (self.features @ x)

    def sample_value(self, i: int, x: np.ndarray) -> float:
        z = self.labels[i] * (self.features[i] @ x)
        return float(np.logaddexp(0.0, -z) + 0.5 * self.l2 * (x @ x))

    def sample_gradient(self, i: int, x: np.ndarray) -> np.ndarray:
        z = self.labels[i] * (self.features[i] @ x)
        s = 1.0 / (1.0 + np.exp(z))  # sigmoid(-z)
        return (-self.labels[i] * s) * self.features[i] + self.l2 * x

    def sample_gradient_batch(self, idx: np.ndarray, views: np.ndarray) -> np.ndarray:
        a = self.features[idx]
        y = self.labels[idx]
        z = y * np.einsum("rj,rj->r", a, views)
        s = 1.0 / (1.0 + np.exp(z))
        return (-y * s)[:, None] * a + self.l2 * views

    def value(self, x: np.ndarray) -> float:
        z = self._margins(x)
        return float(np.mean(np.logaddexp(0.0, -z)) + 0.5 * self.l2 * (x @ x))

    def full_gradient(self, x: np.ndarray) -> np.ndarray:
        z = self._margins(x)
        s = 1.0 / (1.0 + np.exp(z))
        return (self.features * (-self.labels * s)[:, None]).mean(axis=0) + self.l2 * x

    def smoothness(self) -> float:
        return self.l2 + 0.25 * self._row_norm2

    def strong_convexity(self) -> float:
        return self.l2

    def describe(self) -> dict:
        return {"kind": "logistic", "d": self.d, "m": self.m, "l2": self.l2, "seed": self.seed}


def make_logistic(d: int, m: int, seed: int, l2: float = 0.0, scale: float = 1.0) -> LogisticObjective:
    """Gaussian features, alternating (balanced for even m) +/-1 labels."""
    if d < 1 or m < 2:
        raise ValueError("need d >= 1 and m >= 2")
    if l2 < 0.0:
        raise ValueError("l2 must be >= 0")
    rng = substream(seed, "objective", "logistic")
    features = scale * rng.standard_normal((m, d))
    labels = np.where(np.arange(m) % 2 == 0, 1.0, -1.0)
    return LogisticObjective(features=features, labels=labels, l2=l2, seed=seed)


class CosineQuadraticObjective(Objective):
    """Quadratic plus amp * sum_k (1 - cos(omega (x_k - x*_k))) on every sample.

    The ripple is identical across samples, so the gradient noise equals the
    quadratic's.  Both terms vanish at the quadratic optimum, which therefore
    stays the global minimizer even though the landscape is non-convex
    (curvature dips to c_quad - amp * omega^2).  L = L_quad + amp * omega^2.
    """

    def __init__(self, quad: QuadraticObjective, amp: float, omega: float):
        self.quad = quad
        self.amp = float(amp)
        self.omega = float(omega)
        self.d = quad.d
        self.m = quad.m
        self.x_star = quad.x_star
        self.f_star = quad.f_star
        self.exact_constants = True

    def _bump(self, x: np.ndarray) -> float:
        return float(self.amp * np.sum(1.0 - np.cos(self.omega * (x - self.x_star))))

    def _bump_gradient(self, x: np.ndarray) -> np.ndarray:
        return self.amp * self.omega * np.sin(self.omega * (x - self.x_star))

    def sample_value(self, i: int, x: np.ndarray) -> float:
        return self.quad.sample_value(i, x) + self._bump(x)

    def sample_gradient(self, i: int, x: np.ndarray) -> np.ndarray:
        return self.quad.sample_gradient(i, x) + self._bump_gradient(x)

    def sample_gradient_batch(self, idx: np.ndarray, views: np.ndarray) -> np.ndarray:
        bump = self.amp * self.omega * np.sin(self.omega * (views - self.x_star))
        return self.quad.sample_gradient_batch(idx, views) + bump

    def value(self, x: np.ndarray) -> float:
        return self.quad.value(x) + self._bump(x)

    def full_gradient(self, x: np.ndarray) -> np.ndarray:
        return self.quad.full_gradient(x) + self._bump_gradient(x)

    def smoothness(self) -> float:
        return self.quad.smoothness() + self.amp * self.omega**2

    def strong_convexity(self) -> float:
        # Not strongly convex (and genuinely non-convex when amp*omega^2 > c_quad).
        return 0.0

    def describe(self) -> dict:
        out = self.quad.describe()
        out.update({"kind": "cosine_quadratic", "amp": self.amp, "omega": self.omega})
        return out


def make_cosine_quadratic(
    d: int,
    m: int,
    c: float,
    L: float,
    spread: float,
    seed: int,
    amp: float,
    omega: float,
    center: float = 0.0,
) -> CosineQuadraticObjective:
    if amp < 0.0 or omega <= 0.0:
        raise ValueError("need amp >= 0 and omega > 0")
    quad = make_quadratic(d=d, m=m, c=c, L=L, spread=spread, seed=seed, center=center)
    return CosineQuadraticObjective(quad, amp=amp, omega=omega)


def measure_constants(
    obj: Objective,
    region_radius: float,
    n_probes: int = 512,
    seed: int = 0,
    center: np.ndarray | None = None,
) -> ObjectiveConstants:
    """Brute-force sigma2 and M2 over a ball, analytic L/c.

    Probes the ball of the given radius around ``center`` (default: the known
    optimum, else the origin).  Half the probes sit on the boundary sphere,
    where the quadratic families attain their maxima; the rest fill the ball
    uniformly.  At each probe all m sample gradients are evaluated exactly:

        sigma2 >= mean_i ||g_i - g_mean||^2,   M2 >= mean_i ||g_i||^2.
    """
    if region_radius <= 0.0:
        raise ValueError("region_radius must be > 0")
    if n_probes < 2:
        raise ValueError("need at least 2 probes")
    if center is None:
        center = obj.x_star if obj.x_star is not None else np.zeros(obj.d)
    rng = substream(seed, "measure")
    dirs = rng.standard_normal((n_probes, obj.d))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    radii = region_radius * rng.uniform(0.0, 1.0, size=n_probes) ** (1.0 / obj.d)
    radii[: n_probes // 2] = region_radius
    sigma2 = 0.0
    m2 = 0.0
    for r in range(n_probes):
        x = center + radii[r] * dirs[r]
        grads = obj.all_sample_gradients(x)
        gbar = grads.mean(axis=0)
        sigma2 = max(sigma2, float(np.mean(np.sum((grads - gbar) ** 2, axis=1))))
        m2 = max(m2, float(np.mean(np.sum(grads**2, axis=1))))
    return ObjectiveConstants(
        L=obj.smoothness(),
        c=obj.strong_convexity(),
        sigma2=sigma2,
        M2=m2,
        f_star=obj.f_star,
        region_radius=float(region_radius),
        estimated=not obj.exact_constants,
    )


def objective_from_config(spec: dict) -> Objective:
    """Build an objective from its JSON/CLI dictionary form."""
    spec = dict(spec)
    kind = spec.pop("kind", None)
    try:
        if kind == "quadratic":
            return make_quadratic(**spec)
        if kind == "logistic":
            return make_logistic(**spec)
        if kind == "cosine_quadratic":
            return make_cosine_quadratic(**spec)
    except TypeError as exc:
        raise ValueError(f"bad objective parameters for kind {kind!r}: {exc}") from exc
    raise ValueError(f"unknown objective kind {kind!r}")
