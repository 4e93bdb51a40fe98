"""Periodic scalar cell problem with stiff inclusions.

Cell-centered grid of ``n^d`` cells of size ``h = L / n``; fluxes live on faces
with harmonic-mean coefficients.  The corrector phi_E minimizes the average
energy  sum_k mean( a_k (D_k phi + E_k)^2 )  over periodic phi, where D_k is the
forward difference in direction k.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .cluster_geometry import build_cutoff, fatten
from .clusters import decompose
from .geometry import Ball, mark_shapes
from .inclusions import InclusionSet


@dataclass(eq=False)
class CoefficientField:
    a: np.ndarray
    L: float = 1.0
    contrast: float = 1.0
    truncation: float | None = None
    meta: dict = field(default_factory=dict)
    face_rule: str = "harmonic"

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=float)
        if np.any(self.a < 1):
            raise ValueError("coefficient must be >= 1 everywhere")
        if self.face_rule not in ("harmonic", "arithmetic"):
            raise ValueError(f"unknown face rule {self.face_rule!r}")

    @property
    def n(self) -> int:
        return self.a.shape[0]

    @property
    def dim(self) -> int:
        return self.a.ndim

    @property
    def h(self) -> float:
        return self.L / self.n

    def faces(self) -> list:
        """Coefficient on the face between cell i and i + e_k (harmonic mean by default).

        The arithmetic rule is the dual discretization: in 2D the two rules
        bracket the effective coefficient of phase-swap self-dual media.
        """
        out = []
        for k in range(self.dim):
            b = np.roll(self.a, -1, axis=k)
            out.append(2.0 * self.a * b / (self.a + b) if self.face_rule == "harmonic" else 0.5 * (self.a + b))
        return out

    def truncated(self, s: float) -> "CoefficientField":
        """Values above s replaced by 1."""
        return CoefficientField(np.where(self.a > s, 1.0, self.a), self.L, self.contrast, s, dict(self.meta),
                                self.face_rule)

    def with_faces(self, rule: str) -> "CoefficientField":
        return CoefficientField(self.a, self.L, self.contrast, self.truncation, dict(self.meta), rule)


def centers_in_balls(n: int, L: float, d: int, centers, radii, periodic: bool = True) -> np.ndarray:
    """Label (index + 1) of a ball containing each cell center, 0 outside."""
    lab = np.zeros((n,) * d, dtype=np.int64)
    h = L / n
    for idx, (c, r) in enumerate(zip(np.atleast_2d(centers), np.atleast_1d(radii))):
        lo = np.floor((c - r) / h - 0.5).astype(int)
        hi = np.ceil((c + r) / h - 0.5).astype(int) + 1
        axes, sq = [], None
        for a in range(d):
            k = np.arange(lo[a], hi[a])
            if not periodic:
                k = k[(k >= 0) & (k < n)]
            x = (k + 0.5) * h - c[a]
            sq = x ** 2 if sq is None else np.add.outer(sq, x ** 2)
            axes.append(np.mod(k, n))
        inside = sq < r * r
        sub = lab[np.ix_(*axes)]
        sub[inside] = idx + 1
        lab[np.ix_(*axes)] = sub
    return lab


def assemble_field(source, contrast, n: int, truncation: float | None = None, L: float | None = None,
                   d: int | None = None) -> CoefficientField:
    """Coefficient equal to the contrast on cells whose center lies in an inclusion, 1 elsewhere.

    ``source`` is an InclusionSet of balls or a boolean/label array of shape n^d.
    ``contrast`` may be one value or one value per inclusion.  Values above the
    truncation level are reset to 1.
    """
    if n < 32:
        raise ValueError("grid needs n >= 32")
    if isinstance(source, InclusionSet):
        L = source.window.size if L is None else L
        d = source.window.dim
        if not source.all_balls:
            raise NotImplementedError("field assembly supports ball inclusions")
        lab = centers_in_balls(n, L, d, source.centers, source.radii, source.window.periodic)
    else:
        lab = np.asarray(source)
        if lab.dtype == bool:
            lab = lab.astype(np.int64)
        L = 1.0 if L is None else L
        if lab.shape != (n,) * lab.ndim:
            raise ValueError("array source must have shape n^d")
    c = np.atleast_1d(np.asarray(contrast, dtype=float))
    if np.any(c < 1):
        raise ValueError("contrast must be >= 1")
    vals = np.concatenate([[1.0], np.broadcast_to(c, (max(int(lab.max()), 1),)) if c.size == 1 else c])
    a = vals[lab]
    f = CoefficientField(a, float(L), float(c.max()), None, {"n": n})
    return f.truncated(truncation) if truncation is not None else f


# --------------------------------------------------------------------------
# solver


def grad(phi: np.ndarray, h: float) -> list:
    return [(np.roll(phi, -1, axis=k) - phi) / h for k in range(phi.ndim)]


def _div_t(fluxes: list, h: float) -> np.ndarray:
    """Adjoint of the forward difference: sum_k D_k^T q_k."""
    out = np.zeros(fluxes[0].shape)
    for k, q in enumerate(fluxes):
        out += (np.roll(q, 1, axis=k) - q) / h
    return out


@dataclass
class CorrectorSolution:
    E: np.ndarray
    phi: np.ndarray
    residual: float
    iterations: int
    converged: bool
    energy: float
    history: list = field(default_factory=list)


def energy(f: CoefficientField, phi: np.ndarray, E, faces=None) -> float:
    faces = f.faces() if faces is None else faces
    g = grad(phi, f.h)
    return float(sum(np.mean(ak * (gk + Ek) ** 2) for ak, gk, Ek in zip(faces, g, E)))


def solve_corrector(f: CoefficientField, E, tol: float = 1e-10, maxiter: int = 200000,
                    record: bool = False) -> CorrectorSolution:
    """Jacobi-preconditioned conjugate gradients for  sum_k D_k^T a_k (D_k phi + E_k) = 0."""
    E = np.asarray(E, dtype=float)
    faces = f.faces()
    h = f.h

    def A(x):
        return _div_t([ak * gk for ak, gk in zip(faces, grad(x, h))], h)

    b = -_div_t([ak * Ek for ak, Ek in zip(faces, E)], h)
    diag = np.zeros(f.a.shape)
    for k, ak in enumerate(faces):
        diag += (ak + np.roll(ak, 1, axis=k)) / h ** 2
    x = np.zeros(f.a.shape)
    bnorm = float(np.linalg.norm(b))
    hist = []
    if bnorm == 0.0:
        return CorrectorSolution(E, x, 0.0, 0, True, energy(f, x, E, faces), hist)
    r = b.copy()
    z = r / diag
    p = z.copy()
    rz = float((r * z).sum())
    it = 0
    res = 1.0
    while it < maxiter:
        Ap = A(p)
        alpha = rz / float((p * Ap).sum())
        x += alpha * p
        r -= alpha * Ap
        it += 1
        res = float(np.linalg.norm(r)) / bnorm
        if record:
            hist.append(energy(f, x, E, faces))
        if res <= tol:
            break
        z = r / diag
        rz_new = float((r * z).sum())
        p = z + (rz_new / rz) * p
        rz = rz_new
    x -= x.mean()
    return CorrectorSolution(E, x, res, it, res <= tol, energy(f, x, E, faces), hist)


def residual_vector(f: CoefficientField, phi: np.ndarray, E) -> np.ndarray:
    """b - A phi for the optimality system."""
    faces = f.faces()
    g = grad(phi, f.h)
    return -_div_t([ak * (gk + Ek) for ak, gk, Ek in zip(faces, g, E)], f.h)


@dataclass
class EffectiveTensor:
    matrix: np.ndarray
    energies: np.ndarray
    solutions: list = field(default_factory=list, repr=False)
    asymmetry: float = 0.0

    @property
    def eigenvalues(self) -> np.ndarray:
        return np.linalg.eigvalsh(self.matrix)


def effective_tensor(f: CoefficientField, tol: float = 1e-10) -> EffectiveTensor:
    """Effective matrix from the d canonical correctors (flux averages, symmetrized)."""
    d = f.dim
    faces = f.faces()
    M = np.zeros((d, d))
    sols = []
    for k in range(d):
        E = np.eye(d)[k]
        s = solve_corrector(f, E, tol)
        if not s.converged:
            raise RuntimeError(f"corrector {k} did not converge (residual {s.residual:.3g})")
        g = grad(s.phi, f.h)
        for l in range(d):
            M[l, k] = float(np.mean(faces[l] * (g[l] + E[l])))
        sols.append(s)
    asym = float(np.abs(M - M.T).max())
    Ms = 0.5 * (M + M.T)
    return EffectiveTensor(Ms, np.array([s.energy for s in sols]), sols, asym)


# --------------------------------------------------------------------------
# bounds


def reuss(f: CoefficientField) -> float:
    return float(1.0 / np.mean(1.0 / f.a))


def voigt(f: CoefficientField) -> float:
    return float(np.mean(f.a))


def _unwrapped_balls(incl: InclusionSet, dec, c):
    members = dec.clusters[c]
    off = dec.offsets[members] if dec.offsets is not None else np.zeros((len(members), incl.window.dim))
    return [Ball(incl.centers[i] + o, incl.radii[i]) for i, o in zip(members, off)]


def trial_field(incl: InclusionSet, n: int, rho: float, E, fine: int | None = None):
    """phi = - sum_p chi_p E.(x - x_p) sampled at the n-grid cell centers.

    Clusters come from ``decompose(incl, rho)``; the cutoffs use the fattened
    sets with fattening radius rho/2 (so distinct clusters keep disjoint
    supports), computed on a grid ``fine`` times finer than the field grid.
    Returns None if some cluster winds around the periodic cell.
    """
    W = incl.window
    d = W.dim
    L = W.size
    h = L / n
    rf = rho / 2
    if fine is None:
        fine = int(math.ceil(10 * h / rf))
        fine += 1 - fine % 2        # odd, so coarse centers are fine-cell centers
    hf = h / fine
    dec = decompose(incl, rho)
    if dec.wraps is not None and dec.wraps.any():
        return None, dec
    phi = np.zeros((n,) * d)
    E = np.asarray(E, dtype=float)
    for c in range(len(dec)):
        balls = _unwrapped_balls(incl, dec, c)
        lo = np.min([b.center - b.radius for b in balls], axis=0)
        hi = np.max([b.center + b.radius for b in balls], axis=0)
        pad = int(math.ceil(3.5 * rf / h)) + 2
        k0 = np.floor(lo / h).astype(int) - pad          # coarse cells
        k1 = np.ceil(hi / h).astype(int) + pad
        shape = tuple(int(x) for x in (k1 - k0) * fine)
        J = mark_shapes(np.zeros(shape, dtype=bool), balls, hf, k0 * h)
        fc = fatten(J, rf, hf, k0 * h)
        chi = build_cutoff(fc)
        # coarse cell centers = fine cells with index fine*k + fine//2
        sl = tuple(slice(fine // 2, None, fine) for _ in range(d))
        chic = chi[sl]
        xp = (np.argwhere(J) + 0.5).mean(axis=0) * hf + k0 * h
        axes = [np.arange(k0[a], k1[a]) for a in range(d)]
        grids = np.meshgrid(*[(ax + 0.5) * h for ax in axes], indexing="ij")
        lin = sum(E[a] * (grids[a] - xp[a]) for a in range(d))
        idx = np.ix_(*[np.mod(ax, n) for ax in axes])
        phi[idx] -= chic * lin
    return phi, dec


def trial_field_energy(f: CoefficientField, phi: np.ndarray, E) -> float:
    return energy(f, phi, E)


def bounds_check(f: CoefficientField, t, trial_bounds=None, rtol: float = 1e-8) -> dict:
    """Reuss <= eig(a_eff) <= Voigt, and a_eff <= trial-field energies (per direction).

    ``t`` is an EffectiveTensor or the effective matrix itself.
    """
    M = np.asarray(t.matrix if isinstance(t, EffectiveTensor) else t, dtype=float)
    ev = np.linalg.eigvalsh(M)
    lo, hi = reuss(f), voigt(f)
    rep = {"reuss": lo, "voigt": hi, "eigenvalues": ev.tolist(),
           "reuss_ok": bool(ev.min() >= lo * (1 - rtol)), "voigt_ok": bool(ev.max() <= hi * (1 + rtol))}
    if trial_bounds is not None:
        tb = np.asarray(trial_bounds, dtype=float)
        diag = np.diag(M)
        rep["trial_field"] = tb.tolist()
        rep["trial_ok"] = bool(np.all(diag <= tb * (1 + rtol)))
    rep["ok"] = rep["reuss_ok"] and rep["voigt_ok"] and rep.get("trial_ok", True)
    return rep


def loewner_leq(A, B, tol: float = 1e-9) -> bool:
    """A <= B in the sense of quadratic forms."""
    return bool(np.linalg.eigvalsh(np.asarray(B) - np.asarray(A)).min() >= -tol * max(1.0, np.abs(B).max()))


def contrast_sweep(make_field, contrasts, tol: float = 1e-10) -> dict:
    """Effective tensor per contrast and relative increments of its largest eigenvalue."""
    contrasts = list(contrasts)
    if any(b < a for a, b in zip(contrasts, contrasts[1:])):
        raise ValueError("contrasts must be increasing")
    mats, tops = [], []
    for c in contrasts:
        t = effective_tensor(make_field(c), tol)
        mats.append(t.matrix)
        tops.append(float(t.eigenvalues.max()))
    inc = [(b - a) / a for a, b in zip(tops, tops[1:])]
    return {"contrasts": contrasts, "tensors": [m.tolist() for m in mats], "largest": tops, "increments": inc,
            "plateau": bool(inc and inc[-1] < 0.05)}
