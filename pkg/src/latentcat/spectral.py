"""Closed-form identification of the misclassification model.

Stack the joint pmf into the observable matrices

    M_xz[i, j]      = P(X = x_i, Z = z_j)
    M_xyz[y][i, j]  = P(X = x_i, Y = y, Z = z_j)

Under conditional independence of (X, Y, Z) given the latent state, these
factor through the model matrices, and the product M_xyz[1] @ inv(M_xz) is
similar to a diagonal matrix: its eigenvalues are P(Y=1 | latent state) and
its eigenvectors, normalized to sum 1, are the columns of the reporting
matrix P(X | latent state). Eigenpairs are ordered by the monotone-reporting
restriction (last row of the reporting matrix increasing in the latent
state); the latent marginal and the Z matrix then follow by linear solves.

The decomposition is exact on population pmfs. On finite samples it can
produce complex pairs or negative entries; those are tolerance-gated errors
here, never silently repaired, because estimation is the job of the
likelihood module.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy import linalg

from .data import JointPmf
from .errors import ConfigurationError, DomainError, IdentificationError

__all__ = [
    "MisclassificationModel",
    "IdentificationDiagnostics",
    "build_matrices",
    "check_rank",
    "eigendecompose_identify",
    "population_pmf",
]

STOCHASTIC_TOL = 1e-9


@dataclass(frozen=True)
class MisclassificationModel:
    """Distribution bundle for one covariate cell.

    ``m_x_given_xstar`` is column-stochastic S_X x S_X (column j is the
    reporting pmf of X given latent state j); ``f_y_given_xstar`` is the
    length-S_X vector of P(Y=1 | latent state); ``m_z_given_xstar`` is
    column-stochastic S_Z x S_X; ``f_xstar`` is the latent marginal.
    ``ord_satisfied`` records whether the last row of the reporting matrix
    is strictly increasing (the monotone-reporting check); a diagnostic,
    never an enforced repair.
    """

    m_x_given_xstar: np.ndarray
    f_y_given_xstar: np.ndarray
    m_z_given_xstar: np.ndarray
    f_xstar: np.ndarray
    w_cell: str | None = None

    def __post_init__(self):
        for name in ("m_x_given_xstar", "f_y_given_xstar", "m_z_given_xstar", "f_xstar"):
            arr = np.ascontiguousarray(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def s_x(self) -> int:
        return self.m_x_given_xstar.shape[0]

    @property
    def s_z(self) -> int:
        return self.m_z_given_xstar.shape[0]

    @property
    def ord_satisfied(self) -> bool:
        last = self.m_x_given_xstar[-1, :]
        return bool(np.all(np.diff(last) > 0))

    def validate(self, tol: float = STOCHASTIC_TOL) -> None:
        """Raise DomainError unless all blocks are valid probability objects."""
        mats = {
            "m_x_given_xstar": self.m_x_given_xstar,
            "m_z_given_xstar": self.m_z_given_xstar,
        }
        for name, mat in mats.items():
            if (mat < -tol).any() or (mat > 1 + tol).any():
                raise DomainError(f"{name} entries outside [0,1]")
            dev = np.abs(mat.sum(axis=0) - 1.0).max()
            if dev > tol:
                raise DomainError(f"{name} columns sum to 1 +/- {dev:.2e}")
        for name, vec, in (("f_y_given_xstar", self.f_y_given_xstar),
                           ("f_xstar", self.f_xstar)):
            if (vec < -tol).any() or (vec > 1 + tol).any():
                raise DomainError(f"{name} entries outside [0,1]")
        if abs(self.f_xstar.sum() - 1.0) > tol:
            raise DomainError("f_xstar does not sum to 1")

    def to_dict(self) -> dict:
        def mat(m):
            return {"rows": m.shape[0], "cols": m.shape[1], "data": m.ravel().tolist()}

        return {
            "w_cell": self.w_cell,
            "m_x_given_xstar": mat(self.m_x_given_xstar),
            "f_y_given_xstar": self.f_y_given_xstar.tolist(),
            "m_z_given_xstar": mat(self.m_z_given_xstar),
            "f_xstar": self.f_xstar.tolist(),
            "ord_satisfied": self.ord_satisfied,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> MisclassificationModel:
        def unmat(m):
            return np.asarray(m["data"], dtype=float).reshape(m["rows"], m["cols"])

        return cls(
            m_x_given_xstar=unmat(payload["m_x_given_xstar"]),
            f_y_given_xstar=np.asarray(payload["f_y_given_xstar"], dtype=float),
            m_z_given_xstar=unmat(payload["m_z_given_xstar"]),
            f_xstar=np.asarray(payload["f_xstar"], dtype=float),
            w_cell=payload.get("w_cell"),
        )


@dataclass(frozen=True)
class IdentificationDiagnostics:
    """Assumption checks gathered while identifying one cell."""

    rank_ok: bool
    min_singular_value: float
    eigenvalue_gap: float = np.nan
    complex_discarded: float = np.nan
    ord_satisfied: bool = False
    clipped_mass: float = 0.0
    condition_number: float = np.nan
    y_branch_max_dev: float = np.nan

    def to_dict(self) -> dict:
        return {
            "rank_ok": self.rank_ok,
            "min_singular_value": self.min_singular_value,
            "eigenvalue_gap": self.eigenvalue_gap,
            "complex_discarded": self.complex_discarded,
            "ord_satisfied": self.ord_satisfied,
            "clipped_mass": self.clipped_mass,
            "condition_number": self.condition_number,
            "y_branch_max_dev": self.y_branch_max_dev,
        }


def build_matrices(pmf: JointPmf) -> tuple[np.ndarray, list[np.ndarray]]:
    """Observable matrices (M_xz, [M_xyz for y=0, y=1]) from a joint pmf.

    Requires a square support (S_X == S_Z); coarsen the finer variable
    upstream if the raw supports differ.
    """
    s_x, _, s_z = pmf.support
    if s_x != s_z:
        raise ConfigurationError(
            f"support is {s_x}x{s_z}; the reported outcome and the second "
            "measure must share a cardinality; coarsen the finer one"
        )
    m_per_y = [np.ascontiguousarray(pmf.probs[:, y, :]) for y in (0, 1)]
    return m_per_y[0] + m_per_y[1], m_per_y


def check_rank(m_xz: np.ndarray, tol: float = 1e-8) -> IdentificationDiagnostics:
    """Relative singular-value gate for the invertibility condition.

    ``rank_ok`` iff the smallest singular value exceeds ``tol`` times the
    largest. Failure is reported, not raised: the condition is on
    observables and the caller decides what to do with a deficient cell.
    """
    m = np.asarray(m_xz, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ConfigurationError("rank check needs a square matrix")
    svals = linalg.svdvals(m)
    smax = float(svals[0]) if svals.size else 0.0
    smin = float(svals[-1]) if svals.size else 0.0
    ok = smax > 0 and smin > tol * smax
    cond = smax / smin if smin > 0 else np.inf
    return IdentificationDiagnostics(
        rank_ok=bool(ok), min_singular_value=smin, condition_number=cond
    )


def _normalize_columns(vectors: np.ndarray) -> np.ndarray:
    sums = vectors.sum(axis=0)
    if np.any(np.abs(sums) < 1e-14):
        raise IdentificationError("an eigenvector has (near) zero column sum")
    return vectors / sums


def _order_by_last_row(values: np.ndarray, vectors: np.ndarray):
    order = np.argsort(vectors[-1, :], kind="stable")
    return values[order], vectors[:, order]


def _decompose_branch(a: np.ndarray, tol: float):
    """Eigendecompose one branch operator; returns ordered real (values, columns)."""
    eigvals, eigvecs = linalg.eig(a)
    complex_mag = max(
        float(np.abs(eigvals.imag).max()), float(np.abs(eigvecs.imag).max())
    )
    if complex_mag > tol:
        raise IdentificationError(
            f"complex eigenstructure (imaginary magnitude {complex_mag:.3e} "
            f"> tol {tol:.1e}); the conditional-independence factorization "
            "does not hold at this tolerance"
        )
    vals = eigvals.real.copy()
    vecs = _normalize_columns(eigvecs.real.copy())
    vals, vecs = _order_by_last_row(vals, vecs)
    return vals, vecs, complex_mag


def _clip_unit(
    arr: np.ndarray, tol: float, what: str, upper: float | None = None
) -> tuple[np.ndarray, float]:
    low = float(arr.min())
    if low < -tol:
        raise IdentificationError(
            f"{what} has entry {low:.3e} below -tol; identification rejected"
        )
    if upper is not None and float(arr.max()) > upper + tol:
        raise IdentificationError(
            f"{what} has entry {float(arr.max()):.3e} above {upper} + tol"
        )
    clipped = float(np.abs(np.minimum(arr, 0.0)).sum())
    out = np.clip(arr, 0.0, upper)
    if upper is not None:
        clipped += float(np.maximum(arr - upper, 0.0).sum())
    return out, clipped


def eigendecompose_identify(
    pmf: JointPmf, tol: float = 1e-8
) -> tuple[MisclassificationModel, IdentificationDiagnostics]:
    """Recover the misclassification model from a (population-grade) pmf.

    Pipeline: rank gate on M_xz; eigendecomposition of the y=1 branch
    operator; column normalization and monotone-reporting ordering; latent
    marginal and Z matrix by linear solves; cross-validation against an
    independent decomposition of the y=0 branch (eigenvalues must complement
    to 1, eigenvectors must match).

    ``tol`` gates the rank check, the complex-part rejection, the minimum
    eigenvalue gap, and negative-entry clipping. Diagnostic-grade output:
    prefer the likelihood estimator for finite-sample work.
    """
    if float(pmf.probs.sum()) <= 0:
        raise DomainError("all-zero pmf")
    m_xz, m_per_y = build_matrices(pmf)
    diag = check_rank(m_xz, tol=tol)
    if not diag.rank_ok:
        raise IdentificationError(
            f"observable matrix fails the rank gate (min singular value "
            f"{diag.min_singular_value:.3e}); cannot invert",
            diagnostics=diag,
        )

    # Branch operators: solve on the right against M_xz (LU, no explicit inverse).
    def right_solve(m_y: np.ndarray) -> np.ndarray:
        return linalg.solve(m_xz.T, m_y.T).T

    a1 = right_solve(m_per_y[1])
    vals1, vecs1, cmag1 = _decompose_branch(a1, tol)

    gap = float(np.min(np.abs(np.subtract.outer(vals1, vals1))
                       [~np.eye(vals1.size, dtype=bool)])) if vals1.size > 1 else np.inf
    if gap < tol:
        raise IdentificationError(
            f"eigenvalue gap {gap:.3e} below tol; the auxiliary indicator "
            "does not separate the latent states",
            diagnostics=replace(diag, eigenvalue_gap=gap, complex_discarded=cmag1),
        )

    # Cross-validate on the y=0 branch: an independent decomposition must give
    # the complementary eigenvalues and the same ordered eigenvectors.
    a0 = right_solve(m_per_y[0])
    vals0, vecs0, cmag0 = _decompose_branch(a0, tol)
    # Both branches share the last-row ordering, so the comparison is slotwise.
    y_dev = max(
        float(np.abs((1.0 - vals0) - vals1).max()),
        float(np.abs(vecs0 - vecs1).max()),
    )
    if y_dev > max(100 * tol, 1e-6):
        raise IdentificationError(
            f"y-branch cross-check deviates by {y_dev:.3e}; the two auxiliary "
            "branches disagree about the latent structure",
            diagnostics=replace(diag, eigenvalue_gap=gap, y_branch_max_dev=y_dev),
        )

    m_x, clip_x = _clip_unit(vecs1, tol, "reporting matrix")
    m_x = m_x / m_x.sum(axis=0)
    f_y, clip_y = _clip_unit(vals1, tol, "P(Y=1 | latent)", upper=1.0)

    f_x = pmf.probs.sum(axis=(1, 2))
    f_xstar = linalg.solve(m_x, f_x)
    f_xstar, clip_s = _clip_unit(f_xstar, max(tol, 1e-7), "latent marginal")
    total = f_xstar.sum()
    if total <= 0:
        raise IdentificationError("latent marginal sums to zero after clipping")
    f_xstar = f_xstar / total

    # Z matrix from the marginal system: M_xz = M_x diag(f_xstar) M_z^T.
    if np.any(f_xstar < 1e-12):
        raise IdentificationError("a latent state has (near) zero mass")
    m_z_t = linalg.solve(m_x, m_xz) / f_xstar[:, None]
    m_z, clip_z = _clip_unit(m_z_t.T, max(tol, 1e-7), "second-measure matrix")
    m_z = m_z / m_z.sum(axis=0)

    model = MisclassificationModel(
        m_x_given_xstar=m_x,
        f_y_given_xstar=f_y,
        m_z_given_xstar=m_z,
        f_xstar=f_xstar,
    )
    diag = replace(
        diag,
        eigenvalue_gap=gap,
        complex_discarded=max(cmag1, cmag0),
        ord_satisfied=model.ord_satisfied,
        clipped_mass=clip_x + clip_y + clip_s + clip_z,
        y_branch_max_dev=y_dev,
    )
    return model, diag


def population_pmf(model: MisclassificationModel) -> JointPmf:
    """Exact joint (x, y, z) pmf implied by a model (law of total probability)."""
    b = np.stack([1.0 - model.f_y_given_xstar, model.f_y_given_xstar])
    probs = np.einsum(
        "xs,ys,zs,s->xyz",
        model.m_x_given_xstar,
        b,
        model.m_z_given_xstar,
        model.f_xstar,
    )
    total = float(probs.sum())
    return JointPmf(probs=probs / total, support=(model.s_x, 2, model.s_z))
