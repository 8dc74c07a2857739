"""Synthetic-model generator and sampler for oracle-based testing.

Models are drawn to satisfy the identification conditions by construction
(full-rank observable matrix, separated P(Y=1 | latent) values, strictly
monotone last reporting row), with rejection resampling and a retry cap.
``draw`` then produces record-level datasets whose population pmf is known
exactly, which is what makes every estimator in this package testable
without survey data.

The ordered-probit helpers forward-generate exact cell probabilities from
(beta, per-cell scale, cutpoints), serving as the oracle for the parametric
layer's closed forms.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from .data import Dataset, w_cell_label
from .errors import ConfigurationError, GeneratorError
from .spectral import MisclassificationModel

__all__ = [
    "ProbitParams",
    "GeneratorSpec",
    "SyntheticSample",
    "make_model",
    "make_cell_weights",
    "draw",
    "probit_population",
    "random_probit_params",
]

RETRY_CAP = 1000

# Entry floor inside random stochastic columns, so generated models stay
# interior (boundary flags then indicate real degeneracy, not generator luck).
COLUMN_FLOOR = 0.12


@dataclass(frozen=True)
class ProbitParams:
    """Ordered-response parameters: coefficients over (1, W), per-cell scale,
    interior cutpoints with the first two pinned at 0 and 1."""

    beta: np.ndarray
    sigma_by_cell: np.ndarray
    cutpoints: np.ndarray

    def __post_init__(self):
        for name in ("beta", "sigma_by_cell", "cutpoints"):
            arr = np.ascontiguousarray(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        cuts = self.cutpoints
        if cuts.size < 2 or cuts[0] != 0.0 or cuts[1] != 1.0:
            raise ConfigurationError("cutpoints must start (0, 1)")
        if np.any(np.diff(cuts) <= 0):
            raise ConfigurationError("cutpoints must be strictly increasing")
        if np.any(self.sigma_by_cell <= 0):
            raise ConfigurationError("every cell scale must be positive")

    @property
    def n_levels(self) -> int:
        return self.cutpoints.size + 1


@dataclass(frozen=True)
class GeneratorSpec:
    """Controls for one synthetic draw of per-cell misclassification models."""

    s_x: int = 3
    s_z: int = 3
    n_w_cells: int = 1
    misclassification_strength: float = 0.5
    eigenvalue_separation: float = 0.1
    seed: int = 0
    probit_params: ProbitParams | None = None
    # Minimum increment between consecutive last-row reporting probabilities:
    # keeps the monotone-reporting ordering device effective at sample sizes
    # where near-ties would let estimators swap adjacent latent labels.
    ord_margin: float = 0.05
    # Reject candidates whose population observable matrix has a smaller
    # smallest singular value: the quantitative version of the full-rank
    # condition, controlling how much sampling noise inflates into
    # parameter noise.
    min_singular_value: float = 0.05
    # Weight pulling the second-measure matrix toward the identity: how
    # informative Z is about the latent state. Only the X channel is
    # strength-parameterized; Z is an instrument, not a misreport.
    z_mix: float = 0.6
    # Uniform mass mixed into random latent marginals, keeping every latent
    # state common enough to inform its own reporting columns.
    latent_uniform_mix: float = 0.45

    def __post_init__(self):
        if self.seed < 0:
            raise ConfigurationError("seed must be non-negative")
        if not 0.0 <= self.misclassification_strength <= 1.0:
            raise ConfigurationError("misclassification strength must be in [0,1]")
        if self.s_x < 2 or self.s_z < 2:
            raise ConfigurationError("supports must have at least 2 points")
        if self.n_w_cells < 1 or (self.n_w_cells & (self.n_w_cells - 1)):
            raise ConfigurationError("n_w_cells must be a power of two")
        if self.probit_params is not None:
            if self.probit_params.n_levels != self.s_x:
                raise ConfigurationError(
                    "probit cutpoints imply a different latent support size"
                )
            if self.probit_params.sigma_by_cell.size != self.n_w_cells:
                raise ConfigurationError("one scale per covariate cell required")

    @property
    def n_w_columns(self) -> int:
        return self.n_w_cells.bit_length() - 1


@dataclass(frozen=True)
class SyntheticSample:
    """A drawn dataset plus (opt-in) the hidden true latent codes.

    ``truth`` is never part of the Dataset, so no estimator can read it.
    """

    data: Dataset
    truth: np.ndarray | None = None


def _random_stochastic_columns(rng, rows: int, cols: int) -> np.ndarray:
    raw = rng.dirichlet(np.ones(rows), size=cols).T
    floored = COLUMN_FLOOR / rows + (1.0 - COLUMN_FLOOR) * raw
    return floored / floored.sum(axis=0)


def _separated_uniform(rng, k: int, lo: float, hi: float, gap: float) -> np.ndarray:
    """k sorted draws on [lo, hi] with consecutive gaps of at least ``gap``."""
    slack = (hi - lo) - (k - 1) * gap
    if slack <= 0:
        raise GeneratorError(
            f"cannot place {k} values in [{lo}, {hi}] with pairwise gap {gap}"
        )
    base = np.sort(rng.uniform(0.0, slack, size=k))
    return lo + base + gap * np.arange(k)


def _probit_cell_probs(params: ProbitParams, q_tilde: np.ndarray, cell: int) -> np.ndarray:
    index = float(q_tilde @ params.beta)
    sigma = float(params.sigma_by_cell[cell])
    edges = np.concatenate(([-np.inf], (params.cutpoints - index) / sigma, [np.inf]))
    cdf = norm.cdf(edges)
    return np.diff(cdf)


def _cell_q_tilde(cell: int, n_cols: int) -> np.ndarray:
    bits = [(cell >> k) & 1 for k in range(n_cols)]
    return np.asarray([1.0, *bits], dtype=float)


def make_model(spec: GeneratorSpec) -> list[MisclassificationModel]:
    """Draw one valid misclassification model per covariate cell.

    The reporting matrix mixes the identity with random stochastic columns
    at the requested strength (strength 0 returns the identity exactly, in
    which case the strict monotone-reporting check is vacuous). Candidate
    draws are rejected until P(Y=1 | latent) gaps meet the separation
    target, the last reporting row is strictly increasing, and the implied
    observable matrix is numerically full rank.
    """
    rng = np.random.default_rng(np.random.SeedSequence((spec.seed, 0x6D6F64)))
    s = spec.misclassification_strength
    models: list[MisclassificationModel] = []
    letters = tuple(chr(ord("A") + k) for k in range(spec.n_w_columns))
    for cell in range(spec.n_w_cells):
        for attempt in range(RETRY_CAP):
            if s == 0.0:
                m_x = np.eye(spec.s_x)
            else:
                m_x = (1.0 - s) * np.eye(spec.s_x) + s * _random_stochastic_columns(
                    rng, spec.s_x, spec.s_x
                )
                if np.any(np.diff(m_x[-1, :]) < spec.ord_margin):
                    continue
            f_y = _separated_uniform(
                rng, spec.s_x, 0.08, 0.92, spec.eigenvalue_separation
            )
            if rng.uniform() < 0.5:
                f_y = f_y[::-1].copy()
            m_z = spec.z_mix * np.eye(spec.s_z, spec.s_x) + (
                1.0 - spec.z_mix
            ) * _random_stochastic_columns(rng, spec.s_z, spec.s_x)
            m_z = m_z / m_z.sum(axis=0)
            if spec.probit_params is not None:
                f_xstar = _probit_cell_probs(
                    spec.probit_params, _cell_q_tilde(cell, spec.n_w_columns), cell
                )
            else:
                raw = rng.dirichlet(np.ones(spec.s_x))
                f_xstar = (
                    spec.latent_uniform_mix / spec.s_x
                    + (1.0 - spec.latent_uniform_mix) * raw
                )
                f_xstar = f_xstar / f_xstar.sum()
            m_xz = m_x @ np.diag(f_xstar) @ m_z.T
            svals = np.linalg.svd(m_xz, compute_uv=False)
            if svals[-1] <= spec.min_singular_value:
                continue
            models.append(
                MisclassificationModel(
                    m_x_given_xstar=m_x,
                    f_y_given_xstar=f_y,
                    m_z_given_xstar=m_z,
                    f_xstar=f_xstar,
                    w_cell=w_cell_label(cell, letters),
                )
            )
            break
        else:
            raise GeneratorError(
                f"no admissible model for cell {cell} in {RETRY_CAP} draws; "
                "try a smaller eigenvalue separation or singular-value target"
            )
    return models


def make_cell_weights(n_cells: int, seed: int | None = None) -> np.ndarray:
    """Covariate-cell weights: uniform, or mildly random when seeded."""
    if seed is None:
        return np.full(n_cells, 1.0 / n_cells)
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x776774)))
    raw = rng.dirichlet(np.full(n_cells, 8.0))
    return raw / raw.sum()


def draw(
    models: list[MisclassificationModel],
    cell_weights,
    n: int,
    seed: int,
    keep_truth: bool = False,
) -> SyntheticSample:
    """Sample n records from per-cell models.

    Each record draws its covariate cell from ``cell_weights``, a latent
    state from that cell's latent marginal, then (x, y, z) independently
    given the latent state; conditional independence holds by construction.
    """
    if n < 1:
        raise ConfigurationError("need at least one record")
    weights = np.asarray(cell_weights, dtype=float)
    if weights.size != len(models):
        raise ConfigurationError("one weight per cell model required")
    if abs(weights.sum() - 1.0) > 1e-9 or (weights < 0).any():
        raise ConfigurationError("cell weights must be a probability vector")
    n_cells = len(models)
    n_cols = max(n_cells - 1, 0).bit_length()
    s_x = models[0].s_x
    s_z = models[0].s_z

    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x647277)))
    w = rng.choice(n_cells, size=n, p=weights)
    xstar = np.empty(n, dtype=np.int64)
    x = np.empty(n, dtype=np.int64)
    y = np.empty(n, dtype=np.int64)
    z = np.empty(n, dtype=np.int64)

    def sample_codes(cdf_cols: np.ndarray, states: np.ndarray, u: np.ndarray):
        # cdf_cols[:, s] is the cdf of the code distribution given state s;
        # the final level is forced to 1 so cumsum slack cannot leak codes.
        cdf = cdf_cols.copy()
        cdf[-1, :] = 1.0
        picked = cdf[:, states]
        return 1 + (u[None, :] > picked).sum(axis=0)

    for cell, model in enumerate(models):
        mask = w == cell
        m = int(mask.sum())
        if m == 0:
            continue
        u_star = rng.uniform(size=m)
        cdf_star = np.cumsum(model.f_xstar)[:, None]
        cdf_star[-1, 0] = 1.0
        states = (u_star[None, :] > cdf_star).sum(axis=0)
        xstar[mask] = states + 1
        x[mask] = sample_codes(np.cumsum(model.m_x_given_xstar, axis=0), states,
                               rng.uniform(size=m))
        y[mask] = (rng.uniform(size=m) < model.f_y_given_xstar[states]).astype(np.int64)
        z[mask] = sample_codes(np.cumsum(model.m_z_given_xstar, axis=0), states,
                               rng.uniform(size=m))

    letters = tuple(chr(ord("A") + k) for k in range(n_cols))
    labels = tuple(w_cell_label(c, letters) for c in range(n_cells))
    data = Dataset(
        x=x,
        y=y,
        z=z,
        w=w.astype(np.int64),
        support=(s_x, 2, s_z),
        w_columns=tuple(f"w{k + 1}" for k in range(n_cols)),
        w_labels=labels,
    )
    return SyntheticSample(data=data, truth=xstar if keep_truth else None)


def probit_population(params: ProbitParams, cells: list[tuple[int, ...]],
                      weights=None):
    """Exact latent cell pmfs from the ordered-response formula (no sampling).

    Returns a LatentConditional over the given covariate-bit cells; weights
    default to uniform.
    """
    from .ordered import CellConditional, LatentConditional

    n_cells = len(cells)
    if n_cells == 0:
        raise ConfigurationError("need at least one covariate cell")
    if weights is None:
        weights = np.full(n_cells, 1.0 / n_cells)
    weights = np.asarray(weights, dtype=float)
    n_cols = len(cells[0])
    letters = tuple(chr(ord("A") + k) for k in range(n_cols))
    entries = []
    for idx, bits in enumerate(cells):
        q_tilde = np.asarray([1.0, *bits], dtype=float)
        probs = _probit_cell_probs(params, q_tilde, idx)
        label = w_cell_label(sum(b << k for k, b in enumerate(bits)), letters)
        entries.append(
            CellConditional(
                q_tilde=q_tilde, weight=float(weights[idx]), probs=probs, label=label
            )
        )
    return LatentConditional(cells=tuple(entries))


def all_binary_cells(n_cols: int) -> list[tuple[int, ...]]:
    """All 2^k covariate-bit vectors in little-endian cell order."""
    return [tuple((c >> k) & 1 for k in range(n_cols)) for c in range(2**n_cols)]


def random_probit_params(
    rng, n_covariates: int, n_levels: int = 3
) -> ProbitParams:
    """Draw ordered-probit parameters that keep every cell probability interior.

    Slopes and scales are bounded so that no cumulative probability comes
    near the inversion clamp, preserving exact closed-form round trips.
    """
    n_cells = 2**n_covariates
    beta = np.concatenate(
        ([rng.uniform(0.25, 0.75)], rng.uniform(-0.12, 0.12, size=n_covariates))
    )
    sigma = rng.uniform(0.6, 1.4, size=n_cells)
    if n_levels == 3:
        cuts = np.array([0.0, 1.0])
    else:
        extra = 1.0 + np.cumsum(rng.uniform(0.4, 0.8, size=n_levels - 3))
        cuts = np.concatenate(([0.0, 1.0], extra))
    return ProbitParams(beta=beta, sigma_by_cell=sigma, cutpoints=cuts)
