"""Blocked Gibbs sampler for the clustered distance-decay exposure model.

Each subject i carries a cluster label; cluster k owns a curve f_k whose
spline coefficients live in the independent (whitened-penalty) coordinates.
The observation model for row j of subject i is

    y_ij = x_ij' gamma + sum_d f_{k(i)}(d) + z_ij' b_i + eps_ij,

with eps ~ N(0, sigma2 / w_ij) and a truncated stick-breaking prior over
labels.  Every full conditional is conjugate, so one sweep updates labels,
sticks and the concentration, the joint (gamma, curve coefficients) block,
smoothing precisions, the residual variance, random effects, and their
covariance, in that order.
"""

import hashlib
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.linalg import solve_triangular
from scipy.stats import invwishart

from stapdp.basis import PenaltyDecomposition, SplineBasis, build_basis, difference_penalty, exposure_matrix

# floors keeping log(pi) and 1/tau finite
_WEIGHT_FLOOR = 1e-300
_POSITIVE_FLOOR = 1e-300


class NumericalError(RuntimeError):
    """A conditional update could not be computed at the current state."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})


@dataclass(frozen=True)
class PriorConfig:
    """Hyperparameters of the conjugate priors."""

    a_tau: float = 1.0
    b_tau: float = 1.0
    a_sigma: float = 1.0
    b_sigma: float = 1.0
    a_alpha: float = 1.0
    b_alpha: float = 1.0
    n_clusters: int = 50
    gamma_prior_variance: float | None = None  # None: 1e6 * var(y)
    re_prior: str = "jeffreys"  # or "inverse_wishart"

    def __post_init__(self):
        for name in ("a_tau", "b_tau", "a_sigma", "b_sigma", "a_alpha", "b_alpha"):
            val = getattr(self, name)
            if not np.isfinite(val) or val <= 0:
                raise ValueError(f"{name} must be positive, got {val}")
        if self.n_clusters < 1:
            raise ValueError(f"n_clusters must be >= 1, got {self.n_clusters}")
        if self.gamma_prior_variance is not None and self.gamma_prior_variance <= 0:
            raise ValueError("gamma_prior_variance must be positive when given")
        if self.re_prior not in ("jeffreys", "inverse_wishart"):
            raise ValueError(f"re_prior must be 'jeffreys' or 'inverse_wishart', got {self.re_prior!r}")


@dataclass(frozen=True)
class SamplerConfig:
    """Run-length and scheduling settings."""

    burnin: int = 2000
    draws: int = 2000
    thin: int = 1
    chains: int = 1
    min_members: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.burnin < 0 or self.draws < 0:
            raise ValueError("burnin and draws must be nonnegative")
        if self.thin < 1:
            raise ValueError(f"thin must be >= 1, got {self.thin}")
        if self.chains < 1:
            raise ValueError(f"chains must be >= 1, got {self.chains}")
        if self.min_members < 0:
            raise ValueError("min_members must be nonnegative")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")


@dataclass
class ModelState:
    """Current values of every model unknown.

    ``beta`` is stored in the independent penalty coordinates, one row per
    cluster; ``tau`` holds the (range, null) smoothing precisions per
    cluster; ``re`` is the per-subject random-effect matrix.
    """

    labels: np.ndarray  # (N,) int, values in [0, K)
    beta: np.ndarray  # (K, L)
    tau: np.ndarray  # (K, 2)
    gamma: np.ndarray  # (p,)
    sigma2: float
    sticks: np.ndarray  # (K,), last entry 1
    weights: np.ndarray  # (K,), sums to 1
    alpha: float
    re: np.ndarray  # (N, q)
    re_cov: np.ndarray  # (q, q)


@dataclass(frozen=True)
class SamplerContext:
    """Immutable precomputations shared by every update."""

    prior: PriorConfig
    decomp: PenaltyDecomposition
    phi: np.ndarray  # (n_rows, L) exposure rows in independent coordinates
    X: np.ndarray
    Z: np.ndarray
    y: np.ndarray
    w: np.ndarray
    row_subject: np.ndarray
    starts: np.ndarray  # per-subject row block bounds
    ends: np.ndarray
    XtWX: np.ndarray
    gamma_var: float
    min_members: int = 0
    shared_columns: tuple = ()  # (fixed col, random col) pairs with equal design

    @property
    def n_rows(self):
        return self.y.shape[0]

    @property
    def n_subjects(self):
        return self.starts.shape[0]

    @property
    def n_clusters(self):
        return self.prior.n_clusters

    @property
    def n_coef(self):
        return self.phi.shape[1]

    @property
    def rank(self):
        return self.decomp.rank

    @property
    def p(self):
        return self.X.shape[1]

    @property
    def q(self):
        return self.Z.shape[1]


def build_context(dataset, basis: SplineBasis, decomp: PenaltyDecomposition,
                  prior: PriorConfig, min_members: int = 0) -> SamplerContext:
    """Precompute design pieces for a dataset under a basis and prior."""
    raw = exposure_matrix(basis, dataset.distances) if dataset.n_rows \
        else np.zeros((0, basis.n_basis))
    phi = raw @ decomp.inverse
    starts, ends = dataset.row_bounds()
    WX = dataset.X * dataset.w[:, None]
    if prior.gamma_prior_variance is not None:
        gamma_var = float(prior.gamma_prior_variance)
    else:
        spread = float(np.var(dataset.y)) if dataset.n_rows > 1 else 0.0
        gamma_var = 1e6 * (spread if spread > 0 else 1.0)
    shared = tuple(
        (c, j)
        for c in range(dataset.X.shape[1])
        for j in range(dataset.Z.shape[1])
        if dataset.n_rows and np.array_equal(dataset.X[:, c], dataset.Z[:, j])
    )
    return SamplerContext(
        prior=prior,
        decomp=decomp,
        phi=phi,
        X=dataset.X,
        Z=dataset.Z,
        y=dataset.y,
        w=dataset.w,
        row_subject=dataset.row_subject,
        starts=starts,
        ends=ends,
        XtWX=dataset.X.T @ WX,
        gamma_var=gamma_var,
        min_members=int(min_members),
        shared_columns=shared,
    )


def _segment_sums(values: np.ndarray, starts: np.ndarray, ends: np.ndarray) -> np.ndarray:
    """Sum rows of ``values`` over [starts[i], ends[i]); empty segments give 0."""
    pad = np.zeros((1,) + values.shape[1:])
    csum = np.concatenate([pad, np.cumsum(values, axis=0)], axis=0)
    return csum[ends] - csum[starts]


def _tau_diag(tau: np.ndarray, rank: int, n_coef: int) -> np.ndarray:
    """Expand per-cluster (range, null) precisions to one value per coordinate."""
    return np.repeat(tau, [rank, n_coef - rank], axis=-1)


def _stick_weights(sticks: np.ndarray) -> np.ndarray:
    """Cluster weights from stick fractions; the last weight absorbs the remainder."""
    K = sticks.shape[0]
    w = np.empty(K)
    w[0] = sticks[0]
    if K > 1:
        w[1:] = sticks[1:] * np.cumprod(1.0 - sticks[:-1])
    w[-1] = 1.0 - w[:-1].sum()
    if w[-1] < 0.0:  # float crumbs only; the exact remainder is nonnegative
        w[-1] = 0.0
        w /= w.sum()
    return w


def _beta_prior_draws(rng, tau: np.ndarray, sigma2: float, rank: int, n_coef: int) -> np.ndarray:
    """Independent-coordinate prior draws, one row per row of ``tau``."""
    sd = np.sqrt(sigma2 / _tau_diag(np.atleast_2d(tau), rank, n_coef))
    return rng.standard_normal(sd.shape) * sd


def _re_rows(state: ModelState, ctx: SamplerContext) -> np.ndarray:
    if ctx.q == 0 or ctx.n_rows == 0:
        return np.zeros(ctx.n_rows)
    return np.einsum("ij,ij->i", ctx.Z, state.re[ctx.row_subject])


def _exposure_rows(state: ModelState, ctx: SamplerContext) -> np.ndarray:
    if ctx.n_rows == 0:
        return np.zeros(0)
    return np.einsum("ij,ij->i", ctx.phi, state.beta[state.labels[ctx.row_subject]])


def init_state(ctx: SamplerContext, rng: np.random.Generator) -> ModelState:
    """Starting state for one chain.

    Precisions and the concentration start at their prior means and the
    residual variance at a least-squares estimate from the fixed effects,
    so the first sweeps see candidate curves on the scale of the data
    rather than a draw from the far tail of the prior.  Cluster curves
    start as unit-scale noise, labels spread uniformly over the
    truncation level, and random effects at zero.
    """
    prior, K, L = ctx.prior, ctx.n_clusters, ctx.n_coef
    alpha = prior.a_alpha / prior.b_alpha
    if ctx.n_rows > ctx.p:
        coef, *_ = np.linalg.lstsq(ctx.X, ctx.y, rcond=None)
        resid = ctx.y - ctx.X @ coef
        sigma2 = float(resid @ resid) / (ctx.n_rows - ctx.p)
    else:
        sigma2 = 1.0 / max(rng.gamma(prior.a_sigma, 1.0 / prior.b_sigma), _POSITIVE_FLOOR)
    sigma2 = max(sigma2, _POSITIVE_FLOOR)
    tau = np.full((K, 2), prior.a_tau / prior.b_tau)
    beta = rng.standard_normal((K, L))
    sticks = np.ones(K)
    if K > 1:
        sticks[:-1] = rng.beta(1.0, alpha, size=K - 1)
    weights = _stick_weights(sticks)
    labels = rng.integers(0, K, size=ctx.n_subjects)
    return ModelState(
        labels=labels,
        beta=beta,
        tau=tau,
        gamma=np.zeros(ctx.p),
        sigma2=sigma2,
        sticks=sticks,
        weights=weights,
        alpha=alpha,
        re=np.zeros((ctx.n_subjects, ctx.q)),
        re_cov=np.eye(ctx.q),
    )


def label_probabilities(state: ModelState, ctx: SamplerContext) -> np.ndarray:
    """Full-conditional label distribution per subject, shape (N, K).

    Computed in log space with per-subject max subtraction.  A subject
    whose rows carry no exposure signal gets exactly the stick weights.
    """
    if ctx.n_rows:
        means = ctx.phi @ state.beta.T  # (n_rows, K)
        base = ctx.y - ctx.X @ state.gamma - _re_rows(state, ctx)
        dev = base[:, None] - means
        row_ll = (-0.5 / state.sigma2) * (ctx.w[:, None] * dev * dev)
        subj_ll = _segment_sums(row_ll, ctx.starts, ctx.ends)
    else:
        subj_ll = np.zeros((ctx.n_subjects, ctx.n_clusters))
    with np.errstate(divide="ignore"):
        log_w = np.where(state.weights < _WEIGHT_FLOOR, -np.inf,
                         np.log(np.maximum(state.weights, _WEIGHT_FLOOR)))
    logp = subj_ll + log_w[None, :]
    logp -= logp.max(axis=1, keepdims=True)
    mass = np.exp(logp)
    total = mass.sum(axis=1)
    bad = ~np.isfinite(total) | (total <= 0.0)
    if bad.any():
        idx = np.flatnonzero(bad)[:10]
        raise NumericalError(
            f"label mass vanished for {int(bad.sum())} subject(s)",
            diagnostics={"subjects": idx.tolist(), "sigma2": state.sigma2,
                         "max_abs_beta": float(np.abs(state.beta).max(initial=0.0))},
        )
    return mass / total[:, None]


def update_labels(state: ModelState, ctx: SamplerContext, rng) -> None:
    probs = label_probabilities(state, ctx)
    u = rng.random(ctx.n_subjects)
    cum = np.cumsum(probs, axis=1)
    state.labels = np.minimum((cum < u[:, None]).sum(axis=1), ctx.n_clusters - 1)


def permute_cluster_indices(state: ModelState, ctx: SamplerContext, rng) -> None:
    """Metropolis swaps of adjacent cluster indices.

    The truncated stick-breaking prior ties weight to index position, so
    each chain would otherwise freeze its occupied clusters at whatever
    indices burn-in happened to visit, and the concentration (whose
    conditional depends on those positions through the stick tails) would
    never mix across chains.  A swap moves a cluster's members, curve,
    precisions, and stick fraction together; because the stick prior is
    exchangeable while the weights it induces are not, the acceptance
    ratio reduces to (1 - v_{k+1})^{n_k} / (1 - v_k)^{n_{k+1}}.  The scan
    runs from the tail toward the front so a cluster stranded at a high
    index can migrate across the whole vector in one sweep.  The pinned
    last stick never takes part.
    """
    K = ctx.n_clusters
    if K < 3:
        return
    counts = np.bincount(state.labels, minlength=K).astype(np.int64)
    sticks = state.sticks
    perm = np.arange(K)
    log_u = np.log(rng.random(K - 2))
    moved = False
    for k in range(K - 3, -1, -1):
        n_lo, n_hi = counts[k], counts[k + 1]
        v_lo, v_hi = sticks[k], sticks[k + 1]
        if (n_lo and v_hi >= 1.0) or (n_hi and v_lo >= 1.0):
            continue
        log_ratio = 0.0
        if n_lo:
            log_ratio += n_lo * np.log1p(-v_hi)
        if n_hi:
            log_ratio -= n_hi * np.log1p(-v_lo)
        if log_u[k] >= log_ratio:
            continue
        perm[[k, k + 1]] = perm[[k + 1, k]]
        counts[[k, k + 1]] = counts[[k + 1, k]]
        sticks[[k, k + 1]] = sticks[[k + 1, k]]
        moved = True
    if not moved:
        return
    state.beta = state.beta[perm]
    state.tau = state.tau[perm]
    state.weights = _stick_weights(sticks)
    inverse = np.empty(K, dtype=np.int64)
    inverse[perm] = np.arange(K)
    state.labels = inverse[state.labels]


def update_sticks_and_alpha(state: ModelState, ctx: SamplerContext, rng) -> None:
    """Stick fractions, cluster weights, and the concentration parameter.

    Each stick Beta draw is built from its two-Gamma representation so that
    log(1 - v) feeding the concentration update is computed exactly even
    when v is within rounding distance of 1; a stick that is numerically 1
    still contributes a finite, correctly signed log term.
    """
    prior, K = ctx.prior, ctx.n_clusters
    counts = np.bincount(state.labels, minlength=K) if ctx.n_subjects \
        else np.zeros(K, dtype=int)
    after = counts[::-1].cumsum()[::-1] - counts  # members in later clusters
    sticks = np.ones(K)
    log_remainder = 0.0
    if K > 1:
        g1 = rng.gamma(1.0 + counts[:-1].astype(float))
        g2 = np.maximum(rng.gamma(state.alpha + after[:-1].astype(float)), 1e-308)
        total = g1 + g2
        sticks[:-1] = g1 / total
        log_remainder = float((np.log(g2) - np.log(total)).sum())
    state.sticks = sticks
    state.weights = _stick_weights(sticks)
    rate = prior.b_alpha - log_remainder
    state.alpha = max(rng.gamma(prior.a_alpha + K - 1, 1.0 / rate), _POSITIVE_FLOOR)


def coefficient_conditional(state: ModelState, ctx: SamplerContext):
    """Assemble the joint Gaussian conditional of (gamma, included cluster curves).

    Returns (mean, precision, included) where ``included`` lists the
    clusters taking part in the joint draw; the precision is ordered gamma
    block first, then one coefficient block per included cluster.  Because
    clusters partition the rows, the cross-cluster precision blocks vanish
    and only gamma couples to every block.
    """
    prior, K, L, p = ctx.prior, ctx.n_clusters, ctx.n_coef, ctx.p
    counts = np.bincount(state.labels, minlength=K) if ctx.n_subjects else np.zeros(K, dtype=int)
    included = np.flatnonzero((counts > 0) & (counts >= ctx.min_members))
    dim = p + L * included.size
    A = np.zeros((dim, dim))
    rhs = np.zeros(dim)
    s2 = state.sigma2
    u = ctx.y - _re_rows(state, ctx)
    A[:p, :p] = ctx.XtWX / s2 + np.eye(p) / ctx.gamma_var
    rhs[:p] = ctx.X.T @ (ctx.w * u) / s2

    if included.size:
        row_label = state.labels[ctx.row_subject]
        order = np.argsort(row_label, kind="stable")
        sorted_label = row_label[order]
        lo = np.searchsorted(sorted_label, included, side="left")
        hi = np.searchsorted(sorted_label, included, side="right")
        for j, k in enumerate(included):
            rows = order[lo[j]:hi[j]]
            phi_k = ctx.phi[rows]
            wphi = phi_k * ctx.w[rows, None]
            blk = slice(p + j * L, p + (j + 1) * L)
            A[blk, blk] = (wphi.T @ phi_k + np.diag(_tau_diag(state.tau[k], ctx.rank, L))) / s2
            cross = (ctx.X[rows] * ctx.w[rows, None]).T @ phi_k / s2
            A[:p, blk] = cross
            A[blk, :p] = cross.T
            rhs[blk] = wphi.T @ u[rows] / s2

    try:
        chol = np.linalg.cholesky(A)
    except np.linalg.LinAlgError as err:
        raise NumericalError(
            "joint coefficient precision is not positive definite",
            diagnostics={"dim": dim, "sigma2": s2,
                         "included": included.tolist()},
        ) from err
    half = solve_triangular(chol, rhs, lower=True)
    mean = solve_triangular(chol.T, half, lower=False)
    return mean, chol, included


def update_coefficients(state: ModelState, ctx: SamplerContext, rng) -> None:
    """Joint draw of gamma and all included cluster curves; others refresh from the prior."""
    mean, chol, included = coefficient_conditional(state, ctx)
    p, L = ctx.p, ctx.n_coef
    noise = solve_triangular(chol.T, rng.standard_normal(mean.shape[0]), lower=False) \
        if mean.shape[0] else np.zeros(0)
    draw = mean + noise
    state.gamma = draw[:p]
    for j, k in enumerate(included):
        state.beta[k] = draw[p + j * L: p + (j + 1) * L]
    rest = np.setdiff1d(np.arange(ctx.n_clusters), included, assume_unique=True)
    if rest.size:
        state.beta[rest] = _beta_prior_draws(rng, state.tau[rest], state.sigma2, ctx.rank, L)


def update_precisions(state: ModelState, ctx: SamplerContext, rng) -> None:
    """Per-cluster smoothing precisions; unoccupied clusters refresh from the prior."""
    prior, L, r = ctx.prior, ctx.n_coef, ctx.rank
    counts = np.bincount(state.labels, minlength=ctx.n_clusters) if ctx.n_subjects \
        else np.zeros(ctx.n_clusters, dtype=int)
    occ = counts > 0
    s2 = state.sigma2
    ss_range = (state.beta[:, :r] ** 2).sum(axis=1)
    ss_null = (state.beta[:, r:] ** 2).sum(axis=1)
    tau = np.empty_like(state.tau)
    tau[occ, 0] = rng.gamma(prior.a_tau + r / 2.0,
                            1.0 / (prior.b_tau + ss_range[occ] / (2.0 * s2)))
    tau[occ, 1] = rng.gamma(prior.a_tau + (L - r) / 2.0,
                            1.0 / (prior.b_tau + ss_null[occ] / (2.0 * s2)))
    n_free = int((~occ).sum())
    if n_free:
        tau[~occ] = rng.gamma(prior.a_tau, 1.0 / prior.b_tau, size=(n_free, 2))
    state.tau = np.maximum(tau, _POSITIVE_FLOOR)


def update_variance(state: ModelState, ctx: SamplerContext, rng) -> None:
    """Residual variance given everything else, including curve shrinkage terms."""
    prior, L = ctx.prior, ctx.n_coef
    resid = ctx.y - ctx.X @ state.gamma - _exposure_rows(state, ctx) - _re_rows(state, ctx)
    counts = np.bincount(state.labels, minlength=ctx.n_clusters) if ctx.n_subjects \
        else np.zeros(ctx.n_clusters, dtype=int)
    occ = counts > 0
    quad = float((_tau_diag(state.tau[occ], ctx.rank, L) * state.beta[occ] ** 2).sum())
    shape = prior.a_sigma + (ctx.n_rows + L * int(occ.sum())) / 2.0
    rate = prior.b_sigma + (float(ctx.w @ resid ** 2) + quad) / 2.0
    if not np.isfinite(rate) or rate <= 0:
        raise NumericalError("variance update rate is not positive and finite",
                             diagnostics={"rate": rate})
    state.sigma2 = 1.0 / max(rng.gamma(shape, 1.0 / rate), _POSITIVE_FLOOR)


def update_random_effects(state: ModelState, ctx: SamplerContext, rng) -> None:
    """Per-subject conjugate normal draw of the random effects."""
    q = ctx.q
    if q == 0:
        return
    N = ctx.n_subjects
    prec0 = np.linalg.inv(state.re_cov)
    if ctx.n_rows:
        resid = ctx.y - ctx.X @ state.gamma - _exposure_rows(state, ctx)
        WZ = ctx.Z * ctx.w[:, None]
        ztwz = _segment_sums(WZ[:, :, None] * ctx.Z[:, None, :], ctx.starts, ctx.ends)
        ztwr = _segment_sums(WZ * resid[:, None], ctx.starts, ctx.ends)
    else:
        ztwz = np.zeros((N, q, q))
        ztwr = np.zeros((N, q))
    prec = ztwz / state.sigma2 + prec0[None, :, :]
    try:
        chol = np.linalg.cholesky(prec)
    except np.linalg.LinAlgError as err:
        raise NumericalError("random-effect precision is not positive definite") from err
    mean = np.linalg.solve(prec, (ztwr / state.sigma2)[:, :, None])[:, :, 0]
    z = rng.standard_normal((N, q))
    noise = np.linalg.solve(np.swapaxes(chol, 1, 2), z[:, :, None])[:, :, 0]
    state.re = mean + noise


def update_recentering(state: ModelState, ctx: SamplerContext, rng) -> None:
    """Gibbs draw along flat directions shared by fixed and random effects.

    When a fixed-effect column equals a random-effect column (the usual
    case is a global intercept next to subject intercepts), shifting
    gamma_c by delta while lowering every b_j by delta leaves the
    likelihood untouched and only the priors identify the split.  The
    alternating conditional updates walk that ridge very slowly, so this
    draws the shift from its exact Gaussian conditional.
    """
    if not ctx.shared_columns or ctx.q == 0:
        return
    for c, j in ctx.shared_columns:
        prec_re = np.linalg.inv(state.re_cov)
        precision = 1.0 / ctx.gamma_var + ctx.n_subjects * prec_re[j, j]
        pull = state.re.sum(axis=0) @ prec_re[:, j] - state.gamma[c] / ctx.gamma_var
        delta = pull / precision + rng.standard_normal() / np.sqrt(precision)
        state.gamma[c] += delta
        state.re[:, j] -= delta


def update_re_covariance(state: ModelState, ctx: SamplerContext, rng) -> None:
    """Inverse-Wishart draw of the random-effect covariance."""
    q = ctx.q
    if q == 0:
        return
    N = ctx.n_subjects
    scatter = state.re.T @ state.re
    if ctx.prior.re_prior == "jeffreys":
        df = N
        scale = scatter
        ok = N >= q
        if ok:
            try:
                np.linalg.cholesky(scale)
            except np.linalg.LinAlgError:
                ok = False
        if not ok:
            raise NumericalError(
                "random-effect scatter is singular under the jeffreys prior; "
                "rerun with re_prior='inverse_wishart'",
                diagnostics={"n_subjects": N, "q": q},
            )
    else:
        df = q + 2 + N
        scale = np.eye(q) + scatter
    draw = invwishart.rvs(df=df, scale=scale, random_state=rng)
    state.re_cov = np.atleast_2d(draw)


def gibbs_sweep(state: ModelState, ctx: SamplerContext, rng) -> None:
    """One full sweep over every block, in a fixed order."""
    update_labels(state, ctx, rng)
    permute_cluster_indices(state, ctx, rng)
    update_sticks_and_alpha(state, ctx, rng)
    update_coefficients(state, ctx, rng)
    update_precisions(state, ctx, rng)
    update_variance(state, ctx, rng)
    update_random_effects(state, ctx, rng)
    update_recentering(state, ctx, rng)
    update_re_covariance(state, ctx, rng)


@dataclass
class ChainDraws:
    """Retained draws of one chain, stacked along the first axis."""

    labels: np.ndarray  # (M, N) int32
    beta: np.ndarray  # (M, K, L)
    tau: np.ndarray  # (M, K, 2)
    gamma: np.ndarray  # (M, p)
    sigma2: np.ndarray  # (M,)
    alpha: np.ndarray  # (M,)
    weights: np.ndarray  # (M, K)
    re: np.ndarray  # (M, N, q)
    re_cov: np.ndarray  # (M, q, q)

    @property
    def n_draws(self):
        return self.sigma2.shape[0]


@dataclass
class PosteriorDraws:
    """Draws from one or more chains plus the run's configuration snapshot."""

    chains: list
    seed: int
    config: dict
    subject_ids: tuple

    @property
    def n_chains(self):
        return len(self.chains)

    @property
    def draws_per_chain(self):
        return self.chains[0].n_draws if self.chains else 0

    def stacked(self, name: str) -> np.ndarray:
        """Concatenate one field over chains along the draw axis."""
        return np.concatenate([getattr(c, name) for c in self.chains], axis=0)

    def labels_matrix(self) -> np.ndarray:
        return self.stacked("labels")

    def n_occupied(self) -> np.ndarray:
        """Occupied-cluster count per draw, shape (n_chains, draws_per_chain)."""
        out = np.empty((self.n_chains, self.draws_per_chain), dtype=int)
        for c, chain in enumerate(self.chains):
            srt = np.sort(chain.labels, axis=1)
            if srt.shape[1] == 0:
                out[c] = 0
            else:
                out[c] = 1 + np.count_nonzero(np.diff(srt, axis=1), axis=1)
        return out

    def basis_pair(self):
        """Rebuild the (basis, decomposition) the run was fitted with."""
        spec = self.config["basis"]
        basis = build_basis(spec["degree"], spec["n_basis"], spec["radius"])
        decomp = difference_penalty(spec["n_basis"], spec["penalty_order"])
        return basis, decomp

    def save(self, path) -> None:
        save_draws(self, path)

    @classmethod
    def load(cls, path) -> "PosteriorDraws":
        return load_draws(path)


def config_digest(config: dict, seed: int) -> str:
    payload = json.dumps({"seed": seed, "config": config}, sort_keys=True,
                         separators=(",", ":"))
    return hashlib.sha256(payload.encode()).hexdigest()


def _config_snapshot(dataset, basis, decomp, prior, config) -> dict:
    return {
        "prior": asdict(prior),
        "sampler": asdict(config),
        "basis": {
            "degree": basis.degree,
            "n_basis": basis.n_basis,
            "radius": basis.radius,
            "penalty_order": decomp.order,
        },
        "data": {
            "n_subjects": dataset.n_subjects,
            "n_rows": dataset.n_rows,
            "p": dataset.p,
            "q": dataset.q,
            "x_names": list(dataset.x_names),
            "z_names": list(dataset.z_names),
            "radius": dataset.radius,
        },
    }


def run_single_chain(dataset, basis, decomp, prior: PriorConfig,
                     config: SamplerConfig, seed: int, chain_index: int = 0) -> ChainDraws:
    """Run one chain; the RNG stream is a pure function of (seed, chain_index)."""
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(chain_index,)))
    ctx = build_context(dataset, basis, decomp, prior, min_members=config.min_members)
    state = init_state(ctx, rng)
    M = config.draws
    K, L, N, p, q = ctx.n_clusters, ctx.n_coef, ctx.n_subjects, ctx.p, ctx.q
    out = ChainDraws(
        labels=np.empty((M, N), dtype=np.int32),
        beta=np.empty((M, K, L)),
        tau=np.empty((M, K, 2)),
        gamma=np.empty((M, p)),
        sigma2=np.empty(M),
        alpha=np.empty(M),
        weights=np.empty((M, K)),
        re=np.empty((M, N, q)),
        re_cov=np.empty((M, q, q)),
    )
    total = config.burnin + M * config.thin
    kept = 0
    for sweep in range(total):
        try:
            gibbs_sweep(state, ctx, rng)
        except NumericalError as err:
            raise NumericalError(
                f"sweep {sweep} (chain {chain_index}): {err}",
                diagnostics=err.diagnostics,
            ) from err
        offset = sweep - config.burnin
        if offset >= 0 and (offset + 1) % config.thin == 0:
            out.labels[kept] = state.labels
            out.beta[kept] = state.beta
            out.tau[kept] = state.tau
            out.gamma[kept] = state.gamma
            out.sigma2[kept] = state.sigma2
            out.alpha[kept] = state.alpha
            out.weights[kept] = state.weights
            out.re[kept] = state.re
            out.re_cov[kept] = state.re_cov
            kept += 1
    return out


def _chain_job(args):
    return run_single_chain(*args)


def run_chain(dataset, basis: SplineBasis, decomp: PenaltyDecomposition,
              prior: PriorConfig, config: SamplerConfig, seed: int) -> PosteriorDraws:
    """Run ``config.chains`` independent chains and collect their draws.

    Chains are dispatched to worker processes when ``config.workers`` allows;
    results are gathered in chain order, so the output is identical either way.
    """
    jobs = [(dataset, basis, decomp, prior, config, seed, c) for c in range(config.chains)]
    if config.workers > 1 and config.chains > 1:
        with ProcessPoolExecutor(max_workers=min(config.workers, config.chains)) as pool:
            chains = list(pool.map(_chain_job, jobs))
    else:
        chains = [_chain_job(job) for job in jobs]
    return PosteriorDraws(
        chains=chains,
        seed=seed,
        config=_config_snapshot(dataset, basis, decomp, prior, config),
        subject_ids=tuple(dataset.subject_ids),
    )


# ---------------------------------------------------------------------------
# persistence: one directory per run, one subdirectory of delimited files per
# chain, plus a manifest carrying the seed and configuration snapshot


def _frame(draws: np.ndarray, columns) -> pd.DataFrame:
    frame = pd.DataFrame(draws.reshape(draws.shape[0], -1), columns=columns)
    frame.insert(0, "draw", np.arange(draws.shape[0]))
    return frame


def _write(frame: pd.DataFrame, path: Path) -> None:
    frame.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")


def save_draws(draws: PosteriorDraws, path) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    K = draws.config["prior"]["n_clusters"]
    L = draws.config["basis"]["n_basis"]
    p = draws.config["data"]["p"]
    q = draws.config["data"]["q"]
    N = draws.config["data"]["n_subjects"]
    manifest = {
        "seed": draws.seed,
        "config": draws.config,
        "config_hash": config_digest(draws.config, draws.seed),
        "n_chains": draws.n_chains,
        "draws_per_chain": draws.draws_per_chain,
        "subject_ids": list(draws.subject_ids),
    }
    with open(root / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")
    for c, chain in enumerate(draws.chains):
        cdir = root / f"chain{c + 1:02d}"
        cdir.mkdir(exist_ok=True)
        scalars = pd.DataFrame({"draw": np.arange(chain.n_draws),
                                "sigma2": chain.sigma2, "alpha": chain.alpha})
        _write(scalars, cdir / "scalars.csv")
        _write(_frame(chain.labels, [f"s{i}" for i in range(N)]), cdir / "labels.csv")
        _write(_frame(chain.beta, [f"c{k}_b{l}" for k in range(K) for l in range(L)]),
               cdir / "beta.csv")
        _write(_frame(chain.tau, [f"c{k}_{z}" for k in range(K) for z in ("range", "null")]),
               cdir / "tau.csv")
        _write(_frame(chain.gamma, [f"g{j}" for j in range(p)]), cdir / "gamma.csv")
        _write(_frame(chain.weights, [f"c{k}" for k in range(K)]), cdir / "weights.csv")
        if q:
            _write(_frame(chain.re, [f"s{i}_z{j}" for i in range(N) for j in range(q)]),
                   cdir / "re.csv")
            _write(_frame(chain.re_cov, [f"z{i}_{j}" for i in range(q) for j in range(q)]),
                   cdir / "re_cov.csv")


def load_draws(path) -> PosteriorDraws:
    root = Path(path)
    with open(root / "manifest.json") as fh:
        manifest = json.load(fh)
    config = manifest["config"]
    K = config["prior"]["n_clusters"]
    L = config["basis"]["n_basis"]
    p = config["data"]["p"]
    q = config["data"]["q"]
    N = config["data"]["n_subjects"]
    chains = []
    for c in range(manifest["n_chains"]):
        cdir = root / f"chain{c + 1:02d}"
        scalars = pd.read_csv(cdir / "scalars.csv")
        M = len(scalars)

        def block(name, shape, dtype=float):
            frame = pd.read_csv(cdir / name)
            vals = frame.drop(columns="draw").to_numpy(dtype=dtype)
            return vals.reshape((M,) + shape)

        chains.append(ChainDraws(
            labels=block("labels.csv", (N,), np.int32),
            beta=block("beta.csv", (K, L)),
            tau=block("tau.csv", (K, 2)),
            gamma=block("gamma.csv", (p,)),
            sigma2=scalars["sigma2"].to_numpy(),
            alpha=scalars["alpha"].to_numpy(),
            weights=block("weights.csv", (K,)),
            re=block("re.csv", (N, q)) if q else np.zeros((M, N, 0)),
            re_cov=block("re_cov.csv", (q, q)) if q else np.zeros((M, 0, 0)),
        ))
    return PosteriorDraws(
        chains=chains,
        seed=manifest["seed"],
        config=config,
        subject_ids=tuple(manifest["subject_ids"]),
    )
