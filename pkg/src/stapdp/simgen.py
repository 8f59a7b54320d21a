"""Synthetic-data generators and the clustering benchmark studies.

Data are generated from a two-cluster truth: a strong decay curve and a
weak one that is nu times the strong curve, so (1 - nu) is the effect-size
gap.  Feature distances follow one of three laws (uniform, a mildly
center-weighted law, a strongly far-skewed law).  Two experiment drivers
fit the sampler across scenario grids and score every retained partition
against the truth by pairwise disagreement, reporting losses relative to
the worst loss seen in the whole batch.
"""

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
import pandas as pd

from stapdp.basis import build_basis, difference_penalty
from stapdp.data import Dataset, DistanceSet, build_dataset
from stapdp.partition import binder_losses
from stapdp.sampler import PriorConfig, SamplerConfig, run_single_chain

LAWS = ("uniform", "ca", "skew")

# Beta shapes behind the non-uniform distance laws; scaled to [0, radius].
# "ca" drifts mass mildly toward the middle distances, "skew" pushes it
# strongly toward the outer edge.  Both are package choices and overridable
# through gen_distances(shapes=...).
LAW_SHAPES = {"ca": (2.0, 2.5), "skew": (5.0, 2.0)}


@dataclass(frozen=True)
class TrueCurves:
    """The two generating curves: strong f(d) and weak nu * f(d)."""

    nu: float
    radius: float = 1.0

    def strong(self, d) -> np.ndarray:
        d = np.asarray(d, dtype=float)
        return np.exp(-((d / self.radius) / 0.5) ** 5)

    def weak(self, d) -> np.ndarray:
        return self.nu * self.strong(d)

    def curve(self, label: int, d) -> np.ndarray:
        return self.strong(d) if label == 0 else self.weak(d)


def smooth_decay(d, radius: float = 1.0) -> np.ndarray:
    """Cubic decay 1 at d=0 to 0 at d=radius with zero slope at both ends.

    A single cubic polynomial, so any cubic spline basis on [0, radius]
    represents it exactly and recovery checks against it carry no
    approximation bias.
    """
    u = np.clip(np.asarray(d, dtype=float) / radius, 0.0, 1.0)
    return (1.0 - u) ** 2 * (1.0 + 2.0 * u)


@dataclass(frozen=True)
class ScenarioConfig:
    """One data-generating cell of the simulation studies."""

    n_subjects: int = 200
    mean_count: int = 15
    nu: float = 0.25
    law_strong: str = "skew"
    law_weak: str = "skew"
    cluster_probs: tuple = (0.5, 0.5)
    sigma: float = 1.0
    radius: float = 1.0
    intercept: float = 26.0
    z_effect: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "cluster_probs", tuple(self.cluster_probs))
        if self.n_subjects < 1:
            raise ValueError("n_subjects must be >= 1")
        if self.mean_count < 0:
            raise ValueError("mean_count must be >= 0")
        if not 0.0 <= self.nu <= 1.0:
            raise ValueError(f"nu must lie in [0, 1], got {self.nu}")
        for law in (self.law_strong, self.law_weak):
            if law not in LAWS:
                raise ValueError(f"unknown distance law {law!r}; choose from {LAWS}")
        probs = np.asarray(self.cluster_probs, dtype=float)
        if probs.size != 2 or probs.min() < 0 or abs(probs.sum() - 1.0) > 1e-12:
            raise ValueError("cluster_probs must be two nonnegative values summing to 1")
        if self.sigma <= 0 or self.radius <= 0:
            raise ValueError("sigma and radius must be positive")

    @property
    def curves(self) -> TrueCurves:
        return TrueCurves(nu=self.nu, radius=self.radius)


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def gen_distances(law: str, count: int, seed, radius: float = 1.0,
                  shapes: dict | None = None) -> DistanceSet:
    """Draw ``count`` iid feature distances on [0, radius] under one law."""
    if count < 0:
        raise ValueError("count must be >= 0")
    rng = _rng(seed)
    if law == "uniform":
        vals = rng.uniform(0.0, radius, size=count)
    else:
        table = dict(LAW_SHAPES)
        table.update(shapes or {})
        if law not in table:
            raise ValueError(f"unknown distance law {law!r}")
        a, b = table[law]
        vals = radius * rng.beta(a, b, size=count)
    return DistanceSet(vals, radius)


def gen_feature_counts(mean_count: int, n: int, seed) -> np.ndarray:
    """Feature counts uniform on {mean-h, ..., mean+h} with h = min(10, mean)."""
    rng = _rng(seed)
    half = min(10, int(mean_count))
    return rng.integers(mean_count - half, mean_count + half + 1, size=n)


def gen_labels(scenario: ScenarioConfig, seed) -> np.ndarray:
    rng = _rng(seed)
    return (rng.random(scenario.n_subjects) >= scenario.cluster_probs[0]).astype(np.int64)


def gen_outcomes(scenario: ScenarioConfig, distances, labels, seed) -> Dataset:
    """Cross-sectional outcomes given each subject's distances and true label.

    y_i = intercept + z_effect * Z_i + sum_d f_{label_i}(d) + sigma * eps_i
    with Z fair Bernoulli and standard normal eps.  Subjects are numbered
    1..N with a single occasion each.
    """
    rng = _rng(seed)
    N = scenario.n_subjects
    if len(distances) != N or len(labels) != N:
        raise ValueError("need one distance set and one label per subject")
    curves = scenario.curves
    z = rng.integers(0, 2, size=N).astype(float)
    eps = rng.standard_normal(N)
    expo = np.array([
        float(curves.curve(int(lab), ds.values).sum()) if len(ds) else 0.0
        for ds, lab in zip(distances, labels)
    ])
    y = scenario.intercept + scenario.z_effect * z + expo + scenario.sigma * eps
    ids = np.arange(1, N + 1)
    dvals = {(int(i), 1): ds.values for i, ds in zip(ids, distances)}
    return build_dataset(
        subject_ids=ids.tolist(),
        occasions=[1] * N,
        y=y,
        X=np.column_stack([np.ones(N), z]),
        Z=np.zeros((N, 0)),
        w=np.ones(N),
        distance_values=dvals,
        radius=scenario.radius,
        x_names=("intercept", "z"),
        z_names=(),
    )


def gen_scenario(scenario: ScenarioConfig, seed) -> tuple:
    """Generate one dataset and its true labels; deterministic in the seed."""
    rng = _rng(seed)
    labels = gen_labels(scenario, rng)
    counts = gen_feature_counts(scenario.mean_count, scenario.n_subjects, rng)
    laws = (scenario.law_strong, scenario.law_weak)
    distances = [
        gen_distances(laws[int(lab)], int(c), rng, radius=scenario.radius)
        for lab, c in zip(labels, counts)
    ]
    dataset = gen_outcomes(scenario, distances, labels, rng)
    return dataset, labels


def gen_longitudinal(
    n_subjects: int = 300,
    n_occasions: int = 4,
    nu: float = 0.0,
    mean_count: int = 15,
    law: str = "uniform",
    sigma: float = 1.0,
    re_var: tuple = (1.0, 0.25),
    weight_range: tuple = (10, 50),
    radius: float = 1.0,
    intercept: float = 26.0,
    z_effect: float = 0.5,
    seed=0,
) -> tuple:
    """Grouped repeated-measures data with random intercept and slope.

    Each occasion gets its own distance set, so exposure varies within
    subject and stays identifiable next to the random intercept.  Rows
    carry integer weights: the residual variance is sigma^2 / w.  The
    random-effect design per row is (1, t) for occasion t = 0, ...,
    n_occasions - 1.  The strong cluster follows smooth_decay and the
    weak cluster nu times it, so a cubic basis reproduces the truth
    exactly.  Returns (dataset, truth) where truth records labels,
    sigma2, the random-effect variances, and the fixed effects.
    """
    rng = _rng(seed)
    scenario = ScenarioConfig(
        n_subjects=n_subjects, mean_count=mean_count, nu=nu,
        law_strong=law, law_weak=law, sigma=sigma, radius=radius,
        intercept=intercept, z_effect=z_effect,
    )
    labels = gen_labels(scenario, rng)
    scale = np.where(labels == 0, 1.0, nu)
    z_bin = rng.integers(0, 2, size=n_subjects).astype(float)
    sd = np.sqrt(np.asarray(re_var, dtype=float))
    b = rng.standard_normal((n_subjects, 2)) * sd

    ids, occs, ys, xs, zs, ws = [], [], [], [], [], []
    dvals = {}
    for i in range(n_subjects):
        sid = i + 1
        counts = gen_feature_counts(mean_count, n_occasions, rng)
        for t in range(n_occasions):
            dset = gen_distances(law, int(counts[t]), rng, radius=radius)
            expo = float(scale[i] * smooth_decay(dset.values, radius).sum()) if len(dset) else 0.0
            w = int(rng.integers(weight_range[0], weight_range[1] + 1))
            eps = rng.standard_normal() * sigma / np.sqrt(w)
            mean = (intercept + z_effect * z_bin[i] + expo
                    + b[i, 0] + b[i, 1] * t)
            ids.append(sid)
            occs.append(t)
            ys.append(mean + eps)
            xs.append((1.0, z_bin[i]))
            zs.append((1.0, float(t)))
            ws.append(w)
            dvals[(sid, t)] = dset.values
    dataset = build_dataset(
        subject_ids=ids, occasions=occs, y=ys, X=xs, Z=zs, w=ws,
        distance_values=dvals, radius=radius,
        x_names=("intercept", "z"), z_names=("re_intercept", "re_time"),
    )
    truth = {
        "labels": labels,
        "sigma2": sigma**2,
        "re_var": tuple(float(v) for v in re_var),
        "gamma": (intercept, z_effect),
        "b": b,
    }
    return dataset, truth


# ---------------------------------------------------------------------------
# experiment drivers


@dataclass(frozen=True)
class StudyConfig:
    """Grid, replication, and fit settings shared by the two studies."""

    n_subjects: int = 200
    replicates: int = 25
    seed: int = 0
    nus: tuple = (0.0, 0.25, 0.5, 0.75)
    mean_count: int = 15
    laws: tuple = LAWS
    counts: tuple = (5, 10, 15, 20, 25)
    nu_distance: float = 0.25
    radius: float = 1.0
    burnin: int = 2000
    draws: int = 2000
    n_clusters: int = 50
    n_basis: int = 7
    degree: int = 3
    penalty_order: int = 2
    workers: int = 1

    def __post_init__(self):
        object.__setattr__(self, "nus", tuple(self.nus))
        object.__setattr__(self, "laws", tuple(self.laws))
        object.__setattr__(self, "counts", tuple(self.counts))
        if self.replicates < 1:
            raise ValueError("replicates must be >= 1")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")


@dataclass(frozen=True)
class StudyResult:
    """Relative-loss table plus the normalizer that made it relative."""

    table: pd.DataFrame
    normalizer: float
    detail: pd.DataFrame  # same rows with the raw-loss summaries


def _fit_cell(task):
    """Generate, fit, and score one (cell, replicate); runs in a worker."""
    scenario, key, master_seed, cell_index, replicate, fit = task
    data_seq = np.random.SeedSequence(master_seed, spawn_key=(cell_index, replicate, 0))
    fit_seq = np.random.SeedSequence(master_seed, spawn_key=(cell_index, replicate, 1))
    dataset, truth = gen_scenario(scenario, np.random.default_rng(data_seq))
    basis = build_basis(fit["degree"], fit["n_basis"], scenario.radius)
    decomp = difference_penalty(fit["n_basis"], fit["penalty_order"])
    prior = PriorConfig(n_clusters=fit["n_clusters"])
    config = SamplerConfig(burnin=fit["burnin"], draws=fit["draws"], chains=1)
    try:
        chain = run_single_chain(dataset, basis, decomp, prior, config,
                                 int(fit_seq.generate_state(1)[0]), 0)
    except Exception as err:
        raise RuntimeError(f"fit failed for scenario {key!r} replicate {replicate}") from err
    losses = binder_losses(truth, chain.labels)
    return {
        **key,
        "replicate": replicate,
        "median_raw": float(np.median(losses)),
        "q025_raw": float(np.quantile(losses, 0.025)),
        "q975_raw": float(np.quantile(losses, 0.975)),
        "max_raw": int(losses.max()),
    }


def _run_cells(cells, config: StudyConfig, key_cols) -> StudyResult:
    fit = {
        "degree": config.degree,
        "n_basis": config.n_basis,
        "penalty_order": config.penalty_order,
        "n_clusters": config.n_clusters,
        "burnin": config.burnin,
        "draws": config.draws,
    }
    tasks = [
        (scenario, key, config.seed, cell_index, rep, fit)
        for cell_index, (scenario, key) in enumerate(cells)
        for rep in range(config.replicates)
    ]
    if config.workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            rows = list(pool.map(_fit_cell, tasks, chunksize=1))
    else:
        rows = [_fit_cell(t) for t in tasks]
    detail = pd.DataFrame(rows)
    normalizer = float(detail["max_raw"].max())
    scale = normalizer if normalizer > 0 else 1.0
    table = detail[key_cols + ["replicate"]].copy()
    table["median_loss"] = detail["median_raw"] / scale
    table["q025"] = detail["q025_raw"] / scale
    table["q975"] = detail["q975_raw"] / scale
    return StudyResult(table=table, normalizer=normalizer, detail=detail)


def run_effect_size_study(config: StudyConfig) -> StudyResult:
    """Loss versus effect-size gap: nu grid, far-skewed distances, one law.

    Output table columns: nu, replicate, median_loss, q025, q975 (losses
    relative to the worst raw loss in the batch).
    """
    cells = []
    for nu in config.nus:
        scenario = ScenarioConfig(
            n_subjects=config.n_subjects, mean_count=config.mean_count, nu=nu,
            law_strong="skew", law_weak="skew", radius=config.radius,
        )
        cells.append((scenario, {"nu": nu}))
    return _run_cells(cells, config, ["nu"])


def run_distance_study(config: StudyConfig) -> StudyResult:
    """Loss versus distance-law pair and feature count at a fixed nu.

    Output table columns: law_strong, law_weak, mean_count, replicate,
    median_loss, q025, q975.
    """
    cells = []
    for law_strong in config.laws:
        for law_weak in config.laws:
            for count in config.counts:
                scenario = ScenarioConfig(
                    n_subjects=config.n_subjects, mean_count=count,
                    nu=config.nu_distance, law_strong=law_strong,
                    law_weak=law_weak, radius=config.radius,
                )
                cells.append((scenario, {
                    "law_strong": law_strong,
                    "law_weak": law_weak,
                    "mean_count": count,
                }))
    return _run_cells(cells, config, ["law_strong", "law_weak", "mean_count"])


def aggregate_study(result: StudyResult, keys) -> pd.DataFrame:
    """Collapse replicates: median of per-replicate medians plus a 95% band."""
    grouped = result.table.groupby(list(keys), sort=True)["median_loss"]
    out = grouped.agg(
        median_loss="median",
        band_lo=lambda s: float(np.quantile(s, 0.025)),
        band_hi=lambda s: float(np.quantile(s, 0.975)),
    ).reset_index()
    return out
