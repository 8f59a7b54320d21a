"""Convergence diagnostics on label-invariant functionals.

Cluster labels are not identified across draws, so mixing is judged on
functionals that do not depend on the labeling: the residual variance, the
concentration, the occupied-cluster count, fixed effects, and curve values
anchored at a subject (whatever cluster that subject sits in at each draw).
Each functional yields a chains-by-draws matrix fed to rank-normalized
split R-hat.
"""

import re
from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy.special import ndtri
from scipy.stats import rankdata


@dataclass(frozen=True)
class ChainMatrix:
    """Draws of one scalar functional, one row per chain."""

    name: str
    values: np.ndarray  # (n_chains, n_draws)

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.ndim != 2:
            raise ValueError(f"need a (chains, draws) matrix, got shape {vals.shape}")
        object.__setattr__(self, "values", vals)


@dataclass(frozen=True)
class RhatResult:
    value: float
    flag: str | None = None  # set when the input made R-hat meaningless


_CURVE_RE = re.compile(r"^curve\[(\d+)\]@(.+)$")
_GAMMA_RE = re.compile(r"^gamma\[(\d+)\]$")


def functional_traces(draws, spec: str) -> ChainMatrix:
    """Extract one functional across chains.

    Specs: ``sigma2``, ``alpha``, ``n_occupied``, ``gamma[j]``, and
    ``curve[i]@d`` for the curve value f(d) of whichever cluster subject i
    occupies at each draw.
    """
    C, M = draws.n_chains, draws.draws_per_chain
    if spec == "sigma2":
        vals = np.stack([c.sigma2 for c in draws.chains])
    elif spec == "alpha":
        vals = np.stack([c.alpha for c in draws.chains])
    elif spec == "n_occupied":
        vals = draws.n_occupied().astype(float)
    elif m := _GAMMA_RE.match(spec):
        j = int(m.group(1))
        vals = np.stack([c.gamma[:, j] for c in draws.chains])
    elif m := _CURVE_RE.match(spec):
        subject = int(m.group(1))
        d = float(m.group(2))
        basis, decomp = draws.basis_pair()
        row = basis.evaluate([d]) @ decomp.inverse  # (1, L)
        vals = np.empty((C, M))
        for c, chain in enumerate(draws.chains):
            k = chain.labels[:, subject]
            vals[c] = np.einsum("ml,l->m", chain.beta[np.arange(M), k], row[0])
    else:
        raise ValueError(f"unknown functional spec {spec!r}")
    return ChainMatrix(name=spec, values=vals)


def _rank_normalize(values: np.ndarray) -> np.ndarray:
    """Pooled average ranks pushed through the normal quantile function."""
    flat = rankdata(values, axis=None)
    S = values.size
    return ndtri((flat - 0.375) / (S + 0.25)).reshape(values.shape)


def split_rhat(matrix: ChainMatrix) -> RhatResult:
    """Rank-normalized split R-hat.

    Chains are split in half (doubling the chain count), pooled ranks are
    mapped to normal scores, and the classic between/within ratio is taken.
    Degenerate inputs are flagged: a constant functional reports 1.0, and
    chains that are exact copies of each other cannot show disagreement, so
    their value is reported with a flag rather than trusted.
    """
    x = matrix.values
    C, M = x.shape
    if M < 4:
        raise ValueError(f"need at least 4 draws per chain, got {M}")
    if np.all(x == x.flat[0]):
        return RhatResult(value=1.0, flag="constant")
    flag = None
    for a in range(C):
        for b in range(a + 1, C):
            if np.array_equal(x[a], x[b]):
                flag = "identical-chains"
                break
        if flag:
            break
    half = M // 2
    parts = np.concatenate([x[:, :half], x[:, M - half:]], axis=0)
    z = _rank_normalize(parts)
    n = half
    within = z.var(axis=1, ddof=1).mean()
    between = n * z.mean(axis=1).var(ddof=1)
    if within == 0.0:
        return RhatResult(value=np.inf, flag="zero-within-variance")
    var_plus = (n - 1) / n * within + between / n
    return RhatResult(value=float(np.sqrt(var_plus / within)), flag=flag)


def default_functionals(draws, n_anchors: int = 4, depths=(0.0, 0.5)) -> list:
    """Standard functional specs for a run: scalars, fixed effects, anchored curves.

    Anchor subjects are spread evenly over the subject index range; curve
    depths are fractions of the domain radius.
    """
    specs = ["sigma2", "alpha", "n_occupied"]
    specs += [f"gamma[{j}]" for j in range(draws.config["data"]["p"])]
    N = draws.config["data"]["n_subjects"]
    if N and draws.config["data"]["n_rows"]:
        radius = draws.config["basis"]["radius"]
        anchors = np.unique(np.linspace(0, N - 1, num=min(n_anchors, N)).astype(int))
        for i in anchors:
            for frac in depths:
                specs.append(f"curve[{i}]@{frac * radius:g}")
    return specs


def rhat_table(draws, specs=None) -> pd.DataFrame:
    """R-hat for each functional, as a small table."""
    if specs is None:
        specs = default_functionals(draws)
    rows = []
    for spec in specs:
        res = split_rhat(functional_traces(draws, spec))
        rows.append({"functional": spec, "rhat": res.value,
                     "flag": res.flag if res.flag else ""})
    return pd.DataFrame(rows)
