"""Bayesian autoregressive model with a Christmas spike covariate.

For each location l::

    z_t = sum_j alpha_j z_{t-j} + sum_j beta_j x_{t-j} + eps_t,   eps_t ~ N(0, s_eps_l^2)
    x_t = sum_j gamma_j x_{t-j} + nu_t,                            nu_t  ~ N(0, s_nu_l^2)

Coefficients are shared across locations with a common prior
``N(0, xi^2)``; ``xi`` and every scale have half-Cauchy priors. The
posterior is sampled by blocked Gibbs: the coefficient blocks are
conditionally Gaussian, and each half-Cauchy scale is written as an
inverse-gamma mixture so its conditional is inverse-gamma as well.
Scales are bounded below by ``scale_floor``, which keeps the posterior
proper when a series has no residual variation (for instance an all-zero
covariate).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import special, stats

from .core import LEVELS, SeriesKey, SignalKind, calendar_columns, ordinals
from .exceptions import ConvergenceError, InsufficientDataError
from .ingest import Dataset, TrainingFilter
from .transform import inverse_standardize

log = logging.getLogger(__name__)

RHAT_LIMIT = 1.1


def spike_covariate(offset) -> np.ndarray | int:
    """3 in Christmas week, 2 and 1 at one and two weeks away, else 0.

    Accepts Christmas offsets (scalar or array).
    """
    off = np.abs(np.asarray(offset))
    out = np.where(off <= 2, 3 - off, 0)
    return int(out) if out.ndim == 0 else out


def spike_of_ordinals(ords) -> np.ndarray:
    return spike_covariate(calendar_columns(np.asarray(ords))[2]).astype(float)


@dataclass(frozen=True)
class ArxConfig:
    order: int = 8
    num_chains: int = 4
    warmup_draws: int = 500
    posterior_draws: int = 500
    halfcauchy_scale: float = 1.0
    seed: int = 0
    scale_floor: float = 1e-4
    known_future_covariate: bool = False
    check_convergence: bool = True

    def __post_init__(self):
        if self.order < 1:
            raise ValueError("order must be >= 1")
        if self.num_chains < 1 or self.warmup_draws < 0 or self.posterior_draws < 1:
            raise ValueError("chain and draw counts must be positive")
        if self.halfcauchy_scale <= 0 or self.scale_floor <= 0:
            raise ValueError("scales must be positive")


@dataclass
class ArxHistory:
    """Last ``order`` values (oldest first) of z and x ending at week ``last_ordinal``."""

    z: np.ndarray
    x: np.ndarray
    last_ordinal: int


@dataclass
class ArxPosterior:
    """Pooled draws; per-location arrays follow ``locations`` order."""

    cfg: ArxConfig
    locations: list
    alpha: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray
    xi: np.ndarray
    sigma_eps: np.ndarray
    sigma_nu: np.ndarray
    histories: dict = field(default_factory=dict)
    report: pd.DataFrame | None = None

    @property
    def num_draws(self) -> int:
        return self.alpha.shape[0]

    def draws_frame(self) -> pd.DataFrame:
        """One column per scalar parameter."""
        cols = {}
        J = self.alpha.shape[1]
        for name, arr in (("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)):
            for j in range(J):
                cols[f"{name}[{j + 1}]"] = arr[:, j]
        cols["xi"] = self.xi
        for i, loc in enumerate(self.locations):
            cols[f"sigma_eps[{loc}]"] = self.sigma_eps[:, i]
            cols[f"sigma_nu[{loc}]"] = self.sigma_nu[:, i]
        return pd.DataFrame(cols)


# ------------------------------------------------------------ design

def _lag_design(v: np.ndarray, J: int) -> tuple[np.ndarray, np.ndarray]:
    """(targets, lag matrix) using rows where the target and all J lags exist."""
    T = v.size
    if T <= J:
        return np.empty(0), np.empty((0, J))
    lags = np.column_stack([v[J - j:T - j] for j in range(1, J + 1)])
    y = v[J:]
    return y, lags


@dataclass
class _SuffStats:
    DtD: np.ndarray
    Dty: np.ndarray
    yty: np.ndarray
    n: np.ndarray


def _suff(design_rows: list, J: int) -> _SuffStats:
    p = design_rows[0][1].shape[1] if design_rows else J
    L = len(design_rows)
    DtD = np.zeros((L, p, p))
    Dty = np.zeros((L, p))
    yty = np.zeros(L)
    n = np.zeros(L)
    for i, (y, D) in enumerate(design_rows):
        DtD[i] = D.T @ D
        Dty[i] = D.T @ y
        yty[i] = y @ y
        n[i] = y.size
    return _SuffStats(DtD, Dty, yty, n)


def _equations(z_by_loc: list, x_by_loc: list, J: int):
    zrows, xrows = [], []
    for z, x in zip(z_by_loc, x_by_loc):
        yz, Lz = _lag_design(z, J)
        _, Lx = _lag_design(x, J)
        D = np.hstack([Lz, Lx])
        ok = np.isfinite(yz) & np.all(np.isfinite(D), axis=1)
        zrows.append((yz[ok], D[ok]))
        yx, Lx2 = _lag_design(x, J)
        okx = np.isfinite(yx) & np.all(np.isfinite(Lx2), axis=1)
        xrows.append((yx[okx], Lx2[okx]))
    return _suff(zrows, J), _suff(xrows, J)


# ------------------------------------------------------------ conditionals

def _mvn_block(rng, stats_: _SuffStats, prec_scale: np.ndarray, prior_prec: float) -> np.ndarray:
    P = np.einsum("l,lij->ij", prec_scale, stats_.DtD) + prior_prec * np.eye(stats_.DtD.shape[1])
    b = np.einsum("l,li->i", prec_scale, stats_.Dty)
    C = np.linalg.cholesky(P)
    mean = np.linalg.solve(P, b)
    # solve C^T u = e gives u ~ N(0, P^-1)
    e = rng.standard_normal(P.shape[0])
    return mean + np.linalg.solve(C.T, e)


def _ssr(stats_: _SuffStats, theta: np.ndarray) -> np.ndarray:
    s = stats_.yty - 2 * stats_.Dty @ theta + np.einsum("i,lij,j->l", theta, stats_.DtD, theta)
    return np.maximum(s, 0.0)


def _truncated_precision(rng, shape, rate, tau_max) -> float:
    """Gamma(shape, rate) restricted to (0, tau_max]."""
    p_max = special.gammainc(shape, rate * tau_max)
    if p_max > 1e-10:
        u = rng.uniform(0.0, p_max)
        tau = special.gammaincinv(shape, u) / rate if rate > 0 else tau_max
        return float(min(max(tau, 1e-300), tau_max))
    # Mass sits at the upper end, where the log-density is concave and
    # increasing: propose tau_max - s with s exponential at the boundary slope.
    lam = (shape - 1.0) / tau_max - rate
    while True:
        s = rng.exponential(1.0 / lam)
        if s >= tau_max:
            continue
        tau = tau_max - s
        log_acc = (shape - 1.0) * np.log(tau / tau_max) + (rate + lam) * s
        if np.log(rng.uniform()) < log_acc:
            return float(tau)


def _sample_variances(rng, n, ssr, aux, floor) -> np.ndarray:
    """Scale-mixture conditional of s^2 given residuals, truncated to s >= floor."""
    shape = (n + 1.0) / 2.0
    rate = ssr / 2.0 + 1.0 / aux
    tau_max = 1.0 / floor ** 2
    tau = rng.gamma(shape, 1.0 / rate)
    for i in np.flatnonzero(tau > tau_max):
        tau[i] = _truncated_precision(rng, shape[i], rate[i], tau_max)
    return 1.0 / tau


def _sample_aux(rng, var, A) -> np.ndarray:
    # a | s^2 ~ InvGamma(1, 1/A^2 + 1/s^2)
    rate = 1.0 / A ** 2 + 1.0 / var
    return rate / rng.gamma(1.0, 1.0, size=np.shape(var))


def _run_chain(rng, zs: _SuffStats, xs: _SuffStats, cfg: ArxConfig, n_iter: int) -> dict:
    J = cfg.order
    L = zs.n.size
    A = cfg.halfcauchy_scale
    floor = cfg.scale_floor
    var_eps = np.exp(rng.normal(0, 0.5, L)) * 0.1
    var_nu = np.exp(rng.normal(0, 0.5, L)) * 0.1
    xi2 = float(np.exp(rng.normal(0, 0.5)))
    a_eps = np.ones(L)
    a_nu = np.ones(L)
    a_xi = 1.0
    out = {k: [] for k in ("alpha", "beta", "gamma", "xi", "sigma_eps", "sigma_nu")}
    for _ in range(n_iter):
        theta = _mvn_block(rng, zs, 1.0 / var_eps, 1.0 / xi2)
        gamma = _mvn_block(rng, xs, 1.0 / var_nu, 1.0 / xi2)
        var_eps = _sample_variances(rng, zs.n, _ssr(zs, theta), a_eps, floor)
        var_nu = _sample_variances(rng, xs.n, _ssr(xs, gamma), a_nu, floor)
        a_eps = _sample_aux(rng, var_eps, A)
        a_nu = _sample_aux(rng, var_nu, A)
        coef_ss = float(theta @ theta + gamma @ gamma)
        p = theta.size + gamma.size
        xi2 = float(_sample_variances(rng, np.array([float(p)]), np.array([coef_ss]),
                                      np.array([a_xi]), floor)[0])
        a_xi = float(_sample_aux(rng, np.array([xi2]), A)[0])
        out["alpha"].append(theta[:J])
        out["beta"].append(theta[J:])
        out["gamma"].append(gamma)
        out["xi"].append(np.sqrt(xi2))
        out["sigma_eps"].append(np.sqrt(var_eps))
        out["sigma_nu"].append(np.sqrt(var_nu))
    return {k: np.asarray(v) for k, v in out.items()}


# ------------------------------------------------------------ diagnostics

def _rhat_basic(chains: np.ndarray) -> float:
    m, n = chains.shape
    means = chains.mean(axis=1)
    W = chains.var(axis=1, ddof=1).mean()
    B = n * means.var(ddof=1)
    if W <= 0:
        return 1.0 if B <= 0 else np.inf
    var_plus = (n - 1) / n * W + B / n
    return float(np.sqrt(var_plus / W))


def _split(chains: np.ndarray) -> np.ndarray:
    n = chains.shape[1] // 2
    return np.vstack([chains[:, :n], chains[:, chains.shape[1] - n:]])


def _rank_normal(chains: np.ndarray) -> np.ndarray:
    r = stats.rankdata(chains, method="average").reshape(chains.shape)
    return special.ndtri((r - 0.375) / (chains.size + 0.25))


def split_rhat(chains) -> float:
    """Rank-normalized split R-hat (max of bulk and folded versions).

    ``chains`` has shape (chains, draws). Constant input gives 1.0.
    """
    chains = np.asarray(chains, dtype=float)
    if chains.shape[1] < 4:
        raise ValueError("need at least 4 draws per chain")
    if np.ptp(chains) == 0:
        return 1.0
    s = _split(chains)
    bulk = _rhat_basic(_rank_normal(s))
    folded = np.abs(s - np.median(s))
    tail = 1.0 if np.ptp(folded) == 0 else _rhat_basic(_rank_normal(folded))
    return float(max(bulk, tail))


def effective_sample_size(chains) -> float:
    """Bulk ESS from rank-normalized split chains (Geyer initial monotone sequence)."""
    chains = np.asarray(chains, dtype=float)
    if np.ptp(chains) == 0:
        return float(chains.size)
    s = _rank_normal(_split(chains))
    m, n = s.shape
    centered = s - s.mean(axis=1, keepdims=True)
    f = np.fft.rfft(centered, n=2 * n, axis=1)
    acov = np.fft.irfft(f * np.conj(f), axis=1)[:, :n] / n
    W = (acov[:, 0] * n / (n - 1)).mean()
    var_plus = W * (n - 1) / n + s.mean(axis=1).var(ddof=1)
    rho = 1.0 - (W - acov.mean(axis=0)) / var_plus
    rho[0] = 1.0
    pairs = rho[:-1:2] + rho[1::2] if n % 2 == 0 else rho[:-2:2] + rho[1:-1:2]
    tau_sum = 0.0
    prev = np.inf
    for p in pairs:
        if p <= 0:
            break
        p = min(p, prev)
        tau_sum += p
        prev = p
    tau = -1.0 + 2.0 * tau_sum
    return float(m * n / max(tau, 1.0 / np.log10(m * n)))


def convergence_report(chain_draws: list, locations: list) -> pd.DataFrame:
    """R-hat and ESS for every scalar parameter."""
    names, series = [], []
    J = chain_draws[0]["alpha"].shape[1]
    for name in ("alpha", "beta", "gamma"):
        for j in range(J):
            names.append(f"{name}[{j + 1}]")
            series.append(np.stack([c[name][:, j] for c in chain_draws]))
    names.append("xi")
    series.append(np.stack([c["xi"] for c in chain_draws]))
    for i, loc in enumerate(locations):
        for name in ("sigma_eps", "sigma_nu"):
            names.append(f"{name}[{loc}]")
            series.append(np.stack([c[name][:, i] for c in chain_draws]))
    return pd.DataFrame({
        "parameter": names,
        "mean": [float(s.mean()) for s in series],
        "rhat": [split_rhat(s) for s in series],
        "ess": [effective_sample_size(s) for s in series],
    })


# ------------------------------------------------------------ fitting

def fit_arx_arrays(z_by_loc: dict, x_by_loc: dict, cfg: ArxConfig | None = None,
                   last_ordinals: dict | None = None) -> ArxPosterior:
    """Fit from aligned per-location arrays of z and covariate x (NaN = gap).

    The arrays of one location cover consecutive weeks; ``last_ordinals``
    gives the week ordinal of each array's final element (needed only for
    known-future covariates).
    """
    cfg = cfg or ArxConfig()
    J = cfg.order
    locations = list(z_by_loc)
    z_list = [np.asarray(z_by_loc[l], dtype=float) for l in locations]
    x_list = [np.asarray(x_by_loc[l], dtype=float) for l in locations]
    for loc, z, x in zip(locations, z_list, x_list):
        if z.shape != x.shape:
            raise ValueError(f"{loc}: z and x lengths differ")
    zs, xs = _equations(z_list, x_list, J)
    short = [loc for loc, n in zip(locations, zs.n) if n < 1]
    if short:
        raise InsufficientDataError(f"locations without {J + 1} consecutive observations: {short}")

    n_iter = cfg.warmup_draws + cfg.posterior_draws
    chains = []
    for c in range(cfg.num_chains):
        rng = np.random.default_rng(np.random.SeedSequence([int(cfg.seed), c]))
        draws = _run_chain(rng, zs, xs, cfg, n_iter)
        chains.append({k: v[cfg.warmup_draws:] for k, v in draws.items()})

    report = None
    if cfg.num_chains > 1 and cfg.posterior_draws >= 4:
        report = convergence_report(chains, locations)
    pooled = {k: np.concatenate([c[k] for c in chains]) for k in chains[0]}
    histories = {}
    for loc, z, x in zip(locations, z_list, x_list):
        last = None if last_ordinals is None else int(last_ordinals[loc])
        histories[loc] = ArxHistory(z[-J:].copy(), x[-J:].copy(), last)
    post = ArxPosterior(cfg, locations, pooled["alpha"], pooled["beta"], pooled["gamma"], pooled["xi"],
                        pooled["sigma_eps"], pooled["sigma_nu"], histories, report)
    if cfg.check_convergence and report is not None:
        bad = report[~(report["rhat"] < RHAT_LIMIT)]
        if len(bad):
            raise ConvergenceError(f"R-hat >= {RHAT_LIMIT} for {list(bad['parameter'])}", report)
    return post


def fit_arx(zt: Dataset, cfg: ArxConfig | None = None, training_filter: TrainingFilter | None = None,
            locations=None) -> ArxPosterior:
    """Fit on standardized NHSN series, keeping off-season weeks.

    Excluded seasons become gaps, so no lag window spans them. Each
    location's history ends at its last observed week.
    """
    cfg = cfg or ArxConfig()
    training_filter = training_filter or TrainingFilter()
    nhsn = zt.of_source(SignalKind.NHSN)
    if locations is None:
        locations = sorted(nhsn.frame["location"].unique())
    z_by, x_by, last_by = {}, {}, {}
    for loc in locations:
        frame = nhsn.of_key(SeriesKey(SignalKind.NHSN, loc)).frame
        if frame.empty:
            raise InsufficientDataError(f"{loc}: no NHSN observations")
        ords = ordinals(frame["epiweek"].to_numpy())
        start, stop = int(ords.min()), int(ords.max())
        span = np.arange(start, stop + 1)
        z = np.full(span.size, np.nan)
        z[ords - start] = frame["value"].to_numpy()
        seasons, weeks, _ = calendar_columns(span)
        z[~training_filter.keep_mask(seasons, weeks, for_gbqr=False)] = np.nan
        z_by[loc] = z
        x_by[loc] = spike_of_ordinals(span)
        last_by[loc] = stop
    return fit_arx_arrays(z_by, x_by, cfg, last_by)


# ------------------------------------------------------------ forecasting

def simulate_paths(post: ArxPosterior, location: str, steps: int, rng: np.random.Generator) -> np.ndarray:
    """Posterior-predictive z paths of shape (draws, steps)."""
    i = post.locations.index(location)
    hist = post.histories[location]
    J = post.alpha.shape[1]
    D = post.num_draws
    if not (np.all(np.isfinite(hist.z)) and np.all(np.isfinite(hist.x))):
        raise InsufficientDataError(f"{location}: last {J} weeks are not all observed")
    # lag buffers, most recent first
    zl = np.tile(hist.z[::-1], (D, 1))
    xl = np.tile(hist.x[::-1], (D, 1))
    future_x = None
    if post.cfg.known_future_covariate and hist.last_ordinal is not None:
        future_x = spike_of_ordinals(hist.last_ordinal + 1 + np.arange(steps))
    out = np.empty((D, steps))
    for s in range(steps):
        z_new = (np.einsum("dj,dj->d", post.alpha, zl) + np.einsum("dj,dj->d", post.beta, xl)
                 + post.sigma_eps[:, i] * rng.standard_normal(D))
        if future_x is not None:
            x_new = np.full(D, future_x[s])
        else:
            x_new = np.einsum("dj,dj->d", post.gamma, xl) + post.sigma_nu[:, i] * rng.standard_normal(D)
        zl = np.column_stack([z_new, zl[:, :-1]])
        xl = np.column_stack([x_new, xl[:, :-1]])
        out[:, s] = z_new
    return out


def forecast_quantiles(post: ArxPosterior, location: str, horizons, seed=0) -> np.ndarray:
    """Standardized-scale quantiles, shape (len(horizons), 23)."""
    rng = np.random.default_rng(seed)
    paths = simulate_paths(post, location, max(horizons) + 1, rng)
    return np.quantile(paths[:, list(horizons)], LEVELS.as_array(), axis=0).T


def forecast_arx(post: ArxPosterior, tasks, params: dict, seed=0) -> list:
    """Count-scale forecasts; tasks must start right after each location's history."""
    from .core import QuantileForecast

    out = []
    by_loc = {}
    for t in tasks:
        by_loc.setdefault(t.location, []).append(t)
    for loc, group in by_loc.items():
        hist = post.histories.get(loc)
        if hist is None:
            log.warning("no ARX history for %s; tasks skipped", loc)
            continue
        for t in group:
            if hist.last_ordinal is not None and t.last_data_week.ordinal != hist.last_ordinal:
                raise ValueError(f"{t}: history ends at week ordinal {hist.last_ordinal}")
        horizons = sorted({t.horizon for t in group})
        loc_seed = np.random.SeedSequence([int(seed), post.locations.index(loc)])
        try:
            q = forecast_quantiles(post, loc, horizons, loc_seed)
        except InsufficientDataError as exc:
            log.warning("%s", exc)
            continue
        pos = {h: k for k, h in enumerate(horizons)}
        for t in group:
            counts = inverse_standardize(q[pos[t.horizon]], params[SeriesKey(SignalKind.NHSN, loc)])
            out.append(QuantileForecast.repaired(t, counts))
    return out
