"""Hierarchical Bayesian accuracy model with a self-contained MCMC sampler.

The model, fit once per task over the samples x approaches correctness
matrix (1 = correct, 0 = incorrect, NaN = excluded from the likelihood)::

    y[s, a] ~ Bernoulli(inv_logit(ability[a] + difficulty[s]))
    difficulty[s] ~ Normal(0, difficulty_scale)
    ability[a]    ~ Normal(0, prior_ability_sd)
    difficulty_scale ~ HalfNormal(prior_difficulty_scale)

Approach accuracy is the posterior-predictive mean
``mean_s inv_logit(ability[a] + difficulty[s])`` per draw; pairwise
differences and their region-of-practical-equivalence probabilities are
computed directly from the joint draws, so all paired structure is kept.

The sampler is adaptive random-walk Metropolis within Gibbs, vectorized per
parameter block, plus a translation move along the soft ridge
(ability + delta, difficulty - delta) that leaves the likelihood invariant.
Correctness is defined behaviorally: the simulate-then-fit calibration suite
must cover true accuracies at the nominal 95% rate.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from typing import Any, Iterable, Literal, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

ErrorPolicy = Literal["exclude", "count_as_incorrect"]

_TUNE_INTERVAL = 50


class DataError(Exception):
    pass


class ConvergenceError(Exception):
    def __init__(self, message: str, diagnostics: "Diagnostics") -> None:
        super().__init__(message)
        self.diagnostics = diagnostics


def inv_logit(x: np.ndarray | float) -> np.ndarray | float:
    return 1.0 / (1.0 + np.exp(-np.asarray(x)))


# ---------------------------------------------------------------------------
# Observations


@dataclass(frozen=True)
class ObservationMatrix:
    """Samples x approaches correctness values.

    ``values[s, a]`` is 1.0 (correct), 0.0 (incorrect), or NaN (excluded);
    every excluded cell carries a reason in ``exclusions``.
    """

    sample_ids: tuple[str, ...]
    approach_ids: tuple[str, ...]
    values: np.ndarray
    exclusions: dict[tuple[str, str], str]
    task_id: str | None = None

    def __post_init__(self) -> None:
        v = self.values
        if v.shape != (len(self.sample_ids), len(self.approach_ids)):
            raise DataError(f"values shape {v.shape} does not match ids")
        finite = v[~np.isnan(v)]
        if finite.size and not np.isin(finite, (0.0, 1.0)).all():
            raise DataError("values must be 0, 1, or NaN")
        n_nan = int(np.isnan(v).sum())
        if n_nan != len(self.exclusions):
            raise DataError(f"{n_nan} NaN cells but {len(self.exclusions)} exclusion reasons")


def build_dataset(records: Iterable[Any], error_policy: ErrorPolicy = "exclude") -> ObservationMatrix:
    """Assemble the observation matrix for one task from experiment records.

    Records are duck-typed: they need ``task_id``, ``sample_id``,
    ``variant_name``, ``correct`` ("true" | "false" | "excluded-error"), and
    ``failure``. Fatal failures map per policy; non-fatal tool errors never
    reach here (they live inside trajectories, not outcomes).
    """
    if error_policy not in ("exclude", "count_as_incorrect"):
        raise ValueError(f"unknown error_policy {error_policy!r}")
    records = list(records)
    if not records:
        raise DataError("no records")
    task_ids = {r.task_id for r in records}
    if len(task_ids) > 1:
        raise DataError(f"records span multiple tasks: {sorted(task_ids)}")

    sample_ids: list[str] = []
    approach_ids: list[str] = []
    for r in records:
        if r.sample_id not in sample_ids:
            sample_ids.append(r.sample_id)
        if r.variant_name not in approach_ids:
            approach_ids.append(r.variant_name)

    values = np.full((len(sample_ids), len(approach_ids)), np.nan)
    exclusions: dict[tuple[str, str], str] = {}
    seen: set[tuple[str, str]] = set()
    for r in records:
        key = (r.sample_id, r.variant_name)
        if key in seen:
            raise DataError(f"duplicate record for sample/approach {key}")
        seen.add(key)
        s = sample_ids.index(r.sample_id)
        a = approach_ids.index(r.variant_name)
        if r.correct == "excluded-error":
            if error_policy == "count_as_incorrect":
                values[s, a] = 0.0
            else:
                exclusions[key] = str(r.failure or "error")
        else:
            values[s, a] = 1.0 if r.correct == "true" else 0.0
    # Cells never observed (e.g. memorization on line tasks) stay excluded.
    for s, sid in enumerate(sample_ids):
        for a, aid in enumerate(approach_ids):
            if (sid, aid) not in seen and np.isnan(values[s, a]):
                exclusions[(sid, aid)] = "not run"

    return ObservationMatrix(tuple(sample_ids), tuple(approach_ids), values,
                             exclusions, task_id=task_ids.pop())


def simulate(alpha: Sequence[float], sigma_theta: float, n_samples: int,
             seed: int) -> ObservationMatrix:
    """Draw a synthetic observation matrix from known parameters:
    difficulties from Normal(0, sigma_theta), then Bernoulli outcomes."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    rng = np.random.default_rng(seed)
    alpha = np.asarray(alpha, dtype=float)
    theta = rng.normal(0.0, sigma_theta, size=n_samples)
    p = inv_logit(theta[:, None] + alpha[None, :])
    y = (rng.random(p.shape) < p).astype(float)
    return ObservationMatrix(
        sample_ids=tuple(f"s{i:04d}" for i in range(n_samples)),
        approach_ids=tuple(f"a{j}" for j in range(len(alpha))),
        values=y,
        exclusions={},
        task_id="simulated",
    )


def true_accuracy(alpha: Sequence[float], theta: Sequence[float]) -> np.ndarray:
    """The estimand for simulated data: mean_s inv_logit(alpha_a + theta_s)
    over the simulated difficulties."""
    alpha = np.asarray(alpha, dtype=float)
    theta = np.asarray(theta, dtype=float)
    return inv_logit(theta[:, None] + alpha[None, :]).mean(axis=0)


# ---------------------------------------------------------------------------
# Posterior containers


@dataclass(frozen=True)
class Diagnostics:
    rhat: dict[str, float]
    ess: dict[str, float]

    @property
    def max_rhat(self) -> float:
        return max(self.rhat.values())

    @property
    def min_ess(self) -> float:
        return min(self.ess.values())


@dataclass(frozen=True)
class Posterior:
    """Merged joint draws (chains concatenated in chain order)."""

    alpha: np.ndarray  # (D, A)
    theta: np.ndarray  # (D, S)
    sigma: np.ndarray  # (D,)
    chain: np.ndarray  # (D,) int
    approach_ids: tuple[str, ...]
    sample_ids: tuple[str, ...]
    diagnostics: Diagnostics
    seed: int

    def __post_init__(self) -> None:
        if not (self.sigma > 0).all():
            raise ValueError("difficulty scale must be positive in every draw")

    @property
    def n_draws(self) -> int:
        return self.alpha.shape[0]

    def approach_index(self, approach: str | int) -> int:
        if isinstance(approach, int):
            return approach
        return self.approach_ids.index(approach)

    def accuracy_draws(self) -> np.ndarray:
        """(D, A) posterior-predictive accuracy per draw:
        mean over samples of inv_logit(ability + difficulty)."""
        out = np.empty_like(self.alpha)
        for a in range(self.alpha.shape[1]):
            out[:, a] = inv_logit(self.theta + self.alpha[:, a:a + 1]).mean(axis=1)
        return out

    def to_table(self, path: str | os.PathLike[str]) -> None:
        """Export as structured text: one (draw, chain, parameter, value) row."""
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["draw", "chain", "parameter", "value"])
            for d in range(self.n_draws):
                c = int(self.chain[d])
                for a, aid in enumerate(self.approach_ids):
                    writer.writerow([d, c, f"ability[{aid}]", repr(self.alpha[d, a])])
                for s, sid in enumerate(self.sample_ids):
                    writer.writerow([d, c, f"difficulty[{sid}]", repr(self.theta[d, s])])
                writer.writerow([d, c, "difficulty_scale", repr(self.sigma[d])])


@dataclass(frozen=True)
class AccuracySummary:
    approach_ids: tuple[str, ...]
    mean: np.ndarray
    lo: np.ndarray  # 2.5% quantile
    hi: np.ndarray  # 97.5% quantile

    def row(self, approach: str) -> tuple[float, float, float]:
        i = self.approach_ids.index(approach)
        return float(self.mean[i]), float(self.lo[i]), float(self.hi[i])


@dataclass(frozen=True)
class PairwiseDiff:
    a: str
    b: str
    rope_halfwidth: float
    mean: float
    lo: float
    hi: float
    p_worse: float
    p_equiv: float
    p_better: float


def accuracy(posterior: Posterior) -> AccuracySummary:
    draws = posterior.accuracy_draws()
    return AccuracySummary(
        approach_ids=posterior.approach_ids,
        mean=draws.mean(axis=0),
        lo=np.quantile(draws, 0.025, axis=0),
        hi=np.quantile(draws, 0.975, axis=0),
    )


def pairwise_diff(posterior: Posterior, a: str | int, b: str | int,
                  rope_halfwidth: float = 0.05) -> PairwiseDiff:
    """Per-draw accuracy difference acc_a - acc_b with ROPE probabilities.
    p_worse + p_equiv + p_better = 1 exactly (the events partition draws)."""
    ia, ib = posterior.approach_index(a), posterior.approach_index(b)
    if ia == ib:
        raise ValueError("pairwise_diff needs two distinct approaches")
    draws = posterior.accuracy_draws()
    diff = draws[:, ia] - draws[:, ib]
    return PairwiseDiff(
        a=posterior.approach_ids[ia],
        b=posterior.approach_ids[ib],
        rope_halfwidth=rope_halfwidth,
        mean=float(diff.mean()),
        lo=float(np.quantile(diff, 0.025)),
        hi=float(np.quantile(diff, 0.975)),
        p_worse=float(np.mean(diff < -rope_halfwidth)),
        p_equiv=float(np.mean(np.abs(diff) <= rope_halfwidth)),
        p_better=float(np.mean(diff > rope_halfwidth)),
    )


# ---------------------------------------------------------------------------
# Sampler internals


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def _tune_factor(rate: np.ndarray) -> np.ndarray:
    """Step-size multiplier from windowed acceptance rate (targets ~0.44)."""
    factor = np.ones_like(rate)
    factor = np.where(rate < 0.2, 0.9, factor)
    factor = np.where(rate < 0.05, 0.5, factor)
    factor = np.where(rate < 0.001, 0.1, factor)
    factor = np.where(rate > 0.5, 1.1, factor)
    factor = np.where(rate > 0.75, 2.0, factor)
    factor = np.where(rate > 0.95, 10.0, factor)
    return factor


def _slice_1d(logp: Any, x0: float, rng: np.random.Generator,
              width: float = 1.0, max_steps: int = 32) -> float:
    """Univariate slice sampling (stepping out, then shrinkage)."""
    y = logp(x0) - rng.exponential()
    left = x0 - width * rng.random()
    right = left + width
    steps = max_steps
    while steps > 0 and logp(left) > y:
        left -= width
        steps -= 1
    steps = max_steps
    while steps > 0 and logp(right) > y:
        right += width
        steps -= 1
    while True:
        x = left + (right - left) * rng.random()
        if logp(x) > y:
            return x
        if x < x0:
            left = x
        else:
            right = x


def _run_chain(y0: np.ndarray, mask: np.ndarray, prior_ability_sd: float,
               prior_difficulty_scale: float, warmup: int, draws: int,
               thin: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """One chain of adaptive Metropolis-within-Gibbs.

    Sampled in the non-centered parameterization (z = difficulty / scale,
    u = log scale), which removes the hierarchical funnel that defeats
    random-walk proposals in the centered one. ``y0`` has NaN replaced by 0
    and ``mask`` flags observed cells; both are (S, A). Keeps ``draws``
    states, one every ``thin`` post-warmup iterations.
    """
    S, A = y0.shape
    yrow = y0.sum(axis=1)  # sum of observed y per sample
    ycol = y0.sum(axis=0)

    z = 0.1 * rng.standard_normal(S)
    alpha = 0.1 * rng.standard_normal(A)
    u = 0.1 * rng.standard_normal()  # log difficulty scale

    sigma = np.exp(u)
    x = sigma * z[:, None] + alpha[None, :]
    sp = _softplus(x)

    step_z = np.full(S, 1.0)
    step_alpha = np.full(A, 0.5)
    acc_z = np.zeros(S)
    acc_alpha = np.zeros(A)

    out_alpha = np.empty((draws, A))
    out_theta = np.empty((draws, S))
    out_sigma = np.empty(draws)

    total = warmup + draws * thin
    for it in range(total):
        # standardized difficulties: conditionally independent given the rest
        d = step_z * rng.standard_normal(S)
        x_new = x + (sigma * d)[:, None]
        sp_new = _softplus(x_new)
        delta_ll = yrow * (sigma * d) - ((sp_new - sp) * mask).sum(axis=1)
        delta_prior = (z**2 - (z + d) ** 2) / 2.0
        accept = np.log(rng.random(S)) < delta_ll + delta_prior
        z = np.where(accept, z + d, z)
        x[accept, :] = x_new[accept, :]
        sp[accept, :] = sp_new[accept, :]
        acc_z += accept

        # abilities: conditionally independent given difficulties
        d = step_alpha * rng.standard_normal(A)
        x_new = x + d[None, :]
        sp_new = _softplus(x_new)
        delta_ll = ycol * d - ((sp_new - sp) * mask).sum(axis=0)
        delta_prior = (alpha**2 - (alpha + d) ** 2) / (2.0 * prior_ability_sd**2)
        accept = np.log(rng.random(A)) < delta_ll + delta_prior
        alpha = np.where(accept, alpha + d, alpha)
        x[:, accept] = x_new[:, accept]
        sp[:, accept] = sp_new[:, accept]
        acc_alpha += accept

        # log scale, slice-sampled from its likelihood-aware conditional
        # (z fixed; x scales with e^u). HalfNormal prior on the scale plus
        # the log-axis jacobian.
        yz = float(yrow @ z)

        def _logp_u_lik(v: float) -> float:
            s = np.exp(v)
            xs = s * z[:, None] + alpha[None, :]
            ll = yz * s - (_softplus(xs) * mask).sum()
            return ll - s**2 / (2.0 * prior_difficulty_scale**2) + v

        u = _slice_1d(_logp_u_lik, u, rng)
        sigma = np.exp(u)
        x = sigma * z[:, None] + alpha[None, :]
        sp = _softplus(x)

        # Exact Gibbs along the ability/difficulty ridge: translating all
        # abilities by delta and effective difficulties by -delta leaves the
        # likelihood invariant, and the two Normal priors make the
        # conditional for delta itself Normal.
        prec = A / prior_ability_sd**2 + S / sigma**2
        mu = (z.sum() / sigma - alpha.sum() / prior_ability_sd**2) / prec
        delta = mu + rng.standard_normal() / np.sqrt(prec)
        alpha = alpha + delta
        z = z - delta / sigma

        # Interweaved scale update: slice-sample u = log(scale) with every
        # effective difficulty (and hence the likelihood) held fixed. This is
        # the centered-parameterization scale conditional; alternating it
        # with the likelihood-aware move above mixes the scale in both
        # strong- and weak-data regimes.
        theta_ss = float(z @ z) * sigma**2

        def _logp_u(v: float) -> float:
            s2 = np.exp(2.0 * v)
            return (-S * v - theta_ss / (2.0 * s2)
                    - s2 / (2.0 * prior_difficulty_scale**2) + v)

        u_new = _slice_1d(_logp_u, u, rng)
        z = z * (sigma / np.exp(u_new))
        u = u_new
        sigma = np.exp(u)

        if it < warmup and (it + 1) % _TUNE_INTERVAL == 0:
            step_z *= _tune_factor(acc_z / _TUNE_INTERVAL)
            step_alpha *= _tune_factor(acc_alpha / _TUNE_INTERVAL)
            acc_z[:] = 0.0
            acc_alpha[:] = 0.0

        k = it - warmup
        if k >= 0 and (k + 1) % thin == 0:
            j = k // thin
            out_alpha[j] = alpha
            out_theta[j] = sigma * z
            out_sigma[j] = sigma

    return {"alpha": out_alpha, "theta": out_theta, "sigma": out_sigma}


def split_rhat(x: np.ndarray) -> np.ndarray:
    """Split potential-scale-reduction statistic.

    ``x`` is (chains, n, params); each chain is halved, giving 2C sequences.
    """
    c, n, p = x.shape
    half = n // 2
    seqs = np.concatenate([x[:, :half, :], x[:, half: 2 * half, :]], axis=0)
    m = seqs.mean(axis=1)  # (2C, P)
    v = seqs.var(axis=1, ddof=1)  # (2C, P)
    w = v.mean(axis=0)
    b = half * m.var(axis=0, ddof=1)
    var_hat = (half - 1) / half * w + b / half
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.sqrt(var_hat / w)
    return np.where(w > 0, r, 1.0)


def effective_sample_size(x: np.ndarray) -> np.ndarray:
    """Bulk effective sample size per parameter via FFT autocorrelation and
    Geyer's initial monotone positive sequence. ``x`` is (chains, n, params)."""
    c, n, p = x.shape
    centered = x - x.mean(axis=1, keepdims=True)
    size = 1
    while size < 2 * n:
        size *= 2
    f = np.fft.rfft(centered, n=size, axis=1)
    acov = np.fft.irfft(f * np.conj(f), n=size, axis=1)[:, :n, :].real / n

    chain_var = x.var(axis=1, ddof=1)  # (C, P)
    w = chain_var.mean(axis=0)
    mean_acov = acov.mean(axis=0)  # (N, P)
    b_over_n = x.mean(axis=1).var(axis=0, ddof=1) if c > 1 else np.zeros(p)
    var_hat = (n - 1) / n * w + b_over_n

    ess = np.empty(p)
    for j in range(p):
        if var_hat[j] <= 0:
            ess[j] = c * n
            continue
        rho = 1.0 - (w[j] - mean_acov[:, j]) / var_hat[j]
        rho[0] = 1.0
        # Geyer: sum consecutive pairs while positive and non-increasing.
        total = 0.0
        prev = np.inf
        t = 1
        while t + 1 < n:
            pair = rho[t] + rho[t + 1]
            if pair < 0:
                break
            pair = min(pair, prev)
            prev = pair
            total += pair
            t += 2
        ess[j] = c * n / (1.0 + 2.0 * total)
    return ess


# ---------------------------------------------------------------------------
# Estimator


class HierarchicalAccuracyModel(BaseEstimator):
    """Estimator wrapper around the sampler.

    ``fit`` accepts an :class:`ObservationMatrix` or a raw (S, A) array with
    entries in {0, 1, NaN}; NaN cells are dropped from the likelihood. After
    fitting, ``posterior_`` and ``diagnostics_`` are available. When
    ``check_convergence`` is set, fitting fails loudly with
    :class:`ConvergenceError` if the split-R-hat threshold is exceeded.
    """

    def __init__(self, prior_ability_sd: float = 2.0,
                 prior_difficulty_scale: float = 2.0, chains: int = 4,
                 warmup: int = 1000, draws: int = 1000, thin: int = 4,
                 seed: int = 0, rhat_threshold: float = 1.01,
                 check_convergence: bool = True) -> None:
        self.prior_ability_sd = prior_ability_sd
        self.prior_difficulty_scale = prior_difficulty_scale
        self.chains = chains
        self.warmup = warmup
        self.draws = draws
        self.thin = thin
        self.seed = seed
        self.rhat_threshold = rhat_threshold
        self.check_convergence = check_convergence

    def _validate(self, X: ObservationMatrix | np.ndarray) -> ObservationMatrix:
        if isinstance(X, ObservationMatrix):
            obs = X
        else:
            arr = np.asarray(X, dtype=float)
            if arr.ndim != 2:
                raise DataError(f"expected a 2-D samples x approaches array, got ndim={arr.ndim}")
            nan_cells = {(f"s{i:04d}", f"a{j}"): "excluded"
                         for i, j in zip(*np.nonzero(np.isnan(arr)))}
            obs = ObservationMatrix(
                sample_ids=tuple(f"s{i:04d}" for i in range(arr.shape[0])),
                approach_ids=tuple(f"a{j}" for j in range(arr.shape[1])),
                values=arr,
                exclusions=nan_cells,
            )
        observed_per_approach = (~np.isnan(obs.values)).sum(axis=0)
        if (observed_per_approach < 1).any():
            bad = [obs.approach_ids[j] for j in np.nonzero(observed_per_approach < 1)[0]]
            raise DataError(f"approaches with no non-excluded cells: {bad}")
        return obs

    def fit(self, X: ObservationMatrix | np.ndarray, y: None = None) -> "HierarchicalAccuracyModel":
        obs = self._validate(X)
        if self.prior_ability_sd <= 0 or self.prior_difficulty_scale <= 0:
            raise ValueError("prior scales must be positive")
        if min(self.chains, self.warmup, self.draws, self.thin) < 1:
            raise ValueError("chains, warmup, draws, and thin must all be >= 1")

        mask = ~np.isnan(obs.values)
        y0 = np.nan_to_num(obs.values) * mask

        seeds = np.random.SeedSequence(self.seed).spawn(self.chains)
        chain_results = [
            _run_chain(y0, mask.astype(float), self.prior_ability_sd,
                       self.prior_difficulty_scale, self.warmup, self.draws,
                       self.thin, np.random.default_rng(s))
            for s in seeds
        ]

        S, A = obs.values.shape
        names = ([f"ability[{a}]" for a in obs.approach_ids]
                 + [f"difficulty[{s}]" for s in obs.sample_ids]
                 + ["difficulty_scale"])
        stacked = np.stack([  # (C, N, P)
            np.concatenate([r["alpha"], r["theta"], r["sigma"][:, None]], axis=1)
            for r in chain_results
        ])
        rhat = split_rhat(stacked)
        ess = effective_sample_size(stacked)
        diagnostics = Diagnostics(rhat=dict(zip(names, rhat.tolist())),
                                  ess=dict(zip(names, ess.tolist())))

        posterior = Posterior(
            alpha=np.concatenate([r["alpha"] for r in chain_results]),
            theta=np.concatenate([r["theta"] for r in chain_results]),
            sigma=np.concatenate([r["sigma"] for r in chain_results]),
            chain=np.repeat(np.arange(self.chains), self.draws),
            approach_ids=obs.approach_ids,
            sample_ids=obs.sample_ids,
            diagnostics=diagnostics,
            seed=self.seed,
        )

        self.posterior_ = posterior
        self.diagnostics_ = diagnostics
        self.n_samples_, self.n_approaches_ = S, A

        if self.check_convergence and diagnostics.max_rhat > self.rhat_threshold:
            worst = max(diagnostics.rhat, key=diagnostics.rhat.get)
            raise ConvergenceError(
                f"split-R-hat {diagnostics.max_rhat:.4f} on {worst} exceeds "
                f"threshold {self.rhat_threshold}", diagnostics)
        return self

    def _posterior(self) -> Posterior:
        if not hasattr(self, "posterior_"):
            raise NotFittedError("call fit() first")
        return self.posterior_

    def accuracy_summary(self) -> AccuracySummary:
        return accuracy(self._posterior())

    def pairwise(self, a: str | int, b: str | int,
                 rope_halfwidth: float = 0.05) -> PairwiseDiff:
        return pairwise_diff(self._posterior(), a, b, rope_halfwidth)


def fit(observations: ObservationMatrix | np.ndarray, *,
        prior_ability_sd: float = 2.0, prior_difficulty_scale: float = 2.0,
        chains: int = 4, warmup: int = 1000, draws: int = 1000, thin: int = 4,
        seed: int = 0, rhat_threshold: float = 1.01,
        check_convergence: bool = True) -> Posterior:
    """Function-style entry point; returns the posterior directly."""
    model = HierarchicalAccuracyModel(
        prior_ability_sd=prior_ability_sd,
        prior_difficulty_scale=prior_difficulty_scale,
        chains=chains, warmup=warmup, draws=draws, thin=thin, seed=seed,
        rhat_threshold=rhat_threshold, check_convergence=check_convergence,
    )
    return model.fit(observations).posterior_


# ---------------------------------------------------------------------------
# Simulation-based calibration


@dataclass(frozen=True)
class CalibrationReport:
    cycles: int
    n_samples: int
    coverage: np.ndarray  # per approach, fraction of cycles covering true acc
    rhat_ok_fraction: float
    rhat_threshold: float

    def within(self, lo: float = 0.88, hi: float = 0.99) -> bool:
        return bool(((self.coverage >= lo) & (self.coverage <= hi)).all())


def run_calibration(cycles: int = 100, n_samples: int = 100, n_approaches: int = 3,
                    seed: int = 0, alpha_sd: float = 1.0, sigma_theta: float = 1.0,
                    chains: int = 4, warmup: int = 1000, draws: int = 1000,
                    thin: int = 4, rhat_threshold: float = 1.01,
                    progress: Any = None) -> CalibrationReport:
    """Simulate-then-fit cycles: abilities drawn from Normal(0, alpha_sd),
    known difficulties, then check how often the 95% accuracy interval covers
    the true value and how often the sampler meets the R-hat threshold."""
    root = np.random.SeedSequence(seed)
    covered = np.zeros(n_approaches)
    rhat_ok = 0
    for i, ss in enumerate(root.spawn(cycles)):
        rng = np.random.default_rng(ss)
        alpha = rng.normal(0.0, alpha_sd, size=n_approaches)
        theta = rng.normal(0.0, sigma_theta, size=n_samples)
        p = inv_logit(theta[:, None] + alpha[None, :])
        y = (rng.random(p.shape) < p).astype(float)
        truth = true_accuracy(alpha, theta)

        model = HierarchicalAccuracyModel(
            chains=chains, warmup=warmup, draws=draws, thin=thin,
            seed=int(rng.integers(2**31)), rhat_threshold=rhat_threshold,
            check_convergence=False,
        ).fit(y)
        if model.diagnostics_.max_rhat <= rhat_threshold:
            rhat_ok += 1
        summary = model.accuracy_summary()
        covered += (summary.lo <= truth) & (truth <= summary.hi)
        if progress is not None:
            progress(i + 1, cycles)

    return CalibrationReport(
        cycles=cycles,
        n_samples=n_samples,
        coverage=covered / cycles,
        rhat_ok_fraction=rhat_ok / cycles,
        rhat_threshold=rhat_threshold,
    )
