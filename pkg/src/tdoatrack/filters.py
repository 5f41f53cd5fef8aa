"""SIR and NormalHedge particle filters over pairwise-delay state vectors.

Both trackers share the pseudo-likelihood score

    L(Z, X) = Z0 + sum_p sum_l Z_p(tau_l) * N(tau_l; X_p, sigma_z^2)

built from z-scored correlation peaks. SIR resamples every particle every
step; NormalHedge keeps a discounted cumulative regret per particle,

    G_t = (1 - alpha) * G_{t-1} + (L_i - g_A),   g_A = sum_i w_{t-1,i} L_i,

weights particles by ([G]_+ / c_t) * exp([G]_+^2 / (2 c_t)) with c_t solving
(1/m) * sum_i exp([G_i]_+^2 / (2 c_t)) = e, and replaces only the particles
whose weight is exactly zero. Resampled states are denoised onto the learned
manifold when a projection strategy is active.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .manifold import PdTree, ProjectionStrategy, denoise
from .signal import PeakSet


class DegenerateEnsembleError(RuntimeError):
    """All discounted regrets are non-positive; the hedge has no weighting."""


@dataclass(frozen=True)
class ScoringConfig:
    z0: float = 1.0
    sigma_z_sq: float = 10.0

    def __post_init__(self):
        if self.z0 < 0:
            raise ValueError("z0 must be >= 0")
        if self.sigma_z_sq <= 0:
            raise ValueError("sigma_z_sq must be positive")


@dataclass(frozen=True)
class FilterConfig:
    """Particle count, resampling noise, hedge discount, and denoise strategy.

    resample_sigma is the per-coordinate standard deviation of the Gaussian
    resampling noise, in samples per frame (variance resample_sigma**2 on
    every delay coordinate).
    """

    m: int = 50
    resample_sigma: float = 2.0
    alpha: float = 0.05
    strategy: ProjectionStrategy = ProjectionStrategy.none()
    rng_seed: int = 0

    def __post_init__(self):
        if self.m < 1:
            raise ValueError("m must be >= 1")
        if self.resample_sigma < 0:
            raise ValueError("resample_sigma must be >= 0")
        if not 0 <= self.alpha < 1:
            raise ValueError("alpha must lie in [0, 1)")


@dataclass
class Ensemble:
    """Particle states (m, D) with weights, regrets, and last denoise depths."""

    states: np.ndarray
    weights: np.ndarray
    regrets: np.ndarray
    last_depths: np.ndarray

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float)
        self.weights = np.asarray(self.weights, dtype=float)
        self.regrets = np.asarray(self.regrets, dtype=float)
        self.last_depths = np.asarray(self.last_depths, dtype=int)
        m = self.states.shape[0]
        if self.weights.shape != (m,) or self.regrets.shape != (m,) \
                or self.last_depths.shape != (m,):
            raise ValueError("ensemble arrays disagree on particle count")

    @property
    def m(self) -> int:
        return self.states.shape[0]

    def copy(self) -> "Ensemble":
        return Ensemble(self.states.copy(), self.weights.copy(),
                        self.regrets.copy(), self.last_depths.copy())


def init_ensemble(training: np.ndarray, m: int, rng, jitter_sigma: float = 0.0) -> Ensemble:
    """Uniform weights, zero regrets, states drawn uniformly from the training set."""
    rng = np.random.default_rng(rng)
    training = np.asarray(training, dtype=float)
    idx = rng.integers(0, training.shape[0], size=m)
    states = training[idx].copy()
    if jitter_sigma > 0:
        states += rng.normal(0.0, jitter_sigma, states.shape)
    return Ensemble(states=states,
                    weights=np.full(m, 1.0 / m),
                    regrets=np.zeros(m),
                    last_depths=np.full(m, -1))


# ---------------------------------------------------------------------------
# Scoring

def _flatten_peaks(peaks: list[PeakSet]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    pair_idx, lags, scores = [], [], []
    for p, ps in enumerate(peaks):
        pair_idx.append(np.full(ps.count, p))
        lags.append(ps.lags)
        scores.append(ps.scores)
    if not pair_idx:
        z = np.empty(0)
        return z.astype(int), z, z
    return (np.concatenate(pair_idx).astype(int),
            np.concatenate(lags).astype(float),
            np.concatenate(scores).astype(float))


def pseudo_likelihood_batch(peaks: list[PeakSet], states: np.ndarray,
                            cfg: ScoringConfig) -> np.ndarray:
    """Score every row of (m, D) states against one frame's peak sets."""
    states = np.atleast_2d(np.asarray(states, dtype=float))
    pair_idx, lags, scores = _flatten_peaks(peaks)
    if lags.size == 0:
        return np.full(states.shape[0], cfg.z0)
    diff = lags[None, :] - states[:, pair_idx]
    dens = np.exp(-diff ** 2 / (2.0 * cfg.sigma_z_sq)) / math.sqrt(2.0 * math.pi * cfg.sigma_z_sq)
    return cfg.z0 + dens @ scores


def pseudo_likelihood(peaks: list[PeakSet], x: np.ndarray, cfg: ScoringConfig) -> float:
    """Score a single delay vector; peaks must be in canonical pair order."""
    return float(pseudo_likelihood_batch(peaks, np.asarray(x, dtype=float)[None, :], cfg)[0])


# ---------------------------------------------------------------------------
# NormalHedge algebra

def nh_update_regrets(ens: Ensemble, peaks: list[PeakSet], scoring: ScoringConfig,
                      alpha: float) -> tuple[Ensemble, float]:
    """Discount regrets and add each particle's score gap to the ensemble.

    Returns the updated ensemble and g_A, the weighted mean score. Weights
    are left untouched; scores are evaluated on the current (pre-resampling)
    states.
    """
    scores = pseudo_likelihood_batch(peaks, ens.states, scoring)
    g_a = float(ens.weights @ scores)
    regrets = (1.0 - alpha) * ens.regrets + (scores - g_a)
    out = ens.copy()
    out.regrets = regrets
    return out, g_a


def _potential(c: float, gpos_sq_half: np.ndarray) -> float:
    """(1/m) sum exp([G]_+^2 / (2c)) - e, guarded against overflow."""
    exponents = gpos_sq_half / c
    if exponents.max() > 700.0:
        return np.inf
    return float(np.mean(np.exp(exponents))) - math.e


def solve_ct(regrets, *, tol: float = 1e-12, max_iter: int = 200) -> float:
    """Solve (1/m) sum exp([G_i]_+^2 / (2 c)) = e for the unique c > 0.

    The left side decreases strictly from +inf to 1 as c grows, so bisection
    on a bracket is guaranteed to converge once some regret is positive.
    """
    g = np.maximum(np.asarray(regrets, dtype=float), 0.0)
    if not np.any(g > 0):
        raise DegenerateEnsembleError("all regrets non-positive: c_t undefined")
    gsq_half = g ** 2 / 2.0
    lo = 1e-12
    hi = float(gsq_half.max()) + 1.0
    for _ in range(200):
        if _potential(hi, gsq_half) < 0:
            break
        hi *= 2.0
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        f_mid = _potential(mid, gsq_half)
        if abs(f_mid) <= tol:
            return mid
        if f_mid > 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def nh_weights(regrets, c_t: float) -> np.ndarray:
    """([G]_+ / c_t) exp([G]_+^2 / (2 c_t)), normalized to sum 1.

    Weights are exactly zero wherever the regret is non-positive.
    """
    if c_t <= 0:
        raise ValueError("c_t must be positive")
    g = np.maximum(np.asarray(regrets, dtype=float), 0.0)
    raw = np.zeros_like(g)
    pos = g > 0
    raw[pos] = (g[pos] / c_t) * np.exp(g[pos] ** 2 / (2.0 * c_t))
    total = raw.sum()
    if total == 0:
        raise DegenerateEnsembleError("all weights zero")
    return raw / total


# ---------------------------------------------------------------------------
# Filter steps

@dataclass
class StepResult:
    ensemble: Ensemble
    prediction: np.ndarray
    n_resampled: int


def _resample_states(source_states: np.ndarray, source_weights: np.ndarray,
                     count: int, cfg: FilterConfig, tree: PdTree | None,
                     rng) -> tuple[np.ndarray, np.ndarray]:
    """Draw `count` states by weight, add Gaussian noise, then denoise."""
    idx = rng.choice(source_states.shape[0], size=count, p=source_weights)
    states = source_states[idx].copy()
    if cfg.resample_sigma > 0:
        states += rng.normal(0.0, cfg.resample_sigma, states.shape)
    depths = np.full(count, -1)
    if cfg.strategy.mode != "none":
        if tree is None:
            raise ValueError("projection strategy requires a built tree")
        for r in range(count):
            states[r], depths[r] = denoise(tree, states[r], cfg.strategy, rng)
    return states, depths


def sir_step(ens: Ensemble, peaks: list[PeakSet], cfg: FilterConfig,
             scoring: ScoringConfig, tree: PdTree | None, rng) -> StepResult:
    """One SIR iteration: resample all m, reweight by likelihood, predict."""
    rng = np.random.default_rng(rng)
    states, depths = _resample_states(ens.states, ens.weights, ens.m, cfg, tree, rng)
    scores = pseudo_likelihood_batch(peaks, states, scoring)
    total = scores.sum()
    if total > 0:
        weights = scores / total
    else:
        weights = np.full(ens.m, 1.0 / ens.m)  # only reachable when z0 = 0
    prediction = weights @ states
    out = Ensemble(states=states, weights=weights,
                   regrets=ens.regrets.copy(), last_depths=depths)
    return StepResult(ensemble=out, prediction=prediction, n_resampled=ens.m)


def nh_step(ens: Ensemble, peaks: list[PeakSet], cfg: FilterConfig,
            scoring: ScoringConfig, tree: PdTree | None, rng) -> StepResult:
    """One NormalHedge iteration: reweight by regret, predict, replace the dead.

    Replacement states are drawn from the pre-update ensemble by its previous
    weights and inherit the updated regret of their source particle. When
    every regret is non-positive the ensemble is reset to uniform weights and
    zero regrets with no resampling.
    """
    rng = np.random.default_rng(rng)
    prev_states = ens.states.copy()
    prev_weights = ens.weights.copy()
    updated, _ = nh_update_regrets(ens, peaks, scoring, cfg.alpha)
    regrets = updated.regrets

    if not np.any(regrets > 0):
        out = Ensemble(states=prev_states, weights=np.full(ens.m, 1.0 / ens.m),
                       regrets=np.zeros(ens.m), last_depths=ens.last_depths.copy())
        return StepResult(ensemble=out, prediction=out.states.mean(axis=0),
                          n_resampled=0)

    c_t = solve_ct(regrets)
    weights = nh_weights(regrets, c_t)
    prediction = weights @ ens.states

    dead = weights == 0.0
    n_dead = int(dead.sum())
    states = ens.states.copy()
    new_regrets = regrets.copy()
    depths = ens.last_depths.copy()
    if n_dead:
        dead_idx = np.nonzero(dead)[0]
        src = rng.choice(ens.m, size=n_dead, p=prev_weights)
        fresh = prev_states[src].copy()
        if cfg.resample_sigma > 0:
            fresh += rng.normal(0.0, cfg.resample_sigma, fresh.shape)
        if cfg.strategy.mode != "none":
            if tree is None:
                raise ValueError("projection strategy requires a built tree")
            for r in range(n_dead):
                fresh[r], d = denoise(tree, fresh[r], cfg.strategy, rng)
                depths[dead_idx[r]] = d
        states[dead] = fresh
        new_regrets[dead] = regrets[src]
    out = Ensemble(states=states, weights=weights, regrets=new_regrets,
                   last_depths=depths)
    return StepResult(ensemble=out, prediction=prediction, n_resampled=n_dead)


# ---------------------------------------------------------------------------
# Stateful tracker with bit-exact checkpointing

_CHECKPOINT_TAG = "tdoatrack-checkpoint-v1"


class Tracker:
    """Sequential wrapper running one filter kind over successive frames."""

    def __init__(self, kind: str, cfg: FilterConfig, scoring: ScoringConfig,
                 tree: PdTree | None = None, init_states: np.ndarray | None = None,
                 jitter_sigma: float = 0.0):
        if kind not in ("pf", "nh"):
            raise ValueError("kind must be 'pf' (SIR) or 'nh' (NormalHedge)")
        if cfg.strategy.mode != "none" and tree is None:
            raise ValueError("projection strategy requires a built tree")
        self.kind = kind
        self.cfg = cfg
        self.scoring = scoring
        self.tree = tree
        self.rng = np.random.default_rng(cfg.rng_seed)
        self.step_index = 0
        self.total_resampled = 0
        if init_states is not None:
            self.ensemble = init_ensemble(init_states, cfg.m, self.rng, jitter_sigma)
        else:
            self.ensemble = None

    def step(self, peaks: list[PeakSet]) -> StepResult:
        if self.ensemble is None:
            raise RuntimeError("tracker has no initial ensemble")
        fn = sir_step if self.kind == "pf" else nh_step
        result = fn(self.ensemble, peaks, self.cfg, self.scoring, self.tree, self.rng)
        self.ensemble = result.ensemble
        self.step_index += 1
        self.total_resampled += result.n_resampled
        return result

    def save_checkpoint(self, path) -> None:
        ens = self.ensemble
        payload = {
            "format": _CHECKPOINT_TAG,
            "kind": self.kind,
            "step_index": self.step_index,
            "total_resampled": self.total_resampled,
            "config": {
                "m": self.cfg.m,
                "resample_sigma": self.cfg.resample_sigma,
                "alpha": self.cfg.alpha,
                "strategy": {"mode": self.cfg.strategy.mode,
                             "depth": self.cfg.strategy.depth},
                "rng_seed": self.cfg.rng_seed,
            },
            "scoring": {"z0": self.scoring.z0, "sigma_z_sq": self.scoring.sigma_z_sq},
            "states": ens.states.tolist(),
            "weights": ens.weights.tolist(),
            "regrets": ens.regrets.tolist(),
            "last_depths": ens.last_depths.tolist(),
            "rng_state": self.rng.bit_generator.state,
        }
        with open(path, "w", newline="\n") as fh:
            json.dump(payload, fh, indent=1)
            fh.write("\n")

    @classmethod
    def load_checkpoint(cls, path, tree: PdTree | None = None) -> "Tracker":
        with open(path) as fh:
            payload = json.load(fh)
        if payload.get("format") != _CHECKPOINT_TAG:
            raise ValueError(f"not a {_CHECKPOINT_TAG} file")
        c = payload["config"]
        cfg = FilterConfig(m=c["m"], resample_sigma=c["resample_sigma"],
                           alpha=c["alpha"],
                           strategy=ProjectionStrategy(mode=c["strategy"]["mode"],
                                                       depth=c["strategy"]["depth"]),
                           rng_seed=c["rng_seed"])
        scoring = ScoringConfig(**payload["scoring"])
        tracker = cls(payload["kind"], cfg, scoring, tree=tree)
        tracker.ensemble = Ensemble(
            states=np.array(payload["states"], dtype=float),
            weights=np.array(payload["weights"], dtype=float),
            regrets=np.array(payload["regrets"], dtype=float),
            last_depths=np.array(payload["last_depths"], dtype=int),
        )
        tracker.step_index = payload["step_index"]
        tracker.total_resampled = payload["total_resampled"]
        tracker.rng.bit_generator.state = payload["rng_state"]
        return tracker
