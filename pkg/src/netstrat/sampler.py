"""No-U-turn sampler with dual-averaging step size and windowed mass adaptation.

The transition is dynamic multinomial Hamiltonian Monte Carlo: trajectories
double in both directions until the endpoints start moving toward each other
(checked with mass-weighted velocities), the next state is drawn from the
trajectory with weights proportional to the canonical density, and a leapfrog
step whose energy error exceeds ``DELTA_MAX`` ends the doubling and is
counted as a divergence.

Warmup follows the usual three-phase layout: a settle-in buffer adapting only
the step size, a sequence of doubling windows that re-estimate the diagonal
mass matrix from posterior draws (with a small shrink toward unit scale),
and a final buffer that re-tunes the step size against the last mass matrix.
After warmup the averaged step size is frozen. A plain random-walk
Metropolis transition is available as a fallback for targets where gradients
are unavailable or distrusted.

Chains use independent child streams of one seed sequence, so results do not
depend on thread scheduling.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata
from scipy.special import ndtri

logger = logging.getLogger(__name__)

DELTA_MAX = 1000.0  # energy-error threshold for declaring a divergence


class SamplerError(RuntimeError):
    """Raised when sampling cannot start or complete."""


@dataclass(frozen=True)
class SamplerConfig:
    chains: int = 4
    warmup: int = 1000
    samples: int = 1000
    seed: int = 0
    target_accept: float = 0.8
    max_tree_depth: int = 10
    init_jitter: float = 2.0
    algorithm: str = "nuts"  # "nuts" or "rwm"
    threads: int = 1

    def __post_init__(self):
        if self.chains < 1 or self.samples < 1 or self.warmup < 0:
            raise ValueError("chains and samples must be >= 1, warmup >= 0")
        if not 0 < self.target_accept < 1:
            raise ValueError("target_accept must lie in (0, 1)")
        if self.max_tree_depth < 1:
            raise ValueError("max_tree_depth must be >= 1")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")
        if self.init_jitter < 0:
            raise ValueError("init_jitter must be nonnegative")
        if self.algorithm not in ("nuts", "rwm"):
            raise ValueError(f"unknown algorithm {self.algorithm!r}")


@dataclass(eq=False)
class Draws:
    """Retained draws with per-draw log density and acceptance statistics.

    ``positions`` has shape (chains, samples, dim) on the scale the target
    was sampled on; for model fits the pipeline stores the constrained
    transform of each draw, so scale entries are positive and inflation
    weights sit in [0, 1] by construction. Every retained draw has a finite
    log posterior: the transition never moves to a point whose density is
    zero.
    """

    positions: np.ndarray
    log_posts: np.ndarray
    accept_stats: np.ndarray
    divergences: np.ndarray
    step_sizes: np.ndarray
    mass_diag: np.ndarray
    depth_limit_hits: np.ndarray
    names: list[str] | None = None

    @property
    def n_chains(self) -> int:
        return self.positions.shape[0]

    @property
    def n_samples(self) -> int:
        return self.positions.shape[1]

    @property
    def dim(self) -> int:
        return self.positions.shape[2]

    def flat(self) -> np.ndarray:
        """(chains * samples, dim) with chains concatenated in order."""
        return self.positions.reshape(-1, self.dim)


@dataclass(frozen=True)
class Diagnostics:
    """Split R-hat and rank-normalized effective sample size per parameter.

    Parameters whose pooled draws have zero variance get NaN in both fields;
    ``degenerate`` marks them. ``n_divergent`` sums divergences over chains.
    """

    rhat: np.ndarray
    ess: np.ndarray
    n_divergent: int
    degenerate: np.ndarray
    names: list[str] | None = None

    def as_dict(self) -> dict:
        def _clean(v):
            return None if not np.isfinite(v) else float(v)
        names = self.names or [f"p{i}" for i in range(len(self.rhat))]
        return {
            "n_divergent": int(self.n_divergent),
            "max_rhat": _clean(np.nanmax(self.rhat)) if len(self.rhat) else None,
            "min_ess": _clean(np.nanmin(self.ess)) if len(self.ess) else None,
            "parameters": {
                n: {"rhat": _clean(r), "ess": _clean(e), "degenerate": bool(d)}
                for n, r, e, d in zip(names, self.rhat, self.ess, self.degenerate)
            },
        }


# ---------------------------------------------------------------------------
# adaptation helpers


class _DualAveraging:
    """Nesterov dual averaging of log step size toward a target accept rate."""

    GAMMA = 0.05
    T0 = 10.0
    KAPPA = 0.75

    def __init__(self, eps0: float, target: float):
        self.mu = np.log(10.0 * eps0)
        self.log_eps = np.log(eps0)
        self.log_eps_bar = np.log(eps0)
        self.h_bar = 0.0
        self.m = 0
        self.target = target

    def update(self, accept_stat: float) -> float:
        self.m += 1
        frac = 1.0 / (self.m + self.T0)
        self.h_bar = (1 - frac) * self.h_bar + frac * (self.target - accept_stat)
        self.log_eps = self.mu - np.sqrt(self.m) / self.GAMMA * self.h_bar
        eta = self.m ** (-self.KAPPA)
        self.log_eps_bar = eta * self.log_eps + (1 - eta) * self.log_eps_bar
        return float(np.exp(self.log_eps))

    def frozen(self) -> float:
        return float(np.exp(self.log_eps_bar))


class _Welford:
    """Streaming mean/variance for the mass-matrix windows."""

    def __init__(self, dim: int):
        self.dim = dim
        self.reset()

    def reset(self):
        self.n = 0
        self.mean = np.zeros(self.dim)
        self.m2 = np.zeros(self.dim)

    def add(self, x: np.ndarray):
        self.n += 1
        d = x - self.mean
        self.mean += d / self.n
        self.m2 += d * (x - self.mean)

    def shrunk_variance(self) -> np.ndarray:
        if self.n < 2:
            return np.ones(self.dim)
        var = self.m2 / (self.n - 1)
        w = self.n / (self.n + 5.0)
        return w * var + (1 - w) * 1e-3


def _mass_windows(warmup: int) -> list[tuple[int, int]]:
    """(start, end) iteration ranges whose draws feed mass re-estimation."""
    if warmup < 40:
        return []
    init, term, base = 75, 50, 25
    if init + base + term > warmup:
        scale = warmup / float(init + base + term)
        init = max(1, int(round(init * scale)))
        term = max(1, int(round(term * scale)))
        base = max(1, warmup - init - term)
    windows = []
    start, size = init, base
    while True:
        end = start + size
        if end + 2 * size > warmup - term:
            windows.append((start, warmup - term))
            return windows
        windows.append((start, end))
        start, size = end, 2 * size


# ---------------------------------------------------------------------------
# Hamiltonian transition


class _Tree:
    __slots__ = ("q_minus", "p_minus", "g_minus", "q_plus", "p_plus", "g_plus",
                 "q_cand", "lp_cand", "g_cand", "log_w", "sum_metro",
                 "n_leapfrog", "divergent", "turning")

    def __init__(self, **kw):
        for k, v in kw.items():
            setattr(self, k, v)


def _kinetic(p: np.ndarray, inv_mass: np.ndarray) -> float:
    # momenta can blow up transiently under a bad warmup step size; the
    # resulting inf energy is rejected upstream, so just let it through
    with np.errstate(over="ignore"):
        return 0.5 * float(np.dot(p * p, inv_mass))


def _leapfrog(vag, q, p, g, eps, inv_mass):
    p_half = p + 0.5 * eps * g
    q1 = q + eps * inv_mass * p_half
    lp1, g1 = vag(q1)
    p1 = p_half + 0.5 * eps * g1
    return q1, p1, g1, lp1


def _turned(q_plus, p_plus, q_minus, p_minus, inv_mass) -> bool:
    dq = q_plus - q_minus
    return (np.dot(dq, inv_mass * p_minus) < 0) or (np.dot(dq, inv_mass * p_plus) < 0)


def _build_tree(vag, depth, q, p, g, direction, eps, inv_mass, h0, rng):
    if depth == 0:
        q1, p1, g1, lp1 = _leapfrog(vag, q, p, g, direction * eps, inv_mass)
        h1 = -lp1 + _kinetic(p1, inv_mass) if np.isfinite(lp1) else np.inf
        log_w = h0 - h1
        divergent = (not np.isfinite(h1)) or (h1 - h0 > DELTA_MAX)
        metro = float(np.exp(min(0.0, log_w))) if np.isfinite(log_w) else 0.0
        return _Tree(q_minus=q1, p_minus=p1, g_minus=g1, q_plus=q1, p_plus=p1,
                     g_plus=g1, q_cand=q1, lp_cand=lp1, g_cand=g1,
                     log_w=log_w if np.isfinite(log_w) else -np.inf,
                     sum_metro=metro, n_leapfrog=1, divergent=divergent, turning=False)

    inner = _build_tree(vag, depth - 1, q, p, g, direction, eps, inv_mass, h0, rng)
    if inner.divergent or inner.turning:
        return inner
    if direction == 1:
        q_edge, p_edge, g_edge = inner.q_plus, inner.p_plus, inner.g_plus
    else:
        q_edge, p_edge, g_edge = inner.q_minus, inner.p_minus, inner.g_minus
    outer = _build_tree(vag, depth - 1, q_edge, p_edge, g_edge, direction,
                        eps, inv_mass, h0, rng)
    inner.n_leapfrog += outer.n_leapfrog
    inner.sum_metro += outer.sum_metro
    if outer.divergent or outer.turning:
        inner.divergent = outer.divergent
        inner.turning = outer.turning
        return inner
    total = np.logaddexp(inner.log_w, outer.log_w)
    if np.isfinite(outer.log_w) and np.log(rng.random()) < outer.log_w - total:
        inner.q_cand, inner.lp_cand, inner.g_cand = outer.q_cand, outer.lp_cand, outer.g_cand
    inner.log_w = total
    if direction == 1:
        inner.q_plus, inner.p_plus, inner.g_plus = outer.q_plus, outer.p_plus, outer.g_plus
    else:
        inner.q_minus, inner.p_minus, inner.g_minus = outer.q_minus, outer.p_minus, outer.g_minus
    inner.turning = _turned(inner.q_plus, inner.p_plus, inner.q_minus,
                            inner.p_minus, inv_mass)
    return inner


def _nuts_step(vag, q0, lp0, g0, rng, eps, inv_mass, max_depth):
    p0 = rng.standard_normal(q0.shape[0]) / np.sqrt(inv_mass)
    h0 = -lp0 + _kinetic(p0, inv_mass)
    q_minus, p_minus, g_minus = q0, p0, g0
    q_plus, p_plus, g_plus = q0, p0, g0
    q_cand, lp_cand, g_cand = q0, lp0, g0
    log_w = 0.0
    sum_metro = 0.0
    n_leapfrog = 0
    divergent = False
    hit_limit = True
    for depth in range(max_depth):
        direction = 1 if rng.random() < 0.5 else -1
        if direction == 1:
            sub = _build_tree(vag, depth, q_plus, p_plus, g_plus, 1,
                              eps, inv_mass, h0, rng)
        else:
            sub = _build_tree(vag, depth, q_minus, p_minus, g_minus, -1,
                              eps, inv_mass, h0, rng)
        sum_metro += sub.sum_metro
        n_leapfrog += sub.n_leapfrog
        if sub.divergent:
            divergent = True
            hit_limit = False
            break
        if sub.turning:
            hit_limit = False
            break
        total = np.logaddexp(log_w, sub.log_w)
        if np.isfinite(sub.log_w) and np.log(rng.random()) < sub.log_w - total:
            q_cand, lp_cand, g_cand = sub.q_cand, sub.lp_cand, sub.g_cand
        log_w = total
        if direction == 1:
            q_plus, p_plus, g_plus = sub.q_plus, sub.p_plus, sub.g_plus
        else:
            q_minus, p_minus, g_minus = sub.q_minus, sub.p_minus, sub.g_minus
        if _turned(q_plus, p_plus, q_minus, p_minus, inv_mass):
            hit_limit = False
            break
    accept_stat = sum_metro / max(n_leapfrog, 1)
    return q_cand, lp_cand, g_cand, accept_stat, divergent, hit_limit


def _rwm_step(vag, q0, lp0, g0, rng, eps, inv_mass):
    prop = q0 + eps * np.sqrt(inv_mass) * rng.standard_normal(q0.shape[0])
    lp_p, g_p = vag(prop)
    log_ratio = lp_p - lp0
    accept = np.isfinite(lp_p) and np.log(rng.random()) < log_ratio
    astat = float(np.exp(min(0.0, log_ratio))) if np.isfinite(lp_p) else 0.0
    if accept:
        return prop, lp_p, g_p, astat, False, False
    return q0, lp0, g0, astat, False, False


def _find_reasonable_eps(vag, q, lp, g, rng, inv_mass) -> float:
    """Double or halve a unit step until one leapfrog crosses 50% acceptance."""
    eps = 1.0
    p = rng.standard_normal(q.shape[0]) / np.sqrt(inv_mass)
    h0 = -lp + _kinetic(p, inv_mass)

    def energy_drop(e):
        q1, p1, _, lp1 = _leapfrog(vag, q, p, g, e, inv_mass)
        if not np.isfinite(lp1):
            return -np.inf
        return h0 - (-lp1 + _kinetic(p1, inv_mass))

    drop = energy_drop(eps)
    direction = 1.0 if drop > np.log(0.5) else -1.0
    for _ in range(50):
        if direction * drop <= direction * np.log(0.5):
            break
        eps *= 2.0 ** direction
        if not 1e-10 < eps < 1e10:
            break
        drop = energy_drop(eps)
    return eps


# ---------------------------------------------------------------------------
# chain driver


def _run_chain(vag, dim, config: SamplerConfig, chain: int):
    rng = np.random.default_rng(np.random.SeedSequence(entropy=config.seed,
                                                       spawn_key=(0, chain)))
    lp = -np.inf
    g = None
    q = None
    for _ in range(100):
        q = rng.uniform(-config.init_jitter, config.init_jitter, size=dim)
        lp, g = vag(q)
        if np.isfinite(lp) and np.all(np.isfinite(g)):
            break
    else:
        raise SamplerError(
            f"chain {chain}: no finite starting point in 100 attempts; "
            "check the target or supply an explicit init")

    nuts = config.algorithm == "nuts"
    inv_mass = np.ones(dim)
    eps = _find_reasonable_eps(vag, q, lp, g, rng, inv_mass) if nuts else 0.1
    da = _DualAveraging(eps, config.target_accept)
    windows = _mass_windows(config.warmup)
    welford = _Welford(dim)
    window_ix = 0

    positions = np.empty((config.samples, dim))
    log_posts = np.empty(config.samples)
    accepts = np.empty(config.samples)
    n_div = 0
    hits = 0

    for it in range(config.warmup + config.samples):
        if nuts:
            q, lp, g, astat, div, hit = _nuts_step(
                vag, q, lp, g, rng, eps, inv_mass, config.max_tree_depth)
        else:
            q, lp, g, astat, div, hit = _rwm_step(vag, q, lp, g, rng, eps, inv_mass)
        if it < config.warmup:
            eps = da.update(astat)
            if window_ix < len(windows):
                start, end = windows[window_ix]
                if start <= it:
                    welford.add(q)
                if it == end - 1:
                    inv_mass = welford.shrunk_variance()
                    welford.reset()
                    window_ix += 1
                    eps = _find_reasonable_eps(vag, q, lp, g, rng, inv_mass) if nuts else eps
                    da = _DualAveraging(eps, config.target_accept)
            if it == config.warmup - 1:
                eps = da.frozen()
        else:
            keep = it - config.warmup
            positions[keep] = q
            log_posts[keep] = lp
            accepts[keep] = astat
            n_div += int(div)
            hits += int(hit)
    logger.debug("chain %d done: eps=%.4g, %d divergences", chain, eps, n_div)
    return positions, log_posts, accepts, n_div, eps, inv_mass, hits


def sample(log_post, grad, dim: int, config: SamplerConfig,
           value_and_grad=None, names: list[str] | None = None,
           constrain=None) -> Draws:
    """Draw from an unconstrained target with analytic gradient.

    ``log_post`` and ``grad`` are callables on flat vectors of length
    ``dim``; passing a fused ``value_and_grad`` avoids evaluating them
    separately at every leapfrog point. Chains start from independent
    uniform(-jitter, jitter) points (retried until the density is finite)
    and run warmup plus retained iterations each.

    ``constrain``, if given, maps a matrix of unconstrained states to the
    reporting scale row-wise; stored positions pass through it so model
    draws come back with positive scale parameters and unit-interval
    mixing weights, while the target itself stays unconstrained.
    """
    if config.algorithm == "rwm":
        # gradient-free fallback: never touch grad, it may not exist
        def value_and_grad(u):
            return log_post(u), np.zeros(dim)
    elif value_and_grad is None:
        def value_and_grad(u):
            return log_post(u), np.asarray(grad(u), dtype=float)

    def safe_vag(u):
        lp, gr = value_and_grad(u)
        if not np.isfinite(lp):
            return -np.inf, np.zeros(dim)
        return float(lp), np.asarray(gr, dtype=float)

    chains = list(range(config.chains))
    if config.threads > 1 and config.chains > 1:
        with ThreadPoolExecutor(max_workers=min(config.threads, config.chains)) as pool:
            results = list(pool.map(
                lambda c: _run_chain(safe_vag, dim, config, c), chains))
    else:
        results = [_run_chain(safe_vag, dim, config, c) for c in chains]

    positions = np.stack([r[0] for r in results])
    if constrain is not None:
        positions = np.stack([constrain(chain) for chain in positions])
    return Draws(
        positions=positions,
        log_posts=np.stack([r[1] for r in results]),
        accept_stats=np.stack([r[2] for r in results]),
        divergences=np.array([r[3] for r in results], dtype=np.int64),
        step_sizes=np.array([r[4] for r in results]),
        mass_diag=np.stack([r[5] for r in results]),
        depth_limit_hits=np.array([r[6] for r in results], dtype=np.int64),
        names=names,
    )


# ---------------------------------------------------------------------------
# convergence diagnostics


def _split_chains(x: np.ndarray) -> np.ndarray:
    """(C, N) -> (2C, N//2), dropping the middle draw when N is odd."""
    c, n = x.shape
    half = n // 2
    return np.concatenate([x[:, :half], x[:, n - half:]], axis=0)


def _rhat_one(x: np.ndarray) -> float:
    sx = _split_chains(x)
    m, n = sx.shape
    if n < 2:
        return np.nan
    w = sx.var(axis=1, ddof=1).mean()
    b_over_n = sx.mean(axis=1).var(ddof=1)
    if w == 0:
        return np.nan
    var_hat = (n - 1) / n * w + b_over_n
    return float(np.sqrt(var_hat / w))


def _rank_normalize(x: np.ndarray) -> np.ndarray:
    flat = rankdata(x.reshape(-1), method="average")
    z = ndtri((flat - 0.375) / (x.size + 0.25))
    return z.reshape(x.shape)


def _ess_one(x: np.ndarray) -> float:
    """Effective sample size of rank-normalized split chains, pairwise-summed
    autocorrelations truncated at the first negative pair."""
    sx = _split_chains(_rank_normalize(x))
    m, n = sx.shape
    if n < 4 or np.allclose(sx.var(axis=1), 0):
        return np.nan
    # per-chain autocovariance via FFT, biased normalization
    size = 2 ** int(np.ceil(np.log2(2 * n)))
    centered = sx - sx.mean(axis=1, keepdims=True)
    f = np.fft.rfft(centered, size, axis=1)
    acov = np.fft.irfft(f * np.conj(f), size, axis=1)[:, :n].real / n
    chain_var = acov[:, 0] * n / (n - 1)
    w = chain_var.mean()
    b_over_n = sx.mean(axis=1).var(ddof=1)
    var_plus = (n - 1) / n * w + b_over_n
    if var_plus == 0:
        return np.nan
    rho = 1.0 - (w - acov.mean(axis=0)) / var_plus
    rho[0] = 1.0
    # Geyer initial monotone positive sequence over pair sums
    tau = 0.0
    prev_pair = np.inf
    t = 0
    while t + 1 < n:
        pair = rho[t] + rho[t + 1]
        if pair < 0:
            break
        pair = min(pair, prev_pair)
        tau += pair
        prev_pair = pair
        t += 2
    tau = max(2.0 * tau - 1.0, 1.0 / (m * n))
    return float(m * n / tau)


def diagnose(draws: Draws | np.ndarray, names: list[str] | None = None) -> Diagnostics:
    """Split R-hat, rank-normalized ESS, and divergence totals per parameter.

    Requires at least two chains; constant (zero-variance) parameters are
    reported as NaN and marked degenerate rather than failing the run.
    """
    if isinstance(draws, Draws):
        pos = draws.positions
        names = names or draws.names
        n_div = int(draws.divergences.sum())
    else:
        pos = np.asarray(draws, dtype=float)
        n_div = 0
    if pos.ndim != 3:
        raise ValueError("draws must have shape (chains, samples, dim)")
    if pos.shape[0] < 2:
        raise ValueError("at least two chains are required for split diagnostics")
    dim = pos.shape[2]
    rhat = np.empty(dim)
    ess = np.empty(dim)
    for k in range(dim):
        x = pos[:, :, k]
        rhat[k] = _rhat_one(x)
        ess[k] = _ess_one(x)
    degenerate = ~np.isfinite(rhat) | ~np.isfinite(ess)
    return Diagnostics(rhat=rhat, ess=ess, n_divergent=n_div,
                       degenerate=degenerate, names=names)
