"""Draw-by-draw augmentation and finite-population causal effect summaries.

For each retained posterior draw the latent pieces are re-imputed: every
student's stratum (from the categorical posterior over the strata compatible
with their observed arm and uptake), the three potential mediator values
(friends' uptake share under each arm), and any counterfactual outcome the
requested effects need.

Counterfactual outcomes use common random numbers: one (zero-component,
count-component) uniform pair per student per draw feeds an inverse-CDF
draw of the zero-inflated Poisson at whatever (arm, mediator) pair is
requested. Both sides of a contrast therefore reuse the same noise, the
mediation decompositions hold to floating-point exactness, and arm pairs
whose outcome parameters are tied produce literally identical counts.
Whenever the requested (arm, mediator) pair is outcome-equivalent to the
student's realized pair (same tied parameter slots, same mediator value)
the observed outcome is returned unchanged, so realized values anchor every
augmented draw.

Augmentation for draw ``d`` uses the seed substream (seed, (1, d)); given a
draws file and a seed the whole pipeline is deterministic.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import poisson

from .data import StudyData, FriendshipNetwork, Student
from .model import ParamSpace, Parameters, _ModelContext, _forward, _logit
from .sampler import Draws
from .strata import POTENTIAL_M, STRATUM_CODES, STRATUM_INDEX, PrincipalStratum

logger = logging.getLogger(__name__)

_MU_CAP = 1e12  # rate cap keeping inverse-CDF draws finite for absurd states


def zip_quantile(u_zero, u_pois, phi, mu) -> np.ndarray:
    """Inverse-CDF draw from the zero-inflated Poisson.

    ``u_zero`` decides the structural-zero component, ``u_pois`` picks the
    Poisson quantile otherwise; reusing the same uniforms across calls gives
    common-random-number draws that move smoothly with (phi, mu).
    """
    u_zero = np.asarray(u_zero, dtype=float)
    u_pois = np.asarray(u_pois, dtype=float)
    mu = np.minimum(np.asarray(mu, dtype=float), _MU_CAP)
    counts = poisson.ppf(np.maximum(u_pois, 1e-300), mu)
    out = np.where(u_zero < phi, 0.0, counts)
    return out.astype(np.int64)


def _strata_weights(ctx: _ModelContext, params: Parameters):
    """Per-student posterior stratum weights t and normalizers ll."""
    v_phi = _logit(np.clip(params.phi, 1e-300, 1.0))
    ll, t, *_ = _forward(ctx, params.gamma, params.delta, params.a, params.alpha,
                         params.beta_s, params.beta_x, params.b, v_phi)
    return ll, t


def _impute_strata_idx(data: StudyData, params: Parameters, rng,
                       ctx: _ModelContext | None = None) -> np.ndarray:
    ctx = ctx or _ModelContext(data, params.space)
    ll, t = _strata_weights(ctx, params)
    bad = ~np.isfinite(ll)
    if np.any(bad):
        sid = data.student_ids[int(np.flatnonzero(bad)[0])]
        raise ValueError(f"all stratum weights vanished for student {sid!r}")
    with np.errstate(invalid="ignore"):
        p = np.exp(t - ll[:, None])
    cum = np.cumsum(p, axis=1)
    u = rng.random(data.n_students)
    ge = cum >= u[:, None]
    idx = ge.argmax(axis=1)
    none = ~ge.any(axis=1)  # u landed past the (rounded) total mass
    if np.any(none):
        last = 3 - (p[none, ::-1] > 0).argmax(axis=1)
        idx[none] = last
    return idx


def impute_strata(data: StudyData, params: Parameters, rng) -> dict[str, PrincipalStratum]:
    """Draw one compatible stratum per student from its posterior weights.

    Weights are membership probability times the outcome density of the
    observed count under that stratum and the realized arm; only strata
    compatible with the observed (arm, uptake) get mass.
    """
    idx = _impute_strata_idx(data, params, rng)
    return {sid: PrincipalStratum(STRATUM_CODES[k]) for sid, k in zip(data.student_ids, idx)}


def potential_mediator(strata: dict[str, PrincipalStratum], network: FriendshipNetwork,
                       z: int) -> dict[str, float]:
    """Each student's friends'-uptake share if every class were on arm ``z``.

    Friends' uptake under ``z`` is read off their stratum code; friendless
    students get 0.0 per the container convention.
    """
    if z not in (1, 2, 3):
        raise ValueError(f"arm must be 1, 2 or 3, got {z!r}")
    out = {}
    for sid in strata:
        nbrs = network.neighbors_of(sid)
        if not nbrs:
            out[sid] = 0.0
            continue
        vals = [strata[t].potential_treatment(z) for t in nbrs]
        out[sid] = float(sum(vals)) / len(nbrs)
    return out


@dataclass(eq=False)
class AugmentedDraw:
    """One posterior draw with latent strata and counterfactuals filled in.

    ``g_idx`` indexes :data:`STRATUM_CODES`; ``m_pot``/``s_pot`` are the
    (students, 3 arms) potential uptakes and mediator values. Counterfactual
    outcomes come from :meth:`potential_outcome`, which caches by (arm,
    mediator source) so repeated requests reuse identical arrays.
    """

    data: StudyData
    params: Parameters
    g_idx: np.ndarray
    m_pot: np.ndarray
    s_pot: np.ndarray
    u_zero: np.ndarray
    u_pois: np.ndarray
    _xb: np.ndarray = field(repr=False, default=None)
    _obs_slot_a: np.ndarray = field(repr=False, default=None)
    _obs_slot_b: np.ndarray = field(repr=False, default=None)
    _cache: dict = field(repr=False, default_factory=dict)

    def __post_init__(self):
        sp = self.params.space
        if self._xb is None:
            self._xb = self.data.x_outcome @ self.params.beta_x \
                + self.params.b[self.data.class_idx]
        z_col = self.data.z - 1
        self._obs_slot_a = sp._alpha_slot[self.g_idx, z_col]
        self._obs_slot_b = sp._beta_slot[self.g_idx, z_col]

    def strata_map(self) -> dict[str, PrincipalStratum]:
        return {sid: PrincipalStratum(STRATUM_CODES[k])
                for sid, k in zip(self.data.student_ids, self.g_idx)}

    def members(self, g) -> np.ndarray:
        return self.g_idx == _as_idx(g)

    def potential_outcome(self, z: int, s, tag=None) -> np.ndarray:
        """Per-student counts under arm ``z`` with the mediator held at ``s``.

        ``s`` is a scalar or per-student vector. Students whose realized
        (arm, mediator) pair maps to the same outcome parameters as the
        request keep their observed count; everyone else gets the
        common-random-number inverse-CDF draw. ``tag`` labels vector sources
        for caching (scalars cache by value).
        """
        if z not in (1, 2, 3):
            raise ValueError(f"arm must be 1, 2 or 3, got {z!r}")
        s_arr = np.asarray(s, dtype=float)
        if s_arr.ndim == 0:
            key = (z, float(s_arr))
            s_arr = np.broadcast_to(s_arr, (self.data.n_students,))
        else:
            key = (z, tag) if tag is not None else None
        if key is not None and key in self._cache:
            return self._cache[key]
        sp = self.params.space
        slot_a = sp._alpha_slot[self.g_idx, z - 1]
        slot_b = sp._beta_slot[self.g_idx, z - 1]
        with np.errstate(over="ignore"):
            mu = np.exp(self.params.alpha[slot_a]
                        + self.params.beta_s[slot_b] * s_arr + self._xb)
        phi = self.params.phi[slot_a]
        y = zip_quantile(self.u_zero, self.u_pois, phi, mu)
        anchored = (slot_a == self._obs_slot_a) & (slot_b == self._obs_slot_b) \
            & (s_arr == self.data.s_obs)
        y = np.where(anchored, self.data.y_obs, y)
        if key is not None:
            self._cache[key] = y
        return y

    def natural_outcome(self, z: int) -> np.ndarray:
        """Counts under arm ``z`` with the mediator at its arm-``z`` value."""
        return self.potential_outcome(z, self.s_pot[:, z - 1], tag=("nat", z))


def augment(data: StudyData, params: Parameters, draw_index: int, seed: int,
            ctx: _ModelContext | None = None) -> AugmentedDraw:
    """Impute strata, potential mediators, and the outcome-noise uniforms for
    one posterior draw, on the (seed, (1, draw_index)) random substream."""
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed,
                                                       spawn_key=(1, draw_index)))
    g_idx = _impute_strata_idx(data, params, rng, ctx=ctx)
    u_zero = rng.random(data.n_students)
    u_pois = rng.random(data.n_students)
    m_pot = POTENTIAL_M[g_idx]
    s_pot = np.column_stack([data.neighbor_mean(m_pot[:, k]) for k in range(3)])
    return AugmentedDraw(data=data, params=params, g_idx=g_idx, m_pot=m_pot,
                         s_pot=s_pot, u_zero=u_zero, u_pois=u_pois)


def impute_outcome(student, g, z: int, s: float, params: Parameters, rng,
                   data: StudyData) -> int:
    """Counterfactual count for one student at (stratum, arm, mediator).

    Returns the observed count when the request is outcome-equivalent to the
    student's realized (arm, mediator) pair (in which case ``rng`` is left
    untouched); otherwise draws once from the ZIP at the implied (phi, mu).
    """
    if not 0.0 <= s <= 1.0:
        raise ValueError("mediator value must lie in [0, 1]")
    if z not in (1, 2, 3):
        raise ValueError(f"arm must be 1, 2 or 3, got {z!r}")
    if isinstance(student, Student):
        i = data.student_ids.index(student.student_id)
    elif isinstance(student, str):
        i = data.student_ids.index(student)
    else:
        i = int(student)
    sp = params.space
    gi = _as_idx(g)
    z_obs = int(data.z[i])
    same_slots = (sp._alpha_slot[gi, z - 1] == sp._alpha_slot[gi, z_obs - 1]
                  and sp._beta_slot[gi, z - 1] == sp._beta_slot[gi, z_obs - 1])
    if same_slots and s == data.s_obs[i]:
        return int(data.y_obs[i])
    slot_a = sp.alpha_slot(STRATUM_CODES[gi], z)
    slot_b = sp.beta_s_slot(STRATUM_CODES[gi], z)
    mu = np.exp(params.alpha[slot_a] + params.beta_s[slot_b] * s
                + data.x_outcome[i] @ params.beta_x
                + params.b[data.class_idx[i]])
    y = zip_quantile(rng.random(), rng.random(), params.phi[slot_a], mu)
    return int(y)


def _as_idx(g) -> int:
    code = g.code if isinstance(g, PrincipalStratum) else str(g)
    try:
        return STRATUM_INDEX[code]
    except KeyError:
        raise ValueError(f"unknown stratum code {code!r}") from None


def _stratum_mean(aug: AugmentedDraw, g, diff: np.ndarray) -> float:
    sel = aug.members(g)
    if not sel.any():
        return float("nan")
    return float(diff[sel].mean())


def effect_pce(aug: AugmentedDraw, g, z: int, z_cmp: int) -> float:
    """Stratum mean of Y(z, S(z)) - Y(z', S(z')): the total effect of
    encouragement z versus z' for stratum g, in this draw."""
    d = aug.natural_outcome(z) - aug.natural_outcome(z_cmp)
    return _stratum_mean(aug, g, d)


def effect_nde(aug: AugmentedDraw, g, z: int, z_cmp: int, mediator_arm: int) -> float:
    """Stratum mean of Y(z, S(z'')) - Y(z', S(z'')): the direct part of the
    contrast, holding the mediator at its arm-z'' potential value."""
    if z == z_cmp:
        raise ValueError("direct effect needs two distinct arms")
    if mediator_arm not in (z, z_cmp):
        raise ValueError("mediator arm must be one of the contrasted arms")
    s = aug.s_pot[:, mediator_arm - 1]
    tag = ("S", mediator_arm)
    d = aug.potential_outcome(z, s, tag) - aug.potential_outcome(z_cmp, s, tag)
    return _stratum_mean(aug, g, d)


def effect_nie(aug: AugmentedDraw, g, fixed_arm: int, z: int, z_cmp: int) -> float:
    """Stratum mean of Y(z'', S(z)) - Y(z'', S(z')): the mediated part,
    moving only the friends'-uptake share between its z and z' values."""
    if z == z_cmp:
        raise ValueError("indirect effect needs two distinct mediator arms")
    if fixed_arm not in (z, z_cmp):
        raise ValueError("fixed arm must be one of the contrasted arms")
    d = aug.potential_outcome(fixed_arm, aug.s_pot[:, z - 1], ("S", z)) \
        - aug.potential_outcome(fixed_arm, aug.s_pot[:, z_cmp - 1], ("S", z_cmp))
    return _stratum_mean(aug, g, d)


def effect_cde(aug: AugmentedDraw, g, z: int, z_cmp: int, s_star: float) -> float:
    """Stratum mean of Y(z, s*) - Y(z', s*) at a researcher-pinned share."""
    if not 0.0 <= s_star <= 1.0:
        raise ValueError("pinned mediator value must lie in [0, 1]")
    d = aug.potential_outcome(z, s_star) - aug.potential_outcome(z_cmp, s_star)
    return _stratum_mean(aug, g, d)


def effect_cse(aug: AugmentedDraw, g, z: int, s_hi: float, s_lo: float) -> float:
    """Stratum mean of Y(z, s_hi) - Y(z, s_lo): the spillover of moving the
    pinned friends' share within one arm."""
    for s in (s_hi, s_lo):
        if not 0.0 <= s <= 1.0:
            raise ValueError("pinned mediator values must lie in [0, 1]")
    d = aug.potential_outcome(z, s_hi) - aug.potential_outcome(z, s_lo)
    return _stratum_mean(aug, g, d)


# ---------------------------------------------------------------------------
# summaries


@dataclass(frozen=True)
class EstimandSummary:
    """Posterior summary of one per-draw effect sequence.

    ``quantiles`` holds the 2.5/5/95/97.5 percent points; ``n_missing``
    counts draws whose stratum was empty (excluded from all statistics).
    """

    name: str
    stratum: str | None
    args: dict
    mean: float
    sd: float
    quantiles: dict[str, float]
    pr_positive: float
    n_draws: int
    n_missing: int


def summarize(per_draw_values, name: str = "", stratum: str | None = None,
              args: dict | None = None) -> EstimandSummary:
    """Mean, SD, central quantiles, and Pr(>0) of a per-draw sequence,
    skipping missing (NaN) draws. Raises if every draw is missing."""
    vals = np.asarray(list(per_draw_values), dtype=float)
    valid = vals[~np.isnan(vals)]
    n_missing = int(np.isnan(vals).sum())
    if len(valid) == 0:
        raise ValueError("no non-missing draws to summarize")
    qs = np.quantile(valid, [0.025, 0.05, 0.95, 0.975])
    return EstimandSummary(
        name=name,
        stratum=stratum,
        args=dict(args or {}),
        mean=float(valid.mean()),
        sd=float(valid.std(ddof=1)) if len(valid) > 1 else 0.0,
        quantiles={"2.5": float(qs[0]), "5": float(qs[1]),
                   "95": float(qs[2]), "97.5": float(qs[3])},
        pr_positive=float((valid > 0).mean()),
        n_draws=int(len(valid)),
        n_missing=n_missing,
    )


# ---------------------------------------------------------------------------
# request plumbing shared by the pipeline and the command line


@dataclass(frozen=True)
class EstimandRequest:
    """One (effect, stratum, arguments) cell of the output table."""

    name: str
    stratum: str
    z: int
    z_cmp: int | None = None
    mediator_arm: int | None = None
    fixed_arm: int | None = None
    s_star: float | None = None
    s_hi: float | None = None
    s_lo: float | None = None

    def evaluate(self, aug: AugmentedDraw) -> float:
        if self.name == "pce":
            return effect_pce(aug, self.stratum, self.z, self.z_cmp)
        if self.name == "nde":
            return effect_nde(aug, self.stratum, self.z, self.z_cmp, self.mediator_arm)
        if self.name == "nie":
            return effect_nie(aug, self.stratum, self.fixed_arm, self.z, self.z_cmp)
        if self.name == "cde":
            return effect_cde(aug, self.stratum, self.z, self.z_cmp, self.s_star)
        if self.name == "cse":
            return effect_cse(aug, self.stratum, self.z, self.s_hi, self.s_lo)
        raise ValueError(f"unknown estimand {self.name!r}")

    def args_dict(self) -> dict:
        out = {"z": self.z}
        for k in ("z_cmp", "mediator_arm", "fixed_arm", "s_star", "s_hi", "s_lo"):
            v = getattr(self, k)
            if v is not None:
                out[k] = v
        return out


def default_requests(contrasts=((2, 1), (3, 1), (3, 2)),
                     s_grid=(0.0, 0.1, 0.2, 0.3, 0.4, 0.5),
                     cse_pairs=None) -> list[EstimandRequest]:
    """The standard output table: total/direct/indirect effects for every
    stratum and contrast, pinned-share direct effects over ``s_grid``, and
    within-arm spillovers between grid levels."""
    reqs = []
    if cse_pairs is None:
        cse_pairs = [(hi, s_grid[0]) for hi in s_grid[1:]]
    for g in STRATUM_CODES:
        for z, zc in contrasts:
            reqs.append(EstimandRequest("pce", g, z, z_cmp=zc))
            for med in (z, zc):
                reqs.append(EstimandRequest("nde", g, z, z_cmp=zc, mediator_arm=med))
            for fix in (zc, z):
                reqs.append(EstimandRequest("nie", g, z, z_cmp=zc, fixed_arm=fix))
        for z, zc in contrasts:
            for s in s_grid:
                reqs.append(EstimandRequest("cde", g, z, z_cmp=zc, s_star=float(s)))
        for z in (1, 2, 3):
            for hi, lo in cse_pairs:
                reqs.append(EstimandRequest("cse", g, z, s_hi=float(hi), s_lo=float(lo)))
    return reqs


def _params_iter(draws, space: ParamSpace):
    if isinstance(draws, Draws):
        flat = draws.flat()
    else:
        flat = np.atleast_2d(np.asarray(draws, dtype=float))
    if flat.shape[1] != space.dim:
        raise ValueError(f"draw rows have {flat.shape[1]} columns, expected {space.dim}")
    return flat


def compute_estimands(data: StudyData, draws, requests, seed: int = 0,
                      space: ParamSpace | None = None):
    """Run one augmentation pass per retained draw and summarize everything.

    ``draws`` is constrained-scale: a fit-level :class:`Draws` or an
    (n_draws, dim) matrix in :class:`ParamSpace` column order. Returns
    (estimand summaries, profile dict, homophily dict).
    """
    space = space or ParamSpace.for_data(data)
    flat = _params_iter(draws, space)
    n_draws = flat.shape[0]
    ctx = _ModelContext(data, space)
    n_req = len(requests)
    values = np.full((n_req, n_draws), np.nan)
    shares = np.zeros((n_draws, 4))
    cov_sum = np.zeros((4, data.x_raw.shape[1]))
    cov_cnt = np.zeros(4, dtype=np.int64)
    homo_sum = np.zeros((4, 4))
    homo_cnt = np.zeros(4, dtype=np.int64)
    with_friends = data.degree > 0

    for d in range(n_draws):
        params = space.from_constrained(flat[d])
        aug = augment(data, params, d, seed, ctx=ctx)
        for r, req in enumerate(requests):
            values[r, d] = req.evaluate(aug)
        shares[d] = np.bincount(aug.g_idx, minlength=4) / data.n_students
        friend_share = np.column_stack([
            data.neighbor_mean((aug.g_idx == k).astype(float)) for k in range(4)])
        for k in range(4):
            sel = aug.g_idx == k
            if sel.any():
                cov_sum[k] += data.x_raw[sel].mean(axis=0)
                cov_cnt[k] += 1
            hsel = sel & with_friends
            if hsel.any():
                homo_sum[k] += friend_share[hsel].mean(axis=0)
                homo_cnt[k] += 1

    summaries = []
    for r, req in enumerate(requests):
        if np.isnan(values[r]).all():
            # stratum empty in every draw: keep the table row, all stats missing
            summaries.append(EstimandSummary(
                name=req.name, stratum=req.stratum, args=req.args_dict(),
                mean=float("nan"), sd=float("nan"),
                quantiles={"2.5": float("nan"), "5": float("nan"),
                           "95": float("nan"), "97.5": float("nan")},
                pr_positive=float("nan"), n_draws=0, n_missing=n_draws))
        else:
            summaries.append(summarize(values[r], name=req.name,
                                       stratum=req.stratum, args=req.args_dict()))
    profiles = _profile_dict(data, shares, cov_sum, cov_cnt, n_draws)
    homophily = {
        "strata": list(STRATUM_CODES),
        "matrix": [
            [float(homo_sum[k, j] / homo_cnt[k]) if homo_cnt[k] else float("nan")
             for j in range(4)]
            for k in range(4)
        ],
        "rows_present": [int(c) for c in homo_cnt],
        "n_draws": n_draws,
    }
    return summaries, profiles, homophily


def _profile_dict(data, shares, cov_sum, cov_cnt, n_draws):
    qs = np.quantile(shares, [0.05, 0.95], axis=0)
    return {
        "strata": list(STRATUM_CODES),
        "n_draws": int(n_draws),
        "shares": {
            "mean": [float(v) for v in shares.mean(axis=0)],
            "sd": [float(v) for v in (shares.std(axis=0, ddof=1) if n_draws > 1
                                      else np.zeros(4))],
            "q5": [float(v) for v in qs[0]],
            "q95": [float(v) for v in qs[1]],
        },
        "covariate_means": {
            name: {
                STRATUM_CODES[k]: (float(cov_sum[k, j] / cov_cnt[k]) if cov_cnt[k]
                                   else None)
                for k in range(4)
            }
            for j, name in enumerate(data.covariate_spec.names)
        },
        "rows_present": [int(c) for c in cov_cnt],
    }


def stratum_profiles(draws, data: StudyData, seed: int = 0,
                     space: ParamSpace | None = None) -> dict:
    """Posterior stratum shares and stratum-conditional covariate means
    (original covariate units), one augmentation pass per draw."""
    _, profiles, _ = compute_estimands(data, draws, [], seed=seed, space=space)
    return profiles


def homophily_matrix(draws, data: StudyData, seed: int = 0,
                     space: ParamSpace | None = None) -> np.ndarray:
    """4x4 posterior means: row g holds the average friend-stratum shares of
    students imputed to stratum g (friendless students excluded)."""
    _, _, homophily = compute_estimands(data, draws, [], seed=seed, space=space)
    return np.array(homophily["matrix"], dtype=float)


# ---------------------------------------------------------------------------
# table writers

ESTIMAND_COLUMNS = ["estimand", "stratum", "z", "z_cmp", "mediator_arm", "fixed_arm",
                    "s_star", "s_hi", "s_lo", "mean", "sd", "q2.5", "q5", "q95",
                    "q97.5", "pr_gt0", "n_draws", "n_missing"]


def summary_rows(summaries) -> list[list]:
    rows = []
    for s in summaries:
        a = s.args
        rows.append([
            s.name, s.stratum, a.get("z", ""), a.get("z_cmp", ""),
            a.get("mediator_arm", ""), a.get("fixed_arm", ""),
            _fmt(a.get("s_star")), _fmt(a.get("s_hi")), _fmt(a.get("s_lo")),
            repr(s.mean), repr(s.sd),
            repr(s.quantiles["2.5"]), repr(s.quantiles["5"]),
            repr(s.quantiles["95"]), repr(s.quantiles["97.5"]),
            repr(s.pr_positive), s.n_draws, s.n_missing,
        ])
    return rows


def _fmt(v):
    return "" if v is None else repr(float(v))
