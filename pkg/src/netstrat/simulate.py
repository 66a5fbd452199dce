"""Synthetic clustered-encouragement studies with complete ground truth.

The generator draws covariates, class intercepts, latent strata, a
within-class random friendship graph, and observed outcomes from the same
model family the package fits, then keeps everything a real study hides:
true strata, all potential uptakes and mediator values, and a full
counterfactual outcome table built from the same per-student uniform pair
used for the observed outcome. True finite-population estimand values are
therefore exact averages, usable as oracles for posterior recovery checks.

``brute_force_likelihood`` is an independent straight-line oracle for the
mixture likelihood: it enumerates every joint stratum assignment compatible
with the observed (arm, uptake) cells and sums the products directly, using
its own slot lookup and plain ``math`` arithmetic.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from .data import ClassRoom, CovariateSpec, FriendshipNetwork, Student, StudyData
from .estimands import EstimandRequest, default_requests, zip_quantile
from .model import ParamSpace, Parameters, params_to_json
from .strata import POTENTIAL_M, STRATUM_CODES, STRATUM_INDEX

# stratum-share defaults are NeverTaker-heavy with RewardCompliers second,
# the mix a reward-driven encouragement study actually produces
_DEFAULT_GAMMA = (-1.56, 1.15, 1.82)


@dataclass(frozen=True)
class SimConfig:
    """Generator settings: design sizes, network density, and the true
    parameter values (coefficient layout matches :class:`ParamSpace`)."""

    n_classes: int = 60
    class_size: int = 20
    edge_prob: float = 0.25
    seed: int = 0
    gamma: tuple = _DEFAULT_GAMMA
    delta: tuple = ((0.2, -0.1), (0.3, 0.2), (-0.2, 0.3))
    sigma_a: float = 0.3
    alpha: tuple = (0.5, 0.1, 0.2, -0.1, 0.6, 0.3, 0.4, 0.0, 0.7)
    beta_s: tuple = (0.6, 0.8, 1.0)
    beta_x: tuple = (0.2, -0.1)
    sigma_b: float = 0.2
    phi: tuple = (0.5, 0.4, 0.45, 0.55, 0.45, 0.35, 0.4, 0.5, 0.35)
    cov_names: tuple = ("x1", "x2")
    cov_kinds: tuple = ("binary", "continuous")
    homophily_weight: float = 0.0
    free_beta_s3: bool = False
    s_grid: tuple = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5)

    def __post_init__(self):
        if self.n_classes % 3 != 0 or self.n_classes <= 0:
            raise ValueError("n_classes must be a positive multiple of 3")
        if not 0.0 <= self.edge_prob <= 1.0:
            raise ValueError("edge_prob must lie in [0, 1]")
        if self.class_size < 1:
            raise ValueError("class_size must be positive")
        if len(self.cov_names) != len(self.cov_kinds):
            raise ValueError("cov_names and cov_kinds must align")
        if not 0.0 <= self.homophily_weight < 1.0:
            raise ValueError("homophily_weight must lie in [0, 1)")


@dataclass(eq=False)
class GroundTruth:
    """Everything the generator knows that an analyst would not."""

    config: SimConfig
    params: Parameters  # on the raw covariate scale
    student_ids: tuple
    g_idx: np.ndarray
    m_pot: np.ndarray
    s_pot: np.ndarray
    a: np.ndarray
    b: np.ndarray
    u_zero: np.ndarray
    u_pois: np.ndarray
    x_raw: np.ndarray
    class_idx: np.ndarray
    natural_y: np.ndarray = field(default=None)  # (3 arms, 3 mediator arms, N)
    grid_y: np.ndarray = field(default=None)     # (3 arms, len(s_grid), N)

    def s_grid_tuple(self) -> tuple:
        return tuple(float(s) for s in self.config.s_grid)

    def true_shares(self) -> np.ndarray:
        return np.bincount(self.g_idx, minlength=4) / len(self.g_idx)

    def potential_outcome(self, z: int, s) -> np.ndarray:
        """True counterfactual counts under arm ``z`` at mediator ``s``,
        from the stored per-student uniform pair (common random numbers)."""
        sp = self.params.space
        slot_a = sp._alpha_slot[self.g_idx, z - 1]
        slot_b = sp._beta_slot[self.g_idx, z - 1]
        s_arr = np.broadcast_to(np.asarray(s, dtype=float), self.g_idx.shape)
        with np.errstate(over="ignore"):
            mu = np.exp(self.params.alpha[slot_a]
                        + self.params.beta_s[slot_b] * s_arr
                        + self.x_raw @ self.params.beta_x
                        + self.params.b[self.class_idx])
        return zip_quantile(self.u_zero, self.u_pois, self.params.phi[slot_a], mu)


def generate(config: SimConfig) -> tuple[StudyData, GroundTruth]:
    """Draw one synthetic study; bit-deterministic given ``config.seed``.

    Random draws happen in a fixed order (arm assignment, covariates, class
    intercepts, strata, edges, outcome uniforms) so any change to one block
    cannot silently reshuffle another.
    """
    rng = np.random.default_rng(np.random.SeedSequence(entropy=config.seed))
    J, size = config.n_classes, config.class_size
    n = J * size
    class_ids = tuple(f"c{j + 1:03d}" for j in range(J))
    student_ids = tuple(f"s{i + 1:05d}" for i in range(n))
    class_idx = np.repeat(np.arange(J), size)

    perm = rng.permutation(J)
    z_class = np.empty(J, dtype=np.int64)
    third = J // 3
    z_class[perm[:third]] = 1
    z_class[perm[third:2 * third]] = 2
    z_class[perm[2 * third:]] = 3
    z_student = z_class[class_idx]

    k = len(config.cov_names)
    x_raw = np.empty((n, k))
    for j, kind in enumerate(config.cov_kinds):
        if kind == "binary":
            x_raw[:, j] = rng.integers(0, 2, size=n)
        else:
            x_raw[:, j] = rng.standard_normal(n)

    a = rng.normal(0.0, config.sigma_a, size=J)
    b = rng.normal(0.0, config.sigma_b, size=J)

    gamma = np.asarray(config.gamma, dtype=float)
    delta = np.asarray(config.delta, dtype=float).reshape(3, k)
    eta = np.zeros((n, 4))
    eta[:, 1:] = gamma + x_raw @ delta.T + a[class_idx][:, None]
    eta -= eta.max(axis=1, keepdims=True)
    pi = np.exp(eta)
    pi /= pi.sum(axis=1, keepdims=True)
    u_g = rng.random(n)
    g_idx = (np.cumsum(pi, axis=1) < u_g[:, None]).sum(axis=1)
    g_idx = np.minimum(g_idx, 3)

    edges = []
    w = config.homophily_weight
    for j in range(J):
        rows = np.arange(j * size, (j + 1) * size)
        for ii in range(size):
            for jj in range(ii + 1, size):
                p = config.edge_prob
                if w > 0 and k > 0:
                    same = x_raw[rows[ii], 0] == x_raw[rows[jj], 0]
                    p = min(1.0, p * (1 + w)) if same else p * (1 - w)
                if rng.random() < p:
                    edges.append((student_ids[rows[ii]], student_ids[rows[jj]]))

    u_zero = rng.random(n)
    u_pois = rng.random(n)

    m_pot = POTENTIAL_M[g_idx]
    m_obs = m_pot[np.arange(n), z_student - 1]

    spec = CovariateSpec(tuple(config.cov_names), tuple(config.cov_kinds),
                         (True,) * k, (True,) * k)
    students0 = tuple(
        Student(student_id=student_ids[i], class_id=class_ids[class_idx[i]],
                m_obs=int(m_obs[i]), y_obs=0,
                covariates=tuple(float(v) for v in x_raw[i]))
        for i in range(n)
    )
    classes = tuple(
        ClassRoom(class_id=class_ids[j], z=int(z_class[j]),
                  member_ids=tuple(student_ids[j * size:(j + 1) * size]))
        for j in range(J)
    )
    network = FriendshipNetwork(edges)
    scaffold = StudyData(students=students0, classes=classes, network=network,
                         covariate_spec=spec)

    s_pot = np.column_stack([scaffold.neighbor_mean(m_pot[:, c]) for c in range(3)])

    space = ParamSpace(class_labels=class_ids,
                       strata_cov_names=tuple(config.cov_names),
                       outcome_cov_names=tuple(config.cov_names),
                       free_beta_s3=config.free_beta_s3)
    params = Parameters(
        space=space, gamma=gamma, delta=delta, a=a, sigma_a=config.sigma_a,
        alpha=np.asarray(config.alpha, dtype=float),
        beta_s=np.asarray(config.beta_s, dtype=float),
        beta_x=np.asarray(config.beta_x, dtype=float),
        b=b, sigma_b=config.sigma_b, phi=np.asarray(config.phi, dtype=float),
    )
    truth = GroundTruth(config=config, params=params, student_ids=student_ids,
                        g_idx=g_idx, m_pot=m_pot, s_pot=s_pot, a=a, b=b,
                        u_zero=u_zero, u_pois=u_pois, x_raw=x_raw,
                        class_idx=class_idx)

    s_obs = s_pot[np.arange(n), z_student - 1]
    y_obs = np.empty(n, dtype=np.int64)
    for zval in (1, 2, 3):
        sel = z_student == zval
        y_obs[sel] = truth.potential_outcome(zval, s_obs)[sel]

    truth.natural_y = np.stack([
        np.stack([truth.potential_outcome(zv, s_pot[:, src]) for src in range(3)])
        for zv in (1, 2, 3)
    ])
    truth.grid_y = np.stack([
        np.stack([truth.potential_outcome(zv, float(s)) for s in config.s_grid])
        for zv in (1, 2, 3)
    ])

    students = tuple(
        Student(student_id=s.student_id, class_id=s.class_id, m_obs=s.m_obs,
                y_obs=int(y_obs[i]), covariates=s.covariates)
        for i, s in enumerate(students0)
    )
    data = StudyData(students=students, classes=classes, network=network,
                     covariate_spec=spec)
    return data, truth


def oracle_estimands(truth: GroundTruth, requests=None) -> dict:
    """Exact finite-population effect values from the stored truth.

    Returns a map from each request's key tuple to ``{"value", "n_members"}``;
    empty true strata yield NaN with a zero member count.
    """
    if requests is None:
        requests = default_requests(s_grid=truth.s_grid_tuple())
    out = {}
    for req in requests:
        gi = STRATUM_INDEX[req.stratum]
        sel = truth.g_idx == gi
        if req.name == "pce":
            diff = truth.natural_y[req.z - 1, req.z - 1] \
                - truth.natural_y[req.z_cmp - 1, req.z_cmp - 1]
        elif req.name == "nde":
            src = req.mediator_arm - 1
            diff = truth.natural_y[req.z - 1, src] - truth.natural_y[req.z_cmp - 1, src]
        elif req.name == "nie":
            diff = truth.natural_y[req.fixed_arm - 1, req.z - 1] \
                - truth.natural_y[req.fixed_arm - 1, req.z_cmp - 1]
        elif req.name == "cde":
            diff = truth.potential_outcome(req.z, req.s_star) \
                - truth.potential_outcome(req.z_cmp, req.s_star)
        elif req.name == "cse":
            diff = truth.potential_outcome(req.z, req.s_hi) \
                - truth.potential_outcome(req.z, req.s_lo)
        else:
            raise ValueError(f"unknown estimand {req.name!r}")
        value = float(diff[sel].mean()) if sel.any() else float("nan")
        out[request_key(req)] = {"value": value, "n_members": int(sel.sum())}
    return out


def request_key(req: EstimandRequest) -> tuple:
    return (req.name, req.stratum, req.z, req.z_cmp, req.mediator_arm,
            req.fixed_arm, req.s_star, req.s_hi, req.s_lo)


def truth_to_dict(truth: GroundTruth) -> dict:
    """JSON-ready view of the ground truth (config, true parameters, strata,
    and exact estimand values)."""
    ests = oracle_estimands(truth)
    return {
        "config": asdict(truth.config),
        "params": params_to_json(truth.params),
        "strata": {sid: STRATUM_CODES[k]
                   for sid, k in zip(truth.student_ids, truth.g_idx)},
        "estimands": [
            {"name": k[0], "stratum": k[1],
             "args": {n: v for n, v in zip(
                 ("z", "z_cmp", "mediator_arm", "fixed_arm", "s_star", "s_hi", "s_lo"),
                 k[2:]) if v is not None},
             "value": rec["value"], "n_members": rec["n_members"]}
            for k, rec in ests.items()
        ],
    }


# ---------------------------------------------------------------------------
# enumeration oracle for the mixture likelihood


def _oracle_slots(free_beta_s3: bool):
    alpha_idx = {}
    beta_idx = {}
    for gi, code in enumerate(STRATUM_CODES):
        alpha_idx[(code, 1)] = gi
        alpha_idx[(code, 2)] = 4 + gi
        alpha_idx[(code, 3)] = 8 if code == "001" else 4 + gi
        beta_idx[(code, 1)] = 0
        beta_idx[(code, 2)] = 1
        beta_idx[(code, 3)] = 2 if code == "001" else (3 if free_beta_s3 else 1)
    return alpha_idx, beta_idx


def brute_force_likelihood(data: StudyData, params: Parameters) -> float:
    """Exhaustive-enumeration log likelihood for tiny studies (<= 8 students).

    Sums the joint probability of every stratum assignment compatible with
    the observed cells, in plain scalar arithmetic. Independent of the
    vectorized mixture computation; used to cross-check it.
    """
    n = data.n_students
    if n > 8:
        raise ValueError("enumeration oracle is limited to 8 students")
    alpha_idx, beta_idx = _oracle_slots(params.space.free_beta_s3)
    gamma = [float(v) for v in params.gamma]
    delta = [[float(v) for v in row] for row in params.delta]
    alpha = [float(v) for v in params.alpha]
    beta_s = [float(v) for v in params.beta_s]
    beta_x = [float(v) for v in params.beta_x]
    phi = [float(v) for v in params.phi]

    per_student = []  # list of {code: log pi_g + log f_g}
    for i in range(n):
        zi = int(data.z[i])
        mi = int(data.m_obs[i])
        yi = int(data.y_obs[i])
        si = float(data.s_obs[i])
        xg = [float(v) for v in data.x_strata[i]]
        xy = [float(v) for v in data.x_outcome[i]]
        aj = float(params.a[data.class_idx[i]])
        bj = float(params.b[data.class_idx[i]])
        etas = [0.0]
        for kk in range(3):
            etas.append(gamma[kk] + sum(d * x for d, x in zip(delta[kk], xg)) + aj)
        emax = max(etas)
        denom = emax + math.log(sum(math.exp(e - emax) for e in etas))
        terms = {}
        for code in STRATUM_CODES:
            if int(code[zi - 1]) != mi:
                continue
            log_pi = etas[STRATUM_CODES.index(code)] - denom
            ph = phi[alpha_idx[(code, zi)]]
            lin = alpha[alpha_idx[(code, zi)]] + beta_s[beta_idx[(code, zi)]] * si \
                + sum(bx * x for bx, x in zip(beta_x, xy)) + bj
            mu = math.exp(lin)
            if yi == 0:
                val = ph + (1.0 - ph) * math.exp(-mu)
                log_f = math.log(val) if val > 0 else -math.inf
            else:
                log_f = (math.log(1.0 - ph) if ph < 1.0 else -math.inf) \
                    + yi * lin - mu - math.lgamma(yi + 1)
            terms[code] = log_pi + log_f
        per_student.append(terms)

    totals = []
    for combo in itertools.product(*[list(t.items()) for t in per_student]):
        totals.append(sum(v for _, v in combo))
    if not totals:
        return 0.0
    m = max(totals)
    if not math.isfinite(m):
        return -math.inf
    return m + math.log(sum(math.exp(t - m) for t in totals))
