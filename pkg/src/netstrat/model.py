"""Mixture likelihood, priors, and gradients for the stratified outcome model.

Two linked regressions share the class structure:

* stratum membership: multinomial logit over the four compliance strata with
  AlwaysTaker (111) as the zero reference, covariates entering each non
  reference stratum separately, plus one normal class intercept ``a_j``
  shared by the three equations;
* outcome: zero-inflated Poisson for the follow-up visit count, with a
  stratum-by-arm intercept ``alpha``, a friends'-uptake slope ``beta_s``, a
  shared covariate block ``beta_x``, a normal class intercept ``b_j``, and a
  stratum-by-arm zero-inflation weight ``phi``.

Only arm 3 pays the visit reward, and only RewardCompliers (001) change
uptake between arms 2 and 3, so for the other three strata the arm-3 outcome
parameters are tied to their arm-2 values. The friends'-uptake slope is
shared across strata within arms 1 and 2; stratum 001 gets its own slope in
arm 3. That leaves 9 intercept slots, 9 zero-inflation slots, and 3 slope
slots (a 4th appears if ``free_beta_s3`` unties the arm-3 slope for the
other strata).

Sampling runs on an unconstrained vector: scales enter as logs, inflation
weights as logits, and class intercepts in non-centered form
(``a = sigma_a * a_raw``), with the matching Jacobian terms added to the
posterior. All gradients are analytic.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, gammaln, log_expit

from .data import StudyData
from .strata import STRATUM_CODES, STRATUM_INDEX, compatibility_mask, PrincipalStratum

NONREF_CODES = STRATUM_CODES[1:]  # (011, 001, 000); 111 is the logit reference
_RC = STRATUM_INDEX["001"]  # the one stratum whose uptake changes between arms 2 and 3


@dataclass(frozen=True)
class PriorConfig:
    """Prior scales: normals on coefficients, half-normals on the two class
    intercept scales, uniform on each zero-inflation weight."""

    sd_strata_coef: float = 2.5
    sd_outcome_coef: float = 1.0
    sd_sigma: float = 0.5

    def __post_init__(self):
        if min(self.sd_strata_coef, self.sd_outcome_coef, self.sd_sigma) <= 0:
            raise ValueError("prior scales must be positive")


def _slot_tables(free_beta_s3: bool):
    # alpha/phi slots: 0..3 arm 1 by stratum, 4..7 arm 2 by stratum, 8 = (001, arm 3)
    alpha = np.empty((4, 3), dtype=np.int64)
    beta = np.empty((4, 3), dtype=np.int64)
    for g in range(4):
        alpha[g, 0] = g
        alpha[g, 1] = 4 + g
        alpha[g, 2] = 8 if g == _RC else 4 + g
        beta[g, 0] = 0
        beta[g, 1] = 1
        beta[g, 2] = 2 if g == _RC else (3 if free_beta_s3 else 1)
    return alpha, beta


@dataclass(frozen=True, eq=False)
class ParamSpace:
    """Shapes, tying structure, and packing for one study's parameter vector."""

    class_labels: tuple[str, ...]
    strata_cov_names: tuple[str, ...]
    outcome_cov_names: tuple[str, ...]
    free_beta_s3: bool = False
    n_alpha: int = field(init=False, default=9)

    def __post_init__(self):
        object.__setattr__(self, "_alpha_slot", _slot_tables(self.free_beta_s3)[0])
        object.__setattr__(self, "_beta_slot", _slot_tables(self.free_beta_s3)[1])

    @classmethod
    def for_data(cls, data: StudyData, free_beta_s3: bool = False) -> "ParamSpace":
        spec = data.covariate_spec
        return cls(
            class_labels=data.class_ids,
            strata_cov_names=tuple(n for n, m in zip(spec.names, spec.strata_mask) if m),
            outcome_cov_names=tuple(n for n, m in zip(spec.names, spec.outcome_mask) if m),
            free_beta_s3=free_beta_s3,
        )

    @property
    def n_classes(self) -> int:
        return len(self.class_labels)

    @property
    def k_strata(self) -> int:
        return len(self.strata_cov_names)

    @property
    def k_outcome(self) -> int:
        return len(self.outcome_cov_names)

    @property
    def n_beta_s(self) -> int:
        return 4 if self.free_beta_s3 else 3

    def alpha_slot(self, g, z: int) -> int:
        """Intercept/inflation slot used by stratum ``g`` under arm ``z``."""
        return int(self._alpha_slot[_gidx(g), z - 1])

    def beta_s_slot(self, g, z: int) -> int:
        return int(self._beta_slot[_gidx(g), z - 1])

    # ---- vector layout ------------------------------------------------
    # [gamma(3) | delta(3*Kg) | a_raw(J) | log sigma_a | alpha(9) |
    #  beta_s(3 or 4) | beta_x(Ky) | b_raw(J) | log sigma_b | logit phi(9)]

    def _offsets(self):
        J, kg, ky = self.n_classes, self.k_strata, self.k_outcome
        sizes = [3, 3 * kg, J, 1, self.n_alpha, self.n_beta_s, ky, J, 1, self.n_alpha]
        edges = np.concatenate([[0], np.cumsum(sizes)])
        keys = ("gamma", "delta", "a", "log_sigma_a", "alpha",
                "beta_s", "beta_x", "b", "log_sigma_b", "logit_phi")
        return {k: slice(int(edges[i]), int(edges[i + 1])) for i, k in enumerate(keys)}

    @property
    def dim(self) -> int:
        return self._offsets()["logit_phi"].stop

    def block(self, name: str) -> slice:
        return self._offsets()[name]

    def names(self) -> list[str]:
        """Constrained-scale column names, in vector order."""
        out = [f"gamma[{c}]" for c in NONREF_CODES]
        for c in NONREF_CODES:
            out += [f"delta[{c}][{v}]" for v in self.strata_cov_names]
        out += [f"a[{c}]" for c in self.class_labels]
        out += ["sigma_a"]
        slots = [(c, 1) for c in STRATUM_CODES] + [(c, 2) for c in STRATUM_CODES] + [("001", 3)]
        out += [f"alpha[{c},{z}]" for c, z in slots]
        bnames = ["beta_s[z1]", "beta_s[z2]", "beta_s[001,3]"]
        if self.free_beta_s3:
            bnames.append("beta_s[z3]")
        out += bnames
        out += [f"beta_x[{v}]" for v in self.outcome_cov_names]
        out += [f"b[{c}]" for c in self.class_labels]
        out += ["sigma_b"]
        out += [f"phi[{c},{z}]" for c, z in slots]
        return out

    def unpack(self, u: np.ndarray) -> "Parameters":
        """Unconstrained vector to constrained :class:`Parameters`."""
        u = np.asarray(u, dtype=float)
        if u.shape != (self.dim,):
            raise ValueError(f"expected vector of length {self.dim}, got shape {u.shape}")
        o = self._offsets()
        sigma_a = float(np.exp(u[o["log_sigma_a"]][0]))
        sigma_b = float(np.exp(u[o["log_sigma_b"]][0]))
        return Parameters(
            space=self,
            gamma=u[o["gamma"]].copy(),
            delta=u[o["delta"]].reshape(3, self.k_strata).copy(),
            a=sigma_a * u[o["a"]],
            sigma_a=sigma_a,
            alpha=u[o["alpha"]].copy(),
            beta_s=u[o["beta_s"]].copy(),
            beta_x=u[o["beta_x"]].copy(),
            b=sigma_b * u[o["b"]],
            sigma_b=sigma_b,
            phi=expit(u[o["logit_phi"]]),
        )

    def pack(self, p: "Parameters") -> np.ndarray:
        """Constrained :class:`Parameters` to the unconstrained vector."""
        o = self._offsets()
        u = np.empty(self.dim)
        u[o["gamma"]] = p.gamma
        u[o["delta"]] = np.asarray(p.delta).reshape(-1)
        u[o["a"]] = np.asarray(p.a) / p.sigma_a
        u[o["log_sigma_a"]] = np.log(p.sigma_a)
        u[o["alpha"]] = p.alpha
        u[o["beta_s"]] = p.beta_s
        u[o["beta_x"]] = p.beta_x
        u[o["b"]] = np.asarray(p.b) / p.sigma_b
        u[o["log_sigma_b"]] = np.log(p.sigma_b)
        u[o["logit_phi"]] = _logit(np.asarray(p.phi))
        return u

    def to_constrained(self, p: "Parameters") -> np.ndarray:
        """Constrained values in vector order (what draw files store)."""
        o = self._offsets()
        v = np.empty(self.dim)
        v[o["gamma"]] = p.gamma
        v[o["delta"]] = np.asarray(p.delta).reshape(-1)
        v[o["a"]] = p.a
        v[o["log_sigma_a"]] = p.sigma_a
        v[o["alpha"]] = p.alpha
        v[o["beta_s"]] = p.beta_s
        v[o["beta_x"]] = p.beta_x
        v[o["b"]] = p.b
        v[o["log_sigma_b"]] = p.sigma_b
        v[o["logit_phi"]] = p.phi
        return v

    def from_constrained(self, v: np.ndarray) -> "Parameters":
        v = np.asarray(v, dtype=float)
        if v.shape != (self.dim,):
            raise ValueError(f"expected vector of length {self.dim}, got shape {v.shape}")
        o = self._offsets()
        return Parameters(
            space=self,
            gamma=v[o["gamma"]].copy(),
            delta=v[o["delta"]].reshape(3, self.k_strata).copy(),
            a=v[o["a"]].copy(),
            sigma_a=float(v[o["log_sigma_a"]][0]),
            alpha=v[o["alpha"]].copy(),
            beta_s=v[o["beta_s"]].copy(),
            beta_x=v[o["beta_x"]].copy(),
            b=v[o["b"]].copy(),
            sigma_b=float(v[o["log_sigma_b"]][0]),
            phi=v[o["logit_phi"]].copy(),
        )

    def constrain_matrix(self, u_matrix: np.ndarray) -> np.ndarray:
        """Map rows of unconstrained vectors to constrained rows in place of
        the same layout (used when persisting sampler output)."""
        u_matrix = np.atleast_2d(np.asarray(u_matrix, dtype=float))
        o = self._offsets()
        v = u_matrix.copy()
        sa = np.exp(u_matrix[:, o["log_sigma_a"]])
        sb = np.exp(u_matrix[:, o["log_sigma_b"]])
        v[:, o["a"]] = u_matrix[:, o["a"]] * sa
        v[:, o["log_sigma_a"]] = sa
        v[:, o["b"]] = u_matrix[:, o["b"]] * sb
        v[:, o["log_sigma_b"]] = sb
        v[:, o["logit_phi"]] = expit(u_matrix[:, o["logit_phi"]])
        return v

    def to_dict(self) -> dict:
        return {
            "class_labels": list(self.class_labels),
            "strata_cov_names": list(self.strata_cov_names),
            "outcome_cov_names": list(self.outcome_cov_names),
            "free_beta_s3": self.free_beta_s3,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ParamSpace":
        return cls(
            class_labels=tuple(d["class_labels"]),
            strata_cov_names=tuple(d["strata_cov_names"]),
            outcome_cov_names=tuple(d["outcome_cov_names"]),
            free_beta_s3=bool(d.get("free_beta_s3", False)),
        )


def _logit(p):
    return np.log(p) - np.log1p(-p)


def _gidx(g) -> int:
    code = g.code if isinstance(g, PrincipalStratum) else str(g)
    try:
        return STRATUM_INDEX[code]
    except KeyError:
        raise ValueError(f"unknown stratum code {code!r}") from None


@dataclass(frozen=True, eq=False)
class Parameters:
    """Constrained model parameters.

    ``alpha`` and ``phi`` are indexed by the 9 tied (stratum, arm) slots,
    ``beta_s`` by the 3 (or 4) slope slots; use the ``space`` slot lookups to
    go from (stratum, arm) to a slot. ``a`` and ``b`` are the realized class
    intercepts, one per class in ``space.class_labels`` order.
    """

    space: ParamSpace
    gamma: np.ndarray
    delta: np.ndarray
    a: np.ndarray
    sigma_a: float
    alpha: np.ndarray
    beta_s: np.ndarray
    beta_x: np.ndarray
    b: np.ndarray
    sigma_b: float
    phi: np.ndarray

    def __post_init__(self):
        sp = self.space
        shapes = {
            "gamma": (3,), "delta": (3, sp.k_strata), "a": (sp.n_classes,),
            "alpha": (sp.n_alpha,), "beta_s": (sp.n_beta_s,),
            "beta_x": (sp.k_outcome,), "b": (sp.n_classes,), "phi": (sp.n_alpha,),
        }
        for name, shape in shapes.items():
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {arr.shape}")
            object.__setattr__(self, name, arr)

    def as_dict(self) -> dict[str, float]:
        vec = self.space.to_constrained(self)
        return dict(zip(self.space.names(), (float(v) for v in vec)))


# ---------------------------------------------------------------------------
# densities


def strata_probs(x, a_j: float, params: Parameters) -> np.ndarray:
    """Membership probabilities over (111, 011, 001, 000) for one student.

    ``x`` is the student's stratum-model covariate vector on the scale the
    parameters were fit on; ``a_j`` the student's class intercept.
    """
    x = np.asarray(x, dtype=float)
    if x.shape != (params.space.k_strata,):
        raise ValueError(f"expected covariate vector of length {params.space.k_strata}")
    if not (np.all(np.isfinite(x)) and np.isfinite(a_j)):
        raise ValueError("covariates and class intercept must be finite")
    eta = np.zeros(4)
    eta[1:] = params.gamma + params.delta @ x + a_j
    eta -= eta.max()
    w = np.exp(eta)
    return w / w.sum()


def zip_log_pmf(y, phi, mu):
    """Log pmf of the zero-inflated Poisson at count ``y``.

    A point mass ``phi`` at zero is mixed with a Poisson(``mu``); broadcasting
    over array arguments follows numpy rules. ``mu`` must be positive and
    ``phi`` must lie in [0, 1].
    """
    y = np.asarray(y)
    phi_arr = np.asarray(phi, dtype=float)
    mu_arr = np.asarray(mu, dtype=float)
    if np.any(mu_arr <= 0):
        raise ValueError("mu must be positive")
    if np.any((phi_arr < 0) | (phi_arr > 1)):
        raise ValueError("phi must lie in [0, 1]")
    if np.any(y < 0) or not np.issubdtype(y.dtype, np.integer) and np.any(y != np.floor(y)):
        raise ValueError("y must be a nonnegative integer count")
    yf = y.astype(float)
    with np.errstate(divide="ignore"):
        log_phi = np.log(phi_arr)
        log_1mphi = np.log1p(-phi_arr)
    zero = np.logaddexp(log_phi, log_1mphi - mu_arr)
    pos = log_1mphi + yf * np.log(mu_arr) - mu_arr - gammaln(yf + 1.0)
    out = np.where(yf == 0, zero, pos)
    return out if out.ndim else float(out)


def poisson_mean(g, z: int, s: float, x, b_j: float, params: Parameters) -> float:
    """Poisson rate for stratum ``g`` under arm ``z`` at friends' share ``s``.

    ``x`` is the outcome-model covariate vector; tying across arms is applied
    through the parameter slots, so arm 3 reuses arm-2 values except for
    stratum 001.
    """
    if z not in (1, 2, 3):
        raise ValueError(f"arm must be 1, 2 or 3, got {z!r}")
    x = np.asarray(x, dtype=float)
    if x.shape != (params.space.k_outcome,):
        raise ValueError(f"expected covariate vector of length {params.space.k_outcome}")
    if not (np.all(np.isfinite(x)) and np.isfinite(s) and np.isfinite(b_j)):
        raise ValueError("inputs must be finite")
    sp = params.space
    lp = (params.alpha[sp.alpha_slot(g, z)]
          + params.beta_s[sp.beta_s_slot(g, z)] * s
          + x @ params.beta_x + b_j)
    return float(np.exp(lp))


# ---------------------------------------------------------------------------
# likelihood plumbing


class _ModelContext:
    """Per-dataset arrays reused across likelihood and gradient calls."""

    def __init__(self, data: StudyData, space: ParamSpace):
        if tuple(space.class_labels) != tuple(data.class_ids):
            raise ValueError("parameter space was built for different classes")
        if space.k_strata != data.x_strata.shape[1] or space.k_outcome != data.x_outcome.shape[1]:
            raise ValueError("parameter space covariate count does not match data")
        self.n = data.n_students
        self.J = data.n_classes
        self.x_g = data.x_strata
        self.x_y = data.x_outcome
        self.class_idx = data.class_idx
        self.y = data.y_obs
        self.s = data.s_obs
        self.is_zero = data.y_obs == 0
        self.lgam_y = gammaln(data.y_obs + 1.0)
        self.mask = compatibility_mask(data.z, data.m_obs)
        alpha_tab, beta_tab = space._alpha_slot, space._beta_slot
        self.idx_alpha = alpha_tab.T[data.z - 1]  # (N, 4)
        self.idx_beta = beta_tab.T[data.z - 1]


def _forward(ctx: _ModelContext, gamma, delta, a, alpha, beta_s, beta_x, b, v_phi):
    """Shared forward pass; returns per-student log likelihoods and the
    intermediates the gradient needs."""
    eta = np.zeros((ctx.n, 4))
    eta[:, 1:] = gamma + ctx.x_g @ delta.T + a[ctx.class_idx][:, None]
    emax = eta.max(axis=1, keepdims=True)
    log_pi = eta - (emax + np.log(np.exp(eta - emax).sum(axis=1, keepdims=True)))

    lp = alpha[ctx.idx_alpha] + beta_s[ctx.idx_beta] * ctx.s[:, None] \
        + (ctx.x_y @ beta_x + b[ctx.class_idx])[:, None]
    with np.errstate(over="ignore"):
        mu = np.exp(lp)
    log_phi = log_expit(v_phi)[ctx.idx_alpha]
    log_1mphi = log_expit(-v_phi)[ctx.idx_alpha]
    big_b = log_1mphi - mu
    logf_zero = np.logaddexp(log_phi, big_b)
    with np.errstate(invalid="ignore"):
        logf_pos = log_1mphi + ctx.y[:, None] * lp - mu - ctx.lgam_y[:, None]
    logf = np.where(ctx.is_zero[:, None], logf_zero, logf_pos)

    t = np.where(ctx.mask, log_pi + logf, -np.inf)
    tmax = t.max(axis=1)
    safe = np.where(np.isfinite(tmax), tmax, 0.0)
    with np.errstate(divide="ignore"):
        ll = safe + np.log(np.exp(t - safe[:, None]).sum(axis=1))
    return ll, t, log_pi, lp, mu, log_phi, log_1mphi, logf_zero


def log_likelihood(data: StudyData, params: Parameters) -> float:
    """Observed-data log likelihood: each student's outcome density is a
    mixture over the strata compatible with their (arm, uptake) cell."""
    if data.n_students == 0:
        return 0.0
    ctx = _ModelContext(data, params.space)
    v_phi = _logit(np.clip(params.phi, 1e-300, 1.0))
    ll, *_ = _forward(ctx, params.gamma, params.delta, params.a, params.alpha,
                      params.beta_s, params.beta_x, params.b, v_phi)
    return float(ll.sum())


def log_prior(params: Parameters, prior: PriorConfig) -> float:
    """Joint log prior density on the constrained scale.

    Returns ``-inf`` outside the support (nonpositive scales, inflation
    weights outside [0, 1]) rather than raising.
    """
    if params.sigma_a <= 0 or params.sigma_b <= 0:
        return -np.inf
    if np.any((params.phi < 0) | (params.phi > 1)):
        return -np.inf
    sg, sy, ss = prior.sd_strata_coef, prior.sd_outcome_coef, prior.sd_sigma
    total = 0.0
    for block, sd in ((params.gamma, sg), (params.delta, sg), (params.alpha, sy),
                      (params.beta_s, sy), (params.beta_x, sy)):
        block = np.asarray(block)
        total += -0.5 * np.sum(block ** 2) / sd ** 2 \
            - block.size * (0.5 * np.log(2 * np.pi) + np.log(sd))
    for sigma in (params.sigma_a, params.sigma_b):
        total += 0.5 * np.log(2.0 / np.pi) - np.log(ss) - 0.5 * sigma ** 2 / ss ** 2
    for vals, sigma in ((params.a, params.sigma_a), (params.b, params.sigma_b)):
        total += -0.5 * np.sum(vals ** 2) / sigma ** 2 \
            - len(vals) * (0.5 * np.log(2 * np.pi) + np.log(sigma))
    return float(total)


@dataclass(frozen=True, eq=False)
class Posterior:
    """Unconstrained log posterior with analytic gradient, ready to sample."""

    space: ParamSpace
    log_post: callable
    grad: callable
    value_and_grad: callable


def make_posterior(data: StudyData, prior: PriorConfig | None = None,
                   free_beta_s3: bool = False) -> Posterior:
    """Build the unconstrained target for ``data``.

    The target is the log likelihood plus the log prior plus the Jacobian of
    the constraining transform (exp for scales, logistic for inflation
    weights, non-centered class intercepts), as a function of the flat
    unconstrained vector laid out by :class:`ParamSpace`.
    """
    prior = prior or PriorConfig()
    space = ParamSpace.for_data(data, free_beta_s3=free_beta_s3)
    ctx = _ModelContext(data, space)
    o = space._offsets()
    kg, ky, J = space.k_strata, space.k_outcome, space.n_classes
    sg2 = prior.sd_strata_coef ** 2
    sy2 = prior.sd_outcome_coef ** 2
    ss2 = prior.sd_sigma ** 2
    # normalizing constants of the prior, fixed given the space
    const = -(3 + 3 * kg) * (0.5 * np.log(2 * np.pi) + np.log(prior.sd_strata_coef)) \
        - (space.n_alpha + space.n_beta_s + ky) * (0.5 * np.log(2 * np.pi) + np.log(prior.sd_outcome_coef)) \
        - 2 * J * 0.5 * np.log(2 * np.pi) \
        + 2 * (0.5 * np.log(2.0 / np.pi) - np.log(prior.sd_sigma))

    def _split(u):
        gamma = u[o["gamma"]]
        delta = u[o["delta"]].reshape(3, kg)
        a_raw = u[o["a"]]
        u_a = u[o["log_sigma_a"]][0]
        alpha = u[o["alpha"]]
        beta_s = u[o["beta_s"]]
        beta_x = u[o["beta_x"]]
        b_raw = u[o["b"]]
        u_b = u[o["log_sigma_b"]][0]
        v_phi = u[o["logit_phi"]]
        return gamma, delta, a_raw, u_a, alpha, beta_s, beta_x, b_raw, u_b, v_phi

    def value_and_grad(u):
        u = np.asarray(u, dtype=float)
        if u.shape != (space.dim,):
            raise ValueError(f"expected vector of length {space.dim}, got shape {u.shape}")
        gamma, delta, a_raw, u_a, alpha, beta_s, beta_x, b_raw, u_b, v_phi = _split(u)
        sigma_a, sigma_b = np.exp(u_a), np.exp(u_b)
        a, b = sigma_a * a_raw, sigma_b * b_raw
        phi = expit(v_phi)

        ll, t, log_pi, lp, mu, log_phi, log_1mphi, logf_zero = _forward(
            ctx, gamma, delta, a, alpha, beta_s, beta_x, b, v_phi)
        loglik = ll.sum()

        value = loglik + const \
            - 0.5 * (np.sum(gamma ** 2) + np.sum(delta ** 2)) / sg2 \
            - 0.5 * (np.sum(alpha ** 2) + np.sum(beta_s ** 2) + np.sum(beta_x ** 2)) / sy2 \
            - 0.5 * (np.sum(a_raw ** 2) + np.sum(b_raw ** 2)) \
            - 0.5 * (sigma_a ** 2 + sigma_b ** 2) / ss2 + u_a + u_b \
            + np.sum(log_expit(v_phi) + log_expit(-v_phi))

        if not np.isfinite(value):
            return -np.inf, np.zeros(space.dim)

        with np.errstate(invalid="ignore", over="ignore"):
            w = np.exp(t - ll[:, None])  # posterior stratum weights, 0 where masked
            pi = np.exp(log_pi)

            resid = w[:, 1:] - pi[:, 1:]
            g_gamma = resid.sum(axis=0) - gamma / sg2
            g_delta = resid.T @ ctx.x_g - delta / sg2
            da = np.bincount(ctx.class_idx, weights=resid.sum(axis=1), minlength=J)
            g_a_raw = sigma_a * da - a_raw
            g_u_a = float(da @ a) + 1.0 - sigma_a ** 2 / ss2

            # d log f / d linear predictor, per stratum slot
            dlp_zero = -np.exp(lp + log_1mphi - mu - logf_zero)
            dlp = np.where(ctx.is_zero[:, None], dlp_zero, ctx.y[:, None] - mu)
            contrib = np.where(w > 0, w * dlp, 0.0)
            g_alpha = np.bincount(ctx.idx_alpha.ravel(), weights=contrib.ravel(),
                                  minlength=space.n_alpha) - alpha / sy2
            g_beta_s = np.bincount(ctx.idx_beta.ravel(),
                                   weights=(contrib * ctx.s[:, None]).ravel(),
                                   minlength=space.n_beta_s) - beta_s / sy2
            row = contrib.sum(axis=1)
            g_beta_x = ctx.x_y.T @ row - beta_x / sy2
            db = np.bincount(ctx.class_idx, weights=row, minlength=J)
            g_b_raw = sigma_b * db - b_raw
            g_u_b = float(db @ b) + 1.0 - sigma_b ** 2 / ss2

            dv_zero = np.exp(log_phi + log_1mphi - logf_zero) * (-np.expm1(-mu))
            dv = np.where(ctx.is_zero[:, None], dv_zero, -expit(v_phi)[ctx.idx_alpha])
            vcontrib = np.where(w > 0, w * dv, 0.0)
            g_v_phi = np.bincount(ctx.idx_alpha.ravel(), weights=vcontrib.ravel(),
                                  minlength=space.n_alpha) + (1.0 - 2.0 * phi)

        grad = np.empty(space.dim)
        grad[o["gamma"]] = g_gamma
        grad[o["delta"]] = g_delta.reshape(-1)
        grad[o["a"]] = g_a_raw
        grad[o["log_sigma_a"]] = g_u_a
        grad[o["alpha"]] = g_alpha
        grad[o["beta_s"]] = g_beta_s
        grad[o["beta_x"]] = g_beta_x
        grad[o["b"]] = g_b_raw
        grad[o["log_sigma_b"]] = g_u_b
        grad[o["logit_phi"]] = g_v_phi
        return float(value), grad

    def log_post(u):
        return value_and_grad(u)[0]

    def grad(u):
        return value_and_grad(u)[1]

    return Posterior(space=space, log_post=log_post, grad=grad, value_and_grad=value_and_grad)


def grad_log_posterior(data: StudyData, params: Parameters,
                       prior: PriorConfig | None = None) -> np.ndarray:
    """Gradient of the unconstrained posterior at ``params``.

    The point is mapped to the unconstrained scale first, so entries for the
    scale and inflation blocks are derivatives with respect to log scales and
    logit weights, including their Jacobian terms, and class intercept
    entries are with respect to the standardized (non-centered) intercepts.
    """
    post = make_posterior(data, prior, free_beta_s3=params.space.free_beta_s3)
    return post.grad(params.space.pack(params))


PARAMS_FORMAT_VERSION = 1


def params_to_json(params: Parameters) -> dict:
    """Flat named-vector form of the free parameters, with the name-to-index
    map carried alongside and a format version for forward compatibility."""
    return {
        "format_version": PARAMS_FORMAT_VERSION,
        "space": params.space.to_dict(),
        "names": params.space.names(),
        "values": [float(v) for v in params.space.to_constrained(params)],
    }


def params_from_json(doc: dict) -> Parameters:
    if doc.get("format_version") != PARAMS_FORMAT_VERSION:
        raise ValueError(f"unsupported parameter format version {doc.get('format_version')!r}")
    space = ParamSpace.from_dict(doc["space"])
    if doc["names"] != space.names():
        raise ValueError("parameter names do not match the declared layout")
    return space.from_constrained(np.asarray(doc["values"], dtype=float))
