"""Compliance strata for a three-arm encouragement with monotone uptake.

A stratum is written as three digits, one per arm in increasing encouragement
strength; digit ``z-1`` is the uptake decision the stratum makes under arm
``z``. Monotone uptake leaves four strata:

====  =====================
code  label
====  =====================
111   AlwaysTaker
011   PresentationComplier
001   RewardComplier
000   NeverTaker
====  =====================

Arm labels throughout: 1 flyer, 2 presentation, 3 presentation + reward.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .data import StudyData, ValidationError

logger = logging.getLogger(__name__)

STRATUM_CODES = ("111", "011", "001", "000")
STRATUM_LABELS = {
    "111": "AlwaysTaker",
    "011": "PresentationComplier",
    "001": "RewardComplier",
    "000": "NeverTaker",
}
STRATUM_INDEX = {c: i for i, c in enumerate(STRATUM_CODES)}

# potential uptake table: POTENTIAL_M[stratum index, z - 1]
POTENTIAL_M = np.array([[int(d) for d in code] for code in STRATUM_CODES], dtype=np.int64)


@dataclass(frozen=True)
class PrincipalStratum:
    """One of the four monotone compliance strata, identified by its code."""

    code: str

    def __post_init__(self):
        if self.code not in STRATUM_CODES:
            raise ValueError(f"unknown stratum code {self.code!r}; expected one of {STRATUM_CODES}")

    @property
    def label(self) -> str:
        return STRATUM_LABELS[self.code]

    @property
    def index(self) -> int:
        return STRATUM_INDEX[self.code]

    def potential_treatment(self, z: int) -> int:
        return potential_treatment(self.code, z)


ALL_STRATA = tuple(PrincipalStratum(c) for c in STRATUM_CODES)


def _as_code(g) -> str:
    code = g.code if isinstance(g, PrincipalStratum) else str(g)
    if code not in STRATUM_INDEX:
        raise ValueError(f"unknown stratum code {code!r}; expected one of {STRATUM_CODES}")
    return code


def potential_treatment(g, z: int) -> int:
    """Uptake decision of stratum ``g`` under arm ``z``: digit ``z-1`` of its code."""
    if z not in (1, 2, 3):
        raise ValueError(f"arm must be 1, 2 or 3, got {z!r}")
    return int(_as_code(g)[z - 1])


def compatible_strata(z: int, m: int) -> frozenset[PrincipalStratum]:
    """Strata whose uptake under arm ``z`` equals the observed ``m``.

    This is the latent-group inverse of :func:`potential_treatment`: an
    observed (arm, uptake) cell pins membership down to these strata only.
    """
    if m not in (0, 1):
        raise ValueError(f"uptake must be 0 or 1, got {m!r}")
    return frozenset(g for g in ALL_STRATA if potential_treatment(g, z) == m)


# (4, N)-shaped compatibility masks come up constantly in the model; build the
# (3 arms, 2 uptakes, 4 strata) lookup once.
COMPAT_MASK = np.zeros((3, 2, 4), dtype=bool)
for _z in (1, 2, 3):
    for _m in (0, 1):
        for _g in range(4):
            COMPAT_MASK[_z - 1, _m, _g] = POTENTIAL_M[_g, _z - 1] == _m


def compatibility_mask(z: np.ndarray, m: np.ndarray) -> np.ndarray:
    """(N, 4) boolean array; row i marks the strata compatible with (z_i, m_i)."""
    return COMPAT_MASK[np.asarray(z) - 1, np.asarray(m)]


@dataclass(frozen=True)
class MomEstimate:
    """Moment-based stratum proportions with cluster-bootstrap uncertainty.

    ``proportions`` is ordered like :data:`STRATUM_CODES`; ``arm_counts``
    maps (z, m) to its observed student count and ``arm_uptake`` holds the
    three uptake rates P(M=1 | Z=z). When sampling noise pushes a difference
    of rates negative the raw value is kept and ``monotonicity_violation``
    is set, so the caller sees the conflict instead of a silently clipped
    zero.
    """

    proportions: np.ndarray
    standard_errors: np.ndarray
    arm_counts: dict[tuple[int, int], int]
    arm_uptake: np.ndarray
    n_boot: int
    monotonicity_violation: bool

    def as_dict(self) -> dict:
        return {
            "strata": list(STRATUM_CODES),
            "labels": [STRATUM_LABELS[c] for c in STRATUM_CODES],
            "proportions": [float(v) for v in self.proportions],
            "standard_errors": [float(v) for v in self.standard_errors],
            "arm_counts": {f"z={z},m={m}": n for (z, m), n in sorted(self.arm_counts.items())},
            "arm_uptake": [float(v) for v in self.arm_uptake],
            "n_boot": self.n_boot,
            "monotonicity_violation": self.monotonicity_violation,
        }


def _proportions_from_rates(p1: float, p2: float, p3: float) -> np.ndarray:
    # order (111, 011, 001, 000); the telescoped identities sum to 1 in
    # exact arithmetic but can land an ulp off in floats, so absorb the
    # rounding residual into the largest entry until the sum is exact
    props = np.array([p1, p2 - p1, p3 - p2, 1.0 - p3])
    for _ in range(10):
        residual = 1.0 - props.sum()
        if residual == 0.0:
            break
        props[np.argmax(np.abs(props))] += residual
    return props


def mom_estimate(data: StudyData, n_boot: int = 2000, seed: int = 0) -> MomEstimate:
    """Identify stratum proportions from the three arm-level uptake rates.

    Under randomized arms and monotone uptake, P(M=1|Z=1) is the AlwaysTaker
    share, P(M=1|Z=2) adds the PresentationCompliers, and P(M=0|Z=3) is the
    NeverTaker share; differencing recovers all four proportions. Standard
    errors come from resampling whole classes within each arm (clusters are
    the randomization unit), recomputing the rates each time.
    """
    for zval in (1, 2, 3):
        if not np.any(data.z == zval):
            raise ValidationError(f"no students in arm {zval}; all three arms are required")

    def rates(class_choice=None):
        # class_choice: per-arm list of class indices (with repeats) or None for observed
        out = np.empty(3)
        for zval in (1, 2, 3):
            if class_choice is None:
                cls = np.flatnonzero(data.z_class == zval)
            else:
                cls = class_choice[zval - 1]
            num = 0
            den = 0
            for j in cls:
                rows = data.students_in_class(int(j))
                num += int(data.m_obs[rows].sum())
                den += len(rows)
            out[zval - 1] = num / den
        return out

    p = rates()
    props = _proportions_from_rates(*p)
    violation = bool(np.any(props < 0))
    if violation:
        logger.warning(
            "monotone-uptake identities produced a negative proportion %s; "
            "reporting raw values", np.array2string(props, precision=4)
        )

    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(2,)))
    arm_classes = [np.flatnonzero(data.z_class == zval) for zval in (1, 2, 3)]
    boots = np.empty((n_boot, 4))
    for b in range(n_boot):
        choice = [rng.choice(cls, size=len(cls), replace=True) for cls in arm_classes]
        boots[b] = _proportions_from_rates(*rates(choice))
    se = boots.std(axis=0, ddof=1) if n_boot > 1 else np.full(4, np.nan)

    counts = {
        (zval, mval): int(((data.z == zval) & (data.m_obs == mval)).sum())
        for zval in (1, 2, 3) for mval in (0, 1)
    }
    return MomEstimate(
        proportions=props,
        standard_errors=se,
        arm_counts=counts,
        arm_uptake=p,
        n_boot=n_boot,
        monotonicity_violation=violation,
    )
