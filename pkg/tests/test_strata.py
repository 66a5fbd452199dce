import numpy as np
import pytest

from netstrat.strata import (ALL_STRATA, STRATUM_CODES, PrincipalStratum,
                             compatible_strata, compatibility_mask, mom_estimate,
                             potential_treatment)
from netstrat.data import ValidationError
from conftest import arm_count_study


def test_canonical_order():
    assert STRATUM_CODES == ("111", "011", "001", "000")


def test_potential_treatment_is_code_digit():
    for code in STRATUM_CODES:
        for z in (1, 2, 3):
            assert potential_treatment(code, z) == int(code[z - 1])
    g = PrincipalStratum("001")
    assert (g.potential_treatment(1), g.potential_treatment(2),
            g.potential_treatment(3)) == (0, 0, 1)


def test_bad_codes_rejected():
    for bad in ("101", "110", "10", "abc", "0000"):
        with pytest.raises(ValueError):
            PrincipalStratum(bad)


def test_compatible_strata_cells():
    def codes(z, m):
        return {g.code for g in compatible_strata(z, m)}

    assert codes(1, 1) == {"111"}
    assert codes(1, 0) == {"011", "001", "000"}
    assert codes(2, 1) == {"111", "011"}
    assert codes(2, 0) == {"001", "000"}
    assert codes(3, 1) == {"111", "011", "001"}
    assert codes(3, 0) == {"000"}


def test_compatibility_mask_matches_sets():
    z = np.array([1, 2, 3, 2])
    m = np.array([0, 1, 1, 0])
    mask = compatibility_mask(z, m)
    assert mask.shape == (4, 4)
    for i in range(4):
        want = {g.code for g in compatible_strata(int(z[i]), int(m[i]))}
        got = {STRATUM_CODES[k] for k in np.flatnonzero(mask[i])}
        assert got == want


def reference_counts_study():
    # arm sizes 89/87/90 with 3/10/40 uptakes, split over a few classes
    return arm_count_study({
        1: [(30, 1), (30, 1), (29, 1)],
        2: [(29, 4), (29, 3), (29, 3)],
        3: [(30, 14), (30, 13), (30, 13)],
    })


def test_mom_point_estimates_match_observed_rates():
    est = mom_estimate(reference_counts_study(), n_boot=50, seed=0)
    # straight-line identities from the three arm-level uptake rates:
    # NeverTaker share is the arm-3 refusal rate, and the complier shares
    # are successive differences of the uptake rates
    p1, p2, p3 = 3 / 89, 10 / 87, 40 / 90
    want = [p1, p2 - p1, p3 - p2, 1 - p3]
    assert est.proportions == pytest.approx(want, abs=1e-12)
    assert est.proportions.sum() == 1.0  # exact, not approximate
    assert not est.monotonicity_violation
    assert est.arm_counts[(1, 1)] == 3
    assert est.arm_counts[(3, 0)] == 50
    assert est.arm_counts[(2, 1)] == 10


def test_mom_reference_values():
    est = mom_estimate(reference_counts_study(), n_boot=50, seed=0)
    assert est.proportions == pytest.approx([0.034, 0.081, 0.329, 0.556], abs=1e-3)


def test_mom_bootstrap_deterministic():
    d = reference_counts_study()
    a = mom_estimate(d, n_boot=200, seed=3)
    b = mom_estimate(d, n_boot=200, seed=3)
    c = mom_estimate(d, n_boot=200, seed=4)
    assert np.all(a.standard_errors == b.standard_errors)
    assert np.any(a.standard_errors != c.standard_errors)
    assert np.all(a.standard_errors > 0)
    assert a.n_boot == 200


def test_mom_bootstrap_se_scale():
    # two-point class mix with known between-class variance; SE of the
    # arm-1 uptake rate should sit near sqrt(var of class means / #classes)
    d = arm_count_study({
        1: [(10, 0)] * 8 + [(10, 10)] * 8,
        2: [(10, 5)] * 8,
        3: [(10, 9)] * 8,
    })
    est = mom_estimate(d, n_boot=4000, seed=0)
    # pi_111 = mean over resampled arm-1 classes of class rates in {0,1};
    # rate estimate 0.5, sd of class mean = 0.5/sqrt(16) = 0.125
    assert est.proportions[0] == pytest.approx(0.5)
    assert est.standard_errors[0] == pytest.approx(0.125, rel=0.15)


def test_mom_monotonicity_violation_flagged():
    d = arm_count_study({
        1: [(20, 10)],
        2: [(20, 2)],   # uptake drops between arms 1 and 2
        3: [(20, 15)],
    })
    est = mom_estimate(d, n_boot=50, seed=0)
    assert est.monotonicity_violation
    assert est.proportions[1] < 0          # raw, unclamped
    assert est.proportions.sum() == pytest.approx(1.0, abs=1e-15)


def test_mom_requires_every_arm():
    d = arm_count_study({1: [(10, 2)], 2: [(10, 3)]})
    with pytest.raises(ValidationError):
        mom_estimate(d, n_boot=10, seed=0)


def test_all_strata_objects():
    assert tuple(g.code for g in ALL_STRATA) == STRATUM_CODES
    assert ALL_STRATA[0].label == "AlwaysTaker"
    assert ALL_STRATA[3].label == "NeverTaker"
