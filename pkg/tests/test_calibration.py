import io
import math
from fractions import Fraction

import mpmath
import numpy as np
import pytest
import sympy
from hypothesis import given, settings
from hypothesis import strategies as st

from envmon import calibration as cal
from envmon.calibration import CompensationPoly, DeviceConstants

# (factory, new) constants of four BME280 devices recalibrated in a climate chamber
REFERENCE_SENSORS = {
    1: ((28205, 28205, 50), (28469, 26034, 753.63)),
    2: ((28498, 26766, 50), (30462, 23501, 2846.84)),
    3: ((28222, 26702, 50), (28172, 26073, -388.33)),
    4: ((28266, 26340, 50), (28304, 26409, 299.61)),
}

# deviation at -40 / 60 C, raw value taken from the new calibration's increasing
# branch, factory minus reference; computed with a 50-digit mpmath root finder
ORACLE_DEVIATION = {
    1: (-2.0618064079946609, 6.1023626616182044),
    2: (3.6994742384990418, 16.78340707124524),
    3: (-1.1355253866783486, 1.3833647140448181),
    4: (0.2495392929635228, -0.068052231965452623),
}

K0, K1, K2 = Fraction(4, 5 * 2**22), Fraction(4, 5 * 2**26), Fraction(4, 5 * 2**46)


def exact_poly(d1, d2, d3):
    d1, d2, d3 = Fraction(d1), Fraction(d2), Fraction(d3)
    return (
        -K0 * (d1 * d2 - d1 * d1 * d3 / 2**16),
        K1 * (d2 - d1 * d3 / 2**15),
        K2 * d3,
    )


def rel(a, b):
    return abs(a - b) / max(abs(b), 1e-300)


constants = st.builds(
    DeviceConstants,
    st.floats(20000, 35000),
    st.floats(20000, 30000),
    st.floats(-3000, 3000).filter(lambda x: abs(x) > 1e-3),
)


# -- forward map -----------------------------------------------------------------

@pytest.mark.parametrize("sensor", sorted(REFERENCE_SENSORS))
def test_forward_map_matches_rational_arithmetic(sensor):
    for d in REFERENCE_SENSORS[sensor]:
        got = cal.poly_from_constants(DeviceConstants(*d))
        want = exact_poly(*d)
        for g, w in zip((got.c0, got.c1, got.c2), want):
            assert rel(g, float(w)) < 1e-13


def test_forward_map_magnitudes_for_equal_d1_d2():
    c = cal.poly_from_constants(DeviceConstants(28205, 28205, 50))
    assert c.c0 == pytest.approx(-151.6, abs=0.1)
    assert c.c1 == pytest.approx(3.357e-4, rel=1e-3)
    assert c.c2 == pytest.approx(5.68e-13, rel=1e-2)


def test_forward_map_zero_and_zero_d3():
    assert cal.poly_from_constants(DeviceConstants(0, 0, 0)) == CompensationPoly(0, 0, 0)
    assert cal.poly_from_constants(DeviceConstants(27000, 26000, 0)).c2 == 0.0


def test_device_constants_reject_non_finite():
    with pytest.raises(ValueError):
        DeviceConstants(math.nan, 1, 1)
    with pytest.raises(ValueError):
        DeviceConstants.parse("1,2")
    assert DeviceConstants.parse(" 1, 2.5 ,-3") == DeviceConstants(1, 2.5, -3)


# -- discriminant ------------------------------------------------------------------

def test_discriminant_identity_symbolic():
    d1, d2, d3 = sympy.symbols("d1 d2 d3")
    k0 = sympy.Rational(4, 5 * 2**22)
    k1 = sympy.Rational(4, 5 * 2**26)
    k2 = sympy.Rational(4, 5 * 2**46)
    c0 = -k0 * (d1 * d2 - d1**2 * d3 / 2**16)
    c1 = k1 * (d2 - d1 * d3 / 2**15)
    c2 = k2 * d3
    assert sympy.expand(c1**2 - 4 * c0 * c2 - k1**2 * d2**2) == 0


@settings(max_examples=500)
@given(constants)
def test_discriminant_identity(d):
    c = cal.poly_from_constants(d)
    assert rel(c.discriminant, (4 / (5 * 2**26)) ** 2 * d.d2**2) < 1e-9


# -- inversion ---------------------------------------------------------------------

@pytest.mark.parametrize("sensor", sorted(REFERENCE_SENSORS))
def test_inversion_against_high_precision_root(sensor):
    new = REFERENCE_SENSORS[sensor][1]
    mpmath.mp.dps = 50
    c0, c1, c2 = (mpmath.mpf(x.numerator) / x.denominator for x in exact_poly(*new))
    root = mpmath.sqrt(c1**2 - 4 * c0 * c2)
    want = ((-c1 + root) / (32 * c2), 5 * 2**26 / mpmath.mpf(4) * root, 5 * 2**46 / mpmath.mpf(4) * c2)
    got = cal.constants_from_poly(cal.poly_from_constants(DeviceConstants(*new)))
    for g, w in zip((got.d1, got.d2, got.d3), want):
        assert rel(g, float(w)) < 1e-9


@pytest.mark.parametrize("sensor", sorted(REFERENCE_SENSORS))
def test_round_trip_reference_rows(sensor):
    d = DeviceConstants(*REFERENCE_SENSORS[sensor][1])
    back = cal.constants_from_poly(cal.poly_from_constants(d))
    assert back.d1 == pytest.approx(d.d1, abs=1)
    assert back.d2 == pytest.approx(d.d2, abs=1)
    assert back.d3 == pytest.approx(d.d3, abs=0.01)


def test_other_root_does_not_round_trip():
    d = DeviceConstants(28469, 26034, 753.63)
    c = cal.poly_from_constants(d)
    other = -(c.c1 + math.sqrt(c.discriminant)) / (32 * c.c2)
    assert abs(other - d.d1) > 1e6


@settings(max_examples=2000)
@given(constants)
def test_round_trip_property(d):
    back = cal.constants_from_poly(cal.poly_from_constants(d))
    assert rel(back.d1, d.d1) < 1e-9
    assert rel(back.d2, d.d2) < 1e-9
    assert rel(back.d3, d.d3) < 1e-9


def test_negative_discriminant():
    with pytest.raises(cal.NegativeDiscriminant):
        cal.constants_from_poly(CompensationPoly(1.0, 0.0, 1.0))


def test_linear_fallback():
    d = cal.constants_from_poly(CompensationPoly(0.0, 4 / (5 * 2**26), 0.0))
    assert (d.d1, d.d2, d.d3) == (0.0, 1.0, 0.0)
    d = cal.constants_from_poly(cal.poly_from_constants(DeviceConstants(27000, 26000, 0)))
    assert d.d1 == pytest.approx(27000, rel=1e-12)
    assert d.d2 == pytest.approx(26000, rel=1e-12)
    assert d.d3 == 0.0


def test_underdetermined():
    with pytest.raises(cal.Underdetermined):
        cal.constants_from_poly(CompensationPoly(3.0, 0.0, 0.0))


# -- compensate and raw inversion --------------------------------------------------

def test_compensate_simple():
    assert cal.compensate(CompensationPoly(0, 1, 0), 25) == 25.0
    assert cal.compensate(CompensationPoly(-151.6, 3.357e-4, 5.68e-13), 0) == -151.6


@pytest.mark.parametrize("temp", [-40.0, -3.5, 0.0, 21.7, 60.0])
def test_compensate_at_raw_for_temperature(temp):
    c = cal.poly_from_constants(DeviceConstants(28304, 26409, 299.61))
    # independent root: numpy's companion-matrix solver
    roots = np.roots([c.c2, c.c1, c.c0 - temp])
    inc = [r.real for r in roots if abs(r.imag) < 1e-6 and c.c1 + 2 * c.c2 * r.real > 0]
    raw = cal.raw_for_temperature(c, temp)
    assert raw == pytest.approx(inc[0], rel=1e-9)
    assert cal.compensate(c, raw) == pytest.approx(temp, abs=1e-9)


def test_raw_for_temperature_unreachable():
    with pytest.raises(cal.RangeUnreachable):
        cal.raw_for_temperature(CompensationPoly(0.0, 1.0, -1.0), 10.0)
    with pytest.raises(cal.RangeUnreachable):
        cal.raw_for_temperature(CompensationPoly(5.0, 0.0, 0.0), 10.0)


# -- fitting -----------------------------------------------------------------------

def sweep_from_poly(c, raws, force=True):
    raws = np.asarray(raws, dtype=float)
    return cal.ChamberSweep.from_arrays(np.arange(len(raws)) * 3600.0, cal.compensate(c, raws), raws, force=force)


def test_fit_interpolates_three_points():
    c = cal.fit_poly(sweep_from_poly(CompensationPoly(1, 2, 3), [0, 1, 2]))
    assert (c.c0, c.c1, c.c2) == pytest.approx((1, 2, 3), abs=1e-9)


def test_fit_errors():
    with pytest.raises(cal.InsufficientData):
        cal.fit_poly(sweep_from_poly(CompensationPoly(1, 2, 3), [0, 1]))
    with pytest.raises(cal.SingularFit):
        cal.fit_poly(sweep_from_poly(CompensationPoly(1, 2, 3), [1000] * 5))
    with pytest.raises(cal.SingularFit):
        cal.fit_poly(sweep_from_poly(CompensationPoly(1, 2, 3), [1, 1, 2, 2]))


@settings(max_examples=200)
@given(
    c0=st.floats(-200, 200),
    c1=st.floats(1e-4, 1e-3),
    c2=st.floats(-1e-11, 1e-11),
    lo=st.floats(3e5, 4e5),
    span=st.floats(5e4, 2e5),
)
def test_fit_recovers_noiseless_poly(c0, c1, c2, lo, span):
    truth = CompensationPoly(c0, c1, c2)
    raws = np.linspace(lo, lo + span, 40)
    fitted = cal.fit_poly(sweep_from_poly(truth, raws))
    assert np.max(np.abs(cal.compensate(fitted, raws) - cal.compensate(truth, raws))) < 1e-9


def chamber_sweep(d, n=200, sigma=0.0, seed=0, round_raw=False):
    poly = cal.poly_from_constants(DeviceConstants(*d))
    t_ref = np.linspace(-40.0, 60.0, n)
    elapsed = np.arange(n) * (100.0 / (n - 1)) / 0.19 * 60.0  # 0.19 C/min
    raws = np.array([cal.raw_for_temperature(poly, t) for t in t_ref])
    if round_raw:
        raws = np.round(raws)
        t_ref = cal.compensate(poly, raws)
    t_ref = t_ref + np.random.default_rng(seed).normal(0.0, sigma, n)
    return poly, cal.ChamberSweep.from_arrays(elapsed, t_ref, raws, force=True)


def test_noisy_fit_within_tenth_kelvin():
    truth, sweep = chamber_sweep(REFERENCE_SENSORS[1][1], sigma=0.02, seed=1)
    fitted = cal.fit_poly(sweep)
    raws = np.linspace(cal.raw_for_temperature(truth, -40), cal.raw_for_temperature(truth, 60), 1000)
    assert np.max(np.abs(cal.compensate(fitted, raws) - cal.compensate(truth, raws))) < 0.1


def test_recalibrate_recovers_constants():
    _, sweep = chamber_sweep(REFERENCE_SENSORS[4][1], round_raw=True)
    d = cal.recalibrate(sweep)
    assert (d.d1, d.d2, d.d3) == pytest.approx((28304, 26409, 299.61), abs=1)


def test_recalibrate_linear_device():
    c = cal.poly_from_constants(DeviceConstants(27000, 26000, 0))
    raws = np.linspace(3e5, 5e5, 30)
    d = cal.recalibrate(sweep_from_poly(c, raws))
    assert d.d3 == 0.0
    assert d.d2 == pytest.approx(26000, rel=1e-6)


# -- chamber sweep validation ------------------------------------------------------

def test_sweep_ramp_limit():
    fast = dict(t_elapsed=[0, 60], t_ref=[20.0, 20.5], t_raw=[1, 2])
    with pytest.raises(cal.RampTooFast):
        cal.ChamberSweep.from_arrays(*fast.values())
    assert cal.ChamberSweep.from_arrays(*fast.values(), force=True).forced
    ok = cal.ChamberSweep.from_arrays([0, 60], [20.0, 20.2], [1, 2])
    assert len(ok.points) == 2


def test_sweep_range_and_time_order():
    with pytest.raises(cal.OutOfChamberRange):
        cal.ChamberSweep.from_arrays([0], [61.0], [1])
    with pytest.raises(cal.RampTooFast):
        cal.ChamberSweep.from_arrays([10, 10], [20.0, 20.0], [1, 2])


def test_sweep_csv_round_trip(tmp_path):
    _, sweep = chamber_sweep(REFERENCE_SENSORS[2][1], n=20)
    path = tmp_path / "s.csv"
    sweep.write_csv(path)
    text = "# chamber run 3\n" + path.read_text()
    back = cal.ChamberSweep.read_csv(io.StringIO(text), force=True)
    assert back.points == sweep.points
    with pytest.raises(ValueError):
        cal.ChamberSweep.read_csv(io.StringIO("a,b,c\n1,2,3\n"))


def test_report_format():
    text = cal.format_report(DeviceConstants(1, 2, 3), 0.05)
    assert text.splitlines() == ["d1=1.000000", "d2=2.000000", "d3=3.000000", "max_residual_k=0.050000"]


# -- deviation ---------------------------------------------------------------------

@pytest.mark.parametrize("sensor", sorted(REFERENCE_SENSORS))
def test_deviation_matches_oracle(sensor):
    factory, new = REFERENCE_SENSORS[sensor]
    lo, hi = cal.deviation_range(DeviceConstants(*factory), DeviceConstants(*new), -40, 60)
    assert (lo, hi) == pytest.approx(ORACLE_DEVIATION[sensor], abs=1e-9)


@settings(max_examples=300)
@given(constants)
def test_deviation_of_identical_calibrations_is_zero(d):
    lo, hi = cal.deviation_range(d, d, -40, 60)
    assert abs(lo) < 1e-9 and abs(hi) < 1e-9


def test_deviation_identical_exact():
    d = DeviceConstants(28304, 26409, 299.61)
    assert cal.deviation_range(d, d) == (0.0, 0.0)


# -- DS18B20 offset ----------------------------------------------------------------

def test_offset_examples():
    assert cal.ds18b20_offset([20.0, 20.0], 20.0).offset == 0.0
    oc = cal.ds18b20_offset([20.3], 20.0)
    assert oc.offset == pytest.approx(-0.3, abs=2**-16)
    assert (oc.reference_temp, oc.n_samples) == (20.0, 1)
    with pytest.raises(cal.UnstableBath):
        cal.ds18b20_offset([19.0, 21.0], 20.0)
    with pytest.raises(cal.EmptyReadings):
        cal.ds18b20_offset([], 20.0)


@settings(max_examples=1000)
@given(
    readings=st.lists(st.integers(19 * 16, 21 * 16), min_size=1, max_size=20).filter(
        lambda r: max(r) - min(r) < 8
    ),
    probe=st.integers(-55 * 16, 125 * 16),
)
def test_offset_apply_unapply_is_exact(readings, probe):
    oc = cal.ds18b20_offset([r / 16 for r in readings], 20.0)
    x = probe / 16
    assert oc.unapply(oc.apply(x)) == x
    assert oc.apply(oc.unapply(x)) == x


def test_offset_csv(tmp_path):
    p = tmp_path / "r.csv"
    p.write_text("sensor_id,temp_c\na,20.1\na,20.2\nb,19.9\n")
    assert cal.read_offset_csv(p) == {"a": [20.1, 20.2], "b": [19.9]}
    p.write_text("# bare\n20.0\n20.1\n")
    assert cal.read_offset_csv(p) == {"-": [20.0, 20.1]}
