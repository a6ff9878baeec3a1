import math

import nlosimg


def test_bundled_names():
    names = nlosimg.bundled_scenarios()
    assert "fr3_baseline" in names
    assert "moving_lens" in names


def test_design_and_toml_round_trip():
    sc = nlosimg.Scenario.open("fr3_baseline")
    d = sc.design()
    assert d["beams"] >= d["imaging_beams"] > 0
    assert 0.0 < d["rho_psi"] < 0.1
    again = nlosimg.Scenario.from_toml(sc.to_toml())
    assert again.name == sc.name
    assert again.design() == d


def test_image_finds_the_target():
    sc = nlosimg.Scenario.open("fig5d_modular")
    rep = sc.run("image", seed=3)
    s = rep.summary
    assert s["detected"] == len(s["target_snr_db"]) == 17
    img = rep.image
    assert img.coordinates == "polar"
    n1, n2 = img.shape
    mag = img.magnitude()
    assert len(mag) == n1 and len(mag[0]) == n2
    r, psi, peak = img.peak()
    assert min(img.axis1) <= r <= max(img.axis1)
    assert peak >= 0.99 * max(v for row in mag for v in row)
    assert rep.files == []


def test_closed_form_resolution():
    r = nlosimg.nf_resolution(20.0, 0.0, 1e6, 15e9, 200e6)
    # Very long aperture: range resolution approaches c/(2B).
    assert math.isclose(r["rho_R_ff"], 299792458.0 / (2 * 200e6), rel_tol=1e-2)


def test_oracle_passes():
    passed, rows = nlosimg.run_oracle("coverage_vs_closed_form", cases=3)
    assert passed
    assert len(rows) == 6


def test_bad_input_raises():
    try:
        nlosimg.Scenario.open("no_such_scenario")
    except ValueError as e:
        assert "no_such_scenario" in str(e)
    else:
        raise AssertionError("expected ValueError")
