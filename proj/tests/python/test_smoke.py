import math

import pytest

import ditto_sim


@pytest.fixture(scope="module")
def dit():
    return ditto_sim.generate_trace("toy-dit", steps=5, seed=4)


def test_generation_is_deterministic(dit):
    again = ditto_sim.generate_trace("toy-dit", steps=5, seed=4)
    assert again == dit
    assert again.sha256() == dit.sha256()
    assert dit.steps == 5


def test_save_and_load(dit, tmp_path):
    path = tmp_path / "t.trace"
    dit.save(str(path))
    assert ditto_sim.Trace.load(str(path)) == dit


def test_verify_is_exact(dit):
    rep = ditto_sim.verify(dit)
    assert rep["checks"] > 0
    assert rep["mismatches"] == 0


def test_simulate_and_compare(dit):
    run = ditto_sim.simulate(dit, "ditto", "ditto")
    assert run["variant"] == "ditto"
    rows = ditto_sim.compare(dit)["rows"]
    itc = [r for r in rows if r["preset"] == "itc"][0]
    assert math.isclose(itc["cycles_norm"], 1.0)


def test_errors_surface_as_ditto_error(dit):
    with pytest.raises(ditto_sim.DittoError):
        ditto_sim.simulate(dit, "ditto", "itc")
    with pytest.raises(ditto_sim.DittoError):
        ditto_sim.generate_trace("toy-unet", steps=1)


def test_cosine():
    assert ditto_sim.cosine([1.0, 0.0], [2.0, 0.0]) == pytest.approx(1.0)
    assert ditto_sim.cosine([1.0, 0.0], [0.0, 0.0]) == 0.0


def test_analyze(dit):
    summary = ditto_sim.analyze(dit, "toy-dit")
    assert summary["model"] == "toy-dit"
