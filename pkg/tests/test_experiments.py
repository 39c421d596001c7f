import numpy as np
import pytest

from qrbs.experiments import HingeRun, candy_wrapper


def test_candy_wrapper_lbs_collapses_dq_keeps_volume():
    lbs = candy_wrapper("lbs")
    dq = candy_wrapper("dq")
    assert lbs.size == dq.size and lbs.size > 0
    assert lbs.max() < 0.1
    assert dq.min() >= 0.9 and dq.max() <= 1.1


@pytest.mark.parametrize("twist", [0.0, 45.0, 90.0])
def test_candy_wrapper_small_twists(twist):
    dq = candy_wrapper("dq", twist_deg=twist)
    lbs = candy_wrapper("lbs", twist_deg=twist)
    np.testing.assert_allclose(dq, 1.0, atol=1e-9)
    # a linear blend at the midline shrinks by cos(theta/2)
    np.testing.assert_allclose(lbs, np.cos(np.radians(twist) / 2), atol=1e-9)


def test_hinge_run_summary():
    run = HingeRun("dq", 3, 1.0, np.array([0.0, 10.0, 21.0]), np.array([0.0, 10.0, 20.0]),
                   [0.03, 0.02], [2.0, 4.0], 0.5)
    assert run.median_angle_error == 0.0
    assert run.final_rms == 0.02 and run.mean_cd == 3.0
    assert run.summary()["blend"] == "dq"
