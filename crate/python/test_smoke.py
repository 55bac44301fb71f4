"""Smoke test for the Python extension: python3 -m pytest python/ (or run directly)."""
import json

import cordic_rpe as cr


def test_format():
    f = cr.Format.parse("Q8.4")
    assert (f.word_bits, f.frac_bits) == (8, 4)
    assert f.quantize(1 / 3) == 5
    assert f.to_real(5) == 0.3125


def test_linear_mac():
    # odd sixteenths are exact after 5 rotations
    assert cr.linear_mac(1.0, 0.3125, 0.5) == 0.8125


def test_rpe():
    r = cr.Rpe("tanh")
    assert r.af_cycles == 9
    _, cycles, _ = cr.Rpe("relu").mac_stream([1.0] * 9, [0.0625] * 9)
    assert cycles == 13
    assert cr.Rpe("relu").activate(-1.0)[0] == 0.0


def test_schedule():
    rep = json.loads(cr.schedule("C1_1 conv k=3 cin=3 cout=64 h=32 w=32 pad=1"))
    assert rep["entries"][0]["op_cycles"] == 1728


def test_simulate():
    measured, analytic, _ = cr.simulate("C1_1 conv k=3 cin=3 cout=64 h=32 w=32 pad=1", "C1_1")
    assert analytic == 1728 and measured - analytic <= 4


if __name__ == "__main__":
    for name, fn in list(globals().items()):
        if name.startswith("test_"):
            fn()
    print("ok")
