import math

import numpy as np
import pytest

import medslip


def test_protocl_canonical_values():
    R = np.array([1.0, 0.0])
    pos = np.array([[1.0, 0.0]])
    neg = np.array([[0.0, 1.0], [0.0, -1.0]])
    assert medslip.protocl_loss(R, pos, neg, tau=1.0) == pytest.approx(math.log(1 + 2 / math.e), abs=1e-12)
    lit = medslip.protocl_loss(R, pos, neg, tau=1.0, variant="paper-literal")
    assert lit == pytest.approx(math.log(2) - 1, abs=1e-12)
    with pytest.raises(medslip.ConfigError):
        medslip.protocl_loss(R, pos, neg, variant="nope")


def test_exist_and_icl_match_numpy():
    z = np.array([2.0, -1.0, 0.5])
    y = np.array([1.0, 0.0, 1.0])
    bce = np.mean(np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z))))
    assert medslip.exist_loss(z, y) == pytest.approx(bce, abs=1e-12)
    rng = np.random.default_rng(0)
    Rp, Ra = rng.normal(size=(2, 4)), rng.normal(size=(3, 4))
    L = np.array([[1.0, 0, 0], [0, 1, 1]])
    assert math.isfinite(medslip.icl_loss(Rp, Ra, L, 5.0))


def test_auc():
    assert medslip.auc(np.array([0.1, 0.4, 0.35, 0.8]), np.array([0.0, 0, 1, 1])) == pytest.approx(0.75)
    assert medslip.auc(np.array([0.1, 0.2]), np.array([1.0, 1.0])) is None


def test_study_report_round_trip():
    s = medslip.generate_study(3, seed=1)
    assert s["image"].shape == (96, 96)
    triplets, skipped = medslip.parse_report(s["report"], s["study_id"])
    assert skipped == 0
    assert sorted(triplets) == sorted(s["triplets"])
    assert medslip.render_report(s["triplets"]) == s["report"]


def test_grad_check():
    assert "forward" in medslip.grad_check_selectors()
    assert medslip.grad_check("exist", 0)["max_rel_error"] < 1e-4


def test_cli(tmp_path):
    code, out, err = medslip.run_cli(["synth", "--count", "4", "--out", str(tmp_path / "c")])
    assert code == 0
    assert (tmp_path / "c" / "run_manifest.json").exists()
    assert medslip.run_cli(["synth"])[0] == 2
