import pytest

from rpmkit import selftest
from rpmkit.cli import main
from rpmkit.selftest import CHECKS, run_selftest


@pytest.fixture(scope="module")
def results():
    return run_selftest()


def test_every_check_passes(results):
    assert [r.name for r in results] == [name for name, _ in CHECKS]
    failed = [(r.name, r.detail) for r in results if not r.passed]
    assert not failed


def test_name_filter():
    out = run_selftest(["digamma"])
    assert len(out) == 1 and out[0].name == "digamma" and out[0].seconds >= 0


def test_crashing_check_is_a_failure(monkeypatch):
    def boom():
        raise RuntimeError("broken oracle")

    monkeypatch.setattr(selftest, "CHECKS", [("boom", boom), ("ok", lambda: (True, "fine"))])
    out = run_selftest()
    assert [r.passed for r in out] == [False, True]
    assert "RuntimeError: broken oracle" in out[0].detail


def test_cli_exit_codes(monkeypatch, capsys):
    monkeypatch.setattr(selftest, "CHECKS", [("ok", lambda: (True, "fine"))])
    assert main(["selftest"]) == 0
    assert capsys.readouterr().out.startswith("PASS")
    monkeypatch.setattr(selftest, "CHECKS", [("bad", lambda: (False, "off"))])
    assert main(["selftest"]) == 1
    assert "FAIL" in capsys.readouterr().out
