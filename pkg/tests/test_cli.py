import re

import pytest

from mixerflow.cli import main

from conftest import tiny_run


def _lines(capsys):
    return capsys.readouterr().out.splitlines()


def test_check_layers_all_pass(capsys):
    assert main(["check", "--scope", "layers"]) == 0
    lines = _lines(capsys)
    assert lines and all(re.fullmatch(r"CHECK \S+ PASS \S+", l) for l in lines)


def test_check_detects_log_det_fault(capsys):
    assert main(["check", "--scope", "layers", "--fault", "0.1"]) == 1
    fails = [l for l in _lines(capsys) if " FAIL " in l]
    assert fails
    for l in fails:
        assert float(l.split()[-1]) == pytest.approx(0.1, rel=1e-3)


@pytest.mark.parametrize("scope", ["data", "gradients"])
def test_other_scopes_pass(scope, capsys):
    assert main(["check", "--scope", scope]) == 0
    assert all(" PASS " in l for l in _lines(capsys))


def test_train_eval_sample_round_trip(tmp_path, tiny_mnist, capsys):
    cfg = tmp_path / "tiny.cfg"
    cfg.write_text(tiny_run(tmp_path / "unused", tiny_mnist).to_text())
    out = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--data-dir", str(tiny_mnist), "--steps", "4",
                 "--out", str(out)]) == 0
    final = _lines(capsys)[-1]
    assert final.startswith("final step=4 val_bpd=")
    assert main(["eval", "--checkpoint", str(out / "checkpoint"), "--data-dir", str(tiny_mnist)]) == 0
    ev = _lines(capsys)[-1]
    assert float(re.search(r"bpd=(\S+)", ev).group(1)) == float(re.search(r"val_bpd=(\S+)", final).group(1))
    assert main(["sample", "--checkpoint", str(out / "checkpoint"), "--count", "3", "--seed", "1",
                 "--out", str(tmp_path / "s")]) == 0
    assert len(_lines(capsys)) == 4


def test_gradcheck_command(tmp_path, tiny_mnist, capsys):
    cfg = tmp_path / "tiny.cfg"
    cfg.write_text(tiny_run(tmp_path / "unused", tiny_mnist).to_text())
    assert main(["gradcheck", "--config", str(cfg), "--batch", "4", "--samples", "20"]) == 0
    assert _lines(capsys)[-1].startswith("CHECK gradients PASS")


def test_errors_exit_two(tmp_path, capsys):
    assert main(["eval", "--checkpoint", str(tmp_path / "missing"), "--data-dir", str(tmp_path)]) == 2
    assert capsys.readouterr().err.startswith("error:")
    bad = tmp_path / "bad.cfg"
    bad.write_text("bogus_key = 3\n")
    assert main(["train", "--config", str(bad), "--data-dir", str(tmp_path)]) == 2
