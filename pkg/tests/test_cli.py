# tests/test_cli.py
import io
import json
from pathlib import Path

import pytest

from main import run
from services.demand_service import DemandService
from services.grid_service import GridService

CASES = Path(__file__).resolve().parent.parent / "cases"

QUIET = ["--log-level", "ERROR"]


@pytest.fixture(autouse=True)
def _logging(restore_logging):
    yield


def call(*argv):
    out = io.StringIO()
    code = run(list(argv) + QUIET, stdout=out)
    return code, out.getvalue()


def last_error(capsys):
    line = capsys.readouterr().err.strip().splitlines()[-1]
    return json.loads(line)


def data_rows(text):
    return [line.split("\t") for line in text.splitlines() if line and not line.startswith("#")]


def test_unknown_command(capsys):
    code, _ = call("bogus")
    assert code == 64
    err = last_error(capsys)
    assert err["success"] is False
    assert err["error"]["kind"] == "UsageError"


def test_missing_required_flag(capsys):
    code, _ = call("evaluate", "--case", str(CASES / "case3_uc.m"))
    assert code == 64
    err = last_error(capsys)
    assert err["error"]["code"] == 64
    assert "--checkpoint" in err["error"]["message"]


def test_missing_case_file(capsys, tmp_path):
    code, _ = call("solve", "--case", str(tmp_path / "absent.m"))
    assert code == 2
    assert last_error(capsys)["error"]["code"] == 2


def test_malformed_case(capsys, tmp_path):
    path = tmp_path / "bad.m"
    path.write_text("mpc.bus = [\n1 3 0;\n")
    code, _ = call("solve", "--case", str(path))
    assert code == 2
    assert last_error(capsys)["error"]["kind"] == "CaseSyntaxError"


def test_solve_case14():
    code, text = call("solve", "--case", str(CASES / "case14.m"))
    assert code == 0
    rows = data_rows(text)
    assert len(rows) == 14
    assert "converged=1" in text
    assert "#bus\tvm\tva_deg\tv_re\tv_im" in text
    assert float(rows[0][1]) == pytest.approx(1.06)


def test_solve_to_file(tmp_path):
    out = tmp_path / "v.tsv"
    code, text = call("solve", "--case", str(CASES / "case3_uc.m"), "--out", str(out))
    assert code == 0
    assert text == ""
    assert len(data_rows(out.read_text())) == 3


def test_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "run.env"
    cfg.write_text("N_MAX=8\npade-m=3\n")
    case = str(CASES / "case3_uc.m")
    _, text = call("solve", "--case", case, "--config", str(cfg))
    assert "n_max=8 pade_m=3" in text
    _, text = call("solve", "--case", case, "--config", str(cfg), "--n-max", "12")
    assert "n_max=12 pade_m=3" in text


def test_invalid_settings_exit_code(capsys):
    code, _ = call("solve", "--case", str(CASES / "case3_uc.m"), "--n-max", "4", "--pade-m", "3")
    assert code == 2
    assert last_error(capsys)["error"]["kind"] == "PreconditionError"


def test_newton_raphson_oracle():
    code, text = call("oracle", "nr", "--case", str(CASES / "case14.m"))
    assert code == 0
    assert "converged=1" in text
    assert len(data_rows(text)) == 14


def test_sweep_alpha_rows():
    code, text = call("sweep-alpha", "--case", str(CASES / "case3_uc.m"), "--alphas", "0.5,1.0",
                      "--n-max", "8", "--pade-m", "4")
    assert code == 0
    rows = data_rows(text)
    assert sorted((float(r[0]), int(r[1])) for r in rows) == [(0.5, 4), (0.5, 8), (1.0, 4), (1.0, 8)]


def test_gradcheck_passes_on_small_case():
    code, text = call("gradcheck", "--case", str(CASES / "case3_uc.m"), "--count", "2", "--seed", "3")
    assert code == 0
    rows = data_rows(text)
    assert rows
    assert all(r[-1] == "1" for r in rows)


def test_synth_demand(tmp_path):
    out = tmp_path / "demand.csv"
    code, _ = call("synth-demand", "--case", str(CASES / "case3_uc.m"), "--count", "48", "--out", str(out),
                   "--seed", "2")
    assert code == 0
    network = GridService.prepare(GridService.load_case(CASES / "case3_uc.m"))
    assert DemandService.load_demand(out, network).shape == (48, 3)


def test_synth_demand_needs_out(capsys):
    code, _ = call("synth-demand", "--case", str(CASES / "case3_uc.m"))
    assert code == 64


def test_train_then_evaluate(tmp_path):
    case = str(CASES / "case3_uc.m")
    demand = tmp_path / "demand.csv"
    ckpt = tmp_path / "policy.npz"
    metrics = tmp_path / "metrics.tsv"
    small = ["--n-max", "6", "--pade-m", "3", "--samples", "2"]
    assert call("synth-demand", "--case", case, "--count", "12", "--out", str(demand))[0] == 0

    code, _ = call("train", "--case", case, "--demand", str(demand), "--test-fraction", "0.25", "--steps", "2",
                   "--batch", "2", "--hidden", "8", "--checkpoint", str(ckpt), "--out", str(metrics), *small)
    assert code == 0
    assert ckpt.is_file()
    assert len(data_rows(metrics.read_text())) == 2

    code, text = call("evaluate", "--case", case, "--checkpoint", str(ckpt), "--demand", str(demand),
                      "--test-fraction", "0.25", *small)
    assert code == 0
    assert "# instances=3" in text
    assert len(data_rows(text)) == 3

    code, text = call("infer", "--case", case, "--checkpoint", str(ckpt), *small)
    assert code == 0
    rows = data_rows(text)
    assert len(rows) == 1
    assert rows[0][5] in ("0", "1")


def test_checkpoint_of_another_case(tmp_path, capsys):
    demand = tmp_path / "demand.csv"
    ckpt = tmp_path / "policy.npz"
    case = str(CASES / "case3_uc.m")
    call("synth-demand", "--case", case, "--count", "4", "--out", str(demand))
    call("train", "--case", case, "--demand", str(demand), "--steps", "1", "--batch", "1", "--samples", "2",
         "--hidden", "4", "--n-max", "4", "--pade-m", "2", "--checkpoint", str(ckpt), "--out",
         str(tmp_path / "m.tsv"))
    code, _ = call("infer", "--case", str(CASES / "case3_two_units.m"), "--checkpoint", str(ckpt))
    assert code == 2
    assert last_error(capsys)["error"]["kind"] == "CheckpointError"


def header_value(text, key):
    for token in text.replace("\n", " ").split():
        if token.startswith(key + "="):
            return float(token.split("=", 1)[1])
    raise AssertionError(f"{key} not in output")


def test_solve_at_given_injections(tmp_path):
    case = str(CASES / "case3_uc.m")
    _, base = call("solve", "--case", case)
    injections = tmp_path / "setpoints.csv"
    injections.write_text("bus,p,q\n2,60,10\n")
    code, text = call("solve", "--case", case, "--injections", str(injections), "--v-s", "1.04")
    assert code == 0
    assert header_value(text, "v_s") == pytest.approx(1.04)
    assert float(data_rows(text)[0][1]) == pytest.approx(1.04)
    # 22 MW less from the unit, picked up by the slack
    assert header_value(text, "slack_p") - header_value(base, "slack_p") == pytest.approx(0.22, abs=0.02)

    code, text = call("oracle", "nr", "--case", case, "--injections", str(injections), "--v-s", "1.04")
    assert code == 0
    assert float(data_rows(text)[0][1]) == pytest.approx(1.04)


def test_injections_on_a_bus_without_units(tmp_path, capsys):
    injections = tmp_path / "setpoints.csv"
    injections.write_text("bus,p,q\n3,60,10\n")
    code, _ = call("solve", "--case", str(CASES / "case3_uc.m"), "--injections", str(injections))
    assert code == 2
    assert last_error(capsys)["error"]["kind"] == "DemandDataError"
