import json
from pathlib import Path

import pytest

from lowrank_kbp.cli import build_parser, main

TINY_RUN = """
name = "cli"
seed = 9

[model]
d = 8
true_rank = 3

[discretization]
dt = 1e-3
T = 0.02

[filter]
kind = "dlr-kbp"
rank = 2
"""


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "cli.toml"
    path.write_text(TINY_RUN, encoding="utf-8")
    return path


def _run(capsys, *argv) -> Path:
    assert main(list(argv)) == 0
    return Path(capsys.readouterr().out.strip().splitlines()[-1])


def test_parser_requires_a_verb() -> None:
    with pytest.raises(SystemExit):
        build_parser().parse_args([])


def test_list_presets(capsys) -> None:
    assert main(["list-presets"]) == 0
    names = capsys.readouterr().out.split()
    assert "advection_rank_sweep" in names and len(names) == 6


def test_validate_config(capsys, tiny_config) -> None:
    assert main(["validate-config", str(tiny_config)]) == 0
    assert "valid (single, dlr-kbp, 1 replicate(s))" in capsys.readouterr().out
    assert main(["validate-config", "advection_poc"]) == 0
    assert "warning: P=8" in capsys.readouterr().out


def test_invalid_config_exits_with_2(tmp_path) -> None:
    bad = tmp_path / "bad.toml"
    bad.write_text("[filter]\nkind = \"particle\"\n", encoding="utf-8")
    assert main(["validate-config", str(bad)]) == 2
    assert main(["run", str(bad), "--output", str(tmp_path)]) == 2
    assert main(["validate-config", str(tmp_path / "missing.toml")]) == 2
    mistyped = tmp_path / "mistyped.toml"
    mistyped.write_text("[study]\nkind = \"rank-sweep\"\ngrid = [\"a\"]\n", encoding="utf-8")
    assert main(["validate-config", str(mistyped)]) == 2


def test_run_and_compare(capsys, tmp_path, tiny_config) -> None:
    first = _run(capsys, "run", str(tiny_config), "--output", str(tmp_path / "a"), "--force")
    assert first == tmp_path / "a" / "cli"
    assert json.loads((first / "summary.json").read_text())["seed"] == 9

    rerun = _run(capsys, "run", str(first / "config.json"), "--output", str(tmp_path / "b"), "--force")
    assert main(["compare", str(first), str(rerun), "--tolerance", "0"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["max_deviation"] == 0.0

    reseeded = _run(capsys, "run", str(tiny_config), "--seed", "10", "--dump-modes",
                    "--output", str(tmp_path / "c"), "--force")
    assert json.loads((reseeded / "summary.json").read_text())["seed"] == 10
    assert any((reseeded / "replicate_0" / "modes").rglob("*.lrkb"))
    assert main(["compare", str(first), str(reseeded), "--tolerance", "1e-12"]) == 4
    assert main(["compare", str(first), str(tmp_path)]) == 2
