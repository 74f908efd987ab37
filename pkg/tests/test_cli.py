from __future__ import annotations

import csv
import json
import subprocess
import sys

import pytest

from coeflow import __version__
from coeflow.cli import main


def run(*argv):
    return main([str(a) for a in argv])


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_analyze_memory_bound_row(tmp_path, capsys):
    assert run("analyze", "--graph", "monarch.json", "--platform", "dgx_a100", "--out", tmp_path) == 0
    rows = read_csv(tmp_path / "analyze.csv")
    agg = rows[-1]
    assert "MemoryBound" in agg.values()
    assert "analyze.csv" in json.loads((tmp_path / "manifest.json").read_text())["outputs"]


def test_manifest_contents(tmp_path):
    assert run("fuse", "--graph", "decoder_prefill.json", "--seed", 7, "--out", tmp_path) == 0
    m = json.loads((tmp_path / "manifest.json").read_text())
    assert m["command"] == "fuse"
    assert m["seed"] == 7 and m["platform"] == "sn40l_node"
    assert m["version"] == __version__
    assert m["outputs"] == ["fusionplan.json"]
    plan = json.loads((tmp_path / "fusionplan.json").read_text())
    assert len(plan["kernels"]) == 3


def test_missing_file_exit_2(tmp_path, capsys):
    assert run("analyze", "--graph", tmp_path / "nope.json") == 2
    assert "error" in capsys.readouterr().err


def test_malformed_graph_exit_2(tmp_path):
    bad = tmp_path / "g.json"
    bad.write_text('{"version": "opgraph_v1", "tensors": 3}')
    assert run("analyze", "--graph", bad) == 2


def test_infeasible_exit_3(capsys):
    assert run("serve", "--experts", 860, "--requests", 10) == 3
    assert "infeasible" in capsys.readouterr().err


def test_bad_jobs_rejected():
    with pytest.raises(SystemExit):
        run("footprint", "--jobs", 0)


def test_footprint_csv(tmp_path):
    assert run("footprint", "--experts", "850", "--out", tmp_path) == 0
    got = {r["platform"]: int(r["machines"]) for r in read_csv(tmp_path / "footprint.csv")}
    assert got == {"sn40l_node": 1, "dgx_a100": 19, "dgx_h100": 19}


def test_serve_outputs(tmp_path):
    assert run("serve", "--experts", 20, "--requests", 64, "--out", tmp_path) == 0
    reqs = read_csv(tmp_path / "requests.csv")
    assert len(reqs) == 64
    summary = read_csv(tmp_path / "summary.csv")[0]
    assert int(summary["hits"]) + int(summary["misses"]) == 64


def test_estimate_and_memplan(tmp_path):
    assert run("estimate", "--graph", "decoder_decode.json", "--out", tmp_path / "e") == 0
    assert (tmp_path / "e" / "perf.csv").exists()
    assert run("memplan", "--graph", "decoder_prefill.json", "--out", tmp_path / "m") == 0
    assert json.loads((tmp_path / "m" / "memplan.json").read_text())["version"] == "memplan_v1"


def test_pnr(tmp_path):
    assert run("pnr", "--graph", "monarch.json", "--policy", "maximal", "--out", tmp_path) == 0
    rows = read_csv(tmp_path / "routes.csv")
    assert rows and list(rows[0]) == ["flow_id", "link", "demand", "utilization"]
    placement = json.loads((tmp_path / "placement.json").read_text())
    assert placement["wirelength"] > 0 and placement["sites"]


def test_reruns_byte_identical(tmp_path):
    args = ("serve", "--experts", 30, "--requests", 100, "--seed", 3)
    assert run(*args, "--out", tmp_path / "a") == 0
    assert run(*args, "--out", tmp_path / "b") == 0
    for name in ("requests.csv", "summary.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_sweep_jobs_invariant(tmp_path):
    common = ("sweep", "--counts", "1,20,45", "--requests", 200, "--platforms", "sn40l_node,dgx_a100")
    assert run(*common, "--jobs", 1, "--out", tmp_path / "j1") == 0
    assert run(*common, "--jobs", 2, "--out", tmp_path / "j2") == 0
    for name in ("sweep.csv", "knees.csv"):
        assert (tmp_path / "j1" / name).read_bytes() == (tmp_path / "j2" / name).read_bytes()


def test_console_entry_point():
    r = subprocess.run([sys.executable, "-m", "coeflow.cli", "--version"], capture_output=True, text=True)
    assert r.returncode == 0 and __version__ in r.stdout
