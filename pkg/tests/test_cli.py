import contextlib
import io
import json
import os
import subprocess
import sys

import numpy as np
import pytest

from swarmplan.cli import main
from swarmplan.scenario import GridSpec, ScenarioSpec


@pytest.fixture(scope="module")
def scenario_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("scen") / "two_robots.json"
    ScenarioSpec(
        grid=GridSpec(dims=(3, 3, 1), cell_size=0.5),
        starts=[(0, 0, 0), (2, 0, 0)],
        goals=[(2, 2, 0), (0, 2, 0)],
    ).save(path)
    return str(path)


@pytest.fixture(scope="module")
def planned(scenario_file, tmp_path_factory):
    out = str(tmp_path_factory.mktemp("out"))
    buf = io.StringIO()
    with contextlib.redirect_stdout(buf):
        code = main(["plan", "--scenario", scenario_file, "--out", out,
                     "--iterations", "2", "--jobs", "1"])
    return code, out, buf.getvalue()


class TestPlan:
    def test_exit_code_and_artifacts(self, planned):
        code, out, _ = planned
        assert code == 0
        for name in ["discrete_plan.json", "refine_report.csv", "validation.json"]:
            assert os.path.exists(os.path.join(out, name))
        for sub in ["trajectories", "samples"]:
            files = sorted(os.listdir(os.path.join(out, sub)))
            assert files == ["robot_000.csv", "robot_001.csv"]

    def test_stdout_summary(self, planned):
        _, _, text = planned
        assert "planned 2 robots" in text
        assert "validation ok" in text

    def test_validation_artifact_ok(self, planned):
        _, out, _ = planned
        with open(os.path.join(out, "validation.json")) as f:
            report = json.load(f)
        assert report["ok"] is True
        assert report["min_pair_clearance"] >= 2.0 - 1e-6

    def test_sample_export_header_and_rate(self, planned):
        _, out, _ = planned
        with open(os.path.join(out, "samples", "robot_000.csv")) as f:
            lines = f.read().strip().splitlines()
        assert lines[0] == "t,x,y,z,vx,vy,vz,ax,ay,az"
        ts = [float(l.split(",")[0]) for l in lines[1:]]
        assert ts[0] == 0.0
        assert np.allclose(np.diff(ts), ts[1] - ts[0])
        # 100 Hz default
        assert abs((ts[1] - ts[0]) - 0.01) < 1e-9

    def test_scale_to_accel_limit(self, scenario_file, tmp_path):
        out = str(tmp_path / "scaled")
        limit = 0.05
        code = main(["plan", "--scenario", scenario_file, "--out", out,
                     "--iterations", "1", "--jobs", "1",
                     "--scale-to-accel-limit", str(limit)])
        assert code == 0
        with open(os.path.join(out, "validation.json")) as f:
            report = json.load(f)
        assert report["ok"] is True
        assert report["peaks"]["accel"] <= limit + 1e-9


class TestOracle:
    def test_prints_makespan_and_configs(self, scenario_file, capsys):
        assert main(["oracle", "--scenario", scenario_file]) == 0
        out = capsys.readouterr().out
        lines = out.strip().splitlines()
        assert lines[0].startswith("optimal makespan: ")
        k = int(lines[0].split(": ")[1])
        assert lines[1].startswith("t=0: ")
        assert len(lines) == k + 2


class TestValidate:
    def test_accepts_planned_output(self, scenario_file, planned, capsys):
        _, out, _ = planned
        code = main(["validate", "--scenario", scenario_file,
                     "--trajectories", os.path.join(out, "trajectories")])
        assert code == 0
        report = json.loads(capsys.readouterr().out)
        assert report["ok"] is True

    def test_missing_file_rejected(self, scenario_file, planned, tmp_path, capsys):
        _, out, _ = planned
        only_one = tmp_path / "partial"
        only_one.mkdir()
        src = os.path.join(out, "trajectories", "robot_000.csv")
        (only_one / "robot_000.csv").write_bytes(open(src, "rb").read())
        code = main(["validate", "--scenario", scenario_file,
                     "--trajectories", str(only_one)])
        assert code == 1
        assert "expected 2 trajectory files" in capsys.readouterr().err

    def test_shifted_trajectory_rejected(self, scenario_file, planned, tmp_path, capsys):
        _, out, _ = planned
        broken = tmp_path / "broken"
        broken.mkdir()
        for name in ["robot_000.csv", "robot_001.csv"]:
            with open(os.path.join(out, "trajectories", name)) as f:
                text = f.read()
            (broken / name).write_text(text)
        # drag robot 1 onto robot 0's column: endpoints no longer match cells
        lines = (broken / "robot_001.csv").read_text().splitlines()
        (broken / "robot_000.csv").write_text("\n".join(lines) + "\n")
        code = main(["validate", "--scenario", scenario_file,
                     "--trajectories", str(broken)])
        assert code == 1
        assert "matches no unused" in capsys.readouterr().err


class TestFailureModes:
    def test_walled_off_goal_is_infeasible(self, tmp_path, capsys):
        path = tmp_path / "blocked.json"
        ScenarioSpec(
            grid=GridSpec(dims=(3, 3, 1), cell_size=0.5),
            starts=[(0, 0, 0)],
            goals=[(2, 2, 0)],
            obstacles=[(1, 0, 0), (1, 1, 0), (1, 2, 0)],
        ).save(path)
        code = main(["plan", "--scenario", str(path), "--out", str(tmp_path / "o")])
        assert code == 2
        assert "infeasible" in capsys.readouterr().err

    def test_invalid_scenario_is_rejected(self, tmp_path, capsys):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({
            "grid": {"dims": [3, 3, 1], "cell_size": 0.5},
            "starts": [[0, 0, 0], [0, 0, 0]],
            "goals": [[2, 2, 0], [1, 2, 0]],
        }))
        code = main(["plan", "--scenario", str(path), "--out", str(tmp_path / "o")])
        assert code == 2
        assert "error:" in capsys.readouterr().err


class TestEntryPoints:
    def test_module_invocation(self, scenario_file):
        proc = subprocess.run(
            [sys.executable, "-m", "swarmplan", "oracle", "--scenario", scenario_file],
            capture_output=True,
            text=True,
        )
        assert proc.returncode == 0
        assert proc.stdout.startswith("optimal makespan: ")
