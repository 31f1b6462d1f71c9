import copy
import json
import subprocess
import sys

import pytest

from rdtflab import cli

FLAT = {
    "grid": {"dim": 2, "half_width": 1.0, "points_per_axis": 33},
    "metric": {"name": "flat"},
    "flow": {"t_end": 0.01, "snapshots": {"rule": "geometric", "count": 15, "ratio": 1.6}, "keep_every": 4},
    "experiments": [{"name": "decay_fits"}, {"name": "beta_weak_estimate"}, {"name": "lower_bound_decay_fit"},
                    {"name": "iteration_replay", "params": {"t": 0.01}}],
    "output_dir": "out_flat",
    "seed": 3,
}


def _write(tmp_path, cfg, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return path


def test_list_names_every_experiment(capsys):
    assert cli.main(["list"]) == cli.EXIT_PASS
    out = capsys.readouterr().out
    for name in cli.EXPERIMENTS:
        assert name in out


def test_validate_accepts_good_config(tmp_path, capsys):
    assert cli.main(["validate", str(_write(tmp_path, FLAT))]) == cli.EXIT_PASS
    assert "ok:" in capsys.readouterr().out


@pytest.mark.parametrize("mutate, fragment", [
    (lambda c: c["experiments"].append({"name": "beta_weak_estimate_x"}), "unknown experiment"),
    (lambda c: c["experiments"][1].setdefault("params", {}).update(beta=0.6), "beta in (0, 1/2)"),
    (lambda c: c["experiments"][2].setdefault("params", {}).update(beta=0.25, gamma=1.5), "gamma"),
    (lambda c: c.update(colour="blue"), "unknown top-level"),
    (lambda c: c["grid"].update(dim=4), "grid.dim"),
    (lambda c: c["flow"].update(sigma_cfl=0.5), "sigma_cfl"),
    (lambda c: c.update(metric={"name": "cone", "params": {"sigma": 0.2}}), "sigma"),
    (lambda c: c["experiments"][0].setdefault("params", {}).update(t_lo=5e-3), "fit window"),
])
def test_validate_rejects_bad_configs(tmp_path, capsys, mutate, fragment):
    cfg = copy.deepcopy(FLAT)
    mutate(cfg)
    assert cli.main(["validate", str(_write(tmp_path, cfg))]) == cli.EXIT_CONFIG
    assert fragment in capsys.readouterr().err


def test_missing_and_malformed_config(tmp_path):
    assert cli.main(["validate", str(tmp_path / "absent.json")]) == cli.EXIT_CONFIG
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert cli.main(["validate", str(bad)]) == cli.EXIT_CONFIG


def test_run_is_deterministic_and_honours_output_root(tmp_path, monkeypatch):
    cfg = _write(tmp_path, FLAT)
    outputs = []
    for k in range(2):
        root = tmp_path / f"root{k}"
        monkeypatch.setenv(cli.OUTPUT_ROOT_ENV, str(root))
        assert cli.main(["run", str(cfg)]) == cli.EXIT_PASS
        out = root / "out_flat"
        outputs.append({p.name: p.read_bytes() for p in sorted(out.glob("*.csv"))})
    assert outputs[0].keys() == outputs[1].keys()
    assert "diagnostics.csv" in outputs[0]
    assert outputs[0] == outputs[1]
    manifest = json.loads((tmp_path / "root1" / "out_flat" / "manifest.json").read_text())
    assert manifest["config_hash"] == cli.load_config(cfg).digest()
    assert set(manifest["experiments"]) == {e["name"] for e in FLAT["experiments"]} | {"flow"}


def test_failing_experiment_gives_nonzero_exit(tmp_path, monkeypatch):
    cfg = copy.deepcopy(FLAT)
    cfg["metric"] = {"name": "bump", "params": {"amplitude": 0.08}}
    # the generic smooth exponents do not hold for an already smooth datum over this window
    cfg["experiments"] = [{"name": "decay_fits"}]
    monkeypatch.setenv(cli.OUTPUT_ROOT_ENV, str(tmp_path))
    assert cli.main(["run", str(_write(tmp_path, cfg))]) == cli.EXIT_FAIL


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "rdtflab", "list"], capture_output=True, text=True, check=True)
    assert "davies_check" in res.stdout
