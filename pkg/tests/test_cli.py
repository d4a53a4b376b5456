import csv
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from sdi.cli import main
from sdi.config import RunConfig, apply_override, config_from_dict
from sdi.errors import ConfigError

GOLDEN = json.loads((Path(__file__).parent / "golden" / "ep_logistic_final.json").read_text())

GAUSS = ["--set", "target.kind=gaussian", "--set", "target.mu=[0.5, -0.2]",
         "--set", "target.sigma=[[1.0, 0.3], [0.3, 0.5]]", "--set", "target.n_sites=2"]


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def golden_config(tmp_path, method="ep_classical"):
    X = "\n".join(f"  [{x!r}]," for x in GOLDEN["X"])
    text = (f'[target]\nkind = "logistic"\nprior_precision = {GOLDEN["prior_precision"]!r}\n'
            f'X = [\n{X}\n]\ny = {GOLDEN["y"]!r}\n\n[method]\nname = "{method}"\n')
    path = tmp_path / "golden.toml"
    path.write_text(text)
    return path


# ------------------------------------------------------------------ run

def test_run_gaussian_laplace(tmp_path):
    out = tmp_path / "out"
    assert main(["run", "--output-dir", str(out), "--set", "method.name=laplace"] + GAUSS) == 0
    s = json.loads((out / "summary.json").read_text())
    assert s["converged"] and s["method"] == "laplace" and s["d"] == 2
    np.testing.assert_allclose(s["final"]["moment"]["mu"], [0.5, -0.2], atol=1e-8)
    np.testing.assert_allclose(s["final"]["moment"]["sigma"], [[1.0, 0.3], [0.3, 0.5]], atol=1e-8)
    assert abs(s["kl_reverse"]) < 1e-8 and s["kl_reverse_normalized"]
    assert sorted(p.name for p in out.iterdir()) == ["config.toml", "summary.json", "trace.csv"]


@pytest.mark.parametrize("method", ["ep_classical", "ep_smoothed"])
def test_run_matches_golden_ep(tmp_path, method):
    out = tmp_path / "out"
    assert main(["run", "--config", str(golden_config(tmp_path, method)), "--output-dir", str(out)]) == 0
    rows = read_csv(out / "trace.csv")
    assert float(rows[-1]["mu_0"]) == pytest.approx(GOLDEN["final"]["mu"], abs=1e-9)
    assert float(rows[-1]["sigma_00"]) == pytest.approx(GOLDEN["final"]["var"], abs=1e-9)
    s = json.loads((out / "summary.json").read_text())
    np.testing.assert_allclose([site["r"][0] for site in s["sites"]], GOLDEN["sites"]["r"], atol=1e-8)
    np.testing.assert_allclose([site["B"][0][0] for site in s["sites"]], GOLDEN["sites"]["B"], atol=1e-8)


def test_trace_columns(tmp_path):
    out = tmp_path / "out"
    assert main(["run", "--output-dir", str(out), "--set", "output.timing=true"]) == 0
    rows = read_csv(out / "trace.csv")
    assert list(rows[0]) == ["sweep", "step", "method", "site", "mu_0", "sigma_00", "e_grad_norm", "damping",
                             "kl_reverse", "wall_ms"]
    assert all(r["wall_ms"] for r in rows)
    sweep_ends = [r for r in rows if r["kl_reverse"]]
    assert sweep_ends and all(int(r["site"]) == 7 for r in sweep_ends)


def test_run_not_converged_exit_code(tmp_path):
    assert main(["run", "--output-dir", str(tmp_path), "--set", "method.max_sweeps=2"]) == 2
    assert not json.loads((tmp_path / "summary.json").read_text())["converged"]


def test_malformed_toml_names_key(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text('[target]\nkind = "logistic"\nprior_precision = 1.0.0\n')
    assert main(["run", "--config", str(bad), "--output-dir", str(tmp_path / "o")]) == 1
    err = capsys.readouterr().err
    assert "prior_precision" in err
    assert not (tmp_path / "o").exists()


def test_unknown_key_rejected(tmp_path, capsys):
    assert main(["run", "--output-dir", str(tmp_path), "--set", "target.prior_precison=2"]) == 1
    assert "target.prior_precison" in capsys.readouterr().err


def test_bad_method_rejected(tmp_path, capsys):
    assert main(["run", "--output-dir", str(tmp_path), "--set", "method.name=vb"]) == 1
    assert main(["run", "--output-dir", str(tmp_path), "--set", "method.name=alpha"]) == 1


def test_missing_config_file(tmp_path):
    assert main(["run", "--config", str(tmp_path / "nope.toml"), "--output-dir", str(tmp_path)]) == 1


# -------------------------------------------------------------- compare

def test_compare_gaussian_all_methods_agree(tmp_path):
    methods = '["laplace", "gvb", "alpha(0.5)", "ep_classical", "ep_smoothed"]'
    assert main(["compare", "--output-dir", str(tmp_path), "--set", f"compare.methods={methods}"] + GAUSS) == 0
    rows = read_csv(tmp_path / "comparison.csv")
    assert [r["method"] for r in rows] == ["laplace", "gvb", "alpha(0.5)", "ep_classical", "ep_smoothed"]
    for r in rows:
        assert float(r["mu_0"]) == pytest.approx(0.5, abs=1e-8)
        assert all(float(r[k]) < 1e-7 for k in r if k.startswith("dist_"))


def test_compare_logistic_ep_variants_coincide(tmp_path):
    methods = '["gvb", "ep_classical", "ep_smoothed", "alpha(0.999)"]'
    assert main(["compare", "--output-dir", str(tmp_path), "--set", f"compare.methods={methods}"]) == 0
    rows = {r["method"]: r for r in read_csv(tmp_path / "comparison.csv")}
    assert float(rows["ep_classical"]["dist_ep_smoothed"]) < 1e-6
    assert float(rows["alpha(0.999)"]["dist_gvb"]) < 1e-4
    assert float(rows["gvb"]["dist_ep_classical"]) > 1e-4


# ---------------------------------------------------------- sweep-alpha

def test_sweep_alpha_distances_shrink(tmp_path):
    assert main(["sweep-alpha", "--output-dir", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "sweep_alpha.csv")
    assert [float(r["alpha"]) for r in rows] == [0.5, 0.9, 0.99, 0.999]
    dist = [float(r["dist_to_gvb"]) for r in rows]
    assert all(a > b for a, b in zip(dist, dist[1:]))
    for r in rows:
        grad = np.hypot(float(r["grad_mu_norm"]), float(r["grad_S_norm"]))
        assert grad <= 10 * float(r["err_est"])


def test_sweep_alpha_on_gaussian_is_flat(tmp_path):
    assert main(["sweep-alpha", "--output-dir", str(tmp_path)] + GAUSS) == 0
    assert all(float(r["dist_to_gvb"]) <= 1e-8 for r in read_csv(tmp_path / "sweep_alpha.csv"))


def test_sweep_alpha_rejects_bad_alpha(tmp_path):
    assert main(["sweep-alpha", "--output-dir", str(tmp_path), "--set", "sweep.alphas=[0.5, 1.0]"]) == 1


# --------------------------------------------------------- folk-theorem

def test_folk_theorem_columns_shrink(tmp_path):
    assert main(["folk-theorem", "--output-dir", str(tmp_path), "--set", "folk.k_list=[1, 4, 16]"]) == 0
    rows = read_csv(tmp_path / "folk_theorem.csv")
    assert [int(r["k"]) for r in rows] == [1, 4, 16]
    assert [int(r["n_sites"]) for r in rows] == [8, 32, 128]
    for col in ("dist", "max_hybrid_kl"):
        v = [float(r[col]) for r in rows]
        assert v[0] > v[1] > v[2]
    assert len({r["gvb_mu_0"] for r in rows}) == 1


def test_folk_theorem_needs_factorized_target(tmp_path):
    args = ["folk-theorem", "--output-dir", str(tmp_path), "--set", "target.kind=gaussian",
            "--set", "target.mu=[0.0]", "--set", "target.sigma=[[1.0]]"]
    assert main(args + ["--set", "folk.k_list=[1, 2]"]) == 0
    assert main(args + ["--set", "folk.k_list=[0]"]) == 1


# -------------------------------------------------------------- verify

def test_verify_passes_with_stable_schema(tmp_path, capsys):
    assert main(["verify", "--output-dir", str(tmp_path)]) == 0
    checks = json.loads((tmp_path / "verify.json").read_text())
    assert len(checks) >= 25
    for c in checks:
        assert list(c) == ["check", "value", "reference", "tolerance", "pass"]
        assert c["pass"]
    names = {c["check"].split(".")[0] for c in checks}
    assert names == {"stein", "gradient", "equivalence", "fixed_point", "divergence", "exactness",
                     "newton_identity", "quadrature"}
    assert "all" in capsys.readouterr().out


def test_verify_coarse_quadrature_fails(tmp_path):
    assert main(["verify", "--output-dir", str(tmp_path), "--set", "engine.order=2"]) == 3
    checks = json.loads((tmp_path / "verify.json").read_text())
    assert any(not c["pass"] for c in checks)


# ---------------------------------------------------------- config

def test_seed_env_override(tmp_path, monkeypatch):
    monkeypatch.setenv("SDI_SEED", "3")
    assert main(["run", "--output-dir", str(tmp_path / "a"), "--set", "seed=0"]) == 0
    monkeypatch.delenv("SDI_SEED")
    assert main(["run", "--output-dir", str(tmp_path / "b"), "--set", "seed=3"]) == 0
    assert main(["run", "--output-dir", str(tmp_path / "c"), "--set", "seed=0"]) == 0
    a, b, c = ((tmp_path / x / "summary.json").read_bytes() for x in "abc")
    assert a == b and a != c
    assert 'seed = 3' in (tmp_path / "a" / "config.toml").read_text()


def test_overrides_parse_toml_literals():
    data = {}
    apply_override(data, "method.alpha=0.25")
    apply_override(data, "compare.methods=[\"gvb\", \"laplace\"]")
    apply_override(data, "target.kind=logistic")
    assert data == {"method": {"alpha": 0.25}, "compare": {"methods": ["gvb", "laplace"]},
                    "target": {"kind": "logistic"}}
    with pytest.raises(ConfigError):
        apply_override(data, "novalue")


def test_config_csv_paths_relative_to_file(tmp_path):
    (tmp_path / "data").mkdir()
    np.savetxt(tmp_path / "data" / "X.csv", np.array(GOLDEN["X"])[:, None], delimiter=",")
    np.savetxt(tmp_path / "data" / "y.csv", np.array(GOLDEN["y"]), delimiter=",")
    cfg_path = tmp_path / "c.toml"
    cfg_path.write_text('[target]\nkind = "logistic"\nX_csv = "data/X.csv"\ny_csv = "data/y.csv"\n')
    t = RunConfig.load(cfg_path).target()
    assert t.n == 8 and t.d == 1


def test_config_roundtrip_and_engine():
    cfg = config_from_dict({"target": {"kind": "probit"}, "engine": {"order": 20, "refine_inflation": 1.5}})
    e = cfg.engine()
    assert e.order == 20 and e.refine_inflation == 1.5
    assert RunConfig.from_text(cfg.to_toml()).data == cfg.data
    with pytest.raises(ConfigError):
        config_from_dict({"target": {"kind": "poisson"}})
    with pytest.raises(ConfigError):
        config_from_dict({"method": {"name": "gvb"}})


def test_outputs_confined_to_output_dir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(["run", "--output-dir", "res"]) == 0
    assert [p.name for p in tmp_path.iterdir()] == ["res"]


def test_module_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "sdi", "run", "--output-dir", str(tmp_path),
                          "--set", "method.name=gvb"], capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
    assert (tmp_path / "summary.json").exists()
    res = subprocess.run([sys.executable, "-m", "sdi", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "sweep-alpha" in res.stdout
