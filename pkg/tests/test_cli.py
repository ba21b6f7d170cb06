import csv
import json
import os
import subprocess
import sys

import numpy as np
import pytest

from heteo.cli import main, validate_config
from heteo.data_model import write_tensor
from heteo.errors import SchemaError


def sim_config(out_dir, n=120, sigma2=0.01, trees=30, bootstrap=50):
    return {
        "version": "v1",
        "data": {"simulation": {"n": n, "sigma2": sigma2, "seed": 3}},
        "embed": {"model": "rand-vit", "seed": 1, "pca": 0, "with_tabular": False},
        "estimator": {"kind": "forest", "params": {"n_trees": trees, "seed": 2}},
        "rate": {"weighting": "autoc", "folds": 5, "bootstrap": bootstrap, "seed": 4},
        "outputs": {"dir": str(out_dir)},
    }


def write_experiment(tmp_path, n=60, seed=0):
    rng = np.random.default_rng(seed)
    rows = []
    for i in range(n):
        rows.append({
            "id": f"u{i}",
            "lon": f"{-84 + 0.01 * i}",
            "lat": f"{34 + 0.005 * i}",
            "treatment": str(int(rng.integers(0, 2))),
            "outcome": f"{rng.normal()}",
        })
    mpath = tmp_path / "m.csv"
    with open(mpath, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["id", "lon", "lat", "treatment", "outcome"])
        writer.writeheader()
        writer.writerows(rows)
    tpath = tmp_path / "t.eot"
    write_tensor(rng.random((n, 2, 12, 12, 3)).astype(np.float32), tpath)
    return mpath, tpath


class TestConfigValidation:
    def test_unknown_key_named(self, tmp_path):
        config = sim_config(tmp_path)
        config["modle"] = {}
        with pytest.raises(SchemaError, match="modle"):
            validate_config(config)

    def test_unknown_nested_key_named(self, tmp_path):
        config = sim_config(tmp_path)
        config["rate"]["botstrap"] = 10
        with pytest.raises(SchemaError, match="botstrap"):
            validate_config(config)

    def test_version_checked(self, tmp_path):
        config = sim_config(tmp_path)
        config["version"] = "v2"
        with pytest.raises(SchemaError, match="version"):
            validate_config(config)

    def test_exactly_one_data_mode(self, tmp_path):
        config = sim_config(tmp_path)
        config["data"]["tensor"] = "x.eot"
        with pytest.raises(SchemaError):
            validate_config(config)

    def test_estimator_params_checked(self, tmp_path):
        config = sim_config(tmp_path)
        config["estimator"]["params"] = {"n_tres": 10}
        with pytest.raises(SchemaError, match="n_tres"):
            validate_config(config)


class TestRunPipeline:
    def test_simulation_smoke_run(self, tmp_path):
        out = tmp_path / "out"
        cfg_path = tmp_path / "config.json"
        cfg_path.write_text(json.dumps(sim_config(out)))
        assert main(["run", str(cfg_path)]) == 0
        report = json.loads((out / "report.json").read_text())
        assert "corr" in report
        assert "rate_ratio" in report
        assert (out / "embeddings.eot").exists()
        assert (out / "model.json").exists()
        assert (out / "rate_report.json").exists()
        assert "truth correlation" in (out / "summary.txt").read_text()
        assert not (out / "FAILED").exists()

    def test_run_byte_identical_across_thread_counts(self, tmp_path, monkeypatch):
        out1 = tmp_path / "o1"
        out2 = tmp_path / "o2"
        c1 = tmp_path / "c1.json"
        c2 = tmp_path / "c2.json"
        c1.write_text(json.dumps(sim_config(out1, n=80, trees=15)))
        c2.write_text(json.dumps(sim_config(out2, n=80, trees=15)))
        monkeypatch.setenv("HETEO_THREADS", "1")
        assert main(["run", str(c1)]) == 0
        monkeypatch.setenv("HETEO_THREADS", "4")
        assert main(["run", str(c2)]) == 0
        r1 = (out1 / "report.json").read_bytes()
        r2 = (out2 / "report.json").read_bytes()
        assert r1 == r2
        assert (out1 / "rate_report.json").read_bytes() == (out2 / "rate_report.json").read_bytes()

    def test_stage_failure_keeps_embeddings(self, tmp_path):
        out = tmp_path / "out"
        config = sim_config(out, n=30)  # too small for 5-fold rate (N >= 25 ok)
        config["rate"]["folds"] = 7  # 30 < 5*7 -> rate stage fails
        cfg_path = tmp_path / "config.json"
        cfg_path.write_text(json.dumps(config))
        assert main(["run", str(cfg_path)]) == 1
        assert (out / "FAILED").exists()
        assert "rate" in (out / "FAILED").read_text()
        assert (out / "embeddings.eot").exists()  # earlier artifacts retained
        assert (out / "model.json").exists()
        assert not (out / "report.json").exists()

    def test_manifest_tensor_run(self, tmp_path):
        mpath, tpath = write_experiment(tmp_path, n=60)
        out = tmp_path / "out"
        config = {
            "version": "v1",
            "data": {"manifest": str(mpath), "tensor": str(tpath)},
            "embed": {"model": "rand-vit", "seed": 1, "pca": 0,
                      "with_tabular": False},
            "estimator": {"kind": "forest", "params": {"n_trees": 20, "seed": 2}},
            "rate": {"weighting": "autoc", "folds": 5, "bootstrap": 50, "seed": 3},
            "outputs": {"dir": str(out)},
        }
        cfg_path = tmp_path / "config.json"
        cfg_path.write_text(json.dumps(config))
        assert main(["run", str(cfg_path)]) == 0
        report = json.loads((out / "report.json").read_text())
        assert report["data"]["kind"] == "experiment"
        assert "corr" not in report  # no ground truth outside simulation
        assert "rate_ratio" in report

    def test_external_embeddings_run(self, tmp_path):
        mpath, tpath = write_experiment(tmp_path, n=60)
        rng = np.random.default_rng(1)
        ext = tmp_path / "ext.eot"
        write_tensor(rng.random((60, 32)).astype(np.float32), ext)
        out = tmp_path / "out"
        config = {
            "version": "v1",
            "data": {"manifest": str(mpath), "tensor": str(tpath)},
            "estimator": {"kind": "rlearner", "params": {"seed": 2}},
            "rate": {"weighting": "qini", "folds": 5, "bootstrap": 50, "seed": 3},
            "outputs": {"dir": str(out)},
        }
        config["data"] = {"manifest": str(mpath), "external_embeddings": str(ext),
                          "source": "clay-video"}
        config["embed"] = {"pca": 5}
        cfg_path = tmp_path / "config.json"
        cfg_path.write_text(json.dumps(config))
        assert main(["run", str(cfg_path)]) == 0
        report = json.loads((out / "report.json").read_text())
        assert report["embeddings"]["source"] == "clay-video+pca"
        assert report["embeddings"]["d"] == 5

    def test_pca_path(self, tmp_path):
        out = tmp_path / "out"
        config = sim_config(out, n=80, trees=15)
        config["embed"]["pca"] = 5
        cfg_path = tmp_path / "config.json"
        cfg_path.write_text(json.dumps(config))
        assert main(["run", str(cfg_path)]) == 0
        report = json.loads((out / "report.json").read_text())
        assert report["embeddings"]["d"] == 5
        assert (out / "pca.json").exists()


class TestSubcommands:
    def test_embed_fit_rate_round_trip(self, tmp_path):
        mpath, tpath = write_experiment(tmp_path, n=60)
        emb = tmp_path / "emb.eot"
        assert main(["embed", "--manifest", str(mpath), "--tensor", str(tpath),
                     "--model", "rand-vit", "--seed", "1", "--out", str(emb)]) == 0
        assert emb.exists()
        meta = json.loads((tmp_path / "emb.eot.meta.json").read_text())
        assert meta["d"] == 128
        model_path = tmp_path / "model.json"
        assert main(["fit", "--embeddings", str(emb), "--manifest", str(mpath),
                     "--estimator", "forest", "--trees", "20", "--seed", "2",
                     "--out", str(model_path)]) == 0
        doc = json.loads(model_path.read_text())
        assert doc["kind"] == "forest"
        assert doc["fingerprint"] == meta["fingerprint"]
        report_path = tmp_path / "report.json"
        assert main(["rate", "--embeddings", str(emb), "--manifest", str(mpath),
                     "--estimator", "forest", "--weighting", "qini",
                     "--folds", "5", "--bootstrap", "50", "--seed", "3",
                     "--out", str(report_path)]) == 0
        rep = json.loads(report_path.read_text())
        assert rep["weighting"] == "qini"
        assert len(rep["per_fold"]) == 5

    def test_simulate_subcommand(self, tmp_path):
        out_csv = tmp_path / "sim.csv"
        plots = tmp_path / "plots"
        assert main(["simulate", "--n", "120", "--sigma2", "0.1", "--models",
                     "rand-vit", "--seeds", "1..2", "--trees", "20",
                     "--bootstrap", "50", "--out", str(out_csv),
                     "--plots", str(plots)]) == 0
        lines = out_csv.read_text().splitlines()
        assert len(lines) == 3  # header + 2 cells
        assert (plots / "sim_correlation.svg").exists()

    def test_transport_flow(self, tmp_path):
        mpath, tpath = write_experiment(tmp_path, n=50)
        emb = tmp_path / "emb.eot"
        main(["embed", "--manifest", str(mpath), "--tensor", str(tpath),
              "--model", "rand-vit", "--seed", "5", "--out", str(emb)])
        model_path = tmp_path / "model.json"
        main(["fit", "--embeddings", str(emb), "--manifest", str(mpath),
              "--estimator", "forest", "--trees", "15", "--seed", "6",
              "--out", str(model_path)])
        # sample transport sites, reuse the experiment tensor as site imagery
        sites_csv = tmp_path / "sites.csv"
        assert main(["sample-sites", "--bbox=-85,33,-83,35", "--n", "50",
                     "--seed", "7", "--out", str(sites_csv)]) == 0
        site_emb = tmp_path / "site_emb.eot"
        assert main(["embed", "--sites", str(sites_csv), "--tensor", str(tpath),
                     "--model", "rand-vit", "--seed", "5",
                     "--out", str(site_emb)]) == 0
        maps = tmp_path / "maps"
        assert main(["transport", "--model", str(model_path), "--sites",
                     str(sites_csv), "--embeddings", str(site_emb),
                     "--out", str(maps)]) == 0
        assert (maps / "transport.csv").exists()
        assert (maps / "transport.geojson").exists()
        assert (maps / "transport.svg").exists()

    def test_transport_rejects_wrong_seed_embeddings(self, tmp_path):
        mpath, tpath = write_experiment(tmp_path, n=50)
        emb = tmp_path / "emb.eot"
        main(["embed", "--manifest", str(mpath), "--tensor", str(tpath),
              "--model", "rand-vit", "--seed", "5", "--out", str(emb)])
        model_path = tmp_path / "model.json"
        main(["fit", "--embeddings", str(emb), "--manifest", str(mpath),
              "--estimator", "forest", "--trees", "15", "--seed", "6",
              "--out", str(model_path)])
        sites_csv = tmp_path / "sites.csv"
        main(["sample-sites", "--bbox=-85,33,-83,35", "--n", "50",
              "--seed", "7", "--out", str(sites_csv)])
        drifted = tmp_path / "drifted.eot"
        main(["embed", "--sites", str(sites_csv), "--tensor", str(tpath),
              "--model", "rand-vit", "--seed", "99", "--out", str(drifted)])
        code = main(["transport", "--model", str(model_path), "--sites",
                     str(sites_csv), "--embeddings", str(drifted),
                     "--out", str(tmp_path / "maps2")])
        assert code == 2

    def test_landcover_subcommand(self, tmp_path):
        import numpy as np
        from heteo.landcover import LandCoverRaster, write_raster

        rng = np.random.default_rng(0)
        grid = rng.integers(0, 4, size=(40, 40))
        raster = LandCoverRaster(grid=grid,
                                 class_labels={c: f"class{c}" for c in range(4)},
                                 cell_size_m=30.0, origin=(-84.6, 34.2))
        write_raster(raster, tmp_path / "lc.eot", tmp_path / "lc.json")
        # manifest with units placed at interior raster cells
        rows = []
        for i in range(12):
            lon, lat = raster.center_of(5 + 2 * (i % 5), 5 + 2 * (i // 5))
            rows.append({"id": f"u{i}", "lon": repr(lon), "lat": repr(lat),
                         "treatment": str(i % 2), "outcome": repr(0.1 * i)})
        mpath = tmp_path / "m.csv"
        with open(mpath, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["id", "lon", "lat",
                                                    "treatment", "outcome"])
            writer.writeheader()
            writer.writerows(rows)
        out = tmp_path / "lcfeat.eot"
        assert main(["landcover", "--raster", str(tmp_path / "lc.eot"),
                     "--legend", str(tmp_path / "lc.json"), "--manifest",
                     str(mpath), "--window", "2", "--out", str(out)]) == 0
        meta = json.loads((tmp_path / "lcfeat.eot.meta.json").read_text())
        assert meta["source"] == "landcover"
        assert meta["n"] == 12
        assert meta["d"] == 4

    def test_sample_sites_with_weights(self, tmp_path):
        import numpy as np

        dens = np.zeros((4, 4), dtype=np.float32)
        dens[0, 0] = 1.0
        write_tensor(dens, tmp_path / "dens.eot")
        out = tmp_path / "sites.csv"
        assert main(["sample-sites", "--bbox=-85,33,-83,35", "--n", "30",
                     "--weights", str(tmp_path / "dens.eot"), "--seed", "2",
                     "--out", str(out)]) == 0
        lines = out.read_text().splitlines()
        assert len(lines) == 31
        for line in lines[1:]:
            _, lon, lat = line.split(",")
            # density mass sits in the top-left cell
            assert -85.0 <= float(lon) <= -84.5
            assert 34.5 <= float(lat) <= 35.0

    def test_report_subcommand(self, tmp_path, capsys):
        out = tmp_path / "out"
        cfg_path = tmp_path / "config.json"
        cfg_path.write_text(json.dumps(sim_config(out, n=80, trees=15)))
        main(["run", str(cfg_path)])
        capsys.readouterr()
        assert main(["report", str(out)]) == 0
        captured = capsys.readouterr()
        assert "run summary" in captured.out

    def test_console_script_entry(self, tmp_path):
        result = subprocess.run(
            [sys.executable, "-m", "heteo.cli", "--help"]
            if os.environ.get("HETEO_NO_SCRIPT")
            else ["heteo", "--help"],
            capture_output=True, text=True,
        )
        assert result.returncode == 0
        assert "simulate" in result.stdout
