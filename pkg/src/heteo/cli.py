"""Command line entry point: a staged pipeline driven by a JSON run config,
plus subcommands mirroring the individual stages.

    heteo run config.json
    heteo embed|fit|rate|simulate|landcover|transport|report ...

Reports are written with sorted keys and no volatile fields, so reruns with
the same config and seeds are byte-identical regardless of HETEO_THREADS.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys

import numpy as np

from .cate import (
    CausalForestModel,
    CausalForestSpec,
    RLearnerModel,
    RLearnerSpec,
    fit_causal_forest,
    fit_rlearner,
    predict_forest,
    predict_rlearner,
)
from .data_model import (
    EmbeddingMatrix,
    load_manifest,
    load_manifest_table,
    load_sites,
    read_external_embeddings,
    read_tensor,
    write_tensor,
)
from .embedders import (
    PcaModel,
    apply_pca,
    default_specs,
    embed_dataset,
    embed_sequences,
    pca_digest,
    reduce_with_pca,
)
from .errors import HeteoError, SchemaError
from .landcover import landcover_features, read_raster
from .rate import cross_fit_rate, truth_correlation
from .simulation import (
    SimConfig,
    generate,
    plot_grid,
    run_grid,
    write_grid_csv,
)
from .transport import PopulationWeights, emit_map, sample_sites, transport_cate

CONFIG_VERSION = "v1"

_TOP_KEYS = {"version", "data", "embed", "estimator", "rate", "outputs"}
_DATA_KEYS = {"manifest", "tensor", "external_embeddings", "source",
              "propensity", "simulation"}
_SIM_KEYS = {"n", "sigma2", "seed", "treat_prob", "rotate_prob", "pool_size",
             "chip_size", "bands"}
_EMBED_KEYS = {"model", "seed", "pca", "with_tabular"}
_ESTIMATOR_KEYS = {"kind", "params"}
_RATE_KEYS = {"weighting", "folds", "bootstrap", "seed"}
_OUTPUT_KEYS = {"dir"}


def _reject_unknown(section, doc, allowed):
    for key in doc:
        if key not in allowed:
            raise SchemaError(f"unknown key {key!r} in config section {section!r}")


def validate_config(doc):
    if not isinstance(doc, dict):
        raise SchemaError("run config must be a JSON object")
    _reject_unknown("<top>", doc, _TOP_KEYS)
    if doc.get("version") != CONFIG_VERSION:
        raise SchemaError(
            f"config version must be {CONFIG_VERSION!r}, got {doc.get('version')!r}"
        )
    for required in ("data", "estimator", "rate", "outputs"):
        if required not in doc:
            raise SchemaError(f"config is missing required section {required!r}")

    data = doc["data"]
    _reject_unknown("data", data, _DATA_KEYS)
    modes = [
        "simulation" in data,
        "external_embeddings" in data,
        "tensor" in data,
    ]
    if sum(modes) != 1:
        raise SchemaError(
            "data section must specify exactly one of: simulation, "
            "manifest+tensor, manifest+external_embeddings"
        )
    if "simulation" in data:
        _reject_unknown("data.simulation", data["simulation"], _SIM_KEYS)
    else:
        if "manifest" not in data:
            raise SchemaError("data section needs a manifest path")
        if "external_embeddings" in data and "source" not in data:
            raise SchemaError("external embeddings need a source label")

    if "external_embeddings" in data:
        _reject_unknown("embed", doc.get("embed", {}), {"pca"})
    else:
        if "embed" not in doc:
            raise SchemaError("config is missing required section 'embed'")
        _reject_unknown("embed", doc["embed"], _EMBED_KEYS)
        if doc["embed"].get("model") not in ("rand-cnn", "rand-vit"):
            raise SchemaError(
                f"embed.model must be rand-cnn or rand-vit, got {doc['embed'].get('model')!r}"
            )

    est = doc["estimator"]
    _reject_unknown("estimator", est, _ESTIMATOR_KEYS)
    if est.get("kind") not in ("forest", "rlearner"):
        raise SchemaError(f"estimator.kind must be forest or rlearner, got {est.get('kind')!r}")
    params = est.get("params", {})
    allowed = (set(CausalForestSpec().to_dict()) if est["kind"] == "forest"
               else set(RLearnerSpec().to_dict()))
    _reject_unknown("estimator.params", params, allowed)

    rate = doc["rate"]
    _reject_unknown("rate", rate, _RATE_KEYS)
    if rate.get("weighting", "autoc") not in ("autoc", "qini"):
        raise SchemaError(f"rate.weighting must be autoc or qini, got {rate.get('weighting')!r}")

    _reject_unknown("outputs", doc["outputs"], _OUTPUT_KEYS)
    if "dir" not in doc["outputs"]:
        raise SchemaError("outputs section needs a dir")
    return doc


# ---------------------------------------------------------------------------
# Shared artifact helpers


def _write_json(doc, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _write_embedding_artifacts(matrix: EmbeddingMatrix, out_path):
    write_tensor(matrix.values.astype(np.float32), out_path)
    meta = {
        "source": matrix.source,
        "fingerprint": matrix.fingerprint,
        "n": matrix.n,
        "d": matrix.dim,
    }
    _write_json(meta, str(out_path) + ".meta.json")


def _read_embedding_artifacts(path):
    values = read_tensor(path).astype(float)
    meta_path = str(path) + ".meta.json"
    source = "unknown"
    fingerprint = ""
    if os.path.exists(meta_path):
        with open(meta_path, encoding="utf-8") as fh:
            meta = json.load(fh)
        source = meta.get("source", source)
        fingerprint = meta.get("fingerprint", fingerprint)
    return EmbeddingMatrix(values=values, source=source, fingerprint=fingerprint)


def _pca_to_json(model: PcaModel):
    return {
        "mean": model.mean.tolist(),
        "components": model.components.tolist(),
        "explained_variance": model.explained_variance.tolist(),
    }


def _pca_from_json(doc):
    return PcaModel(
        mean=np.asarray(doc["mean"], dtype=float),
        components=np.asarray(doc["components"], dtype=float),
        explained_variance=np.asarray(doc["explained_variance"], dtype=float),
    )


def _load_model(path):
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("kind") == "forest":
        return CausalForestModel.from_json_dict(doc)
    if doc.get("kind") == "rlearner":
        return RLearnerModel.from_json_dict(doc)
    raise SchemaError(f"{path}: unknown model kind {doc.get('kind')!r}")


def _estimator_spec(kind, params, seed=None):
    params = dict(params or {})
    if seed is not None and "seed" not in params:
        params["seed"] = seed
    if kind == "forest":
        return CausalForestSpec(**params)
    return RLearnerSpec(**params)


# ---------------------------------------------------------------------------
# run pipeline


class _StageFailure(Exception):
    def __init__(self, stage, cause):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


def _run_pipeline(config, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    artifacts = {}
    report = {"version": CONFIG_VERSION, "stages": []}

    def stage(name):
        report["stages"].append(name)

    # data
    stage("data")
    try:
        data = config["data"]
        if "simulation" in data:
            sim_cfg = SimConfig(**data["simulation"])
            sim = generate(sim_cfg)
            artifacts["W"] = sim.W
            artifacts["Y"] = sim.Y
            artifacts["propensity"] = sim_cfg.treat_prob
            artifacts["clusters"] = None
            artifacts["tau_true"] = sim.tau_true
            artifacts["sequences"] = sim.sequences
            report["n"] = int(sim.n)
            report["data"] = {"kind": "simulation", "sigma2": sim_cfg.sigma2,
                              "n": sim_cfg.n, "seed": sim_cfg.seed}
        elif "external_embeddings" in data:
            units, W, Y, propensity, clusters = _manifest_arrays(
                data["manifest"], data.get("propensity"))
            artifacts["units"] = units
            artifacts["W"] = W
            artifacts["Y"] = Y
            artifacts["propensity"] = propensity
            artifacts["clusters"] = clusters
            artifacts["tau_true"] = None
            report["n"] = len(units)
            report["data"] = {"kind": "experiment", "n": len(units)}
        else:
            dataset = load_manifest(data["manifest"], data.get("tensor"),
                                    propensity=data.get("propensity"))
            artifacts["dataset"] = dataset
            artifacts["W"] = dataset.treatment()
            artifacts["Y"] = dataset.outcome()
            artifacts["propensity"] = dataset.propensity_per_unit()
            artifacts["clusters"] = dataset.cluster_ids()
            artifacts["tau_true"] = None
            report["n"] = dataset.n
            report["data"] = {"kind": "experiment", "n": dataset.n}
    except Exception as exc:  # noqa: BLE001 - stage boundary
        raise _StageFailure("data", exc) from exc

    # embed
    stage("embed")
    try:
        data = config["data"]
        if "external_embeddings" in data:
            matrix = read_external_embeddings(
                data["external_embeddings"], len(artifacts["units"]), data["source"]
            )
            pca_k = int(config.get("embed", {}).get("pca", 0) or 0)
            if pca_k:
                matrix, pca_model = reduce_with_pca(matrix, k=pca_k)
                artifacts["pca"] = pca_model
        else:
            embed_cfg = config["embed"]
            seed = int(embed_cfg.get("seed", 0))
            spatial, temporal = default_specs(embed_cfg["model"], seed)
            if "dataset" in artifacts:
                matrix = embed_dataset(artifacts["dataset"], spatial, temporal,
                                       with_tabular=bool(embed_cfg.get("with_tabular")))
            else:
                matrix = embed_sequences(artifacts["sequences"], spatial, temporal)
            pca_k = int(embed_cfg.get("pca", 0) or 0)
            if pca_k:
                matrix, pca_model = reduce_with_pca(matrix, k=pca_k)
                artifacts["pca"] = pca_model
        artifacts["embeddings"] = matrix
        emb_path = os.path.join(out_dir, "embeddings.eot")
        _write_embedding_artifacts(matrix, emb_path)
        if "pca" in artifacts:
            _write_json(_pca_to_json(artifacts["pca"]),
                        os.path.join(out_dir, "pca.json"))
        report["embeddings"] = {"source": matrix.source, "d": matrix.dim,
                                "fingerprint": matrix.fingerprint}
    except Exception as exc:  # noqa: BLE001
        raise _StageFailure("embed", exc) from exc

    # fit
    stage("fit")
    try:
        est = config["estimator"]
        spec = _estimator_spec(est["kind"], est.get("params"))
        X = artifacts["embeddings"].values
        W, Y = artifacts["W"], artifacts["Y"]
        if est["kind"] == "forest":
            model = fit_causal_forest(X, W, Y, spec,
                                      fingerprint=artifacts["embeddings"].fingerprint)
            tau_hat = predict_forest(model, X, oob=True)
        else:
            model = fit_rlearner(X, W, Y, spec=spec,
                                 fingerprint=artifacts["embeddings"].fingerprint)
            tau_hat = predict_rlearner(model, X)
        model.save(os.path.join(out_dir, "model.json"))
        artifacts["model"] = model
        artifacts["tau_hat"] = tau_hat
        report["estimator"] = {"kind": est["kind"]}
        if artifacts["tau_true"] is not None:
            corr = truth_correlation(tau_hat, artifacts["tau_true"])
            report["corr"] = corr.value
            report["corr_degenerate"] = corr.degenerate
    except Exception as exc:  # noqa: BLE001
        raise _StageFailure("fit", exc) from exc

    # rate
    stage("rate")
    try:
        rate_cfg = config["rate"]
        est = config["estimator"]
        spec = _estimator_spec(est["kind"], est.get("params"))
        rate_report = cross_fit_rate(
            artifacts["W"], artifacts["Y"], artifacts["propensity"],
            artifacts["embeddings"].values, spec,
            weighting=rate_cfg.get("weighting", "autoc"),
            folds=int(rate_cfg.get("folds", 5)),
            bootstrap_reps=int(rate_cfg.get("bootstrap", 200)),
            seed=int(rate_cfg.get("seed", 0)),
            clusters=artifacts["clusters"],
        )
        rate_report.save(os.path.join(out_dir, "rate_report.json"))
        report["rate"] = rate_report.to_json_dict()
        report["rate_ratio"] = rate_report.ratio
    except Exception as exc:  # noqa: BLE001
        raise _StageFailure("rate", exc) from exc

    # report
    stage("report")
    try:
        _write_json(report, os.path.join(out_dir, "report.json"))
        with open(os.path.join(out_dir, "summary.txt"), "w", encoding="utf-8") as fh:
            fh.write(render_summary(report))
    except Exception as exc:  # noqa: BLE001
        raise _StageFailure("report", exc) from exc
    return report


def render_summary(report):
    lines = [
        "run summary",
        "-----------",
        f"units: {report.get('n')}",
        f"data: {report.get('data', {}).get('kind')}",
        f"embeddings: {report.get('embeddings', {}).get('source')} "
        f"(d={report.get('embeddings', {}).get('d')})",
        f"estimator: {report.get('estimator', {}).get('kind')}",
    ]
    if "corr" in report:
        lines.append(f"truth correlation: {report['corr']:.4f}")
    rate = report.get("rate")
    if rate:
        lines.append(
            f"rate ({rate['weighting']}): ratio={rate['ratio']:.4f} "
            f"se={rate['se']:.6f} significant={rate['significant']} "
            f"degenerate={rate['degenerate']}"
        )
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# subcommand implementations


def cmd_run(args):
    with open(args.config, encoding="utf-8") as fh:
        config = json.load(fh)
    validate_config(config)
    out_dir = config["outputs"]["dir"]
    try:
        report = _run_pipeline(config, out_dir)
    except _StageFailure as fail:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "FAILED"), "w", encoding="utf-8") as fh:
            fh.write(f"{fail.stage}: {fail.cause}\n")
        print(str(fail), file=sys.stderr)
        return 1
    print(render_summary(report), end="")
    return 0


def cmd_embed(args):
    if args.manifest:
        dataset = load_manifest(args.manifest, args.tensor)
        spatial, temporal = default_specs(args.model, args.seed)
        matrix = embed_dataset(dataset, spatial, temporal,
                               with_tabular=args.with_tabular)
    else:
        sites = load_sites(args.sites)
        seq = read_tensor(args.tensor)
        if seq.shape[0] != len(sites):
            raise SchemaError(
                f"sites file has {len(sites)} rows but tensor has {seq.shape[0]}"
            )
        spatial, temporal = default_specs(args.model, args.seed)
        matrix = embed_sequences(seq, spatial, temporal)
    if args.pca_model:
        with open(args.pca_model, encoding="utf-8") as fh:
            pca = _pca_from_json(json.load(fh))
        reduced = apply_pca(pca, matrix)
        fp = hashlib.sha256(
            (matrix.fingerprint + ":" + pca_digest(pca)).encode()
        ).hexdigest()
        matrix = EmbeddingMatrix(values=reduced, source=matrix.source + "+pca",
                                 fingerprint=fp)
    elif args.pca:
        matrix, pca = reduce_with_pca(matrix, k=args.pca)
        _write_json(_pca_to_json(pca), str(args.out) + ".pca.json")
    _write_embedding_artifacts(matrix, args.out)
    print(f"wrote {args.out} ({matrix.n} x {matrix.dim}, source={matrix.source})")
    return 0


def _manifest_arrays(path, propensity=None):
    units, _ = load_manifest_table(path)
    W = np.array([u.treatment for u in units], dtype=np.int64)
    Y = np.array([u.outcome for u in units], dtype=float)
    if propensity is None:
        propensity = float(W.mean())
    clusters = None
    if any(u.cluster_id is not None for u in units):
        clusters = [u.cluster_id for u in units]
    return units, W, Y, propensity, clusters


def cmd_fit(args):
    _, W, Y, _, _ = _manifest_arrays(args.manifest)
    matrix = _read_embedding_artifacts(args.embeddings)
    params = {"seed": args.seed}
    if args.estimator == "forest" and args.trees:
        params["n_trees"] = args.trees
    spec = _estimator_spec(args.estimator, params)
    if args.estimator == "forest":
        model = fit_causal_forest(matrix.values, W, Y, spec,
                                  fingerprint=matrix.fingerprint)
    else:
        model = fit_rlearner(matrix.values, W, Y, spec=spec,
                             fingerprint=matrix.fingerprint)
    model.save(args.out)
    print(f"wrote {args.out}")
    return 0


def cmd_rate(args):
    _, W, Y, propensity, clusters = _manifest_arrays(args.manifest, args.propensity)
    matrix = _read_embedding_artifacts(args.embeddings)
    spec = _estimator_spec(args.estimator, {"seed": args.seed})
    report = cross_fit_rate(
        W, Y, propensity, matrix.values, spec, weighting=args.weighting,
        folds=args.folds, bootstrap_reps=args.bootstrap, seed=args.seed,
        clusters=clusters,
    )
    report.save(args.out)
    print(f"rate ratio ({args.weighting}): {report.ratio:.4f} "
          f"significant={report.significant}")
    return 0


def cmd_simulate(args):
    sigma2s = [float(s) for s in args.sigma2.split(",")]
    models = args.models.split(",")
    seeds = _parse_seeds(args.seeds)
    rows = run_grid(n=args.n, sigma2s=sigma2s, models=models, seeds=seeds,
                    estimator=args.estimator, weighting=args.weighting,
                    n_trees=args.trees, bootstrap_reps=args.bootstrap)
    write_grid_csv(rows, args.out)
    print(f"wrote {args.out} ({len(rows)} cells)")
    if args.plots:
        for p in plot_grid(rows, args.plots):
            print(f"wrote {p}")
    return 0


def cmd_landcover(args):
    raster = read_raster(args.raster, args.legend)
    if args.sites_mode:
        sites = load_sites(args.manifest)
        lonlats = [(s.lon, s.lat) for s in sites]
    else:
        units, _ = load_manifest_table(args.manifest)
        lonlats = [(u.lon, u.lat) for u in units]
    feats = landcover_features(raster, lonlats, window_cells=args.window)
    matrix = EmbeddingMatrix(
        values=feats, source="landcover",
        fingerprint=f"landcover:w{args.window}:c{len(raster.codes)}",
    )
    _write_embedding_artifacts(matrix, args.out)
    print(f"wrote {args.out} ({feats.shape[0]} x {feats.shape[1]})")
    return 0


def cmd_transport(args):
    model = _load_model(args.model)
    matrix = _read_embedding_artifacts(args.embeddings)
    sites = load_sites(args.sites)
    lonlat = np.array([(s.lon, s.lat) for s in sites])
    if lonlat.shape[0] != matrix.n:
        raise SchemaError(
            f"sites file has {lonlat.shape[0]} rows, embeddings {matrix.n}"
        )
    tau = transport_cate(model, matrix)
    os.makedirs(args.out, exist_ok=True)
    paths = emit_map(lonlat, tau, os.path.join(args.out, "transport"))
    for p in paths.values():
        print(f"wrote {p}")
    return 0


def cmd_sample_sites(args):
    bbox = tuple(float(v) for v in args.bbox.split(","))
    weights = None
    if args.weights:
        dens = read_tensor(args.weights).astype(float)
        weights = PopulationWeights(density=dens, bbox=bbox)
    sites = sample_sites(bbox, args.n, weights=weights, seed=args.seed)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write("id,lon,lat\n")
        for i, (lon, lat) in enumerate(sites.tolist()):
            fh.write(f"site{i},{lon!r},{lat!r}\n")
    print(f"wrote {args.out} ({args.n} sites)")
    return 0


def cmd_report(args):
    path = args.path
    if os.path.isdir(path):
        path = os.path.join(path, "report.json")
    with open(path, encoding="utf-8") as fh:
        report = json.load(fh)
    print(render_summary(report), end="")
    return 0


def _parse_seeds(text):
    if ".." in text:
        lo, hi = text.split("..")
        return list(range(int(lo), int(hi) + 1))
    return [int(s) for s in text.split(",")]


# ---------------------------------------------------------------------------
# parser


def build_parser():
    parser = argparse.ArgumentParser(
        prog="heteo",
        description="heterogeneous treatment effects from satellite image sequences",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="execute a full pipeline from a JSON config")
    p.add_argument("config")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("embed", help="embed sequences into covariate vectors")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--manifest")
    src.add_argument("--sites")
    p.add_argument("--tensor", required=True)
    p.add_argument("--model", choices=["rand-cnn", "rand-vit"], default="rand-vit")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--pca", type=int, default=0)
    p.add_argument("--pca-model", default=None,
                   help="apply an existing PCA state instead of fitting one")
    p.add_argument("--with-tabular", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("fit", help="fit a CATE model on embeddings")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--estimator", choices=["forest", "rlearner"], default="forest")
    p.add_argument("--trees", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("rate", help="cross-fitted heterogeneity signal report")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--propensity", type=float, default=None)
    p.add_argument("--estimator", choices=["forest", "rlearner"], default="forest")
    p.add_argument("--weighting", choices=["autoc", "qini"], default="autoc")
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--bootstrap", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_rate)

    p = sub.add_parser("simulate", help="run the rotation simulation grid")
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--sigma2", default="0.01,0.1,1")
    p.add_argument("--models", default="rand-cnn,rand-vit")
    p.add_argument("--seeds", default="1..5")
    p.add_argument("--estimator", choices=["forest", "rlearner", "oracle"],
                   default="forest")
    p.add_argument("--weighting", choices=["autoc", "qini"], default="autoc")
    p.add_argument("--trees", type=int, default=200)
    p.add_argument("--bootstrap", type=int, default=200)
    p.add_argument("--out", required=True)
    p.add_argument("--plots", default=None)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("landcover", help="logit land-cover proportion features")
    p.add_argument("--raster", required=True)
    p.add_argument("--legend", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--sites-mode", action="store_true",
                   help="treat the manifest as a sites file (id,lon,lat only)")
    p.add_argument("--window", type=int, default=3)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_landcover)

    p = sub.add_parser("transport", help="score sites and emit map artifacts")
    p.add_argument("--model", required=True)
    p.add_argument("--sites", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_transport)

    p = sub.add_parser("sample-sites", help="draw transport site locations")
    p.add_argument("--bbox", required=True, help="lon_min,lat_min,lon_max,lat_max")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--weights", default=None, help="EOT density raster")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample_sites)

    p = sub.add_parser("report", help="render a run report")
    p.add_argument("path")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except HeteoError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
