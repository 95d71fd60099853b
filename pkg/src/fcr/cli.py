"""Command-line entry points: simulate, train, evaluate, predict, gridsearch
and export-embeddings. Validation failures exit 1 and runtime failures exit 2,
both with a JSON error object on stderr."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .core import DimensionError, DomainError, LatentDims
from .dataio import (
    ConfigError,
    IngestionError,
    IngestSchema,
    atomic_write_text,
    ingest_dataset,
    load_dataset,
    resolve_config,
    write_dataset,
    write_text_matrix,
)
from .losses import LossWeights
from .metrics.report import evaluate_model, latent_means
from .metrics.prediction import counterfactual_predict
from .model import ModelConfig
from .simulate import (
    DesignInsufficiencyError,
    SimConfig,
    check_interaction_rank,
    generate_synthetic,
)
from .train import (
    CheckpointError,
    ProtocolError,
    SplitFractions,
    TrainConfig,
    build_model_config,
    grid_search,
    load_checkpoint,
    save_checkpoint,
    split_dataset,
    train,
)

VALIDATION_ERRORS = (
    ConfigError,
    IngestionError,
    DomainError,
    DimensionError,
    ProtocolError,
    CheckpointError,
    DesignInsufficiencyError,
    FileNotFoundError,
    ValueError,
)


def _sim_config(cfg: dict, seed: int) -> SimConfig:
    control = cfg["sim.control_t"]
    return SimConfig(
        sample_count=cfg["sim.sample_count"],
        t_support=cfg["sim.t_support"],
        x_support=cfg["sim.x_support"],
        dims=LatentDims(cfg["sim.n_x"], cfg["sim.n_tx"], cfg["sim.n_t"]),
        y_dim=cfg["sim.y_dim"],
        mixer_depth=cfg["sim.mixer_depth"],
        mixer_activation=cfg["sim.mixer_activation"],
        mean_mode=cfg["sim.mean_mode"],
        control_t=None if control is None else float(control),
        seed=seed,
    )


def _train_config(cfg: dict, seed: int, epochs_key: str = "train.epochs") -> TrainConfig:
    return TrainConfig(
        epochs=cfg[epochs_key],
        batch_size=cfg["train.batch_size"],
        lr=cfg["train.lr"],
        disc_lr=cfg["train.disc_lr"],
        disc_steps=cfg["train.disc_steps"],
        weights=LossWeights(cfg["train.w_sim"], cfg["train.w_ct"], cfg["train.w_dis"]),
        seed=seed,
        fractions=SplitFractions(cfg["split.prediction"], cfg["split.test"],
                                 cfg["split.validation"]),
        standardize=cfg["train.standardize"],
    )


def _model_config(cfg: dict, ds) -> ModelConfig:
    return build_model_config(
        ds,
        LatentDims(cfg["model.n_x"], cfg["model.n_tx"], cfg["model.n_t"]),
        hidden=cfg["model.hidden"],
        depth=cfg["model.depth"],
        embed_width=cfg["model.embed_width"],
        slope=cfg["model.slope"],
    )


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_simulate(args, cfg: dict) -> int:
    sim_cfg = _sim_config(cfg, args.seed)
    ds = generate_synthetic(sim_cfg)
    out = _out_dir(args)
    manifest = write_dataset(ds, out, stem="dataset")
    report = check_interaction_rank(sim_cfg)
    atomic_write_text(out / "rank_report.json", report.to_json())
    print(json.dumps({
        "dataset": str(manifest),
        "cells": ds.n_cells,
        "genes": ds.n_genes,
        "rank_report": str(out / "rank_report.json"),
        "rank_satisfied": report.satisfied,
    }, indent=2))
    return 0


def _load_any_dataset(args, cfg: dict):
    path = Path(args.dataset)
    if not path.exists():
        raise FileNotFoundError(f"dataset path {path} does not exist")
    if path.suffix == ".json":
        return load_dataset(path)
    schema = IngestSchema(
        covariate_column=cfg["ingest.covariate_column"],
        treatment_column=cfg["ingest.treatment_column"],
        control_label=cfg["ingest.control_label"],
    )
    if args.metadata is None:
        raise ConfigError("--metadata is required when --dataset is a matrix file")
    return ingest_dataset(path, Path(args.metadata), schema=schema)


def cmd_train(args, cfg: dict) -> int:
    ds = _load_any_dataset(args, cfg)
    out = _out_dir(args)
    result = train(ds, _model_config(cfg, ds), _train_config(cfg, args.seed))
    ckpt_path = out / "model.fcrc"
    save_checkpoint(result, ckpt_path)
    result.history.write_ndjson(out / "history.ndjson")
    atomic_write_text(out / "splits.json", json.dumps(result.splits.as_dict()))
    print(json.dumps({
        "checkpoint": str(ckpt_path),
        "history": str(out / "history.ndjson"),
        "best_validation": result.best_validation,
    }, indent=2))
    return 0


def _load_checkpoint_arg(args):
    path = Path(args.checkpoint)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint path {path} does not exist")
    return load_checkpoint(path)


def cmd_evaluate(args, cfg: dict) -> int:
    ds = _load_any_dataset(args, cfg)
    ckpt = _load_checkpoint_arg(args)
    splits = split_dataset(
        ds,
        SplitFractions(cfg["split.prediction"], cfg["split.test"], cfg["split.validation"]),
        seed=args.seed,
    )
    report = evaluate_model(
        ckpt, ds, splits,
        seed=args.seed,
        knn=cfg["eval.knn"],
        resolution=cfg["eval.resolution"],
        hsic_permutations=cfg["eval.hsic_permutations"],
        kci_samples=cfg["eval.kci_samples"],
        kci_repeats=cfg["eval.kci_repeats"],
        max_cells=cfg["eval.max_cells"],
        deg_top_k=cfg["eval.deg_top_k"],
    )
    out = _out_dir(args)
    atomic_write_text(out / "metrics.json", report.to_json())
    print(report.to_json())
    return 0


def cmd_predict(args, cfg: dict) -> int:
    ds = _load_any_dataset(args, cfg)
    ckpt = _load_checkpoint_arg(args)
    splits = split_dataset(
        ds,
        SplitFractions(cfg["split.prediction"], cfg["split.test"], cfg["split.validation"]),
        seed=args.seed,
    )
    controls = ds.subset(splits.prediction)
    ref_rows = splits.test[~ds.control_mask[splits.test]]
    references = ds.subset(ref_rows)
    target = cfg["predict.treatment"]
    if target is not None:
        try:
            target = float(target)
        except ValueError:
            pass
    result = counterfactual_predict(ckpt, controls, references, target_treatment=target)
    out = _out_dir(args)
    gene_names = ds.gene_names or [f"g{j}" for j in range(ds.n_genes)]
    write_text_matrix(out / "predictions.tsv", result.predictions, gene_names)
    print(json.dumps({
        "predictions": str(out / "predictions.tsv"),
        "rows": int(result.predictions.shape[0]),
        "skipped_rows": result.skipped_rows,
    }, indent=2))
    return 0


def cmd_gridsearch(args, cfg: dict) -> int:
    ds = _load_any_dataset(args, cfg)
    out = _out_dir(args)
    grid = [
        LossWeights(a, b, c)
        for a in cfg["grid.w_sim"] for b in cfg["grid.w_ct"] for c in cfg["grid.w_dis"]
    ]
    base = _train_config(cfg, args.seed, epochs_key="grid.epochs")
    results = grid_search(ds, _model_config(cfg, ds), base, grid,
                          cache_dir=out / "grid_cache", workers=cfg["grid.workers"])
    ranking = [cell.as_dict() for cell in results]
    atomic_write_text(out / "grid_results.json", json.dumps(ranking, indent=2))
    print(json.dumps(ranking[:3], indent=2))
    return 0


def cmd_export_embeddings(args, cfg: dict) -> int:
    ds = _load_any_dataset(args, cfg)
    ckpt = _load_checkpoint_arg(args)
    rows = np.arange(ds.n_cells)
    z_x, z_tx, z_t = latent_means(ckpt, ds, rows)
    out = _out_dir(args)
    matrix = np.hstack([z_x, z_tx, z_t])
    columns = (
        [f"z_x_{j}" for j in range(z_x.shape[1])]
        + [f"z_tx_{j}" for j in range(z_tx.shape[1])]
        + [f"z_t_{j}" for j in range(z_t.shape[1])]
    )
    write_text_matrix(out / "embeddings.tsv", matrix, columns)
    print(json.dumps({"embeddings": str(out / "embeddings.tsv"),
                      "rows": int(matrix.shape[0])}, indent=2))
    return 0


COMMANDS = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "predict": cmd_predict,
    "gridsearch": cmd_gridsearch,
    "export-embeddings": cmd_export_embeddings,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fcr",
        description="Factorized causal representation learning for "
                    "perturbation-response data",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, default=None,
                       help="flat key=value config file")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out-dir", type=Path, default=Path("."))
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE", help="override any config key")
        if name != "simulate":
            p.add_argument("--dataset", type=Path, required=True,
                           help="dataset manifest (.json) or matrix file")
            p.add_argument("--metadata", type=Path, default=None,
                           help="metadata table when --dataset is a matrix")
        if name in ("evaluate", "predict", "export-embeddings"):
            p.add_argument("--checkpoint", type=Path, required=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args.config, args.overrides)
        return COMMANDS[args.command](args, cfg)
    except VALIDATION_ERRORS as exc:
        json.dump({"error": type(exc).__name__, "message": str(exc)}, sys.stderr)
        sys.stderr.write("\n")
        return 1
    except Exception as exc:  # runtime failure
        json.dump({"error": type(exc).__name__, "message": str(exc)}, sys.stderr)
        sys.stderr.write("\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
