"""Dataset splitting, the alternating min-max training loop, grid search and
the versioned checkpoint format."""
from __future__ import annotations

import copy
import hashlib
import json
import math
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .core import Dataset, DomainError
from .dataio import Vocab, atomic_write_text, covariate_vocab, treatment_vocab
from .losses import (
    Batch,
    LossWeights,
    StepRng,
    all_loss_parts,
    dis_loss,
    total_loss,
)
from .model import FcrModel, ModelConfig


class ProtocolError(ValueError):
    """The dataset cannot support the split protocol."""


class TrainingDiverged(RuntimeError):
    """Raised when a loss part becomes non-finite; carries the last good state."""

    def __init__(self, message: str, best_state: Optional[dict], history: "TrainHistory"):
        super().__init__(message)
        self.best_state = best_state
        self.history = history


class CheckpointError(ValueError):
    pass


# ---------------------------------------------------------------------------
# split protocol


@dataclass(frozen=True)
class SplitFractions:
    prediction: float = 0.2
    test: float = 0.2
    validation: float = 0.2  # of the remainder, i.e. a four-to-one train ratio

    def __post_init__(self):
        for name in ("prediction", "test", "validation"):
            v = getattr(self, name)
            if not (0.0 <= v < 1.0):
                raise DomainError(f"{name} fraction must lie in [0, 1), got {v}")


@dataclass(frozen=True)
class Splits:
    train: np.ndarray
    validation: np.ndarray
    test: np.ndarray
    prediction: np.ndarray

    def as_dict(self) -> dict[str, list[int]]:
        return {
            "train": self.train.tolist(),
            "validation": self.validation.tolist(),
            "test": self.test.tolist(),
            "prediction": self.prediction.tolist(),
        }


def split_dataset(ds: Dataset, fractions: SplitFractions = SplitFractions(),
                  seed: int = 0) -> Splits:
    """Hold out a fraction of the control cells for prediction, then a test
    fraction of the rest, then split the remainder four-to-one. Counts use
    floor rounding with the remainder going to the training split."""
    rng = np.random.default_rng(seed)
    controls = np.flatnonzero(ds.control_mask)
    if controls.size == 0:
        raise ProtocolError(
            "split protocol holds out control cells but the dataset has none"
        )
    n_pred = math.floor(controls.size * fractions.prediction)
    prediction = rng.permutation(controls)[:n_pred]

    rest = np.setdiff1d(np.arange(ds.n_cells), prediction, assume_unique=False)
    rest = rng.permutation(rest)
    n_test = math.floor(rest.size * fractions.test)
    test, remainder = rest[:n_test], rest[n_test:]
    n_val = math.floor(remainder.size * fractions.validation)
    validation, train = remainder[:n_val], remainder[n_val:]
    return Splits(
        train=np.sort(train),
        validation=np.sort(validation),
        test=np.sort(test),
        prediction=np.sort(prediction),
    )


# ---------------------------------------------------------------------------
# encoding and standardization


@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, y: np.ndarray) -> "Standardizer":
        return cls(mean=y.mean(axis=0), std=np.maximum(y.std(axis=0), 1e-8))

    @classmethod
    def identity(cls, width: int) -> "Standardizer":
        return cls(mean=np.zeros(width), std=np.ones(width))

    def transform(self, y: np.ndarray) -> np.ndarray:
        return (y - self.mean) / self.std

    def inverse(self, y: np.ndarray) -> np.ndarray:
        return y * self.std + self.mean


@dataclass
class EncodedData:
    """A dataset view with tensors ready for the model."""

    y: torch.Tensor
    t_idx: torch.Tensor
    x_idx: torch.Tensor
    t_labels: np.ndarray
    x_labels: np.ndarray
    control_mask: np.ndarray

    def __len__(self) -> int:
        return self.y.shape[0]


def encode_dataset(ds: Dataset, t_vocab: Vocab, x_vocab: Vocab,
                   scaler: Standardizer, dtype=torch.float32) -> EncodedData:
    return EncodedData(
        y=torch.as_tensor(scaler.transform(ds.outcomes), dtype=dtype),
        t_idx=torch.as_tensor(t_vocab.encode(ds.treatments)),
        x_idx=torch.as_tensor(x_vocab.encode(ds.covariates)),
        t_labels=np.asarray(ds.treatments),
        x_labels=np.asarray(ds.covariates),
        control_mask=np.asarray(ds.control_mask, dtype=bool),
    )


def make_batch(model: FcrModel, data: EncodedData, idx: np.ndarray) -> Batch:
    ti = torch.as_tensor(idx, dtype=torch.long)
    return Batch(
        y=data.y[ti],
        t_enc=model.encode_t(data.t_idx[ti]),
        x_enc=model.encode_x(data.x_idx[ti]),
        t_idx=data.t_idx[ti],
        t_labels=data.t_labels[idx],
        x_labels=data.x_labels[idx],
        control_mask=data.control_mask[idx],
    )


def build_model_config(ds: Dataset, dims, **kwargs) -> ModelConfig:
    return ModelConfig(
        dims=dims,
        y_dim=ds.n_genes,
        t_classes=len(treatment_vocab(ds)),
        x_classes=len(covariate_vocab(ds)),
        **kwargs,
    )


# ---------------------------------------------------------------------------
# training loop


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    batch_size: int = 2046
    lr: float = 3e-4
    disc_lr: float = 3e-4
    disc_steps: int = 10
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    fractions: SplitFractions = field(default_factory=SplitFractions)
    standardize: bool = True
    # Geometric per-epoch decay of both learning rates down to lr * lr_final_scale.
    lr_final_scale: float = 1.0

    def __post_init__(self):
        if self.epochs < 1:
            raise DomainError("epochs must be >= 1")
        if self.batch_size < 1:
            raise DomainError("batch_size must be >= 1")
        if self.lr <= 0 or self.disc_lr <= 0:
            raise DomainError("learning rates must be positive")
        if self.disc_steps < 0:
            raise DomainError("disc_steps must be >= 0")
        if not (0.0 < self.lr_final_scale <= 1.0):
            raise DomainError("lr_final_scale must lie in (0, 1]")

    def lr_scale_at(self, epoch: int) -> float:
        if self.lr_final_scale >= 1.0 or self.epochs <= 1:
            return 1.0
        return self.lr_final_scale ** (epoch / (self.epochs - 1))

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "lr": self.lr,
            "disc_lr": self.disc_lr,
            "disc_steps": self.disc_steps,
            "weights": [self.weights.w_sim, self.weights.w_ct, self.weights.w_dis],
            "seed": self.seed,
            "fractions": [self.fractions.prediction, self.fractions.test,
                          self.fractions.validation],
            "standardize": self.standardize,
            "lr_final_scale": self.lr_final_scale,
        }


@dataclass
class TrainHistory:
    records: list[dict] = field(default_factory=list)

    def append(self, record: dict) -> None:
        self.records.append(record)

    def write_ndjson(self, path: Path) -> None:
        atomic_write_text(
            Path(path), "".join(json.dumps(r) + "\n" for r in self.records)
        )


@dataclass
class TrainResult:
    model: FcrModel
    history: TrainHistory
    splits: Splits
    scaler: Standardizer
    t_vocab: Vocab
    x_vocab: Vocab
    best_validation: float
    model_config: ModelConfig
    train_config: TrainConfig


def validation_loss(model: FcrModel, data: EncodedData, weights: LossWeights,
                    seed: int) -> float:
    """Total loss on a held-out set with a fixed sampling path so values are
    comparable across epochs."""
    with torch.no_grad():
        batch = make_batch(model, data, np.arange(len(data)))
        parts, _ = all_loss_parts(model, batch, StepRng(seed))
        return float(total_loss(parts, weights))


def train(ds: Dataset, model_cfg: ModelConfig, cfg: TrainConfig,
          splits: Optional[Splits] = None) -> TrainResult:
    """Alternate one objective-minimization step with ``disc_steps``
    discriminator updates; keep the best-validation parameters."""
    if splits is None:
        splits = split_dataset(ds, cfg.fractions, cfg.seed)
    if splits.train.size == 0 or splits.validation.size == 0:
        raise ProtocolError("training requires nonempty train and validation splits")

    train_ds = ds.subset(splits.train)
    val_ds = ds.subset(splits.validation)
    t_vocab = treatment_vocab(ds)
    x_vocab = covariate_vocab(ds)
    scaler = (
        Standardizer.fit(train_ds.outcomes)
        if cfg.standardize
        else Standardizer.identity(ds.n_genes)
    )
    train_enc = encode_dataset(train_ds, t_vocab, x_vocab, scaler)
    val_enc = encode_dataset(val_ds, t_vocab, x_vocab, scaler)

    torch.manual_seed(cfg.seed)
    model = FcrModel(model_cfg)
    opt_model = torch.optim.Adam(model.model_parameters(), lr=cfg.lr)
    opt_dis = torch.optim.Adam(model.discriminator_parameters(), lr=cfg.disc_lr)

    history = TrainHistory()
    rng = StepRng(cfg.seed)
    eval_seed = cfg.seed * 7919 + 13
    best_val = float("inf")
    best_state: Optional[dict] = None
    n_train = len(train_enc)
    step = 0

    for epoch in range(cfg.epochs):
        scale = cfg.lr_scale_at(epoch)
        for group in opt_model.param_groups:
            group["lr"] = cfg.lr * scale
        for group in opt_dis.param_groups:
            group["lr"] = cfg.disc_lr * scale
        order = rng.np.permutation(n_train)
        for start in range(0, n_train, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            batch = make_batch(model, train_enc, idx)

            step_rng = rng.child(step)
            parts, diagnostics = all_loss_parts(model, batch, step_rng)
            try:
                loss = total_loss(parts, cfg.weights)
            except Exception as exc:
                raise TrainingDiverged(str(exc), best_state, history) from exc
            opt_model.zero_grad()
            loss.backward()
            opt_model.step()

            for k in range(cfg.disc_steps):
                d_idx = rng.np.choice(n_train, size=min(cfg.batch_size, n_train),
                                      replace=False)
                d_batch = make_batch(model, train_enc, d_idx)
                d_rng = rng.child(step * 1009 + k + 1)
                dx = dis_loss(model, d_batch, "x", d_rng, detach_latents=True)
                dt = dis_loss(model, d_batch, "t", d_rng, detach_latents=True)
                d_loss = dx.value + dt.value
                if not torch.isfinite(d_loss):
                    raise TrainingDiverged("discriminator loss non-finite",
                                           best_state, history)
                opt_dis.zero_grad()
                d_loss.backward()
                opt_dis.step()

            history.append({
                "step": step,
                "epoch": epoch,
                "total": float(loss.detach()),
                **{k: float(v.detach()) for k, v in parts.items()},
                **diagnostics,
            })
            step += 1

        val = validation_loss(model, val_enc, cfg.weights, eval_seed)
        improved = val < best_val
        if improved:
            best_val = val
            best_state = copy.deepcopy(model.state_dict())
        history.append({"epoch": epoch, "validation_total": val, "best": improved})

    if best_state is not None:
        model.load_state_dict(best_state)
    return TrainResult(
        model=model,
        history=history,
        splits=splits,
        scaler=scaler,
        t_vocab=t_vocab,
        x_vocab=x_vocab,
        best_validation=best_val,
        model_config=model_cfg,
        train_config=cfg,
    )


# ---------------------------------------------------------------------------
# grid search


def paper_default_grid() -> list[LossWeights]:
    """The reference hyperparameter grid: 11 x 11 x 10 = 1210 cells."""
    w12 = [0.5] + [float(v) for v in range(1, 11)]
    w3 = [0.1, 0.3, 0.5, 0.7, 0.9, 1.0, 3.0, 5.0, 7.0, 10.0]
    return [LossWeights(a, b, c) for a in w12 for b in w12 for c in w3]


@dataclass
class GridCellResult:
    weights: LossWeights
    validation: Optional[float]
    error: Optional[str]
    config_hash: str
    from_cache: bool = False

    def as_dict(self) -> dict:
        return {
            "weights": [self.weights.w_sim, self.weights.w_ct, self.weights.w_dis],
            "validation": self.validation,
            "error": self.error,
            "config_hash": self.config_hash,
        }


def _cell_hash(model_cfg: ModelConfig, cfg: TrainConfig) -> str:
    payload = json.dumps(
        {"model": model_cfg.to_dict(), "train": cfg.to_dict()}, sort_keys=True
    )
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def _run_cell(args) -> GridCellResult:
    ds, model_cfg, cell_cfg, cell_hash = args
    try:
        result = train(ds, model_cfg, cell_cfg)
        return GridCellResult(cell_cfg.weights, result.best_validation, None, cell_hash)
    except Exception as exc:  # recorded, not fatal to the sweep
        return GridCellResult(cell_cfg.weights, None, f"{type(exc).__name__}: {exc}",
                              cell_hash)


def grid_search(ds: Dataset, model_cfg: ModelConfig, base_cfg: TrainConfig,
                grid: Sequence[LossWeights], cache_dir: Optional[Path] = None,
                workers: int = 1) -> list[GridCellResult]:
    """Train every grid cell, ranked by validation loss; completed cells are
    cached on disk so interrupted sweeps resume where they stopped."""
    if cache_dir is not None:
        cache_dir = Path(cache_dir)
        cache_dir.mkdir(parents=True, exist_ok=True)

    pending: list[tuple] = []
    results: list[GridCellResult] = []
    for weights in grid:
        cell_cfg = replace(base_cfg, weights=weights)
        cell_hash = _cell_hash(model_cfg, cell_cfg)
        cache_file = cache_dir / f"{cell_hash}.json" if cache_dir else None
        if cache_file is not None and cache_file.exists():
            cached = json.loads(cache_file.read_text())
            results.append(GridCellResult(
                weights, cached["validation"], cached["error"], cell_hash,
                from_cache=True,
            ))
            continue
        pending.append((ds, model_cfg, cell_cfg, cell_hash))

    if workers > 1 and len(pending) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            fresh = list(pool.map(_run_cell, pending))
    else:
        fresh = [_run_cell(args) for args in pending]

    for cell in fresh:
        if cache_dir is not None:
            atomic_write_text(cache_dir / f"{cell.config_hash}.json",
                              json.dumps(cell.as_dict(), indent=2))
        results.append(cell)

    def sort_key(c: GridCellResult):
        return (c.validation is None, c.validation if c.validation is not None else 0.0)

    return sorted(results, key=sort_key)


# ---------------------------------------------------------------------------
# checkpoints


CHECKPOINT_MAGIC = b"FCRC"
CHECKPOINT_VERSION = 1


@dataclass
class Checkpoint:
    model: FcrModel
    model_config: ModelConfig
    scaler: Standardizer
    t_vocab: Vocab
    x_vocab: Vocab
    extra: dict = field(default_factory=dict)


def _header_hash(header_core: dict) -> str:
    return hashlib.sha256(
        json.dumps(header_core, sort_keys=True).encode()
    ).hexdigest()


def save_checkpoint(result, path: Path) -> None:
    """Binary checkpoint: magic, version, JSON header (dims, config hash,
    scaler, vocabularies, parameter index) and the raw parameter blob."""
    model: FcrModel = result.model if hasattr(result, "model") else result
    state = model.state_dict()
    index = []
    blob = bytearray()
    for name, tensor in state.items():
        arr = tensor.detach().cpu().numpy()
        index.append({"name": name, "shape": list(arr.shape), "dtype": str(arr.dtype)})
        blob.extend(arr.tobytes())
    header_core = {
        "model_config": model.cfg.to_dict(),
        "params": index,
    }
    header = {
        **header_core,
        "config_hash": _header_hash(header_core),
        "blob_sha256": hashlib.sha256(bytes(blob)).hexdigest(),
        "blob_len": len(blob),
        "scaler": {
            "mean": result.scaler.mean.tolist(),
            "std": result.scaler.std.tolist(),
        } if hasattr(result, "scaler") else None,
        "t_vocab": result.t_vocab.to_list() if hasattr(result, "t_vocab") else None,
        "x_vocab": result.x_vocab.to_list() if hasattr(result, "x_vocab") else None,
        "extra": getattr(result, "extra", {}) or _result_extra(result),
    }
    header_bytes = json.dumps(header, sort_keys=True).encode()
    payload = (
        CHECKPOINT_MAGIC
        + struct.pack("<II", CHECKPOINT_VERSION, len(header_bytes))
        + header_bytes
        + bytes(blob)
    )
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    tmp.replace(path)


def _result_extra(result) -> dict:
    if hasattr(result, "train_config"):
        return {"train_config": result.train_config.to_dict(),
                "best_validation": result.best_validation}
    return {}


def load_checkpoint(path: Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, header_len = struct.unpack("<II", raw[4:12])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    if len(raw) < 12 + header_len:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[12:12 + header_len])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})")
    header_core = {"model_config": header["model_config"], "params": header["params"]}
    if _header_hash(header_core) != header["config_hash"]:
        raise CheckpointError(f"{path}: config hash mismatch; refusing to load")
    blob = raw[12 + header_len:]
    if len(blob) != header["blob_len"]:
        raise CheckpointError(
            f"{path}: truncated parameter blob "
            f"({len(blob)} bytes, expected {header['blob_len']})"
        )
    if hashlib.sha256(blob).hexdigest() != header["blob_sha256"]:
        raise CheckpointError(f"{path}: parameter blob checksum mismatch")

    model_cfg = ModelConfig.from_dict(header["model_config"])
    model = FcrModel(model_cfg)
    state = {}
    offset = 0
    for entry in header["params"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        dtype = np.dtype(entry["dtype"])
        nbytes = count * dtype.itemsize
        arr = np.frombuffer(blob[offset:offset + nbytes], dtype=dtype)
        state[entry["name"]] = torch.as_tensor(arr.copy()).reshape(entry["shape"])
        offset += nbytes
    model.load_state_dict(state)

    scaler = (
        Standardizer(np.asarray(header["scaler"]["mean"]),
                     np.asarray(header["scaler"]["std"]))
        if header.get("scaler")
        else Standardizer.identity(model_cfg.y_dim)
    )
    t_vocab = Vocab.from_list(header["t_vocab"]) if header.get("t_vocab") else Vocab(())
    x_vocab = Vocab.from_list(header["x_vocab"]) if header.get("x_vocab") else Vocab(())
    extra = dict(header.get("extra", {}))
    extra.setdefault("config_hash", header["config_hash"])
    return Checkpoint(
        model=model,
        model_config=model_cfg,
        scaler=scaler,
        t_vocab=t_vocab,
        x_vocab=x_vocab,
        extra=extra,
    )
