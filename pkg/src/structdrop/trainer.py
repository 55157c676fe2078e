"""Truncated-BPTT training loop, SGD with clipping, and evaluation."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from structdrop.corpus import load_corpus, make_batches, split_stream
from structdrop.model import (
    ModelConfig,
    ModelParams,
    backward_window,
    forward_window,
    init_params,
    loss_and_grad,
    perplexity,
    save_checkpoint,
    zero_state,
)
from structdrop.tensor_core import resolve_dtype

log = logging.getLogger(__name__)

EPOCH_COLUMNS = ("epoch", "train_loss", "valid_loss", "valid_ppl", "lr", "wall_seconds")

# sub-seed offsets derived from the single run seed
SEED_INIT = 0
SEED_MASKS = 1


class ConfigError(ValueError):
    pass


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    corpus_path: str = ""
    splits: tuple[float, float, float] = (0.9, 0.05, 0.05)
    batch_size: int = 20
    unroll_steps: int = 35
    epochs: int = 3
    lr: float = 10.0
    lr_decay: float = 0.8
    lr_decay_start_epoch: int = 2
    clip_norm: float = 5.0
    seed: int = 0
    precision: str = "single"
    init_range: float = 0.05
    kernel: str = "sparse"
    threads: int = 1
    out_dir: str = "runs/default"
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        self.splits = tuple(float(f) for f in self.splits)
        if len(self.splits) != 3 or abs(sum(self.splits) - 1.0) > 1e-9:
            raise ConfigError(f"splits must be three fractions summing to 1, got {self.splits}")
        if self.lr < 0:
            raise ConfigError("lr must be non-negative")
        if self.batch_size < 1 or self.unroll_steps < 1 or self.epochs < 0:
            raise ConfigError("batch_size and unroll_steps must be positive, epochs non-negative")
        if self.kernel not in ("sparse", "dense"):
            raise ConfigError(f"kernel must be 'sparse' or 'dense', got {self.kernel!r}")
        try:
            resolve_dtype(self.precision)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if isinstance(self.model, dict):
            self.model = model_config_from_dict(self.model)

    @property
    def dtype(self) -> np.dtype:
        return resolve_dtype(self.precision)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["splits"] = list(self.splits)
        d["model"]["mask_case"] = self.model.mask_case.name
        return d


def model_config_from_dict(d: dict) -> ModelConfig:
    names = {f.name for f in dataclasses.fields(ModelConfig)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
    try:
        return ModelConfig(**d)
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"invalid model config: {exc}") from exc


def load_train_config(path) -> TrainConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    names = {f.name for f in dataclasses.fields(TrainConfig)}
    unknown = set(raw) - names
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    try:
        return TrainConfig(**raw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    valid_loss: float
    valid_ppl: float
    lr: float
    wall_seconds: float


@dataclass
class TrainReport:
    epochs: list[EpochRecord] = field(default_factory=list)
    test_loss: Optional[float] = None
    test_ppl: Optional[float] = None
    threads: int = 1
    params: Optional[ModelParams] = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {
            "epochs": [dataclasses.asdict(r) for r in self.epochs],
            "test_loss": self.test_loss,
            "test_ppl": self.test_ppl,
            "threads": self.threads,
        }


def global_norm(grads: Sequence[np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads)))


def sgd_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], lr: float,
             clip_norm: Optional[float]) -> float:
    """In-place ``p -= lr * g`` after global-norm clipping. Returns the pre-clip norm."""
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ValueError(f"param {p.shape} vs grad {g.shape}")
    norm = global_norm(grads)
    if not np.isfinite(norm):
        bad = [i for i, g in enumerate(grads) if not np.all(np.isfinite(g))]
        raise NonFiniteGradientError(f"non-finite gradient in parameter arrays {bad}")
    factor = lr
    if clip_norm is not None and norm > clip_norm:
        factor = lr * clip_norm / norm
    for p, g in zip(params, grads):
        p -= p.dtype.type(factor) * g
    return norm


def lr_for_epoch(config: TrainConfig, epoch: int) -> float:
    """Learning rate for 1-based ``epoch``."""
    return config.lr * config.lr_decay ** max(0, epoch - config.lr_decay_start_epoch)


def evaluate_stream(params: ModelParams, model: ModelConfig, stream: np.ndarray,
                    batch_size: int, unroll_steps: int) -> tuple[float, float]:
    """Dropout-free mean loss over ``stream`` with state carried across windows."""
    dtype = params.dtype
    state = zero_state(model, batch_size, dtype)
    total, count = 0.0, 0
    for x, y in make_batches(stream, batch_size, unroll_steps):
        logits, _, state = forward_window(params, model, x, state, None, "dense")
        loss, _ = loss_and_grad(logits, y)
        total += loss * y.size
        count += y.size
    loss = total / count
    return loss, perplexity(loss)


def _splits(config: TrainConfig):
    stream, vocab = load_corpus(config.corpus_path)
    train_s, valid_s, test_s = split_stream(stream, config.splits)
    return vocab, {"train": train_s, "valid": valid_s, "test": test_s}


def evaluate(params: ModelParams, config: TrainConfig, split: str = "valid") -> tuple[float, float]:
    vocab, parts = _splits(config)
    if params.embedding.shape[0] != len(vocab):
        raise ConfigError(f"checkpoint vocabulary {params.embedding.shape[0]} != corpus vocabulary {len(vocab)}")
    model = dataclasses.replace(config.model, vocab=len(vocab))
    with threadpool_limits(config.threads):
        return evaluate_stream(params, model, parts[split], config.batch_size, config.unroll_steps)


def train(config: TrainConfig, write: bool = True) -> TrainReport:
    vocab, parts = _splits(config)
    config.model.vocab = len(vocab)
    report = train_streams(config, parts["train"], parts["valid"], parts["test"])
    if write:
        write_outputs(config, report)
    return report


def train_streams(config: TrainConfig, train_s: np.ndarray, valid_s: np.ndarray,
                  test_s: Optional[np.ndarray] = None) -> TrainReport:
    """Training loop over already-tokenised streams; ``config.model.vocab`` must be set."""
    model = config.model
    dtype = config.dtype
    B, T = config.batch_size, config.unroll_steps
    params = init_params(model, config.init_range, seed=[config.seed, SEED_INIT], dtype=dtype)
    batches = make_batches(train_s, B, T) if config.epochs else []
    report = TrainReport(threads=config.threads, params=params)

    with threadpool_limits(config.threads):
        for epoch in range(1, config.epochs + 1):
            lr = lr_for_epoch(config, epoch)
            start = time.perf_counter()
            state = zero_state(model, B, dtype)
            total = 0.0
            for w, (x, y) in enumerate(batches):
                schedule = model.schedule(B, T, [config.seed, SEED_MASKS, epoch, w])
                logits, tape, state = forward_window(params, model, x, state, schedule, config.kernel)
                loss, d_logits = loss_and_grad(logits, y)
                grads = backward_window(params, tape, d_logits, schedule, config.kernel)
                sgd_step(params.arrays(), grads.arrays(), lr, config.clip_norm)
                total += loss
            train_loss = total / len(batches)
            valid_loss, valid_ppl = evaluate_stream(params, model, valid_s, B, T)
            rec = EpochRecord(epoch, train_loss, valid_loss, valid_ppl, lr, time.perf_counter() - start)
            log.info("epoch %d train %.4f valid %.4f ppl %.3f lr %.4g (%.1fs)", epoch, train_loss,
                     valid_loss, valid_ppl, lr, rec.wall_seconds)
            report.epochs.append(rec)
        if test_s is not None and len(test_s) >= B * (T + 1):
            report.test_loss, report.test_ppl = evaluate_stream(params, model, test_s, B, T)
    return report


def write_outputs(config: TrainConfig, report: TrainReport) -> None:
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "epochs.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(EPOCH_COLUMNS)
        for r in report.epochs:
            w.writerow([r.epoch, repr(r.train_loss), repr(r.valid_loss), repr(r.valid_ppl), repr(r.lr),
                        f"{r.wall_seconds:.3f}"])
    doc = report.to_dict()
    doc["config"] = config.to_dict()
    (out / "report.json").write_text(json.dumps(doc, indent=2))
    save_checkpoint(out / "model.sdlm", report.params)
