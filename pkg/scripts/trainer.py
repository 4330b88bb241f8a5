"""Training loop for the joint objective, experiment config, and ablation sweeps."""

import copy
import csv
import json
import logging
import re
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from backbone import EncoderConfig
from dff import DFFConfig
from diff_core import ParamStore, configure_determinism, forward_backward
from errors import ConfigError, NormalizationError, NumericalError, OptimizerStateError, TrainingAborted
from evaluation import EvalConfig, MetricsReport, batch_images, evaluate
from losses import LossBreakdown, LossWeights, final_loss
from model import DF2AMModel, save_checkpoint
from sampling import BatchSpec, DatasetIndex, IdentityBalancedSampler
from synthdata import RetrievalSplit, SynthConfig, SynthDataset, generate, holdout, load_dataset, split

logger = logging.getLogger(__name__)

RUNLOG_COLUMNS = ["step", "epoch", "lr", "loss_b_rgb", "loss_b_ir", "loss_d", "loss_a", "loss_final"]
EPOCH_COLUMNS = ["epoch", "rank1", "rank5", "rank10", "rank20", "mAP"]
ABLATION_COLUMNS = ["axis", "value", "seeds", "mAP", "rank1", "rank5", "rank10", "rank20"]
AXES = ("P", "lambda", "zeta", "margin_vs_delta", "NM", "modules")

# Reference schedule: 80 epochs with decays at 30 and 50.
REFERENCE_EPOCHS = 80
REFERENCE_MILESTONES = (30, 50)


@dataclass(frozen=True)
class TrainConfig:
    """Every knob of one training run.

    Extensions beyond the method: ``weight_decay`` (default off), ``grad_clip_norm``
    (a desk-scale stabilizer; null disables it), ``validation_fraction``.
    ``milestones`` null means the reference milestones scaled to ``epochs``.
    """

    batch: BatchSpec = field(default_factory=BatchSpec)
    loss: LossWeights = field(default_factory=LossWeights)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    dff: DFFConfig = field(default_factory=DFFConfig)
    data: SynthConfig = field(default_factory=SynthConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    dataset_file: Optional[str] = None
    train_fraction: float = 0.5
    validation_fraction: float = 0.1
    epochs: int = 40
    base_lr: float = 0.1
    momentum: float = 0.9
    milestones: Optional[tuple[int, ...]] = None
    lr_factors: tuple[float, ...] = (0.1, 0.01)
    weight_decay: float = 0.0
    grad_clip_norm: Optional[float] = 10.0
    checkpoint_interval: int = 0
    seed: int = 0
    output_dir: str = "runs/default"

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.base_lr <= 0:
            raise ConfigError(f"base_lr must be positive, got {self.base_lr}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if len(self.schedule()) != len(self.lr_factors):
            raise ConfigError("milestones and lr_factors must have the same length")
        if self.weight_decay < 0 or (self.grad_clip_norm is not None and self.grad_clip_norm <= 0):
            raise ConfigError("weight_decay must be >= 0 and grad_clip_norm positive or null")
        if not 0 <= self.validation_fraction < 1:
            raise ConfigError(f"validation_fraction {self.validation_fraction} outside [0, 1)")
        self.batch.validate()
        self.loss.validate()
        self.eval.validate()
        if self.dataset_file is None:
            self.data.validate()

    def schedule(self) -> tuple[int, ...]:
        if self.milestones is not None:
            return tuple(self.milestones)
        return tuple(int(round(m / REFERENCE_EPOCHS * self.epochs)) for m in REFERENCE_MILESTONES)


def _build(cls, raw: dict, path: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"config section '{path or 'root'}' must be an object")
    known = {f.name: f for f in fields(cls)}
    values = {}
    for key, value in raw.items():
        dotted = f"{path}.{key}" if path else key
        if key not in known:
            raise ConfigError(f"unknown config key '{dotted}'")
        default = known[key].default_factory() if callable(known[key].default_factory) else None
        if is_dataclass(default):
            value = _build(type(default), value, dotted)
        elif isinstance(value, list):
            value = tuple(value)
        values[key] = value
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(f"bad config section '{path or 'root'}': {exc}") from exc


def config_from_dict(raw: dict) -> TrainConfig:
    config = _build(TrainConfig, raw, "")
    config.validate()
    return config


def load_config(path: Path) -> TrainConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return config_from_dict(raw)


def config_to_dict(config: TrainConfig) -> dict:
    return asdict(config)


# Config keys that decide which identities a checkpoint is scored on.
SPLIT_KEYS = ("dataset_file", "train_fraction", "validation_fraction", "eval.direction")


def _dotted(raw: dict, key: str):
    for part in key.split("."):
        raw = raw[part]
    return raw


def checkpoint_mismatches(snapshot: dict, config: TrainConfig) -> list[str]:
    """Split-defining keys whose value in a checkpoint's config snapshot differs from ``config``."""
    stored = snapshot.get("config")
    if stored is None:
        logger.warning("checkpoint carries no config snapshot; data split not verified")
        return []
    current = config_to_dict(config)
    keys = list(SPLIT_KEYS)
    if config.dataset_file is None:
        keys.append("data")
    mismatches = []
    for key in keys:
        try:
            before = _dotted(stored, key)
        except (KeyError, TypeError):
            mismatches.append(f"{key}: missing from checkpoint")
            continue
        if before != _dotted(current, key):
            mismatches.append(f"{key}: checkpoint {before!r}, config {_dotted(current, key)!r}")
    return mismatches


def lr_at(epoch: int, config: TrainConfig) -> float:
    """Step schedule; factors are relative to the base rate.

    Rates are rounded to 12 decimals so 0.1 * 0.1 reads as exactly 0.01.
    """
    if not 0 <= epoch <= config.epochs:
        raise ConfigError(f"epoch {epoch} outside 0..{config.epochs}")
    lr = config.base_lr
    for milestone, factor in zip(config.schedule(), config.lr_factors):
        if epoch >= milestone:
            lr = round(config.base_lr * factor, 12)
    return lr


class OptimizerState:
    """Classical-momentum SGD state (v <- mu*v + g; theta <- theta - lr*v).

    Velocities live in ``torch.optim.SGD``'s momentum buffers and start at zero.
    """

    def __init__(self, params: ParamStore, weight_decay: float = 0.0):
        self.names = list(params)
        self.shapes = {name: tuple(params[name].shape) for name in params}
        self.optimizer = torch.optim.SGD(
            [params[name] for name in params], lr=0.1, momentum=0.9, weight_decay=weight_decay
        )

    def velocity(self, params: ParamStore, name: str) -> torch.Tensor:
        buffer = self.optimizer.state.get(params[name], {}).get("momentum_buffer")
        return torch.zeros_like(params[name]) if buffer is None else buffer

    def check(self, params: ParamStore) -> None:
        if list(params) != self.names:
            raise OptimizerStateError(f"parameter names changed: {self.names} -> {list(params)}")
        for name in params:
            shape = tuple(params[name].shape)
            buffer = self.optimizer.state.get(params[name], {}).get("momentum_buffer")
            if shape != self.shapes[name] or (buffer is not None and tuple(buffer.shape) != shape):
                raise OptimizerStateError(f"shape drift on '{name}': tracked {self.shapes[name]}, now {shape}")


def sgd_momentum_step(params: ParamStore, state: OptimizerState, lr: float, momentum: float) -> None:
    """Apply one update from the accumulated gradients, then reset them."""
    state.check(params)
    for group in state.optimizer.param_groups:
        group["lr"] = lr
        group["momentum"] = momentum
    state.optimizer.step()
    params.zero_grad()


@dataclass
class RunLog:
    steps: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)

    def add_step(self, step: int, epoch: int, lr: float, losses: dict[str, float]) -> None:
        if self.steps and step <= self.steps[-1]["step"]:
            raise ValueError(f"step {step} does not follow {self.steps[-1]['step']}")
        self.steps.append({"step": step, "epoch": epoch, "lr": lr, **losses})

    def add_epoch(self, epoch: int, report: MetricsReport) -> None:
        row = {"epoch": epoch, "mAP": report.mAP}
        row.update({f"rank{k}": v for k, v in report.cmc.items()})
        self.epochs.append(row)

    @staticmethod
    def _write(path: Path, columns: list[str], rows: list[dict]) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(columns)
            for row in rows:
                writer.writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in columns])

    def save(self, directory: Path) -> tuple[Path, Path]:
        directory.mkdir(parents=True, exist_ok=True)
        steps, epochs = directory / "runlog.csv", directory / "epoch_metrics.csv"
        self._write(steps, RUNLOG_COLUMNS, self.steps)
        self._write(epochs, EPOCH_COLUMNS, self.epochs)
        return steps, epochs


@dataclass
class DataBundle:
    dataset: SynthDataset
    train_index: DatasetIndex
    validation: Optional[RetrievalSplit]
    test: RetrievalSplit


def prepare_data(config: TrainConfig) -> DataBundle:
    """Load or generate the dataset and carve train / validation / test identities.

    Splits are seeded by the dataset seed, so every run on the same data
    sees the same test identities.
    """
    if config.dataset_file:
        dataset = load_dataset(Path(config.dataset_file))
    else:
        _, dataset = generate(config.data)
    data_seed = dataset.config.seed
    direction = config.eval.direction
    train_index, test = split(dataset, config.train_fraction, data_seed, direction)

    validation = None
    train_ids = sorted(train_index.original_ids.values())
    if config.validation_fraction > 0:
        count = max(2, int(round(config.validation_fraction * len(train_ids))))
        train_ids, validation = holdout(dataset, train_ids, count, data_seed + 1, direction)
        train_index = dataset.index(train_ids)
    return DataBundle(dataset, train_index, validation, test)


@dataclass
class TrainResult:
    model: DF2AMModel
    run_log: RunLog
    checkpoint: Path
    data: DataBundle
    config: TrainConfig


def build_model(config: TrainConfig, data: DataBundle) -> DF2AMModel:
    image_shape = tuple(data.dataset.images.shape[1:])
    if tuple(config.encoder.input_shape) != image_shape:
        raise ConfigError(f"encoder input_shape {config.encoder.input_shape} does not match data {image_shape}")
    encoder = replace(config.encoder, identity_count=data.train_index.identity_count)
    return DF2AMModel(encoder, config.dff, seed=config.seed)


def train_step(
    model: DF2AMModel,
    params: ParamStore,
    images: torch.Tensor,
    labels: torch.Tensor,
    weights: LossWeights,
) -> LossBreakdown:
    """Forward the batch and accumulate gradients of L_Final into ``params``."""
    k = labels.shape[0] // 2
    holder: dict[str, LossBreakdown] = {}

    def objective() -> torch.Tensor:
        holder["terms"] = final_loss(model.forward_batch(images, "train"), labels[:k], labels[k:], weights)
        return holder["terms"].final

    forward_backward(objective, params)
    return holder["terms"]


def _validation_config(config: TrainConfig) -> EvalConfig:
    per_id = config.data.samples_per_identity if config.dataset_file is None else 10 ** 9
    return replace(config.eval, repetitions=1, gallery_per_id=per_id)


def train(config: TrainConfig) -> TrainResult:
    """Optimize the joint objective; deterministic given the config (seed included)."""
    config.validate()
    configure_determinism()
    data = prepare_data(config)
    model = build_model(config, data)
    params = model.params()
    state = OptimizerState(params, config.weight_decay)
    sampler = IdentityBalancedSampler(data.train_index, config.batch, config.seed)
    out = Path(config.output_dir)
    run_log = RunLog()
    snapshot = {"config": config_to_dict(config)}
    logger.info(
        "training on %d identities, %d batches/epoch, %d epochs",
        data.train_index.identity_count, len(sampler), config.epochs,
    )

    last_good = copy.deepcopy(model.state_dict())
    step = 0
    params.zero_grad()
    for epoch in range(config.epochs):
        lr = lr_at(epoch, config)
        for batch in sampler.epoch():
            images = batch_images(data.dataset, batch.sample_ids)
            labels = torch.from_numpy(batch.labels)
            try:
                terms = train_step(model, params, images, labels, config.loss)
            except (NumericalError, NormalizationError) as exc:
                model.load_state_dict(last_good)
                saved = save_checkpoint(out / "last_good.pt", model, snapshot)
                term = exc.primitive if isinstance(exc, NumericalError) else "affinity_normalization"
                logger.error("aborting at step %d: %s", step, exc)
                raise TrainingAborted(term, step, str(saved)) from exc
            if config.grad_clip_norm is not None:
                torch.nn.utils.clip_grad_norm_([p for _, p in params.items()], config.grad_clip_norm)
            sgd_momentum_step(params, state, lr, config.momentum)
            run_log.add_step(step, epoch, lr, terms.values())
            step += 1

        if data.validation is not None:
            report = evaluate(model, data.dataset, data.validation, _validation_config(config), config.seed)
            run_log.add_epoch(epoch, report)
        recent = run_log.steps[-len(sampler):]
        logger.info(
            "epoch %d lr=%.4g mean L_Final=%.4f", epoch, lr,
            sum(row["loss_final"] for row in recent) / len(recent),
        )
        last_good = copy.deepcopy(model.state_dict())
        if config.checkpoint_interval and (epoch + 1) % config.checkpoint_interval == 0:
            save_checkpoint(out / f"checkpoint_epoch{epoch + 1}.pt", model, snapshot)

    checkpoint = save_checkpoint(out / "checkpoint.pt", model, snapshot)
    run_log.save(out)
    return TrainResult(model, run_log, checkpoint, data, config)


MODULE_SETTINGS = {
    "B": (1.0, False, False),
    "B+DF2": (1.0, True, False),
    "B+AM": (1.0, False, True),
    "DF2+AM": (0.0, True, True),
    "B+DF2+AM": (1.0, True, True),
}


def apply_axis(config: TrainConfig, axis: str, value: str) -> TrainConfig:
    """Return ``config`` with one ablation coordinate set."""
    value = str(value).replace("²", "2")
    if axis == "P":
        return replace(config, dff=replace(config.dff, parts=int(value)))
    if axis == "lambda":
        return replace(config, loss=replace(config.loss, lam=float(value)))
    if axis == "zeta":
        return replace(config, loss=replace(config.loss, zeta=float(value)))
    if axis == "margin_vs_delta":
        match = re.fullmatch(r"(margin|l1):([0-9.eE+-]+)", value)
        if not match:
            raise ConfigError(f"margin_vs_delta values look like 'margin:0.6' or 'l1:2.0', got '{value}'")
        kind, amount = match.group(1), float(match.group(2))
        loss = replace(config.loss, affinity_loss=kind, **({"margin": amount} if kind == "margin" else {"delta": amount}))
        return replace(config, loss=loss)
    if axis == "NM":
        match = re.fullmatch(r"(\d+)x(\d+)", value)
        if not match:
            raise ConfigError(f"NM values look like '8x4', got '{value}'")
        return replace(config, batch=BatchSpec(int(match.group(1)), int(match.group(2))))
    if axis == "modules":
        if value not in MODULE_SETTINGS:
            raise ConfigError(f"modules value '{value}' not in {sorted(MODULE_SETTINGS)}")
        baseline, with_dff, with_am = MODULE_SETTINGS[value]
        loss = replace(
            config.loss,
            baseline=baseline,
            lam=config.loss.lam if with_dff else 0.0,
            zeta=config.loss.zeta if with_am else 0.0,
        )
        embedding = config.eval.embedding if with_dff else "global"
        return replace(config, loss=loss, eval=replace(config.eval, embedding=embedding))
    raise ConfigError(f"unknown ablation axis '{axis}', expected one of {AXES}")


def _slug(value: str) -> str:
    return re.sub(r"[^A-Za-z0-9.]+", "-", str(value)).strip("-")


def ablate(
    base: TrainConfig,
    axis: str,
    values: Sequence[str],
    seeds: Sequence[int] = (0,),
    out_dir: Optional[Path] = None,
) -> list[dict]:
    """Train and test one model per (value, seed); one CSV row per value (seed means).

    Each run also leaves ``trial_<axis>_<value>_seed<s>.json`` for the analyzer.
    """
    if axis not in AXES:
        raise ConfigError(f"unknown ablation axis '{axis}', expected one of {AXES}")
    out = Path(out_dir or base.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for value in values:
        trials = []
        for seed in seeds:
            run_dir = out / f"{axis}_{_slug(value)}_seed{seed}"
            config = replace(apply_axis(base, axis, value), seed=seed, output_dir=str(run_dir))
            result = train(config)
            report = evaluate(result.model, result.data.dataset, result.data.test, config.eval, seed)
            report.save(run_dir / "metrics.json")
            trial = {
                "axis": axis, "setting": str(value), "seed": seed, "mAP": report.mAP,
                **{f"rank{k}": v for k, v in report.cmc.items()},
            }
            (out / f"trial_{axis}_{_slug(value)}_seed{seed}.json").write_text(json.dumps(trial, indent=2) + "\n")
            trials.append(trial)
            logger.info("ablation %s=%s seed=%d: mAP=%.4f rank1=%.4f", axis, value, seed, report.mAP, report.rank1)
        row = {"axis": axis, "value": str(value), "seeds": len(trials)}
        for key in ABLATION_COLUMNS[3:]:
            row[key] = float(np.mean([t[key] for t in trials]))
        rows.append(row)

    with open(out / "ablation.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=ABLATION_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    return rows
