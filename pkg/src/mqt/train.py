"""Training loop, evaluation, checkpointing and model-level gradient checks."""

from __future__ import annotations

import dataclasses
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import serialization
from .losses import LossWeights, task_loss, total_loss
from .metrics import (
    angular_errors,
    confusion_matrix,
    metric_maxf,
    metric_odsf,
    miou_from_confusion,
)
from .model import ConfigError, MQTConfig, MQTransformer, TaskSpec
from .synth import SyntheticScene, augment, generate_scene, read_dataset
from .tensor import ContractError, Tensor, add_sum, backward, default_dtype, no_grad, scale, sigmoid

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "mqt-checkpoint/1"


class CheckpointError(ValueError):
    """Checkpoint does not fit the requested model or run."""


@dataclass
class RunConfig:
    model: MQTConfig = field(default_factory=MQTConfig)
    tasks: list[TaskSpec] = field(
        default_factory=lambda: [TaskSpec("seg", "seg", 3), TaskSpec("depth", "depth")]
    )
    lr: float = 1e-4
    weight_decay: float = 5e-4
    momentum: float = 0.9
    iterations: int = 1000
    batch_size: int = 4
    seed: int = 0
    loss_weights: LossWeights = field(default_factory=LossWeights)
    data_dir: str | None = None
    checkpoint: str | None = None
    checkpoint_every: int = 0
    log_every: int = 100
    augment: bool = False
    dtype: str = "float32"
    # Used when data_dir is None: scenes generated in memory.
    synthetic_count: int = 8
    synthetic_seed: int = 0
    synthetic_classes: int = 3

    def validate(self) -> None:
        if not self.tasks:
            raise ConfigError("at least one task is required")
        if self.model.TN != len(self.tasks):
            raise ConfigError(f"model TN={self.model.TN} but {len(self.tasks)} tasks configured")
        if self.lr <= 0 or self.iterations < 0 or self.batch_size < 1:
            raise ConfigError("lr must be positive, iterations >= 0 and batch_size >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        self.model.validate()

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "tasks": [dataclasses.asdict(t) for t in self.tasks],
            "loss_weights": dataclasses.asdict(self.loss_weights),
            **{
                f.name: getattr(self, f.name)
                for f in dataclasses.fields(self)
                if f.name not in ("model", "tasks", "loss_weights")
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown run config keys: {sorted(unknown)}")
        tasks = [TaskSpec(**t) for t in d.pop("tasks", [])] or None
        model = d.pop("model", {})
        if tasks is not None:
            model = {"TN": len(tasks), **model}
        weights = d.pop("loss_weights", {})
        kinds = {t.kind for t in tasks} if tasks else None
        cfg = cls(
            model=MQTConfig.from_dict(model),
            loss_weights=LossWeights.from_dict(weights, kinds),
            **d,
        )
        if tasks is not None:
            cfg.tasks = tasks
        return cfg

    @classmethod
    def from_json(cls, path: str | os.PathLike) -> "RunConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class TrainState:
    step: int
    model: MQTransformer
    momentum: dict[str, np.ndarray]
    loss_trace: list[float] = field(default_factory=list)
    metrics: dict | None = None


def init_state(model: MQTransformer) -> TrainState:
    return TrainState(0, model, {n: np.zeros_like(p.data) for n, p in model.named_parameters().items()})


def sgd_step(params: dict[str, Tensor], momentum: dict[str, np.ndarray], lr: float, weight_decay: float, mu: float) -> None:
    """v <- mu * v + grad + wd * theta;  theta <- theta - lr * v  (in place)."""
    missing = [n for n, p in params.items() if p.grad is None]
    if missing:
        raise ContractError(f"no gradient for trainable parameters {missing[:5]}")
    for name, p in params.items():
        v = momentum.get(name)
        if v is None:
            v = np.zeros_like(p.data)
        v = mu * v + p.grad + weight_decay * p.data
        momentum[name] = v.astype(p.data.dtype, copy=False)
        p.data = (p.data - lr * momentum[name]).astype(p.data.dtype, copy=False)


# --- data --------------------------------------------------------------------


def load_scenes(cfg: RunConfig) -> list[SyntheticScene]:
    if cfg.data_dir:
        return read_dataset(cfg.data_dir)
    return [
        generate_scene(cfg.synthetic_seed + i, cfg.model.image_h, cfg.model.image_w, cfg.synthetic_classes)
        for i in range(cfg.synthetic_count)
    ]


def check_tasks(tasks: Sequence[TaskSpec], scenes: Sequence[SyntheticScene], image_hw=None) -> None:
    if not scenes:
        raise ConfigError("dataset is empty")
    for t in tasks:
        if t.kind == "partseg":
            raise ConfigError(f"task {t.name!r}: synthetic scenes carry no part labels")
        if t.kind == "seg" and t.classes < max(s.num_classes for s in scenes):
            raise ConfigError(f"task {t.name!r} has {t.classes} classes but data uses {scenes[0].num_classes}")
    if image_hw is not None:
        for s in scenes:
            if s.shape != tuple(image_hw):
                raise ConfigError(f"scene {s.seed} is {s.shape}, model expects {tuple(image_hw)}")


def batch_indices(seed: int, step: int, batch_size: int, n: int) -> list[int]:
    """Sample positions step*B .. step*B+B-1 of a stream of seeded per-epoch permutations."""
    out = []
    for pos in range(step * batch_size, (step + 1) * batch_size):
        epoch, offset = divmod(pos, n)
        out.append(int(np.random.default_rng([seed, epoch]).permutation(n)[offset]))
    return out


def _augment_seed(seed: int, step: int, j: int) -> int:
    return int(np.random.SeedSequence([seed, step, j]).generate_state(1)[0])


def scene_loss(model: MQTransformer, scene: SyntheticScene, weights: LossWeights) -> Tensor:
    preds = model(scene.image.astype(model.dtype))
    per_kind = {}
    for spec in model.tasks:
        per_kind[spec.kind] = task_loss(spec.kind, preds[spec.name], scene.target(spec.kind), scene.valid)
    return total_loss(per_kind, weights)


# --- training ------------------------------------------------------------------


def train(
    cfg: RunConfig,
    scenes: Sequence[SyntheticScene] | None = None,
    state: TrainState | None = None,
    until: int | None = None,
    on_step: Callable[[TrainState], None] | None = None,
) -> TrainState:
    """Run SGD from ``state`` (or a fresh model) up to ``until`` (default cfg.iterations)."""
    cfg.validate()
    scenes = list(scenes) if scenes is not None else load_scenes(cfg)
    check_tasks(cfg.tasks, scenes, (cfg.model.image_h, cfg.model.image_w))
    dtype = np.float64 if cfg.dtype == "float64" else np.float32
    if state is None:
        state = init_state(MQTransformer(cfg.model, cfg.tasks, seed=cfg.seed, dtype=dtype))
    elif [dataclasses.asdict(t) for t in state.model.tasks] != [dataclasses.asdict(t) for t in cfg.tasks]:
        raise CheckpointError("resumed state was trained on a different task list")
    model = state.model
    params = model.named_parameters()
    stop = cfg.iterations if until is None else until
    n = len(scenes)
    while state.step < stop:
        idx = batch_indices(cfg.seed, state.step, cfg.batch_size, n)
        batch = [scenes[i] for i in idx]
        if cfg.augment:
            batch = [
                augment(s, seed=_augment_seed(cfg.seed, state.step, j), pad=True) for j, s in enumerate(batch)
            ]
        model.zero_grad()
        with default_dtype(dtype):
            loss = scale(add_sum([scene_loss(model, s, cfg.loss_weights) for s in batch]), 1.0 / len(batch))
            backward(loss)
        sgd_step(params, state.momentum, cfg.lr, cfg.weight_decay, cfg.momentum)
        state.loss_trace.append(float(loss.data))
        state.step += 1
        if cfg.log_every and state.step % cfg.log_every == 0:
            logger.info("step %d loss %.6f", state.step, state.loss_trace[-1])
        if cfg.checkpoint and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
            save_checkpoint(cfg.checkpoint, state, cfg)
        if on_step is not None:
            on_step(state)
    if cfg.checkpoint:
        save_checkpoint(cfg.checkpoint, state, cfg)
    return state


# --- evaluation ------------------------------------------------------------------


def predict(model: MQTransformer, image: np.ndarray) -> dict[str, np.ndarray]:
    with no_grad(), default_dtype(model.dtype):
        preds = model(np.asarray(image, dtype=model.dtype))
        out = {}
        for spec in model.tasks:
            y = preds[spec.name]
            if spec.kind in ("edge", "sal"):
                y = sigmoid(y)
            out[spec.name] = y.data
    return out


def evaluate(model: MQTransformer, scenes: Sequence[SyntheticScene]) -> dict[str, dict[str, float]]:
    """Dataset-level metrics per task: {task: {metric: value}}."""
    if not scenes:
        raise ContractError("cannot evaluate on an empty dataset")
    check_tasks(model.tasks, scenes)
    acc: dict[str, list] = {t.name: [] for t in model.tasks}
    conf = {t.name: np.zeros((t.classes, t.classes), dtype=np.int64) for t in model.tasks if t.kind == "seg"}
    for scene in scenes:
        preds = predict(model, scene.image)
        for spec in model.tasks:
            y = preds[spec.name]
            if spec.kind == "seg":
                conf[spec.name] += confusion_matrix(y.argmax(axis=-1), scene.seg, spec.classes)
            elif spec.kind == "depth":
                acc[spec.name].append((y[..., 0].astype(np.float64) - scene.depth).ravel())
            elif spec.kind == "normals":
                acc[spec.name].append(angular_errors(y, scene.normals).ravel())
            else:
                acc[spec.name].append((y[..., 0], scene.target(spec.kind)))
    report: dict[str, dict[str, float]] = {}
    for spec in model.tasks:
        vals = acc[spec.name]
        if spec.kind == "seg":
            report[spec.name] = {"mIoU": miou_from_confusion(conf[spec.name])}
        elif spec.kind == "depth":
            d = np.concatenate(vals)
            report[spec.name] = {"rmse": float(np.sqrt(np.mean(d * d)))}
        elif spec.kind == "normals":
            report[spec.name] = {"mErr": float(np.mean(np.concatenate(vals)))}
        elif spec.kind == "sal":
            scores = np.concatenate([s.ravel() for s, _ in vals])
            gts = np.concatenate([g.ravel() for _, g in vals])
            report[spec.name] = {"maxF": metric_maxf(scores, gts)}
        elif spec.kind == "edge":
            report[spec.name] = {"odsF": metric_odsf([s for s, _ in vals], [g for _, g in vals])}
    return report


def format_report(report: dict[str, dict[str, float]]) -> str:
    return "\n".join(f"{task} {metric} {value:.6f}" for task, ms in report.items() for metric, value in ms.items())


# --- checkpoints -------------------------------------------------------------------


def _tasks_header(tasks: Iterable[TaskSpec]) -> list[dict]:
    return [dataclasses.asdict(t) for t in tasks]


def checkpoint_bytes(state: TrainState, cfg: RunConfig | None = None) -> bytes:
    model = state.model
    header = {
        "format": CHECKPOINT_FORMAT,
        "model": model.config.to_dict(),
        "tasks": _tasks_header(model.tasks),
        "dtype": np.dtype(model.dtype).name,
        "step": state.step,
        "loss_trace": state.loss_trace,
        "run": cfg.to_dict() if cfg is not None else None,
    }
    tensors = {f"param/{n}": p.data for n, p in model.named_parameters().items()}
    tensors.update({f"momentum/{n}": v for n, v in state.momentum.items()})
    return serialization.dumps(tensors, header)


def save_checkpoint(path: str | os.PathLike, state: TrainState, cfg: RunConfig | None = None) -> None:
    blob = checkpoint_bytes(state, cfg)
    tmp = f"{os.fspath(path)}.tmp"
    Path(tmp).write_bytes(blob)
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike, tasks: Sequence[TaskSpec] | None = None) -> tuple[TrainState, dict]:
    """Rebuild the training state; raises before touching any model on mismatch."""
    tensors, header = serialization.load(path)
    if not header or header.get("format") != CHECKPOINT_FORMAT:
        raise serialization.FormatError(f"{path} is not an MQT checkpoint")
    stored_tasks = [TaskSpec(**t) for t in header["tasks"]]
    if tasks is not None and _tasks_header(tasks) != header["tasks"]:
        raise CheckpointError(
            f"checkpoint tasks {[t.name for t in stored_tasks]} incompatible with {[t.name for t in tasks]}"
        )
    config = MQTConfig.from_dict(header["model"])
    model = MQTransformer(config, stored_tasks, dtype=np.dtype(header["dtype"]).type)
    params = {k[len("param/") :]: v for k, v in tensors.items() if k.startswith("param/")}
    momentum = {k[len("momentum/") :]: v.copy() for k, v in tensors.items() if k.startswith("momentum/")}
    model.load_state_dict(params)
    state = TrainState(int(header["step"]), model, momentum, list(header["loss_trace"]))
    return state, header


# --- gradient check ------------------------------------------------------------------


@dataclass
class GradcheckReport:
    tolerance: float
    per_tensor: dict[str, float]
    per_group: dict[str, float]

    @property
    def passed(self) -> bool:
        return all(v < self.tolerance for v in self.per_group.values())

    def failing_groups(self) -> list[str]:
        return [g for g, v in self.per_group.items() if not v < self.tolerance]

    def format(self) -> str:
        lines = [f"{'group':<12}{'max rel err':>14}  status"]
        for g, v in self.per_group.items():
            lines.append(f"{g:<12}{v:>14.3e}  {'ok' if v < self.tolerance else 'FAIL'}")
        return "\n".join(lines)


def gradcheck_config() -> tuple[MQTConfig, list[TaskSpec]]:
    cfg = MQTConfig(TN=2, S=2, N=8, C=16, D=1, num_heads=4, image_h=16, image_w=16)
    return cfg, [TaskSpec("seg", "seg", 3), TaskSpec("depth", "depth")]


def gradcheck(
    config: MQTConfig | None = None,
    tasks: Sequence[TaskSpec] | None = None,
    tolerance: float = 1e-5,
    samples: int = 32,
    seed: int = 0,
    rel_step: float = 1e-4,
) -> GradcheckReport:
    """Compare analytic gradients with central differences in float64.

    Relative error of a tensor is ||g_analytic - g_numeric|| / max(||g_analytic||, ||g_numeric||)
    over the sampled coordinates; a group reports the max over its tensors.
    """
    if config is None:
        config, default_tasks = gradcheck_config()
        tasks = tasks or default_tasks
    if tasks is None:
        raise ConfigError("tasks are required with an explicit config")
    with default_dtype(np.float64):
        model = MQTransformer(config, tasks, seed=seed, dtype=np.float64)
        rng = np.random.default_rng(seed + 1)
        scene = generate_scene(seed, config.image_h, config.image_w, max([t.classes for t in tasks] + [2]))
        image = scene.image.astype(np.float64) + 0.05 * rng.standard_normal(scene.image.shape)
        scene = dataclasses.replace(scene, image=image)
        weights = LossWeights()

        def loss_value() -> float:
            with no_grad():
                return float(scene_loss(model, scene, weights).data)

        model.zero_grad()
        backward(scene_loss(model, scene, weights))
        per_tensor = {}
        for name, p in model.named_parameters().items():
            flat = p.data.reshape(-1)
            count = min(samples, flat.size)
            coords = rng.choice(flat.size, size=count, replace=False)
            analytic = p.grad.reshape(-1)[coords]
            numeric = np.empty(count)
            for j, i in enumerate(coords):
                orig = flat[i]
                h = rel_step * max(1.0, abs(orig))
                flat[i] = orig + h
                up = loss_value()
                flat[i] = orig - h
                down = loss_value()
                flat[i] = orig
                numeric[j] = (up - down) / (2 * h)
            scale_ = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
            per_tensor[name] = float(np.linalg.norm(analytic - numeric) / scale_) if scale_ > 0 else 0.0
    per_group: dict[str, float] = {}
    for name, err in per_tensor.items():
        group = name.split(".", 1)[0]
        per_group[group] = max(per_group.get(group, 0.0), err)
    return GradcheckReport(tolerance, per_tensor, per_group)
