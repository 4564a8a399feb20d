"""Two-stage optimization: supervised teacher pretraining with an auxiliary
descriptor head, then alternating discriminator/student updates against the
frozen teacher.

Stage 1 jointly minimizes cross-entropy on the teacher's backbone logits and
on the auxiliary head fed by the squeezed descriptors; the auxiliary head is
dropped from the returned model.  Stage 2 walks each training batch once,
taking one discriminator minimization step and then one student minimization
step (counts configurable via ``steps_ratio``).  Everything is SGD with
momentum, milestone learning-rate decay, and decoupled weight decay.

All randomness derives from the run seed through tagged streams, so a given
config is bitwise reproducible and checkpoints written at epoch boundaries
resume exactly.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .attention import build_estimators, descriptor_width, squeeze_all
from .data import (
    AugmentPolicy,
    DatasetSpec,
    derive_rng,
    epoch_batches,
    load_datasets,
)
from .losses import (
    ROLE_DISCRIMINATOR,
    ROLE_STUDENT,
    LossWeights,
    NonFiniteLossError,
    adversarial_losses,
    backbone_loss,
    intermediate_loss,
    total_loss,
)
from .metrics import RunMetrics, evaluate_top1
from .nets import (
    Backbone,
    BackboneSpec,
    build_aux_head,
    build_backbone,
    build_discriminator,
    name_parameters,
)
from .tensor import Tensor, concat, cross_entropy

# seed-stream tags for network initialization
TAG_TEACHER = 1
TAG_TEACHER_ATTN = 2
TAG_AUX = 3
TAG_STUDENT = 4
TAG_STUDENT_ATTN = 5
TAG_DISCRIMINATOR = 6

FULL_MASK = frozenset({"b", "adv", "is"})


class DivergenceError(RuntimeError):
    """Training hit a non-finite loss; names the offending component."""

    def __init__(self, part, message):
        super().__init__(message)
        self.part = part


class CheckpointError(ValueError):
    """A checkpoint file is malformed or incompatible with the config."""


# -- configuration -------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    """All hyperparameters of a run plus the task and architecture sizes."""

    stage: str = "student"  # teacher | student
    epochs: int = 30
    teacher_epochs: int | None = None  # stage-1 budget for ablations; None: same
    batch_size: int = 64
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_teacher: float = 0.1
    lr_student: float = 0.1
    lr_discriminator: float = 1e-3
    lr_milestones: tuple | None = None  # None: 40% and 80% of epochs
    lr_decay_factor: float = 0.1
    weights: LossWeights = LossWeights()
    loss_mask: frozenset = FULL_MASK
    steps_ratio: tuple = (1, 1)  # (student steps, discriminator steps) per batch
    seed: int = 0
    precision: str = "float32"  # float32 | float64
    dataset: DatasetSpec = DatasetSpec()
    augment: AugmentPolicy = AugmentPolicy(pad=2)
    teacher_channels: tuple = (8, 16, 32)
    teacher_layers: tuple = (3, 3, 3)
    student_channels: tuple = (8, 16, 32)
    student_layers: tuple = (1, 1, 1)

    def __post_init__(self):
        object.__setattr__(self, "teacher_channels", tuple(int(v) for v in self.teacher_channels))
        object.__setattr__(self, "teacher_layers", tuple(int(v) for v in self.teacher_layers))
        object.__setattr__(self, "student_channels", tuple(int(v) for v in self.student_channels))
        object.__setattr__(self, "student_layers", tuple(int(v) for v in self.student_layers))
        object.__setattr__(self, "loss_mask", frozenset(self.loss_mask))
        object.__setattr__(self, "steps_ratio", tuple(int(v) for v in self.steps_ratio))
        if self.lr_milestones is not None:
            object.__setattr__(self, "lr_milestones", tuple(int(v) for v in self.lr_milestones))
        self.validate()

    def validate(self):
        if self.stage not in ("teacher", "student"):
            raise ValueError(f"stage must be teacher or student, got {self.stage!r}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.teacher_epochs is not None and self.teacher_epochs < 0:
            raise ValueError(f"teacher_epochs must be >= 0, got {self.teacher_epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        for name in ("lr_teacher", "lr_student", "lr_discriminator", "lr_decay_factor"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0, got {getattr(self, name)}")
        if self.lr_milestones is not None:
            ms = self.lr_milestones
            if any(m2 <= m1 for m1, m2 in zip(ms, ms[1:])):
                raise ValueError(f"lr_milestones must be strictly increasing, got {ms}")
            if ms and (ms[0] < 1 or ms[-1] >= self.epochs):
                raise ValueError(
                    f"lr_milestones must lie in [1, epochs), got {ms} for {self.epochs} epochs"
                )
        if not self.loss_mask <= FULL_MASK:
            raise ValueError(
                f"loss_mask entries must be within {sorted(FULL_MASK)}, got {sorted(self.loss_mask)}"
            )
        if len(self.steps_ratio) != 2 or any(v < 1 for v in self.steps_ratio):
            raise ValueError(f"steps_ratio must be two counts >= 1, got {self.steps_ratio}")
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"precision must be float32 or float64, got {self.precision!r}")
        if len(self.teacher_channels) != len(self.teacher_layers):
            raise ValueError("teacher channels/layers lengths differ")
        if len(self.student_channels) != len(self.student_layers):
            raise ValueError("student channels/layers lengths differ")
        if len(self.teacher_channels) != len(self.student_channels):
            raise ValueError("teacher and student must have the same number of blocks")

    @property
    def dtype(self):
        return np.float32 if self.precision == "float32" else np.float64

    def milestones(self):
        if self.lr_milestones is not None:
            return self.lr_milestones
        auto = (int(0.4 * self.epochs), int(0.8 * self.epochs))
        out = []
        for m in auto:
            if 1 <= m < self.epochs and (not out or m > out[-1]):
                out.append(m)
        return tuple(out)

    def teacher_spec(self) -> BackboneSpec:
        return BackboneSpec(
            num_blocks=len(self.teacher_channels),
            channels_per_block=self.teacher_channels,
            layers_per_block=self.teacher_layers,
            num_classes=self.dataset.num_classes,
            input_shape=self.dataset.image_size,
        )

    def student_spec(self) -> BackboneSpec:
        return BackboneSpec(
            num_blocks=len(self.student_channels),
            channels_per_block=self.student_channels,
            layers_per_block=self.student_layers,
            num_classes=self.dataset.num_classes,
            input_shape=self.dataset.image_size,
        )

    # -- flat key=value form (config files, hashing) --------------------------------

    def to_flat(self) -> dict:
        w = self.weights
        d = self.dataset
        a = self.augment
        return {
            "stage": self.stage,
            "seed": str(self.seed),
            "epochs": str(self.epochs),
            "teacher_epochs": "auto" if self.teacher_epochs is None else str(self.teacher_epochs),
            "batch_size": str(self.batch_size),
            "momentum": repr(self.momentum),
            "weight_decay": repr(self.weight_decay),
            "lr_teacher": repr(self.lr_teacher),
            "lr_student": repr(self.lr_student),
            "lr_discriminator": repr(self.lr_discriminator),
            "lr_milestones": "auto" if self.lr_milestones is None
            else ",".join(str(m) for m in self.lr_milestones),
            "lr_decay_factor": repr(self.lr_decay_factor),
            "lambda1": repr(w.lambda1),
            "lambda2": repr(w.lambda2),
            "lambda3": repr(w.lambda3),
            "mu": repr(w.mu),
            "loss_mask": ",".join(k for k in ("b", "adv", "is") if k in self.loss_mask),
            "steps_ratio": f"{self.steps_ratio[0]}:{self.steps_ratio[1]}",
            "precision": self.precision,
            "dataset.kind": d.kind,
            "dataset.path": d.path,
            "dataset.classes": str(d.num_classes),
            "dataset.image_size": ",".join(str(v) for v in d.image_size),
            "dataset.train_samples": str(d.train_samples),
            "dataset.test_samples": str(d.test_samples),
            "dataset.noise": repr(d.noise),
            "dataset.jitter": str(d.jitter),
            "dataset.task_seed": str(d.task_seed),
            "augment.pad": str(a.pad),
            "augment.hflip_prob": repr(a.hflip_prob),
            "augment.enabled": "true" if a.enabled else "false",
            "teacher.channels": ",".join(str(v) for v in self.teacher_channels),
            "teacher.layers": ",".join(str(v) for v in self.teacher_layers),
            "student.channels": ",".join(str(v) for v in self.student_channels),
            "student.layers": ",".join(str(v) for v in self.student_layers),
        }

    @classmethod
    def from_flat(cls, flat: dict) -> "TrainConfig":
        def ints(s):
            return tuple(int(v) for v in s.split(",") if v.strip() != "")

        known = set(cls().to_flat().keys())
        unknown = set(flat.keys()) - known
        if unknown:
            raise ValueError(f"unknown config key {sorted(unknown)[0]!r}")
        base = cls().to_flat()
        base.update(flat)
        mask = frozenset(v for v in base["loss_mask"].split(",") if v)
        s_ratio = base["steps_ratio"].split(":")
        if len(s_ratio) != 2:
            raise ValueError(f"steps_ratio must look like '1:1', got {base['steps_ratio']!r}")
        if base["augment.enabled"] not in ("true", "false"):
            raise ValueError(
                f"augment.enabled must be 'true' or 'false', got {base['augment.enabled']!r}"
            )
        return cls(
            stage=base["stage"],
            seed=int(base["seed"]),
            epochs=int(base["epochs"]),
            teacher_epochs=None if base["teacher_epochs"] == "auto"
            else int(base["teacher_epochs"]),
            batch_size=int(base["batch_size"]),
            momentum=float(base["momentum"]),
            weight_decay=float(base["weight_decay"]),
            lr_teacher=float(base["lr_teacher"]),
            lr_student=float(base["lr_student"]),
            lr_discriminator=float(base["lr_discriminator"]),
            lr_milestones=None if base["lr_milestones"] == "auto" else ints(base["lr_milestones"]),
            lr_decay_factor=float(base["lr_decay_factor"]),
            weights=LossWeights(
                lambda1=float(base["lambda1"]),
                lambda2=float(base["lambda2"]),
                lambda3=float(base["lambda3"]),
                mu=float(base["mu"]),
            ),
            loss_mask=mask,
            steps_ratio=(int(s_ratio[0]), int(s_ratio[1])),
            precision=base["precision"],
            dataset=DatasetSpec(
                kind=base["dataset.kind"],
                path=base["dataset.path"],
                num_classes=int(base["dataset.classes"]),
                image_size=ints(base["dataset.image_size"]),
                train_samples=int(base["dataset.train_samples"]),
                test_samples=int(base["dataset.test_samples"]),
                noise=float(base["dataset.noise"]),
                jitter=int(base["dataset.jitter"]),
                task_seed=int(base["dataset.task_seed"]),
            ),
            augment=AugmentPolicy(
                pad=int(base["augment.pad"]),
                hflip_prob=float(base["augment.hflip_prob"]),
                enabled=base["augment.enabled"] == "true",
            ),
            teacher_channels=ints(base["teacher.channels"]),
            teacher_layers=ints(base["teacher.layers"]),
            student_channels=ints(base["student.channels"]),
            student_layers=ints(base["student.layers"]),
        )

    def config_hash(self) -> str:
        canonical = "\n".join(f"{k} = {v}" for k, v in sorted(self.to_flat().items()))
        return hashlib.sha256(canonical.encode()).hexdigest()

    def arch_hash(self) -> str:
        """Hash of the keys a teacher checkpoint must agree on to be loadable."""
        flat = self.to_flat()
        arch_keys = [k for k in flat if k.startswith(("dataset.", "teacher.", "student."))]
        arch_keys.append("precision")
        canonical = "\n".join(f"{k} = {flat[k]}" for k in sorted(arch_keys))
        return hashlib.sha256(canonical.encode()).hexdigest()


# -- SGD -------------------------------------------------------------------------------


def sgd_step(param, grad, velocity, lr, momentum, weight_decay):
    """One in-place momentum-SGD update:

    ``v <- momentum*v + grad + weight_decay*param``, ``param <- param - lr*v``.
    """
    velocity *= momentum
    velocity += grad
    if weight_decay:
        velocity += weight_decay * param
    param -= lr * velocity
    return param


class SGD:
    """Momentum SGD over a parameter list; one velocity buffer per parameter."""

    def __init__(self, params, lr, momentum=0.9, weight_decay=1e-4):
        self.params = list(params)
        if len({id(p) for p in self.params}) != len(self.params):
            raise ValueError("duplicate parameter passed to SGD")
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocities = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        for p, v in zip(self.params, self.velocities):
            if p.grad is None:
                continue
            sgd_step(p.data, p.grad, v, self.lr, self.momentum, self.weight_decay)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def velocity_state(self, prefix):
        return {f"{prefix}.velocity.{p.name}": v for p, v in zip(self.params, self.velocities)}

    def load_velocity_state(self, arrays, prefix):
        for p, v in zip(self.params, self.velocities):
            key = f"{prefix}.velocity.{p.name}"
            if key not in arrays:
                raise CheckpointError(f"checkpoint is missing optimizer state {key!r}")
            src = arrays[key]
            if src.shape != v.shape or src.dtype != v.dtype:
                raise CheckpointError(f"optimizer state {key!r} has wrong shape/dtype")
            v[...] = src


def lr_at(epoch, base_lr, milestones, factor):
    """Learning rate after applying the decay at every milestone <= epoch."""
    passed = sum(1 for m in milestones if epoch >= m)
    return base_lr * factor**passed


# -- checkpoint container ----------------------------------------------------------------

CKPT_MAGIC = b"SQKD1\x00"


def save_checkpoint(path, arrays: dict, meta: dict):
    """Binary checkpoint: JSON header + raw little-endian array payload."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    blobs = []
    offset = 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        blob = le.tobytes()
        entries.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "dtype": str(arr.dtype),
                "offset": offset,
                "nbytes": len(blob),
            }
        )
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"format_version": 1, "meta": meta, "tensors": entries},
                        sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path):
    path = Path(path)
    raw = path.read_bytes()
    if not raw.startswith(CKPT_MAGIC):
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    (header_len,) = struct.unpack("<Q", raw[len(CKPT_MAGIC) : len(CKPT_MAGIC) + 8])
    header_start = len(CKPT_MAGIC) + 8
    try:
        header = json.loads(raw[header_start : header_start + header_len])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path} has a malformed header: {exc}") from exc
    payload = raw[header_start + header_len :]
    arrays = {}
    for entry in header["tensors"]:
        start, n = entry["offset"], entry["nbytes"]
        if start + n > len(payload):
            raise CheckpointError(f"{path} payload truncated at {entry['name']!r}")
        arr = np.frombuffer(payload[start : start + n], dtype=np.dtype(entry["dtype"]))
        arrays[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return header["meta"], arrays


def module_state(module, prefix):
    state = {}
    for name, p in module.named_parameters(prefix):
        state[name] = p.data
    for name, b in module.named_buffers(prefix):
        state[name] = b
    return state


def load_module_state(module, arrays, prefix):
    for name, p in module.named_parameters(prefix):
        if name not in arrays:
            raise CheckpointError(f"checkpoint is missing parameter {name!r}")
        src = arrays[name]
        if tuple(src.shape) != tuple(p.shape) or src.dtype != p.data.dtype:
            raise CheckpointError(
                f"parameter {name!r} mismatch: checkpoint {src.shape}/{src.dtype} "
                f"vs model {tuple(p.shape)}/{p.data.dtype}"
            )
        p.data = src.copy()
    for name, b in module.named_buffers(prefix):
        if name not in arrays:
            raise CheckpointError(f"checkpoint is missing buffer {name!r}")
        src = arrays[name]
        if tuple(src.shape) != tuple(b.shape) or src.dtype != b.dtype:
            raise CheckpointError(f"buffer {name!r} mismatch")
        b[...] = src


# -- stage 1: teacher ------------------------------------------------------------------


@dataclass
class TeacherArtifacts:
    """Stage-1 outputs.  The auxiliary head is kept only for diagnostics; the
    transferable model is the backbone plus its attention estimators."""

    backbone: Backbone
    estimators: object
    aux_head: object
    metrics: RunMetrics
    final_train_error: float


def _build_teacher_parts(config: TrainConfig):
    dtype = config.dtype
    backbone = build_backbone(
        config.teacher_spec(),
        int(derive_rng(config.seed, TAG_TEACHER).integers(2**32)),
        dtype=dtype,
    )
    estimators = build_estimators(
        config.teacher_channels,
        descriptor_dim=config.teacher_spec().descriptor_dim,
        out_dims=config.student_channels,
        seed=int(derive_rng(config.seed, TAG_TEACHER_ATTN).integers(2**32)),
        dtype=dtype,
    )
    aux = build_aux_head(
        descriptor_width(estimators),
        config.dataset.num_classes,
        seed=int(derive_rng(config.seed, TAG_AUX).integers(2**32)),
        dtype=dtype,
    )
    name_parameters(backbone, "teacher.backbone")
    name_parameters(estimators, "teacher.attn")
    name_parameters(aux, "teacher.aux")
    return backbone, estimators, aux


def train_teacher(config: TrainConfig, train_data, test_data=None,
                  checkpoint_dir=None, run_id=None) -> TeacherArtifacts:
    """Stage 1: fit the teacher backbone and attention estimators jointly.

    Minimizes backbone cross-entropy plus auxiliary-head cross-entropy on the
    squeezed descriptors with equal weight.  A non-finite loss aborts with a
    checkpoint of the last finite state.
    """
    backbone, estimators, aux = _build_teacher_parts(config)
    params = backbone.parameters() + estimators.parameters() + aux.parameters()
    opt = SGD(params, config.lr_teacher, config.momentum, config.weight_decay)
    milestones = config.milestones()
    run_id = run_id or f"teacher_seed{config.seed}"
    metrics = RunMetrics(run_id=run_id, seed=config.seed)
    step = 0
    for epoch in range(config.epochs):
        opt.lr = lr_at(epoch, config.lr_teacher, milestones, config.lr_decay_factor)
        backbone.train()
        epoch_parts = []
        for x, y in epoch_batches(train_data, config.batch_size, epoch, config.seed,
                                  policy=config.augment, dtype=config.dtype):
            bf = backbone(Tensor(x))
            squeezed = squeeze_all(bf, estimators)
            ce_backbone = cross_entropy(bf.logits, y)
            ce_aux = cross_entropy(aux(squeezed.concatenated), y)
            loss = ce_backbone + ce_aux
            record = {
                "step": step,
                "epoch": epoch,
                "role": "teacher_step",
                "ce_backbone": ce_backbone.item(),
                "ce_aux": ce_aux.item(),
                "total": loss.item(),
                "lr": opt.lr,
            }
            if not all(np.isfinite(v) for v in
                       (record["ce_backbone"], record["ce_aux"], record["total"])):
                part = "ce_backbone" if not np.isfinite(record["ce_backbone"]) else "ce_aux"
                if checkpoint_dir:
                    save_teacher_checkpoint(
                        Path(checkpoint_dir) / "teacher.diverged.ckpt",
                        TeacherArtifacts(backbone, estimators, aux, metrics, float("nan")),
                        config,
                    )
                raise DivergenceError(part, f"teacher loss {part} became non-finite at step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            opt.zero_grad()
            metrics.step_records.append(record)
            epoch_parts.append(record)
            step += 1
        epoch_record = {
            "epoch": epoch,
            "test_error": evaluate_top1(backbone, test_data, dtype=config.dtype)
            if test_data is not None
            else float("nan"),
            "ce_backbone": float(np.mean([r["ce_backbone"] for r in epoch_parts])),
            "ce_aux": float(np.mean([r["ce_aux"] for r in epoch_parts])),
            "lr": opt.lr,
        }
        metrics.epoch_records.append(epoch_record)
    final_train_error = evaluate_top1(backbone, train_data, dtype=config.dtype)
    metrics.summary = {
        "run_id": run_id,
        "seed": config.seed,
        "variant": "teacher",
        "stage": "teacher",
        "final_train_error": final_train_error,
        "config_hash": config.config_hash(),
    }
    if metrics.epoch_records and test_data is not None:
        metrics.summary["final_test_error"] = metrics.epoch_records[-1]["test_error"]
    artifacts = TeacherArtifacts(backbone, estimators, aux, metrics, final_train_error)
    if checkpoint_dir:
        save_teacher_checkpoint(Path(checkpoint_dir) / "teacher.ckpt", artifacts, config)
    return artifacts


def save_teacher_checkpoint(path, artifacts: TeacherArtifacts, config: TrainConfig):
    arrays = module_state(artifacts.backbone, "teacher.backbone")
    arrays.update(module_state(artifacts.estimators, "teacher.attn"))
    meta = {
        "kind": "teacher",
        "seed": config.seed,
        "arch_hash": config.arch_hash(),
        "config_hash": config.config_hash(),
        "config": config.to_flat(),
        "final_train_error": artifacts.final_train_error,
    }
    save_checkpoint(path, arrays, meta)


def load_teacher_checkpoint(path, config: TrainConfig) -> TeacherArtifacts:
    """Rebuild a frozen teacher from a stage-1 checkpoint.

    The checkpoint must have been written for the same architecture/dataset
    configuration (matching ``arch_hash``).
    """
    meta, arrays = load_checkpoint(path)
    if meta.get("kind") != "teacher":
        raise CheckpointError(f"{path} is not a teacher checkpoint")
    if meta.get("arch_hash") != config.arch_hash():
        raise CheckpointError(
            f"teacher checkpoint {path} is incompatible with this config "
            "(architecture/dataset hash mismatch)"
        )
    backbone, estimators, aux = _build_teacher_parts(config)
    load_module_state(backbone, arrays, "teacher.backbone")
    load_module_state(estimators, arrays, "teacher.attn")
    metrics = RunMetrics(run_id=f"teacher_seed{meta['seed']}", seed=meta["seed"])
    return TeacherArtifacts(backbone, estimators, aux, metrics,
                            meta.get("final_train_error", float("nan")))


# -- supervised baseline ----------------------------------------------------------------


def train_supervised(config: TrainConfig, train_data, test_data=None,
                     run_id=None) -> tuple:
    """Label-only student training (the no-teacher baseline)."""
    dtype = config.dtype
    backbone = build_backbone(
        config.student_spec(), int(derive_rng(config.seed, TAG_STUDENT).integers(2**32)), dtype=dtype
    )
    name_parameters(backbone, "student.backbone")
    opt = SGD(backbone.parameters(), config.lr_student, config.momentum, config.weight_decay)
    milestones = config.milestones()
    run_id = run_id or f"supervised_seed{config.seed}"
    metrics = RunMetrics(run_id=run_id, seed=config.seed)
    step = 0
    for epoch in range(config.epochs):
        opt.lr = lr_at(epoch, config.lr_student, milestones, config.lr_decay_factor)
        backbone.train()
        losses = []
        for x, y in epoch_batches(train_data, config.batch_size, epoch, config.seed,
                                  policy=config.augment, dtype=dtype):
            loss = cross_entropy(backbone(Tensor(x)).logits, y)
            value = loss.item()
            if not np.isfinite(value):
                raise DivergenceError("ce", f"supervised loss became non-finite at step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            opt.zero_grad()
            metrics.step_records.append(
                {"step": step, "epoch": epoch, "role": "supervised_step",
                 "ce": value, "lr": opt.lr}
            )
            losses.append(value)
            step += 1
        metrics.epoch_records.append(
            {
                "epoch": epoch,
                "test_error": evaluate_top1(backbone, test_data, dtype=dtype)
                if test_data is not None
                else float("nan"),
                "ce": float(np.mean(losses)) if losses else float("nan"),
                "lr": opt.lr,
            }
        )
    metrics.summary = {
        "run_id": run_id,
        "seed": config.seed,
        "variant": "supervised",
        "stage": "student",
        "config_hash": config.config_hash(),
    }
    if metrics.epoch_records and test_data is not None:
        metrics.summary["final_test_error"] = metrics.epoch_records[-1]["test_error"]
    return backbone, metrics


# -- stage 2: adversarial distillation -----------------------------------------------------


@dataclass
class DistillResult:
    student: Backbone
    estimators: object
    discriminator: object
    metrics: RunMetrics


_ZERO_BUNDLE_KEYS = ("l_b", "l_adv_o", "l_reg", "l_adv_c", "l_adv", "l_is", "total")


def _step_record(step, epoch, bundle, lr):
    rec = {"step": step, "epoch": epoch, "role": bundle.role}
    rec.update({k: getattr(bundle, k) for k in _ZERO_BUNDLE_KEYS})
    rec["lr"] = lr
    return rec


def train_student(config: TrainConfig, train_data, test_data, teacher: TeacherArtifacts,
                  on_step=None, on_epoch=None, checkpoint_dir=None, resume_from=None,
                  run_id=None) -> DistillResult:
    """Stage 2: alternate discriminator and student updates against a frozen teacher.

    Per batch: ``steps_ratio[1]`` discriminator minimization steps on the full
    discriminator loss, then ``steps_ratio[0]`` student steps on
    ``lambda1*L_b + lambda2*L_adv + lambda3*L_is`` (terms outside
    ``loss_mask`` are skipped and logged as zero).  The teacher runs in eval
    mode with gradients disabled throughout.
    """
    dtype = config.dtype
    mask = config.loss_mask
    if not mask:
        raise ValueError(
            "loss mask is empty; train the supervised baseline instead of distilling"
        )
    weights = config.weights
    num_classes = config.dataset.num_classes

    teacher.backbone.eval().freeze()
    teacher.estimators.eval().freeze()

    student = build_backbone(
        config.student_spec(), int(derive_rng(config.seed, TAG_STUDENT).integers(2**32)), dtype=dtype
    )
    estimators = build_estimators(
        config.student_channels,
        descriptor_dim=config.student_spec().descriptor_dim,
        seed=int(derive_rng(config.seed, TAG_STUDENT_ATTN).integers(2**32)),
        dtype=dtype,
    )
    disc = build_discriminator(
        num_classes, seed=int(derive_rng(config.seed, TAG_DISCRIMINATOR).integers(2**32)), dtype=dtype
    )
    name_parameters(student, "student.backbone")
    name_parameters(estimators, "student.attn")
    name_parameters(disc, "discriminator")

    opt_s = SGD(student.parameters() + estimators.parameters(),
                config.lr_student, config.momentum, config.weight_decay)
    opt_d = SGD(disc.parameters(), config.lr_discriminator, config.momentum,
                config.weight_decay)

    run_id = run_id or f"distill_seed{config.seed}"
    metrics = RunMetrics(run_id=run_id, seed=config.seed)
    start_epoch = 0
    step = 0
    if resume_from is not None:
        meta, arrays = load_checkpoint(resume_from)
        if meta.get("kind") != "student":
            raise CheckpointError(f"{resume_from} is not a stage-2 checkpoint")
        if meta.get("config_hash") != config.config_hash():
            raise CheckpointError(
                "resume config does not match the checkpointed run (config hash mismatch)"
            )
        load_module_state(student, arrays, "student.backbone")
        load_module_state(estimators, arrays, "student.attn")
        load_module_state(disc, arrays, "discriminator")
        opt_s.load_velocity_state(arrays, "opt_s")
        opt_d.load_velocity_state(arrays, "opt_d")
        start_epoch = int(meta["epoch"]) + 1
        step = int(meta["step"])
        metrics.epoch_records = list(meta.get("epoch_records", []))
        metrics.step_records = list(meta.get("step_records", []))

    teacher_hash_before = _hash_module_state(teacher.backbone, teacher.estimators)
    milestones = config.milestones()
    student_steps, disc_steps = config.steps_ratio

    def abort(part, exc):
        raise DivergenceError(
            part, f"loss component {part!r} became non-finite at step {step}"
        ) from exc

    for epoch in range(start_epoch, config.epochs):
        opt_s.lr = lr_at(epoch, config.lr_student, milestones, config.lr_decay_factor)
        opt_d.lr = lr_at(epoch, config.lr_discriminator, milestones, config.lr_decay_factor)
        student.train()
        estimators.train()
        epoch_student_records = []
        for x, y in epoch_batches(train_data, config.batch_size, epoch, config.seed,
                                  policy=config.augment, dtype=dtype):
            batch = Tensor(x)
            t_features = teacher.backbone(batch)
            t_squeezed = squeeze_all(t_features, teacher.estimators) if "is" in mask else None
            s_features = student(batch)
            s_squeezed = squeeze_all(s_features, estimators) if "is" in mask else None

            if "adv" in mask:
                for _ in range(disc_steps):
                    d_loss, d_parts = adversarial_losses(
                        disc, t_features.logits, s_features.logits, y, weights,
                        ROLE_DISCRIMINATOR,
                    )
                    try:
                        bundle = total_loss(ROLE_DISCRIMINATOR, weights, **d_parts_to_kwargs(d_parts))
                    except NonFiniteLossError as exc:
                        abort(exc.part, exc)
                    opt_d.zero_grad()
                    d_loss.backward()
                    record = _step_record(step, epoch, bundle, opt_d.lr)
                    if on_step is not None:
                        on_step(record, student=student, estimators=estimators,
                                discriminator=disc, teacher=teacher)
                    opt_d.step()
                    opt_d.zero_grad()
                    metrics.step_records.append(record)
                    step += 1

            for k in range(student_steps):
                if k > 0:
                    # the previous update invalidated the cached graph
                    s_features = student(batch)
                    s_squeezed = squeeze_all(s_features, estimators) if "is" in mask else None
                parts = {}
                s_loss_terms = []
                if "b" in mask:
                    l_b = backbone_loss(s_features.logits, t_features.logits.detach())
                    parts["l_b"] = l_b.item()
                    s_loss_terms.append(weights.lambda1 * l_b)
                if "adv" in mask:
                    adv_loss, adv_parts = adversarial_losses(
                        disc, t_features.logits, s_features.logits, y, weights, ROLE_STUDENT
                    )
                    parts.update(
                        l_adv_o=adv_parts["l_adv_o"],
                        l_reg=adv_parts["l_reg"],
                        l_adv_c=adv_parts["l_adv_c"],
                    )
                    s_loss_terms.append(weights.lambda2 * adv_loss)
                if "is" in mask:
                    l_is = intermediate_loss(s_squeezed, t_squeezed)
                    parts["l_is"] = l_is.item()
                    s_loss_terms.append(weights.lambda3 * l_is)
                try:
                    bundle = total_loss(ROLE_STUDENT, weights, **parts)
                except NonFiniteLossError as exc:
                    abort(exc.part, exc)
                loss = s_loss_terms[0]
                for term in s_loss_terms[1:]:
                    loss = loss + term
                opt_s.zero_grad()
                loss.backward()
                record = _step_record(step, epoch, bundle, opt_s.lr)
                if on_step is not None:
                    on_step(record, student=student, estimators=estimators,
                            discriminator=disc, teacher=teacher)
                opt_s.step()
                opt_s.zero_grad()
                metrics.step_records.append(record)
                epoch_student_records.append(record)
                step += 1

        epoch_record = {"epoch": epoch,
                        "test_error": evaluate_top1(student, test_data, dtype=dtype)}
        for key in _ZERO_BUNDLE_KEYS:
            epoch_record[key] = float(np.mean([r[key] for r in epoch_student_records]))
        epoch_record["lr_student"] = opt_s.lr
        epoch_record["lr_discriminator"] = opt_d.lr
        metrics.epoch_records.append(epoch_record)
        if on_epoch is not None:
            on_epoch(epoch, student=student, estimators=estimators, discriminator=disc)
        if checkpoint_dir is not None:
            save_student_checkpoint(
                Path(checkpoint_dir) / "student.ckpt",
                student, estimators, disc, opt_s, opt_d,
                epoch=epoch, step=step, config=config, metrics=metrics,
            )

    if _hash_module_state(teacher.backbone, teacher.estimators) != teacher_hash_before:
        raise RuntimeError("teacher state changed during stage 2")

    metrics.summary = {
        "run_id": run_id,
        "seed": config.seed,
        "variant": mask_label(mask),
        "stage": "student",
        "config_hash": config.config_hash(),
    }
    if metrics.epoch_records:
        metrics.summary["final_test_error"] = metrics.epoch_records[-1]["test_error"]
    return DistillResult(student, estimators, disc, metrics)


def d_parts_to_kwargs(parts):
    return {"l_adv_o": parts["l_adv_o"], "l_reg": parts["l_reg"], "l_adv_c": parts["l_adv_c"]}


def mask_label(mask) -> str:
    if mask is None:
        return "supervised"
    return "+".join(k for k in ("b", "adv", "is") if k in mask) or "supervised"


def _hash_module_state(*modules) -> str:
    h = hashlib.sha256()
    for m in modules:
        for name, p in m.named_parameters():
            h.update(name.encode())
            h.update(p.data.tobytes())
        for name, b in m.named_buffers():
            h.update(name.encode())
            h.update(b.tobytes())
    return h.hexdigest()


def save_student_checkpoint(path, student, estimators, disc, opt_s, opt_d, *,
                            epoch, step, config, metrics):
    arrays = module_state(student, "student.backbone")
    arrays.update(module_state(estimators, "student.attn"))
    arrays.update(module_state(disc, "discriminator"))
    arrays.update(opt_s.velocity_state("opt_s"))
    arrays.update(opt_d.velocity_state("opt_d"))
    meta = {
        "kind": "student",
        "seed": config.seed,
        "epoch": epoch,
        "step": step,
        "config_hash": config.config_hash(),
        "arch_hash": config.arch_hash(),
        "config": config.to_flat(),
        "epoch_records": metrics.epoch_records,
        "step_records": metrics.step_records,
    }
    save_checkpoint(path, arrays, meta)


# -- ablation harness ------------------------------------------------------------------

DEFAULT_VARIANTS = (
    ("supervised", None),
    ("b", frozenset({"b"})),
    ("b+is", frozenset({"b", "is"})),
    ("b+adv", frozenset({"b", "adv"})),
    ("b+adv+is", frozenset({"b", "adv", "is"})),
)


@dataclass
class AblationResult:
    rows: list  # per variant: label, errors, mean/median error
    runs: list  # every RunMetrics produced (students and teachers)

    def row(self, label):
        for r in self.rows:
            if r["label"] == label:
                return r
        raise KeyError(label)

    def table(self) -> str:
        lines = [f"{'variant':<14} {'mean err':>9} {'median err':>11}  per-seed errors"]
        for r in self.rows:
            errs = " ".join(f"{e:.4f}" for e in r["errors"])
            lines.append(
                f"{r['label']:<14} {r['mean_error']:>9.4f} {r['median_error']:>11.4f}  {errs}"
            )
        return "\n".join(lines)


def run_ablation(config: TrainConfig, variants=None, runs: int = 5,
                 on_run=None) -> AblationResult:
    """Train every loss-composition variant on ``runs`` shared seeds.

    Seed k of every variant shares the same teacher, the same synthetic data,
    and the same batch order, so differences isolate the loss composition.
    The supervised baseline is the mask-free entry; any other empty mask is
    rejected.
    """
    if variants is None:
        variants = DEFAULT_VARIANTS
    variants = [(label, None if mask is None else frozenset(mask)) for label, mask in variants]
    for label, mask in variants:
        if mask is not None and not mask:
            raise ValueError(
                f"variant {label!r} has an empty loss mask; only the supervised "
                "baseline may train without distillation losses"
            )
    if runs < 1:
        raise ValueError(f"runs must be >= 1, got {runs}")

    needs_teacher = any(mask is not None for _, mask in variants)
    errors = {label: [] for label, _ in variants}
    all_runs = []
    for r in range(runs):
        cfg_r = replace(config, seed=config.seed + r)
        train_data, test_data = load_datasets(cfg_r.dataset, cfg_r.seed)
        teacher = None
        if needs_teacher:
            teacher_cfg = replace(
                cfg_r, stage="teacher",
                epochs=cfg_r.epochs if cfg_r.teacher_epochs is None else cfg_r.teacher_epochs,
            )
            teacher = train_teacher(teacher_cfg, train_data, test_data)
            all_runs.append(teacher.metrics)
            if on_run is not None:
                on_run(teacher.metrics)
        for label, mask in variants:
            if mask is None:
                sup_cfg = replace(cfg_r, stage="student")
                _, run_metrics = train_supervised(
                    sup_cfg, train_data, test_data,
                    run_id=f"supervised_seed{cfg_r.seed}",
                )
            else:
                distill_cfg = replace(cfg_r, stage="student", loss_mask=mask)
                result = train_student(
                    distill_cfg, train_data, test_data, teacher,
                    run_id=f"{label}_seed{cfg_r.seed}",
                )
                run_metrics = result.metrics
            run_metrics.summary["variant"] = label
            final = run_metrics.summary.get("final_test_error", float("nan"))
            errors[label].append(final)
            all_runs.append(run_metrics)
            if on_run is not None:
                on_run(run_metrics)
    rows = [
        {
            "label": label,
            "errors": errors[label],
            "mean_error": float(np.mean(errors[label])),
            "median_error": float(np.median(errors[label])),
        }
        for label, _ in variants
    ]
    return AblationResult(rows=rows, runs=all_runs)


# -- desk-scale adversarial sanity harness ----------------------------------------------


def run_mean_matching(seed: int, steps: int = 500, batch_size: int = 256,
                      lr_student: float = 1e-2, lr_discriminator: float = 1e-3,
                      momentum: float = 0.9, weight_decay: float = 1e-4,
                      mu: float = 0.02) -> dict:
    """Distribution matching in miniature: a 2-layer conditional generator
    chases fixed 2-D Gaussian-mixture "teacher logits" through the full
    adversarial loss, one discriminator step then one generator step per
    alternation.

    A 2-D discriminator (hidden width 2) is a fragile learner, so the
    harness stacks the deck in known-safe ways: the mixture lives at
    logit-like magnitudes so the discriminator's gradients dwarf its weight
    penalties, the generator's output layer is scaled up so its initial
    cloud overlaps the data (no saturated scores), the discriminator's final
    layer starts at zero so the generator holds still until the score is
    informative, and ``mu`` is kept small because the sum-form L1+L2 penalty
    overwhelms a 21-parameter network at mu=1.

    Returns the generator-vs-mixture mean distance at initialization and
    after ``steps`` alternating updates.
    """
    component_means = np.array([[6.0, 12.0], [12.0, 6.0]])
    component_std = 2.0
    num_classes = 2
    noise_dim = 16
    hidden = 32
    generator_output_scale = 15.0
    mixture_mean = component_means.mean(axis=0)

    rng = derive_rng(seed, 71)
    from .nets import Dense, Module
    from .tensor import relu

    class Generator(Module):
        def __init__(self):
            super().__init__()
            self.fc1 = Dense(noise_dim + num_classes, hidden, rng=rng)
            self.fc2 = Dense(hidden, 2, rng=rng)
            self.fc2.weight.data *= generator_output_scale

        def forward(self, z):
            return self.fc2(relu(self.fc1(z)))

    gen = Generator()
    name_parameters(gen, "generator")
    disc = build_discriminator(num_classes=num_classes, input_dim=2,
                               seed=int(derive_rng(seed, 72).integers(2**32)))
    disc.fc3.weight.data[:] = 0.0
    disc.fc3.bias.data[:] = 0.0
    opt_g = SGD(gen.parameters(), lr_student, momentum, weight_decay)
    opt_d = SGD(disc.parameters(), lr_discriminator, momentum, weight_decay)
    weights = LossWeights(mu=mu)

    def gen_input(labels, noise_rng):
        onehot = np.zeros((len(labels), num_classes))
        onehot[np.arange(len(labels)), labels] = 1.0
        z = noise_rng.normal(size=(len(labels), noise_dim))
        return Tensor(np.concatenate([z, onehot], axis=1))

    eval_rng = derive_rng(seed, 73)
    eval_labels = np.arange(512) % num_classes
    eval_input = gen_input(eval_labels, eval_rng)

    def mean_distance():
        out = gen(eval_input).data
        return float(np.linalg.norm(out.mean(axis=0) - mixture_mean))

    initial = mean_distance()
    batch_rng = derive_rng(seed, 74)
    for _ in range(steps):
        labels = batch_rng.integers(0, num_classes, size=batch_size)
        teacher_logits = Tensor(
            component_means[labels] + component_std * batch_rng.normal(size=(batch_size, 2))
        )
        student_logits = gen(gen_input(labels, batch_rng))

        d_loss, _ = adversarial_losses(disc, teacher_logits, student_logits, labels,
                                       weights, ROLE_DISCRIMINATOR)
        opt_d.zero_grad()
        d_loss.backward()
        opt_d.step()
        opt_d.zero_grad()

        s_loss, _ = adversarial_losses(disc, teacher_logits, student_logits, labels,
                                       weights, ROLE_STUDENT)
        opt_g.zero_grad()
        s_loss.backward()
        opt_g.step()
        opt_g.zero_grad()

    final = mean_distance()
    return {"initial_distance": initial, "final_distance": final,
            "ratio": final / initial if initial > 0 else float("inf")}
