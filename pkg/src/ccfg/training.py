"""Two-stage training: supervised contrastive warm-up, then joint pair training.

Also carries the cross-entropy baseline used for comparisons and for the
"CE-trained" initialization mode.
"""
from dataclasses import asdict, dataclass, field, fields
import copy
import hashlib
import json
import logging
import math
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
import yaml

from .data import AugmentationConfig, DataError, batch_images, image_tensor
from .losses import (
    LossConfig,
    angular_pair_loss,
    euclidean_pair_loss,
    focal_pair_loss_from_logits,
    lmcl_loss,
    scl_loss,
    total_loss,
)
from .metrics import evaluate
from .model import build_ce_model, build_model, checkpoint_manifest, read_checkpoint, save_checkpoint
from .pairs import build_epoch_plan, p_n_for_ratio

log = logging.getLogger(__name__)

STAGES = ("1", "2", "ce")
INIT_MODES = ("scratch", "pretrained", "ce_trained", "stage1_checkpoint")


class ConfigError(ValueError):
    pass


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    stage: str = "2"
    encoder: str = "tiny_cnn"
    optimizer: str = "adam"
    initial_lr: float = 1e-4
    lr_schedule: str = "multi_step"
    milestones: tuple | None = None  # default: 60% and 80% of epochs
    lr_decay: float = 0.1
    warmup_epochs: int = 5
    batch_size: int = 128
    epochs: int = 25
    z_dim: int = 128
    seed: int = 0
    init_mode: str = "scratch"
    weight_decay: float = 0.0
    momentum: float = 0.9
    deterministic: bool = True
    # loss hyperparameters
    tau: float = 0.07
    base_tau: float = 0.07
    gamma: float = 3.5
    s: float = 30.0
    m_c: float = 0.40
    m_e: float = 1.0
    m_a: float = 1.0
    lam: float = 0.3
    p_n: int = 4
    neg_pos_ratio: float | None = None
    use_focal: bool = True
    use_e: bool = True
    use_lmcl: bool = True
    use_a: bool = True
    angular_on: str = "cosines"
    # augmentation
    augment: bool = True
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    hue: float = 0.1
    grayscale_probability: float = 0.2
    rotation_degrees: float = 15.0
    # data preparation
    min_samples: int = 20
    cap: int = 20

    def __post_init__(self):
        object.__setattr__(self, "stage", str(self.stage))
        if self.milestones is not None:
            object.__setattr__(self, "milestones", tuple(int(m) for m in self.milestones))
        try:
            self._validate()
            self.loss
            self.augmentation
        except ConfigError:
            raise
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from None

    def _validate(self):
        choices = {"stage": STAGES, "optimizer": ("adam", "sgd"), "lr_schedule": ("multi_step", "warm_cosine"),
                   "init_mode": INIT_MODES, "angular_on": ("cosines", "features")}
        for key, allowed in choices.items():
            if getattr(self, key) not in allowed:
                raise ConfigError(f"{key} must be one of {allowed}, got {getattr(self, key)!r}")
        for key in ("initial_lr", "batch_size", "epochs", "z_dim"):
            if not getattr(self, key) > 0:
                raise ConfigError(f"{key} must be positive, got {getattr(self, key)}")
        if self.warmup_epochs < 0 or not 0 < self.lr_decay <= 1:
            raise ConfigError("warmup_epochs must be >= 0 and lr_decay in (0, 1]")
        if self.neg_pos_ratio is not None and self.neg_pos_ratio < 0:
            raise ConfigError("neg_pos_ratio must be nonnegative")

    @property
    def loss(self):
        return LossConfig(tau=self.tau, base_tau=self.base_tau, gamma=self.gamma, s=self.s, m_c=self.m_c,
                          m_e=self.m_e, m_a=self.m_a, lam=self.lam, p_n=self.p_n)

    @property
    def augmentation(self):
        return AugmentationConfig(enabled=self.augment, brightness=self.brightness, contrast=self.contrast,
                                  saturation=self.saturation, hue=self.hue,
                                  grayscale_probability=self.grayscale_probability,
                                  rotation_degrees=self.rotation_degrees)

    @property
    def schedule(self):
        milestones = self.milestones
        if milestones is None:
            milestones = (int(round(0.6 * self.epochs)), int(round(0.8 * self.epochs)))
        return LRSchedule(self.lr_schedule, self.initial_lr, self.epochs, milestones,
                          self.lr_decay, self.warmup_epochs)

    def to_dict(self):
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        if d["milestones"] is not None:
            d["milestones"] = list(d["milestones"])
        return d

    def hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    def replace(self, **changes):
        d = asdict(self)
        d.update(changes)
        return TrainConfig(**d)


def config_from_mapping(mapping):
    """Build a config from a flat mapping; unknown or nested keys are errors."""
    known = {f.name for f in fields(TrainConfig)}
    values = {}
    for key, value in mapping.items():
        name = "lam" if key == "lambda" else key
        if name not in known or key == "lam":
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(value, dict):
            raise ConfigError(f"config key {key!r} must be a scalar or list")
        values[name] = value
    try:
        return TrainConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path, **overrides):
    try:
        data = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path} must hold a flat key/value mapping")
    data.update({k: v for k, v in overrides.items() if v is not None})
    return config_from_mapping(data)


def save_config(config, path):
    Path(path).write_text(yaml.safe_dump(config.to_dict(), sort_keys=True), encoding="utf-8")


# ---------------------------------------------------------------- schedules


@dataclass(frozen=True)
class LRSchedule:
    kind: str
    initial_lr: float
    epochs: int
    milestones: tuple = ()
    decay: float = 0.1
    warmup_epochs: int = 5


def lr_at(schedule, epoch):
    """Learning rate for ``epoch`` (0-based), constant within the epoch."""
    if not 0 <= epoch < schedule.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {schedule.epochs})")
    if schedule.kind == "multi_step":
        passed = sum(1 for m in schedule.milestones if epoch >= m)
        return schedule.initial_lr * schedule.decay ** passed
    if schedule.kind == "warm_cosine":
        w = schedule.warmup_epochs
        if epoch < w:
            return schedule.initial_lr * (epoch + 1) / (w + 1)
        span = schedule.epochs - 1 - w
        if span <= 0:
            return schedule.initial_lr
        return schedule.initial_lr * 0.5 * (1 + math.cos(math.pi * (epoch - w) / span))
    raise ValueError(f"unknown schedule {schedule.kind!r}")


# ---------------------------------------------------------------- loss toggles


@dataclass(frozen=True)
class LossMask:
    focal: bool = True
    e: bool = True
    lmcl: bool = True
    a: bool = True

    @property
    def heads(self):
        """Branches with a classification loss, i.e. usable at inference."""
        return tuple(h for h, on in (("e", self.focal), ("a", self.lmcl)) if on)


def ablation_toggles(config):
    mask = LossMask(config.use_focal, config.use_e, config.use_lmcl, config.use_a)
    if not (mask.focal or mask.e or mask.lmcl or mask.a):
        raise ConfigError("all stage-2 losses are disabled")
    if not mask.heads:
        raise ConfigError("at least one classification loss (focal or lmcl) must be enabled")
    return mask


def stage2_components(out, n, yl, yr, flags, cfg, mask, angular_on="cosines"):
    """Component losses for a forward pass over ``cat(left, right)`` images.

    Disabled components are constant zeros outside the graph.
    """
    zero = out.r.new_zeros(())
    left = lambda m: m[:n]
    right = lambda m: m[n:]
    parts = {"focal": zero, "lmcl": zero, "l_e": zero, "l_a": zero}
    if mask.focal:
        parts["focal"] = focal_pair_loss_from_logits(left(out.r), right(out.r), yl, yr, cfg.gamma)
    if mask.lmcl:
        parts["lmcl"] = lmcl_loss(left(out.r_prime), right(out.r_prime), yl, yr, cfg.s, cfg.m_c)
    if mask.e:
        parts["l_e"] = euclidean_pair_loss(left(out.z_e), right(out.z_e), flags, cfg.m_e)
    if mask.a:
        feats = out.r_prime if angular_on == "cosines" else out.z_a_raw
        parts["l_a"] = angular_pair_loss(left(feats), right(feats), flags, cfg.m_a)
    parts["total"] = total_loss(parts["focal"], parts["lmcl"], parts["l_e"], parts["l_a"], cfg.lam)
    return parts


# ---------------------------------------------------------------- bookkeeping


@dataclass
class TrainingLog:
    records: list = field(default_factory=list)

    def add(self, record):
        if self.records and record["epoch"] != self.records[-1]["epoch"] + 1:
            raise ValueError("epoch records must be consecutive")
        self.records.append(record)

    def write(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for r in self.records:
                fh.write(json.dumps(r) + "\n")

    @classmethod
    def read(cls, path):
        out = cls()
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    out.add(json.loads(line))
        return out


@dataclass
class TrainResult:
    model: torch.nn.Module
    log: TrainingLog
    checkpoint: Path | None = None
    best_epoch: int | None = None


def seed_everything(seed, deterministic=True):
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)
    if deterministic:
        torch.use_deterministic_algorithms(True)


def _optimizer(config, params):
    if config.optimizer == "adam":
        return torch.optim.Adam(params, lr=config.initial_lr, weight_decay=config.weight_decay)
    return torch.optim.SGD(params, lr=config.initial_lr, momentum=config.momentum,
                           weight_decay=config.weight_decay)


def _set_lr(opt, lr):
    for group in opt.param_groups:
        group["lr"] = lr


def _check_finite(loss, epoch, step):
    if not torch.isfinite(loss.detach()):
        raise DivergenceError(f"non-finite loss at epoch {epoch}, step {step}")


class _Split:
    """Uint8 images, labels and ids of one split, loaded once."""

    def __init__(self, dataset, split, size):
        self.samples = dataset.subset(split)
        if not self.samples:
            raise DataError(f"split {split!r} is empty")
        self.images = image_tensor(self.samples, size)
        self.labels = torch.tensor([s.class_id for s in self.samples])
        self.ids = [s.sample_id for s in self.samples]


def _epoch_rng(seed, epoch, stream):
    return np.random.default_rng([seed, epoch, stream])


def _save(out_dir, name, model, config, dataset, stage, extra=None):
    if out_dir is None:
        return None
    path = Path(out_dir) / name
    path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(path, model, stage, config.hash(), dataset.class_names,
                    extra={"seed": config.seed, **(extra or {})})
    return path


def _validate_epoch(model, dataset, val):
    report = evaluate(model, dataset, "val", images=val.images)
    return report.accuracy, report.macro_f1


def _stage_check(config, stage):
    if config.stage != stage:
        raise ConfigError(f"config is for stage {config.stage}, expected {stage}")


# ---------------------------------------------------------------- stage 1


def run_stage1(config, dataset, out_dir=None):
    """Train encoder + projection with the supervised contrastive loss."""
    _stage_check(config, "1")
    seed_everything(config.seed, config.deterministic)
    model = build_model(config.encoder, dataset.num_classes, config.z_dim, config.s,
                        pretrained=config.init_mode == "pretrained")
    train = _Split(dataset, "train", model.spec.input_size[:2])
    params = list(model.encoder.parameters()) + list(model.proj_e.parameters())
    opt = _optimizer(config, params)
    aug = config.augmentation
    sched = config.schedule
    history = TrainingLog()
    n = len(train.labels)
    for epoch in range(config.epochs):
        lr = lr_at(sched, epoch)
        _set_lr(opt, lr)
        model.train()
        order = torch.from_numpy(_epoch_rng(config.seed, epoch, 0).permutation(n))
        losses = []
        offset = 0
        for step, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start:start + config.batch_size]
            if len(idx) < 2:
                continue
            x = batch_images(train.images, idx, train.ids, aug, config.seed, epoch, offset)
            offset += len(idx)
            loss = scl_loss(model.embed(x), train.labels[idx], config.tau, config.base_tau)
            _check_finite(loss, epoch, step)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        history.add({"epoch": epoch, "lr": lr, "scl": float(np.mean(losses)), "steps": [{"scl": v} for v in losses],
                     "val_accuracy": None, "val_macro_f1": None})
        log.info("stage1 epoch %d lr %.2e scl %.4f", epoch, lr, history.records[-1]["scl"])
    model.eval()
    ckpt = _save(out_dir, "stage1.pt", model, config, dataset, "1")
    if out_dir is not None:
        history.write(Path(out_dir) / "log_stage1.jsonl")
    return TrainResult(model, history, ckpt, config.epochs - 1)


# ---------------------------------------------------------------- stage 2


def _load_prefixes(model, state, mapping):
    """Copy tensors ``src_prefix.* -> dst_prefix.*`` for each pair in ``mapping``."""
    own = model.state_dict()
    n = 0
    for src, dst in mapping:
        for key, value in state.items():
            if key.startswith(src + "."):
                target = dst + key[len(src):]
                if target not in own or own[target].shape != value.shape:
                    raise ConfigError(f"checkpoint tensor {key} does not fit {target}")
                own[target] = value.clone()
                n += 1
    model.load_state_dict(own)
    return n


def initialize_stage2(model, config, init_checkpoint):
    """``init_checkpoint`` is a checkpoint path or an in-memory trained model."""
    if config.init_mode in ("scratch", "pretrained"):
        return
    if init_checkpoint is None:
        raise ConfigError(f"init_mode={config.init_mode} needs an init checkpoint")
    if isinstance(init_checkpoint, torch.nn.Module):
        stage = "ce" if config.init_mode == "ce_trained" else "1"
        manifest, state = checkpoint_manifest(init_checkpoint, stage), init_checkpoint.state_dict()
    else:
        manifest, state = read_checkpoint(init_checkpoint)
    if manifest["encoder"] != config.encoder:
        raise ConfigError(f"checkpoint encoder {manifest['encoder']} != config encoder {config.encoder}")
    if config.init_mode == "ce_trained":
        if manifest["arch"] != "ce":
            raise ConfigError("ce_trained init expects a cross-entropy checkpoint")
        _load_prefixes(model, state, [("encoder", "encoder")])
    else:
        if manifest["stage"] != "1":
            raise ConfigError("stage1_checkpoint init expects a stage-1 checkpoint")
        if manifest["z_dim"] != config.z_dim:
            raise ConfigError(f"checkpoint z_dim {manifest['z_dim']} != config z_dim {config.z_dim}")
        # both branches start from the contrastively trained projection
        _load_prefixes(model, state, [("encoder", "encoder"), ("proj_e", "proj_e"), ("proj_e", "proj_a")])


def resolve_p_n(config, labels):
    if config.neg_pos_ratio is not None:
        return p_n_for_ratio(labels, config.neg_pos_ratio)
    return config.p_n


def run_stage2(config, dataset, init_checkpoint=None, out_dir=None, plan_dump_dir=None):
    """Joint classification + pairwise contrastive training over pair batches.

    The model with the best validation accuracy (earliest on ties) is kept.
    """
    _stage_check(config, "2")
    mask = ablation_toggles(config)
    seed_everything(config.seed, config.deterministic)
    model = build_model(config.encoder, dataset.num_classes, config.z_dim, config.s, heads=mask.heads,
                        pretrained=config.init_mode == "pretrained")
    initialize_stage2(model, config, init_checkpoint)
    size = model.spec.input_size[:2]
    train, val = _Split(dataset, "train", size), _Split(dataset, "val", size)
    train_labels = train.labels.tolist()
    p_n = resolve_p_n(config, train_labels)
    cfg = config.loss
    opt = _optimizer(config, model.parameters())
    aug = config.augmentation
    sched = config.schedule
    history = TrainingLog()
    best = (-1.0, None, None)
    for epoch in range(config.epochs):
        lr = lr_at(sched, epoch)
        _set_lr(opt, lr)
        plan = build_epoch_plan(train_labels, p_n, epoch, config.seed, config.batch_size)
        if plan_dump_dir is not None:
            from .pairs import dump_plan

            dump_plan(plan, Path(plan_dump_dir) / f"plan_epoch{epoch:03d}.tsv", train.ids)
        model.train()
        steps = []
        offset = 0
        for step, chunk in enumerate(plan.batches()):
            li = torch.tensor([p.left for p in chunk])
            ri = torch.tensor([p.right for p in chunk])
            flags = torch.tensor([p.flag for p in chunk])
            idx = torch.cat([li, ri])
            x = batch_images(train.images, idx, train.ids, aug, config.seed, epoch, offset)
            offset += len(idx)
            parts = stage2_components(model(x), len(chunk), train.labels[li], train.labels[ri], flags,
                                      cfg, mask, config.angular_on)
            _check_finite(parts["total"], epoch, step)
            opt.zero_grad()
            parts["total"].backward()
            opt.step()
            steps.append({k: float(v.detach()) for k, v in parts.items()})
        val_acc, val_f1 = _validate_epoch(model, dataset, val)
        record = {"epoch": epoch, "lr": lr, "p_n": p_n, "pairs": len(plan),
                  **{k: float(np.mean([s[k] for s in steps])) for k in ("focal", "lmcl", "l_e", "l_a", "total")},
                  "val_accuracy": val_acc, "val_macro_f1": val_f1, "steps": steps}
        history.add(record)
        log.info("stage2 epoch %d lr %.2e total %.4f val acc %.4f", epoch, lr, record["total"], val_acc)
        if val_acc > best[0]:
            best = (val_acc, epoch, copy.deepcopy(model.state_dict()))
    model.load_state_dict(best[2])
    model.eval()
    ckpt = _save(out_dir, "stage2_best.pt", model, config, dataset, "2", {"best_epoch": best[1]})
    if out_dir is not None:
        history.write(Path(out_dir) / "log_stage2.jsonl")
    return TrainResult(model, history, ckpt, best[1])


# ---------------------------------------------------------------- CE baseline


def run_ce(config, dataset, out_dir=None):
    """Encoder + linear decision layer trained with plain cross-entropy."""
    _stage_check(config, "ce")
    seed_everything(config.seed, config.deterministic)
    model = build_ce_model(config.encoder, dataset.num_classes, pretrained=config.init_mode == "pretrained")
    size = model.spec.input_size[:2]
    train, val = _Split(dataset, "train", size), _Split(dataset, "val", size)
    opt = _optimizer(config, model.parameters())
    aug = config.augmentation
    sched = config.schedule
    history = TrainingLog()
    best = (-1.0, None, None)
    n = len(train.labels)
    for epoch in range(config.epochs):
        lr = lr_at(sched, epoch)
        _set_lr(opt, lr)
        model.train()
        order = torch.from_numpy(_epoch_rng(config.seed, epoch, 0).permutation(n))
        losses = []
        offset = 0
        for step, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start:start + config.batch_size]
            x = batch_images(train.images, idx, train.ids, aug, config.seed, epoch, offset)
            offset += len(idx)
            loss = F.cross_entropy(model(x), train.labels[idx], reduction="sum")
            _check_finite(loss, epoch, step)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        val_acc, val_f1 = _validate_epoch(model, dataset, val)
        history.add({"epoch": epoch, "lr": lr, "ce": float(np.mean(losses)), "steps": [{"ce": v} for v in losses],
                     "val_accuracy": val_acc, "val_macro_f1": val_f1})
        if val_acc > best[0]:
            best = (val_acc, epoch, copy.deepcopy(model.state_dict()))
    model.load_state_dict(best[2])
    model.eval()
    ckpt = _save(out_dir, "ce_best.pt", model, config, dataset, "ce", {"best_epoch": best[1]})
    if out_dir is not None:
        history.write(Path(out_dir) / "log_ce.jsonl")
    return TrainResult(model, history, ckpt, best[1])


def run_two_stage(stage1_config, stage2_config, dataset, out_dir):
    """Stage 1 then stage 2 initialized from the stage-1 checkpoint."""
    first = run_stage1(stage1_config, dataset, out_dir)
    init = first.checkpoint if first.checkpoint is not None else first.model
    second = run_stage2(stage2_config.replace(init_mode="stage1_checkpoint"), dataset, init, out_dir)
    return first, second
