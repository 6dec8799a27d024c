"""Run configuration, training loop, evaluation."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from . import data as D
from . import tensor as T
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint, state_from_model, load_state_into_model
from .losses import total_loss
from .metrics import ConfusionMatrix, compute_metrics
from .model import CMUNet, ModelConfig, build_model
from .optim import AdamW, cosine_lr
from .tensor import Tensor


@dataclass
class TrainSettings:
    epochs: int = 30
    batch_size: int = 8
    lr: float = 6e-4
    schedule: str = "cosine"
    weight_decay: float = 0.01
    seed: int = 0
    deterministic: bool = True

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("train: epochs must be >= 0 and batch_size >= 1")
        if self.schedule not in ("cosine", "constant"):
            raise ConfigError(f"train: unknown schedule {self.schedule!r}")


@dataclass
class DataSettings:
    root: str = None
    crop: int = 64
    augment: bool = True


@dataclass
class AblationSettings:
    msaa: bool = True
    multi_output: bool = True


@dataclass
class RunConfig:
    model: dict = field(default_factory=dict)
    train: TrainSettings = field(default_factory=TrainSettings)
    data: DataSettings = field(default_factory=DataSettings)
    ablation: AblationSettings = field(default_factory=AblationSettings)

    @classmethod
    def from_dict(cls, doc):
        if not isinstance(doc, dict):
            raise ConfigError("run config must be a json object")
        unknown = set(doc) - {"model", "train", "data", "ablation"}
        if unknown:
            raise ConfigError(f"run config: unknown sections {sorted(unknown)}")

        def section(name, klass):
            sub = doc.get(name, {})
            if not isinstance(sub, dict):
                raise ConfigError(f"run config: section {name!r} must be an object")
            bad = set(sub) - set(klass.__dataclass_fields__)
            if bad:
                raise ConfigError(f"run config: unknown keys in {name}: {sorted(bad)}")
            return klass(**sub)

        model = doc.get("model", {})
        if not isinstance(model, dict):
            raise ConfigError("run config: section 'model' must be an object")
        bad = set(model) - set(ModelConfig.__dataclass_fields__)
        if bad:
            raise ConfigError(f"run config: unknown keys in model: {sorted(bad)}")
        return cls(model=dict(model), train=section("train", TrainSettings),
                   data=section("data", DataSettings),
                   ablation=section("ablation", AblationSettings))

    def model_config(self, num_classes):
        fields = dict(self.model)
        if "num_classes" in fields and fields["num_classes"] != num_classes:
            raise DataError(
                f"config num_classes {fields['num_classes']} != dataset {num_classes}")
        fields["num_classes"] = num_classes
        fields["use_msaa"] = self.ablation.msaa
        fields["multi_output"] = self.ablation.multi_output
        return ModelConfig.from_dict(fields)

    def effective(self, num_classes=None):
        """Defaults-filled view; echoed into the training log."""
        out = {"model": dict(self.model), "train": asdict(self.train),
               "data": asdict(self.data), "ablation": asdict(self.ablation)}
        if num_classes is not None:
            out["model"] = self.model_config(num_classes).to_dict()
        return out


def load_run_config(path):
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid json ({e})") from None
    return RunConfig.from_dict(doc)


def _prepare(sample, crop, rng, do_augment):
    if do_augment and rng is not None:
        sample = D.augment(sample, rng)
    h, w = sample.mask.shape
    if h > crop or w > crop:
        top = int(rng.integers(0, h - crop + 1)) if rng is not None else 0
        left = int(rng.integers(0, w - crop + 1)) if rng is not None else 0
        sample = D.SegSample(image=sample.image[:, top:top + crop, left:left + crop],
                             mask=sample.mask[top:top + crop, left:left + crop],
                             id=sample.id)
    return sample


def evaluate(model, dataset, ids, included_classes=None, tta=False):
    """Confusion-matrix evaluation over a list of sample ids."""
    model.eval()
    cm = ConfusionMatrix(dataset.num_classes)
    for sid in ids:
        s = dataset.load(sid)
        pred = D.tta_predict(model, s.image) if tta else D.predict(model, s.image)
        cm.update(pred, s.mask)
    return compute_metrics(cm, included_classes), cm


@dataclass
class TrainResult:
    history: list
    best_miou: float
    checkpoint_path: str
    model: CMUNet


def _write_checkpoint(path, model, run_cfg, epoch, opt):
    ck = Checkpoint(config=model.config.to_dict(), params=state_from_model(model),
                    epoch=epoch, seed=run_cfg.train.seed,
                    optimizer=opt.state_dict() if opt is not None else None,
                    extra={"run_config": run_cfg.effective()})
    save_checkpoint(path, ck)


def train_model(run_cfg: RunConfig, data_root, out_path, log_fn=None, stop_fn=None):
    """Train per the run config; writes per-epoch and best checkpoints plus
    a jsonl log whose first line echoes the effective configuration.

    ``stop_fn(entry) -> bool`` may end training early (e.g. target reached).
    """
    ds = D.open_dataset(data_root)
    cfg = run_cfg.model_config(ds.num_classes)
    settings = run_cfg.train
    T.set_deterministic(settings.deterministic)

    model = build_model(cfg, seed=settings.seed)
    opt = AdamW(model.named_parameters(), lr=settings.lr,
                weight_decay=settings.weight_decay)

    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    log_path = Path(str(out_path) + ".log.jsonl")
    log_lines = [json.dumps({"config": run_cfg.effective(ds.num_classes)}, sort_keys=True)]

    train_ids = ds.ids("train")
    val_ids = ds.ids("val") or train_ids
    if not train_ids:
        raise DataError(f"{data_root}: empty train split")
    steps_per_epoch = math.ceil(len(train_ids) / settings.batch_size)
    total_steps = max(1, settings.epochs * steps_per_epoch)
    included = cfg.metric_classes()

    history = []
    best = -1.0
    step = 0
    for epoch in range(settings.epochs):
        model.train()
        order = np.random.default_rng([settings.seed, 104729 + epoch]).permutation(len(train_ids))
        epoch_loss = 0.0
        for start in range(0, len(order), settings.batch_size):
            batch_ids = [train_ids[i] for i in order[start:start + settings.batch_size]]
            samples = []
            for sid in batch_ids:
                rng = D.sample_rng(settings.seed, sid, epoch)
                samples.append(_prepare(ds.load(sid), run_cfg.data.crop, rng,
                                        run_cfg.data.augment))
            x = Tensor(np.stack([s.image for s in samples]))
            target = np.stack([s.mask for s in samples])
            outputs = model(x)
            loss = total_loss(outputs, target, cfg.aux_weight)
            model.zero_grad()
            loss.backward()
            lr = (cosine_lr(settings.lr, step, total_steps)
                  if settings.schedule == "cosine" else settings.lr)
            opt.step(lr)
            step += 1
            epoch_loss += loss.item()
        train_loss = epoch_loss / steps_per_epoch

        report, _ = evaluate(model, ds, val_ids, included)
        entry = {"epoch": epoch, "train_loss": train_loss, "val_mIoU": report.mIoU}
        history.append(entry)
        log_lines.append(json.dumps(entry, sort_keys=True))
        if log_fn:
            log_fn(entry)

        _write_checkpoint(out_path, model, run_cfg, epoch + 1, opt)
        if report.mIoU > best:
            best = report.mIoU
            _write_checkpoint(Path(str(out_path) + ".best"), model, run_cfg, epoch + 1, opt)
        if stop_fn is not None and stop_fn(entry):
            break

    if settings.epochs == 0:
        _write_checkpoint(out_path, model, run_cfg, 0, opt)
    log_path.write_text("\n".join(log_lines) + "\n")
    return TrainResult(history=history, best_miou=best,
                       checkpoint_path=str(out_path), model=model)


def model_from_checkpoint(path):
    ck = load_checkpoint(path)
    cfg = ModelConfig.from_dict(ck.config)
    model = build_model(cfg, seed=ck.seed)
    load_state_into_model(model, ck.params)
    return model, ck
