"""Two-phase weighted training.

Phase 1 trains every parameter on class-balanced patches with an unweighted
loss.  Phase 2 freezes everything except the output layer and trains it on
class-balanced patches with the class-weighted loss (healthy 8, edema 2,
other tumour classes 1), which stands in for the true label distribution.
Frozen layers run in inference mode during phase 2, so their parameters and
running statistics stay bit-identical to the end of phase 1.
"""
import csv
import logging
import os
import time
from dataclasses import dataclass, field, fields

import numpy as np

from .data import PatchSource, SamplerSpec, cut_batch, preprocess_volume, sample_centers
from .errors import ConfigError, NumericError
from .layers import softmax
from .loss import PHASE2_WEIGHTS, LossConfig, nll_loss
from .models import save_checkpoint
from .optim import SGD, Schedule, lr_schedule
from .tensor import new_rng

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    phase1_patch_count: int = 200000
    phase1_epochs: int = 20
    phase2_patch_count: int = 30000
    phase2_epochs: int = 5
    phase2_class_weights: dict = field(default_factory=lambda: dict(PHASE2_WEIGHTS))
    batch_size: int = 128
    optimizer_mode: str = "nesterov"
    momentum: float = 0.9
    lr_start: float = 0.01
    lr_end: float = 1e-6
    lr_decay_epochs: int = 24  # epochs over which lr decays geometrically to lr_end
    val_patch_count: int = 20000
    val_fraction: float = 0.2
    desk_scale: float = 1.0  # multiplies every patch count
    seed: int = 0
    model_width: int = 64

    def __post_init__(self):
        for name in ("phase1_patch_count", "phase1_epochs", "phase2_patch_count", "batch_size", "val_patch_count"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.phase2_epochs < 0:
            raise ConfigError("phase2_epochs must be non-negative")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be at least 2 (batch normalization)")
        if not self.desk_scale > 0:
            raise ConfigError("desk_scale must be positive")
        if not 0 < self.val_fraction < 1:
            raise ConfigError("val_fraction must lie in (0, 1)")
        if any(not w > 0 for w in self.phase2_class_weights.values()):
            raise ConfigError("class weights must be positive")

    def scaled(self, count):
        return max(2, int(round(count * self.desk_scale)))

    @property
    def schedule(self):
        return Schedule(self.lr_start, self.lr_end, self.lr_decay_epochs)


def _parse_weights(text):
    out = {}
    for part in text.split(","):
        if not part.strip():
            continue
        k, _, v = part.partition(":")
        out[int(k)] = float(v)
    return out


def parse_config(text):
    """Flat ``key = value`` lines, ``#`` comments; keys are TrainConfig fields."""
    known = {f.name: f for f in fields(TrainConfig)}
    kwargs = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or key not in known:
            raise ConfigError(f"line {lineno}: unknown or malformed entry {raw.strip()!r}")
        default = getattr(TrainConfig(), key)
        try:
            if key == "phase2_class_weights":
                kwargs[key] = _parse_weights(value)
            elif isinstance(default, bool):
                kwargs[key] = value.lower() in ("1", "true", "yes")
            elif isinstance(default, int):
                kwargs[key] = int(value)
            elif isinstance(default, float):
                kwargs[key] = float(value)
            else:
                kwargs[key] = value
        except ValueError:
            raise ConfigError(f"line {lineno}: bad value for {key}: {value!r}") from None
    return TrainConfig(**kwargs)


def load_config(path):
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def config_text(cfg=None):
    """Render a config file with every key (defaults when ``cfg`` is None)."""
    cfg = cfg or TrainConfig()
    lines = ["# nexusseg training configuration"]
    for f in fields(TrainConfig):
        v = getattr(cfg, f.name)
        if f.name == "phase2_class_weights":
            v = ",".join(f"{k}:{w:g}" for k, w in sorted(v.items()))
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


@dataclass
class EpochRecord:
    phase: int
    epoch: int
    train_loss: float
    val_loss: float
    lr: float
    seconds: float


@dataclass
class TrainLog:
    records: list = field(default_factory=list)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["phase", "epoch", "train_loss", "val_loss", "lr", "seconds"])
            for r in self.records:
                w.writerow([r.phase, r.epoch, f"{r.train_loss:.10g}", f"{r.val_loss:.10g}", f"{r.lr:.10g}", f"{r.seconds:.3f}"])


def split_volumes(items, fraction=0.2, seed=0):
    """Seeded shuffle; returns (train, held_out) with ``ceil``-free rounding, at least one held out."""
    order = new_rng(seed).permutation(len(items))
    n_val = max(1, int(round(len(items) * fraction)))
    val = [items[i] for i in sorted(order[:n_val])]
    train = [items[i] for i in sorted(order[n_val:])]
    return train, val


def balanced_batches(labels, size, rng):
    """Shuffled mini-batches in which every class keeps its overall share.

    Each class is shuffled on its own and the classes are interleaved by
    relative rank, so with equal class counts any ``size`` consecutive
    samples hold ``size / n_classes`` of each class, give or take one.  A
    trailing batch smaller than 2 is merged into the previous one (batch
    normalization needs two samples).
    """
    labels = np.asarray(labels)
    keys = np.empty(len(labels))
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        keys[idx[rng.permutation(len(idx))]] = (np.arange(len(idx)) + 0.5) / len(idx) + 1e-9 * c
    order = np.argsort(keys, kind="stable")
    batches = [order[c : c + size] for c in range(0, len(order), size)]
    if len(batches) > 1 and len(batches[-1]) < 2:
        batches[-2] = np.concatenate([batches[-2], batches[-1]])
        batches.pop()
    return batches


def _check_finite(loss, phase, epoch):
    if not np.isfinite(loss):
        raise NumericError(f"non-finite loss in phase {phase}, epoch {epoch}")


def _nesterov_step(opt, params, compute_grads):
    """Evaluate gradients at the look-ahead point, restore, then step."""
    if opt.mode == "nesterov":
        backup = {n: p.copy() for n, p in params.items()}
        for n, p in opt.lookahead(params).items():
            params[n][...] = p
        loss, grads = compute_grads()
        for n, p in params.items():
            p[...] = backup[n]
    else:
        loss, grads = compute_grads()
    opt.step(params, {n: grads[n] for n in params})
    return loss


def _predict_loss(model, sources, index, labels, loss_cfg, batch):
    total = 0.0
    for s in range(0, len(labels), batch):
        p33, p15 = cut_batch(sources, index[s : s + batch])
        probs = model.forward(p33, p15, train=False)
        total += nll_loss(probs, labels[s : s + batch], loss_cfg).loss * len(probs)
    return total / len(labels)


def train(model, train_vols, val_vols, cfg, checkpoint_dir=None, preprocessed=False, on_phase_end=None):
    """Run both phases; returns ``(model, TrainLog)``.

    Checkpoints ``phase{p}_epoch{e}.nxck`` are written to ``checkpoint_dir``
    after every epoch when it is given.  ``on_phase_end(phase, model)`` is
    called after each phase.
    """
    if any(v.labels is None for v in list(train_vols) + list(val_vols)):
        raise ConfigError("training and validation volumes must carry labels")
    if not val_vols:
        raise ConfigError("need at least one validation volume")
    if not preprocessed:
        train_vols = [preprocess_volume(v) for v in train_vols]
        val_vols = [preprocess_volume(v) for v in val_vols]
    if checkpoint_dir:
        os.makedirs(checkpoint_dir, exist_ok=True)

    seeds = np.random.SeedSequence(cfg.seed).generate_state(6)
    shuffle_rng = new_rng(seeds[0])
    model.set_dropout_rng(new_rng(seeds[1]))
    tsrc = [PatchSource(v) for v in train_vols]
    vsrc = [PatchSource(v) for v in val_vols]
    n_val = cfg.scaled(cfg.val_patch_count)
    val1 = sample_centers(val_vols, SamplerSpec("balanced", n_val, int(seeds[2])))
    trainlog = TrainLog()
    schedule = cfg.schedule
    global_epoch = 0
    uniform = LossConfig()
    weighted = LossConfig(dict(cfg.phase2_class_weights))

    def save(phase, epoch):
        if checkpoint_dir:
            save_checkpoint(model, os.path.join(checkpoint_dir, f"phase{phase}_epoch{epoch}.nxck"))

    # phase 1: every parameter, balanced patches, unweighted loss
    model.unfreeze()
    s1 = sample_centers(train_vols, SamplerSpec("balanced", cfg.scaled(cfg.phase1_patch_count), int(seeds[3])))
    opt = SGD(cfg.lr_start, cfg.momentum, cfg.optimizer_mode)
    for epoch in range(cfg.phase1_epochs):
        t0 = time.perf_counter()
        opt.lr = lr_schedule(global_epoch, schedule)
        params = model.trainable_parameters()
        losses = []
        for bidx in balanced_batches(s1.labels, cfg.batch_size, shuffle_rng):
            p33, p15 = cut_batch(tsrc, s1.index[bidx])
            y = s1.labels[bidx]

            def grads():
                probs = model.forward(p33, p15, train=True)
                res = nll_loss(probs, y, uniform)
                model.backward(res.grad_logits)
                return res.loss, model.named_grads()

            loss = _nesterov_step(opt, params, grads)
            _check_finite(loss, 1, epoch)
            losses.append(loss * len(bidx))
        train_loss = sum(losses) / len(s1)
        val_loss = _predict_loss(model, vsrc, val1.index, val1.labels, uniform, cfg.batch_size)
        _check_finite(val_loss, 1, epoch)
        trainlog.records.append(EpochRecord(1, epoch, train_loss, val_loss, opt.lr, time.perf_counter() - t0))
        log.info("phase 1 epoch %d: train %.4f val %.4f lr %.3g", epoch, train_loss, val_loss, opt.lr)
        save(1, epoch)
        global_epoch += 1
    if on_phase_end:
        on_phase_end(1, model)

    if cfg.phase2_epochs == 0:
        return model, trainlog

    # phase 2: output layer only, class-weighted loss; frozen part runs in inference mode
    model.freeze_all_but_output()
    s2 = sample_centers(train_vols, SamplerSpec("balanced", cfg.scaled(cfg.phase2_patch_count), int(seeds[4])))
    val2 = sample_centers(val_vols, SamplerSpec("balanced", n_val, int(seeds[5])))
    feats = _features(model, tsrc, s2.index, cfg.batch_size)
    vfeats = _features(model, vsrc, val2.index, cfg.batch_size)
    opt = SGD(cfg.lr_start, cfg.momentum, cfg.optimizer_mode)
    for epoch in range(cfg.phase2_epochs):
        t0 = time.perf_counter()
        opt.lr = lr_schedule(global_epoch, schedule)
        params = model.trainable_parameters()
        losses = []
        for bidx in balanced_batches(s2.labels, cfg.batch_size, shuffle_rng):
            f, y = feats[bidx], s2.labels[bidx]

            def grads():
                probs = softmax(model.head.forward(f, train=True), axis=1)
                res = nll_loss(probs, y, weighted)
                model.head.backward(res.grad_logits)
                return res.loss, model.named_grads()

            loss = _nesterov_step(opt, params, grads)
            _check_finite(loss, 2, epoch)
            losses.append(loss * len(bidx))
        train_loss = sum(losses) / len(s2)
        vprobs = softmax(model.head.forward(vfeats, train=False), axis=1)
        val_loss = nll_loss(vprobs, val2.labels, weighted).loss
        _check_finite(val_loss, 2, epoch)
        trainlog.records.append(EpochRecord(2, epoch, train_loss, val_loss, opt.lr, time.perf_counter() - t0))
        log.info("phase 2 epoch %d: train %.4f val %.4f lr %.3g", epoch, train_loss, val_loss, opt.lr)
        save(2, epoch)
        global_epoch += 1
    model.unfreeze()
    if on_phase_end:
        on_phase_end(2, model)
    return model, trainlog


def _features(model, sources, index, batch):
    out = []
    for s in range(0, len(index), batch):
        p33, p15 = cut_batch(sources, index[s : s + batch])
        out.append(model.features(p33, p15, train=False))
    return np.concatenate(out)
