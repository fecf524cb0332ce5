"""Semi-supervised training loop.

Each step draws a labeled mini-batch (focal balance loss on every side output
and the fused output, squared error on the fused output) and, in ``semi``
mode, an unlabeled mini-batch from which overlapping crop pairs feed the
confidence-gated contrastive loss at every active stage.

Randomness is drawn from independent streams keyed by (seed, epoch, step,
stream), so the labeled branch sees the same data whether or not the
unlabeled branch runs.
"""
from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import crops, losses
from .data import DatasetSplit, ImageSample
from .errors import ConfigError
from .evaluation import DEFAULT_THRESHOLDS, SweepAccumulator
from .network import CRSeg, CRSegConfig, build_crseg, save_checkpoint

log = logging.getLogger(__name__)

# sampling stream ids
_LABELED_ORDER, _LABELED_CROP, _UNLABELED_ORDER, _UNLABELED_CROP, _PAIRS = range(5)

LOG_COLUMNS = ("step", "epoch", "contrast", "balance", "construction", "weight_decay", "total", "lr")


@dataclass
class TrainConfig:
    epochs: int = 200
    lr0: float = 1e-3
    lr_drop_every: int = 40
    lr_drop_factor: float = 5.0
    momentum: float = 0.9
    lambda_wd: float = 2e-4
    batch_labeled: int = 4
    batch_unlabeled: int = 4
    crop_size: int = 64
    min_overlap_fraction: float = 0.25
    tau: float = 0.1
    alpha_conf: float = 0.75
    alpha_exp: float = 2.0
    contrast_stages: tuple = (1, 2, 3, 4, 5)
    mode: str = "semi"
    seed: int = 0
    # beyond the core schedule
    n_negatives: int = 64
    negatives: str = "uniform"  # or "pseudo_label"
    max_pairs: int = 256
    weighting: str = "frequency"
    construction_reduction: str = "mean"
    include_positive: bool = True
    full_image_labeled: bool = False
    crop_jitter: float = 0.0
    w_contrast: float = 1.0
    w_balance: float = 1.0
    w_construction: float = 1.0
    w_weight_decay: float = 1.0
    steps_per_epoch: int = 0  # 0: one pass over the labeled set
    eval_every: int = 1
    checkpoint_every: int = 0
    # model and split, used when the trainer builds the model itself
    in_channels: int = 1
    base_width: int = 16
    embed_dim: int = 32
    label_fraction: float = 0.035

    def __post_init__(self):
        self.contrast_stages = tuple(int(s) for s in self.contrast_stages)

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.lr0 <= 0:
            raise ConfigError("lr0 must be > 0")
        if self.lr_drop_factor <= 1:
            raise ConfigError("lr_drop_factor must be > 1")
        if self.lr_drop_every < 1:
            raise ConfigError("lr_drop_every must be >= 1")
        if self.mode not in ("semi", "sup_only"):
            raise ConfigError(f"mode must be semi or sup_only, got {self.mode!r}")
        if not set(self.contrast_stages) <= {1, 2, 3, 4, 5}:
            raise ConfigError("contrast_stages must be a subset of 1..5")
        if self.batch_labeled < 1 or self.batch_unlabeled < 1:
            raise ConfigError("batch sizes must be >= 1")
        if self.tau <= 0 or not 0 <= self.alpha_conf < 1:
            raise ConfigError("need tau > 0 and alpha_conf in [0, 1)")
        if self.negatives not in ("uniform", "pseudo_label"):
            raise ConfigError(f"negatives must be uniform or pseudo_label, got {self.negatives!r}")
        if self.n_negatives < 1 or self.max_pairs < 1:
            raise ConfigError("n_negatives and max_pairs must be >= 1")

    def model_config(self) -> CRSegConfig:
        return CRSegConfig(in_channels=self.in_channels, base_width=self.base_width,
                           embed_dim=self.embed_dim)


def _coerce(value: str, default):
    if isinstance(default, bool):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {value!r}")
    if isinstance(default, tuple):
        return tuple(int(v) for v in value.replace(",", " ").split())
    try:
        return type(default)(value)
    except ValueError as exc:
        raise ConfigError(f"bad value {value!r}") from exc


def parse_overrides(cfg: TrainConfig, pairs: dict, strict: bool = True) -> TrainConfig:
    """Return a copy of ``cfg`` with string values applied to matching fields."""
    defaults = {f.name: getattr(cfg, f.name) for f in dataclasses.fields(cfg)}
    updates = {}
    for key, value in pairs.items():
        key = key.replace("-", "_")
        if key not in defaults:
            if strict:
                raise ConfigError(f"unknown config key {key!r}")
            continue
        updates[key] = _coerce(str(value), defaults[key]) if isinstance(value, str) else value
    return dataclasses.replace(cfg, **updates)


def read_config_file(path) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def write_config_file(cfg: TrainConfig, path, extra: dict | None = None) -> None:
    lines = []
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        lines.append(f"{f.name} = {v}")
    for k, v in (extra or {}).items():
        lines.append(f"{k} = {v}")
    Path(path).write_text("\n".join(lines) + "\n")


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Step schedule: divide by ``lr_drop_factor`` every ``lr_drop_every`` epochs."""
    return cfg.lr0 / cfg.lr_drop_factor ** (epoch // cfg.lr_drop_every)


def confidence_at(fused_prob, index=None):
    """Maximum class probability of a sigmoid output: ``max(p, 1 - p)``."""
    p = fused_prob if index is None else fused_prob[index]
    if isinstance(p, torch.Tensor):
        return torch.maximum(p, 1 - p)
    return np.maximum(p, 1 - p) if isinstance(p, np.ndarray) else max(p, 1 - p)


@dataclass
class TrainLog:
    steps: list = field(default_factory=list)  # (step, epoch, LossBreakdown, lr)
    epoch_miou: list = field(default_factory=list)  # (epoch, best_miou, best_threshold)
    lr_trace: list = field(default_factory=list)  # lr per epoch

    def rows(self):
        for step, epoch, bd, lr in self.steps:
            yield (step, epoch, bd.contrast, bd.balance, bd.construction, bd.weight_decay, bd.total, lr)

    def to_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(LOG_COLUMNS)
            for row in self.rows():
                w.writerow([row[0], row[1]] + [repr(float(v)) for v in row[2:]])

    def miou_to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "best_miou", "best_threshold"])
            for e, m, t in self.epoch_miou:
                w.writerow([e, repr(float(m)), repr(float(t))])

    @property
    def best_miou(self) -> float:
        return max((m for _, m, _ in self.epoch_miou), default=float("nan"))

    @property
    def final_miou(self) -> float:
        return self.epoch_miou[-1][1] if self.epoch_miou else float("nan")


def _rng(cfg: TrainConfig, *keys) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, *keys])


def _to_chw(image: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.transpose(image, (2, 0, 1)), dtype=np.float32)


def _random_crop(sample: ImageSample, size: int, rng):
    h, w = sample.image.shape[:2]
    y = int(rng.integers(0, h - size + 1))
    x = int(rng.integers(0, w - size + 1))
    return sample.image[y:y + size, x:x + size], sample.mask[y:y + size, x:x + size]


def _jitter(img: np.ndarray, strength: float, rng) -> np.ndarray:
    if strength <= 0:
        return img
    gain = 1 + rng.uniform(-strength, strength)
    bias = rng.uniform(-strength, strength) * 0.5
    return np.clip(img * gain + bias, 0, 1).astype(np.float32)


def labeled_batch(samples_by_id, split: DatasetSplit, cfg: TrainConfig, epoch: int, step: int):
    ids = split.labeled_ids
    order = _rng(cfg, epoch, _LABELED_ORDER).permutation(len(ids))
    rng = _rng(cfg, epoch, step, _LABELED_CROP)
    imgs, masks = [], []
    for j in range(cfg.batch_labeled):
        s = samples_by_id[ids[order[(step * cfg.batch_labeled + j) % len(ids)]]]
        if cfg.full_image_labeled:
            img, m = s.image, s.mask
        else:
            img, m = _random_crop(s, cfg.crop_size, rng)
        imgs.append(_to_chw(img))
        masks.append(m[None].astype(np.float32))
    return torch.from_numpy(np.stack(imgs)), torch.from_numpy(np.stack(masks))


def unlabeled_batch(samples_by_id, split: DatasetSplit, cfg: TrainConfig, epoch: int, step: int):
    ids = split.unlabeled_ids
    order = _rng(cfg, epoch, _UNLABELED_ORDER).permutation(len(ids))
    rng = _rng(cfg, epoch, step, _UNLABELED_CROP)
    crops_a, crops_b, pairs = [], [], []
    for j in range(cfg.batch_unlabeled):
        s = samples_by_id[ids[order[(step * cfg.batch_unlabeled + j) % len(ids)]]]
        h, w = s.image.shape[:2]
        pair = crops.sample_crop_pair(h, w, cfg.crop_size, cfg.min_overlap_fraction, rng)
        crops_a.append(_to_chw(_jitter(crops.crop(s.image, pair.crop_a), cfg.crop_jitter, rng)))
        crops_b.append(_to_chw(_jitter(crops.crop(s.image, pair.crop_b), cfg.crop_jitter, rng)))
        pairs.append(pair)
    return torch.from_numpy(np.stack(crops_a + crops_b)), pairs


def _sample_negatives(n_cells: int, positives: np.ndarray, k: int, rng) -> np.ndarray:
    """K flat indices per anchor, uniform over the map minus the positive cell."""
    draw = rng.integers(0, n_cells - 1, size=(len(positives), k))
    return draw + (draw >= positives[:, None])


def _sample_negatives_by_label(anchor_labels: np.ndarray, other_labels: np.ndarray, k: int, rng):
    """K flat indices per anchor drawn from cells of the other crop whose
    pseudo-label differs from the anchor's; ``valid`` is False where the
    other crop has no such cell."""
    idx = np.zeros((len(anchor_labels), k), dtype=np.int64)
    valid = np.ones(len(anchor_labels), dtype=bool)
    for lab in (False, True):
        rows = np.flatnonzero(anchor_labels == lab)
        cands = np.flatnonzero(other_labels != lab)
        if len(rows) == 0:
            continue
        if len(cands) == 0:
            valid[rows] = False
            continue
        idx[rows] = cands[rng.integers(0, len(cands), size=(len(rows), k))]
    return idx, valid


def stage_contrastive_batch(out, pairs, stage: int, cfg: TrainConfig, rng):
    """Pool the positive pairs of every crop pair at one stage, both directions.

    Rows ``[:N]`` anchor in crop a (target crop b), rows ``[N:]`` the reverse.
    Returns None when no pair survives the stride quantisation.
    """
    stride = 2 ** (stage - 1)
    emb = out.stage_embeddings[stage - 1]
    prob = out.fused_prob.detach()[:, 0]
    conf = confidence_at(prob)
    n_img = len(pairs)
    c = conf.shape[-1]
    h, w = emb.shape[-2:]
    anchors, targets, conf_anc, conf_tgt, negs = [], [], [], [], []
    for i, pair in enumerate(pairs):
        ia, ib = crops.paired_index_arrays(pair, stride)
        if len(ia) == 0:
            continue
        if len(ia) > cfg.max_pairs:
            keep = np.sort(rng.choice(len(ia), size=cfg.max_pairs, replace=False))
            ia, ib = ia[keep], ib[keep]
        ea, eb = emb[i], emb[n_img + i]
        # confidence sampled at each cell's centre pixel (nearest neighbour)
        off = (stride - 1) // 2
        pa = np.minimum(ia * stride + off, c - 1)
        pb = np.minimum(ib * stride + off, c - 1)
        ca = conf[i][pa[:, 0], pa[:, 1]]
        cb = conf[n_img + i][pb[:, 0], pb[:, 1]]
        va = ea[:, ia[:, 0], ia[:, 1]].T
        vb = eb[:, ib[:, 0], ib[:, 1]].T
        flat_a = ea.reshape(ea.shape[0], -1).T
        flat_b = eb.reshape(eb.shape[0], -1).T
        k = cfg.n_negatives
        if h * w < 2:
            continue
        ok_a = ok_b = torch.ones(len(ia), dtype=torch.bool)
        if cfg.negatives == "uniform":
            neg_for_a = flat_b[_sample_negatives(h * w, ib[:, 0] * w + ib[:, 1], k, rng)]
            neg_for_b = flat_a[_sample_negatives(h * w, ia[:, 0] * w + ia[:, 1], k, rng)]
        else:
            cells = np.minimum(np.arange(h) * stride + off, c - 1)[:, None], \
                np.minimum(np.arange(w) * stride + off, c - 1)[None, :]
            lab_a = (prob[i][cells] >= 0.5).numpy().ravel()
            lab_b = (prob[n_img + i][cells] >= 0.5).numpy().ravel()
            ja, ok_a = _sample_negatives_by_label(lab_a[ia[:, 0] * w + ia[:, 1]], lab_b, k, rng)
            jb, ok_b = _sample_negatives_by_label(lab_b[ib[:, 0] * w + ib[:, 1]], lab_a, k, rng)
            neg_for_a, neg_for_b = flat_b[ja], flat_a[jb]
            # anchors without a usable negative are gated out
            ok_a, ok_b = torch.from_numpy(ok_a), torch.from_numpy(ok_b)
        anchors += [va, vb]
        targets += [vb, va]
        conf_anc += [torch.where(ok_a, ca, 0.0), torch.where(ok_b, cb, 0.0)]
        conf_tgt += [cb, ca]
        # negatives belong to the target crop and are held fixed like the target
        negs += [neg_for_a.detach(), neg_for_b.detach()]
    if not anchors:
        return None
    return losses.ContrastiveBatch(
        torch.cat(anchors), torch.cat(targets), torch.cat(conf_anc), torch.cat(conf_tgt),
        torch.cat(negs), tau=cfg.tau, alpha_conf=cfg.alpha_conf)


def _labeled_terms(model: CRSeg, images, masks, cfg: TrainConfig):
    out = model(images, with_embeddings=False)
    probs = out.side_probs + [out.fused_prob]
    balance = [losses.balance_loss(p, masks, cfg.alpha_exp, weighting=cfg.weighting) for p in probs]
    construction = losses.construction_loss(out.fused_prob, masks, cfg.construction_reduction)
    return balance, construction


def train_step(model, optimizer, samples_by_id, split, cfg: TrainConfig, epoch: int, step: int):
    """One optimisation step; returns the :class:`LossBreakdown`.

    ``per_stage`` holds the five side outputs followed by the fused output
    (whose contrast entry is always zero).
    """
    model.train()
    images, masks = labeled_batch(samples_by_id, split, cfg, epoch, step)
    balance, construction = _labeled_terms(model, images, masks, cfg)
    zero = torch.zeros(())
    contrast = [zero] * 5
    if cfg.mode == "semi" and cfg.w_contrast != 0:
        u_images, pairs = unlabeled_batch(samples_by_id, split, cfg, epoch, step)
        out = model(u_images)
        rng = _rng(cfg, epoch, step, _PAIRS)
        for stage in cfg.contrast_stages:
            batch = stage_contrastive_batch(out, pairs, stage, cfg, rng)
            if batch is not None:
                contrast[stage - 1] = losses.contrastive_loss(batch, cfg.include_positive)
    wd = losses.weight_decay_loss(losses.decay_parameters(model), cfg.lambda_wd)
    stage_terms = [(cfg.w_contrast * c, cfg.w_balance * b) for c, b in zip(contrast + [zero], balance)]
    breakdown, total = losses.total_loss(stage_terms, cfg.w_construction * construction,
                                         cfg.w_weight_decay * wd, return_tensor=True)
    optimizer.zero_grad(set_to_none=True)
    total.backward()
    optimizer.step()
    return breakdown


def predict_probs(model: CRSeg, samples, batch_size: int = 8):
    """Fused foreground probability (H x W numpy) for each sample."""
    model.eval()
    out = []
    with torch.no_grad():
        for k in range(0, len(samples), batch_size):
            chunk = samples[k:k + batch_size]
            x = torch.from_numpy(np.stack([_to_chw(s.image) for s in chunk]))
            out.extend(model(x, with_embeddings=False).fused_prob[:, 0].numpy())
    return out


def evaluate_model(model: CRSeg, samples, thresholds=DEFAULT_THRESHOLDS):
    acc = SweepAccumulator(thresholds)
    for prob, s in zip(predict_probs(model, samples), samples):
        acc.update(prob, s.mask)
    return acc.report()


def check_split(samples_by_id, split: DatasetSplit, cfg: TrainConfig) -> None:
    if not split.labeled_ids:
        raise ConfigError("the labeled split is empty")
    if cfg.mode == "semi" and cfg.w_contrast != 0 and not split.unlabeled_ids:
        raise ConfigError("semi mode needs unlabeled data")
    for sid in split.labeled_ids:
        if sid not in samples_by_id or samples_by_id[sid].mask is None:
            raise ConfigError(f"labeled id {sid} has no mask in the dataset")
    for sid in split.unlabeled_ids:
        if sid not in samples_by_id:
            raise ConfigError(f"unlabeled id {sid} is not in the dataset")
    sizes = {samples_by_id[i].image.shape[:2] for i in split.labeled_ids + split.unlabeled_ids}
    if cfg.crop_size > min(min(s) for s in sizes) and not cfg.full_image_labeled:
        raise ConfigError(f"crop_size {cfg.crop_size} exceeds the smallest image")


def train(model: CRSeg | None, samples, split: DatasetSplit, cfg: TrainConfig,
          val_samples=None, log_csv=None, checkpoint_dir=None, progress=None):
    """Train ``model`` (built from ``cfg`` when None) and return ``(model, TrainLog)``."""
    cfg.validate()
    samples_by_id = {s.id: s for s in samples}
    check_split(samples_by_id, split, cfg)
    if model is None:
        model = build_crseg(cfg.model_config(), cfg.seed)
    optimizer = torch.optim.SGD(model.parameters(), lr=cfg.lr0, momentum=cfg.momentum)
    steps_per_epoch = cfg.steps_per_epoch or math.ceil(len(split.labeled_ids) / cfg.batch_labeled)
    tlog = TrainLog()
    step = 0
    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg)
        for group in optimizer.param_groups:
            group["lr"] = lr
        tlog.lr_trace.append(lr)
        for k in range(steps_per_epoch):
            bd = train_step(model, optimizer, samples_by_id, split, cfg, epoch, k)
            if not math.isfinite(bd.total):
                raise FloatingPointError(f"non-finite loss at epoch {epoch} step {k}: {bd}")
            tlog.steps.append((step, epoch, bd, lr))
            step += 1
        if val_samples and ((epoch + 1) % cfg.eval_every == 0 or epoch == cfg.epochs - 1):
            rep = evaluate_model(model, val_samples)
            tlog.epoch_miou.append((epoch, rep.best_miou, rep.best_threshold))
            log.info("epoch %d lr %.2e loss %.4f val miou %.4f", epoch, lr, bd.total, rep.best_miou)
        if progress is not None:
            progress(epoch, tlog)
        if checkpoint_dir and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(model, Path(checkpoint_dir) / f"epoch_{epoch + 1:04d}.npz")
    if log_csv:
        tlog.to_csv(log_csv)
    if checkpoint_dir:
        save_checkpoint(model, Path(checkpoint_dir) / "final.npz")
    return model, tlog


def cascade_samples(samples, aux_masks, surface_model: CRSeg, which: str):
    """Edge or centerline training samples: image plus predicted surface channel.

    ``aux_masks[k]`` is an ``(edge, centerline)`` pair, or None for an
    unlabeled sample.
    """
    idx = {"edge": 0, "centerline": 1}[which]
    probs = predict_probs(surface_model, samples)
    out = []
    for s, p, aux in zip(samples, probs, aux_masks):
        img = np.concatenate([s.image, p[:, :, None].astype(np.float32)], axis=2)
        mask = None if aux is None else aux[idx].astype(np.uint8)
        out.append(ImageSample(f"{s.id}_{which}", img, mask, mask is not None))
    return out
