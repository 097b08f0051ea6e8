"""Training, inference and evaluation."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .backbone import BackboneConfig
from .core import MultiModalCase, aggregate_with_missing, assd, dice_score
from .data import AugmentConfig, PatchSpec, augment, sample_patch
from .fusion import FusionConfig
from .io import write_metrics_csv
from .model import MAMLNet, SingleModalityNet
from .objective import mutual_learning_loss, seg_loss

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    def __init__(self, message, checkpoint_path=None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path


@dataclass
class TrainConfig:
    lr: float = 3e-4
    epochs: int = 200
    batch_size: int = 2
    lam: float = 0.5
    patch: PatchSpec = field(default_factory=PatchSpec)
    augment: AugmentConfig | None = field(default_factory=AugmentConfig)
    seed: int = 0
    deterministic: bool = True
    mimicry_weight: float = 0.0
    lr_schedule: str = "constant"  # or "poly"
    target_dice: float | None = None  # stop once training Dice reaches this
    eval_every: int = 5

    def __post_init__(self):
        if isinstance(self.patch, dict):
            self.patch = PatchSpec(**self.patch)
        if isinstance(self.augment, dict):
            self.augment = AugmentConfig(**self.augment)
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.lr_schedule not in ("constant", "poly"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")

    def to_dict(self):
        return asdict(self)


@dataclass
class Checkpoint:
    model: torch.nn.Module
    config: dict
    epoch: int = 0
    optimizer_state: dict | None = None
    metrics: dict = field(default_factory=dict)

    @property
    def modalities(self):
        return self.model.modalities

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        kind = "maml" if isinstance(self.model, MAMLNet) else "single"
        payload = {
            "version": CHECKPOINT_VERSION,
            "kind": kind,
            "modalities": list(self.model.modalities),
            "backbone": self.model.backbone_config.to_dict(),
            "fusion": self.model.fusion_config.to_dict() if kind == "maml" else None,
            "dtype": str(next(self.model.parameters()).dtype).removeprefix("torch."),
            "state_dict": self.model.state_dict(),
            "optimizer_state": self.optimizer_state,
            "epoch": self.epoch,
            "config": self.config,
            "metrics": self.metrics,
        }
        torch.save(payload, path)
        return path


def build_model(kind, modalities, backbone: BackboneConfig, fusion: FusionConfig | None = None):
    if kind == "maml":
        return MAMLNet(modalities, backbone, fusion)
    (modality,) = modalities
    return SingleModalityNet(modality, backbone)


def load_checkpoint(path) -> Checkpoint:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    fusion = FusionConfig(**payload["fusion"]) if payload["fusion"] else None
    model = build_model(payload["kind"], payload["modalities"], BackboneConfig(**payload["backbone"]), fusion)
    model.to(getattr(torch, payload["dtype"]))
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return Checkpoint(model, payload["config"], payload["epoch"], payload["optimizer_state"], payload["metrics"])


def set_determinism(seed, deterministic=True):
    torch.manual_seed(seed)
    if deterministic:
        torch.use_deterministic_algorithms(True)


def _to_tensor(arr, dtype):
    return torch.as_tensor(np.ascontiguousarray(arr), dtype=dtype)


def make_batch(cases, modalities, dtype=torch.float32):
    inputs = {m: _to_tensor(np.stack([c.volumes[m].data for c in cases])[:, None], dtype) for m in modalities}
    target = _to_tensor(np.stack([c.mask.data for c in cases]), dtype)
    return inputs, target


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: list
    epochs_run: int
    train_dice: float | None = None


def _lr_at(cfg: TrainConfig, epoch):
    if cfg.lr_schedule == "poly":
        return cfg.lr * (1 - epoch / cfg.epochs) ** 0.9
    return cfg.lr


def train(cases, config: TrainConfig | None = None, backbone: BackboneConfig | None = None,
          fusion: FusionConfig | None = None, modalities=None, baseline_modality=None,
          log_path=None, checkpoint_dir=None, dtype=torch.float32, extra_config=None,
          callback=None) -> TrainResult:
    """Train a MAML network (or, with ``baseline_modality``, a one-modality baseline).

    Every optimizer step samples ``batch_size`` patches, runs all modality
    backbones, the intra heads, the fusion and the joint head, and minimises
    the mutual-learning objective over all parameters with Adam.

    ``callback(epoch, checkpoint)`` runs after every epoch; returning True stops training.
    """
    cfg = config or TrainConfig()
    backbone = backbone or BackboneConfig()
    if not cases:
        raise ValueError("empty training set")
    if modalities is None:
        modalities = sorted(cases[0].volumes)
    modalities = tuple(sorted(modalities))
    for c in cases:
        if not set(modalities) <= set(c.volumes):
            raise ValueError(f"case {c.case_id} lacks modalities {sorted(set(modalities) - set(c.volumes))}")
        backbone.check_shape(tuple(min(p, s) for p, s in zip(cfg.patch.size, c.shape)))
    if baseline_modality is None and len(modalities) < 2:
        raise ValueError("mutual learning needs at least two modalities")

    set_determinism(cfg.seed, cfg.deterministic)
    rng = np.random.default_rng(cfg.seed)
    if baseline_modality is not None:
        model = SingleModalityNet(baseline_modality, backbone).to(dtype)
        used = (baseline_modality,)
    else:
        model = MAMLNet(modalities, backbone, fusion).to(dtype)
        used = modalities
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    snapshot = {"train": cfg.to_dict(), **(extra_config or {})}

    records = []
    fh = None
    if log_path:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        fh = open(log_path, "w")
    step = 0
    train_dice = None
    epoch = 0
    try:
        for epoch in range(1, cfg.epochs + 1):
            for group in opt.param_groups:
                group["lr"] = _lr_at(cfg, epoch - 1)
            order = rng.permutation(len(cases))
            model.train()
            for b in range(0, len(order), cfg.batch_size):
                batch = []
                for idx in order[b:b + cfg.batch_size]:
                    patch = sample_patch(cases[idx], cfg.patch, rng)
                    if cfg.augment is not None:
                        patch = augment(patch, rng, cfg.augment)
                    batch.append(patch)
                inputs, target = make_batch(batch, used, dtype)
                if baseline_modality is not None:
                    pred = model.forward_single(inputs[baseline_modality])
                    loss = seg_loss(pred, target)
                    rec_losses = {"intra": {baseline_modality: float(loss.detach())}, "joint": float("nan"),
                                  "mimicry": 0.0, "total": float(loss.detach()), "lambda": 1.0}
                else:
                    out = model(inputs)
                    parts = mutual_learning_loss(out.intra, out.joint, target, cfg.lam,
                                                 modalities, cfg.mimicry_weight)
                    loss = parts.total
                    rec_losses = parts.as_record()
                step += 1
                record = {"step": step, "epoch": epoch, **rec_losses}
                records.append(record)
                if fh:
                    fh.write(json.dumps(record) + "\n")
                if not math.isfinite(float(loss.detach())):
                    path = None
                    if checkpoint_dir:
                        path = Checkpoint(model, snapshot, epoch, opt.state_dict()).save(
                            Path(checkpoint_dir) / "diverged.pt")
                    raise TrainingDiverged(f"non-finite loss at step {step} (epoch {epoch})", path)
                opt.zero_grad()
                loss.backward()
                opt.step()
            if checkpoint_dir:
                Checkpoint(model, snapshot, epoch, opt.state_dict()).save(Path(checkpoint_dir) / "last.pt")
            if cfg.target_dice is not None and (epoch % cfg.eval_every == 0 or epoch == cfg.epochs):
                ck = Checkpoint(model, snapshot, epoch)
                mode = "multimodal" if baseline_modality is None else f"single:{baseline_modality}"
                train_dice = evaluate(cases, ck, mode, patch_size=cfg.patch.size).dice_mean
                log.info("epoch %d: training Dice %.4f", epoch, train_dice)
                if train_dice >= cfg.target_dice:
                    break
            if callback is not None and callback(epoch, Checkpoint(model, snapshot, epoch)):
                break
    finally:
        if fh:
            fh.close()
    model.eval()
    ck = Checkpoint(model, snapshot, epoch, opt.state_dict())
    if checkpoint_dir:
        ck.save(Path(checkpoint_dir) / "last.pt")
    return TrainResult(ck, records, epoch, train_dice)


# -- inference ---------------------------------------------------------------

def window_starts(size, window, overlap=0.5):
    """Start offsets covering ``[0, size)`` with windows overlapping by ``overlap``."""
    if window >= size:
        return [0]
    step = max(int(window * (1 - overlap)), 1)
    starts = list(range(0, size - window + 1, step))
    if starts[-1] != size - window:
        starts.append(size - window)
    return starts


def _model_of(ckpt):
    return ckpt.model if isinstance(ckpt, Checkpoint) else ckpt


def _patch_size(ckpt, patch_size):
    if patch_size is not None:
        return tuple(patch_size)
    if isinstance(ckpt, Checkpoint):
        return tuple(ckpt.config.get("train", {}).get("patch", {}).get("size", (32, 32, 32)))
    return (32, 32, 32)


def sliding_window(fn, shape, window, overlap=0.5):
    """Average ``fn(slices) -> dict[name, C x d x h x w array]`` over overlapping windows."""
    window = tuple(min(w, s) for w, s in zip(window, shape))
    acc, count = {}, np.zeros(shape, dtype=np.float64)
    for z in window_starts(shape[0], window[0], overlap):
        for y in window_starts(shape[1], window[1], overlap):
            for x in window_starts(shape[2], window[2], overlap):
                sl = (slice(z, z + window[0]), slice(y, y + window[1]), slice(x, x + window[2]))
                for name, arr in fn(sl).items():
                    if name not in acc:
                        acc[name] = np.zeros((arr.shape[0], *shape), dtype=np.float64)
                    acc[name][(slice(None), *sl)] += arr
                count[sl] += 1
    return {k: v / count for k, v in acc.items()}


@torch.no_grad()
def predict_multimodal_probs(case: MultiModalCase, ckpt, patch_size=None, overlap=0.5):
    model = _model_of(ckpt)
    if not isinstance(model, MAMLNet):
        raise TypeError("multimodal prediction needs a MAML checkpoint; use predict_single")
    missing = set(model.modalities) - set(case.volumes)
    if missing:
        raise KeyError(f"case {case.case_id} lacks {sorted(missing)}; use predict_single")
    dtype = next(model.parameters()).dtype
    model.eval()

    def run(sl):
        inputs = {m: _to_tensor(case.volumes[m].data[sl][None, None], dtype) for m in model.modalities}
        out = model(inputs)
        res = {"joint": out.joint[0].double().numpy()}
        for m, a in out.attention.items():
            res[f"att:{m}"] = a[0].double().numpy()
        return res

    res = sliding_window(run, case.shape, _patch_size(ckpt, patch_size), overlap)
    attention = {k.split(":", 1)[1]: v[0] for k, v in res.items() if k.startswith("att:")}
    return res["joint"], attention


def predict_multimodal(case: MultiModalCase, ckpt, patch_size=None, overlap=0.5):
    """Return ``(mask, attention)``: the argmax of the joint head and one
    ``D x H x W`` attention map per modality."""
    probs, attention = predict_multimodal_probs(case, ckpt, patch_size, overlap)
    return np.argmax(probs, axis=0).astype(np.uint8), attention


@torch.no_grad()
def predict_single_probs(volume, modality, ckpt, patch_size=None, overlap=0.5):
    model = _model_of(ckpt)
    if modality not in model.modalities:
        raise KeyError(f"unknown modality {modality!r}; checkpoint has {model.modalities}")
    data = volume.data if hasattr(volume, "data") else np.asarray(volume)
    dtype = next(model.parameters()).dtype
    model.eval()

    def run(sl):
        x = _to_tensor(data[sl][None, None], dtype)
        return {"p": model.forward_single(x, modality)[0].double().numpy()}

    return sliding_window(run, data.shape, _patch_size(ckpt, patch_size), overlap)["p"]


def predict_single(volume, modality, ckpt, patch_size=None, overlap=0.5):
    """Missing-modality inference through one backbone and its intra head."""
    probs = predict_single_probs(volume, modality, ckpt, patch_size, overlap)
    return np.argmax(probs, axis=0).astype(np.uint8)


# -- evaluation --------------------------------------------------------------

@dataclass
class EvalReport:
    mode: str
    rows: list  # (case_id, dice, assd)
    dice_mean: float
    dice_std: float
    assd_mean: float
    assd_std: float
    assd_missing: int

    def write_csv(self, path):
        return write_metrics_csv(path, self.rows)

    def table(self):
        lines = [
            f"mode: {self.mode}",
            f"{'case_id':<16}{'Dice [%]':>10}{'ASSD':>10}",
        ]
        for cid, d, s in self.rows:
            dist = "n/a" if math.isnan(s) else f"{s:.2f}"
            lines.append(f"{cid:<16}{100 * d:>10.2f}{dist:>10}")
        lines.append(
            f"{'mean ± std':<16}{100 * self.dice_mean:>6.2f} ± {100 * self.dice_std:.2f}"
            f"   {self.assd_mean:.2f} ± {self.assd_std:.2f}"
            + (f"  ({self.assd_missing} case(s) without ASSD)" if self.assd_missing else "")
        )
        return "\n".join(lines)

    def as_dict(self):
        return {
            "mode": self.mode, "dice_mean": self.dice_mean, "dice_std": self.dice_std,
            "assd_mean": self.assd_mean, "assd_std": self.assd_std, "assd_missing": self.assd_missing,
        }


def parse_mode(mode: str):
    if mode == "multimodal":
        return None
    if mode.startswith("single:") and len(mode) > len("single:"):
        return mode.split(":", 1)[1]
    raise ValueError(f"mode must be 'multimodal' or 'single:<modality>', got {mode!r}")


def evaluate(cases, ckpt, mode="multimodal", patch_size=None, overlap=0.5) -> EvalReport:
    """Per-case Dice and ASSD (in the cases' spacing units) plus mean ± std."""
    if not cases:
        raise ValueError("empty dataset")
    single = parse_mode(mode)
    rows = []
    for case in cases:
        if single is None:
            pred, _ = predict_multimodal(case, ckpt, patch_size, overlap)
        else:
            pred = predict_single(case.volumes[single], single, ckpt, patch_size, overlap)
        rows.append((case.case_id, dice_score(pred, case.mask), assd(pred, case.mask, case.spacing)))
    d_mean, d_std, _ = aggregate_with_missing([r[1] for r in rows])
    s_mean, s_std, missing = aggregate_with_missing([r[2] for r in rows])
    return EvalReport(mode, rows, d_mean, d_std, s_mean, s_std, missing)
