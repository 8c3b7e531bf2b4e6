"""Training, checkpointing, inference and evaluation runs."""
from __future__ import annotations

import dataclasses
import hashlib
import logging
import random
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
import torch

from . import objective
from .core import ConfigError, ModelConfig, coerce_value, format_kv, parse_kv, validate_config
from .datapipe import (AugmentationConfig, DatasetManifest, InferenceDataset, PolypDataset,
                       build_manifest, full_manifest)
from .decoder import MISNet
from .io import list_by_stem, write_prob_map
from .layers import resize_to
from .metrics import evaluate_dataset

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "misnet-checkpoint"
CHECKPOINT_VERSION = 1

ABLATIONS = {
    "wo_lfm1": dict(use_lfm_ssfm=False, use_ssfm=False),
    "wo_lfm2": dict(use_lfm_bwm=False),
    "wo_hfm": dict(use_hfm=False, use_ssfm=False),
    "wo_ssfm": dict(use_ssfm=False),
    "wo_pam": dict(use_pam=False),
    "pa_ra_only": dict(use_pa_ba=False),
    "pa_ba_only": dict(use_pa_ra=False),
    "wo_bwm": dict(use_bwm=False),
}


class CheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 300
    batch_size: int = 16
    lr: float = 1e-5
    weight_decay: float = 1e-5
    power: float = 0.9
    clip: float = 0.5
    seed: int = 3407
    augment: bool = True
    num_workers: int = 0
    loss_window: int = 31
    loss_multiplier: float = 5.0


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()

    def to_text(self) -> str:
        return ("# model\n" + format_kv(dataclasses.asdict(self.model))
                + "# training\n" + format_kv(dataclasses.asdict(self.train)))

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        values = parse_kv(text)
        model_keys = {f.name for f in fields(ModelConfig)}
        train_fields = {f.name: f for f in fields(TrainConfig)}
        unknown = sorted(set(values) - model_keys - set(train_fields))
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        model = ModelConfig.from_mapping({k: v for k, v in values.items() if k in model_keys})
        train = TrainConfig(**{k: coerce_value(v, type(train_fields[k].default), k)
                               for k, v in values.items() if k in train_fields})
        return cls(validate_config(model), train)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_text(Path(path).read_text())

    def with_overrides(self, model=None, train=None) -> "RunConfig":
        m = dataclasses.replace(self.model, **(model or {}))
        t = dataclasses.replace(self.train, **(train or {}))
        return RunConfig(validate_config(m), t)

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()


@dataclass
class RunArtifacts:
    run_dir: Path
    config_path: Path
    log_path: Path
    latest: Path
    best: Path
    epochs_done: int = 0
    best_val_mdice: float = -1.0
    final_train_loss: float = float("nan")
    history: list = dataclasses.field(default_factory=list)


def seed_everything(seed: int):
    random.seed(seed)
    np.random.seed(seed % 2 ** 32)
    torch.manual_seed(seed)


# -- checkpoints ------------------------------------------------------------------

def save_checkpoint(path, model, cfg: RunConfig, epoch, optimizer=None, **extra) -> Path:
    path = Path(path)
    state = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config_text": cfg.to_text(),
        "config_hash": cfg.digest,
        "epoch": epoch,
        "manifest": {k: list(v.shape) for k, v in model.state_dict().items()},
        "model": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "torch_rng": torch.get_rng_state(),
        **extra,
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(state, tmp)
    tmp.replace(path)
    return path


def load_checkpoint(path, expected: RunConfig | None = None, force=False) -> dict:
    try:
        state = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(state, dict) or state.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a model checkpoint")
    if state.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {state.get('version')}")
    for key in ("config_text", "config_hash", "epoch", "manifest", "model"):
        if key not in state:
            raise CheckpointError(f"{path}: missing field {key!r}")
    cfg = RunConfig.from_text(state["config_text"])
    if cfg.digest != state["config_hash"]:
        raise CheckpointError(f"{path}: stored config does not match its hash")
    if expected is not None and expected.digest != state["config_hash"] and not force:
        raise CheckpointError(f"{path}: checkpoint config differs from the requested config (use --force)")
    state["config"] = cfg
    return state


def model_from_checkpoint(path, force=False) -> tuple[MISNet, RunConfig]:
    """Rebuild a model from its checkpoint, checked against the run's config snapshot if present."""
    snapshot = Path(path).parent / "config.txt"
    expected = RunConfig.load(snapshot) if snapshot.exists() else None
    state = load_checkpoint(path, expected=expected, force=force)
    cfg = state["config"]
    model = MISNet(cfg.model, load_pretrained=False)
    expected = {k: list(v.shape) for k, v in model.state_dict().items()}
    if expected != state["manifest"]:
        raise CheckpointError(f"{path}: parameter manifest does not match the model built from its config")
    model.load_state_dict(state["model"])
    return model.eval(), cfg


# -- training -----------------------------------------------------------------------

def _format_step(**kv):
    parts = []
    for k, v in kv.items():
        parts.append(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}")
    return " ".join(parts)


@torch.no_grad()
def mean_dice(model, loader, threshold=0.5) -> float:
    model.eval()
    scores = []
    for images, masks, _ in loader:
        pred = model(images).final >= threshold
        gt = masks >= 0.5
        inter = (pred & gt).flatten(1).sum(1).double()
        total = pred.flatten(1).sum(1).double() + gt.flatten(1).sum(1).double()
        dice = torch.where(total > 0, 2 * inter / total.clamp(min=1), torch.ones_like(total))
        scores += dice.tolist()
    return float(np.mean(scores)) if scores else float("nan")


def train(cfg: RunConfig, data_root, out_dir, resume=False, manifest: DatasetManifest | None = None,
          log_every=1, force=False) -> RunArtifacts:
    """Train a model, validating by mDice after each epoch.

    ``out_dir`` receives ``config.txt`` (written first), ``train.log``,
    ``manifest.tsv``, ``latest.pt`` and ``best.pt``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    arts = RunArtifacts(out, out / "config.txt", out / "train.log", out / "latest.pt", out / "best.pt")
    if resume and arts.config_path.exists() and not force:
        if RunConfig.load(arts.config_path).digest != cfg.digest:
            raise CheckpointError(f"{arts.config_path} differs from the requested config (use --force)")
    arts.config_path.write_text(cfg.to_text())

    tc, mc = cfg.train, cfg.model
    seed_everything(tc.seed)
    torch.use_deterministic_algorithms(True, warn_only=True)
    manifest = manifest or build_manifest(data_root, split_seed=tc.seed)
    manifest.write(out / "manifest.tsv")

    model = MISNet(mc)
    desc = model.backbone.desc
    aug = AugmentationConfig(train_size=mc.train_size, seed=tc.seed) if tc.augment else None
    train_set = PolypDataset(manifest.pairs("train"), mc.train_size, aug, tc.seed, desc.norm_mean, desc.norm_std)
    val_pairs = manifest.pairs("val") or manifest.pairs("train")
    val_set = PolypDataset(val_pairs, mc.train_size, None, tc.seed, desc.norm_mean, desc.norm_std)
    if not len(train_set):
        raise ValueError("training split is empty")
    gen = torch.Generator().manual_seed(tc.seed)
    train_loader = torch.utils.data.DataLoader(train_set, batch_size=tc.batch_size, shuffle=True,
                                               num_workers=tc.num_workers, generator=gen)
    val_loader = torch.utils.data.DataLoader(val_set, batch_size=tc.batch_size, num_workers=tc.num_workers)
    optimizer = objective.make_optimizer(model.parameters(), tc.lr, tc.weight_decay)

    start = 0
    if resume and arts.latest.exists():
        state = load_checkpoint(arts.latest, expected=cfg, force=force)
        model.load_state_dict(state["model"])
        optimizer.load_state_dict(state["optimizer"])
        torch.set_rng_state(state["torch_rng"])
        gen.set_state(state["loader_rng"])
        start = state["epoch"] + 1
        arts.best_val_mdice = state.get("best_val_mdice", -1.0)
        log.info("resuming from epoch %d", start)
    elif arts.log_path.exists():
        arts.log_path.unlink()

    with arts.log_path.open("a") as logf:
        for epoch in range(start, tc.epochs):
            lr = objective.poly_lr(epoch, tc.epochs, tc.lr, tc.power)
            objective.set_lr(optimizer, lr)
            train_set.epoch = epoch
            model.train()
            losses = []
            for step, (images, masks, _) in enumerate(train_loader):
                if images.shape[0] < 2:
                    # batch-norm over a single sample is undefined in train mode
                    continue
                out_maps = model(images)
                report = objective.total_loss(out_maps, masks, tc.loss_window, tc.loss_multiplier)
                optimizer.zero_grad(set_to_none=True)
                report.total.backward()
                if tc.clip > 0:
                    torch.nn.utils.clip_grad_norm_(model.parameters(), tc.clip)
                optimizer.step()
                losses.append(report.total.item())
                if step % log_every == 0:
                    logf.write(_format_step(epoch=epoch, step=step, lr=lr, total=report.total.item(),
                                            **report.per_map) + "\n")
            val = mean_dice(model, val_loader)
            train_loss = float(np.mean(losses)) if losses else float("nan")
            arts.final_train_loss = train_loss
            arts.history.append({"epoch": epoch, "train_loss": train_loss, "val_mdice": val})
            is_best = val > arts.best_val_mdice
            if is_best:
                arts.best_val_mdice = val
            logf.write(_format_step(epoch=epoch, train_loss=train_loss, val_mdice=val,
                                    best=int(is_best)) + "\n")
            logf.flush()
            extra = dict(val_mdice=val, best_val_mdice=arts.best_val_mdice, loader_rng=gen.get_state(),
                         train_loss=train_loss)
            save_checkpoint(arts.latest, model, cfg, epoch, optimizer, **extra)
            if is_best:
                save_checkpoint(arts.best, model, cfg, epoch, None, **extra)
            arts.epochs_done = epoch + 1
    return arts


def ablation_config(base: RunConfig, variant: str) -> RunConfig:
    try:
        overrides = ABLATIONS[variant]
    except KeyError:
        raise ConfigError(f"unknown ablation variant {variant!r}; known: {sorted(ABLATIONS)}") from None
    return base.with_overrides(model=overrides)


def ablate(base: RunConfig, variants, data_root, out_dir, **train_kw) -> dict:
    cfgs = {v: ablation_config(base, v) for v in variants}   # validate all names up front
    return {v: train(c, data_root, Path(out_dir) / v, **train_kw) for v, c in cfgs.items()}


# -- inference / evaluation ------------------------------------------------------------

@torch.no_grad()
def predict(model: MISNet, image_paths, out_dir, size=None, batch_size=4) -> list[Path]:
    """Write one 8-bit probability PNG per image, at the image's own resolution."""
    model.eval()
    size = size or model.cfg.train_size
    desc = model.backbone.desc
    ds = InferenceDataset(image_paths, size, desc.norm_mean, desc.norm_std)
    loader = torch.utils.data.DataLoader(ds, batch_size=batch_size)
    written = []
    for images, stems, origs in loader:
        logits = model(images).m3
        for i, stem in enumerate(stems):
            h, w = origs[i].tolist()
            prob = torch.sigmoid(resize_to(logits[i:i + 1], (h, w)))[0, 0].double().numpy()
            written.append(write_prob_map(prob, Path(out_dir) / f"{stem}.png"))
    return written


def dataset_dirs(data_root) -> dict[str, Path]:
    """``{dataset_id: dir}`` for a single dataset root or a directory of datasets."""
    root = Path(data_root)
    if (root / "images").is_dir():
        return {root.resolve().name: root}
    found = {p.name: p for p in sorted(root.iterdir()) if (p / "images").is_dir() and (p / "masks").is_dir()}
    if not found:
        raise FileNotFoundError(f"no dataset (images/ + masks/) found under {root}")
    return found


def _run_manifest(checkpoint):
    path = Path(checkpoint).parent / "manifest.tsv"
    return DatasetManifest.read(path) if path.exists() else None


def eval_pairs(root, name, run_manifest=None) -> list[tuple[Path, Path]]:
    """Test pairs of a dataset: its held-out split if the run trained on it, else every pair."""
    pairs = full_manifest(root, name).pairs()
    if run_manifest is None:
        return pairs
    trained_on = {Path(msk).resolve() for _, msk in run_manifest.pairs()}
    if not any(Path(msk).resolve() in trained_on for _, msk in pairs):
        return pairs
    test = run_manifest.pairs("test")
    if not test:
        log.warning("%s: training split has no test images; evaluating every pair", name)
        return pairs
    return test


def evaluate(data_root, out_dir, checkpoint=None, predictions=None, threshold_mode="fixed",
             force=False, run_manifest=None) -> dict:
    """Score each dataset under ``data_root`` and write ``<dataset>.csv`` / ``<dataset>.md``.

    Predictions come from ``checkpoint`` (inferred into ``out_dir/predictions``)
    or from an existing ``predictions`` directory, laid out per dataset. A
    dataset that the run was trained on is scored on its test split only; the
    run manifest is read from the checkpoint's directory unless given.
    """
    if (checkpoint is None) == (predictions is None):
        raise ValueError("give exactly one of checkpoint or predictions")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model = None
    if checkpoint is not None:
        model, _ = model_from_checkpoint(checkpoint, force=force)
        run_manifest = run_manifest or _run_manifest(checkpoint)
    datasets = dataset_dirs(data_root)
    reports = {}
    for name, root in datasets.items():
        pairs = eval_pairs(root, name, run_manifest)
        stems = [Path(img).stem for img, _ in pairs]
        if model is not None:
            pred_dir = out / "predictions" / name
            predict(model, [img for img, _ in pairs], pred_dir)
        else:
            pred_dir = Path(predictions)
            if len(datasets) > 1 or (pred_dir / name).is_dir():
                pred_dir = pred_dir / name
        report = evaluate_dataset(pred_dir, root / "masks", dataset_id=name, threshold_mode=threshold_mode,
                                  stems=stems if run_manifest is not None else None)
        report.write_csv(out / f"{name}.csv")
        report.write_markdown(out / f"{name}.md")
        reports[name] = report
    (out / "summary.md").write_text("\n".join(r.to_markdown() for r in reports.values()))
    return reports


def image_paths(directory) -> list[Path]:
    return list(list_by_stem(directory).values())
