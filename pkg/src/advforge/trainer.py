"""Generator optimization: dual-term cosine alignment loss and the train loop.

The loss pulls the adversarial image's features toward the target image's
features and, weighted by alpha, pulls the perturbation's own features the
same way. The extractor stays frozen; gradients reach only the generator.
"""

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import torch

from .curation import ClassPartition
from .errors import ConfigError, ContractError, CurationError, IntegrityError, NonFiniteError
from .generator import GeneratorConfig, TargetConditionedUnet, build_generator, clip_to_budget
from .utils import load_image_batch, read_json, rng_from, state_dict_hash, write_json

log = logging.getLogger(__name__)

NORM_FLOOR = 1e-12


@dataclass
class TrainConfig:
    alpha: float = 0.5
    epochs: int = 20
    batch_size: int = 32
    lr: float = 2e-4
    weight_decay: float = 1e-4
    seed: int = 0
    deterministic: bool = False
    clip_delta: bool = True  # second loss term sees the clipped output (default) or the raw one
    lr_schedule: str = "cosine"

    def __post_init__(self):
        if self.alpha < 0:
            raise ConfigError("alpha must be >= 0")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")


@dataclass
class LossBreakdown:
    total: torch.Tensor
    term_adv: torch.Tensor
    term_delta: torch.Tensor

    def as_floats(self):
        return float(self.total), float(self.term_adv), float(self.term_delta)


def cosine_distance(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """1 - cos(a, b) per row, in [0, 2]. Near-zero norms are floored and logged."""
    if a.shape != b.shape:
        raise ContractError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.ndim == 1:
        a, b = a[None, :], b[None, :]
        squeeze = True
    else:
        squeeze = False
    na = a.norm(dim=1)
    nb = b.norm(dim=1)
    if bool((na < NORM_FLOOR).any()) or bool((nb < NORM_FLOOR).any()):
        log.warning("cosine_distance: norm below %.0e floored", NORM_FLOOR)
    denom = na.clamp_min(NORM_FLOOR) * nb.clamp_min(NORM_FLOOR)
    d = 1.0 - (a * b).sum(dim=1) / denom
    return d[0] if squeeze else d


def target_alignment_loss(gen, extractor, x_s, x_t, alpha: float, clip_delta: bool = True) -> LossBreakdown:
    """Dual cosine objective on a batch of (source image, target image) pairs.

    term_adv aligns features of the clipped adversarial image with the
    target's; term_delta aligns features of the perturbation itself with
    the target's; total = term_adv + alpha * term_delta (batch means).
    """
    with torch.no_grad():
        f_t = extractor.extract_features(x_t)
    return alignment_loss_from_features(gen, extractor, x_s, f_t, alpha, clip_delta)


def alignment_loss_from_features(gen, extractor, x_s, f_t, alpha: float, clip_delta: bool = True) -> LossBreakdown:
    """Same objective with the target features already extracted."""
    raw = gen(x_s, f_t)
    x_adv = clip_to_budget(raw, x_s, gen.config.epsilon)
    f_adv = extractor.extract_features(x_adv)
    delta = (x_adv if clip_delta else raw) - x_s
    f_delta = extractor.extract_features(delta)

    term_adv = cosine_distance(f_adv, f_t).mean()
    term_delta = cosine_distance(f_delta, f_t).mean()
    return LossBreakdown(total=term_adv + alpha * term_delta, term_adv=term_adv, term_delta=term_delta)


class _TargetSampler:
    """Uniform class then uniform curated image; features precomputed once."""

    def __init__(self, partition: ClassPartition, extractor, batch_size=64):
        self.classes = list(partition.known)
        self.paths = {c: [p for p, _ in partition.samples[c]] for c in self.classes}
        unique = sorted({p for ps in self.paths.values() for p in ps})
        feats = []
        for start in range(0, len(unique), batch_size):
            chunk = unique[start : start + batch_size]
            batch = load_image_batch(chunk, size=extractor.input_spec.size)
            with torch.no_grad():
                feats.append(extractor.extract_features(batch))
        table = torch.cat(feats) if feats else torch.zeros(0, extractor.feature_dim)
        self._index = {p: i for i, p in enumerate(unique)}
        self._features = table

    def draw(self, rng, count):
        cls_idx = rng.integers(0, len(self.classes), size=count)
        rows = []
        for ci in cls_idx:
            paths = self.paths[self.classes[ci]]
            rows.append(self._index[paths[rng.integers(len(paths))]])
        return self._features[torch.tensor(rows, dtype=torch.long)]


def _epoch_lr(cfg: TrainConfig, epoch: int) -> float:
    if cfg.lr_schedule == "cosine":
        return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * epoch / cfg.epochs))
    if cfg.lr_schedule == "constant":
        return cfg.lr
    raise ConfigError(f"unknown lr_schedule {cfg.lr_schedule!r}")


def train(
    partition: ClassPartition,
    surrogate,
    gen_cfg: GeneratorConfig,
    train_cfg: TrainConfig,
    run_dir,
    resume_from=None,
) -> tuple:
    """Optimize a generator against the frozen surrogate; returns (generator, history).

    Writes one checkpoint directory per epoch plus an append-only JSONL log
    with a record per step. Deterministic under a fixed seed: every random
    draw is derived from (seed, epoch), so resuming from any epoch
    checkpoint reproduces the uninterrupted run exactly.
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    if train_cfg.deterministic:
        from .utils import set_determinism

        set_determinism(True)

    partition.validate()
    if gen_cfg.feature_dim != surrogate.feature_dim:
        raise ContractError(
            f"generator feature_dim {gen_cfg.feature_dim} != surrogate feature_dim {surrogate.feature_dim}"
        )
    frozen_before = surrogate.parameter_checksum()

    source_paths = _scan_sources(partition)
    sources = load_image_batch(source_paths, size=surrogate.input_spec.size)
    sampler = _TargetSampler(partition, surrogate)

    start_epoch = 0
    if resume_from is not None:
        gen, manifest = load_checkpoint(resume_from, expected_feature_dim=surrogate.feature_dim)
        gen.train()
        opt = torch.optim.AdamW(gen.parameters(), lr=train_cfg.lr, weight_decay=train_cfg.weight_decay)
        opt_state = torch.load(Path(resume_from) / "optimizer.pt", map_location="cpu", weights_only=True)
        opt.load_state_dict(opt_state)
        start_epoch = int(manifest["epochs_trained"])
    else:
        gen = build_generator(gen_cfg, seed=train_cfg.seed)
        opt = torch.optim.AdamW(gen.parameters(), lr=train_cfg.lr, weight_decay=train_cfg.weight_decay)

    log_path = run_dir / "train_log.jsonl"
    history = []
    for epoch in range(start_epoch, train_cfg.epochs):
        lr = _epoch_lr(train_cfg, epoch)
        for group in opt.param_groups:
            group["lr"] = lr
        rng = rng_from(train_cfg.seed, "epoch", epoch)
        order = rng.permutation(len(sources))
        epoch_losses = []
        for step, start in enumerate(range(0, len(order), train_cfg.batch_size)):
            idx = torch.from_numpy(order[start : start + train_cfg.batch_size].copy())
            x_s = sources[idx]
            f_rows = sampler.draw(rng, len(idx))
            breakdown = _step_loss(gen, surrogate, x_s, f_rows, train_cfg)
            total, term_adv, term_delta = breakdown.as_floats()
            if not math.isfinite(total):
                _dump_diagnostics(run_dir, gen, epoch, step, breakdown)
                raise NonFiniteError(f"non-finite loss at epoch {epoch} step {step}: {total}")
            opt.zero_grad()
            breakdown.total.backward()
            opt.step()
            epoch_losses.append(total)
            with open(log_path, "a") as f:
                f.write(json.dumps({
                    "epoch": epoch, "step": step, "term_adv": term_adv,
                    "term_delta": term_delta, "total": total, "lr": lr,
                }) + "\n")
        history.append({"epoch": epoch, "mean_loss": sum(epoch_losses) / len(epoch_losses), "lr": lr})
        save_checkpoint(
            gen,
            run_dir / "checkpoints" / f"epoch{epoch:04d}",
            epochs_trained=epoch + 1,
            surrogate_id=surrogate.id,
            train_cfg=train_cfg,
            partition=partition,
            optimizer=opt,
        )

    if surrogate.parameter_checksum() != frozen_before:
        raise IntegrityError("surrogate parameters changed during training")
    return gen, history


def _scan_sources(partition: ClassPartition):
    root = Path(partition.dataset_root) / partition.train_split
    paths = sorted(str(p) for cls in root.iterdir() if cls.is_dir() for p in cls.iterdir() if p.is_file())
    if not paths:
        raise CurationError(f"no training images under {root}")
    return paths


def _step_loss(gen, surrogate, x_s, f_t_rows, train_cfg):
    return alignment_loss_from_features(
        gen, surrogate, x_s, f_t_rows, train_cfg.alpha, train_cfg.clip_delta
    )


def _dump_diagnostics(run_dir, gen, epoch, step, breakdown):
    snap = Path(run_dir) / "diagnostics"
    snap.mkdir(parents=True, exist_ok=True)
    torch.save(gen.state_dict(), snap / "generator_at_abort.pt")
    write_json(snap / "abort.json", {
        "epoch": epoch,
        "step": step,
        "term_adv": float(breakdown.term_adv),
        "term_delta": float(breakdown.term_delta),
    })


def save_checkpoint(gen, ckpt_dir, epochs_trained, surrogate_id, train_cfg=None, partition=None, optimizer=None):
    """Write weights.pt + manifest.json (+ optimizer.pt when resuming matters)."""
    ckpt_dir = Path(ckpt_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    state = gen.state_dict()
    torch.save(state, ckpt_dir / "weights.pt")
    manifest = {
        "descriptor": gen.config.descriptor(),
        "content_hash": state_dict_hash(state),
        "epochs_trained": epochs_trained,
        "surrogate_id": surrogate_id,
        "alpha": train_cfg.alpha if train_cfg else None,
        "seed": train_cfg.seed if train_cfg else None,
        "epsilon": gen.config.epsilon,
        "n_known": len(partition.known) if partition else None,
        "samples_per_known": partition.samples_per_known if partition else None,
    }
    write_json(ckpt_dir / "manifest.json", manifest)
    if optimizer is not None:
        torch.save(optimizer.state_dict(), ckpt_dir / "optimizer.pt")
    return ckpt_dir


def load_checkpoint(ckpt_dir, expected_feature_dim=None):
    """Rebuild a generator from a checkpoint directory, verifying integrity."""
    ckpt_dir = Path(ckpt_dir)
    manifest = read_json(ckpt_dir / "manifest.json")
    cfg = GeneratorConfig.from_descriptor(manifest["descriptor"])
    if expected_feature_dim is not None and cfg.feature_dim != expected_feature_dim:
        raise ContractError(
            f"checkpoint feature_dim {cfg.feature_dim} does not match expected {expected_feature_dim}"
        )
    state = torch.load(ckpt_dir / "weights.pt", map_location="cpu", weights_only=True)
    if state_dict_hash(state) != manifest["content_hash"]:
        raise IntegrityError(f"{ckpt_dir}: weights do not match manifest content hash")
    gen = TargetConditionedUnet(cfg)
    gen.load_state_dict(state)
    gen.eval()
    return gen, manifest


def checkpoint_roundtrip(gen, tmp_dir, probe_batch=None):
    """Save-then-load; returns the reloaded generator (bit-exact on a probe)."""
    save_checkpoint(gen, tmp_dir, epochs_trained=0, surrogate_id="probe")
    reloaded, _ = load_checkpoint(tmp_dir)
    if probe_batch is not None:
        x_s, f_t = probe_batch
        with torch.no_grad():
            diff = (gen.craft(x_s, f_t) - reloaded.craft(x_s, f_t)).abs().max()
        if float(diff) != 0.0:
            raise IntegrityError(f"roundtrip probe mismatch: {float(diff)}")
    return reloaded
