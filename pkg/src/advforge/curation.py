"""Training/evaluation data contract: class partition, sample and target pools.

Builds the known/unknown class split (similarity-greedy or random), ranks
per-class samples by classification loss, and assembles the target pools:
one minimum-loss train image per known class, ten low-loss validation
images per unknown class. The partition JSON written here is the contract
between curation, training and evaluation.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import ContractError, CurationError
from .utils import load_image_batch, read_json, rng_from, write_json

log = logging.getLogger(__name__)

FORMAT_VERSION = 1


@dataclass
class ClassPrototype:
    label: str
    mean_feature: torch.Tensor
    member_count: int


@dataclass
class ClassPartition:
    dataset_root: str
    train_split: str
    val_split: str
    known: list          # ordered class ids, |known| = n
    unknown: list
    samples_per_known: int
    strategy: str
    quality: str
    seed: int
    # class id -> list of (path, loss); ordering encodes selection priority
    samples: dict = field(default_factory=dict)

    def validate(self):
        overlap = set(self.known) & set(self.unknown)
        if overlap:
            raise CurationError(f"known/unknown overlap: {sorted(overlap)}")
        for c in self.known:
            if c not in self.samples or not self.samples[c]:
                raise CurationError(f"known class {c} has no curated samples")


@dataclass
class TargetPool:
    known: dict    # class id -> single image path
    unknown: dict  # class id -> list of up to 10 image paths (low-loss first)
    selection_mode: str = "fixed"

    def draw_unknown(self, class_id, seed: int, *salts) -> str:
        """Seeded test-time draw from the class's candidate images."""
        candidates = self.unknown[class_id]
        idx = int(rng_from(seed, "target-draw", class_id, *salts).integers(len(candidates)))
        return candidates[idx]


def list_class_dirs(dataset_root, split):
    root = Path(dataset_root) / split
    if not root.is_dir():
        raise CurationError(f"split directory {root} does not exist")
    return {p.name: sorted(str(f) for f in p.iterdir() if f.is_file()) for p in sorted(root.iterdir()) if p.is_dir()}


def _batched_features(extractor, paths, batch_size=64):
    feats = []
    for start in range(0, len(paths), batch_size):
        batch = load_image_batch(paths[start : start + batch_size], size=extractor.input_spec.size)
        with torch.no_grad():
            feats.append(extractor.extract_features(batch))
    return torch.cat(feats) if feats else torch.zeros(0, extractor.feature_dim)


def compute_class_prototypes(extractor, dataset_root, split, labels=None, batch_size=64):
    """Mean feature vector per class over that class's images."""
    by_class = list_class_dirs(dataset_root, split)
    labels = sorted(by_class) if labels is None else sorted(labels)
    protos = []
    for label in labels:
        paths = by_class.get(label, [])
        if not paths:
            raise CurationError(f"class {label} has no images under {dataset_root}/{split}")
        mean = _batched_features(extractor, paths, batch_size).mean(dim=0)
        if float(mean.norm()) == 0.0:
            raise CurationError(f"class {label}: degenerate all-zero prototype")
        protos.append(ClassPrototype(label=label, mean_feature=mean, member_count=len(paths)))
    return protos


def greedy_select_classes(prototypes, n: int, seed: int):
    """Pick n classes spreading out in feature space.

    The first class is drawn uniformly under the seed; every later pick is
    the remaining prototype with the lowest mean cosine similarity to the
    already-selected set, ties broken by lowest class id.
    """
    if n > len(prototypes):
        raise ContractError(f"cannot select {n} classes from a pool of {len(prototypes)}")
    if n == 0:
        return []
    protos = sorted(prototypes, key=lambda p: p.label)
    vecs = torch.stack([p.mean_feature for p in protos]).double()
    norms = vecs.norm(dim=1, keepdim=True)
    if (norms == 0).any():
        raise ContractError("greedy selection requires nonzero prototypes")
    unit = vecs / norms
    sim = (unit @ unit.T).numpy()

    first = int(rng_from(seed, "greedy-init").integers(len(protos)))
    selected = [first]
    remaining = [i for i in range(len(protos)) if i != first]
    while len(selected) < n:
        mean_sim = sim[np.ix_(remaining, selected)].mean(axis=1)
        pick = remaining[int(np.argmin(mean_sim))]  # argmin keeps first (lowest id) on ties
        selected.append(pick)
        remaining.remove(pick)
    return [protos[i].label for i in selected]


def random_select_classes(labels, n: int, seed: int):
    """Uniform sample without replacement, deterministic under seed."""
    labels = sorted(labels)
    if n > len(labels):
        raise ContractError(f"cannot select {n} classes from a pool of {len(labels)}")
    idx = rng_from(seed, "random-select").choice(len(labels), size=n, replace=False)
    return [labels[i] for i in idx]


def rank_samples_by_loss(extractor, class_label, paths, batch_size=64):
    """[(path, loss)] ascending by cross-entropy loss; equal losses break by path.

    `class_label` is the integer label index the extractor assigns to this
    class. Unreadable images are skipped with a warning.
    """
    if not paths:
        raise CurationError("rank_samples_by_loss requires at least one image")
    readable = []
    for p in paths:
        try:
            load_image_batch([p], size=extractor.input_spec.size)
            readable.append(p)
        except OSError as exc:
            log.warning("skipping unreadable image %s: %s", p, exc)
    if not readable:
        raise CurationError("no readable images in class")
    losses = []
    for start in range(0, len(readable), batch_size):
        chunk = readable[start : start + batch_size]
        batch = load_image_batch(chunk, size=extractor.input_spec.size)
        y = torch.full((len(chunk),), class_label, dtype=torch.long)
        with torch.no_grad():
            losses.extend(extractor.classification_loss(batch, y).tolist())
    return sorted(zip(readable, losses), key=lambda pl: (pl[1], pl[0]))


def _select_by_quality(ranked, m: int, quality: str, seed: int, class_id):
    """Choose min(m, available) samples; list order is selection priority.

    quality=high keeps the lowest-loss samples (ascending), low keeps the
    highest-loss samples (descending, i.e. the loss-order reverse of high),
    random keeps a seeded shuffle.
    """
    m = min(m, len(ranked))
    if quality == "high":
        return ranked[:m]
    if quality == "low":
        return list(reversed(ranked[-m:]))
    if quality == "random":
        idx = rng_from(seed, "quality-random", class_id).permutation(len(ranked))[:m]
        return [ranked[i] for i in idx]
    raise ContractError(f"quality must be low|high|random, got {quality!r}")


def build_partition(
    extractor,
    dataset_root,
    n: int,
    m_samples: int,
    strategy: str = "greedy",
    quality: str = "high",
    seed: int = 0,
    train_split: str = "train",
    val_split: str = "val",
) -> ClassPartition:
    """Known/unknown split plus per-known-class curated sample lists."""
    by_class = list_class_dirs(dataset_root, train_split)
    labels = sorted(by_class)
    if n > len(labels):
        raise ContractError(f"dataset has {len(labels)} classes, cannot pick {n} known")
    if m_samples < 1:
        raise ContractError("m_samples must be >= 1")

    if strategy == "greedy":
        protos = compute_class_prototypes(extractor, dataset_root, train_split, labels)
        known = greedy_select_classes(protos, n, seed)
    elif strategy == "random":
        known = random_select_classes(labels, n, seed)
    else:
        raise ContractError(f"strategy must be greedy|random, got {strategy!r}")

    unknown = [c for c in labels if c not in set(known)]
    samples = {}
    for c in known:
        ranked = rank_samples_by_loss(extractor, labels.index(c), by_class[c])
        samples[c] = _select_by_quality(ranked, m_samples, quality, seed, c)

    part = ClassPartition(
        dataset_root=str(dataset_root),
        train_split=train_split,
        val_split=val_split,
        known=known,
        unknown=unknown,
        samples_per_known=m_samples,
        strategy=strategy,
        quality=quality,
        seed=seed,
        samples=samples,
    )
    part.validate()
    return part


def build_target_pool(extractor, partition: ClassPartition, pool_size: int = 10) -> TargetPool:
    """Known: min-loss train sample per class. Unknown: lowest-loss val images."""
    labels = sorted(list_class_dirs(partition.dataset_root, partition.train_split))
    train_dirs = list_class_dirs(partition.dataset_root, partition.train_split)
    val_dirs = list_class_dirs(partition.dataset_root, partition.val_split)

    known = {}
    for c in partition.known:
        ranked = rank_samples_by_loss(extractor, labels.index(c), train_dirs[c])
        known[c] = ranked[0][0]

    unknown = {}
    for c in partition.unknown:
        paths = val_dirs.get(c, [])
        if not paths:
            raise CurationError(f"unknown class {c} has no validation images")
        ranked = rank_samples_by_loss(extractor, labels.index(c), paths)
        if len(ranked) < pool_size:
            log.warning("class %s has only %d validation images (< %d)", c, len(ranked), pool_size)
        unknown[c] = [p for p, _ in ranked[:pool_size]]
    return TargetPool(known=known, unknown=unknown, selection_mode="fixed")


def save_partition(partition: ClassPartition, pool: TargetPool, path):
    payload = {
        "format_version": FORMAT_VERSION,
        "dataset_root": partition.dataset_root,
        "train_split": partition.train_split,
        "val_split": partition.val_split,
        "seed": partition.seed,
        "strategy": partition.strategy,
        "quality": partition.quality,
        "n_known": len(partition.known),
        "samples_per_known": partition.samples_per_known,
        "known": list(partition.known),
        "unknown": list(partition.unknown),
        "samples": {c: [[p, loss] for p, loss in rows] for c, rows in partition.samples.items()},
        "target_pool": {
            "selection_mode": pool.selection_mode,
            "known": pool.known,
            "unknown": pool.unknown,
        },
    }
    write_json(path, payload)
    return path


def load_partition(path):
    data = read_json(path)
    if data.get("format_version") != FORMAT_VERSION:
        raise CurationError(f"{path}: unsupported partition format {data.get('format_version')}")
    partition = ClassPartition(
        dataset_root=data["dataset_root"],
        train_split=data["train_split"],
        val_split=data["val_split"],
        known=data["known"],
        unknown=data["unknown"],
        samples_per_known=data["samples_per_known"],
        strategy=data["strategy"],
        quality=data["quality"],
        seed=data["seed"],
        samples={c: [(p, loss) for p, loss in rows] for c, rows in data["samples"].items()},
    )
    partition.validate()
    tp = data["target_pool"]
    pool = TargetPool(known=tp["known"], unknown=tp["unknown"], selection_mode=tp["selection_mode"])
    return partition, pool
