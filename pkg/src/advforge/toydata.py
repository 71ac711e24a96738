"""Synthetic oriented-grating benchmark and small-CNN fitting utilities.

The toolkit itself never trains classifiers; this module exists so the test
and acceptance suites (and the README quickstart) can build a self-contained
desk-scale benchmark: a 10-class 32x32 dataset that a small CNN separates
cleanly, plus victim/surrogate weights and a model registry pointing at them.

Each class k combines two cues that vary smoothly with k: the orientation of
a sinusoidal grating and a hue tint around mid-gray. Held-out classes sit on
the same continuum, which is what lets a generator conditioned on target
features say something meaningful about unknown classes at this scale.
"""

import argparse
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .utils import load_image_batch, rng_from, write_json

TOY_MEAN = (0.5, 0.5, 0.5)
TOY_STD = (0.5, 0.5, 0.5)


def class_id(k: int) -> str:
    return f"class{k:02d}"


def render_grating(size, theta, phase, freq, amplitude, tint, noise, rng):
    """One grating image as a float32 [3, size, size] array in [0, 1]."""
    coords = (np.arange(size, dtype=np.float32) + 0.5) / size
    u, v = np.meshgrid(coords, coords, indexing="xy")
    carrier = np.sin(2 * np.pi * freq * (u * np.cos(theta) + v * np.sin(theta)) + phase)
    img = 0.5 + amplitude * carrier[None, :, :] + np.asarray(tint, dtype=np.float32)[:, None, None]
    img = img + rng.normal(0.0, noise, size=img.shape).astype(np.float32)
    return np.clip(img, 0.0, 1.0)


def class_tint(k: int, num_classes: int, strength: float):
    angle = 2 * np.pi * k / num_classes
    offsets = np.array([0.0, 2 * np.pi / 3, 4 * np.pi / 3], dtype=np.float32)
    return strength * np.cos(angle + offsets)


def make_toy_dataset(
    root,
    num_classes: int = 10,
    train_per_class: int = 120,
    val_per_class: int = 40,
    size: int = 32,
    seed: int = 0,
    amplitude=(0.12, 0.22),
    tint_strength: float = 0.08,
    noise: float = 0.03,
):
    """Write a root/{train,val}/classNN/img.png directory tree; returns root."""
    root = Path(root)
    for split, per_class in (("train", train_per_class), ("val", val_per_class)):
        for k in range(num_classes):
            rng = rng_from(seed, "toydata", split, k)
            theta = np.pi * k / num_classes
            tint = class_tint(k, num_classes, tint_strength)
            out = root / split / class_id(k)
            out.mkdir(parents=True, exist_ok=True)
            for i in range(per_class):
                img = render_grating(
                    size=size,
                    theta=theta + rng.normal(0.0, 0.02),
                    phase=rng.uniform(0, 2 * np.pi),
                    freq=4.0 * (1.0 + rng.uniform(-0.1, 0.1)),
                    amplitude=rng.uniform(*amplitude),
                    tint=tint,
                    noise=noise,
                    rng=rng,
                )
                arr = (img * 255).round().astype(np.uint8).transpose(1, 2, 0)
                from PIL import Image

                Image.fromarray(arr).save(out / f"img{i:04d}.png")
    return root


class SmallCnn(nn.Module):
    """Compact GroupNorm CNN for 32x32 inputs; penultimate pooled width = 4*width."""

    def __init__(self, num_labels: int = 10, width: int = 32):
        super().__init__()
        w = width
        self.body = nn.Sequential(
            nn.Conv2d(3, w, 3, padding=1),
            nn.GroupNorm(8, w),
            nn.ReLU(),
            nn.Conv2d(w, w, 3, padding=1),
            nn.GroupNorm(8, w),
            nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(w, 2 * w, 3, padding=1),
            nn.GroupNorm(8, 2 * w),
            nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(2 * w, 4 * w, 3, padding=1),
            nn.GroupNorm(8, 4 * w),
            nn.ReLU(),
        )
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.fc = nn.Linear(4 * w, num_labels)

    def forward_features(self, x):
        return self.pool(self.body(x)).flatten(1)

    def forward(self, x):
        return self.fc(self.forward_features(x))


def _scan_split(root, split):
    root = Path(root)
    pairs = []
    classes = sorted(p.name for p in (root / split).iterdir() if p.is_dir())
    for label, cname in enumerate(classes):
        for img in sorted((root / split / cname).iterdir()):
            pairs.append((str(img), label))
    return pairs, classes


def fit_small_cnn(
    data_root,
    out_path,
    width: int = 32,
    epochs: int = 6,
    batch_size: int = 64,
    lr: float = 1e-3,
    seed: int = 0,
    input_size: int = 32,
):
    """Train a SmallCnn on the train split; returns (state_dict path, val accuracy).

    Normalization matches TOY_MEAN/TOY_STD, the constants recorded in the
    registry entries written by `write_toy_registry`.
    """
    train_pairs, classes = _scan_split(data_root, "train")
    val_pairs, _ = _scan_split(data_root, "val")
    torch.manual_seed(seed)
    model = SmallCnn(num_labels=len(classes), width=width)

    mean = torch.tensor(TOY_MEAN).view(1, 3, 1, 1)
    std = torch.tensor(TOY_STD).view(1, 3, 1, 1)
    xs = load_image_batch([p for p, _ in train_pairs], size=input_size)
    ys = torch.tensor([y for _, y in train_pairs])
    xv = load_image_batch([p for p, _ in val_pairs], size=input_size)
    yv = torch.tensor([y for _, y in val_pairs])

    opt = torch.optim.Adam(model.parameters(), lr=lr)
    rng = rng_from(seed, "fit")
    model.train()
    for epoch in range(epochs):
        order = rng.permutation(len(xs))
        for start in range(0, len(order), batch_size):
            idx = torch.from_numpy(order[start : start + batch_size].copy())
            logits = model((xs[idx] - mean) / std)
            loss = F.cross_entropy(logits, ys[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    model.eval()
    with torch.no_grad():
        acc = (model((xv - mean) / std).argmax(1) == yv).float().mean().item()

    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), out_path)
    return out_path, acc


def write_toy_registry(path, entries):
    """Write a registry JSON for smallcnn weights trained by fit_small_cnn.

    `entries` maps model id -> dict(weights=..., width=..., num_labels=...).
    """
    from .utils import sha256_file

    models = {}
    for mid, e in entries.items():
        models[mid] = {
            "architecture": "smallcnn",
            "arch_params": {"width": e.get("width", 32)},
            "weights": str(e["weights"]) if e.get("weights") else None,
            "sha256": sha256_file(e["weights"]) if e.get("weights") else None,
            "num_labels": e.get("num_labels", 10),
            "input_size": e.get("input_size", 32),
            "mean": list(TOY_MEAN),
            "std": list(TOY_STD),
        }
    write_json(path, {"models": models})
    return path


def main(argv=None):
    ap = argparse.ArgumentParser(description="Generate the synthetic grating benchmark.")
    ap.add_argument("--root", required=True)
    ap.add_argument("--classes", type=int, default=10)
    ap.add_argument("--train-per-class", type=int, default=120)
    ap.add_argument("--val-per-class", type=int, default=40)
    ap.add_argument("--size", type=int, default=32)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--fit-models", action="store_true", help="also train surrogate/victim CNNs and write a registry")
    args = ap.parse_args(argv)

    make_toy_dataset(
        args.root,
        num_classes=args.classes,
        train_per_class=args.train_per_class,
        val_per_class=args.val_per_class,
        size=args.size,
        seed=args.seed,
    )
    print(f"wrote dataset under {args.root}")
    if args.fit_models:
        root = Path(args.root)
        entries = {}
        for mid, width, seed in (("smallcnn-a", 32, 1), ("smallcnn-b", 48, 2)):
            path, acc = fit_small_cnn(root, root / "models" / f"{mid}.pt", width=width, seed=seed)
            print(f"{mid}: val accuracy {acc:.3f}")
            entries[mid] = {"weights": path, "width": width, "num_labels": args.classes, "input_size": args.size}
        reg = write_toy_registry(root / "registry.json", entries)
        print(f"wrote registry {reg}")


if __name__ == "__main__":
    main()
