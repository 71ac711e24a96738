"""Shared helpers: hashing, deterministic serialization, seeding, image IO."""

import hashlib
import json
from pathlib import Path

import numpy as np
import torch
from PIL import Image


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def state_dict_hash(state_dict) -> str:
    """Canonical content hash of a parameter dict, independent of file format.

    Keys are visited in sorted order; each contributes its name, dtype,
    shape and raw little-endian bytes.
    """
    h = hashlib.sha256()
    for name in sorted(state_dict):
        t = state_dict[name]
        h.update(name.encode())
        h.update(str(t.dtype).encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def canonical_json(obj) -> str:
    """Deterministic JSON rendering used for every structured-text artifact."""
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def write_json(path, obj):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(canonical_json(obj))


def read_json(path):
    return json.loads(Path(path).read_text())


def rng_from(seed: int, *salts) -> np.random.Generator:
    """Derive an independent RNG stream from a base seed and string/int salts.

    The derivation is stable across processes so that per-item draws (e.g.
    the target image picked for one source/class pairing) do not depend on
    iteration order or worker layout.
    """
    material = repr((int(seed),) + tuple(salts)).encode()
    digest = hashlib.sha256(material).digest()
    return np.random.default_rng(np.frombuffer(digest[:16], dtype=np.uint64))


def set_determinism(enabled: bool = True):
    """Trade speed for exact reproducibility (required by the acceptance suite)."""
    torch.use_deterministic_algorithms(enabled)
    if enabled:
        torch.backends.cudnn.benchmark = False


def load_image(path) -> torch.Tensor:
    """Read an image file into a float32 [3, H, W] tensor with values in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def save_image(tensor: torch.Tensor, path):
    """Write a [3, H, W] unit-interval tensor as an 8-bit PNG.

    Rounding to 8 bits preserves an integer-valued L-inf budget because the
    source pixels are themselves 8-bit grid points.
    """
    arr = tensor.detach().clamp(0, 1).mul(255).round().byte().cpu()
    arr = arr.permute(1, 2, 0).numpy()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path, format="PNG")


def load_image_batch(paths, size=None) -> torch.Tensor:
    imgs = [load_image(p) for p in paths]
    batch = torch.stack(imgs) if imgs else torch.zeros(0, 3, size or 1, size or 1)
    if size is not None and batch.shape[0] and batch.shape[-1] != size:
        batch = torch.nn.functional.interpolate(
            batch, size=(size, size), mode="bilinear", align_corners=False, antialias=True
        )
    return batch
