"""Frozen pretrained classifiers behind one handle: logits and pooled features.

A registry JSON maps model ids to an architecture, optional weight file,
input size, per-channel normalization and label count. Handles own their
normalization; every module boundary exchanges unit-interval pixel tensors.
The feature tap is the globally pooled penultimate representation, i.e. the
input to the (conceptually removed) classification head.
"""

import hashlib
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn.functional as F

from .errors import ContractError, IntegrityError, RegistryError
from .utils import read_json, sha256_file, state_dict_hash


@dataclass(frozen=True)
class InputSpec:
    size: int
    mean: tuple
    std: tuple


def _make_smallcnn(num_labels, width=32):
    from .toydata import SmallCnn

    return SmallCnn(num_labels=num_labels, width=width)


def _smallcnn_features(net, x):
    return net.forward_features(x)


def _smallcnn_head(net):
    return net.fc


def _make_torchvision(ctor):
    def make(num_labels, **kw):
        import torchvision.models as tvm

        return getattr(tvm, ctor)(weights=None, num_classes=num_labels, **kw)

    return make


def _resnet_features(net, x):
    h = net.maxpool(net.relu(net.bn1(net.conv1(x))))
    for layer in (net.layer1, net.layer2, net.layer3, net.layer4):
        h = layer(h)
    return net.avgpool(h).flatten(1)


def _resnet_head(net):
    return net.fc


def _vgg_features(net, x):
    h = net.avgpool(net.features(x)).flatten(1)
    return net.classifier[:-1](h)


def _vgg_head(net):
    return net.classifier[-1]


def _densenet_features(net, x):
    h = F.relu(net.features(x), inplace=False)
    return F.adaptive_avg_pool2d(h, 1).flatten(1)


def _densenet_head(net):
    return net.classifier


# architecture name -> (constructor, features(module, x), head(module))
ARCHITECTURES = {
    "smallcnn": (_make_smallcnn, _smallcnn_features, _smallcnn_head),
    "resnet18": (_make_torchvision("resnet18"), _resnet_features, _resnet_head),
    "resnet50": (_make_torchvision("resnet50"), _resnet_features, _resnet_head),
    "resnet152": (_make_torchvision("resnet152"), _resnet_features, _resnet_head),
    "vgg11": (_make_torchvision("vgg11"), _vgg_features, _vgg_head),
    "vgg19": (_make_torchvision("vgg19"), _vgg_features, _vgg_head),
    "densenet121": (_make_torchvision("densenet121"), _densenet_features, _densenet_head),
}


class ModelHandle:
    """A frozen classifier plus its feature-extractor view.

    `role` is a tag ("extractor" or "victim"), not a subtype: evaluation
    reuses surrogate architectures as victims. Parameters are immutable
    after load; inference is safe from concurrent readers.
    """

    def __init__(self, id, role, module, features_fn, head_fn, input_spec, num_labels):
        self.id = id
        self.role = role
        self.input_spec = input_spec
        self.num_labels = num_labels
        self._module = module.eval()
        self._features_fn = features_fn
        self._head_fn = head_fn
        for p in self._module.parameters():
            p.requires_grad_(False)
        self._mean = torch.tensor(input_spec.mean, dtype=torch.float32).view(1, -1, 1, 1)
        self._std = torch.tensor(input_spec.std, dtype=torch.float32).view(1, -1, 1, 1)
        with torch.no_grad():
            probe = torch.zeros(1, len(input_spec.mean), input_spec.size, input_spec.size)
            self.feature_dim = int(features_fn(self._module, probe).shape[1])

    def _check_input(self, x):
        if x.ndim != 4 or x.shape[1] != self._mean.shape[1]:
            raise ContractError(
                f"{self.id}: expected [B, {self._mean.shape[1]}, H, W] batch, got {tuple(x.shape)}"
            )
        if x.shape[0] and (x.shape[2] != self.input_spec.size or x.shape[3] != self.input_spec.size):
            raise ContractError(
                f"{self.id}: expected spatial size {self.input_spec.size}, got {tuple(x.shape[2:])}"
            )

    def _normalize(self, x):
        return (x - self._mean.to(x.dtype)) / self._std.to(x.dtype)

    def extract_features(self, x: torch.Tensor) -> torch.Tensor:
        """Pooled penultimate features, [B, feature_dim]. Input: unit-interval pixels."""
        self._check_input(x)
        if x.shape[0] == 0:
            return torch.zeros(0, self.feature_dim, dtype=x.dtype)
        return self._features_fn(self._module, self._normalize(x))

    def classify(self, x: torch.Tensor) -> torch.Tensor:
        """Logits [B, num_labels]; the head applied to the extracted features."""
        self._check_input(x)
        if x.shape[0] == 0:
            return torch.zeros(0, self.num_labels, dtype=x.dtype)
        return self._head_fn(self._module)(self._features_fn(self._module, self._normalize(x)))

    def predict(self, x: torch.Tensor) -> torch.Tensor:
        # torch.argmax returns the first maximal index, i.e. lowest label wins ties
        return self.classify(x).argmax(dim=1)

    def classification_loss(self, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        """Per-sample softmax cross-entropy (non-negative)."""
        if y.numel() and (y.min().item() < 0 or y.max().item() >= self.num_labels):
            raise ContractError(f"{self.id}: label out of range [0, {self.num_labels})")
        return F.cross_entropy(self.classify(x), y, reduction="none")

    def to_double(self):
        """Float64 twin of this handle, for finite-difference probes."""
        import copy

        clone = copy.deepcopy(self)
        clone._module = clone._module.double()
        clone._mean = clone._mean.double()
        clone._std = clone._std.double()
        return clone

    def parameter_checksum(self) -> str:
        return state_dict_hash(self._module.state_dict())


class Registry:
    """Mapping of model id -> architecture, weights and preprocessing constants."""

    def __init__(self, entries: dict):
        self.entries = dict(entries)

    @classmethod
    def from_file(cls, path):
        data = read_json(path)
        if "models" not in data:
            raise RegistryError(f"{path}: missing 'models' table")
        return cls(data["models"])

    def entry(self, id: str) -> dict:
        if id not in self.entries:
            raise RegistryError(f"unknown model id {id!r}; registered: {sorted(self.entries)}")
        return self.entries[id]


def load_model(id: str, role: str, registry) -> ModelHandle:
    """Instantiate a frozen handle for a registered model.

    Repeated loads of the same id are functionally identical: weight files
    are verified against their recorded sha256, and weightless entries are
    initialized from a seed derived from the id.
    """
    if role not in ("extractor", "victim"):
        raise ContractError(f"role must be 'extractor' or 'victim', got {role!r}")
    if not isinstance(registry, Registry):
        registry = Registry.from_file(registry)
    e = registry.entry(id)
    arch = e.get("architecture")
    if arch not in ARCHITECTURES:
        raise RegistryError(f"{id}: unknown architecture {arch!r}")
    make, features_fn, head_fn = ARCHITECTURES[arch]
    num_labels = int(e["num_labels"])

    if not e.get("weights"):
        # stable pseudo-weights so weightless entries are load-reproducible
        torch.manual_seed(int.from_bytes(hashlib.sha256(id.encode()).digest()[:4], "little"))
    module = make(num_labels, **e.get("arch_params", {}))

    if e.get("weights"):
        wpath = Path(e["weights"])
        if not wpath.exists():
            raise RegistryError(f"{id}: weight file {wpath} not found")
        if e.get("sha256") and sha256_file(wpath) != e["sha256"]:
            raise IntegrityError(f"{id}: weight file {wpath} does not match recorded sha256")
        try:
            state = torch.load(wpath, map_location="cpu", weights_only=True)
            module.load_state_dict(state)
        except (RuntimeError, KeyError, ValueError) as exc:
            raise IntegrityError(f"{id}: corrupted weights in {wpath}: {exc}") from exc

    spec = InputSpec(size=int(e["input_size"]), mean=tuple(e["mean"]), std=tuple(e["std"]))
    return ModelHandle(id, role, module, features_fn, head_fn, spec, num_labels)
