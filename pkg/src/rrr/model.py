"""Small single-head CNN with a growing classifier and exposed target-layer maps."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from . import container
from .errors import ConfigError

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass(frozen=True)
class ClassifierSpec:
    conv_blocks: tuple[tuple[int, int, int], ...] = ((16, 3, 2), (32, 3, 2), (64, 3, 2))
    target_layer: str | None = None
    in_channels: int = 3
    dtype: str = "float32"

    @property
    def layer_names(self) -> list[str]:
        return [f"conv{i + 1}" for i in range(len(self.conv_blocks))]

    @property
    def target(self) -> str:
        return self.target_layer or self.layer_names[-1]

    @property
    def num_features(self) -> int:
        return self.conv_blocks[-1][0]

    def layer_output_size(self, name: str, input_size: tuple[int, int]) -> tuple[int, int]:
        """Spatial size of ``name``'s output for an H x W input (padding = kernel // 2)."""
        if name not in self.layer_names:
            raise ConfigError(f"unknown layer {name!r}; layers are {self.layer_names}")
        h, w = input_size
        for layer, (_, k, s) in zip(self.layer_names, self.conv_blocks):
            p = k // 2
            h = (h + 2 * p - k) // s + 1
            w = (w + 2 * p - k) // s + 1
            if layer == name:
                return h, w
        raise AssertionError("unreachable")

    def validate(self, input_size: tuple[int, int]) -> None:
        if not self.conv_blocks:
            raise ConfigError("model needs at least one conv block")
        if self.dtype not in _DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(_DTYPES)}")
        u, v = self.layer_output_size(self.target, input_size)
        if u < 2 or v < 2:
            raise ConfigError(
                f"target layer {self.target} is {u}x{v} at input {input_size}; need at least 2x2")

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


class Classifier(nn.Module):
    """Conv blocks -> target feature maps -> global average pool -> linear head.

    Inputs in [0, 1] are mapped to [-1, 1] before the first conv.

    ``forward`` returns ``(logits, feature_maps)``; logits index into
    ``classes_seen`` order, not global class ids (see ``head_index``).
    ``version`` counts optimizer steps and is bumped by the training loop.
    """

    def __init__(self, spec: ClassifierSpec, input_size: tuple[int, int] = (32, 32)):
        super().__init__()
        spec.validate(input_size)
        self.spec = spec
        self.input_size = tuple(input_size)
        blocks = []
        c_in = spec.in_channels
        for c_out, k, s in spec.conv_blocks:
            blocks.append(nn.Conv2d(c_in, c_out, k, stride=s, padding=k // 2))
            c_in = c_out
        self.convs = nn.ModuleList(blocks)
        self.head = _empty_linear(c_in)
        self.classes_seen: list[int] = []
        self.version = 0
        self.to(_DTYPES[spec.dtype])

    @property
    def dtype(self) -> torch.dtype:
        return _DTYPES[self.spec.dtype]

    def _check_input(self, x: torch.Tensor) -> None:
        if x.ndim != 4 or x.shape[0] == 0:
            raise ValueError(f"expected a non-empty N x C x H x W batch, got shape {tuple(x.shape)}")
        if tuple(x.shape[-2:]) != self.input_size or x.shape[1] != self.spec.in_channels:
            raise ValueError(
                f"image shape {tuple(x.shape[1:])} does not match configured "
                f"({self.spec.in_channels}, {self.input_size[0]}, {self.input_size[1]})")

    def features(self, x: torch.Tensor) -> torch.Tensor:
        self._check_input(x)
        x = 2 * x - 1
        for conv in self.convs:
            x = F.relu(conv(x))
        return x

    def classify(self, feature_maps: torch.Tensor) -> torch.Tensor:
        return self.head(feature_maps.mean(dim=(2, 3)))

    def forward(self, x: torch.Tensor, layer: str | None = None) -> tuple[torch.Tensor, torch.Tensor]:
        """Logits and the rectified activations of ``layer`` (default: the target layer)."""
        if not self.classes_seen:
            raise RuntimeError("head is empty; call expand_head first")
        layer = layer or self.spec.target
        if layer not in self.spec.layer_names:
            raise ValueError(f"unknown layer {layer!r}; layers are {self.spec.layer_names}")
        self._check_input(x)
        x = 2 * x - 1
        maps = None
        for name, conv in zip(self.spec.layer_names, self.convs):
            x = F.relu(conv(x))
            if name == layer:
                maps = x
        return self.classify(x), maps

    def head_index(self, labels) -> torch.Tensor:
        """Map global class ids to positions in the logit vector."""
        lookup = {c: i for i, c in enumerate(self.classes_seen)}
        try:
            return torch.tensor([lookup[int(y)] for y in labels], dtype=torch.long)
        except KeyError as exc:
            raise ValueError(f"label {exc.args[0]} is not in the model head") from None

    def parameter_dict(self) -> dict[str, torch.Tensor]:
        return dict(self.named_parameters())


def _empty_linear(in_features: int, n_out: int = 0) -> nn.Linear:
    # skips nn.Linear's random init: rows are filled explicitly by expand_head
    head = nn.Linear.__new__(nn.Linear)
    nn.Module.__init__(head)
    head.in_features, head.out_features = in_features, n_out
    head.weight = nn.Parameter(torch.zeros(n_out, in_features))
    head.bias = nn.Parameter(torch.zeros(n_out))
    return head


def build_classifier(spec: ClassifierSpec, input_size: tuple[int, int], seed: int) -> Classifier:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return Classifier(spec, input_size)


def expand_head(model: Classifier, new_class_ids) -> Classifier:
    """Append zero-initialized head rows for ``new_class_ids``; old rows keep their exact bits."""
    new_ids = [int(c) for c in new_class_ids]
    if len(set(new_ids)) != len(new_ids) or set(new_ids) & set(model.classes_seen):
        raise ValueError(f"duplicate class ids in head expansion: {new_ids}")
    if not new_ids:
        return model
    old = model.head
    n_old = old.out_features
    head = _empty_linear(old.in_features, n_old + len(new_ids)).to(old.weight.dtype)
    with torch.no_grad():
        head.weight[:n_old] = old.weight
        head.bias[:n_old] = old.bias
    model.head = head
    model.classes_seen = model.classes_seen + new_ids
    return model


def gradients_wrt(output: torch.Tensor, target: torch.Tensor, create_graph: bool = False) -> torch.Tensor:
    """d(output)/d(target) for a scalar ``output``; zeros if output does not depend on target."""
    if output.numel() != 1:
        raise ValueError(f"gradients_wrt needs a scalar output, got shape {tuple(output.shape)}")
    (g,) = torch.autograd.grad(output.reshape(()), target, create_graph=create_graph,
                               allow_unused=True)
    return torch.zeros_like(target) if g is None else g


def save_checkpoint(model: Classifier, path) -> None:
    arrays = {name: p.detach().cpu().numpy() for name, p in model.named_parameters()}
    meta = {
        "kind": "classifier",
        "spec": asdict(model.spec),
        "spec_hash": model.spec.digest(),
        "input_size": list(model.input_size),
        "classes_seen": list(model.classes_seen),
        "version": model.version,
    }
    container.save(path, arrays, meta)


def load_checkpoint(path) -> Classifier:
    arrays, meta = container.load(path)
    if meta.get("kind") != "classifier":
        raise ValueError(f"{path} is not a classifier checkpoint")
    s = meta["spec"]
    spec = ClassifierSpec(conv_blocks=tuple(tuple(b) for b in s["conv_blocks"]),
                          target_layer=s["target_layer"], in_channels=s["in_channels"],
                          dtype=s["dtype"])
    if spec.digest() != meta["spec_hash"]:
        raise ValueError(f"{path}: spec hash mismatch")
    model = Classifier(spec, tuple(meta["input_size"]))
    expand_head(model, meta["classes_seen"])
    with torch.no_grad():
        for name, p in model.named_parameters():
            p.copy_(torch.from_numpy(np.asarray(arrays[name])))
    model.version = meta["version"]
    return model
