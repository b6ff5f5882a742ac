"""Small sequential CNNs and the handle that carries them around."""

from __future__ import annotations

import copy
import hashlib
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Any

import torch
from torch import nn

from ..conv_analysis import ConvKernel

# Layer descriptors are plain dicts so they serialise straight into the
# checkpoint manifest.
ARCHITECTURES: dict[str, list[dict]] = {
    # 6 conv layers, VGG-style 3x3 stacks with a wide dense head.
    "mini-vgg": [
        {"kind": "center", "name": "center"},
        {"kind": "conv", "name": "conv1", "out": 16, "k": 3, "stride": 1, "pad": 1},
        {"kind": "relu", "name": "relu1"},
        {"kind": "conv", "name": "conv2", "out": 16, "k": 3, "stride": 1, "pad": 1},
        {"kind": "relu", "name": "relu2"},
        {"kind": "maxpool", "name": "pool1", "k": 2},
        {"kind": "conv", "name": "conv3", "out": 32, "k": 3, "stride": 1, "pad": 1},
        {"kind": "relu", "name": "relu3"},
        {"kind": "conv", "name": "conv4", "out": 32, "k": 3, "stride": 1, "pad": 1},
        {"kind": "relu", "name": "relu4"},
        {"kind": "maxpool", "name": "pool2", "k": 2},
        {"kind": "conv", "name": "conv5", "out": 64, "k": 3, "stride": 1, "pad": 1},
        {"kind": "relu", "name": "relu5"},
        {"kind": "conv", "name": "conv6", "out": 64, "k": 3, "stride": 1, "pad": 1},
        {"kind": "relu", "name": "relu6"},
        {"kind": "flatten", "name": "flatten"},
        {"kind": "dense", "name": "fc1", "out": 256},
        {"kind": "relu", "name": "relu_fc1"},
        {"kind": "dropout", "name": "drop1", "p": 0.3},
        {"kind": "dense", "name": "fc2", "out": "classes"},
    ],
    # 4 conv layers, AlexNet-style larger first kernels and early pooling.
    "mini-alex": [
        {"kind": "center", "name": "center"},
        {"kind": "conv", "name": "conv1", "out": 32, "k": 5, "stride": 1, "pad": 2},
        {"kind": "relu", "name": "relu1"},
        {"kind": "maxpool", "name": "pool1", "k": 2},
        {"kind": "conv", "name": "conv2", "out": 48, "k": 5, "stride": 1, "pad": 2},
        {"kind": "relu", "name": "relu2"},
        {"kind": "maxpool", "name": "pool2", "k": 2},
        {"kind": "conv", "name": "conv3", "out": 64, "k": 3, "stride": 1, "pad": 1},
        {"kind": "relu", "name": "relu3"},
        {"kind": "conv", "name": "conv4", "out": 64, "k": 3, "stride": 1, "pad": 1},
        {"kind": "relu", "name": "relu4"},
        {"kind": "flatten", "name": "flatten"},
        {"kind": "dense", "name": "fc1", "out": 256},
        {"kind": "relu", "name": "relu_fc1"},
        {"kind": "dropout", "name": "drop1", "p": 0.3},
        {"kind": "dense", "name": "fc2", "out": "classes"},
    ],
}


class Center(nn.Module):
    """Shift [0, 1] pixels to be zero-centred."""

    def forward(self, x):
        return x - 0.5


def build_network(layer_specs: list[dict], input_shape=(3, 32, 32), class_count: int = 10) -> nn.Sequential:
    layers: "OrderedDict[str, nn.Module]" = OrderedDict()
    c, h, w = input_shape
    features = None
    for spec in layer_specs:
        kind, name = spec["kind"], spec["name"]
        if kind == "center":
            layers[name] = Center()
        elif kind == "conv":
            k, s, p = spec["k"], spec.get("stride", 1), spec.get("pad", 0)
            layers[name] = nn.Conv2d(c, spec["out"], k, stride=s, padding=p)
            c, h, w = spec["out"], (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1
        elif kind == "relu":
            layers[name] = nn.ReLU()
        elif kind == "maxpool":
            layers[name] = nn.MaxPool2d(spec["k"])
            h, w = h // spec["k"], w // spec["k"]
        elif kind == "flatten":
            layers[name] = nn.Flatten()
            features = c * h * w
        elif kind == "dense":
            out = class_count if spec["out"] == "classes" else spec["out"]
            layers[name] = nn.Linear(features, out)
            features = out
        elif kind == "dropout":
            layers[name] = nn.Dropout(spec["p"])
        else:
            raise ValueError(f"unknown layer kind {kind!r}")
    net = nn.Sequential(layers)
    for mod in net.modules():
        if isinstance(mod, (nn.Conv2d, nn.Linear)):
            nn.init.kaiming_normal_(mod.weight, nonlinearity="relu")
            nn.init.zeros_(mod.bias)
    return net


def parameter_hash(module: nn.Module) -> str:
    """sha256 over names, shapes and little-endian float32 payloads."""
    h = hashlib.sha256()
    for name, tensor in module.state_dict().items():
        arr = tensor.detach().cpu().to(torch.float32).contiguous().numpy().astype("<f4", copy=False)
        h.update(name.encode())
        h.update(repr(tuple(arr.shape)).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


@dataclass
class ModelHandle:
    """A sequential baseline network plus the metadata that travels with it.

    Layer ids are the names in ``layer_specs`` (``conv1``, ``relu1``, ...).
    """

    architecture_id: str
    layer_specs: list[dict]
    net: nn.Sequential = field(repr=False)
    input_shape: tuple[int, int, int] = (3, 32, 32)
    class_count: int = 10
    content_hash: str = ""
    metadata: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if not self.content_hash:
            self.content_hash = self.compute_hash()

    def compute_hash(self) -> str:
        return parameter_hash(self.net)

    def refresh_hash(self) -> str:
        self.content_hash = self.compute_hash()
        return self.content_hash

    @property
    def sequential(self) -> bool:
        return isinstance(self.net, nn.Sequential)

    @property
    def layer_names(self) -> list[str]:
        return [name for name, _ in self.net.named_children()]

    @property
    def conv_layer_ids(self) -> list[str]:
        return [s["name"] for s in self.layer_specs if s["kind"] == "conv"]

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.net.parameters())

    def kernel(self, layer_id: str) -> ConvKernel:
        mod = self.module(layer_id)
        if not isinstance(mod, nn.Conv2d):
            raise LookupError(f"{layer_id!r} is not a convolution layer")
        return ConvKernel.from_module(mod)

    def module(self, layer_id: str) -> nn.Module:
        try:
            return self.net[self.layer_names.index(layer_id)]
        except ValueError:
            raise LookupError(f"unknown layer {layer_id!r}") from None

    def activation_index(self, layer_id: str, post: bool = True) -> int:
        """Position of the module whose output is the requested activation.

        ``post=True`` on a conv layer selects the nonlinearity right after it.
        """
        names = self.layer_names
        if layer_id not in names:
            raise LookupError(f"unknown layer {layer_id!r}")
        i = names.index(layer_id)
        if post and isinstance(self.net[i], nn.Conv2d) and i + 1 < len(names) \
                and isinstance(self.net[i + 1], nn.ReLU):
            i += 1
        return i

    def activation(self, x: torch.Tensor, layer_id: str, post: bool = True) -> torch.Tensor:
        return self.net[: self.activation_index(layer_id, post) + 1](x)

    def forward_from(self, h: torch.Tensor, layer_id: str, post: bool = True) -> torch.Tensor:
        return self.net[self.activation_index(layer_id, post) + 1:](h)

    def eval(self) -> "ModelHandle":
        self.net.eval()
        return self

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)

    def copy(self) -> "ModelHandle":
        return ModelHandle(self.architecture_id, copy.deepcopy(self.layer_specs), copy.deepcopy(self.net),
                           self.input_shape, self.class_count, self.content_hash, dict(self.metadata))


def build_model(architecture_id: str, class_count: int = 10, input_shape=(3, 32, 32),
                seed: int = 0) -> ModelHandle:
    if architecture_id not in ARCHITECTURES:
        raise LookupError(f"unknown architecture {architecture_id!r}; known: {sorted(ARCHITECTURES)}")
    specs = copy.deepcopy(ARCHITECTURES[architecture_id])
    torch.manual_seed(seed)
    net = build_network(specs, input_shape, class_count)
    net.eval()
    return ModelHandle(architecture_id, specs, net, tuple(input_shape), class_count,
                       metadata={"init_seed": seed})
