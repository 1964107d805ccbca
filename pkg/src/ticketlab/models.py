"""Small residual CNNs whose forward pass always goes through masked weights.

The family is batchnorm-free: residual joins are rescaled by 1/sqrt(2) so
activation variance stays level through the stack, which keeps train and
eval behaviour identical. Masks multiply the stored weights at forward time;
the stored values are never zeroed, so a ticket stays an explicit
(pretrained weights, mask) pair.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

RESIDUAL_SCALE = 1.0 / math.sqrt(2.0)

PRETRAINING_SCHEMES = ("natural", "adversarial", "random_smoothing")


class BuildError(ValueError):
    """Network spec does not compose."""


class MaskError(ValueError):
    """Mask set is inconsistent with the network it is applied to."""


@dataclass(frozen=True)
class LayerSpec:
    """One entry of a NetworkSpec: a stem conv, a residual block, or the head."""

    kind: str  # "conv" | "block" | "head"
    name: str
    out_channels: int = 0
    kernel: int = 3
    stride: int = 1
    bottleneck: bool = False
    classes: int = 0
    prunable: bool = True


@dataclass(frozen=True)
class NetworkSpec:
    spec_id: str
    input_shape: tuple  # (C, H, W)
    layers: tuple = field(default_factory=tuple)

    def to_dict(self) -> dict:
        return {
            "spec_id": self.spec_id,
            "input_shape": list(self.input_shape),
            "layers": [asdict(l) for l in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        layers = tuple(LayerSpec(**l) for l in d["layers"])
        return cls(spec_id=d["spec_id"], input_shape=tuple(d["input_shape"]), layers=layers)

    @property
    def num_classes(self) -> int:
        return self.layers[-1].classes


def _residual_family(spec_id, input_shape, classes, stem, widths, blocks, bottleneck):
    layers = [LayerSpec("conv", "stem", out_channels=stem, kernel=3, stride=1)]
    idx = 0
    for stage, width in enumerate(widths):
        for b in range(blocks[stage]):
            stride = 2 if (stage > 0 and b == 0) else 1
            layers.append(
                LayerSpec("block", f"b{idx}", out_channels=width, kernel=3, stride=stride, bottleneck=bottleneck)
            )
            idx += 1
    layers.append(LayerSpec("head", "head", classes=classes, prunable=False))
    return NetworkSpec(spec_id=spec_id, input_shape=tuple(input_shape), layers=tuple(layers))


def mini18(classes: int = 10, input_shape=(3, 32, 32)) -> NetworkSpec:
    """Basic-block reference spec, ~0.27M parameters at 10 classes."""
    return _residual_family("mini18", input_shape, classes, 16, (16, 32, 64), (3, 3, 3), False)


def mini50(classes: int = 10, input_shape=(3, 32, 32)) -> NetworkSpec:
    """Bottleneck-block reference spec, ~1.2M parameters at 10 classes."""
    return _residual_family("mini50", input_shape, classes, 32, (104, 208, 416), (3, 3, 3), True)


def mini10(classes: int = 10, input_shape=(3, 32, 32)) -> NetworkSpec:
    """Smallest member, sized for CI-scale training runs."""
    return _residual_family("mini10", input_shape, classes, 12, (12, 24, 48), (1, 1, 1), False)


SPEC_REGISTRY = {"mini18": mini18, "mini50": mini50, "mini10": mini10}


def make_spec(spec_id: str, classes: int = 10, input_shape=(3, 32, 32)) -> NetworkSpec:
    if spec_id not in SPEC_REGISTRY:
        raise BuildError(f"unknown model spec id {spec_id!r}; known: {sorted(SPEC_REGISTRY)}")
    return SPEC_REGISTRY[spec_id](classes=classes, input_shape=input_shape)


def _bottleneck_mid(width: int) -> int:
    return max(width // 4, 4)


def _eff_kernel(k: int, stride: int) -> tuple[int, int]:
    """Effective (kernel, padding) for a conv at the given stride.

    Strided convs use an even kernel (3 -> 4, 1 -> 2) so output sizes divide
    exactly; padding (k - stride) // 2 then gives output = input / stride.
    """
    if stride == 1:
        return k, k // 2
    ke = k + 1 if k % 2 else k
    return ke, (ke - stride) // 2


def param_defs(spec: NetworkSpec):
    """Yield (name, shape, fan_in, prunable) for every parameter, in build order.

    Raises BuildError (naming the layer) if consecutive shapes do not compose.
    """
    c, h, w = spec.input_shape
    heads = [l for l in spec.layers if l.kind == "head"]
    if len(heads) != 1 or spec.layers[-1].kind != "head":
        raise BuildError("spec must end with exactly one head layer")

    def conv_out(name, hh, ww, k, s, p):
        if k > hh + 2 * p or k > ww + 2 * p:
            raise BuildError(f"layer {name!r}: kernel {k} exceeds padded input {(hh + 2 * p, ww + 2 * p)}")
        if (hh + 2 * p - k) % s or (ww + 2 * p - k) % s:
            raise BuildError(f"layer {name!r}: non-integral output for input {(hh, ww)}, kernel {k}, stride {s}")
        return (hh + 2 * p - k) // s + 1, (ww + 2 * p - k) // s + 1

    defs = []
    for layer in spec.layers:
        if layer.kind == "conv":
            k, s, p = layer.kernel, layer.stride, layer.kernel // 2
            h, w = conv_out(layer.name, h, w, k, s, p)
            defs.append((f"{layer.name}.w", (layer.out_channels, c, k, k), c * k * k, layer.prunable))
            defs.append((f"{layer.name}.b", (layer.out_channels,), c * k * k, False))
            c = layer.out_channels
        elif layer.kind == "block":
            cin, s = c, layer.stride
            out = layer.out_channels
            ks, ps = _eff_kernel(layer.kernel, s)
            k1, p1 = _eff_kernel(layer.kernel, 1)
            if layer.bottleneck:
                mid = _bottleneck_mid(out)
                defs.append((f"{layer.name}.c1.w", (mid, cin, 1, 1), cin, layer.prunable))
                defs.append((f"{layer.name}.c1.b", (mid,), cin, False))
                h, w = conv_out(layer.name, h, w, ks, s, ps)
                defs.append((f"{layer.name}.c2.w", (mid, mid, ks, ks), mid * ks * ks, layer.prunable))
                defs.append((f"{layer.name}.c2.b", (mid,), mid * ks * ks, False))
                defs.append((f"{layer.name}.c3.w", (out, mid, 1, 1), mid, layer.prunable))
                defs.append((f"{layer.name}.c3.b", (out,), mid, False))
            else:
                h, w = conv_out(layer.name, h, w, ks, s, ps)
                defs.append((f"{layer.name}.c1.w", (out, cin, ks, ks), cin * ks * ks, layer.prunable))
                defs.append((f"{layer.name}.c1.b", (out,), cin * ks * ks, False))
                defs.append((f"{layer.name}.c2.w", (out, out, k1, k1), out * k1 * k1, layer.prunable))
                defs.append((f"{layer.name}.c2.b", (out,), out * k1 * k1, False))
            if s != 1 or cin != out:
                kp, pp = _eff_kernel(1, s)
                defs.append((f"{layer.name}.proj.w", (out, cin, kp, kp), cin * kp * kp, layer.prunable))
                defs.append((f"{layer.name}.proj.b", (out,), cin * kp * kp, False))
            c = out
        elif layer.kind == "head":
            defs.append(("head.w", (c, layer.classes), c, False))
            defs.append(("head.b", (layer.classes,), c, False))
        else:
            raise BuildError(f"layer {layer.name!r}: unknown kind {layer.kind!r}")
    return defs


def param_count(spec: NetworkSpec) -> int:
    return sum(int(np.prod(shape)) for _, shape, _, _ in param_defs(spec))


def prunable_names(spec: NetworkSpec) -> list:
    return [name for name, _, _, prunable in param_defs(spec) if prunable]


class Network:
    """A built model: spec plus named parameter tensors."""

    def __init__(self, spec: NetworkSpec, params: dict):
        self.spec = spec
        self.params = params

    def prunable(self) -> list:
        return prunable_names(self.spec)

    def param_arrays(self) -> dict:
        return {name: t.data for name, t in self.params.items()}

    def set_requires_grad(self, value: bool):
        for t in self.params.values():
            t.requires_grad = bool(value)
            if value and t.grad is None:
                t.grad = np.zeros_like(t.data)

    def zero_grad(self):
        for t in self.params.values():
            if t.requires_grad:
                t.zero_grad()

    def _weight(self, name: str, masks) -> Tensor:
        w = self.params[name]
        if masks and name in masks:
            return ad.mul(w, masks[name])
        return w

    def _bias_add(self, t: Tensor, name: str) -> Tensor:
        b = self.params[name]
        return ad.add(t, ad.reshape(b, (1, b.shape[0], 1, 1)))

    def _conv(self, x: Tensor, prefix: str, stride: int, padding: int, masks) -> Tensor:
        out = ad.conv2d(x, self._weight(f"{prefix}.w", masks), stride=stride, padding=padding)
        return self._bias_add(out, f"{prefix}.b")

    def features(self, x: Tensor, masks=None) -> Tensor:
        """Penultimate representation: activations after global average pooling."""
        masks = _as_mask_tensors(self, masks)
        h = x
        for layer in self.spec.layers:
            if layer.kind == "conv":
                h = ad.relu(self._conv(h, layer.name, layer.stride, layer.kernel // 2, masks))
            elif layer.kind == "block":
                h = self._block(h, layer, masks)
            elif layer.kind == "head":
                break
        return ad.global_avg_pool(h)

    def _block(self, x: Tensor, layer: LayerSpec, masks) -> Tensor:
        name, s = layer.name, layer.stride
        _, ps = _eff_kernel(layer.kernel, s)
        _, p1 = _eff_kernel(layer.kernel, 1)
        if layer.bottleneck:
            h = ad.relu(self._conv(x, f"{name}.c1", 1, 0, masks))
            h = ad.relu(self._conv(h, f"{name}.c2", s, ps, masks))
            h = self._conv(h, f"{name}.c3", 1, 0, masks)
        else:
            h = ad.relu(self._conv(x, f"{name}.c1", s, ps, masks))
            h = self._conv(h, f"{name}.c2", 1, p1, masks)
        if f"{name}.proj.w" in self.params:
            _, pp = _eff_kernel(1, s)
            shortcut = self._conv(x, f"{name}.proj", s, pp, masks)
        else:
            shortcut = x
        return ad.relu(ad.scale(ad.add(h, shortcut), RESIDUAL_SCALE))

    def forward(self, x: Tensor, masks=None) -> Tensor:
        feats = self.features(x, masks)
        return ad.add(ad.matmul(feats, self.params["head.w"]), ad.reshape(self.params["head.b"], (1, -1)))

    def logits(self, images: np.ndarray, masks=None) -> np.ndarray:
        """Inference helper: forward a raw image batch without touching grads."""
        restore = [(t, t.requires_grad) for t in self.params.values()]
        try:
            self.set_requires_grad(False)
            return self.forward(Tensor(images), masks).data
        finally:
            for t, rg in restore:
                t.requires_grad = rg


def _as_mask_tensors(net: Network, masks):
    if masks is None:
        return None
    if isinstance(masks, MaskSet):
        for name, arr in masks.masks.items():
            if name not in net.params:
                raise MaskError(f"mask refers to unknown weight {name!r}")
            if arr.shape != net.params[name].data.shape:
                raise MaskError(
                    f"mask shape {arr.shape} does not match weight {name!r} shape {net.params[name].data.shape}"
                )
        return {name: Tensor(arr) for name, arr in masks.masks.items()}
    return masks


def build_model(spec: NetworkSpec, rng: np.random.Generator, init: str = "fan_in_uniform") -> Network:
    """Initialize a Network from a spec. Same seed, same spec: bitwise-identical weights."""
    if init != "fan_in_uniform":
        raise BuildError(f"unknown init scheme {init!r}")
    params = {}
    for name, shape, fan_in, _ in param_defs(spec):
        if name.endswith(".b"):
            params[name] = Tensor(np.zeros(shape, dtype=np.float32), requires_grad=True)
        else:
            bound = math.sqrt(6.0 / fan_in)
            data = rng.uniform(-bound, bound, size=shape).astype(np.float32)
            params[name] = Tensor(data, requires_grad=True)
    return Network(spec, params)


def replace_head(net: Network, classes: int, rng: np.random.Generator) -> Network:
    """Fresh-init classifier head for a new downstream class count; body weights copied."""
    layers = list(net.spec.layers[:-1]) + [LayerSpec("head", "head", classes=classes, prunable=False)]
    spec = NetworkSpec(net.spec.spec_id, net.spec.input_shape, tuple(layers))
    params = {}
    for name, t in net.params.items():
        if not name.startswith("head."):
            params[name] = Tensor(t.data.copy(), requires_grad=True)
    feat_dim = net.params["head.w"].data.shape[0]
    bound = math.sqrt(6.0 / feat_dim)
    params["head.w"] = Tensor(rng.uniform(-bound, bound, size=(feat_dim, classes)).astype(np.float32), requires_grad=True)
    params["head.b"] = Tensor(np.zeros(classes, dtype=np.float32), requires_grad=True)
    return Network(spec, params)


def forward_masked(net: Network, masks, x: Tensor) -> Tensor:
    """Forward pass through elementwise-masked weights, f(m * theta, x)."""
    return net.forward(x, masks)


@dataclass
class MaskSet:
    """Per-prunable-layer binary masks, stored as float32 0/1 arrays."""

    masks: dict

    def __post_init__(self):
        for name, arr in self.masks.items():
            arr = np.ascontiguousarray(arr, dtype=np.float32)
            if not np.all((arr == 0.0) | (arr == 1.0)):
                raise MaskError(f"mask {name!r} has entries outside {{0, 1}}")
            self.masks[name] = arr

    @classmethod
    def all_ones(cls, spec: NetworkSpec) -> "MaskSet":
        return cls({name: np.ones(shape, dtype=np.float32) for name, shape, _, p in param_defs(spec) if p})

    def sparsity(self) -> float:
        total = sum(arr.size for arr in self.masks.values())
        zeros = sum(int((arr == 0.0).sum()) for arr in self.masks.values())
        return zeros / total if total else 0.0

    def zero_count(self) -> int:
        return sum(int((arr == 0.0).sum()) for arr in self.masks.values())

    def total(self) -> int:
        return sum(arr.size for arr in self.masks.values())

    def copy(self) -> "MaskSet":
        return MaskSet({name: arr.copy() for name, arr in self.masks.items()})


@dataclass
class Checkpoint:
    """Pretrained weights plus the spec and provenance needed to rebuild them."""

    spec: NetworkSpec
    weights: dict
    metadata: dict

    def __post_init__(self):
        expected = {name: shape for name, shape, _, _ in param_defs(self.spec)}
        for name, shape in expected.items():
            if name not in self.weights:
                raise BuildError(f"checkpoint is missing weight {name!r}")
            if tuple(self.weights[name].shape) != tuple(shape):
                raise BuildError(
                    f"checkpoint weight {name!r} has shape {self.weights[name].shape}, spec wants {shape}"
                )
        scheme = self.metadata.get("pretraining_scheme")
        if scheme not in PRETRAINING_SCHEMES:
            raise BuildError(f"pretraining_scheme must be one of {PRETRAINING_SCHEMES}, got {scheme!r}")

    @classmethod
    def from_network(cls, net: Network, metadata: dict) -> "Checkpoint":
        return cls(net.spec, {k: t.data.copy() for k, t in net.params.items()}, dict(metadata))

    def to_network(self) -> Network:
        params = {name: Tensor(arr.copy(), requires_grad=True) for name, arr in self.weights.items()}
        return Network(self.spec, params)
