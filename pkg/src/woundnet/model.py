"""The dual-head U-Net: shared encoder, classification head, decoder with skips.

Encoder: num_blocks conv-relu-conv-relu blocks; every block but the last ends
in a 2x2 max pool, the last is the pool-free bottleneck. Classification head:
three 3x3 convs halving channels (with ReLU), flatten, then the FC chain down
to the class logits. Decoder: per block, transposed conv (2x2 stride 2), skip
concat with the matching encoder pre-pool activation (decoder channels first),
then conv-relu-conv-relu; a final 1x1 conv emits single-channel mask logits.
Both heads return raw logits; the activations live inside the losses.

Public tensors are batch x channels x height x width; activations internally
flow channels-last (the layer kernels stream in that layout), converted once
at the input and once per head output. Flatten order before the FC chain is
(height, width, channel).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import layers
from .errors import ShapeError
from .tensor import Rng, kaiming_init


@dataclass(frozen=True)
class ArchSpec:
    """Architecture hyperparameters. The default is the full 128x128 network;
    smaller variants exist only to make whole-network gradient checks cheap."""

    input_size: int = 128
    in_channels: int = 3
    base_channels: int = 16
    num_blocks: int = 5
    num_classes: int = 4
    fc_sizes: tuple[int, int] = (120, 84)

    def __post_init__(self):
        pools = self.num_blocks - 1
        if self.num_blocks < 2:
            raise ShapeError("need at least 2 encoder blocks")
        if self.input_size % (1 << pools):
            raise ShapeError(f"input size {self.input_size} not divisible by 2^{pools}")
        if self.bottleneck_channels % 8:
            raise ShapeError("bottleneck channels must be divisible by 8 for the head convs")

    @property
    def block_channels(self) -> list[int]:
        return [self.base_channels << i for i in range(self.num_blocks)]

    @property
    def bottleneck_channels(self) -> int:
        return self.base_channels << (self.num_blocks - 1)

    @property
    def bottleneck_size(self) -> int:
        return self.input_size >> (self.num_blocks - 1)

    @property
    def head_channels(self) -> list[int]:
        cb = self.bottleneck_channels
        return [cb // 2, cb // 4, cb // 8]

    @property
    def flat_dim(self) -> int:
        return self.bottleneck_size ** 2 * (self.bottleneck_channels // 8)


DEFAULT_ARCH = ArchSpec()

# shrunken variant: full finite differences on the real net are infeasible
TINY_ARCH = ArchSpec(input_size=16, in_channels=3, base_channels=4,
                     num_blocks=2, num_classes=4, fc_sizes=(6, 5))


def param_manifest(arch: ArchSpec = DEFAULT_ARCH) -> list[tuple[str, tuple[int, ...]]]:
    """Ordered (name, shape) list of every learnable tensor."""
    entries: list[tuple[str, tuple[int, ...]]] = []

    def conv(name, cin, cout, k=3):
        entries.append((f"{name}.w", (cout, cin, k, k)))
        entries.append((f"{name}.b", (cout,)))

    cin = arch.in_channels
    for i, cout in enumerate(arch.block_channels, start=1):
        conv(f"down{i}.conv1", cin, cout)
        conv(f"down{i}.conv2", cout, cout)
        cin = cout

    hin = arch.bottleneck_channels
    for i, hout in enumerate(arch.head_channels, start=1):
        conv(f"head.conv{i}", hin, hout)
        hin = hout
    fc_in = arch.flat_dim
    for i, fc_out in enumerate((*arch.fc_sizes, arch.num_classes), start=1):
        entries.append((f"head.fc{i}.w", (fc_in, fc_out)))
        entries.append((f"head.fc{i}.b", (fc_out,)))
        fc_in = fc_out

    for j in range(1, arch.num_blocks):
        t_in = arch.bottleneck_channels >> (j - 1)
        t_out = t_in // 2
        entries.append((f"up{j}.tconv.w", (t_in, t_out, 2, 2)))
        entries.append((f"up{j}.tconv.b", (t_out,)))
        conv(f"up{j}.conv1", 2 * t_out, t_out)
        conv(f"up{j}.conv2", t_out, t_out)

    entries.append(("mask.conv.w", (1, arch.base_channels, 1, 1)))
    entries.append(("mask.conv.b", (1,)))
    return entries


def _fan_in(name: str, shape: tuple[int, ...]) -> int:
    if len(shape) == 2:  # linear [n_in, n_out]
        return shape[0]
    if "tconv" in name:  # [Cin, Cout, 2, 2]
        return shape[0] * shape[2] * shape[3]
    return shape[1] * shape[2] * shape[3]  # conv [Cout, Cin, k, k]


def build_model(seed: int, arch: ArchSpec = DEFAULT_ARCH, dtype=np.float32) -> dict[str, np.ndarray]:
    """Kaiming-initialized parameter dict, fully determined by the seed."""
    rng = Rng(seed)
    params: dict[str, np.ndarray] = {}
    for name, shape in param_manifest(arch):
        if name.endswith(".b"):
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            params[name] = kaiming_init(shape, _fan_in(name, shape), rng, dtype=dtype)
    return params


@dataclass
class ModelOutput:
    class_logits: np.ndarray  # [B, num_classes]
    mask_logits: np.ndarray   # [B, 1, S, S]


@dataclass
class DownCache:
    conv1: layers.Conv2dCache
    relu1: np.ndarray
    conv2: layers.Conv2dCache
    relu2: np.ndarray
    pool: layers.PoolCache | None


@dataclass
class UpCache:
    tconv: layers.ConvT2dCache
    concat_at: int
    conv1: layers.Conv2dCache
    relu1: np.ndarray
    conv2: layers.Conv2dCache
    relu2: np.ndarray


@dataclass
class HeadCache:
    convs: list
    flat_shape: tuple[int, ...]
    fc1: layers.LinearCache
    relu_fc1: np.ndarray
    fc2: layers.LinearCache
    relu_fc2: np.ndarray
    fc3: layers.LinearCache


@dataclass
class ForwardCache:
    """Everything backward needs, plus the two paper-quoted interior shapes.
    Activation arrays are channels-last: bottleneck is [B, S, S, C]."""

    arch: ArchSpec
    down: list[DownCache] = field(default_factory=list)
    head: HeadCache | None = None
    up: list[UpCache] = field(default_factory=list)
    mask: layers.Conv1x1Cache | None = None
    bottleneck: np.ndarray | None = None
    head_preflatten: np.ndarray | None = None
    head_flat: np.ndarray | None = None


def forward(params: dict[str, np.ndarray], x: np.ndarray,
            arch: ArchSpec = DEFAULT_ARCH):
    """Whole-network forward pass -> (ModelOutput, ForwardCache)."""
    expect = (arch.in_channels, arch.input_size, arch.input_size)
    if x.ndim != 4 or x.shape[1:] != expect:
        raise ShapeError(f"input must be [B,{expect[0]},{expect[1]},{expect[2]}], got {x.shape}")

    cache = ForwardCache(arch=arch)
    skips: list[np.ndarray] = []
    x = x.transpose(0, 2, 3, 1)  # channels-last for the whole interior

    for i in range(1, arch.num_blocks + 1):
        x, c1 = layers.conv3x3_nhwc_forward(x, params[f"down{i}.conv1.w"], params[f"down{i}.conv1.b"])
        x, r1 = layers.relu(x)
        x, c2 = layers.conv3x3_nhwc_forward(x, params[f"down{i}.conv2.w"], params[f"down{i}.conv2.b"])
        x, r2 = layers.relu(x)
        if i < arch.num_blocks:
            skips.append(x)
            x, pc = layers.maxpool_nhwc_forward(x)
        else:
            pc = None
        cache.down.append(DownCache(conv1=c1, relu1=r1, conv2=c2, relu2=r2, pool=pc))
    cache.bottleneck = x

    # classification head
    h = x
    head_convs = []
    for i in range(1, 4):
        h, cc = layers.conv3x3_nhwc_forward(h, params[f"head.conv{i}.w"], params[f"head.conv{i}.b"])
        h, rc = layers.relu(h)
        head_convs.append((cc, rc))
    cache.head_preflatten = h
    flat_shape = h.shape
    h = h.reshape(h.shape[0], -1)
    cache.head_flat = h
    h, f1 = layers.linear_forward(h, params["head.fc1.w"], params["head.fc1.b"])
    h, rf1 = layers.relu(h)
    h, f2 = layers.linear_forward(h, params["head.fc2.w"], params["head.fc2.b"])
    h, rf2 = layers.relu(h)
    class_logits, f3 = layers.linear_forward(h, params["head.fc3.w"], params["head.fc3.b"])
    cache.head = HeadCache(convs=head_convs, flat_shape=flat_shape, fc1=f1, relu_fc1=rf1,
                           fc2=f2, relu_fc2=rf2, fc3=f3)

    # decoder
    u = cache.bottleneck
    for j in range(1, arch.num_blocks):
        u, tc = layers.convt2x2_nhwc_forward(u, params[f"up{j}.tconv.w"], params[f"up{j}.tconv.b"])
        ca = u.shape[3]
        u = np.concatenate([u, skips[arch.num_blocks - 1 - j]], axis=3)
        u, uc1 = layers.conv3x3_nhwc_forward(u, params[f"up{j}.conv1.w"], params[f"up{j}.conv1.b"])
        u, ur1 = layers.relu(u)
        u, uc2 = layers.conv3x3_nhwc_forward(u, params[f"up{j}.conv2.w"], params[f"up{j}.conv2.b"])
        u, ur2 = layers.relu(u)
        cache.up.append(UpCache(tconv=tc, concat_at=ca, conv1=uc1, relu1=ur1, conv2=uc2, relu2=ur2))

    mask_nhwc, mc = layers.conv1x1_nhwc_forward(u, params["mask.conv.w"], params["mask.conv.b"])
    cache.mask = mc
    # single channel: [B,S,S,1] and [B,1,S,S] share one element order
    mask_logits = mask_nhwc.reshape(mask_nhwc.shape[0], 1, arch.input_size, arch.input_size)
    return ModelOutput(class_logits=class_logits, mask_logits=mask_logits), cache


def backward(params: dict[str, np.ndarray], cache: ForwardCache,
             grad_class_logits: np.ndarray, grad_mask_logits: np.ndarray) -> dict[str, np.ndarray]:
    """Exact analytic gradient of the full graph -> dict shaped like params.

    Skip activations feed both the pool below them and a decoder concat;
    their gradients accumulate from both consumers.
    """
    arch = cache.arch
    b = grad_class_logits.shape[0] if grad_class_logits.ndim == 2 else 0
    if grad_class_logits.shape != (b, arch.num_classes):
        raise ShapeError(f"grad_class_logits must be [B,{arch.num_classes}], "
                         f"got {grad_class_logits.shape}")
    if grad_mask_logits.shape != (b, 1, arch.input_size, arch.input_size):
        raise ShapeError(f"grad_mask_logits must be [B,1,{arch.input_size},{arch.input_size}], "
                         f"got {grad_mask_logits.shape}")

    grads = {name: np.zeros_like(p) for name, p in params.items()}
    skip_grads: dict[int, np.ndarray] = {}

    # mask head and decoder
    gm = grad_mask_logits.reshape(b, arch.input_size, arch.input_size, 1)
    gu, gw, gb = layers.conv1x1_nhwc_backward(cache.mask, gm)
    grads["mask.conv.w"] += gw
    grads["mask.conv.b"] += gb
    for j in range(arch.num_blocks - 1, 0, -1):
        uc = cache.up[j - 1]
        gu = layers.relu_backward(uc.relu2, gu)
        gu, gw, gb = layers.conv3x3_nhwc_backward(uc.conv2, gu)
        grads[f"up{j}.conv2.w"] += gw
        grads[f"up{j}.conv2.b"] += gb
        gu = layers.relu_backward(uc.relu1, gu)
        gu, gw, gb = layers.conv3x3_nhwc_backward(uc.conv1, gu)
        grads[f"up{j}.conv1.w"] += gw
        grads[f"up{j}.conv1.b"] += gb
        gu, gskip = gu[..., :uc.concat_at], gu[..., uc.concat_at:]
        skip_grads[arch.num_blocks - 1 - j] = gskip
        gu, gw, gb = layers.convt2x2_nhwc_backward(uc.tconv, np.ascontiguousarray(gu))
        grads[f"up{j}.tconv.w"] += gw
        grads[f"up{j}.tconv.b"] += gb

    # classification head
    hc = cache.head
    gh, gw, gb = layers.linear_backward(hc.fc3, grad_class_logits)
    grads["head.fc3.w"] += gw
    grads["head.fc3.b"] += gb
    gh = layers.relu_backward(hc.relu_fc2, gh)
    gh, gw, gb = layers.linear_backward(hc.fc2, gh)
    grads["head.fc2.w"] += gw
    grads["head.fc2.b"] += gb
    gh = layers.relu_backward(hc.relu_fc1, gh)
    gh, gw, gb = layers.linear_backward(hc.fc1, gh)
    grads["head.fc1.w"] += gw
    grads["head.fc1.b"] += gb
    gh = gh.reshape(hc.flat_shape)
    for i in range(3, 0, -1):
        cc, rc = hc.convs[i - 1]
        gh = layers.relu_backward(rc, gh)
        gh, gw, gb = layers.conv3x3_nhwc_backward(cc, gh)
        grads[f"head.conv{i}.w"] += gw
        grads[f"head.conv{i}.b"] += gb

    # encoder: bottleneck gradient is the sum of both heads' contributions
    g = gu + gh
    for i in range(arch.num_blocks, 0, -1):
        dc = cache.down[i - 1]
        if dc.pool is not None:
            g = layers.maxpool_nhwc_backward(dc.pool, g) + skip_grads[i - 1]
        g = layers.relu_backward(dc.relu2, g)
        g, gw, gb = layers.conv3x3_nhwc_backward(dc.conv2, g)
        grads[f"down{i}.conv2.w"] += gw
        grads[f"down{i}.conv2.b"] += gb
        g = layers.relu_backward(dc.relu1, g)
        g, gw, gb = layers.conv3x3_nhwc_backward(dc.conv1, g)
        grads[f"down{i}.conv1.w"] += gw
        grads[f"down{i}.conv1.b"] += gb

    return grads
