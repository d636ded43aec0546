"""Small convolutional backbone family with instrumented batch normalization.

Every backbone is built from :class:`StatsBatchNorm2d`, a batch-norm layer that
exposes explicit control over which statistics normalize the batch (running vs
current-batch), whether running buffers are updated, and an optional capture
sink that records per-forward batch statistics with the autograd graph intact.
This single layer backs teacher pre-training, the recovery loss, batch-specific
soft labeling, and the diagnostic probes.
"""

from __future__ import annotations

import hashlib
import io
import json
import threading
import weakref
from contextlib import contextmanager
from dataclasses import asdict, dataclass

import torch
from torch import nn
from torch.nn import functional as F

from .errors import (
    ConfigError,
    DegenerateNormalization,
    EmptyBatch,
    NoNormalizationLayers,
    ShapeError,
    UnknownArchitecture,
)

CHECKPOINT_FORMAT_VERSION = 1

# Retain factor for the exponential running update: mu' = a*mu + (1-a)*mu_batch.
DEFAULT_BN_MOMENTUM = 0.9
DEFAULT_BN_EPS = 1e-5


@dataclass(frozen=True)
class BackboneSpec:
    arch_id: str
    num_classes: int
    input_resolution: tuple[int, int] = (32, 32)
    channels: int = 3

    def validate(self):
        if self.arch_id not in ARCH_REGISTRY:
            raise UnknownArchitecture(f"unknown arch_id {self.arch_id!r}; "
                                      f"registered: {sorted(ARCH_REGISTRY)}")
        if self.num_classes < 1:
            raise ShapeError(f"num_classes must be positive, got {self.num_classes}")
        if self.channels < 1:
            raise ShapeError(f"channels must be positive, got {self.channels}")
        h, w = self.input_resolution
        min_hw = ARCH_REGISTRY[self.arch_id].min_resolution
        if h < min_hw or w < min_hw:
            raise ShapeError(
                f"{self.arch_id} needs input resolution >= {min_hw}x{min_hw}, got {h}x{w}")


@dataclass
class BNLayerStats:
    layer_id: str
    mean: torch.Tensor
    variance: torch.Tensor


@dataclass
class BNStatistics:
    per_layer: list[BNLayerStats]
    kind: str  # "running" | "batch"

    def layer_ids(self):
        return [s.layer_id for s in self.per_layer]


@dataclass
class ProbeCapture:
    stats: BNStatistics
    forward_id: int


class StatsBatchNorm2d(nn.Module):
    """Batch norm over (N, H, W) per channel with explicit statistic control.

    ``momentum`` is the retain factor: mu' = momentum*mu + (1-momentum)*mu_B.
    Batch variance is the biased (population) variance over N*H*W elements;
    eps is added inside the normalization only, so captured statistics stay
    raw and the running buffers never carry an eps offset.

    Override attributes (set via :func:`bn_override`, never persisted):
      _stats_mode: None follows ``self.training``; "batch"/"running" force.
      _freeze_running: when True the running buffers are never updated.
      _capture_sink: list that receives (module, mean, var) per forward.
    """

    def __init__(self, num_features, eps=DEFAULT_BN_EPS, momentum=DEFAULT_BN_MOMENTUM):
        super().__init__()
        self.num_features = num_features
        self.eps = eps
        self.momentum = momentum
        self.weight = nn.Parameter(torch.ones(num_features))
        self.bias = nn.Parameter(torch.zeros(num_features))
        self.register_buffer("running_mean", torch.zeros(num_features))
        self.register_buffer("running_var", torch.ones(num_features))
        self._stats_mode = None
        self._freeze_running = False
        self._capture_sink = None

    def extra_repr(self):
        return f"{self.num_features}, eps={self.eps}, momentum={self.momentum}"

    def forward(self, x):
        if x.dim() != 4:
            raise ShapeError(f"expected NCHW input, got shape {tuple(x.shape)}")
        if x.shape[1] != self.num_features:
            raise ShapeError(
                f"expected {self.num_features} channels, got {x.shape[1]}")
        if x.shape[0] == 0:
            raise EmptyBatch("batch-norm forward on an empty batch")

        use_batch = self._stats_mode == "batch" or (
            self._stats_mode is None and self.training)
        need_stats = use_batch or self._capture_sink is not None
        if need_stats:
            per_channel = x.numel() // x.shape[1]
            if use_batch and per_channel <= 1:
                raise DegenerateNormalization(
                    "batch statistics over a single element per channel")
            mean = x.mean(dim=(0, 2, 3))
            var = x.var(dim=(0, 2, 3), unbiased=False)
            if self._capture_sink is not None:
                self._capture_sink.append((self, mean, var))
            if use_batch and not self._freeze_running:
                with torch.no_grad():
                    a = self.momentum
                    self.running_mean.mul_(a).add_((1.0 - a) * mean)
                    self.running_var.mul_(a).add_((1.0 - a) * var)

        if use_batch:
            m, v = mean, var
        else:
            m, v = self.running_mean, self.running_var
        inv = torch.rsqrt(v.view(1, -1, 1, 1) + self.eps)
        xhat = (x - m.view(1, -1, 1, 1)) * inv
        return xhat * self.weight.view(1, -1, 1, 1) + self.bias.view(1, -1, 1, 1)


# Locks live outside the models so checkpoints and pickles stay clean.
_BN_LOCKS: "weakref.WeakKeyDictionary" = weakref.WeakKeyDictionary()
_BN_LOCKS_GUARD = threading.Lock()


def _model_lock(model):
    with _BN_LOCKS_GUARD:
        lock = _BN_LOCKS.get(model)
        if lock is None:
            lock = threading.RLock()
            _BN_LOCKS[model] = lock
        return lock


@contextmanager
def bn_override(model, stats_mode=None, freeze_running=None, capture_sink=None):
    """Temporarily override batch-norm behavior on every BN layer of ``model``.

    Overrides mutate shared layer state, so concurrent callers on one model
    are serialized by a per-model lock (as-if-serialized contract).
    """
    with _model_lock(model):
        layers = bn_layers(model)
        saved = [(m._stats_mode, m._freeze_running, m._capture_sink)
                 for m in layers]
        try:
            for m in layers:
                if stats_mode is not None:
                    m._stats_mode = stats_mode
                if freeze_running is not None:
                    m._freeze_running = freeze_running
                if capture_sink is not None:
                    m._capture_sink = capture_sink
            yield layers
        finally:
            for m, (mode, freeze, sink) in zip(layers, saved):
                m._stats_mode = mode
                m._freeze_running = freeze
                m._capture_sink = sink


# ---------------------------------------------------------------------------
# architectures
# ---------------------------------------------------------------------------

def conv_bn(cin, cout, k=3, stride=1, padding=1):
    return nn.Sequential(
        nn.Conv2d(cin, cout, k, stride, padding, bias=False),
        StatsBatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class Backbone(nn.Module):
    """Trunk + pooled head; ``features`` exposes the penultimate embedding."""

    def __init__(self, spec: BackboneSpec, trunk: nn.Module, feature_dim: int):
        super().__init__()
        self.spec = spec
        self.trunk = trunk
        self.head = nn.Linear(feature_dim, spec.num_classes)
        self.feature_dim = feature_dim
        self._probe_forward_id = 0
        self._bn_order = None

    def features(self, x):
        out = self.trunk(x)
        return F.adaptive_avg_pool2d(out, 1).flatten(1)

    def forward(self, x):
        if x.dim() != 4 or x.shape[1] != self.spec.channels:
            raise ShapeError(
                f"expected (N, {self.spec.channels}, H, W) input, got {tuple(x.shape)}")
        return self.head(self.features(x))


class _BasicBlock(nn.Module):
    def __init__(self, cin, cout, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = StatsBatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = StatsBatchNorm2d(cout)
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(
                nn.Conv2d(cin, cout, 1, stride, bias=False), StatsBatchNorm2d(cout))
        else:
            self.shortcut = nn.Identity()

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class _Bottleneck(nn.Module):
    expansion = 4

    def __init__(self, cin, width, stride=1):
        super().__init__()
        cout = width * self.expansion
        self.conv1 = nn.Conv2d(cin, width, 1, bias=False)
        self.bn1 = StatsBatchNorm2d(width)
        self.conv2 = nn.Conv2d(width, width, 3, stride, 1, bias=False)
        self.bn2 = StatsBatchNorm2d(width)
        self.conv3 = nn.Conv2d(width, cout, 1, bias=False)
        self.bn3 = StatsBatchNorm2d(cout)
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(
                nn.Conv2d(cin, cout, 1, stride, bias=False), StatsBatchNorm2d(cout))
        else:
            self.shortcut = nn.Identity()

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = F.relu(self.bn2(self.conv2(out)))
        out = self.bn3(self.conv3(out))
        return F.relu(out + self.shortcut(x))


class _DenseLayer(nn.Module):
    def __init__(self, cin, growth):
        super().__init__()
        self.bn = StatsBatchNorm2d(cin)
        self.conv = nn.Conv2d(cin, growth, 3, 1, 1, bias=False)

    def forward(self, x):
        out = self.conv(F.relu(self.bn(x)))
        return torch.cat([x, out], dim=1)


class _InvertedResidual(nn.Module):
    def __init__(self, cin, cout, stride, expand):
        super().__init__()
        mid = cin * expand
        self.use_res = stride == 1 and cin == cout
        layers = []
        if expand != 1:
            layers += [nn.Conv2d(cin, mid, 1, bias=False), StatsBatchNorm2d(mid),
                       nn.ReLU6(inplace=True)]
        layers += [
            nn.Conv2d(mid, mid, 3, stride, 1, groups=mid, bias=False),
            StatsBatchNorm2d(mid), nn.ReLU6(inplace=True),
            nn.Conv2d(mid, cout, 1, bias=False), StatsBatchNorm2d(cout),
        ]
        self.block = nn.Sequential(*layers)

    def forward(self, x):
        out = self.block(x)
        return x + out if self.use_res else out


def _channel_shuffle(x, groups):
    n, c, h, w = x.shape
    return x.view(n, groups, c // groups, h, w).transpose(1, 2).reshape(n, c, h, w)


class _ShuffleUnit(nn.Module):
    def __init__(self, cin, cout, stride):
        super().__init__()
        self.stride = stride
        branch = cout // 2
        if stride == 1:
            right_in = cin // 2
        else:
            right_in = cin
            self.left = nn.Sequential(
                nn.Conv2d(cin, cin, 3, stride, 1, groups=cin, bias=False),
                StatsBatchNorm2d(cin),
                nn.Conv2d(cin, branch, 1, bias=False),
                StatsBatchNorm2d(branch), nn.ReLU(inplace=True),
            )
        self.right = nn.Sequential(
            nn.Conv2d(right_in, branch, 1, bias=False),
            StatsBatchNorm2d(branch), nn.ReLU(inplace=True),
            nn.Conv2d(branch, branch, 3, stride, 1, groups=branch, bias=False),
            StatsBatchNorm2d(branch),
            nn.Conv2d(branch, branch, 1, bias=False),
            StatsBatchNorm2d(branch), nn.ReLU(inplace=True),
        )

    def forward(self, x):
        if self.stride == 1:
            half = x.shape[1] // 2
            left, right = x[:, :half], x[:, half:]
            out = torch.cat([left, self.right(right)], dim=1)
        else:
            out = torch.cat([self.left(x), self.right(x)], dim=1)
        return _channel_shuffle(out, 2)


def _tiny_cnn(spec, widths):
    layers = []
    cin = spec.channels
    for w in widths:
        layers.append(conv_bn(cin, w, stride=2))
        cin = w
    return Backbone(spec, nn.Sequential(*layers), cin)


def _resnet(spec, block, stage_blocks, base_width):
    cin = base_width
    layers = [nn.Conv2d(spec.channels, cin, 3, 1, 1, bias=False),
              StatsBatchNorm2d(cin), nn.ReLU(inplace=True)]
    width = base_width
    for stage, n_blocks in enumerate(stage_blocks):
        stride = 1 if stage == 0 else 2
        for b in range(n_blocks):
            s = stride if b == 0 else 1
            if block is _BasicBlock:
                layers.append(_BasicBlock(cin, width, s))
                cin = width
            else:
                layers.append(_Bottleneck(cin, width, s))
                cin = width * _Bottleneck.expansion
        width *= 2
    return Backbone(spec, nn.Sequential(*layers), cin)


def _densenet(spec, growth, block_sizes, stem_width):
    layers = [nn.Conv2d(spec.channels, stem_width, 3, 1, 1, bias=False),
              StatsBatchNorm2d(stem_width), nn.ReLU(inplace=True)]
    cin = stem_width
    for i, n_layers in enumerate(block_sizes):
        for _ in range(n_layers):
            layers.append(_DenseLayer(cin, growth))
            cin += growth
        if i < len(block_sizes) - 1:
            half = cin // 2
            layers += [nn.Conv2d(cin, half, 1, bias=False), StatsBatchNorm2d(half),
                       nn.ReLU(inplace=True), nn.AvgPool2d(2)]
            cin = half
    layers += [StatsBatchNorm2d(cin), nn.ReLU(inplace=True)]
    return Backbone(spec, nn.Sequential(*layers), cin)


def _mobilenet_v2(spec):
    # (expand, cout, repeats, stride), scaled well below the full network
    settings = [(1, 16, 1, 1), (4, 24, 2, 2), (4, 32, 2, 2), (4, 64, 2, 2)]
    layers = [conv_bn(spec.channels, 16, stride=1)]
    cin = 16
    for expand, cout, repeats, stride in settings:
        for i in range(repeats):
            layers.append(_InvertedResidual(cin, cout, stride if i == 0 else 1, expand))
            cin = cout
    layers.append(conv_bn(cin, 128, k=1, stride=1, padding=0))
    return Backbone(spec, nn.Sequential(*layers), 128)


def _shufflenet_v2(spec):
    stage_out = [32, 64, 128]
    stage_repeats = [2, 3, 2]
    layers = [conv_bn(spec.channels, 16, stride=1)]
    cin = 16
    for cout, repeats in zip(stage_out, stage_repeats):
        layers.append(_ShuffleUnit(cin, cout, stride=2))
        for _ in range(repeats - 1):
            layers.append(_ShuffleUnit(cout, cout, stride=1))
        cin = cout
    layers.append(conv_bn(cin, 128, k=1, stride=1, padding=0))
    return Backbone(spec, nn.Sequential(*layers), 128)


@dataclass(frozen=True)
class _ArchEntry:
    builder: object
    min_resolution: int


ARCH_REGISTRY: dict[str, _ArchEntry] = {
    "tiny_cnn": _ArchEntry(lambda s: _tiny_cnn(s, (16, 32, 64)), 8),
    "tiny_cnn_wide": _ArchEntry(lambda s: _tiny_cnn(s, (24, 48, 96)), 8),
    "tiny_cnn_deep": _ArchEntry(lambda s: _tiny_cnn(s, (12, 24, 48, 96)), 16),
    "tiny_cnn_narrow": _ArchEntry(lambda s: _tiny_cnn(s, (6, 12, 24)), 8),
    "resnet18_like": _ArchEntry(lambda s: _resnet(s, _BasicBlock, (2, 2, 2, 2), 16), 16),
    "resnet50_like": _ArchEntry(lambda s: _resnet(s, _Bottleneck, (1, 2, 2, 1), 16), 16),
    "densenet121_like": _ArchEntry(lambda s: _densenet(s, 12, (4, 4, 4), 24), 8),
    "mobilenetv2_like": _ArchEntry(_mobilenet_v2, 16),
    "shufflenetv2_like": _ArchEntry(_shufflenet_v2, 16),
}


def registered_architectures():
    return sorted(ARCH_REGISTRY)


def build_backbone(spec: BackboneSpec, seed: int) -> Backbone:
    """Build and deterministically initialize a backbone; pure in (spec, seed)."""
    spec.validate()
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = ARCH_REGISTRY[spec.arch_id].builder(spec)
    model._bn_order = _bn_forward_order(model)
    if not model._bn_order:
        raise NoNormalizationLayers(f"{spec.arch_id} built without BN layers")
    return model


def bn_layers(model) -> list[StatsBatchNorm2d]:
    return [m for m in model.modules() if isinstance(m, StatsBatchNorm2d)]


def _bn_forward_order(model) -> list[str]:
    """Name BN layers in the order they fire during a forward pass."""
    order = []
    hooks = []
    for name, mod in model.named_modules():
        if isinstance(mod, StatsBatchNorm2d):
            hooks.append(mod.register_forward_hook(
                lambda m, i, o, name=name: order.append(name)))
    try:
        h, w = model.spec.input_resolution
        dummy = torch.zeros(1, model.spec.channels, h, w)
        was_training = model.training
        model.eval()
        with torch.no_grad():
            model(dummy)
        model.train(was_training)
    finally:
        for h_ in hooks:
            h_.remove()
    return order


def bn_layers_in_forward_order(model) -> list[tuple[str, StatsBatchNorm2d]]:
    if getattr(model, "_bn_order", None) is None:
        if hasattr(model, "spec"):
            model._bn_order = _bn_forward_order(model)
        else:
            # crafted modules without a spec: construction order
            model._bn_order = [name for name, m in model.named_modules()
                               if isinstance(m, StatsBatchNorm2d)]
    by_name = dict(model.named_modules())
    return [(name, by_name[name]) for name in model._bn_order]


def read_running_stats(model) -> BNStatistics:
    """Snapshot running statistics in forward order; values are copies."""
    layers = bn_layers_in_forward_order(model)
    if not layers:
        raise NoNormalizationLayers("model has no batch-normalization layers")
    per_layer = [
        BNLayerStats(name, m.running_mean.detach().clone(), m.running_var.detach().clone())
        for name, m in layers
    ]
    return BNStatistics(per_layer=per_layer, kind="running")


def capture_batch_stats(model, batch, epsilon: float = DEFAULT_BN_EPS,
                        normalization: str = "running") -> ProbeCapture:
    """Capture per-layer batch statistics from one forward pass.

    ``normalization`` picks which statistics normalize activations during the
    probe forward ("running" leaves the inference path untouched); captured
    variances follow the batch convention and include ``epsilon``. The model's
    weights and running buffers are unchanged either way.
    """
    if batch.numel() == 0 or batch.shape[0] == 0:
        raise EmptyBatch("capture_batch_stats on an empty batch")
    if normalization not in ("running", "batch"):
        raise ValueError(f"normalization must be 'running' or 'batch', got {normalization!r}")
    sink = []
    with bn_override(model, stats_mode=normalization, freeze_running=True,
                     capture_sink=sink):
        with torch.no_grad():
            model(batch)
    by_module = {id(m): (mean, var) for m, mean, var in sink}
    per_layer = []
    for name, m in bn_layers_in_forward_order(model):
        mean, var = by_module[id(m)]
        per_layer.append(BNLayerStats(name, mean.detach().clone(),
                                      var.detach().clone() + epsilon))
    model._probe_forward_id = getattr(model, "_probe_forward_id", 0) + 1
    return ProbeCapture(stats=BNStatistics(per_layer=per_layer, kind="batch"),
                        forward_id=model._probe_forward_id)


# ---------------------------------------------------------------------------
# digests and checkpoints
# ---------------------------------------------------------------------------

def tensor_digest(t: torch.Tensor) -> str:
    t = t.detach().cpu().contiguous()
    h = hashlib.sha256()
    h.update(str(t.dtype).encode())
    h.update(str(tuple(t.shape)).encode())
    h.update(t.numpy().tobytes())
    return h.hexdigest()


def model_digest(model) -> str:
    h = hashlib.sha256()
    if hasattr(model, "spec"):
        h.update(json.dumps(asdict(model.spec), sort_keys=True).encode())
    for name, t in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(tensor_digest(t).encode())
    return h.hexdigest()


def config_digest(obj) -> str:
    """Digest of any JSON-serializable config mapping or dataclass."""
    if hasattr(obj, "__dataclass_fields__"):
        obj = asdict(obj)
    return hashlib.sha256(
        json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


def save_checkpoint(model: Backbone, path):
    """Checkpoint = (arch spec, flat named-parameter map, running statistics)."""
    params = {name: p.detach().clone() for name, p in model.named_parameters()}
    running = {
        name: {"mean": m.running_mean.clone(), "var": m.running_var.clone()}
        for name, m in bn_layers_in_forward_order(model)
    }
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "spec": asdict(model.spec),
        "params": params,
        "running_stats": running,
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path) -> Backbone:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ConfigError(f"unsupported checkpoint format_version {version!r}")
    spec_d = dict(payload["spec"])
    spec_d["input_resolution"] = tuple(spec_d["input_resolution"])
    spec = BackboneSpec(**spec_d)
    model = build_backbone(spec, seed=0)
    with torch.no_grad():
        for name, p in model.named_parameters():
            p.copy_(payload["params"][name])
        by_name = dict(bn_layers_in_forward_order(model))
        for name, stats in payload["running_stats"].items():
            by_name[name].running_mean.copy_(stats["mean"])
            by_name[name].running_var.copy_(stats["var"])
    return model


def freeze(model) -> Backbone:
    """Teachers are frozen: eval mode, no parameter grads."""
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model
