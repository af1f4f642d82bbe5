"""The progressive spatial recurrent predictor.

Data flow for a context of size 2N x 2N (the bottom-right N x N quadrant is
the region being predicted):

    context (2N, 2N, 1)
      -> two 3x3 conv + PReLU preprocessing layers        (2N, 2N, c)
      -> recurrent unit 1 (two directional sweeps)        (2N, 2N, k1)
      -> stride-2 3x3 conv + PReLU downsampling           (N, N, k1)
      -> recurrent units 2..m                             (N, N, km)
      -> 3x3 conv + PReLU, then 3x3 conv (no activation)  (N, N, 1)
      -> clip to [0, 1]                                   (N, N)

Each recurrent unit splits its feature tensor into row planes (swept top to
bottom) and column planes (swept left to right), runs a GRU over each plane
sequence with the plane flattened to a vector, reshapes the hidden sequences
back into feature maps, concatenates them channel-wise and fuses them with a
3x3 convolution. Sweeps always move from the known context toward the
unknown quadrant. The per-direction hidden width is `unit_hidden[i]` channels
per spatial position, so the GRU state for an n-wide plane has n *
unit_hidden[i] entries.

Model files use a small self-describing binary format (see save_model) with
a trailing CRC32 so truncation and corruption are detected on load.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field, fields

import numpy as np

from .errors import ConfigError, IntegrityError, ShapeError, UsageError, VersionError
from .layers import (GATE_ACTIVATIONS, GruParams, glorot_uniform,
                     gru_sweep_backward, gru_sweep_forward, init_gru,
                     prelu_backward, prelu_forward)
from .rng import stream
from .tensor import ConvSpec, conv2d_backward_batch, conv2d_forward_batch

PU_SIZES = (4, 8, 16, 32)
AVAILABILITY_MODES = ("four-block", "three-block")

MODEL_MAGIC = b"PSRNNMDL"
MODEL_VERSION = 1


@dataclass(frozen=True)
class NetworkConfig:
    pu_size: int = 8
    preproc_channels: tuple[int, ...] = (8, 8)
    unit_hidden: tuple[int, ...] = (8, 4, 4)
    recon_channels: tuple[int, ...] = (8,)
    fusion_kernel: int = 3
    gate_activation: str = "sigmoid"
    availability_mode: str = "three-block"
    fill_value: float = 0.5

    def __post_init__(self):
        if self.pu_size not in PU_SIZES:
            raise ConfigError(f"pu_size must be one of {PU_SIZES}, got {self.pu_size}")
        if not self.preproc_channels or not self.unit_hidden:
            raise ConfigError("preproc_channels and unit_hidden must be non-empty")
        if any(c < 1 for c in self.preproc_channels + self.unit_hidden + self.recon_channels):
            raise ConfigError("channel widths must be positive")
        if self.gate_activation not in GATE_ACTIVATIONS:
            raise ConfigError(f"gate_activation must be one of {GATE_ACTIVATIONS}")
        if self.availability_mode not in AVAILABILITY_MODES:
            raise ConfigError(f"availability_mode must be one of {AVAILABILITY_MODES}")
        if self.fusion_kernel % 2 != 1:
            raise ConfigError("fusion_kernel must be odd")
        if not 0.0 <= self.fill_value <= 1.0:
            raise ConfigError("fill_value must lie in [0, 1]")

    @property
    def context_size(self) -> int:
        return 2 * self.pu_size

    @property
    def num_units(self) -> int:
        return len(self.unit_hidden)


@dataclass
class ConvLayer:
    w: np.ndarray  # (kh, kw, cin, cout) float32
    b: np.ndarray  # (cout,) float32
    alpha: np.ndarray | None  # (cout,) PReLU slopes, None for linear output
    stride: int = 1

    @property
    def spec(self) -> ConvSpec:
        kh, kw, cin, cout = self.w.shape
        return ConvSpec(kernel_h=kh, kernel_w=kw, stride=self.stride,
                        padding=kh // 2, in_channels=cin, out_channels=cout)

    def named(self, prefix: str) -> dict[str, np.ndarray]:
        out = {f"{prefix}.w": self.w, f"{prefix}.b": self.b}
        if self.alpha is not None:
            out[f"{prefix}.alpha"] = self.alpha
        return out


@dataclass
class PsRnnUnitParams:
    gru_h: GruParams
    gru_v: GruParams
    fusion: ConvLayer
    hidden_per_pos: int

    def named(self, prefix: str) -> dict[str, np.ndarray]:
        out = {}
        for tag, gru in (("h", self.gru_h), ("v", self.gru_v)):
            for k, v in gru.named().items():
                out[f"{prefix}.{tag}.{k}"] = v
        out.update(self.fusion.named(f"{prefix}.fuse"))
        return out


@dataclass
class PsRnnNetwork:
    config: NetworkConfig
    preproc: list[ConvLayer]
    units: list[PsRnnUnitParams]
    downsample: ConvLayer
    recon: list[ConvLayer]


def _init_conv(gen, kh, kw, cin, cout, stride=1, activation=True,
               bias_fill=0.0) -> ConvLayer:
    fan_in, fan_out = kh * kw * cin, kh * kw * cout
    w = glorot_uniform(gen, (kh, kw, cin, cout), fan_in, fan_out)
    b = np.full(cout, bias_fill, dtype=np.float32)
    alpha = np.full(cout, 0.25, dtype=np.float32) if activation else None
    return ConvLayer(w=w, b=b, alpha=alpha, stride=stride)


def _init_unit(gen, n: int, in_channels: int, hidden_per_pos: int,
               fusion_kernel: int) -> PsRnnUnitParams:
    input_dim = n * in_channels
    hidden = n * hidden_per_pos
    k = fusion_kernel
    return PsRnnUnitParams(
        gru_h=init_gru(gen, hidden, input_dim),
        gru_v=init_gru(gen, hidden, input_dim),
        fusion=_init_conv(gen, k, k, 2 * hidden_per_pos, hidden_per_pos),
        hidden_per_pos=hidden_per_pos,
    )


def build_network(config: NetworkConfig, seed: int = 0) -> PsRnnNetwork:
    """Construct a randomly initialized network for `config`.

    The spatial flow (2N before downsampling, N after) is fixed by
    construction; unit input widths are derived from the preceding layer.
    """
    gen = stream(seed, f"init/n{config.pu_size}/{config.availability_mode}")
    n_full = config.context_size
    n_half = config.pu_size
    preproc = []
    cin = 1
    for cout in config.preproc_channels:
        preproc.append(_init_conv(gen, 3, 3, cin, cout))
        cin = cout
    units = [_init_unit(gen, n_full, cin, config.unit_hidden[0], config.fusion_kernel)]
    cin = config.unit_hidden[0]
    downsample = _init_conv(gen, 3, 3, cin, cin, stride=2)
    for k in config.unit_hidden[1:]:
        units.append(_init_unit(gen, n_half, cin, k, config.fusion_kernel))
        cin = k
    recon = []
    for cout in config.recon_channels:
        recon.append(_init_conv(gen, 3, 3, cin, cout))
        cin = cout
    # mid-gray output bias keeps the fresh network inside the clip range,
    # so gradients flow from the first step even on flat inputs
    recon.append(_init_conv(gen, 3, 3, cin, 1, activation=False, bias_fill=0.5))
    net = PsRnnNetwork(config=config, preproc=preproc, units=units,
                       downsample=downsample, recon=recon)
    _assert_spatial_flow(net)
    return net


def _assert_spatial_flow(net: PsRnnNetwork):
    n_full = net.config.context_size
    if net.downsample.spec.out_extent(n_full, 3) != net.config.pu_size:
        raise ConfigError("downsampling layer does not halve the context size")


def parameters(net: PsRnnNetwork) -> dict[str, np.ndarray]:
    """Name -> live float32 array, in a fixed deterministic order."""
    out: dict[str, np.ndarray] = {}
    for i, layer in enumerate(net.preproc):
        out.update(layer.named(f"pre{i}"))
    for i, unit in enumerate(net.units):
        out.update(unit.named(f"u{i}"))
    out.update(net.downsample.named("down"))
    for i, layer in enumerate(net.recon):
        out.update(layer.named(f"rec{i}"))
    return out


def param_count(net: PsRnnNetwork) -> int:
    return sum(int(np.prod(v.shape)) for v in parameters(net).values())


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------


def _conv_forward(layer: ConvLayer, x64: np.ndarray, keep_cols: bool = True):
    pre, cols = conv2d_forward_batch(x64, layer.w.astype(np.float64),
                                     layer.b.astype(np.float64), layer.spec,
                                     return_cols=True)
    if not keep_cols:
        cols = None
    if layer.alpha is None:
        return pre, (x64, None, cols)
    out = prelu_forward(pre, layer.alpha.astype(np.float64))
    return out, (x64, pre, cols)


def _conv_backward(layer: ConvLayer, cache, grad_out, grads: dict, prefix: str):
    x64, pre, cols = cache
    if layer.alpha is not None:
        grad_out, g_alpha = prelu_backward(pre, layer.alpha.astype(np.float64), grad_out)
        grads[f"{prefix}.alpha"] = g_alpha
    gx, gw, gb = conv2d_backward_batch(x64, layer.w.astype(np.float64), layer.spec,
                                       grad_out, cols)
    grads[f"{prefix}.w"] = gw
    grads[f"{prefix}.b"] = gb
    return gx


def unit_forward_batch(unit: PsRnnUnitParams, feat: np.ndarray, gate_activation: str,
                       keep_cols: bool = True):
    """One recurrent unit over a (b, n, n, c) float64 feature stack."""
    b, n, n2, c = feat.shape
    if n != n2:
        raise ShapeError(f"unit input must be spatially square, got {feat.shape}")
    # step-major plane stacks: rows swept top->bottom, columns left->right
    xs_h = np.ascontiguousarray(feat.transpose(1, 0, 2, 3)).reshape(n, b, n * c)
    xs_v = np.ascontiguousarray(feat.transpose(2, 0, 1, 3)).reshape(n, b, n * c)
    h0 = np.zeros((b, unit.gru_h.hidden), dtype=np.float64)
    hs_h, cache_h = gru_sweep_forward(unit.gru_h, xs_h, h0, gate_activation)
    hs_v, cache_v = gru_sweep_forward(unit.gru_v, xs_v, h0, gate_activation)
    ch = unit.hidden_per_pos
    map_h = hs_h.reshape(n, b, n, ch).transpose(1, 0, 2, 3)
    map_v = hs_v.reshape(n, b, n, ch).transpose(1, 2, 0, 3)
    concat = np.concatenate([map_h, map_v], axis=-1)
    out, fuse_cache = _conv_forward(unit.fusion, concat, keep_cols)
    return out, ((b, n, c), cache_h, cache_v, fuse_cache)


def unit_backward_batch(unit: PsRnnUnitParams, cache, grad_out, grads: dict,
                        prefix: str):
    (b, n, c), cache_h, cache_v, fuse_cache = cache
    ch = unit.hidden_per_pos
    g_concat = _conv_backward(unit.fusion, fuse_cache, grad_out, grads, f"{prefix}.fuse")
    gh = np.ascontiguousarray(g_concat[..., :ch].transpose(1, 0, 2, 3)).reshape(n, b, n * ch)
    gv = np.ascontiguousarray(g_concat[..., ch:].transpose(2, 0, 1, 3)).reshape(n, b, n * ch)
    gp_h, _, gx_h = gru_sweep_backward(unit.gru_h, cache_h, gh)
    gp_v, _, gx_v = gru_sweep_backward(unit.gru_v, cache_v, gv)
    for k, v in gp_h.items():
        grads[f"{prefix}.h.{k}"] = v
    for k, v in gp_v.items():
        grads[f"{prefix}.v.{k}"] = v
    g_feat = gx_h.reshape(n, b, n, c).transpose(1, 0, 2, 3).copy()
    g_feat += gx_v.reshape(n, b, n, c).transpose(1, 2, 0, 3)
    return g_feat


def forward_batch(net: PsRnnNetwork, contexts: np.ndarray, need_cache: bool = True):
    """Predict a (b, N, N) stack from (b, 2N, 2N) contexts; returns cache.

    need_cache=False drops the patch matrices a later backward would reuse,
    keeping inference passes over large batches lean.
    """
    cs = net.config.context_size
    if contexts.ndim != 3 or contexts.shape[1:] != (cs, cs):
        raise ShapeError(f"contexts must be (b, {cs}, {cs}), got {contexts.shape}")
    gate = net.config.gate_activation
    x = contexts.astype(np.float64)[..., None]
    caches = {"pre": [], "units": []}
    for layer in net.preproc:
        x, c = _conv_forward(layer, x, need_cache)
        caches["pre"].append(c)
    x, c = unit_forward_batch(net.units[0], x, gate, need_cache)
    caches["units"].append(c)
    x, caches["down"] = _conv_forward(net.downsample, x, need_cache)
    for unit in net.units[1:]:
        x, c = unit_forward_batch(unit, x, gate, need_cache)
        caches["units"].append(c)
    caches["rec"] = []
    for layer in net.recon:
        x, c = _conv_forward(layer, x, need_cache)
        caches["rec"].append(c)
    pre_clip = x[..., 0]
    caches["pre_clip"] = pre_clip
    pred = np.clip(pre_clip, 0.0, 1.0)
    return pred, caches


def _backward_core(net: PsRnnNetwork, caches, grad_pred: np.ndarray):
    pre_clip = caches["pre_clip"]
    # clip01 passes gradient where the pre-clip value is inside [0, 1]
    g = grad_pred * ((pre_clip >= 0.0) & (pre_clip <= 1.0))
    g = g[..., None]
    grads: dict[str, np.ndarray] = {}
    for i in range(len(net.recon) - 1, -1, -1):
        g = _conv_backward(net.recon[i], caches["rec"][i], g, grads, f"rec{i}")
    for i in range(len(net.units) - 1, 0, -1):
        g = unit_backward_batch(net.units[i], caches["units"][i], g, grads, f"u{i}")
    g = _conv_backward(net.downsample, caches["down"], g, grads, "down")
    g = unit_backward_batch(net.units[0], caches["units"][0], g, grads, "u0")
    for i in range(len(net.preproc) - 1, -1, -1):
        g = _conv_backward(net.preproc[i], caches["pre"][i], g, grads, f"pre{i}")
    return grads, g[..., 0]


def backward_batch(net: PsRnnNetwork, caches, grad_pred: np.ndarray) -> dict[str, np.ndarray]:
    """Float64 gradients for every parameter, given d(loss)/d(prediction)."""
    grads, _ = _backward_core(net, caches, grad_pred)
    return grads


def unit_forward(unit: PsRnnUnitParams, feat: np.ndarray,
                 gate_activation: str = "sigmoid") -> np.ndarray:
    """Single-sample (n, n, c) -> (n, n, hidden_per_pos) unit application."""
    if feat.ndim != 3:
        raise ShapeError(f"expected (n, n, c) feature tensor, got {feat.shape}")
    out, _ = unit_forward_batch(unit, feat.astype(np.float64)[None], gate_activation)
    return out[0].astype(np.float32)


def network_forward(net: PsRnnNetwork, context: np.ndarray) -> np.ndarray:
    """Predict the N x N bottom-right region from one 2N x 2N context."""
    cs = net.config.context_size
    if context.shape != (cs, cs):
        raise ShapeError(f"context must be ({cs}, {cs}), got {context.shape}")
    pred, _ = forward_batch(net, np.asarray(context, dtype=np.float64)[None])
    return pred[0].astype(np.float32)


def network_backward(net: PsRnnNetwork, context: np.ndarray,
                     grad_prediction: np.ndarray) -> dict[str, np.ndarray]:
    """Parameter gradients for a single context; recomputes forward caches."""
    cs, n = net.config.context_size, net.config.pu_size
    if context.shape != (cs, cs):
        raise ShapeError(f"context must be ({cs}, {cs}), got {context.shape}")
    if grad_prediction.shape != (n, n):
        raise ShapeError(f"grad_prediction must be ({n}, {n}), got {grad_prediction.shape}")
    _, caches = forward_batch(net, np.asarray(context, dtype=np.float64)[None])
    grads = backward_batch(net, caches, np.asarray(grad_prediction, dtype=np.float64)[None])
    return {k: v.astype(np.float32) for k, v in grads.items()}


def clone_network(net: PsRnnNetwork) -> PsRnnNetwork:
    params = {k: v.copy() for k, v in parameters(net).items()}
    fresh = build_network(net.config, seed=0)
    for k, v in parameters(fresh).items():
        v[...] = params[k]
    return fresh


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def _config_text(config: NetworkConfig) -> bytes:
    lines = []
    for f in fields(config):
        v = getattr(config, f.name)
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        lines.append(f"{f.name}={v}")
    return ("\n".join(lines) + "\n").encode("utf-8")


def _config_from_text(text: str) -> NetworkConfig:
    kw = {}
    for line in text.strip().splitlines():
        key, _, val = line.partition("=")
        kw[key] = val
    def ints(s):
        return tuple(int(x) for x in s.split(",") if x)
    return NetworkConfig(
        pu_size=int(kw["pu_size"]),
        preproc_channels=ints(kw["preproc_channels"]),
        unit_hidden=ints(kw["unit_hidden"]),
        recon_channels=ints(kw["recon_channels"]),
        fusion_kernel=int(kw["fusion_kernel"]),
        gate_activation=kw["gate_activation"],
        availability_mode=kw["availability_mode"],
        fill_value=float(kw["fill_value"]),
    )


def save_model(net: PsRnnNetwork, path) -> None:
    """Write magic, version, config text, parameter records, trailing CRC32."""
    blob = bytearray()
    blob += MODEL_MAGIC
    blob += struct.pack("<I", MODEL_VERSION)
    cfg = _config_text(net.config)
    blob += struct.pack("<I", len(cfg))
    blob += cfg
    for name, arr in parameters(net).items():
        encoded = name.encode("utf-8")
        blob += struct.pack("<I", len(encoded))
        blob += encoded
        blob += struct.pack("<B", arr.ndim)
        for extent in arr.shape:
            blob += struct.pack("<I", extent)
        blob += arr.astype("<f4").tobytes(order="C")
    blob += struct.pack("<I", zlib.crc32(bytes(blob)) & 0xFFFFFFFF)
    with open(path, "wb") as fh:
        fh.write(bytes(blob))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, count: int) -> bytes:
        if self.pos + count > len(self.data):
            raise IntegrityError("model file truncated")
        out = self.data[self.pos : self.pos + count]
        self.pos += count
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u8(self) -> int:
        return struct.unpack("<B", self.take(1))[0]


def load_model(path, expected_config: NetworkConfig | None = None) -> PsRnnNetwork:
    """Read a model file; verifies checksum, magic and version.

    When expected_config is given, a mismatching stored config raises
    ConfigError (for example an N=8 model loaded into an N=16 pipeline).
    """
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < len(MODEL_MAGIC) + 8:
        raise IntegrityError("model file truncated")
    stored_crc = struct.unpack("<I", data[-4:])[0]
    if zlib.crc32(data[:-4]) & 0xFFFFFFFF != stored_crc:
        raise IntegrityError("model file checksum mismatch")
    r = _Reader(data[:-4])
    if r.take(len(MODEL_MAGIC)) != MODEL_MAGIC:
        raise IntegrityError("bad magic; not a model file")
    version = r.u32()
    if version != MODEL_VERSION:
        raise VersionError(f"unsupported model version {version}")
    config = _config_from_text(r.take(r.u32()).decode("utf-8"))
    if expected_config is not None and config != expected_config:
        raise ConfigError(
            f"model config {config} does not match expected {expected_config}"
        )
    records: dict[str, np.ndarray] = {}
    while r.pos < len(r.data):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u8()
        shape = tuple(r.u32() for _ in range(rank))
        count = int(np.prod(shape))
        arr = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape)
        records[name] = np.ascontiguousarray(arr)
    net = build_network(config, seed=0)
    params = parameters(net)
    if set(params) != set(records):
        raise IntegrityError("parameter records do not match the stored config")
    for k, v in params.items():
        if records[k].shape != v.shape:
            raise IntegrityError(f"parameter {k} has shape {records[k].shape}, expected {v.shape}")
        v[...] = records[k]
    return net


# ---------------------------------------------------------------------------
# Unified variable-block-size composite
# ---------------------------------------------------------------------------


@dataclass
class ConvTransposeLayer:
    w: np.ndarray  # (kh, kw, cin, cout)
    b: np.ndarray
    alpha: np.ndarray | None
    stride: int
    padding: int

    def named(self, prefix: str) -> dict[str, np.ndarray]:
        out = {f"{prefix}.w": self.w, f"{prefix}.b": self.b}
        if self.alpha is not None:
            out[f"{prefix}.alpha"] = self.alpha
        return out


def conv_transpose_forward_batch(layer: ConvTransposeLayer, x: np.ndarray):
    b, h, w_in, _ = x.shape
    kh, kw, _, cout = layer.w.shape
    s, p = layer.stride, layer.padding
    full_h = (h - 1) * s + kh
    full_w = (w_in - 1) * s + kw
    w64 = layer.w.astype(np.float64)
    full = np.zeros((b, full_h, full_w, cout), dtype=np.float64)
    for di in range(kh):
        for dj in range(kw):
            full[:, di : di + (h - 1) * s + 1 : s, dj : dj + (w_in - 1) * s + 1 : s, :] += x @ w64[di, dj]
    out = full[:, p : full_h - p, p : full_w - p, :] + layer.b.astype(np.float64)
    if layer.alpha is None:
        return out, (x, None)
    act = prelu_forward(out, layer.alpha.astype(np.float64))
    return act, (x, out)


def conv_transpose_backward_batch(layer: ConvTransposeLayer, cache, grad_out,
                                  grads: dict, prefix: str):
    x, pre = cache
    if layer.alpha is not None:
        grad_out, g_alpha = prelu_backward(pre, layer.alpha.astype(np.float64), grad_out)
        grads[f"{prefix}.alpha"] = g_alpha
    b, h, w_in, _ = x.shape
    kh, kw, cin, cout = layer.w.shape
    s, p = layer.stride, layer.padding
    full_h = (h - 1) * s + kh
    full_w = (w_in - 1) * s + kw
    g_full = np.zeros((b, full_h, full_w, cout), dtype=np.float64)
    g_full[:, p : full_h - p, p : full_w - p, :] = grad_out
    w64 = layer.w.astype(np.float64)
    gx = np.zeros_like(x)
    gw = np.zeros_like(w64)
    for di in range(kh):
        for dj in range(kw):
            patch = g_full[:, di : di + (h - 1) * s + 1 : s, dj : dj + (w_in - 1) * s + 1 : s, :]
            gx += patch @ w64[di, dj].T
            gw[di, dj] = np.tensordot(x, patch, axes=([0, 1, 2], [0, 1, 2]))
    grads[f"{prefix}.w"] = gw
    grads[f"{prefix}.b"] = grad_out.sum(axis=(0, 1, 2))
    return gx


@dataclass
class PsRnnPlus:
    """Shared N=8 base with rescaling heads for 16x16 and 32x32 blocks."""

    base: PsRnnNetwork
    target_n: int
    pre: list[ConvLayer] = field(default_factory=list)
    post: list[ConvTransposeLayer] = field(default_factory=list)


def build_psrnn_plus(base: PsRnnNetwork, target_n: int, seed: int = 0,
                     channels: int = 64) -> PsRnnPlus:
    """Wrap an N=8 base network for a larger block size.

    The head downsamples the 2N x 2N context to the base's 16 x 16 input
    with two stride convolutions; the tail upsamples the base's 8 x 8
    prediction to N x N with two transposed convolutions. 4x4 blocks keep
    their own dedicated model, so target_n=4 is rejected.
    """
    if target_n == 4:
        raise UsageError("4x4 blocks use their dedicated model, not the composite")
    if target_n not in (16, 32):
        raise UsageError(f"target_n must be 16 or 32, got {target_n}")
    if base.config.pu_size != 8:
        raise ConfigError(f"composite base must be an N=8 model, got N={base.config.pu_size}")
    gen = stream(seed, f"plus/{target_n}")
    k = channels
    strides_pre = (2, 2) if target_n == 32 else (2, 1)
    pre = [
        _init_conv(gen, 3, 3, 1, k, stride=strides_pre[0]),
        _init_conv(gen, 3, 3, k, 1, stride=strides_pre[1], activation=False),
    ]

    def deconv(cin, cout, up, activation):
        kh = 4 if up == 2 else 3
        fan = kh * kh
        w = glorot_uniform(gen, (kh, kh, cin, cout), fan * cin, fan * cout)
        alpha = np.full(cout, 0.25, dtype=np.float32) if activation else None
        return ConvTransposeLayer(w=w, b=np.zeros(cout, dtype=np.float32),
                                  alpha=alpha, stride=up, padding=1)

    ups = (2, 2) if target_n == 32 else (2, 1)
    post = [deconv(1, k, ups[0], True), deconv(k, 1, ups[1], False)]
    return PsRnnPlus(base=base, target_n=target_n, pre=pre, post=post)


def psrnn_plus_forward_batch(plus: PsRnnPlus, contexts: np.ndarray):
    cs = 2 * plus.target_n
    if contexts.ndim != 3 or contexts.shape[1:] != (cs, cs):
        raise ShapeError(f"contexts must be (b, {cs}, {cs}), got {contexts.shape}")
    x = contexts.astype(np.float64)[..., None]
    caches = {"pre": [], "post": []}
    for layer in plus.pre:
        x, c = _conv_forward(layer, x)
        caches["pre"].append(c)
    caches["pre_ctx_raw"] = x[..., 0]
    base_ctx = np.clip(x[..., 0], 0.0, 1.0)
    base_pred, base_cache = forward_batch(plus.base, base_ctx)
    caches["base"] = base_cache
    x = base_pred[..., None]
    for layer in plus.post:
        x, c = conv_transpose_forward_batch(layer, x)
        caches["post"].append(c)
    caches["post_raw"] = x[..., 0]
    pred = np.clip(x[..., 0], 0.0, 1.0)
    return pred, caches


def psrnn_plus_forward(plus: PsRnnPlus, context: np.ndarray) -> np.ndarray:
    pred, _ = psrnn_plus_forward_batch(plus, np.asarray(context, dtype=np.float64)[None])
    return pred[0].astype(np.float32)


def psrnn_plus_backward_batch(plus: PsRnnPlus, caches, grad_pred) -> dict[str, np.ndarray]:
    """Gradients for the rescaling heads only; the base stays frozen."""
    grads: dict[str, np.ndarray] = {}
    raw = caches["post_raw"]
    g = (grad_pred * ((raw >= 0.0) & (raw <= 1.0)))[..., None]
    for i in range(len(plus.post) - 1, -1, -1):
        g = conv_transpose_backward_batch(plus.post[i], caches["post"][i], g, grads, f"post{i}")
    g = g[..., 0]
    # chain through the frozen base to reach the head; its grads are discarded
    _, g = _backward_core(plus.base, caches["base"], g)
    raw_ctx = caches["pre_ctx_raw"]
    g = (g * ((raw_ctx >= 0.0) & (raw_ctx <= 1.0)))[..., None]
    for i in range(len(plus.pre) - 1, -1, -1):
        g = _conv_backward(plus.pre[i], caches["pre"][i], g, grads, f"pre{i}")
    return grads


def psrnn_plus_parameters(plus: PsRnnPlus) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    for i, layer in enumerate(plus.pre):
        out.update(layer.named(f"pre{i}"))
    for i, layer in enumerate(plus.post):
        out.update(layer.named(f"post{i}"))
    return out


def psrnn_plus_overhead_ratio(plus: PsRnnPlus) -> float:
    extra = sum(int(np.prod(v.shape)) for v in psrnn_plus_parameters(plus).values())
    return extra / param_count(plus.base)
