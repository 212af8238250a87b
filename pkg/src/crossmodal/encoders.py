"""Image CNN, dynamic-graph point network, fusion classifier and segmentation head.

All networks read their weights from one :class:`EncoderParams` record; names
are prefixed by network (``img.``, ``pt.``, ``fuse.``, ``seg.``).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .autodiff import BatchNormState, Tensor, no_grad, ops
from .errors import ConfigError, FormatError, ShapeError, SizeError

NETWORKS = ("img", "pt", "fuse", "seg")


@dataclass(frozen=True)
class EncoderConfig:
    image_channels: tuple[int, ...] = (64, 128, 256, 512)
    point_widths: tuple[int, ...] = (64, 64, 64, 128)
    embed_dim: int = 512
    k: int = 20
    fusion_hidden: int = 256
    seg_widths: tuple[int, ...] = (256, 256, 128)
    input_channels: int = 1
    toy_scale: int | None = None
    leaky_slope: float = 0.2
    stem_stride: int = 2

    def __post_init__(self):
        object.__setattr__(self, "image_channels", tuple(self.image_channels))
        object.__setattr__(self, "point_widths", tuple(self.point_widths))
        object.__setattr__(self, "seg_widths", tuple(self.seg_widths))
        if len(self.image_channels) != 4 or len(self.point_widths) != 4:
            raise ConfigError("need four image blocks and four EdgeConv blocks")
        if min(self.image_channels + self.point_widths + self.seg_widths) < 1 or self.k < 1:
            raise ConfigError("widths and k must be positive")
        if self.img_widths[-1] != self.embed:
            raise ConfigError(f"last image width {self.img_widths[-1]} must equal embed_dim {self.embed}")

    @classmethod
    def toy(cls, **overrides) -> EncoderConfig:
        base = dict(toy_scale=8, k=8, stem_stride=1)
        base.update(overrides)
        return cls(**base)

    def _scaled(self, w: int) -> int:
        return max(1, w // self.toy_scale) if self.toy_scale else w

    @property
    def img_widths(self) -> tuple[int, ...]:
        return tuple(self._scaled(w) for w in self.image_channels)

    @property
    def pt_widths(self) -> tuple[int, ...]:
        return tuple(self._scaled(w) for w in self.point_widths)

    @property
    def embed(self) -> int:
        return self._scaled(self.embed_dim)

    @property
    def hidden(self) -> int:
        return self._scaled(self.fusion_hidden)

    @property
    def seg_hidden(self) -> tuple[int, ...]:
        return tuple(self._scaled(w) for w in self.seg_widths)


@dataclass
class EncoderParams:
    config: EncoderConfig
    tensors: dict[str, Tensor] = field(default_factory=dict)
    bn: dict[str, BatchNormState] = field(default_factory=dict)
    iteration: int = 0
    seed: int = 0

    @property
    def num_parts(self) -> int | None:
        w = self.tensors.get(f"seg.fc{len(self.config.seg_hidden) + 1}.w")
        return None if w is None else w.shape[0]

    def network(self, prefix: str) -> dict[str, Tensor]:
        return {k: v for k, v in self.tensors.items() if k.startswith(prefix + ".")}

    def named_buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for name, st in self.bn.items():
            out[f"{name}.running_mean"] = st.running_mean
            out[f"{name}.running_var"] = st.running_var
        return out

    def astype(self, dtype) -> EncoderParams:
        new = EncoderParams(self.config, iteration=self.iteration, seed=self.seed)
        for k, t in self.tensors.items():
            new.tensors[k] = Tensor(t.data.astype(dtype), requires_grad=t.requires_grad, name=k)
        for k, st in self.bn.items():
            s = BatchNormState(len(st.running_mean), dtype=dtype)
            s.running_mean[:] = st.running_mean
            s.running_var[:] = st.running_var
            new.bn[k] = s
        return new

    def copy(self) -> EncoderParams:
        return self.astype(self.dtype)

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None


# ------------------------------------------------------------------ init

def _uniform(rng, shape, fan_in, dtype):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _add_bn(p: EncoderParams, name: str, c: int, dtype) -> None:
    p.tensors[f"{name}.gamma"] = Tensor(np.ones(c, dtype=dtype), requires_grad=True, name=f"{name}.gamma")
    p.tensors[f"{name}.beta"] = Tensor(np.zeros(c, dtype=dtype), requires_grad=True, name=f"{name}.beta")
    p.bn[name] = BatchNormState(c, dtype=dtype)


def _add(p: EncoderParams, name: str, arr: np.ndarray) -> None:
    p.tensors[name] = Tensor(arr, requires_grad=True, name=name)


def init_params(config: EncoderConfig, seed: int = 0, dtype=np.float32,
                num_parts: int | None = None) -> EncoderParams:
    """Fan-in scaled uniform weights, zero biases, identity batchnorm."""
    rng = np.random.default_rng(seed)
    p = EncoderParams(config, seed=seed)
    c = config.img_widths
    cin = config.input_channels
    _add(p, "img.stem.conv.w", _uniform(rng, (c[0], cin, 3, 3), cin * 9, dtype))
    _add_bn(p, "img.stem.bn", c[0], dtype)
    for i in range(1, 4):
        a, b = c[i - 1], c[i]
        pre = f"img.block{i}"
        _add(p, f"{pre}.conv1.w", _uniform(rng, (b, a, 3, 3), a * 9, dtype))
        _add_bn(p, f"{pre}.bn1", b, dtype)
        _add(p, f"{pre}.conv2.w", _uniform(rng, (b, b, 3, 3), b * 9, dtype))
        _add_bn(p, f"{pre}.bn2", b, dtype)
        _add(p, f"{pre}.proj.w", _uniform(rng, (b, a, 1, 1), a, dtype))
        _add_bn(p, f"{pre}.proj_bn", b, dtype)

    _init_point(p, rng, dtype)

    e, h = config.embed, config.hidden
    _add(p, "fuse.fc1.w", _uniform(rng, (h, 2 * e), 2 * e, dtype))
    _add(p, "fuse.fc1.b", np.zeros(h, dtype=dtype))
    _add(p, "fuse.fc2.w", _uniform(rng, (2, h), h, dtype))
    _add(p, "fuse.fc2.b", np.zeros(2, dtype=dtype))

    if num_parts is not None:
        add_segmentation_head(p, num_parts, seed=seed + 1)
    return p


def _init_point(p: EncoderParams, rng, dtype) -> None:
    config = p.config
    d = 3
    for i, w in enumerate(config.pt_widths, start=1):
        pre = f"pt.ec{i}"
        _add(p, f"{pre}.lin1.w", _uniform(rng, (w, 2 * d), 2 * d, dtype))
        _add_bn(p, f"{pre}.bn1", w, dtype)
        _add(p, f"{pre}.lin2.w", _uniform(rng, (w, w), w, dtype))
        _add_bn(p, f"{pre}.bn2", w, dtype)
        d = w
    cat = sum(config.pt_widths)
    _add(p, "pt.fc.w", _uniform(rng, (config.embed, cat), cat, dtype))
    _add_bn(p, "pt.fc_bn", config.embed, dtype)


def reinit_point_network(p: EncoderParams, seed: int) -> None:
    """Replace F_p weights and statistics with a fresh random draw (in place)."""
    for name in [k for k in p.tensors if k.startswith("pt.")]:
        del p.tensors[name]
    for name in [k for k in p.bn if k.startswith("pt.")]:
        del p.bn[name]
    _init_point(p, np.random.default_rng(seed), p.dtype)


def add_segmentation_head(p: EncoderParams, num_parts: int, seed: int = 0) -> None:
    """Four fully connected layers over [block outputs, broadcast global feature]."""
    if num_parts < 1:
        raise ConfigError("num_parts must be positive")
    rng = np.random.default_rng(seed)
    dtype = p.dtype
    for name in [k for k in p.tensors if k.startswith("seg.")]:
        del p.tensors[name]
    d = sum(p.config.pt_widths) + p.config.embed
    for i, w in enumerate(p.config.seg_hidden, start=1):
        _add(p, f"seg.fc{i}.w", _uniform(rng, (w, d), d, dtype))
        _add_bn(p, f"seg.bn{i}", w, dtype)
        d = w
    last = len(p.config.seg_hidden) + 1
    _add(p, f"seg.fc{last}.w", _uniform(rng, (num_parts, d), d, dtype))
    _add(p, f"seg.fc{last}.b", np.zeros(num_parts, dtype=dtype))


# ------------------------------------------------------------------ layers

def _bn(p: EncoderParams, name: str, x: Tensor, training: bool, axis: int) -> Tensor:
    return ops.batch_norm(x, p.tensors[f"{name}.gamma"], p.tensors[f"{name}.beta"], p.bn[name], training, axis=axis)


def _training(mode: str) -> bool:
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
    return mode == "train"


def forward_image(params: EncoderParams, images, mode: str = "eval") -> Tensor:
    """[B, C, H, W] rendered views -> [B, embed] global features."""
    cfg = params.config
    x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=params.dtype))
    if x.ndim != 4 or x.shape[1] != cfg.input_channels:
        raise ShapeError(f"expected [B, {cfg.input_channels}, H, W] images, got {x.shape}")
    if min(x.shape[2:]) < 16:
        raise ShapeError(f"images must be at least 16x16, got {x.shape[2:]}")
    tr = _training(mode)
    t = params.tensors
    h = ops.conv2d(x, t["img.stem.conv.w"], stride=cfg.stem_stride)
    h = ops.max_pool2d(ops.relu(_bn(params, "img.stem.bn", h, tr, 1)))
    for i in range(1, 4):
        pre = f"img.block{i}"
        y = ops.relu(_bn(params, f"{pre}.bn1", ops.conv2d(h, t[f"{pre}.conv1.w"], stride=2), tr, 1))
        y = _bn(params, f"{pre}.bn2", ops.conv2d(y, t[f"{pre}.conv2.w"]), tr, 1)
        skip = _bn(params, f"{pre}.proj_bn", ops.conv2d(h, t[f"{pre}.proj.w"], stride=2), tr, 1)
        h = ops.relu(ops.add(y, skip))
    return ops.global_avg_pool(h)


def knn_graph(features, k: int) -> np.ndarray:
    """Indices [B, n, k] of each point's k nearest neighbors (self excluded,
    ties to the lower index)."""
    f = features.data if isinstance(features, Tensor) else np.asarray(features)
    B, n, _ = f.shape
    if k >= n:
        raise SizeError(f"k={k} needs more than {n} points")
    sq = np.sum(f * f, axis=-1)
    d = sq[:, :, None] + sq[:, None, :] - 2 * f @ np.swapaxes(f, 1, 2)
    d = np.maximum(d, 0)
    diag = np.arange(n)
    d[:, diag, diag] = np.inf

    # select by threshold at the k-th smallest distance; among entries equal to
    # the threshold keep the lowest indices
    kth = np.partition(d, k - 1, axis=-1)[..., k - 1:k]
    mask = d <= kth
    if (mask.sum(-1) != k).any():
        mask = d < kth
        eq = d == kth
        mask |= eq & (np.cumsum(eq, axis=-1) <= k - mask.sum(-1, keepdims=True))
    # nonzero yields ascending indices per row, so a stable sort on distance
    # leaves ties in index order
    idx = np.nonzero(mask)[2].reshape(B, n, k)
    vals = np.take_along_axis(d, idx, axis=-1)
    out = np.take_along_axis(idx, np.argsort(vals, axis=-1, kind="stable"), axis=-1)
    ops.record_branch(out)
    return out


def edge_conv(params: EncoderParams, prefix: str, x: Tensor, neighbors: np.ndarray, training: bool) -> Tensor:
    """Shared two-layer MLP on (x_i, x_j - x_i) for every edge, max over neighbors."""
    t = params.tensors
    w1 = t[f"{prefix}.lin1.w"]
    if x.shape[-1] * 2 != w1.shape[1]:
        raise ShapeError(f"{prefix}: input width {x.shape[-1]} vs weight {w1.shape}")
    k = neighbors.shape[-1]
    xj = ops.gather(x, neighbors)
    xi = ops.expand(x, 2, k)
    e = ops.concat([xi, ops.sub(xj, xi)], axis=-1)
    slope = params.config.leaky_slope
    h = ops.leaky_relu(_bn(params, f"{prefix}.bn1", ops.linear(e, w1), training, -1), slope)
    h = ops.leaky_relu(_bn(params, f"{prefix}.bn2", ops.linear(h, t[f"{prefix}.lin2.w"]), training, -1), slope)
    return ops.max_over_set(h, axis=2)


def forward_point(params: EncoderParams, clouds, mode: str = "eval") -> tuple[Tensor, Tensor, list[Tensor]]:
    """[B, n, 3] -> (per-point [B, n, embed], global [B, embed], four block outputs)."""
    cfg = params.config
    x = clouds if isinstance(clouds, Tensor) else Tensor(np.asarray(clouds, dtype=params.dtype))
    if x.ndim != 3 or x.shape[-1] != 3:
        raise ShapeError(f"expected [B, n, 3] clouds, got {x.shape}")
    if x.shape[1] < cfg.k + 1:
        raise SizeError(f"need at least k+1={cfg.k + 1} points, got {x.shape[1]}")
    tr = _training(mode)
    blocks = []
    h = x
    for i in range(1, 5):
        nbr = knn_graph(h, cfg.k)
        h = edge_conv(params, f"pt.ec{i}", h, nbr, tr)
        blocks.append(h)
    cat = ops.concat(blocks, axis=-1)
    per_point = ops.leaky_relu(_bn(params, "pt.fc_bn", ops.linear(cat, params.tensors["pt.fc.w"]), tr, -1),
                               cfg.leaky_slope)
    return per_point, ops.max_over_set(per_point, axis=1), blocks


def fusion_logits(params: EncoderParams, fi: Tensor, fp: Tensor) -> Tensor:
    if fi.shape != fp.shape or fi.ndim != 2 or fi.shape[1] != params.config.embed:
        raise ShapeError(f"fusion inputs must both be [B, {params.config.embed}], got {fi.shape} and {fp.shape}")
    t = params.tensors
    h = ops.relu(ops.linear(ops.concat([fi, fp], axis=1), t["fuse.fc1.w"], t["fuse.fc1.b"]))
    return ops.linear(h, t["fuse.fc2.w"], t["fuse.fc2.b"])


def forward_fusion(params: EncoderParams, fi: Tensor, fp: Tensor) -> Tensor:
    """Probability [B] that image and cloud features come from the same object."""
    return ops.take(ops.softmax(fusion_logits(params, fi, fp), axis=-1), 1, axis=-1)


def forward_segmentation(params: EncoderParams, clouds, mode: str = "eval", freeze_base: bool = False) -> Tensor:
    """Per-point part logits [B, n, num_parts].

    With ``freeze_base`` the point network runs in eval mode outside the
    graph, so its weights and statistics cannot change.
    """
    if params.num_parts is None:
        raise ConfigError("segmentation head not initialized; call add_segmentation_head")
    tr = _training(mode)
    if freeze_base:
        with no_grad():
            _, glob, blocks = forward_point(params, clouds, "eval")
        glob, blocks = ops.detach(glob), [ops.detach(b) for b in blocks]
    else:
        _, glob, blocks = forward_point(params, clouds, mode)
    n = blocks[0].shape[1]
    h = ops.concat(blocks + [ops.expand(glob, 1, n)], axis=-1)
    t = params.tensors
    n_hidden = len(params.config.seg_hidden)
    for i in range(1, n_hidden + 1):
        h = ops.leaky_relu(_bn(params, f"seg.bn{i}", ops.linear(h, t[f"seg.fc{i}.w"]), tr, -1),
                           params.config.leaky_slope)
    last = n_hidden + 1
    return ops.linear(h, t[f"seg.fc{last}.w"], t[f"seg.fc{last}.b"])


# ------------------------------------------------------------------ checkpoints

_MAGIC = b"CKPT1"


def save_checkpoint(params: EncoderParams, path: str | Path) -> None:
    """Named float32 tensors: magic, uint32 count, then per tensor
    (uint32 name length, name, uint32 rank, uint32 extents, payload)."""
    items: list[tuple[str, np.ndarray]] = [(k, t.data) for k, t in params.tensors.items()]
    items += list(params.named_buffers().items())
    items.append(("meta.iteration", np.array(params.iteration, dtype=np.float64)))
    seed = int(params.seed) & 0xFFFFFFFF
    items.append(("meta.seed", np.array([seed >> 16, seed & 0xFFFF], dtype=np.float64)))
    chunks = [_MAGIC, struct.pack("<I", len(items))]
    for name, arr in items:
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if not raw.startswith(_MAGIC):
        raise FormatError(f"{path}: not a CKPT1 checkpoint")
    pos = len(_MAGIC)

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(raw):
            raise FormatError(f"{path}: truncated checkpoint")
        vals = struct.unpack_from(fmt, raw, pos)
        pos += size
        return vals

    (count,) = take("<I")
    out = {}
    for _ in range(count):
        (ln,) = take("<I")
        name = raw[pos:pos + ln].decode("utf-8")
        pos += ln
        (rank,) = take("<I")
        shape = take(f"<{rank}I") if rank else ()
        n = int(np.prod(shape)) if rank else 1
        if pos + 4 * n > len(raw):
            raise FormatError(f"{path}: truncated payload for {name}")
        out[name] = np.frombuffer(raw, dtype="<f4", count=n, offset=pos).reshape(shape).copy()
        pos += 4 * n
    return out


def load_checkpoint(path: str | Path, config: EncoderConfig, dtype=np.float32) -> EncoderParams:
    """Rebuild parameters for ``config`` and fill them from ``path``; any missing
    or mis-shaped tensor is reported by name."""
    blob = read_checkpoint(path)
    head = f"seg.fc{len(config.seg_hidden) + 1}.w"
    num_parts = blob[head].shape[0] if head in blob else None
    p = init_params(config, 0, dtype=dtype, num_parts=num_parts)
    expected = {k: t.data for k, t in p.tensors.items()} | p.named_buffers()
    for name, ref in expected.items():
        if name not in blob:
            raise ConfigError(f"checkpoint {path} lacks tensor {name!r}")
        if blob[name].shape != ref.shape:
            raise ConfigError(f"tensor {name!r}: checkpoint shape {blob[name].shape} "
                              f"does not match configured shape {ref.shape}")
        ref[...] = blob[name]
    extra = set(blob) - set(expected) - {"meta.iteration", "meta.seed"}
    if extra:
        raise ConfigError(f"checkpoint {path} has unexpected tensors: {sorted(extra)}")
    p.iteration = int(blob["meta.iteration"])
    hi, lo = (int(v) for v in blob["meta.seed"])
    p.seed = (hi << 16) | lo
    return p


def with_config(config: EncoderConfig, **changes) -> EncoderConfig:
    return replace(config, **changes)
