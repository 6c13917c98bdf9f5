"""Multi-view pointmap network: patch encoder, image-index embeddings,
all-to-all fusion transformer and two (local / global) decoding heads.

Everything is plain numpy with hand-written backward passes. A forward pass
optionally records its activations on a :class:`Tape`, which
:func:`backward` consumes to fill parameter gradients.
"""

from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .errors import (
    ConfigMismatch,
    FormatError,
    NonFiniteActivation,
    PoolTooSmall,
    ShapeError,
    StaleTape,
)
from .geometry import CONF_CLAMP, ConfidenceMap, Frame, Pointmap

CKPT_MAGIC = b"F3RCKPT1"
CKPT_VERSION = 1
HEADS = ("local", "global")


@dataclass(frozen=True)
class ModelConfig:
    patch_size: int = 4
    embed_dim: int = 64
    fusion_layers: int = 4
    attention_heads: int = 4
    mlp_ratio: float = 4.0
    head_hidden_dim: int = 64
    pool_size: int = 32
    max_train_views: int = 4
    precision: str = "single"

    def __post_init__(self):
        if self.embed_dim % self.attention_heads:
            raise ValueError("embed_dim must be divisible by attention_heads")
        if self.embed_dim % 4:
            raise ValueError("embed_dim must be divisible by 4 for the 2-D patch embedding")
        if self.pool_size < self.max_train_views:
            raise ValueError("pool_size must be >= max_train_views")
        if self.precision not in ("single", "double"):
            raise ValueError("precision must be 'single' or 'double'")

    @property
    def dtype(self):
        return np.float32 if self.precision == "single" else np.float64

    @property
    def mlp_hidden(self) -> int:
        return int(round(self.embed_dim * self.mlp_ratio))

    def tokens_per_view(self, h: int, w: int) -> int:
        return (h // self.patch_size) * (w // self.patch_size)


class ParameterStore:
    """Named weight arrays plus same-shaped gradient arrays."""

    def __init__(self, params: dict[str, np.ndarray]):
        self.params = dict(params)
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        self.version = 0

    def __getitem__(self, name):
        return self.params[name]

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def items(self):
        return self.params.items()

    def zero_grad(self):
        for g in self.grads.values():
            g.fill(0.0)

    def touch(self):
        """Mark the weights as modified (invalidates recorded tapes)."""
        self.version += 1

    def copy(self) -> "ParameterStore":
        out = ParameterStore({k: v.copy() for k, v in self.params.items()})
        out.grads = {k: v.copy() for k, v in self.grads.items()}
        return out

    def n_values(self) -> int:
        return sum(v.size for v in self.params.values())


def _trunc_normal(rng, shape, std=0.02):
    x = rng.normal(size=shape)
    while True:
        bad = np.abs(x) > 2
        if not bad.any():
            return x * std
        x[bad] = rng.normal(size=int(bad.sum()))


def init_params(config: ModelConfig, seed: int = 0) -> ParameterStore:
    """Truncated-normal projections, zero biases, zero residual output projections."""
    rng = np.random.default_rng(seed)
    d, p = config.embed_dim, config.patch_size
    hid = config.mlp_hidden
    out_ch = p * p * 4
    w = {}
    w["enc.patch.w"] = _trunc_normal(rng, (p * p * 3, d))
    w["enc.patch.b"] = np.zeros(d)
    w["enc.fc1.w"] = _trunc_normal(rng, (d, hid))
    w["enc.fc1.b"] = np.zeros(hid)
    w["enc.fc2.w"] = _trunc_normal(rng, (hid, d))
    w["enc.fc2.b"] = np.zeros(d)
    for l in range(config.fusion_layers):
        pre = f"fusion.{l}."
        w[pre + "ln1.g"] = np.ones(d)
        w[pre + "ln1.b"] = np.zeros(d)
        w[pre + "attn.qkv.w"] = _trunc_normal(rng, (d, 3 * d))
        w[pre + "attn.qkv.b"] = np.zeros(3 * d)
        w[pre + "attn.out.w"] = np.zeros((d, d))
        w[pre + "attn.out.b"] = np.zeros(d)
        w[pre + "ln2.g"] = np.ones(d)
        w[pre + "ln2.b"] = np.zeros(d)
        w[pre + "mlp.fc1.w"] = _trunc_normal(rng, (d, hid))
        w[pre + "mlp.fc1.b"] = np.zeros(hid)
        w[pre + "mlp.fc2.w"] = np.zeros((hid, d))
        w[pre + "mlp.fc2.b"] = np.zeros(d)
    w["fusion.norm.g"] = np.ones(d)
    w["fusion.norm.b"] = np.zeros(d)
    for head in HEADS:
        pre = f"head.{head}."
        w[pre + "fc1.w"] = _trunc_normal(rng, (d, config.head_hidden_dim))
        w[pre + "fc1.b"] = np.zeros(config.head_hidden_dim)
        w[pre + "fc2.w"] = _trunc_normal(rng, (config.head_hidden_dim, out_ch))
        w[pre + "fc2.b"] = np.zeros(out_ch)
    return ParameterStore({k: v.astype(config.dtype) for k, v in w.items()})


# --------------------------------------------------------------------------- bundle


@dataclass
class PredictionBundle:
    """Stacked per-view predictions.

    ``*_points`` are (N, H, W, 3); ``*_conf`` hold the raw confidence Σ̂ (N, H, W),
    already clamped to [-20, 20].
    """

    local_points: np.ndarray
    local_conf: np.ndarray
    global_points: np.ndarray
    global_conf: np.ndarray

    @property
    def n_views(self) -> int:
        return self.local_points.shape[0]

    def points(self, head: str) -> np.ndarray:
        return self.local_points if head == "local" else self.global_points

    def conf(self, head: str) -> np.ndarray:
        return self.local_conf if head == "local" else self.global_conf

    def pointmap(self, head: str, i: int) -> Pointmap:
        pts = self.points(head)[i]
        frame = Frame.LOCAL if head == "local" else Frame.GLOBAL
        return Pointmap(pts, frame, np.ones(pts.shape[:2], dtype=bool))

    def confidence(self, head: str, i: int) -> ConfidenceMap:
        return ConfidenceMap(self.conf(head)[i])

    @classmethod
    def zeros_like(cls, other: "PredictionBundle") -> "PredictionBundle":
        return cls(*(np.zeros_like(a) for a in other.arrays()))

    def arrays(self):
        return (self.local_points, self.local_conf, self.global_points, self.global_conf)


# --------------------------------------------------------------------------- embeddings


def patchify(images: np.ndarray, p: int) -> np.ndarray:
    """(N, H, W, C) -> (N, HW/P^2, P*P*C), patches in row-major order."""
    n, h, w, c = images.shape
    if h % p or w % p:
        raise ShapeError(f"image {h}x{w} not divisible by patch size {p}")
    x = images.reshape(n, h // p, p, w // p, p, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(n, (h // p) * (w // p), p * p * c)


def unpatchify(tokens: np.ndarray, h: int, w: int, p: int) -> np.ndarray:
    """Inverse of :func:`patchify`."""
    n, _, ch = tokens.shape
    c = ch // (p * p)
    x = tokens.reshape(n, h // p, w // p, p, p, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(n, h, w, c)


def _sincos(pos: np.ndarray, dim: int, freqs: np.ndarray) -> np.ndarray:
    ang = np.outer(pos, freqs)
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def patch_position_embedding(gh: int, gw: int, dim: int) -> np.ndarray:
    """Fixed 2-D sin/cos grid embedding, (gh*gw, dim)."""
    q = dim // 4
    freqs = 1.0 / 10000.0 ** (np.arange(q) / q)
    rows, cols = np.meshgrid(np.arange(gh), np.arange(gw), indexing="ij")
    return np.concatenate(
        [_sincos(rows.ravel(), dim // 2, freqs), _sincos(cols.ravel(), dim // 2, freqs)], axis=1
    )


def index_embedding(index, embed_dim: int, pool_size: int) -> np.ndarray:
    """Fourier features of the raw image index.

    ``embed_dim/2`` frequencies on a geometric ladder from 1 down to
    ``1/pool_size``; the first half of the vector holds the sines, the second
    half the cosines, so every embedding has norm ``sqrt(embed_dim/2)``.
    """
    half = embed_dim // 2
    if half == 1:
        freqs = np.ones(1)
    else:
        freqs = (1.0 / pool_size) ** (np.arange(half) / (half - 1))
    idx = np.atleast_1d(np.asarray(index, dtype=np.float64))
    out = _sincos(idx, embed_dim, freqs)
    return out[0] if np.ndim(index) == 0 else out


def sample_index_assignment(n_views: int, pool_size: int, rng: np.random.Generator) -> list[int]:
    """Index 1 for the first view, the rest drawn without replacement from 2..pool_size."""
    if n_views > pool_size:
        raise PoolTooSmall(f"{n_views} views do not fit in an index pool of {pool_size}")
    if n_views < 1:
        raise ValueError("n_views must be >= 1")
    rest = rng.choice(np.arange(2, pool_size + 1), size=n_views - 1, replace=False)
    return [1] + [int(i) for i in rest]


def consecutive_assignment(n_views: int) -> list[int]:
    return list(range(1, n_views + 1))


def _check_assignment(assignment, n_views, pool_size):
    if len(assignment) != n_views:
        raise ShapeError(f"assignment has {len(assignment)} indices for {n_views} views")
    if n_views > pool_size or max(assignment) > pool_size:
        raise PoolTooSmall(f"indices exceed pool size {pool_size}")
    if len(set(assignment)) != len(assignment) or min(assignment) < 1:
        raise ValueError("assignment indices must be distinct and >= 1")


# --------------------------------------------------------------------------- tape


@dataclass
class Tape:
    """Activations saved by a recorded forward pass."""

    version: int | None = None
    params_id: int | None = None
    shape: tuple | None = None
    caches: dict = field(default_factory=dict)
    consumed: bool = False


def _rec(tape, key, value):
    if tape is not None:
        tape.caches[key] = value


# --------------------------------------------------------------------------- forward


def patchify_encode(images, params: ParameterStore, config: ModelConfig, tape: Tape | None = None):
    """Encode every image independently into (N, HW/P^2, D) patch tokens."""
    images = np.asarray(images, dtype=config.dtype)
    if images.ndim == 3:
        images = images[None]
    n, h, w, _ = images.shape
    p = config.patch_size
    x = patchify(images, p)
    pos = patch_position_embedding(h // p, w // p, config.embed_dim).astype(config.dtype)
    h0, c0 = nn.linear_forward(x, params["enc.patch.w"], params["enc.patch.b"])
    h0 = h0 + pos
    m, cm = nn.mlp_forward(h0, params["enc.fc1.w"], params["enc.fc1.b"], params["enc.fc2.w"], params["enc.fc2.b"])
    _rec(tape, "enc", (c0, cm))
    return h0 + m


def _encode_backward(dtok, tape, params, grads):
    c0, cm = tape.caches["enc"]
    dh0, dw1, db1, dw2, db2 = nn.mlp_backward(dtok, cm, params["enc.fc1.w"], params["enc.fc2.w"])
    dh0 = dh0 + dtok
    _, dwp, dbp = nn.linear_backward(dh0, c0, params["enc.patch.w"])
    for k, g in (("enc.fc1.w", dw1), ("enc.fc1.b", db1), ("enc.fc2.w", dw2), ("enc.fc2.b", db2),
                 ("enc.patch.w", dwp), ("enc.patch.b", dbp)):
        grads[k] += g


def fusion_forward(tokens, params: ParameterStore, config: ModelConfig, tape: Tape | None = None):
    """Pre-norm transformer over the full concatenated token sequence (T, D)."""
    x = tokens
    if x.ndim != 2 or x.shape[1] != config.embed_dim:
        raise ShapeError(f"expected (T, {config.embed_dim}) tokens, got {x.shape}")
    for l in range(config.fusion_layers):
        pre = f"fusion.{l}."
        a_in, c_ln1 = nn.layernorm_forward(x, params[pre + "ln1.g"], params[pre + "ln1.b"])
        a, c_att = nn.attention_forward(
            a_in, params[pre + "attn.qkv.w"], params[pre + "attn.qkv.b"],
            params[pre + "attn.out.w"], params[pre + "attn.out.b"], config.attention_heads,
        )
        x = x + a
        m_in, c_ln2 = nn.layernorm_forward(x, params[pre + "ln2.g"], params[pre + "ln2.b"])
        m, c_mlp = nn.mlp_forward(
            m_in, params[pre + "mlp.fc1.w"], params[pre + "mlp.fc1.b"],
            params[pre + "mlp.fc2.w"], params[pre + "mlp.fc2.b"],
        )
        x = x + m
        _rec(tape, ("fusion", l), (c_ln1, c_att, c_ln2, c_mlp))
    y, c_norm = nn.layernorm_forward(x, params["fusion.norm.g"], params["fusion.norm.b"])
    _rec(tape, "fusion.norm", c_norm)
    if not np.all(np.isfinite(y)):
        raise NonFiniteActivation("fusion transformer produced non-finite activations")
    return y


def _fusion_backward(dy, tape, params, grads, config):
    dx, dg, db = nn.layernorm_backward(dy, tape.caches["fusion.norm"])
    grads["fusion.norm.g"] += dg
    grads["fusion.norm.b"] += db
    for l in reversed(range(config.fusion_layers)):
        pre = f"fusion.{l}."
        c_ln1, c_att, c_ln2, c_mlp = tape.caches[("fusion", l)]
        dm_in, dw1, db1, dw2, db2 = nn.mlp_backward(dx, c_mlp, params[pre + "mlp.fc1.w"], params[pre + "mlp.fc2.w"])
        grads[pre + "mlp.fc1.w"] += dw1
        grads[pre + "mlp.fc1.b"] += db1
        grads[pre + "mlp.fc2.w"] += dw2
        grads[pre + "mlp.fc2.b"] += db2
        d, dg, db = nn.layernorm_backward(dm_in, c_ln2)
        grads[pre + "ln2.g"] += dg
        grads[pre + "ln2.b"] += db
        dx = dx + d
        da_in, dwq, dbq, dwo, dbo = nn.attention_backward(
            dx, c_att, params[pre + "attn.qkv.w"], params[pre + "attn.out.w"], config.attention_heads
        )
        grads[pre + "attn.qkv.w"] += dwq
        grads[pre + "attn.qkv.b"] += dbq
        grads[pre + "attn.out.w"] += dwo
        grads[pre + "attn.out.b"] += dbo
        d, dg, db = nn.layernorm_backward(da_in, c_ln1)
        grads[pre + "ln1.g"] += dg
        grads[pre + "ln1.b"] += db
        dx = dx + d
    return dx


def _head_view(tok, params, head):
    pre = f"head.{head}."
    return nn.mlp_forward(tok, params[pre + "fc1.w"], params[pre + "fc1.b"], params[pre + "fc2.w"], params[pre + "fc2.b"])


def decode_heads(fused, params: ParameterStore, config: ModelConfig, h: int, w: int,
                 tape: Tape | None = None, jobs: int = 1) -> PredictionBundle:
    """Run both heads on fused tokens of shape (N, T, D).

    Views are decoded independently; with ``jobs > 1`` they run on a thread
    pool and are written back into fixed slots, so results do not depend on
    scheduling.
    """
    n, t, d = fused.shape
    p = config.patch_size
    if t != config.tokens_per_view(h, w):
        raise ShapeError(f"{t} tokens per view do not match a {h}x{w} image")
    out = {}
    for head in HEADS:
        raw = np.empty((n, t, p * p * 4), dtype=fused.dtype)
        caches = [None] * n

        def run(i, head=head, raw=raw, caches=caches):
            raw[i], caches[i] = _head_view(fused[i], params, head)

        if jobs > 1 and n > 1:
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                list(pool.map(run, range(n)))
        else:
            for i in range(n):
                run(i)
        grid = unpatchify(raw, h, w, p)
        conf = grid[..., 3]
        out[head] = (grid[..., :3].copy(), np.clip(conf, -CONF_CLAMP, CONF_CLAMP))
        _rec(tape, ("head", head), (caches, np.abs(conf) <= CONF_CLAMP))
    return PredictionBundle(out["local"][0], out["local"][1], out["global"][0], out["global"][1])


def _heads_backward(bundle_grad: PredictionBundle, tape, params, grads, config, h, w):
    p = config.patch_size
    dfused = None
    for head in HEADS:
        caches, conf_live = tape.caches[("head", head)]
        dgrid = np.concatenate(
            [bundle_grad.points(head), (bundle_grad.conf(head) * conf_live)[..., None]], axis=-1
        )
        draw = patchify(dgrid.astype(params["fusion.norm.g"].dtype), p)
        pre = f"head.{head}."
        dtoks = np.empty((draw.shape[0], draw.shape[1], config.embed_dim), dtype=draw.dtype)
        for i, cache in enumerate(caches):
            dx, dw1, db1, dw2, db2 = nn.mlp_backward(draw[i], cache, params[pre + "fc1.w"], params[pre + "fc2.w"])
            grads[pre + "fc1.w"] += dw1
            grads[pre + "fc1.b"] += db1
            grads[pre + "fc2.w"] += dw2
            grads[pre + "fc2.b"] += db2
            dtoks[i] = dx
        dfused = dtoks if dfused is None else dfused + dtoks
    return dfused


def forward(images, assignment, params: ParameterStore, config: ModelConfig,
            tape: Tape | None = None, jobs: int = 1) -> PredictionBundle:
    """Single pass from N images to local/global pointmaps and confidences.

    ``assignment`` holds one image index per view (first must be the anchor).
    Pass a fresh :class:`Tape` to record activations for :func:`backward`.
    """
    images = np.asarray(images, dtype=config.dtype)
    if images.ndim != 4:
        raise ShapeError(f"expected N x H x W x 3 images, got {images.shape}")
    n, h, w, _ = images.shape
    _check_assignment(assignment, n, config.pool_size)
    if tape is not None:
        tape.caches.clear()
        tape.version = params.version
        tape.params_id = id(params)
        tape.shape = (n, h, w)
        tape.consumed = False
    tok = patchify_encode(images, params, config, tape)
    t = tok.shape[1]
    idx = index_embedding(np.asarray(assignment), config.embed_dim, config.pool_size).astype(config.dtype)
    tok = tok + idx[:, None, :]
    fused = fusion_forward(tok.reshape(n * t, -1), params, config, tape)
    return decode_heads(fused.reshape(n, t, -1), params, config, h, w, tape, jobs)


def backward(bundle_grad: PredictionBundle, tape: Tape, params: ParameterStore,
             config: ModelConfig, accumulate: bool = False) -> dict[str, np.ndarray]:
    """Back-propagate d(loss)/d(bundle) into ``params.grads`` and return them."""
    if tape.version is None or tape.params_id != id(params) or tape.version != params.version:
        raise StaleTape("tape was recorded for different or since-modified parameters")
    if tape.consumed:
        raise StaleTape("tape already consumed by a backward pass")
    n, h, w = tape.shape
    if bundle_grad.local_points.shape != (n, h, w, 3):
        raise StaleTape("gradient shape does not match the recorded forward pass")
    if not accumulate:
        params.zero_grad()
    grads = params.grads
    dfused = _heads_backward(bundle_grad, tape, params, grads, config, h, w)
    dtok = _fusion_backward(dfused.reshape(n * dfused.shape[1], -1), tape, params, grads, config)
    _encode_backward(dtok.reshape(dfused.shape), tape, params, grads)
    tape.consumed = True
    return grads


# --------------------------------------------------------------------------- checkpoints

def _config_words(c: ModelConfig) -> tuple:
    return (c.patch_size, c.embed_dim, c.fusion_layers, c.attention_heads,
            int(round(c.mlp_ratio * 1000)), c.head_hidden_dim, c.pool_size,
            c.max_train_views, 0 if c.precision == "single" else 1)


def save_checkpoint(path, config: ModelConfig, tensors: dict[str, np.ndarray]) -> None:
    """Write named tensors with their model config (``F3RCKPT1`` format)."""
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", CKPT_VERSION))
        f.write(struct.pack("<9I", *_config_words(config)))
        f.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            arr = np.asarray(arr)
            if arr.dtype == np.float32:
                code, dt = 0, "<f4"
            elif arr.dtype == np.float64:
                code, dt = 1, "<f8"
            else:
                raise TypeError(f"unsupported dtype {arr.dtype} for {name}")
            raw = name.encode("utf-8")
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
            f.write(struct.pack("<BB", code, arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype=dt).tobytes())


def load_checkpoint(path) -> tuple[ModelConfig, dict[str, np.ndarray]]:
    buf = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError("truncated checkpoint")
        out = buf[pos:pos + n]
        pos += n
        return out

    if take(8) != CKPT_MAGIC:
        raise FormatError("bad checkpoint magic")
    (version,) = struct.unpack("<I", take(4))
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    words = struct.unpack("<9I", take(36))
    try:
        config = ModelConfig(
            patch_size=words[0], embed_dim=words[1], fusion_layers=words[2], attention_heads=words[3],
            mlp_ratio=words[4] / 1000.0, head_hidden_dim=words[5], pool_size=words[6],
            max_train_views=words[7], precision="single" if words[8] == 0 else "double",
        )
    except ValueError as e:
        raise FormatError(f"invalid model config in checkpoint: {e}") from e
    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        code, ndim = struct.unpack("<BB", take(2))
        if code not in (0, 1):
            raise FormatError(f"bad dtype code {code}")
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        dt = np.dtype("<f4" if code == 0 else "<f8")
        size = int(np.prod(shape)) * dt.itemsize
        arr = np.frombuffer(take(size), dtype=dt).reshape(shape)
        tensors[name] = arr.astype(dt.newbyteorder("="))
    if pos != len(buf):
        raise FormatError("trailing bytes in checkpoint")
    return config, tensors


def save_params(params: ParameterStore, path, config: ModelConfig) -> None:
    save_checkpoint(path, config, params.params)


def load_params(path, config: ModelConfig | None = None) -> tuple[ModelConfig, ParameterStore]:
    """Load weights; raise :class:`ConfigMismatch` if they disagree with ``config``."""
    stored, tensors = load_checkpoint(path)
    weights = {k: v for k, v in tensors.items() if not k.startswith("opt/")}
    if config is not None:
        if stored != config:
            raise ConfigMismatch(f"checkpoint config {stored} differs from {config}")
        expected = init_params(config)
        if set(expected.params) != set(weights) or any(
            expected[k].shape != weights[k].shape for k in weights
        ):
            raise ConfigMismatch("checkpoint tensors do not match the model layout")
    return stored, ParameterStore(weights)
