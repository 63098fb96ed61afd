"""The CRNN classifier, the multitask CTC + LID model, the joint loss and checkpoints."""

from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import LANGUAGES
from .errors import ConfigMismatchError, InputTooShortError, IntegrityError
from .tensor import (
    BiGRU,
    LSTM,
    LayerNorm,
    Linear,
    Module,
    Parameter,
    ResidualBlock,
    Tensor,
    dropout,
    gather_last,
    glu,
    log_softmax,
    softmax,
    swish,
)
from .tensor import functional as F
from .tensor.core import _softmax

# ---------------------------------------------------------------------------
# configs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CrnnConfig:
    """CRNN hyperparameters.

    Defaults are the desk-scale model (channels 16/32/64, 2 bidirectional
    layers of 64 units); :meth:`full_scale` gives channels 32/64/128 and 5
    layers of 512.  Each conv stage is one residual
    block whose first convolution is strided by ``(time, freq)``.
    """

    n_mels: int = 80
    channels: tuple[int, ...] = (16, 32, 64)
    strides: tuple[tuple[int, int], ...] = ((1, 2), (1, 2), (1, 2))
    gru_layers: int = 2
    hidden: int = 64
    classes: int = 2
    dropout: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "strides", tuple(tuple(int(v) for v in s) for s in self.strides))
        if self.gru_layers < 1 or self.hidden <= 0:
            raise ValueError("gru_layers must be >= 1 and hidden > 0")
        if len(self.channels) != len(self.strides):
            raise ValueError("channels and strides must have one entry per conv stage")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")

    @classmethod
    def full_scale(cls, **overrides) -> "CrnnConfig":
        return cls(**{"channels": (32, 64, 128), "gru_layers": 5, "hidden": 512, **overrides})

    @property
    def time_reduction(self) -> int:
        return int(np.prod([s[0] for s in self.strides]))

    @property
    def freq_out(self) -> int:
        f = self.n_mels
        for _, sf in self.strides:
            f = (f - 1) // sf + 1
        return f


@dataclass(frozen=True)
class MtlConfig:
    """Multitask model: shared encoder, per-frame CTC head, LSTM LID head.

    ``encoder`` is ``"conformer"`` (simplified conformer blocks) or ``"gru"``
    (bidirectional GRU stack, cheaper on CPU).  ``subsample`` stacks that many
    consecutive frames before the input projection.
    """

    ctc_vocab_size: int
    n_mels: int = 80
    encoder: str = "conformer"
    blocks: int = 4
    d_model: int = 144
    heads: int = 4
    conv_kernel: int = 15
    ff_mult: int = 4
    subsample: int = 2
    lid_hidden: int = 64
    classes: int = 2
    dropout: float = 0.1
    ctc_lambda: float = 0.2
    lid_alpha: float = 100.0

    def __post_init__(self):
        if self.encoder not in ("conformer", "gru"):
            raise ValueError(f"encoder must be 'conformer' or 'gru', got {self.encoder!r}")
        if not 0.0 <= self.ctc_lambda <= 1.0:
            raise ValueError(f"lambda must be in [0, 1], got {self.ctc_lambda}")
        if not self.lid_alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.lid_alpha}")
        if self.d_model % self.heads:
            raise ValueError("d_model must be divisible by heads")
        if self.conv_kernel % 2 == 0:
            raise ValueError("conv_kernel must be odd")
        if self.ctc_vocab_size < 2:
            raise ValueError("ctc_vocab_size must include the blank and at least one symbol")


def _pad_batch(feats: Sequence[np.ndarray], dtype) -> tuple[np.ndarray, list[int]]:
    lengths = [int(f.shape[0]) for f in feats]
    n_bins = feats[0].shape[1]
    out = np.zeros((len(feats), max(lengths), n_bins), dtype=dtype)
    for i, f in enumerate(feats):
        out[i, : f.shape[0]] = f
    return out, lengths


def _normalize(feat: np.ndarray) -> np.ndarray:
    """Remove the utterance's overall level and scale; the spectral shape is kept."""
    f = np.asarray(feat, dtype=np.float64)
    return (f - f.mean()) / (f.std() + 1e-5)


# ---------------------------------------------------------------------------
# CRNN
# ---------------------------------------------------------------------------


class CRNN(Module):
    kind = "crnn"

    def __init__(self, config: CrnnConfig = CrnnConfig(), seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = dtype
        rng = np.random.default_rng(seed)
        blocks, c_in = [], 1
        for c_out, stride in zip(config.channels, config.strides):
            blocks.append(ResidualBlock(c_in, c_out, stride, rng=rng, dtype=dtype))
            c_in = c_out
        self.blocks = blocks
        d_in = config.channels[-1] * config.freq_out
        layers = []
        for _ in range(config.gru_layers):
            layers.append(BiGRU(d_in, config.hidden, rng=rng, dtype=dtype))
            d_in = 2 * config.hidden
        self.rnn = layers
        self.classifier = Linear(2 * config.hidden, config.classes, rng, dtype)
        self.rng = np.random.default_rng(seed + 1)

    def forward(self, feats: Sequence[np.ndarray]) -> Tensor:
        """Logits (N, classes) for a list of (T, n_mels) feature matrices."""
        cfg = self.config
        for f in feats:
            if f.ndim != 2 or f.shape[1] != cfg.n_mels:
                raise ValueError(f"expected (T, {cfg.n_mels}) features, got {f.shape}")
            if f.shape[0] < cfg.time_reduction:
                raise InputTooShortError(f"{f.shape[0]} frames; need at least {cfg.time_reduction}")
        x, lengths = _pad_batch([_normalize(f) for f in feats], self.dtype)
        h = Tensor(x[:, None])
        for block in self.blocks:
            h = block(h)
        n, c, t, fq = h.shape
        h = h.transpose(0, 2, 1, 3).reshape(n, t, c * fq)
        r = cfg.time_reduction
        lengths = [(length - 1) // r + 1 for length in lengths]
        for i, layer in enumerate(self.rnn):
            out = layer(h, lengths)
            h = dropout(out, cfg.dropout, self.rng, self.training) if i + 1 < len(self.rnn) else out
        final = self.rnn[-1].final_state(h, lengths)
        final = dropout(final, cfg.dropout, self.rng, self.training)
        return self.classifier(final)


def crnn_forward(feat, model: CRNN, training: bool = False) -> Tensor:
    """Logits of shape (classes,) for a single feature matrix."""
    model.train(training)
    return model([np.asarray(feat)])[0]


# ---------------------------------------------------------------------------
# multitask model
# ---------------------------------------------------------------------------


class FeedForward(Module):
    def __init__(self, d, mult, rng, dtype):
        self.norm = LayerNorm(d, dtype)
        self.up = Linear(d, d * mult, rng, dtype)
        self.down = Linear(d * mult, d, rng, dtype)

    def forward(self, x, p, rng, training):
        h = dropout(swish(self.up(self.norm(x))), p, rng, training)
        return dropout(self.down(h), p, rng, training)


class SelfAttention(Module):
    def __init__(self, d, heads, rng, dtype):
        self.heads = heads
        self.norm = LayerNorm(d, dtype)
        self.q = Linear(d, d, rng, dtype)
        self.k = Linear(d, d, rng, dtype)
        self.v = Linear(d, d, rng, dtype)
        self.out = Linear(d, d, rng, dtype)

    def forward(self, x, key_mask, p, rng, training):
        n, t, d = x.shape
        hd = d // self.heads
        h = self.norm(x)

        def split(z):
            return z.reshape(n, t, self.heads, hd).transpose(0, 2, 1, 3)

        q, k, v = split(self.q(h)), split(self.k(h)), split(self.v(h))
        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(hd)) + key_mask
        att = dropout(softmax(scores, axis=-1), p, rng, training)
        ctx = (att @ v).transpose(0, 2, 1, 3).reshape(n, t, d)
        return dropout(self.out(ctx), p, rng, training)


class ConvModule(Module):
    def __init__(self, d, kernel, rng, dtype):
        self.norm = LayerNorm(d, dtype)
        self.pointwise_in = Linear(d, 2 * d, rng, dtype)
        self.depthwise = Parameter(rng.uniform(-1, 1, (d, kernel)).astype(dtype) / math.sqrt(kernel))
        self.depthwise_bias = Parameter(np.zeros(d, dtype=dtype))
        self.post_norm = LayerNorm(d, dtype)
        self.pointwise_out = Linear(d, d, rng, dtype)

    def forward(self, x, time_mask, p, rng, training):
        h = glu(self.pointwise_in(self.norm(x)), axis=-1) * time_mask
        h = F.depthwise_conv1d(h, self.depthwise, self.depthwise_bias)
        h = swish(self.post_norm(h))
        return dropout(self.pointwise_out(h), p, rng, training)


class ConformerBlock(Module):
    """Half-step FF, self-attention, depthwise conv, half-step FF, final layer norm."""

    def __init__(self, cfg: MtlConfig, rng, dtype):
        d = cfg.d_model
        self.ff1 = FeedForward(d, cfg.ff_mult, rng, dtype)
        self.attn = SelfAttention(d, cfg.heads, rng, dtype)
        self.conv = ConvModule(d, cfg.conv_kernel, rng, dtype)
        self.ff2 = FeedForward(d, cfg.ff_mult, rng, dtype)
        self.norm = LayerNorm(d, dtype)

    def forward(self, x, key_mask, time_mask, p, rng, training):
        x = x + self.ff1(x, p, rng, training) * 0.5
        x = x + self.attn(x, key_mask, p, rng, training)
        x = x + self.conv(x, time_mask, p, rng, training)
        x = x + self.ff2(x, p, rng, training) * 0.5
        return self.norm(x)


@dataclass
class MtlOutput:
    ctc_log_probs: Tensor | None  # (N, T', V)
    lid_logits: Tensor  # (N, classes)
    lengths: list[int]


class MTLModel(Module):
    kind = "mtl"

    def __init__(self, config: MtlConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = dtype
        rng = np.random.default_rng(seed)
        d = config.d_model
        self.input_proj = Linear(config.n_mels * config.subsample, d, rng, dtype)
        if config.encoder == "conformer":
            self.encoder = [ConformerBlock(config, rng, dtype) for _ in range(config.blocks)]
        else:
            self.encoder = [BiGRU(d, d // 2, rng=rng, dtype=dtype) for _ in range(config.blocks)]
        self.ctc_head = Linear(d, config.ctc_vocab_size, rng, dtype)
        self.lid_lstm = LSTM(d, config.lid_hidden, rng=rng, dtype=dtype)
        self.lid_head = Linear(config.lid_hidden, config.classes, rng, dtype)
        self.rng = np.random.default_rng(seed + 1)

    def ctc_parameters(self) -> list[Parameter]:
        return self.ctc_head.parameters()

    def non_ctc_parameters(self) -> list[Parameter]:
        ctc = {id(p) for p in self.ctc_parameters()}
        return [p for p in self.parameters() if id(p) not in ctc]

    def encode(self, feats: Sequence[np.ndarray]) -> tuple[Tensor, list[int]]:
        cfg = self.config
        s = cfg.subsample
        stacked = []
        for f in feats:
            if f.ndim != 2 or f.shape[1] != cfg.n_mels:
                raise ValueError(f"expected (T, {cfg.n_mels}) features, got {f.shape}")
            if f.shape[0] < s:
                raise InputTooShortError(f"{f.shape[0]} frames; need at least {s}")
            g = _normalize(f)
            t = g.shape[0] // s
            stacked.append(g[: t * s].reshape(t, s * cfg.n_mels))
        x, lengths = _pad_batch(stacked, self.dtype)
        n, t, _ = x.shape
        h = self.input_proj(Tensor(x))
        valid = np.arange(t)[None, :] < np.asarray(lengths)[:, None]  # (N, T)
        time_mask = valid[:, :, None].astype(self.dtype)
        key_mask = np.where(valid, 0.0, -1e9).astype(self.dtype)[:, None, None, :]
        p, rng, training = cfg.dropout, self.rng, self.training
        for block in self.encoder:
            if isinstance(block, ConformerBlock):
                h = block(h, key_mask, time_mask, p, rng, training)
            else:
                h = dropout(block(h, lengths), p, rng, training)
        return h, lengths

    def forward(self, feats: Sequence[np.ndarray], heads: Sequence[str] = ("ctc", "lid")) -> MtlOutput:
        enc, lengths = self.encode(feats)
        ctc = log_softmax(self.ctc_head(enc), axis=-1) if "ctc" in heads else None
        lid_seq = self.lid_lstm(enc)
        last = dropout(gather_last(lid_seq, lengths), self.config.dropout, self.rng, self.training)
        return MtlOutput(ctc, self.lid_head(last), lengths)


def mtl_forward(feat, model: MTLModel, training: bool = False, heads=("ctc", "lid")):
    """``(ctc_log_probs (T', V) or None, lid_logits (classes,))`` for one feature matrix."""
    model.train(training)
    out = model([np.asarray(feat)], heads=heads)
    ctc = None if out.ctc_log_probs is None else out.ctc_log_probs[0]
    return ctc, out.lid_logits[0]


def joint_loss(l_ctc, l_lid, lam: float = 0.2, alpha: float = 100.0):
    """``(1 - lam) * l_ctc + lam * l_lid * alpha``; works on floats and tensors alike."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must be in [0, 1], got {lam}")
    if not alpha > 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    return (1 - lam) * l_ctc + lam * l_lid * alpha


def lid_logits(model: Module, feats: Sequence[np.ndarray]) -> Tensor:
    if isinstance(model, MTLModel):
        return model(feats, heads=("lid",)).lid_logits
    return model(feats)


def predict_language(feat, model: Module) -> tuple[str, float]:
    """Predicted language and its softmax probability; equal logits go to ``en``."""
    model.eval()
    logits = lid_logits(model, [np.asarray(feat)]).data[0].astype(np.float64)
    probs = _softmax(logits)
    k = int(np.argmax(logits))
    return LANGUAGES[k], float(probs[k])


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"CSLD"
CHECKPOINT_VERSION = 1


def model_config_dict(model: Module) -> dict:
    cfg = asdict(model.config)
    return {"kind": model.kind, "config": json.loads(json.dumps(cfg))}


def build_model(kind: str, config: dict, seed: int = 0) -> Module:
    if kind == "crnn":
        cfg = dict(config)
        cfg["channels"] = tuple(cfg.get("channels", CrnnConfig.channels))
        if "strides" in cfg:
            cfg["strides"] = tuple(tuple(s) for s in cfg["strides"])
        return CRNN(CrnnConfig(**cfg), seed=seed)
    if kind == "mtl":
        return MTLModel(MtlConfig(**config), seed=seed)
    raise ValueError(f"unknown model kind {kind!r}")


@dataclass
class Checkpoint:
    model: Module
    epoch: int = 0
    metric: float | None = None
    extra: dict = field(default_factory=dict)
    path: Path | None = None


def save_checkpoint(model: Module, path, epoch: int = 0, metric: float | None = None, extra: dict | None = None):
    """Write ``CSLD`` | u32 version | u32 len + JSON header | params | u32 CRC32."""
    header = {**model_config_dict(model), "epoch": epoch, "metric": metric, "extra": extra or {}}
    head = json.dumps(header, sort_keys=True, ensure_ascii=False).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(head)), head]
    params = list(model.named_parameters())
    parts.append(struct.pack("<I", len(params)))
    for name, p in params:
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)) + nb)
        parts.append(struct.pack("<B", p.ndim) + struct.pack(f"<{p.ndim}I", *p.shape))
        parts.append(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    body = b"".join(parts)
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))
    return Checkpoint(model, epoch, metric, extra or {}, Path(path))


def _read(buf: bytes, pos: int, fmt: str):
    size = struct.calcsize(fmt)
    if pos + size > len(buf):
        raise IntegrityError("checkpoint truncated")
    return struct.unpack_from(fmt, buf, pos), pos + size


def load_checkpoint(path, expect_kind: str | None = None, expect_config=None) -> Checkpoint:
    """Read a checkpoint, verifying magic, CRC, and (optionally) the model kind/config."""
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != CHECKPOINT_MAGIC:
        raise IntegrityError(f"{path}: not a checkpoint file")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != crc:
        raise IntegrityError(f"{path}: checksum mismatch (file corrupt or truncated)")
    (version, head_len), pos = _read(body, 4, "<II")
    if version != CHECKPOINT_VERSION:
        raise IntegrityError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(body[pos : pos + head_len].decode("utf-8"))
    pos += head_len
    kind = header["kind"]
    if expect_kind is not None and kind != expect_kind:
        raise ConfigMismatchError(f"{path}: checkpoint holds a {kind!r} model, expected {expect_kind!r}")
    if expect_config is not None:
        want = json.loads(json.dumps(asdict(expect_config)))
        if type(expect_config).__name__ != {"crnn": "CrnnConfig", "mtl": "MtlConfig"}[kind] or want != header["config"]:
            raise ConfigMismatchError(f"{path}: checkpoint config does not match the requested configuration")
    model = build_model(kind, header["config"])
    (count,), pos = _read(body, pos, "<I")
    state = {}
    for _ in range(count):
        (name_len,), pos = _read(body, pos, "<H")
        name = body[pos : pos + name_len].decode("utf-8")
        pos += name_len
        (ndim,), pos = _read(body, pos, "<B")
        shape, pos = _read(body, pos, f"<{ndim}I")
        n_bytes = 4 * int(np.prod(shape, dtype=np.int64))
        if pos + n_bytes > len(body):
            raise IntegrityError("checkpoint truncated")
        state[name] = np.frombuffer(body, dtype="<f4", count=n_bytes // 4, offset=pos).reshape(shape)
        pos += n_bytes
    try:
        model.load_state_dict(state)
    except (KeyError, ValueError) as exc:
        raise ConfigMismatchError(f"{path}: {exc}") from None
    model.eval()
    return Checkpoint(model, header["epoch"], header["metric"], header.get("extra", {}), Path(path))
