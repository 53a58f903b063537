"""Encoders, projection heads, modality branches, and checkpointing.

Each modality branch carries a gradient-trained query encoder, a momentum
encoder of identical architecture, and four projection heads: query/key
heads for the within-modality objective and query/key heads for the
cross-modality objective. Key-side parameters are never touched by the
optimizer; they move only through :func:`momentum_update`.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import ViewBatch
from .errors import (
    ConfigError,
    ConformabilityError,
    CorruptCheckpointError,
    UnsupportedVersionError,
)
from .losses import EmbeddingSet

MAGIC_PREFIX = b"MVITAC"
FORMAT_VERSION = 1
MAGIC = MAGIC_PREFIX + b"%02d" % FORMAT_VERSION


@dataclass(frozen=True)
class EncoderConfig:
    """Plain convolutional backbone: conv blocks, ReLU, global average pool.

    Desk-scale default: four 3x3 blocks at stride 2 on 32x32 inputs,
    64-dimensional output. A paper-scale profile (224x224 inputs, 512-dim
    output) is expressible via :func:`paper_scale_encoder_config`.
    """

    in_channels: int = 3
    blocks: tuple[tuple[int, int, int, int], ...] = (
        (16, 3, 2, 1), (32, 3, 2, 1), (64, 3, 2, 1), (64, 3, 2, 1))
    backbone_dim: int = 64
    input_size: int = 32

    def __post_init__(self):
        if self.in_channels < 1:
            raise ConfigError(f"in_channels must be >= 1, got {self.in_channels}")
        if not self.blocks:
            raise ConfigError("encoder needs at least one conv block")
        if self.blocks[-1][0] != self.backbone_dim:
            raise ConfigError(
                f"last block has {self.blocks[-1][0]} filters but backbone_dim "
                f"is {self.backbone_dim}")
        extent = self.input_size
        for i, (filters, kernel, stride, padding) in enumerate(self.blocks):
            if filters < 1 or kernel < 1 or stride < 1 or padding < 0:
                raise ConfigError(f"block {i} has invalid geometry "
                                  f"{(filters, kernel, stride, padding)}")
            extent = (extent + 2 * padding - kernel) // stride + 1
            if extent < 1:
                raise ConfigError(
                    f"block {i} collapses the spatial extent to {extent} "
                    f"for input size {self.input_size}")

    def to_dict(self) -> dict:
        return {"in_channels": self.in_channels,
                "blocks": [list(b) for b in self.blocks],
                "backbone_dim": self.backbone_dim,
                "input_size": self.input_size}

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(in_channels=d["in_channels"],
                   blocks=tuple(tuple(b) for b in d["blocks"]),
                   backbone_dim=d["backbone_dim"],
                   input_size=d["input_size"])


def paper_scale_encoder_config(in_channels: int = 3) -> EncoderConfig:
    """224x224 inputs down to a 512-dimensional pooled feature."""
    return EncoderConfig(
        in_channels=in_channels,
        blocks=((64, 7, 2, 3), (128, 3, 2, 1), (256, 3, 2, 1),
                (512, 3, 2, 1), (512, 3, 2, 1)),
        backbone_dim=512,
        input_size=224)


def _child_seeds(seed_seq: np.random.SeedSequence, n: int) -> list[int]:
    return [int(c.generate_state(1, np.uint64)[0]) for c in seed_seq.spawn(n)]


class ConvEncoder:
    """Stack of conv+bias+ReLU blocks followed by global average pooling."""

    def __init__(self, config: EncoderConfig, seed_seq: np.random.SeedSequence,
                 trainable: bool = True):
        self.config = config
        self.trainable = trainable
        self.weights: list[T.Tensor] = []
        self.biases: list[T.Tensor] = []
        seeds = _child_seeds(seed_seq, len(config.blocks))
        in_ch = config.in_channels
        for (filters, kernel, _, _), s in zip(config.blocks, seeds):
            fan_in = in_ch * kernel * kernel
            self.weights.append(T.kaiming_normal(
                (filters, in_ch, kernel, kernel), fan_in, s, requires_grad=trainable))
            self.biases.append(T.zeros((filters, 1, 1), requires_grad=trainable))
            in_ch = filters

    def forward(self, images: T.Tensor) -> T.Tensor:
        cfg = self.config
        if images.ndim != 4 or images.shape[1] != cfg.in_channels \
                or images.shape[2] != cfg.input_size or images.shape[3] != cfg.input_size:
            raise ConformabilityError(
                f"encode(expects [N,{cfg.in_channels},{cfg.input_size},{cfg.input_size}])",
                images.shape)
        x = images
        for (_, _, stride, padding), w, b in zip(cfg.blocks, self.weights, self.biases):
            x = T.relu(T.add(T.conv2d(x, w, stride=stride, padding=padding), b))
        return T.global_avg_pool(x)

    __call__ = forward

    def params(self) -> dict[str, T.Tensor]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"block{i}.weight"] = w
            out[f"block{i}.bias"] = b
        return out


class ProjectionHead:
    """Two-layer MLP with ReLU after the first layer, then row normalization."""

    def __init__(self, in_dim: int, hidden_dim: int, embed_dim: int,
                 seed_seq: np.random.SeedSequence, trainable: bool = True):
        self.in_dim = in_dim
        self.embed_dim = embed_dim
        self.trainable = trainable
        s1, s2 = _child_seeds(seed_seq, 2)
        self.w1 = T.kaiming_normal((in_dim, hidden_dim), in_dim, s1, requires_grad=trainable)
        self.b1 = T.zeros((hidden_dim,), requires_grad=trainable)
        self.w2 = T.kaiming_normal((hidden_dim, embed_dim), hidden_dim, s2,
                                   requires_grad=trainable)
        self.b2 = T.zeros((embed_dim,), requires_grad=trainable)

    def forward(self, features: T.Tensor) -> T.Tensor:
        if features.ndim != 2 or features.shape[1] != self.in_dim:
            raise ConformabilityError(f"project(expects [N,{self.in_dim}])", features.shape)
        h = T.relu(T.add(T.matmul(features, self.w1), self.b1))
        z = T.add(T.matmul(h, self.w2), self.b2)
        return T.l2_normalize(z)

    __call__ = forward

    def params(self) -> dict[str, T.Tensor]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}


@dataclass
class ModalityBranch:
    """Query/momentum encoders plus the four projection heads of one modality."""

    query_encoder: ConvEncoder
    momentum_encoder: ConvEncoder
    intra_head_q: ProjectionHead
    intra_head_k: ProjectionHead
    inter_head_q: ProjectionHead
    inter_head_k: ProjectionHead

    def params(self) -> dict[str, T.Tensor]:
        out = {}
        parts = [("query", self.query_encoder), ("momentum", self.momentum_encoder),
                 ("intra_q", self.intra_head_q), ("intra_k", self.intra_head_k),
                 ("inter_q", self.inter_head_q), ("inter_k", self.inter_head_k)]
        for prefix, part in parts:
            for name, p in part.params().items():
                out[f"{prefix}.{name}"] = p
        return out

    def trainable_params(self) -> dict[str, T.Tensor]:
        out = {}
        for prefix, part in [("query", self.query_encoder),
                             ("intra_q", self.intra_head_q),
                             ("inter_q", self.inter_head_q)]:
            for name, p in part.params().items():
                out[f"{prefix}.{name}"] = p
        return out

    def momentum_pairs(self) -> list[tuple[T.Tensor, T.Tensor]]:
        """(query, momentum) parameter pairs, index-aligned by name."""
        pairs = []
        for q_part, k_part in [(self.query_encoder, self.momentum_encoder),
                               (self.intra_head_q, self.intra_head_k),
                               (self.inter_head_q, self.inter_head_k)]:
            qp, kp = q_part.params(), k_part.params()
            pairs.extend((qp[name], kp[name]) for name in qp)
        return pairs


@dataclass
class MViTacModel:
    visual: ModalityBranch
    tactile: ModalityBranch
    visual_config: EncoderConfig
    tactile_config: EncoderConfig
    embed_dim: int
    hidden_dim: int

    def params(self) -> dict[str, T.Tensor]:
        out = {}
        for prefix, branch in [("visual", self.visual), ("tactile", self.tactile)]:
            for name, p in branch.params().items():
                out[f"{prefix}.{name}"] = p
        return out

    def trainable_params(self) -> dict[str, T.Tensor]:
        out = {}
        for prefix, branch in [("visual", self.visual), ("tactile", self.tactile)]:
            for name, p in branch.trainable_params().items():
                out[f"{prefix}.{name}"] = p
        return out

    def momentum_pairs(self) -> list[tuple[T.Tensor, T.Tensor]]:
        return self.visual.momentum_pairs() + self.tactile.momentum_pairs()

    def zero_grad(self) -> None:
        for p in self.params().values():
            p.grad = None


def _build_branch(config: EncoderConfig, embed_dim: int, hidden_dim: int,
                  seed_seq: np.random.SeedSequence) -> ModalityBranch:
    enc_ss, iq_ss, ik_ss, eq_ss, ek_ss = seed_seq.spawn(5)
    query = ConvEncoder(config, enc_ss, trainable=True)
    momentum = ConvEncoder(config, enc_ss, trainable=False)
    for pq, pk in zip(query.params().values(), momentum.params().values()):
        pk.data[...] = pq.data  # momentum starts as an exact copy of query
    d = config.backbone_dim
    return ModalityBranch(
        query_encoder=query,
        momentum_encoder=momentum,
        intra_head_q=ProjectionHead(d, hidden_dim, embed_dim, iq_ss, trainable=True),
        intra_head_k=ProjectionHead(d, hidden_dim, embed_dim, ik_ss, trainable=False),
        inter_head_q=ProjectionHead(d, hidden_dim, embed_dim, eq_ss, trainable=True),
        inter_head_k=ProjectionHead(d, hidden_dim, embed_dim, ek_ss, trainable=False),
    )


def init_model(visual_config: EncoderConfig,
               tactile_config: EncoderConfig | None = None,
               embed_dim: int = 128,
               hidden_dim: int | None = None,
               seed: int = 0) -> MViTacModel:
    """Build both branches deterministically from one seed.

    The two branches draw from distinct sub-seeds, so they differ even under
    one top-level seed. Momentum encoders start as exact copies of their
    query counterparts; all eight heads are independently initialized.
    """
    if tactile_config is None:
        tactile_config = visual_config
    if (visual_config.blocks != tactile_config.blocks
            or visual_config.backbone_dim != tactile_config.backbone_dim
            or visual_config.input_size != tactile_config.input_size):
        raise ConfigError("visual and tactile encoder configs may differ only "
                          "in channel count")
    if (visual_config.in_channels != tactile_config.in_channels
            and tactile_config.in_channels != 2 * visual_config.in_channels):
        raise ConfigError(
            f"tactile in_channels {tactile_config.in_channels} must equal the "
            f"visual count or twice it (stacked sensor pair), got visual "
            f"{visual_config.in_channels}")
    if embed_dim < 1:
        raise ConfigError(f"embed_dim must be >= 1, got {embed_dim}")
    if hidden_dim is None:
        hidden_dim = visual_config.backbone_dim

    v_ss, t_ss = np.random.SeedSequence(seed).spawn(2)
    return MViTacModel(
        visual=_build_branch(visual_config, embed_dim, hidden_dim, v_ss),
        tactile=_build_branch(tactile_config, embed_dim, hidden_dim, t_ss),
        visual_config=visual_config,
        tactile_config=tactile_config,
        embed_dim=embed_dim,
        hidden_dim=hidden_dim,
    )


def encode(encoder: ConvEncoder, images: T.Tensor) -> T.Tensor:
    """Backbone features [N, backbone_dim] for an image batch [N,C,H,W]."""
    return encoder.forward(images)


def project(head: ProjectionHead, features: T.Tensor) -> T.Tensor:
    """Unit-norm embeddings [N, embed_dim] for backbone features."""
    return head.forward(features)


def forward_views(model: MViTacModel, views: ViewBatch) -> EmbeddingSet:
    """All eight embeddings for one augmented view batch.

    Query-side paths run on the tape; key-side paths go through the momentum
    encoders and key heads with recording disabled, which is what makes the
    key embeddings gradient-free (the stop-gradient of the objective).
    """
    n = views.o_v_q.shape[0]
    for name, arr in [("o_v_k", views.o_v_k), ("o_t_q", views.o_t_q),
                      ("o_t_k", views.o_t_k)]:
        if arr.shape[0] != n:
            raise ConformabilityError(f"forward_views({name})", views.o_v_q.shape, arr.shape)

    o_v_q = T.Tensor(views.o_v_q)
    o_t_q = T.Tensor(views.o_t_q)
    feat_v = model.visual.query_encoder(o_v_q)
    feat_t = model.tactile.query_encoder(o_t_q)
    z_vv_q = model.visual.intra_head_q(feat_v)
    z_vt_q = model.visual.inter_head_q(feat_v)
    z_tt_q = model.tactile.intra_head_q(feat_t)
    z_tv_q = model.tactile.inter_head_q(feat_t)

    with T.no_grad():
        feat_v_k = model.visual.momentum_encoder(T.Tensor(views.o_v_k))
        feat_t_k = model.tactile.momentum_encoder(T.Tensor(views.o_t_k))
        z_vv_k = model.visual.intra_head_k(feat_v_k)
        z_tv_k = model.visual.inter_head_k(feat_v_k)
        z_tt_k = model.tactile.intra_head_k(feat_t_k)
        z_vt_k = model.tactile.inter_head_k(feat_t_k)

    return EmbeddingSet(z_vv_q=z_vv_q, z_vv_k=z_vv_k, z_tt_q=z_tt_q, z_tt_k=z_tt_k,
                        z_vt_q=z_vt_q, z_vt_k=z_vt_k, z_tv_q=z_tv_q, z_tv_k=z_tv_k)


def momentum_update(model: MViTacModel, m: float) -> None:
    """In-place update p_k <- m*p_k + (1-m)*p_q for every key-side parameter.

    Covers both momentum encoders and all four key heads.
    """
    if not 0.0 <= m <= 1.0:
        raise ConfigError(f"momentum coefficient must be in [0, 1], got {m}")
    for pq, pk in model.momentum_pairs():
        pk.data *= m
        pk.data += (1.0 - m) * pq.data


def parameter_hash(params: dict[str, T.Tensor]) -> str:
    """SHA-256 over parameter names and raw buffers; detects any mutation."""
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name].data).tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# Checkpoint serialization
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    """Header metadata of a serialized model."""

    format_version: int
    config: dict
    step: int
    seeds: dict
    param_index: list[dict] = field(repr=False)
    blob_offset: int = 0


def save_checkpoint(model: MViTacModel, path, step: int = 0,
                    seeds: dict | None = None) -> Checkpoint:
    """Write magic + length-prefixed JSON header + little-endian f32 blobs."""
    params = model.params()
    index = []
    offset = 0
    for name, p in params.items():
        nbytes = p.size * 4
        index.append({"name": name, "shape": list(p.shape), "offset": offset})
        offset += nbytes
    header = {
        "format_version": FORMAT_VERSION,
        "config": {
            "visual": model.visual_config.to_dict(),
            "tactile": model.tactile_config.to_dict(),
            "embed_dim": model.embed_dim,
            "hidden_dim": model.hidden_dim,
        },
        "step": int(step),
        "seeds": seeds or {},
        "params": index,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        for p in params.values():
            fh.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    return Checkpoint(FORMAT_VERSION, header["config"], int(step),
                      header["seeds"], index)


def read_checkpoint_header(path) -> Checkpoint:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if len(magic) < 8 or magic[:6] != MAGIC_PREFIX:
            raise CorruptCheckpointError("bad magic bytes", 0)
        if magic != MAGIC:
            raise UnsupportedVersionError(
                f"checkpoint version {magic[6:].decode(errors='replace')!r} "
                f"is not supported (expected {MAGIC[6:].decode()!r})")
        raw_len = fh.read(8)
        if len(raw_len) < 8:
            raise CorruptCheckpointError("truncated header length", 8)
        (header_len,) = struct.unpack("<Q", raw_len)
        header_bytes = fh.read(header_len)
        if len(header_bytes) < header_len:
            raise CorruptCheckpointError("truncated header", 16 + len(header_bytes))
        try:
            header = json.loads(header_bytes)
        except json.JSONDecodeError as exc:
            raise CorruptCheckpointError(f"unparseable header: {exc}", 16) from None
    if header.get("format_version") != FORMAT_VERSION:
        raise UnsupportedVersionError(
            f"header declares format_version {header.get('format_version')}")
    return Checkpoint(header["format_version"], header["config"], header["step"],
                      header.get("seeds", {}), header["params"],
                      blob_offset=16 + header_len)


def load_checkpoint(path) -> MViTacModel:
    """Rebuild a model with bit-identical parameters from a checkpoint file."""
    ckpt = read_checkpoint_header(path)
    cfg = ckpt.config
    model = init_model(EncoderConfig.from_dict(cfg["visual"]),
                       EncoderConfig.from_dict(cfg["tactile"]),
                       embed_dim=cfg["embed_dim"], hidden_dim=cfg["hidden_dim"],
                       seed=0)
    params = model.params()
    blob_start = ckpt.blob_offset
    with open(path, "rb") as fh:
        data = fh.read()
    index_names = {entry["name"] for entry in ckpt.param_index}
    if index_names != set(params):
        missing = sorted(set(params) - index_names)[:3]
        raise CorruptCheckpointError(
            f"parameter table does not match the declared config "
            f"(e.g. missing {missing})", blob_start)
    for entry in ckpt.param_index:
        p = params[entry["name"]]
        if list(p.shape) != entry["shape"]:
            raise CorruptCheckpointError(
                f"shape mismatch for {entry['name']}: header {entry['shape']} "
                f"vs config {list(p.shape)}", blob_start + entry["offset"])
        start = blob_start + entry["offset"]
        end = start + p.size * 4
        if end > len(data):
            raise CorruptCheckpointError(
                f"blob for {entry['name']} truncated", len(data))
        buf = np.frombuffer(data[start:end], dtype="<f4").reshape(p.shape)
        p.data[...] = buf.astype(p.data.dtype)
    return model
