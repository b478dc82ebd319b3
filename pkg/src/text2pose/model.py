"""The noise-prediction network: a three-level U-Net over stacked keypoint
heatmaps with self/cross attention at the coarse resolutions and an optional
graph-convolution block over skeleton nodes after the middle block.

Channels are kept as K groups of per-keypoint features at every level, so the
graph block can treat the K groups as the nodes of the skeleton graph.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import CorruptFile, InvalidGrouping, NonFiniteInput, ShapeMismatch, UnsupportedFormat
from .skeleton import adjacency, build_default_topology, normalize_adjacency
from .text import Vocabulary

CHECKPOINT_MAGIC = b"T2PC"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class DenoiserConfig:
    keypoint_count: int = 17
    grid_size: int = 64
    base_channels_per_keypoint: int = 4
    channel_multipliers: tuple = (1, 2, 4)
    attention_divisors: tuple = (4, 8)  # attention where resolution == S/d
    text_dim: int = 64
    time_embed_dim: int = 128
    use_graph_block: bool = True  # False gives the plain-U-Net ablation
    vocab_size: int = 0  # 0 = caption vectors supplied externally

    def __post_init__(self):
        if self.grid_size % 8 != 0:
            raise ValueError("grid size must be divisible by 8 (three halvings)")
        if len(self.channel_multipliers) != 3:
            raise ValueError("expected exactly 3 channel multipliers")

    @property
    def widths(self) -> tuple:
        k, c0 = self.keypoint_count, self.base_channels_per_keypoint
        return tuple(k * c0 * m for m in self.channel_multipliers)


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal embedding: half sines, half cosines over geometrically
    spaced frequencies from 1 down to 1e-4."""
    half = dim // 2
    freqs = torch.exp(
        torch.linspace(0.0, math.log(1e-4), half, dtype=torch.float64)
    ).to(t.device)
    args = t.double().reshape(-1, 1) * freqs.reshape(1, -1)
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class ResBlock(nn.Module):
    def __init__(self, in_ch, out_ch, time_dim, groups):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, out_ch)
        self.norm2 = nn.GroupNorm(groups, out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, t_emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time_proj(t_emb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class AttentionBlock(nn.Module):
    """Self-attention over spatial positions followed by cross-attention with
    a single text token, each wrapped in a residual connection. Output
    projections start at zero, so a fresh block is the identity."""

    def __init__(self, channels, text_dim, groups):
        super().__init__()
        self.channels = channels
        self.norm_self = nn.GroupNorm(groups, channels)
        self.qkv = nn.Conv1d(channels, channels * 3, 1)
        self.proj_self = nn.Conv1d(channels, channels, 1)
        self.v_text = nn.Linear(text_dim, channels)
        self.proj_cross = nn.Conv1d(channels, channels, 1)
        nn.init.zeros_(self.proj_self.weight)
        nn.init.zeros_(self.proj_self.bias)
        nn.init.zeros_(self.proj_cross.weight)
        nn.init.zeros_(self.proj_cross.bias)

    def forward(self, x, text):
        b, c, s1, s2 = x.shape
        scale = 1.0 / math.sqrt(c)
        flat = x.reshape(b, c, s1 * s2)

        h = self.norm_self(x).reshape(b, c, s1 * s2)
        q, k, v = self.qkv(h).chunk(3, dim=1)
        attn = torch.softmax(torch.einsum("bci,bcj->bij", q * scale, k), dim=-1)
        h = torch.einsum("bij,bcj->bci", attn, v)
        flat = flat + self.proj_self(h)

        # one-token text context: softmax over a single key is identically 1,
        # so the attended value is the projected text vector at every position
        v = self.v_text(text)
        h = v[:, :, None].expand(-1, -1, s1 * s2)
        flat = flat + self.proj_cross(h.contiguous())
        return flat.reshape(b, c, s1, s2)


class GraphSpatialBlock(nn.Module):
    """Reshape channels into K skeleton-node groups, aggregate node features
    with the normalized adjacency, apply a shared linear map and a rectifier,
    and add the block input back."""

    def __init__(self, keypoint_count, channels, resolution, a_gcn):
        super().__init__()
        if channels % keypoint_count != 0:
            raise InvalidGrouping(
                f"{channels} channels not divisible by K={keypoint_count}"
            )
        self.k = keypoint_count
        self.per_node = channels // keypoint_count
        self.resolution = resolution
        feat = self.per_node * resolution * resolution
        self.transform = nn.Linear(feat, feat, bias=False)
        self.register_buffer("a_gcn", torch.as_tensor(a_gcn, dtype=torch.float32))

    def forward(self, x):
        b, c, s1, s2 = x.shape
        nodes = x.reshape(b, self.k, self.per_node * s1 * s2)
        agg = torch.einsum("vw,bwf->bvf", self.a_gcn.to(x.dtype), nodes)
        h = F.relu(self.transform(agg))
        return x + h.reshape(b, c, s1, s2)


class CaptionEncoder(nn.Module):
    """Trainable token-embedding table; a caption's vector is the mean of its
    tokens' rows (pad positions excluded)."""

    def __init__(self, vocab_size, text_dim):
        super().__init__()
        self.table = nn.Embedding(vocab_size, text_dim)

    def forward(self, token_ids, mask=None):
        emb = self.table(token_ids)  # (b, L, d)
        if mask is None:
            return emb.mean(dim=1)
        mask = mask.to(emb.dtype)
        return (emb * mask[:, :, None]).sum(dim=1) / mask.sum(dim=1, keepdim=True)


class PoseDenoiser(nn.Module):
    """Predicts the injected noise from (x_t, t, caption vector)."""

    def __init__(self, config: DenoiserConfig, a_gcn=None):
        super().__init__()
        self.config = config
        k, s = config.keypoint_count, config.grid_size
        w0, w1, w2 = config.widths
        td = config.time_embed_dim
        attn_res = {s // d for d in config.attention_divisors}

        if a_gcn is None:
            a_gcn = normalize_adjacency(adjacency(build_default_topology()))

        self.time_mlp = nn.Sequential(nn.Linear(td, td), nn.SiLU(), nn.Linear(td, td))
        # global conditioning path: the caption vector is folded into the
        # timestep embedding so every residual block sees it, not only the
        # attention resolutions
        self.text_to_time = nn.Linear(config.text_dim, td)
        self.text_encoder = (
            CaptionEncoder(config.vocab_size, config.text_dim)
            if config.vocab_size > 0
            else None
        )

        def attn(ch, res):
            return AttentionBlock(ch, config.text_dim, k) if res in attn_res else None

        self.stem = nn.Conv2d(k, w0, 3, padding=1)
        self.down_res = nn.ModuleList(
            [
                ResBlock(w0, w0, td, k),
                ResBlock(w0, w1, td, k),
                ResBlock(w1, w2, td, k),
            ]
        )
        self.down_attn = nn.ModuleList(
            [attn(w0, s), attn(w1, s // 2), attn(w2, s // 4)]
        )
        self.down_sample = nn.ModuleList(
            [nn.Conv2d(w, w, 3, stride=2, padding=1) for w in (w0, w1, w2)]
        )

        self.mid_res1 = ResBlock(w2, w2, td, k)
        self.mid_attn = AttentionBlock(w2, config.text_dim, k)
        self.mid_res2 = ResBlock(w2, w2, td, k)
        self.graph_block = (
            GraphSpatialBlock(k, w2, s // 8, a_gcn) if config.use_graph_block else None
        )

        self.up_sample = nn.ModuleList(
            [
                nn.ConvTranspose2d(w2, w2, 4, stride=2, padding=1),
                nn.ConvTranspose2d(w2, w1, 4, stride=2, padding=1),
                nn.ConvTranspose2d(w1, w0, 4, stride=2, padding=1),
            ]
        )
        self.up_res = nn.ModuleList(
            [
                ResBlock(w2 + w2, w2, td, k),
                ResBlock(w1 + w1, w1, td, k),
                ResBlock(w0 + w0, w0, td, k),
            ]
        )
        self.up_attn = nn.ModuleList([attn(w2, s // 4), attn(w1, s // 2), attn(w0, s)])

        self.out_norm = nn.GroupNorm(k, w0)
        self.out_conv = nn.Conv2d(w0, k, 3, padding=1)
        # time-gated linear bypass from the input to the output: the noise
        # target contains a t-dependent multiple of x_t itself, which the
        # normalized conv stack cannot carry at small widths. Starts at zero,
        # so a fresh model matches the plain U-Net output.
        self.in_gate = nn.Linear(td, k)
        nn.init.zeros_(self.in_gate.weight)
        nn.init.zeros_(self.in_gate.bias)

    def encode_text(self, token_ids, mask=None):
        if self.text_encoder is None:
            raise ShapeMismatch("model configured for precomputed caption vectors")
        return self.text_encoder(token_ids, mask)

    def forward(self, x, t, text):
        cfg = self.config
        if x.ndim != 4 or x.shape[1:] != (cfg.keypoint_count, cfg.grid_size, cfg.grid_size):
            raise ShapeMismatch(
                f"expected (B, {cfg.keypoint_count}, {cfg.grid_size}, {cfg.grid_size}),"
                f" got {tuple(x.shape)}"
            )
        if not torch.isfinite(x).all():
            raise NonFiniteInput("non-finite latent input")
        if not torch.is_tensor(t):
            t = torch.full((x.shape[0],), int(t), device=x.device)
        if text.ndim == 1:
            text = text[None, :].expand(x.shape[0], -1)
        text = text.to(x.dtype)

        t_emb = timestep_embedding(t, cfg.time_embed_dim).to(x.dtype)
        t_emb = self.time_mlp(t_emb) + self.text_to_time(text)

        h = self.stem(x)
        skips = []
        for res, attn, down in zip(self.down_res, self.down_attn, self.down_sample):
            h = res(h, t_emb)
            if attn is not None:
                h = attn(h, text)
            skips.append(h)
            h = down(h)

        h = self.mid_res1(h, t_emb)
        h = self.mid_attn(h, text)
        h = self.mid_res2(h, t_emb)
        if self.graph_block is not None:
            h = self.graph_block(h)

        for up, res, attn, skip in zip(
            self.up_sample, self.up_res, self.up_attn, reversed(skips)
        ):
            h = up(h)
            h = res(torch.cat([h, skip], dim=1), t_emb)
            if attn is not None:
                h = attn(h, text)

        out = self.out_conv(F.silu(self.out_norm(h)))
        return out + x * self.in_gate(t_emb)[:, :, None, None]


def save_checkpoint(
    model: PoseDenoiser, path, vocab: Vocabulary | None = None, extra: dict | None = None
) -> None:
    """Versioned container: JSON header (config, vocab, array index) plus
    float32 little-endian weight payload and a sha256 integrity digest."""
    arrays = []
    payload = bytearray()
    for name, tensor in model.state_dict().items():
        arr = tensor.detach().cpu().numpy().astype("<f4")
        arrays.append({"name": name, "shape": list(arr.shape), "offset": len(payload)})
        payload += arr.tobytes()
    header = {
        "config": asdict(model.config),
        "vocab": vocab.to_json_dict() if vocab is not None else None,
        "extra": extra or {},
        "arrays": arrays,
    }
    header_bytes = json.dumps(header).encode()
    digest = hashlib.sha256(bytes(payload)).digest()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(header_bytes)))
        fh.write(header_bytes)
        fh.write(payload)
        fh.write(digest)


def load_checkpoint(path):
    """Returns (model, vocab, extra). Every array shape is validated against a
    model freshly built from the stored config; the payload digest must match."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise UnsupportedFormat(f"bad magic bytes {blob[:4]!r}")
    version, header_len = struct.unpack_from("<II", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise UnsupportedFormat(f"unsupported checkpoint version {version}")
    header = json.loads(blob[12 : 12 + header_len])
    payload = blob[12 + header_len : -32]
    if hashlib.sha256(payload).digest() != blob[-32:]:
        raise CorruptFile("checkpoint payload digest mismatch")

    cfg_dict = dict(header["config"])
    cfg_dict["channel_multipliers"] = tuple(cfg_dict["channel_multipliers"])
    cfg_dict["attention_divisors"] = tuple(cfg_dict["attention_divisors"])
    config = DenoiserConfig(**cfg_dict)
    model = PoseDenoiser(config)
    state = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        chunk = payload[start : start + count * 4]
        if len(chunk) != count * 4:
            raise CorruptFile(f"array {entry['name']} truncated")
        state[entry["name"]] = torch.from_numpy(
            np.frombuffer(chunk, dtype="<f4").reshape(shape).copy()
        )
    expected = model.state_dict()
    if set(state) != set(expected):
        raise CorruptFile("checkpoint arrays do not match the stored config")
    for name, tensor in state.items():
        if tensor.shape != expected[name].shape:
            raise CorruptFile(
                f"array {name} has shape {tuple(tensor.shape)},"
                f" expected {tuple(expected[name].shape)}"
            )
    model.load_state_dict(state)
    vocab = Vocabulary.from_json_dict(header["vocab"]) if header["vocab"] else None
    return model, vocab, header.get("extra", {})
