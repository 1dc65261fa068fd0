"""The TempEE network: parallel temporal/spatial encoders and a one-pass decoder.

Feature volumes are channel-first. A temporal volume is ``(B, C, T, h, w)``;
rectification folds time into channels, giving ``(B, C*T, h, w)`` with
channel index ``c*T + t``.
"""

from __future__ import annotations

import dataclasses
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attention import (
    AttentionConfig,
    init_mhsa,
    init_msta,
    MHSAWeights,
    MSTAWeights,
    mhsa_forward,
    msta_forward,
    multihead_attention,
)
from .config import build_dataclass, dataclass_section, dump_config, parse_config
from .errors import ConfigError, ContractError, FormatError, ShapeError
from .tensor import Tensor, concat, conv, layer_norm, matmul, permute, relu, reshape

SPACES = ("temporal", "spatial", "rectified")
TEMPORAL_MODES = ("per_position", "joint")


@dataclass
class ModelConfig:
    n_in: int = 20
    k_out: int = 20
    image_edge: int = 192
    patch: int = 12
    d_model: int = 64
    te_blocks: int = 2
    se_blocks: int = 2
    tsd_blocks: int = 2
    kernel: int = 3
    temporal_mode: str = "per_position"
    ln_eps: float = 1e-5
    attention: AttentionConfig = field(default_factory=AttentionConfig)

    def __post_init__(self):
        for name in ("n_in", "k_out", "image_edge", "patch", "d_model", "kernel"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.image_edge % self.patch:
            raise ConfigError(f"image_edge {self.image_edge} is not divisible by patch {self.patch}")
        if self.kernel % 2 == 0:
            raise ConfigError(f"kernel must be odd to preserve extents, got {self.kernel}")
        if self.temporal_mode not in TEMPORAL_MODES:
            raise ConfigError(f"temporal_mode must be one of {TEMPORAL_MODES}, got {self.temporal_mode!r}")
        att = self.attention
        grid = self.grid
        for name, div in (("g", att.g), ("g_prime", att.g_prime)):
            if grid % div:
                raise ConfigError(f"token grid edge {grid} is not divisible by attention {name}={div}")
        for name, width in (("d_model", self.d_model), ("d_model*n_in", self.se_width), ("d_model*k_out", self.tsd_width)):
            if width % att.heads:
                raise ConfigError(f"{name}={width} is not divisible by {att.heads} heads")

    @property
    def grid(self) -> int:
        return self.image_edge // self.patch

    @property
    def se_width(self) -> int:
        return self.d_model * self.n_in

    @property
    def tsd_width(self) -> int:
        return self.d_model * self.k_out

    def to_text(self) -> str:
        return dump_config({"model": dataclass_section(self), "attention": dataclass_section(self.attention)})

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        sections = parse_config(text)
        unknown = set(sections) - {"model", "attention"}
        if unknown:
            raise ConfigError(f"unexpected sections in model config: {sorted(unknown)}")
        att = build_dataclass(AttentionConfig, sections.get("attention"))
        return build_dataclass(cls, sections.get("model"), attention=att)


@dataclass
class FeatureVolume:
    values: Tensor
    space: str

    def __post_init__(self):
        if self.space not in SPACES:
            raise ContractError(f"unknown feature space {self.space!r}")
        want = 5 if self.space == "temporal" else 4
        if self.values.ndim != want:
            raise ShapeError(f"{self.space} volume must be {want}-d (batched), got {self.values.shape}")


def rectify(vol: FeatureVolume, space: str = "rectified") -> FeatureVolume:
    """Fold time into channels: ``(B, C, T, h, w) -> (B, C*T, h, w)``."""
    if vol.space != "temporal":
        raise ContractError(f"rectify needs a temporal volume, got {vol.space}")
    b, c, t, h, w = vol.values.shape
    return FeatureVolume(reshape(vol.values, (b, c * t, h, w)), space)


def unrectify(vol: FeatureVolume, t: int) -> FeatureVolume:
    b, ct, h, w = vol.values.shape
    if ct % t:
        raise ShapeError(f"{ct} channels cannot unfold into {t} time steps")
    return FeatureVolume(reshape(vol.values, (b, ct // t, t, h, w)), "temporal")


def _channel_linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Apply a ``(C_in, C_out)`` map along axis 1 of a channel-first tensor."""
    nd = x.ndim
    moved = permute(x, (0,) + tuple(range(2, nd)) + (1,))
    y = matmul(moved, w)
    if b is not None:
        y = y + b
    return permute(y, (0, nd - 1) + tuple(range(1, nd - 1)))


def _patchify(frames: Tensor, p: int) -> Tensor:
    """(B, T, H, W) -> (B, T, H/p, W/p, p*p)."""
    b, t, hh, ww = frames.shape
    x = reshape(frames, (b, t, hh // p, p, ww // p, p))
    x = permute(x, (0, 1, 2, 4, 3, 5))
    return reshape(x, (b, t, hh // p, ww // p, p * p))


def _unpatchify(x: Tensor, p: int) -> Tensor:
    """(B, T, gh, gw, p*p) -> (B, T, gh*p, gw*p)."""
    b, t, gh, gw, _ = x.shape
    x = reshape(x, (b, t, gh, gw, p, p))
    x = permute(x, (0, 1, 2, 4, 3, 5))
    return reshape(x, (b, t, gh * p, gw * p))


class TempEE:
    """Parameter store plus the forward pipeline.

    ``params`` maps dotted names to tensors; every block function reads its
    weights from there so checkpoints and optimizers see one flat namespace.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0, zero_init_residual: bool = False):
        self.cfg = cfg
        self.forward_calls = 0
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(seed)
        self._build(rng, zero_init_residual)

    # ------------------------------------------------------------ construction

    def _new(self, name: str, arr) -> None:
        self.params[name] = Tensor(arr, requires_grad=True)

    def _normal(self, name: str, shape, std: float, rng) -> None:
        self._new(name, rng.normal(0.0, std, size=shape))

    def _ln(self, prefix: str, width: int) -> None:
        self._new(prefix + ".g", np.ones(width))
        self._new(prefix + ".b", np.zeros(width))

    def _attn(self, prefix: str, weights) -> None:
        for k, t in weights.tensors().items():
            self.params[f"{prefix}.{k}"] = t

    def _conv(self, prefix: str, width: int, dims: int, rng, zero: bool) -> None:
        k = self.cfg.kernel
        shape = (width, width) + (k,) * dims
        if zero:
            self._new(prefix + ".w", np.zeros(shape))
        else:
            self._normal(prefix + ".w", shape, 1.0 / math.sqrt(width * k**dims), rng)
        self._new(prefix + ".b", np.zeros(width))

    def _build(self, rng, zero: bool) -> None:
        cfg = self.cfg
        d, p2, g = cfg.d_model, cfg.patch**2, cfg.grid
        self._normal("embed.w", (p2, d), 1.0 / math.sqrt(p2), rng)
        self._normal("embed.pos_t", (d, cfg.n_in), 0.02, rng)
        self._normal("embed.pos_s", (d, g, g), 0.02, rng)
        self._normal("prompt.w", (p2, d), 1.0 / math.sqrt(p2), rng)
        self._normal("prompt.pos_t", (d, cfg.k_out), 0.02, rng)
        for i in range(cfg.te_blocks):
            pre = f"te.{i}"
            self._ln(pre + ".ln1", d)
            self._attn(pre + ".attn", init_mhsa(d, rng, zero_output=zero))
            self._ln(pre + ".ln2", d)
            self._conv(pre + ".ffn", d, 3, rng, zero)
        cs = cfg.se_width
        for i in range(cfg.se_blocks):
            pre = f"se.{i}"
            self._ln(pre + ".ln1", cs)
            self._attn(pre + ".attn", init_mhsa(cs, rng, zero_output=zero))
            self._ln(pre + ".ln2", cs)
            self._conv(pre + ".ffn", cs, 2, rng, zero)
        ct = cfg.tsd_width
        self._normal("fuse.w", (2 * cs, ct), 1.0 / math.sqrt(2 * cs), rng)
        self._new("fuse.b", np.zeros(ct))
        self._normal("tsd.in.w", (2 * ct, ct), 1.0 / math.sqrt(2 * ct), rng)
        self._new("tsd.in.b", np.zeros(ct))
        for i in range(cfg.tsd_blocks):
            pre = f"tsd.{i}"
            self._ln(pre + ".ln1", ct)
            self._attn(pre + ".attn", init_msta(ct, rng, zero_output=zero))
            self._ln(pre + ".ln2", ct)
            self._conv(pre + ".ffn", ct, 2, rng, zero)
        self._normal("head.w", (ct, cfg.k_out * p2), 1e-3 / math.sqrt(ct), rng)
        self._new("head.b", np.zeros(cfg.k_out * p2))

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def n_parameters(self) -> int:
        return sum(t.size for t in self.params.values())

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        if set(arrays) != set(self.params):
            missing = sorted(set(self.params) - set(arrays))
            extra = sorted(set(arrays) - set(self.params))
            raise ContractError(f"parameter set mismatch: missing {missing}, unexpected {extra}")
        for k, arr in arrays.items():
            if arr.shape != self.params[k].shape:
                raise ShapeError(f"parameter {k}: shape {arr.shape} != {self.params[k].shape}")
            self.params[k] = Tensor(arr, requires_grad=True)

    def _mhsa(self, prefix: str) -> MHSAWeights:
        p = self.params
        return MHSAWeights(p[prefix + ".wq"], p[prefix + ".wk"], p[prefix + ".wv"], p[prefix + ".wp"])

    def _msta(self, prefix: str) -> MSTAWeights:
        p = self.params
        return MSTAWeights(*(p[f"{prefix}.{k}"] for k in ("q1", "k1", "v1", "q2", "k2", "v2", "m", "n")))

    def _ln_apply(self, prefix: str, x: Tensor) -> Tensor:
        return layer_norm(x, self.params[prefix + ".g"], self.params[prefix + ".b"], self.cfg.ln_eps, axis=1)

    # ------------------------------------------------------------ stages

    def _frames(self, frames, count: int, what: str) -> Tensor:
        x = frames if isinstance(frames, Tensor) else Tensor(frames)
        if x.ndim == 3:
            x = reshape(x, (1,) + x.shape)
        if x.ndim != 4:
            raise ShapeError(f"{what} must be (B, T, H, W) or (T, H, W), got {x.shape}")
        if x.shape[1] != count:
            raise ContractError(f"{what} must hold exactly {count} frames, got {x.shape[1]}")
        edge = self.cfg.image_edge
        if x.shape[2:] != (edge, edge):
            raise ShapeError(f"{what} frames must be {edge}x{edge}, got {x.shape[2:]}")
        return x

    def patch_embed(self, frames, weight: str = "embed.w") -> FeatureVolume:
        """Project each ``p x p`` pixel patch (scaled to [0, 1]) to ``d_model`` channels."""
        x = frames if isinstance(frames, Tensor) else Tensor(frames)
        if x.ndim == 3:
            x = reshape(x, (1,) + x.shape)
        p = self.cfg.patch
        h, w = x.shape[-2:]
        if h % p or w % p:
            raise ShapeError(f"frame extent {h}x{w} is not divisible by patch {p}")
        tokens = matmul(_patchify(x * (1.0 / 255.0), p), self.params[weight])
        return FeatureVolume(permute(tokens, (0, 4, 1, 2, 3)), "temporal")

    def te_forward(self, vol: FeatureVolume) -> FeatureVolume:
        if vol.space != "temporal":
            raise ContractError(f"te_forward needs a temporal volume with a time axis, got {vol.space}")
        x = vol.values
        att = self.cfg.attention
        b, d, t, h, w = x.shape
        k = self.cfg.kernel
        for i in range(self.cfg.te_blocks):
            pre = f"te.{i}"
            y = self._ln_apply(pre + ".ln1", x)
            wts = self._mhsa(pre + ".attn")
            if self.cfg.temporal_mode == "per_position":
                tokens = reshape(permute(y, (0, 3, 4, 2, 1)), (b * h * w, t, d))
            else:
                tokens = reshape(permute(y, (0, 2, 3, 4, 1)), (b, t * h * w, d))
            a = matmul(multihead_attention(tokens, wts.wq, wts.wk, wts.wv, att.heads, att), wts.wp)
            if self.cfg.temporal_mode == "per_position":
                a = permute(reshape(a, (b, h, w, t, d)), (0, 4, 3, 1, 2))
            else:
                a = permute(reshape(a, (b, t, h, w, d)), (0, 4, 1, 2, 3))
            x = x + a if att.residual else a
            y = relu(self._ln_apply(pre + ".ln2", x))
            x = x + conv(y, self.params[pre + ".ffn.w"], 3, 1, k // 2, self.params[pre + ".ffn.b"])
        return FeatureVolume(x, "temporal")

    def se_forward(self, vol: FeatureVolume) -> FeatureVolume:
        if vol.space not in ("spatial", "rectified"):
            raise ContractError(f"se_forward needs a time-collapsed volume, got {vol.space}")
        x = vol.values
        if x.shape[1] != self.cfg.se_width:
            raise ShapeError(f"se_forward expects {self.cfg.se_width} channels, got {x.shape[1]}")
        k = self.cfg.kernel
        for i in range(self.cfg.se_blocks):
            pre = f"se.{i}"
            y = self._ln_apply(pre + ".ln1", x)
            x = mhsa_forward(y, self._mhsa(pre + ".attn"), self.cfg.attention, skip=x)
            y = relu(self._ln_apply(pre + ".ln2", x))
            x = x + conv(y, self.params[pre + ".ffn.w"], 2, 1, k // 2, self.params[pre + ".ffn.b"])
        return FeatureVolume(x, vol.space)

    def embed_prompts(self, prompts) -> FeatureVolume:
        vol = self.patch_embed(prompts, "prompt.w")
        v = vol.values + reshape(self.params["prompt.pos_t"], (1, self.cfg.d_model, self.cfg.k_out, 1, 1))
        return rectify(FeatureVolume(v, "temporal"))

    def tsd_forward(self, enc: FeatureVolume, prompts: FeatureVolume) -> FeatureVolume:
        if enc.space != "rectified" or prompts.space != "rectified":
            raise ContractError("tsd_forward needs rectified encoder and prompt volumes")
        w_in = self.params["tsd.in.w"]
        joined = concat([enc.values, prompts.values], axis=1)
        if joined.shape[1] != w_in.shape[0]:
            raise ConfigError(
                f"decoder input projection expects {w_in.shape[0]} channels, "
                f"got {enc.values.shape[1]} (encoder) + {prompts.values.shape[1]} (prompts)"
            )
        x = _channel_linear(joined, w_in, self.params["tsd.in.b"])
        k = self.cfg.kernel
        for i in range(self.cfg.tsd_blocks):
            pre = f"tsd.{i}"
            y = self._ln_apply(pre + ".ln1", x)
            x = msta_forward(y, self._msta(pre + ".attn"), self.cfg.attention, skip=x)
            y = relu(self._ln_apply(pre + ".ln2", x))
            x = x + conv(y, self.params[pre + ".ffn.w"], 2, 1, k // 2, self.params[pre + ".ffn.b"])
        return FeatureVolume(x, "rectified")

    def encode(self, obs) -> dict[str, FeatureVolume]:
        """Run both encoders; returns the branch outputs and their fused projection."""
        cfg = self.cfg
        obs = self._frames(obs, cfg.n_in, "observation")
        emb = self.patch_embed(obs)
        pos = reshape(self.params["embed.pos_t"], (1, cfg.d_model, cfg.n_in, 1, 1)) + reshape(
            self.params["embed.pos_s"], (1, cfg.d_model, 1, cfg.grid, cfg.grid)
        )
        emb = FeatureVolume(emb.values + pos, "temporal")
        te = rectify(self.te_forward(emb))
        se = self.se_forward(rectify(emb, "spatial"))
        joined = FeatureVolume(concat([te.values, se.values], axis=1), "rectified")
        fused = FeatureVolume(_channel_linear(joined.values, self.params["fuse.w"], self.params["fuse.b"]), "rectified")
        return {"te": te, "se": se, "concat": joined, "fused": fused}

    def head(self, vol: FeatureVolume) -> Tensor:
        """Per-token linear map to ``k * p^2`` pixels, unfolded to ``(B, k, H, W)``."""
        cfg = self.cfg
        x = vol.values
        b, _, gh, gw = x.shape
        tokens = permute(x, (0, 2, 3, 1))
        y = matmul(tokens, self.params["head.w"]) + self.params["head.b"]
        y = reshape(y, (b, gh, gw, cfg.k_out, cfg.patch**2))
        y = permute(y, (0, 3, 1, 2, 4))
        return _unpatchify(y, cfg.patch) * 255.0

    def forward(self, obs, prompts=None) -> Tensor:
        """One network pass from ``n_in`` observed frames to all ``k_out`` future frames.

        Inputs and outputs are in pixel space. ``prompts`` defaults to the
        all-hidden (zero) stack used at test time. Output is not clamped.
        """
        cfg = self.cfg
        self.forward_calls += 1
        obs = self._frames(obs, cfg.n_in, "observation")
        if prompts is None:
            prompts = np.zeros((obs.shape[0], cfg.k_out) + obs.shape[2:], dtype=obs.dtype)
        prompts = self._frames(prompts, cfg.k_out, "prompt stack")
        if prompts.shape[0] != obs.shape[0]:
            raise ContractError(f"batch mismatch: {obs.shape[0]} observations, {prompts.shape[0]} prompt stacks")
        enc = self.encode(obs)["fused"]
        dec = self.tsd_forward(enc, self.embed_prompts(prompts))
        return self.head(dec)


def extrapolate(model: TempEE, obs, prompts=None) -> np.ndarray:
    """Predict ``k_out`` frames in one pass, clamped to the pixel range [0, 255].

    ``obs`` is ``(n_in, H, W)`` or batched ``(B, n_in, H, W)`` in pixel space.
    """
    arr = obs.data if isinstance(obs, Tensor) else np.asarray(obs)
    if arr.ndim not in (3, 4):
        raise ShapeError(f"observations must be (n, H, W) or (B, n, H, W), got {arr.shape}")
    n = arr.shape[-3]
    if n != model.cfg.n_in:
        raise ContractError(f"expected exactly {model.cfg.n_in} observed frames, got {n}")
    if arr.size and (arr.min() < 0 or arr.max() > 255):
        raise ContractError("observations must be in pixel space [0, 255]")
    out = np.clip(model.forward(arr, prompts).data, 0.0, 255.0)
    return out[0] if arr.ndim == 3 else out


# ---------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"TMPE"
CKPT_VERSION = 1


def save_checkpoint(path: str | Path, model: TempEE) -> None:
    """Write magic, version, config text and length-prefixed little-endian f32 blobs."""
    cfg_bytes = model.cfg.to_text().encode("utf-8")
    parts = [CKPT_MAGIC, struct.pack("<H", CKPT_VERSION), struct.pack("<I", len(cfg_bytes)), cfg_bytes]
    parts.append(struct.pack("<I", len(model.params)))
    for name, t in model.params.items():
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)) + nb)
        parts.append(struct.pack("<B", t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape))
        parts.append(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated checkpoint while reading {what}", self.pos)
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_checkpoint(path: str | Path) -> TempEE:
    buf = Path(path).read_bytes()
    r = _Reader(buf)
    magic = r.take(4, "magic")
    if magic != CKPT_MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}, expected {CKPT_MAGIC!r}", 0)
    (version,) = r.unpack("<H", "version")
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    (cfg_len,) = r.unpack("<I", "config length")
    cfg_at = r.pos
    try:
        cfg = ModelConfig.from_text(r.take(cfg_len, "config block").decode("utf-8"))
    except (UnicodeDecodeError, ConfigError) as exc:
        raise FormatError(f"unreadable config block: {exc}", cfg_at) from exc
    model = TempEE(cfg)
    (count,) = r.unpack("<I", "parameter count")
    arrays = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H", "name length")
        name_at = r.pos
        try:
            name = r.take(nlen, "name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError("parameter name is not utf-8", name_at) from exc
        (ndim,) = r.unpack("<B", f"rank of {name}")
        shape = r.unpack(f"<{ndim}I", f"shape of {name}")
        nbytes = 4 * int(np.prod(shape))
        arrays[name] = np.frombuffer(r.take(nbytes, f"data of {name}"), dtype="<f4").reshape(shape).astype(np.float32)
    if r.pos != len(buf):
        raise FormatError("trailing bytes after last parameter", r.pos)
    try:
        model.load_arrays(arrays)
    except (ContractError, ShapeError) as exc:
        raise FormatError(f"checkpoint does not match its config: {exc}", r.pos) from exc
    return model


