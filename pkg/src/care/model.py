"""Two-branch encoder model: recurrent sequence encoder, residual conv
image encoder, per-view projection heads, and an MLP classifier.

The encoders are small configurable stand-ins with the same interfaces
as full-scale backbones; both are size-agnostic in the spatial/temporal
extent thanks to masking and global average pooling.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DataError, ShapeError

CHECKPOINT_MAGIC = b"CAREM1"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    input_dim: int                      # D of the sequence rows
    n_classes: int
    seq_encoder: str = "lstm"           # lstm | bilstm
    hidden_size: int = 64
    img_widths: tuple[int, ...] = (8, 16, 32)
    img_blocks: int = 2
    embed_dim: int = 64                 # d_r, shared encoder output width
    proj_dim: int = 64                  # d_z, projection head output width
    clf_hidden: int = 128
    img_downsample: int = 2             # parameterless input mean-pool factor
    view: str = "both"                  # both | seq | img
    seed: int = 0

    def __post_init__(self):
        if self.seq_encoder not in ("lstm", "bilstm"):
            raise ConfigError(f"unknown seq_encoder {self.seq_encoder!r}")
        if self.view not in ("both", "seq", "img"):
            raise ConfigError(f"unknown view {self.view!r}")
        for name in ("input_dim", "n_classes", "hidden_size", "embed_dim",
                     "proj_dim", "clf_hidden", "img_blocks"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")

    def hash_bytes(self) -> bytes:
        payload = json.dumps(asdict(self), sort_keys=True, default=list).encode()
        return hashlib.sha256(payload).digest()[:8]


class CareModel:
    """Holds the parameter map and the forward passes of all heads."""

    def __init__(self, config: ModelConfig):
        self.config = config
        self.params: dict[str, Tensor] = {}
        self._rng = np.random.default_rng(config.seed)
        if config.view in ("both", "seq"):
            self._init_seq_encoder()
        if config.view in ("both", "img"):
            self._init_img_encoder()
        self._init_heads()

    # -- initialization -----------------------------------------------------

    def _param(self, name: str, shape: tuple[int, ...], fan_in: int) -> Tensor:
        k = 1.0 / np.sqrt(fan_in)
        data = self._rng.uniform(-k, k, size=shape).astype(np.float32)
        tensor = Tensor(data, requires_grad=True)
        if name in self.params:
            raise ConfigError(f"duplicate parameter name {name}")
        self.params[name] = tensor
        return tensor

    def _init_lstm_direction(self, tag: str):
        cfg = self.config
        d, h = cfg.input_dim, cfg.hidden_size
        self._param(f"seq.{tag}.w_x", (d, 4 * h), d)
        self._param(f"seq.{tag}.w_h", (h, 4 * h), h)
        bias = self._param(f"seq.{tag}.bias", (4 * h,), h)
        bias.data[h : 2 * h] = 1.0  # forget-gate bias

    def _init_seq_encoder(self):
        cfg = self.config
        self._init_lstm_direction("fwd")
        out_width = cfg.hidden_size
        if cfg.seq_encoder == "bilstm":
            self._init_lstm_direction("bwd")
            out_width *= 2
        self._param("seq.out.weight", (out_width, cfg.embed_dim), out_width)
        self._param("seq.out.bias", (cfg.embed_dim,), out_width)

    def _conv_param(self, name: str, f: int, c: int, k: int):
        self._param(f"{name}.weight", (f, c, k, k), c * k * k)
        self._param(f"{name}.bias", (f,), c * k * k)

    def _init_img_encoder(self):
        cfg = self.config
        widths = tuple(cfg.img_widths)
        self._conv_param("img.stem", widths[0], 3, 3)
        c_in = widths[0]
        for si, width in enumerate(widths):
            for bi in range(cfg.img_blocks):
                base = f"img.stage{si}.block{bi}"
                self._conv_param(f"{base}.conv1", width, c_in, 3)
                self._conv_param(f"{base}.conv2", width, width, 3)
                if bi == 0:
                    self._conv_param(f"{base}.skip", width, c_in, 1)
                c_in = width
        self._param("img.out.weight", (widths[-1], cfg.embed_dim), widths[-1])
        self._param("img.out.bias", (cfg.embed_dim,), widths[-1])

    def _init_heads(self):
        cfg = self.config
        if cfg.view in ("both", "seq"):
            self._param("proj.seq.weight", (cfg.embed_dim, cfg.proj_dim), cfg.embed_dim)
            self._param("proj.seq.bias", (cfg.proj_dim,), cfg.embed_dim)
        if cfg.view in ("both", "img"):
            self._param("proj.img.weight", (cfg.embed_dim, cfg.proj_dim), cfg.embed_dim)
            self._param("proj.img.bias", (cfg.proj_dim,), cfg.embed_dim)
        clf_in = cfg.embed_dim * (2 if cfg.view == "both" else 1)
        self._param("clf.hidden.weight", (clf_in, cfg.clf_hidden), clf_in)
        self._param("clf.hidden.bias", (cfg.clf_hidden,), clf_in)
        self._param("clf.out.weight", (cfg.clf_hidden, cfg.n_classes), cfg.clf_hidden)
        self._param("clf.out.bias", (cfg.n_classes,), cfg.clf_hidden)

    # -- forward passes -----------------------------------------------------

    def _lstm_pass(self, seq: np.ndarray, mask: np.ndarray, tag: str, reverse: bool) -> Tensor:
        cfg = self.config
        batch, length, _ = seq.shape
        h_width = cfg.hidden_size
        w_x = self.params[f"seq.{tag}.w_x"]
        w_h = self.params[f"seq.{tag}.w_h"]
        bias = self.params[f"seq.{tag}.bias"]
        h = Tensor(np.zeros((batch, h_width), dtype=seq.dtype))
        c = Tensor(np.zeros((batch, h_width), dtype=seq.dtype))
        steps = range(length - 1, -1, -1) if reverse else range(length)
        for t in steps:
            x_t = Tensor(seq[:, t, :])
            gates = ad.add(ad.add(ad.matmul(x_t, w_x), ad.matmul(h, w_h)), bias)
            i_gate = ad.sigmoid(ad.narrow(gates, 1, 0, h_width))
            f_gate = ad.sigmoid(ad.narrow(gates, 1, h_width, 2 * h_width))
            g_gate = ad.tanh(ad.narrow(gates, 1, 2 * h_width, 3 * h_width))
            o_gate = ad.sigmoid(ad.narrow(gates, 1, 3 * h_width, 4 * h_width))
            c_new = ad.add(ad.mul(f_gate, c), ad.mul(i_gate, g_gate))
            h_new = ad.mul(o_gate, ad.tanh(c_new))
            m = np.repeat(mask[:, t : t + 1], h_width, axis=1).astype(seq.dtype)
            m_on, m_off = Tensor(m), Tensor(1.0 - m)
            c = ad.add(ad.mul(c_new, m_on), ad.mul(c, m_off))
            h = ad.add(ad.mul(h_new, m_on), ad.mul(h, m_off))
        return h

    def seq_encode(self, seq: np.ndarray, mask: np.ndarray) -> Tensor:
        """(B, L, D) sequences + (B, L) masks -> (B, embed_dim) features.

        Masked positions never update the recurrent state.
        """
        cfg = self.config
        if seq.ndim != 3 or seq.shape[2] != cfg.input_dim:
            raise ShapeError(f"seq_encode: expected (B,L,{cfg.input_dim}), got {seq.shape}")
        if mask.shape != seq.shape[:2]:
            raise ShapeError(f"seq_encode: mask shape {mask.shape} != {seq.shape[:2]}")
        h = self._lstm_pass(seq, mask, "fwd", reverse=False)
        if cfg.seq_encoder == "bilstm":
            h_rev = self._lstm_pass(seq, mask, "bwd", reverse=True)
            h = ad.concat([h, h_rev], axis=1)
        return ad.add(ad.matmul(h, self.params["seq.out.weight"]), self.params["seq.out.bias"])

    def _res_block(self, x: Tensor, base: str, stride: int) -> Tensor:
        out = ad.relu(ad.conv2d(x, self.params[f"{base}.conv1.weight"],
                                self.params[f"{base}.conv1.bias"], stride=stride, pad=1))
        out = ad.conv2d(out, self.params[f"{base}.conv2.weight"],
                        self.params[f"{base}.conv2.bias"], stride=1, pad=1)
        if f"{base}.skip.weight" in self.params:
            skip = ad.conv2d(x, self.params[f"{base}.skip.weight"],
                             self.params[f"{base}.skip.bias"], stride=stride, pad=0)
        else:
            skip = x
        return ad.relu(ad.add(out, skip))

    def img_encode(self, images: np.ndarray) -> Tensor:
        """(B, 3, H, W) composite images -> (B, embed_dim) features."""
        if images.ndim != 4 or images.shape[1] != 3:
            raise ShapeError(f"img_encode: expected (B,3,H,W), got {images.shape}")
        cfg = self.config
        x = Tensor(images)
        if cfg.img_downsample > 1:
            x = ad.avgpool2d(x, cfg.img_downsample)
        x = ad.relu(ad.conv2d(x, self.params["img.stem.weight"],
                              self.params["img.stem.bias"], stride=2, pad=1))
        x = ad.maxpool2d(x, 2)
        for si in range(len(cfg.img_widths)):
            for bi in range(cfg.img_blocks):
                x = self._res_block(x, f"img.stage{si}.block{bi}", stride=2 if bi == 0 else 1)
        pooled = ad.global_avg_pool(x)
        return ad.add(ad.matmul(pooled, self.params["img.out.weight"]), self.params["img.out.bias"])

    def project(self, features: Tensor, view: str) -> Tensor:
        """Affine map to the shared latent space, then row normalization."""
        if view not in ("seq", "img"):
            raise ConfigError(f"unknown projection view {view!r}")
        out = ad.add(ad.matmul(features, self.params[f"proj.{view}.weight"]),
                     self.params[f"proj.{view}.bias"])
        return ad.l2_normalize(out)

    def classify(self, r_seq: Tensor | None, r_img: Tensor | None) -> Tensor:
        """Concatenated features -> class logits (B, C)."""
        parts = [r for r in (r_seq, r_img) if r is not None]
        if not parts:
            raise DataError("classify: no features given")
        if len(parts) == 2 and parts[0].shape[0] != parts[1].shape[0]:
            raise ShapeError("classify: batch size mismatch between views")
        joined = parts[0] if len(parts) == 1 else ad.concat(parts, axis=1)
        hidden = ad.relu(ad.add(ad.matmul(joined, self.params["clf.hidden.weight"]),
                                self.params["clf.hidden.bias"]))
        return ad.add(ad.matmul(hidden, self.params["clf.out.weight"]),
                      self.params["clf.out.bias"])

    # -- parameter plumbing ---------------------------------------------------

    def parameters(self) -> list[Tensor]:
        return [self.params[name] for name in sorted(self.params)]

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def astype(self, dtype):
        """Cast all parameters in place (float64 is used by gradient checks)."""
        for p in self.params.values():
            p.data = p.data.astype(dtype)
        return self

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state_arrays(self, state: dict[str, np.ndarray]):
        if set(state) != set(self.params):
            raise DataError("parameter name mismatch while loading state")
        for name, array in state.items():
            if array.shape != self.params[name].data.shape:
                raise DataError(f"parameter shape mismatch for {name}")
            self.params[name].data = array.astype(self.params[name].dtype, copy=True)


# ---------------------------------------------------------------------------
# checkpoint file


def save_checkpoint(model: CareModel, path) -> None:
    cfg_hash = model.config.hash_bytes()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<H", CHECKPOINT_VERSION))
        fh.write(cfg_hash)
        names = sorted(model.params)
        fh.write(struct.pack("<I", len(names)))
        for name in names:
            raw = name.encode()
            data = np.ascontiguousarray(model.params[name].data, dtype="<f4")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", data.ndim))
            for extent in data.shape:
                fh.write(struct.pack("<I", extent))
            fh.write(data.tobytes())


def load_checkpoint(path, config: ModelConfig) -> CareModel:
    def read_exact(fh, n):
        chunk = fh.read(n)
        if len(chunk) != n:
            raise DataError("checkpoint: unexpected EOF")
        return chunk

    with open(path, "rb") as fh:
        if read_exact(fh, 6) != CHECKPOINT_MAGIC:
            raise DataError("checkpoint: bad magic")
        (version,) = struct.unpack("<H", read_exact(fh, 2))
        if version != CHECKPOINT_VERSION:
            raise DataError(f"checkpoint: unsupported version {version}")
        cfg_hash = read_exact(fh, 8)
        if cfg_hash != config.hash_bytes():
            raise DataError("checkpoint: config hash mismatch")
        (count,) = struct.unpack("<I", read_exact(fh, 4))
        state = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", read_exact(fh, 2))
            name = read_exact(fh, name_len).decode()
            (rank,) = struct.unpack("<B", read_exact(fh, 1))
            shape = tuple(struct.unpack("<I", read_exact(fh, 4))[0] for _ in range(rank))
            size = int(np.prod(shape)) if shape else 1
            payload = read_exact(fh, 4 * size)
            state[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
    model = CareModel(config)
    model.load_state_arrays(state)
    return model
