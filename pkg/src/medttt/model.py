"""The multi-resolution segmentation network with a TTT bottleneck.

Topology with every path enabled (c = base_channels)::

    image ──► conv stack (c)     ─┬─ [+ high-pass map, conv-embedded] ──────────────┐
    image ─► avg/2 ─► conv stack (2c) ───────────────────────────────┐              │
    image ─► avg/4 ─► conv stack (4c) ─► TTT x n_ttt ─► up2 ─ cat ─► conv (2c) ─► up2 ─ cat ─► conv (c) ─► 1x1 head

Without the multi-resolution block the network keeps a single path: the
full-resolution conv stack is average-pooled to 1/4 scale, lifted to 4c
channels, passed through the TTT blocks and upsampled back before the head.
"""

from __future__ import annotations

import json
import struct
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import tensor as tt
from .frequency import HighPassConfig, extract_high_freq
from .tensor import Tensor
from .ttt import TttConfig, TttLayer

CHECKPOINT_MAGIC = b"MTTT"
CHECKPOINT_VERSION = 1
ABLATION_SETTINGS = ("I", "II", "III", "full")


class ModelConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class ModelConfig:
    in_channels: int = 1
    base_channels: int = 16
    tile: int = 4
    n_ttt: int = 2
    use_mr_block: bool = True
    use_fff: bool = True
    use_ttt: bool = True
    head: str = "sigmoid-binary"
    seed: int = 0
    ttt: TttConfig | None = None
    highpass: HighPassConfig = field(default_factory=HighPassConfig)

    def __post_init__(self):
        if isinstance(self.ttt, dict):
            self.ttt = TttConfig(**self.ttt)
        if isinstance(self.highpass, dict):
            self.highpass = HighPassConfig(**self.highpass)
        if self.in_channels <= 0 or self.base_channels <= 0 or self.tile <= 0 or self.n_ttt < 0:
            raise ModelConfigError("channel counts, tile and n_ttt must be positive")
        d = 4 * self.base_channels
        if self.ttt is None:
            b = self.tile * self.tile
            self.ttt = TttConfig(d_model=d, hidden_model="mlp", minibatch_b=b, eta=0.5 / b)
        if self.ttt.d_model != d:
            raise ModelConfigError(f"ttt.d_model must equal 4*base_channels = {d}, got {self.ttt.d_model}")
        if self.ttt.mode == "minibatch" and self.ttt.minibatch_b != self.tile * self.tile:
            raise ModelConfigError(f"ttt.minibatch_b must equal tile^2 = {self.tile ** 2}")
        if self.head != "sigmoid-binary":
            raise ModelConfigError(f"only the sigmoid-binary head is supported, got {self.head!r}")
        if not (self.use_mr_block or self.use_fff or self.use_ttt):
            raise ModelConfigError("at least one of use_mr_block / use_fff / use_ttt must be enabled")

    @property
    def spatial_multiple(self) -> int:
        return 4 * self.tile

    def check_extent(self, h: int, w: int) -> None:
        m = self.spatial_multiple
        if h % m or w % m:
            raise ModelConfigError(f"input {h}x{w} must be divisible by 4*K = {m} in both extents")

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["ttt"] = asdict(self.ttt)
        out["highpass"] = asdict(self.highpass)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def ablation_setting(name: str, base: ModelConfig | None = None) -> ModelConfig:
    """Flags per ablation row: I = TTT only, II = MR + TTT, III = FFF + TTT, full = all."""
    flags = {
        "I": (False, False, True),
        "II": (True, False, True),
        "III": (False, True, True),
        "full": (True, True, True),
    }
    if name not in flags:
        raise ModelConfigError(f"unknown ablation setting {name!r}; expected one of {ABLATION_SETTINGS}")
    mr, fff, ttt_on = flags[name]
    src = base.to_dict() if base is not None else ModelConfig().to_dict()
    src.update(use_mr_block=mr, use_fff=fff, use_ttt=ttt_on)
    return ModelConfig.from_dict(src)


@dataclass
class SegmentationOutput:
    logits: Tensor  # N x H x W
    probs: Tensor


@contextmanager
def _stage(name: str):
    try:
        yield
    except (tt.TensorError, ValueError) as exc:
        if str(exc).startswith("["):
            raise
        raise type(exc)(f"[{name}] {exc}") from exc


class Model:
    """Parameters live in ``self.params`` (ordered name -> Tensor)."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.params: dict[str, Tensor] = {}
        self.ttt_layers: list[TttLayer] = []
        rng = np.random.default_rng(cfg.seed)
        c1, c2, c3 = cfg.base_channels, 2 * cfg.base_channels, 4 * cfg.base_channels
        cin = cfg.in_channels
        self._stack("high", cin, c1, rng)
        if cfg.use_fff:
            self._conv("fff_embed", cin, c1, 3, rng)
            self._conv("fff_merge", 2 * c1, c1, 3, rng)
        if cfg.use_mr_block:
            self._stack("mid", cin, c2, rng)
            self._stack("low", cin, c3, rng)
            self._conv("fuse_mid", c3 + c2, c2, 3, rng)
            self._conv("fuse_high", c2 + c1, c1, 3, rng)
        else:
            self._conv("lift", c1, c3, 1, rng)
            self._conv("restore", c3, c1, 3, rng)
        if cfg.use_ttt:
            for i in range(cfg.n_ttt):
                layer = TttLayer.create(cfg.ttt, rng)
                self.ttt_layers.append(layer)
                for name, p in layer.named_parameters():
                    self.params[f"ttt{i}.{name}"] = p
        self._conv("head", c1, 1, 1, rng)

    # -- construction --------------------------------------------------
    def _conv(self, name: str, cin: int, cout: int, k: int, rng: np.random.Generator) -> None:
        bound = np.sqrt(6.0 / (cin * k * k))
        self.params[f"{name}.weight"] = Tensor(rng.uniform(-bound, bound, (cout, cin, k, k)), requires_grad=True)
        self.params[f"{name}.bias"] = Tensor(np.zeros(cout), requires_grad=True)

    def _stack(self, name: str, cin: int, cout: int, rng: np.random.Generator) -> None:
        self._conv(f"{name}0", cin, cout, 3, rng)
        self._conv(f"{name}1", cout, cout, 3, rng)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def summary(self) -> dict:
        return {
            "config": self.cfg.to_dict(),
            "parameter_count": self.parameter_count(),
            "parameters": {n: list(p.shape) for n, p in self.params.items()},
            "branches": {
                "high": self.cfg.base_channels,
                "mid": 2 * self.cfg.base_channels if self.cfg.use_mr_block else None,
                "low": 4 * self.cfg.base_channels,
            },
            "ttt_blocks": len(self.ttt_layers),
            "ttt_placement": "bottleneck at 1/4 scale",
        }

    def zero_head(self) -> None:
        for n in ("head.weight", "head.bias"):
            self.params[n] = Tensor(np.zeros(self.params[n].shape), requires_grad=True)

    # -- forward -------------------------------------------------------
    def conv(self, name: str, x: Tensor) -> Tensor:
        return tt.conv2d(x, self.params[f"{name}.weight"], self.params[f"{name}.bias"])

    def stack(self, name: str, x: Tensor) -> Tensor:
        return tt.gelu(self.conv(f"{name}1", tt.gelu(self.conv(f"{name}0", x))))

    def tokens(self, fmap: Tensor) -> Tensor:
        """``N x C x H x W`` -> ``N x T x C``, raster order over K x K tiles, row-major inside a tile."""
        n, c, h, w = fmap.shape
        k = self.cfg.tile
        x = tt.reshape(fmap, (n, c, h // k, k, w // k, k))
        x = tt.permute(x, (0, 2, 4, 3, 5, 1))
        return tt.reshape(x, (n, h * w, c))

    def untokens(self, seq: Tensor, h: int, w: int) -> Tensor:
        n, _, c = seq.shape
        k = self.cfg.tile
        x = tt.reshape(seq, (n, h // k, w // k, k, k, c))
        x = tt.permute(x, (0, 5, 1, 3, 2, 4))
        return tt.reshape(x, (n, c, h, w))

    def bottleneck(self, low: Tensor) -> Tensor:
        if not self.ttt_layers:
            return low
        _, _, h, w = low.shape
        seq = self.tokens(low)
        for layer in self.ttt_layers:
            seq = layer(seq)
        return self.untokens(seq, h, w)

    def forward(self, image) -> SegmentationOutput:
        cfg = self.cfg
        arr = np.asarray(getattr(image, "data", image), dtype=np.float64)
        if arr.ndim == 3:
            arr = arr[None]
        if arr.ndim != 4 or arr.shape[1] != cfg.in_channels:
            raise ModelConfigError(f"expected N x {cfg.in_channels} x H x W input, got {arr.shape}")
        n, _, H, W = arr.shape
        cfg.check_extent(H, W)
        x = Tensor(arr)
        with _stage("high-resolution branch"):
            high = self.stack("high", x)
        if cfg.use_fff:
            with _stage("frequency branch"):
                hf = Tensor(np.stack([extract_high_freq(img, cfg.highpass) for img in arr]))
                emb = tt.gelu(self.conv("fff_embed", hf))
                high = tt.gelu(self.conv("fff_merge", tt.concat([high, emb], axis=1)))
        if cfg.use_mr_block:
            with _stage("medium-resolution branch"):
                mid = self.stack("mid", tt.downsample_avg(x, 2))
            with _stage("low-resolution branch"):
                low = self.stack("low", tt.downsample_avg(x, 4))
            with _stage("ttt bottleneck"):
                low = self.bottleneck(low)
            with _stage("fusion"):
                f = tt.gelu(self.conv("fuse_mid", tt.concat([tt.upsample_nearest(low, 2), mid], axis=1)))
                f = tt.gelu(self.conv("fuse_high", tt.concat([tt.upsample_nearest(f, 2), high], axis=1)))
        else:
            with _stage("ttt bottleneck"):
                low = tt.gelu(self.conv("lift", tt.downsample_avg(high, 4)))
                low = self.bottleneck(low)
            with _stage("fusion"):
                f = tt.gelu(self.conv("restore", tt.upsample_nearest(low, 4)))
        with _stage("head"):
            logits = tt.reshape(self.conv("head", f), (n, H, W))
            probs = tt.sigmoid(logits)
        return SegmentationOutput(logits, probs)

    __call__ = forward

    # -- state ---------------------------------------------------------
    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        if list(state) != list(self.params):
            missing = set(self.params) - set(state)
            extra = set(state) - set(self.params)
            raise CheckpointError(f"parameter manifest mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for n, arr in state.items():
            if tuple(arr.shape) != self.params[n].shape:
                raise CheckpointError(f"parameter {n}: checkpoint shape {arr.shape} != model shape {self.params[n].shape}")
        for n, arr in state.items():
            self.set_param(n, arr)

    def set_param(self, name: str, arr: np.ndarray) -> None:
        """Replace a parameter, keeping TTT layer references in sync."""
        new = Tensor(arr, requires_grad=True)
        self.params[name] = new
        if name.startswith("ttt"):
            idx, pname = name[3:].split(".", 1)
            layer = self.ttt_layers[int(idx)]
            if pname in ("theta_k", "theta_v", "theta_q"):
                setattr(layer.proj, pname, new)
            elif pname.startswith("w0_"):
                layer.init_weights[pname[3:]] = new
            else:
                setattr(layer, pname, new)


def build_model(cfg: ModelConfig) -> Model:
    return Model(cfg)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def encode_checkpoint(state: dict[str, np.ndarray]) -> bytes:
    """MTTT container: magic, u32 version, u32 count, then per parameter a
    u32-length-prefixed UTF-8 name, u32 ndim and u32 extents; finally all
    parameter data as little-endian float64 in manifest order."""
    out = bytearray(CHECKPOINT_MAGIC)
    out += struct.pack("<II", CHECKPOINT_VERSION, len(state))
    for name, arr in state.items():
        raw = name.encode("utf-8")
        out += struct.pack("<I", len(raw)) + raw
        out += struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    for arr in state.values():
        out += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    return bytes(out)


def decode_checkpoint(buf: bytes) -> dict[str, np.ndarray]:
    def take(fmt: str, pos: int):
        size = struct.calcsize(fmt)
        if pos + size > len(buf):
            raise CheckpointError(f"truncated checkpoint at byte {pos}")
        return struct.unpack_from(fmt, buf, pos), pos + size

    if buf[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("not an MTTT checkpoint (bad magic)")
    (version, count), pos = take("<II", 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    manifest = []
    for _ in range(count):
        (nlen,), pos = take("<I", pos)
        if pos + nlen > len(buf):
            raise CheckpointError(f"truncated checkpoint at byte {pos}")
        name = buf[pos : pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,), pos = take("<I", pos)
        shape, pos = take(f"<{ndim}I", pos)
        manifest.append((name, tuple(shape)))
    state = {}
    for name, shape in manifest:
        n = int(np.prod(shape)) if shape else 1
        if pos + 8 * n > len(buf):
            raise CheckpointError(f"truncated parameter data for {name}")
        state[name] = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).astype(np.float64).reshape(shape)
        pos += 8 * n
    if pos != len(buf):
        raise CheckpointError(f"{len(buf) - pos} trailing bytes after parameter data")
    return state


def save_checkpoint(model: Model, path) -> None:
    Path(path).write_bytes(encode_checkpoint(model.state_dict()))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    return decode_checkpoint(Path(path).read_bytes())


def model_summary_json(model: Model) -> str:
    return json.dumps(model.summary(), indent=2, sort_keys=True)
