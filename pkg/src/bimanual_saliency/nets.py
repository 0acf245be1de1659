"""Per-point networks: correction module, BSPN, BCPN and the refinement net.

All networks are PointNet-style shared MLPs over the rows of an N x c input.
An encoder returns its first-layer features, the max-pooled global feature and
their row-wise concatenation, which every decoder consumes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .geom import PointCloud

MAGIC = b"BGSW"
FORMAT_VERSION = 1


@dataclass
class NetConfig:
    encoder_widths: tuple[int, ...] = (64, 128, 256, 512, 1024)
    decoder_widths: tuple[int, ...] = (512, 256, 128)
    refine_widths: tuple[int, ...] = (64, 64)
    activation: str = "relu"
    restoring_clamp: bool = True
    bspn_saliency_input: bool = True

    def __post_init__(self):
        self.encoder_widths = tuple(int(w) for w in self.encoder_widths)
        self.decoder_widths = tuple(int(w) for w in self.decoder_widths)
        self.refine_widths = tuple(int(w) for w in self.refine_widths)
        if not self.encoder_widths or self.encoder_widths[0] != 64:
            raise ValueError("the first encoder layer must be 64 wide")
        if self.activation not in ad.ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def combined_width(self) -> int:
        return self.encoder_widths[0] + self.encoder_widths[-1]


# desk-scale widths used by the tests and the default CLI training run
COMPACT = dict(encoder_widths=(64, 128), decoder_widths=(64, 32), refine_widths=(64, 64))


class MLP:
    """Stack of shared per-point affine layers."""

    def __init__(self, sizes, rng: np.random.Generator):
        self.layers: list[tuple[Tensor, Tensor]] = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            w = Tensor(rng.uniform(-bound, bound, (fan_in, fan_out)), requires_grad=True)
            b = Tensor(rng.uniform(-bound, bound, fan_out), requires_grad=True)
            self.layers.append((w, b))

    @property
    def sizes(self) -> list[int]:
        return [self.layers[0][0].shape[0]] + [w.shape[1] for w, _ in self.layers]

    def parameters(self) -> Iterator[tuple[str, Tensor]]:
        for i, (w, b) in enumerate(self.layers):
            yield f"{i}.w", w
            yield f"{i}.b", b

    def __call__(self, x: Tensor, act: str = "relu", out: str = "linear", keep_first: bool = False):
        hidden, head = ad.ACTIVATIONS[act], ad.ACTIVATIONS[out]
        first = None
        last = len(self.layers) - 1
        for i, (w, b) in enumerate(self.layers):
            x = ad.linear(x, w, b)
            x = head(x) if i == last else hidden(x)
            if i == 0:
                first = x
        return (first, x) if keep_first else x


class Encoder:
    def __init__(self, in_channels: int, widths, rng):
        self.mlp = MLP([in_channels, *widths], rng)

    @property
    def in_channels(self) -> int:
        return self.mlp.sizes[0]

    def parameters(self):
        return self.mlp.parameters()


class Decoder:
    def __init__(self, in_width: int, widths, m: int, rng):
        self.mlp = MLP([in_width, *widths, m], rng)

    @property
    def in_width(self) -> int:
        return self.mlp.sizes[0]

    def parameters(self):
        return self.mlp.parameters()


def encode(enc: Encoder, cloud: PointCloud, extra=None, act: str = "relu"):
    """Returns (f1 N x 64, global feature, combined N x (64 + last width))."""
    x = point_features(cloud, extra)
    if x.shape[1] != enc.in_channels:
        raise ValueError(f"encoder expects {enc.in_channels} channels, got {x.shape[1]}")
    f1, f_last = enc.mlp(x, act=act, out=act, keep_first=True)
    g = ad.max_pool_points(f_last)
    combined = ad.concat_features(f1, ad.repeat_rows(g, x.shape[0]))
    return f1, g, combined


def decode(dec: Decoder, combined: Tensor, act: str = "relu", out: str = "linear") -> Tensor:
    if combined.data.ndim != 2 or combined.shape[1] != dec.in_width:
        raise ValueError(f"decoder expects width {dec.in_width}, got {combined.shape}")
    return dec.mlp(combined, act=act, out=out)


def point_features(cloud: PointCloud, extra=None) -> Tensor:
    """[xyz | extra channels] as an N x c tensor; ``extra`` may carry gradients."""
    xyz = Tensor(cloud.points)
    if extra is None:
        return xyz
    if not isinstance(extra, Tensor):
        arr = np.asarray(extra, dtype=np.float64)
        extra = Tensor(arr.reshape(len(arr), -1))
    if extra.data.ndim == 1:
        extra = ad.reshape(extra, (-1, 1))
    if extra.shape[0] != cloud.n:
        raise ValueError(f"extra channels have {extra.shape[0]} rows for {cloud.n} points")
    return ad.concat_features(xyz, extra)


def as_column(values, n: int) -> Tensor:
    if isinstance(values, Tensor):
        t = values if values.data.ndim == 2 else ad.reshape(values, (-1, 1))
    else:
        t = Tensor(np.asarray(values, dtype=np.float64).reshape(-1, 1))
    if t.shape != (n, 1):
        raise ValueError(f"saliency of shape {t.shape} does not match {n} points")
    return t


@dataclass
class ModelWeights:
    """Parameter bundle for CM, BSPN, BCPN and the refinement net."""

    config: NetConfig = field(default_factory=NetConfig)
    seed: int = 0
    meta: dict = field(default_factory=dict)
    version: str = "bgsw-1"

    def __post_init__(self):
        rng = np.random.default_rng(self.seed)
        c = self.config
        comb = c.combined_width
        self.cm_enc = Encoder(4, c.encoder_widths, rng)
        self.cm_dec = Decoder(comb, c.decoder_widths, 1, rng)
        bspn_in = 4 if c.bspn_saliency_input else 3
        self.enc_v = Encoder(bspn_in, c.encoder_widths, rng)
        self.enc_s = Encoder(bspn_in, c.encoder_widths, rng)
        self.dec_v = Decoder(comb, c.decoder_widths, 3, rng)
        self.dec_s = Decoder(comb, c.decoder_widths, 1, rng)
        self.bcpn_enc = Encoder(4, c.encoder_widths, rng)
        self.bcpn_dec = Decoder(comb, c.decoder_widths, 3, rng)
        self.refine = MLP([7, *c.refine_widths, 1], rng)

    PARTS = {
        "cm": ("cm_enc", "cm_dec"),
        "bspn": ("enc_v", "enc_s", "dec_v", "dec_s"),
        "bcpn": ("bcpn_enc", "bcpn_dec"),
        "refine": ("refine",),
    }

    def named_parameters(self, part: str | None = None) -> Iterator[tuple[str, Tensor]]:
        parts = [part] if part else list(self.PARTS)
        for p in parts:
            for attr in self.PARTS[p]:
                for name, t in getattr(self, attr).parameters():
                    yield f"{attr}.{name}", t

    def parameters(self, part: str | None = None) -> list[Tensor]:
        return [t for _, t in self.named_parameters(part)]

    def state(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.named_parameters()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for name, t in self.named_parameters():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != t.shape:
                raise ValueError(f"{name}: shape {arr.shape} does not match {t.shape}")
            t.data = arr.copy()

    def copy(self) -> "ModelWeights":
        other = ModelWeights(self.config, self.seed, dict(self.meta), self.version)
        other.load_state(self.state())
        return other

    def zero_head(self, attr: str) -> None:
        """Zero the output layer of a decoder (or the refine net), e.g. for identity baselines."""
        mlp = getattr(self, attr)
        mlp = mlp if isinstance(mlp, MLP) else mlp.mlp
        w, b = mlp.layers[-1]
        w.data = np.zeros_like(w.data)
        b.data = np.zeros_like(b.data)


def _act(weights: ModelWeights) -> str:
    return weights.config.activation


def _clamp(weights: ModelWeights, x: Tensor) -> Tensor:
    return ad.clamp(x, 0.0, 1.0, restoring=weights.config.restoring_clamp)


def cm_forward(weights: ModelWeights, cloud: PointCloud, s_o):
    """Correction module: returns (correction s_c, corrected map clamp(s_o + s_c))."""
    s_o = as_column(s_o, cloud.n)
    _, _, comb = encode(weights.cm_enc, cloud, s_o, _act(weights))
    s_c = decode(weights.cm_dec, comb, _act(weights), out="tanh")
    return s_c, _clamp(weights, s_o + s_c)


def bspn_forward(weights: ModelWeights, cloud: PointCloud, s, with_vectors: bool = True):
    """Returns (v N x 3 or None, delta_s N x 1, b = clamp(s + delta_s))."""
    s = as_column(s, cloud.n)
    act = _act(weights)
    extra = s if weights.config.bspn_saliency_input else None
    v = None
    if with_vectors:
        _, _, comb_v = encode(weights.enc_v, cloud, extra, act)
        v = decode(weights.dec_v, comb_v, act, out="linear")
    _, _, comb_s = encode(weights.enc_s, cloud, extra, act)
    delta_s = decode(weights.dec_s, comb_s, act, out="tanh")
    return v, delta_s, _clamp(weights, s + delta_s)


def bcpn_forward(weights: ModelWeights, cloud: PointCloud, b) -> Tensor:
    """Per-point 3-class logits (none / right / left)."""
    b = as_column(b, cloud.n)
    _, _, comb = encode(weights.bcpn_enc, cloud, b, _act(weights))
    return decode(weights.bcpn_dec, comb, _act(weights), out="linear")


def refine_features(cloud: PointCloud, b, labels_pred) -> np.ndarray:
    onehot = np.eye(3)[np.asarray(labels_pred, dtype=np.int64)]
    return np.column_stack([cloud.points, np.asarray(b, dtype=np.float64).reshape(-1), onehot])


def refine_forward(weights: ModelWeights, cloud: PointCloud, b, labels_pred):
    """Returns (R N x 1, refined map clamp(b + R))."""
    feats = Tensor(refine_features(cloud, b, labels_pred))
    r = weights.refine(feats, act=_act(weights), out="tanh")
    return r, _clamp(weights, as_column(b, cloud.n) + r)


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = np.exp(logits - logits.max(axis=1, keepdims=True))
    return z / z.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------- serialization


def save_weights(weights: ModelWeights, path) -> None:
    """Write "BGSW", u32 format version, u32 header length, JSON header, float32 blobs."""
    named = list(weights.named_parameters())
    header = {
        "version": weights.version,
        "seed": weights.seed,
        "config": asdict(weights.config),
        "meta": weights.meta,
        "tensors": [{"name": n, "shape": list(t.shape)} for n, t in named],
    }
    hdr = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(hdr)))
        fh.write(hdr)
        for _, t in named:
            fh.write(t.data.astype("<f4").tobytes())


def load_weights(path) -> ModelWeights:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: not a BGSW weight file")
    fmt, hlen = struct.unpack("<II", raw[4:12])
    if fmt != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format version {fmt}")
    header = json.loads(raw[12 : 12 + hlen].decode("utf-8"))
    weights = ModelWeights(NetConfig(**header["config"]), header["seed"], header["meta"], header["version"])
    offset = 12 + hlen
    state = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"]))
        blob = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
        state[entry["name"]] = blob.astype(np.float64).reshape(entry["shape"])
        offset += 4 * count
    if offset != len(raw):
        raise ValueError(f"{path}: trailing or missing tensor data")
    weights.load_state(state)
    return weights
