"""Autoencoder variants (AE, CAE, CVAE, MemCAE) built on :mod:`oddkit.autodiff`.

Every encoder ends in a 32-d code except MemCAE, whose encoder ends in a
spatial feature map; each spatial position is an independent query into the
memory matrix.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import BinaryIO

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError, ParseError, ShapeError

log = logging.getLogger(__name__)

KINDS = ("AE", "CAE", "CVAE", "MemCAE")

# (filters, kernel, stride)
CONV_ENCODER = ((32, 3, 2), (64, 3, 2), (128, 3, 2), (256, 4, 2))
CONV_DECODER = ((256, 4, 2), (128, 3, 2), (64, 3, 2), (32, 3, 2), (3, 3, 1))
MEM_ENCODER = ((16, 1, 2), (32, 3, 2), (64, 3, 2))
MEM_DECODER = ((64, 3, 2), (32, 3, 2), (16, 1, 2), (3, 3, 1))


@dataclass(frozen=True)
class ArchitectureDescriptor:
    kind: str
    patch_size: int = 32
    latent_dim: int = 32
    memory_slots: int = 500
    shrink_lambda: float | None = None  # None means 1 / memory_slots
    shrink_epsilon: float = 1e-12
    entropy_alpha: float = 0.0002
    channels: int = 3

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown model kind {self.kind!r}; expected one of {KINDS}")
        if self.latent_dim != 32 and self.kind != "MemCAE":
            raise ConfigurationError("AE/CAE/CVAE use a 32-dimensional latent code")
        if self.memory_slots < 1:
            raise ConfigurationError("memory_slots must be >= 1")
        if self.shrink_lambda is not None and self.shrink_lambda < 0:
            raise ConfigurationError("shrink_lambda must be >= 0")
        if not self.shrink_epsilon > 0:
            raise ConfigurationError("shrink_epsilon must be > 0")
        if self.entropy_alpha < 0:
            raise ConfigurationError("entropy_alpha must be >= 0")
        depth = {"AE": 0, "CAE": 4, "CVAE": 4, "MemCAE": 3}[self.kind]
        if self.patch_size < 1 or self.patch_size % (2 ** depth):
            raise ConfigurationError(
                f"{self.kind} needs patch_size divisible by {2 ** depth}, got {self.patch_size}")

    @property
    def lam(self) -> float:
        return 1.0 / self.memory_slots if self.shrink_lambda is None else self.shrink_lambda

    @property
    def layer_plan(self) -> dict[str, tuple]:
        if self.kind == "AE":
            n = self.patch_size ** 2 * self.channels
            return {"encoder": (("dense", n, self.latent_dim),), "decoder": (("dense", self.latent_dim, n),)}
        if self.kind == "MemCAE":
            return {"encoder": tuple(("conv",) + l for l in MEM_ENCODER),
                    "decoder": tuple(("deconv",) + l for l in MEM_DECODER)}
        return {"encoder": tuple(("conv",) + l for l in CONV_ENCODER),
                "decoder": tuple(("deconv",) + l for l in CONV_DECODER)}

    @property
    def feature_shape(self) -> tuple[int, int, int]:
        """Spatial shape at the end of the convolution stack (before any projection)."""
        enc = MEM_ENCODER if self.kind == "MemCAE" else CONV_ENCODER
        side = self.patch_size
        for _, _, s in enc:
            side = -(-side // s)
        return side, side, enc[-1][0]

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))


@dataclass
class LatentCode:
    z: Tensor
    mu: Tensor | None = None
    log_var: Tensor | None = None


@dataclass
class MemoryRead:
    z_hat: Tensor  # [B, h, w, C]
    w: Tensor  # [B*h*w, N] before shrinkage
    w_hat: Tensor  # [B*h*w, N] after shrinkage and renormalization


@dataclass
class ForwardPass:
    x_hat: Tensor
    code: LatentCode
    memory: MemoryRead | None = None


@dataclass
class LossParts:
    total: Tensor
    reconstruction: Tensor  # per-sample squared error, [B]
    aux: Tensor | None = None  # per-sample KL (CVAE) or summed attention entropy (MemCAE)


# ---------------------------------------------------------------- memory module

def memory_address(query, memory, strict: bool = True) -> Tensor:
    """Softmax over cosine similarities between each query row ``[..., C]`` and memory rows ``[N, C]``."""
    query, memory = ad.as_tensor(query), ad.as_tensor(memory)
    if query.shape[-1] != memory.shape[-1]:
        raise ShapeError(f"query dim {query.shape[-1]} does not match memory {memory.shape}")
    eps = 0.0 if strict else 1e-12
    q = ad.l2_normalize(query.reshape(-1, query.shape[-1]), eps=eps)
    m = ad.l2_normalize(memory, eps=eps)
    sims = ad.matmul(q, _transpose(m))
    w = ad.softmax(sims)
    return w.reshape(query.shape[:-1] + (memory.shape[0],))


def _transpose(t: Tensor) -> Tensor:
    return ad._make(t.data.T, (t,), lambda g: (g.T,))


def hard_shrink(w, lam: float, eps: float = 1e-12, renormalize: bool = True) -> Tensor:
    """``max(w - lam, 0) * w / (|w - lam| + eps)``, then rescaled to sum to one along the last axis.

    A row in which every entry is shrunk away falls back to a one-hot at its
    largest pre-shrink weight.
    """
    w = ad.as_tensor(w)
    d = w - lam
    shrunk = ad.relu(d) * w / (ad.absolute(d) + eps)
    if not renormalize:
        return shrunk
    total = shrunk.sum(axis=-1, keepdims=True)
    dead = total.data == 0
    if np.any(dead):
        log.info("hard_shrink: %d attention rows fully shrunk, keeping their largest weight", int(dead.sum()))
        onehot = np.zeros(w.shape, dtype=w.dtype)
        np.put_along_axis(onehot, np.argmax(w.data, axis=-1)[..., None], 1.0, axis=-1)
        shrunk = shrunk + onehot * dead
        total = total + dead.astype(w.dtype)
    return shrunk / total


def memory_read(w_hat, memory) -> Tensor:
    w_hat, memory = ad.as_tensor(w_hat), ad.as_tensor(memory)
    if w_hat.shape[-1] != memory.shape[0]:
        raise ShapeError(f"weights over {w_hat.shape[-1]} slots do not match memory {memory.shape}")
    flat = w_hat.reshape(-1, memory.shape[0])
    return ad.matmul(flat, memory).reshape(w_hat.shape[:-1] + (memory.shape[1],))


def attention_entropy(w_hat) -> Tensor:
    return ad.entropy(w_hat, axis=-1)


# ---------------------------------------------------------------- model

@dataclass
class ModelBundle:
    descriptor: ArchitectureDescriptor
    params: dict[str, Tensor]
    buffers: dict[str, ad.RunningStats] = field(default_factory=dict)
    seed: int = 0

    @property
    def kind(self) -> str:
        return self.descriptor.kind

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def astype(self, dtype) -> "ModelBundle":
        params = {k: Tensor(v.data.astype(dtype), requires_grad=True) for k, v in self.params.items()}
        buffers = {}
        for k, st in self.buffers.items():
            nb = ad.RunningStats(len(st.mean), st.momentum, dtype)
            nb.mean, nb.var = st.mean.astype(dtype), st.var.astype(dtype)
            buffers[k] = nb
        return ModelBundle(self.descriptor, params, buffers, self.seed)

    # -- blocks

    def _conv_stack(self, h: Tensor, prefix: str, layers, training: bool, transpose: bool) -> Tensor:
        batchnorm = self.kind == "MemCAE"
        op = ad.deconv2d if transpose else ad.conv2d
        for i, (_, _, _, stride) in enumerate(layers, start=1):
            h = op(h, self.params[f"{prefix}.conv{i}.weight"], stride) + self.params[f"{prefix}.conv{i}.bias"]
            if i == len(layers):
                break
            if batchnorm:
                h = ad.batch_norm(h, self.params[f"{prefix}.bn{i}.gamma"], self.params[f"{prefix}.bn{i}.beta"],
                                  self.buffers[f"{prefix}.bn{i}"], training)
            h = ad.relu(h)
        return h

    def _check_input(self, x: Tensor):
        s, c = self.descriptor.patch_size, self.descriptor.channels
        if x.ndim != 4 or x.shape[1:] != (s, s, c):
            raise ShapeError(f"{self.kind} expects input [B, {s}, {s}, {c}], got {x.shape}")

    def encode(self, x, training: bool = False, noise: np.ndarray | None = None,
               rng: np.random.Generator | None = None) -> LatentCode:
        """Map a batch ``[B, S, S, 3]`` to its latent code.

        CVAE samples ``z = mu + exp(log_var / 2) * noise``; without explicit
        ``noise`` it draws from ``rng`` in training mode and uses ``z = mu``
        otherwise.
        """
        x = ad.as_tensor(x, self.dtype)
        self._check_input(x)
        p = self.params
        b = x.shape[0]
        if self.kind == "AE":
            return LatentCode(ad.dense(x.reshape(b, -1), p["encoder.fc.weight"], p["encoder.fc.bias"]))
        plan = self.descriptor.layer_plan["encoder"]
        h = self._conv_stack(x, "encoder", plan, training, transpose=False)
        if self.kind == "MemCAE":
            return LatentCode(h)
        flat = ad.relu(h).reshape(b, -1)
        if self.kind == "CAE":
            return LatentCode(ad.dense(flat, p["encoder.fc.weight"], p["encoder.fc.bias"]))
        mu = ad.dense(flat, p["encoder.mu.weight"], p["encoder.mu.bias"])
        log_var = ad.dense(flat, p["encoder.log_var.weight"], p["encoder.log_var.bias"])
        if noise is None and training:
            noise = (rng or np.random.default_rng()).standard_normal(mu.shape)
        if noise is None:
            return LatentCode(mu, mu, log_var)
        noise = np.asarray(noise, dtype=mu.dtype)
        z = mu + ad.exp(log_var * 0.5) * noise
        return LatentCode(z, mu, log_var)

    def address(self, z_map: Tensor) -> MemoryRead:
        d = self.descriptor
        mem = self.params["memory.M"]
        w = memory_address(z_map, mem, strict=False).reshape(-1, d.memory_slots)
        w_hat = hard_shrink(w, d.lam, d.shrink_epsilon)
        z_hat = memory_read(w_hat, mem).reshape(z_map.shape)
        return MemoryRead(z_hat, w, w_hat)

    def decode(self, code, training: bool = False) -> Tensor:
        """Reconstruct from a latent code (or, for MemCAE, the memory read-out map); output lies in [0, 1]."""
        z = code.z if isinstance(code, LatentCode) else ad.as_tensor(code, self.dtype)
        p = self.params
        d = self.descriptor
        if self.kind == "MemCAE":
            if z.ndim != 4 or z.shape[1:] != d.feature_shape:
                raise ShapeError(f"MemCAE decoder expects [B, {d.feature_shape}], got {z.shape}")
            h = z
        else:
            if z.ndim != 2 or z.shape[1] != d.latent_dim:
                raise ShapeError(f"{self.kind} decoder expects [B, {d.latent_dim}], got {z.shape}")
            b = z.shape[0]
            if self.kind == "AE":
                out = ad.dense(z, p["decoder.fc.weight"], p["decoder.fc.bias"])
                return ad.sigmoid(out).reshape(b, d.patch_size, d.patch_size, d.channels)
            fh, fw, fc = d.feature_shape
            h = ad.relu(ad.dense(z, p["decoder.fc.weight"], p["decoder.fc.bias"])).reshape(b, fh, fw, fc)
        h = self._conv_stack(h, "decoder", d.layer_plan["decoder"], training, transpose=True)
        return ad.sigmoid(h)

    def forward(self, x, training: bool = False, noise=None, rng=None) -> ForwardPass:
        code = self.encode(x, training, noise, rng)
        if self.kind == "MemCAE":
            read = self.address(code.z)
            return ForwardPass(self.decode(read.z_hat, training), code, read)
        return ForwardPass(self.decode(code, training), code)

    def loss(self, x, fwd: ForwardPass) -> LossParts:
        """Batch-mean training objective; squared error is summed over pixels."""
        x = ad.as_tensor(x, self.dtype)
        if x.shape != fwd.x_hat.shape:
            raise ShapeError(f"input {x.shape} and reconstruction {fwd.x_hat.shape} differ")
        recon = ad.square(x - fwd.x_hat).sum(axis=(1, 2, 3))
        aux = None
        if self.kind == "CVAE":
            mu, lv = fwd.code.mu, fwd.code.log_var
            aux = ((ad.square(mu) + ad.exp(lv) - lv - 1.0) * 0.5).sum(axis=1)
            per_sample = recon + aux
        elif self.kind == "MemCAE":
            b = x.shape[0]
            aux = attention_entropy(fwd.memory.w_hat).reshape(b, -1).sum(axis=1)
            per_sample = recon + aux * self.descriptor.entropy_alpha
        else:
            per_sample = recon
        return LossParts(per_sample.mean(), recon, aux)

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.params.values())


# ---------------------------------------------------------------- construction

def _he_uniform(rng, shape, fan_in, dtype):
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def build(descriptor: ArchitectureDescriptor, seed: int = 0, dtype=np.float32) -> ModelBundle:
    """Initialize a model deterministically from ``seed``.

    Weights are He-uniform, biases zero, batch-norm scale one, and memory rows
    uniform in ``+-1/sqrt(C)``.
    """
    d = descriptor
    rng = np.random.default_rng(seed)
    arrays: dict[str, np.ndarray] = {}
    buffers: dict[str, ad.RunningStats] = {}
    plan = d.layer_plan

    def conv_layers(prefix, layers, cin, transpose):
        for i, (_, n, k, _) in enumerate(layers, start=1):
            shape = (k, k, n, cin) if transpose else (k, k, cin, n)
            arrays[f"{prefix}.conv{i}.weight"] = _he_uniform(rng, shape, k * k * cin, dtype)
            arrays[f"{prefix}.conv{i}.bias"] = np.zeros(n, dtype)
            if d.kind == "MemCAE" and i < len(layers):
                arrays[f"{prefix}.bn{i}.gamma"] = np.ones(n, dtype)
                arrays[f"{prefix}.bn{i}.beta"] = np.zeros(n, dtype)
                buffers[f"{prefix}.bn{i}"] = ad.RunningStats(n, 0.99, dtype)
            cin = n
        return cin

    def fc(name, n_in, n_out):
        arrays[f"{name}.weight"] = _he_uniform(rng, (n_in, n_out), n_in, dtype)
        arrays[f"{name}.bias"] = np.zeros(n_out, dtype)

    if d.kind == "AE":
        n = d.patch_size ** 2 * d.channels
        fc("encoder.fc", n, d.latent_dim)
        fc("decoder.fc", d.latent_dim, n)
    else:
        conv_layers("encoder", plan["encoder"], d.channels, transpose=False)
        fh, fw, fc_ch = d.feature_shape
        flat = fh * fw * fc_ch
        if d.kind == "CAE":
            fc("encoder.fc", flat, d.latent_dim)
        elif d.kind == "CVAE":
            fc("encoder.mu", flat, d.latent_dim)
            fc("encoder.log_var", flat, d.latent_dim)
        if d.kind == "MemCAE":
            c = fc_ch
            arrays["memory.M"] = rng.uniform(-1 / np.sqrt(c), 1 / np.sqrt(c), (d.memory_slots, c)).astype(dtype)
            conv_layers("decoder", plan["decoder"], fc_ch, transpose=True)
        else:
            fc("decoder.fc", d.latent_dim, flat)
            conv_layers("decoder", plan["decoder"], fc_ch, transpose=True)
    params = {k: Tensor(v, requires_grad=True) for k, v in arrays.items()}
    return ModelBundle(d, params, buffers, seed)


# ---------------------------------------------------------------- bundle files

BUNDLE_MAGIC = b"ODKB"


def bundle_tensors(bundle: ModelBundle) -> dict[str, np.ndarray]:
    out = {k: v.data for k, v in bundle.params.items()}
    for k, st in bundle.buffers.items():
        out[f"buffer.{k}.mean"] = st.mean
        out[f"buffer.{k}.var"] = st.var
    return out


def write_bundle(fh: BinaryIO, bundle: ModelBundle, meta: dict | None = None,
                 extra: dict[str, np.ndarray] | None = None) -> None:
    """Length-prefixed canonical JSON header, then the tensor checkpoint."""
    header = {"descriptor": json.loads(bundle.descriptor.to_json()), "seed": bundle.seed, "meta": meta or {}}
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    fh.write(BUNDLE_MAGIC)
    fh.write(struct.pack("<I", len(raw)))
    fh.write(raw)
    tensors = bundle_tensors(bundle)
    for k, v in (extra or {}).items():
        tensors[f"extra.{k}"] = v
    ad.write_tensors(fh, tensors)


def read_bundle(fh: BinaryIO, dtype=np.float32) -> tuple[ModelBundle, dict, dict[str, np.ndarray]]:
    if fh.read(4) != BUNDLE_MAGIC:
        raise ParseError("not a model bundle (bad magic)", offset=0)
    (n,) = struct.unpack("<I", fh.read(4))
    header = json.loads(fh.read(n).decode("utf-8"))
    desc = header["descriptor"]
    descriptor = ArchitectureDescriptor(**desc)
    tensors = ad.read_tensors(fh)
    bundle = build(descriptor, header.get("seed", 0), dtype)
    missing = [k for k in bundle.params if k not in tensors]
    if missing:
        raise ConfigurationError(f"checkpoint is missing parameters: {', '.join(missing[:5])}")
    for k, p in bundle.params.items():
        p.data = tensors[k].astype(dtype)
    for k, st in bundle.buffers.items():
        st.mean = tensors[f"buffer.{k}.mean"].astype(dtype)
        st.var = tensors[f"buffer.{k}.var"].astype(dtype)
    extra = {k[len("extra."):]: v for k, v in tensors.items() if k.startswith("extra.")}
    return bundle, header.get("meta", {}), extra


def save_bundle(path: str | Path, bundle: ModelBundle, meta: dict | None = None,
                extra: dict[str, np.ndarray] | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        write_bundle(fh, bundle, meta, extra)
    tmp.replace(path)
    return path


def load_bundle(path: str | Path, dtype=np.float32) -> tuple[ModelBundle, dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        return read_bundle(fh, dtype)
