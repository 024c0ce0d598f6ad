"""Dense encoder/decoder pair with a mixed continuous/discrete latent."""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .distributions import CategoricalParams, GaussianParams, LatentSample
from .errors import FormatError, NumericError

LOG_VAR_BOUND = 8.0
CHECKPOINT_MAGIC = b"LVAECKPT"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ArchSpec:
    input_dim: int
    J: int
    C: int
    hidden_dim: int = 512
    hidden_layers: int = 2

    def __post_init__(self):
        for name in ("input_dim", "J", "C", "hidden_dim", "hidden_layers"):
            if getattr(self, name) < 1:
                raise ValueError(f"ArchSpec.{name} must be positive, got {getattr(self, name)}")

    def with_J(self, J: int) -> "ArchSpec":
        return dataclasses.replace(self, J=J)


def _dense_stack(sizes: list[int]) -> nn.ModuleList:
    return nn.ModuleList(nn.Linear(a, b) for a, b in zip(sizes[:-1], sizes[1:]))


def _glorot_(layer: nn.Linear, generator: torch.Generator) -> None:
    nn.init.xavier_uniform_(layer.weight, generator=generator)
    nn.init.zeros_(layer.bias)


class VAE(nn.Module):
    """Encoder q(z_c, z_d | x) and Bernoulli decoder p(x | z_c, z_d).

    The encoder head emits ``[mu | log_var | logits]`` with sizes C, C, J.
    Hidden layers use ELU; there is no normalisation layer, so forward
    passes are pure functions of the parameters.
    """

    def __init__(self, arch: ArchSpec):
        super().__init__()
        self.arch = arch
        h = [arch.hidden_dim] * arch.hidden_layers
        self.encoder = _dense_stack([arch.input_dim, *h, 2 * arch.C + arch.J])
        self.decoder = _dense_stack([arch.C + arch.J, *h, arch.input_dim])
        self.act = nn.ELU()

    @property
    def param_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    @property
    def dtype(self) -> torch.dtype:
        return self.encoder[0].weight.dtype

    def _run(self, layers: nn.ModuleList, h: torch.Tensor, which: str) -> torch.Tensor:
        last = len(layers) - 1
        for i, layer in enumerate(layers):
            h = layer(h)
            if i < last:
                h = self.act(h)
            if not torch.isfinite(h).all():
                raise NumericError(f"non-finite activation in {which} layer {i}")
        return h

    def encode(self, x: torch.Tensor) -> tuple[GaussianParams, CategoricalParams]:
        if x.shape[-1] != self.arch.input_dim:
            raise ValueError(f"expected input of size {self.arch.input_dim}, got {x.shape[-1]}")
        out = self._run(self.encoder, x, "encoder")
        C = self.arch.C
        mu, raw_lv, logits = out[..., :C], out[..., C : 2 * C], out[..., 2 * C :]
        log_var = LOG_VAR_BOUND * torch.tanh(raw_lv / LOG_VAR_BOUND)
        return GaussianParams(mu, log_var), CategoricalParams(logits)

    def decode(self, z: LatentSample | torch.Tensor) -> torch.Tensor:
        if isinstance(z, LatentSample):
            if z.z_c.shape[-1] != self.arch.C or z.z_d.shape[-1] != self.arch.J:
                raise ValueError(
                    f"latent sizes ({z.z_c.shape[-1]}, {z.z_d.shape[-1]}) do not match "
                    f"C={self.arch.C}, J={self.arch.J}"
                )
            z = z.flat()
        elif z.shape[-1] != self.arch.C + self.arch.J:
            raise ValueError(f"expected latent of size {self.arch.C + self.arch.J}, got {z.shape[-1]}")
        return self._run(self.decoder, z, "decoder")

    def forward(self, x):
        return self.encode(x)


def encode(x: torch.Tensor, m: VAE) -> tuple[GaussianParams, CategoricalParams]:
    return m.encode(x)


def decode(z: LatentSample | torch.Tensor, m: VAE) -> torch.Tensor:
    """Bernoulli logits of the reconstruction; ``torch.sigmoid`` gives the mean image."""
    return m.decode(z)


def init_model(arch: ArchSpec, seed: int, dtype: torch.dtype = torch.float64) -> VAE:
    """Glorot-uniform weights and zero biases, deterministic in ``seed``."""
    model = VAE(arch).to(dtype)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for layer in (*model.encoder, *model.decoder):
            _glorot_(layer, gen)
    return model


def transfer_weights(teacher: VAE, new_arch: ArchSpec, seed: int) -> VAE:
    """Build a student from ``teacher``, optionally with a larger discrete latent.

    With an unchanged J the student is an exact copy. When J grows, every
    weight is copied except the encoder-head rows that produce the
    categorical logits and the first decoder layer's columns that consume
    z_d; those keep a fresh Glorot initialisation drawn from ``seed``.
    """
    old = teacher.arch
    if dataclasses.replace(new_arch, J=old.J) != old:
        raise ValueError("only the discrete latent size may change between teacher and student")
    if new_arch.J < old.J:
        raise ValueError(f"discrete latent cannot shrink ({old.J} -> {new_arch.J})")

    if new_arch.J == old.J:
        student = copy.deepcopy(teacher)
        for p in student.parameters():
            p.requires_grad_(True)
        return student

    student = init_model(new_arch, seed, dtype=teacher.dtype)
    C = old.C
    with torch.no_grad():
        for src, dst in zip(teacher.encoder[:-1], student.encoder[:-1]):
            dst.load_state_dict(src.state_dict())
        head_src, head_dst = teacher.encoder[-1], student.encoder[-1]
        head_dst.weight[: 2 * C] = head_src.weight[: 2 * C]
        head_dst.bias[: 2 * C] = head_src.bias[: 2 * C]

        first_src, first_dst = teacher.decoder[0], student.decoder[0]
        first_dst.weight[:, :C] = first_src.weight[:, :C]
        first_dst.bias.copy_(first_src.bias)
        for src, dst in zip(teacher.decoder[1:], student.decoder[1:]):
            dst.load_state_dict(src.state_dict())
    return student


def freeze(model: VAE) -> VAE:
    """Detached deep copy with gradients disabled."""
    frozen = copy.deepcopy(model)
    for p in frozen.parameters():
        p.requires_grad_(False)
    frozen.eval()
    return frozen


def param_digest(model: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in model.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


# -- checkpoints -------------------------------------------------------------
#
# Layout: MAGIC | u32 version | u32 header_len | header JSON | raw arrays.
# Arrays are little-endian in state_dict order; the header records names,
# shapes, dtype, the architecture and any extra metadata (seed lineage).

def _encode_tensors(tensors: dict[str, torch.Tensor], meta: dict) -> bytes:
    entries, blobs = [], []
    for name, t in tensors.items():
        arr = t.detach().cpu().contiguous().numpy()
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        entries.append({"name": name, "shape": list(arr.shape), "dtype": str(arr.dtype.name)})
        blobs.append(arr.tobytes())
    header = json.dumps({**meta, "tensors": entries}, sort_keys=True, separators=(",", ":")).encode()
    return (
        CHECKPOINT_MAGIC
        + struct.pack("<II", CHECKPOINT_VERSION, len(header))
        + header
        + b"".join(blobs)
    )


def _decode_tensors(blob: bytes) -> tuple[dict, dict[str, torch.Tensor]]:
    n = len(CHECKPOINT_MAGIC)
    if blob[:n] != CHECKPOINT_MAGIC:
        raise FormatError("not a checkpoint file (bad magic)", 0)
    if len(blob) < n + 8:
        raise FormatError("truncated checkpoint header", n)
    version, hlen = struct.unpack("<II", blob[n : n + 8])
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", n)
    start = n + 8
    if len(blob) < start + hlen:
        raise FormatError("truncated checkpoint header", start)
    meta = json.loads(blob[start : start + hlen])
    offset = start + hlen
    tensors = {}
    for e in meta.pop("tensors"):
        dt = np.dtype(e["dtype"]).newbyteorder("<")
        size = int(np.prod(e["shape"], dtype=np.int64)) * dt.itemsize
        if offset + size > len(blob):
            raise FormatError(f"truncated payload for tensor {e['name']}", offset)
        arr = np.frombuffer(blob, dtype=dt, count=size // dt.itemsize, offset=offset)
        tensors[e["name"]] = torch.from_numpy(arr.reshape(e["shape"]).copy())
        offset += size
    if offset != len(blob):
        raise FormatError("trailing bytes after last tensor", offset)
    return meta, tensors


def save_checkpoint(model: VAE, path: str | Path, seed_lineage: list[int] | None = None) -> None:
    meta = {"kind": "vae", "arch": dataclasses.asdict(model.arch), "seed_lineage": list(seed_lineage or [])}
    Path(path).write_bytes(_encode_tensors(model.state_dict(), meta))


def load_checkpoint(path: str | Path) -> tuple[VAE, list[int]]:
    meta, tensors = _decode_tensors(Path(path).read_bytes())
    if meta.get("kind") != "vae":
        raise FormatError(f"checkpoint holds {meta.get('kind')!r}, not a VAE")
    model = VAE(ArchSpec(**meta["arch"]))
    dtype = next(iter(tensors.values())).dtype
    model = model.to(dtype)
    model.load_state_dict(tensors)
    return model, meta["seed_lineage"]


def generate(model: VAE, n: int, generator: torch.Generator, n_codes: int | None = None) -> tuple[torch.Tensor, torch.Tensor]:
    """Decode ``n`` prior samples with hard one-hot discrete codes.

    Codes cycle through ``0 .. n_codes-1`` (default: every code of the
    model), so each code gets ``n // n_codes`` samples and the first
    ``n % n_codes`` codes one extra. Returns the decoder's Bernoulli means
    and the code of each sample.
    """
    n_codes = model.arch.J if n_codes is None else n_codes
    if not 1 <= n_codes <= model.arch.J:
        raise ValueError(f"n_codes must lie in [1, {model.arch.J}], got {n_codes}")
    codes = torch.arange(n) % n_codes
    z_c = torch.randn(n, model.arch.C, generator=generator, dtype=torch.float64).to(model.dtype)
    z_d = torch.nn.functional.one_hot(codes, model.arch.J).to(model.dtype)
    with torch.no_grad():
        x = torch.sigmoid(model.decode(LatentSample(z_c, z_d)))
    return x, codes
