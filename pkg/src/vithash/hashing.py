"""Hash head, sign quantization and the packed ternary code file.

Code file layout (all integers little-endian)::

    magic   6 bytes  b"VHCODE"
    version uint16   1
    bits    uint32   code length b
    count   uint32   number of records
    records count x (item_id int64, ceil(b/4) packed bytes)

Each ternary symbol takes two bits: ``00 -> 0``, ``01 -> +1``, ``10 -> -1``
(``11`` is invalid). Symbol ``k`` of a record lives in byte ``k // 4`` at bit
offset ``2 * (k % 4)``; unused trailing bits are zero.
"""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .backbone import ConfigError

CODE_MAGIC = b"VHCODE"
CODE_VERSION = 1
_HEADER = struct.Struct("<6sHII")


@dataclass
class HashHeadConfig:
    input_dim: int = 512
    code_bits: int = 64

    def __post_init__(self):
        if self.input_dim <= 0 or self.code_bits <= 0:
            raise ConfigError(f"hash head dims must be positive, got {self}")

    def to_dict(self) -> dict:
        return asdict(self)


class HashHead(nn.Module):
    """h = LN(cls) W1 W2, two bias-free projections with no activation between.

    The two linear maps compose to one D x b matrix; they are kept separate
    so the parameterization (and its optimization dynamics) stays two-layer.
    """

    def __init__(self, config: HashHeadConfig, seed: int | None = None):
        super().__init__()
        self.config = config
        self.norm = nn.LayerNorm(config.input_dim)
        self.fc1 = nn.Linear(config.input_dim, config.input_dim, bias=False)
        self.fc2 = nn.Linear(config.input_dim, config.code_bits, bias=False)
        gen = torch.Generator().manual_seed(seed) if seed is not None else None
        with torch.no_grad():
            for lin in (self.fc1, self.fc2):
                bound = 1.0 / lin.in_features ** 0.5
                lin.weight.copy_(torch.rand(lin.weight.shape, generator=gen) * 2 * bound - bound)

    def forward(self, class_token: torch.Tensor) -> torch.Tensor:
        if class_token.shape[-1] != self.config.input_dim:
            raise ConfigError(
                f"class token dim {class_token.shape[-1]} != hash head input_dim {self.config.input_dim}"
            )
        return self.fc2(self.fc1(self.norm(class_token)))


def hash_map(head: HashHead, class_token: torch.Tensor) -> torch.Tensor:
    return head(class_token)


def sign_quantize(h) -> np.ndarray:
    """Elementwise sign with sign(0) == 0, returned as int8."""
    if isinstance(h, torch.Tensor):
        h = h.detach().cpu().numpy()
    h = np.asarray(h)
    if not np.all(np.isfinite(h)):
        raise FloatingPointError("cannot quantize non-finite hash features")
    return np.sign(h).astype(np.int8)


def _pack(codes: np.ndarray) -> np.ndarray:
    n, b = codes.shape
    nbytes = (b + 3) // 4
    sym = np.zeros((n, nbytes * 4), dtype=np.uint8)
    sym[:, :b] = np.where(codes > 0, 1, np.where(codes < 0, 2, 0))
    sym = sym.reshape(n, nbytes, 4)
    return (sym[..., 0] | (sym[..., 1] << 2) | (sym[..., 2] << 4) | (sym[..., 3] << 6)).astype(np.uint8)


def _unpack(packed: np.ndarray, b: int) -> np.ndarray:
    shifts = np.array([0, 2, 4, 6], dtype=np.uint8)
    sym = (packed[..., None] >> shifts) & 0b11
    sym = sym.reshape(packed.shape[0], packed.shape[1] * 4)[:, :b]
    if np.any(sym == 0b11):
        raise ValueError("corrupt code file: invalid 2-bit symbol 0b11")
    return np.where(sym == 1, 1, np.where(sym == 2, -1, 0)).astype(np.int8)


def write_codes(path: str | Path, codes: np.ndarray, item_ids) -> None:
    codes = np.asarray(codes)
    item_ids = np.asarray(item_ids, dtype=np.int64)
    if codes.ndim != 2 or codes.shape[0] != item_ids.shape[0]:
        raise ValueError(f"codes {codes.shape} and ids {item_ids.shape} are misaligned")
    if not np.isin(codes, (-1, 0, 1)).all():
        raise ValueError("codes must be ternary")
    n, b = codes.shape
    packed = _pack(codes)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(_HEADER.pack(CODE_MAGIC, CODE_VERSION, b, n))
        for i in range(n):
            f.write(struct.pack("<q", int(item_ids[i])))
            f.write(packed[i].tobytes())


def read_codes(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Returns ``(codes int8 [n, b], item_ids int64 [n])``."""
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ValueError(f"{path}: truncated header")
    magic, version, b, n = _HEADER.unpack_from(data)
    if magic != CODE_MAGIC or version != CODE_VERSION:
        raise ValueError(f"{path}: not a code file (magic={magic!r}, version={version})")
    nbytes = (b + 3) // 4
    rec = np.dtype([("id", "<i8"), ("packed", np.uint8, (nbytes,))])
    body = data[_HEADER.size:]
    if len(body) != n * rec.itemsize:
        raise ValueError(f"{path}: expected {n} records of {rec.itemsize} bytes, got {len(body)} bytes")
    arr = np.frombuffer(body, dtype=rec, count=n)
    packed = arr["packed"].reshape(n, nbytes)
    return _unpack(packed, b), arr["id"].astype(np.int64)
