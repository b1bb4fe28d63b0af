"""Symbol-budget planning and element masking for dynamic-length transmission."""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .numerics import Tensor, _sigmoid, straight_through


@dataclass(frozen=True)
class LinkBudget:
    """Inputs of the length planner.

    ``length`` is the shortest length that survives model noise alone;
    ``peak_power`` is the squared peak codeword magnitude.
    """

    length: int = 16
    peak_power: float = 1.0
    model_noise: float = 1.44
    channel_noise: float = 0.0
    max_length: int = 32

    def __post_init__(self):
        if min(self.length, self.peak_power, self.model_noise, self.channel_noise, self.max_length) < 0:
            raise ValueError("link budget entries must be nonnegative")
        if self.length > self.max_length:
            raise ValueError("base length exceeds the cap")


def codeword_capacity(length: float, peak_power: float, noise_var: float) -> float:
    """Codewords packable with non-overlapping noise spheres: (1 + mu^2/sigma^2)^(length/2)."""
    if noise_var <= 0:
        raise ValueError("noise variance must be positive")
    return (1.0 + peak_power / noise_var) ** (length / 2.0)


def planned_length_real(b: LinkBudget) -> float:
    if b.model_noise <= 0:
        raise ValueError("model noise variance must be positive")
    base = math.log1p(b.peak_power / b.model_noise)
    noisy = math.log1p(b.peak_power / (b.model_noise + b.channel_noise))
    return math.inf if noisy == 0 else b.length * base / noisy


def plan_length(b: LinkBudget) -> int:
    """Symbols needed once channel noise joins model noise, rounded and clamped to [L, L_max]."""
    real = planned_length_real(b)
    rounded = b.max_length if math.isinf(real) else int(math.floor(real + 0.5))
    return int(min(max(rounded, b.length), b.max_length))


def plan_for_snr(snr_db: float, length: int = 16, peak_power: float = 1.0,
                 model_noise: float = 1.44, max_length: int = 32) -> int:
    noise = 10.0 ** (-snr_db / 10.0)
    return plan_length(LinkBudget(length, peak_power, model_noise, noise, max_length))


def noise_free_length(n_codewords: float, peak_power: float, noise_var: float) -> float:
    """Length needed when model noise vanishes: 2 log N / log(1 + mu^2/sigma_n^2)."""
    if n_codewords <= 1 or noise_var <= 0 or peak_power <= 0:
        raise ValueError("need N > 1 and positive powers")
    return 2.0 * math.log(n_codewords) / math.log1p(peak_power / noise_var)


case3_length = noise_free_length


@dataclass(frozen=True)
class MaskPlan:
    mask: np.ndarray
    budget: int
    threshold: float | None = None
    scores: np.ndarray | None = None


def _top_k(scores: np.ndarray, k: int) -> np.ndarray:
    """0/1 mask of the k largest entries along the last axis; ties keep the lower index."""
    order = np.argsort(-scores, axis=-1, kind="stable")
    mask = np.zeros(scores.shape)
    np.put_along_axis(mask, order[..., :k], 1.0, axis=-1)
    return mask


def mask_for_budget(scores, budget: int) -> MaskPlan:
    scores = np.asarray(scores, dtype=np.float64)
    if not 1 <= budget <= scores.shape[-1]:
        raise ValueError(f"budget {budget} outside [1, {scores.shape[-1]}]")
    kappa = float(np.sort(scores)[::-1][budget - 1]) if scores.ndim == 1 else None
    return MaskPlan(_top_k(scores, budget).astype(np.int8), budget, kappa, scores)


def kth_largest(scores: np.ndarray, budget) -> np.ndarray:
    """Per-row threshold; ``budget`` may be an int or an array over leading axes."""
    srt = -np.sort(-scores, axis=-1)
    k = np.broadcast_to(np.asarray(budget), scores.shape[:-1]) - 1
    return np.take_along_axis(srt, k[..., None], axis=-1)


def top_k_rows(scores: np.ndarray, budget) -> np.ndarray:
    budget = np.broadcast_to(np.asarray(budget), scores.shape[:-1])
    order = np.argsort(-scores, axis=-1, kind="stable")
    ranks = np.empty_like(order)
    np.put_along_axis(ranks, order, np.arange(scores.shape[-1]), axis=-1)
    return (ranks < budget[..., None]).astype(np.float64)


def soft_k_max(scores: Tensor, budget, temperature: float = 1.0) -> Tensor:
    """Hard top-k mask forward, sigmoid((p - kappa)/temperature) derivative backward."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    p = scores.value
    hard = top_k_rows(p, budget)
    kappa = kth_largest(p, budget)
    s = _sigmoid((p - kappa) / temperature)
    return straight_through(hard, scores, s * (1.0 - s) / temperature)


def apply_mask(x, mask) -> np.ndarray:
    x, mask = np.asarray(x), np.asarray(mask)
    if x.shape != mask.shape:
        raise ValueError("signal and mask lengths differ")
    return x * mask


def consecutive_mask(x, budget: int) -> np.ndarray:
    x = np.asarray(x)
    if not 1 <= budget <= x.shape[-1]:
        raise ValueError(f"budget {budget} outside [1, {x.shape[-1]}]")
    return x * prefix_mask(x.shape[-1], budget)


def prefix_mask(length: int, budget) -> np.ndarray:
    budget = np.asarray(budget)
    return (np.arange(length) < budget[..., None]).astype(np.float64)


def random_mask(x, budget: int, rng: np.random.Generator) -> np.ndarray:
    x = np.asarray(x)
    return x * random_keep(x.shape[-1], budget, rng)


def random_keep(length: int, budget: int, rng: np.random.Generator, size=()) -> np.ndarray:
    if not 1 <= budget <= length:
        raise ValueError(f"budget {budget} outside [1, {length}]")
    return top_k_rows(rng.random(tuple(size) + (length,)), budget)


# ---------------------------------------------------------------------------
# wire format: [u16 L_max][u16 L1][bitmap LSB-first][L1 x (f32 re, f32 im)], little endian


@dataclass(frozen=True)
class MaskedFrame:
    values: np.ndarray
    bitmap: np.ndarray

    def __post_init__(self):
        if int(np.sum(self.bitmap)) != len(self.values):
            raise ValueError("bitmap popcount does not match the number of kept values")

    @property
    def length(self) -> int:
        return len(self.bitmap)

    def symbol_count(self) -> int:
        return len(self.values)

    def side_bytes(self) -> int:
        return math.ceil(self.length / 8)

    def to_bytes(self) -> bytes:
        bits = np.packbits(self.bitmap.astype(np.uint8), bitorder="little").tobytes()
        vals = np.empty(2 * len(self.values), dtype="<f4")
        vals[0::2] = self.values.real
        vals[1::2] = self.values.imag
        return struct.pack("<HH", self.length, len(self.values)) + bits + vals.tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "MaskedFrame":
        length, kept = struct.unpack_from("<HH", blob, 0)
        nbytes = math.ceil(length / 8)
        if len(blob) != 4 + nbytes + 8 * kept:
            raise ValueError("frame size does not match its header")
        bits = np.unpackbits(np.frombuffer(blob, np.uint8, nbytes, 4), count=length, bitorder="little")
        vals = np.frombuffer(blob, "<f4", 2 * kept, 4 + nbytes).astype(np.float64)
        return cls(vals[0::2] + 1j * vals[1::2], bits.astype(bool))


def pack_masked(x, mask) -> MaskedFrame:
    x, mask = np.asarray(x), np.asarray(mask).astype(bool)
    if x.shape != mask.shape:
        raise ValueError("signal and mask lengths differ")
    return MaskedFrame(x[mask].astype(np.complex128), mask.copy())


def unpack_masked(frame: MaskedFrame) -> np.ndarray:
    out = np.zeros(frame.length, dtype=np.complex128)
    out[frame.bitmap] = frame.values
    return out
