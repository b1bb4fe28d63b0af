"""Complex baseband link: power normalization, block fading, AWGN, CSI error, equalization."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

KINDS = ("awgn", "rayleigh", "rician")
DEFAULT_RICIAN_R = 2.0
DEFAULT_CSI_ERROR = 0.05


class ChannelError(ValueError):
    pass


@dataclass(frozen=True)
class ChannelState:
    h: np.ndarray
    kind: str = "awgn"
    rician_r: float = DEFAULT_RICIAN_R


@dataclass(frozen=True)
class Link:
    """Everything random about one sentence transmission."""

    h: np.ndarray
    h_est: np.ndarray
    noise: np.ndarray


def stream(global_seed: int, episode: int, slot: int, *purpose: int) -> np.random.Generator:
    """Independent generator for one (episode, time slot) pair.

    Extra ``purpose`` integers derive side streams (e.g. random masks) that
    leave the channel draws untouched.
    """
    key = [int(global_seed), int(episode), int(slot), *map(int, purpose)]
    return np.random.default_rng(np.random.SeedSequence(key))


def pairs_to_complex(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x[..., 0] + 1j * x[..., 1]


def complex_to_pairs(x: np.ndarray) -> np.ndarray:
    return np.stack([x.real, x.imag], axis=-1)


def power_normalize(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.complex128)
    norm = np.linalg.norm(x)
    if norm == 0:
        raise ChannelError("cannot power-normalize an all-zero vector")
    return x * np.sqrt(x.size) / norm


def snr_to_noise_var(snr_db: float) -> float:
    return float(10.0 ** (-snr_db / 10.0))


def complex_normal(rng: np.random.Generator, size, var: float = 1.0) -> np.ndarray:
    scale = np.sqrt(var / 2.0)
    return rng.normal(0.0, scale, size) + 1j * rng.normal(0.0, scale, size)


def rician_moments(r: float) -> tuple[float, float]:
    """(mu_h, sigma_h) of a Rician coefficient with factor ``r``."""
    return float(np.sqrt(r / (r + 1.0))), float(np.sqrt(1.0 / (r + 1.0)))


def sample_channel(kind: str, length: int, rician_r: float = DEFAULT_RICIAN_R,
                   rng: np.random.Generator | None = None) -> ChannelState:
    if length < 1:
        raise ChannelError("length must be >= 1")
    kind = kind.lower()
    if kind == "awgn":
        return ChannelState(np.ones(length, dtype=np.complex128), kind, rician_r)
    if rng is None:
        raise ChannelError("fading channels need an rng")
    if kind == "rayleigh":
        return ChannelState(complex_normal(rng, length), kind, rician_r)
    if kind == "rician":
        if rician_r < 0:
            raise ChannelError("Rician factor must be nonnegative")
        mu, sigma = rician_moments(rician_r)
        return ChannelState(mu + complex_normal(rng, length, sigma ** 2), kind, rician_r)
    raise ChannelError(f"unknown channel kind {kind!r}")


def transmit(x: np.ndarray, state: ChannelState | np.ndarray, noise_var: float,
             rng: np.random.Generator | None = None, noise: np.ndarray | None = None) -> np.ndarray:
    h = state.h if isinstance(state, ChannelState) else np.asarray(state)
    x = np.asarray(x, dtype=np.complex128)
    if h.shape != x.shape:
        raise ChannelError(f"length mismatch: x {x.shape} vs h {h.shape}")
    if noise is None:
        noise = complex_normal(rng, x.shape, noise_var) if noise_var > 0 else np.zeros_like(x)
    return h * x + noise


def estimate_csi(state: ChannelState | np.ndarray, error_var: float,
                 rng: np.random.Generator | None = None) -> np.ndarray:
    h = state.h if isinstance(state, ChannelState) else np.asarray(state)
    if error_var < 0:
        raise ChannelError("CSI error variance must be nonnegative")
    if error_var == 0:
        return h.copy()
    return h + complex_normal(rng, h.shape, error_var)


def detect(y: np.ndarray, h_est: np.ndarray) -> np.ndarray:
    """Per-element zero-forcing: conj(h) * y / |h|^2."""
    y, h_est = np.asarray(y), np.asarray(h_est)
    if y.shape != h_est.shape:
        raise ChannelError("length mismatch between y and h_est")
    zero = np.flatnonzero(h_est == 0)
    if zero.size:
        raise ChannelError(f"estimated channel coefficient is zero at index {int(zero[0])}")
    return np.conj(h_est) * y / (h_est * np.conj(h_est)).real


def draw_link(kind: str, length: int, noise_var: float, csi_error: float,
              rng: np.random.Generator, rician_r: float = DEFAULT_RICIAN_R) -> Link:
    """One block-fading draw: channel, its estimate, and the additive noise."""
    state = sample_channel(kind, length, rician_r, rng)
    noise = complex_normal(rng, length, noise_var) if noise_var > 0 else np.zeros(length, complex)
    h_est = estimate_csi(state, csi_error, rng)
    return Link(state.h, h_est, noise)


def effective_gain(link: Link) -> tuple[np.ndarray, np.ndarray]:
    """(a, b) with detect(transmit(x)) == a * x + b, for use inside differentiable graphs."""
    denom = (link.h_est * np.conj(link.h_est)).real
    if np.any(denom == 0):
        raise ChannelError("estimated channel coefficient is zero")
    a = np.conj(link.h_est) * link.h / denom
    b = np.conj(link.h_est) * link.noise / denom
    return a, b
