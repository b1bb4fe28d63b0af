"""Bulk evaluation with reproducible per-(episode, slot) channel and mask streams."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import adaptive
from . import channel as ch
from .codec import CodecConfig, LinkBatch, encode_sentences, forward_batch, importance_graph
from .data import EncodedSet
from .numerics import ParameterSet

STRATEGIES = ("none", "importance", "consecutive", "random")
_MASK_STREAM = 7


@dataclass(frozen=True)
class LinkConfig:
    """Channel used for one evaluation; ``snr_db=None`` means a noiseless link."""

    kind: str = "awgn"
    snr_db: float | None = 18.0
    csi_error: float = 0.0
    rician_r: float = ch.DEFAULT_RICIAN_R

    @property
    def noise_var(self) -> float:
        return 0.0 if self.snr_db is None else ch.snr_to_noise_var(self.snr_db)


def slot_indices(data: EncodedSet) -> np.ndarray:
    """Time slot of every queue column plus the question (last column); -1 = empty."""
    t = data.context.shape[1]
    cols = np.arange(t)[None, :]
    first = (data.n_total - data.n_context)[:, None]
    slots = np.where(data.context >= 0, first + cols - (t - data.n_context)[:, None], -1)
    return np.concatenate([slots, data.n_total[:, None]], axis=1)


def draw_links(data: EncodedSet, cfg: CodecConfig, link: LinkConfig, seed: int,
               episode_offset: int = 0) -> LinkBatch:
    slots = slot_indices(data)
    b, s = slots.shape
    gain = np.ones((b, s, cfg.symbols), complex)
    offset = np.zeros((b, s, cfg.symbols), complex)
    for e in range(b):
        for j in range(s):
            if slots[e, j] < 0:
                continue
            rng = ch.stream(seed, episode_offset + e, slots[e, j])
            drawn = ch.draw_link(link.kind, cfg.symbols, link.noise_var, link.csi_error, rng, link.rician_r)
            gain[e, j], offset[e, j] = ch.effective_gain(drawn)
    return LinkBatch(gain, offset)


def random_keeps(data: EncodedSet, cfg: CodecConfig, budget: int, seed: int,
                 episode_offset: int = 0) -> np.ndarray:
    slots = slot_indices(data)[:, :-1]
    keep = np.ones(slots.shape + (cfg.symbols,))
    for e in range(slots.shape[0]):
        for j in range(slots.shape[1]):
            if slots[e, j] >= 0:
                rng = ch.stream(seed, episode_offset + e, slots[e, j], _MASK_STREAM)
                keep[e, j] = adaptive.random_keep(cfg.symbols, budget, rng)
    return keep


def make_keep(strategy: str, cfg: CodecConfig, budget: int | None, data: EncodedSet | None = None,
              seed: int = 0, importance: ParameterSet | None = None, episode_offset: int = 0):
    """Context mask for a strategy: None, an array, or a callable on the symbols."""
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown mask strategy {strategy!r}")
    if strategy == "none" or budget is None or budget >= cfg.symbols:
        return None
    if strategy == "consecutive":
        return adaptive.prefix_mask(cfg.symbols, budget)
    if strategy == "random":
        return random_keeps(data, cfg, budget, seed, episode_offset)
    if importance is None:
        raise ValueError("importance masking needs trained importance parameters")
    return lambda xc: adaptive.top_k_rows(importance_graph(importance, cfg, xc).value, budget)


def compute_logits(P: ParameterSet, cfg: CodecConfig, data: EncodedSet, link: LinkConfig | None = None,
                   seed: int = 0, strategy: str = "none", budget: int | None = None,
                   importance: ParameterSet | None = None, use_jsc: bool = True,
                   zero_memory: bool = False, temporal: bool = True, chunk: int = 500) -> np.ndarray:
    """Logits for every episode; ``link=None`` skips the channel (identity link)."""
    table = encode_sentences(P, cfg, data.sentences)
    out = []
    for start in range(0, len(data), chunk):
        part = data.subset(slice(start, start + chunk))
        links = None if link is None or not use_jsc else draw_links(part, cfg, link, seed, start)
        keep = make_keep(strategy, cfg, budget, part, seed, importance, start) if use_jsc else None
        logits = forward_batch(P, cfg, table, part.context, part.question, links, use_jsc, keep,
                               zero_memory=zero_memory, temporal=temporal)
        out.append(logits.value)
    return np.concatenate(out, axis=0)


def accuracy(P: ParameterSet, cfg: CodecConfig, data: EncodedSet, link: LinkConfig | None = None,
             seed: int = 0, **kwargs) -> float:
    logits = compute_logits(P, cfg, data, link, seed, **kwargs)
    return float(np.mean(np.argmax(logits, axis=1) == data.answer))
