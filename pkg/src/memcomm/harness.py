"""Experiment driver: configuration, sweeps, mask comparisons and symbol accounting.

Every run is described by an :class:`ExperimentConfig` (JSON on disk) and
emits :class:`ResultRow` records as CSV plus a JSON run manifest that
carries the configuration and the checkpoint hashes.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from . import adaptive
from . import channel as ch
from . import checkpoint as ckpt
from . import data as D
from . import training as TR
from .codec import CodecConfig
from .evaluation import STRATEGIES, LinkConfig, accuracy
from .numerics import ParameterSet

COARSE_SNRS = (-6.0, 0.0, 6.0, 12.0, 18.0)
BASELINE_CODED_BITS = 760
# (minimum SNR in dB, bits per symbol), highest qualifying entry wins
AMC_SCHEDULES = {
    "awgn": ((-math.inf, 1), (6.0, 2), (12.0, 3), (18.0, 4)),
    "rician": ((-math.inf, 1), (6.0, 2), (12.0, 3)),
}
PROFILES = {"desk": TR.DESK_PROFILE, "full": TR.FULL_PROFILE}
CHECKPOINT_ROLES = ("codec", "separate", "importance", "consecutive")
DESK_CODEC = {"width": 32, "symbols": 32, "encoder_steps": 2, "decoder_steps": 2, "heads": 4, "memory": 10,
              "importance_width": 16, "importance_heads": 2}


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration


@dataclass
class ExperimentConfig:
    """One experiment; ``dataset=None`` uses the built-in task-1 story generator."""

    dataset: str | None = None
    tasks: list = field(default_factory=lambda: [1])
    generate_stories: int = 2000
    data_seed: int = 0
    channel: str = "awgn"
    csi_error: float = 0.0
    rician_r: float = ch.DEFAULT_RICIAN_R
    snr_grid: list = field(default_factory=lambda: list(COARSE_SNRS))
    seeds: list = field(default_factory=lambda: [0])
    codec: dict = field(default_factory=lambda: dict(DESK_CODEC))
    profile: str | dict = "desk"
    train_seed: int = 0
    strategy: str = "none"
    budget_source: str = "fixed"
    budgets: list = field(default_factory=list)
    link_budget: dict = field(default_factory=dict)
    checkpoints: dict = field(default_factory=dict)
    half_checkpoint: str | None = None
    split: str = "test"
    workers: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.channel not in ch.KINDS:
            raise ConfigError(f"channel must be one of {ch.KINDS}, got {self.channel!r}")
        if self.csi_error < 0:
            raise ConfigError("csi_error must be nonnegative")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}")
        if self.budget_source not in ("fixed", "planner"):
            raise ConfigError("budget_source must be 'fixed' or 'planner'")
        if self.split not in ("train", "validation", "test"):
            raise ConfigError("split must be train, validation or test")
        if not self.seeds or not self.snr_grid:
            raise ConfigError("seeds and snr_grid must be non-empty")
        if any(s is not None and not math.isfinite(s) for s in self.snr_grid):
            raise ConfigError("snr_grid entries must be finite numbers or null (noiseless)")
        if any(int(b) < 1 for b in self.budgets):
            raise ConfigError("budgets must be positive")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if isinstance(self.profile, str) and self.profile not in PROFILES:
            raise ConfigError(f"profile must be one of {sorted(PROFILES)} or an explicit mapping")
        unknown = set(self.checkpoints) - set(CHECKPOINT_ROLES)
        if unknown:
            raise ConfigError(f"unknown checkpoint roles {sorted(unknown)}")
        allowed = {f.name for f in fields(CodecConfig)} - {"vocab_size", "n_answers"}
        bad = set(self.codec) - allowed
        if bad:
            raise ConfigError(f"codec section has unsupported keys {sorted(bad)}")
        adaptive.LinkBudget(**self.link_budget)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys {sorted(extra)}")
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as err:
            raise ConfigError(f"{path}: invalid JSON ({err})") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        # worker count changes scheduling only, never results
        d = {k: v for k, v in self.to_dict().items() if k != "workers"}
        canon = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]

    def train_profile(self) -> TR.TrainProfile:
        if isinstance(self.profile, str):
            return PROFILES[self.profile]
        return TR.TrainProfile.from_dict(self.profile)

    def link_budget_obj(self) -> adaptive.LinkBudget:
        return adaptive.LinkBudget(**self.link_budget)


# ---------------------------------------------------------------------------
# data


def load_episodes(cfg: ExperimentConfig) -> list[D.Episode]:
    if cfg.dataset is None:
        return D.parse_babi(D.generate_task1(cfg.generate_stories, cfg.data_seed))
    path = Path(cfg.dataset)
    if path.is_file():
        return D.load_babi(path)
    if not path.is_dir():
        raise FileNotFoundError(f"dataset {path} not found")
    episodes = []
    for t in cfg.tasks:
        files = sorted(path.glob(f"qa{int(t)}_*_train.txt"))
        if not files:
            raise FileNotFoundError(f"no qa{t}_*_train.txt under {path}")
        episodes.extend(D.load_babi(files[0]))
    return episodes


@dataclass
class Corpus:
    vocab: D.Vocabulary
    train: D.EncodedSet
    validation: D.EncodedSet
    test: D.EncodedSet

    def part(self, name: str) -> D.EncodedSet:
        return getattr(self, name)


def build_corpus(cfg: ExperimentConfig, vocab: D.Vocabulary | None = None, memory: int = 10) -> Corpus:
    tr, va, te = D.split(load_episodes(cfg), cfg.data_seed)
    vocab = vocab or D.build_vocab(tr)
    enc = lambda eps: D.encode_episodes(eps, vocab, memory)  # noqa: E731
    return Corpus(vocab, enc(tr), enc(va), enc(te))


def codec_config(cfg: ExperimentConfig, vocab: D.Vocabulary) -> CodecConfig:
    return CodecConfig(vocab_size=vocab.size, n_answers=vocab.n_answers, **cfg.codec)


# ---------------------------------------------------------------------------
# checkpoints with model metadata


def model_echo(codec: CodecConfig, vocab: D.Vocabulary, role: str, exp: ExperimentConfig | None = None) -> dict:
    echo = {"role": role, "codec": codec.to_dict(),
            "vocab": {"tokens": vocab.tokens, "answers": vocab.answers}, "package_version": __version__}
    if exp is not None:
        echo["experiment"] = exp.to_dict()
    return echo


@dataclass
class LoadedModel:
    params: ParameterSet
    codec: CodecConfig
    vocab: D.Vocabulary
    digest: str


def load_model(path: str | Path) -> LoadedModel:
    params, echo = ckpt.load_checkpoint(path)
    try:
        codec = CodecConfig(**echo["codec"])
        vocab = D.Vocabulary(echo["vocab"]["tokens"], echo["vocab"]["answers"])
    except (KeyError, TypeError) as err:
        raise ckpt.CheckpointError(f"{path}: checkpoint lacks model metadata ({err})") from None
    return LoadedModel(params, codec, vocab, ckpt.file_hash(path))


def save_outputs(out: dict, codec: CodecConfig, vocab: D.Vocabulary, out_dir: str | Path,
                 exp: ExperimentConfig | None = None) -> dict:
    """Write each trained parameter set as ``<role>.ckpt``; returns role -> file hash."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    hashes = {}
    for role in CHECKPOINT_ROLES:
        if role in out:
            hashes[role] = ckpt.save_checkpoint(out[role], model_echo(codec, vocab, role, exp),
                                                out_dir / f"{role}.ckpt")
    return hashes


def run_training(cfg: ExperimentConfig, out_dir: str | Path, stages=None, log_path=None) -> dict:
    stages = tuple(stages or ("semantic", "jsc", "whole", "importance", "consecutive"))
    corpus = build_corpus(cfg, memory=cfg.codec.get("memory", 10))
    codec = codec_config(cfg, corpus.vocab)
    log = TR.TrainLog(path=str(log_path) if log_path else None)
    out = TR.train_pipeline(codec, corpus.train, cfg.train_profile(), cfg.train_seed, cfg.channel,
                            corpus.validation, log, stages)
    hashes = save_outputs(out, codec, corpus.vocab, out_dir, cfg)
    return {"hashes": hashes, "log": log}


# ---------------------------------------------------------------------------
# results


@dataclass(frozen=True)
class ResultRow:
    strategy: str
    channel: str
    csi: float
    snr_db: float | None
    budget: int
    accuracy: float
    symbols: int
    seed: int
    config_hash: str = ""
    checkpoint_hash: str = ""

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 1.0:
            raise ValueError(f"accuracy {self.accuracy} outside [0, 1]")

    def as_csv(self) -> dict:
        d = asdict(self)
        d["snr_db"] = "inf" if self.snr_db is None else f"{self.snr_db:g}"
        d["accuracy"] = f"{self.accuracy:.6f}"
        return d


RESULT_FIELDS = [f.name for f in fields(ResultRow)]


def write_rows(rows: list[ResultRow], path: str | Path, manifest: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=RESULT_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow(r.as_csv())
    if manifest is not None:
        path.with_suffix(".json").write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    return path


def read_rows(path: str | Path) -> list[ResultRow]:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for d in csv.DictReader(fh):
            out.append(ResultRow(d["strategy"], d["channel"], float(d["csi"]),
                                 None if d["snr_db"] == "inf" else float(d["snr_db"]), int(d["budget"]),
                                 float(d["accuracy"]), int(d["symbols"]), int(d["seed"]),
                                 d["config_hash"], d["checkpoint_hash"]))
    return out


def run_manifest(cfg: ExperimentConfig, command: str, hashes: dict) -> dict:
    return {"command": command, "config": cfg.to_dict(), "config_hash": cfg.digest(),
            "checkpoints": hashes, "package_version": __version__}


# ---------------------------------------------------------------------------
# evaluation grid


@dataclass(frozen=True)
class GridPoint:
    label: str
    strategy: str
    role: str
    snr_db: float | None
    budget: int | None
    seed: int


@dataclass
class EvalContext:
    cfg: ExperimentConfig
    models: dict
    data: D.EncodedSet


_WORKER: EvalContext | None = None


def _init_worker(ctx: EvalContext) -> None:
    global _WORKER
    _WORKER = ctx


def _eval_point(point: GridPoint, ctx: EvalContext | None = None) -> ResultRow:
    ctx = ctx or _WORKER
    cfg = ctx.cfg
    model = ctx.models[point.role]
    importance = ctx.models["importance"].params if point.strategy == "importance" else None
    link = LinkConfig(cfg.channel, point.snr_db, cfg.csi_error, cfg.rician_r)
    acc = accuracy(model.params, model.codec, ctx.data, link, point.seed, strategy=point.strategy,
                   budget=point.budget, importance=importance)
    symbols = model.codec.symbols if point.budget is None else min(point.budget, model.codec.symbols)
    return ResultRow(point.label, cfg.channel, cfg.csi_error, point.snr_db, symbols, acc, symbols,
                     point.seed, cfg.digest(), ctx.models["codec"].digest)


def evaluate_grid(ctx: EvalContext, points: list[GridPoint], workers: int = 1) -> list[ResultRow]:
    """Rows in grid order; parallel runs give the same rows as serial ones."""
    if workers <= 1 or len(points) < 2:
        return [_eval_point(p, ctx) for p in points]
    with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker, initargs=(ctx,)) as pool:
        return list(pool.map(_eval_point, points))


def _load_models(cfg: ExperimentConfig, roles) -> dict:
    models = {}
    for role in {"codec", *roles}:
        path = cfg.checkpoints.get(role)
        if path is None:
            raise FileNotFoundError(f"config has no '{role}' checkpoint")
        models[role] = load_model(path)
    return models


def _context(cfg: ExperimentConfig, models: dict) -> EvalContext:
    base = models["codec"]
    corpus = build_corpus(cfg, base.vocab, base.codec.memory)
    return EvalContext(cfg, models, corpus.part(cfg.split))


def budget_for(cfg: ExperimentConfig, snr_db: float | None, symbols: int) -> int | None:
    if cfg.budget_source == "planner":
        b = cfg.link_budget_obj()
        noise = 0.0 if snr_db is None else ch.snr_to_noise_var(snr_db)
        return min(adaptive.plan_length(adaptive.LinkBudget(b.length, b.peak_power, b.model_noise, noise,
                                                            b.max_length)), symbols)
    return cfg.budgets[0] if cfg.budgets else None


def run_accuracy_sweep(cfg: ExperimentConfig) -> list[ResultRow]:
    """One row per (SNR, seed) for the configured channel, CSI and mask strategy."""
    roles = {"codec"}
    if cfg.strategy == "importance":
        roles.add("importance")
    role = "consecutive" if cfg.strategy == "consecutive" and "consecutive" in cfg.checkpoints else "codec"
    roles.add(role)
    models = _load_models(cfg, sorted(roles))
    ctx = _context(cfg, models)
    symbols = models["codec"].codec.symbols
    points = [GridPoint(cfg.strategy, cfg.strategy, role, snr, budget_for(cfg, snr, symbols), seed)
              for snr in cfg.snr_grid for seed in cfg.seeds]
    return evaluate_grid(ctx, points, cfg.workers)


def run_mask_comparison(cfg: ExperimentConfig) -> list[ResultRow]:
    """Rows for the unmasked codec(s) and every mask strategy across budgets and SNRs.

    Labels: ``none@L``, ``none@L/2`` (only with ``half_checkpoint``),
    ``importance``, ``consecutive`` and ``random``.
    """
    roles = ["codec", "importance"] + (["consecutive"] if "consecutive" in cfg.checkpoints else [])
    models = _load_models(cfg, roles)
    if cfg.half_checkpoint:
        models["half"] = load_model(cfg.half_checkpoint)
    ctx = _context(cfg, models)
    L = models["codec"].codec.symbols
    cons_role = "consecutive" if "consecutive" in models else "codec"
    points = []
    for snr in cfg.snr_grid:
        budgets = [budget_for(cfg, snr, L)] if cfg.budget_source == "planner" else (cfg.budgets or [L // 2])
        for seed in cfg.seeds:
            points.append(GridPoint("none@L", "none", "codec", snr, None, seed))
            if "half" in models:
                points.append(GridPoint("none@L/2", "none", "half", snr, None, seed))
            for b in budgets:
                points.append(GridPoint("importance", "importance", "codec", snr, b, seed))
                points.append(GridPoint("consecutive", "consecutive", cons_role, snr, b, seed))
                points.append(GridPoint("random", "random", "codec", snr, b, seed))
    return evaluate_grid(ctx, points, cfg.workers)


# ---------------------------------------------------------------------------
# symbol accounting


def modulation_symbols(coded_bits: int, bits_per_symbol: int) -> int:
    if coded_bits <= 0 or bits_per_symbol <= 0:
        raise ValueError("coded bits and bits per symbol must be positive")
    return int(math.floor(coded_bits / bits_per_symbol + 0.5))


def amc_bits_per_symbol(kind: str, snr_db: float) -> int:
    schedule = AMC_SCHEDULES.get(kind)
    if schedule is None:
        raise ValueError(f"no AMC schedule for channel {kind!r}")
    return max(bps for threshold, bps in schedule if snr_db >= threshold)


MODULATION_NAMES = {1: "BPSK", 2: "4QAM", 3: "8QAM", 4: "16QAM"}


def symbol_table(snr_grid=COARSE_SNRS, budget: adaptive.LinkBudget | None = None, fixed: int = 32,
                 coded_bits: int = BASELINE_CODED_BITS) -> list[dict]:
    """Transmitted symbols per sentence for each method at each SNR."""
    budget = budget or adaptive.LinkBudget(max_length=fixed)
    rows = [{"method": "mem-deepsc", **{s: fixed for s in snr_grid}}]
    rows.append({"method": "dynamic", **{s: adaptive.plan_for_snr(s, budget.length, budget.peak_power,
                                                                  budget.model_noise, budget.max_length)
                                         for s in snr_grid}})
    rows.append({"method": "utf8-turbo", **{s: modulation_symbols(coded_bits, 4) for s in snr_grid}})
    for kind in ("awgn", "rician"):
        rows.append({"method": f"utf8-turbo-amc-{kind}",
                     **{s: modulation_symbols(coded_bits, amc_bits_per_symbol(kind, s)) for s in snr_grid}})
    return rows


def write_table(rows: list[dict], snr_grid, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["method"] + [f"{s:g}" for s in snr_grid])
        for r in rows:
            w.writerow([r["method"]] + [r[s] for s in snr_grid])
    return path


def plan_rows(snr_grid, budget: adaptive.LinkBudget) -> list[dict]:
    out = []
    for s in snr_grid:
        b = adaptive.LinkBudget(budget.length, budget.peak_power, budget.model_noise,
                                ch.snr_to_noise_var(s), budget.max_length)
        out.append({"snr_db": s, "noise_var": b.channel_noise, "real_length": adaptive.planned_length_real(b),
                    "planned_length": adaptive.plan_length(b)})
    return out


def mean_accuracy(rows: list[ResultRow], **match) -> float:
    sel = [r.accuracy for r in rows if all(getattr(r, k) == v for k, v in match.items())]
    if not sel:
        raise ValueError(f"no rows match {match}")
    return float(np.mean(sel))
