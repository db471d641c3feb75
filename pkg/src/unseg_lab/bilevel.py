"""Alternating min-min training of the noise generator against a surrogate.

Each round trains the surrogate for ``surrogate_epochs_per_round`` epochs on
noisy images (generator frozen), then the noise tokens and noise head for
``generator_epochs_per_round`` epochs (surrogate frozen). Both minimise the
same pixel-wise BCE; the generator phase optionally targets the all-ones map
(label modification) and both use the train-mode budget eps / v.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import DatasetManifest, atomic_write_bytes, load_split
from .datagen import PROMPT_KINDS, prompt_from_label
from .noisegen import NoiseBudget, NoiseGenerator, apply_noise, prompt_region
from .segmodel import PromptableSegModel, SegConfig, load_checkpoint, save_checkpoint, seg_loss

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class BilevelConfig:
    total_epochs: int = 12
    surrogate_epochs_per_round: int = 1
    generator_epochs_per_round: int = 3
    batch_size: int = 16
    learning_rate: float = 1e-4
    lr_decay_epoch: int = 8
    lr_decay_factor: float = 0.1
    eps_target: float = 8 / 255
    eps_unrelated: float = 2 / 255
    train_scale: int = 4
    label_mod: bool = True
    prompt_kinds: tuple[str, ...] = PROMPT_KINDS
    pretrain_epochs: int = 6
    pretrain_lr: float = 1e-3
    image_size: int = 64
    dim: int = 64
    depth: int = 4
    seed: int = 0

    def __post_init__(self):
        self.prompt_kinds = tuple(self.prompt_kinds)
        if self.surrogate_epochs_per_round < 1 or self.generator_epochs_per_round < 1:
            raise ValueError("epochs per round must be positive")
        if self.total_epochs < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ValueError("invalid bilevel configuration")
        bad = set(self.prompt_kinds) - set(PROMPT_KINDS)
        if bad or not self.prompt_kinds:
            raise ValueError(f"invalid prompt kinds {sorted(bad)}")
        self.budget  # validates the budget fields

    @property
    def epochs_per_round(self) -> int:
        return self.surrogate_epochs_per_round + self.generator_epochs_per_round

    @property
    def rounds(self) -> int:
        return self.total_epochs // self.epochs_per_round

    @property
    def budget(self) -> NoiseBudget:
        return NoiseBudget(self.eps_target, self.eps_unrelated, self.train_scale)

    def seg_config(self) -> SegConfig:
        return SegConfig(image_size=self.image_size, dim=self.dim, depth=self.depth)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["prompt_kinds"] = list(self.prompt_kinds)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BilevelConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown bilevel config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainLog:
    records: list[dict] = field(default_factory=list)
    wall_clock: float = 0.0

    FIELDS = ("round", "phase", "epoch", "step", "loss")

    def add(self, round_, phase, epoch, step, loss):
        self.records.append({"round": round_, "phase": phase, "epoch": epoch, "step": step, "loss": loss})

    def losses(self, phase: str, round_: int | None = None) -> list[float]:
        return [r["loss"] for r in self.records if r["phase"] == phase and (round_ is None or r["round"] == round_)]

    def next_step(self, phase: str) -> int:
        steps = [r["step"] for r in self.records if r["phase"] == phase]
        return steps[-1] + 1 if steps else 0

    def to_csv(self, path) -> None:
        import io

        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=self.FIELDS, lineterminator="\n")
        w.writeheader()
        for r in self.records:
            w.writerow({**r, "loss": repr(float(r["loss"]))})
        atomic_write_bytes(Path(path), buf.getvalue().encode("utf-8"))

    @classmethod
    def from_csv(cls, path) -> "TrainLog":
        out = cls()
        with open(path, newline="") as fh:
            for r in csv.DictReader(fh):
                out.add(int(r["round"]), r["phase"], int(r["epoch"]), int(r["step"]), float(r["loss"]))
        return out


class IISTensors:
    """IIS split held in memory with every prompt kind precomputed from the labels."""

    def __init__(self, images: np.ndarray, labels: np.ndarray):
        self.images = torch.from_numpy(np.ascontiguousarray(images.transpose(0, 3, 1, 2)))
        self.labels = torch.from_numpy(labels.astype(np.float32))
        prompts, regions = [], []
        for lab in labels:
            ps = [prompt_from_label(lab, 1, k) for k in PROMPT_KINDS]
            prompts.append(np.stack([p.mask for p in ps]))
            regions.append(np.stack([prompt_region(p) for p in ps]))
        self.prompts = torch.from_numpy(np.stack(prompts).astype(np.float32))  # N, K, H, W
        self.regions = torch.from_numpy(np.stack(regions))

    @classmethod
    def from_manifest(cls, manifest: DatasetManifest, split: str = "train") -> "IISTensors":
        arrays = load_split(manifest, split)
        return cls(arrays.images, (arrays.labels > 0).astype(np.int64))

    def __len__(self):
        return self.images.shape[0]

    def batches(self, batch_size: int, seed: int, epoch: int, kinds: tuple[str, ...]):
        g = torch.Generator().manual_seed(int(seed) * 100_003 + epoch)
        order = torch.randperm(len(self), generator=g)
        allowed = torch.tensor([PROMPT_KINDS.index(k) for k in kinds])
        choice = allowed[torch.randint(len(allowed), (len(self),), generator=g)]
        for i in range(0, len(self), batch_size):
            idx = order[i : i + batch_size]
            k = choice[idx]
            yield (self.images[idx], self.prompts[idx, k], self.regions[idx, k], self.labels[idx])


def _set_lr(opt, lr):
    for g in opt.param_groups:
        g["lr"] = lr


def _check_finite(loss, phase):
    if not math.isfinite(loss):
        raise TrainingDiverged(f"non-finite loss in {phase} phase; lower the learning rate or check the data")


def pretrain_core(core: PromptableSegModel, data: IISTensors, cfg: BilevelConfig, log_: TrainLog | None = None):
    """Clean IIS training of the generator core before it is frozen."""
    opt = torch.optim.Adam(core.parameters(), lr=cfg.pretrain_lr)
    core.train()
    step = 0
    for epoch in range(cfg.pretrain_epochs):
        for x, p, _, y in data.batches(cfg.batch_size, cfg.seed + 7919, epoch, cfg.prompt_kinds):
            loss = seg_loss(core(x, p), y)
            opt.zero_grad()
            loss.backward()
            opt.step()
            val = loss.item()
            _check_finite(val, "pretrain")
            if log_ is not None:
                log_.add(0, "pretrain", epoch, step, val)
            step += 1
    core.eval()
    return core


def surrogate_phase(surrogate: PromptableSegModel, generator: NoiseGenerator, data: IISTensors,
                    cfg: BilevelConfig, opt, epoch: int, round_: int, log_: TrainLog) -> None:
    """One epoch on noisy images with the original labels; generator untouched."""
    budget = cfg.budget
    generator.eval()
    surrogate.train()
    step = log_.next_step("surrogate")
    for x, p, r, y in data.batches(cfg.batch_size, cfg.seed, epoch, cfg.prompt_kinds):
        with torch.no_grad():
            delta = generator(x, p, r, budget, "train")
        loss = seg_loss(surrogate(apply_noise(x, delta), p), y)
        opt.zero_grad()
        loss.backward()
        opt.step()
        val = loss.item()
        _check_finite(val, "surrogate")
        log_.add(round_, "surrogate", epoch, step, val)
        step += 1


def generator_phase(generator: NoiseGenerator, surrogate: PromptableSegModel, data: IISTensors,
                    cfg: BilevelConfig, opt, epoch: int, round_: int, log_: TrainLog) -> None:
    """One epoch updating noise tokens and head; surrogate frozen."""
    budget = cfg.budget
    surrogate.eval()
    flags = [p.requires_grad for p in surrogate.parameters()]
    for p in surrogate.parameters():
        p.requires_grad_(False)
    step = log_.next_step("generator")
    try:
        for x, p, r, y in data.batches(cfg.batch_size, cfg.seed, epoch, cfg.prompt_kinds):
            delta = generator(x, p, r, budget, "train")
            loss = seg_loss(surrogate(apply_noise(x, delta), p), y, label_mod=cfg.label_mod)
            opt.zero_grad()
            loss.backward()
            opt.step()
            val = loss.item()
            _check_finite(val, "generator")
            log_.add(round_, "generator", epoch, step, val)
            step += 1
    finally:
        for p, f in zip(surrogate.parameters(), flags):
            p.requires_grad_(f)


@dataclass
class BilevelResult:
    generator: NoiseGenerator
    surrogate: PromptableSegModel
    log: TrainLog
    checkpoint: Path | None


STATE_FILE = "bilevel_state.json"


def _save_state(out: Path, cfg, generator, surrogate, g_opt, s_opt, log_, rounds_done):
    save_checkpoint(out / "generator.ckpt", generator, seed=cfg.seed, step=rounds_done,
                    extra={"budget": asdict(cfg.budget), "label_mod": cfg.label_mod})
    save_checkpoint(out / "surrogate.ckpt", surrogate, seed=cfg.seed, step=rounds_done)
    torch.save({"generator": g_opt.state_dict(), "surrogate": s_opt.state_dict()}, out / "optimizers.pt")
    log_.to_csv(out / "train_log.csv")
    state = {"rounds_done": rounds_done, "config": cfg.to_dict()}
    atomic_write_bytes(out / STATE_FILE, json.dumps(state, indent=2, sort_keys=True).encode())


def run_bilevel(cfg: BilevelConfig, data: IISTensors, out: str | Path | None = None,
                resume: bool = False) -> BilevelResult:
    """Pretrain + freeze the generator core, then alternate the two phases for ``cfg.rounds`` rounds.

    With ``out`` set, state is persisted after every round; ``resume=True``
    continues from the last persisted round.
    """
    out = Path(out) if out is not None else None
    torch.manual_seed(cfg.seed)
    t0 = time.perf_counter()
    log_ = TrainLog()
    start_round = 0
    if resume and out is not None and (out / STATE_FILE).exists():
        state = json.loads((out / STATE_FILE).read_text())
        generator, _ = load_checkpoint(out / "generator.ckpt")
        surrogate, _ = load_checkpoint(out / "surrogate.ckpt")
        generator.freeze_core()
        log_ = TrainLog.from_csv(out / "train_log.csv")
        start_round = int(state["rounds_done"])
        opt_state = torch.load(out / "optimizers.pt")
    else:
        generator = NoiseGenerator(cfg.seg_config())
        pretrain_core(generator.core, data, cfg, log_)
        generator.freeze_core()
        torch.manual_seed(cfg.seed + 1)
        surrogate = PromptableSegModel(cfg.seg_config())
        opt_state = None
    g_opt = torch.optim.Adam(generator.trainable_parameters(), lr=cfg.learning_rate)
    s_opt = torch.optim.Adam(surrogate.parameters(), lr=cfg.learning_rate)
    if opt_state is not None:
        g_opt.load_state_dict(opt_state["generator"])
        s_opt.load_state_dict(opt_state["surrogate"])

    for rnd in range(start_round, cfg.rounds):
        epoch = rnd * cfg.epochs_per_round
        for _ in range(cfg.surrogate_epochs_per_round):
            lr = cfg.learning_rate * (cfg.lr_decay_factor if epoch >= cfg.lr_decay_epoch else 1.0)
            _set_lr(s_opt, lr)
            surrogate_phase(surrogate, generator, data, cfg, s_opt, epoch, rnd, log_)
            epoch += 1
        for _ in range(cfg.generator_epochs_per_round):
            lr = cfg.learning_rate * (cfg.lr_decay_factor if epoch >= cfg.lr_decay_epoch else 1.0)
            _set_lr(g_opt, lr)
            generator_phase(generator, surrogate, data, cfg, g_opt, epoch, rnd, log_)
            epoch += 1
        s_last = np.mean(log_.losses("surrogate", rnd)[-10:])
        g_last = np.mean(log_.losses("generator", rnd)[-10:])
        log.info("round %d/%d surrogate %.4f generator %.4f", rnd + 1, cfg.rounds, s_last, g_last)
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            _save_state(out, cfg, generator, surrogate, g_opt, s_opt, log_, rnd + 1)

    log_.wall_clock = time.perf_counter() - t0
    ckpt = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        _save_state(out, cfg, generator, surrogate, g_opt, s_opt, log_, cfg.rounds)
        ckpt = out / "generator.ckpt"
    generator.eval()
    return BilevelResult(generator, surrogate, log_, ckpt)
