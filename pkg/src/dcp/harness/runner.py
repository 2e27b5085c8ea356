"""Training, evaluation, ablations and the shift ladder."""
from __future__ import annotations

import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ..container import load_encoders, save_bank, save_encoders
from ..encoders import DualEncoder, init_dual_encoder
from ..objective import forward_logits, loss_and_grads
from ..prompts import PromptBank, bank_param_count, init_bank
from ..synthdata import Dataset, apply_shift, build, sample_few_shot
from .config import RunConfig, encoder_key, resolve
from .pretrain import pretrain_lite

log = logging.getLogger(__name__)

EVAL_CHUNK = 64


def default_cache_dir() -> Path:
    return Path(os.environ.get("DCP_CACHE_DIR", Path.home() / ".cache" / "dcp"))


def get_encoders(cfg: RunConfig, cache_dir=None) -> DualEncoder:
    """Pretrain-lite encoders for ``cfg``, memoised on disk by a config hash."""
    cache = Path(cache_dir) if cache_dir is not None else default_cache_dir()
    path = cache / f"encoders-{encoder_key(cfg)}.dcpw"
    if path.exists():
        return load_encoders(path)
    p = cfg.pretrain
    log.info("pretraining encoders (%d steps); cached at %s", p.steps, path)
    base = init_dual_encoder(cfg.vision, cfg.text, cfg.encoder_seed)
    if p.steps > 0:
        enc = pretrain_lite(base, cfg.data, steps=p.steps, batch=p.batch, lr=p.lr, tau=cfg.tau, seed=p.seed,
                            slot_len=p.slot_len, lr_warmup=p.warmup, clip=p.clip)
    else:
        enc = base
    cache.mkdir(parents=True, exist_ok=True)
    save_encoders(enc, path)
    return load_encoders(path)  # identical bits whether or not the cache was warm


def evaluate(bank: PromptBank, encoders: DualEncoder, patches: np.ndarray, labels, class_tokens,
             tau: float = 0.07) -> float:
    """Top-1 accuracy; ``argmax`` ties go to the lowest class index."""
    hits = 0
    for i in range(0, len(patches), EVAL_CHUNK):
        logits = forward_logits(bank, encoders, patches[i:i + EVAL_CHUNK], class_tokens, tau).data
        hits += int(np.sum(np.argmax(logits, axis=1) == np.asarray(labels[i:i + EVAL_CHUNK])))
    return hits / len(patches)


@dataclass
class SeedResult:
    seed: int
    epoch_losses: list
    accuracy: float | None
    status: str = "ok"
    bank: PromptBank | None = field(default=None, repr=False)


@dataclass
class RunResult:
    label: str
    method: str
    shots: int
    n_params: int
    seeds: list
    wall_clock: float = 0.0

    @property
    def accuracies(self) -> list[float]:
        return [s.accuracy for s in self.seeds if s.status == "ok"]

    @property
    def mean(self) -> float:
        acc = self.accuracies
        return float(np.mean(acc)) if acc else float("nan")

    @property
    def std(self) -> float:
        acc = self.accuracies
        return float(np.std(acc)) if acc else float("nan")


def train_seed(cfg: RunConfig, encoders: DualEncoder, ds: Dataset, seed: int) -> SeedResult:
    bank = init_bank(cfg.method, cfg.prompt, encoders, seed)
    losses: list[float] = []
    if cfg.method != "zero_shot":
        task = sample_few_shot(ds, cfg.shots, seed)
        idx = np.asarray(task.train_indices)
        rng = np.random.default_rng([seed, 3])
        velocity = {k: np.zeros_like(v) for k, v in bank.arrays.items()}
        for epoch in range(cfg.epochs):
            order = rng.permutation(idx)
            batch_losses = []
            for i in range(0, len(order), cfg.batch_size):
                b = order[i:i + cfg.batch_size]
                loss, grads = loss_and_grads(ds.train_patches[b], ds.train_labels[b], bank, encoders,
                                             ds.class_tokens, cfg.tau)
                if not np.isfinite(loss):
                    log.warning("seed %d diverged in epoch %d", seed, epoch + 1)
                    return SeedResult(seed, losses, None, "diverged")
                batch_losses.append(loss)
                for k, g in grads.items():
                    velocity[k] = cfg.momentum * velocity[k] + g
                    bank.arrays[k] = bank.arrays[k] - cfg.learning_rate * velocity[k]
            losses.append(float(np.mean(batch_losses)))
            log.debug("seed %d epoch %d loss %.4f", seed, epoch + 1, losses[-1])
    acc = evaluate(bank, encoders, ds.test_patches, ds.test_labels, ds.class_tokens, cfg.tau)
    return SeedResult(seed, losses, acc, "ok", bank)


def _map(cfg: RunConfig, fn, items):
    if cfg.workers > 1:
        with ThreadPoolExecutor(cfg.workers) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def train(cfg: RunConfig, encoders: DualEncoder, ds: Dataset, label: str | None = None) -> RunResult:
    """All seeds of one configuration.  Results are ordered by seed whatever the worker count."""
    cfg = resolve(cfg)
    t0 = time.perf_counter()
    seeds = _map(cfg, lambda s: train_seed(cfg, encoders, ds, s), cfg.seeds)
    n = bank_param_count(cfg.method, cfg.prompt, cfg.text.model_dim, cfg.vision.model_dim)
    res = RunResult(label or cfg.method, cfg.method, cfg.shots, n, seeds, time.perf_counter() - t0)
    log.info("%s shots=%d mean acc %.4f", res.label, cfg.shots, res.mean)
    return res


def dataset_for(cfg: RunConfig) -> Dataset:
    return build(cfg.data, cfg.data_seed)


def sweep(cfg: RunConfig, encoders: DualEncoder, ds: Dataset, label: str | None = None) -> list[RunResult]:
    return [train(replace(cfg, shots=s), encoders, ds, label) for s in cfg.shot_list]


def ablate_fusion(cfg: RunConfig, encoders: DualEncoder, ds: Dataset, modes=("avg", "max", "first")):
    out = []
    for mode in modes:
        c = replace(cfg, method="dcp", prompt=replace(cfg.prompt, fusion_mode=mode))
        out += sweep(c, encoders, ds, label=mode)
    return out


def ablate_param_sharing(cfg: RunConfig, encoders: DualEncoder, ds: Dataset):
    out = []
    for share, label in ((True, "w/PS"), (False, "w/oPS")):
        c = replace(cfg, method="dcp", prompt=replace(cfg.prompt, share_params=share))
        out += sweep(c, encoders, ds, label=label)
    return out


@dataclass
class ShiftResult:
    source: RunResult
    levels: list        # [(angle, noise_mult, [acc per seed])]

    @property
    def ood_average(self) -> float:
        """Mean target accuracy over the non-identity shift levels."""
        vals = [np.mean(a) for ang, mult, a in self.levels if not (ang == 0 and mult == 1)]
        return float(np.mean(vals)) if vals else float("nan")


def domain_shift_eval(cfg: RunConfig, encoders: DualEncoder, ds: Dataset) -> ShiftResult:
    """Train on the source task, then score each seed's bank on every shifted copy of the test split."""
    cfg = replace(cfg, epochs=cfg.shift.epochs, prompt=replace(cfg.prompt, M=cfg.shift.M))
    source = train(cfg, encoders, ds)
    levels = []
    for angle, mult in zip(cfg.shift.angles, cfg.shift.noise_mults):
        target = apply_shift(ds, angle, mult)
        accs = [evaluate(s.bank, encoders, target.test_patches, target.test_labels, target.class_tokens, cfg.tau)
                if s.status == "ok" else float("nan") for s in source.seeds]
        levels.append((float(angle), float(mult), accs))
    return ShiftResult(source, levels)


def save_banks(results, out_dir) -> None:
    out = Path(out_dir) / "banks"
    out.mkdir(parents=True, exist_ok=True)
    for r in results:
        for s in r.seeds:
            if s.bank is not None:
                save_bank(s.bank, out / f"{r.label.replace('/', '')}-shots{r.shots}-seed{s.seed}.dcpw")
