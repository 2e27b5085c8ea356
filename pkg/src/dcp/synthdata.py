"""Procedural image/text classification tasks and few-shot episodes.

A *world* (fixed by ``world_seed``) gives every name token a latent vector,
a linear renderer from latent space to a patch grid, and an orthonormal
basis used for latent rotations.  A class is a short sequence of name
tokens; its prototype is the normalised sum of their latents, and its
images are rendered prototypes plus Gaussian pixel noise.  Encoders
pretrained on random token combinations of the same world can therefore
score unseen classes zero-shot.

On-disk layout: ``<root>/<name>/{meta.json,train.jsonl,test.jsonl}``.  Each
jsonl line is one record::

    {"class": 3, "index": 17, "patches": "<base64 <f8>", "shape": [16, 12],
     "split": "train", "tokens": [21, 40]}
"""
from __future__ import annotations

import base64
import json
import os
from dataclasses import dataclass, asdict, replace
from functools import lru_cache
from pathlib import Path

import numpy as np

from .encoders import N_SPECIAL
from .numerics import ContractError


@dataclass(frozen=True)
class DatasetSpec:
    name: str = "synth"
    K: int = 8
    train_per_class: int = 32
    test_per_class: int = 32
    name_len: int = 2
    latent_dim: int = 16
    noise_std: float = 0.1
    n_patches: int = 16
    patch_dim: int = 12
    vocab_size: int = 64
    world_seed: int = 0
    shift_angle_deg: float = 0.0
    shift_noise_mult: float = 1.0

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.K * self.name_len > self.vocab_size - N_SPECIAL:
            raise ValueError(f"{self.K} classes x {self.name_len} tokens exceed the name vocabulary")
        if self.latent_dim % 2:
            raise ValueError("latent_dim must be even (rotations act on planes)")
        if self.noise_std < 0 or self.shift_noise_mult < 0:
            raise ValueError("noise parameters must be non-negative")
        if not (np.isfinite(self.shift_angle_deg) and np.isfinite(self.shift_noise_mult)):
            raise ValueError("shift parameters must be finite")


@dataclass
class Dataset:
    spec: DatasetSpec
    seed: int
    class_tokens: list[list[int]]
    train_patches: np.ndarray   # [n_train, P, patch_dim]
    train_labels: np.ndarray
    test_patches: np.ndarray
    test_labels: np.ndarray
    lsq_train_accuracy: float = float("nan")

    @property
    def n_train(self) -> int:
        return len(self.train_labels)

    @property
    def test_indices(self) -> np.ndarray:
        return np.arange(self.n_train, self.n_train + len(self.test_labels))


@dataclass(frozen=True)
class FewShotTask:
    shots: int
    seed: int
    train_indices: tuple[int, ...]   # global record indices, sorted within class
    test_indices: tuple[int, ...]


# ---------------------------------------------------------------------------
# world

@dataclass(frozen=True)
class World:
    token_latents: np.ndarray   # [vocab, latent_dim]
    renderer: np.ndarray        # [latent_dim, n_patches * patch_dim]
    basis: np.ndarray           # [latent_dim, latent_dim], orthonormal


@lru_cache(maxsize=16)
def make_world(world_seed: int, vocab_size: int, latent_dim: int, n_patches: int, patch_dim: int) -> World:
    rng = np.random.default_rng([world_seed, 101])
    lat = rng.normal(size=(vocab_size, latent_dim))
    lat[:N_SPECIAL] = 0.0
    render = rng.normal(0.0, 1.0 / np.sqrt(latent_dim), size=(latent_dim, n_patches * patch_dim))
    q, _ = np.linalg.qr(rng.normal(size=(latent_dim, latent_dim)))
    for a in (lat, render, q):
        a.setflags(write=False)
    return World(lat, render, q)


def world_for(spec: DatasetSpec) -> World:
    return make_world(spec.world_seed, spec.vocab_size, spec.latent_dim, spec.n_patches, spec.patch_dim)


def prototypes(world: World, class_tokens) -> np.ndarray:
    toks = np.asarray(class_tokens, dtype=np.int64)
    return world.token_latents[toks].sum(axis=1) / np.sqrt(toks.shape[1])


def rotate(world: World, z: np.ndarray, angle_deg: float) -> np.ndarray:
    """Rotate every latent by ``angle_deg`` within the planes of the world basis.

    Written as ``z + Q (B - I) Q^T z`` so a zero angle returns ``z`` bit for bit.
    """
    th = np.deg2rad(angle_deg)
    c, s = np.cos(th) - 1.0, np.sin(th)
    coords = z @ world.basis
    delta = np.empty_like(coords)
    delta[:, 0::2] = c * coords[:, 0::2] - s * coords[:, 1::2]
    delta[:, 1::2] = s * coords[:, 0::2] + c * coords[:, 1::2]
    return z + delta @ world.basis.T


def render(world: World, z: np.ndarray, noise: np.ndarray, n_patches: int, patch_dim: int) -> np.ndarray:
    return (z @ world.renderer + noise).reshape(len(z), n_patches, patch_dim)


def sample_pairs(world: World, spec: DatasetSpec, rng: np.random.Generator, n: int,
                 noise_std: float | None = None):
    """Random (patches, token sequence) pairs for contrastive pretraining."""
    name_vocab = spec.vocab_size - N_SPECIAL
    toks = np.stack([rng.choice(name_vocab, size=spec.name_len, replace=False) for _ in range(n)]) + N_SPECIAL
    z = prototypes(world, toks)
    std = spec.noise_std if noise_std is None else noise_std
    noise = rng.normal(0.0, std, size=(n, spec.n_patches * spec.patch_dim))
    return render(world, z, noise, spec.n_patches, spec.patch_dim), toks.tolist()


# ---------------------------------------------------------------------------
# generation

def _lsq_train_accuracy(patches: np.ndarray, labels: np.ndarray, k: int) -> float:
    x = np.concatenate([patches.reshape(len(patches), -1), np.ones((len(patches), 1))], axis=1)
    y = np.eye(k)[labels]
    w, *_ = np.linalg.lstsq(x, y, rcond=None)
    return float(np.mean(np.argmax(x @ w, axis=1) == labels))


def build(spec: DatasetSpec, seed: int) -> Dataset:
    """Pure function of (spec, seed)."""
    world = world_for(spec)
    name_rng = np.random.default_rng([seed, 0])
    perm = name_rng.permutation(spec.vocab_size - N_SPECIAL) + N_SPECIAL
    class_tokens = [perm[k * spec.name_len:(k + 1) * spec.name_len].tolist() for k in range(spec.K)]
    z = prototypes(world, class_tokens)
    if spec.shift_angle_deg != 0.0:
        z = rotate(world, z, spec.shift_angle_deg)
    noise_rng = np.random.default_rng([seed, 1])
    std = spec.noise_std * spec.shift_noise_mult
    flat = spec.n_patches * spec.patch_dim

    def split(per_class):
        labels = np.repeat(np.arange(spec.K), per_class)
        eps = noise_rng.standard_normal(size=(len(labels), flat))
        return render(world, z[labels], std * eps, spec.n_patches, spec.patch_dim), labels

    train_x, train_y = split(spec.train_per_class)
    test_x, test_y = split(spec.test_per_class)
    acc = _lsq_train_accuracy(train_x, train_y, spec.K) if spec.K > 1 else 1.0
    return Dataset(spec, seed, class_tokens, train_x, train_y, test_x, test_y, acc)


def apply_shift(dataset: Dataset, angle_deg: float = 0.0, noise_mult: float = 1.0) -> Dataset:
    """Same classes and names; prototypes rotated by ``angle_deg`` and noise rescaled."""
    spec = replace(dataset.spec, shift_angle_deg=float(angle_deg), shift_noise_mult=float(noise_mult),
                   name=f"{dataset.spec.name}-shift{angle_deg:g}x{noise_mult:g}")
    shifted = build(spec, dataset.seed)
    assert shifted.class_tokens == dataset.class_tokens
    return shifted


def sample_few_shot(dataset: Dataset, shots: int, seed: int) -> FewShotTask:
    rng = np.random.default_rng([seed, 2])
    picked = []
    for k in range(dataset.spec.K):
        pool = np.flatnonzero(dataset.train_labels == k)
        if len(pool) < shots:
            raise ContractError(f"class {k} has {len(pool)} training samples, {shots} shots requested")
        picked.extend(sorted(rng.choice(pool, size=shots, replace=False).tolist()))
    return FewShotTask(shots, seed, tuple(picked), tuple(dataset.test_indices.tolist()))


# ---------------------------------------------------------------------------
# disk format

def _records(ds: Dataset, split: str):
    patches = ds.train_patches if split == "train" else ds.test_patches
    labels = ds.train_labels if split == "train" else ds.test_labels
    offset = 0 if split == "train" else ds.n_train
    for i, (x, y) in enumerate(zip(patches, labels)):
        yield {
            "class": int(y),
            "split": split,
            "index": offset + i,
            "tokens": ds.class_tokens[int(y)],
            "shape": list(x.shape),
            "patches": base64.b64encode(np.ascontiguousarray(x, dtype="<f8").tobytes()).decode("ascii"),
        }


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def save(ds: Dataset, root) -> Path:
    out = Path(root) / ds.spec.name
    try:
        out.mkdir(parents=True, exist_ok=True)
        meta = {"spec": asdict(ds.spec), "seed": ds.seed, "class_tokens": ds.class_tokens,
                "lsq_train_accuracy": ds.lsq_train_accuracy}
        _atomic_write(out / "meta.json", json.dumps(meta, indent=1, sort_keys=True) + "\n")
        for split in ("train", "test"):
            lines = [json.dumps(r, sort_keys=True, separators=(",", ":")) for r in _records(ds, split)]
            _atomic_write(out / f"{split}.jsonl", "\n".join(lines) + "\n")
    except OSError as e:
        raise OSError(f"writing dataset to {out}: {e}") from e
    return out


def generate(spec: DatasetSpec, seed: int, root) -> Dataset:
    ds = build(spec, seed)
    save(ds, root)
    return ds


def _read_split(path: Path):
    xs, ys = [], []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            r = json.loads(line)
            x = np.frombuffer(base64.b64decode(r["patches"]), dtype="<f8").reshape(r["shape"])
            xs.append(x.astype(np.float64))
            ys.append(r["class"])
    return np.stack(xs), np.asarray(ys, dtype=np.int64)


def load(path) -> Dataset:
    path = Path(path)
    try:
        meta = json.loads((path / "meta.json").read_text(encoding="utf-8"))
        spec = DatasetSpec(**meta["spec"])
        train_x, train_y = _read_split(path / "train.jsonl")
        test_x, test_y = _read_split(path / "test.jsonl")
    except OSError as e:
        raise OSError(f"reading dataset from {path}: {e}") from e
    return Dataset(spec, meta["seed"], meta["class_tokens"], train_x, train_y, test_x, test_y,
                   meta["lsq_train_accuracy"])
