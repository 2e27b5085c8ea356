"""Miniature CLIP-style dual encoder with per-layer prompt slots.

Both encoders are pre-LN transformers.  Prompt slots sit right after the
first token (class token for vision, start sentinel for text).  Layer ``i``
(0-based) with ``i < N`` gets a fresh prompt tensor written into the slots,
discarding whatever the previous layer produced there; past depth ``N`` the
slot contents flow on as ordinary tokens.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, asdict
from typing import Mapping, Sequence

import numpy as np

from . import numerics as nx
from .numerics import ContractError, Tensor

SOS, EOS = 0, 1
TEMPLATE_TOKENS = (2, 3, 4, 2)  # "a photo of a"
N_SPECIAL = 5
MASK_VALUE = -1e30


@dataclass(frozen=True)
class EncoderConfig:
    kind: str                  # "vision" or "text"
    n_layers: int = 6
    model_dim: int = 64
    n_heads: int = 4
    ffn_dim: int = 128
    max_seq: int = 40
    embed_dim: int = 32
    vocab_size: int = 0        # text only
    patch_dim: int = 0         # vision only
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.kind not in ("vision", "text"):
            raise ValueError(f"unknown encoder kind {self.kind!r}")
        for f in ("n_layers", "model_dim", "n_heads", "ffn_dim", "max_seq", "embed_dim"):
            if getattr(self, f) <= 0:
                raise ValueError(f"{f} must be positive")
        if self.model_dim % self.n_heads:
            raise ValueError(f"model_dim {self.model_dim} not divisible by n_heads {self.n_heads}")
        if self.kind == "text" and self.vocab_size <= N_SPECIAL:
            raise ValueError("text encoder needs vocab_size > number of special tokens")
        if self.kind == "vision" and self.patch_dim <= 0:
            raise ValueError("vision encoder needs patch_dim > 0")


def vision_config(**overrides) -> EncoderConfig:
    base = dict(kind="vision", n_layers=6, model_dim=64, n_heads=4, ffn_dim=128,
                max_seq=40, embed_dim=32, patch_dim=12)
    base.update(overrides)
    return EncoderConfig(**base)


def text_config(**overrides) -> EncoderConfig:
    base = dict(kind="text", n_layers=6, model_dim=48, n_heads=4, ffn_dim=96,
                max_seq=32, embed_dim=32, vocab_size=64)
    base.update(overrides)
    return EncoderConfig(**base)


@dataclass
class EncoderParams:
    """Frozen weights of one encoder, stored as named float64 arrays."""

    config: EncoderConfig
    arrays: dict[str, np.ndarray]

    def tensors(self, requires_grad: bool = False) -> dict[str, Tensor]:
        return {k: Tensor._wrap(v) if not requires_grad else Tensor(v, requires_grad=True, name=k)
                for k, v in self.arrays.items()}

    def checksum(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.arrays):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.arrays[k], dtype="<f8").tobytes())
        return h.hexdigest()

    def n_params(self) -> int:
        return int(sum(v.size for v in self.arrays.values()))


@dataclass
class DualEncoder:
    vision: EncoderParams
    text: EncoderParams

    def checksum(self) -> str:
        return hashlib.sha256((self.vision.checksum() + self.text.checksum()).encode()).hexdigest()


def _shapes(cfg: EncoderConfig) -> dict[str, tuple[int, ...]]:
    d, f = cfg.model_dim, cfg.ffn_dim
    shapes: dict[str, tuple[int, ...]] = {}
    if cfg.kind == "vision":
        shapes["patch.w"] = (cfg.patch_dim, d)
        shapes["patch.b"] = (d,)
        shapes["cls"] = (d,)
    else:
        shapes["tok"] = (cfg.vocab_size, d)
    shapes["pos"] = (cfg.max_seq, d)
    for i in range(cfg.n_layers):
        p = f"layer{i}."
        shapes[p + "ln1.g"] = (d,)
        shapes[p + "ln1.b"] = (d,)
        for m in "qkvo":
            shapes[p + f"attn.w{m}"] = (d, d)
            shapes[p + f"attn.b{m}"] = (d,)
        shapes[p + "ln2.g"] = (d,)
        shapes[p + "ln2.b"] = (d,)
        shapes[p + "ffn.w1"] = (d, f)
        shapes[p + "ffn.b1"] = (f,)
        shapes[p + "ffn.w2"] = (f, d)
        shapes[p + "ffn.b2"] = (d,)
    shapes["ln_final.g"] = (d,)
    shapes["ln_final.b"] = (d,)
    shapes["proj"] = (d, cfg.embed_dim)
    return shapes


def param_count(cfg: EncoderConfig) -> int:
    """Closed-form parameter count."""
    d, f, e = cfg.model_dim, cfg.ffn_dim, cfg.embed_dim
    per_layer = 4 * d * d + 2 * d * f + 9 * d + f
    if cfg.kind == "vision":
        embed = cfg.patch_dim * d + 2 * d
    else:
        embed = cfg.vocab_size * d
    return embed + cfg.max_seq * d + cfg.n_layers * per_layer + 2 * d + d * e


def init_encoder(cfg: EncoderConfig, seed: int) -> EncoderParams:
    """Scaled-normal (std 0.02) weights, zero biases, unit layer-norm gains."""
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in _shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            arrays[name] = np.ones(shape)
        elif leaf.startswith("b"):
            arrays[name] = np.zeros(shape)
        else:
            arrays[name] = rng.normal(0.0, 0.02, size=shape)
    return EncoderParams(cfg, arrays)


def init_dual_encoder(vcfg: EncoderConfig, tcfg: EncoderConfig, seed: int) -> DualEncoder:
    return DualEncoder(init_encoder(vcfg, seed), init_encoder(tcfg, seed + 1))


# ---------------------------------------------------------------------------
# transformer pieces

def causal_mask(t: int) -> np.ndarray:
    return np.triu(np.full((t, t), MASK_VALUE), k=1)


def attention(x: Tensor, w: Mapping[str, Tensor], prefix: str, n_heads: int,
              mask: np.ndarray | None = None) -> Tensor:
    b, t, d = x.shape
    dh = d // n_heads

    def heads(name):
        y = nx.add(nx.matmul(x, w[prefix + "w" + name]), w[prefix + "b" + name])
        return nx.transpose(nx.reshape(y, (b, t, n_heads, dh)), (0, 2, 1, 3))

    q, k, v = heads("q"), heads("k"), heads("v")
    scores = nx.scale(nx.matmul(q, nx.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    if mask is not None:
        scores = nx.add(scores, Tensor._wrap(mask))
    att = nx.softmax_rows(scores)
    y = nx.matmul(att, v)
    y = nx.reshape(nx.transpose(y, (0, 2, 1, 3)), (b, t, d))
    return nx.add(nx.matmul(y, w[prefix + "wo"]), w[prefix + "bo"])


def block(x: Tensor, w: Mapping[str, Tensor], i: int, cfg: EncoderConfig,
          mask: np.ndarray | None = None) -> Tensor:
    p = f"layer{i}."
    h = nx.layer_norm(x, w[p + "ln1.g"], w[p + "ln1.b"], cfg.ln_eps)
    x = nx.add(x, attention(h, w, p + "attn.", cfg.n_heads, mask))
    h = nx.layer_norm(x, w[p + "ln2.g"], w[p + "ln2.b"], cfg.ln_eps)
    h = nx.gelu(nx.add(nx.matmul(h, w[p + "ffn.w1"]), w[p + "ffn.b1"]))
    return nx.add(x, nx.add(nx.matmul(h, w[p + "ffn.w2"]), w[p + "ffn.b2"]))


def _check_prompts(prompts: Sequence[Tensor], cfg: EncoderConfig, batch: int) -> int:
    if len(prompts) > cfg.n_layers:
        raise ContractError(f"{len(prompts)} prompt layers for a {cfg.n_layers}-layer encoder")
    if not prompts:
        return 0
    m = prompts[0].shape[-2]
    for p in prompts:
        if p.shape[-1] != cfg.model_dim:
            raise ContractError(f"prompt width {p.shape[-1]} != model_dim {cfg.model_dim}")
        if p.shape[-2] != m or p.ndim not in (2, 3) or (p.ndim == 3 and p.shape[0] != batch):
            raise ContractError(f"prompt shape {p.shape} inconsistent (M={m}, batch={batch})")
    return m


def _batched(p: Tensor, b: int) -> Tensor:
    return nx.expand(p, b) if p.ndim == 2 else p


def _run_layers(seq: Tensor, w, cfg: EncoderConfig, prompts: Sequence[Tensor], m: int,
                mask: np.ndarray | None, after_layer=None) -> Tensor:
    b, t, _ = seq.shape
    for i in range(cfg.n_layers):
        if 0 < i < len(prompts):
            seq = nx.concat_axis([nx.slice_axis(seq, 1, 0, 1), _batched(prompts[i], b),
                                  nx.slice_axis(seq, 1, 1 + m, t)], axis=1)
        seq = block(seq, w, i, cfg, mask)
        if after_layer is not None:
            seq = after_layer(i, seq)
    return seq


def image_forward(w: Mapping[str, Tensor], cfg: EncoderConfig, patches,
                  prompts: Sequence[Tensor], after_layer=None) -> Tensor:
    """Batched vision forward on ``patches[B, P, patch_dim]`` -> ``[B, embed_dim]``."""
    patches = patches.data if isinstance(patches, Tensor) else np.asarray(patches, dtype=np.float64)
    if patches.ndim != 3 or patches.shape[2] != cfg.patch_dim:
        raise ContractError(f"patches must be [B, P, {cfg.patch_dim}], got {patches.shape}")
    b, p, _ = patches.shape
    m = _check_prompts(prompts, cfg, b)
    if 1 + m + p > cfg.max_seq:
        raise ContractError(f"sequence 1+{m}+{p} exceeds max_seq {cfg.max_seq}")
    x = nx.add(nx.matmul(Tensor._wrap(patches), w["patch.w"]), w["patch.b"])
    pos = w["pos"]
    x = nx.add(x, nx.slice_axis(pos, 0, 1, 1 + p))
    cls = nx.expand(nx.reshape(nx.add(w["cls"], nx.reshape(nx.slice_axis(pos, 0, 0, 1), (cfg.model_dim,))),
                               (1, cfg.model_dim)), b)
    parts = [cls] + ([_batched(prompts[0], b)] if m else []) + [x]
    seq = nx.concat_axis(parts, axis=1)
    seq = _run_layers(seq, w, cfg, prompts, m, None, after_layer)
    head = nx.reshape(nx.slice_axis(seq, 1, 0, 1), (b, cfg.model_dim))
    head = nx.layer_norm(head, w["ln_final.g"], w["ln_final.b"], cfg.ln_eps)
    return nx.matmul(head, w["proj"])


def text_states(w: Mapping[str, Tensor], cfg: EncoderConfig, sequences: Sequence[Sequence[int]],
                prompts: Sequence[Tensor], after_layer=None) -> tuple[Tensor, np.ndarray]:
    """Final hidden states ``[K, T, d]`` of the causal text stack and each row's EOS position."""
    k = len(sequences)
    m = _check_prompts(prompts, cfg, k)
    lengths = [len(s) for s in sequences]
    longest = max(lengths)
    t = 2 + m + longest
    if t > cfg.max_seq:
        raise ContractError(f"sequence length {t} exceeds max_seq {cfg.max_seq}")
    ids = np.full((k, 1 + longest + 1), EOS, dtype=np.int64)  # pad with EOS past the readout
    ids[:, 0] = SOS
    for r, s in enumerate(sequences):
        s = np.asarray(s, dtype=np.int64)
        if s.size and (s.min() < 0 or s.max() >= cfg.vocab_size):
            raise ContractError(f"token ids must lie in [0, {cfg.vocab_size})")
        ids[r, 1:1 + len(s)] = s
    tok = nx.take_rows(w["tok"], ids)
    parts = [nx.slice_axis(tok, 1, 0, 1)]
    if m:
        parts.append(_batched(prompts[0], k))
    parts.append(nx.slice_axis(tok, 1, 1, ids.shape[1]))
    seq = nx.add(nx.concat_axis(parts, axis=1), nx.slice_axis(w["pos"], 0, 0, t))
    seq = _run_layers(seq, w, cfg, prompts, m, causal_mask(t), after_layer)
    return seq, np.asarray(lengths) + 1 + m


def text_forward(w: Mapping[str, Tensor], cfg: EncoderConfig, sequences: Sequence[Sequence[int]],
                 prompts: Sequence[Tensor], after_layer=None) -> Tensor:
    """Batched causal text forward; each sequence is wrapped as [SOS, prompts, ids, EOS]."""
    seq, eos = text_states(w, cfg, sequences, prompts, after_layer)
    head = nx.gather_positions(seq, eos)
    head = nx.layer_norm(head, w["ln_final.g"], w["ln_final.b"], cfg.ln_eps)
    return nx.matmul(head, w["proj"])


def encode_image(params: EncoderParams, patches, visual_prompts: Sequence[Tensor] = ()) -> Tensor:
    """Encode one ``[P, patch_dim]`` grid (-> ``[d_shared]``) or a batch (-> ``[B, d_shared]``)."""
    arr = np.asarray(patches.data if isinstance(patches, Tensor) else patches, dtype=np.float64)
    single = arr.ndim == 2
    out = image_forward(params.tensors(), params.config, arr[None] if single else arr, visual_prompts)
    return nx.reshape(out, (params.config.embed_dim,)) if single else out


def encode_text(params: EncoderParams, seq, text_prompts: Sequence[Tensor] = ()) -> Tensor:
    """Encode one token sequence (-> ``[d_shared]``) or a list of them (-> ``[K, d_shared]``)."""
    single = len(seq) == 0 or np.isscalar(seq[0])
    seqs = [seq] if single else list(seq)
    out = text_forward(params.tensors(), params.config, seqs, text_prompts)
    return nx.reshape(out, (params.config.embed_dim,)) if single else out


def zero_shot_sequences(class_tokens: Sequence[Sequence[int]]) -> list[list[int]]:
    """Hand-written template 'a photo of a <class>' for each class."""
    return [list(TEMPLATE_TOKENS) + list(c) for c in class_tokens]
