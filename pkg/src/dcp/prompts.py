"""First-layer prompts, batch fusion and cross-modal prompt attention (CMPA).

Only the first layer's text and visual prompts are free parameters.  Every
deeper layer's prompts come out of a CMPA block applied to the previous
layer's prompts of *both* modalities:

    text_next   = O_t . softmax(Q_t(P_v) K_t(P_t)^T / sqrt(d_k)) V_t(P_t)
    visual_next = O_v . softmax(Q_v(P_t) K_v(P_v)^T / sqrt(d_k)) V_v(P_v)

Queries come from the other modality; keys and values from the modality
being updated.  Both updates read the layer-l prompts only.  In literal
mode all projections are the identity and there is a single head, which
reduces the block to the bare attention formula above.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nx
from .encoders import TEMPLATE_TOKENS, DualEncoder
from .numerics import ContractError, Tensor

FUSION_MODES = ("avg", "max", "first")
METHODS = ("zero_shot", "coop_text_only", "vpt_deep_vision_only", "dual_independent", "dcp")
PROMPT_STD = 0.02
CMPA_KEYS = ("t_q", "t_k", "t_v", "t_o", "v_q", "v_k", "v_v", "v_o")


class ConfigError(ValueError):
    """Invalid prompt or run configuration."""


@dataclass(frozen=True)
class PromptConfig:
    M: int = 16
    N: int = 9
    d_attn: int = 32
    n_heads_cmpa: int = 4
    fusion_mode: str = "avg"
    share_params: bool = True
    residual: bool = False
    norm: bool = False
    literal: bool = False

    def __post_init__(self):
        if self.M < 1:
            raise ConfigError("prompt length M must be >= 1")
        if self.N < 1:
            raise ConfigError("prompt depth N must be >= 1")
        if self.d_attn < 1 or self.n_heads_cmpa < 1 or self.d_attn % self.n_heads_cmpa:
            raise ConfigError(f"d_attn {self.d_attn} not divisible by n_heads_cmpa {self.n_heads_cmpa}")
        if self.fusion_mode not in FUSION_MODES:
            raise ConfigError(f"unknown fusion_mode {self.fusion_mode!r}; expected one of {FUSION_MODES}")
        if self.literal and self.n_heads_cmpa != 1:
            raise ConfigError("literal CMPA mode is single-head")

    def check_dims(self, d_text: int, d_vision: int, max_depth: int | None = None) -> None:
        if self.literal and not (d_text == d_vision == self.d_attn):
            raise ConfigError(f"literal mode needs d_text == d_vision == d_attn, got {d_text}/{d_vision}/{self.d_attn}")
        if max_depth is not None and self.N > max_depth:
            raise ConfigError(f"prompt depth N={self.N} exceeds encoder depth {max_depth}")

    @property
    def d_k(self) -> int:
        return self.d_attn // self.n_heads_cmpa


@dataclass
class CMPAParams:
    """Projections of one CMPA block (text update ``t_*``, visual update ``v_*``)."""

    t_q: Tensor
    t_k: Tensor
    t_v: Tensor
    t_o: Tensor
    v_q: Tensor
    v_k: Tensor
    v_v: Tensor
    v_o: Tensor


def cmpa_shapes(d_text: int, d_vision: int, d_attn: int) -> dict[str, tuple[int, int]]:
    return {
        "t_q": (d_vision, d_attn), "t_k": (d_text, d_attn), "t_v": (d_text, d_attn), "t_o": (d_attn, d_text),
        "v_q": (d_text, d_attn), "v_k": (d_vision, d_attn), "v_v": (d_vision, d_attn), "v_o": (d_attn, d_vision),
    }


def cmpa_param_count(cfg: PromptConfig, d_text: int, d_vision: int) -> int:
    if cfg.literal:
        return 0
    return 4 * cfg.d_attn * (d_text + d_vision)


def n_cmpa_blocks(cfg: PromptConfig) -> int:
    if cfg.N == 1:
        return 0  # depth one never runs CMPA, so there is nothing to share
    return 1 if cfg.share_params else cfg.N - 1


def init_cmpa(cfg: PromptConfig, d_text: int, d_vision: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    # 1/sqrt(fan_in) keeps generated prompts on the scale of their inputs
    return {k: rng.normal(0.0, 1.0 / np.sqrt(s[0]), size=s)
            for k, s in cmpa_shapes(d_text, d_vision, cfg.d_attn).items()}


# ---------------------------------------------------------------------------
# first-layer initialisation

def init_text_prompts(embed_table: np.ndarray, template_token_ids: Sequence[int], M: int,
                      seed: int = 0) -> np.ndarray:
    """Rows are template word embeddings, padded with N(0, 0.02^2) rows (or truncated) to M."""
    rng = np.random.default_rng(seed)
    ids = list(template_token_ids)[:M]
    out = rng.normal(0.0, PROMPT_STD, size=(M, embed_table.shape[1]))
    out[:len(ids)] = embed_table[ids]
    return out


def init_visual_prompts(M: int, d_vision: int, seed: int = 0) -> np.ndarray:
    return np.random.default_rng(seed).normal(0.0, PROMPT_STD, size=(M, d_vision))


# ---------------------------------------------------------------------------
# fusion and CMPA

def _fuse(x: Tensor, mode: str) -> Tensor:
    if mode == "avg":
        return nx.reduce_mean_axis(x, 0)
    if mode == "max":
        return nx.reduce_max_axis(x, 0)
    if mode == "first":
        return nx.reshape(nx.slice_axis(x, 0, 0, 1), x.shape[1:])
    raise ConfigError(f"unknown fusion_mode {mode!r}")


def fuse_batch(text_prompts: Tensor, visual_prompts: Tensor, mode: str) -> tuple[Tensor, Tensor]:
    """Collapse ``[K, M, d]`` text and ``[B, M, d']`` visual prompts over their leading axis."""
    text_prompts, visual_prompts = nx.as_tensor(text_prompts), nx.as_tensor(visual_prompts)
    if mode not in FUSION_MODES:
        raise ConfigError(f"unknown fusion_mode {mode!r}")
    if text_prompts.ndim != 3 or visual_prompts.ndim != 3:
        raise ContractError("fuse_batch expects [K, M, d] and [B, M, d'] inputs")
    return _fuse(text_prompts, mode), _fuse(visual_prompts, mode)


def _cross_attend(query_src: Tensor, kv_src: Tensor, wq, wk, wv, wo, cfg: PromptConfig):
    m = kv_src.shape[0]
    if cfg.literal:
        q, k, v = query_src, kv_src, kv_src
    else:
        q, k, v = nx.matmul(query_src, wq), nx.matmul(kv_src, wk), nx.matmul(kv_src, wv)
    h, dk = cfg.n_heads_cmpa, cfg.d_k

    def split(y):
        return nx.transpose(nx.reshape(y, (m, h, dk)), (1, 0, 2))

    q, k, v = split(q), split(k), split(v)
    att = nx.softmax_rows(nx.scale(nx.matmul(q, nx.transpose(k, (0, 2, 1))), 1.0 / np.sqrt(dk)))
    y = nx.reshape(nx.transpose(nx.matmul(att, v), (1, 0, 2)), (m, h * dk))
    if not cfg.literal:
        y = nx.matmul(y, wo)
    return y, att


def cmpa_step(p_text: Tensor, p_visual: Tensor, params: CMPAParams | None, cfg: PromptConfig,
              return_attention: bool = False):
    """One simultaneous CMPA update: layer-l prompts -> layer-(l+1) prompts."""
    p_text, p_visual = nx.as_tensor(p_text), nx.as_tensor(p_visual)
    if p_text.ndim != 2 or p_visual.ndim != 2 or p_text.shape[0] != p_visual.shape[0]:
        raise ContractError(f"cmpa_step needs [M, d] prompts with equal M, got {p_text.shape} and {p_visual.shape}")
    if cfg.literal:
        if p_text.shape[1] != cfg.d_attn or p_visual.shape[1] != cfg.d_attn:
            raise ContractError("literal mode needs prompt widths equal to d_attn")
        params = CMPAParams(*([None] * 8))
    elif params is None:
        raise ContractError("cmpa_step needs projection parameters outside literal mode")
    else:
        want = cmpa_shapes(p_text.shape[1], p_visual.shape[1], cfg.d_attn)
        for key, shape in want.items():
            if getattr(params, key).shape != shape:
                raise ContractError(f"CMPA {key} has shape {getattr(params, key).shape}, expected {shape}")
    # both updates read only the layer-l inputs
    new_t, att_t = _cross_attend(p_visual, p_text, params.t_q, params.t_k, params.t_v, params.t_o, cfg)
    new_v, att_v = _cross_attend(p_text, p_visual, params.v_q, params.v_k, params.v_v, params.v_o, cfg)
    if cfg.residual:
        new_t, new_v = nx.add(new_t, p_text), nx.add(new_v, p_visual)
    if cfg.norm:
        new_t, new_v = nx.layer_norm(new_t), nx.layer_norm(new_v)
    if return_attention:
        return new_t, new_v, (att_t.data, att_v.data)
    return new_t, new_v


# ---------------------------------------------------------------------------
# prompt bank

@dataclass
class PromptBank:
    """All trainable prompt-side parameters of one run, as named arrays.

    Names: ``text.<layer>``, ``visual.<layer>`` and ``cmpa<j>.<key>``.
    """

    method: str
    config: PromptConfig
    d_text: int
    d_vision: int
    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    def tensors(self, requires_grad: bool = False) -> dict[str, Tensor]:
        if requires_grad:
            return {k: Tensor(v, requires_grad=True, name=k) for k, v in self.arrays.items()}
        return {k: Tensor._wrap(v) for k, v in self.arrays.items()}

    def n_params(self) -> int:
        return int(sum(v.size for v in self.arrays.values()))

    def copy(self) -> "PromptBank":
        return PromptBank(self.method, self.config, self.d_text, self.d_vision,
                          {k: v.copy() for k, v in self.arrays.items()})

    def blocks(self, tensors: dict[str, Tensor] | None = None) -> list[CMPAParams]:
        tensors = tensors if tensors is not None else self.tensors()
        if self.method != "dcp" or self.config.literal:
            return []
        return [CMPAParams(*(tensors[f"cmpa{j}.{k}"] for k in CMPA_KEYS))
                for j in range(n_cmpa_blocks(self.config))]


def bank_param_count(method: str, cfg: PromptConfig, d_text: int, d_vision: int) -> int:
    """Closed-form trainable-parameter count per method."""
    m, n = cfg.M, cfg.N
    if method == "zero_shot":
        return 0
    if method == "coop_text_only":
        return m * d_text
    if method == "vpt_deep_vision_only":
        return n * m * d_vision
    if method == "dual_independent":
        return n * m * (d_text + d_vision)
    if method == "dcp":
        return m * (d_text + d_vision) + n_cmpa_blocks(cfg) * cmpa_param_count(cfg, d_text, d_vision)
    raise ConfigError(f"unknown method {method!r}")


def init_bank(method: str, cfg: PromptConfig, encoders: DualEncoder, seed: int) -> PromptBank:
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}; expected one of {METHODS}")
    d_t = encoders.text.config.model_dim
    d_v = encoders.vision.config.model_dim
    cfg.check_dims(d_t, d_v, min(encoders.text.config.n_layers, encoders.vision.config.n_layers))
    rng = np.random.default_rng([seed, 7])
    arrays: dict[str, np.ndarray] = {}
    table = encoders.text.arrays["tok"]
    text_depth = {"coop_text_only": 1, "dual_independent": cfg.N, "dcp": 1}.get(method, 0)
    vis_depth = {"vpt_deep_vision_only": cfg.N, "dual_independent": cfg.N, "dcp": 1}.get(method, 0)
    for layer in range(text_depth):
        if layer == 0:
            arrays["text.0"] = init_text_prompts(table, TEMPLATE_TOKENS, cfg.M, seed=int(rng.integers(2**31)))
        else:
            arrays[f"text.{layer}"] = rng.normal(0.0, PROMPT_STD, size=(cfg.M, d_t))
    for layer in range(vis_depth):
        arrays[f"visual.{layer}"] = init_visual_prompts(cfg.M, d_v, seed=int(rng.integers(2**31)))
    if method == "dcp" and not cfg.literal:
        for j in range(n_cmpa_blocks(cfg)):
            for k, v in init_cmpa(cfg, d_t, d_v, rng).items():
                arrays[f"cmpa{j}.{k}"] = v
    return PromptBank(method, cfg, d_t, d_v, arrays)


def roll_prompts(bank: PromptBank, fused_seed: tuple[Tensor, Tensor],
                 tensors: dict[str, Tensor] | None = None) -> tuple[list[Tensor], list[Tensor]]:
    """Unroll CMPA N-1 times from the first-layer prompts into per-layer schedules."""
    cfg = bank.config
    blocks = bank.blocks(tensors)
    p_t, p_v = fused_seed
    text_sched, vis_sched = [p_t], [p_v]
    for layer in range(cfg.N - 1):
        params = None if cfg.literal else blocks[0 if cfg.share_params else layer]
        p_t, p_v = cmpa_step(p_t, p_v, params, cfg)
        text_sched.append(p_t)
        vis_sched.append(p_v)
    return text_sched, vis_sched


def prompt_schedules(bank: PromptBank, tensors: dict[str, Tensor], n_classes: int,
                     batch: int) -> tuple[list[Tensor], list[Tensor]]:
    """Per-layer text and visual prompt lists for one forward pass of ``bank.method``."""
    method = bank.method
    if method == "dcp":
        # fused CMPA output is shared by every class and every image
        seed = fuse_batch(nx.expand(tensors["text.0"], n_classes),
                          nx.expand(tensors["visual.0"], batch), bank.config.fusion_mode)
        return roll_prompts(bank, seed, tensors)

    def layers(prefix):
        out, i = [], 0
        while f"{prefix}.{i}" in tensors:
            out.append(tensors[f"{prefix}.{i}"])
            i += 1
        return out

    return layers("text"), layers("visual")
