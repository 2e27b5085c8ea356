"""Cosine/temperature scoring and the few-shot cross-entropy objective."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from . import numerics as nx
from .encoders import DualEncoder, image_forward, text_forward, zero_shot_sequences
from .numerics import DegenerateInputError, Tensor
from .prompts import PromptBank, prompt_schedules

DEFAULT_TAU = 0.07


def check_tau(tau: float) -> float:
    tau = float(tau)
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    return tau


def predict_probs(x, class_embeds, tau: float = DEFAULT_TAU) -> np.ndarray:
    """Class probabilities from cosine similarity over temperature."""
    tau = check_tau(tau)
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(class_embeds, dtype=np.float64)
    if w.ndim != 2 or w.shape[0] < 1:
        raise ValueError("need at least one class embedding")
    nxv = np.linalg.norm(x)
    nw = np.linalg.norm(w, axis=1)
    if nxv == 0.0 or np.any(nw == 0.0):
        raise DegenerateInputError("zero-norm embedding")
    logits = (w @ x) / (nw * nxv) / tau
    z = np.exp(logits - logits.max())
    return z / z.sum()


def cosine_logits(image_embeds: Tensor, text_embeds: Tensor, tau: float = DEFAULT_TAU) -> Tensor:
    """``[B, e]`` x ``[K, e]`` -> ``[B, K]`` logits ``cos / tau``."""
    img = nx.l2_normalize_rows(image_embeds)
    txt = nx.l2_normalize_rows(text_embeds)
    return nx.scale(nx.matmul(img, nx.transpose(txt, (1, 0))), 1.0 / check_tau(tau))


def text_sequences(method: str, class_tokens: Sequence[Sequence[int]]) -> list[list[int]]:
    # methods without learned text context fall back to the hand-written template
    if method in ("zero_shot", "vpt_deep_vision_only"):
        return zero_shot_sequences(class_tokens)
    return [list(c) for c in class_tokens]


def forward_logits(bank: PromptBank, encoders: DualEncoder, patches: np.ndarray,
                   class_tokens: Sequence[Sequence[int]], tau: float = DEFAULT_TAU,
                   tensors: dict[str, Tensor] | None = None) -> Tensor:
    """Logits ``[B, K]`` of a batch of patch grids against every class."""
    tensors = tensors if tensors is not None else bank.tensors()
    k, b = len(class_tokens), patches.shape[0]
    text_sched, vis_sched = prompt_schedules(bank, tensors, k, b)
    txt = text_forward(encoders.text.tensors(), encoders.text.config,
                       text_sequences(bank.method, class_tokens), text_sched)
    img = image_forward(encoders.vision.tensors(), encoders.vision.config, patches, vis_sched)
    return cosine_logits(img, txt, tau)


def few_shot_loss(patches: np.ndarray, labels: Sequence[int], bank: PromptBank, encoders: DualEncoder,
                  class_tokens: Sequence[Sequence[int]], tau: float = DEFAULT_TAU,
                  tensors: dict[str, Tensor] | None = None) -> Tensor:
    """Mean ``-log p(label | image)`` under prompted scoring; differentiable in the bank only."""
    logits = forward_logits(bank, encoders, patches, class_tokens, tau, tensors)
    return nx.cross_entropy_with_logits(logits, labels)


def loss_and_grads(patches, labels, bank: PromptBank, encoders: DualEncoder, class_tokens,
                   tau: float = DEFAULT_TAU) -> tuple[float, dict[str, np.ndarray]]:
    leaves = bank.tensors(requires_grad=True)
    with nx.Tape():
        loss = few_shot_loss(patches, labels, bank, encoders, class_tokens, tau, leaves)
    grads = nx.backward(loss)
    return loss.item(), {k: grads[t] for k, t in leaves.items()}
