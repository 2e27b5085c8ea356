"""Contrastive "pretrain-lite" for the frozen dual encoder.

Trains every encoder weight with a symmetric image/text InfoNCE loss on
random token combinations drawn from the synthetic world, using Adam.  The
result is then frozen for prompt tuning, playing the part of a pretrained
CLIP checkpoint.

After a plain warm-up third, every other step fills the prompt slots with random rows (fresh ones at
each layer up to a random depth), and the text side carries the template
embeddings in its first slots, as a prompt bank does at initialisation.
Without this the miniature encoders have never seen slot tokens and any
inserted prompt wrecks them.
"""
from __future__ import annotations

import logging

import numpy as np

from .. import numerics as nx
from ..encoders import (TEMPLATE_TOKENS, DualEncoder, EncoderParams, image_forward, text_forward,
                        zero_shot_sequences)
from ..objective import cosine_logits
from ..synthdata import DatasetSpec, sample_pairs, world_for

log = logging.getLogger(__name__)

SLOT_STDS = (0.02, 0.05, 0.1)


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, arrays: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float | None = None):
        self.t += 1
        lr = self.lr if lr is None else lr
        for k, g in grads.items():
            m = self.m[k] = self.b1 * self.m.get(k, 0.0) + (1 - self.b1) * g
            v = self.v[k] = self.b2 * self.v.get(k, 0.0) + (1 - self.b2) * g * g
            mh = m / (1 - self.b1 ** self.t)
            vh = v / (1 - self.b2 ** self.t)
            arrays[k] = arrays[k] - lr * mh / (np.sqrt(vh) + self.eps)


def contrastive_loss(img: nx.Tensor, txt: nx.Tensor, tau: float) -> nx.Tensor:
    logits = cosine_logits(img, txt, tau)
    labels = range(logits.shape[0])
    a = nx.cross_entropy_with_logits(logits, labels)
    b = nx.cross_entropy_with_logits(nx.transpose(logits, (1, 0)), labels)
    return nx.scale(nx.add(a, b), 0.5)


def _random_slots(rng, depth: int, m: int, d: int, std: float) -> list[nx.Tensor]:
    return [nx.Tensor._wrap(rng.normal(0.0, std, size=(m, d))) for _ in range(depth)]


def pretrain_lite(encoders: DualEncoder, data: DatasetSpec, steps: int, batch: int = 32,
                  lr: float = 1e-3, tau: float = 0.07, seed: int = 0, slot_len: int = 16,
                  lr_warmup: float = 0.05, clip: float | None = 1.0) -> DualEncoder:
    """Return a contrastively trained copy of ``encoders`` (inputs untouched)."""
    world = world_for(data)
    rng = np.random.default_rng([seed, 31])
    vis = {k: v.copy() for k, v in encoders.vision.arrays.items()}
    txt = {k: v.copy() for k, v in encoders.text.arrays.items()}
    opt_v, opt_t = Adam(lr), Adam(lr)
    vcfg, tcfg = encoders.vision.config, encoders.text.config
    max_depth = min(vcfg.n_layers, tcfg.n_layers)
    warmup = steps // 3
    for step in range(steps):
        patches, toks = sample_pairs(world, data, rng, batch)
        wv = {k: nx.Tensor(a, requires_grad=True) for k, a in vis.items()}
        wt = {k: nx.Tensor(a, requires_grad=True) for k, a in txt.items()}
        with nx.Tape():
            if step % 2 and slot_len > 0 and step >= warmup:
                depth = int(rng.integers(1, max_depth + 1))
                std = SLOT_STDS[int(rng.integers(len(SLOT_STDS)))]
                vp = _random_slots(rng, depth, slot_len, vcfg.model_dim, std)
                tp = _random_slots(rng, depth, slot_len, tcfg.model_dim, std)
                n_tmpl = min(len(TEMPLATE_TOKENS), slot_len)
                head = nx.take_rows(wt["tok"], list(TEMPLATE_TOKENS[:n_tmpl]))
                tp[0] = nx.concat_axis([head, nx.slice_axis(tp[0], 0, n_tmpl, slot_len)], axis=0)
                img = image_forward(wv, vcfg, patches, vp)
                txt_emb = text_forward(wt, tcfg, toks, tp)
            else:
                img = image_forward(wv, vcfg, patches, ())
                txt_emb = text_forward(wt, tcfg, zero_shot_sequences(toks), ())
            loss = contrastive_loss(img, txt_emb, tau)
        grads = nx.backward(loss)
        gv = {k: grads[t] for k, t in wv.items()}
        gt = {k: grads[t] for k, t in wt.items()}
        if clip is not None:
            norm = np.sqrt(sum(float(np.sum(g * g)) for g in (*gv.values(), *gt.values())))
            if norm > clip:
                gv = {k: g * (clip / norm) for k, g in gv.items()}
                gt = {k: g * (clip / norm) for k, g in gt.items()}
        # short linear warm-up, then linear warm-down
        n_up = max(1, int(lr_warmup * steps))
        cur = lr * min((step + 1) / n_up, 1.0 - step / steps)
        opt_v.step(vis, gv, cur)
        opt_t.step(txt, gt, cur)
        if step % 50 == 0 or step == steps - 1:
            log.info("pretrain step %d/%d loss %.4f", step + 1, steps, loss.item())
    return DualEncoder(EncoderParams(vcfg, vis), EncoderParams(tcfg, txt))
