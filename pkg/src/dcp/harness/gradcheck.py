"""Finite-difference audit of every gradient path.

Each entry builds a small random instance, contracts the output with a
random weight tensor to get a scalar, and compares the tape gradient of
every input with central differences (h = 1e-5).  The score is
``max|analytic - numeric| / max(|analytic|, |numeric|)`` over the tensor,
and the worst score over trials is reported.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .. import numerics as nx
from ..encoders import image_forward, init_dual_encoder, text_config, text_forward, vision_config
from ..numerics import Tensor
from ..objective import few_shot_loss, loss_and_grads
from ..prompts import CMPA_KEYS, CMPAParams, PromptConfig, cmpa_step, init_bank, init_cmpa

TOLERANCE = 1e-4
FD_STEP = 1e-5


@dataclass
class AuditEntry:
    name: str
    max_rel_error: float
    trials: int

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error <= TOLERANCE)


def central_difference(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def rel_error(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-12)
    return float(np.abs(a - b).max(initial=0.0) / scale)


# name -> rng -> (inputs, fn(list of Tensors) -> Tensor)
OP_CASES = {
    "add": lambda r: ([r.normal(size=(2, 3, 4)), r.normal(size=(3, 4))], lambda t: nx.add(t[0], t[1])),
    "sub": lambda r: ([r.normal(size=(2, 3)), r.normal(size=(3,))], lambda t: nx.sub(t[0], t[1])),
    "mul": lambda r: ([r.normal(size=(2, 3)), r.normal(size=(2, 3))], lambda t: nx.mul(t[0], t[1])),
    "scale": lambda r: ([r.normal(size=(3, 2))], lambda t: nx.scale(t[0], -1.7)),
    "gelu": lambda r: ([r.normal(size=(3, 4)) * 2], lambda t: nx.gelu(t[0])),
    "matmul": lambda r: ([r.normal(size=(3, 4)), r.normal(size=(4, 2))], lambda t: nx.matmul(t[0], t[1])),
    "matmul_batched": lambda r: ([r.normal(size=(2, 3, 4)), r.normal(size=(2, 4, 2))],
                                 lambda t: nx.matmul(t[0], t[1])),
    "transpose": lambda r: ([r.normal(size=(2, 3, 4))], lambda t: nx.transpose(t[0], (2, 0, 1))),
    "reshape": lambda r: ([r.normal(size=(2, 6))], lambda t: nx.reshape(t[0], (3, 4))),
    "concat_axis": lambda r: ([r.normal(size=(2, 3)), r.normal(size=(2, 2))],
                              lambda t: nx.concat_axis([t[0], t[1]], 1)),
    "slice_axis": lambda r: ([r.normal(size=(4, 3))], lambda t: nx.slice_axis(t[0], 0, 1, 3)),
    "expand": lambda r: ([r.normal(size=(2, 3))], lambda t: nx.expand(t[0], 4)),
    "take_rows": lambda r: ([r.normal(size=(5, 3))], lambda t: nx.take_rows(t[0], [[0, 4], [4, 2]])),
    "gather_positions": lambda r: ([r.normal(size=(3, 4, 2))], lambda t: nx.gather_positions(t[0], [3, 0, 1])),
    "reduce_sum_axis": lambda r: ([r.normal(size=(3, 4))], lambda t: nx.reduce_sum_axis(t[0], 1)),
    "reduce_mean_axis": lambda r: ([r.normal(size=(3, 4))], lambda t: nx.reduce_mean_axis(t[0], 0)),
    "reduce_max_axis": lambda r: ([r.normal(size=(3, 4))], lambda t: nx.reduce_max_axis(t[0], 0)),
    "softmax_rows": lambda r: ([r.normal(size=(3, 5)) * 2], lambda t: nx.softmax_rows(t[0])),
    "layer_norm": lambda r: ([r.normal(size=(3, 6)), r.normal(size=6), r.normal(size=6)],
                             lambda t: nx.layer_norm(t[0], t[1], t[2])),
    "l2_normalize_rows": lambda r: ([r.normal(size=(3, 4))], lambda t: nx.l2_normalize_rows(t[0])),
    "cross_entropy_with_logits": lambda r: ([r.normal(size=(4, 5))],
                                            lambda t: nx.cross_entropy_with_logits(t[0], [1, 0, 4, 4])),
}


def _audit_function(fn, xs, rng) -> float:
    """Worst relative error over the inputs of ``fn`` contracted with a random weight."""
    probe = fn([Tensor(x) for x in xs])
    weights = rng.normal(size=probe.shape)
    leaves = [Tensor(x, requires_grad=True) for x in xs]
    with nx.Tape():
        loss = nx.sum_all(nx.mul(fn(leaves), Tensor(weights)))
    grads = nx.backward(loss)
    worst = 0.0
    for i, x in enumerate(xs):
        def f(xi, i=i):
            args = [Tensor(v) for v in xs]
            args[i] = Tensor(xi)
            return float(np.sum(fn(args).data * weights))
        worst = max(worst, rel_error(grads[leaves[i]], central_difference(f, x)))
    return worst


def _toy_encoders(seed: int):
    v = vision_config(n_layers=2, model_dim=8, n_heads=2, ffn_dim=8, max_seq=12, embed_dim=4, patch_dim=3)
    t = text_config(n_layers=2, model_dim=6, n_heads=2, ffn_dim=8, max_seq=12, embed_dim=4, vocab_size=9)
    enc = init_dual_encoder(v, t, seed)
    rng = np.random.default_rng([seed, 5])
    for p in (enc.vision, enc.text):
        for k in p.arrays:
            p.arrays[k] = p.arrays[k] + rng.normal(0.0, 0.3, size=p.arrays[k].shape)
    return enc


def _encoder_cases(seed: int, rng):
    """Both encoders w.r.t. their per-layer prompts (the only trainable inputs)."""
    enc = _toy_encoders(seed)
    vw, tw = enc.vision.tensors(), enc.text.tensors()
    patches = rng.normal(size=(2, 3, 3))
    seqs = [[5, 6], [7]]
    vis = [rng.normal(size=(2, 8)) for _ in range(2)]
    txt = [rng.normal(size=(2, 6)) for _ in range(2)]
    return {
        "encode_image": (vis, lambda t: image_forward(vw, enc.vision.config, patches, [t[0], t[1]])),
        "encode_text": (txt, lambda t: text_forward(tw, enc.text.config, seqs, [t[0], t[1]])),
    }


def _cmpa_case(rng, **kw):
    cfg = PromptConfig(M=3, d_attn=4, n_heads_cmpa=2, **kw)
    arrays = init_cmpa(cfg, 5, 6, rng)
    xs = [rng.normal(size=(3, 5)), rng.normal(size=(3, 6))] + [arrays[k] for k in CMPA_KEYS]

    def fn(t):
        new_t, new_v = cmpa_step(t[0], t[1], CMPAParams(*t[2:]), cfg)
        return nx.concat_axis([new_t, new_v], 1)

    return xs, fn


def _end_to_end(seed: int) -> float:
    """Full DCP loss on a 2-class, 4-sample toy w.r.t. every bank leaf."""
    enc = _toy_encoders(seed)
    rng = np.random.default_rng([seed, 6])
    patches = rng.normal(size=(4, 3, 3))
    labels, names = [0, 1, 1, 0], [[5, 6], [7]]
    bank = init_bank("dcp", PromptConfig(M=2, N=2, d_attn=4, n_heads_cmpa=2), enc, seed)
    for k in ("text.0", "visual.0"):
        bank.arrays[k] = bank.arrays[k] * 10
    _, grads = loss_and_grads(patches, labels, bank, enc, names)
    worst = 0.0
    for name, value in bank.arrays.items():
        def f(a, name=name):
            trial = bank.copy()
            trial.arrays[name] = a
            return few_shot_loss(patches, labels, trial, enc, names).item()
        worst = max(worst, rel_error(grads[name], central_difference(f, value)))
    return worst


def run_audit(trials: int = 10, seed: int = 0, encoder_trials: int = 2) -> list[AuditEntry]:
    entries = []
    for name in sorted(OP_CASES):
        worst = 0.0
        for trial in range(trials):
            rng = np.random.default_rng([seed, trial])
            xs, fn = OP_CASES[name](rng)
            worst = max(worst, _audit_function(fn, xs, rng))
        entries.append(AuditEntry(name, worst, trials))
    enc_worst: dict[str, float] = {}
    for trial in range(encoder_trials):
        rng = np.random.default_rng([seed, 100 + trial])
        for name, (xs, fn) in _encoder_cases(seed + trial, rng).items():
            enc_worst[name] = max(enc_worst.get(name, 0.0), _audit_function(fn, xs, rng))
    entries += [AuditEntry(k, v, encoder_trials) for k, v in enc_worst.items()]
    for label, kw in (("cmpa_step", {}), ("cmpa_step[residual,norm]", {"residual": True, "norm": True})):
        worst = 0.0
        for trial in range(encoder_trials):
            rng = np.random.default_rng([seed, 200 + trial])
            xs, fn = _cmpa_case(rng, **kw)
            worst = max(worst, _audit_function(fn, xs, rng))
        entries.append(AuditEntry(label, worst, encoder_trials))
    entries.append(AuditEntry("dcp_loss_end_to_end", _end_to_end(seed), 1))
    return entries


def format_audit(entries: list[AuditEntry], elapsed: float | None = None) -> str:
    lines = ["# gradient audit (central differences, h=1e-5)", f"tolerance: {TOLERANCE:g}", "",
             f"{'entry':<28} {'trials':>6} {'max_rel_error':>14}  status"]
    for e in entries:
        lines.append(f"{e.name:<28} {e.trials:>6} {e.max_rel_error:>14.3e}  {'ok' if e.passed else 'FAIL'}")
    ok = all(e.passed for e in entries)
    lines += ["", f"result: {'PASS' if ok else 'FAIL'}"]
    if elapsed is not None:
        lines.append(f"elapsed_s: {elapsed:.1f}")
    return "\n".join(lines) + "\n"


def gradcheck(trials: int = 10, seed: int = 0) -> tuple[bool, list[AuditEntry], float]:
    t0 = time.perf_counter()
    entries = run_audit(trials, seed)
    return all(e.passed for e in entries), entries, time.perf_counter() - t0
