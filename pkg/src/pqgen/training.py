"""Two fine-tuning regimes over product-question corpora.

`traditional` minimizes token-mean cross entropy over (context, question)
pairs. `ltd` minimizes cg1 + cg2 + lambda * div over question-pair triplets,
where div is the layer-averaged cosine similarity between the two branches'
mean-pooled decoder states; minimizing it pushes paired questions apart.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import corpus as C
from . import tensor as T
from .corpus import ProductRecord, SplitCorpus, Vocab
from .model import (DecoderTrace, ModelConfig, ModelParams, decode_teacher_forced,
                    encode, init_params)
from .tensor import Tensor

MODES = ("traditional", "ltd")


class NumericError(ArithmeticError):
    """A loss or gradient became non-finite."""


@dataclass(frozen=True)
class Triplet:
    product_id: str
    context_ids: tuple[int, ...]
    q1_ids: tuple[int, ...]
    q2_ids: tuple[int, ...]

    def __post_init__(self):
        if self.q1_ids == self.q2_ids:
            raise ValueError(f"triplet questions must differ: {self.q1_ids}")


@dataclass(frozen=True)
class TrainConfig:
    lambda_div: float = 0.1
    learning_rate: float = 1e-4
    batch_size: int = 8
    epochs: int = 3
    seed: int = 0
    max_pairs_per_product: int = 10
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 1.0

    def __post_init__(self):
        if self.lambda_div < 0:
            raise ValueError(f"lambda_div must be >= 0, got {self.lambda_div}")
        if self.learning_rate <= 0 or self.batch_size < 1 or self.epochs < 1:
            raise ValueError(f"invalid training configuration: {self}")
        if self.max_pairs_per_product < 1:
            raise ValueError("max_pairs_per_product must be >= 1")


@dataclass(frozen=True)
class LossBreakdown:
    cg1: float
    cg2: float
    div: float
    total: float


@dataclass
class TrainResult:
    params: ModelParams
    log_rows: list[dict]
    best_val_cg: float
    best_epoch: int
    final_val_cg: float


def build_triplets(records: Sequence[ProductRecord], vocab: Vocab,
                   max_pairs_per_product: int = 10, seed: int = 0) -> list[Triplet]:
    """All unordered distinct-question pairs per product, deterministically
    shuffled and capped; single-question products contribute nothing here."""
    if not records:
        raise C.CorpusSchemaError("cannot build triplets from an empty corpus")
    triplets: list[Triplet] = []
    for idx, rec in enumerate(records):
        ctx = tuple(vocab.encode_text(rec.context))
        qs = [tuple(vocab.encode_text(q)) for q in rec.questions]
        pairs = [(qs[i], qs[j]) for i in range(len(qs)) for j in range(i + 1, len(qs))
                 if qs[i] != qs[j]]
        if not pairs:
            continue
        rng = np.random.default_rng([seed, idx])
        order = rng.permutation(len(pairs))[:max_pairs_per_product]
        for k in order:
            q1, q2 = pairs[k]
            triplets.append(Triplet(rec.product_id, ctx, q1, q2))
    return triplets


def cg_loss(trace: DecoderTrace, target_ids: Sequence[int], pad_id: int = C.PAD) -> Tensor:
    """Token-mean cross entropy of the trace's logits against its shifted target."""
    tgt = tuple(int(i) for i in target_ids)
    if tgt != trace.predict_ids[:-1]:
        raise ValueError("cg_loss target does not match the trace's target")
    return T.cross_entropy(trace.logits, list(trace.predict_ids), pad_id=pad_id)


def div_loss(trace1: DecoderTrace, trace2: DecoderTrace) -> Tensor:
    """Layer-averaged cosine similarity of mean-pooled decoder states."""
    if len(trace1.layer_states) != len(trace2.layer_states):
        raise ValueError(
            f"layer count mismatch: {len(trace1.layer_states)} vs "
            f"{len(trace2.layer_states)}")
    cosines = []
    for s1, s2 in zip(trace1.layer_states, trace2.layer_states):
        p1 = T.mean_pool_sequence(s1, trace1.target_mask)
        p2 = T.mean_pool_sequence(s2, trace2.target_mask)
        cosines.append(T.cosine_similarity(p1, p2))
    return T.scale(T.add_n(cosines), 1.0 / len(cosines))


def ltd_loss(params: ModelParams, triplet: Triplet,
             lambda_div: float) -> tuple[LossBreakdown, Tensor]:
    """One shared encode, two teacher-forced branches; returns the logged
    breakdown and the differentiable total."""
    enc = encode(params, triplet.context_ids)
    t1 = decode_teacher_forced(params, enc, triplet.q1_ids)
    t2 = decode_teacher_forced(params, enc, triplet.q2_ids)
    cg1 = cg_loss(t1, triplet.q1_ids, params.config.pad_id)
    cg2 = cg_loss(t2, triplet.q2_ids, params.config.pad_id)
    div = div_loss(t1, t2)
    if lambda_div == 0.0:
        # Keep the regularizer off the graph so the optimization path is
        # identical to twin CG training.
        total = T.add(cg1, cg2)
    else:
        total = T.add_n([cg1, cg2, T.scale(div, lambda_div)])
    breakdown = LossBreakdown(cg1=cg1.item(), cg2=cg2.item(), div=div.item(),
                              total=cg1.item() + cg2.item() + lambda_div * div.item())
    return breakdown, total


class AdamState:
    """First/second moment estimates per parameter plus the step counter."""

    def __init__(self, params: ModelParams):
        self.t = 0
        self.m = {name: np.zeros_like(t.data) for name, t in params.items()}
        self.v = {name: np.zeros_like(t.data) for name, t in params.items()}


def adam_step(params: ModelParams, grads: dict[str, np.ndarray], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """Standard Adam with bias correction; eps sits outside the sqrt."""
    state.t += 1
    t = state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = 0.0
        elif g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} != param shape "
                             f"{p.data.shape} for {name}")
        m = state.m[name] = beta1 * state.m[name] + (1.0 - beta1) * g
        v = state.v[name] = beta2 * state.v[name] + (1.0 - beta2) * (g * g)
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)


def clip_gradients(params: ModelParams, max_norm: float) -> float:
    """Global-norm clipping in place; returns the pre-clip norm."""
    sq = 0.0
    for t in params.tensors():
        if t.grad is not None:
            sq += float(np.sum(t.grad * t.grad))
    total = math.sqrt(sq)
    if max_norm > 0 and total > max_norm:
        factor = max_norm / total
        for t in params.tensors():
            if t.grad is not None:
                t.grad = t.grad * factor
    return total


def mean_cg(params: ModelParams, records: Sequence[ProductRecord], vocab: Vocab) -> float:
    """Mean token-mean cross entropy over every (context, question) pair."""
    if not records:
        raise C.DataSplitError("cannot evaluate CG loss on an empty record list")
    losses = []
    with T.no_grad():
        for rec in records:
            enc = encode(params, vocab.encode_text(rec.context))
            for q in rec.questions:
                trace = decode_teacher_forced(params, enc, vocab.encode_text(q))
                losses.append(T.cross_entropy(trace.logits, list(trace.predict_ids),
                                              pad_id=params.config.pad_id).item())
    return math.fsum(losses) / len(losses)


def _product_items(records: Sequence[ProductRecord], vocab: Vocab, mode: str,
                   cfg: TrainConfig) -> list[list]:
    """Per-product training items. An item is either a Triplet or a
    (product_id, context_ids, q_ids) single."""
    items: list[list] = []
    by_pid = {}
    if mode == "ltd":
        for t in build_triplets(records, vocab, cfg.max_pairs_per_product, cfg.seed):
            by_pid.setdefault(t.product_id, []).append(t)
    for rec in records:
        ctx = tuple(vocab.encode_text(rec.context))
        if mode == "traditional":
            items.append([(rec.product_id, ctx, tuple(vocab.encode_text(q)))
                          for q in rec.questions])
        else:
            got = by_pid.get(rec.product_id)
            if got is None:
                # Single-question product: one CG branch, no pair regularizer.
                got = [(rec.product_id, ctx, tuple(vocab.encode_text(rec.questions[0])))]
            items.append(got)
    return items


def train(split: SplitCorpus, vocab: Vocab, model_config: ModelConfig,
          train_config: TrainConfig, mode: str = "ltd",
          log_path=None) -> TrainResult:
    """Run one fine-tuning regime; retains the parameters of the epoch with
    the lowest validation mean CG loss. Deterministic given the seed."""
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    if not split.train or not split.validation:
        raise C.DataSplitError("train and validation splits must be non-empty")
    lam = train_config.lambda_div
    params = init_params(model_config, train_config.seed)
    state = AdamState(params)
    per_product = _product_items(split.train, vocab, mode, train_config)

    rows: list[dict] = []
    best_val = math.inf
    best_epoch = -1
    best_params = params.copy()
    final_val = math.nan
    step = 0
    for epoch in range(train_config.epochs):
        order = np.random.default_rng([train_config.seed, 1000 + epoch]).permutation(
            len(per_product))
        flat = [item for p in order for item in per_product[p]]
        for start in range(0, len(flat), train_config.batch_size):
            batch = flat[start:start + train_config.batch_size]
            T.reset_tape()
            T.zero_grad(params.tensors())
            enc_cache: dict[str, object] = {}
            scalars: list[Tensor] = []
            branches = 0
            tript_cg1, tript_cg2, tript_div = [], [], []
            single_cg = []
            for item in batch:
                if isinstance(item, Triplet):
                    enc = enc_cache.get(item.product_id)
                    if enc is None:
                        enc = enc_cache[item.product_id] = encode(params, item.context_ids)
                    t1 = decode_teacher_forced(params, enc, item.q1_ids)
                    t2 = decode_teacher_forced(params, enc, item.q2_ids)
                    cg1 = cg_loss(t1, item.q1_ids, model_config.pad_id)
                    cg2 = cg_loss(t2, item.q2_ids, model_config.pad_id)
                    scalars.extend([cg1, cg2])
                    if lam > 0:
                        div = div_loss(t1, t2)
                        scalars.append(T.scale(div, lam))
                    else:
                        with T.no_grad():
                            div = div_loss(t1, t2)
                    branches += 2
                    tript_cg1.append(cg1.item())
                    tript_cg2.append(cg2.item())
                    tript_div.append(div.item())
                else:
                    pid, ctx, q_ids = item
                    enc = enc_cache.get(pid)
                    if enc is None:
                        enc = enc_cache[pid] = encode(params, ctx)
                    trace = decode_teacher_forced(params, enc, q_ids)
                    cg = cg_loss(trace, q_ids, model_config.pad_id)
                    scalars.append(cg)
                    branches += 1
                    single_cg.append(cg.item())
            objective = T.scale(T.add_n(scalars), 1.0 / branches)
            value = objective.item()
            if not math.isfinite(value):
                raise NumericError(f"non-finite loss {value} at step {step}")
            T.backward(objective)
            clip_gradients(params, train_config.clip_norm)
            grads = {name: t.grad for name, t in params.items()}
            adam_step(params, grads, state, train_config.learning_rate,
                      train_config.beta1, train_config.beta2, train_config.eps)
            step += 1
            if tript_cg1:
                cg1_mean = math.fsum(tript_cg1) / len(tript_cg1)
                cg2_mean = math.fsum(tript_cg2) / len(tript_cg2)
                div_mean = math.fsum(tript_div) / len(tript_div)
                row = {"kind": "step", "step": step, "epoch": epoch,
                       "cg1": cg1_mean, "cg2": cg2_mean, "div": div_mean,
                       "total": cg1_mean + cg2_mean + lam * div_mean,
                       "objective": value}
            else:
                cg_mean = math.fsum(single_cg) / len(single_cg)
                row = {"kind": "step", "step": step, "epoch": epoch,
                       "cg1": cg_mean, "cg2": None, "div": None,
                       "total": cg_mean, "objective": value}
            rows.append(row)
        T.reset_tape()
        final_val = mean_cg(params, split.validation, vocab)
        if not math.isfinite(final_val):
            raise NumericError(f"non-finite validation loss {final_val}")
        rows.append({"kind": "epoch", "epoch": epoch, "val_cg": final_val})
        if final_val < best_val:
            best_val = final_val
            best_epoch = epoch
            best_params = params.copy()
    if log_path is not None:
        with open(log_path, "w", encoding="utf-8") as fh:
            for row in rows:
                fh.write(json.dumps(row) + "\n")
    return TrainResult(params=best_params, log_rows=rows, best_val_cg=best_val,
                       best_epoch=best_epoch, final_val_cg=final_val)
