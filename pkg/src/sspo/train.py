"""Cold-start SFT and group-relative policy optimization with a clipped surrogate."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .model import PolicyParams, SeqBatch, batch_logprob_grad, batch_logprobs, prefix_embeddings, sample_batch
from .rewards import GroupAdvantages, composite_reward, group_advantages
from .tokenizer import Tokenizer
from .trace import LabelSet, StructuredTrace, parse_trace

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    sft_lr: float = 2e-4
    sft_epochs: int = 4
    sft_batch: int = 16
    rl_lr: float = 2e-5
    rl_epochs: int = 8
    rl_batch: int = 1
    grad_accum: int = 4
    group_size: int = 4
    clip_eps: float = 0.2
    kl_beta: float = 0.04
    adv_eps: float = 1e-8
    temperature: float = 1.0
    seed: int = 0
    # queries drawn per RL epoch; 0 means the whole training split
    rl_queries: int = 0
    max_new: int = 72

    def __post_init__(self):
        if self.sft_lr < 0 or self.rl_lr < 0:
            raise ValueError("learning rates must be non-negative")
        if self.group_size < 2:
            raise ValueError("group_size must be >= 2")
        if not 0.0 < self.clip_eps < 1.0:
            raise ValueError("clip_eps must lie in (0, 1)")
        if self.kl_beta < 0:
            raise ValueError("kl_beta must be >= 0")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if min(self.sft_batch, self.rl_batch, self.grad_accum) < 1:
            raise ValueError("batch sizes and grad_accum must be >= 1")
        if min(self.sft_epochs, self.rl_epochs, self.rl_queries) < 0:
            raise ValueError("epoch counts must be non-negative")


@dataclass(frozen=True)
class Example:
    signal: np.ndarray
    query_ids: tuple[int, ...]
    target_ids: tuple[int, ...]
    truth: LabelSet = frozenset()


def make_examples(records, tokenizer: Tokenizer, query: str) -> list[Example]:
    q = tuple(tokenizer.encode(query))
    return [
        Example(r.signal, q, tuple(tokenizer.encode(r.teacher_trace)) + (tokenizer.eos_id,), r.truth)
        for r in records
    ]


# ------------------------------------------------------------------------ SFT


def sft_loss_and_grad(batch: Sequence[Example], params: PolicyParams) -> tuple[float, np.ndarray]:
    """Mean per-token NLL over the batch and its exact gradient."""
    if not batch:
        raise ValueError("empty SFT batch")
    sb = SeqBatch.make([e.signal for e in batch], [e.query_ids for e in batch], [e.target_ids for e in batch])
    lp, tr = batch_logprobs(params, sb)
    n_tok = int(sb.n_target.sum())
    loss = -float(lp.sum()) / n_tok
    grad = batch_logprob_grad(params, tr, np.full(lp.shape, -1.0 / n_tok))
    return loss, grad.vec


def sft_loss(batch: Sequence[Example], params: PolicyParams) -> float:
    sb = SeqBatch.make([e.signal for e in batch], [e.query_ids for e in batch], [e.target_ids for e in batch])
    lp, _ = batch_logprobs(params, sb)
    return -float(lp.sum()) / int(sb.n_target.sum())


# ----------------------------------------------------------------------- Adam


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_step(
    params: PolicyParams,
    grad: np.ndarray,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[PolicyParams, AdamState]:
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != params.vec.shape or state.m.shape != params.vec.shape:
        raise ValueError("gradient/optimizer state size does not match parameters")
    bad = np.flatnonzero(~np.isfinite(grad))
    if bad.size:
        i = int(bad[0])
        raise FloatingPointError(f"non-finite gradient at coordinate {i} ({params.name_of(i)}): {grad[i]}")
    t = state.t + 1
    m = beta1 * state.m + (1 - beta1) * grad
    v = beta2 * state.v + (1 - beta2) * grad * grad
    m_hat = m / (1 - beta1**t)
    v_hat = v / (1 - beta2**t)
    new = PolicyParams(params.cfg, params.vec - lr * m_hat / (np.sqrt(v_hat) + eps))
    return new, AdamState(m, v, t)


def train_sft(
    examples: Sequence[Example],
    cfg: TrainConfig,
    params: PolicyParams,
    on_epoch: Callable[[dict], None] | None = None,
) -> tuple[PolicyParams, list[dict]]:
    """Seeded mini-batch SFT. Log entry 0 is the loss before any update."""
    rng = np.random.default_rng(cfg.seed)
    state = AdamState.zeros(len(params))
    history = [{"epoch": 0, "loss": _dataset_loss(examples, params, cfg.sft_batch)}]
    for epoch in range(1, cfg.sft_epochs + 1):
        order = rng.permutation(len(examples))
        losses = []
        for start in range(0, len(order), cfg.sft_batch):
            batch = [examples[i] for i in order[start : start + cfg.sft_batch]]
            loss, grad = sft_loss_and_grad(batch, params)
            if not np.isfinite(loss):
                raise FloatingPointError(f"non-finite SFT loss at epoch {epoch}")
            params, state = adam_step(params, grad, state, cfg.sft_lr)
            losses.append(loss)
        entry = {"epoch": epoch, "loss": float(np.mean(losses))}
        history.append(entry)
        log.info("sft epoch %d loss %.4f", epoch, entry["loss"])
        if on_epoch:
            on_epoch(entry)
    return params, history


def _dataset_loss(examples, params, batch_size) -> float:
    total, n_tok = 0.0, 0
    for start in range(0, len(examples), batch_size):
        batch = examples[start : start + batch_size]
        sb = SeqBatch.make([e.signal for e in batch], [e.query_ids for e in batch], [e.target_ids for e in batch])
        lp, _ = batch_logprobs(params, sb)
        total -= float(lp.sum())
        n_tok += int(sb.n_target.sum())
    return total / n_tok


# ----------------------------------------------------------------------- SSPO


@dataclass
class SampledGroup:
    signal: np.ndarray
    query_ids: tuple[int, ...]
    sequences: list[list[int]]
    old_logprobs: list[np.ndarray]


class SSPOResult(NamedTuple):
    objective: float
    grad: np.ndarray
    ratios: np.ndarray
    surrogate: np.ndarray
    kl_tokens: list[np.ndarray]
    kl_seq: np.ndarray


def k3_terms(cur_lp: np.ndarray, ref_lp: np.ndarray) -> np.ndarray:
    """Per-token ``x - ln x - 1`` with ``x = pi_ref / pi_theta``."""
    d = np.asarray(ref_lp) - np.asarray(cur_lp)
    return np.expm1(d) - d


def sspo_objective_and_grad(
    group: SampledGroup,
    advantages: GroupAdvantages | np.ndarray,
    params: PolicyParams,
    ref: PolicyParams,
    cfg: TrainConfig,
) -> SSPOResult:
    """Clipped sequence-ratio surrogate minus token-averaged k3 KL; gradient ascends it."""
    adv = np.asarray(getattr(advantages, "advantages", advantages), dtype=np.float64)
    g = len(group.sequences)
    if adv.shape != (g,) or len(group.old_logprobs) != g or g == 0:
        raise ValueError(f"group of {g} sequences does not match {adv.shape[0]} advantages")
    sb = SeqBatch.make([group.signal] * g, [group.query_ids] * g, group.sequences)
    mask = sb.target_mask
    cur, tr = batch_logprobs(params, sb)
    ref_lp, _ = batch_logprobs(ref, sb)

    seq_old = np.array([float(np.sum(o)) for o in group.old_logprobs])
    rho = np.exp(cur.sum(1) - seq_old)
    unclipped = rho * adv
    clipped = np.clip(rho, 1 - cfg.clip_eps, 1 + cfg.clip_eps) * adv
    surrogate = np.minimum(unclipped, clipped)
    d_seq = np.where(unclipped <= clipped, rho * adv, 0.0)

    n_tok = np.maximum(sb.n_target, 1).astype(np.float64)
    k3 = np.where(mask, k3_terms(cur, ref_lp), 0.0)
    kl_seq = k3.sum(1) / n_tok
    objective = float(np.mean(surrogate - cfg.kl_beta * kl_seq))

    # d k3 / d log pi_theta = 1 - x
    x = np.where(mask, np.exp(ref_lp - cur), 1.0)
    w = (d_seq[:, None] - cfg.kl_beta * (1.0 - x) / n_tok[:, None]) / g
    grad = batch_logprob_grad(params, tr, np.where(mask, w, 0.0)).vec
    kl_tokens = [k3[i, mask[i]] for i in range(g)]
    return SSPOResult(objective, grad, rho, surrogate, kl_tokens, kl_seq)


def score_function_grad(group: SampledGroup, adv: np.ndarray, params: PolicyParams) -> np.ndarray:
    """(1/G) sum_i A_i grad log pi(o_i | I) -- the REINFORCE-with-baseline direction."""
    g = len(group.sequences)
    sb = SeqBatch.make([group.signal] * g, [group.query_ids] * g, group.sequences)
    _, tr = batch_logprobs(params, sb)
    w = np.repeat((np.asarray(adv) / g)[:, None], sb.tokens.shape[1], axis=1)
    return batch_logprob_grad(params, tr, w).vec


@dataclass
class Rollout:
    group: SampledGroup
    traces: list[StructuredTrace]
    texts: list[str]


def rollout_group(
    params: PolicyParams,
    example: Example,
    tokenizer: Tokenizer,
    label_vocab,
    g: int,
    temperature: float,
    max_new: int,
    rng: np.random.Generator,
) -> Rollout:
    prefix = prefix_embeddings(params, example.signal[None], example.query_ids)
    prefix = np.repeat(prefix, g, axis=0)
    res = sample_batch(params, prefix, tokenizer.eos_id, max_new, temperature, rng=rng)
    texts = [tokenizer.decode(tokenizer.strip_eos(ids)) for ids in res.ids]
    traces = [parse_trace(t, label_vocab) for t in texts]
    group = SampledGroup(example.signal, example.query_ids, res.ids, res.logprobs)
    return Rollout(group, traces, texts)


def train_sspo(
    examples: Sequence[Example],
    cfg: TrainConfig,
    sft_params: PolicyParams,
    tokenizer: Tokenizer,
    label_vocab,
    on_step: Callable[[dict], None] | None = None,
) -> tuple[PolicyParams, list[dict]]:
    """Group rollouts -> rewards -> advantages -> accumulated clipped-surrogate steps.

    The reference policy stays frozen at ``sft_params`` for the whole run.
    """
    ref = sft_params.copy()
    params = sft_params.copy()
    state = AdamState.zeros(len(params))
    rng = np.random.default_rng(cfg.seed)
    history: list[dict] = []
    acc = np.zeros(len(params))
    window: list[dict] = []
    n_queries = cfg.rl_queries or len(examples)
    for epoch in range(cfg.rl_epochs):
        order = rng.permutation(len(examples))[:n_queries]
        for idx in order:
            ex = examples[int(idx)]
            old = params.copy()
            ro = rollout_group(old, ex, tokenizer, label_vocab, cfg.group_size, cfg.temperature, cfg.max_new, rng)
            rewards = [composite_reward(t, ex.truth) for t in ro.traces]
            adv = group_advantages([r.total for r in rewards], cfg.adv_eps)
            res = sspo_objective_and_grad(ro.group, adv, params, ref, cfg)
            # the optimizer minimizes, the objective is maximized
            acc -= res.grad / cfg.grad_accum
            window.append(
                {
                    "total": np.mean([r.total for r in rewards]),
                    "struct": np.mean([r.structure for r in rewards]),
                    "dice": np.mean([r.diagnosis for r in rewards]),
                    "kl": float(np.mean(res.kl_seq)),
                    "objective": res.objective,
                }
            )
            if len(window) == cfg.grad_accum:
                params, state = adam_step(params, acc, state, cfg.rl_lr)
                acc[:] = 0.0
                entry = {
                    "step": state.t,
                    "epoch": epoch + 1,
                    "mean_total": float(np.mean([w["total"] for w in window])),
                    "mean_struct": float(np.mean([w["struct"] for w in window])),
                    "mean_dice": float(np.mean([w["dice"] for w in window])),
                    "kl_mean": float(np.mean([w["kl"] for w in window])),
                    "loss": -float(np.mean([w["objective"] for w in window])),
                }
                history.append(entry)
                window = []
                if on_step:
                    on_step(entry)
    return params, history


# ------------------------------------------------------------------ decoding


def greedy_decode(
    params: PolicyParams,
    signals: Sequence[np.ndarray],
    query_ids: Sequence[int],
    tokenizer: Tokenizer,
    max_new: int = 72,
    batch_size: int = 64,
) -> list[str]:
    texts: list[str] = []
    for start in range(0, len(signals), batch_size):
        sig = np.stack(signals[start : start + batch_size])
        prefix = prefix_embeddings(params, sig, query_ids)
        res = sample_batch(params, prefix, tokenizer.eos_id, max_new, greedy=True)
        texts += [tokenizer.decode(tokenizer.strip_eos(ids)) for ids in res.ids]
    return texts
