"""Training loop, multi-sample inference, filtered ranking evaluation, and the
inference-cost benchmark."""
from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import numcore as nc
from .kgcore import HEAD, RELATION, SLOTS, TAIL, KnowledgeGraph, Triple, filtered_candidates
from .model import (ContrastiveBank, Relphormer, batch_contextual_loss, collate, mkm_loss,
                    total_loss)
from .triple2seq import RANDOM_ENTITY, MaskedSample, make_sample, sample_center_order

log = logging.getLogger(__name__)

ENTITY_PREDICTION = "entity-prediction"
RELATION_PREDICTION = "relation-prediction"
RAW, FILTERED = "raw", "filtered"


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 64
    max_epochs: int = 100
    warmup: float = 0.1
    clip: float = 1.0
    weight_decay: float = 0.01
    patience: int = 20
    k: int = 8
    K: int = 1
    eval_K: int = 1
    eval_every: int = 1
    seed: int = 0
    mask_policy: str = ENTITY_PREDICTION
    uniform_context: bool = False
    avg_logits: bool = False
    workers: int = 1

    def __post_init__(self):
        for name in ("lr", "batch_size", "max_epochs", "clip", "K", "eval_K", "eval_every", "workers"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("patience", "k", "weight_decay", "seed"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0.0 <= self.warmup < 1.0:
            raise ValueError("warmup fraction must lie in [0, 1)")
        if self.mask_policy not in (ENTITY_PREDICTION, RELATION_PREDICTION):
            raise ValueError(f"unknown mask_policy {self.mask_policy!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


class NonFiniteLossError(RuntimeError):
    def __init__(self, epoch: int, step: int, mkm: float, contextual: float):
        self.epoch, self.step, self.mkm, self.contextual = epoch, step, mkm, contextual
        super().__init__(f"non-finite loss at epoch {epoch}, step {step}: "
                         f"loss_mkm={mkm!r} loss_contextual={contextual!r}")


def query_slots(policy: str) -> tuple[str, ...]:
    return (HEAD, TAIL) if policy == ENTITY_PREDICTION else (RELATION,)


def train_slot(policy: str) -> str:
    return RANDOM_ENTITY if policy == ENTITY_PREDICTION else RELATION


# -- optimization ---------------------------------------------------------------

def lr_at(step: int, total: int, warmup_steps: int, peak: float) -> float:
    """Linear warmup to ``peak`` over ``warmup_steps``, then linear decay to 0 at ``total``."""
    if warmup_steps > 0 and step <= warmup_steps:
        return peak * step / warmup_steps
    if total <= warmup_steps:
        return peak
    return peak * max(0.0, (total - step) / (total - warmup_steps))


def clip_grad_norm(params, max_norm: float) -> float:
    """Scale gradients in place so their global norm is at most ``max_norm``; returns the pre-clip norm."""
    grads = [p.grad for p in params if p.grad is not None]
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads))
    if norm > max_norm:
        s = max_norm / norm
        for g in grads:
            g *= s
    return norm


class AdamW:
    def __init__(self, params, weight_decay: float = 0.01, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.wd = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        # no decay on biases, norms, and the structure encoder
        self.decay = [p.data.ndim >= 2 and not (p.name or "").startswith("struct.") for p in self.params]

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v, decay in zip(self.params, self.m, self.v, self.decay):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            if decay and self.wd:
                p.data -= lr * self.wd * p.data
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# -- metrics ---------------------------------------------------------------------

def rank_of(scores: np.ndarray, gold: int, exclude=()) -> float:
    """1-based rank of ``scores[gold]``; ties take the mean rank of the tied block."""
    s = scores[gold]
    keep = np.ones(scores.shape[0], dtype=bool)
    keep[gold] = False
    if exclude:
        keep[list(exclude)] = False
    other = scores[keep]
    return 1.0 + float(np.count_nonzero(other > s)) + 0.5 * float(np.count_nonzero(other == s))


def ranking_metrics(ranks) -> dict:
    r = np.asarray(ranks, dtype=np.float64)
    if r.size == 0:
        raise ValueError("no ranks to aggregate")
    return {
        "mr": float(r.mean()),
        "mrr": float((1.0 / r).mean()),
        "hits1": float((r <= 1).mean()),
        "hits3": float((r <= 3).mean()),
        "hits10": float((r <= 10).mean()),
        "n": int(r.size),
    }


@dataclass
class Metrics:
    split: str
    setting: str
    overall: dict
    directions: dict = field(default_factory=dict)
    ranks: dict = field(default_factory=dict, repr=False)

    @property
    def mr(self) -> float:
        return self.overall["mr"]

    @property
    def mrr(self) -> float:
        return self.overall["mrr"]

    @property
    def hits1(self) -> float:
        return self.overall["hits1"]

    @property
    def hits3(self) -> float:
        return self.overall["hits3"]

    @property
    def hits10(self) -> float:
        return self.overall["hits10"]

    def to_json(self) -> dict:
        out = {"split": self.split, "setting": self.setting}
        out.update({k: self.overall[k] for k in ("mr", "mrr", "hits1", "hits3", "hits10")})
        out["directions"] = self.directions
        return out


# -- inference --------------------------------------------------------------------

def _query_samples(kg: KnowledgeGraph, center: Triple, slot: str, K: int, k: int,
                   rng: np.random.Generator, uniform_context: bool = False) -> list[MaskedSample]:
    return [make_sample(kg, center, slot, k, rng, uniform_context) for _ in range(K)]


def _average(outputs: np.ndarray, avg_logits: bool) -> np.ndarray:
    if not avg_logits:
        return outputs.mean(axis=0)
    z = outputs.mean(axis=0)
    e = np.exp(z - z.max())
    return e / e.sum()


def infer_multi(model, kg: KnowledgeGraph, query: tuple[Triple, str], K: int, k: int,
                rng: np.random.Generator, avg_logits: bool = False, uniform_context: bool = False) -> np.ndarray:
    """Average of K independently sampled predictions for one masked query.

    ``query`` is ``(triple, slot)``.  Probabilities are averaged unless
    ``avg_logits``, in which case logits are averaged and then softmaxed.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    center, slot = query
    samples = _query_samples(kg, Triple(*center), slot, K, k, rng, uniform_context)
    return _average(model.predict_proba(samples, avg_logits=avg_logits), avg_logits)


def candidate_range(kg: KnowledgeGraph, slot: str) -> tuple[int, int]:
    return (kg.n_entities, kg.node_count) if slot == RELATION else (0, kg.n_entities)


def score_queries(model, kg: KnowledgeGraph, queries: list[tuple[Triple, str]], K: int, k: int,
                  seed: int, avg_logits: bool = False, uniform_context: bool = False,
                  workers: int = 1, chunk: int = 128) -> np.ndarray:
    """Averaged prediction vectors for many queries, shape (n_queries, vocab).

    Query ``j`` draws its sub-graphs from ``default_rng([seed, j])`` so the
    result does not depend on chunking or worker count.
    """
    def run(lo: int) -> np.ndarray:
        hi = min(lo + chunk, len(queries))
        samples = []
        for j in range(lo, hi):
            center, slot = queries[j]
            samples.extend(_query_samples(kg, center, slot, K, k, np.random.default_rng([seed, j]),
                                          uniform_context))
        out = model.predict_proba(samples, avg_logits=avg_logits)
        out = out.reshape(hi - lo, K, -1)
        return np.stack([_average(o, avg_logits) for o in out])

    starts = list(range(0, len(queries), chunk))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(run, starts))
    else:
        parts = [run(s) for s in starts]
    return np.concatenate(parts, axis=0)


def rank_queries(kg: KnowledgeGraph, queries, scores: np.ndarray, setting: str) -> list[float]:
    ranks = []
    for (center, slot), row in zip(queries, scores):
        lo, hi = candidate_range(kg, slot)
        gold = center[SLOTS.index(slot)]
        exclude = filtered_candidates(kg, center, slot) if setting == FILTERED else ()
        ranks.append(rank_of(row[lo:hi], gold - lo, [e - lo for e in exclude]))
    return ranks


def evaluate(model, kg: KnowledgeGraph, split: str = "test", setting: str = FILTERED, K: int = 1,
             k: int = 8, policy: str = ENTITY_PREDICTION, seed: int = 0, avg_logits: bool = False,
             uniform_context: bool = False, workers: int = 1, settings: tuple[str, ...] | None = None):
    """Rank each gold answer among the legal candidates.

    ``model`` needs a ``predict_proba(samples, avg_logits=...)`` method.
    Returns a :class:`Metrics`, or a dict of them keyed by setting when
    ``settings`` is given (scores are computed once and shared).
    """
    triples = kg.split(split)
    if not triples:
        raise ValueError(f"split {split!r} is empty")
    queries = [(t, slot) for t in triples for slot in query_slots(policy)]
    scores = score_queries(model, kg, queries, K, k, seed, avg_logits, uniform_context, workers)
    out = {}
    for st in settings or (setting,):
        if st not in (RAW, FILTERED):
            raise ValueError(f"unknown setting {st!r}")
        ranks = rank_queries(kg, queries, scores, st)
        by_dir: dict[str, list[float]] = {}
        for (_, slot), r in zip(queries, ranks):
            by_dir.setdefault(slot, []).append(r)
        out[st] = Metrics(split, st, ranking_metrics(ranks),
                          {d: ranking_metrics(rs) for d, rs in by_dir.items()}, by_dir)
    return out if settings else out[setting]


# -- training -------------------------------------------------------------------------

@dataclass
class TrainResult:
    history: list[dict]
    best_epoch: int
    best_mrr: float
    stopped_early: bool
    steps: int


def train(kg: KnowledgeGraph, model: Relphormer, cfg: TrainConfig, on_epoch=None) -> TrainResult:
    """Train ``model`` in place; the best-validation parameters are restored at the end.

    ``on_epoch`` (optional) receives each epoch's log record.
    """
    c = model.config
    rng = np.random.default_rng(cfg.seed)
    params = model.parameters()
    opt = AdamW(params, weight_decay=cfg.weight_decay)
    n = len(kg.train)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = steps_per_epoch * cfg.max_epochs
    warmup_steps = int(cfg.warmup * total_steps)
    bank = ContrastiveBank()
    slot = train_slot(cfg.mask_policy)
    use_valid = bool(kg.valid)

    history: list[dict] = []
    best_mrr, best_epoch, best_state = -1.0, 0, None
    step = 0
    stopped_early = False
    for epoch in range(1, cfg.max_epochs + 1):
        order = sample_center_order(kg, rng)
        sums = np.zeros(2)
        model.training = True
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            samples = [make_sample(kg, kg.train[i], slot, cfg.k, rng, cfg.uniform_context) for i in idx]
            batch = collate(samples, c.m)
            logits, hidden = model.forward(batch, rng)
            l_mkm = mkm_loss(logits, batch.targets, c.loss_kind)
            if c.lam > 0:
                prev = np.zeros((len(samples), c.hidden))
                has_prev = np.zeros(len(samples), dtype=bool)
                for b, s in enumerate(samples):
                    entry = bank.get(s.center_key)
                    if entry is not None:
                        prev[b], has_prev[b] = entry, True
                l_ctx = batch_contextual_loss(hidden, prev, has_prev, c.tau)
            else:
                l_ctx = nc.Tensor(0.0)
            loss = total_loss(l_mkm, l_ctx, c.lam)
            step += 1
            if not np.isfinite(loss.data):
                raise NonFiniteLossError(epoch, step, float(l_mkm.data), float(l_ctx.data))
            nc.zero_grad(params)
            nc.backward(loss)
            clip_grad_norm(params, cfg.clip)
            opt.step(lr_at(step, total_steps, warmup_steps, cfg.lr))
            for b, s in enumerate(samples):
                bank.update(s.center_key, hidden.data[b])
            sums += (float(l_mkm.data) * len(samples), float(l_ctx.data) * len(samples))
        model.training = False

        record = {"epoch": epoch, "loss_mkm": float(sums[0] / n), "loss_contextual": float(sums[1] / n)}
        if use_valid and (epoch % cfg.eval_every == 0 or epoch == cfg.max_epochs):
            m = evaluate(model, kg, "valid", FILTERED, K=cfg.eval_K, k=cfg.k, policy=cfg.mask_policy,
                         seed=cfg.seed, avg_logits=cfg.avg_logits, uniform_context=cfg.uniform_context,
                         workers=cfg.workers)
            record.update({"split": "valid", "setting": FILTERED, "mr": m.mr, "mrr": m.mrr,
                           "hits1": m.hits1, "hits3": m.hits3, "hits10": m.hits10})
            if m.mrr > best_mrr:
                best_mrr, best_epoch, best_state = m.mrr, epoch, model.state_dict()
        history.append(record)
        log.info("epoch %d: %s", epoch, {k: (round(v, 5) if isinstance(v, float) else v) for k, v in record.items()})
        if on_epoch is not None:
            on_epoch(record)
        if use_valid and best_epoch and epoch - best_epoch >= cfg.patience:
            stopped_early = True
            break

    if best_state is not None:
        model.load_state_dict(best_state)
    else:
        best_epoch = len(history)
    return TrainResult(history, best_epoch, best_mrr, stopped_early, step)


# -- benchmark -------------------------------------------------------------------------

class CountingModel:
    """Wraps a model and counts single-sequence forward passes."""

    def __init__(self, model: Relphormer):
        self.model = model
        self.forwards = 0

    def logits(self, sample: MaskedSample) -> np.ndarray:
        self.forwards += 1
        logits, _ = self.model.forward_sample(sample)
        return logits.data


def bench_inference(model: Relphormer, kg: KnowledgeGraph, n_queries: int, K: int = 1, k: int = 8,
                    seed: int = 0, split: str = "test") -> dict:
    """Compare masked prediction (K forwards/query) with a score-every-candidate baseline.

    The baseline fills the masked tail with each candidate entity in turn
    and scores the filled sequence with one forward per candidate.
    """
    triples = kg.split(split)[:n_queries]
    if not triples:
        raise ValueError("no queries to benchmark")
    was = model.training
    model.training = False
    masked = CountingModel(model)
    t0 = time.perf_counter()
    for j, t in enumerate(triples):
        rng = np.random.default_rng([seed, j])
        probs = []
        for _ in range(K):
            z = masked.logits(make_sample(kg, t, TAIL, k, rng))
            e = np.exp(z - z.max())
            probs.append(e / e.sum())
        np.mean(probs, axis=0)
    t_masked = time.perf_counter() - t0

    baseline = CountingModel(model)
    t0 = time.perf_counter()
    for j, t in enumerate(triples):
        rng = np.random.default_rng([seed, j])
        base = make_sample(kg, t, TAIL, k, rng)
        scores = np.empty(kg.n_entities)
        for e in range(kg.n_entities):
            seq = base.sequence.copy()
            seq[base.mask_position] = e
            filled = MaskedSample(seq, base.adjacency, e, base.mask_slot, base.center_key, base.roles)
            z = baseline.logits(filled)
            scores[e] = z[e] - np.logaddexp.reduce(z)
    t_scoreall = time.perf_counter() - t0
    model.training = was

    nq = len(triples)
    mf = masked.forwards / nq
    sf = baseline.forwards / nq
    return {
        "queries": nq,
        "K": K,
        "masked_forwards_per_query": mf,
        "scoreall_forwards_per_query": sf,
        "count_ratio": sf / mf,
        "wall_times": {"masked_s": t_masked, "scoreall_s": t_scoreall,
                       "masked_per_query_s": t_masked / nq, "scoreall_per_query_s": t_scoreall / nq},
        "wall_ratio": t_scoreall / t_masked if t_masked > 0 else float("inf"),
    }
