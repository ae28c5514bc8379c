"""Structure-enhanced transformer over linearized sub-graphs.

Input: a batch of :class:`~relphormer.triple2seq.MaskedSample`.  Tokens are
embedded with the vocabulary table (plus an optional role embedding for the
global/head/relation/tail/context slots), encoded by post-LN transformer
layers whose attention logits receive the structural bias φ, and the hidden
state at the MASK position is scored against the same vocabulary table.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import numcore as nc
from .numcore import Tensor
from .structbias import batch_powers
from .triple2seq import N_ROLES, MaskedSample

NEG_INF = -1e30
LOSS_KINDS = ("ce", "bce")


@dataclass
class ModelConfig:
    vocab_size: int
    hidden: int = 64
    layers: int = 2
    heads: int = 4
    ffn: int = 256
    m: int = 2
    tau: float = 0.1
    lam: float = 0.1
    dropout: float = 0.1
    loss_kind: str = "ce"
    use_structure: bool = True
    per_layer_bias: bool = False
    role_embeddings: bool = True
    init_std: float = 0.1

    def __post_init__(self):
        if self.hidden % self.heads:
            raise ValueError(f"hidden={self.hidden} not divisible by heads={self.heads}")
        if self.tau <= 0:
            raise ValueError("tau must be > 0")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.m < 1:
            raise ValueError("m must be >= 1")
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"loss_kind must be one of {LOSS_KINDS}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class Batch:
    ids: np.ndarray        # (B, L) token ids, padded with 0
    roles: np.ndarray      # (B, L)
    key_mask: np.ndarray   # (B, 1, 1, L) additive: 0 for real tokens, NEG_INF for padding
    powers: np.ndarray     # (B, L, L, m)
    mask_pos: np.ndarray   # (B,)
    targets: np.ndarray    # (B,)
    lengths: np.ndarray    # (B,)

    def __len__(self) -> int:
        return self.ids.shape[0]


def collate(samples: list[MaskedSample], m: int) -> Batch:
    lengths = np.array([len(s) for s in samples], dtype=np.int64)
    L = int(lengths.max())
    B = len(samples)
    ids = np.zeros((B, L), dtype=np.int64)
    roles = np.zeros((B, L), dtype=np.int64)
    key_mask = np.zeros((B, 1, 1, L), dtype=np.float64)
    for b, s in enumerate(samples):
        if s.adjacency.shape != (len(s), len(s)):
            raise ValueError(f"adjacency shape {s.adjacency.shape} does not match sequence length {len(s)}")
        ids[b, :len(s)] = s.sequence
        roles[b, :len(s)] = s.roles
        key_mask[b, 0, 0, len(s):] = NEG_INF
    return Batch(
        ids=ids,
        roles=roles,
        key_mask=key_mask,
        powers=batch_powers([s.adjacency for s in samples], m, L),
        mask_pos=np.array([s.mask_position for s in samples], dtype=np.int64),
        targets=np.array([s.target for s in samples], dtype=np.int64),
        lengths=lengths,
    )


class Relphormer:
    """Parameters plus forward pass.  ``params`` maps names to leaf tensors."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.training = False
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(seed)
        c = config
        d, f = c.hidden, c.ffn

        def p(name, arr):
            self.params[name] = Tensor(arr, requires_grad=True, name=name)

        def w(*shape):
            # uniform Glorot-style init for dense layers
            lim = math.sqrt(6.0 / (shape[0] + shape[-1]))
            return rng.uniform(-lim, lim, size=shape)

        p("embed", rng.normal(0.0, c.init_std, size=(c.vocab_size, d)))
        if c.role_embeddings:
            p("role", rng.normal(0.0, c.init_std, size=(N_ROLES, d)))
        n_bias = c.layers if c.per_layer_bias else 1
        for i in range(n_bias):
            p(f"struct.{i}", np.zeros((c.heads, c.m + 1)))
        for i in range(c.layers):
            for name in ("wq", "wk", "wv", "wo"):
                p(f"l{i}.{name}", w(d, d))
                p(f"l{i}.b{name[1]}", np.zeros(d))
            p(f"l{i}.w1", w(d, f))
            p(f"l{i}.b1", np.zeros(f))
            p(f"l{i}.w2", w(f, d))
            p(f"l{i}.b2", np.zeros(d))
            for j in (1, 2):
                p(f"l{i}.ln{j}.g", np.ones(d))
                p(f"l{i}.ln{j}.b", np.zeros(d))

    # -- state ------------------------------------------------------------
    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise nc.CheckpointError(f"parameter names differ: missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, v in state.items():
            if v.shape != self.params[k].shape:
                raise nc.CheckpointError(f"parameter {k}: shape {v.shape} != expected {self.params[k].shape}")
            self.params[k].data = np.array(v, dtype=np.float64)

    def zero_structure(self) -> None:
        for k, v in self.params.items():
            if k.startswith("struct."):
                v.data[...] = 0.0

    def import_embeddings(self, rows: dict[int, np.ndarray]) -> None:
        table = self.params["embed"].data
        for idx, vec in rows.items():
            vec = np.asarray(vec, dtype=np.float64)
            if vec.shape != (table.shape[1],):
                raise ValueError(f"embedding for id {idx} has dim {vec.shape}, expected {table.shape[1]}")
            table[idx] = vec

    # -- forward ----------------------------------------------------------
    def structure_bias(self, batch: Batch, layer: int) -> Tensor:
        """(B, heads, L, L) bias from the adjacency powers."""
        c = self.config
        key = f"struct.{layer if c.per_layer_bias else 0}"
        weights = self.params[key]
        P = Tensor(batch.powers)                                         # (B, L, L, m)
        phi = nc.matmul(P, nc.transpose(weights[:, :c.m], (1, 0)))       # (B, L, L, H)
        phi = nc.add(phi, weights[:, c.m])
        return nc.transpose(phi, (0, 3, 1, 2))

    def encode(self, batch: Batch, rng: np.random.Generator | None = None, attention_out: list | None = None) -> Tensor:
        """Final hidden states (B, L, d)."""
        c = self.config
        P = self.params
        B, L = batch.ids.shape
        H, dh = c.heads, c.hidden // c.heads
        train = self.training and rng is not None
        x = nc.embedding_gather(P["embed"], batch.ids)
        if c.role_embeddings:
            x = nc.add(x, nc.embedding_gather(P["role"], batch.roles))
        key_mask = Tensor(batch.key_mask)
        inv_sqrt = 1.0 / math.sqrt(dh)

        def heads(t):
            return nc.transpose(nc.reshape(t, (B, L, H, dh)), (0, 2, 1, 3))

        for i in range(c.layers):
            q = heads(nc.add(nc.matmul(x, P[f"l{i}.wq"]), P[f"l{i}.bq"]))
            k = heads(nc.add(nc.matmul(x, P[f"l{i}.wk"]), P[f"l{i}.bk"]))
            v = heads(nc.add(nc.matmul(x, P[f"l{i}.wv"]), P[f"l{i}.bv"]))
            scores = nc.scale(nc.matmul(q, nc.transpose(k, (0, 1, 3, 2))), inv_sqrt)
            phi = None
            if c.use_structure:
                phi = self.structure_bias(batch, i)
                scores = nc.add(scores, phi)
            scores = nc.add(scores, key_mask)
            attn = nc.softmax(scores, axis=-1)
            if attention_out is not None:
                attention_out.append({"attention": attn.data.copy(),
                                      "phi": None if phi is None else phi.data.copy()})
            attn = nc.dropout(attn, c.dropout, rng, train)
            ctx = nc.reshape(nc.transpose(nc.matmul(attn, v), (0, 2, 1, 3)), (B, L, c.hidden))
            out = nc.add(nc.matmul(ctx, P[f"l{i}.wo"]), P[f"l{i}.bo"])
            out = nc.dropout(out, c.dropout, rng, train)
            x = nc.layer_norm(nc.add(x, out), P[f"l{i}.ln1.g"], P[f"l{i}.ln1.b"])
            hdn = nc.gelu(nc.add(nc.matmul(x, P[f"l{i}.w1"]), P[f"l{i}.b1"]))
            hdn = nc.dropout(hdn, c.dropout, rng, train)
            out = nc.add(nc.matmul(hdn, P[f"l{i}.w2"]), P[f"l{i}.b2"])
            out = nc.dropout(out, c.dropout, rng, train)
            x = nc.layer_norm(nc.add(x, out), P[f"l{i}.ln2.g"], P[f"l{i}.ln2.b"])
        return x

    def forward(self, batch: Batch, rng: np.random.Generator | None = None,
                attention_out: list | None = None) -> tuple[Tensor, Tensor]:
        """Return (logits (B, vocab), masked-position hidden c (B, d))."""
        x = self.encode(batch, rng, attention_out)
        h = x[np.arange(len(batch)), batch.mask_pos]
        logits = nc.matmul(h, nc.transpose(self.params["embed"], (1, 0)))
        return logits, h

    def forward_sample(self, sample: MaskedSample) -> tuple[Tensor, Tensor]:
        """Single-sample forward; returns (logits (vocab,), c (d,))."""
        logits, h = self.forward(collate([sample], self.config.m))
        return logits[0], h[0]

    def predict_proba(self, samples: list[MaskedSample], batch_size: int = 256,
                      avg_logits: bool = False) -> np.ndarray:
        """Softmax over the vocabulary for each sample (no graph is kept).

        With ``avg_logits`` the raw logits are returned instead so callers can
        average before the softmax.
        """
        was = self.training
        self.training = False
        out = []
        try:
            for i in range(0, len(samples), batch_size):
                batch = collate(samples[i:i + batch_size], self.config.m)
                logits, _ = self.forward(batch)
                z = logits.data
                if avg_logits:
                    out.append(z)
                else:
                    e = np.exp(z - z.max(axis=1, keepdims=True))
                    out.append(e / e.sum(axis=1, keepdims=True))
        finally:
            self.training = was
        return np.concatenate(out, axis=0)


def mkm_loss(logits: Tensor, target, loss_kind: str = "ce") -> Tensor:
    """Masked-knowledge loss: full-vocabulary CE, or BCE with the target as sole positive."""
    if loss_kind == "ce":
        return nc.cross_entropy(logits, target)
    if loss_kind == "bce":
        return nc.bce_with_logits(logits, target)
    raise ValueError(f"unknown loss_kind {loss_kind!r}")


def _unit(v: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(norm == 0):
        raise ValueError("contextual loss: zero-norm vector, cosine similarity undefined")
    return v / norm


def _unit_tensor(c: Tensor) -> Tensor:
    norm_sq = nc.tsum(nc.mul(c, c), axis=-1, keepdims=True)
    if np.any(norm_sq.data == 0):
        raise ValueError("contextual loss: zero-norm vector, cosine similarity undefined")
    return nc.div(c, nc.sqrt(norm_sq))


def contextual_loss(c_t, c_prev, negatives, tau: float) -> Tensor:
    """Contrastive loss pulling ``c_t`` towards last epoch's ``c_prev``.

    ``c_prev`` and ``negatives`` are treated as constants.  Returns a zero
    tensor when ``c_prev`` is None (first epoch).
    """
    c_t = nc.as_tensor(c_t)
    if c_prev is None:
        return Tensor(0.0)
    others = [np.asarray(c_prev, dtype=np.float64)] + [np.asarray(n, dtype=np.float64) for n in negatives]
    bank = _unit(np.stack(others))                                        # (1 + n, d)
    sims = nc.scale(nc.matmul(nc.reshape(_unit_tensor(c_t), (1, -1)), Tensor(bank.T)), 1.0 / tau)
    return nc.cross_entropy(nc.reshape(sims, (-1,)), 0)


def batch_contextual_loss(c: Tensor, prev: np.ndarray, has_prev: np.ndarray, tau: float) -> Tensor:
    """Batched contrastive loss with in-batch negatives.

    Row ``i`` uses ``prev[i]`` as its positive and the other rows' ``prev``
    vectors (those that exist) as negatives.  Averaged over rows with a
    previous vector; zero if none has one.
    """
    rows = np.flatnonzero(has_prev)
    if rows.size == 0:
        return Tensor(0.0)
    bank = _unit(prev[rows])                                              # (n, d)
    cur = _unit_tensor(c[rows])                                           # (n, d)
    sims = nc.scale(nc.matmul(cur, Tensor(bank.T)), 1.0 / tau)            # (n, n)
    return nc.cross_entropy(sims, np.arange(rows.size))


class ContrastiveBank:
    """Detached per-center hidden vectors from the previous epoch."""

    def __init__(self):
        self._store: dict[str, np.ndarray] = {}

    def get(self, key: str) -> np.ndarray | None:
        return self._store.get(key)

    def update(self, key: str, c) -> None:
        arr = c.data if isinstance(c, Tensor) else c
        self._store[key] = np.array(arr, dtype=np.float64, copy=True)

    def __len__(self) -> int:
        return len(self._store)

    def __contains__(self, key: str) -> bool:
        return key in self._store


def bank_update(bank: ContrastiveBank, key: str, c) -> None:
    bank.update(key, c)


def total_loss(mkm, contextual, lam: float):
    """Joint objective: mkm + lam * contextual (works on floats or tensors)."""
    if isinstance(mkm, Tensor) or isinstance(contextual, Tensor):
        return nc.add(mkm, nc.scale(nc.as_tensor(contextual), lam))
    return mkm + lam * contextual
