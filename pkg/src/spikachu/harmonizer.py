"""ANN front end: per-unit learnable embeddings, cross-attention of
learnable latent queries against the spike-token sequence, and the shared
linear projection onto "virtual units".

A window's token sequence holds one embedding copy per spike (a unit with
c spikes contributes c identical tokens; an empty window contributes a
single all-zeros token).  Because duplicated keys only reweight the
softmax, the batched path computes attention over the session's unit
embeddings with per-bin count weights, which is algebraically identical
to materializing the repeats.
"""

from __future__ import annotations

import math

import numpy as np

from . import engine
from .engine import ShapeError, Tensor, concat, gather_rows, layer_norm, linear, softmax
from .snn import Linear


class UnknownUnitError(KeyError):
    """A window references a unit with no embedding entry."""


class UnitEmbeddingTable:
    """Per-session learnable embedding matrices keyed by (session, unit)."""

    def __init__(self, dim: int, dtype=engine.DEFAULT_DTYPE):
        self.dim = dim
        self.dtype = dtype
        self.sessions = {}   # session_id -> (unit_ids ndarray, param Tensor)

    def register(self, session_id: str, unit_ids, rng: np.random.Generator,
                 init_std: float = 0.02):
        if session_id in self.sessions:
            raise ValueError(f"session {session_id!r} already registered")
        unit_ids = np.asarray(sorted(int(u) for u in unit_ids), dtype=np.int64)
        if len(np.unique(unit_ids)) != len(unit_ids):
            raise ValueError("duplicate unit ids in registration")
        emb = engine.parameter(
            rng.normal(0.0, init_std, (len(unit_ids), self.dim)),
            name=f"embeddings.{session_id}", dtype=self.dtype)
        self.sessions[session_id] = (unit_ids, emb)
        return emb

    def lookup(self, session_id: str):
        if session_id not in self.sessions:
            raise UnknownUnitError(f"session {session_id!r} not registered")
        return self.sessions[session_id]

    def row_index(self, session_id: str, unit_id: int) -> int:
        unit_ids, _ = self.lookup(session_id)
        i = int(np.searchsorted(unit_ids, unit_id))
        if i >= len(unit_ids) or unit_ids[i] != unit_id:
            raise UnknownUnitError(
                f"unit {unit_id} of session {session_id!r} has no embedding")
        return i

    def parameters(self):
        for sid, (_, emb) in self.sessions.items():
            yield f"embeddings.{sid}", emb


class Harmonizer:
    """Latent-query cross-attention block plus the virtual-unit projection."""

    def __init__(self, embed_dim: int, latent_tokens: int, heads: int,
                 ffn_hidden: int, virtual_units: int,
                 rng: np.random.Generator, dtype=engine.DEFAULT_DTYPE):
        if embed_dim % heads:
            raise ValueError("embed_dim must be divisible by head count")
        self.d = embed_dim
        self.n_latents = latent_tokens
        self.heads = heads
        self.head_dim = embed_dim // heads
        self.n_virtual = virtual_units
        self.dtype = dtype
        self.table = UnitEmbeddingTable(embed_dim, dtype=dtype)

        self.latents = engine.parameter(
            rng.normal(0.0, 0.02, (latent_tokens, embed_dim)),
            name="latents", dtype=dtype)
        self.ln_x_g = engine.parameter(np.ones(embed_dim), dtype=dtype)
        self.ln_x_b = engine.parameter(np.zeros(embed_dim), dtype=dtype)
        self.ln_q_g = engine.parameter(np.ones(embed_dim), dtype=dtype)
        self.ln_q_b = engine.parameter(np.zeros(embed_dim), dtype=dtype)
        self.ln_f_g = engine.parameter(np.ones(embed_dim), dtype=dtype)
        self.ln_f_b = engine.parameter(np.zeros(embed_dim), dtype=dtype)
        self.wq = Linear(embed_dim, embed_dim, rng, dtype=dtype)
        self.wk = Linear(embed_dim, embed_dim, rng, dtype=dtype)
        self.wv = Linear(embed_dim, embed_dim, rng, dtype=dtype)
        self.wo = Linear(embed_dim, embed_dim, rng, dtype=dtype)
        self.ffn1 = Linear(embed_dim, ffn_hidden, rng, dtype=dtype)
        self.ffn2 = Linear(ffn_hidden, embed_dim, rng, dtype=dtype)
        self.unroll_proj = Linear(latent_tokens * embed_dim, virtual_units,
                                  rng, dtype=dtype)

    # -- registration -----------------------------------------------------------

    def register_session(self, session_id, unit_ids, rng):
        return self.table.register(session_id, unit_ids, rng)

    # -- reference per-window path ------------------------------------------------

    def tokenize_window(self, window_counts: dict, session_id: str) -> Tensor:
        """Token sequence with one embedding repeat per spike.

        ``window_counts`` maps unit id -> spike count.  Empty windows give
        a single all-zeros token so the causal stream never stalls.
        """
        unit_ids, emb = self.table.lookup(session_id)
        rows = []
        for unit, count in sorted(window_counts.items()):
            if count < 0:
                raise ValueError("negative spike count")
            idx = self.table.row_index(session_id, int(unit))
            rows.extend([idx] * int(count))
        if not rows:
            return Tensor(np.zeros((1, self.d), dtype=self.dtype))
        return gather_rows(emb, np.asarray(rows, dtype=np.int64))

    def _split_heads(self, t: Tensor, n: int) -> Tensor:
        return t.reshape((n, self.heads, self.head_dim)).transpose(1, 0, 2)

    def perceiver_project(self, x: Tensor, return_weights: bool = False):
        """Cross-attend the latent queries onto the token sequence.

        Output is always [latent_tokens, embed_dim] regardless of input
        length; token order does not matter (no positional encoding).
        """
        if x.ndim != 2 or x.shape[1] != self.d:
            raise ShapeError(f"token sequence must be [n, {self.d}], got {x.shape}")
        n = x.shape[0]
        xq = layer_norm(self.latents, self.ln_q_g, self.ln_q_b)
        xk = layer_norm(x, self.ln_x_g, self.ln_x_b)
        q = self._split_heads(self.wq(xq), self.n_latents)
        k = self._split_heads(self.wk(xk), n)
        v = self._split_heads(self.wv(xk), n)
        logits = engine.matmul(q, k.transpose(0, 2, 1)) * (1.0 / math.sqrt(self.head_dim))
        attn = softmax(logits, axis=-1)
        out = engine.matmul(attn, v)
        out = out.transpose(1, 0, 2).reshape((self.n_latents, self.d))
        z = self.latents + self.wo(out)
        z = z + self._ffn(layer_norm(z, self.ln_f_g, self.ln_f_b))
        if return_weights:
            return z, attn.data
        return z

    def _ffn(self, z: Tensor) -> Tensor:
        return self.ffn2(engine.relu(self.ffn1(z)))

    def virtual_units(self, z1: Tensor) -> Tensor:
        """Unroll the latent block and project to the shared channel set."""
        lead = z1.shape[:-2]
        flat = z1.reshape(lead + (self.n_latents * self.d,))
        return self.unroll_proj(flat)

    def project_window(self, window_counts: dict, session_id: str) -> Tensor:
        """tokenize -> cross-attend -> virtual units for one window."""
        x = self.tokenize_window(window_counts, session_id)
        z1 = self.perceiver_project(x)
        return self.virtual_units(z1.reshape((1, self.n_latents, self.d)))

    # -- batched count-weighted path ----------------------------------------------

    def begin_batch(self, session_id: str):
        """Precompute the bin-independent attention tensors for a session.

        Returns a cache consumed by :meth:`step_counts`; the cache tensors
        are part of the autodiff graph, so gradients from every bin of the
        batch accumulate into the shared weights.
        """
        unit_ids, emb = self.table.lookup(session_id)
        n_units = len(unit_ids)
        zero_row = Tensor(np.zeros((1, self.d), dtype=self.dtype))
        tokens = concat([emb, zero_row], axis=0)           # [U+1, d]
        xk = layer_norm(tokens, self.ln_x_g, self.ln_x_b)
        xq = layer_norm(self.latents, self.ln_q_g, self.ln_q_b)
        q = self._split_heads(self.wq(xq), self.n_latents)  # [H, L, hd]
        k = self._split_heads(self.wk(xk), n_units + 1)     # [H, U+1, hd]
        v = self._split_heads(self.wv(xk), n_units + 1)
        logits = engine.matmul(q, k.transpose(0, 2, 1)) * (1.0 / math.sqrt(self.head_dim))
        stab = logits.data.max()
        e = engine.texp(logits - float(stab))               # [H, L, U+1]
        et = e.transpose(2, 0, 1)                           # [U+1, H, L]
        vt = v.transpose(1, 0, 2)                           # [U+1, H, hd]
        w4 = et.reshape((n_units + 1, self.heads, self.n_latents, 1)) \
            * vt.reshape((n_units + 1, self.heads, 1, self.head_dim))
        w_flat = w4.reshape((n_units + 1,
                             self.heads * self.n_latents * self.head_dim))
        den_mat = et.reshape((n_units + 1, self.heads * self.n_latents))
        return {"session_id": session_id, "n_units": n_units,
                "w_flat": w_flat, "den_mat": den_mat}

    def step_counts(self, cache: dict, counts: np.ndarray) -> Tensor:
        """Virtual units for one bin of a batch given [B, U] spike counts."""
        n_units = cache["n_units"]
        if counts.ndim != 2 or counts.shape[1] != n_units:
            raise ShapeError(
                f"counts must be [batch, {n_units}], got {counts.shape}")
        b = counts.shape[0]
        empty = (counts.sum(axis=1, keepdims=True) == 0).astype(counts.dtype)
        cw = Tensor(np.concatenate([counts, empty], axis=1))   # [B, U+1]
        num = engine.matmul(cw, cache["w_flat"])               # [B, H*L*hd]
        den = engine.matmul(cw, cache["den_mat"])              # [B, H*L]
        num = num.reshape((b, self.heads, self.n_latents, self.head_dim))
        den = den.reshape((b, self.heads, self.n_latents, 1))
        out = (num / den).transpose(0, 2, 1, 3).reshape((b, self.n_latents, self.d))
        z = self.latents + self.wo(out)
        z = z + self._ffn(layer_norm(z, self.ln_f_g, self.ln_f_b))
        return self.virtual_units(z)

    # -- bookkeeping ------------------------------------------------------------

    def parameters(self):
        yield "harmonizer.latents", self.latents
        yield "harmonizer.ln_x.g", self.ln_x_g
        yield "harmonizer.ln_x.b", self.ln_x_b
        yield "harmonizer.ln_q.g", self.ln_q_g
        yield "harmonizer.ln_q.b", self.ln_q_b
        yield "harmonizer.ln_f.g", self.ln_f_g
        yield "harmonizer.ln_f.b", self.ln_f_b
        yield from self.wq.parameters("harmonizer.wq")
        yield from self.wk.parameters("harmonizer.wk")
        yield from self.wv.parameters("harmonizer.wv")
        yield from self.wo.parameters("harmonizer.wo")
        yield from self.ffn1.parameters("harmonizer.ffn1")
        yield from self.ffn2.parameters("harmonizer.ffn2")
        yield from self.unroll_proj.parameters("harmonizer.virtual")

    def core_parameter_count(self) -> int:
        """Parameters excluding the per-session embedding tables."""
        return sum(t.size for _, t in self.parameters())

    def embedding_parameter_count(self) -> int:
        return sum(t.size for _, t in self.table.parameters())
