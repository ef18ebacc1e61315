"""Softmax-free spiking self-attention over the multi-timescale token
sequence, with residual connections and a spiking feed-forward tail.

Q, K, V are binary spike tensors produced by W -> BN -> SN; the attention
map Q K^T is therefore a non-negative integer count matrix and no softmax
is needed anywhere in the path.  Residual additions happen on the
real-valued 256-wide stream around the 512-wide attention core.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine
from .engine import ShapeError, SurrogateSpec, Tensor
from .snn import BatchNorm, LifLayer, Linear, SpikingFfn


@dataclass
class SsaConfig:
    p: int = 3                 # token sequence length (timescale streams)
    stream_dim: int = 256
    d_ssa: int = 512
    heads: int = 8
    scale: float = 0.125
    ffn_hidden: int = 256
    tau0: float = 2.0

    def validate(self):
        if self.d_ssa % self.heads:
            raise ValueError("d_ssa must be divisible by heads")
        if self.scale <= 0:
            raise ValueError("scale must be positive")
        return self


def ssa_attention(q: Tensor, k: Tensor, v: Tensor, heads: int,
                  scale: float = 1.0) -> Tensor:
    """(Q K^T) V * scale per head; inputs [B, p, d], output [B, p, d]."""
    if q.shape != k.shape or q.shape != v.shape:
        raise ShapeError("q/k/v must share a shape")
    b, p, d = q.shape
    if d % heads:
        raise ShapeError("feature dim must divide into heads")
    hd = d // heads

    def heads_first(t):
        return t.reshape((b, p, heads, hd)).transpose(0, 2, 1, 3)

    qh, kh, vh = heads_first(q), heads_first(k), heads_first(v)
    attn = engine.matmul(qh, kh.transpose(0, 1, 3, 2))      # [B, H, p, p]
    out = engine.matmul(attn, vh) * scale
    return out.transpose(0, 2, 1, 3).reshape((b, p, d))


class SsaBlock:
    """LayerNorm -> spiking Q/K/V -> QK^TV -> SN -> projection, with
    residuals after attention and after the 2-layer spiking FFN."""

    def __init__(self, cfg: SsaConfig, surrogate: SurrogateSpec,
                 rng: np.random.Generator, ann_mode: bool = False,
                 dtype=engine.DEFAULT_DTYPE):
        cfg.validate()
        self.cfg = cfg
        self.ann_mode = ann_mode
        self.dtype = dtype
        sd, dd = cfg.stream_dim, cfg.d_ssa
        self.ln_g = engine.parameter(np.ones(sd), dtype=dtype)
        self.ln_b = engine.parameter(np.zeros(sd), dtype=dtype)
        self.wq = Linear(sd, dd, rng, dtype=dtype)
        self.wk = Linear(sd, dd, rng, dtype=dtype)
        self.wv = Linear(sd, dd, rng, dtype=dtype)
        self.bn_q = BatchNorm(dd, dtype=dtype)
        self.bn_k = BatchNorm(dd, dtype=dtype)
        self.bn_v = BatchNorm(dd, dtype=dtype)
        self.sn_q = self._make_sn(dd, cfg.tau0, surrogate)
        self.sn_k = self._make_sn(dd, cfg.tau0, surrogate)
        self.sn_v = self._make_sn(dd, cfg.tau0, surrogate)
        self.sn_attn = self._make_sn(dd, cfg.tau0, surrogate)
        self.w_out = Linear(dd, sd, rng, dtype=dtype)
        self.bn_out = BatchNorm(sd, dtype=dtype)
        self.sn_out = self._make_sn(sd, cfg.tau0, surrogate)
        self.ffn = SpikingFfn([sd, cfg.ffn_hidden, sd], cfg.tau0, surrogate,
                              rng, dtype=dtype) if not ann_mode else None
        if ann_mode:
            self.ffn_fc1 = Linear(sd, cfg.ffn_hidden, rng, dtype=dtype)
            self.ffn_bn1 = BatchNorm(cfg.ffn_hidden, dtype=dtype)
            self.ffn_fc2 = Linear(cfg.ffn_hidden, sd, rng, dtype=dtype)
            self.ffn_bn2 = BatchNorm(sd, dtype=dtype)
        self.surrogate = surrogate

    def _make_sn(self, width, tau0, surrogate):
        if self.ann_mode:
            return None
        return LifLayer(width, tau0, surrogate, dtype=self.dtype)

    def _activate(self, sn: LifLayer | None, x: Tensor) -> Tensor:
        if self.ann_mode:
            return engine.relu(x)
        return sn.step(x)

    def forward(self, z: Tensor, training: bool) -> Tensor:
        """One bin step on the [B, p, stream_dim] token sequence."""
        cfg = self.cfg
        if z.ndim != 3 or z.shape[1] != cfg.p or z.shape[2] != cfg.stream_dim:
            raise ShapeError(
                f"expected [B, {cfg.p}, {cfg.stream_dim}], got {z.shape}")
        b = z.shape[0]
        flatdim = (b * cfg.p, cfg.d_ssa)

        zi = engine.layer_norm(z, self.ln_g, self.ln_b)
        flat = zi.reshape((b * cfg.p, cfg.stream_dim))
        q = self._activate(self.sn_q, self.bn_q(self.wq(flat), training))
        k = self._activate(self.sn_k, self.bn_k(self.wk(flat), training))
        v = self._activate(self.sn_v, self.bn_v(self.wv(flat), training))

        seq = ssa_attention(q.reshape((b, cfg.p, cfg.d_ssa)),
                            k.reshape((b, cfg.p, cfg.d_ssa)),
                            v.reshape((b, cfg.p, cfg.d_ssa)),
                            cfg.heads, cfg.scale)
        prime = self._activate(self.sn_attn, seq.reshape(flatdim))
        out = self._activate(
            self.sn_out, self.bn_out(self.w_out(prime), training))
        z = z + out.reshape((b, cfg.p, cfg.stream_dim))

        flat2 = z.reshape((b * cfg.p, cfg.stream_dim))
        if self.ann_mode:
            f = self.ffn_bn1(self.ffn_fc1(engine.relu(flat2)), training)
            f = self.ffn_bn2(self.ffn_fc2(engine.relu(f)), training)
        else:
            f = self.ffn.step(flat2, training)
        return z + f.reshape((b, cfg.p, cfg.stream_dim))

    def reset(self):
        if self.ann_mode:
            return
        for sn in (self.sn_q, self.sn_k, self.sn_v, self.sn_attn, self.sn_out):
            sn.reset()
        self.ffn.reset()

    def lif_layers(self):
        if self.ann_mode:
            return []
        return [self.sn_q, self.sn_k, self.sn_v, self.sn_attn, self.sn_out,
                *self.ffn.lif_layers()]

    def parameters(self, prefix="ssa"):
        yield f"{prefix}.ln.g", self.ln_g
        yield f"{prefix}.ln.b", self.ln_b
        for name, block in (("wq", self.wq), ("wk", self.wk), ("wv", self.wv),
                            ("w_out", self.w_out)):
            yield from block.parameters(f"{prefix}.{name}")
        for name, block in (("bn_q", self.bn_q), ("bn_k", self.bn_k),
                            ("bn_v", self.bn_v), ("bn_out", self.bn_out)):
            yield from block.parameters(f"{prefix}.{name}")
        if self.ann_mode:
            yield from self.ffn_fc1.parameters(f"{prefix}.ffn.0.fc")
            yield from self.ffn_bn1.parameters(f"{prefix}.ffn.0.bn")
            yield from self.ffn_fc2.parameters(f"{prefix}.ffn.1.fc")
            yield from self.ffn_bn2.parameters(f"{prefix}.ffn.1.bn")
        else:
            for sn, name in ((self.sn_q, "sn_q"), (self.sn_k, "sn_k"),
                             (self.sn_v, "sn_v"), (self.sn_attn, "sn_attn"),
                             (self.sn_out, "sn_out")):
                yield from sn.parameters(f"{prefix}.{name}")
            yield from self.ffn.parameters(f"{prefix}.ffn")

    def bn_layers(self):
        bns = [self.bn_q, self.bn_k, self.bn_v, self.bn_out]
        if self.ann_mode:
            bns += [self.ffn_bn1, self.ffn_bn2]
        else:
            bns += self.ffn.bn_layers()
        return bns
