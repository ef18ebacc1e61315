"""Full decoder assembly: harmonizer -> multi-scale spiking FFNs ->
spiking self-attention -> spiking MLP -> second multi-scale stage ->
membrane observer -> linear readout, with ablation toggles, the stateless
rectifier variant, and a bit-exact binary checkpoint container.
"""

from __future__ import annotations

import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import engine
from .engine import ShapeError, SurrogateSpec, Tensor, concat
from .harmonizer import Harmonizer
from .snn import Linear, LifLayer, ObserverLayer, SpikingFfn, SpikingFfnLayer
from .ssa import SsaBlock, SsaConfig

CHECKPOINT_MAGIC = b"SPKCHU01"
SEGMENT_BINS = 100


class ConfigError(ValueError):
    """Raised when a model configuration cannot chain its widths."""


@dataclass
class ModelConfig:
    embed_dim: int = 32
    latent_tokens: int = 128
    harmonizer_heads: int = 4
    harmonizer_ffn_hidden: int = 64
    virtual_units: int = 128
    msnn1_streams: int = 3
    msnn1_layers: int = 4
    msnn1_width: int = 256
    msnn1_tau0: tuple = (1.11, 1.46, 434.79)
    ssa_dim: int = 512
    ssa_heads: int = 8
    ssa_ffn_hidden: int = 256
    ssa_scale: float = 0.125
    ssa_tau0: float = 2.0
    smlp_out: int = 384
    smlp_tau0: float = 2.0
    msnn2_streams: int = 2
    msnn2_layers: int = 4
    msnn2_width: int = 384
    msnn2_tau0: tuple = (1.11, 434.79)
    observer_tau0: float = 2.0
    output_dim: int = 2
    surrogate_alpha: float = 2.0
    v_threshold: float = 1.0
    v_reset: float = 0.0
    ablate_harmonizer: bool = False
    ablate_msnn1: bool = False
    ablate_ssa: bool = False
    ablate_msnn2: bool = False
    ann_mode: bool = False
    ann_context_bins: int = 0

    # -- derived widths ---------------------------------------------------------

    @property
    def n_streams1(self):
        return 1 if self.ablate_msnn1 else self.msnn1_streams

    @property
    def n_streams2(self):
        return 1 if self.ablate_msnn2 else self.msnn2_streams

    @property
    def msnn1_input(self):
        return self.virtual_units * (1 + (self.ann_context_bins
                                          if self.ann_mode else 0))

    @property
    def smlp_in(self):
        return self.n_streams1 * self.msnn1_width

    @property
    def observer_width(self):
        return self.n_streams2 * self.msnn2_width

    def validate(self):
        if self.embed_dim % self.harmonizer_heads:
            raise ConfigError("embed_dim must divide into harmonizer heads")
        if self.ssa_dim % self.ssa_heads:
            raise ConfigError("ssa_dim must divide into ssa heads")
        if not self.ablate_msnn1 and len(self.msnn1_tau0) != self.msnn1_streams:
            raise ConfigError("need one initial tau per msnn1 stream")
        if not self.ablate_msnn2 and len(self.msnn2_tau0) != self.msnn2_streams:
            raise ConfigError("need one initial tau per msnn2 stream")
        if self.v_threshold <= self.v_reset:
            raise ConfigError("v_threshold must exceed v_reset")
        if self.ann_context_bins and not self.ann_mode:
            raise ConfigError("context bins require the rectifier variant")
        for f in ("embed_dim", "latent_tokens", "virtual_units", "msnn1_width",
                  "msnn2_width", "smlp_out", "output_dim", "msnn1_layers",
                  "msnn2_layers"):
            if getattr(self, f) <= 0:
                raise ConfigError(f"{f} must be positive")
        return self

    def to_dict(self):
        d = asdict(self)
        d["msnn1_tau0"] = list(self.msnn1_tau0)
        d["msnn2_tau0"] = list(self.msnn2_tau0)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["msnn1_tau0"] = tuple(d["msnn1_tau0"])
        d["msnn2_tau0"] = tuple(d["msnn2_tau0"])
        return cls(**d).validate()


def ann_variant(config: ModelConfig, context_bins: int = 0) -> ModelConfig:
    """Same connectivity with stateless rectifiers instead of LIF neurons."""
    d = config.to_dict()
    d["ann_mode"] = True
    d["ann_context_bins"] = context_bins
    return ModelConfig.from_dict(d)


class _ReluUnit:
    """Stateless stand-in for a LIF layer in the rectifier variant."""

    def __init__(self, width):
        self.width = width

    def reset(self):
        pass

    def step(self, x):
        return engine.relu(x)


class SpikachuModel:
    """One decoder instance; single-owner stateful forward passes."""

    def __init__(self, config: ModelConfig, seed: int):
        config.validate()
        self.config = config
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.surrogate = SurrogateSpec(config.surrogate_alpha)
        cfg = config

        if cfg.ablate_harmonizer:
            self.harmonizer = None
            self.input_linears = {}   # session_id -> Linear(n_units, virtual)
            self.input_units = {}     # session_id -> sorted unit ids
        else:
            self.harmonizer = Harmonizer(
                cfg.embed_dim, cfg.latent_tokens, cfg.harmonizer_heads,
                cfg.harmonizer_ffn_hidden, cfg.virtual_units, rng)

        taus1 = (cfg.smlp_tau0,) if cfg.ablate_msnn1 else cfg.msnn1_tau0
        widths1 = [cfg.msnn1_input] + [cfg.msnn1_width] * cfg.msnn1_layers
        self.msnn1 = [self._make_ffn(widths1, t, rng) for t in taus1]

        self.ssa = None
        if not cfg.ablate_ssa:
            self.ssa = SsaBlock(
                SsaConfig(p=cfg.n_streams1, stream_dim=cfg.msnn1_width,
                          d_ssa=cfg.ssa_dim, heads=cfg.ssa_heads,
                          scale=cfg.ssa_scale, ffn_hidden=cfg.ssa_ffn_hidden,
                          tau0=cfg.ssa_tau0),
                self.surrogate, rng, ann_mode=cfg.ann_mode)

        self.smlp = self._make_layer(cfg.smlp_in, cfg.smlp_out,
                                     cfg.smlp_tau0, rng)
        taus2 = (cfg.smlp_tau0,) if cfg.ablate_msnn2 else cfg.msnn2_tau0
        widths2 = [cfg.smlp_out] + [cfg.msnn2_width] * cfg.msnn2_layers
        self.msnn2 = [self._make_ffn(widths2, t, rng) for t in taus2]

        self.observer = None if cfg.ann_mode else ObserverLayer(
            cfg.observer_width, cfg.observer_tau0)
        self.readout = Linear(cfg.observer_width, cfg.output_dim, rng)

        # affine output transform fitted by the trainer (identity until then)
        self.output_scale = np.ones(cfg.output_dim, dtype=np.float32)
        self.output_shift = np.zeros(cfg.output_dim, dtype=np.float32)

        self._armed = False
        self._ctx_queue = []
        self._token_sum = 0.0
        self._token_bins = 0
        self._session_rng = np.random.default_rng(seed + 0x5EED)
        self.build_report = {
            "parameters": self.num_parameters(),
            "synapse_parameters": self.num_synapse_parameters(),
            "neurons": self.num_neurons(),
            "harmonizer_share": self.harmonizer_share(),
        }

    # -- construction helpers ------------------------------------------------------

    def _make_ffn(self, widths, tau0, rng):
        if self.config.ann_mode:
            return _AnnFfn(widths, rng)
        return SpikingFfn(widths, tau0, self.surrogate, rng)

    def _make_layer(self, n_in, n_out, tau0, rng):
        if self.config.ann_mode:
            return _AnnFfn([n_in, n_out], rng)
        return SpikingFfnLayer(n_in, n_out, tau0, self.surrogate, rng)

    # -- session registration --------------------------------------------------------

    def register_session(self, session_id: str, unit_ids):
        """Add embedding rows (or an input map) for a new session.

        Shared weights are untouched; new parameters are drawn from the
        model's session stream so registration is deterministic given the
        build seed and registration order.
        """
        if self.config.ablate_harmonizer:
            if session_id in self.input_linears:
                raise ValueError(f"session {session_id!r} already registered")
            self.input_linears[session_id] = Linear(
                len(unit_ids), self.config.virtual_units, self._session_rng)
            self.input_units[session_id] = np.asarray(
                sorted(int(u) for u in unit_ids), dtype=np.int64)
        else:
            self.harmonizer.register_session(session_id, unit_ids,
                                             self._session_rng)

    def sessions(self):
        if self.config.ablate_harmonizer:
            return list(self.input_linears)
        return list(self.harmonizer.table.sessions)

    # -- state handling ---------------------------------------------------------------

    def spiking_layers(self):
        layers = []
        for ffn in self.msnn1:
            layers.extend(ffn.lif_layers())
        if self.ssa is not None:
            layers.extend(self.ssa.lif_layers())
        if isinstance(self.smlp, SpikingFfnLayer):
            layers.append(self.smlp.sn)
        else:
            layers.extend(self.smlp.lif_layers())
        for ffn in self.msnn2:
            layers.extend(ffn.lif_layers())
        return layers

    def reset_states(self):
        """Zero membranes, clear probes, restart the context queue."""
        for layer in self.spiking_layers():
            layer.reset()
        if self.observer is not None:
            self.observer.reset()
        self._ctx_queue = []
        self._armed = True

    # -- forward ------------------------------------------------------------------------

    def _input_stage_cache(self, session_id):
        if self.config.ablate_harmonizer:
            if session_id not in self.input_linears:
                raise KeyError(f"session {session_id!r} not registered")
            return {"linear": self.input_linears[session_id],
                    "session_id": session_id}
        return self.harmonizer.begin_batch(session_id)

    def _input_stage_step(self, cache, counts: np.ndarray) -> Tensor:
        tokens = np.maximum(counts.sum(axis=1), 1.0)
        self._token_sum += float(tokens.sum())
        self._token_bins += counts.shape[0]
        if self.config.ablate_harmonizer:
            return cache["linear"](Tensor(counts))
        return self.harmonizer.step_counts(cache, counts)

    def _trunk_step(self, z2: Tensor, training: bool) -> Tensor:
        cfg = self.config
        if cfg.ann_mode and cfg.ann_context_bins:
            b = z2.shape[0]
            while len(self._ctx_queue) < cfg.ann_context_bins:
                self._ctx_queue.append(Tensor(np.zeros(
                    (b, cfg.virtual_units), dtype=np.float32)))
            z2_full = concat([z2] + list(self._ctx_queue), axis=1)
            self._ctx_queue.insert(0, z2)
            self._ctx_queue = self._ctx_queue[:cfg.ann_context_bins]
            z2 = z2_full

        streams = [ffn.step(z2, training) for ffn in self.msnn1]
        b = z2.shape[0]
        if self.ssa is not None:
            parts = [s.reshape((b, 1, cfg.msnn1_width)) for s in streams]
            z_ms = concat(parts, axis=1) if len(parts) > 1 else parts[0]
            z_ms = self.ssa.forward(z_ms, training)
            flat = z_ms.reshape((b, cfg.smlp_in))
        else:
            flat = concat(streams, axis=1) if len(streams) > 1 else streams[0]

        z_mlp = self.smlp.step(flat, training)
        parts2 = [ffn.step(z_mlp, training) for ffn in self.msnn2]
        z_sm = concat(parts2, axis=1) if len(parts2) > 1 else parts2[0]
        m_obs = z_sm if self.observer is None else self.observer.step(z_sm)
        out = self.readout(m_obs)
        if not (np.all(self.output_scale == 1.0)
                and np.all(self.output_shift == 0.0)):
            out = out * Tensor(self.output_scale) + Tensor(self.output_shift)
        return out

    def forward_step(self, window_counts: dict, session_id: str,
                     training: bool = False) -> Tensor:
        """Strictly causal single-window step; returns the [2] velocity.

        Consumes only the current bin plus internal state; states must
        have been initialized by ``reset_states`` at segment start.
        """
        if not self._armed:
            raise RuntimeError("model states not initialized; call reset_states")
        if self.config.ablate_harmonizer:
            lin = self.input_linears.get(session_id)
            if lin is None:
                raise KeyError(f"session {session_id!r} not registered")
            units = self.input_units[session_id]
            vec = np.zeros((1, lin.n_in), dtype=np.float32)
            for unit, count in window_counts.items():
                i = int(np.searchsorted(units, int(unit)))
                if i >= len(units) or units[i] != int(unit):
                    raise KeyError(f"unit {unit} not registered for {session_id!r}")
                vec[0, i] = count
            self._token_sum += max(sum(window_counts.values()), 1)
            self._token_bins += 1
            out = self._trunk_step(lin(Tensor(vec)), training)
            return out.reshape((self.config.output_dim,))
        x = self.harmonizer.tokenize_window(window_counts, session_id)
        z1 = self.harmonizer.perceiver_project(x)
        z2 = self.harmonizer.virtual_units(
            z1.reshape((1, self.config.latent_tokens, self.config.embed_dim)))
        tokens = max(sum(window_counts.values()), 1)
        self._token_sum += tokens
        self._token_bins += 1
        out = self._trunk_step(z2, training)
        return out.reshape((self.config.output_dim,))

    def forward_segment(self, segment, training: bool = False) -> Tensor:
        """Reset, then 100 causal steps; returns the [100, 2] trajectory."""
        counts = segment.effective_counts()
        if counts.shape[0] != SEGMENT_BINS:
            raise ShapeError(
                f"segment must hold {SEGMENT_BINS} bins, got {counts.shape[0]}")
        self.reset_states()
        unit_ids = segment.unit_ids
        rows = []
        for t in range(SEGMENT_BINS):
            nz = np.nonzero(counts[t])[0]
            window = {int(unit_ids[i]): int(counts[t, i]) for i in nz}
            rows.append(self.forward_step(window, segment.session_id,
                                          training).reshape((1, -1)))
        return concat(rows, axis=0)

    def forward_segment_batch(self, groups, training: bool = False) -> Tensor:
        """Vectorized segment forward for same-length segment batches.

        ``groups`` is a list of (session_id, counts[B_i, 100, U_i]); the
        output keeps group order along the batch axis: [sum B_i, 100, 2].
        """
        self.reset_states()
        caches = [self._input_stage_cache(sid) for sid, _ in groups]
        for _, counts in groups:
            if counts.shape[1] != SEGMENT_BINS:
                raise ShapeError("segments must hold "
                                 f"{SEGMENT_BINS} bins, got {counts.shape[1]}")
        outs = []
        b_total = sum(counts.shape[0] for _, counts in groups)
        for t in range(SEGMENT_BINS):
            parts = [self._input_stage_step(cache, counts[:, t])
                     for cache, (_, counts) in zip(caches, groups)]
            z2 = concat(parts, axis=0) if len(parts) > 1 else parts[0]
            out = self._trunk_step(z2, training)
            outs.append(out.reshape((b_total, 1, self.config.output_dim)))
        return concat(outs, axis=1)

    # -- probes / energy ------------------------------------------------------------------

    def probe_snapshot(self) -> dict:
        """Ledger inputs: cumulative spike fractions plus mean token count."""
        cfg = self.config
        probes = {}
        for s, ffn in enumerate(self.msnn1):
            for l, sn in enumerate(ffn.lif_layers()):
                probes[f"msnn1.s{s}.l{l}"] = sn.probe.ratio()
        if self.ssa is not None and not cfg.ann_mode:
            probes["ssa.attn"] = self.ssa.sn_attn.probe.ratio()
            probes["ssa.ffn0"] = self.ssa.ffn.lif_layers()[0].probe.ratio()
            probes["ssa.ffn1"] = self.ssa.ffn.lif_layers()[1].probe.ratio()
        if isinstance(self.smlp, SpikingFfnLayer):
            probes["smlp"] = self.smlp.sn.probe.ratio()
        for s, ffn in enumerate(self.msnn2):
            for l, sn in enumerate(ffn.lif_layers()):
                probes[f"msnn2.s{s}.l{l}"] = sn.probe.ratio()
        probes["tokens_per_bin"] = (self._token_sum / self._token_bins
                                    if self._token_bins else 0.0)
        return probes

    def clear_token_probe(self):
        self._token_sum = 0.0
        self._token_bins = 0

    def energy_arch(self):
        from .energy import SpikachuArchSpec
        cfg = self.config
        return SpikachuArchSpec(
            latent_tokens=cfg.latent_tokens,
            embed_dim=cfg.embed_dim,
            harmonizer_heads=cfg.harmonizer_heads,
            virtual_units=cfg.virtual_units,
            msnn1_streams=cfg.n_streams1,
            msnn1_widths=tuple([cfg.msnn1_input]
                               + [cfg.msnn1_width] * cfg.msnn1_layers),
            ssa_p=cfg.n_streams1,
            ssa_dim=cfg.ssa_dim,
            ssa_heads=cfg.ssa_heads,
            ssa_stream_dim=cfg.msnn1_width,
            ssa_ffn_hidden=cfg.ssa_ffn_hidden,
            ssa_enabled=self.ssa is not None,
            smlp_in=cfg.smlp_in,
            smlp_out=cfg.smlp_out,
            msnn2_streams=cfg.n_streams2,
            msnn2_widths=tuple([cfg.smlp_out]
                               + [cfg.msnn2_width] * cfg.msnn2_layers),
            observer_width=cfg.observer_width,
            readout_in=cfg.observer_width,
            readout_out=cfg.output_dim,
        )

    # -- parameter bookkeeping ----------------------------------------------------------------

    def parameters(self):
        """Named learnable tensors in a stable order."""
        if self.harmonizer is not None:
            yield from self.harmonizer.parameters()
        for s, ffn in enumerate(self.msnn1):
            yield from ffn.parameters(f"msnn1.{s}")
        if self.ssa is not None:
            yield from self.ssa.parameters("ssa")
        yield from self.smlp.parameters("smlp")
        for s, ffn in enumerate(self.msnn2):
            yield from ffn.parameters(f"msnn2.{s}")
        if self.observer is not None:
            yield from self.observer.parameters("observer")
        yield from self.readout.parameters("readout")
        if self.harmonizer is not None:
            yield from self.harmonizer.table.parameters()
        else:
            for sid, lin in self.input_linears.items():
                yield from lin.parameters(f"input_linear.{sid}")

    def bn_layers(self):
        layers = []
        for ffn in self.msnn1:
            layers.extend(ffn.bn_layers())
        if self.ssa is not None:
            layers.extend(self.ssa.bn_layers())
        if isinstance(self.smlp, SpikingFfnLayer):
            layers.append(self.smlp.bn)
        else:
            layers.extend(self.smlp.bn_layers())
        for ffn in self.msnn2:
            layers.extend(ffn.bn_layers())
        return layers

    def named_buffers(self):
        """Non-learnable arrays that must round-trip through checkpoints."""
        for i, bn in enumerate(self.bn_layers()):
            yield f"buffers.bn{i}.running_mean", bn.state.running_mean
            yield f"buffers.bn{i}.running_var", bn.state.running_var
        yield "buffers.output_scale", self.output_scale
        yield "buffers.output_shift", self.output_shift

    def num_parameters(self) -> int:
        return sum(t.size for _, t in self.parameters())

    def num_synapse_parameters(self) -> int:
        """Weights/biases/normalizers, excluding neuron decay scalars."""
        return sum(t.size for name, t in self.parameters()
                   if not name.endswith("tau_raw"))

    def num_neurons(self) -> int:
        n = sum(layer.width for layer in self.spiking_layers())
        if self.observer is not None:
            n += self.observer.width
        return n

    def harmonizer_share(self) -> float:
        """Front-end core parameters over total (embeddings count in total)."""
        if self.harmonizer is None:
            return 0.0
        return self.harmonizer.core_parameter_count() / max(self.num_parameters(), 1)


class _AnnFfn:
    """Rectifier twin of SpikingFfn: relu -> W -> BN per layer, stateless."""

    def __init__(self, widths, rng):
        from .snn import BatchNorm
        self.layers = []
        for i in range(len(widths) - 1):
            self.layers.append((_ReluUnit(widths[i]),
                                Linear(widths[i], widths[i + 1], rng),
                                BatchNorm(widths[i + 1])))
        self.widths = list(widths)

    def step(self, x, training):
        for act, fc, bn in self.layers:
            x = bn(fc(act.step(x)), training)
        return x

    def reset(self):
        pass

    def lif_layers(self):
        return []

    def bn_layers(self):
        return [bn for _, _, bn in self.layers]

    def parameters(self, prefix):
        for i, (_, fc, bn) in enumerate(self.layers):
            yield from fc.parameters(f"{prefix}.{i}.fc")
            yield from bn.parameters(f"{prefix}.{i}.bn")


def build(config: ModelConfig, seed: int = 42) -> SpikachuModel:
    """Deterministically initialize a model from its configuration."""
    return SpikachuModel(config, seed)


# -- checkpoint container -------------------------------------------------------------


def save_checkpoint(model: SpikachuModel, path, metadata: dict | None = None):
    """Binary container: 8-byte magic, one-line JSON header, float payload.

    The header carries the config, the registered sessions with their
    unit ids, and a parameter manifest (name, shape, dtype, offset,
    length); the payload is the concatenated little-endian arrays.
    Round-trips are bit-exact.
    """
    entries = list(model.parameters()) + [
        (name, Tensor(buf)) for name, buf in model.named_buffers()]
    manifest = []
    payload = io.BytesIO()
    offset = 0
    for name, tensor in entries:
        arr = np.ascontiguousarray(tensor.data)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        manifest.append({"name": name, "shape": list(arr.shape),
                         "dtype": arr.dtype.str.replace(">", "<"),
                         "offset": offset, "length": len(raw)})
        payload.write(raw)
        offset += len(raw)
    if model.config.ablate_harmonizer:
        sessions = [{"session_id": sid, "unit_ids": list(range(lin.n_in))}
                    for sid, lin in model.input_linears.items()]
    else:
        sessions = [{"session_id": sid,
                     "unit_ids": [int(u) for u in units]}
                    for sid, (units, _) in model.harmonizer.table.sessions.items()]
    header = {
        "format_version": 1,
        "config": model.config.to_dict(),
        "seed": model.seed,
        "sessions": sessions,
        "params": manifest,
        "metadata": metadata or {},
    }
    blob = json.dumps(header, ensure_ascii=False).encode("utf-8")
    if b"\n" in blob:
        raise ValueError("checkpoint header must be a single line")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(blob)
        f.write(b"\n")
        f.write(payload.getvalue())
    return path


def load_checkpoint(path):
    """Rebuild a model (and its metadata) from a checkpoint file."""
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    nl = raw.index(b"\n", 8)
    header = json.loads(raw[8:nl].decode("utf-8"))
    if header.get("format_version") != 1:
        raise ValueError("unsupported checkpoint version")
    payload = raw[nl + 1:]
    config = ModelConfig.from_dict(header["config"])
    model = build(config, seed=header["seed"])
    for entry in header["sessions"]:
        model.register_session(entry["session_id"], entry["unit_ids"])
    arrays = dict(model.parameters())
    buffers = {name: buf for name, buf in model.named_buffers()}
    for entry in header["params"]:
        name = entry["name"]
        blob = payload[entry["offset"]:entry["offset"] + entry["length"]]
        arr = np.frombuffer(blob, dtype=np.dtype(entry["dtype"]))
        arr = arr.reshape(entry["shape"]).copy()
        if name in arrays:
            target = arrays[name]
            if tuple(target.shape) != tuple(arr.shape):
                raise ValueError(
                    f"checkpoint shape mismatch for {name}: "
                    f"{arr.shape} vs config {tuple(target.shape)}")
            target.data = arr.astype(target.data.dtype, copy=False)
        elif name in buffers:
            if buffers[name].shape != tuple(arr.shape):
                raise ValueError(f"checkpoint buffer shape mismatch for {name}")
            buffers[name][...] = arr
        else:
            raise ValueError(f"checkpoint contains unknown array {name!r}")
    return model, header["metadata"]
