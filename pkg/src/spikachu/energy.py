"""Deterministic MAC/AC counting, picojoule conversion, and LOAD/STORE
accounting for the spiking decoder and the baseline architectures.

Counts follow the published closed forms exactly: dense layers cost
n_i*n_o MACs plus n_o ACs, recurrent cells use the gate-derived
coefficients, attention uses the per-head token formulas, and spiking
layers replace MACs with spike-rate-scaled ACs.  Everything here is a
pure function of its arguments.
"""

from __future__ import annotations

from dataclasses import dataclass, field


class EnergySpecError(ValueError):
    """Raised on malformed dimensions, rates, or architecture specs."""


@dataclass(frozen=True)
class EnergyConstants:
    """Per-operation energies in picojoules (45 nm process reference)."""

    e_mac: float = 4.6
    e_ac: float = 0.9

    def __post_init__(self):
        if self.e_mac <= 0 or self.e_ac <= 0:
            raise EnergySpecError("energy constants must be positive")


# LOAD/STORE counts per arithmetic op
LOADS_PER_MAC = 3
STORES_PER_MAC = 1
LOADS_PER_AC = 2
STORES_PER_AC = 1


def memory_ops(n_mac, n_ac):
    """LOAD/STORE totals implied by MAC/AC counts."""
    if n_mac < 0 or n_ac < 0:
        raise EnergySpecError("operation counts must be non-negative")
    loads = LOADS_PER_MAC * n_mac + LOADS_PER_AC * n_ac
    stores = STORES_PER_MAC * n_mac + STORES_PER_AC * n_ac
    return loads, stores


def _num(x):
    """Render integral floats as ints for clean JSON."""
    if isinstance(x, float) and x.is_integer():
        return int(x)
    return x


@dataclass
class Component:
    name: str
    n_mac: float
    n_ac: float
    energy_pj: float


@dataclass
class EnergyLedger:
    """Per-component operation counts and energies, plus memory totals."""

    constants: EnergyConstants
    components: list = field(default_factory=list)
    probe_summary: dict | None = None

    def add(self, name, n_mac=0.0, n_ac=0.0):
        e = n_mac * self.constants.e_mac + n_ac * self.constants.e_ac
        self.components.append(Component(name, n_mac, n_ac, e))

    def merge(self, other: "EnergyLedger", prefix: str = ""):
        for c in other.components:
            self.components.append(Component(
                prefix + c.name if prefix else c.name, c.n_mac, c.n_ac, c.energy_pj))

    @property
    def total_mac(self):
        return sum(c.n_mac for c in self.components)

    @property
    def total_ac(self):
        return sum(c.n_ac for c in self.components)

    @property
    def total_pj(self):
        return sum(c.energy_pj for c in self.components)

    @property
    def loads(self):
        return memory_ops(self.total_mac, self.total_ac)[0]

    @property
    def stores(self):
        return memory_ops(self.total_mac, self.total_ac)[1]

    def to_report(self, model_name: str) -> dict:
        return {
            "model": model_name,
            "components": [
                {"name": c.name, "n_mac": _num(c.n_mac), "n_ac": _num(c.n_ac),
                 "energy_pJ": c.energy_pj}
                for c in self.components
            ],
            "total_mac": _num(self.total_mac),
            "total_ac": _num(self.total_ac),
            "total_pJ": self.total_pj,
            "total_uJ": self.total_pj / 1e6,
            "loads": _num(self.loads),
            "stores": _num(self.stores),
            "probe_summary": self.probe_summary,
        }


def _check_dims(layer_dims):
    if not layer_dims:
        raise EnergySpecError("layer dimension list is empty")
    for n_i, n_o in layer_dims:
        if n_i <= 0 or n_o <= 0:
            raise EnergySpecError(f"layer dims must be positive, got ({n_i},{n_o})")
    for (a, b), (c, _) in zip(layer_dims, layer_dims[1:]):
        if b != c:
            raise EnergySpecError(f"layer widths do not chain: {b} -> {c}")


def mlp_energy(layer_dims, constants=EnergyConstants()) -> EnergyLedger:
    """Dense MLP: n_i*n_o MACs plus n_o bias ACs per layer."""
    _check_dims(layer_dims)
    ledger = EnergyLedger(constants)
    for idx, (n_i, n_o) in enumerate(layer_dims):
        ledger.add(f"layer{idx}", n_mac=n_i * n_o, n_ac=n_o)
    return ledger


def _recurrent_energy(kind, n_i, n_h, cells_per_block, n_blocks,
                      readout_dims, constants):
    if min(n_i, n_h, cells_per_block, n_blocks) <= 0:
        raise EnergySpecError("recurrent dims must be positive")
    if kind == "gru":
        def mac(ni):
            return 3 * (n_h * (ni + n_h) + n_h) + 4 * n_h
        ac = 6 * n_h
    else:
        def mac(ni):
            return 4 * (n_h * (ni + n_h) + n_h) + 3 * n_h
        ac = 9 * n_h
    ledger = EnergyLedger(constants)
    block_mac = 0
    block_ac = 0
    for c in range(cells_per_block):
        block_mac += mac(n_i if c == 0 else n_h)
        block_ac += ac
    ledger.add("cells", n_mac=n_blocks * block_mac, n_ac=n_blocks * block_ac)
    if readout_dims:
        ledger.merge(mlp_energy(readout_dims, constants), prefix="readout.")
    return ledger


def gru_energy(n_i, n_h, cells_per_block, n_blocks, readout_dims=None,
               constants=EnergyConstants()) -> EnergyLedger:
    """Gated recurrent unit: 3*(n_h*(n_i+n_h)+n_h)+4*n_h MACs, 6*n_h ACs per cell."""
    return _recurrent_energy("gru", n_i, n_h, cells_per_block, n_blocks,
                             readout_dims, constants)


def lstm_energy(n_i, n_h, cells_per_block, n_blocks, readout_dims=None,
                constants=EnergyConstants()) -> EnergyLedger:
    """LSTM: 4*(n_h*(n_i+n_h)+n_h)+3*n_h MACs, 9*n_h ACs per cell."""
    return _recurrent_energy("lstm", n_i, n_h, cells_per_block, n_blocks,
                             readout_dims, constants)


def attention_mac_count(l1, l2, e, d, conventional_v=False):
    """Per-head MAC count of softmax cross-attention.

    l1 queries against l2 keys/values of per-head dims e (keys) and d
    (values).  The value term is d*l2^2 as published; ``conventional_v``
    switches it to the d*l1*l2 count instead.
    """
    if min(l1, l2, e, d) <= 0:
        raise EnergySpecError("attention dims must be positive")
    qk = e * l1 * l2
    norm = 3 * l1 * l2
    v = d * l1 * l2 if conventional_v else d * l2 * l2
    return qk + norm + v


def attention_energy(l1, l2, e, d, h, constants=EnergyConstants(),
                     conventional_v=False) -> EnergyLedger:
    """Softmax attention cost: H * MAC-count, all MAC-class; projections
    are charged separately as dense layers."""
    if h <= 0:
        raise EnergySpecError("head count must be positive")
    ledger = EnergyLedger(constants)
    ledger.add("attention", n_mac=h * attention_mac_count(l1, l2, e, d,
                                                          conventional_v))
    return ledger


def ssa_energy(l, e, d, h, constants=EnergyConstants()) -> EnergyLedger:
    """Softmax-free spiking attention: L^2 MACs (scaling) and L^2*(E+D)
    ACs per head (binary Q/K/V make the products accumulate-only)."""
    if min(l, e, d, h) <= 0:
        raise EnergySpecError("ssa dims must be positive")
    ledger = EnergyLedger(constants)
    ledger.add("ssa_attention", n_mac=h * l * l, n_ac=h * l * l * (e + d))
    return ledger


def smlp_energy(layer_dims, rates, t=1, constants=EnergyConstants(),
                include_bn=False) -> EnergyLedger:
    """Spiking MLP: synaptic ops are ACs scaled by the feeding spike rate.

    ``rates[l]`` is the spike fraction of whatever feeds layer l's weight
    matrix (1.0 for a real-valued input).  Each layer also pays n_o bias
    ACs; ``include_bn`` adds one MAC per output element for a folded
    scale+shift, off by default to match the published arithmetic.
    """
    _check_dims(layer_dims)
    if len(rates) != len(layer_dims):
        raise EnergySpecError(
            f"need one rate per layer: {len(rates)} rates for {len(layer_dims)} layers")
    for r in rates:
        if not 0.0 <= r <= 1.0:
            raise EnergySpecError(f"spike rate {r} outside [0, 1]")
    if t < 1:
        raise EnergySpecError("simulation steps t must be >= 1")
    ledger = EnergyLedger(constants)
    for idx, ((n_i, n_o), rho) in enumerate(zip(layer_dims, rates)):
        bn_mac = n_o if include_bn else 0
        ledger.add(f"layer{idx}", n_mac=bn_mac,
                   n_ac=t * rho * n_i * n_o + n_o)
    return ledger


def poyo_energy(spec: dict, constants=EnergyConstants()) -> EnergyLedger:
    """Encoder-process-decoder transformer: cross-attention in, N_SA
    self-attention blocks, cross-attention out, plus an MLP readout.

    ``spec`` keys: dim, heads, latents, input_tokens, output_queries,
    n_sa, readout (list of [n_i, n_o]).  Rotary-embedding cost is omitted.
    """
    required = ("dim", "heads", "latents", "input_tokens", "output_queries",
                "n_sa", "readout")
    missing = [k for k in required if k not in spec]
    if missing:
        raise EnergySpecError(f"incomplete architecture spec, missing {missing}")
    dim = spec["dim"]
    heads = spec["heads"]
    latents = spec["latents"]
    tokens = spec["input_tokens"]
    queries = spec["output_queries"]
    n_sa = spec["n_sa"]
    if min(dim, heads, latents, tokens, queries) <= 0 or n_sa < 0:
        raise EnergySpecError("architecture spec dims must be positive")
    if dim % heads:
        raise EnergySpecError("dim must be divisible by heads")
    hd = dim // heads

    def proj_cost(n_q_tokens, n_kv_tokens):
        # Q and output projections act on queries, K/V on keys
        mac = (2 * n_q_tokens + 2 * n_kv_tokens) * dim * dim
        ac = (2 * n_q_tokens + 2 * n_kv_tokens) * dim
        return mac, ac

    ledger = EnergyLedger(constants)
    ledger.merge(attention_energy(latents, tokens, hd, hd, heads, constants),
                 prefix="encoder.")
    mac, ac = proj_cost(latents, tokens)
    ledger.add("encoder.proj", n_mac=mac, n_ac=ac)
    if n_sa:
        sa = attention_energy(latents, latents, hd, hd, heads, constants)
        mac, ac = proj_cost(latents, latents)
        ledger.add("self_attention", n_mac=n_sa * (sa.total_mac + mac),
                   n_ac=n_sa * ac)
    ledger.merge(attention_energy(queries, latents, hd, hd, heads, constants),
                 prefix="decoder.")
    mac, ac = proj_cost(queries, latents)
    ledger.add("decoder.proj", n_mac=mac, n_ac=ac)
    readout = [tuple(p) for p in spec["readout"]]
    ro = mlp_energy(readout, constants)
    ledger.add("readout", n_mac=queries * ro.total_mac, n_ac=queries * ro.total_ac)
    return ledger


@dataclass(frozen=True)
class SpikachuArchSpec:
    """Dimensions needed to price one forward step of the spiking decoder."""

    latent_tokens: int = 128
    embed_dim: int = 32
    harmonizer_heads: int = 4
    virtual_units: int = 128
    msnn1_streams: int = 3
    msnn1_widths: tuple = (128, 256, 256, 256, 256)
    ssa_p: int = 3
    ssa_dim: int = 512
    ssa_heads: int = 8
    ssa_stream_dim: int = 256
    ssa_ffn_hidden: int = 256
    ssa_enabled: bool = True
    smlp_in: int = 768
    smlp_out: int = 384
    msnn2_streams: int = 2
    msnn2_widths: tuple = (384, 384, 384, 384, 384)
    observer_width: int = 768
    readout_in: int = 768
    readout_out: int = 2


def _msnn_probe_keys(prefix, streams, widths):
    return [f"{prefix}.s{s}.l{l}" for s in range(streams)
            for l in range(len(widths) - 1)]


def spikachu_probe_keys(arch: SpikachuArchSpec):
    """Probe names the ledger consumes, besides 'tokens_per_bin'."""
    keys = _msnn_probe_keys("msnn1", arch.msnn1_streams, arch.msnn1_widths)
    if arch.ssa_enabled:
        keys += ["ssa.attn", "ssa.ffn0", "ssa.ffn1"]
    keys += ["smlp"]
    keys += _msnn_probe_keys("msnn2", arch.msnn2_streams, arch.msnn2_widths)
    return keys


def spikachu_energy(arch: SpikachuArchSpec, probes: dict,
                    constants=EnergyConstants(),
                    include_bn=False, ann_mode=False) -> EnergyLedger:
    """Seven-component ledger for one forward step of the spiking decoder.

    ``probes`` maps the names from :func:`spikachu_probe_keys` to the
    measured spike fractions, plus 'tokens_per_bin' for the front-end
    attention cost.  Real-valued inputs (virtual units feeding the Q/K/V
    projections, observer membrane feeding the readout) carry rate 1.
    ``ann_mode`` prices every synaptic op as a full MAC (rectifier
    variant: activations are no longer binary) and drops the observer.
    """
    needed = spikachu_probe_keys(arch) + ["tokens_per_bin"]
    if ann_mode:
        probes = {**dict.fromkeys(needed, 1.0),
                  "tokens_per_bin": probes.get("tokens_per_bin", 0.0)}
    missing = [k for k in needed if k not in probes]
    if missing:
        raise EnergySpecError(f"missing probes: {missing}")
    tokens = probes["tokens_per_bin"]
    if tokens <= 0:
        raise EnergySpecError("tokens_per_bin must be positive")

    ledger = EnergyLedger(constants)
    d = arch.embed_dim
    l1 = arch.latent_tokens
    hd = d // arch.harmonizer_heads

    # harmonizer: cross-attention plus its projections plus the
    # virtual-unit linear, all MAC-class
    h_mac = arch.harmonizer_heads * attention_mac_count(l1, tokens, hd, hd)
    h_mac += l1 * d * d          # Q projection
    h_mac += 2 * tokens * d * d  # K, V projections
    h_mac += l1 * d * d          # output projection
    h_mac += l1 * d * arch.virtual_units  # virtual-unit linear on unrolled latents
    h_ac = l1 * d + 2 * tokens * d + l1 * d + arch.virtual_units
    ledger.add("harmonizer", n_mac=h_mac, n_ac=h_ac)

    def dense(n_i, n_o, rho):
        """One layer's (mac, ac): rate-scaled ACs, or full MACs in ANN mode."""
        if ann_mode:
            return n_i * n_o, n_o
        return (n_o if include_bn else 0), rho * n_i * n_o + n_o

    def msnn(prefix, streams, widths):
        dims = list(zip(widths[:-1], widths[1:]))
        mac = ac = 0.0
        for s in range(streams):
            for l, (n_i, n_o) in enumerate(dims):
                m, a = dense(n_i, n_o, probes[f"{prefix}.s{s}.l{l}"])
                mac += m
                ac += a
        return mac, ac

    mac, ac = msnn("msnn1", arch.msnn1_streams, arch.msnn1_widths)
    ledger.add("multi_scale_snn_1", n_mac=mac, n_ac=ac)

    if arch.ssa_enabled:
        head = arch.ssa_dim // arch.ssa_heads
        p = arch.ssa_p
        sd = arch.ssa_stream_dim
        if ann_mode:
            mac = arch.ssa_heads * p * p * (2 * head + 1)
            ac = 0.0
        else:
            attn = ssa_energy(p, head, head, arch.ssa_heads, constants)
            mac = attn.total_mac
            ac = attn.total_ac
        # Q/K/V projections are fed by the real-valued stream (rate 1)
        for n_i, n_o, rho, reps in (
                (sd, arch.ssa_dim, 1.0, 3),
                (arch.ssa_dim, sd, probes["ssa.attn"], 1),
                (sd, arch.ssa_ffn_hidden, probes["ssa.ffn0"], 1),
                (arch.ssa_ffn_hidden, sd, probes["ssa.ffn1"], 1)):
            m, a = dense(n_i, n_o, rho)
            mac += reps * p * m
            ac += reps * p * a
        ledger.add("ssa", n_mac=mac, n_ac=ac)
    else:
        ledger.add("ssa", n_mac=0, n_ac=0)

    mac, ac = dense(arch.smlp_in, arch.smlp_out, probes["smlp"])
    ledger.add("spiking_mlp", n_mac=mac, n_ac=ac)

    mac, ac = msnn("msnn2", arch.msnn2_streams, arch.msnn2_widths)
    ledger.add("multi_scale_snn_2", n_mac=mac, n_ac=ac)

    if not ann_mode:
        ledger.add("observer", n_ac=arch.observer_width)
    else:
        ledger.add("observer")

    if ann_mode:
        ledger.add("readout", n_mac=arch.readout_in * arch.readout_out,
                   n_ac=arch.readout_out)
    else:
        ledger.add("readout",
                   n_ac=1.0 * arch.readout_in * arch.readout_out + arch.readout_out)

    ledger.probe_summary = {k: probes[k] for k in needed}
    return ledger
