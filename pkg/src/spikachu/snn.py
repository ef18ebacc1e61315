"""Stateful spiking layers: LIF with learnable decay, membrane observer,
and the spike->linear->batchnorm feed-forward block.

Decay is parametrized as tau = 1/sigmoid(tau_raw) so the effective time
constant always exceeds 1; tau_raw is a learnable scalar shared by all
neurons of a layer.  One step corresponds to one 10 ms bin (T = 1, R = 1,
dt = 1 in model units).
"""

from __future__ import annotations

import math

import numpy as np

from . import engine
from .engine import (BatchNormState, ShapeError, SurrogateSpec, Tensor,
                     batch_norm, leaky_step, lif_step, linear, parameter,
                     sigmoid)


def tau_raw_from_tau(tau0: float) -> float:
    """Inverse of tau = 1/sigmoid(raw): raw = -log(tau0 - 1)."""
    if not tau0 > 1.0:
        raise ValueError(f"initial tau must be > 1, got {tau0}")
    return -math.log(tau0 - 1.0)


class LifParams:
    """Threshold/reset constants plus the learnable decay of one layer."""

    def __init__(self, tau0: float, v_threshold: float = 1.0,
                 v_reset: float = 0.0, dtype=engine.DEFAULT_DTYPE):
        if not v_threshold > v_reset:
            raise ValueError("v_threshold must exceed v_reset")
        self.tau_raw = parameter(tau_raw_from_tau(tau0), dtype=dtype)
        self.v_threshold = v_threshold
        self.v_reset = v_reset

    def tau(self) -> Tensor:
        return 1.0 / sigmoid(self.tau_raw)


class SpikeRateProbe:
    """Fraction of neurons that spiked, last step and cumulatively."""

    def __init__(self):
        self.last_ratio = 0.0
        self.spike_count = 0
        self.total_count = 0

    def record(self, spikes: np.ndarray):
        n = spikes.size
        k = int(spikes.sum())
        self.last_ratio = k / n if n else 0.0
        self.spike_count += k
        self.total_count += n

    def ratio(self) -> float:
        """Cumulative spike fraction since the last reset."""
        return self.spike_count / self.total_count if self.total_count else 0.0

    def clear(self):
        self.last_ratio = 0.0
        self.spike_count = 0
        self.total_count = 0


class LifLayer:
    """A population of LIF neurons driven one bin at a time.

    State (membrane potential) is lazily allocated to match the incoming
    batch; ``reset`` must be called before the first step of a segment.
    """

    def __init__(self, width: int, tau0: float, surrogate: SurrogateSpec,
                 v_threshold: float = 1.0, v_reset: float = 0.0,
                 dtype=engine.DEFAULT_DTYPE):
        self.width = width
        self.params = LifParams(tau0, v_threshold, v_reset, dtype=dtype)
        self.surrogate = surrogate
        self.dtype = dtype
        self.state: Tensor | None = None
        self.probe = SpikeRateProbe()
        self.last_spikes: np.ndarray | None = None
        self._armed = False

    def reset(self):
        self.state = None
        self._armed = True
        self.probe.clear()
        self.last_spikes = None

    def _ensure_state(self, batch: int):
        if not self._armed:
            raise RuntimeError("LIF layer used before reset")
        if self.state is None or self.state.shape[0] != batch:
            self.state = Tensor(np.full((batch, self.width),
                                        self.params.v_reset, dtype=self.dtype))

    def step(self, current: Tensor) -> Tensor:
        if current.shape[-1] != self.width:
            raise ShapeError(
                f"LIF layer width {self.width} got input {current.shape}")
        self._ensure_state(current.shape[0])
        spikes, self.state = lif_step(
            self.state, current, self.params.tau(), self.surrogate,
            v_threshold=self.params.v_threshold, v_reset=self.params.v_reset)
        self.probe.record(spikes.data)
        self.last_spikes = spikes.data
        return spikes

    def parameters(self, prefix):
        yield f"{prefix}.tau_raw", self.params.tau_raw


class ObserverLayer:
    """Leaky integrator that never fires; its membrane is the output."""

    def __init__(self, width: int, tau0: float, dtype=engine.DEFAULT_DTYPE):
        self.width = width
        self.params = LifParams(tau0, dtype=dtype)
        self.dtype = dtype
        self.state: Tensor | None = None
        self._armed = False

    def reset(self):
        self.state = None
        self._armed = True

    def step(self, current: Tensor) -> Tensor:
        if current.shape[-1] != self.width:
            raise ShapeError(
                f"observer width {self.width} got input {current.shape}")
        if not self._armed:
            raise RuntimeError("observer used before reset")
        if self.state is None or self.state.shape[0] != current.shape[0]:
            self.state = Tensor(np.full((current.shape[0], self.width),
                                        self.params.v_reset, dtype=self.dtype))
        self.state = leaky_step(self.state, current, self.params.tau())
        return self.state

    def parameters(self, prefix):
        yield f"{prefix}.tau_raw", self.params.tau_raw


class Linear:
    """Dense affine map with PyTorch-style uniform init."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator,
                 bias: bool = True, dtype=engine.DEFAULT_DTYPE):
        bound = 1.0 / math.sqrt(n_in)
        self.w = parameter(rng.uniform(-bound, bound, (n_in, n_out)), dtype=dtype)
        self.b = parameter(rng.uniform(-bound, bound, n_out), dtype=dtype) if bias else None
        self.n_in = n_in
        self.n_out = n_out

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.w, self.b)

    def parameters(self, prefix):
        yield f"{prefix}.w", self.w
        if self.b is not None:
            yield f"{prefix}.b", self.b


class BatchNorm:
    """Learnable scale/shift batch normalization over [N, F]."""

    def __init__(self, width: int, dtype=engine.DEFAULT_DTYPE):
        self.gamma = parameter(np.ones(width), dtype=dtype)
        self.beta = parameter(np.zeros(width), dtype=dtype)
        self.state = BatchNormState(width, dtype=dtype)
        self.width = width

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return batch_norm(x, self.gamma, self.beta, self.state, training)

    def parameters(self, prefix):
        yield f"{prefix}.gamma", self.gamma
        yield f"{prefix}.beta", self.beta

    def buffers(self, prefix):
        yield f"{prefix}.running_mean", self.state
        yield f"{prefix}.running_var", self.state


class SpikingFfnLayer:
    """One block of the spiking feed-forward pattern: SN -> W -> BN."""

    def __init__(self, n_in, n_out, tau0, surrogate, rng,
                 dtype=engine.DEFAULT_DTYPE):
        self.sn = LifLayer(n_in, tau0, surrogate, dtype=dtype)
        self.fc = Linear(n_in, n_out, rng, dtype=dtype)
        self.bn = BatchNorm(n_out, dtype=dtype)

    def step(self, x: Tensor, training: bool) -> Tensor:
        spikes = self.sn.step(x)
        return self.bn(self.fc(spikes), training)

    def reset(self):
        self.sn.reset()

    def parameters(self, prefix):
        yield from self.sn.parameters(f"{prefix}.sn")
        yield from self.fc.parameters(f"{prefix}.fc")
        yield from self.bn.parameters(f"{prefix}.bn")


class SpikingFfn:
    """Stack of SN->W->BN layers sharing one initial decay constant.

    ``widths`` chains input through hidden to output, e.g. [128, 256, 256]
    builds two layers.  The output of the stack is the last BN output
    (real-valued); spikes stay internal.
    """

    def __init__(self, widths, tau0, surrogate, rng, dtype=engine.DEFAULT_DTYPE):
        if len(widths) < 2:
            raise ValueError("SpikingFfn needs at least input and output widths")
        self.layers = [
            SpikingFfnLayer(widths[i], widths[i + 1], tau0, surrogate, rng, dtype)
            for i in range(len(widths) - 1)
        ]
        self.widths = list(widths)

    def step(self, x: Tensor, training: bool) -> Tensor:
        for layer in self.layers:
            x = layer.step(x, training)
        return x

    def reset(self):
        for layer in self.layers:
            layer.reset()

    def lif_layers(self):
        return [layer.sn for layer in self.layers]

    def parameters(self, prefix):
        for i, layer in enumerate(self.layers):
            yield from layer.parameters(f"{prefix}.{i}")

    def bn_layers(self):
        return [layer.bn for layer in self.layers]


def reset_states(network):
    """Zero every membrane and clear probes on any object exposing them.

    Accepts a single layer, an iterable of layers, or an object with a
    ``spiking_layers()`` method (the model).
    """
    if hasattr(network, "reset"):
        network.reset()
        return
    if hasattr(network, "spiking_layers"):
        for layer in network.spiking_layers():
            layer.reset()
        return
    for item in network:
        reset_states(item)
