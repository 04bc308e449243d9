"""Per-layer gradient profiling and bisection search for the surrogate width gamma.

With a narrow surrogate (large gamma) the backward signal shrinks at every
spiking layer; with a wide one (small gamma) it grows. The balance ratio
R = mean|dL/ds| over the input-side half of the spiking layers divided by the
output-side half is therefore non-increasing in gamma, and R = 1 can be
bracketed and bisected in log(gamma).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .data import Dataset
from .errors import ContractError
from .losses import cross_entropy
from .network import Network, NetworkSpec
from .neuron import NeuronConfig, surrogate
from .tensor import Tape, backward

GAMMA_BOUNDS = (1e-2, 1e4)
PROFILE_COLUMNS = ("layer_index", "layer_name", "mean_abs_grad", "grad_variance")
HISTORY_COLUMNS = ("iteration", "gamma", "ratio", "gamma_lo", "gamma_hi")


@dataclass
class LayerGradient:
    layer_index: int
    layer_name: str
    mean_abs_grad: float
    grad_variance: float


@dataclass
class GradientProfile:
    layers: list
    gamma: float
    seed: int
    num_batches: int

    @property
    def mean_abs(self) -> np.ndarray:
        return np.array([l.mean_abs_grad for l in self.layers])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(PROFILE_COLUMNS)
            for l in self.layers:
                writer.writerow([l.layer_index, l.layer_name, repr(l.mean_abs_grad), repr(l.grad_variance)])


@dataclass
class TuneResult:
    gamma: float
    iterations: int
    ratio: float
    converged: bool
    history: list = field(default_factory=list)
    monotone: bool = True
    notes: list = field(default_factory=list)
    profile: Optional[GradientProfile] = None

    def history_to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(HISTORY_COLUMNS)
            for row in self.history:
                writer.writerow([row[0]] + [repr(float(v)) for v in row[1:]])

    def summary(self) -> str:
        state = "converged" if self.converged else "NOT converged"
        lines = [f"gamma={self.gamma:.6g} ratio={self.ratio:.6g} iterations={self.iterations} ({state})"]
        if not self.monotone:
            lines.append("warning: R(gamma) was not monotone over the visited points")
        lines += self.notes
        return "\n".join(lines)


def profiling_batches(dataset: Dataset, num_batches: int = 8, batch_size: int = 32, seed: int = 0):
    """Fixed list of ``(images, labels)`` batches drawn once with ``seed``."""
    if num_batches < 1:
        raise ContractError("need at least one profiling batch")
    batches = []
    for xb, yb in dataset.batches(batch_size, shuffle_seed=seed):
        batches.append((xb, yb))
        if len(batches) == num_batches:
            break
    return batches


def _fresh(net: Union[Network, NetworkSpec], seed: int) -> Network:
    if isinstance(net, NetworkSpec):
        return Network(net, seed=seed)
    return Network(net.spec, seed=seed)


def profile_gradients(net: Union[Network, NetworkSpec], batches: Sequence, gamma: float,
                      seed: int = 0, timesteps: int = 10) -> GradientProfile:
    """Mean |dL/ds| and var[dL/ds] per spiking layer of a freshly initialized network.

    The network is rebuilt from its spec with ``seed`` and run forward and
    backward on every batch without updating parameters. Spiking layers of
    ``net`` keep their thresholds; dropout is disabled.
    """
    fresh = _fresh(net, seed)
    if isinstance(net, Network):
        for k in range(net.num_spiking):
            fresh.set_threshold(k, net.threshold(k))
    if fresh.num_spiking == 0:
        raise ContractError("network has no spiking layers to profile")
    if len(batches) < 1:
        raise ContractError("need at least one profiling batch")
    fresh.set_gamma(gamma)
    fresh.train()
    dropout_p = {}
    for i, layer in enumerate(fresh.spec.layers):
        if getattr(layer, "kind", None) == "dropout":
            dropout_p[i] = layer.p
    count = np.zeros(fresh.num_spiking)
    abs_sum = np.zeros(fresh.num_spiking)
    sq_sum = np.zeros(fresh.num_spiking)
    total = np.zeros(fresh.num_spiking)
    names = []
    for xb, yb in batches:
        with Tape():
            logits, trace = _forward_without_dropout(fresh, xb, timesteps)
            backward(cross_entropy(logits, yb))
        names = [r.name for r in trace.spiking]
        for k, record in enumerate(trace.spiking):
            g = record.spike_grads
            g = np.zeros(record.spikes.shape) if g is None else g.astype(np.float64)
            count[k] += g.size
            abs_sum[k] += np.abs(g).sum()
            sq_sum[k] += (g * g).sum()
            total[k] += g.sum()
    mean = total / count
    layers = [
        LayerGradient(fresh.spiking_layer(k), names[k], float(abs_sum[k] / count[k]),
                      float(max(sq_sum[k] / count[k] - mean[k] ** 2, 0.0)))
        for k in range(fresh.num_spiking)
    ]
    return GradientProfile(layers, float(gamma), seed, len(batches))


def _forward_without_dropout(net: Network, images, timesteps: int):
    saved = net.training
    # dropout reads net.training; batch norm state keeps train mode
    net.training = False
    try:
        return net.forward(images, timesteps)
    finally:
        net.training = saved


def balance_ratio(profile: Union[GradientProfile, Sequence[float]]) -> float:
    """Input-side half mean |grad| over output-side half; a middle layer counts as input side."""
    values = profile.mean_abs if isinstance(profile, GradientProfile) else np.asarray(profile, dtype=float)
    if len(values) < 2:
        raise ContractError("balance ratio needs at least two spiking layers")
    split = (len(values) + 1) // 2
    first, second = values[:split].mean(), values[split:].mean()
    if second == 0:
        return math.inf
    return float(first / second)


def bisect_log(ratio_fn: Callable[[float], float], gamma_lo: float, gamma_hi: float, tol: float = 0.5,
               max_iter: int = 20, bounds: tuple = GAMMA_BOUNDS, widen: float = 10.0) -> TuneResult:
    """Find gamma with |log2 R(gamma)| <= tol for a non-increasing ``ratio_fn``.

    The bracket needs R(lo) > 1 > R(hi); each side is widened by ``widen``
    (within ``bounds``) until that holds. If R(lo) <= 1 even at the lower
    bound the network is already balanced or vanishing there, and the lower
    end is returned. Only midpoint evaluations count toward ``max_iter``.
    """
    if not 0 < gamma_lo < gamma_hi:
        raise ContractError(f"need 0 < gamma_lo < gamma_hi, got {gamma_lo}, {gamma_hi}")
    visited: dict[float, float] = {}
    history = []
    notes = []

    def R(g):
        if g not in visited:
            visited[g] = float(ratio_fn(g))
        return visited[g]

    def monotone() -> bool:
        pts = [visited[g] for g in sorted(visited)]
        return all(a >= b for a, b in zip(pts, pts[1:]))

    def close(gamma, ratio, iters, converged):
        return TuneResult(gamma, iters, ratio, converged, history, monotone(), notes)

    lo, hi = gamma_lo, gamma_hi
    while R(lo) <= 1:
        if lo <= bounds[0]:
            notes.append(f"R(gamma_lo={lo:.6g}) = {R(lo):.6g} <= 1 at the lower bound; returning it")
            return close(lo, R(lo), 0, abs(math.log2(R(lo))) <= tol if R(lo) > 0 else False)
        lo = max(lo / widen, bounds[0])
        notes.append(f"widened gamma_lo to {lo:.6g}")
    while R(hi) >= 1:
        if hi >= bounds[1]:
            notes.append(f"could not bracket: R({hi:.6g}) = {R(hi):.6g} >= 1 at the upper bound")
            return close(hi, R(hi), 0, False)
        hi = min(hi * widen, bounds[1])
        notes.append(f"widened gamma_hi to {hi:.6g}")

    best = None
    for it in range(1, max_iter + 1):
        mid = math.exp(0.5 * (math.log(lo) + math.log(hi)))
        r = R(mid)
        history.append((it, mid, r, lo, hi))
        err = abs(math.log2(r)) if 0 < r < math.inf else math.inf
        if best is None or err < best[2]:
            best = (mid, r, err)
        if err <= tol:
            return close(mid, r, it, True)
        if r > 1:
            lo = mid
        else:
            hi = mid
    notes.append(f"no gamma within tolerance after {max_iter} iterations; returning the closest")
    return close(best[0], best[1], max_iter, False)


def tune_gamma(net: Union[Network, NetworkSpec], batches: Sequence, gamma_lo: float = 1.0,
               gamma_hi: float = 100.0, tol: float = 0.5, max_iter: int = 20, seed: int = 0,
               timesteps: int = 10) -> TuneResult:
    """Bisect gamma so both halves of the network see similar gradient magnitudes.

    Every evaluation rebuilds the network from the same seed and uses the same
    batches, so R(gamma) is a deterministic function.
    """
    spec = net.spec if isinstance(net, Network) else net
    if len(spec.spiking_indices()) < 2:
        gamma = (net.gamma if isinstance(net, Network) else None) or NeuronConfig().gamma
        result = TuneResult(gamma, 0, 1.0, True,
                            notes=["fewer than two spiking layers: nothing to balance, keeping default gamma"])
        return result
    profiles: dict[float, GradientProfile] = {}

    def ratio(g):
        profiles[g] = profile_gradients(net, batches, g, seed, timesteps)
        return balance_ratio(profiles[g])

    result = bisect_log(ratio, gamma_lo, gamma_hi, tol, max_iter)
    result.profile = profiles.get(result.gamma)
    return result


def fsq_mean(gamma: float, beta: float, potential_samples, threshold: float = 1.0) -> float:
    """Monte-Carlo estimate of <f(u)^2> over recorded membrane potentials."""
    u = np.asarray(potential_samples, dtype=np.float64).reshape(-1)
    if u.size == 0:
        raise ContractError("fsq_mean needs at least one potential sample")
    f = surrogate(u, threshold, beta, gamma)
    return float(np.mean(f * f))


def surrogate_variance_gain(potentials, potential_grads, spike_grads, neuron: NeuronConfig):
    """Empirical var[dL/du] / var[dL/ds] next to the predicted <f(u)^2> for one layer.

    Returns ``(empirical, predicted)``.
    """
    du = np.asarray(potential_grads, dtype=np.float64).reshape(-1)
    ds = np.asarray(spike_grads, dtype=np.float64).reshape(-1)
    predicted = fsq_mean(neuron.gamma, neuron.beta, potentials, neuron.threshold)
    return float(du.var() / ds.var()), predicted


def write_profiles(profiles: dict, out_dir) -> list[Path]:
    """One ``profile_gamma<value>.csv`` per gamma."""
    paths = []
    for gamma, profile in profiles.items():
        path = Path(out_dir) / f"profile_gamma{gamma:g}.csv"
        profile.to_csv(path)
        paths.append(path)
    return paths
