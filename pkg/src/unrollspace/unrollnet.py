"""Unrolled network families: genome encoding, parameters, forward, backward.

A genome fixes the architecture: which earlier-layer outputs feed each layer
(skip gates), whether a layer keeps its default input from the immediately
preceding layer (side gates), the per-layer neuron, and how gated inputs are
fused (lwa: learnable weighted average; na: plain average; mm: momentum-style
shared matrices per lookback offset).  Layer k computes

    x^(k) = neuron_k( W_b b + alpha^(k) W_x fused_k )          (lwa / na)
    x^(k) = neuron_k( W_b b + sum_d alpha_d^(k) What_d x^(k-d) )   (mm)

from x^(0) = 0, with W_b and W_x (or the What_d) shared across layers.  The
backward pass is hand-derived reverse mode over this graph.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np

from . import fileio
from .numerics import (
    NEURON_TAGS,
    SOFT_THRESHOLD,
    NeuronType,
    apply_neuron,
    neuron_input_derivative,
    neuron_theta_derivative,
    spectral_sq_norm,
)

LWA = "lwa"
NA = "na"
MM = "mm"
FUSION_MODES = (LWA, NA, MM)

PARAMS_MAGIC = b"USRP"

DEFAULT_K = 16


def all_skip_pairs(k_layers: int) -> list:
    """Every allowed extra connection (origin, dest): origin <= dest - 2."""
    return [(i, k) for k in range(3, k_layers + 1) for i in range(1, k - 1)]


@dataclass(frozen=True)
class Genome:
    """Discrete architecture encoding; immutable and hashable."""

    k_layers: int
    fusion: str = LWA
    skip_gates: frozenset = frozenset()
    side_gates: tuple = ()
    neurons: tuple = ()

    def conn_pairs(self) -> list:
        """Active (origin, dest) connections in canonical order.

        Includes the default (k-1, k) pair for every layer whose side gate is
        on; layer 1's default origin is x^(0).  Skip pairs come from
        skip_gates.  Sorted by (dest, origin).
        """
        pairs = []
        for k in range(1, self.k_layers + 1):
            if self.side_gates[k - 1]:
                pairs.append((k - 1, k))
        pairs.extend(self.skip_gates)
        return sorted(pairs, key=lambda p: (p[1], p[0]))

    def mm_offsets(self) -> list:
        return sorted({k - i for i, k in self.conn_pairs()})


def make_genome(k_layers: int, fusion: str = LWA, skips=(), side_gates=None,
                neurons=None) -> Genome:
    if side_gates is None:
        side_gates = (True,) * k_layers
    if neurons is None:
        neurons = (NeuronType(SOFT_THRESHOLD),) * k_layers
    neurons = tuple(
        t if isinstance(t, NeuronType) else NeuronType(t) for t in neurons
    )
    return Genome(
        k_layers=k_layers,
        fusion=fusion,
        skip_gates=frozenset(tuple(p) for p in skips),
        side_gates=tuple(bool(s) for s in side_gates),
        neurons=neurons,
    )


def genome_lista(k_layers: int) -> Genome:
    """Plain unrolled network: default connections only."""
    if k_layers < 2:
        raise ValueError("k_layers must be >= 2")
    return make_genome(k_layers)


def genome_lfista(k_layers: int) -> Genome:
    """Momentum-style pattern: each layer also sees the output two layers back."""
    if k_layers < 2:
        raise ValueError("k_layers must be >= 2")
    return make_genome(k_layers, skips=[(k - 2, k) for k in range(3, k_layers + 1)])


def genome_dense(k_layers: int) -> Genome:
    """Every layer connected to all of its predecessors."""
    if k_layers < 2:
        raise ValueError("k_layers must be >= 2")
    return make_genome(k_layers, skips=all_skip_pairs(k_layers))


PRESET_BUILDERS = {
    "lista": genome_lista,
    "lfista": genome_lfista,
    "dense": genome_dense,
}


def preset_genome(name: str, k_layers: int, fusion: str = LWA) -> Genome:
    if name not in PRESET_BUILDERS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESET_BUILDERS)}")
    g = PRESET_BUILDERS[name](k_layers)
    return replace(g, fusion=fusion) if fusion != LWA else g


def count_extra(genome: Genome) -> int:
    """Number of active extra (skip) connections, 0 for the plain network."""
    return len(genome.skip_gates)


def design_space_size(k_layers: int, with_neurons: bool, with_pruning: bool) -> int:
    """Cardinality of the architecture space as an exact big integer."""
    if k_layers < 2:
        raise ValueError("k_layers must be >= 2")
    size = 2 ** ((k_layers - 1) * (k_layers - 2) // 2)
    if with_neurons:
        size *= 3 ** k_layers
    if with_pruning:
        size *= 2 ** (k_layers - 1)
    return size


def validate_genome(genome: Genome) -> list:
    """Return a list of violation strings; empty means the genome is valid."""
    violations = []
    K = genome.k_layers
    if K < 2:
        violations.append(f"k_layers must be >= 2, got {K}")
    if genome.fusion not in FUSION_MODES:
        violations.append(f"unknown fusion mode {genome.fusion!r}")
    if len(genome.side_gates) != K:
        violations.append(f"side_gates must have length {K}, got {len(genome.side_gates)}")
    elif not genome.side_gates[0]:
        violations.append("side gate of layer 1 must stay on")
    if len(genome.neurons) != K:
        violations.append(f"neurons must have length {K}, got {len(genome.neurons)}")
    else:
        for k, t in enumerate(genome.neurons, start=1):
            tag = t.tag if isinstance(t, NeuronType) else t
            if tag not in NEURON_TAGS:
                violations.append(f"layer {k}: unknown neuron tag {tag!r}")
    for i, k in sorted(genome.skip_gates):
        if i >= k:
            violations.append(f"non-causal connection ({i}, {k})")
        elif i < 1 or k > K:
            violations.append(f"connection ({i}, {k}) out of range for {K} layers")
        elif i == k - 1:
            violations.append(f"connection ({i}, {k}) duplicates the default input")
    return violations


def genome_to_dict(genome: Genome) -> dict:
    return {
        "k": genome.k_layers,
        "fusion": genome.fusion,
        "skip_gates": [list(p) for p in sorted(genome.skip_gates)],
        "side_gates": [bool(s) for s in genome.side_gates],
        "neurons": [t.tag for t in genome.neurons],
    }


def genome_from_dict(d: dict) -> Genome:
    return make_genome(
        k_layers=int(d["k"]),
        fusion=d.get("fusion", LWA),
        skips=[tuple(p) for p in d.get("skip_gates", [])],
        side_gates=d.get("side_gates"),
        neurons=d.get("neurons"),
    )


def genome_to_json(genome: Genome) -> str:
    return fileio.canonical_json(genome_to_dict(genome))


def genome_from_json(text: str) -> Genome:
    return genome_from_dict(json.loads(text))


def genome_hash(genome: Genome) -> str:
    return hashlib.sha256(genome_to_json(genome).encode()).hexdigest()


@lru_cache(maxsize=512)
def _plan(genome: Genome):
    """Per-layer list of (origin, pair_index) into the canonical pair order."""
    pairs = genome.conn_pairs()
    index = {pair: idx for idx, pair in enumerate(pairs)}
    layers = [None] + [[] for _ in range(genome.k_layers)]
    for (i, k) in pairs:
        layers[k].append((i, index[(i, k)]))
    for k in range(1, genome.k_layers + 1):
        layers[k].sort()
    return pairs, layers


@dataclass
class NetParams:
    """Learnable parameters; the exact fields depend on the fusion mode.

    alpha is per-layer for lwa/na and per active connection for mm;
    conn_coef (lwa only) is aligned with Genome.conn_pairs(); w_hat (mm only)
    maps lookback offset d to the shared matrix applied to x^(k-d).
    """

    fusion: str
    w_b: np.ndarray
    theta: np.ndarray
    alpha: np.ndarray
    w_x: np.ndarray | None = None
    conn_coef: np.ndarray | None = None
    w_hat: dict | None = None

    def named_arrays(self) -> list:
        items = [("w_b", self.w_b)]
        if self.w_x is not None:
            items.append(("w_x", self.w_x))
        items.append(("alpha", self.alpha))
        items.append(("theta", self.theta))
        if self.conn_coef is not None:
            items.append(("conn_coef", self.conn_coef))
        if self.w_hat is not None:
            items.extend((f"w_hat_{d}", self.w_hat[d]) for d in sorted(self.w_hat))
        return items

    def copy(self) -> "NetParams":
        return NetParams(
            fusion=self.fusion,
            w_b=self.w_b.copy(),
            theta=self.theta.copy(),
            alpha=self.alpha.copy(),
            w_x=None if self.w_x is None else self.w_x.copy(),
            conn_coef=None if self.conn_coef is None else self.conn_coef.copy(),
            w_hat=None if self.w_hat is None else {d: w.copy() for d, w in self.w_hat.items()},
        )

    def pack(self) -> np.ndarray:
        return np.concatenate([arr.ravel() for _, arr in self.named_arrays()])

    def unpack(self, vec: np.ndarray) -> "NetParams":
        out = self.copy()
        offset = 0
        for _, arr in out.named_arrays():
            arr.flat[:] = vec[offset : offset + arr.size]
            offset += arr.size
        return out

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(arr)) for _, arr in self.named_arrays())


def zero_grads(params: NetParams) -> dict:
    return {name: np.zeros_like(arr) for name, arr in params.named_arrays()}


def init_params(genome: Genome, D, lam: float) -> NetParams:
    """Analytic initialization that makes the network reproduce the classical
    proximal-gradient iterates: W_b = D^T/L, W_x = I - D^T D/L, alpha = 1,
    theta = lam/L, all fusion coefficients 1, and (mm) What_1 = I - D^T D/L
    with What_d = 0 for d >= 2.
    """
    violations = validate_genome(genome)
    if violations:
        raise ValueError("invalid genome: " + "; ".join(violations))
    L = spectral_sq_norm(D.data)
    n = D.n
    K = genome.k_layers
    w_b = D.data.T / L
    theta = np.full(K, lam / L)
    pairs = genome.conn_pairs()
    if genome.fusion in (LWA, NA):
        w_x = np.eye(n) - (D.data.T @ D.data) / L
        conn = None
        if genome.fusion == LWA:
            # default-path coefficients start at 1, extra connections at 0, so
            # every genome starts from the classical iteration (mirrors the
            # zero-initialized extra matrices of the mm fusion)
            conn = np.array([1.0 if i == k - 1 else 0.0 for i, k in pairs])
        return NetParams(
            fusion=genome.fusion,
            w_b=w_b,
            theta=theta,
            alpha=np.ones(K),
            w_x=w_x,
            conn_coef=conn,
        )
    w_hat = {}
    for d in genome.mm_offsets():
        if d == 1:
            w_hat[d] = np.eye(n) - (D.data.T @ D.data) / L
        else:
            w_hat[d] = np.zeros((n, n))
    return NetParams(
        fusion=MM,
        w_b=w_b,
        theta=theta,
        alpha=np.ones(len(pairs)),
        w_hat=w_hat,
    )


def _check_params(genome: Genome, params: NetParams):
    if params.fusion != genome.fusion:
        raise ValueError(f"params fusion {params.fusion!r} != genome fusion {genome.fusion!r}")
    K = genome.k_layers
    n_pairs = len(genome.conn_pairs())
    if params.theta.shape != (K,):
        raise ValueError("theta shape does not match genome depth")
    if genome.fusion in (LWA, NA):
        if params.alpha.shape != (K,) or params.w_x is None:
            raise ValueError("alpha/w_x do not match an lwa/na genome")
        if genome.fusion == LWA and (params.conn_coef is None or params.conn_coef.shape != (n_pairs,)):
            raise ValueError("conn_coef does not match the genome's active connections")
    else:
        if params.alpha.shape != (n_pairs,) or params.w_hat is None:
            raise ValueError("alpha/w_hat do not match an mm genome")
        if sorted(params.w_hat) != genome.mm_offsets():
            raise ValueError("w_hat offsets do not match the genome")


@dataclass
class ForwardTrace:
    """Everything the backward pass needs: layer outputs x^(1..depth), the
    fused inputs, pre-activations, and cached linear terms."""

    layer_outputs: list
    fused_inputs: list
    pre_activations: list = field(default_factory=list, repr=False)
    lin_terms: list = field(default_factory=list, repr=False)


def forward(genome: Genome, params: NetParams, b: np.ndarray,
            depth: int | None = None) -> ForwardTrace:
    """Run the unrolled network on a batch ``b`` of measurement columns.

    ``depth`` truncates the network (used by stage-wise training); defaults
    to the full genome depth.
    """
    _check_params(genome, params)
    b = np.asarray(b, dtype=np.float64)
    if b.ndim != 2 or b.shape[0] != params.w_b.shape[1]:
        raise ValueError(f"measurement batch shape {b.shape} incompatible with W_b {params.w_b.shape}")
    K = genome.k_layers
    depth = K if depth is None else depth
    if not (1 <= depth <= K):
        raise ValueError(f"depth must lie in [1, {K}], got {depth}")
    _, layer_plan = _plan(genome)
    n = params.w_b.shape[0]
    batch = b.shape[1]

    wb_b = params.w_b @ b
    xs = [np.zeros((n, batch))]
    fused, pre, lin = [], [], []
    for k in range(1, depth + 1):
        entries = layer_plan[k]
        live = [(i, idx) for i, idx in entries if i >= 1]
        if genome.fusion in (LWA, NA):
            if live:
                if genome.fusion == LWA:
                    c = params.conn_coef
                    x_f = c[live[0][1]] * xs[live[0][0]]
                    for i, idx in live[1:]:
                        x_f += c[idx] * xs[i]
                else:
                    x_f = xs[live[0][0]].copy()
                    for i, _ in live[1:]:
                        x_f += xs[i]
                    x_f /= len(entries)
                v = params.w_x @ x_f
                u = wb_b + params.alpha[k - 1] * v
            else:
                x_f, v = None, None
                u = wb_b
        else:  # mm
            x_f, v = None, []
            u = wb_b.copy() if live else wb_b
            for i, idx in live:
                term = params.w_hat[k - i] @ xs[i]
                v.append(term)
                u += params.alpha[idx] * term
        theta_k = params.theta[k - 1]
        x = apply_neuron(genome.neurons[k - 1], u, theta_k)
        if not np.all(np.isfinite(x)):
            raise ArithmeticError(f"non-finite activation at layer {k}")
        xs.append(x)
        fused.append(x_f)
        pre.append(u)
        lin.append(v)
    return ForwardTrace(layer_outputs=xs[1:], fused_inputs=fused,
                        pre_activations=pre, lin_terms=lin)


def mse_loss(x_hat: np.ndarray, x_star: np.ndarray) -> float:
    """Mean over batch columns of the squared l2 recovery error."""
    if x_hat.shape != x_star.shape:
        raise ValueError(f"shape mismatch {x_hat.shape} vs {x_star.shape}")
    diff = x_hat - x_star
    return float(np.sum(diff * diff)) / x_hat.shape[1]


def backward(genome: Genome, params: NetParams, b: np.ndarray, x_star: np.ndarray,
             depth: int | None = None, trace: ForwardTrace | None = None) -> dict:
    """Exact gradients of mse_loss(x^(depth), x_star) w.r.t. every parameter.

    Returns a dict keyed like NetParams.named_arrays().  Soft-threshold
    subgradients at the kink are 0; theta receives zero gradient at layers
    whose neuron ignores it.
    """
    b = np.asarray(b, dtype=np.float64)
    x_star = np.asarray(x_star, dtype=np.float64)
    depth = genome.k_layers if depth is None else depth
    if trace is None:
        trace = forward(genome, params, b, depth=depth)
    if len(trace.layer_outputs) < depth:
        raise ValueError("trace shallower than requested depth")
    _, layer_plan = _plan(genome)
    grads = zero_grads(params)
    batch = b.shape[1]

    xs = [np.zeros_like(trace.layer_outputs[0])] + trace.layer_outputs
    g_out = [None] * (depth + 1)
    g_out[depth] = (2.0 / batch) * (xs[depth] - x_star)

    for k in range(depth, 0, -1):
        gk = g_out[k]
        if gk is None:
            continue  # layer output never reaches the loss at this depth
        u = trace.pre_activations[k - 1]
        theta_k = params.theta[k - 1]
        neuron = genome.neurons[k - 1]
        gamma = gk * neuron_input_derivative(neuron, u, theta_k)
        dtheta = neuron_theta_derivative(neuron, u, theta_k)
        if dtheta.any():
            grads["theta"][k - 1] += float(np.vdot(dtheta, gk))
        grads["w_b"] += gamma @ b.T

        entries = layer_plan[k]
        live = [(i, idx) for i, idx in entries if i >= 1]
        if genome.fusion in (LWA, NA):
            x_f = trace.fused_inputs[k - 1]
            if x_f is None:
                continue
            v = trace.lin_terms[k - 1]
            grads["alpha"][k - 1] += float(np.vdot(gamma, v))
            a_k = params.alpha[k - 1]
            grads["w_x"] += a_k * (gamma @ x_f.T)
            d_fused = a_k * (params.w_x.T @ gamma)
            if genome.fusion == LWA:
                c = params.conn_coef
                for i, idx in live:
                    grads["conn_coef"][idx] += float(np.vdot(d_fused, xs[i]))
                    g_prev = c[idx] * d_fused
                    g_out[i] = g_prev if g_out[i] is None else g_out[i] + g_prev
            else:
                share = d_fused / len(entries)
                for i, _ in live:
                    g_out[i] = share.copy() if g_out[i] is None else g_out[i] + share
        else:  # mm
            terms = trace.lin_terms[k - 1]
            for (i, idx), term in zip(live, terms):
                d = k - i
                grads["alpha"][idx] += float(np.vdot(gamma, term))
                a = params.alpha[idx]
                grads[f"w_hat_{d}"] += a * (gamma @ xs[i].T)
                g_prev = a * (params.w_hat[d].T @ gamma)
                g_out[i] = g_prev if g_out[i] is None else g_out[i] + g_prev
    return grads


def write_params(path, genome: Genome, params: NetParams) -> None:
    header = {"kind": "netparams", "genome": genome_to_dict(genome)}
    fileio.write_container(path, PARAMS_MAGIC, header, params.named_arrays())


def read_params(path):
    header, arrays = fileio.read_container(path, PARAMS_MAGIC)
    if header.get("kind") != "netparams":
        raise fileio.FileFormatError(f"{path}: not a parameter container")
    genome = genome_from_dict(header["genome"])
    w_hat = None
    offsets = [int(name.split("_")[-1]) for name in arrays if name.startswith("w_hat_")]
    if offsets:
        w_hat = {d: arrays[f"w_hat_{d}"] for d in sorted(offsets)}
    params = NetParams(
        fusion=genome.fusion,
        w_b=arrays["w_b"],
        theta=arrays["theta"],
        alpha=arrays["alpha"],
        w_x=arrays.get("w_x"),
        conn_coef=arrays.get("conn_coef"),
        w_hat=w_hat,
    )
    _check_params(genome, params)
    return genome, params
