"""Per-layer STK adapter: ST-MoE, EA-MoE, CMA-MoE and adaptive fusion.

Shapes used throughout (``B`` batch, ``L`` tokens, ``n`` experts)::

    h_text   [B, L, d_t]    text hidden states after self-attention
    h_g      [B, 1, 2*d_g]  graph pathway state, one row per query
    tau      [B, L]         position of each token's time token
    valid    [B, L]         False on padding (excluded from routing statistics)

Unbatched inputs (``[L, d_t]`` / ``[1, 2*d_g]``) are accepted and returned
unbatched. Experts are evaluated densely and combined with weights that are
zero outside the active set, which equals the sparse sum exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Parameter, Tensor

MODULES = ("st", "ea", "cma")


class ConfigError(ValueError):
    pass


@dataclass
class RoutingDecision:
    """Routing outcome for a batch of rows."""

    gate_full: np.ndarray    # [rows, n]
    active: np.ndarray       # [rows, k], ordered by gate descending
    gate_active: np.ndarray  # [rows, k], renormalized over the active set

    def row(self, i: int) -> tuple[tuple[float, ...], tuple[int, ...], tuple[float, ...]]:
        return (tuple(self.gate_full[i].tolist()), tuple(self.active[i].tolist()),
                tuple(self.gate_active[i].tolist()))

    @property
    def assignment_counts(self) -> np.ndarray:
        n = self.gate_full.shape[1]
        return np.bincount(self.active[:, 0], minlength=n)

    @property
    def mean_weights(self) -> np.ndarray:
        return self.gate_full.mean(axis=0)


@dataclass
class RouteStats:
    """Load-balance statistics for one router over the routed (non-padding) rows."""

    fraction: np.ndarray   # f_j: share of rows whose top choice is expert j
    mean_gate: Tensor      # p_j: mean full gate of expert j (differentiable)
    counts: np.ndarray     # rows whose top choice is expert j
    rows: int

    def balance(self) -> Tensor:
        return ag.sum_(ag.mul(self.mean_gate, self.fraction))


@dataclass
class Routed:
    decision: RoutingDecision
    gate: Tensor      # [rows, n] full softmax gate
    combine: Tensor   # [rows, n] renormalized weights, zero off the active set


def route(router_weight: Tensor, x: Tensor, k: int) -> Routed:
    """Softmax router with Top-k selection; ties go to the lower expert index."""
    n = router_weight.shape[-1]
    if not 1 <= k <= n:
        raise ConfigError(f"top-k {k} must lie in 1..{n}")
    gate = ag.softmax(ag.linear(x, router_weight), axis=-1)
    g = gate.data
    active = np.argsort(-g, axis=-1, kind="stable")[:, :k]
    mask = np.zeros_like(g)
    np.put_along_axis(mask, active, 1.0, axis=-1)
    masked = ag.mul(gate, mask)
    combine = ag.div(masked, ag.sum_(masked, axis=-1, keepdims=True))
    gate_active = np.take_along_axis(combine.data, active, axis=-1)
    return Routed(RoutingDecision(g.copy(), active, gate_active), gate, combine)


def _stats(routed: Routed, weight: np.ndarray | None = None) -> RouteStats:
    """Statistics over rows; ``weight`` gives each routed row a multiplicity (0 drops it)."""
    n = routed.gate.shape[-1]
    rows = routed.gate.shape[0]
    w = np.ones(rows) if weight is None else np.asarray(weight, dtype=np.float64)
    total = float(w.sum())
    counts = np.bincount(routed.decision.active[:, 0], weights=w, minlength=n)
    if total == 0:
        return RouteStats(np.zeros(n), Tensor(np.zeros(n)), counts, 0)
    mean_gate = ag.mul(ag.sum_(ag.mul(routed.gate, w[:, None]), axis=0), 1.0 / total)
    return RouteStats(counts / total, mean_gate, counts, int(round(total)))


# parameters ---------------------------------------------------------------------

@dataclass
class AdapterConfig:
    d_t: int
    d_g: int
    n_experts: int = 4
    top_k: int = 1
    d_k: int = 8
    init_scale: float = 0.02

    def __post_init__(self):
        if not 1 <= self.top_k <= self.n_experts:
            raise ConfigError(f"need n_experts >= top_k >= 1, got n={self.n_experts}, k={self.top_k}")
        if self.d_k < 1:
            raise ConfigError("d_k must be positive")


@dataclass
class AdapterFlags:
    """Ablation switches; a disabled module contributes nothing."""

    st: bool = True
    ea: bool = True
    cma: bool = True


class AdapterLayer:
    """Parameters of one layer's adapter. Expert weights are stacked on axis 0."""

    def __init__(self, cfg: AdapterConfig, rng: np.random.Generator, prefix: str = ""):
        self.cfg = cfg
        n, dk, dt, dg2 = cfg.n_experts, cfg.d_k, cfg.d_t, 2 * cfg.d_g
        a = cfg.init_scale

        def uni(*shape):
            return rng.uniform(-a, a, shape)

        def P(name, value):
            return Parameter(value, f"{prefix}{name}")

        self.st_router = P("st.router", uni(dg2, n))
        self.st_down = P("st.down", uni(n, dg2, dk))
        self.st_down_bias = P("st.down_bias", np.zeros((n, 1, dk)))
        self.st_up = P("st.up", np.zeros((n, dk, dg2)))

        self.ea_router = P("ea.router", uni(dt, n))
        self.ea_down = P("ea.down", uni(n, dt, dk))
        self.ea_down_bias = P("ea.down_bias", np.zeros((n, 1, dk)))
        self.ea_up = P("ea.up", np.zeros((n, dk, dt)))

        self.cma_router = P("cma.router", uni(dg2, n))
        self.cma_q = P("cma.w_q", uni(n, dt, dk))
        self.cma_k = P("cma.w_k", uni(n, dg2, dk))
        self.cma_v = P("cma.w_v", uni(n, dg2, dk))
        self.cma_o = P("cma.w_o", np.zeros((n, dk, dt)))

        self.gate_weight = P("fusion.weight", uni(2 * dt, dt))
        self.gate_bias = P("fusion.bias", np.zeros(dt))

    def parameters(self) -> list[Parameter]:
        return [v for v in vars(self).values() if isinstance(v, Parameter)]


# building blocks -----------------------------------------------------------------

def expert_forward(down: Tensor, down_bias: Tensor | None, up: Tensor, x: Tensor) -> Tensor:
    """Bottleneck expert ``up(relu(down(x)))``; stacked weights give one output per expert.

    With ``down`` of shape ``[d, d_k]`` the result has ``x``'s shape; with a
    stacked ``[n, d, d_k]`` it gains a leading expert axis.
    """
    if x.shape[-1] != down.shape[-2]:
        raise ag.DimensionError(f"expert input dim {x.shape[-1]} does not match down-projection {down.shape}")
    h = ag.matmul(x, down)
    if down_bias is not None:
        h = h + down_bias
    return ag.matmul(ag.relu(h), up)


def _mix(expert_out: Tensor, combine: Tensor) -> Tensor:
    # expert_out [n, rows, d], combine [rows, n] -> [rows, d]
    w = ag.reshape(ag.swapaxes(combine, 0, 1), combine.shape[::-1] + (1,))
    return ag.sum_(ag.mul(expert_out, w), axis=0)


def _as_batched(h_text: Tensor, h_g: Tensor | None = None):
    single = h_text.ndim == 2
    if single:
        h_text = ag.reshape(h_text, (1,) + h_text.shape)
        if h_g is not None:
            h_g = ag.reshape(h_g, (1,) + h_g.shape)
    return single, h_text, h_g


@dataclass
class StepRecord:
    """Routing information produced by one adapter layer forward."""

    stats: dict[str, RouteStats] = field(default_factory=dict)
    decisions: dict[str, RoutingDecision] = field(default_factory=dict)


def st_moe_forward(layer: AdapterLayer, h_g: Tensor, record: StepRecord | None = None,
                   weight: np.ndarray | None = None) -> Tensor:
    """Top-k weighted sum of bottleneck experts on the graph state ``[rows, 2*d_g]``."""
    shape = h_g.shape
    x = ag.reshape(h_g, (-1, shape[-1]))
    routed = route(layer.st_router, x, layer.cfg.top_k)
    out = _mix(expert_forward(layer.st_down, layer.st_down_bias, layer.st_up, x), routed.combine)
    if record is not None:
        record.stats["st"] = _stats(routed, weight)
        record.decisions["st"] = routed.decision
    return ag.reshape(out, shape)


def ea_moe_forward(layer: AdapterLayer, h_text: Tensor, tau, record: StepRecord | None = None,
                   valid: np.ndarray | None = None) -> Tensor:
    """Event-aware MoE: every token routes on the hidden state of its event's time token."""
    single, h, _ = _as_batched(h_text)
    tau = np.asarray(tau, dtype=np.int64)
    if single:
        tau = tau[None, :]
    B, L, d = h.shape
    if tau.shape != (B, L):
        raise ag.DimensionError(f"time map shape {tau.shape} does not match text shape {(B, L)}")
    if tau.min() < 0 or tau.max() >= L:
        raise IndexError("time map points outside the sequence")
    flat = ag.reshape(h, (B * L, d))
    keys = (np.arange(B)[:, None] * L + tau).reshape(-1)
    unique_keys, inverse = np.unique(keys, return_inverse=True)
    routed_u = route(layer.ea_router, ag.take_rows(flat, unique_keys), layer.cfg.top_k)
    combine = ag.take_rows(routed_u.combine, inverse)
    gate = ag.take_rows(routed_u.gate, inverse)
    dec_u = routed_u.decision
    decision = RoutingDecision(dec_u.gate_full[inverse], dec_u.active[inverse], dec_u.gate_active[inverse])
    out = _mix(expert_forward(layer.ea_down, layer.ea_down_bias, layer.ea_up, flat), combine)
    if record is not None:
        w = None if valid is None else np.asarray(valid, dtype=np.float64).reshape(-1)
        record.stats["ea"] = _stats(Routed(decision, gate, combine), w)
        record.decisions["ea"] = decision
    out = ag.reshape(out, (B, L, d))
    return ag.reshape(out, (L, d)) if single else out


def cma_moe_forward(layer: AdapterLayer, h_text: Tensor, h_g: Tensor, record: StepRecord | None = None,
                    weight: np.ndarray | None = None) -> Tensor:
    """Graph-guided cross-attention experts: text queries, graph state as key/value."""
    single, h, g = _as_batched(h_text, h_g)
    B, L, dt = h.shape
    routed = route(layer.cma_router, ag.reshape(g, (B, g.shape[-1])), layer.cfg.top_k)
    n = layer.cfg.n_experts
    hq = ag.reshape(h, (1, B, L, dt))
    hg = ag.reshape(g, (1, B, g.shape[-2], g.shape[-1]))
    q = ag.matmul(hq, ag.reshape(layer.cma_q, (n, 1) + layer.cma_q.shape[1:]))
    k = ag.matmul(hg, ag.reshape(layer.cma_k, (n, 1) + layer.cma_k.shape[1:]))
    v = ag.matmul(hg, ag.reshape(layer.cma_v, (n, 1) + layer.cma_v.shape[1:]))
    attn = ag.scaled_dot_attention(q, k, v)                                   # [n, B, L, d_k]
    per_expert = ag.matmul(attn, ag.reshape(layer.cma_o, (n, 1) + layer.cma_o.shape[1:]))  # [n, B, L, d_t]
    w = ag.reshape(ag.swapaxes(routed.combine, 0, 1), (n, B, 1, 1))
    out = ag.sum_(ag.mul(per_expert, w), axis=0)
    if record is not None:
        record.stats["cma"] = _stats(routed, weight)
        record.decisions["cma"] = routed.decision
    return ag.reshape(out, (L, dt)) if single else out


def adaptive_fusion(layer: AdapterLayer, h_cma: Tensor, h_text_moe: Tensor) -> Tensor:
    """Element-wise sigmoid gate: ``g * h_cma + (1 - g) * h_text_moe``."""
    if h_cma.shape != h_text_moe.shape:
        raise ag.DimensionError(f"fusion inputs differ: {h_cma.shape} vs {h_text_moe.shape}")
    g = ag.sigmoid(ag.linear(ag.concat([h_cma, h_text_moe], axis=-1), layer.gate_weight, layer.gate_bias))
    return h_text_moe + g * (h_cma - h_text_moe)


def adapter_layer_forward(
    layer: AdapterLayer,
    h_text_attn: Tensor,
    h_ffn: Tensor,
    h_g_prev: Tensor,
    h_g0: Tensor,
    tau,
    flags: AdapterFlags | None = None,
    record: StepRecord | None = None,
    valid: np.ndarray | None = None,
) -> tuple[Tensor, Tensor]:
    """One adapter step. Returns ``(h_text_next, h_g_next)``.

    ``h_text_next = h_text_attn + fusion(cma, ea) + h_ffn`` and
    ``h_g_next = st_moe(h_g_prev) + h_g0``.
    """
    flags = flags or AdapterFlags()
    example_weight = None
    if valid is not None:
        valid = np.asarray(valid, dtype=bool)
        example_weight = valid.reshape(-1, valid.shape[-1]).any(axis=-1).astype(np.float64)

    h_ea = ea_moe_forward(layer, h_text_attn, tau, record, valid) if flags.ea else None
    h_cma = cma_moe_forward(layer, h_text_attn, h_g_prev, record, example_weight) if flags.cma else None
    if h_ea is not None and h_cma is not None:
        enhanced = adaptive_fusion(layer, h_cma, h_ea)
    else:
        enhanced = h_ea if h_ea is not None else h_cma
    h_next = h_text_attn + h_ffn if enhanced is None else h_text_attn + enhanced + h_ffn

    if flags.st:
        h_g_next = st_moe_forward(layer, h_g_prev, record, example_weight) + h_g0
    else:
        h_g_next = h_g0 if isinstance(h_g0, Tensor) else ag.as_tensor(h_g0)
    return h_next, h_g_next
