"""Unrolled learned solvers: Var-GNN, ISS-GNN and Prox-GNN.

All three share the GCN backbone from ``nn`` and differ only in how the
regularizer step and the data-fit step are interleaved:

* Var-GNN: hyperbolic update z+ = 2z - z- - reg_step * GCN(z) followed by
  warm-started CGLS steps on ||F(zE) - d||.
* ISS-GNN: gradient half-steps z + mu E^T J^T (d - F(zE)) followed by the
  score step z - reg_step * GCN(z).
* Prox-GNN: x - mu J^T (F(x) - d) followed by a learned residual map.

Inner products inside CGLS are taken per member graph of a batch, so a
batch behaves exactly like its members solved one at a time.

The data-fit scale ``mu`` also scales the initial back-projection; with
``mu = 0`` (and ``cgls_iter = 0`` for Var-GNN) no solver looks at d_obs.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .forward import Problem, adjoint_t, forward_t
from .nn import GcnParams, MlpParams, gcn_forward, make_gcn, make_mlp, mlp_forward, time_embedding, uniform_init
from .numerics import NonFiniteError, Rng

SOLVERS = ("var", "iss", "prox")


@dataclass
class UnrolledConfig:
    solver: str = "var"
    solve_iter: int = 16
    cgls_iter: int = 1
    channels: int = 64
    layers: int = 8
    mu: float = 1.0
    share_params: bool = False
    use_meta: bool = True
    time_dims: int = 8
    reg_step: float = 1.0
    readout_hidden: int = 64
    readout_layers: int = 2
    residual: bool = True
    # Zero last GCN layer: the untrained solver is its plain data-fit iteration.
    zero_init: bool = True

    def __post_init__(self):
        if self.solver not in SOLVERS:
            raise ValueError(f"solver must be one of {SOLVERS}")
        if self.solve_iter < 1 or self.cgls_iter < 0 or self.channels < 1 or self.layers < 1:
            raise ValueError("solve_iter, channels, layers >= 1 and cgls_iter >= 0 required")
        if self.time_dims % 2:
            raise ValueError("time_dims must be even")


@dataclass
class SolverNet:
    cfg: UnrolledConfig
    state_width: int
    meta_width: int
    target: str
    embed: Optional[Tensor]
    gcns: list
    readout: Optional[MlpParams] = None
    # Hand-set score/regularizer overriding the GCN (used for reductions).
    score: Optional[Callable] = None

    def named_parameters(self) -> dict:
        out = {}
        if self.embed is not None:
            out["embed"] = self.embed
        for k, gcn in enumerate(self.gcns):
            out.update(gcn.named(f"gcn{k}"))
        if self.readout is not None:
            out.update(self.readout.named("readout"))
        return out

    def parameters(self) -> list:
        return list(self.named_parameters().values())

    def num_parameters(self) -> int:
        return int(sum(p.value.size for p in self.parameters()))

    def bind(self, tensors) -> "SolverNet":
        """Copy of the net using ``tensors`` (in ``parameters()`` order)."""
        it = iter(tensors)
        embed = next(it) if self.embed is not None else None
        gcns = []
        for gcn in self.gcns:
            ws, bs = [], []
            for _ in range(gcn.layers):
                ws.append(next(it))
                bs.append(next(it))
            gcns.append(GcnParams(ws, bs, gcn.residual))
        readout = None
        if self.readout is not None:
            ws, bs = [], []
            for _ in self.readout.weights:
                ws.append(next(it))
                bs.append(next(it))
            readout = MlpParams(ws, bs)
        return SolverNet(self.cfg, self.state_width, self.meta_width, self.target, embed, gcns, readout, self.score)

    def gcn_at(self, k: int) -> GcnParams:
        return self.gcns[0] if self.cfg.share_params else self.gcns[k]

    def load_arrays(self, arrays: dict) -> None:
        named = self.named_parameters()
        missing = set(named) - set(arrays)
        if missing:
            raise KeyError(f"checkpoint lacks {sorted(missing)}")
        for name, t in named.items():
            if arrays[name].shape != t.value.shape:
                raise ValueError(f"shape mismatch for {name}")
            t.value[...] = arrays[name]

    def manifest(self) -> dict:
        return {"config": asdict(self.cfg), "state_width": self.state_width,
                "meta_width": self.meta_width, "target": self.target,
                "num_parameters": self.num_parameters()}


def input_width(problem: Problem) -> int:
    """Width of the node quantity the solver embeds."""
    if problem.target == "edge":
        v = problem.spec.variant
        return v.x0.shape[1] * (1 + v.history_len)
    return problem.state_shape[1]


def make_solver_net(cfg: UnrolledConfig, state_width: int, meta_width: int, rng: Rng,
                    target: str = "node", zero_gcn: bool = False) -> SolverNet:
    h = cfg.channels
    meta = meta_width if cfg.use_meta else 0
    latent = cfg.solver != "prox" or target == "edge"
    embed = Tensor(uniform_init(rng, h, (h, state_width)), requires_grad=True) if latent else None
    if cfg.solver == "prox":
        width = h if target == "edge" else state_width
        gin, gout = width + meta, width
    else:
        gin, gout = h + meta + cfg.time_dims, h
    count = 1 if cfg.share_params else cfg.solve_iter
    gcns = [make_gcn(gin, h, gout, cfg.layers, rng, residual=cfg.residual,
                     zero_last=zero_gcn or cfg.zero_init)
            for _ in range(count)]
    readout = None
    if target == "edge":
        # the readout sees the final latent and the meta-data of both endpoints
        widths = [2 * (h + meta)] + [cfg.readout_hidden] * (cfg.readout_layers - 1) + [1]
        readout = make_mlp(widths, rng)
    return SolverNet(cfg, state_width, meta_width, target, embed, gcns, readout)


def net_for_problem(cfg: UnrolledConfig, problem: Problem, rng: Rng, **kw) -> SolverNet:
    return make_solver_net(cfg, input_width(problem), problem.graph.meta_width, rng, problem.target, **kw)


# --- shared pieces -------------------------------------------------------------

class _Ctx:
    """Per-problem constants reused across unrolled iterations."""

    def __init__(self, problem: Problem, net: SolverNet):
        self.p = problem
        self.g = problem.graph
        self.net = net
        self.G = problem.num_graphs
        self.node_seg = problem.node_graph
        self.data_seg = problem.data_graph
        self.meta = None
        if net.cfg.use_meta and net.meta_width:
            if self.g.node_meta is None or self.g.meta_width != net.meta_width:
                raise ValueError("problem meta-data does not match the network")
            self.meta = Tensor(self.g.node_meta)
        self.d = Tensor(problem.d_obs)

    def F(self, x):
        return forward_t(self.g, self.p.spec, x)

    def Ft(self, r):
        return adjoint_t(self.g, self.p.spec, r)

    def E(self, z):
        return z if self.net.embed is None else z @ self.net.embed

    def Et(self, x):
        return x if self.net.embed is None else ad.matmul(x, _transpose(self.net.embed))

    def seg_dot(self, a, b, seg) -> Tensor:
        return ad.segment_sum(ad.sum(ad.mul(a, b), axis=1, keepdims=True), seg, self.G)

    def features(self, z, k: Optional[int]) -> Tensor:
        parts = [z]
        if self.meta is not None:
            parts.append(self.meta)
        if k is not None and self.net.cfg.time_dims:
            emb = np.broadcast_to(time_embedding(float(k), self.net.cfg.time_dims), (self.g.n, self.net.cfg.time_dims))
            parts.append(Tensor(emb.copy()))
        return parts[0] if len(parts) == 1 else ad.concat_cols(parts)

    def regularizer(self, z, k: int, timed: bool = True) -> Tensor:
        if self.net.score is not None:
            return self.net.score(z, k)
        return gcn_forward(self.g, self.features(z, k if timed else None), self.net.gcn_at(k))


def _transpose(t: Tensor) -> Tensor:
    return ad.linear_map(lambda v: v.T.copy(), lambda g: g.T.copy(), t)


def _check(z: Tensor, k: int, name: str):
    if not np.all(np.isfinite(z.value)):
        raise NonFiniteError(f"{name}: non-finite state at iteration {k}")


def _edge_start(ctx: _Ctx) -> Tensor:
    """Node features [x0 | mu * history] for edge-valued problems, lifted to the latent."""
    v = ctx.p.spec.variant
    n, H = ctx.g.n, v.history_len
    d = ctx.p.d_obs
    hist = np.concatenate([d[h * n:(h + 1) * n] for h in range(H)], axis=1)
    feats = np.concatenate([v.x0, ctx.net.cfg.mu * hist], axis=1)
    return ctx.Et(Tensor(feats))


def _finish(ctx: _Ctx, z: Tensor) -> Tensor:
    if ctx.p.target == "edge":
        feats = z if ctx.meta is None else ad.concat_cols([z, ctx.meta])
        return edge_readout(feats, ctx.g, ctx.net.readout)
    return ctx.E(z)


def cgls_latent(ctx: _Ctx, z: Tensor, iters: int, mu: float) -> Tensor:
    """Warm-started CGLS on min ||F(zE) - d|| over the latent z, per graph.

    Each update is scaled by ``mu`` (``mu = 1`` is plain CGLS).
    """
    if iters <= 0 or mu == 0.0:
        return z
    r = ctx.d - ctx.F(ctx.E(z))
    s = ctx.Et(ctx.Ft(r))
    p = s
    gamma = ctx.seg_dot(s, s, ctx.node_seg)
    for _ in range(iters):
        q = ctx.F(ctx.E(p))
        delta = ctx.seg_dot(q, q, ctx.data_seg)
        a = ad.scale(ad.safe_div(gamma, delta), mu)
        z = z + ad.gather_rows(a, ctx.node_seg) * p
        r = r - ad.gather_rows(a, ctx.data_seg) * q
        s = ctx.Et(ctx.Ft(r))
        gamma_new = ctx.seg_dot(s, s, ctx.node_seg)
        beta = ad.safe_div(gamma_new, gamma)
        p = s + ad.gather_rows(beta, ctx.node_seg) * p
        gamma = gamma_new
    return z


# --- the three solvers -----------------------------------------------------------

def var_gnn_solve(problem: Problem, net: SolverNet, cfg: Optional[UnrolledConfig] = None, return_latent=False):
    cfg = cfg or net.cfg
    ctx = _Ctx(problem, net)
    if problem.target == "edge":
        z = _edge_start(ctx)
        data_steps = 0
    else:
        z = ctx.Et(ad.scale(ctx.Ft(ctx.d), cfg.mu))
        data_steps = cfg.cgls_iter
    z_prev = z
    for k in range(cfg.solve_iter):
        step = ctx.regularizer(z, k)
        z_next = ad.scale(z, 2.0) - z_prev - ad.scale(step, cfg.reg_step)
        z_prev = z
        z = cgls_latent(ctx, z_next, data_steps, cfg.mu)
        _check(z, k, "var-gnn")
    out = _finish(ctx, z)
    return (out, z) if return_latent else out


def iss_gnn_solve(problem: Problem, net: SolverNet, cfg: Optional[UnrolledConfig] = None,
                  return_latent=False, return_trace=False):
    cfg = cfg or net.cfg
    ctx = _Ctx(problem, net)
    if problem.target == "edge":
        z = _edge_start(ctx)
        data_steps = 0
    else:
        z = Tensor(np.zeros((problem.graph.n, cfg.channels if net.embed is not None else problem.state_shape[1])))
        data_steps = cfg.cgls_iter
    trace = []
    for k in range(cfg.solve_iter):
        for _ in range(data_steps):
            if cfg.mu == 0.0:
                break
            z = z + ad.scale(ctx.Et(ctx.Ft(ctx.d - ctx.F(ctx.E(z)))), cfg.mu)
        z = z - ad.scale(ctx.regularizer(z, k), cfg.reg_step)
        _check(z, k, "iss-gnn")
        if return_trace:
            trace.append(ctx.E(z).value.copy())
    out = _finish(ctx, z)
    if return_trace:
        return out, trace
    return (out, z) if return_latent else out


def prox_gnn_solve(problem: Problem, net: SolverNet, cfg: Optional[UnrolledConfig] = None, return_latent=False):
    cfg = cfg or net.cfg
    ctx = _Ctx(problem, net)
    edge = problem.target == "edge"
    x = _edge_start(ctx) if edge else ad.scale(ctx.Ft(ctx.d), cfg.mu)
    for k in range(cfg.solve_iter):
        u = x
        if not edge and cfg.mu != 0.0:
            u = x - ad.scale(ctx.Ft(ctx.F(x) - ctx.d), cfg.mu)
        x = u + ctx.regularizer(u, k, timed=False)
        _check(x, k, "prox-gnn")
    out = _finish(ctx, x) if edge else x
    return (out, x) if return_latent else out


def edge_readout(node_feats, g, mlp: MlpParams) -> Tensor:
    """Orientation-invariant edge predictions (MLP[h_i|h_j] + MLP[h_j|h_i]) / 2."""
    E = g.edges
    hi = ad.gather_rows(node_feats, E[:, 0])
    hj = ad.gather_rows(node_feats, E[:, 1])
    a = mlp_forward(ad.concat_cols([hi, hj]), mlp)
    b = mlp_forward(ad.concat_cols([hj, hi]), mlp)
    return ad.scale(a + b, 0.5)


SOLVE = {"var": var_gnn_solve, "iss": iss_gnn_solve, "prox": prox_gnn_solve}


def solve(problem: Problem, net: SolverNet) -> Tensor:
    return SOLVE[net.cfg.solver](problem, net)
