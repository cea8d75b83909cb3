"""Continuous normalizing flow: velocity field, trace of its Jacobian, likelihood."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Var
from .ode import OdeSolution, SolverConfig, integrate

CHECKPOINT_MAGIC = "CNFTPR1"
LOG_2PI = math.log(2.0 * math.pi)

PARAM_KINDS = ("W", "b", "gate_w", "gate_b", "hyper_w")


@dataclass(frozen=True)
class TraceMode:
    kind: str = "exact"  # "exact" or "hutchinson"
    num_samples: int = 1

    def __post_init__(self):
        if self.kind not in ("exact", "hutchinson"):
            raise ValueError(f"unknown trace mode {self.kind!r}")
        if self.num_samples < 1:
            raise ValueError("num_samples must be >= 1")


EXACT = TraceMode("exact")
HUTCHINSON = TraceMode("hutchinson")


@dataclass
class FlowModel:
    """Time-conditioned MLP of concatsquash layers.

    Layer l maps h -> (h W + b) * sigmoid(t gate_w + gate_b) + t hyper_w, with
    tanh between layers and none after the last one.
    """

    dim: int
    hidden: tuple
    params: dict = field(default_factory=dict)

    @property
    def layer_dims(self) -> list:
        sizes = [self.dim, *self.hidden, self.dim]
        return list(zip(sizes[:-1], sizes[1:]))

    @property
    def num_layers(self) -> int:
        return len(self.hidden) + 1

    @classmethod
    def init(cls, dim: int = 2, hidden=(64, 64, 64), seed: int = 0, zero_last: bool = False) -> "FlowModel":
        # uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for each linear map, as torch.nn.Linear
        rng = np.random.default_rng(seed)
        model = cls(dim=dim, hidden=tuple(int(h) for h in hidden))
        for l, (n_in, n_out) in enumerate(model.layer_dims):
            bound = 1.0 / math.sqrt(n_in)
            model.params[f"W{l}"] = rng.uniform(-bound, bound, (n_in, n_out))
            model.params[f"b{l}"] = rng.uniform(-bound, bound, n_out)
            model.params[f"gate_w{l}"] = rng.uniform(-1.0, 1.0, n_out)
            model.params[f"gate_b{l}"] = rng.uniform(-1.0, 1.0, n_out)
            model.params[f"hyper_w{l}"] = rng.uniform(-1.0, 1.0, n_out)
        if zero_last:
            last = model.num_layers - 1
            for kind in ("W", "b", "hyper_w"):
                model.params[f"{kind}{last}"][...] = 0.0
        return model

    def names(self) -> list:
        return [f"{kind}{l}" for l in range(self.num_layers) for kind in PARAM_KINDS]

    def num_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def copy(self) -> "FlowModel":
        return FlowModel(self.dim, self.hidden, {k: v.copy() for k, v in self.params.items()})

    def flat(self) -> np.ndarray:
        return np.concatenate([self.params[n].ravel() for n in self.names()])

    def with_flat(self, theta: np.ndarray) -> "FlowModel":
        out = self.copy()
        pos = 0
        for n in self.names():
            p = out.params[n]
            out.params[n] = np.asarray(theta[pos:pos + p.size], dtype=float).reshape(p.shape).copy()
            pos += p.size
        return out

    def bind(self, tape: Tape) -> dict:
        """Register every parameter as a trainable leaf of ``tape``."""
        return {n: tape.leaf(self.params[n]) for n in self.names()}

    # -- checkpoint ------------------------------------------------------

    def save(self, path) -> None:
        payload = {
            "magic": CHECKPOINT_MAGIC,
            "dim": self.dim,
            "hidden": list(self.hidden),
            "params": {
                n: {"shape": list(self.params[n].shape), "data": self.params[n].ravel().tolist()}
                for n in self.names()
            },
        }
        Path(path).write_text(json.dumps(payload))

    @classmethod
    def load(cls, path) -> "FlowModel":
        payload = json.loads(Path(path).read_text())
        if payload.get("magic") != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a {CHECKPOINT_MAGIC} checkpoint")
        model = cls(dim=int(payload["dim"]), hidden=tuple(payload["hidden"]))
        for n, entry in payload["params"].items():
            model.params[n] = np.array(entry["data"], dtype=float).reshape(entry["shape"])
        missing = set(model.names()) - set(model.params)
        if missing:
            raise ValueError(f"{path}: missing parameters {sorted(missing)}")
        return model


# ---------------------------------------------------------------------------
# fused concatsquash layer.  One node per layer keeps the tape small; its
# cotangent w.r.t. the layer input is itself a fused node (LAYER_VJP) so the
# trace path stays differentiable without recording a dozen primitives.


def _sig(x):
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def _gate(gw, gb, t):
    """sigmoid(t * gate_w + gate_b), recorded when the weights are Vars."""
    if isinstance(gw, Var):
        return ad.sigmoid(ad.add(ad.mul(gw, t), gb))
    return _sig(t * gw + gb)


def _layer_fwd(h, W, b, gw, gb, hw, t, act):
    s = _sig(t * gw + gb)
    xw = h @ W
    a = xw * s + (b * s + t * hw)
    return (np.tanh(a) if act else a), {"xw": xw, "s": s}


def _layer_bwd_np(g, xs, out, attrs, needs):
    h, W, b, gw, gb, hw = xs
    t, s = attrs["t"], attrs["s"]
    if attrs["act"]:
        abar = out * out
        np.subtract(1.0, abar, out=abar)
        abar *= g
    else:
        abar = g
    as_ = abar * s
    gh = as_ @ W.T if needs[0] else None
    if not any(needs[1:]):
        return gh, None, None, None, None, None
    gW = h.T @ as_ if needs[1] else None
    cbar = abar.sum(axis=0)
    sbar = np.einsum("ij,ij->j", abar, attrs["xw"]) + cbar * b
    pbar = sbar * s * (1.0 - s)
    return gh, gW, cbar * s, pbar * t, pbar, cbar * t


def _layer_bwd(g, xs, out, attrs, needs):
    if not isinstance(g, Var):
        return _layer_bwd_np(g, xs, out, attrs, needs)
    h, W, b, gw, gb, hw = xs
    t, act = attrs["t"], attrs["act"]
    gh = None
    if needs[0]:
        gh = out.tape.record(LAYER_VJP, (g, out, W, gw, gb), {"t": t, "act": act})
    if not any(needs[1:]):
        return gh, None, None, None, None, None
    s = _gate(gw, gb, t)
    xw = ad.matmul(h, W)
    abar = ad.mul(g, ad.sub(1.0, ad.mul(out, out))) if act else g
    gW = ad.matmul(ad.transpose(h), ad.mul_row(abar, s)) if needs[1] else None
    cbar = ad.sum_rows(abar)
    gb_ = ad.mul(cbar, s) if needs[2] else None
    ghw = ad.mul(cbar, t) if needs[5] else None
    ggw = ggb = None
    if needs[3] or needs[4]:
        sbar = ad.add(ad.sum_rows(ad.mul(abar, xw)), ad.mul(cbar, b))
        pbar = ad.mul(sbar, ad.mul(s, ad.sub(1.0, s)))
        ggw = ad.mul(pbar, t)
        ggb = pbar
    return gh, gW, gb_, ggw, ggb, ghw


def _layer_vjp_fwd(g, o, W, gw, gb, t, act):
    s = _sig(t * gw + gb)
    q = g * s
    if act:
        q = q * (1.0 - o * o)
    return q @ W.T, {"s": s}


def _layer_vjp_bwd_np(ubar, xs, out, attrs, needs):
    g, o, W, gw, gb = xs
    t, act, s = attrs["t"], attrs["act"], attrs["s"]
    qbar = ubar @ W
    gs = g * s
    if act:
        d = o * o
        np.subtract(1.0, d, out=d)
        gd = g * d
        q = gs * d
    else:
        d = None
        gd = g
        q = gs
    gg = go = None
    if needs[0]:
        gg = qbar * s
        if act:
            gg *= d
    if needs[1] and act:
        go = qbar * gs
        go *= o
        go *= -2.0
    gW = ubar.T @ q if needs[2] else None
    pbar = np.einsum("ij,ij->j", qbar, gd) * s * (1.0 - s)
    return gg, go, gW, pbar * t, pbar


def _layer_vjp_bwd(ubar, xs, out, attrs, needs):
    # out = ((g * d) * s) @ W^T with d = 1 - o^2 (tanh) or 1
    if not isinstance(ubar, Var):
        return _layer_vjp_bwd_np(ubar, xs, out, attrs, needs)
    g, o, W, gw, gb = xs
    t, act = attrs["t"], attrs["act"]
    s = _gate(gw, gb, t) if isinstance(ubar, Var) else attrs["s"]
    gs = ad.mul_row(g, s)
    d = ad.sub(1.0, ad.mul(o, o)) if act else None
    q = ad.mul(gs, d) if act else gs
    qbar = ad.matmul(ubar, W)
    gg = go = gW = ggw = ggb = None
    if needs[0]:
        gg = ad.mul_row(ad.mul(qbar, d) if act else qbar, s)
    if needs[1] and act:
        go = ad.mul(ad.mul(qbar, gs), ad.mul(o, -2.0))
    if needs[2]:
        gW = ad.matmul(ad.transpose(ubar), q)
    if needs[3] or needs[4]:
        sbar = ad.sum_rows(ad.mul(qbar, ad.mul(g, d) if act else g))
        pbar = ad.mul(sbar, ad.mul(s, ad.sub(1.0, s)))
        ggw = ad.mul(pbar, t)
        ggb = pbar
    return gg, go, gW, ggw, ggb


LAYER = ad.Op("concatsquash", _layer_fwd, _layer_bwd, stash=True)
LAYER_VJP = ad.Op("concatsquash_vjp", _layer_vjp_fwd, _layer_vjp_bwd, stash=True)


def concatsquash(h, W, b, gw, gb, hw, t: float, act: bool):
    """act((h W) * gate + b * gate + t hyper_w) with gate = sigmoid(t gate_w + gate_b)."""
    args = (h, W, b, gw, gb, hw)
    if any(isinstance(a, Var) for a in args):
        tape = next(a.tape for a in args if isinstance(a, Var))
        args = tuple(a if isinstance(a, Var) else tape.constant(a) for a in args)
        return tape.record(LAYER, args, {"t": float(t), "act": bool(act)})
    return _layer_fwd(*args, float(t), bool(act))[0]


def velocity(params: dict, y, t: float, num_layers: Optional[int] = None):
    """v(y, t) for a batch y of shape (batch, D); params are Vars or arrays."""
    if num_layers is None:
        num_layers = sum(1 for n in params if n.startswith("W"))
    h = y
    for l in range(num_layers):
        W = params[f"W{l}"]
        if ad.value(h).shape[1] != ad.value(W).shape[0]:
            raise ad.TapeError(f"velocity: input width {ad.value(h).shape[1]} != {ad.value(W).shape[0]}")
        h = concatsquash(
            h, W, params[f"b{l}"], params[f"gate_w{l}"], params[f"gate_b{l}"], params[f"hyper_w{l}"],
            t, act=l < num_layers - 1,
        )
    return h


def _basis(batch: int, dim: int, k: int) -> np.ndarray:
    e = np.zeros((batch, dim))
    e[:, k] = 1.0
    return e


def exact_trace(v: Var, y: Var, create_graph: bool = True):
    """Tr(dv/dy) per batch row, from one vector-Jacobian product per dimension."""
    batch, dim = y.shape
    diag = []
    for k in range(dim):
        (u,) = ad.vjp(v, _basis(batch, dim, k), [y], create_graph=create_graph)
        diag.append(ad.take_cols(u, k, k + 1))
    if create_graph:
        return diag[0] if dim == 1 else ad.lincomb([1.0] * dim, diag)
    return np.sum(np.concatenate(diag, axis=1), axis=1, keepdims=True)


def hutchinson_trace(v: Var, y: Var, eps: np.ndarray, create_graph: bool = True):
    """eps^T (dv/dy) eps per batch row (unbiased for Rademacher eps)."""
    if eps.shape != y.shape:
        raise ad.TapeError(f"hutchinson: noise shape {eps.shape} != state shape {y.shape}")
    (u,) = ad.vjp(v, eps, [y], create_graph=create_graph)
    ones = np.ones((y.shape[1], 1))
    if create_graph:
        return ad.matmul(ad.mul(u, y.tape.constant(eps)), ones)
    return np.sum(u * eps, axis=1, keepdims=True)


def rademacher(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.integers(0, 2, size=shape).astype(float) * 2.0 - 1.0


def make_dynamics(params: dict, dim: int, trace_mode: TraceMode = EXACT, eps: Optional[np.ndarray] = None):
    """Augmented dynamics d/dt [y, delta_logp] = [v, -Tr(dv/dy)].

    Works on Var states (recorded, differentiable w.r.t. the bound params) and
    on ndarray states (a scratch tape per call; params may be plain arrays).
    """
    num_layers = sum(1 for n in params if n.startswith("W"))
    if trace_mode.kind == "hutchinson" and eps is None:
        raise ValueError("hutchinson trace needs a fixed noise tensor")

    def trace(v, y, create_graph):
        if trace_mode.kind == "exact":
            return exact_trace(v, y, create_graph)
        return hutchinson_trace(v, y, eps, create_graph)

    def dynamics(state, t):
        if isinstance(state, Var):
            y = ad.take_cols(state, 0, dim)
            v = velocity(params, y, t, num_layers)
            tr = trace(v, y, True)
            return ad.concat_cols([v, ad.neg(tr)])
        tape = Tape()
        y = tape.leaf(state[:, :dim])
        v = velocity(params, y, t, num_layers)
        tr = trace(v, y, False)
        return np.concatenate([v.value, -tr], axis=1)

    return dynamics


def velocity_dynamics(params: dict, sign: float = 1.0, t_reflect: Optional[float] = None):
    """Plain-array dynamics of y alone; with ``t_reflect`` runs time backwards."""
    num_layers = sum(1 for n in params if n.startswith("W"))

    def dynamics(y, t):
        tt = t if t_reflect is None else t_reflect - t
        v = velocity(params, y, tt, num_layers)
        return v if sign == 1.0 else sign * v

    return dynamics


def gaussian_logpdf(z):
    """log N(z; 0, I) per row, shape (batch, 1)."""
    dim = ad.value(z).shape[1]
    sq = ad.matmul(ad.square(z), np.ones((dim, 1)))
    return ad.add(ad.mul(sq, -0.5), -0.5 * dim * LOG_2PI)


def log_likelihood(
    model: FlowModel,
    x: np.ndarray,
    config: SolverConfig,
    trace_mode: TraceMode = EXACT,
    tape: Optional[Tape] = None,
    params: Optional[dict] = None,
    eps: Optional[np.ndarray] = None,
) -> tuple:
    """log q(x) by integrating data x at t0 forward to the base sample at t1.

    With a ``tape`` (and ``params`` bound on it) the result is a differentiable
    (batch, 1) Var; without one it is a plain array.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[1] != model.dim:
        raise ValueError(f"expected data of shape (batch, {model.dim}), got {x.shape}")
    dim = model.dim
    state0 = np.concatenate([x, np.zeros((x.shape[0], 1))], axis=1)
    if tape is not None:
        if params is None:
            params = model.bind(tape)
        state0 = tape.constant(state0)
    else:
        params = model.params
    dyn = make_dynamics(params, dim, trace_mode, eps)
    solution = integrate(dyn, state0, config)
    final = solution.final
    z = ad.take_cols(final, 0, dim)
    delta = ad.take_cols(final, dim, dim + 1)
    logq = ad.sub(gaussian_logpdf(z), delta)
    return logq, solution


def sample(model: FlowModel, num: int, seed: int, config: SolverConfig, noise: Optional[np.ndarray] = None) -> np.ndarray:
    """Draw from the model by running the flow backwards from Gaussian noise."""
    if noise is None:
        noise = np.random.default_rng(seed).standard_normal((num, model.dim))
    dyn = velocity_dynamics(model.params, sign=-1.0, t_reflect=config.t0 + config.t1)
    return integrate(dyn, noise, config.replace(mandatory_times=())).final


def push_forward(model: FlowModel, x: np.ndarray, config: SolverConfig) -> OdeSolution:
    """Integrate y alone (no log-density) from t0 to t1."""
    return integrate(velocity_dynamics(model.params), np.asarray(x, dtype=float), config)
