"""Conditional densities q(theta* | batch of simulated outcomes).

A permutation-invariant set encoder summarises the batch
``{(x_i, theta_i, y_i)}`` into a context vector; a conditional Gaussian or
a conditional normalizing flow then gives the density of ``theta*``.
Everything is float64 torch so gradients reach the designs through ``y_i``.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Literal, Optional, Sequence

import torch
from torch import nn
from torch.nn import functional as F

from .core import DTYPE, LOG_2PI, as_tensor

CHECKPOINT_FORMAT = "bacon-qmodel"
CHECKPOINT_VERSION = 1
_SOFTPLUS_ONE = math.log(math.e - 1.0)
MIN_DIAG = 1e-3


@dataclass(frozen=True)
class QModelConfig:
    """Architecture of the conditional model.

    ``kind`` picks the density family; ``transform`` the coupling type of
    the flow.  Splines use ``n_bins`` bins on ``[-bound, bound]`` with
    identity tails.
    """

    kind: Literal["flow", "gaussian"] = "flow"
    n_layers: int = 2
    hidden: int = 32
    depth: int = 2
    transform: Literal["affine", "spline"] = "affine"
    n_bins: int = 8
    bound: float = 5.0
    ctx_dim: int = 8
    enc_hidden: int = 32
    enc_depth: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("flow", "gaussian"):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.transform not in ("affine", "spline"):
            raise ValueError(f"unknown transform {self.transform!r}")
        if self.n_layers < 0 or self.depth < 1 or self.enc_depth < 1:
            raise ValueError("layer counts must be positive")


class MLP(nn.Module):
    """Fully connected network with tanh hidden activations."""

    def __init__(self, n_in: int, n_out: int, hidden: int, depth: int):
        super().__init__()
        sizes = [n_in] + [hidden] * depth + [n_out]
        self.layers = nn.ModuleList(nn.Linear(a, b, dtype=DTYPE) for a, b in zip(sizes[:-1], sizes[1:]))

    def forward(self, h):
        for layer in self.layers[:-1]:
            h = torch.tanh(layer(h))
        return self.layers[-1](h)

    @property
    def last(self) -> nn.Linear:
        return self.layers[-1]


def _init_uniform(module: nn.Module, gen: torch.Generator):
    for m in module.modules():
        if isinstance(m, nn.Linear):
            bound = 1.0 / math.sqrt(m.in_features)
            with torch.no_grad():
                m.weight.copy_(torch.rand(m.weight.shape, generator=gen, dtype=DTYPE) * 2 * bound - bound)
                m.bias.copy_(torch.rand(m.bias.shape, generator=gen, dtype=DTYPE) * 2 * bound - bound)


def _zero_(layer: nn.Linear, bias: float = 0.0):
    with torch.no_grad():
        layer.weight.zero_()
        layer.bias.fill_(bias)


# ---------------------------------------------------------------------------
# set encoder


def canonical_order(elements: torch.Tensor) -> torch.Tensor:
    """Sort the set axis (-2) lexicographically by value, first column most significant."""
    idx = torch.arange(elements.shape[-2]).expand(elements.shape[:-1])
    key = elements.detach()
    for j in reversed(range(elements.shape[-1])):
        col = torch.gather(key[..., j], -1, idx)
        order = torch.sort(col, dim=-1, stable=True).indices
        idx = torch.gather(idx, -1, order)
    return torch.gather(elements, -2, idx.unsqueeze(-1).expand(elements.shape))


class SetEncoder(nn.Module):
    """Deep-set encoder: ``sum_i enc(x_i, theta_i, y_i)``.

    Elements are put in a canonical order before encoding, so the output is
    bitwise identical under any permutation of the set.
    """

    def __init__(self, elem_dim: int, ctx_dim: int = 8, hidden: int = 32, depth: int = 2):
        super().__init__()
        self.elem_dim = elem_dim
        self.ctx_dim = ctx_dim
        self.net = MLP(elem_dim, ctx_dim, hidden, depth)

    def forward(self, elements: torch.Tensor) -> torch.Tensor:
        if elements.shape[-2] < 1:
            raise ValueError("cannot encode an empty batch")
        return self.net(canonical_order(elements)).sum(-2)


def make_elements(designs, params, outcomes) -> torch.Tensor:
    """Stack ``(x_i, theta_i, y_i)`` rows into (..., B, d_x + d_theta + 1)."""
    x, t, y = as_tensor(designs), as_tensor(params), as_tensor(outcomes)
    lead = torch.broadcast_shapes(x.shape[:-1], t.shape[:-1], y.shape)
    return torch.cat([x.expand(*lead, x.shape[-1]), t.expand(*lead, t.shape[-1]),
                      y.expand(lead).unsqueeze(-1)], dim=-1)


def encode_context(batch, encoder: SetEncoder) -> torch.Tensor:
    """Context vector of a batch given as (B, elem_dim) tensor or a list of (x, theta, y)."""
    if isinstance(batch, torch.Tensor):
        return encoder(batch)
    batch = list(batch)
    if not batch:
        raise ValueError("cannot encode an empty batch")
    rows = [torch.cat([as_tensor(x).reshape(-1), as_tensor(t).reshape(-1), as_tensor(y).reshape(1)])
            for x, t, y in batch]
    return encoder(torch.stack(rows))


# ---------------------------------------------------------------------------
# conditional Gaussian


def _tril_indices(d: int):
    return torch.tril_indices(d, d)


class CondGaussianModel(nn.Module):
    """``N(m(c), L(c) L(c)^T)`` with a softplus-positive Cholesky diagonal."""

    def __init__(self, dim: int, ctx_dim: int, hidden: int = 32, depth: int = 2):
        super().__init__()
        self.dim = dim
        self.mean_net = MLP(ctx_dim, dim, hidden, depth)
        self.chol_net = MLP(ctx_dim, dim * (dim + 1) // 2, hidden, depth)
        rows, cols = _tril_indices(dim)
        self.register_buffer("rows", rows, persistent=False)
        self.register_buffer("cols", cols, persistent=False)
        self.reset_output()

    def reset_output(self):
        _zero_(self.mean_net.last)
        _zero_(self.chol_net.last)
        with torch.no_grad():
            self.chol_net.last.bias[self.rows == self.cols] = _softplus_inv(1.0 - MIN_DIAG)

    def params(self, context):
        m = self.mean_net(context)
        raw = self.chol_net(context)
        diag = self.rows == self.cols
        vals = torch.where(diag, F.softplus(raw) + MIN_DIAG, raw)
        L = torch.zeros(*raw.shape[:-1], self.dim, self.dim, dtype=raw.dtype)
        return m, _fill_tril(L, vals, self.rows, self.cols)

    def log_prob(self, theta, context):
        m, L = self.params(context)
        return gaussian_logpdf_chol(as_tensor(theta) - m, L)

    def sample(self, context, n: int, gen: Optional[torch.Generator] = None):
        m, L = self.params(context)
        eps = torch.randn(n, *m.shape, generator=gen, dtype=DTYPE)
        return m + (L @ eps.unsqueeze(-1)).squeeze(-1)


def _softplus_inv(s):
    s = as_tensor(s)
    return s + torch.log(-torch.expm1(-s))


def _fill_tril(L, vals, rows, cols):
    flat = L.reshape(-1, L.shape[-2] * L.shape[-1])
    pos = rows * L.shape[-1] + cols
    flat = flat.index_copy(-1, pos, vals.reshape(-1, vals.shape[-1]))
    return flat.reshape(L.shape)


def gaussian_logpdf_chol(r, L):
    z = torch.linalg.solve_triangular(L, r.unsqueeze(-1), upper=False).squeeze(-1)
    d = r.shape[-1]
    return (-0.5 * (z * z).sum(-1) - torch.log(torch.diagonal(L, dim1=-2, dim2=-1)).sum(-1)
            - 0.5 * d * LOG_2PI)


def cond_gaussian_logpdf(theta_star, context, model: CondGaussianModel):
    return model.log_prob(theta_star, context)


# ---------------------------------------------------------------------------
# flows


def _knots(frac, bound):
    inner = torch.cumsum(frac, -1)[..., :-1] * 2 * bound - bound
    lo = torch.full_like(frac[..., :1], -bound)
    return torch.cat([lo, inner, lo.neg()], -1)


def rq_spline(x, uw, uh, ud, bound: float, inverse: bool = False, min_bin: float = 1e-3,
              min_deriv: float = 1e-3):
    """Monotone rational-quadratic spline on ``[-bound, bound]`` with identity tails.

    ``uw``, ``uh``: (..., K) unnormalised widths/heights; ``ud``: (..., K-1)
    interior derivatives.  Returns ``(y, log|dy/dx|)`` where for the inverse
    the log-derivative is that of the forward map at the output.
    """
    K = uw.shape[-1]
    inside = (x > -bound) & (x < bound)
    xc = x.clamp(-bound, bound)
    w = min_bin + (1 - min_bin * K) * torch.softmax(uw, -1)
    h = min_bin + (1 - min_bin * K) * torch.softmax(uh, -1)
    cw, ch = _knots(w, bound), _knots(h, bound)
    w = cw[..., 1:] - cw[..., :-1]
    h = ch[..., 1:] - ch[..., :-1]
    d = F.pad(min_deriv + F.softplus(ud + _SOFTPLUS_ONE) * (1 - min_deriv), (1, 1), value=1.0)

    edges = ch if inverse else cw
    k = torch.searchsorted(edges[..., 1:-1].contiguous().detach(), xc.detach().unsqueeze(-1)).squeeze(-1)
    k = k.clamp(0, K - 1).unsqueeze(-1)

    def pick(a):
        return torch.gather(a, -1, k).squeeze(-1)
    xk, yk, wk, hk = pick(cw[..., :-1]), pick(ch[..., :-1]), pick(w), pick(h)
    dk, dk1 = pick(d[..., :-1]), pick(d[..., 1:])
    s = hk / wk
    if inverse:
        dy = xc - yk
        a = hk * (s - dk) + dy * (dk1 + dk - 2 * s)
        b = hk * dk - dy * (dk1 + dk - 2 * s)
        c = -s * dy
        disc = (b * b - 4 * a * c).clamp_min(0.0)
        xi = (2 * c) / (-b - torch.sqrt(disc))
        out = xk + xi * wk
    else:
        xi = (xc - xk) / wk
        num = hk * (s * xi * xi + dk * xi * (1 - xi))
        den = s + (dk1 + dk - 2 * s) * xi * (1 - xi)
        out = yk + num / den
    om = xi * (1 - xi)
    den = s + (dk1 + dk - 2 * s) * om
    deriv = s * s * (dk1 * xi * xi + 2 * s * om + dk * (1 - xi) ** 2) / (den * den)
    y = torch.where(inside, out, x)
    logd = torch.where(inside, torch.log(deriv), torch.zeros_like(x))
    return y, logd


class CouplingLayer(nn.Module):
    """Affine or spline coupling conditioned on a context vector.

    In one dimension there is nothing to split on, so the single coordinate
    is transformed with parameters that depend on the context alone.
    """

    def __init__(self, dim: int, mask: Sequence[bool], ctx_dim: int, hidden: int, depth: int,
                 transform: str = "affine", n_bins: int = 8, bound: float = 5.0):
        super().__init__()
        self.dim = dim
        self.transform = transform
        self.n_bins = n_bins
        self.bound = bound
        m = torch.as_tensor(mask, dtype=torch.bool)
        if dim == 1:
            m = torch.zeros(1, dtype=torch.bool)
        self.register_buffer("mask", m)
        n_id = int(m.sum())
        n_tr = dim - n_id
        self.per_dim = 2 if transform == "affine" else 3 * n_bins - 1
        self.net = MLP(n_id + ctx_dim, n_tr * self.per_dim, hidden, depth)

    def _params(self, v, context):
        cond = torch.cat([v[..., self.mask], context.expand(*v.shape[:-1], context.shape[-1])], -1)
        return self.net(cond).reshape(*v.shape[:-1], -1, self.per_dim)

    def _apply(self, v, context, inverse):
        p = self._params(v, context)
        u = v[..., ~self.mask]
        if self.transform == "affine":
            shift = p[..., 0]
            log_scale = 3.0 * torch.tanh(p[..., 1] / 3.0)
            if inverse:
                out = (u - shift) * torch.exp(-log_scale)
            else:
                out = u * torch.exp(log_scale) + shift
            logd = log_scale
        else:
            K = self.n_bins
            out, logd = rq_spline(u, p[..., :K], p[..., K:2 * K], p[..., 2 * K:], self.bound, inverse)
        return _scatter(v, ~self.mask, out), logd.sum(-1)

    def forward(self, v, context):
        """Base side to data side; returns ``(out, log|det J|)``."""
        return self._apply(v, context, inverse=False)

    def inverse(self, y, context):
        """Data side to base side; returns ``(v, log|det J_forward|)``."""
        return self._apply(y, context, inverse=True)


def _scatter(v, mask, values):
    cols = []
    it = 0
    for j in range(v.shape[-1]):
        if mask[j]:
            cols.append(values[..., it])
            it += 1
        else:
            cols.append(v[..., j])
    return torch.stack(cols, -1)


class CondFlowModel(nn.Module):
    """``theta = loc + scale * g_K(...g_1(v0; c)...; c)`` with ``v0 ~ N(0, I)``.

    ``loc``/``scale`` form a fixed standardisation layer set by
    :meth:`set_standardization`; the couplings are initialised to the identity.
    """

    def __init__(self, dim: int, ctx_dim: int, n_layers: int = 2, hidden: int = 32, depth: int = 2,
                 transform: str = "affine", n_bins: int = 8, bound: float = 5.0):
        super().__init__()
        self.dim = dim
        masks = [[(j + i) % 2 == 0 for j in range(dim)] for i in range(n_layers)]
        self.layers = nn.ModuleList(CouplingLayer(dim, m, ctx_dim, hidden, depth, transform, n_bins, bound)
                                    for m in masks)
        self.register_buffer("loc", torch.zeros(dim, dtype=DTYPE))
        self.register_buffer("scale", torch.ones(dim, dtype=DTYPE))
        self.reset_output()

    def reset_output(self):
        for layer in self.layers:
            _zero_(layer.net.last)

    def set_standardization(self, loc, scale):
        with torch.no_grad():
            self.loc.copy_(as_tensor(loc).reshape(self.dim))
            self.scale.copy_(as_tensor(scale).reshape(self.dim))

    def forward_transform(self, v, context):
        total = torch.zeros(v.shape[:-1], dtype=DTYPE)
        for layer in self.layers:
            v, ld = layer(v, context)
            total = total + ld
        theta = self.loc + self.scale * v
        return theta, total + torch.log(self.scale).sum()

    def inverse(self, theta, context):
        v = (as_tensor(theta) - self.loc) / self.scale
        total = torch.log(self.scale).sum().expand(v.shape[:-1])
        for layer in reversed(self.layers):
            v, ld = layer.inverse(v, context)
            total = total + ld
        return v, total

    def log_prob(self, theta, context):
        v, logdet = self.inverse(theta, context)
        return -0.5 * (v * v).sum(-1) - 0.5 * self.dim * LOG_2PI - logdet

    def sample(self, context, n: int, gen: Optional[torch.Generator] = None):
        v = torch.randn(n, *context.shape[:-1], self.dim, generator=gen, dtype=DTYPE)
        return self.forward_transform(v, context)[0]


def flow_logpdf(theta_star, context, model: CondFlowModel):
    return model.log_prob(theta_star, context)


def flow_sample(context, model: CondFlowModel, n: int, gen: Optional[torch.Generator] = None):
    if n < 1:
        raise ValueError("n must be at least 1")
    return model.sample(context, n, gen)


# ---------------------------------------------------------------------------
# encoder + density


class ConditionalPosterior(nn.Module):
    """``q(theta* | {(x_i, theta_i, y_i)})``: set encoder followed by a conditional density."""

    def __init__(self, dim_x: int, dim_theta: int, config: QModelConfig = QModelConfig()):
        super().__init__()
        self.dim_x = dim_x
        self.dim_theta = dim_theta
        self.config = config
        gen = torch.Generator().manual_seed(config.seed)
        self.encoder = SetEncoder(dim_x + dim_theta + 1, config.ctx_dim, config.enc_hidden, config.enc_depth)
        if config.kind == "gaussian":
            self.density = CondGaussianModel(dim_theta, config.ctx_dim, config.hidden, config.depth)
        else:
            self.density = CondFlowModel(dim_theta, config.ctx_dim, config.n_layers, config.hidden,
                                         config.depth, config.transform, config.n_bins, config.bound)
        _init_uniform(self, gen)
        self.density.reset_output()
        elem_dim = dim_x + dim_theta + 1
        self.register_buffer("elem_loc", torch.zeros(elem_dim, dtype=DTYPE))
        self.register_buffer("elem_scale", torch.ones(elem_dim, dtype=DTYPE))

    def set_element_normalization(self, loc, scale):
        """Fixed affine whitening of encoder inputs ``(x, theta, y)``."""
        with torch.no_grad():
            self.elem_loc.copy_(as_tensor(loc).reshape(-1))
            self.elem_scale.copy_(as_tensor(scale).reshape(-1))

    def set_standardization(self, loc, scale):
        """Shift/scale the base density; for the Gaussian this moves the output bias."""
        if isinstance(self.density, CondFlowModel):
            self.density.set_standardization(loc, scale)
        else:
            g = self.density
            with torch.no_grad():
                g.mean_net.last.bias.copy_(as_tensor(loc).reshape(-1))
                diag = (g.rows == g.cols).nonzero().squeeze(-1)
                s = as_tensor(scale).reshape(-1)
                g.chol_net.last.bias[diag] = _softplus_inv(s - MIN_DIAG)

    def context(self, elements):
        return self.encoder((elements - self.elem_loc) / self.elem_scale)

    def log_prob(self, theta, elements):
        """``theta``: (..., d_theta); ``elements``: (..., B, elem_dim)."""
        return self.density.log_prob(as_tensor(theta), self.context(elements))

    def sample(self, elements, n: int, gen: Optional[torch.Generator] = None):
        return self.density.sample(self.context(elements), n, gen)


def model_gradients(loss: torch.Tensor, params: Sequence[torch.Tensor], allow_unused: bool = True):
    """Reverse-mode gradients of a scalar ``loss``; unused inputs get zeros."""
    params = list(params)
    grads = torch.autograd.grad(loss, params, allow_unused=allow_unused, retain_graph=True)
    return [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: ConditionalPosterior, path) -> None:
    """Versioned JSON: architecture, sizes and a flat map of named parameters/buffers."""
    state = {k: v.detach().reshape(-1).tolist() for k, v in model.state_dict().items()}
    shapes = {k: list(v.shape) for k, v in model.state_dict().items()}
    doc = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, "dim_x": model.dim_x,
           "dim_theta": model.dim_theta, "config": asdict(model.config), "shapes": shapes, "params": state}
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path) -> ConditionalPosterior:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError("not a conditional-model checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')}")
    model = ConditionalPosterior(doc["dim_x"], doc["dim_theta"], QModelConfig(**doc["config"]))
    state = {k: torch.tensor(v, dtype=DTYPE).reshape(doc["shapes"][k]) for k, v in doc["params"].items()}
    model.load_state_dict(state)
    return model
