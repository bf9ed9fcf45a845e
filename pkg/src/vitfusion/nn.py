"""Small neural-network toolkit: layers with explicit forward/backward passes.

Everything runs in float64 on numpy arrays. Layers cache whatever the
backward pass needs on the instance, so the calling convention is strict:
one forward, then the matching backward, before the next forward. Gradients
accumulate into ``Param.grad`` until ``zero_grad`` is called, which is what
lets a training step sum gradients over the scenes of a batch.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

DTYPE = np.float64

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class ConfigError(ValueError):
    """Raised when layer/tensor shapes or settings are inconsistent."""


class Mode:
    """Evaluation context: training flag plus the RNG for dropout/sampling."""

    def __init__(self, train: bool = False, rng: np.random.Generator | None = None):
        if train and rng is None:
            raise ConfigError("training mode requires an rng")
        self.train = train
        self.rng = rng


EVAL = Mode(train=False)


class Param:
    """A learnable array and its accumulated gradient."""

    __slots__ = ("data", "grad")

    def __init__(self, data):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad = np.zeros_like(self.data)


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02):
    # clipped normal; close enough to a resampled truncation for init purposes
    return np.clip(rng.normal(0.0, std, size=shape), -2.0 * std, 2.0 * std)


class Module:
    """Base class providing named parameter/buffer traversal.

    Walks instance attributes: ``Param`` leaves, child ``Module``s and
    lists/tuples of child modules. Attribute order is definition order,
    which keeps checkpoints stable.
    """

    def named_params(self, prefix: str = "") -> dict[str, Param]:
        out: dict[str, Param] = {}
        for name, val in vars(self).items():
            if name.startswith("_"):
                continue
            key = prefix + name
            if isinstance(val, Param):
                out[key] = val
            elif isinstance(val, Module):
                out.update(val.named_params(key + "."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.update(item.named_params(f"{key}.{i}."))
        return out

    def named_buffers(self, prefix: str = "") -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        own = getattr(self, "_buffers", None)
        if own:
            for name, arr in own.items():
                out[prefix + name] = arr
        for name, val in vars(self).items():
            if name.startswith("_"):
                continue
            key = prefix + name
            if isinstance(val, Module):
                out.update(val.named_buffers(key + "."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.update(item.named_buffers(f"{key}.{i}."))
        return out

    def zero_grad(self):
        for p in self.named_params().values():
            p.grad[...] = 0.0

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {k: p.data for k, p in self.named_params().items()}
        for k, b in self.named_buffers().items():
            state["buffer:" + k] = b
        return state

    def load_state_dict(self, state: dict[str, np.ndarray], prefix: str = ""):
        """Copy arrays into this module's params/buffers (in place, bit exact).

        ``prefix`` selects a sub-tree of ``state``, e.g. loading a branch
        checkpoint into the matching branch of a larger model.
        """
        params = self.named_params()
        buffers = self.named_buffers()
        for key, p in params.items():
            src = state[prefix + key]
            if src.shape != p.data.shape:
                raise ConfigError(f"shape mismatch for {key}: {src.shape} vs {p.data.shape}")
            p.data[...] = src
        for key, b in buffers.items():
            src = state["buffer:" + prefix + key]
            b[...] = src


class Linear(Module):
    def __init__(self, rng, d_in: int, d_out: int, std: float = 0.02):
        self.W = Param(trunc_normal(rng, (d_in, d_out), std))
        self.b = Param(np.zeros(d_out))
        self._x = None

    @property
    def d_in(self):
        return self.W.data.shape[0]

    @property
    def d_out(self):
        return self.W.data.shape[1]

    def forward(self, x):
        x = np.asarray(x, dtype=DTYPE)
        if x.shape[-1] != self.W.data.shape[0]:
            raise ConfigError(
                f"linear expects width {self.W.data.shape[0]}, got {x.shape[-1]}")
        self._x = x
        return x @ self.W.data + self.b.data

    def backward(self, dout):
        x = self._x
        xf = x.reshape(-1, x.shape[-1])
        df = dout.reshape(-1, dout.shape[-1])
        self.W.grad += xf.T @ df
        self.b.grad += df.sum(axis=0)
        return dout @ self.W.data.T


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gamma = Param(np.ones(dim))
        self.beta = Param(np.zeros(dim))
        self._eps = eps
        self._cache = None

    def forward(self, x):
        x = np.asarray(x, dtype=DTYPE)
        mu = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + self._eps)
        xhat = (x - mu) * inv
        self._cache = (xhat, inv)
        return self.gamma.data * xhat + self.beta.data

    def backward(self, dout):
        xhat, inv = self._cache
        lead = tuple(range(dout.ndim - 1))
        self.gamma.grad += (dout * xhat).sum(axis=lead)
        self.beta.grad += dout.sum(axis=lead)
        dxhat = dout * self.gamma.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        return inv * (dxhat - m1 - xhat * m2)


class GELU(Module):
    """Exact (erf-based) GELU."""

    def __init__(self):
        self._x = None

    def forward(self, x):
        self._x = x
        return 0.5 * x * (1.0 + erf(x * _INV_SQRT2))

    def backward(self, dout):
        x = self._x
        cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return dout * (cdf + x * pdf)


class SiLU(Module):
    def __init__(self):
        self._s = None
        self._x = None

    def forward(self, x):
        s = 1.0 / (1.0 + np.exp(-x))
        self._s = s
        self._x = x
        return x * s

    def backward(self, dout):
        s, x = self._s, self._x
        return dout * (s + x * s * (1.0 - s))


_ACTIVATIONS = {"gelu": GELU, "silu": SiLU}


class Dropout(Module):
    def __init__(self, rate: float):
        if not 0.0 <= rate < 1.0:
            raise ConfigError(f"dropout rate must be in [0,1), got {rate}")
        self.rate = rate
        self._mask = None

    def forward(self, x, mode: Mode):
        if not mode.train or self.rate == 0.0:
            self._mask = None
            return x
        keep = 1.0 - self.rate
        self._mask = (mode.rng.random(x.shape) < keep) / keep
        return x * self._mask

    def backward(self, dout):
        if self._mask is None:
            return dout
        return dout * self._mask


class MLP(Module):
    """Stack of linear layers with an activation (and optional dropout)
    between them; the final layer is linear."""

    def __init__(self, rng, d_in: int, widths, d_out: int,
                 activation: str = "gelu", dropout: float = 0.0):
        dims = [d_in] + list(widths) + [d_out]
        self.layers = [Linear(rng, dims[i], dims[i + 1]) for i in range(len(dims) - 1)]
        self.acts = [_ACTIVATIONS[activation]() for _ in range(len(dims) - 2)]
        self.drops = [Dropout(dropout) for _ in range(len(dims) - 2)]

    @property
    def d_in(self):
        return self.layers[0].d_in

    @property
    def d_out(self):
        return self.layers[-1].d_out

    def forward(self, x, mode: Mode = EVAL):
        for i, lin in enumerate(self.layers[:-1]):
            x = self.drops[i].forward(self.acts[i].forward(lin.forward(x)), mode)
        return self.layers[-1].forward(x)

    def backward(self, dout):
        dout = self.layers[-1].backward(dout)
        for i in reversed(range(len(self.layers) - 1)):
            dout = self.acts[i].backward(self.drops[i].backward(dout))
            dout = self.layers[i].backward(dout)
        return dout


def softmax(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(dout, y, axis=-1):
    return y * (dout - (dout * y).sum(axis=axis, keepdims=True))


class MaskedBatchNorm(Module):
    """Batch normalization over the set of valid rows selected by a mask.

    Input is (V, T, F) with mask (V, T); statistics are taken over every
    valid point of the call in training mode and over running statistics in
    eval mode. Running moments track the biased batch moments.
    """

    def __init__(self, dim: int, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = Param(np.ones(dim))
        self.beta = Param(np.zeros(dim))
        self._momentum = momentum
        self._eps = eps
        self._buffers = {
            "running_mean": np.zeros(dim),
            "running_var": np.ones(dim),
        }
        self._cache = None

    def forward(self, x, mask, mode: Mode):
        if mode.train:
            sel = x[mask]
            n = sel.shape[0]
            mean = sel.mean(axis=0)
            var = sel.var(axis=0)
            m = self._momentum
            self._buffers["running_mean"] *= 1.0 - m
            self._buffers["running_mean"] += m * mean
            self._buffers["running_var"] *= 1.0 - m
            self._buffers["running_var"] += m * var
        else:
            mean = self._buffers["running_mean"]
            var = self._buffers["running_var"]
            n = 0
        inv = 1.0 / np.sqrt(var + self._eps)
        xhat = (x - mean) * inv
        self._cache = (xhat, inv, mask, n, mode.train)
        return self.gamma.data * xhat + self.beta.data

    def backward(self, dout):
        xhat, inv, mask, n, trained = self._cache
        dout = dout * mask[..., None]
        self.gamma.grad += (dout * xhat)[mask].sum(axis=0)
        self.beta.grad += dout[mask].sum(axis=0)
        dxhat = dout * self.gamma.data
        if not trained:
            return dxhat * inv * mask[..., None]
        # statistics were functions of the valid rows
        m1 = dxhat[mask].sum(axis=0) / n
        m2 = (dxhat * xhat)[mask].sum(axis=0) / n
        dx = inv * (dxhat - m1 - xhat * m2)
        return dx * mask[..., None]


def masked_max(x, mask):
    """Elementwise max over axis 1 restricted to valid rows.

    Returns (out, argmax) where argmax is kept for the backward scatter.
    Every (v,) slice must contain at least one valid row.
    """
    neg = np.where(mask[..., None], x, -np.inf)
    idx = neg.argmax(axis=1)
    out = np.take_along_axis(neg, idx[:, None, :], axis=1)[:, 0, :]
    return out, idx


def masked_max_backward(dout, idx, shape):
    dx = np.zeros(shape, dtype=DTYPE)
    np.put_along_axis(dx, idx[:, None, :], dout[:, None, :], axis=1)
    return dx


class MultiHeadSelfAttention(Module):
    """Scaled dot-product self-attention; logits scaled by 1/sqrt(D/heads)."""

    def __init__(self, rng, dim: int, heads: int, dropout: float = 0.0):
        if dim % heads != 0:
            raise ConfigError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.q = Linear(rng, dim, dim)
        self.k = Linear(rng, dim, dim)
        self.v = Linear(rng, dim, dim)
        self.out = Linear(rng, dim, dim)
        self.attn_drop = Dropout(dropout)
        self._cache = None

    def _split(self, x, S):
        # (S, D) -> (H, S, dh)
        return x.reshape(S, self.heads, -1).transpose(1, 0, 2)

    def forward(self, x, mode: Mode = EVAL):
        S, D = x.shape
        dh = D // self.heads
        q = self._split(self.q.forward(x), S)
        k = self._split(self.k.forward(x), S)
        v = self._split(self.v.forward(x), S)
        scale = 1.0 / np.sqrt(dh)
        logits = (q @ k.transpose(0, 2, 1)) * scale
        attn = softmax(logits, axis=-1)
        attn_d = self.attn_drop.forward(attn, mode)
        ctx = attn_d @ v                      # (H, S, dh)
        merged = ctx.transpose(1, 0, 2).reshape(S, D)
        self._cache = (q, k, v, attn, attn_d, scale, S, D)
        return self.out.forward(merged)

    def backward(self, dout):
        q, k, v, attn, attn_d, scale, S, D = self._cache
        dmerged = self.out.backward(dout)
        dctx = self._split(dmerged, S)
        dattn_d = dctx @ v.transpose(0, 2, 1)
        dv = attn_d.transpose(0, 2, 1) @ dctx
        dattn = self.attn_drop.backward(dattn_d)
        dlogits = softmax_backward(dattn, attn) * scale
        dq = dlogits @ k
        dk = dlogits.transpose(0, 2, 1) @ q
        merge = lambda h: h.transpose(1, 0, 2).reshape(S, D)
        dx = self.q.backward(merge(dq))
        dx = dx + self.k.backward(merge(dk))
        dx = dx + self.v.backward(merge(dv))
        return dx


class Adam:
    """Adam optimizer over a named parameter dict. Updates are in place."""

    def __init__(self, params: dict[str, Param], lr: float,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self._params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self._m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self._v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self._t = 0

    def step(self, grad_scale: float = 1.0):
        self._t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self._t
        c2 = 1.0 - b2 ** self._t
        for k, p in self._params.items():
            g = p.grad * grad_scale
            m = self._m[k]
            v = self._v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self):
        for p in self._params.values():
            p.grad[...] = 0.0
