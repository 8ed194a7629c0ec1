"""Parameter containers and the small layers shared by every block."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ShapeMismatch
from .tensor import Tensor


class Parameter(Tensor):
    """A trainable leaf tensor."""

    def __init__(self, data, name: str | None = None):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=True, name=name)


class Module:
    def named_parameters(self, prefix: str = "") -> list[tuple[str, Parameter]]:
        out = []
        for key, val in vars(self).items():
            path = f"{prefix}{key}"
            if isinstance(val, Parameter):
                out.append((path, val))
            elif isinstance(val, Module):
                out.extend(val.named_parameters(path + "."))
        out.sort(key=lambda kv: kv[0])
        for name, p in out:
            p.name = name
        return out

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def num_params(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = sorted(set(params) - set(state))
        extra = sorted(set(state) - set(params))
        if missing or extra:
            raise ShapeMismatch(f"state mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ShapeMismatch(f"{name}: expected {p.shape}, got {arr.shape}")
            p.data = arr.copy()


def xavier(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, shape or (fan_in, fan_out))


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, init: str = "xavier"):
        if init == "zero":
            w = np.zeros((d_in, d_out))
        elif init == "identity":
            w = np.eye(d_in, d_out)
        else:
            w = xavier(rng, d_in, d_out)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(d_out))

    def __call__(self, x: Tensor) -> Tensor:
        return T.affine(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gamma = Parameter(np.ones(d))
        self.beta = Parameter(np.zeros(d))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


class FFN(Module):
    """Linear -> GELU -> Linear."""

    def __init__(self, d: int, hidden: int, rng: np.random.Generator, zero_out: bool = False):
        self.w1 = Linear(d, hidden, rng)
        self.w2 = Linear(hidden, d, rng, init="zero" if zero_out else "xavier")

    def __call__(self, x: Tensor) -> Tensor:
        return self.w2(T.gelu(self.w1(x)))


def ffn_params(d: int, hidden: int) -> int:
    return d * hidden + hidden + hidden * d + d


def linear_params(d_in: int, d_out: int) -> int:
    return d_in * d_out + d_out


class MultiHeadAttention(Module):
    """Scaled dot-product attention with separate q/k/v/out projections.

    Inputs carry arbitrary leading batch dims: query (..., n, d),
    key/value (..., m, d). ``bias`` is added to the (..., heads, n, m) logits.
    """

    def __init__(self, d: int, heads: int, rng: np.random.Generator):
        if d % heads:
            raise ShapeMismatch(f"d={d} not divisible by heads={heads}")
        self.heads = heads
        self.q_proj = Linear(d, d, rng)
        self.k_proj = Linear(d, d, rng)
        self.v_proj = Linear(d, d, rng)
        self.out_proj = Linear(d, d, rng)

    def _split(self, x: Tensor) -> Tensor:
        *lead, n, d = x.shape
        x = x.reshape(*lead, n, self.heads, d // self.heads)
        nd = len(lead)
        return x.transpose(*range(nd), nd + 1, nd, nd + 2)

    def __call__(self, query: Tensor, key: Tensor, value: Tensor, bias=None) -> Tensor:
        q = self._split(self.q_proj(query))
        k = self._split(self.k_proj(key))
        v = self._split(self.v_proj(value))
        dh = q.shape[-1]
        nd = q.ndim
        kt = k.transpose(*range(nd - 2), nd - 1, nd - 2)
        logits = (q @ kt) * (1.0 / np.sqrt(dh))
        if bias is not None:
            logits = logits + bias
        ctx = T.softmax(logits, axis=-1) @ v  # (..., heads, n, dh)
        lead = ctx.shape[:-3]
        nl = len(lead)
        ctx = ctx.transpose(*range(nl), nl + 1, nl, nl + 2)
        ctx = ctx.reshape(*lead, query.shape[-2], query.shape[-1])
        return self.out_proj(ctx)


def mha_params(d: int) -> int:
    return 4 * linear_params(d, d)


def sine_embedding(pts: np.ndarray, d: int, temperature: float = 10000.0) -> np.ndarray:
    """Fixed 2-D sinusoidal embedding of normalised (x, y) positions -> (n, d)."""
    half = d // 2
    n_freq = (half + 1) // 2
    dim_t = temperature ** (2 * np.arange(n_freq) / max(half, 1))
    out = []
    for axis in (1, 0):  # y first, like DETR
        v = pts[:, axis:axis + 1] * 2 * np.pi / dim_t
        emb = np.stack([np.sin(v), np.cos(v)], axis=-1).reshape(len(pts), -1)[:, :half]
        out.append(emb)
    emb = np.concatenate(out, axis=1)
    if emb.shape[1] < d:
        emb = np.pad(emb, ((0, 0), (0, d - emb.shape[1])))
    return emb
