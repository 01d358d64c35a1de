"""Dense f64 tensors with a reverse-mode tape, the layers the model needs,
an Adam optimizer, seeded parameter initialization, and a finite-difference
gradient checker.

Design constraints this module lives under:

- double precision everywhere; gradient verification demands it
- single-threaded tape; recording order is creation order, which for a
  single forward pass is already topological, so backward is one reversed
  sweep over the records
- broadcasting is rank-extension only (a missing leading axis is fine,
  size-1 stretching is not), so shape bugs fail loudly
"""

from __future__ import annotations

import json
import struct
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf


class TensorError(Exception):
    pass


class ShapeMismatch(TensorError):
    pass


class HeadDivisibility(TensorError):
    pass


class IndexOutOfVocab(TensorError):
    pass


class NoTape(TensorError):
    pass


class InvalidStep(TensorError):
    pass


class NonFiniteValue(TensorError):
    pass


class CheckpointMismatch(TensorError):
    pass


class Tensor:
    """Row-major f64 array plus a requires_grad flag.

    Public construction validates finiteness; op results skip the check and
    are produced through :meth:`_result`.  ``grad`` is an accumulator filled
    by :func:`backward` and is never consumed by forward computation.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteValue("tensor data contains NaN or Inf")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @classmethod
    def _result(cls, data: np.ndarray, requires_grad: bool) -> "Tensor":
        t = object.__new__(cls)
        t.data = data
        t.requires_grad = requires_grad
        t.grad = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeMismatch(f"item() needs a one-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """Named trainable tensor; the optimizer walks these."""

    __slots__ = ("name",)

    def __init__(self, name: str, data):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


# --------------------------------------------------------------------- tape

_TAPES: list["Tape"] = []


class Tape:
    """Records (output, inputs, vjp) triples while active.  Entries are in
    creation order, so one reversed sweep visits each op after all of its
    consumers."""

    def __init__(self):
        self._entries: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> bool:
        _TAPES.pop()
        return False


def _record(out: Tensor, inputs: tuple[Tensor, ...], vjp: Callable) -> None:
    if _TAPES and out.requires_grad:
        _TAPES[-1]._entries.append((out, inputs, vjp))


def backward(loss: Tensor) -> None:
    """Reverse sweep from a scalar loss under the innermost active tape.
    Gradients accumulate into ``.grad`` of every reachable requires_grad
    leaf (Parameters and inputs), adding to whatever is already there."""
    if not _TAPES:
        raise NoTape("backward() requires an active Tape")
    if loss.data.size != 1:
        raise ShapeMismatch(f"loss must be scalar, got shape {loss.shape}")
    tape = _TAPES[-1]
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    holders: dict[int, Tensor] = {id(loss): loss}
    produced = {id(out) for out, _, _ in tape._entries}
    for out, inputs, vjp in reversed(tape._entries):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        holders.pop(id(out), None)
        for inp, gi in zip(inputs, vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            tid = id(inp)
            holders[tid] = inp
            if tid in grads:
                grads[tid] = grads[tid] + gi
            else:
                grads[tid] = gi
    for tid, g in grads.items():
        t = holders[tid]
        if not t.requires_grad or tid in produced:
            continue
        t.grad = g if t.grad is None else t.grad + g


# ---------------------------------------------------------------- shape glue


def _conform(a: tuple[int, ...], b: tuple[int, ...]) -> tuple[int, ...]:
    """Rank-extension broadcast: trailing dims must match exactly."""
    short, long = (a, b) if len(a) <= len(b) else (b, a)
    if short != long[len(long) - len(short):]:
        raise ShapeMismatch(f"shapes {a} and {b} do not conform")
    return long


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient back down to the rank-extended operand's shape."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    return g


# ----------------------------------------------------------------- basic ops


def add(a: Tensor, b: Tensor) -> Tensor:
    _conform(a.shape, b.shape)
    out = Tensor._result(a.data + b.data, a.requires_grad or b.requires_grad)
    _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    _conform(a.shape, b.shape)
    out = Tensor._result(a.data * b.data, a.requires_grad or b.requires_grad)
    _record(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )
    return out


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    out = Tensor._result(x.data * c, x.requires_grad)
    _record(out, (x,), lambda g: (g * c,))
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != b.data.ndim or a.data.ndim not in (2, 3):
        raise ShapeMismatch(f"matmul needs two 2D or two 3D tensors, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2] or (a.data.ndim == 3 and a.shape[0] != b.shape[0]):
        raise ShapeMismatch(f"matmul shapes {a.shape} and {b.shape} do not conform")
    out = Tensor._result(a.data @ b.data, a.requires_grad or b.requires_grad)
    _record(
        out,
        (a, b),
        lambda g: (g @ b.data.swapaxes(-1, -2), a.data.swapaxes(-1, -2) @ g),
    )
    return out


def concat_rows(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeMismatch(f"concat_rows needs [*,d] matrices, got {a.shape} and {b.shape}")
    out = Tensor._result(np.concatenate([a.data, b.data], axis=0), a.requires_grad or b.requires_grad)
    la = a.shape[0]
    _record(out, (a, b), lambda g: (g[:la], g[la:]))
    return out


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size:
        raise ShapeMismatch(f"cannot reshape {x.shape} to {shape}")
    out = Tensor._result(x.data.reshape(shape), x.requires_grad)
    _record(out, (x,), lambda g: (g.reshape(x.shape),))
    return out


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = Tensor._result(np.transpose(x.data, axes), x.requires_grad)
    _record(out, (x,), lambda g: (np.transpose(g, inverse),))
    return out


def sum_all(x: Tensor) -> Tensor:
    out = Tensor._result(np.asarray(x.data.sum()), x.requires_grad)
    _record(out, (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))
    return out


def mean_rows(x: Tensor) -> Tensor:
    """[L×d] -> [1×d] mean pooling over rows."""
    if x.data.ndim != 2:
        raise ShapeMismatch(f"mean_rows needs a 2D tensor, got {x.shape}")
    n = x.shape[0]
    out = Tensor._result(x.data.mean(axis=0, keepdims=True), x.requires_grad)
    _record(out, (x,), lambda g: (np.broadcast_to(g / n, x.shape).copy(),))
    return out


# ------------------------------------------------------------ nonlinearities


def relu(x: Tensor) -> Tensor:
    out = Tensor._result(np.maximum(x.data, 0.0), x.requires_grad)
    _record(out, (x,), lambda g: (g * (x.data > 0.0),))
    return out


def gelu(x: Tensor) -> Tensor:
    # Exact form: x * Phi(x). Derivative Phi(x) + x * phi(x).
    cdf = 0.5 * (1.0 + erf(x.data / np.sqrt(2.0)))
    out = Tensor._result(x.data * cdf, x.requires_grad)

    def vjp(g):
        pdf = np.exp(-0.5 * x.data**2) / np.sqrt(2.0 * np.pi)
        return (g * (cdf + x.data * pdf),)

    _record(out, (x,), vjp)
    return out


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, numerically stabilized."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)
    out = Tensor._result(s, x.requires_grad)
    _record(out, (x,), lambda g: (s * (g - (g * s).sum(axis=-1, keepdims=True)),))
    return out


def layer_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Pure normalization over the last axis (no learned affine; compose
    that from mul/add with gain and bias parameters)."""
    if eps <= 0:
        raise InvalidStep(f"layer_norm eps must be positive, got {eps}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = (x.data - mu) * inv
    out = Tensor._result(y, x.requires_grad)
    d = x.shape[-1]

    def vjp(g):
        gm = g.mean(axis=-1, keepdims=True)
        gym = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gym),)

    _record(out, (x,), vjp)
    return out


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b over the last axis."""
    return add(matmul(x, w), b)


# ----------------------------------------------------- embedding and the loss


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise ShapeMismatch(f"ids must be a 1D sequence, got shape {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexOutOfVocab(
            f"id out of range [0,{table.shape[0]}) in {ids.tolist()}"
        )
    out = Tensor._result(table.data[ids], table.requires_grad)

    def vjp(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    _record(out, (table,), vjp)
    return out


def cross_entropy(logits: Tensor, target_ids) -> Tensor:
    """Mean negative log-likelihood over positions; logits [N×V]."""
    ids = np.asarray(target_ids, dtype=np.int64)
    if logits.data.ndim != 2 or ids.ndim != 1 or ids.shape[0] != logits.shape[0]:
        raise ShapeMismatch(
            f"cross_entropy needs logits [N,V] and N targets, got {logits.shape} and {ids.shape}"
        )
    if ids.size and (ids.min() < 0 or ids.max() >= logits.shape[1]):
        raise IndexOutOfVocab(f"target id out of range [0,{logits.shape[1]})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsumexp
    n = ids.shape[0]
    out = Tensor._result(np.asarray(-logp[np.arange(n), ids].mean()), logits.requires_grad)

    def vjp(g):
        soft = np.exp(logp)
        soft[np.arange(n), ids] -= 1.0
        return (float(g) * soft / n,)

    _record(out, (logits,), vjp)
    return out


# ------------------------------------------------------- multi-head attention


class AttentionParams:
    """Projection weights for one attention unit: q, k, v, and output."""

    __slots__ = ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")

    def __init__(self, wq, bq, wk, bk, wv, bv, wo, bo):
        self.wq, self.bq = wq, bq
        self.wk, self.bk = wk, bk
        self.wv, self.bv = wv, bv
        self.wo, self.bo = wo, bo

    def tensors(self) -> tuple[Tensor, ...]:
        return (self.wq, self.bq, self.wk, self.bk, self.wv, self.bv, self.wo, self.bo)


def multi_head_attention(
    q_src: Tensor,
    kv_src: Tensor,
    params: AttentionParams,
    heads: int,
    mask: Tensor | None = None,
) -> Tensor:
    """Scaled dot-product attention with an output projection, built from the
    primitive ops so it differentiates for free.  Self-attention is the
    ``kv_src is q_src`` case; an additive mask [Lq×Lk] (0 or large negative)
    is applied to the scores before softmax."""
    if q_src.data.ndim != 2 or kv_src.data.ndim != 2:
        raise ShapeMismatch(f"attention sources must be 2D, got {q_src.shape} and {kv_src.shape}")
    d = q_src.shape[1]
    if kv_src.shape[1] != d:
        raise ShapeMismatch(f"query dim {q_src.shape} and key/value dim {kv_src.shape} differ")
    if d % heads != 0:
        raise HeadDivisibility(f"model dim {d} not divisible by {heads} heads")
    dh = d // heads
    lq, lk = q_src.shape[0], kv_src.shape[0]

    q = linear(q_src, params.wq, params.bq)
    k = linear(kv_src, params.wk, params.bk)
    v = linear(kv_src, params.wv, params.bv)
    qh = transpose(reshape(q, (lq, heads, dh)), (1, 0, 2))
    kt = transpose(reshape(k, (lk, heads, dh)), (1, 2, 0))
    vh = transpose(reshape(v, (lk, heads, dh)), (1, 0, 2))
    scores = scale(matmul(qh, kt), 1.0 / np.sqrt(dh))
    if mask is not None:
        if mask.shape != (lq, lk):
            raise ShapeMismatch(f"mask shape {mask.shape} does not fit scores ({lq},{lk})")
        scores = add(scores, mask)
    attn = softmax_rows(scores)
    mixed = matmul(attn, vh)
    merged = reshape(transpose(mixed, (1, 0, 2)), (lq, d))
    return linear(merged, params.wo, params.bo)


def causal_mask(n: int) -> Tensor:
    """Additive mask forbidding attention to later positions."""
    m = np.triu(np.full((n, n), -1e9), k=1)
    return Tensor._result(m, False)


# ------------------------------------------------------------------ optimizer


class Adam:
    """Standard Adam with bias correction over a list of Parameters."""

    def __init__(self, params: Iterable[Parameter], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = float(lr)
        self.b1, self.b2 = betas
        self.eps = float(eps)
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            self._m[i] = self.b1 * self._m[i] + (1 - self.b1) * g
            self._v[i] = self.b2 * self._v[i] + (1 - self.b2) * g * g
            mhat = self._m[i] / (1 - self.b1**self.t)
            vhat = self._v[i] / (1 - self.b2**self.t)
            p.data = p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


# --------------------------------------------------------------- param store


class ParamStore:
    """Named, seeded parameter registry with get-or-create semantics.

    Creation order is deterministic when the model is built from config in a
    fixed order, which makes initialization reproducible for a given seed.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._rng = np.random.default_rng(self.seed)
        self._params: dict[str, Parameter] = {}

    def _get_or_create(self, name: str, shape: tuple[int, ...], init) -> Parameter:
        if name in self._params:
            p = self._params[name]
            if p.shape != shape:
                raise CheckpointMismatch(
                    f"parameter {name!r} requested with shape {shape}, exists with {p.shape}"
                )
            return p
        p = Parameter(name, init())
        self._params[name] = p
        return p

    def matrix(self, name: str, rows: int, cols: int) -> Parameter:
        limit = np.sqrt(6.0 / (rows + cols))
        return self._get_or_create(
            name, (rows, cols), lambda: self._rng.uniform(-limit, limit, size=(rows, cols))
        )

    def zeros(self, name: str, *shape: int) -> Parameter:
        return self._get_or_create(name, tuple(shape), lambda: np.zeros(shape))

    def ones(self, name: str, *shape: int) -> Parameter:
        return self._get_or_create(name, tuple(shape), lambda: np.ones(shape))

    def normal(self, name: str, shape: tuple[int, ...], std: float = 0.02) -> Parameter:
        shape = tuple(shape)
        return self._get_or_create(
            name, shape, lambda: self._rng.normal(0.0, std, size=shape)
        )

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def names(self) -> list[str]:
        return list(self._params)

    def parameters(self) -> list[Parameter]:
        return list(self._params.values())

    def count(self) -> int:
        return sum(p.size for p in self._params.values())

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self._params.items()}

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(arrays)
        extra = set(arrays) - set(self._params)
        if missing or extra:
            raise CheckpointMismatch(
                f"parameter names differ: missing {sorted(missing)[:4]}, extra {sorted(extra)[:4]}"
            )
        for name, p in self._params.items():
            a = np.asarray(arrays[name], dtype=np.float64)
            if a.shape != p.shape:
                raise CheckpointMismatch(
                    f"parameter {name!r}: checkpoint shape {a.shape} vs model shape {p.shape}"
                )
            p.data = a.copy()


# ----------------------------------------------------------- checkpoint file

_CKPT_MAGIC = b"CRPK"
_CKPT_VERSION = 1


def save_params(path: str, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Named-parameter container: magic, version u16 LE, header-length u32 LE,
    UTF-8 JSON header {meta, dtype, params: [{name, shape}]}, then the raw
    little-endian f64 payload concatenated in header order, row-major."""
    header = {
        "meta": meta or {},
        "dtype": "<f8",
        "params": [{"name": k, "shape": list(v.shape)} for k, v in arrays.items()],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<H", _CKPT_VERSION))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for v in arrays.values():
            f.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def load_params(path: str) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != _CKPT_MAGIC:
        raise CheckpointMismatch(f"{path}: not a checkpoint (bad magic {raw[:4]!r})")
    (version,) = struct.unpack("<H", raw[4:6])
    if version != _CKPT_VERSION:
        raise CheckpointMismatch(f"{path}: unsupported checkpoint version {version}")
    (hlen,) = struct.unpack("<I", raw[6:10])
    try:
        header = json.loads(raw[10 : 10 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointMismatch(f"{path}: corrupt header: {e}") from e
    offset = 10 + hlen
    arrays: dict[str, np.ndarray] = {}
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        nbytes = int(np.prod(shape)) * 8 if shape else 8
        chunk = raw[offset : offset + nbytes]
        if len(chunk) != nbytes:
            raise CheckpointMismatch(f"{path}: truncated payload at {entry['name']!r}")
        arrays[entry["name"]] = np.frombuffer(chunk, dtype="<f8").reshape(shape).copy()
        offset += nbytes
    if offset != len(raw):
        raise CheckpointMismatch(f"{path}: {len(raw) - offset} trailing bytes after payload")
    return arrays, header.get("meta", {})


# ------------------------------------------------------------ gradient check


def finite_diff_check(
    fn: Callable[..., Tensor],
    wrt: Tensor | Sequence[Tensor],
    h: float = 1e-3,
    *,
    sample: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``fn(*wrt)`` must return a scalar Tensor and be deterministic.  ``sample``
    caps the number of coordinates perturbed per tensor (uniform without
    replacement) so whole-model checks stay affordable; None checks all.
    Relative error per coordinate is |a-n| / max(|a|, |n|, 1e-8).
    """
    if h <= 0:
        raise InvalidStep(f"step size must be positive, got {h}")
    tensors = [wrt] if isinstance(wrt, Tensor) else list(wrt)
    saved = [t.grad for t in tensors]
    for t in tensors:
        t.grad = None
    with Tape():
        loss = fn(*tensors)
        if loss.data.size != 1:
            raise ShapeMismatch(f"fn must return a scalar, got shape {loss.shape}")
        backward(loss)
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]
    for t, g in zip(tensors, saved):
        t.grad = g

    if rng is None:
        rng = np.random.default_rng(0)
    worst = 0.0
    for t, a in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if sample is not None and sample < flat.size:
            idx = rng.choice(flat.size, size=sample, replace=False)
        aflat = a.reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = fn(*tensors).item()
            flat[i] = orig - h
            fm = fn(*tensors).item()
            flat[i] = orig
            numeric = (fp - fm) / (2 * h)
            err = abs(aflat[i] - numeric) / max(abs(aflat[i]), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
