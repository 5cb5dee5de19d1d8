"""Dense float64 tensors with reverse-mode gradients.

The carrier type for frames, feature maps and logits is a thin wrapper
around a C-contiguous float64 ndarray of rank <= 4. Operations build a
record of primitive applications (parent links plus a backward closure per
node); calling :meth:`Tensor.backward` on a scalar output walks that record
once in reverse topological order. Forward evaluation is pure and
deterministic, so re-running a recorded computation on unchanged inputs
reproduces the same bits.

Elementwise and reduction primitives live here; the kernel-backed spatial
primitives (convolution, resize, warping, attention) are in
:mod:`altseg.ops`.
"""

from __future__ import annotations

import struct
import warnings

import numpy as np

MAX_RANK = 4


class ShapeError(ValueError):
    """Raised when an operand's shape violates an operation's contract."""


class FileFormatError(ValueError):
    """Raised for malformed tensor/weight/clip files."""


def _as_array(data):
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim:
        # ascontiguousarray would promote 0-d scalars to shape (1,)
        arr = np.ascontiguousarray(arr)
    if arr.ndim > MAX_RANK:
        raise ShapeError(f"rank {arr.ndim} exceeds the supported maximum of {MAX_RANK}")
    if any(s < 1 for s in arr.shape):
        raise ShapeError(f"all extents must be >= 1, got shape {arr.shape}")
    return arr


class Tensor:
    """A float64 array plus an optional gradient record.

    ``data`` must be treated as immutable once the tensor participates in a
    computation; the backward closures capture it by reference.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = _as_array(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @classmethod
    def _from_op(cls, data, parents, backward):
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = parents
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self):
        return self.data.shape

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def backward(self):
        """Accumulate d(self)/d(leaf) into ``grad`` of every recorded input."""
        if self.data.shape != ():
            raise ShapeError("backward() requires a scalar output")
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones(())
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def _accum(self, g):
        if self.grad is None:
            self.grad = np.array(g)
        else:
            self.grad += g

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, s):
        return scale(self, s)

    def __rmul__(self, s):
        return scale(self, s)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _check_same_shape(opname, a, b):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{opname}: shapes {a.data.shape} and {b.data.shape} differ")


def add(a, b):
    _check_same_shape("add", a, b)

    def backward(g):
        if a.requires_grad:
            a._accum(g)
        if b.requires_grad:
            b._accum(g)

    return Tensor._from_op(a.data + b.data, (a, b), backward)


def sub(a, b):
    _check_same_shape("sub", a, b)

    def backward(g):
        if a.requires_grad:
            a._accum(g)
        if b.requires_grad:
            b._accum(-g)

    return Tensor._from_op(a.data - b.data, (a, b), backward)


def scale(a, s):
    s = float(s)

    def backward(g):
        if a.requires_grad:
            a._accum(g * s)

    return Tensor._from_op(a.data * s, (a,), backward)


def relu(a):
    # np.maximum (unlike a > 0 select) propagates NaN, so corrupted
    # activations surface in the loss instead of being zeroed away
    mask = a.data > 0.0

    def backward(g):
        if a.requires_grad:
            a._accum(g * mask)

    return Tensor._from_op(np.maximum(a.data, 0.0), (a,), backward)


def softmax(a, axis=-1, scale=1.0):
    """Stable softmax along ``axis`` of ``a.data * scale``.

    ``scale`` is the caller-supplied temperature factor (e.g. 1/sqrt(C) for
    similarity scores); scores are shifted by their max before
    exponentiation.
    """
    s = a.data * scale
    s = s - s.max(axis=axis, keepdims=True)
    e = np.exp(s)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        if a.requires_grad:
            dot = (g * y).sum(axis=axis, keepdims=True)
            a._accum(scale * y * (g - dot))

    return Tensor._from_op(y, (a,), backward)


def cross_entropy(logits, labels, ignore_index=-1):
    """Mean negative log-likelihood over non-ignored pixels.

    ``logits`` is (K, H, W); ``labels`` is an integer (H, W) map with values
    in [0, K) or equal to ``ignore_index``. When every pixel is ignored the
    loss is defined as 0 and a RuntimeWarning is emitted.
    """
    if logits.data.ndim != 3:
        raise ShapeError(f"cross_entropy: logits must be (K, H, W), got {logits.data.shape}")
    k = logits.data.shape[0]
    labels = np.asarray(labels)
    if labels.shape != logits.data.shape[1:]:
        raise ShapeError(
            f"cross_entropy: label map {labels.shape} does not match logits plane "
            f"{logits.data.shape[1:]}"
        )
    valid = labels != ignore_index
    if not ((labels[valid] >= 0) & (labels[valid] < k)).all():
        raise ValueError(f"cross_entropy: labels outside [0, {k}) and not ignore_index")
    count = int(valid.sum())
    if count == 0:
        warnings.warn("cross_entropy: every pixel is ignored; loss defined as 0",
                      RuntimeWarning, stacklevel=2)
        return Tensor(0.0)

    z = logits.data - logits.data.max(axis=0)
    lse = np.log(np.exp(z).sum(axis=0))
    safe_labels = np.where(valid, labels, 0)
    picked = np.take_along_axis(z, safe_labels[None], axis=0)[0]
    loss = ((lse - picked) * valid).sum() / count

    def backward(g):
        if logits.requires_grad:
            p = np.exp(z - lse)
            onehot = np.zeros_like(p)
            np.put_along_axis(onehot, safe_labels[None], 1.0, axis=0)
            gl = (p - onehot) * (valid / count) * g
            logits._accum(gl)

    return Tensor._from_op(np.asarray(loss), (logits,), backward)


def mse(a, b):
    """Mean squared elementwise difference."""
    _check_same_shape("mse", a, b)
    diff = a.data - b.data
    n = diff.size

    def backward(g):
        if a.requires_grad:
            a._accum((2.0 / n) * diff * g)
        if b.requires_grad:
            b._accum((-2.0 / n) * diff * g)

    return Tensor._from_op(np.asarray((diff * diff).sum() / n), (a, b), backward)


def kl_logits(student_logits, teacher_logits):
    """Mean per-pixel KL(teacher || student) of class distributions.

    Both arguments are (K, H, W) logits; only the student side receives
    gradients. This is the distillation-style alternative to the feature
    MSE term.
    """
    _check_same_shape("kl_logits", student_logits, teacher_logits)

    def logsoftmax(arr):
        z = arr - arr.max(axis=0)
        return z - np.log(np.exp(z).sum(axis=0))

    log_ps = logsoftmax(student_logits.data)
    log_pt = logsoftmax(teacher_logits.data)
    pt = np.exp(log_pt)
    npix = student_logits.data.shape[1] * student_logits.data.shape[2]
    loss = (pt * (log_pt - log_ps)).sum() / npix

    def backward(g):
        if student_logits.requires_grad:
            ps = np.exp(log_ps)
            student_logits._accum((ps - pt) / npix * g)

    return Tensor._from_op(np.asarray(loss), (student_logits,), backward)


def grad_check(f, inputs, eps=1e-3):
    """Compare recorded gradients of ``f`` against central differences.

    ``f`` maps a list of tensors to a scalar tensor and must be re-evaluable
    at perturbed inputs. Returns the maximum relative error with denominator
    max(|analytic|, |numeric|, 1e-8).
    """
    if not 1e-6 <= eps <= 1e-2:
        raise ValueError(f"eps {eps} outside [1e-6, 1e-2]")
    leaves = [Tensor(t.data.copy(), requires_grad=True) for t in inputs]
    out = f(*leaves)
    if not np.isfinite(out.data):
        raise ValueError("grad_check: forward value is not finite")
    out.backward()
    analytic = [np.zeros_like(l.data) if l.grad is None else l.grad for l in leaves]

    def eval_at(arrays):
        val = f(*[Tensor(a) for a in arrays]).data
        if not np.isfinite(val):
            raise ValueError("grad_check: perturbed forward value is not finite")
        return float(val)

    base = [l.data.copy() for l in leaves]
    worst = 0.0
    for idx, arr in enumerate(base):
        flat = arr.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            up = eval_at(base)
            flat[j] = orig - eps
            down = eval_at(base)
            flat[j] = orig
            numeric = (up - down) / (2.0 * eps)
            a = analytic[idx].reshape(-1)[j]
            denom = max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, abs(a - numeric) / denom)
    return worst


# Golden-file format: little-endian, magic TNSR, u8 rank, u32 extents,
# f64 payload in row-major order.

_TNSR_MAGIC = b"TNSR"


def save_tensor(path, arr):
    arr = _as_array(arr)
    with open(path, "wb") as fh:
        fh.write(_TNSR_MAGIC)
        fh.write(struct.pack("<B", arr.ndim))
        for s in arr.shape:
            fh.write(struct.pack("<I", s))
        fh.write(arr.astype("<f8").tobytes())


def load_tensor(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _TNSR_MAGIC:
        raise FileFormatError(f"{path}: bad magic {blob[:4]!r}, expected {_TNSR_MAGIC!r}")
    if len(blob) < 5:
        raise FileFormatError(f"{path}: truncated header at byte {len(blob)}")
    rank = blob[4]
    if rank > MAX_RANK:
        raise FileFormatError(f"{path}: rank {rank} exceeds maximum {MAX_RANK}")
    off = 5
    shape = []
    for _ in range(rank):
        if off + 4 > len(blob):
            raise FileFormatError(f"{path}: truncated extents at byte {off}")
        shape.append(struct.unpack_from("<I", blob, off)[0])
        off += 4
    n = int(np.prod(shape)) if shape else 1
    if off + 8 * n != len(blob):
        raise FileFormatError(
            f"{path}: payload length {len(blob) - off} does not match shape {tuple(shape)}"
        )
    data = np.frombuffer(blob, dtype="<f8", count=n, offset=off)
    return data.reshape(shape).astype(np.float64)


def save_labels(path, labels):
    """Store an integer label map using the tensor golden-file format.

    Values are carried in the f64 payload; they must be integral.
    """
    labels = np.asarray(labels)
    if not np.all(labels == np.round(labels)):
        raise ValueError("label map contains non-integral values")
    save_tensor(path, labels.astype(np.float64))


def load_labels(path):
    arr = load_tensor(path)
    if not np.all(arr == np.round(arr)):
        raise FileFormatError(f"{path}: label payload contains non-integral values")
    return arr.astype(np.int64)
