"""稠密数值内核：反向模式自动微分与有限差分梯度检验

所有张量数据均为行主序 numpy 数组。分析与测试路径固定使用 float64，
训练循环允许 float32。每个原语记录父节点和一个反向闭包，
GradTape 按拓扑逆序回放闭包并累加伴随量。
"""
from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Dict, Iterable, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from numpy.typing import ArrayLike, NDArray

from src.utils.error_handling import NumericException, ValidationException

DEFAULT_DTYPE = np.float64

BackwardFn = Callable[[NDArray], None]


class Tensor:
    """带梯度的稠密张量"""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        *,
        dtype: Optional[np.dtype] = None,
        _parents: Tuple["Tensor", ...] = (),
        _op: str = "leaf",
    ):
        array = np.asarray(data, dtype=dtype)
        if array.dtype.kind != "f":
            array = array.astype(DEFAULT_DTYPE)
        self.data: NDArray = array
        self.grad: Optional[NDArray] = None
        self.requires_grad = requires_grad
        self.op = _op
        self._parents = _parents
        self._backward: Optional[BackwardFn] = None

    # ---- 基本属性 ----
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        """单元素张量的 Python 标量值"""
        if self.data.size != 1:
            raise ValidationException(
                f"item() needs a single-element tensor, got shape {self.shape}", component="autograd",
            )
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> NDArray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    # ---- 梯度 ----
    def _accumulate(self, grad: NDArray) -> None:
        if self.grad is None:
            self.grad = np.array(grad, dtype=self.data.dtype, copy=True)
        else:
            self.grad += grad

    def backward(self, seed: Optional[ArrayLike] = None) -> "GradTape":
        tape = GradTape(self)
        tape.backward(seed)
        return tape

    # ---- 运算符 ----
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ValidationException("division is only defined by scalars", component="autograd")
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


class GradTape:
    """记录前向原语的拓扑序，并按逆序执行反向传播"""

    def __init__(self, output: Tensor):
        self.output = output
        self.nodes: List[Tensor] = self._topological_order(output)

    @staticmethod
    def _topological_order(root: Tensor) -> List[Tensor]:
        # 迭代式后序DFS：每个节点排在所有父节点之后
        order: List[Tensor] = []
        visited = set()
        stack: List[Tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        return order

    def adjoint(self, tensor: Tensor) -> Optional[NDArray]:
        return tensor.grad

    def backward(self, seed: Optional[ArrayLike] = None) -> None:
        if seed is None:
            if self.output.size != 1:
                raise ValidationException(
                    "backward without a seed requires a scalar output",
                    component="autograd",
                    details={"shape": self.output.shape},
                )
            seed = np.ones_like(self.output.data)
        seed = np.broadcast_to(np.asarray(seed, dtype=self.output.dtype), self.output.shape)
        self.output._accumulate(seed)
        for node in reversed(self.nodes):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


class _GradState:
    enabled = True


_grad_state = _GradState()


@contextmanager
def no_grad() -> Iterator[None]:
    """推理与评测时关闭计算图记录"""
    previous = _grad_state.enabled
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = previous


# ---- 构造工具 ----

def as_tensor(value, dtype: Optional[np.dtype] = None) -> Tensor:
    """把数组或标量包装成常量张量"""
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype if dtype is not None else None))


def _result(data: NDArray, parents: Sequence[Tensor], op: str, backward: BackwardFn) -> Tensor:
    if not (_grad_state.enabled and any(p.requires_grad for p in parents)):
        # 不记录父节点，前向中间结果可以随时释放
        return Tensor(data, _op=op)
    out = Tensor(data, _parents=tuple(parents), _op=op)
    out.requires_grad = True
    out._backward = backward
    return out


def _coerce_pair(a, b) -> Tuple[Tensor, Tensor]:
    """标量与数组常量沿用另一操作数的精度"""
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, as_tensor(b, a.dtype)
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return as_tensor(a, b.dtype), b
    return as_tensor(a), as_tensor(b)


def _unbroadcast(grad: NDArray, shape: Tuple[int, ...]) -> NDArray:
    """把广播后的梯度规约回原始形状"""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


# ---- 逐元素与线性代数原语 ----

def add(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)

    def backward(g: NDArray) -> None:
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _result(a.data + b.data, (a, b), "add", backward)


def sub(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)

    def backward(g: NDArray) -> None:
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _result(a.data - b.data, (a, b), "sub", backward)


def mul(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)

    def backward(g: NDArray) -> None:
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), "mul", backward)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValidationException("matmul operands need at least two axes", component="autograd")

    def backward(g: NDArray) -> None:
        if a.requires_grad:
            a._accumulate(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _result(a.data @ b.data, (a, b), "matmul", backward)


def tensor_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def backward(g: NDArray) -> None:
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x._accumulate(np.broadcast_to(g, x.shape))

    return _result(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), "sum", backward)


def tensor_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([x.shape[a] for a in axes]))
    return tensor_sum(x, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    def backward(g: NDArray) -> None:
        x._accumulate(g.reshape(x.shape))

    return _result(x.data.reshape(shape), (x,), "reshape", backward)


def transpose(x: Tensor, axes: Tuple[int, ...]) -> Tensor:
    inverse = tuple(np.argsort(axes))

    def backward(g: NDArray) -> None:
        x._accumulate(np.transpose(g, inverse))

    return _result(np.transpose(x.data, axes), (x,), "transpose", backward)


def take_rows(weight: Tensor, ids: ArrayLike) -> Tensor:
    """按行索引取嵌入"""
    index = np.asarray(ids, dtype=np.int64)

    def backward(g: NDArray) -> None:
        grad = np.zeros_like(weight.data)
        np.add.at(grad, index, g)
        weight._accumulate(grad)

    return _result(weight.data[index], (weight,), "take_rows", backward)


def repeat_axis(x: Tensor, repeats: int, axis: int) -> Tensor:
    """沿某一轴把每个切片重复若干次（GQA中键值头的展开）"""
    axis = axis % x.ndim

    def backward(g: NDArray) -> None:
        shape = x.shape[:axis] + (x.shape[axis], repeats) + x.shape[axis + 1:]
        x._accumulate(g.reshape(shape).sum(axis=axis + 1))

    return _result(np.repeat(x.data, repeats, axis=axis), (x,), "repeat", backward)


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)

    def backward(g: NDArray) -> None:
        x._accumulate(g * y)

    return _result(y, (x,), "exp", backward)


def silu(x: Tensor) -> Tensor:
    s = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    y = x.data * s

    def backward(g: NDArray) -> None:
        x._accumulate(g * (s + x.data * s * (1.0 - s)))

    return _result(y, (x,), "silu", backward)


def rotate_pairs(x: Tensor, cos: NDArray, sin: NDArray) -> Tensor:
    """相邻维度对 (2i, 2i+1) 的平面旋转；cos/sin 可广播到 x[..., ::2]"""
    x1 = x.data[..., 0::2]
    x2 = x.data[..., 1::2]
    y = np.empty_like(x.data)
    y[..., 0::2] = x1 * cos - x2 * sin
    y[..., 1::2] = x1 * sin + x2 * cos

    def backward(g: NDArray) -> None:
        g1 = g[..., 0::2]
        g2 = g[..., 1::2]
        grad = np.empty_like(g)
        grad[..., 0::2] = g1 * cos + g2 * sin
        grad[..., 1::2] = -g1 * sin + g2 * cos
        x._accumulate(grad)

    return _result(y, (x,), "rotate_pairs", backward)


# ---- 融合算子 ----

def softmax_stable(logits, mask: Optional[ArrayLike] = None) -> Tensor:
    """最后一维上的数值稳定 softmax；mask 为 False 的位置输出精确的 0"""
    x = as_tensor(logits)
    if mask is None:
        allowed = np.ones(x.shape, dtype=bool)
    else:
        allowed = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    if not np.all(allowed.any(axis=-1)):
        raise ValidationException("empty attention row", component="autograd")

    shifted = np.where(allowed, x.data, -np.inf)
    row_max = shifted.max(axis=-1, keepdims=True)
    e = np.where(allowed, np.exp(shifted - row_max), 0.0)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g: NDArray) -> None:
        x._accumulate(y * (g - np.sum(g * y, axis=-1, keepdims=True)))

    return _result(y, (x,), "softmax", backward)


def layer_norm(x, gain, eps: float = 1e-5) -> Tensor:
    """最后一维上的层归一化：gain ⊙ (x − mean) / sqrt(var + eps)，无偏置，总体方差"""
    x, gain = as_tensor(x), as_tensor(gain)
    if x.shape[-1] == 0:
        raise ValidationException("layer_norm needs a non-empty last axis", component="autograd")
    if eps < 0:
        raise ValidationException("layer_norm eps must be non-negative", component="autograd")

    centered = x.data - x.data.mean(axis=-1, keepdims=True)
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    denom = np.sqrt(var + eps)
    # 方差为零且 eps 为零时输出 0
    inv = np.divide(1.0, denom, out=np.zeros_like(denom), where=denom > 0)
    x_hat = centered * inv
    y = gain.data * x_hat

    def backward(g: NDArray) -> None:
        if gain.requires_grad:
            gain._accumulate(_unbroadcast(g * x_hat, gain.shape))
        if x.requires_grad:
            d_hat = g * gain.data
            x._accumulate(inv * (
                d_hat
                - d_hat.mean(axis=-1, keepdims=True)
                - x_hat * np.mean(d_hat * x_hat, axis=-1, keepdims=True)
            ))

    return _result(y, (x, gain), "layer_norm", backward)


def rms_norm(x, gain, eps: float = 1e-6) -> Tensor:
    """最后一维上的 RMS 归一化"""
    x, gain = as_tensor(x), as_tensor(gain)
    r = 1.0 / np.sqrt(np.mean(x.data * x.data, axis=-1, keepdims=True) + eps)
    x_hat = x.data * r
    y = gain.data * x_hat

    def backward(g: NDArray) -> None:
        if gain.requires_grad:
            gain._accumulate(_unbroadcast(g * x_hat, gain.shape))
        if x.requires_grad:
            d_hat = g * gain.data
            x._accumulate(r * (d_hat - x_hat * np.mean(d_hat * x_hat, axis=-1, keepdims=True)))

    return _result(y, (x, gain), "rms_norm", backward)


def cross_entropy_loss(logits, targets: ArrayLike) -> Tensor:
    """[L, V] logits 与目标索引的平均负对数似然（融合 log-softmax）"""
    x = as_tensor(logits)
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    if x.ndim != 2 or x.shape[0] != t.shape[0]:
        raise ValidationException(
            "cross_entropy expects logits [L, V] and L targets",
            component="autograd",
            details={"logits": x.shape, "targets": t.shape},
        )
    if t.size and (t.min() < 0 or t.max() >= x.shape[1]):
        raise ValidationException("target index out of vocabulary", component="autograd")

    z = x.data - x.data.max(axis=-1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    log_probs = z - log_norm
    rows = np.arange(t.shape[0])
    n = max(t.shape[0], 1)
    loss = -log_probs[rows, t].sum() / n

    def backward(g: NDArray) -> None:
        grad = np.exp(log_probs)
        grad[rows, t] -= 1.0
        x._accumulate(grad * (float(g) / n))

    return _result(np.asarray(loss, dtype=x.dtype), (x,), "cross_entropy", backward)


# ---- 有限差分梯度检验 ----

def _relative_error(analytic: NDArray, numeric: NDArray) -> float:
    if analytic.size == 0:
        return 0.0
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / scale))


def _scalar_value(out: Tensor) -> float:
    if out.size != 1:
        raise ValidationException("grad_check needs a scalar-valued function", component="autograd")
    value = float(out.data.reshape(-1)[0])
    if not math.isfinite(value):
        raise NumericException("function value is not finite", component="autograd",
                               details={"value": value})
    return value


def grad_check(f: Callable[[Tensor], Tensor], x: ArrayLike, step: float = 1e-5) -> float:
    """中心差分梯度检验，返回各坐标最大相对误差"""
    if not step > 0:
        raise ValidationException("grad_check step must be positive", component="autograd")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64, copy=True)

    leaf = Tensor(base.copy(), requires_grad=True)
    out = f(leaf)
    _scalar_value(out)
    out.backward()
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(base)

    numeric = np.zeros_like(base)
    with no_grad():
        for index in np.ndindex(base.shape):
            plus = base.copy()
            plus[index] += step
            minus = base.copy()
            minus[index] -= step
            numeric[index] = (_scalar_value(f(Tensor(plus))) - _scalar_value(f(Tensor(minus)))) / (2 * step)

    return _relative_error(analytic, numeric)


def grad_check_params(
    loss_fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    step: float = 1e-5,
    max_coords: Optional[int] = None,
    seed: int = 0,
) -> Dict[str, float]:
    """对每个命名参数张量做中心差分检验；max_coords 限制每个张量抽查的坐标数"""
    for tensor in params.values():
        tensor.zero_grad()
    loss = loss_fn()
    _scalar_value(loss)
    loss.backward()

    rng = np.random.default_rng(seed)
    errors: Dict[str, float] = {}
    for name, tensor in params.items():
        analytic_full = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
        coords: Iterable[int]
        if max_coords is not None and tensor.size > max_coords:
            coords = rng.choice(tensor.size, size=max_coords, replace=False)
        else:
            coords = range(tensor.size)
        coords = [int(i) for i in coords]

        analytic = analytic_full.reshape(-1)[coords]
        numeric = np.zeros(len(coords), dtype=np.float64)
        with no_grad():
            for k, i in enumerate(coords):
                index = np.unravel_index(i, tensor.shape)
                original = tensor.data[index]
                tensor.data[index] = original + step
                f_plus = _scalar_value(loss_fn())
                tensor.data[index] = original - step
                f_minus = _scalar_value(loss_fn())
                tensor.data[index] = original
                numeric[k] = (f_plus - f_minus) / (2 * step)
        errors[name] = _relative_error(np.asarray(analytic, dtype=np.float64), numeric)
    return errors
