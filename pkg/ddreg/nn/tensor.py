"""
Minimal reverse-mode autodiff on numpy arrays

A `Tensor` records the tensors it was computed from and a closure that pushes
its gradient to them. `Tensor.backward` walks the graph in reverse
topological order.
"""

from collections import OrderedDict
from typing import Callable, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from ddreg.errors import NonFiniteError, ShapeError

Backward = Callable[[np.ndarray], None]


class Tensor:
    """Array with an optional gradient and the recipe to back-propagate it"""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(
        self,
        data,
        parents: Sequence["Tensor"] = (),
        backward: Optional[Backward] = None,
        requires_grad: Optional[bool] = None,
        name: Optional[str] = None,
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self._parents = tuple(parents)
        self._backward = backward
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in self._parents)
        self.requires_grad = requires_grad
        self.name = name

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape})"

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    def zero_grad(self):
        self.grad = None

    def accumulate(self, grad: np.ndarray):
        """Add to the stored gradient"""
        if grad.shape != self.data.shape:
            raise ShapeError(f"Gradient shape {grad.shape} does not match tensor {self.data.shape}")
        if self.grad is None:
            self.grad = np.array(grad, dtype=np.float64)
        else:
            self.grad += grad

    def _topological_order(self) -> List["Tensor"]:
        order: List[Tensor] = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        return order

    def backward(self, upstream: Optional[np.ndarray] = None):
        """
        Accumulate gradients of ``sum(upstream * self)`` into every leaf

        `upstream` defaults to ones, which is the usual seed for a scalar.
        """
        if not self.requires_grad:
            return
        seed = np.ones_like(self.data) if upstream is None else np.asarray(upstream, dtype=np.float64)
        order = self._topological_order()
        intermediate = [node for node in order if node._backward is not None]
        # gradients of intermediate nodes only live for this pass
        for node in intermediate:
            node.grad = None
        self.accumulate(seed)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
        for node in intermediate:
            if node is not self:
                node.grad = None


def check_finite(data: np.ndarray, op: str) -> np.ndarray:
    """Raise when an operation produced NaN or infinity"""
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    return data


class ParameterStore:
    """
    Named trainable tensors in a fixed order

    Freezing marks tensors as constants for the optimizer; gradients are still
    computed so two-step finetuning can switch phases without rebuilding.
    """

    def __init__(self):
        self._tensors: "OrderedDict[str, Tensor]" = OrderedDict()
        self._frozen: set = set()

    def add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self._tensors:
            raise ShapeError(f"Parameter {name!r} already exists")
        tensor = Tensor(data, requires_grad=True, name=name)
        self._tensors[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def items(self) -> Iterable[Tuple[str, Tensor]]:
        return self._tensors.items()

    def names(self) -> List[str]:
        return list(self._tensors)

    def shapes(self) -> Dict[str, Tuple[int, ...]]:
        return {name: t.shape for name, t in self._tensors.items()}

    def freeze(self, prefixes: Sequence[str]):
        """Mark every parameter whose name starts with one of `prefixes` as frozen"""
        for name in self._tensors:
            if any(name.startswith(p) for p in prefixes):
                self._frozen.add(name)

    def unfreeze(self):
        self._frozen.clear()

    def is_trainable(self, name: str) -> bool:
        return name not in self._frozen

    def zero_grad(self):
        for tensor in self._tensors.values():
            tensor.zero_grad()

    def gradients(self) -> Dict[str, np.ndarray]:
        """Current gradients, zeros for parameters the last pass did not reach"""
        return {
            name: (t.grad if t.grad is not None else np.zeros_like(t.data))
            for name, t in self._tensors.items()
        }

    def arrays(self) -> Dict[str, np.ndarray]:
        """Copy of every parameter value"""
        return {name: t.data.copy() for name, t in self._tensors.items()}

    def load(self, arrays: Dict[str, np.ndarray]):
        """Overwrite values in place; names and shapes must already match"""
        for name, value in arrays.items():
            tensor = self._tensors[name]
            value = np.asarray(value, dtype=np.float64)
            if value.shape != tensor.shape:
                raise ShapeError(f"Parameter {name!r} expects {tensor.shape}, got {value.shape}")
            tensor.data = value.copy()

    def count(self, prefix: Optional[str] = None, trainable_only: bool = False) -> int:
        """Number of scalar parameters"""
        return sum(
            t.data.size
            for name, t in self._tensors.items()
            if (prefix is None or name.startswith(prefix))
            and (not trainable_only or self.is_trainable(name))
        )
