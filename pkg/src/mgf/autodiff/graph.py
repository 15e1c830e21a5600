"""Replayable compute graphs over named leaves.

``ComputeGraph`` wraps a function of named tensors.  Calling ``forward``
binds the leaves and records the define-by-run graph; ``backward`` then
differentiates the recorded scalar output.  The graph is rebuilt on every
``forward`` call, which is what keeps replays bit-for-bit deterministic.
"""

from __future__ import annotations

from typing import Callable, Iterable, Mapping

import numpy as np

from mgf.autodiff.tensor import Tensor, grad, topological_nodes
from mgf.errors import UsageError


class ComputeGraph:
    def __init__(self, fn: Callable[..., Tensor], leaves: Iterable[str]):
        self.fn = fn
        self.leaf_names = tuple(leaves)
        self._bound: dict[str, Tensor] | None = None
        self._output: Tensor | None = None

    def forward(self, bindings: Mapping[str, object]) -> Tensor:
        missing = [n for n in self.leaf_names if n not in bindings]
        if missing:
            raise UsageError(f"unbound leaves: {', '.join(missing)}")
        self._bound = {n: Tensor(np.array(bindings[n], dtype=np.float64), requires_grad=True, name=n) for n in self.leaf_names}
        self._output = self.fn(**self._bound)
        return self._output

    @property
    def output(self) -> Tensor:
        if self._output is None:
            raise UsageError("forward has not been run on this graph")
        return self._output

    @property
    def nodes(self) -> list[Tensor]:
        return topological_nodes(self.output)

    def backward(self, wrt: Iterable[str] | None = None) -> dict[str, np.ndarray]:
        out = self.output
        if out.size != 1:
            raise UsageError(f"backward needs a scalar output, got shape {out.shape}")
        names = tuple(wrt) if wrt is not None else self.leaf_names
        grads = grad(out, [self._bound[n] for n in names])
        return {n: g.data for n, g in zip(names, grads)}

    def input_gradient_graph(self, input_leaf: str) -> ComputeGraph:
        """A graph evaluating d(output)/d(input_leaf), itself differentiable."""
        if input_leaf not in self.leaf_names:
            raise UsageError(f"unknown leaf {input_leaf!r}")
        fn = self.fn

        def gradient_fn(**leaves: Tensor) -> Tensor:
            out = fn(**leaves)
            if out.size != 1:
                out = out.sum()
            return grad(out, [leaves[input_leaf]], create_graph=True)[0]

        return ComputeGraph(gradient_fn, self.leaf_names)
