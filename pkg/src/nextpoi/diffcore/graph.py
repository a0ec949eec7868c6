"""Named-parameter graphs: forward/backward over a traced function, and a
central-difference gradient oracle."""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .tensor import DTYPE, Tensor, ShapeError, no_grad, topo_order


class Graph:
    """A differentiable function of named parameters and named inputs.

    ``fn(params, bindings)`` receives dicts of :class:`Tensor` and returns
    either a tensor or a dict of tensors.  The node list is recorded on each
    :func:`forward` call in topological order.
    """

    def __init__(self, fn: Callable, params: Mapping[str, np.ndarray], output: str | None = None):
        self.fn = fn
        self.params = {k: np.asarray(v, dtype=DTYPE) for k, v in params.items()}
        self.output = output
        self.nodes: list[Tensor] = []
        self.outputs: dict[str, Tensor] = {}
        self._leaves: dict[str, Tensor] = {}

    def _primary(self) -> Tensor:
        if self.output is not None:
            return self.outputs[self.output]
        if len(self.outputs) != 1:
            raise ValueError(f"graph has outputs {sorted(self.outputs)}; set Graph.output")
        return next(iter(self.outputs.values()))


def forward(graph: Graph, bindings: Mapping[str, np.ndarray] | None = None) -> dict[str, np.ndarray]:
    leaves = {k: Tensor(v, requires_grad=True, name=k) for k, v in graph.params.items()}
    inputs = {k: v if isinstance(v, Tensor) else Tensor(v) for k, v in (bindings or {}).items()}
    out = graph.fn(leaves, inputs)
    if isinstance(out, Tensor):
        out = {"out": out}
    graph.outputs = {k: v if isinstance(v, Tensor) else Tensor(v) for k, v in out.items()}
    graph._leaves = leaves
    seen: dict[int, Tensor] = {}
    for t in graph.outputs.values():
        for node in topo_order(t):
            seen.setdefault(id(node), node)
    graph.nodes = list(seen.values())
    return {k: v.data for k, v in graph.outputs.items()}


def backward(graph: Graph, output_grad: np.ndarray | None = None) -> dict[str, np.ndarray]:
    """Gradients of the primary output w.r.t. every parameter.

    Parameters the output does not depend on get zero tensors.
    """
    if not graph.outputs:
        raise RuntimeError("forward must be evaluated before backward")
    for leaf in graph._leaves.values():
        leaf.grad = None
    graph._primary().backward(output_grad)
    return {
        k: (leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data))
        for k, leaf in graph._leaves.items()
    }


def _scalars(graph: Graph, bindings, names) -> list[float]:
    with no_grad():
        forward(graph, bindings)
    outs = []
    for name in names:
        data = graph.outputs[name].data
        if data.size != 1:
            raise ShapeError(f"output {name!r} must be scalar, got shape {data.shape}")
        outs.append(float(data.reshape(-1)[0]))
    return outs


def numeric_gradients(
    graph: Graph,
    h: float = 1e-5,
    bindings: Mapping[str, np.ndarray] | None = None,
    skip: Callable[[str], bool] | None = None,
    outputs: list[str] | None = None,
) -> dict[str, dict[str, np.ndarray]]:
    """Central-difference gradients of scalar outputs w.r.t. every parameter
    entry, ``{output: {param: array}}``.  One sweep serves all outputs."""
    if h <= 0:
        raise ValueError("h must be positive")
    if outputs is None:
        forward(graph, bindings)
        outputs = [graph.output] if graph.output is not None else list(graph.outputs)
    result = {o: {} for o in outputs}
    for name, value in graph.params.items():
        if skip is not None and skip(name):
            continue
        flat = value.reshape(-1)
        num = np.zeros((len(outputs), flat.size))
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = _scalars(graph, bindings, outputs)
            flat[i] = orig - h
            fm = _scalars(graph, bindings, outputs)
            flat[i] = orig
            num[:, i] = (np.array(fp) - np.array(fm)) / (2 * h)
        for k, o in enumerate(outputs):
            result[o][name] = num[k].reshape(value.shape)
    return result


def relative_error(analytic: Mapping[str, np.ndarray], numeric: Mapping[str, np.ndarray]) -> float:
    """Max over shared entries of ``|a - n| / max(|a|, |n|, 1e-8)``."""
    worst = 0.0
    for name, num in numeric.items():
        ana = np.asarray(analytic[name])
        err = np.abs(ana - num) / np.maximum(np.maximum(np.abs(ana), np.abs(num)), 1e-8)
        if err.size:
            worst = max(worst, float(err.max()))
    return worst


def finite_diff_check(
    graph: Graph,
    point: Mapping[str, np.ndarray] | None = None,
    h: float = 1e-5,
    bindings: Mapping[str, np.ndarray] | None = None,
    skip: Callable[[str], bool] | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Every entry of every parameter is perturbed by ``±h``.  The relative
    error uses ``max(|analytic|, |numeric|, 1e-8)`` as denominator, so a
    parameter the output never touches contributes zero.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    if point is not None:
        for k, v in point.items():
            graph.params[k] = np.array(v, dtype=DTYPE)
    forward(graph, bindings)
    primary = graph._primary()
    if primary.data.size != 1:
        raise ShapeError(f"finite_diff_check needs a scalar output, got shape {primary.shape}")
    name = next(k for k, v in graph.outputs.items() if v is primary)
    analytic = backward(graph)
    numeric = numeric_gradients(graph, h, bindings, skip, [name])[name]
    return relative_error(analytic, numeric)
