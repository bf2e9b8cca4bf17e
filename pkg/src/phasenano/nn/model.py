"""Graph executor: seeded initialization, forward, backward, weight I/O.

Activations are checked for non-finite values after every layer; a failure
aborts with the offending layer index rather than silently training on NaNs.
"""

from __future__ import annotations

import math

import numpy as np

from . import layers as L
from .graph import GraphError, ModelGraph

__all__ = ["Model", "NumericsError"]


class NumericsError(FloatingPointError):
    """A non-finite activation or gradient appeared; carries the layer index."""


def _kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Model:
    """Executable instance of a ModelGraph holding its parameters.

    Single-threaded per instance; create one instance per concurrent worker.
    """

    def __init__(self, graph: ModelGraph, seed: int = 0, dtype=np.float32,
                 check_finite: bool = True):
        self.graph = graph
        self.dtype = np.dtype(dtype)
        self.check_finite = check_finite
        self._caches: list[np.ndarray] | None = None
        self._input: np.ndarray | None = None
        self._col_caches: dict[int, dict] = {}
        if graph.is_cascade:
            self.nodes = [Model(g, seed=seed + 101 * i, dtype=dtype,
                                check_finite=check_finite)
                          for i, g in enumerate(graph.nodes)]
            self.params: dict[int, list[np.ndarray]] = {}
        else:
            self.nodes = []
            rng = np.random.default_rng(seed)
            self.params = {}
            for idx, spec in enumerate(graph.layers):
                if not spec.parametric:
                    continue
                fan_in = spec.in_channels * spec.kernel**2
                if spec.kind == "conv":
                    wshape = (spec.out_channels, spec.in_channels, spec.kernel, spec.kernel)
                else:
                    wshape = (spec.in_channels, spec.out_channels, spec.kernel, spec.kernel)
                w = _kaiming_uniform(rng, wshape, fan_in, self.dtype)
                b = np.zeros(spec.out_channels, dtype=self.dtype)
                self.params[idx] = [w, b]

    # --- parameter access ---------------------------------------------------

    def parameter_arrays(self) -> list[np.ndarray]:
        if self.nodes:
            out = []
            for node in self.nodes:
                out.extend(node.parameter_arrays())
            return out
        out = []
        for idx in sorted(self.params):
            out.extend(self.params[idx])
        return out

    def get_weights(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.parameter_arrays()])

    def set_weights(self, flat: np.ndarray) -> None:
        arrays = self.parameter_arrays()
        total = sum(a.size for a in arrays)
        if flat.size != total:
            raise GraphError(f"weight vector has {flat.size} values, graph needs {total}")
        pos = 0
        for a in arrays:
            a[...] = flat[pos : pos + a.size].reshape(a.shape).astype(self.dtype)
            pos += a.size

    # --- execution ------------------------------------------------------------

    def _guard(self, arr: np.ndarray, idx: int, stage: str) -> None:
        # a single reduction is enough: any inf or nan poisons the sum
        if self.check_finite and not math.isfinite(float(arr.sum())):
            raise NumericsError(
                f"non-finite values in {stage} of layer {idx} "
                f"({self.graph.layers[idx].kind if idx >= 0 else 'input'})"
            )

    def forward(self, x: np.ndarray, record: bool = False) -> np.ndarray:
        x = np.ascontiguousarray(x, dtype=self.dtype)
        if self.nodes:
            for node in self.nodes:
                x = node.forward(x, record=record)
            return x
        if x.ndim != 4 or x.shape[1] != self.graph.in_channels:
            raise GraphError(
                f"input must be (N, {self.graph.in_channels}, H, W), got {x.shape}"
            )
        self._guard(x, -1, "input")
        outputs: list[np.ndarray] = []
        col_caches: dict[int, dict] = {}
        current = x
        for idx, spec in enumerate(self.graph.layers):
            if spec.kind == "conv":
                w, b = self.params[idx]
                cache = {} if record else None
                current = L.conv2d_forward(current, w, b, spec.stride, spec.padding,
                                           cache=cache)
                if record:
                    col_caches[idx] = cache
            elif spec.kind == "transposed_conv":
                w, b = self.params[idx]
                current = L.transposed_conv2d_forward(current, w, b, spec.stride,
                                                      spec.padding)
            elif spec.kind == "activation":
                if spec.activation == "leaky_relu":
                    current = L.leaky_relu_forward(current, spec.slope)
                elif spec.activation == "relu":
                    current = L.leaky_relu_forward(current, 0.0)
            elif spec.kind == "pool":
                current = L.maxpool2_forward(current)
            elif spec.kind == "upsample":
                current = L.upsample2_forward(current)
            elif spec.kind == "concat_skip":
                current = np.concatenate([current, outputs[spec.skip_from]], axis=1)
            self._guard(current, idx, "output")
            outputs.append(current)
        if record:
            self._caches = outputs
            self._input = x
            self._col_caches = col_caches
        return current

    def backward(self, dout: np.ndarray) -> dict[int, list[np.ndarray]]:
        """Gradients for every parameter after a recorded forward pass."""
        if self.nodes:
            raise GraphError("backward through a cascade runs per node; train nodes "
                             "individually")
        if self._caches is None:
            raise GraphError("backward called before a recorded forward pass")
        outputs = self._caches
        specs = self.graph.layers
        grads: dict[int, list[np.ndarray]] = {}
        pending: dict[int, np.ndarray] = {}  # extra gradient joining at layer outputs
        d = np.ascontiguousarray(dout, dtype=self.dtype)
        for idx in range(len(specs) - 1, -1, -1):
            if idx in pending:
                d = d + pending.pop(idx)
            spec = specs[idx]
            x_in = outputs[idx - 1] if idx > 0 else self._input
            if spec.kind == "conv":
                w, _ = self.params[idx]
                cache = self._col_caches.get(idx)
                dw, db = L.conv2d_backward_params(x_in, d, spec.kernel, spec.stride,
                                                  spec.padding, cache=cache)
                grads[idx] = [dw, db]
                d = L.conv2d_backward_input(d, w, x_in.shape[2:], spec.stride,
                                            spec.padding)
            elif spec.kind == "transposed_conv":
                w, _ = self.params[idx]
                # backward_input gathers the output-gradient patches that
                # backward_params needs, so it runs first and shares the cache
                cache: dict = {}
                d_new = L.transposed_conv2d_backward_input(d, w, spec.stride,
                                                           spec.padding, cache=cache)
                dw, db = L.transposed_conv2d_backward_params(x_in, d, spec.kernel,
                                                             spec.stride, spec.padding,
                                                             cache=cache)
                grads[idx] = [dw, db]
                d = d_new
            elif spec.kind == "activation":
                if spec.activation == "leaky_relu":
                    d = L.leaky_relu_backward(d, x_in, spec.slope)
                elif spec.activation == "relu":
                    d = L.leaky_relu_backward(d, x_in, 0.0)
            elif spec.kind == "pool":
                d = L.maxpool2_backward(d, x_in)
            elif spec.kind == "upsample":
                d = L.upsample2_backward(d)
            elif spec.kind == "concat_skip":
                main_c = x_in.shape[1]
                skip_d = d[:, main_c:]
                src = spec.skip_from
                pending[src] = pending.get(src, 0) + skip_d
                d = np.ascontiguousarray(d[:, :main_c])
            self._guard(d, idx, "gradient")
        self.release()
        return grads

    def release(self) -> None:
        self._caches = None
        self._input = None
        self._col_caches = {}
