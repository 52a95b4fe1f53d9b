"""Network descriptions and their layer-by-layer evaluation.

A network is an ordered list of layers read from a YAML (or dict)
description. Every activation is an ``(N, C, V)`` array; ungrouped maps
carry ``N = 1``. The current hierarchy level is tracked implicitly: ``pool``
moves one level coarser, ``unpool`` one level finer.

Example description::

    name: tiny
    task: classification
    in_channels: 0
    layers:
      - {type: duplicate}
      - {type: gconv, out: 8, patch_input: true}
      - {type: batchnorm}
      - {type: relu}
      - {type: reduce, mode: max}
      - {type: global_pool_dense, out: 3}
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np
import yaml

from . import convops as ops
from .hierarchy import Hierarchy

LAYER_TYPES = (
    "duplicate", "gconv", "gconv1x1", "batchnorm", "relu", "residual",
    "pool", "unpool", "reduce", "global_pool_dense",
)
TASKS = ("classification", "segmentation", "regression")
BN_STATISTICS = ("running", "sample")


class NetworkError(ValueError):
    pass


# ---------------------------------------------------------------------------
# inputs


@dataclass(eq=False)
class MeshInput:
    """Everything a network needs to run on one mesh."""

    N: int
    patches: list[ops.PatchData]
    pools: list[ops.PoolMap]
    features: np.ndarray  # (C_in, V_0)

    @property
    def n_levels(self) -> int:
        return len(self.patches)

    @property
    def n_vertices(self) -> int:
        return self.patches[0].n_vertices

    @classmethod
    def from_hierarchy(cls, h: Hierarchy, features=None) -> "MeshInput":
        patches = [ops.build_patches(lv.mesh, lv.atlas) for lv in h.levels]
        pools = [
            ops.PoolMap(h.parent_of[k], h.group_offset[k], h.levels[k + 1].n_vertices)
            for k in range(len(h.parent_of))
        ]
        V = h.levels[0].n_vertices
        f = np.zeros((0, V)) if features is None else np.asarray(features, dtype=np.float64)
        if f.ndim != 2 or f.shape[1] != V:
            raise NetworkError(f"input features must be (C, {V}), got {f.shape}")
        return cls(h.N, patches, pools, f)


# ---------------------------------------------------------------------------
# description


@dataclass
class NetworkDescription:
    name: str
    layers: list[dict]
    task: str = "classification"
    in_channels: int = 0
    N: int | None = None
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkDescription":
        d = copy.deepcopy(dict(d))
        if "layers" not in d or not isinstance(d["layers"], list) or not d["layers"]:
            raise NetworkError("network description needs a non-empty 'layers' list")
        known = {"name", "layers", "task", "in_channels", "N"}
        desc = cls(
            name=str(d.get("name", "network")),
            layers=[dict(layer) for layer in d["layers"]],
            task=d.get("task", "classification"),
            in_channels=int(d.get("in_channels", 0)),
            N=None if d.get("N") is None else int(d["N"]),
            extra={k: v for k, v in d.items() if k not in known},
        )
        desc.check()
        return desc

    @classmethod
    def from_yaml(cls, path) -> "NetworkDescription":
        with open(path) as fh:
            return cls.from_dict(yaml.safe_load(fh))

    def to_dict(self) -> dict:
        d = {"name": self.name, "task": self.task, "in_channels": self.in_channels, "layers": self.layers}
        if self.N is not None:
            d["N"] = self.N
        d.update(self.extra)
        return d

    @property
    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def with_N(self, N: int) -> "NetworkDescription":
        d = self.to_dict()
        d["N"] = N
        return NetworkDescription.from_dict(d)

    def check(self, n_levels: int | None = None) -> None:
        """Static shape walk; raises :class:`NetworkError` on the first problem."""
        if self.task not in TASKS:
            raise NetworkError(f"unknown task {self.task!r}")
        for spec in [self.extra] + self.layers:
            st = spec.get("statistics", spec.get("batchnorm_statistics", "running"))
            if st not in BN_STATISTICS:
                raise NetworkError(f"batchnorm statistics must be one of {BN_STATISTICS}, got {st!r}")
        grouped, level, deepest = False, 0, 0
        C = self.in_channels
        head = False
        for i, spec in enumerate(self.layers):
            t = spec.get("type")
            where = f"layer {i} ({t})"
            if t not in LAYER_TYPES:
                raise NetworkError(f"{where}: unknown layer type")
            if head:
                raise NetworkError(f"{where}: nothing may follow global_pool_dense")
            if "level" in spec and int(spec["level"]) != level:
                raise NetworkError(f"{where}: declared level {spec['level']} but the layer runs on level {level}")
            if t == "duplicate":
                if grouped:
                    raise NetworkError(f"{where}: input is already grouped")
                grouped = True
            elif t in ("gconv", "residual", "pool", "unpool"):
                if not grouped:
                    raise NetworkError(f"{where}: needs a grouped input; add duplicate first")
                if t == "gconv":
                    C = _positive(spec, "out", where)
                elif t == "pool":
                    level += 1
                    if n_levels is not None and level >= n_levels:
                        raise NetworkError(f"{where}: pooling past the coarsest level ({n_levels} levels)")
                elif t == "unpool":
                    level -= 1
                    if level < 0:
                        raise NetworkError(f"{where}: unpooling past the finest level")
                elif t == "residual" and C == 0:
                    raise NetworkError(f"{where}: residual block on zero channels")
            elif t == "reduce":
                if not grouped:
                    raise NetworkError(f"{where}: input is not grouped")
                if spec.get("mode", "max") not in ("max", "average"):
                    raise NetworkError(f"{where}: mode must be max or average")
                grouped = False
            elif t == "gconv1x1":
                C = _positive(spec, "out", where)
            elif t == "global_pool_dense":
                _positive(spec, "out", where)
                head = True
            if t == "pool" and spec.get("mode", "max") not in ("max", "average"):
                raise NetworkError(f"{where}: mode must be max or average")
            deepest = max(deepest, level)
        if self.task == "classification" and not head:
            raise NetworkError("classification networks end with global_pool_dense")
        if self.task != "classification":
            if head:
                raise NetworkError(f"{self.task} networks produce per-vertex outputs; drop global_pool_dense")
            if grouped:
                raise NetworkError(f"{self.task} networks must reduce before the output")
            if level != 0:
                raise NetworkError(f"{self.task} networks must unpool back to the finest level")
        if n_levels is not None and deepest >= n_levels:
            raise NetworkError(f"network needs {deepest + 1} levels, hierarchy has {n_levels}")

    @property
    def bn_statistics(self) -> str:
        return self.extra.get("batchnorm_statistics", "running")

    @property
    def levels_needed(self) -> int:
        level = deepest = 0
        for spec in self.layers:
            level += {"pool": 1, "unpool": -1}.get(spec["type"], 0)
            deepest = max(deepest, level)
        return deepest + 1


def _positive(spec, key, where) -> int:
    if key not in spec:
        raise NetworkError(f"{where}: missing '{key}'")
    v = int(spec[key])
    if v <= 0:
        raise NetworkError(f"{where}: '{key}' must be positive")
    return v


# ---------------------------------------------------------------------------
# layers


class Layer:
    """Base layer: parameters are an ordered dict of arrays."""

    kind = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.cache = None

    def zero_grad(self):
        for k, p in self.params.items():
            self.grads[k] = np.zeros_like(p)

    def buffers(self) -> dict[str, np.ndarray]:
        return {}

    def forward(self, x, ctx: MeshInput, level: int, training: bool):
        raise NotImplementedError

    def backward(self, gy):
        raise NotImplementedError


def _uniform(rng, shape, bound, dtype):
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Duplicate(Layer):
    kind = "duplicate"

    def __init__(self, N):
        super().__init__()
        self.N = N

    def forward(self, x, ctx, level, training):
        return ops.duplicate(x[0], self.N)

    def backward(self, gy):
        return ops.duplicate_grad(gy)[None]


class GConv(Layer):
    kind = "gconv"

    def __init__(self, c_in, c_out, patch_input, rng, dtype):
        super().__init__()
        self.patch_input = bool(patch_input)
        k_in = c_in + (ops.N_PATCH_FEATURES if self.patch_input else 0)
        bound = np.sqrt(6.0 / (ops.N_MONOMIALS * k_in + ops.N_MONOMIALS * c_out))
        self.params["W"] = _uniform(rng, (c_out, k_in, ops.N_MONOMIALS), bound, dtype)

    def forward(self, x, ctx, level, training):
        p = ctx.patches[level]
        self.cache = (p, x)
        return ops.gconv(p, x, self.params["W"], self.patch_input)

    def backward(self, gy):
        p, x = self.cache
        gx, gW = ops.gconv_grad(p, x, self.params["W"], gy, self.patch_input)
        self.grads["W"] += gW
        return gx


class GConv1x1(Layer):
    kind = "gconv1x1"

    def __init__(self, c_in, c_out, rng, dtype):
        super().__init__()
        bound = np.sqrt(6.0 / (c_in + c_out))
        self.params["W"] = _uniform(rng, (c_out, c_in), bound, dtype)
        self.params["b"] = np.zeros(c_out, dtype)

    def forward(self, x, ctx, level, training):
        self.cache = x
        return ops.gconv1x1(x, self.params["W"], self.params["b"])

    def backward(self, gy):
        gx, gW, gb = ops.gconv1x1_grad(self.cache, self.params["W"], gy)
        self.grads["W"] += gW
        self.grads["b"] += gb
        return gx


class BatchNorm(Layer):
    kind = "batchnorm"

    def __init__(self, c, dtype, statistics="running"):
        super().__init__()
        self.statistics = statistics
        self.params["gamma"] = np.ones(c, dtype)
        self.params["beta"] = np.zeros(c, dtype)
        self.state = ops.BatchNormState.create(c, dtype)

    def buffers(self):
        return {
            "running_mean": self.state.running_mean,
            "running_var": self.state.running_var,
            "count": np.array([self.state.count], dtype=np.float64),
        }

    def forward(self, x, ctx, level, training):
        batch = training or self.statistics == "sample"
        y, self.cache = ops.batchnorm(x, self.params["gamma"], self.params["beta"], self.state, training, batch)
        return y

    def backward(self, gy):
        gx, gg, gb = ops.batchnorm_grad(gy, self.params["gamma"], self.cache)
        self.grads["gamma"] += gg
        self.grads["beta"] += gb
        return gx


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, ctx, level, training):
        self.cache = x
        return ops.relu(x)

    def backward(self, gy):
        return ops.relu_grad(self.cache, gy)


class Residual(Layer):
    """``relu(x + bn(gconv(relu(bn(gconv(x))))))``; keeps the channel count."""

    kind = "residual"

    def __init__(self, c, rng, dtype, statistics="running"):
        super().__init__()
        self.parts = [GConv(c, c, False, rng, dtype), BatchNorm(c, dtype, statistics), ReLU(),
                      GConv(c, c, False, rng, dtype), BatchNorm(c, dtype, statistics)]
        self.out_relu = ReLU()
        for i, part in enumerate(self.parts):
            for k, p in part.params.items():
                self.params[f"{i}.{k}"] = p

    def zero_grad(self):
        for part in self.parts:
            part.zero_grad()
        self.grads = {}
        for i, part in enumerate(self.parts):
            for k, g in part.grads.items():
                self.grads[f"{i}.{k}"] = g

    def buffers(self):
        out = {}
        for i, part in enumerate(self.parts):
            for k, b in part.buffers().items():
                out[f"{i}.{k}"] = b
        return out

    def load_buffers(self, values: dict):
        for i, part in enumerate(self.parts):
            if isinstance(part, BatchNorm):
                _load_bn(part, {k.split(".", 1)[1]: v for k, v in values.items() if k.startswith(f"{i}.")})

    def forward(self, x, ctx, level, training):
        h = x
        for part in self.parts:
            h = part.forward(h, ctx, level, training)
        return self.out_relu.forward(h + x, ctx, level, training)

    def backward(self, gy):
        g = self.out_relu.backward(gy)
        gx = g
        for part in reversed(self.parts):
            g = part.backward(g)
        return gx + g


class Pool(Layer):
    kind = "pool"

    def __init__(self, mode):
        super().__init__()
        self.mode = mode

    def forward(self, x, ctx, level, training):
        pm = ctx.pools[level]
        y, arg = ops.pool(x, pm, self.mode)
        self.cache = (pm, arg, x.shape)
        return y

    def backward(self, gy):
        pm, arg, shape = self.cache
        return ops.pool_grad(gy, pm, self.mode, arg, shape)


class Unpool(Layer):
    kind = "unpool"

    def forward(self, x, ctx, level, training):
        pm = ctx.pools[level - 1]
        self.cache = pm
        return ops.unpool(x, pm)

    def backward(self, gy):
        return ops.unpool_grad(gy, self.cache)


class Reduce(Layer):
    kind = "reduce"

    def __init__(self, mode):
        super().__init__()
        self.mode = mode

    def forward(self, x, ctx, level, training):
        y, arg = ops.reduce(x, self.mode)
        self.cache = (x.shape, arg)
        return y[None]

    def backward(self, gy):
        shape, arg = self.cache
        return ops.reduce_grad(gy[0], shape, self.mode, arg)


class GlobalPoolDense(Layer):
    kind = "global_pool_dense"

    def __init__(self, c_in, c_out, rng, dtype):
        super().__init__()
        bound = np.sqrt(6.0 / (c_in + c_out))
        self.params["W"] = _uniform(rng, (c_out, c_in), bound, dtype)
        self.params["b"] = np.zeros(c_out, dtype)

    def forward(self, x, ctx, level, training):
        s, self.cache = ops.global_pool_dense(x, self.params["W"], self.params["b"])
        return s

    def backward(self, gy):
        gx, gW, gb = ops.global_pool_dense_grad(gy, self.params["W"], self.cache)
        self.grads["W"] += gW
        self.grads["b"] += gb
        return gx


def _load_bn(layer: BatchNorm, values: dict):
    layer.state.running_mean[...] = values["running_mean"]
    layer.state.running_var[...] = values["running_var"]
    layer.state.count = int(np.asarray(values["count"]).ravel()[0])


# ---------------------------------------------------------------------------
# network


class Network:
    """Trainable network instantiated from a :class:`NetworkDescription`.

    Parameters are initialised from ``default_rng(seed)`` in declaration
    order.
    """

    def __init__(self, desc: NetworkDescription, N: int | None = None, seed: int = 0, dtype=np.float64):
        N = N if N is not None else (desc.N if desc.N is not None else 4)
        if desc.N is not None and desc.N != N:
            raise NetworkError(f"description fixes N={desc.N}, asked for N={N}")
        self.desc = desc
        self.N = int(N)
        self.dtype = np.dtype(dtype)
        self.trace: list[tuple[str, np.ndarray]] | None = None
        rng = np.random.default_rng(seed)
        self.layers: list[Layer] = []
        self.levels: list[int] = []
        C, level = desc.in_channels, 0
        for spec in desc.layers:
            t = spec["type"]
            if t == "duplicate":
                layer = Duplicate(self.N)
            elif t == "gconv":
                layer = GConv(C, int(spec["out"]), spec.get("patch_input", False), rng, self.dtype)
                C = int(spec["out"])
            elif t == "gconv1x1":
                layer = GConv1x1(C, int(spec["out"]), rng, self.dtype)
                C = int(spec["out"])
            elif t == "batchnorm":
                layer = BatchNorm(C, self.dtype, spec.get("statistics", desc.bn_statistics))
            elif t == "relu":
                layer = ReLU()
            elif t == "residual":
                layer = Residual(C, rng, self.dtype, spec.get("statistics", desc.bn_statistics))
            elif t == "pool":
                layer = Pool(spec.get("mode", "max"))
            elif t == "unpool":
                layer = Unpool()
            elif t == "reduce":
                layer = Reduce(spec.get("mode", "max"))
            else:
                layer = GlobalPoolDense(C, int(spec["out"]), rng, self.dtype)
                C = int(spec["out"])
            self.levels.append(level)
            level += {"pool": 1, "unpool": -1}.get(t, 0)
            self.layers.append(layer)
        self.out_channels = C
        self.zero_grad()

    @property
    def hash(self) -> str:
        return self.desc.hash

    def named_parameters(self) -> list[tuple[str, np.ndarray]]:
        return [(f"{i}.{layer.kind}.{k}", p) for i, layer in enumerate(self.layers) for k, p in layer.params.items()]

    def parameters(self) -> list[np.ndarray]:
        return [p for _, p in self.named_parameters()]

    def gradients(self) -> list[np.ndarray]:
        return [g for layer in self.layers for g in layer.grads.values()]

    def named_buffers(self) -> list[tuple[str, np.ndarray]]:
        return [(f"{i}.{layer.kind}.{k}", b) for i, layer in enumerate(self.layers) for k, b in layer.buffers().items()]

    def load_buffers(self, values: dict) -> None:
        for i, layer in enumerate(self.layers):
            prefix = f"{i}.{layer.kind}."
            mine = {k[len(prefix):]: v for k, v in values.items() if k.startswith(prefix)}
            if isinstance(layer, BatchNorm):
                _load_bn(layer, mine)
            elif isinstance(layer, Residual):
                layer.load_buffers(mine)

    def n_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def zero_grad(self) -> None:
        for layer in self.layers:
            layer.zero_grad()

    def check_input(self, sample: MeshInput) -> None:
        if sample.N != self.N:
            raise NetworkError(f"mesh preprocessed with N={sample.N}, network uses N={self.N}")
        if sample.features.shape[0] != self.desc.in_channels:
            raise NetworkError(
                f"network expects {self.desc.in_channels} input channels, mesh provides {sample.features.shape[0]}"
            )
        self.desc.check(sample.n_levels)

    def forward(self, sample: MeshInput, training: bool = False, record: bool = False) -> np.ndarray:
        """Class scores ``(K,)`` for classification, else per-vertex ``(K, V)``."""
        self.check_input(sample)
        x = np.asarray(sample.features, dtype=self.dtype)[None]
        self.trace = [] if record else None
        for layer, level in zip(self.layers, self.levels):
            x = layer.forward(x, sample, level, training)
            if record:
                self.trace.append((layer.kind, x.copy()))
        if self.desc.task == "classification":
            return x
        return x[0]

    def backward(self, gout: np.ndarray) -> None:
        """Accumulate parameter gradients for the last forward pass."""
        g = np.asarray(gout, dtype=self.dtype)
        if self.desc.task != "classification":
            g = g[None]
        for layer in reversed(self.layers):
            g = layer.backward(g)
