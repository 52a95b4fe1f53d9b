"""Losses, optimizer, metrics, checkpoints and the train/evaluate loops."""

from __future__ import annotations

import json
import struct
import time
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import dijkstra
from scipy.spatial import cKDTree

from .mesh import TriMesh
from .network import MeshInput, Network, NetworkError

IGNORE_LABEL = -1
W_NORMAL = 0.1
W_REG = 0.2
W_CON = 20.0


class TrainingError(RuntimeError):
    pass


class NonFiniteGradient(TrainingError):
    def __init__(self, name):
        super().__init__(f"non-finite gradient in parameter {name}; step aborted")
        self.name = name


class CheckpointError(TrainingError):
    pass


# ---------------------------------------------------------------------------
# losses


def log_softmax(s, axis=0):
    m = s.max(axis=axis, keepdims=True)
    z = s - m
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def cross_entropy(scores, labels):
    """Mean softmax cross-entropy; returns ``(loss, d loss / d scores)``.

    ``scores`` is ``(K,)`` with a scalar label, or ``(K, V)`` with one label
    per column. Labels equal to ``IGNORE_LABEL`` are skipped.
    """
    s = np.asarray(scores, dtype=np.float64)
    single = s.ndim == 1
    if single:
        s = s[:, None]
    lab = np.atleast_1d(np.asarray(labels)).astype(np.int64)
    K, V = s.shape
    if lab.shape != (V,):
        raise ValueError(f"{lab.shape[0]} labels for {V} score columns")
    keep = lab != IGNORE_LABEL
    if np.any((lab[keep] < 0) | (lab[keep] >= K)):
        bad = lab[keep][(lab[keep] < 0) | (lab[keep] >= K)][0]
        raise ValueError(f"label {bad} out of range for {K} classes")
    g = np.zeros_like(s)
    n = int(keep.sum())
    if n == 0:
        return 0.0, (g[:, 0] if single else g)
    ls = log_softmax(s[:, keep], axis=0)
    cols = np.arange(n)
    loss = -ls[lab[keep], cols].sum() / n
    p = np.exp(ls)
    p[lab[keep], cols] -= 1.0
    g[:, keep] = p / n
    return float(loss), (g[:, 0] if single else g)


def directed_edges(mesh: TriMesh) -> np.ndarray:
    """All ``(i, j)`` with ``j`` adjacent to ``i``, both directions."""
    e = mesh.edges
    return np.concatenate([e, e[:, ::-1]])


def regression_loss(pred_p, pred_n, target_p, target_n, edges):
    """Position/normal regression loss with Laplacian and consistency terms.

    ``edges`` is ``(E, 2)`` directed; ``E`` normalises the consistency term.
    Returns ``(loss, (d pred_p, d pred_n))``; the subgradient of ``|.|`` at
    zero is taken as 0.
    """
    P = np.asarray(pred_p, np.float64)
    Nn = np.asarray(pred_n, np.float64)
    shapes = {P.shape, Nn.shape, np.shape(target_p), np.shape(target_n)}
    if len(shapes) != 1 or P.ndim != 2 or P.shape[1] != 3:
        raise ValueError(f"regression inputs must all be (V, 3); got {sorted(shapes)}")
    V = P.shape[0]
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    i, j = edges[:, 0], edges[:, 1]
    deg = np.bincount(i, minlength=V).astype(np.float64)
    inv_deg = np.where(deg > 0, 1.0 / np.maximum(deg, 1), 0.0)

    def fit_and_smooth(X, T):
        d = X - T
        dd = X[i] - X[j]
        val = np.abs(d).sum() + W_REG * (inv_deg[i] * np.abs(dd).sum(axis=1)).sum()
        g = np.sign(d)
        ge = W_REG * inv_deg[i][:, None] * np.sign(dd)
        np.add.at(g, i, ge)
        np.add.at(g, j, -ge)
        return val / V, g / V

    lp, gp = fit_and_smooth(P, target_p)
    ln, gn = fit_and_smooth(Nn, target_n)
    gn *= W_NORMAL
    E = len(edges)
    lc = 0.0
    if E:
        dp = P[i] - P[j]
        dot = np.einsum("ij,ij->i", Nn[i], dp)
        lc = W_CON * np.abs(dot).sum() / E
        sg = (W_CON / E) * np.sign(dot)[:, None]
        np.add.at(gn, i, sg * dp)
        np.add.at(gp, i, sg * Nn[i])
        np.add.at(gp, j, -sg * Nn[i])
    return float(lp + W_NORMAL * ln + lc), (gp, gn)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def create(cls, params, lr=1e-3, **kw) -> "OptimizerState":
        return cls(lr=lr, m=[np.zeros(p.shape) for p in params], v=[np.zeros(p.shape) for p in params], **kw)


def adam_step(params, grads, state: OptimizerState, names=None) -> None:
    """In-place bias-corrected Adam update of ``params``.

    A non-finite gradient aborts before anything is modified.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("parameter, gradient and optimizer state counts differ")
    for k, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape or p.shape != state.m[k].shape:
            raise ValueError(f"shape mismatch for parameter {k}: {p.shape} vs {g.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(names[k] if names else str(k))
    state.step += 1
    t = state.step
    c1 = 1 - state.beta1 ** t
    c2 = 1 - state.beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        g = np.asarray(g, np.float64)
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * g * g
        p -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)


# ---------------------------------------------------------------------------
# metrics


def _edge_graph(mesh: TriMesh):
    e = mesh.edges
    w = np.linalg.norm(mesh.positions[e[:, 0]] - mesh.positions[e[:, 1]], axis=1)
    V = mesh.n_vertices
    return sparse.coo_matrix((w, (e[:, 0], e[:, 1])), shape=(V, V)).tocsr()


def geodesic_error(pred_points, true_points, template: TriMesh) -> np.ndarray:
    """Edge-graph geodesic distance between nearest template vertices over ``sqrt(area)``.

    Points in different connected components get ``inf``.
    """
    pred = np.atleast_2d(np.asarray(pred_points, np.float64))
    true = np.atleast_2d(np.asarray(true_points, np.float64))
    tree = cKDTree(template.positions)
    a = tree.query(pred)[1]
    b = tree.query(true)[1]
    src, inv = np.unique(b, return_inverse=True)
    D = dijkstra(_edge_graph(template), directed=False, indices=src)
    d = D[inv, a]
    return d / np.sqrt(template.face_areas.sum())


def accuracy(scores, labels) -> tuple[int, int]:
    s = np.asarray(scores)
    lab = np.atleast_1d(labels)
    pred = np.atleast_1d(np.argmax(s, axis=0))
    keep = lab != IGNORE_LABEL
    return int((pred[keep] == lab[keep]).sum()), int(keep.sum())


# ---------------------------------------------------------------------------
# data items


@dataclass(eq=False)
class Item:
    """One preprocessed mesh and its target.

    ``target`` is an int (classification), an int array per vertex
    (segmentation) or a dict with ``positions``, ``normals``, ``edges`` and
    optionally ``template`` (regression).
    """

    name: str
    sample: MeshInput
    target: Any


def loss_and_grad(task: str, out, target):
    if task in ("classification", "segmentation"):
        return cross_entropy(out, target)
    if task == "regression":
        if out.shape[0] != 6:
            raise NetworkError(f"regression needs 6 output channels, network has {out.shape[0]}")
        loss, (gp, gn) = regression_loss(out[:3].T, out[3:].T, target["positions"], target["normals"], target["edges"])
        return loss, np.concatenate([gp.T, gn.T])
    raise ValueError(f"unknown task {task!r}")


# ---------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"SFCK"
CKPT_VERSION = 1


def save_checkpoint(path, net: Network, opt: OptimizerState, epoch: int) -> None:
    """Parameters, batchnorm buffers and Adam moments as little-endian f64."""
    tensors = [("p:" + n, p) for n, p in net.named_parameters()]
    tensors += [("b:" + n, b) for n, b in net.named_buffers()]
    names = [n for n, _ in net.named_parameters()]
    tensors += [("m:" + n, m) for n, m in zip(names, opt.m)]
    tensors += [("v:" + n, v) for n, v in zip(names, opt.v)]
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", CKPT_VERSION))
        fh.write(net.hash.encode("ascii"))
        fh.write(struct.pack("<IQdI", epoch, opt.step, opt.lr, len(tensors)))
        for name, t in tensors:
            raw = name.encode()
            fh.write(struct.pack("<HB", len(raw), t.ndim))
            fh.write(raw)
            fh.write(struct.pack(f"<{t.ndim}Q", *t.shape))
            fh.write(np.ascontiguousarray(t, dtype="<f8").tobytes())


def read_checkpoint(path) -> dict:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version > CKPT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version} is newer than supported version {CKPT_VERSION}")
    try:
        return _parse_checkpoint(blob)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: truncated or corrupt checkpoint ({exc})") from None


def _parse_checkpoint(blob: bytes) -> dict:
    net_hash = blob[8:72].decode("ascii")
    epoch, step, lr, count = struct.unpack_from("<IQdI", blob, 72)
    pos = 72 + struct.calcsize("<IQdI")
    tensors = {}
    for _ in range(count):
        ln, nd = struct.unpack_from("<HB", blob, pos)
        pos += 3
        name = blob[pos:pos + ln].decode()
        pos += ln
        shape = struct.unpack_from(f"<{nd}Q", blob, pos)
        pos += 8 * nd
        n = int(np.prod(shape)) if nd else 1
        tensors[name] = np.frombuffer(blob, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * n
    if pos != len(blob):
        raise ValueError("trailing bytes")
    return {"hash": net_hash, "epoch": epoch, "step": step, "lr": lr, "tensors": tensors}


def load_checkpoint(path, net: Network) -> tuple[OptimizerState, int]:
    """Restore ``net`` in place; returns the optimizer state and the epoch count."""
    ck = read_checkpoint(path)
    if ck["hash"] != net.hash:
        raise CheckpointError(f"network hash mismatch: checkpoint {ck['hash']} vs network {net.hash}")
    T = ck["tensors"]
    params = net.named_parameters()
    for name, p in params:
        p[...] = T["p:" + name]
    net.load_buffers({k[2:]: v for k, v in T.items() if k.startswith("b:")})
    opt = OptimizerState(lr=ck["lr"], step=ck["step"],
                         m=[T["m:" + n].copy() for n, _ in params],
                         v=[T["v:" + n].copy() for n, _ in params])
    return opt, ck["epoch"]


# ---------------------------------------------------------------------------
# loops


@dataclass
class TrainConfig:
    lr: float = 1e-3
    epochs: int = 10
    seed: int = 0
    accumulate: int = 1


def evaluate(net: Network, items: list[Item]) -> dict:
    """Loss and task metric over ``items`` with batchnorm in eval mode."""
    task = net.desc.task
    total, correct, count, errs, n_inf = 0.0, 0, 0, [], 0
    for it in items:
        out = net.forward(it.sample, training=False)
        loss, _ = loss_and_grad(task, out, it.target)
        total += loss
        if task in ("classification", "segmentation"):
            c, n = accuracy(out, it.target)
            correct += c
            count += n
        else:
            tmpl = it.target.get("template")
            if tmpl is not None:
                e = geodesic_error(out[:3].T, it.target["positions"], tmpl)
                n_inf += int(np.isinf(e).sum())
                errs.append(e[np.isfinite(e)])
    m = {"loss": total / max(len(items), 1)}
    if task in ("classification", "segmentation"):
        m["accuracy"] = correct / max(count, 1)
    elif errs:
        e = np.concatenate(errs)
        m["geodesic_error"] = float(e.mean()) if e.size else float("inf")
        m["geodesic_under_0.03"] = float((e < 0.03).mean()) if e.size else 0.0
        m["unreachable"] = n_inf
    return m


def train(net: Network, items: list[Item], config: TrainConfig, log_path=None, checkpoint_path=None,
          resume: str | None = None, eval_items: list[Item] | None = None, verbose=False) -> list[dict]:
    """Mesh-at-a-time Adam training; returns one metrics record per epoch.

    Epoch ``e`` visits meshes in ``default_rng([seed, e])`` order, so a
    resumed run replays exactly the epochs it missed.
    """
    if resume:
        opt, start = load_checkpoint(resume, net)
    else:
        opt, start = OptimizerState.create(net.parameters(), lr=config.lr), 0
    names = [n for n, _ in net.named_parameters()]
    task = net.desc.task
    history = []
    log = open(log_path, "a") if log_path else None
    try:
        for epoch in range(start, config.epochs):
            t0 = time.perf_counter()
            order = np.random.default_rng([config.seed, epoch]).permutation(len(items))
            net.zero_grad()
            total, correct, count, pending = 0.0, 0, 0, 0
            for pos, idx in enumerate(order):
                it = items[idx]
                out = net.forward(it.sample, training=True)
                loss, g = loss_and_grad(task, out, it.target)
                if not np.isfinite(loss):
                    raise TrainingError(f"non-finite loss on mesh {it.name} in epoch {epoch}")
                net.backward(g)
                total += loss
                if task != "regression":
                    c, n = accuracy(out, it.target)
                    correct += c
                    count += n
                pending += 1
                if pending == config.accumulate or pos == len(order) - 1:
                    grads = net.gradients()
                    if pending > 1:
                        grads = [gr / pending for gr in grads]
                    adam_step(net.parameters(), grads, opt, names)
                    net.zero_grad()
                    pending = 0
            rec = {"epoch": epoch, "loss": total / max(len(items), 1), "seconds": time.perf_counter() - t0}
            if task != "regression":
                rec["accuracy"] = correct / max(count, 1)
            if eval_items:
                rec.update({f"test_{k}": v for k, v in evaluate(net, eval_items).items()})
            history.append(rec)
            if log:
                log.write(json.dumps(rec) + "\n")
                log.flush()
            if verbose:
                print(json.dumps(rec))
            if checkpoint_path:
                save_checkpoint(checkpoint_path, net, opt, epoch + 1)
    finally:
        if log:
            log.close()
    return history
