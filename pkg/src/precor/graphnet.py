"""Graph network that corrects a sparse lower-triangular factor.

The factor ``L`` is read as a directed graph with one edge per stored entry
``L[i, j]`` (``j <= i``), messages flowing from ``j`` into ``i``. The network
encodes the normalised edge values, runs ``T`` rounds of max-aggregation
message passing with a single shared edge updater, decodes a scalar per edge
and returns ``L + alpha * correction`` on the pattern of ``L``.

Everything is plain numpy; :func:`backward` is the hand-written reverse pass.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import _kernels
from .errors import ConfigError, DimensionError, NumericFailure
from .icfactor import CholeskyFactor
from .sparse import CsrMatrix


@dataclass(frozen=True)
class GnnConfig:
    rounds_T: int = 5
    hidden: int = 16
    mlp_hidden_layers: int = 2
    activation: str = "relu"
    processor: str = "message_passing"
    aggregation: str = "max"

    def __post_init__(self):
        if self.rounds_T < 1 or self.hidden < 1 or self.mlp_hidden_layers < 0:
            raise ValueError("rounds_T and hidden must be >= 1, mlp_hidden_layers >= 0")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.processor not in ("message_passing", "mlp_only"):
            raise ValueError(f"unknown processor {self.processor!r}")
        if self.aggregation != "max":
            raise ValueError("only max aggregation is supported")


def _relu(z):
    return np.maximum(z, 0.0)


def _relu_grad(z, y):
    return (z > 0.0).astype(z.dtype)


def _tanh_grad(z, y):
    return 1.0 - y * y


_ACTIVATIONS = {"relu": (_relu, _relu_grad), "tanh": (np.tanh, _tanh_grad)}


@dataclass
class MlpWeights:
    """Dense layers ``x @ W + b``; hidden layers activated, output linear."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need one bias per weight matrix")
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.ndim != 2 or b.shape != (W.shape[1],):
                raise ValueError(f"layer {k}: bias shape {b.shape} does not match weight {W.shape}")
            if k and self.weights[k - 1].shape[1] != W.shape[0]:
                raise ValueError(f"layer {k} input width does not chain")

    @property
    def n_params(self) -> int:
        return sum(W.size + b.size for W, b in zip(self.weights, self.biases))


@dataclass
class GnnParams:
    encoder: MlpWeights  # gamma: scalar edge value -> hidden edge feature
    updater: MlpWeights  # phi: (e_ij, h_i, h_j) -> e_ij
    decoder: MlpWeights  # psi: edge feature -> scalar
    alpha: float = 0.0


def _layer_dims(cfg: GnnConfig) -> dict[str, list[int]]:
    H, depth = cfg.hidden, cfg.mlp_hidden_layers
    upd_in = 3 * H if cfg.processor == "message_passing" else H
    return {
        "encoder": [1] + [H] * depth + [H],
        "updater": [upd_in] + [H] * depth + [H],
        "decoder": [H] + [H] * depth + [1],
    }


_BLOCKS = ("encoder", "updater", "decoder")


def param_count(cfg: GnnConfig) -> int:
    total = 1  # alpha
    for dims in _layer_dims(cfg).values():
        total += sum(a * b + b for a, b in zip(dims[:-1], dims[1:]))
    return total


def init_params(cfg: GnnConfig, seed: int = 0) -> GnnParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases; alpha = 0."""
    rng = np.random.default_rng(seed)
    blocks = {}
    for name, dims in _layer_dims(cfg).items():
        Ws, bs = [], []
        for a, b in zip(dims[:-1], dims[1:]):
            bound = 1.0 / np.sqrt(a)
            Ws.append(rng.uniform(-bound, bound, size=(a, b)))
            bs.append(rng.uniform(-bound, bound, size=b))
        blocks[name] = MlpWeights(Ws, bs)
    return GnnParams(**blocks, alpha=0.0)


def flatten_params(params: GnnParams) -> np.ndarray:
    """Canonical order: encoder, updater, decoder (each layer W then b), alpha."""
    parts = []
    for name in _BLOCKS:
        mlp = getattr(params, name)
        for W, b in zip(mlp.weights, mlp.biases):
            parts += [W.ravel(), b]
    parts.append(np.array([params.alpha], dtype=np.float64))
    return np.concatenate(parts).astype(np.float64)


def unflatten_params(vec, cfg: GnnConfig) -> GnnParams:
    vec = np.asarray(vec, dtype=np.float64)
    if vec.shape != (param_count(cfg),):
        raise DimensionError(f"parameter vector has length {vec.size}, config needs {param_count(cfg)}")
    pos = 0
    blocks = {}
    for name, dims in _layer_dims(cfg).items():
        Ws, bs = [], []
        for a, b in zip(dims[:-1], dims[1:]):
            Ws.append(vec[pos:pos + a * b].reshape(a, b).copy())
            pos += a * b
            bs.append(vec[pos:pos + b].copy())
            pos += b
        blocks[name] = MlpWeights(Ws, bs)
    return GnnParams(**blocks, alpha=float(vec[pos]))


# -- graph view ---------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class EdgeGraph:
    """Edges in CSR traversal order of the factor: edge ``k`` is entry ``k``.

    ``receivers[k] = i`` and ``senders[k] = j`` for entry ``L[i, j]``; the
    incoming edges of node ``i`` are ``offsets[i]:offsets[i+1]``.
    """

    n_nodes: int
    receivers: np.ndarray
    senders: np.ndarray
    offsets: np.ndarray

    @property
    def n_edges(self) -> int:
        return int(self.receivers.shape[0])

    @property
    def edges(self) -> list[tuple[int, int]]:
        return list(zip(self.receivers.tolist(), self.senders.tolist()))

    def sender_groups(self) -> tuple[np.ndarray, np.ndarray]:
        """Permutation grouping edges by sender, plus group offsets."""
        cached = self.__dict__.get("_sender_groups")
        if cached is None:
            order = np.argsort(self.senders, kind="stable")
            offs = np.zeros(self.n_nodes + 1, dtype=np.int64)
            np.cumsum(np.bincount(self.senders, minlength=self.n_nodes), out=offs[1:])
            cached = (order, offs)
            object.__setattr__(self, "_sender_groups", cached)
        return cached


def graph_from_factor(L: CsrMatrix) -> EdgeGraph:
    if L.n_rows != L.n_cols:
        raise DimensionError("factor must be square")
    rows = L.row_indices()
    if np.any(L.col_idx > rows):
        raise ValueError("factor is not lower-triangular")
    # every node needs its self-loop so that aggregation never sees an empty set
    if np.count_nonzero(L.col_idx == rows) != L.n_rows:
        raise ValueError("factor must store every diagonal entry")
    return EdgeGraph(L.n_rows, rows, L.col_idx.copy(), L.row_ptr.copy())


def batch_graphs(graphs: list[EdgeGraph]) -> EdgeGraph:
    """Disjoint union; node and edge numbering follow list order."""
    node_base = np.cumsum([0] + [g.n_nodes for g in graphs])
    edge_base = np.cumsum([0] + [g.n_edges for g in graphs])
    recv = np.concatenate([g.receivers + nb for g, nb in zip(graphs, node_base)])
    send = np.concatenate([g.senders + nb for g, nb in zip(graphs, node_base)])
    offs = np.concatenate([[0]] + [g.offsets[1:] + eb for g, eb in zip(graphs, edge_base)])
    return EdgeGraph(int(node_base[-1]), recv, send, offs.astype(np.int64))


# -- forward / backward -------------------------------------------------------

def _check(x, stage):
    if not np.all(np.isfinite(x)):
        raise NumericFailure(stage)


def _mlp_forward(mlp: MlpWeights, x, act):
    cache = []
    last = len(mlp.weights) - 1
    for k, (W, b) in enumerate(zip(mlp.weights, mlp.biases)):
        z = x @ W + b
        y = z if k == last else act(z)
        cache.append((x, z, y))
        x = y
    return x, cache


def _mlp_backward(mlp: MlpWeights, cache, dy, act_grad):
    dWs, dbs = [None] * len(cache), [None] * len(cache)
    last = len(cache) - 1
    for k in range(last, -1, -1):
        x, z, y = cache[k]
        if k != last:
            dy = dy * act_grad(z, y)
        dWs[k] = x.T @ dy
        dbs[k] = dy.sum(axis=0)
        dy = dy @ mlp.weights[k].T
    return dy, dWs, dbs


@dataclass
class Tape:
    """Intermediates of a batched forward pass, consumed by :func:`backward`."""

    graph: EdgeGraph
    splits: np.ndarray
    e0: np.ndarray
    scale: np.ndarray
    enc_cache: list
    rounds: list
    dec_cache: list
    correction: np.ndarray


def _forward(params: GnnParams, cfg: GnnConfig, graph: EdgeGraph, e0, scale):
    act, _ = _ACTIVATIONS[cfg.activation]
    u = (e0 / scale)[:, None]
    e, enc_cache = _mlp_forward(params.encoder, u, act)
    _check(e, "encoder")
    rounds = []
    if cfg.processor == "message_passing":
        h = np.ones((graph.n_nodes, cfg.hidden))
        for t in range(cfg.rounds_T):
            hs = h[graph.senders]
            m = hs * e
            hn, winner = _kernels.segment_max(m, graph.offsets)
            x = np.concatenate([e, hn[graph.receivers], hn[graph.senders]], axis=1)
            e_next, cache = _mlp_forward(params.updater, x, act)
            _check(e_next, f"processor round {t + 1}")
            rounds.append((hs, e, winner, cache))
            h, e = hn, e_next
    else:
        e, cache = _mlp_forward(params.updater, e, act)
        _check(e, "processor")
        rounds.append(cache)
    d, dec_cache = _mlp_forward(params.decoder, e, act)
    _check(d, "decoder")
    corr = scale * d[:, 0]
    return corr, enc_cache, rounds, dec_cache


def forward_batch(params: GnnParams, cfg: GnnConfig, factors: list[CsrMatrix],
                  graphs: list[EdgeGraph] | None = None) -> tuple[list[np.ndarray], Tape]:
    """Corrected values for several factors at once, plus the tape for backward."""
    if graphs is None:
        graphs = [graph_from_factor(L) for L in factors]
    graph = graphs[0] if len(graphs) == 1 else batch_graphs(graphs)
    e0 = np.concatenate([L.values for L in factors])
    scale = np.concatenate([np.full(L.nnz, np.max(np.abs(L.values))) for L in factors])
    corr, enc_cache, rounds, dec_cache = _forward(params, cfg, graph, e0, scale)
    if params.alpha == 0.0:
        out = e0.copy()
    else:
        out = e0 + params.alpha * corr
    _check(out, "output")
    splits = np.cumsum([L.nnz for L in factors])[:-1]
    tape = Tape(graph, splits, e0, scale, enc_cache, rounds, dec_cache, corr)
    return np.split(out, splits), tape


def forward(params: GnnParams, cfg: GnnConfig, L: CsrMatrix) -> CholeskyFactor:
    """``L(theta) = L + alpha * GNN(theta, L)`` on the pattern of ``L``."""
    (vals,), _ = forward_batch(params, cfg, [L])
    return CholeskyFactor(L.with_values(vals), "learned")


def backward(params: GnnParams, cfg: GnnConfig, tape: Tape, grad_values: list[np.ndarray]) -> np.ndarray:
    """Gradient of a scalar w.r.t. the flat parameters, given d(scalar)/d(output values).

    Max-aggregation routes the gradient to the first maximising edge.
    """
    _, act_grad = _ACTIVATIONS[cfg.activation]
    g_out = np.concatenate(grad_values)
    graph = tape.graph
    grads = {}
    g_alpha = float(g_out @ tape.correction)
    g_d = (g_out * params.alpha * tape.scale)[:, None]
    g_e, grads["decoder"] = _split(_mlp_backward(params.decoder, tape.dec_cache, g_d, act_grad))
    upd_W = [np.zeros_like(W) for W in params.updater.weights]
    upd_b = [np.zeros_like(b) for b in params.updater.biases]
    if cfg.processor == "message_passing":
        H = cfg.hidden
        identity = np.arange(graph.n_edges)
        order, send_offs = graph.sender_groups()
        g_h = None  # gradient w.r.t. the node features produced by the round after
        for t in range(len(tape.rounds) - 1, -1, -1):
            hs, e, winner, cache = tape.rounds[t]
            g_x, dW, db = _mlp_backward(params.updater, cache, g_e, act_grad)
            for k in range(len(dW)):
                upd_W[k] += dW[k]
                upd_b[k] += db[k]
            g_e = g_x[:, :H]
            g_hn = _kernels.segment_sum(g_x[:, H:2 * H], identity, graph.offsets)
            g_hn += _kernels.segment_sum(g_x[:, 2 * H:], order, send_offs)
            if g_h is not None:
                g_hn += g_h
            g_m = np.zeros_like(e)
            np.put_along_axis(g_m, winner, g_hn, axis=0)
            g_e = g_e + g_m * hs
            g_h = _kernels.segment_sum(g_m * e, order, send_offs)
            _check(g_e, f"backward round {t + 1}")
    else:
        g_e, dW, db = _mlp_backward(params.updater, tape.rounds[0], g_e, act_grad)
        upd_W, upd_b = dW, db
    grads["updater"] = (upd_W, upd_b)
    _, grads["encoder"] = _split(_mlp_backward(params.encoder, tape.enc_cache, g_e, act_grad))
    parts = []
    for name in _BLOCKS:
        Ws, bs = grads[name]
        for W, b in zip(Ws, bs):
            parts += [W.ravel(), b]
    parts.append(np.array([g_alpha]))
    flat = np.concatenate(parts)
    _check(flat, "backward output")
    return flat


def _split(res):
    dx, dWs, dbs = res
    return dx, (dWs, dbs)


# -- checkpoints ----------------------------------------------------------------

_MAGIC = b"PRECORCK"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, params: GnnParams, cfg: GnnConfig, extra: dict | None = None) -> None:
    """Header (magic, JSON length, JSON) followed by little-endian float64 parameters."""
    vec = flatten_params(params)
    header = {"format_version": CHECKPOINT_VERSION, "gnn": asdict(cfg), "n_params": int(vec.size)}
    if extra:
        header["extra"] = extra
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC + struct.pack("<I", len(blob)) + blob)
        fh.write(vec.astype("<f8").tobytes())


def load_checkpoint(path) -> tuple[GnnParams, GnnConfig, dict]:
    data = Path(path).read_bytes()
    if data[:8] != _MAGIC:
        raise ConfigError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<I", data[8:12])
    header = json.loads(data[12:12 + hlen])
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {header.get('format_version')}")
    cfg = GnnConfig(**header["gnn"])
    vec = np.frombuffer(data[12 + hlen:], dtype="<f8").astype(np.float64)
    if vec.size != header["n_params"]:
        raise ConfigError(f"{path}: truncated parameter block")
    return unflatten_params(vec, cfg), cfg, header.get("extra", {})
