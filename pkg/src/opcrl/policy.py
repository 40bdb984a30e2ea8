"""Decision network: conv embedder -> graph aggregation -> stacked RNN -> 5-way softmax.

Everything is plain numpy with a hand-written backward pass. Row-vector
convention throughout (``x @ W``).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, NumericError
from .graph import SegmentGraph

EMBED_DIM = 256
HIDDEN = 64
N_ACTIONS = 5
RNN_LAYERS = 3
SAGE_LAYERS = 2
CONV1_CH = 16
CONV2_CH = 32
GRID = 8  # conv1 output is GRID x GRID, conv2 halves it
CHECKPOINT_VERSION = 1


def _shapes(input_size: int) -> dict[str, tuple[int, ...]]:
    if input_size % GRID:
        raise ConfigError(f"feature size {input_size} must be a multiple of {GRID}")
    p1 = input_size // GRID
    shapes = {
        "conv1_w": (p1 * p1 * 6, CONV1_CH), "conv1_b": (CONV1_CH,),
        "conv2_w": (4 * CONV1_CH, CONV2_CH), "conv2_b": (CONV2_CH,),
        "embed_w": ((GRID // 2) ** 2 * CONV2_CH, EMBED_DIM), "embed_b": (EMBED_DIM,),
    }
    for k in range(1, SAGE_LAYERS + 1):
        shapes[f"sage{k}_w"] = (2 * EMBED_DIM, EMBED_DIM)
        shapes[f"sage{k}_b"] = (EMBED_DIM,)
    for layer in range(1, RNN_LAYERS + 1):
        shapes[f"rnn{layer}_U"] = (EMBED_DIM if layer == 1 else HIDDEN, HIDDEN)
        shapes[f"rnn{layer}_W"] = (HIDDEN, HIDDEN)
        shapes[f"rnn{layer}_b"] = (HIDDEN,)
    shapes["head_V"] = (HIDDEN, N_ACTIONS)
    shapes["head_c"] = (N_ACTIONS,)
    return shapes


@dataclass
class PolicyParams:
    input_size: int
    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        expected = _shapes(self.input_size)
        if set(self.arrays) != set(expected):
            raise ConfigError(f"parameter names differ: {sorted(set(self.arrays) ^ set(expected))}")
        for name, shape in expected.items():
            if self.arrays[name].shape != shape:
                raise ConfigError(f"{name} has shape {self.arrays[name].shape}, expected {shape}")

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.input_size, {k: v.copy() for k, v in self.arrays.items()})

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.arrays.values())

    def step(self, grads: dict[str, np.ndarray], lr: float) -> None:
        """In-place ascent step ``theta += lr * grads``."""
        # overflow is caught afterwards by the caller's finiteness check
        with np.errstate(over="ignore", invalid="ignore"):
            for k, g in grads.items():
                self.arrays[k] += lr * g

    def save(self, path) -> None:
        meta = {"version": CHECKPOINT_VERSION, "input_size": self.input_size,
                "shapes": {k: list(v.shape) for k, v in self.arrays.items()}}
        with open(path, "wb") as fh:
            np.savez(fh, __meta__=np.array(json.dumps(meta, sort_keys=True)), **self.arrays)

    @classmethod
    def load(cls, path) -> "PolicyParams":
        try:
            with np.load(Path(path), allow_pickle=False) as data:
                meta = json.loads(str(data["__meta__"]))
                arrays = {k: data[k].copy() for k in data.files if k != "__meta__"}
        except (OSError, ValueError, KeyError) as exc:
            raise ConfigError(f"cannot read checkpoint {path}: {exc}") from None
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ConfigError(f"checkpoint {path} has unsupported version {meta.get('version')}")
        return cls(int(meta["input_size"]), arrays)


def init_params(seed: int, input_size: int = 128) -> PolicyParams:
    """LeCun-uniform weights (unit variance per fan-in), zero biases."""
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in _shapes(input_size).items():
        if len(shape) == 1:
            arrays[name] = np.zeros(shape)
        else:
            bound = np.sqrt(3.0 / shape[0])
            arrays[name] = rng.uniform(-bound, bound, size=shape)
    return PolicyParams(input_size, arrays)


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------

def _patchify(x: np.ndarray, grid: int) -> np.ndarray:
    """(n, S, S, C) -> (n, grid*grid, p*p*C) non-overlapping patches."""
    n, s, _, c = x.shape
    p = s // grid
    return (x.reshape(n, grid, p, grid, p, c).transpose(0, 1, 3, 2, 4, 5)
            .reshape(n, grid * grid, p * p * c))


def _unpatchify(d: np.ndarray, grid: int, s: int, c: int) -> np.ndarray:
    n = d.shape[0]
    p = s // grid
    return (d.reshape(n, grid, grid, p, p, c).transpose(0, 1, 3, 2, 4, 5)
            .reshape(n, s, s, c))


def _weight_grad(patches: np.ndarray, dz: np.ndarray) -> np.ndarray:
    return patches.reshape(-1, patches.shape[-1]).T @ dz.reshape(-1, dz.shape[-1])


def _check(name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in layer {name}")


def _forward(features: np.ndarray, graph: SegmentGraph, params: PolicyParams):
    x = np.asarray(features, dtype=np.float64)
    n = x.shape[0]
    if x.ndim != 4 or x.shape[1:] != (params.input_size, params.input_size, 6):
        raise ConfigError(f"features of shape {x.shape} do not match policy input "
                          f"({params.input_size}, {params.input_size}, 6)")
    if graph.n_nodes != n:
        raise ConfigError(f"graph has {graph.n_nodes} nodes but {n} feature tensors were given")
    c = {}

    c["p1"] = _patchify(x, GRID)
    a1 = np.tanh(c["p1"] @ params["conv1_w"] + params["conv1_b"])
    _check("conv1", a1)
    c["a1"] = a1
    c["p2"] = _patchify(a1.reshape(n, GRID, GRID, CONV1_CH), GRID // 2)
    a2 = np.tanh(c["p2"] @ params["conv2_w"] + params["conv2_b"])
    _check("conv2", a2)
    c["a2"] = a2
    c["flat"] = a2.reshape(n, -1)
    h = np.tanh(c["flat"] @ params["embed_w"] + params["embed_b"])
    _check("embed", h)
    c["embed"] = h

    c["agg"] = agg = graph.mean_matrix()
    c["sage_in"], c["sage_out"] = [], []
    for k in range(1, SAGE_LAYERS + 1):
        cat = np.concatenate([h, agg @ h], axis=1)
        h = np.tanh(cat @ params[f"sage{k}_w"] + params[f"sage{k}_b"])
        _check(f"sage{k}", h)
        c["sage_in"].append(cat)
        c["sage_out"].append(h)

    c["rnn_in"], c["rnn_out"] = [], []
    seq = h
    for layer in range(1, RNN_LAYERS + 1):
        U, W, b = params[f"rnn{layer}_U"], params[f"rnn{layer}_W"], params[f"rnn{layer}_b"]
        drive = seq @ U + b
        out = np.empty((n, HIDDEN))
        prev = np.zeros(HIDDEN)
        for t in range(n):
            prev = np.tanh(drive[t] + prev @ W)
            out[t] = prev
        _check(f"rnn{layer}", out)
        c["rnn_in"].append(seq)
        c["rnn_out"].append(out)
        seq = out

    logits = seq @ params["head_V"] + params["head_c"]
    _check("head", logits)
    logits = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    probs = e / e.sum(axis=1, keepdims=True)
    c["probs"] = probs
    return probs, c


def _backward(dlogits: np.ndarray, cache, params: PolicyParams) -> dict[str, np.ndarray]:
    g = {}
    n = dlogits.shape[0]
    top = cache["rnn_out"][-1]
    g["head_V"] = top.T @ dlogits
    g["head_c"] = dlogits.sum(axis=0)
    dseq = dlogits @ params["head_V"].T

    for layer in range(RNN_LAYERS, 0, -1):
        U, W = params[f"rnn{layer}_U"], params[f"rnn{layer}_W"]
        xs, hs = cache["rnn_in"][layer - 1], cache["rnn_out"][layer - 1]
        dz = np.empty_like(hs)
        carry = np.zeros(HIDDEN)
        for t in range(n - 1, -1, -1):
            dz[t] = (dseq[t] + carry) * (1.0 - hs[t] ** 2)
            carry = dz[t] @ W.T
        prev = np.vstack([np.zeros((1, HIDDEN)), hs[:-1]])
        g[f"rnn{layer}_U"] = xs.T @ dz
        g[f"rnn{layer}_W"] = prev.T @ dz
        g[f"rnn{layer}_b"] = dz.sum(axis=0)
        dseq = dz @ U.T
        _check(f"rnn{layer} backward", dseq)

    agg = cache["agg"]
    dh = dseq
    for k in range(SAGE_LAYERS, 0, -1):
        h = cache["sage_out"][k - 1]
        dz = dh * (1.0 - h**2)
        g[f"sage{k}_w"] = cache["sage_in"][k - 1].T @ dz
        g[f"sage{k}_b"] = dz.sum(axis=0)
        dcat = dz @ params[f"sage{k}_w"].T
        dh = dcat[:, :EMBED_DIM] + agg.T @ dcat[:, EMBED_DIM:]
        _check(f"sage{k} backward", dh)

    e = cache["embed"]
    dz = dh * (1.0 - e**2)
    g["embed_w"] = cache["flat"].T @ dz
    g["embed_b"] = dz.sum(axis=0)
    da2 = (dz @ params["embed_w"].T).reshape(cache["a2"].shape)

    dz2 = da2 * (1.0 - cache["a2"] ** 2)
    g["conv2_w"] = _weight_grad(cache["p2"], dz2)
    g["conv2_b"] = dz2.sum(axis=(0, 1))
    dp2 = dz2 @ params["conv2_w"].T
    da1 = _unpatchify(dp2, GRID // 2, GRID, CONV1_CH).reshape(cache["a1"].shape)

    dz1 = da1 * (1.0 - cache["a1"] ** 2)
    g["conv1_w"] = _weight_grad(cache["p1"], dz1)
    g["conv1_b"] = dz1.sum(axis=(0, 1))
    for name, arr in g.items():
        _check(f"gradient {name}", arr)
    return g


def forward(features, graph: SegmentGraph, params: PolicyParams) -> np.ndarray:
    """Action distribution, one row of 5 probabilities per node in canonical order."""
    probs, _ = _forward(features, graph, params)
    return probs


def forward_with_cache(features, graph: SegmentGraph, params: PolicyParams):
    return _forward(features, graph, params)


def logprob_grad_from_cache(cache, params: PolicyParams, actions, coefficient: float):
    probs = cache["probs"]
    actions = np.asarray(actions, dtype=np.int64)
    if actions.shape != (probs.shape[0],) or np.any((actions < 0) | (actions >= N_ACTIONS)):
        raise ConfigError("actions must hold one index in 0..4 per node")
    onehot = np.zeros_like(probs)
    onehot[np.arange(len(actions)), actions] = 1.0
    return _backward(coefficient * (onehot - probs), cache, params)


def logprob_grad(features, graph: SegmentGraph, params: PolicyParams, actions,
                 coefficient: float) -> dict[str, np.ndarray]:
    """Gradient of ``coefficient * sum_i log pi(actions[i] | state)`` w.r.t. every parameter.

    Actions are 0-based indices into the movement list (-2, -1, 0, +1, +2).
    """
    _, cache = _forward(features, graph, params)
    return logprob_grad_from_cache(cache, params, actions, coefficient)


def log_likelihood(features, graph: SegmentGraph, params: PolicyParams, actions) -> float:
    probs = forward(features, graph, params)
    return float(np.sum(np.log(probs[np.arange(len(actions)), np.asarray(actions)])))
