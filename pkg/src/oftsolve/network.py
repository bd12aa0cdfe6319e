"""Proof cost network: a small tanh MLP with a policy head and a cost head.

The cost head predicts ``v = v_max * sigmoid(z)``, a log2 estimate of the
number of nodes needed to prove the position, so it always lies in
``[0, v_max]``.  All parameters live in one flat float64 vector; the layer
matrices are views into it, which keeps checkpoints and finite-difference
checks simple.

Inference (``evaluate`` / ``evaluate_batch``) goes through ``np.einsum`` so
a position gets bit-identical outputs whether it is evaluated alone or as
part of a batch.  Training uses plain matmuls.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import CheckpointError, ContractViolation, TrainingDiverged
from .games import GameState, encode, encode_many

DEFAULT_HIDDEN = (128, 128)


class Network:
    def __init__(self, input_size: int, policy_size: int, hidden: Sequence[int] = DEFAULT_HIDDEN,
                 v_max: float = 24.0, seed: int | None = 0, theta: np.ndarray | None = None):
        self.input_size = int(input_size)
        self.policy_size = int(policy_size)
        self.hidden = tuple(int(h) for h in hidden)
        self.v_max = float(v_max)
        self.shapes = self._shapes()
        n = sum(math.prod(s) for s in self.shapes)
        if theta is None:
            self.theta = np.empty(n)
            self._bind()
            self._init(np.random.default_rng(seed))
        else:
            theta = np.asarray(theta, dtype=np.float64)
            if theta.shape != (n,):
                raise ValueError(f"expected {n} parameters, got {theta.shape}")
            self.theta = theta.copy()
            self._bind()

    @classmethod
    def for_game(cls, game, hidden=DEFAULT_HIDDEN, v_max=24.0, seed=0) -> "Network":
        return cls(2 * game.cells + 1, game.cells, hidden, v_max, seed)

    def _shapes(self):
        sizes = (self.input_size,) + self.hidden
        shapes = []
        for a, b in zip(sizes[:-1], sizes[1:]):
            shapes += [(a, b), (b,)]
        last = sizes[-1]
        shapes += [(last, self.policy_size), (self.policy_size,), (last, 1), (1,)]
        return shapes

    def _bind(self):
        self.params = []
        off = 0
        for s in self.shapes:
            size = math.prod(s)
            self.params.append(self.theta[off: off + size].reshape(s))
            off += size

    def _init(self, rng):
        for i, p in enumerate(self.params):
            if p.ndim == 2:
                scale = 1.0 / math.sqrt(p.shape[0])
                if i >= len(self.params) - 4:
                    scale *= 0.1
                p[...] = rng.normal(0.0, scale, size=p.shape)
            else:
                p[...] = 0.0

    @property
    def n_params(self) -> int:
        return self.theta.size

    def copy(self) -> "Network":
        return Network(self.input_size, self.policy_size, self.hidden, self.v_max, theta=self.theta)

    def same_shape(self, other: "Network") -> bool:
        return (self.input_size, self.policy_size, self.hidden) == (other.input_size, other.policy_size, other.hidden)

    # --- inference ---------------------------------------------------------

    def infer(self, X: np.ndarray):
        """Raw (logits, cost) for a 2-D feature batch."""
        h = X
        nh = len(self.hidden)
        for i in range(nh):
            W, b = self.params[2 * i], self.params[2 * i + 1]
            h = np.tanh(np.einsum("bi,ij->bj", h, W) + b)
        Wp, bp, Wv, bv = self.params[-4:]
        logits = np.einsum("bi,ij->bj", h, Wp) + bp
        z = np.einsum("bi,ij->bj", h, Wv)[:, 0] + bv[0]
        return logits, self.v_max * _sigmoid(z)

    # --- training ----------------------------------------------------------

    def forward(self, X):
        acts = [X]
        h = X
        for i in range(len(self.hidden)):
            W, b = self.params[2 * i], self.params[2 * i + 1]
            h = np.tanh(h @ W + b)
            acts.append(h)
        Wp, bp, Wv, bv = self.params[-4:]
        logits = h @ Wp + bp
        z = (h @ Wv)[:, 0] + bv[0]
        return logits, z, acts

    def backward(self, acts, dlogits, dz) -> np.ndarray:
        grad = np.zeros_like(self.theta)
        gparams = []
        off = 0
        for s in self.shapes:
            size = math.prod(s)
            gparams.append(grad[off: off + size].reshape(s))
            off += size
        h = acts[-1]
        Wp, Wv = self.params[-4], self.params[-2]
        gparams[-4][...] = h.T @ dlogits
        gparams[-3][...] = dlogits.sum(axis=0)
        gparams[-2][...] = h.T @ dz[:, None]
        gparams[-1][...] = dz.sum()
        dh = dlogits @ Wp.T + dz[:, None] @ Wv.T
        for i in reversed(range(len(self.hidden))):
            h = acts[i + 1]
            da = dh * (1.0 - h * h)
            gparams[2 * i][...] = acts[i].T @ da
            gparams[2 * i + 1][...] = da.sum(axis=0)
            if i:
                dh = da @ self.params[2 * i].T
        return grad


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _masked_softmax(logits, mask):
    masked = np.where(mask, logits, -np.inf)
    m = masked.max(axis=1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.where(mask, np.exp(masked - m), 0.0)
    s = e.sum(axis=1, keepdims=True)
    return e / np.where(s > 0, s, 1.0)


def _legal_masks(X, cells):
    return (X[:, :cells] + X[:, cells: 2 * cells]) == 0


def evaluate(net: Network, s: GameState):
    """(policy over cells, cost) for a non-terminal position.  Illegal cells
    get probability exactly 0."""
    if s.outcome is not None:
        raise ContractViolation(f"evaluate called on terminal position {s!r}")
    X = encode(s)[None, :]
    logits, v = net.infer(X)
    p = _masked_softmax(logits, _legal_masks(X, s.game.cells))
    return p[0], float(v[0])


def evaluate_batch(net: Network, states: Sequence[GameState]):
    """Batched ``evaluate``; row i equals ``evaluate(net, states[i])`` exactly."""
    for s in states:
        if s.outcome is not None:
            raise ContractViolation(f"evaluate called on terminal position {s!r}")
    if not states:
        return np.zeros((0, net.policy_size)), np.zeros(0)
    X = encode_many(states)
    logits, v = net.infer(X)
    return _masked_softmax(logits, _legal_masks(X, states[0].game.cells)), v


def normalize_cost(raw_cost: float, v_max: float) -> float:
    """log2 of a node count, capped at ``v_max``."""
    return min(v_max, math.log2(raw_cost))


# --- samples and loss ------------------------------------------------------

SELFPLAY = "selfplay"
SOLVED = "solved-queue"


@dataclass
class TrainingSample:
    features: np.ndarray
    policy: np.ndarray | None  # None: excluded from the policy loss
    cost: float | None  # None: excluded from the cost loss
    source: str = SELFPLAY


@dataclass
class Batch:
    X: np.ndarray
    policy: np.ndarray
    policy_weight: np.ndarray
    cost: np.ndarray
    sources: tuple = ()
    cost_weight: np.ndarray | None = None

    def __len__(self):
        return self.X.shape[0]


def make_batch(samples: Sequence[TrainingSample], v_max: float) -> Batch:
    if not samples:
        raise ValueError("empty batch")
    X = np.stack([s.features for s in samples])
    cells = (X.shape[1] - 1) // 2
    P = np.zeros((len(samples), cells))
    w = np.zeros(len(samples))
    for i, s in enumerate(samples):
        if s.policy is not None:
            P[i] = s.policy
            w[i] = 1.0
    cw = np.array([0.0 if s.cost is None else 1.0 for s in samples])
    cost = np.clip(np.array([0.0 if s.cost is None else s.cost for s in samples], dtype=np.float64), 0.0, v_max)
    return Batch(X, P, w, cost, tuple(s.source for s in samples), cw)


def loss_and_grad(net: Network, batch: Batch, need_grad: bool = True):
    """Cross-entropy on the policy plus MSE on the cost scaled by 1/v_max^2."""
    X = batch.X
    B = X.shape[0]
    cells = net.policy_size
    logits, z, acts = net.forward(X)
    mask = _legal_masks(X, cells)
    p = _masked_softmax(logits, mask)
    masked = np.where(mask, logits, -np.inf)
    m = masked.max(axis=1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    lse = m + np.log(np.maximum(np.where(mask, np.exp(masked - m), 0.0).sum(axis=1, keepdims=True), 1e-300))
    logp = np.where(mask, logits - lse, 0.0)
    ce = -(batch.policy * logp).sum(axis=1)
    sig = _sigmoid(z)
    v = net.v_max * sig
    vm2 = net.v_max ** 2
    cw = np.ones(B) if batch.cost_weight is None else batch.cost_weight
    loss = float((batch.policy_weight * ce).sum() / B + (cw * (v - batch.cost) ** 2).sum() / B / vm2)
    if not need_grad:
        return loss, None
    tsum = batch.policy.sum(axis=1, keepdims=True)
    dlogits = batch.policy_weight[:, None] * (p * tsum - batch.policy) / B
    dz = 2.0 * cw * (v - batch.cost) / vm2 / B * net.v_max * sig * (1.0 - sig)
    return loss, net.backward(acts, dlogits, dz)


def loss(batch: Batch, net: Network) -> float:
    return loss_and_grad(net, batch, need_grad=False)[0]


def sgd_step(net: Network, batch: Batch, lr: float = 0.01, clip: float | None = 10.0) -> float:
    """One plain gradient-descent step in place; returns the pre-step loss."""
    value, grad = loss_and_grad(net, batch)
    if not math.isfinite(value) or not np.all(np.isfinite(grad)):
        raise TrainingDiverged(f"non-finite loss {value}; step aborted")
    if clip is not None:
        norm = float(np.linalg.norm(grad))
        if norm > clip:
            grad *= clip / norm
    net.theta -= lr * grad
    return value


# --- checkpoints -----------------------------------------------------------

CKPT_MAGIC = b"PCNK"
CKPT_FORMAT_VERSION = 1
_CKPT_FIXED = struct.Struct(">4sBIB")  # magic, format, checkpoint version, layer count
_CKPT_TAIL = struct.Struct(">dQQI")  # v_max, train step, samples, param count
CHECKSUM_SIZE = 8


def checkpoint_header_size(n_layers: int) -> int:
    """Bytes outside the parameter blob for a network with ``n_layers``
    layer sizes (input, hidden..., policy)."""
    return _CKPT_FIXED.size + 2 * n_layers + _CKPT_TAIL.size + CHECKSUM_SIZE


@dataclass
class Checkpoint:
    version: int
    net: Network
    train_step: int = 0
    samples: int = 0

    def to_bytes(self) -> bytes:
        return checkpoint_to_bytes(self.net, self.version, self.train_step, self.samples)


def _checksum(data: bytes) -> bytes:
    return hashlib.blake2b(data, digest_size=CHECKSUM_SIZE).digest()


def checkpoint_to_bytes(net: Network, version: int, train_step: int = 0, samples: int = 0) -> bytes:
    sizes = (net.input_size,) + net.hidden + (net.policy_size,)
    head = _CKPT_FIXED.pack(CKPT_MAGIC, CKPT_FORMAT_VERSION, version, len(sizes))
    head += struct.pack(f">{len(sizes)}H", *sizes)
    head += _CKPT_TAIL.pack(net.v_max, train_step, samples, net.n_params)
    body = head + net.theta.astype(">f8").tobytes()
    return body + _checksum(body)


def checkpoint_from_bytes(data: bytes) -> Checkpoint:
    if len(data) < _CKPT_FIXED.size:
        raise CheckpointError("truncated checkpoint header")
    magic, fmt, version, nsizes = _CKPT_FIXED.unpack_from(data, 0)
    if magic != CKPT_MAGIC:
        raise CheckpointError("bad checkpoint magic")
    if fmt != CKPT_FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format version {fmt}")
    off = _CKPT_FIXED.size
    if nsizes < 2 or len(data) < off + 2 * nsizes + _CKPT_TAIL.size:
        raise CheckpointError("truncated checkpoint header")
    sizes = struct.unpack_from(f">{nsizes}H", data, off)
    off += 2 * nsizes
    v_max, step, samples, count = _CKPT_TAIL.unpack_from(data, off)
    off += _CKPT_TAIL.size
    end = off + 8 * count
    if len(data) != end + CHECKSUM_SIZE:
        raise CheckpointError(f"checkpoint size {len(data)} does not match {count} parameters")
    if _checksum(data[:end]) != data[end:]:
        raise CheckpointError("checkpoint checksum mismatch")
    theta = np.frombuffer(data, dtype=">f8", count=count, offset=off).astype(np.float64)
    try:
        net = Network(sizes[0], sizes[-1], sizes[1:-1], v_max, theta=theta)
    except ValueError as e:
        raise CheckpointError(str(e)) from None
    return Checkpoint(version, net, step, samples)


class CheckpointStore:
    """Hands out checkpoints with strictly increasing versions."""

    def __init__(self):
        self.latest: Checkpoint | None = None

    def save(self, net: Network, version: int, train_step: int = 0, samples: int = 0) -> bytes:
        if self.latest is not None and version <= self.latest.version:
            raise CheckpointError(f"version {version} is not newer than {self.latest.version}")
        data = checkpoint_to_bytes(net, version, train_step, samples)
        self.latest = Checkpoint(version, net.copy(), train_step, samples)
        return data

    def publish(self, net: Network, train_step: int = 0, samples: int = 0) -> Checkpoint:
        version = 0 if self.latest is None else self.latest.version + 1
        self.save(net, version, train_step, samples)
        return self.latest


def save_checkpoint(path, net: Network, version: int, train_step: int = 0, samples: int = 0) -> None:
    with open(path, "wb") as f:
        f.write(checkpoint_to_bytes(net, version, train_step, samples))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        return checkpoint_from_bytes(f.read())
