"""Residual blocks, forward propagation and the assembled ResNet classifier."""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numkit import as_matrix, relu, softmax

MODEL_VERSION = 1


@dataclass
class ResidualBlock:
    """One MLP module ``f(x) = w_out^T relu(w_in^T x)``.

    ``w_in`` is ``n x k`` and ``w_out`` is ``k x n``; with row-vector batches
    this is ``relu(G @ w_in) @ w_out``.
    """

    w_in: np.ndarray
    w_out: np.ndarray

    def __post_init__(self):
        self.w_in = as_matrix(self.w_in, "w_in")
        self.w_out = as_matrix(self.w_out, "w_out")
        if self.w_in.shape != self.w_out.shape[::-1]:
            raise ValueError(
                f"block shapes disagree: w_in {self.w_in.shape}, w_out {self.w_out.shape}")

    @property
    def n(self):
        return self.w_in.shape[0]

    @property
    def k(self):
        return self.w_in.shape[1]

    @classmethod
    def zeros(cls, n, k):
        return cls(np.zeros((n, k)), np.zeros((k, n)))

    def module(self, g):
        """Module output f(g) for a batch ``g`` of shape (m, n)."""
        return relu(g @ self.w_in) @ self.w_out

    def copy(self):
        return ResidualBlock(self.w_in.copy(), self.w_out.copy())


@dataclass
class FeatureBatch:
    """Rows hold g_t(x_i) for one representation level t (level 1 is the raw input)."""

    features: np.ndarray
    level: int = 1

    def __post_init__(self):
        self.features = as_matrix(self.features, "features")

    @property
    def m(self):
        return self.features.shape[0]

    @property
    def n(self):
        return self.features.shape[1]


def _unwrap(g):
    return g.features if isinstance(g, FeatureBatch) else as_matrix(g, "features")


def block_forward(block, g):
    """Apply one residual block: g_{t+1} = f_t(g_t) + g_t."""
    if not isinstance(g, FeatureBatch):
        g = FeatureBatch(g)
    if g.n != block.n:
        raise ValueError(f"feature width {g.n} does not match block channels {block.n}")
    return FeatureBatch(block.module(g.features) + g.features, g.level + 1)


def propagate(blocks, x):
    """Return [g_1, ..., g_{T+1}] with g_1 = x."""
    out = [FeatureBatch(np.array(x, dtype=np.float64), 1)]
    for b in blocks:
        out.append(block_forward(b, out[-1]))
    return out


def module_sum(blocks, x):
    """x + sum_t f_t(g_t(x)), accumulated independently of the residual recursion."""
    x = as_matrix(x)
    total = x.copy()
    g = x
    for b in blocks:
        f = b.module(g)
        total = total + f
        g = g + f
    return total


@dataclass
class TrainedResNet:
    """Blocks f_1..f_T plus the top linear classifier.

    ``final_classifier`` is a length-n vector for binary tasks and an
    ``n x C`` matrix for multiclass tasks.
    """

    blocks: list
    final_classifier: np.ndarray
    alpha_final: float = 1.0
    task: str = "binary"
    n_classes: int = 2
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.final_classifier = np.asarray(self.final_classifier, dtype=np.float64)
        if self.task not in ("binary", "multiclass"):
            raise ValueError(f"unknown task {self.task!r}")
        want = 1 if self.task == "binary" else 2
        if self.final_classifier.ndim != want:
            raise ValueError(f"{self.task} classifier must be {want}-D")
        if self.task == "multiclass":
            self.n_classes = self.final_classifier.shape[1]
        for b in self.blocks:
            if b.n != self.n:
                raise ValueError(f"block has {b.n} channels, network has {self.n}")

    @property
    def n(self):
        return self.final_classifier.shape[0]

    @property
    def k(self):
        return self.blocks[0].k if self.blocks else 0

    @property
    def depth(self):
        return len(self.blocks)

    def features(self, x):
        g = np.array(x, dtype=np.float64)
        for b in self.blocks:
            g = b.module(g) + g
        return g

    def scores(self, x):
        """F(x) for a batch: shape (m,) binary, (m, C) multiclass."""
        x = as_matrix(x)
        if x.shape[1] != self.n:
            raise ValueError(f"input width {x.shape[1]} does not match network channels {self.n}")
        return self.features(x) @ self.final_classifier

    def predict(self, x):
        """Binary: sign(F) in {-1, 0, +1} (0 only on exact ties). Multiclass: argmax, lowest index on ties.

        A negative ``alpha_final`` flips the ensemble, so predictions follow
        sign(alpha_final) * F.
        """
        s = self.scores(x)
        if self.alpha_final < 0:
            s = -s
        if self.task == "binary":
            return np.sign(s)
        return np.argmax(s, axis=1)

    def to_dict(self):
        return {
            "version": MODEL_VERSION,
            "task": self.task,
            "n": self.n,
            "k": self.k,
            "T": self.depth,
            "n_classes": self.n_classes,
            "blocks": [{"w_in": b.w_in.tolist(), "w_out": b.w_out.tolist()} for b in self.blocks],
            "final_classifier": self.final_classifier.tolist(),
            "alpha_final": float(self.alpha_final),
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("version") != MODEL_VERSION:
            raise ValueError(f"unsupported model version {d.get('version')!r}")
        blocks = [ResidualBlock(np.array(b["w_in"], dtype=np.float64).reshape(d["n"], d["k"]),
                                np.array(b["w_out"], dtype=np.float64).reshape(d["k"], d["n"]))
                  for b in d["blocks"]]
        if len(blocks) != d["T"]:
            raise ValueError("model T does not match number of blocks")
        return cls(blocks, np.array(d["final_classifier"], dtype=np.float64),
                   float(d["alpha_final"]), d["task"], int(d.get("n_classes", 2)),
                   dict(d.get("meta", {})))

    def save(self, path):
        # json writes floats with repr(), the shortest string that round-trips exactly
        Path(path).write_text(json.dumps(self.to_dict()) + "\n")

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


def resnet_score(net, x):
    """Score of a single input vector (scalar for binary, C-vector for multiclass)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("resnet_score takes a single input vector")
    s = net.scores(x[None, :])[0]
    return float(s) if net.task == "binary" else s


def hypothesis_output(task, classifier, g):
    """o_t(x): w^T g for binary, softmax(W^T g) for multiclass."""
    s = g @ classifier
    return softmax(s, axis=1) if task == "multiclass" else s


def telescoping_check(net, history, x):
    """Max relative gap between sum_t h_t(x) and alpha_{T+1} * (network output).

    ``history`` lists (alpha_t, w_t) for t = 1..T+1, i.e. every round's
    auxiliary classifier with its scalar. For multiclass the network output is
    the simplex hypothesis softmax(F(x)).
    """
    if len(history) != net.depth + 1:
        raise ValueError(f"history has {len(history)} rounds, network needs {net.depth + 1}")
    x = as_matrix(x)
    levels = propagate(net.blocks, x)
    total = 0.0
    a_prev, o_prev = 0.0, 0.0
    for (a, w), g in zip(history, levels):
        o = hypothesis_output(net.task, np.asarray(w, dtype=np.float64), g.features)
        total = total + (a * o - a_prev * o_prev)
        a_prev, o_prev = a, o
    target = net.alpha_final * hypothesis_output(net.task, net.final_classifier, levels[-1].features)
    gap = np.abs(total - target) / (1.0 + np.abs(target))
    return float(np.max(gap)) if gap.size else 0.0
