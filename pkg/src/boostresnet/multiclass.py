"""Multiclass telescoping-sum boosting with exponential-loss cost matrices.

Scores s(i, l) accumulate the weak module classifiers; after round t they
equal alpha_{t+1} * o_{t+1}(x_i, l) where o is a softmax over per-class
linear scores W^T g. Round t builds the cost matrix from the scores before
the round, measures the edge of o_{t+1} against it and sets alpha_{t+1}.

    Z_t = sum_i sum_{l != y_i} exp(s_t(i, l) - s_t(i, y_i)),   Z_{-1} = m (C - 1)
"""

import logging
import math
import time
from dataclasses import dataclass

import numpy as np

from .boost import (ALPHA_MAX, BlockOracle, BoostConfig, BoostRun, HypothesisModule,
                    RoundError, alpha_from_edge, clamp_edge, gamma_t, golden_section_min, _sign)
from .numkit import NumericalError, Rng, logsumexp, softmax
from .oracle import OracleError
from .resnet import FeatureBatch, TrainedResNet, block_forward

log = logging.getLogger(__name__)


@dataclass
class CostMatrix:
    values: np.ndarray

    @property
    def m(self):
        return self.values.shape[0]

    @property
    def C(self):
        return self.values.shape[1]

    def row_sum_error(self):
        return float(np.max(np.abs(self.values.sum(axis=1)))) if self.m else 0.0


def _check_labels(labels, C):
    labels = np.asarray(labels)
    if labels.ndim != 1 or not np.issubdtype(labels.dtype, np.integer):
        raise ValueError("labels must be a 1-D integer array")
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise ValueError(f"labels must lie in 0..{C - 1}")
    return labels.astype(np.int64)


def _score_gaps(s, labels):
    """s(i, l) - s(i, y_i) with the true-class entry set to -inf."""
    m = s.shape[0]
    d = s - s[np.arange(m), labels][:, None]
    d[np.arange(m), labels] = -np.inf
    return d


def cost_matrix(s, labels):
    """Optimal exponential-loss costs: exp(s_l - s_y) off the label, minus their sum on it.

    Raises NumericalError when a gap exceeds the float64 exponent range, since
    the cost itself is then unrepresentable.
    """
    s = np.asarray(s, dtype=np.float64)
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")
    labels = _check_labels(labels, s.shape[1])
    m = s.shape[0]
    d = _score_gaps(s, labels)
    with np.errstate(over="ignore"):
        off = np.exp(d)
    off[np.arange(m), labels] = 0.0
    if not np.all(np.isfinite(off.sum(axis=1))):
        raise NumericalError("cost matrix overflow: a score gap exceeds the float64 range")
    values = off.copy()
    values[np.arange(m), labels] = -off.sum(axis=1)
    return CostMatrix(values)


def multiclass_edge(cost, o):
    """-sum_i <C_i, o_i> / sum_i sum_{l != y_i} C(i, l); saturates at 1 - 1e-9 for a zero denominator."""
    c = cost.values if isinstance(cost, CostMatrix) else np.asarray(cost, dtype=np.float64)
    o = np.asarray(o, dtype=np.float64)
    if c.shape != o.shape:
        raise ValueError(f"cost {c.shape} and hypothesis {o.shape} disagree")
    denom = float(np.sum(np.where(c > 0, c, 0.0)))
    if denom <= 0.0:
        return clamp_edge(1.0)[0]
    return float(-np.sum(c * o) / denom)


def exp_loss_multiclass(s, labels):
    """(1/m) sum_i sum_{l != y_i} exp(s(i, l) - s(i, y_i))."""
    s = np.asarray(s, dtype=np.float64)
    labels = _check_labels(labels, s.shape[1])
    if s.shape[0] == 0:
        return 0.0
    return float(np.exp(log_z_multiclass(s, labels)) / s.shape[0])


def log_z_multiclass(s, labels):
    """log of the unnormalized Z = sum_i sum_{l != y_i} exp(s(i, l) - s(i, y_i))."""
    d = _score_gaps(np.asarray(s, dtype=np.float64), labels)
    return logsumexp(d[np.isfinite(d)])


def multiclass_error(s, labels):
    return float(np.mean(np.argmax(s, axis=1) != labels))


def alpha_line_search_multiclass(o_next, labels, upper=ALPHA_MAX, tol=1e-10):
    """argmin over [0, upper] of Z_t(alpha), using s_t = alpha * o_{t+1}."""
    d = _score_gaps(np.asarray(o_next, dtype=np.float64), labels)
    gaps = d[np.isfinite(d)]
    if not np.any(gaps):
        return 0.0
    return float(golden_section_min(lambda a: logsumexp(a * gaps), 0.0, upper, tol))


@dataclass
class MulticlassRoundMetrics:
    round: int
    edge: float
    gamma: float
    alpha: float
    Z: float
    Z_product: float
    train_err: float
    train_err_bound: float
    covariance_sign: int
    wallclock_ms: float = 0.0
    exp_loss: float = 0.0
    covariance: float = 0.0
    cost_row_sum_err: float = 0.0
    z_ratio_bound: float = float("inf")
    score_closed_form_err: float = 0.0
    saturated: bool = False
    oracle_loss: float = float("nan")
    grad_check: float = float("nan")


MULTICLASS_CSV_COLUMNS = ["round", "edge", "gamma", "alpha", "Z", "Z_product", "train_err",
                          "train_err_bound", "covariance_sign", "wallclock_ms", "exp_loss"]


def _covariance(a, b):
    return float(np.mean(a * b) - np.mean(a) * np.mean(b)) if a.size else 0.0


def train_boostresnet_multiclass(x, labels, n_classes=None, config=None, oracle=None,
                                 callback=None):
    """Train a multiclass MLP-ResNet block by block. Returns (TrainedResNet, BoostRun).

    Reported per round: Z is the ratio Z_t / Z_{t-1}, Z_product the normalized
    Z_t / (m (C-1)), exp_loss = Z_t / m and train_err_bound
    (C-1) exp(-1/2 sum gamma |gamma|).
    """
    config = config or BoostConfig()
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels)
    C = int(n_classes if n_classes is not None else labels.max() + 1)
    if C < 2:
        raise ValueError("need at least two classes")
    labels = _check_labels(labels, C)
    m = x.shape[0]
    mode = config.resolved_alpha_mode("multiclass")
    oracle = oracle or BlockOracle(config.oracle, config.hidden, "multiclass", C)
    master = Rng(config.seed)

    s = np.zeros((m, C))
    o_prev = np.full((m, C), 1.0 / C)
    alpha_prev, edge_prev, aux = 0.0, 0.0, None
    log_z_prev = math.log(m * (C - 1))
    features = FeatureBatch(x, 1)
    blocks, history, rounds = [], [], []
    sq_sum, below = 0.0, 0
    for t in range(config.t_max + 1):
        started = time.perf_counter()
        cost = cost_matrix(s, labels)
        try:
            res = oracle(features, labels, t > 0, aux, None, master.spawn(f"round-{t}"))
        except OracleError as exc:
            raise RoundError(t, str(exc), exc.diagnostics) from exc
        block = res.block if t > 0 else None
        nxt = block_forward(block, features) if block is not None else features
        w = np.asarray(res.classifier, dtype=np.float64)
        o_next = softmax(nxt.features @ w, axis=1)

        raw_edge = multiclass_edge(cost, o_next)
        edge_next, saturated = clamp_edge(raw_edge)
        if mode == "exact":
            a_next = alpha_line_search_multiclass(o_next, labels)
        else:
            a_next = alpha_from_edge(edge_next)

        s = s + (a_next * o_next - alpha_prev * o_prev)
        log_z = log_z_multiclass(s, labels)
        gm = gamma_t(edge_next, edge_prev)
        sq_sum += gm * abs(gm)
        cov = _covariance(np.sum(cost.values * o_next, axis=1),
                          np.sum(cost.values * o_prev, axis=1))
        ratio = math.exp(log_z - log_z_prev)
        metrics = MulticlassRoundMetrics(
            round=t, edge=edge_next, gamma=gm, alpha=a_next, Z=ratio,
            Z_product=math.exp(log_z) / (m * (C - 1)),
            train_err=multiclass_error(s, labels),
            train_err_bound=(C - 1) * math.exp(-0.5 * sq_sum),
            covariance_sign=_sign(cov),
            wallclock_ms=round((time.perf_counter() - started) * 1000.0, 3) if config.record_wallclock else 0.0,
            exp_loss=math.exp(log_z) / m, covariance=cov,
            cost_row_sum_err=cost.row_sum_error(),
            z_ratio_bound=math.sqrt(max(1.0 - gm * abs(gm), 0.0)),
            score_closed_form_err=float(np.max(np.abs(s - a_next * o_next))),
            saturated=saturated, oracle_loss=res.final_loss, grad_check=res.grad_check,
        )
        if block is not None:
            blocks.append(block)
        history.append((a_next, w))
        rounds.append(metrics)
        log.info("round %d: edge=%.4f gamma=%.4f alpha=%.4f err=%.4f",
                 t, edge_next, gm, a_next, metrics.train_err)
        if callback is not None:
            callback(metrics)
        features, aux = nxt, w
        alpha_prev, o_prev, edge_prev, log_z_prev = a_next, o_next, edge_next, log_z
        below = below + 1 if gm < config.gamma_threshold else 0
        if below >= config.patience:
            log.info("stopping after round %d: gamma below threshold for %d rounds", t, below)
            break
    net = TrainedResNet(blocks, history[-1][1], history[-1][0], "multiclass", C)
    return net, BoostRun(rounds, history, None, config, "multiclass")


def hypothesis_module(w, g):
    """Simplex-valued hypothesis rows softmax(W^T g)."""
    return HypothesisModule(np.asarray(w), g.level, softmax(g.features @ w, axis=1))
