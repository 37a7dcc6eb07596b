"""Computable diagnostics: training-error bounds, margins and the generalization bound.

gamma_t^2 enters every bound as the signed gamma_t * |gamma_t|, which is the
raw ratio (edge_{t+1}^2 - edge_t^2) / (1 - edge_t^2). Rounds whose edge
regresses therefore loosen the bounds instead of being ignored.
"""

import math
from dataclasses import asdict, dataclass, field

import numpy as np


class SaturationError(ValueError):
    """The final edge is 1 (or more), so the margin bound's base is undefined."""


class ParameterError(ValueError):
    """Bound parameters fall outside the formula's domain."""


def _signed_sq(gammas):
    g = np.asarray(list(gammas), dtype=np.float64)
    return g * np.abs(g)


@dataclass
class TrainingErrorBound:
    exponential: float
    product: float
    exponential_clipped: float

    def to_dict(self):
        return asdict(self)


def training_error_bound(gammas):
    """exp(-1/2 sum gamma^2) and the tighter prod sqrt(1 - gamma^2).

    ``exponential_clipped`` is exp(-1/2 sum max(gamma, 0)^2), which drops
    regressing rounds; it equals ``exponential`` when every gamma >= 0.
    """
    sq = _signed_sq(gammas)
    g = np.asarray(list(gammas), dtype=np.float64)
    prod = float(np.prod(np.sqrt(np.maximum(1.0 - sq, 0.0))))
    return TrainingErrorBound(
        exponential=math.exp(-0.5 * float(np.sum(sq))),
        product=prod,
        exponential_clipped=math.exp(-0.5 * float(np.sum(np.maximum(g, 0.0) ** 2))),
    )


def margins(net, x, y):
    """Binary: y F(x) with y in {-1, +1} (or {0, 1}); multiclass: F_y - max_{l != y} F_l."""
    s = net.scores(x)
    if net.alpha_final < 0:
        s = -s
    y = np.asarray(y)
    if net.task == "binary":
        ypm = y.astype(np.float64)
        if set(np.unique(y).tolist()) <= {0, 1}:
            ypm = 2.0 * ypm - 1.0
        return ypm * s
    m = s.shape[0]
    true = s[np.arange(m), y]
    other = s.copy()
    other[np.arange(m), y] = -np.inf
    return true - other.max(axis=1)


@dataclass
class MarginReport:
    thetas: list
    fractions: list
    margin_bound: list
    min_margin: float
    median_margin: float

    def to_dict(self):
        return asdict(self)


def margin_distribution(net, x, y, thetas=(0.0, 0.1, 0.5), alpha_final=None, z_product=None):
    """Empirical Pr_S(margin <= theta) on a theta grid.

    When ``z_product`` (the product of the per-round Z) is supplied, each
    theta also gets exp(theta * alpha_{T+1}) * prod Z, with alpha_{T+1}
    defaulting to the net's own scalar; otherwise the bound entry is None.
    """
    mg = margins(net, x, y)
    thetas = [float(t) for t in thetas]
    fractions = [float(np.mean(mg <= t)) for t in thetas]
    a = net.alpha_final if alpha_final is None else alpha_final
    bound = [None if z_product is None else math.exp(t * a) * z_product for t in thetas]
    return MarginReport(thetas, fractions, bound, float(np.min(mg)), float(np.median(mg)))


def margin_fraction_bound(theta, edge_final, gammas, alpha_final=None, z_product=None):
    """(1 + 2/(1/edge - 1))^(theta/2) exp(-1/2 sum gamma^2); returns (bound, exact).

    ``exact`` is exp(theta * alpha_{T+1}) * prod Z when both are supplied,
    else None. Vacuous values (> 1) are returned as they are.
    """
    if edge_final >= 1.0:
        raise SaturationError(f"final edge {edge_final!r} is saturated")
    if edge_final <= 0.0:
        raise ValueError("final edge must be positive")
    base = 1.0 + 2.0 / (1.0 / edge_final - 1.0)
    bound = base ** (theta / 2.0) * math.exp(-0.5 * float(np.sum(_signed_sq(gammas))))
    exact = None
    if alpha_final is not None and z_product is not None:
        exact = math.exp(theta * alpha_final) * z_product
    return bound, exact


# ---------------------------------------------------------------------------
# generalization bound

def block_l1_bound(block):
    """1 + (max incoming l1 norm over w_in units) * (max incoming l1 norm over w_out units).

    The leading 1 is the identity shortcut; the product bounds the module path.
    """
    a = float(np.max(np.sum(np.abs(block.w_in), axis=0))) if block.w_in.size else 0.0
    b = float(np.max(np.sum(np.abs(block.w_out), axis=0))) if block.w_out.size else 0.0
    return 1.0 + a * b


def path_products(layer_bounds):
    """Lambda_t = prod_{t' <= t} 2 Lambda_{t', t'-1}."""
    out, acc = [], 1.0
    for lb in layer_bounds:
        acc *= 2.0 * lb
        out.append(acc)
    return out


def beta_term(theta, m, T, delta):
    log_t = math.log(T)
    inner = theta ** 2 * m / log_t
    if inner <= 1.0:
        raise ParameterError(
            f"theta^2 m = {theta ** 2 * m:.4g} must exceed log T = {log_t:.4g}; use a larger theta or m")
    k = math.ceil((4.0 / theta ** 2) * math.log(inner))
    return math.sqrt(k * log_t / m + math.log(2.0 / delta) / (2.0 * m))


@dataclass
class ComplexityReport:
    r_inf: float
    layer_bounds: list
    path_products: list
    c0: float
    theta: float
    delta: float
    n: int
    m: int
    T: int
    margin_term: float
    complexity_term: float
    log_t_term: float
    beta: float
    total: float
    terms: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)


def complexity_terms(layer_bounds, c0, r_inf, n, m, T, theta, delta, margin_fraction=0.0):
    """Evaluate every term of the bound from its raw ingredients."""
    if theta <= 0:
        raise ParameterError("theta must be positive")
    if not 0.0 < delta < 1.0:
        raise ParameterError("delta must lie in (0, 1)")
    if T < 2:
        raise ParameterError("the log T term needs T >= 2")
    lam = path_products(layer_bounds)
    complexity = (4.0 * c0 * r_inf / theta) * math.sqrt(math.log(2 * n) / (2 * m)) * sum(lam)
    log_t_term = (2.0 / theta) * math.sqrt(math.log(T) / m)
    beta = beta_term(theta, m, T, delta)
    total = margin_fraction + complexity + log_t_term + beta
    return ComplexityReport(
        r_inf=float(r_inf), layer_bounds=[float(v) for v in layer_bounds], path_products=lam,
        c0=float(c0), theta=float(theta), delta=float(delta), n=int(n), m=int(m), T=int(T),
        margin_term=float(margin_fraction), complexity_term=complexity, log_t_term=log_t_term,
        beta=beta, total=total,
        terms={"margin": float(margin_fraction), "complexity": complexity,
               "log_t": log_t_term, "beta": beta},
    )


def generalization_bound(net, x, y, theta, delta):
    """Margin fraction plus the Rademacher, log T and confidence terms for a trained net.

    Layer bounds are Lambda_{0,-1} = 1 for the input layer followed by one
    ``block_l1_bound`` per block; C0 is the l1 norm of the final classifier.
    """
    x = np.asarray(x, dtype=np.float64)
    T = net.depth
    if T < 2:
        raise ParameterError("the log T term needs T >= 2")
    layer = [1.0] + [block_l1_bound(b) for b in net.blocks]
    frac = float(np.mean(margins(net, x, y) <= theta))
    c0 = float(np.sum(np.abs(net.final_classifier)))
    r_inf = float(np.max(np.abs(x)))
    return complexity_terms(layer, c0, r_inf, net.n, x.shape[0], T, theta, delta, frac)


def bounds_report(net, x, y, run, thetas=(0.0, 0.1, 0.5), theta=None, delta=0.05):
    """JSON-ready {margin_report, complexity_report, training_error_bound, per_round}.

    ``complexity_report`` is None (with the reason recorded) when the
    generalization bound's domain conditions fail.
    """
    gammas = [r.gamma for r in run.rounds]
    zs = [r.Z for r in run.rounds]
    z_product = run.rounds[-1].Z_product if run.task == "binary" else None
    alpha = run.history[-1][0]
    mr = margin_distribution(net, x, y, thetas, alpha, z_product)
    theta = theta if theta is not None else max(thetas)
    try:
        cr = generalization_bound(net, x, y, theta, delta).to_dict()
    except ParameterError as exc:
        cr = {"error": str(exc)}
    return {
        "margin_report": mr.to_dict(),
        "complexity_report": cr,
        "training_error_bound": training_error_bound(gammas).to_dict(),
        "per_round": {"gamma": gammas, "z": zs},
    }
