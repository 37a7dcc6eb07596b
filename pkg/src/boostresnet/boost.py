"""Binary telescoping-sum boosting (BoostResNet).

Round t (t = 0..T) trains the module f_t (none at t = 0) and an auxiliary
classifier w_{t+1} on the current features g_t, giving the hypothesis
o_{t+1}(x) = w_{t+1}^T g_{t+1}(x) with |o_{t+1}| <= 1 on the training set.
The round then picks alpha_{t+1}, forms the weak module classifier
h_t = alpha_{t+1} o_{t+1} - alpha_t o_t and reweights the examples.

Index conventions used throughout:

    edge_{t+1}  = sum_i D_t(i) y_i o_{t+1}(x_i)
    alpha_{t+1} = 1/2 ln((1 + edge_{t+1}) / (1 - edge_{t+1}))   (closed form)
    gamma_t^2   = (edge_{t+1}^2 - edge_t^2) / (1 - edge_t^2)

with D_0 uniform, alpha_0 = 0, o_0 = 0 and edge_0 = 0.
"""

import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .numkit import Rng, logsumexp
from .oracle import OracleConfig, OracleError, train_block
from .resnet import FeatureBatch, TrainedResNet, block_forward

log = logging.getLogger(__name__)

SATURATION_EDGE = 1.0 - 1e-9
ALPHA_MAX = 20.0


class BoostStateError(RuntimeError):
    """Boosting state violates a precondition (unnormalized or saturated)."""


class RoundError(RuntimeError):
    """A boosting round failed; carries the round index and oracle diagnostics."""

    def __init__(self, round_index, message, diagnostics=None):
        super().__init__(f"round {round_index}: {message}")
        self.round_index = round_index
        self.diagnostics = diagnostics or {}


def _check_dist(dist, tol=1e-8):
    s = float(np.sum(dist))
    if abs(s - 1.0) > tol or np.any(dist < 0):
        raise BoostStateError(f"distribution is not normalized (sum={s!r})")


def edge(o_values, y, dist):
    """Weighted correlation sum_i D(i) y_i o_i."""
    o_values = np.asarray(o_values, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    dist = np.asarray(dist, dtype=np.float64)
    if not (o_values.shape == y.shape == dist.shape):
        raise ValueError("edge: length mismatch")
    _check_dist(dist)
    return float(np.sum(dist * y * o_values))


def clamp_edge(g):
    """Clamp to +-(1 - 1e-9); returns (clamped, saturated)."""
    if abs(g) >= SATURATION_EDGE:
        return math.copysign(SATURATION_EDGE, g), True
    return float(g), False


def alpha_from_edge(g):
    g, _ = clamp_edge(g)
    return math.atanh(g)  # = 1/2 ln((1 + g) / (1 - g)), exactly odd


def golden_section_min(f, lo, hi, tol=1e-10, max_iter=200):
    """Minimize a unimodal ``f`` on [lo, hi]; the endpoints are also candidates."""
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(max_iter):
        if b - a <= tol:
            break
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    best_x, best_f = (c, fc) if fc <= fd else (d, fd)
    for x_end in (lo, hi):
        fe = f(x_end)
        if fe <= best_f:
            best_x, best_f = x_end, fe
    return best_x


def z_of_alpha(alpha, o_next, o_prev, alpha_prev, y, dist):
    """Z_t(alpha) = sum_i D_t(i) exp(-y_i (alpha o_next_i - alpha_prev o_prev_i))."""
    x = -y * (alpha * o_next - alpha_prev * o_prev)
    return float(np.exp(logsumexp(x + np.log(dist))))


def alpha_line_search(o_next, o_prev, alpha_prev, y, dist, upper=ALPHA_MAX, tol=1e-10):
    """argmin over [0, upper] of Z_t(alpha) by golden-section search (Z_t is convex)."""
    o_next = np.asarray(o_next, dtype=np.float64)
    o_prev = np.asarray(o_prev, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    dist = np.asarray(dist, dtype=np.float64)
    _check_dist(dist)
    if not np.any(o_next * y):
        return 0.0
    with np.errstate(divide="ignore"):
        log_d = np.log(dist)
    base = y * alpha_prev * o_prev + log_d
    margin = y * o_next

    def log_z(a):
        return logsumexp(base - a * margin)

    a = golden_section_min(log_z, 0.0, upper, tol)
    return float(_newton_polish(a, base, margin, upper))


def _newton_polish(a, base, margin, upper, steps=4):
    """Refine an interior minimizer by Newton steps on d/da log Z.

    Golden-section search on function values stalls near sqrt(machine eps);
    the derivative -E_p[margin] has a root resolvable to full precision.
    """
    if a <= 0.0 or a >= upper:
        return a
    for _ in range(steps):
        x = base - a * margin
        p = np.exp(x - x.max())
        p /= p.sum()
        mean = float(np.sum(p * margin))
        var = float(np.sum(p * (margin - mean) ** 2))
        if var <= 0.0:
            break
        a_new = a + mean / var
        if not 0.0 < a_new < upper or abs(a_new - a) > 1e-4:
            break
        a = a_new
    return a


def weak_module_value(o_next, o_prev, alpha_next, alpha_prev):
    """h = alpha_next * o_next - alpha_prev * o_prev."""
    o_next = np.asarray(o_next, dtype=np.float64)
    o_prev = np.asarray(o_prev, dtype=np.float64)
    if o_next.shape != o_prev.shape:
        raise ValueError("weak_module_value: length mismatch")
    return alpha_next * o_next - alpha_prev * o_prev


def log_z_and_reweight(h, y, dist):
    """(log Z_t, D_{t+1}) computed with a max-shift on the exponents."""
    h = np.asarray(h, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    dist = np.asarray(dist, dtype=np.float64)
    _check_dist(dist)
    with np.errstate(divide="ignore"):
        x = -y * h + np.log(dist)
    log_z = logsumexp(x)
    nxt = np.exp(x - log_z)
    return float(log_z), nxt / nxt.sum()


def z_and_reweight(h, y, dist):
    """(Z_t, D_{t+1}); Z_t = sum_i D_t(i) exp(-y_i h_i)."""
    log_z, nxt = log_z_and_reweight(h, y, dist)
    return math.exp(log_z), nxt


def gamma_t(edge_next, edge_prev):
    """Normalized edge improvement; negative (signed) when the edge regresses."""
    if abs(edge_prev) >= 1.0:
        raise BoostStateError(f"previous edge {edge_prev!r} is saturated")
    num = edge_next ** 2 - edge_prev ** 2
    val = math.sqrt(abs(num) / (1.0 - edge_prev ** 2))
    return val if num >= 0 else -val


def weighted_covariance(a, b, w):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    w = w / w.sum()
    return float(np.sum(w * a * b) - np.sum(w * a) * np.sum(w * b))


def _sign(x, tol=1e-12):
    # covariances within rounding noise of zero count as zero
    return 0 if abs(x) <= tol else int(np.sign(x))


@dataclass
class WeakLearningRow:
    round: int
    gamma: float
    satisfied: bool
    covariance: float = float("nan")
    covariance_sign: int = 0


def weak_learning_check(edge_history, threshold, covariances=None):
    """Per-round gamma_t and pass/fail against ``threshold``.

    ``edge_history`` is [edge_0, edge_1, ...] starting with edge_0 = 0 (or any
    leading reference edge). A round passes when gamma_t >= threshold and the
    recorded covariance (if given) is non-positive.
    """
    if len(edge_history) < 2:
        raise ValueError("need at least two edges")
    rows = []
    for t in range(len(edge_history) - 1):
        gm = gamma_t(edge_history[t + 1], edge_history[t])
        cov = float("nan") if covariances is None else float(covariances[t])
        ok = gm >= threshold and not (covariances is not None and cov > 0)
        rows.append(WeakLearningRow(t, gm, ok, cov, 0 if math.isnan(cov) else _sign(cov)))
    return rows


@dataclass
class BoostConfig:
    t_max: int = 10
    hidden: int = 8
    gamma_threshold: float = 0.001
    patience: int = 3
    alpha_mode: str = None
    seed: int = 0
    oracle: OracleConfig = field(default_factory=OracleConfig)
    record_wallclock: bool = False

    def __post_init__(self):
        if isinstance(self.oracle, dict):
            self.oracle = OracleConfig(**self.oracle)
        if int(self.t_max) < 0:
            raise ValueError("t_max must be >= 0")
        if int(self.hidden) < 1:
            raise ValueError("hidden must be >= 1")
        if int(self.patience) < 1:
            raise ValueError("patience must be >= 1")
        if self.alpha_mode not in (None, "exact", "closed-form"):
            raise ValueError("alpha_mode must be 'exact' or 'closed-form'")
        self.t_max, self.hidden, self.patience = int(self.t_max), int(self.hidden), int(self.patience)

    def resolved_alpha_mode(self, task="binary"):
        """None picks the task default: exact line search (binary), closed form (multiclass)."""
        if self.alpha_mode is not None:
            return self.alpha_mode
        return "exact" if task == "binary" else "closed-form"

    def to_dict(self):
        d = asdict(self)
        d["oracle"] = self.oracle.to_dict()
        return d


@dataclass
class HypothesisModule:
    aux_classifier: np.ndarray
    level: int
    values: np.ndarray = None


@dataclass
class BoostState:
    dist: np.ndarray
    alpha: float = 0.0
    edge: float = 0.0
    round: int = 0
    o_values: np.ndarray = None
    aux: np.ndarray = None
    ensemble: np.ndarray = None
    log_z_product: float = 0.0
    z_history: list = field(default_factory=list)
    edge_history: list = field(default_factory=lambda: [0.0])
    gamma_history: list = field(default_factory=list)

    @classmethod
    def initial(cls, m):
        return cls(dist=np.full(m, 1.0 / m), o_values=np.zeros(m), ensemble=np.zeros(m))


@dataclass
class RoundMetrics:
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
    covariance: float = 0.0
    z_covariance: float = 0.0
    product_bound: float = 1.0
    z_bound: float = float("inf")
    alpha_closed_form: float = 0.0
    saturated: bool = False
    flipped: bool = False
    dist_closed_form_err: float = 0.0
    oracle_loss: float = float("nan")
    grad_check: float = float("nan")


CSV_COLUMNS = ["round", "edge", "gamma", "alpha", "Z", "Z_product", "train_err",
               "train_err_bound", "covariance_sign", "wallclock_ms"]


class BlockOracle:
    """Default oracle: ``train_block`` with a fixed config and hidden width."""

    def __init__(self, cfg, hidden, task="binary", n_classes=None):
        self.cfg, self.hidden, self.task, self.n_classes = cfg, hidden, task, n_classes

    def __call__(self, features, y, train_module, init_aux, dist, rng):
        return train_block(features, y, self.cfg, self.task, self.hidden, train_module,
                           init_aux, dist, self.n_classes, rng)


def distribution_closed_form_error(dist, y, alpha, o_values):
    """Max relative deviation of D from exp(-y alpha o) / normalizer."""
    x = -y * alpha * o_values
    ref = np.exp(x - logsumexp(x))
    return float(np.max(np.abs(dist - ref) / ref))


def scale_hypothesis(w, g):
    """Rescale w so that max_i |w^T g_i| = 1 (a zero hypothesis stays zero); returns (w, o)."""
    o = g @ w
    mx = float(np.max(np.abs(o))) if o.size else 0.0
    if mx > 0.0:
        w = w / mx
        o = o / mx
    return w, o


def boost_round(state, features, y, oracle, config, rng, sums=None):
    """One boosting round; returns (block, hypothesis, new_state, new_features, metrics).

    ``sums`` carries running totals (sum of signed gamma^2 and the product
    bound) between rounds; pass None on round 0. gamma^2 enters the bounds
    as the signed gamma*|gamma|, i.e. the raw ratio defining it.
    """
    t = state.round
    _check_dist(state.dist, 1e-10)
    y = np.asarray(y, dtype=np.float64)
    started = time.perf_counter()
    train_module = t > 0
    try:
        res = oracle(features, y, train_module, state.aux, state.dist, rng)
    except OracleError as exc:
        raise RoundError(t, str(exc), exc.diagnostics) from exc

    block = res.block if train_module else None
    nxt = block_forward(block, features) if block is not None else features
    w, o_next = scale_hypothesis(np.asarray(res.classifier, dtype=np.float64), nxt.features)
    raw_edge = edge(o_next, y, state.dist)
    flipped = raw_edge < 0
    if flipped:
        # -o has the opposite edge; folding the sign into w keeps alpha >= 0
        w, o_next, raw_edge = -w, -o_next, -raw_edge
    edge_next, saturated = clamp_edge(raw_edge)
    a_closed = alpha_from_edge(edge_next)
    if config.resolved_alpha_mode("binary") == "exact":
        a_next = alpha_line_search(o_next, state.o_values, state.alpha, y, state.dist)
    else:
        a_next = a_closed

    h = weak_module_value(o_next, state.o_values, a_next, state.alpha)
    log_z, dist_next = log_z_and_reweight(h, y, state.dist)
    z = math.exp(log_z)
    gm = gamma_t(edge_next, state.edge)

    # weak-learning covariance on raw hypotheses; the alpha-scaled one governs the per-round Z bound
    cov = weighted_covariance(np.exp(-y * o_next), np.exp(y * state.o_values), state.dist)
    z_cov = weighted_covariance(np.exp(-a_next * y * o_next),
                                    np.exp(state.alpha * y * state.o_values), state.dist)

    ensemble = state.ensemble + h
    train_err = float(np.mean(y * ensemble <= 0))
    sq_sum, prod = (0.0, 1.0) if sums is None else sums
    sq_sum += gm * abs(gm)
    prod *= math.sqrt(max(1.0 - gm * abs(gm), 0.0))
    log_zp = state.log_z_product + log_z
    z_bound = math.sqrt((1.0 - edge_next ** 2) / (1.0 - state.edge ** 2))

    new_state = BoostState(
        dist=dist_next, alpha=a_next, edge=edge_next, round=t + 1, o_values=o_next, aux=w,
        ensemble=ensemble, log_z_product=log_zp,
        z_history=state.z_history + [z],
        edge_history=state.edge_history + [edge_next],
        gamma_history=state.gamma_history + [gm],
    )
    elapsed = (time.perf_counter() - started) * 1000.0
    metrics = RoundMetrics(
        round=t, edge=edge_next, gamma=gm, alpha=a_next, Z=z, Z_product=math.exp(log_zp),
        train_err=train_err, train_err_bound=math.exp(-0.5 * sq_sum),
        covariance_sign=_sign(cov),
        wallclock_ms=round(elapsed, 3) if config.record_wallclock else 0.0,
        covariance=cov, z_covariance=z_cov, product_bound=prod, z_bound=z_bound,
        alpha_closed_form=a_closed, saturated=saturated, flipped=flipped,
        dist_closed_form_err=distribution_closed_form_error(dist_next, y, a_next, o_next),
        oracle_loss=res.final_loss, grad_check=res.grad_check,
    )
    hyp = HypothesisModule(w, nxt.level, o_next)
    return block, hyp, new_state, nxt, metrics, (sq_sum, prod)


@dataclass
class BoostRun:
    """Everything a training run produced besides the network itself."""

    rounds: list
    history: list
    state: BoostState
    config: BoostConfig
    task: str = "binary"

    @property
    def alphas(self):
        return [a for a, _ in self.history]


def labels_to_pm1(labels):
    labels = np.asarray(labels)
    uniq = set(np.unique(labels).tolist())
    if uniq <= {-1, 1}:
        return labels.astype(np.float64)
    if uniq <= {0, 1}:
        return 2.0 * labels.astype(np.float64) - 1.0
    raise ValueError(f"binary labels must be in {{0,1}} or {{-1,+1}}, got {sorted(uniq)}")


def train_boostresnet(x, y, config=None, oracle=None, callback=None):
    """Train a binary MLP-ResNet block by block.

    ``y`` may be {0,1} or {-1,+1}. Returns (TrainedResNet, BoostRun).
    Stops after round ``t_max`` or when gamma_t < ``gamma_threshold`` for
    ``patience`` consecutive rounds.
    """
    config = config or BoostConfig()
    x = np.asarray(x, dtype=np.float64)
    y = labels_to_pm1(y)
    oracle = oracle or BlockOracle(config.oracle, config.hidden)
    master = Rng(config.seed)
    state = BoostState.initial(x.shape[0])
    features = FeatureBatch(x, 1)
    blocks, history, rounds = [], [], []
    sums, below = None, 0
    for t in range(config.t_max + 1):
        block, hyp, state, features, metrics, sums = boost_round(
            state, features, y, oracle, config, master.spawn(f"round-{t}"), sums)
        if block is not None:
            blocks.append(block)
        history.append((state.alpha, hyp.aux_classifier))
        rounds.append(metrics)
        log.info("round %d: edge=%.4f gamma=%.4f alpha=%.4f Z=%.4f err=%.4f",
                 t, metrics.edge, metrics.gamma, metrics.alpha, metrics.Z, metrics.train_err)
        if callback is not None:
            callback(metrics)
        below = below + 1 if metrics.gamma < config.gamma_threshold else 0
        if below >= config.patience:
            log.info("stopping after round %d: gamma below threshold for %d rounds", t, below)
            break
    net = TrainedResNet(blocks, history[-1][1], history[-1][0], "binary", 2)
    return net, BoostRun(rounds, history, state, config, "binary")


ROUNDS_SCHEMA = "boostresnet.rounds/1"


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def write_rounds_csv(path, rounds, columns=None, schema=ROUNDS_SCHEMA):
    """Write per-round metrics; the first line names the schema version.

    Floats use repr(), which round-trips exactly, so reruns with the same
    seed produce byte-identical files.
    """
    columns = columns or CSV_COLUMNS
    lines = [f"# schema: {schema}", ",".join(columns)]
    for r in rounds:
        d = asdict(r) if not isinstance(r, dict) else r
        lines.append(",".join(_fmt(d[c]) for c in columns))
    with open(path, "w", newline="") as fh:
        fh.write("\n".join(lines) + "\n")


def read_rounds_csv(path):
    """Returns (schema, list of dicts); 'round' and 'covariance_sign' come back as ints."""
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    if not lines or not lines[0].startswith("# schema: "):
        raise ValueError(f"{path}: missing schema line")
    schema = lines[0][len("# schema: "):]
    header = lines[1].split(",")
    rows = []
    for ln in lines[2:]:
        vals = ln.split(",")
        if len(vals) != len(header):
            raise ValueError(f"{path}: row has {len(vals)} fields, expected {len(header)}")
        row = {}
        for k, v in zip(header, vals):
            row[k] = int(v) if k in ("round", "covariance_sign") else float(v)
        rows.append(row)
    return schema, rows
