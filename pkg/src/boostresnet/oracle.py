"""Block-training oracle and the end-to-end backprop baseline.

The oracle fits one residual block plus an auxiliary linear classifier to the
exponential loss

    binary:      (1/m) sum_i exp(-y_i * a * v^T [f(g_i) + g_i])
    multiclass:  sum_i sum_{l != y_i} exp(a * (S_il - S_iy_i)) / (m (C - 1)),
                 S_i = V^T [f(g_i) + g_i]

with Adam on minibatches. All gradients are written out by hand.
"""

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .numkit import NumericalError, Rng, finite_diff_grad, logsumexp, max_relative_error, relu
from .resnet import FeatureBatch, ResidualBlock, TrainedResNet

log = logging.getLogger(__name__)

DIVERGENCE_LOSS = 1e6


class OracleError(RuntimeError):
    """The oracle diverged or produced non-finite values."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass
class OracleConfig:
    learning_rate: float = 0.01
    lr_decay: float = 0.0
    epochs: int = 20
    batch_size: int = 64
    init_scale: float = 1.0
    seed: int = 0
    max_grad_norm: float = 10.0
    early_stop: bool = False
    early_stop_tol: float = 1e-4
    early_stop_window: int = 5

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("oracle.learning_rate must be >= 0")
        if self.lr_decay < 0:
            raise ValueError("oracle.lr_decay must be >= 0")
        if int(self.epochs) < 1:
            raise ValueError("oracle.epochs must be >= 1")
        if int(self.batch_size) < 1:
            raise ValueError("oracle.batch_size must be >= 1")
        if self.init_scale < 0:
            raise ValueError("oracle.init_scale must be >= 0")
        if not self.max_grad_norm > 0:
            raise ValueError("oracle.max_grad_norm must be > 0")
        self.epochs = int(self.epochs)
        self.batch_size = int(self.batch_size)

    def lr_at(self, epoch):
        return self.learning_rate / (1.0 + self.lr_decay * epoch)

    def to_dict(self):
        return asdict(self)


@dataclass
class OracleResult:
    block: ResidualBlock
    aux: np.ndarray
    alpha: float
    final_loss: float
    initial_loss: float
    loss_curve: list = field(default_factory=list)
    grad_check: float = float("nan")
    epochs_run: int = 0

    @property
    def classifier(self):
        """Auxiliary classifier with the oracle's scalar folded in."""
        return self.alpha * self.aux


# ---------------------------------------------------------------------------
# exponential-loss objectives

def _features(g):
    return g.features if isinstance(g, FeatureBatch) else np.asarray(g, dtype=np.float64)


def _forward(w_in, w_out, g):
    z = g @ w_in
    a = relu(z)
    u = a @ w_out + g
    return z, a, u


def _binary_exponents(u, v, alpha, y):
    return -y * alpha * (u @ v)


def _multiclass_exponents(u, V, alpha, labels):
    s = u @ V
    m = s.shape[0]
    d = alpha * (s - s[np.arange(m), labels][:, None])
    d[np.arange(m), labels] = -np.inf
    return d


def oracle_log_loss_binary(block, v, alpha, g, y):
    """log of the binary oracle loss, computed with a max-shift."""
    g = _features(g)
    _, _, u = _forward(block.w_in, block.w_out, g)
    x = _binary_exponents(u, np.asarray(v, dtype=np.float64), alpha, np.asarray(y, dtype=np.float64))
    return logsumexp(x) - np.log(x.size)


def oracle_loss_binary(block, v, alpha, g, y):
    return float(np.exp(oracle_log_loss_binary(block, v, alpha, g, y)))


def oracle_log_loss_multiclass(block, V, alpha, g, labels):
    """log of the normalized multiclass oracle loss (divided by m (C - 1))."""
    g = _features(g)
    labels = np.asarray(labels, dtype=np.int64)
    _, _, u = _forward(block.w_in, block.w_out, g)
    V = np.asarray(V, dtype=np.float64)
    d = _multiclass_exponents(u, V, alpha, labels)
    m, C = d.shape
    return logsumexp(d[np.isfinite(d)]) - np.log(m * (C - 1))


def oracle_loss_multiclass(block, V, alpha, g, labels):
    return float(np.exp(oracle_log_loss_multiclass(block, V, alpha, g, labels)))


def _backprop_module(w_in, w_out, g, z, a, du):
    """Gradients of w_in, w_out given dL/du for u = relu(g w_in) w_out + g."""
    d_out = a.T @ du
    da = du @ w_out.T
    dz = da * (z > 0.0)
    d_in = g.T @ dz
    return d_in, d_out, dz


def _check_grads(grads):
    for name, gr in grads.items():
        if not np.all(np.isfinite(gr)):
            raise NumericalError(f"non-finite gradient for parameter {name!r}")
    return grads


def oracle_grad_binary(block, v, alpha, g, y):
    """Analytic gradients of the binary oracle loss w.r.t. w_in, w_out, v, alpha."""
    g = _features(g)
    v = np.asarray(v, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    z, a, u = _forward(block.w_in, block.w_out, g)
    s = u @ v
    e = np.exp(-y * alpha * s) / s.size
    ds = -y * alpha * e
    du = np.outer(ds, v)
    d_in, d_out, _ = _backprop_module(block.w_in, block.w_out, g, z, a, du)
    grads = {
        "w_in": d_in,
        "w_out": d_out,
        "v": u.T @ ds,
        "alpha": np.array(np.sum(-y * s * e)),
    }
    return _check_grads(grads)


def oracle_grad_multiclass(block, V, alpha, g, labels):
    """Analytic gradients of the normalized multiclass oracle loss."""
    g = _features(g)
    V = np.asarray(V, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    z, a, u = _forward(block.w_in, block.w_out, g)
    s = u @ V
    m, C = s.shape
    rows = np.arange(m)
    diff = s - s[rows, labels][:, None]
    e = np.exp(alpha * diff) / (m * (C - 1))
    e[rows, labels] = 0.0
    ds = alpha * e
    ds[rows, labels] = -alpha * e.sum(axis=1)
    du = ds @ V.T
    d_in, d_out, _ = _backprop_module(block.w_in, block.w_out, g, z, a, du)
    grads = {
        "w_in": d_in,
        "w_out": d_out,
        "v": u.T @ ds,
        "alpha": np.array(np.sum(e * diff)),
    }
    return _check_grads(grads)


# ---------------------------------------------------------------------------
# optimizer

class Adam:
    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m, self.v, self.t = {}, {}, 0

    def step(self, params, grads, lr):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, gr in grads.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(gr)
                self.v[name] = np.zeros_like(gr)
            self.m[name] = b1 * self.m[name] + (1 - b1) * gr
            self.v[name] = b2 * self.v[name] + (1 - b2) * gr * gr
            mhat = self.m[name] / (1 - b1 ** self.t)
            vhat = self.v[name] / (1 - b2 ** self.t)
            params[name] = params[name] - lr * mhat / (np.sqrt(vhat) + self.eps)


def clip_by_global_norm(grads, max_norm):
    total = float(np.sqrt(sum(float(np.sum(gr * gr)) for gr in grads.values())))
    if total > max_norm:
        scale = max_norm / total
        grads = {k: gr * scale for k, gr in grads.items()}
    return grads, total


def init_block(n, k, init_scale, rng):
    """Gaussian init, stddev init_scale/sqrt(fan_in); w_out gets an extra 0.1."""
    w_in = rng.normal((n, k), scale=init_scale / np.sqrt(max(n, 1)))
    w_out = rng.normal((k, n), scale=0.1 * init_scale / np.sqrt(max(k, 1)))
    return ResidualBlock(w_in, w_out)


# ---------------------------------------------------------------------------
# block oracle

class _Objective:
    """Loss/gradient over the optimizer's parametrization (alpha = exp(log_alpha))."""

    def __init__(self, task):
        self.task = task

    def loss(self, p, g, y):
        with np.errstate(over="ignore", invalid="ignore"):
            return self._loss(p, g, y)

    def grad(self, p, g, y):
        with np.errstate(over="ignore", invalid="ignore"):
            return self._grad(p, g, y)

    def _loss(self, p, g, y):
        block = ResidualBlock(p["w_in"], p["w_out"])
        alpha = float(np.exp(p["log_alpha"]))
        if self.task == "binary":
            return oracle_loss_binary(block, p["v"], alpha, g, y)
        return oracle_loss_multiclass(block, p["v"], alpha, g, y)

    def _grad(self, p, g, y):
        block = ResidualBlock(p["w_in"], p["w_out"])
        alpha = float(np.exp(p["log_alpha"]))
        fn = oracle_grad_binary if self.task == "binary" else oracle_grad_multiclass
        gr = fn(block, p["v"], alpha, g, y)
        gr["log_alpha"] = gr.pop("alpha") * alpha
        return gr


def _sampled_grad_check(objective, params, names, g, y, rng, per_param=4, h=1e-6):
    """Compare analytic and central-difference gradients on a few coordinates."""
    g = g[:32]
    y = y[:32]
    analytic = objective.grad(params, g, y)
    worst = 0.0
    for name in names:
        size = params[name].size
        if size == 0:
            continue
        picks = rng.integers(0, size, min(per_param, size))
        for idx in picks:
            def f(val, name=name, idx=idx):
                q = dict(params)
                arr = q[name].copy().reshape(-1)
                arr[idx] = val[0]
                q[name] = arr.reshape(params[name].shape)
                return objective.loss(q, g, y)

            fd = finite_diff_grad(f, np.array([params[name].reshape(-1)[idx]]), h)[0]
            worst = max(worst, max_relative_error(analytic[name].reshape(-1)[idx], fd, floor=1e-7))
    return worst


def train_block(g, y, cfg, task="binary", hidden=8, train_module=True, init_aux=None,
                dist=None, n_classes=None, rng=None):
    """Fit one residual block and its auxiliary classifier.

    ``g`` holds the current features g_t(x_i); ``y`` is +-1 (binary) or
    integer class labels (multiclass). With ``train_module=False`` only the
    linear classifier is fitted (the round that works on raw inputs).
    ``init_aux`` warm-starts the classifier. ``dist``, when given, is only
    validated: the unweighted objective is proportional to the weighted one.
    Returns the lowest-loss parameters seen, so the final loss never exceeds
    the initial one.
    """
    g = _features(g)
    m, n = g.shape
    if task == "binary":
        y = np.asarray(y, dtype=np.float64)
    else:
        y = np.asarray(y, dtype=np.int64)
        n_classes = int(n_classes if n_classes is not None else y.max() + 1)
    if dist is not None:
        dist = np.asarray(dist, dtype=np.float64)
        if dist.shape != (m,) or abs(dist.sum() - 1.0) > 1e-8 or np.any(dist < 0):
            raise ValueError("dist must be a probability vector over the examples")
    rng = rng if rng is not None else Rng(cfg.seed)
    init_rng = rng.spawn("init")
    shuffle_rng = rng.spawn("shuffle")

    k = int(hidden) if train_module else 0
    block = init_block(n, k, cfg.init_scale, init_rng)
    if init_aux is not None:
        aux = np.array(init_aux, dtype=np.float64)
    elif task == "binary":
        aux = init_rng.normal(n, scale=cfg.init_scale / np.sqrt(n))
    else:
        aux = init_rng.normal((n, n_classes), scale=cfg.init_scale / np.sqrt(n))
    params = {"w_in": block.w_in, "w_out": block.w_out, "v": aux, "log_alpha": np.array(0.0)}
    names = ["w_in", "w_out", "v", "log_alpha"] if train_module else ["v", "log_alpha"]

    objective = _Objective(task)
    try:
        grad_check = _sampled_grad_check(objective, params, names, g, y, init_rng.spawn("gradcheck"))
    except NumericalError as exc:
        raise OracleError(str(exc), {"epoch": -1}) from exc

    initial = objective.loss(params, g, y)
    if not np.isfinite(initial):
        raise OracleError("non-finite initial oracle loss", {"loss": initial})
    best_loss, best = initial, {k_: v_.copy() for k_, v_ in params.items()}
    curve = [initial]
    opt = Adam()
    epochs_run = 0
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        order = shuffle_rng.permutation(m)
        for start in range(0, m, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            try:
                grads = objective.grad(params, g[idx], y[idx])
            except (NumericalError, FloatingPointError) as exc:
                raise OracleError(str(exc), {"epoch": epoch}) from exc
            grads = {k_: grads[k_] for k_ in names}
            grads, _ = clip_by_global_norm(grads, cfg.max_grad_norm)
            opt.step(params, grads, lr)
        loss = objective.loss(params, g, y)
        epochs_run = epoch + 1
        curve.append(loss)
        if not np.isfinite(loss) or loss > DIVERGENCE_LOSS:
            raise OracleError(f"oracle diverged at epoch {epoch} (loss={loss})",
                              {"epoch": epoch, "loss": loss, "loss_curve": curve})
        if loss < best_loss:
            best_loss, best = loss, {k_: v_.copy() for k_, v_ in params.items()}
        w = cfg.early_stop_window
        if cfg.early_stop and len(curve) > w:
            ref = min(curve[:-w])
            if ref > 0 and (ref - min(curve[-w:])) / ref < cfg.early_stop_tol:
                break
    log.debug("oracle: loss %.6g -> %.6g in %d epochs", initial, best_loss, epochs_run)
    return OracleResult(
        block=ResidualBlock(best["w_in"], best["w_out"]),
        aux=best["v"],
        alpha=float(np.exp(best["log_alpha"])),
        final_loss=float(best_loss),
        initial_loss=float(initial),
        loss_curve=[float(c) for c in curve],
        grad_check=float(grad_check),
        epochs_run=epochs_run,
    )


# ---------------------------------------------------------------------------
# end-to-end backprop baseline

def _e2e_forward(params, x, depth):
    caches = []
    g = x
    for t in range(depth):
        z, a, u = _forward(params[f"w_in{t}"], params[f"w_out{t}"], g)
        caches.append((g, z, a))
        g = u
    return g, caches


def e2e_loss(params, x, y, depth, task):
    g, _ = _e2e_forward(params, x, depth)
    s = g @ params["w"]
    if task == "binary":
        return float(np.mean(np.logaddexp(0.0, -y * s)))
    return float(np.mean(logsumexp(s, axis=1) - s[np.arange(len(y)), y]))


def e2e_grad(params, x, y, depth, task):
    """Backprop of the logistic / softmax cross-entropy loss through the whole stack."""
    g, caches = _e2e_forward(params, x, depth)
    w = params["w"]
    s = g @ w
    m = x.shape[0]
    if task == "binary":
        # d/ds log(1 + exp(-y s)) = -y * sigmoid(-y s)
        ds = -y * np.exp(-np.logaddexp(0.0, y * s)) / m
        grads = {"w": g.T @ ds}
        dg = np.outer(ds, w)
    else:
        p = np.exp(s - logsumexp(s, axis=1)[:, None])
        p[np.arange(m), y] -= 1.0
        ds = p / m
        grads = {"w": g.T @ ds}
        dg = ds @ w.T
    for t in reversed(range(depth)):
        g_in, z, a = caches[t]
        w_in, w_out = params[f"w_in{t}"], params[f"w_out{t}"]
        d_in, d_out, dz = _backprop_module(w_in, w_out, g_in, z, a, dg)
        grads[f"w_in{t}"] = d_in
        grads[f"w_out{t}"] = d_out
        dg = dg + dz @ w_in.T
    return _check_grads(grads)


def _accuracy(params, x, y, depth, task):
    g, _ = _e2e_forward(params, x, depth)
    s = g @ params["w"]
    if task == "binary":
        return float(np.mean(np.sign(s) == y))
    return float(np.mean(np.argmax(s, axis=1) == y))


def init_e2e(n, k, depth, cfg, task, n_classes=2, rng=None):
    rng = rng if rng is not None else Rng(cfg.seed).spawn("init")
    params = {}
    for t in range(depth):
        b = init_block(n, k, cfg.init_scale, rng)
        params[f"w_in{t}"] = b.w_in
        params[f"w_out{t}"] = b.w_out
    shape = n if task == "binary" else (n, n_classes)
    params["w"] = rng.normal(shape, scale=cfg.init_scale / np.sqrt(n))
    return params


def train_e2e(x, y, hidden, depth, cfg, task="binary", x_test=None, y_test=None,
              n_classes=None, rng=None):
    """Train all blocks and the top classifier jointly by backprop.

    ``y`` is +-1 for binary tasks and integer labels otherwise. Returns the
    network and one metrics dict per epoch (epoch 0 is the initialization).
    """
    if depth < 0:
        raise ValueError("depth must be >= 0")
    x = np.asarray(x, dtype=np.float64)
    m, n = x.shape
    if task == "binary":
        y = np.asarray(y, dtype=np.float64)
        y_test = None if y_test is None else np.asarray(y_test, dtype=np.float64)
    else:
        y = np.asarray(y, dtype=np.int64)
        y_test = None if y_test is None else np.asarray(y_test, dtype=np.int64)
        n_classes = int(n_classes if n_classes is not None else y.max() + 1)
    rng = rng if rng is not None else Rng(cfg.seed)
    params = init_e2e(n, hidden, depth, cfg, task, n_classes or 2, rng.spawn("init"))
    shuffle_rng = rng.spawn("shuffle")
    opt = Adam()

    def record(epoch, lr):
        row = {"epoch": epoch, "lr": lr,
               "train_loss": e2e_loss(params, x, y, depth, task),
               "train_acc": _accuracy(params, x, y, depth, task),
               "test_loss": float("nan"), "test_acc": float("nan")}
        if x_test is not None:
            row["test_loss"] = e2e_loss(params, x_test, y_test, depth, task)
            row["test_acc"] = _accuracy(params, x_test, y_test, depth, task)
        return row

    history = [record(0, cfg.lr_at(0))]
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        order = shuffle_rng.permutation(m)
        for start in range(0, m, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            try:
                grads = e2e_grad(params, x[idx], y[idx], depth, task)
            except (NumericalError, FloatingPointError) as exc:
                raise OracleError(str(exc), {"epoch": epoch}) from exc
            grads, _ = clip_by_global_norm(grads, cfg.max_grad_norm)
            opt.step(params, grads, lr)
        row = record(epoch + 1, lr)
        history.append(row)
        if not np.isfinite(row["train_loss"]) or row["train_loss"] > DIVERGENCE_LOSS:
            raise OracleError(f"e2e training diverged at epoch {epoch}", {"epoch": epoch})
    blocks = [ResidualBlock(params[f"w_in{t}"], params[f"w_out{t}"]) for t in range(depth)]
    net = TrainedResNet(blocks, params["w"], 1.0, task, n_classes or 2)
    return net, history
