"""Monte-Carlo EM training expressed as backpropagation.

Each step draws ``S`` view codes per pair from U(0, 1), scores them with the
current parameters (the importance weights, treated as constants), and
backpropagates either through the largest-weight sample (``one-sample``) or
through all samples weighted by their normalized weights (``weighted``).
"""

import csv
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import model as M
from . import kernels
from .errors import ContractError, DimensionError
from .numerics import Rng, derive_seed, logsumexp

ONE_SAMPLE = "one-sample"
WEIGHTED = "weighted"
UNSUPERVISED = "unsupervised"
GRAD_MODES = (ONE_SAMPLE, WEIGHTED)

# independent streams derived from the run seed
INIT_STREAM = 1
CLUSTER_STREAM = 2

# weights above this count as "approximately one"
SPARSE_WEIGHT = 0.9

METRIC_FIELDS = (
    "epoch",
    "mean_loss",
    "elbo_estimate",
    "max_weight_median",
    "weight_sparsity_fraction",
    "wall_seconds",
)


@dataclass
class TrainConfig:
    samples: int = 20
    grad_mode: str = ONE_SAMPLE
    learning_rate: float = 0.02
    momentum: float = 0.9
    epochs: int = 100
    batch_size: int = 16
    seed: int = 0
    sigma_y: float = M.DEFAULT_SIGMA_Y
    sigma_v: float = M.DEFAULT_SIGMA_V
    unsupervised: bool = False
    sigma_vtilde: float = 0.1
    clusters: int = 7

    def validate(self):
        if self.samples < 1:
            raise ContractError("samples per pair must be >= 1")
        # zero is allowed: a frozen run that still reports metrics
        if self.learning_rate < 0:
            raise ContractError("learning rate must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ContractError("momentum must lie in [0, 1)")
        if self.grad_mode not in GRAD_MODES:
            raise ContractError(f"gradient mode must be one of {GRAD_MODES}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ContractError("batch size must be >= 1 and epochs >= 0")
        if self.sigma_y <= 0 or self.sigma_v <= 0 or self.sigma_vtilde <= 0:
            raise ContractError("noise scales must be positive")
        return self


@dataclass
class OptimizerState:
    buffers: dict
    step: int = 0

    @classmethod
    def for_params(cls, params):
        return cls(params.zeros_like(), 0)


@dataclass
class BatchResult:
    loss: float  # mean over pairs
    grads: dict  # mean over pairs
    elbo: float  # mean over pairs of sum_s w_s log p(y, v, h^v_s)
    max_weights: np.ndarray  # per pair
    sparse_count: int  # samples with normalized weight > SPARSE_WEIGHT
    n_samples: int
    weights: np.ndarray = None  # (P, S) normalized
    chosen: np.ndarray = None  # (P,) argmax index


@dataclass
class EpochMetrics:
    epoch: int
    mean_loss: float
    elbo_estimate: float
    max_weight_median: float
    weight_sparsity_fraction: float
    wall_seconds: float
    batch_max_weight: list = field(default_factory=list, repr=False)

    def row(self):
        return {k: getattr(self, k) for k in METRIC_FIELDS}


def _rows_loglik(params, y_hat_rows, y, view_rows, view_out):
    recon = M.recon_loglik_rows(y_hat_rows, y, params.sigma_y)
    return recon, M.view_loglik_rows(params, view_rows, view_out)


def batch_loss_and_grad(params, x, y_hat, targets, S, rng, mode=ONE_SAMPLE, codes=None,
                        vtilde=None, sigma_vtilde=0.1, view_draws=None):
    """Loss and gradient for a batch of pairs in model space.

    ``targets`` are class indices (discrete head) or scalar labels
    (continuous). ``codes`` optionally fixes the draw, shape ``(P, S, R)``.
    With ``mode=UNSUPERVISED`` the labels are ignored; ``vtilde`` holds the
    per-pair view initializations and ``view_draws`` optionally fixes the
    sampled views ``v_s`` (shape ``(P, S)``).
    """
    arch = params.arch
    x = np.atleast_2d(x)
    y_hat = np.atleast_2d(y_hat)
    P = x.shape[0]
    R = arch.total_random
    if codes is None:
        codes = rng.random(P * S * R).reshape(P * S, R)
    else:
        codes = np.asarray(codes, dtype=np.float64).reshape(P * S, R)
    id_acts = M.identity_forward(params, x)
    gen_acts, y, view_out = M.generative_forward(params, id_acts[-1], codes, repeat=S)
    y_hat_rows = np.repeat(y_hat, S, axis=0)

    if mode == UNSUPERVISED:
        if arch.head != M.CONTINUOUS:
            raise ContractError("the unsupervised objective needs a continuous view head")
        if view_draws is None:
            view_draws = view_out[:, 0] + params.sigma_v * rng.normal(P * S)
        view_rows = np.asarray(view_draws, dtype=np.float64).reshape(P * S)
        recon, view_ll = _rows_loglik(params, y_hat_rows, y, view_rows, view_out)
        vt = np.repeat(np.asarray(vtilde, dtype=np.float64).reshape(P), S)
        prior_ll = -np.log(sigma_vtilde) - (vt - view_rows) ** 2 / (2.0 * sigma_vtilde**2)
        log_w = (recon + prior_ll).reshape(P, S)
        ll = (recon + view_ll + prior_ll).reshape(P, S)
    else:
        view_rows = np.repeat(np.asarray(targets).reshape(P), S)
        recon, view_ll = _rows_loglik(params, y_hat_rows, y, view_rows, view_out)
        log_w = (recon + view_ll).reshape(P, S)
        ll = log_w

    w = np.exp(log_w - logsumexp(log_w, axis=1)[:, None])
    best = np.argmax(log_w, axis=1)
    pairs = np.arange(P)

    if mode == WEIGHTED:
        rows = np.arange(P * S)
        omega = w.reshape(-1) / P
        pair_of_row = rows // S
        loss = float(np.mean(np.sum(w * -ll, axis=1)))
    else:
        rows = pairs * S + best
        omega = w[pairs, best] / P
        pair_of_row = pairs
        loss = float(np.mean(-ll[pairs, best]))

    sel_acts = [a[rows] for a in gen_acts]
    dy = omega[:, None] * (y[rows] - y_hat_rows[rows]) / params.sigma_y**2
    dview = omega[:, None] * M.view_grad_rows(params, view_rows[rows], view_out[rows])
    grads = M.backward(params, x, id_acts, sel_acts, codes[rows], y[rows], dy, dview, pair_of_row)
    elbo = float(np.mean(np.sum(w * ll, axis=1)))
    return BatchResult(
        loss, grads, elbo, w.max(axis=1), int(np.sum(w > SPARSE_WEIGHT)), P * S, w, best
    )


# ----------------------------------------------------------------------------
# single-pair API


def _pair_arrays(pair, params):
    x = M.to_model_space(pair.x)
    y = M.to_model_space(pair.y)
    return x, y, M._view_target(params, pair.v)


def _codes_from(samples):
    return None if samples is None else M.stack_codes(samples)[None, :, :]


def loss_and_grad_one_sample(pair, params, S, rng, samples=None):
    """Gradient through the largest-weight sample, scaled by its weight."""
    x, y, t = _pair_arrays(pair, params)
    S = len(samples) if samples is not None else S
    r = batch_loss_and_grad(params, x, y, [t], S, rng, ONE_SAMPLE, _codes_from(samples))
    return r.loss, r.grads


def loss_and_grad_weighted(pair, params, S, rng, samples=None):
    """Gradient averaged over all samples with their normalized weights."""
    x, y, t = _pair_arrays(pair, params)
    S = len(samples) if samples is not None else S
    r = batch_loss_and_grad(params, x, y, [t], S, rng, WEIGHTED, _codes_from(samples))
    return r.loss, r.grads


def train_step_unsupervised(pair, vtilde, params, S, rng, sigma_vtilde=0.1, samples=None, view_draws=None):
    """Three-term objective with sampled views, for pairs without view labels."""
    x, y = M.to_model_space(pair.x), M.to_model_space(pair.y)
    S = len(samples) if samples is not None else S
    draws = None if view_draws is None else np.asarray(view_draws, dtype=np.float64)[None, :]
    r = batch_loss_and_grad(params, x, y, None, S, rng, UNSUPERVISED, _codes_from(samples),
                            vtilde=[vtilde], sigma_vtilde=sigma_vtilde, view_draws=draws)
    return r.loss, r.grads


# ----------------------------------------------------------------------------
# verification oracle


def sample_terms(pair, params, samples, mode=ONE_SAMPLE, vtilde=None, sigma_vtilde=0.1, view_draws=None):
    """Per-sample ``(log p terms, log weight)`` via the single-sample forward.

    Independent of the batched engine; used as the finite-difference oracle.
    """
    x, y = M.to_model_space(pair.x), M.to_model_space(pair.y)
    terms, log_w = [], []
    for s, sample in enumerate(samples):
        y_mean, view_out, _ = M.full_forward(x, sample, params)
        recon = M.recon_loglik(y, y_mean, params.sigma_y)
        if mode == UNSUPERVISED:
            v_s = float(view_draws[s])
            view = M.view_loglik_continuous(v_s, view_out, params.sigma_v)
            prior = M.view_loglik_continuous(vtilde, v_s, sigma_vtilde)
            terms.append(recon + view + prior)
            log_w.append(recon + prior)
        else:
            if params.arch.head == M.DISCRETE:
                view = M.view_loglik_discrete(pair.v, view_out)
            else:
                view = M.view_loglik_continuous(pair.v, view_out, params.sigma_v)
            terms.append(recon + view)
            log_w.append(recon + view)
    return np.array(terms), np.array(log_w)


def frozen_weights(pair, params, samples, mode=ONE_SAMPLE, **kw):
    """Per-sample multipliers fixed at the current parameters."""
    _, log_w = sample_terms(pair, params, samples, mode, **kw)
    w, best = M.normalize_log_weights(log_w)
    if mode == WEIGHTED:
        return w
    omega = np.zeros_like(w)
    omega[best] = w[best]
    return omega


def objective(pair, params, samples, omega, mode=ONE_SAMPLE, **kw):
    """``sum_s omega_s * (-log p terms_s)`` with the multipliers held fixed."""
    terms, _ = sample_terms(pair, params, samples, mode, **kw)
    return float(np.sum(omega * -terms))


def finite_diff_gradient(pair, params, samples, h=1e-5, mode=ONE_SAMPLE, omega=None, **kw):
    """Central differences of the sampled objective, draws and weights frozen."""
    if not 1e-7 <= h <= 1e-3:
        raise ContractError("finite-difference step must lie in [1e-7, 1e-3]")
    if omega is None:
        omega = frozen_weights(pair, params, samples, mode, **kw)
    work = params.copy()
    grads = {}
    for name, tensor in work.tensors.items():
        g = np.zeros_like(tensor)
        flat, gflat = tensor.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = objective(pair, work, samples, omega, mode, **kw)
            flat[i] = orig - h
            fm = objective(pair, work, samples, omega, mode, **kw)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
        grads[name] = g
    return grads


def relative_errors(analytic, numeric):
    """Per-tensor ``max|a - n| / max(max|a|, max|n|)`` (floored at 1e-8)."""
    out = {}
    for name in analytic:
        a, n = analytic[name], numeric[name]
        scale = max(np.max(np.abs(a)), np.max(np.abs(n)), 1e-8)
        out[name] = float(np.max(np.abs(a - n)) / scale)
    return out


# ----------------------------------------------------------------------------
# optimizer and loop


def sgd_step(params, grads, state, config):
    """Classical momentum: ``buf = mu * buf + g``; ``theta -= lr * buf``."""
    for name, theta in params.tensors.items():
        if not (theta.flags.c_contiguous and theta.flags.writeable):
            raise ContractError(f"parameter {name} must be a writeable contiguous array")
        g = np.ascontiguousarray(grads[name], dtype=np.float64)
        kernels.momentum_step(theta.reshape(-1), state.buffers[name].reshape(-1), g.reshape(-1),
                              float(config.momentum), float(config.learning_rate))
    state.step += 1
    return params, state


def train_epoch(pairs, params, state, config, rng, epoch=1, vtilde=None):
    """One shuffled pass over ``pairs`` (a PairSet)."""
    n = len(pairs)
    if n == 0:
        raise ContractError("empty training set")
    t0 = time.perf_counter()
    order = rng.permutation(n)
    X = M.to_model_space(pairs.x)
    Y = M.to_model_space(pairs.y)
    T = pairs.targets()
    mode = UNSUPERVISED if config.unsupervised else config.grad_mode
    loss_sum = elbo_sum = 0.0
    sparse = total = 0
    batch_medians = []
    for start in range(0, n, config.batch_size):
        idx = order[start : start + config.batch_size]
        r = batch_loss_and_grad(
            params, X[idx], Y[idx], T[idx], config.samples, rng, mode,
            vtilde=None if vtilde is None else vtilde[idx], sigma_vtilde=config.sigma_vtilde,
        )
        sgd_step(params, r.grads, state, config)
        loss_sum += r.loss * len(idx)
        elbo_sum += r.elbo * len(idx)
        sparse += r.sparse_count
        total += r.n_samples
        batch_medians.append(float(np.median(r.max_weights)))
    for name, t in params.tensors.items():
        if not np.all(np.isfinite(t)):
            raise FloatingPointError(f"parameter {name} became non-finite in epoch {epoch}; lower the learning rate")
    return params, EpochMetrics(
        epoch,
        loss_sum / n,
        elbo_sum / n,
        float(np.median(batch_medians)),
        sparse / total,
        time.perf_counter() - t0,
        batch_medians,
    )


def train(pairs, params, config, rng=None, state=None, start_epoch=1, on_epoch=None, vtilde=None):
    """Run ``config.epochs`` epochs; returns ``(params, state, [EpochMetrics])``.

    ``on_epoch(epoch, params, state, metrics)`` is called after every epoch.
    """
    config.validate()
    rng = rng if rng is not None else Rng(config.seed)
    state = state if state is not None else OptimizerState.for_params(params)
    if config.unsupervised and vtilde is None:
        vtilde = cluster_pair_views(pairs, config.clusters, Rng(derive_seed(config.seed, CLUSTER_STREAM)))
    history = []
    for epoch in range(start_epoch, start_epoch + config.epochs):
        params, metrics = train_epoch(pairs, params, state, config, rng, epoch, vtilde)
        history.append(metrics)
        if on_epoch is not None:
            on_epoch(epoch, params, state, metrics)
    return params, state, history


def initial_parameters(arch, config, views=None):
    """Fresh parameters for a run; the init stream is separate from the
    training stream ``Rng(config.seed)``."""
    return M.init_parameters(arch, derive_seed(config.seed, INIT_STREAM), config.sigma_y, config.sigma_v, views)


class MetricsWriter:
    """Append-only CSV of per-epoch metrics."""

    def __init__(self, path, append=False):
        self.path = path
        if not append:
            with open(path, "w", newline="") as f:
                csv.writer(f).writerow(METRIC_FIELDS)

    def write(self, metrics):
        with open(self.path, "a", newline="") as f:
            csv.writer(f).writerow(
                [metrics.epoch] + [repr(float(getattr(metrics, k))) for k in METRIC_FIELDS[1:]]
            )


def read_metrics(path):
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return [{k: (int(v) if k == "epoch" else float(v)) for k, v in r.items()} for r in rows]


# ----------------------------------------------------------------------------
# unsupervised view initialization


def _horizontal_centroid(images, size):
    img = images.reshape(-1, size, size)
    cols = np.arange(size, dtype=np.float64)
    mass = img.sum(axis=(1, 2))
    return (img.sum(axis=1) @ cols) / np.where(mass > 0, mass, 1.0)


def kmeans(points, K, rng, iterations=50):
    """Lloyd's algorithm seeded from K distinct random points."""
    n = points.shape[0]
    if not 2 <= K <= n:
        raise ContractError(f"need 2 <= K <= {n} clusters, got {K}")
    centres, seen = [], set()
    for i in rng.permutation(n):
        key = points[i].tobytes()
        if key not in seen:
            seen.add(key)
            centres.append(points[i])
        if len(centres) == K:
            break
    if len(centres) < K:
        raise ContractError(f"only {len(centres)} distinct points for {K} clusters")
    centres = np.array(centres)
    assign = None
    for _ in range(iterations):
        d = np.sum(points**2, axis=1)[:, None] - 2.0 * points @ centres.T + np.sum(centres**2, axis=1)[None, :]
        new = np.argmin(d, axis=1)
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        for k in range(K):
            members = points[assign == k]
            if len(members):
                centres[k] = members.mean(axis=0)
    return assign, centres


def cluster_init_views(targets, K, rng, size=None):
    """Cluster target images into K viewpoints; returns one value in [-1, 1]
    per target, clusters ordered by mean horizontal intensity centroid."""
    targets = np.asarray(targets, dtype=np.float64)
    if K > targets.shape[0]:
        raise ContractError(f"{K} clusters for {targets.shape[0]} targets")
    size = size or int(round(np.sqrt(targets.shape[1])))
    if size * size != targets.shape[1]:
        raise DimensionError(f"targets of length {targets.shape[1]} are not {size}x{size} images")
    assign, centres = kmeans(targets, K, rng)
    order = np.argsort(_horizontal_centroid(centres, size), kind="stable")
    rank = np.empty(K, dtype=np.int64)
    rank[order] = np.arange(K)
    values = np.linspace(-1.0, 1.0, K)
    return values[rank[assign]]


def cluster_pair_views(pairs, K, rng):
    """ṽ per pair: cluster the distinct target images once, then look up."""
    uniq, inverse = np.unique(pairs.y, axis=0, return_inverse=True)
    return cluster_init_views(uniq, K, rng)[np.asarray(inverse).reshape(-1)]


def config_dict(config):
    return asdict(config)


# ----------------------------------------------------------------------------
# gradient check on a tiny network

GRADCHECK_ARCH = "16-8-8(3)-8(3)-12-16[3]"
GRADCHECK_TOL = 1e-4


@dataclass
class GradCheckResult:
    head: str
    mode: str
    errors: dict  # tensor name -> max relative error

    @property
    def worst(self):
        return max(self.errors.values())


def gradient_check(seed=7, S=5, h=1e-5, arch=GRADCHECK_ARCH):
    """Analytic vs central-difference gradients on a seeded tiny network.

    Covers the one-sample and weighted objectives for both view heads and
    the unsupervised objective (continuous head). The draws are frozen.
    """
    from .synthdata import TrainingPair

    results = []
    for head in (M.DISCRETE, M.CONTINUOUS):
        a = M.Architecture.parse(arch, head=head)
        views = tuple(np.linspace(-30.0, 30.0, a.n_views)) if head == M.DISCRETE else M.DEFAULT_VIEWS
        params = M.init_parameters(a, seed, views=views)
        rng = Rng(derive_seed(seed, 1))
        # small nonzero biases so bias gradients are exercised off the zero point
        for name, t in params.tensors.items():
            if t.ndim == 1:
                t += 0.1 * rng.normal(t.size)
        x, y = rng.random(a.input_dim), rng.random(a.output_dim)
        if head == M.DISCRETE:
            v = np.zeros(a.n_views)
            v[rng.integers(a.n_views)] = 1.0
        else:
            v = float(rng.random(1)[0] - 0.5)
        pair = TrainingPair(x, y, v, 0, 0.0, 0.0)
        samples = M.sample_view_codes(a, S, rng)
        modes = [ONE_SAMPLE, WEIGHTED] + ([UNSUPERVISED] if head == M.CONTINUOUS else [])
        for mode in modes:
            kw = {}
            if mode == ONE_SAMPLE:
                _, g = loss_and_grad_one_sample(pair, params, S, rng, samples)
            elif mode == WEIGHTED:
                _, g = loss_and_grad_weighted(pair, params, S, rng, samples)
            else:
                draws = 0.2 + params.sigma_v * rng.normal(S)
                vtilde = float(rng.random(1)[0] - 0.5)
                kw = dict(vtilde=vtilde, sigma_vtilde=0.1, view_draws=draws)
                _, g = train_step_unsupervised(pair, vtilde, params, S, rng, 0.1, samples, draws)
            n = finite_diff_gradient(pair, params, samples, h, mode, **kw)
            results.append(GradCheckResult(head, mode, relative_errors(g, n)))
    return results
