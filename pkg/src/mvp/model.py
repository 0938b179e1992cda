"""The multi-view perceptron network.

Layout (default ``32x32-512-512(10)-512(10)-1024-32x32[7]``)::

    x -> h1 -> h2 (+ random codes c2) -> h3 (+ c3) -> h4 -> h5 -> y
                                                                 \
                                          [y ; c2 ; c3] -> view head

Hidden layer ``l`` (1-based) is ``h_l = sigmoid(h_{l-1} U_{l-1} + c_{l-1} V_{l-1}
+ b_{l-1})`` where the ``c`` term is present only when layer ``l-1`` is
hybrid. ``y = h_L U_L + b_L`` is linear. The layers up to and including the
first hybrid layer do not see any random code; they form the identity
pathway.

Row-vector convention throughout: activations are ``(rows, width)`` and
weights are ``(fan_in, fan_out)``.
"""

import re
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DimensionError
from .numerics import Rng, log_softmax, logsumexp, sigmoid, softmax

DISCRETE = "discrete"
CONTINUOUS = "continuous"

DEFAULT_ARCH = "32x32-512-512(10)-512(10)-1024-32x32[7]"
DEFAULT_VIEWS = (-45.0, -30.0, -15.0, 0.0, 15.0, 30.0, 45.0)
DEFAULT_SIGMA_Y = 1.0
DEFAULT_SIGMA_V = 0.1
# continuous view label = yaw degrees / YAW_SCALE
YAW_SCALE = 90.0


@dataclass(frozen=True)
class Layer:
    width: int
    random: int = 0

    @property
    def kind(self):
        return "hybrid" if self.random else "deterministic"


@dataclass(frozen=True)
class Architecture:
    input_dim: int
    layers: tuple
    output_dim: int
    head: str = DISCRETE
    n_views: int = 7

    def __post_init__(self):
        if not self.layers:
            raise ContractError("architecture needs at least one hidden layer")
        if self.head not in (DISCRETE, CONTINUOUS):
            raise ContractError(f"unknown view head {self.head!r}")
        if self.head == DISCRETE and self.n_views < 2:
            raise ContractError("discrete view head needs at least 2 views")
        if self.head == CONTINUOUS and self.n_views != 1:
            raise ContractError("continuous view head has exactly one output")
        if not any(layer.random for layer in self.layers):
            raise ContractError("architecture needs at least one hybrid layer")
        if self.layers[-1].random:
            raise ContractError("the last hidden layer cannot be hybrid")
        if any(layer.width < 1 or layer.random < 0 for layer in self.layers):
            raise ContractError("layer widths must be positive")

    @classmethod
    def parse(cls, text, head=None):
        """Parse ``"32x32-512-512(10)-512(10)-1024-32x32[7]"``.

        The bracket on the last token gives the number of discrete views, or
        ``[c]`` for a continuous head. ``head`` overrides the bracket kind;
        a continuous override ignores the view count.
        """
        text = text.replace("×", "x").replace("−", "-").replace(" ", "")
        tokens = text.split("-")
        if len(tokens) < 3:
            raise ContractError(f"architecture {text!r} needs input, hidden and output tokens")
        pattern = re.compile(r"^(\d+)(?:x(\d+))?(?:\((\d+)\))?(?:\[(\d+|c)\])?$")

        def size(tok):
            m = pattern.match(tok)
            if not m:
                raise ContractError(f"bad architecture token {tok!r}")
            a, b, r, v = m.groups()
            return int(a) * (int(b) if b else 1), int(r or 0), v

        input_dim, r0, v0 = size(tokens[0])
        if r0 or v0:
            raise ContractError("the input token cannot carry random units or views")
        layers = []
        for tok in tokens[1:]:
            width, random, _ = size(tok)
            layers.append(Layer(width, random))
        _, _, views = size(tokens[-1])
        for tok in tokens[1:-1]:
            if size(tok)[2]:
                raise ContractError("only the last token may carry a view count")
        if head is None:
            head = CONTINUOUS if views == "c" else DISCRETE
        if head == CONTINUOUS:
            n_views = 1
        else:
            n_views = int(views) if views not in (None, "c") else len(DEFAULT_VIEWS)
        return cls(input_dim, tuple(layers), layers[-1].width, head, n_views)

    def format(self):
        def tok(n, r=0):
            side = int(round(np.sqrt(n)))
            s = f"{side}x{side}" if side * side == n and n >= 64 else str(n)
            return s + (f"({r})" if r else "")

        parts = [tok(self.input_dim)] + [tok(layer.width, layer.random) for layer in self.layers]
        parts[-1] += "[c]" if self.head == CONTINUOUS else f"[{self.n_views}]"
        return "-".join(parts)

    @property
    def first_hybrid(self):
        """1-based index of the first hybrid layer (end of the identity pathway)."""
        return next(i for i, layer in enumerate(self.layers, 1) if layer.random)

    @property
    def random_widths(self):
        return tuple(layer.random for layer in self.layers if layer.random)

    @property
    def total_random(self):
        return sum(self.random_widths)

    def tensor_shapes(self):
        """Ordered ``{name: shape}`` for every parameter tensor."""
        shapes = {}
        dims = [self.input_dim] + [layer.width for layer in self.layers] + [self.output_dim]
        for l in range(len(self.layers) + 1):
            shapes[f"U{l}"] = (dims[l], dims[l + 1])
            if l >= 1 and self.layers[l - 1].random:
                shapes[f"V{l}"] = (self.layers[l - 1].random, dims[l + 1])
            shapes[f"b{l}"] = (dims[l + 1],)
        shapes["Wy"] = (self.output_dim, self.n_views)
        shapes["Wv"] = (self.total_random, self.n_views)
        shapes["bv"] = (self.n_views,)
        return shapes

    def parameter_count(self):
        return sum(int(np.prod(s)) for s in self.tensor_shapes().values())


@dataclass
class Parameters:
    arch: Architecture
    tensors: dict
    sigma_y: float = DEFAULT_SIGMA_Y
    sigma_v: float = DEFAULT_SIGMA_V
    # yaw degrees of the discrete classes, or of the training views (continuous)
    views: tuple = DEFAULT_VIEWS

    def __getitem__(self, name):
        return self.tensors[name]

    def copy(self):
        return Parameters(
            self.arch,
            {k: v.copy() for k, v in self.tensors.items()},
            self.sigma_y,
            self.sigma_v,
            tuple(self.views),
        )

    def zeros_like(self):
        return {k: np.zeros_like(v) for k, v in self.tensors.items()}

    def view_label(self, degrees):
        """Model-space label for a yaw in degrees: class index or scaled scalar."""
        if self.arch.head == CONTINUOUS:
            return float(degrees) / YAW_SCALE
        for i, v in enumerate(self.views):
            if abs(v - float(degrees)) < 1e-9:
                return i
        raise ContractError(
            f"view {degrees} is not a discrete label; valid labels: "
            + ", ".join(f"{v:g}" for v in self.views)
        )

    def label_degrees(self, label):
        if self.arch.head == CONTINUOUS:
            return float(label) * YAW_SCALE
        return float(self.views[int(label)])


@dataclass
class ViewSample:
    """One draw of the random view codes, one vector per hybrid layer."""

    codes: tuple
    log_weight: float = float("nan")

    def flat(self):
        return np.concatenate(self.codes)


@dataclass
class SampleSet:
    samples: list
    weights: np.ndarray
    best: int


@dataclass
class ForwardTrace:
    x: np.ndarray
    activations: list  # h_1 ... h_L (only the generative part before full_forward)
    codes: np.ndarray  # concatenated random codes
    y_mean: np.ndarray
    view_out: np.ndarray
    n_identity: int = 0  # leading entries of ``activations`` that are identity features

    @property
    def identity_features(self):
        return tuple(self.activations[: self.n_identity])


def to_model_space(images):
    """Pixel values in [0, 1] -> zero-centred model inputs/targets."""
    return np.asarray(images, dtype=np.float64) - 0.5


def to_image_space(values):
    return np.clip(np.asarray(values, dtype=np.float64) + 0.5, 0.0, 1.0)


def init_parameters(arch, seed=0, sigma_y=DEFAULT_SIGMA_Y, sigma_v=DEFAULT_SIGMA_V, views=None):
    """Weights ~ N(0, 1/fan_in) in canonical tensor order, biases zero."""
    rng = Rng(seed)
    tensors = {}
    for name, shape in arch.tensor_shapes().items():
        if len(shape) == 1:
            tensors[name] = np.zeros(shape)
        else:
            std = 1.0 / np.sqrt(shape[0])
            tensors[name] = std * rng.normal(shape[0] * shape[1]).reshape(shape)
    if views is None:
        if arch.head == CONTINUOUS or arch.n_views == len(DEFAULT_VIEWS):
            views = DEFAULT_VIEWS
        else:
            views = np.linspace(-45.0, 45.0, arch.n_views)
    if arch.head == DISCRETE and len(views) != arch.n_views:
        raise ContractError(f"{len(views)} view labels for a {arch.n_views}-way head")
    return Parameters(arch, tensors, float(sigma_y), float(sigma_v), tuple(float(v) for v in views))


# ----------------------------------------------------------------------------
# batched core: rows are independent (pair, sample) evaluations


def identity_forward(params, x):
    """Activations of the identity pathway for rows of ``x``."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != params.arch.input_dim:
        raise DimensionError(f"input has {x.shape[1]} columns, architecture expects {params.arch.input_dim}")
    acts = []
    h = x
    for l in range(params.arch.first_hybrid):
        h = sigmoid(h @ params[f"U{l}"] + params[f"b{l}"])
        acts.append(h)
    return acts


def _split_codes(arch, codes):
    out, start = {}, 0
    for l, layer in enumerate(arch.layers, 1):
        if layer.random:
            out[l] = codes[:, start : start + layer.random]
            start += layer.random
    return out


def generative_forward(params, h_k, codes, repeat=1):
    """Run layers after the identity pathway.

    ``h_k`` has one row per pair; ``codes`` has ``repeat`` consecutive rows per
    pair. Returns ``(activations, y, view_out)`` where ``activations`` holds
    ``h_{k+1} ... h_L`` with one row per code row.
    """
    arch = params.arch
    k = arch.first_hybrid
    codes = np.atleast_2d(codes)
    if codes.shape[1] != arch.total_random:
        raise DimensionError(f"codes have {codes.shape[1]} columns, architecture expects {arch.total_random}")
    blocks = _split_codes(arch, codes)
    acts = []
    h = None
    for l in range(k, len(arch.layers)):
        if l == k:
            z = h_k @ params[f"U{l}"]
            if repeat > 1:
                z = np.repeat(z, repeat, axis=0)
        else:
            z = h @ params[f"U{l}"]
        if l in blocks:
            z = z + blocks[l] @ params[f"V{l}"]
        h = sigmoid(z + params[f"b{l}"])
        acts.append(h)
    L = len(arch.layers)
    y = h @ params[f"U{L}"] + params[f"b{L}"]
    view_out = y @ params["Wy"] + codes @ params["Wv"] + params["bv"]
    return acts, y, view_out


def recon_loglik_rows(y_hat, y_mean, sigma_y):
    if sigma_y <= 0:
        raise ContractError("sigma_y must be positive")
    r = np.asarray(y_hat) - np.asarray(y_mean)
    d = r.shape[-1]
    return -d * np.log(sigma_y) - np.sum(r * r, axis=-1) / (2.0 * sigma_y**2)


def view_loglik_rows(params, view_target, view_out):
    """Per-row view log-likelihood; target is class index or scalar label."""
    if params.arch.head == DISCRETE:
        lp = log_softmax(view_out, axis=-1)
        idx = np.asarray(view_target, dtype=np.int64)
        return np.take_along_axis(lp, idx.reshape(-1, 1), axis=1)[:, 0]
    if params.sigma_v <= 0:
        raise ContractError("sigma_v must be positive")
    r = np.asarray(view_target, dtype=np.float64) - view_out[:, 0]
    return -np.log(params.sigma_v) - r * r / (2.0 * params.sigma_v**2)


def view_grad_rows(params, view_target, view_out):
    """d(-view log-likelihood)/d(view_out), one row per evaluation."""
    if params.arch.head == DISCRETE:
        g = softmax(view_out, axis=-1)
        idx = np.asarray(view_target, dtype=np.int64)
        g[np.arange(g.shape[0]), idx] -= 1.0
        return g
    return ((view_out[:, 0] - np.asarray(view_target, dtype=np.float64)) / params.sigma_v**2)[:, None]


def backward(params, x, id_acts, gen_acts, codes, y, dy, dview, pair_of_row):
    """Gradients of ``sum_rows loss_row`` given output-side derivatives.

    ``dy`` and ``dview`` already carry the per-row weights. ``id_acts`` has one
    row per pair, everything generative one row per evaluation;
    ``pair_of_row`` maps evaluation rows to pairs.
    """
    arch = params.arch
    k = arch.first_hybrid
    L = len(arch.layers)
    n_pairs = id_acts[0].shape[0]
    grads = {}
    grads["Wy"] = y.T @ dview
    grads["Wv"] = codes.T @ dview
    grads["bv"] = dview.sum(axis=0)
    dy = dy + dview @ params["Wy"].T
    grads[f"U{L}"] = gen_acts[-1].T @ dy
    grads[f"b{L}"] = dy.sum(axis=0)
    dh = dy @ params[f"U{L}"].T
    blocks = _split_codes(arch, codes)
    for l in range(L - 1, k - 1, -1):
        h = gen_acts[l - k]
        dz = dh * h * (1.0 - h)
        grads[f"b{l}"] = dz.sum(axis=0)
        if l in blocks:
            grads[f"V{l}"] = blocks[l].T @ dz
        if l == k:
            if dz.shape[0] != n_pairs or np.any(pair_of_row != np.arange(n_pairs)):
                agg = np.zeros((n_pairs, dz.shape[1]))
                np.add.at(agg, pair_of_row, dz)
                dz = agg
            grads[f"U{l}"] = id_acts[k - 1].T @ dz
            dh = dz @ params[f"U{l}"].T
        else:
            grads[f"U{l}"] = gen_acts[l - 1 - k].T @ dz
            dh = dz @ params[f"U{l}"].T
    for l in range(k - 1, -1, -1):
        h = id_acts[l]
        dz = dh * h * (1.0 - h)
        grads[f"b{l}"] = dz.sum(axis=0)
        grads[f"U{l}"] = (x if l == 0 else id_acts[l - 1]).T @ dz
        if l > 0:
            dh = dz @ params[f"U{l}"].T
    return {name: grads[name] for name in arch.tensor_shapes()}


# ----------------------------------------------------------------------------
# single-input API


def extract_identity(x, params):
    """Identity features ``(h^id_1, ..., h^id_k)`` of one input; no sampling."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise DimensionError("extract_identity takes one input vector")
    return tuple(a[0] for a in identity_forward(params, x[None, :]))


def sample_view_codes(arch, S, rng):
    """``S`` independent ViewSamples, every code entry uniform on [0, 1)."""
    if S < 1:
        raise ContractError("need at least one sample")
    flat = rng.random(S * arch.total_random).reshape(S, arch.total_random)
    samples = []
    for row in flat:
        parts, start = [], 0
        for r in arch.random_widths:
            parts.append(row[start : start + r].copy())
            start += r
        samples.append(ViewSample(tuple(parts)))
    return samples


def stack_codes(samples):
    return np.stack([s.flat() for s in samples])


def forward_given_sample(h_id, sample, params):
    """Generate ``(y_mean, view_out, ForwardTrace)`` from the last identity
    feature and one ViewSample."""
    h_k = np.asarray(h_id, dtype=np.float64)[None, :]
    codes = sample.flat()[None, :]
    acts, y, view_out = generative_forward(params, h_k, codes)
    trace = ForwardTrace(None, [a[0] for a in acts], codes[0], y[0], view_out[0])
    return y[0], view_out[0], trace


def full_forward(x, sample, params):
    """Forward pass from the raw input; the trace holds every activation."""
    id_acts = extract_identity(x, params)
    y, view_out, trace = forward_given_sample(id_acts[-1], sample, params)
    trace.x = np.asarray(x, dtype=np.float64)
    trace.activations = list(id_acts) + trace.activations
    trace.n_identity = len(id_acts)
    return y, view_out, trace


def recon_loglik(y_hat, y_mean, sigma_y):
    y_hat = np.asarray(y_hat, dtype=np.float64)
    y_mean = np.asarray(y_mean, dtype=np.float64)
    if y_hat.shape != y_mean.shape:
        raise DimensionError(f"target {y_hat.shape} and mean {y_mean.shape} differ")
    return float(recon_loglik_rows(y_hat, y_mean, sigma_y))


def view_loglik_discrete(v_hat, logits):
    v_hat = np.asarray(v_hat, dtype=np.float64)
    logits = np.asarray(logits, dtype=np.float64)
    if v_hat.shape != logits.shape or np.sum(v_hat == 1.0) != 1 or np.sum(v_hat == 0.0) != v_hat.size - 1:
        raise ContractError("view label must be a one-hot vector matching the logits")
    return float(log_softmax(logits)[int(np.argmax(v_hat))])


def view_loglik_continuous(v_hat, view_mean, sigma_v):
    if sigma_v <= 0:
        raise ContractError("sigma_v must be positive")
    r = float(v_hat) - float(np.asarray(view_mean).reshape(-1)[0])
    return -np.log(sigma_v) - r * r / (2.0 * sigma_v**2)


def _view_target(params, v_hat):
    """One-hot vector or scalar -> index or scalar used by the row functions."""
    if params.arch.head == DISCRETE:
        v = np.asarray(v_hat)
        return int(np.argmax(v)) if v.ndim == 1 else int(v)
    return float(np.asarray(v_hat).reshape(-1)[0])


def sample_log_weights(x, y_hat, v_hat, samples, params):
    """Unnormalized log importance weights ``log p(y, v | h^v_s)``."""
    x = np.asarray(x, dtype=np.float64)
    id_acts = identity_forward(params, x[None, :])
    codes = stack_codes(samples)
    _, y, view_out = generative_forward(params, id_acts[-1], codes, repeat=len(samples))
    target = _view_target(params, v_hat)
    ll = recon_loglik_rows(np.asarray(y_hat)[None, :], y, params.sigma_y)
    ll = ll + view_loglik_rows(params, np.full(len(samples), target), view_out)
    return ll


def normalize_log_weights(log_w):
    """Self-normalized weights and argmax index (lowest index wins ties)."""
    log_w = np.asarray(log_w, dtype=np.float64)
    w = np.exp(log_w - logsumexp(log_w))
    return w, int(np.argmax(log_w))


def importance_weights(x, y_hat, v_hat, samples, params):
    if not samples:
        raise ContractError("need at least one sample")
    log_w = sample_log_weights(x, y_hat, v_hat, samples, params)
    w, best = normalize_log_weights(log_w)
    for s, lw in zip(samples, log_w):
        s.log_weight = float(lw)
    return SampleSet(list(samples), w, best)


@dataclass
class Spectrum:
    labels: list
    images: list  # model space
    chosen: list  # sample index per label
    codes: np.ndarray  # (S, R) candidate codes
    outputs: np.ndarray  # (S, D_y) candidate outputs
    view_outs: np.ndarray  # (S, M)


def _label_scores(params, view_outs, label):
    """Log-probability (or log-density) of ``label`` under each candidate."""
    n = view_outs.shape[0]
    if params.arch.head == DISCRETE:
        return view_loglik_rows(params, np.full(n, int(label)), view_outs)
    return view_loglik_rows(params, np.full(n, float(label)), view_outs)


def spectrum(x, view_labels, S, params, rng):
    """Draw ``S`` codes once and pick, per label, the most probable output."""
    view_labels = list(view_labels)
    if not view_labels:
        raise ContractError("no view labels requested")
    if params.arch.head == DISCRETE:
        bad = [v for v in view_labels if not 0 <= int(v) < params.arch.n_views]
        if bad:
            raise ContractError(f"view labels {bad} outside 0..{params.arch.n_views - 1}")
    x = np.asarray(x, dtype=np.float64)
    samples = sample_view_codes(params.arch, S, rng)
    codes = stack_codes(samples)
    id_acts = identity_forward(params, x[None, :])
    _, y, view_out = generative_forward(params, id_acts[-1], codes, repeat=S)
    chosen = [int(np.argmax(_label_scores(params, view_out, v))) for v in view_labels]
    return Spectrum(view_labels, [y[i].copy() for i in chosen], chosen, codes, y, view_out)


def reconstruct_spectrum(x, view_labels, S, params, rng):
    """One reconstructed image (model space) per requested view label."""
    return spectrum(x, view_labels, S, params, rng).images


def estimate_view(x, params, S, rng, candidate_views):
    """Return ``(view label, view feature)`` for input ``x``.

    Continuous head: the candidate whose reconstruction is closest to ``x``.
    Discrete head: the candidate whose view-head response to its own
    reconstruction best matches the response to ``x`` under the same code.
    The view feature is the winning sample's concatenated code.
    """
    candidate_views = list(candidate_views)
    if not candidate_views:
        raise ContractError("no candidate views")
    x = np.asarray(x, dtype=np.float64)
    spec = spectrum(x, candidate_views, S, params, rng)
    ys = spec.outputs[spec.chosen]
    codes = spec.codes[spec.chosen]
    if params.arch.head == CONTINUOUS:
        dist = np.sum((ys - x[None, :]) ** 2, axis=1)
    else:
        base = codes @ params["Wv"] + params["bv"]
        p_x = softmax(x[None, :] @ params["Wy"] + base, axis=1)
        p_y = softmax(ys @ params["Wy"] + base, axis=1)
        dist = np.sum((p_x - p_y) ** 2, axis=1)
    z = int(np.argmin(dist))
    return candidate_views[z], codes[z].copy()


def lower_bound_estimate(pairs, S, params, rng):
    """Batch mean of ``sum_s w_s log p(y, v, h^v_s | h^id)`` (monitoring only).

    ``pairs`` is a sequence of ``(x, y_hat, v_hat)`` in model space.
    """
    total, n = 0.0, 0
    for x, y_hat, v_hat in pairs:
        samples = sample_view_codes(params.arch, S, rng)
        log_w = sample_log_weights(x, y_hat, v_hat, samples, params)
        w, _ = normalize_log_weights(log_w)
        total += float(np.sum(w * log_w))
        n += 1
    if n == 0:
        raise ContractError("empty batch")
    return total / n
