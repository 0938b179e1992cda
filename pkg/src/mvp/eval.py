"""Evaluation protocols at desk scale.

Recognition: LDA is fitted on training identities, one 0-degree image per
test identity forms the gallery, every non-frontal test image is a probe and
is assigned the identity of its nearest gallery neighbour in LDA space.

Also here: recognition on reconstructed images, view estimation against a
PCA + least-squares baseline, viewpoint interpolation, and summaries of the
importance-weight statistics logged during training.
"""

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import model as M
from .errors import ContractError
from .numerics import Rng, sym_eigh
from .synthdata import build_pairs

FEATURE_LAYERS = ("raw", "h1", "h2", "h3", "h4", "h5")
CHUNK = 64  # images per batched forward pass


@dataclass
class EvalReport:
    """A table of per-view values for one or more methods.

    ``rows[name]`` is aligned with ``columns`` (view degrees); ``averages``
    holds the per-method mean over columns.
    """

    protocol: str
    metric: str
    columns: tuple
    rows: dict = field(default_factory=dict)
    averages: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def add(self, name, values):
        values = [float(v) for v in values]
        if len(values) != len(self.columns):
            raise ContractError(f"row {name!r} has {len(values)} values for {len(self.columns)} columns")
        self.rows[name] = values
        self.averages[name] = float(np.mean(values)) if values else float("nan")

    def value(self, name, column):
        return self.rows[name][list(self.columns).index(column)]

    def summary(self):
        lines = [f"protocol: {self.protocol}", f"metric: {self.metric}"]
        for name in self.rows:
            lines.append(f"{name}: average {self.averages[name]:.4f}")
        for k, v in self.metadata.items():
            lines.append(f"{k}: {v}")
        return "\n".join(lines)

    def write(self, path):
        """CSV table (method x view, plus average) and a ``.txt`` summary."""
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["method"] + [f"{c:g}" for c in self.columns] + ["average"])
            for name, values in self.rows.items():
                w.writerow([name] + [repr(v) for v in values] + [repr(self.averages[name])])
        path.with_suffix(".txt").write_text(self.summary() + "\n")
        return path


def config_digest(obj):
    """Short stable hash of a JSON-serializable configuration."""
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


# ----------------------------------------------------------------------------
# LDA


@dataclass
class LdaModel:
    projection: np.ndarray  # (dim, n_components)
    mean: np.ndarray  # global feature mean
    class_means: np.ndarray  # (C, n_components), projected
    classes: np.ndarray
    lam: float
    eigenvalues: np.ndarray  # between-class eigenvalues of the kept directions


def _scatter(features, labels):
    classes = np.unique(labels)
    mu = features.mean(axis=0)
    d = features.shape[1]
    sw = np.zeros((d, d))
    sb = np.zeros((d, d))
    means = []
    for c in classes:
        xc = features[labels == c]
        mc = xc.mean(axis=0)
        means.append(mc)
        r = xc - mc
        sw += r.T @ r
        sb += len(xc) * np.outer(mc - mu, mc - mu)
    return classes, mu, np.array(means), sw, sb


def lda_fit(features, labels, lam=None):
    """Regularized Fisher LDA keeping the top ``C - 1`` directions.

    Within-class scatter is whitened by ``(S_w + lam I)^(-1/2)`` and the
    whitened between-class scatter is diagonalized. ``lam`` defaults to
    ``1e-3 * trace(S_w) / dim``, or ``1e-3`` when that trace is zero.
    """
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise ContractError("features must be (n, dim) with one label per row")
    classes, counts = np.unique(y, return_counts=True)
    if len(classes) < 2:
        raise ContractError("LDA needs at least two classes")
    if counts.min() < 2:
        raise ContractError("LDA needs at least two samples per class")
    classes, mu, means, sw, sb = _scatter(X, y)
    d = X.shape[1]
    if lam is None:
        # constant features have no within-class scatter to scale by
        lam = 1e-3 * np.trace(sw) / d if np.trace(sw) > 0 else 1e-3
    vals, vecs = sym_eigh(sw + lam * np.eye(d), method="auto")
    if vals[-1] <= 1e-12 * max(vals[0], 1e-300):
        raise ContractError(f"within-class scatter is singular with lam={lam:g}; use a larger lam")
    whiten = vecs / np.sqrt(vals)
    sbw = whiten.T @ sb @ whiten
    sbw = 0.5 * (sbw + sbw.T)
    bvals, bvecs = sym_eigh(sbw, method="auto")
    k = min(len(classes) - 1, d)
    proj = whiten @ bvecs[:, :k]
    return LdaModel(proj, mu, (means - mu) @ proj, classes, float(lam), bvals[:k])


def lda_project(model, features):
    return (np.atleast_2d(np.asarray(features, dtype=np.float64)) - model.mean) @ model.projection


def fisher_ratio(features, labels, direction):
    """Between/within scatter ratio of features projected on ``direction`` columns."""
    p = np.asarray(features) @ np.asarray(direction).reshape(np.asarray(features).shape[1], -1)
    _, _, _, sw, sb = _scatter(p, np.asarray(labels))
    return float(np.trace(sb) / max(np.trace(sw), 1e-300))


def nearest_neighbour(gallery, probes):
    """Index of the closest gallery row (Euclidean) for each probe row."""
    d = np.sum(probes**2, axis=1)[:, None] - 2.0 * probes @ gallery.T + np.sum(gallery**2, axis=1)[None, :]
    return np.argmin(d, axis=1)


# ----------------------------------------------------------------------------
# recognition


def recognition_across_views(train_features, train_labels, gallery_features, gallery_labels,
                             probe_features, probe_labels, probe_views, gallery_views=None,
                             lam=None, name="features", protocol="recognition"):
    """Gallery/probe identification in LDA space; per-view accuracy table."""
    gallery_labels = np.asarray(gallery_labels)
    probe_labels = np.asarray(probe_labels)
    probe_views = np.asarray(probe_views, dtype=np.float64)
    if gallery_views is not None and np.any(np.abs(np.asarray(gallery_views, dtype=float)) > 1e-9):
        raise ContractError("gallery images must all be frontal (0 degrees)")
    if len(np.unique(gallery_labels)) != len(gallery_labels):
        raise ContractError("gallery must hold exactly one image per identity")
    missing = sorted(set(probe_labels.tolist()) - set(gallery_labels.tolist()))
    if missing:
        raise ContractError(f"no frontal gallery image for identities {missing}")
    lda = lda_fit(train_features, train_labels, lam)
    g = lda_project(lda, gallery_features)
    p = lda_project(lda, probe_features)
    pred = gallery_labels[nearest_neighbour(g, p)]
    correct = pred == probe_labels
    views = tuple(sorted(set(probe_views.tolist())))
    report = EvalReport(protocol, "accuracy", views)
    report.add(name, [correct[probe_views == v].mean() for v in views])
    report.metadata["lda_lambda"] = lda.lam
    report.metadata["probes"] = int(len(probe_labels))
    return report


def gallery_illumination(grid):
    """Index of the illumination closest to unit gain."""
    return int(np.argmin(np.abs(np.asarray(grid.illuminations) - 1.0)))


def split_images(grid, ids):
    """Flatten a grid restricted to ``ids``: images, identity, yaw, illumination."""
    sub = grid.subset(ids=ids)
    n, m, l, d = sub.images.shape
    ident = np.repeat(np.array(sub.ids), m * l)
    yaw = np.tile(np.repeat(np.array(sub.views), l), n)
    ill = np.tile(np.arange(l), n * m)
    return sub.images.reshape(-1, d), ident, yaw, ill


def grid_recognition(grid, features_of, train_ids, test_ids, name="features", protocol="recognition",
                     lam=None):
    """Run the gallery/probe protocol on an ImageGrid.

    ``features_of(images, yaws)`` maps images in [0, 1] (one per row) and their
    yaws to feature rows.
    """
    if 0.0 not in grid.views:
        raise ContractError("recognition protocol needs a 0-degree view for the gallery")
    tr_img, tr_id, tr_yaw, _ = split_images(grid, train_ids)
    te_img, te_id, te_yaw, te_ill = split_images(grid, test_ids)
    gal = (te_yaw == 0.0) & (te_ill == gallery_illumination(grid))
    probe = te_yaw != 0.0
    tr_f = features_of(tr_img, tr_yaw)
    te_f = features_of(te_img, te_yaw)
    report = recognition_across_views(
        tr_f, tr_id, te_f[gal], te_id[gal], te_f[probe], te_id[probe], te_yaw[probe],
        te_yaw[gal], lam, name, protocol,
    )
    report.metadata["train_identities"] = len(tuple(train_ids))
    report.metadata["test_identities"] = len(tuple(test_ids))
    return report


# ----------------------------------------------------------------------------
# batched model evaluation


def _candidates(params, images, S, rng):
    """Codes, outputs, view-head outputs and generative activations for ``S``
    draws per image, shapes ``(n, S, ...)``."""
    X = M.to_model_space(images)
    n = X.shape[0]
    codes = rng.random(n * S * params.arch.total_random).reshape(n * S, -1)
    id_acts = M.identity_forward(params, X)
    gen_acts, y, view_out = M.generative_forward(params, id_acts[-1], codes, repeat=S)
    shape = lambda a: a.reshape(n, S, -1)  # noqa: E731
    return shape(codes), shape(y), shape(view_out), [shape(a) for a in gen_acts], id_acts


def _label_rows(params, view_out, labels):
    """Log-probability of ``labels[i]`` under each of image i's S candidates."""
    n, S, _ = view_out.shape
    rows = np.repeat(np.asarray(labels), S)
    return M.view_loglik_rows(params, rows, view_out.reshape(n * S, -1)).reshape(n, S)


def layer_features(params, images, layer, yaws=None, S=20, seed=0, frontal=0.0):
    """Feature rows for ``images`` in [0, 1].

    ``raw`` is the pixels; ``h1``..``h5`` are layer activations. Layers after
    the identity pathway depend on the view code; they are read from the
    sample the model selects for the ``frontal`` view label.
    """
    images = np.atleast_2d(np.asarray(images, dtype=np.float64))
    if layer == "raw":
        return images.copy()
    if layer not in FEATURE_LAYERS:
        raise ContractError(f"unknown feature layer {layer!r}; choose from {FEATURE_LAYERS}")
    l = int(layer[1:])
    k = params.arch.first_hybrid
    if l > len(params.arch.layers):
        raise ContractError(f"layer {layer} does not exist in {params.arch.format()}")
    rng = Rng(seed)
    out = []
    label = params.view_label(frontal)
    for start in range(0, len(images), CHUNK):
        chunk = images[start : start + CHUNK]
        if l <= k:
            out.append(M.identity_forward(params, M.to_model_space(chunk))[l - 1])
            continue
        _, _, view_out, acts, _ = _candidates(params, chunk, S, rng)
        best = np.argmax(_label_rows(params, view_out, [label] * len(chunk)), axis=1)
        out.append(acts[l - k - 1][np.arange(len(chunk)), best])
    return np.concatenate(out)


def reconstruct_images(params, images, yaws, S=20, seed=0):
    """Reconstruction of each image at the given yaw, in [0, 1]."""
    images = np.atleast_2d(np.asarray(images, dtype=np.float64))
    labels = [params.view_label(v) for v in np.broadcast_to(np.asarray(yaws, dtype=float), (len(images),))]
    rng = Rng(seed)
    out = []
    for start in range(0, len(images), CHUNK):
        chunk = images[start : start + CHUNK]
        _, y, view_out, _, _ = _candidates(params, chunk, S, rng)
        best = np.argmax(_label_rows(params, view_out, labels[start : start + CHUNK]), axis=1)
        out.append(M.to_image_space(y[np.arange(len(chunk)), best]))
    return np.concatenate(out)


def recognition_report(params, grid, train_ids, test_ids, layers=("raw", "h1", "h2", "h3", "h4"), S=20, seed=0):
    """Cross-view recognition accuracy for several feature layers (one row each)."""
    report = None
    for layer in layers:
        r = grid_recognition(
            grid, lambda imgs, yaws: layer_features(params, imgs, layer, yaws, S, seed),
            train_ids, test_ids, layer, "recognition",
        )
        if report is None:
            report = r
        else:
            report.rows.update(r.rows)
            report.averages.update(r.averages)
    report.metadata["samples"] = S
    report.metadata["seed"] = seed
    return report


def reconstruction_quality(params, grid, train_ids, test_ids, S=20, seed=0, reconstruct=None):
    """Recognition on original images (OI) and their same-view reconstructions (RI).

    ``reconstruct(images, yaws)`` overrides the model (used for baselines).
    """
    if reconstruct is None:
        reconstruct = lambda imgs, yaws: reconstruct_images(params, imgs, yaws, S, seed)  # noqa: E731
    oi = grid_recognition(grid, lambda imgs, yaws: imgs, train_ids, test_ids, "OI", "recon-quality")
    ri = grid_recognition(grid, reconstruct, train_ids, test_ids, "RI", "recon-quality")
    oi.rows.update(ri.rows)
    oi.averages.update(ri.averages)
    oi.metadata["samples"] = S
    oi.metadata["seed"] = seed
    return oi


# ----------------------------------------------------------------------------
# view estimation


def estimate_views(params, images, candidates, S=20, seed=0):
    """Predicted yaw (degrees) per image, one seeded stream over all images."""
    candidates = [float(c) for c in candidates]
    if not candidates:
        raise ContractError("no candidate views")
    labels = [params.view_label(c) for c in candidates]
    rng = Rng(seed)
    out = []
    for x in np.atleast_2d(images):
        label, _ = M.estimate_view(M.to_model_space(x), params, S, rng, labels)
        out.append(params.label_degrees(label))
    return np.array(out)


def _mae_report(protocol, name, yaw, pred):
    views = tuple(sorted(set(np.asarray(yaw, dtype=float).tolist())))
    err = np.abs(np.asarray(pred) - np.asarray(yaw))
    report = EvalReport(protocol, "mae_degrees", views)
    report.add(name, [err[yaw == v].mean() for v in views])
    report.metadata[f"{name}_overall_mae"] = float(err.mean())
    return report


def view_estimation_error(params, grid, test_ids, candidates=None, S=20, seed=0):
    """MAE (degrees) of the model's view estimate on every test image."""
    candidates = grid.views if candidates is None else candidates
    img, _, yaw, _ = split_images(grid, test_ids)
    pred = estimate_views(params, img, candidates, S, seed)
    report = _mae_report("view-error", "MVP", yaw, pred)
    report.metadata["candidates"] = ",".join(f"{c:g}" for c in candidates)
    return report


@dataclass
class LinearViewRegressor:
    mean: np.ndarray
    components: np.ndarray  # (dim, k)
    coef: np.ndarray  # (k + 1,), intercept last

    def predict(self, images):
        z = (np.atleast_2d(images) - self.mean) @ self.components
        return z @ self.coef[:-1] + self.coef[-1]


def fit_lr_baseline(images, yaws, k=32):
    """Least-squares yaw regression on the top-``k`` PCA coefficients."""
    X = np.asarray(images, dtype=np.float64)
    mu = X.mean(axis=0)
    Xc = X - mu
    _, vecs = sym_eigh(Xc.T @ Xc / max(len(X) - 1, 1), method="auto")
    comps = vecs[:, : min(k, X.shape[1])]
    Z = np.hstack([Xc @ comps, np.ones((len(X), 1))])
    coef, *_ = np.linalg.lstsq(Z, np.asarray(yaws, dtype=np.float64), rcond=None)
    return LinearViewRegressor(mu, comps, coef)


def lr_baseline(train_images, train_yaws, test_images, test_yaws, k=32):
    """PCA + linear-regression view estimate; MAE in degrees."""
    reg = fit_lr_baseline(train_images, train_yaws, k)
    report = _mae_report("view-error", "LR", np.asarray(test_yaws, dtype=float), reg.predict(test_images))
    report.metadata["pca_components"] = reg.components.shape[1]
    return report


def grid_lr_baseline(grid, train_ids, test_ids, k=32):
    tr, _, tr_yaw, _ = split_images(grid, train_ids)
    te, _, te_yaw, _ = split_images(grid, test_ids)
    return lr_baseline(tr, tr_yaw, te, te_yaw, k)


# ----------------------------------------------------------------------------
# viewpoint interpolation

INTERP_TRAIN_VIEWS = (0.0, 30.0, 60.0)
INTERP_TEST_VIEWS = (15.0, 45.0)


def interpolation_pairs(grid, train_ids, train_views=INTERP_TRAIN_VIEWS):
    """Continuous-head training pairs restricted to ``train_views``."""
    return build_pairs(grid.subset(ids=train_ids, views=train_views), head=M.CONTINUOUS)


def mse(a, b):
    return float(np.mean((np.asarray(a) - np.asarray(b)) ** 2))


def interpolation_experiment(params, grid, train_ids, test_ids, train_views=INTERP_TRAIN_VIEWS,
                             test_views=INTERP_TEST_VIEWS, S=20, seed=0, reconstruct=None):
    """Predict unseen views of test identities from their 0-degree images.

    Rows: ``MVP`` (model reconstruction), ``mean-image`` (mean training
    image), ``nearest-view`` (the identity's own render at the closest
    training view; the better of two equidistant views). Values are pixel
    MSE in [0, 1] units per unseen view. The metadata also carries the
    identity retrieval accuracy of unseen-view inputs using identity features.
    """
    if params is not None and params.arch.head != M.CONTINUOUS:
        raise ContractError("interpolation needs a continuous view head")
    if reconstruct is None:
        reconstruct = lambda imgs, yaws: reconstruct_images(params, imgs, yaws, S, seed)  # noqa: E731
    train_views = tuple(float(v) for v in train_views)
    test_views = tuple(float(v) for v in test_views)
    sub = grid.subset(ids=test_ids)
    kin = sub.views.index(0.0)
    mean_img = grid.subset(ids=train_ids, views=train_views).images.reshape(-1, grid.images.shape[-1]).mean(axis=0)
    report = EvalReport("interpolation", "mse", test_views)
    rows = {"MVP": [], "mean-image": [], "nearest-view": []}
    for v in test_views:
        k = sub.views.index(v)
        inputs = sub.images[:, kin].reshape(-1, sub.images.shape[-1])
        truth = sub.images[:, k].reshape(-1, sub.images.shape[-1])
        pred = reconstruct(inputs, np.full(len(inputs), v))
        rows["MVP"].append(mse(pred, truth))
        rows["mean-image"].append(mse(np.broadcast_to(mean_img, truth.shape), truth))
        gaps = np.abs(np.array(train_views) - v)
        nearest = [tv for tv, gap in zip(train_views, gaps) if gap == gaps.min()]
        rows["nearest-view"].append(
            min(mse(sub.images[:, sub.views.index(tv)].reshape(truth.shape), truth) for tv in nearest)
        )
    for name, values in rows.items():
        report.add(name, values)
    if params is not None:
        report.metadata["unseen_input_retrieval"] = unseen_view_retrieval(
            params, grid, train_ids, test_ids, train_views, test_views, S, seed
        )
    return report


def unseen_view_retrieval(params, grid, train_ids, test_ids, train_views=INTERP_TRAIN_VIEWS,
                          test_views=INTERP_TEST_VIEWS, S=20, seed=0):
    """Accuracy of matching unseen-view test images to their identity's
    0-degree image using identity-pathway features and LDA."""
    layer = f"h{params.arch.first_hybrid}"
    feats = lambda imgs: layer_features(params, imgs, layer, None, S, seed)  # noqa: E731
    tr = grid.subset(ids=train_ids, views=train_views)
    n, m, l, d = tr.images.shape
    tr_f = feats(tr.images.reshape(-1, d))
    tr_id = np.repeat(np.array(tr.ids), m * l)
    te = grid.subset(ids=test_ids)
    gi = gallery_illumination(grid)
    gal = te.images[:, te.views.index(0.0), gi]
    probes, labels = [], []
    for v in test_views:
        imgs = te.images[:, te.views.index(v)]
        probes.append(imgs.reshape(-1, d))
        labels.append(np.repeat(np.array(te.ids), l))
    lda = lda_fit(tr_f, tr_id)
    pred = np.array(te.ids)[nearest_neighbour(lda_project(lda, feats(gal)), lda_project(lda, feats(np.concatenate(probes))))]
    return float(np.mean(pred == np.concatenate(labels)))


# ----------------------------------------------------------------------------
# importance-weight diagnostics


def weight_sparsity_stats(metrics, other=None, final_fraction=1.0 / 3.0):
    """Summaries of per-epoch weight statistics.

    ``metrics`` is a list of metric rows (dicts as read from the metrics CSV,
    or EpochMetrics). Late-phase values use the final ``final_fraction`` of
    epochs; when the rows carry per-batch medians (``batch_max_weight``)
    the late median is taken over batches. ``other`` is a second run (the
    weighted-average estimator) for the final-loss ratio.
    """
    rows = [m.row() | {"batch_max_weight": m.batch_max_weight} if hasattr(m, "row") else dict(m) for m in metrics]
    if len(rows) < 2:
        raise ContractError("weight statistics need at least two epochs")
    n_late = max(1, int(np.ceil(len(rows) * final_fraction)))
    late = rows[-n_late:]
    batch = [b for r in late for b in (r.get("batch_max_weight") or [])]
    late_median = float(np.median(batch)) if batch else float(np.median([r["max_weight_median"] for r in late]))
    out = {
        "epochs": len(rows),
        "max_weight_median": [float(r["max_weight_median"]) for r in rows],
        "weight_sparsity_fraction": [float(r["weight_sparsity_fraction"]) for r in rows],
        "late_epochs": n_late,
        "late_max_weight_median": late_median,
        "late_sparsity_fraction": float(np.mean([r["weight_sparsity_fraction"] for r in late])),
        "final_loss": float(rows[-1]["mean_loss"]),
        "first_loss": float(rows[0]["mean_loss"]),
    }
    if other is not None:
        other_rows = [m.row() if hasattr(m, "row") else dict(m) for m in other]
        out["other_final_loss"] = float(other_rows[-1]["mean_loss"])
        out["final_loss_ratio"] = out["final_loss"] / out["other_final_loss"]
    return out


def sparsity_report(stats):
    """EvalReport with one column per epoch (median max weight and sparsity)."""
    cols = tuple(range(1, stats["epochs"] + 1))
    report = EvalReport("sparsity", "weight", cols)
    report.add("max_weight_median", stats["max_weight_median"])
    report.add("weight_sparsity_fraction", stats["weight_sparsity_fraction"])
    for k in ("late_max_weight_median", "late_sparsity_fraction", "final_loss", "final_loss_ratio"):
        if k in stats:
            report.metadata[k] = stats[k]
    return report


__all__ = [
    "EvalReport",
    "LdaModel",
    "lda_fit",
    "lda_project",
    "recognition_across_views",
    "grid_recognition",
    "layer_features",
    "reconstruct_images",
    "recognition_report",
    "reconstruction_quality",
    "estimate_views",
    "view_estimation_error",
    "lr_baseline",
    "grid_lr_baseline",
    "interpolation_pairs",
    "interpolation_experiment",
    "unseen_view_retrieval",
    "weight_sparsity_stats",
    "sparsity_report",
]
