import csv

import numpy as np
import pytest

from mvp import eval as E
from mvp import model as M
from mvp import synthdata as D
from mvp import training as T
from mvp.errors import ContractError
from mvp.numerics import Rng


def blobs(n_per, centres, std, seed=0):
    rng = np.random.default_rng(seed)
    X = np.vstack([c + std * rng.normal(size=(n_per, len(c))) for c in centres])
    y = np.repeat(np.arange(len(centres)), n_per)
    return X, y


# ---- LDA -----------------------------------------------------------------------

def test_lda_two_classes_aligns_with_mean_difference():
    X1, y1 = blobs(30, [np.array([-1.0]), np.array([1.0])], 0.2)
    assert E.lda_fit(X1, y1).projection.shape == (1, 1)
    X, y = blobs(50, [np.array([-1.0, 0.0]), np.array([1.0, 0.0])], 0.2)
    lda = E.lda_fit(X, y, lam=1e-12)
    d = lda.projection[:, 0] / np.linalg.norm(lda.projection[:, 0])
    assert lda.projection.shape == (2, 1)
    # closed-form two-class Fisher direction
    m0, m1 = X[y == 0].mean(axis=0), X[y == 1].mean(axis=0)
    sw = sum((X[y == c] - X[y == c].mean(axis=0)).T @ (X[y == c] - X[y == c].mean(axis=0)) for c in (0, 1))
    ref = np.linalg.solve(sw, m1 - m0)
    assert abs(d @ ref) / np.linalg.norm(ref) > 1 - 1e-9
    assert abs(d[0]) > 0.95


def test_lda_identical_means_has_no_between_scatter():
    base = np.random.default_rng(1).normal(size=(10, 3))
    X = np.vstack([base, -base, base[::-1], -base[::-1]])
    y = np.repeat([0, 1], 20)
    # both classes are centred at the origin
    lda = E.lda_fit(X, y)
    assert np.allclose(lda.eigenvalues, 0.0, atol=1e-12)


def test_lda_beats_random_projections():
    rng = np.random.default_rng(4)
    centres = [rng.normal(size=5) * 2 for _ in range(3)]
    X, y = blobs(40, centres, 1.0, seed=5)
    X = X @ rng.normal(size=(5, 5))  # anisotropic within-class scatter
    lda = E.lda_fit(X, y, lam=1e-12)
    best = E.fisher_ratio(X, y, lda.projection[:, 0])
    for _ in range(100):
        assert best >= E.fisher_ratio(X, y, rng.normal(size=5)) - 1e-9


def test_lda_components_bounded():
    X, y = blobs(10, [np.full(6, float(c)) for c in range(4)], 0.3)
    assert E.lda_fit(X, y).projection.shape[1] <= 3


@pytest.mark.parametrize("X,y", [
    (np.zeros((4, 2)), np.zeros(4)),
    (np.zeros((3, 2)), np.array([0, 0, 1])),
])
def test_lda_preconditions(X, y):
    with pytest.raises(ContractError):
        E.lda_fit(X + np.arange(X.size).reshape(X.shape), y)


def test_lda_singular_reports_lambda():
    X = np.ones((4, 2))
    with pytest.raises(ContractError, match="larger lam"):
        E.lda_fit(X, np.array([0, 0, 1, 1]), lam=0.0)


def test_lda_scale_invariance():
    X, y = blobs(20, [np.zeros(4), np.ones(4), np.array([2.0, 0, 0, 1])], 0.5, seed=2)
    G, gl = X[::20], y[::20]
    a = E.nearest_neighbour(E.lda_project(E.lda_fit(X, y), G), E.lda_project(E.lda_fit(X, y), X))
    b = E.nearest_neighbour(E.lda_project(E.lda_fit(7.5 * X, y), 7.5 * G), E.lda_project(E.lda_fit(7.5 * X, y), 7.5 * X))
    assert np.array_equal(gl[a], gl[b])


# ---- recognition -------------------------------------------------------------------

def _protocol(n_ids=5, dim=6, seed=0, noise=0.1):
    rng = np.random.default_rng(seed)
    proto = rng.normal(size=(2 * n_ids, dim))
    views = np.array([-30.0, 0.0, 30.0])
    def feats(ids):
        f = np.array([proto[i] + noise * rng.normal(size=dim) for i in ids for _ in views])
        return f, np.repeat(ids, 3), np.tile(views, len(ids))
    tr_f, tr_l, _ = feats(np.arange(n_ids))
    te_f, te_l, te_v = feats(np.arange(n_ids, 2 * n_ids))
    g = te_v == 0
    return tr_f, tr_l, te_f[g], te_l[g], te_f[~g], te_l[~g], te_v[~g]


def test_probes_equal_to_gallery_are_perfect():
    tr_f, tr_l, g_f, g_l, _, _, _ = _protocol()
    r = E.recognition_across_views(tr_f, tr_l, g_f, g_l, g_f.copy(), g_l, np.full(len(g_l), 15.0), np.zeros(len(g_l)))
    assert r.averages["features"] == 1.0 and r.columns == (15.0,)


def test_random_features_near_chance():
    rng = np.random.default_rng(3)
    accs = []
    for _ in range(10):
        n = 20
        tr_l = np.repeat(np.arange(n), 4)
        g_l, p_l = np.arange(n, 2 * n), np.repeat(np.arange(n, 2 * n), 6)
        r = E.recognition_across_views(rng.normal(size=(4 * n, 8)), tr_l, rng.normal(size=(n, 8)), g_l,
                                       rng.normal(size=(6 * n, 8)), p_l, np.tile([-45.0, 45.0], 3 * n))
        accs.append(r.averages["features"])
    assert 0.02 <= np.mean(accs) <= 0.09


def test_true_labels_beat_permuted_labels():
    tr_f, tr_l, g_f, g_l, p_f, p_l, p_v = _protocol(noise=0.8)
    acc = E.recognition_across_views(tr_f, tr_l, g_f, g_l, p_f, p_l, p_v).averages["features"]
    rng = np.random.default_rng(0)
    for _ in range(5):
        perm = E.recognition_across_views(tr_f, tr_l, g_f, g_l, p_f, rng.permutation(p_l), p_v)
        assert acc >= perm.averages["features"]


def test_gallery_contract():
    tr_f, tr_l, g_f, g_l, p_f, p_l, p_v = _protocol()
    with pytest.raises(ContractError, match="frontal"):
        E.recognition_across_views(tr_f, tr_l, g_f, g_l, p_f, p_l, p_v, gallery_views=np.full(len(g_l), 15.0))
    with pytest.raises(ContractError, match="no frontal gallery"):
        E.recognition_across_views(tr_f, tr_l, g_f[1:], g_l[1:], p_f, p_l, p_v)
    with pytest.raises(ContractError, match="exactly one"):
        E.recognition_across_views(tr_f, tr_l, np.vstack([g_f, g_f[:1]]), np.append(g_l, g_l[0]), p_f, p_l, p_v)


@pytest.fixture(scope="module")
def grid():
    return D.render_grid(ids=range(8), views=(-30.0, 0.0, 30.0), size=8, blob_std=0.6)


def test_grid_recognition_layout(grid):
    r = E.grid_recognition(grid, lambda imgs, yaws: imgs, range(5), range(5, 8), "raw")
    assert r.columns == (-30.0, 30.0)
    assert r.metadata["probes"] == 3 * 2 * 3
    assert all(0.0 <= v <= 1.0 for v in r.rows["raw"])


def test_grid_recognition_needs_frontal(grid):
    with pytest.raises(ContractError):
        E.grid_recognition(grid.subset(views=(-30.0, 30.0)), lambda i, y: i, range(5), range(5, 8))


def test_reconstruction_quality_identity_and_constant(grid):
    same = E.reconstruction_quality(None, grid, range(5), range(5, 8), reconstruct=lambda imgs, yaws: imgs)
    assert same.rows["OI"] == same.rows["RI"]
    gray = E.reconstruction_quality(None, grid, range(5), range(5, 8),
                                    reconstruct=lambda imgs, yaws: np.full_like(imgs, 0.5))
    assert gray.averages["RI"] == pytest.approx(1 / 3)


def test_report_write(tmp_path, grid):
    r = E.grid_recognition(grid, lambda imgs, yaws: imgs, range(5), range(5, 8), "raw")
    r.metadata["seed"] = 4
    r.write(tmp_path / "rec.csv")
    rows = list(csv.reader(open(tmp_path / "rec.csv")))
    assert rows[0] == ["method", "-30", "30", "average"]
    assert rows[1][0] == "raw" and float(rows[1][3]) == r.averages["raw"]
    assert "seed: 4" in (tmp_path / "rec.txt").read_text()
    with pytest.raises(ContractError):
        r.add("bad", [1.0])


def test_config_digest_stable():
    assert E.config_digest({"a": 1, "b": [2]}) == E.config_digest({"b": [2], "a": 1})
    assert E.config_digest({"a": 1}) != E.config_digest({"a": 2})


# ---- model-driven features ------------------------------------------------------------------

SMALL = "8x8-16-16(3)-16(3)-24-8x8[3]"


@pytest.fixture(scope="module")
def small_model(grid):
    arch = M.Architecture.parse(SMALL)
    cfg = T.TrainConfig(samples=4, learning_rate=0.005, epochs=2, seed=2)
    p = T.initial_parameters(arch, cfg, grid.views)
    T.train(D.build_pairs(grid.subset(ids=range(5))), p, cfg)
    return p


def test_identity_layer_features(small_model, grid):
    imgs = grid.images[0, :, 0]
    h = E.layer_features(small_model, imgs, "h2")
    ref = M.identity_forward(small_model, M.to_model_space(imgs))[1]
    assert np.array_equal(h, ref)
    assert np.array_equal(E.layer_features(small_model, imgs, "raw"), imgs)


def test_reconstruction_layers_use_frontal_sample(small_model, grid):
    x = grid.images[2, 0, 1]
    S = 6
    h3 = E.layer_features(small_model, x[None], "h3", S=S, seed=9)[0]
    h4 = E.layer_features(small_model, x[None], "h4", S=S, seed=9)[0]
    spec = M.spectrum(M.to_model_space(x), [small_model.view_label(0.0)], S, small_model, Rng(9))
    z = spec.chosen[0]
    sample = M.sample_view_codes(small_model.arch, S, Rng(9))[z]
    _, _, trace = M.full_forward(M.to_model_space(x), sample, small_model)
    np.testing.assert_allclose(h3, trace.activations[2], atol=1e-12)
    np.testing.assert_allclose(h4, trace.activations[3], atol=1e-12)


def test_reconstruct_images_matches_spectrum(small_model, grid):
    x = grid.images[1, 2, 0]
    got = E.reconstruct_images(small_model, x[None], [-30.0], S=5, seed=3)[0]
    spec = M.reconstruct_spectrum(M.to_model_space(x), [small_model.view_label(-30.0)], 5, small_model, Rng(3))
    np.testing.assert_allclose(got, M.to_image_space(spec[0]), atol=1e-12)


def test_features_deterministic(small_model, grid):
    imgs = grid.images[:, 0, 0]
    a = E.layer_features(small_model, imgs, "h4", S=4, seed=1)
    b = E.layer_features(small_model, imgs, "h4", S=4, seed=1)
    assert np.array_equal(a, b)


@pytest.mark.parametrize("layer", ["h9", "conv"])
def test_unknown_layers(small_model, layer):
    with pytest.raises(ContractError):
        E.layer_features(small_model, np.zeros((1, 64)), layer)


def test_recognition_report_rows(small_model, grid):
    r = E.recognition_report(small_model, grid, range(5), range(5, 8), layers=("raw", "h2", "h4"), S=3)
    assert list(r.rows) == ["raw", "h2", "h4"]
    r2 = E.recognition_report(small_model, grid, range(5), range(5, 8), layers=("raw", "h2", "h4"), S=3)
    assert r.rows == r2.rows


# ---- view estimation -------------------------------------------------------------------------

def _input_free_continuous_model():
    arch = M.Architecture.parse("4-3-3(2)-3(2)-4-4[c]")
    p = M.init_parameters(arch, 1)
    p["U2"][...] = 0.0
    p["U5"][...] *= 0.1
    p["Wy"][...] = 0.0
    p["Wv"][...] = [[0.5], [0.5], [0.0], [0.0]]
    p["bv"][...] = -0.5
    return p


def test_exact_candidate_render_has_zero_error():
    p = _input_free_continuous_model()
    cands = [-45.0, 0.0, 45.0]
    spec = M.spectrum(np.zeros(4), [p.view_label(c) for c in cands], 30, p, Rng(5))
    assert len(set(spec.chosen)) == 3
    for k, c in enumerate(cands):
        img = M.to_image_space(spec.images[k])
        np.testing.assert_allclose(M.to_model_space(img), spec.images[k], atol=1e-15)
        assert E.estimate_views(p, img[None], cands, S=30, seed=5)[0] == c


def test_lr_baseline_on_linear_toy():
    rng = np.random.default_rng(0)
    yaw = rng.uniform(-45, 45, 60)
    basis = rng.normal(size=10)
    imgs = 0.5 + 0.004 * yaw[:, None] * basis[None, :]
    r = E.lr_baseline(imgs[:40], yaw[:40], imgs[40:], yaw[40:], k=3)
    assert r.metadata["LR_overall_mae"] < 1e-8


def test_lr_baseline_report_columns(grid):
    r = E.grid_lr_baseline(grid, range(5), range(5, 8), k=4)
    assert r.columns == grid.views and r.metric == "mae_degrees"


# ---- interpolation ---------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def interp_grid():
    return D.render_grid(ids=range(6), views=(0.0, 15.0, 30.0, 45.0, 60.0), illuminations=(1.0,), size=8)


def test_interpolation_oracles(interp_grid):
    g = interp_grid
    test_ids = (4, 5)
    sub = g.subset(ids=test_ids)

    def truth(imgs, yaws):
        return sub.images[:, sub.views.index(float(yaws[0])), 0]

    r = E.interpolation_experiment(None, g, range(4), test_ids, reconstruct=truth)
    assert r.rows["MVP"] == [0.0, 0.0]
    mean_img = g.subset(ids=range(4), views=(0.0, 30.0, 60.0)).images.reshape(-1, 64).mean(axis=0)
    for j, v in enumerate((15.0, 45.0)):
        t = sub.images[:, sub.views.index(v), 0]
        assert r.rows["mean-image"][j] == pytest.approx(np.mean((t - mean_img) ** 2), abs=1e-15)
        near = [E.mse(sub.images[:, sub.views.index(n), 0], t) for n in (v - 15.0, v + 15.0)]
        assert r.rows["nearest-view"][j] == pytest.approx(min(near), abs=1e-15)


def test_interpolation_needs_continuous_head(interp_grid, small_model):
    with pytest.raises(ContractError):
        E.interpolation_experiment(small_model, interp_grid, range(4), (4, 5))


def test_interpolation_pairs_use_train_views(interp_grid):
    pairs = E.interpolation_pairs(interp_grid, range(4))
    assert set(pairs.input_view.tolist()) == {0.0, 30.0, 60.0}
    assert len(pairs) == 4 * 9 and pairs.head == M.CONTINUOUS


# ---- weight statistics ----------------------------------------------------------------------

def _run(S, lr, zero=False):
    g = D.render_grid(ids=range(2), views=(-15.0, 0.0, 15.0), illuminations=(1.0,), size=8)
    cfg = T.TrainConfig(samples=S, learning_rate=lr, epochs=3, batch_size=4)
    p = T.initial_parameters(M.Architecture.parse("8x8-8-8(2)-8(2)-8-8x8[3]"), cfg, g.views)
    if zero:
        for t in p.tensors.values():
            t[...] = 0.0
    return T.train(D.build_pairs(g), p, cfg)[2]


def test_single_sample_weights_are_one():
    stats = E.weight_sparsity_stats(_run(1, 0.01))
    assert stats["max_weight_median"] == [1.0] * 3
    assert stats["weight_sparsity_fraction"] == [1.0] * 3


def test_uniform_weights_give_one_over_s():
    stats = E.weight_sparsity_stats(_run(4, 0.0, zero=True))
    assert stats["late_max_weight_median"] == pytest.approx(0.25, abs=1e-12)
    assert stats["late_sparsity_fraction"] == 0.0


def test_stats_from_csv_rows_and_ratio(tmp_path):
    hist = _run(2, 0.01)
    w = T.MetricsWriter(tmp_path / "m.csv")
    for m in hist:
        w.write(m)
    rows = T.read_metrics(tmp_path / "m.csv")
    stats = E.weight_sparsity_stats(rows, other=rows)
    assert stats["final_loss_ratio"] == 1.0 and stats["epochs"] == 3 and stats["late_epochs"] == 1
    report = E.sparsity_report(stats)
    assert report.columns == (1, 2, 3)
    with pytest.raises(ContractError):
        E.weight_sparsity_stats(rows[:1])
