import itertools
import tempfile
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mvp import synthdata as D
from mvp.errors import ContractError, FormatError


# ---- identities and rendering ----------------------------------------------------

def test_identity_deterministic():
    assert D.generate_identity(2015, 3) == D.generate_identity(2015, 3)


def test_identities_differ():
    a, b = D.generate_identity(2015, 0), D.generate_identity(2015, 1)
    assert np.max(np.abs(a.landmarks - b.landmarks)) > 1e-6


def test_hundred_identities_pairwise_distinct():
    specs = [D.generate_identity(2015, i) for i in range(100)]
    for a, b in itertools.combinations(specs, 2):
        assert np.mean(np.linalg.norm(a.landmarks - b.landmarks, axis=1)) > 0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32), st.integers(0, 10_000))
def test_identity_invariants(seed, ident):
    spec = D.generate_identity(seed, ident)
    assert spec.landmarks.shape == (8, 3)
    assert np.all(np.linalg.norm(spec.landmarks, axis=1) <= 1.0 + 1e-12)
    assert np.all((spec.intensities >= 0.5) & (spec.intensities <= 1.0))


def test_identity_rejects_negative():
    with pytest.raises(ContractError):
        D.generate_identity(0, -1)


@pytest.mark.parametrize("kw", [dict(size=4), dict(gain=0.0), dict(yaw=120.0)])
def test_render_params_validation(kw):
    with pytest.raises(ContractError):
        D.RenderParams(**kw)


def test_render_repeatable():
    spec = D.generate_identity(1, 1)
    assert np.array_equal(D.render_view(spec, D.RenderParams()), D.render_view(spec, D.RenderParams()))


@pytest.mark.parametrize("yaw", [15.0, 30.0, 45.0, 80.0])
def test_symmetric_spec_mirrors(yaw):
    spec = D.IdentitySpec(0, D.template_landmarks(), np.array([0.9, 0.9, 0.7, 0.6, 0.6, 0.8, 0.5, 0.5]))
    a = D.render_view(spec, D.RenderParams(yaw=yaw))
    b = D.render_view(spec, D.RenderParams(yaw=-yaw))
    np.testing.assert_allclose(a, b[:, ::-1], rtol=0, atol=1e-9)


def test_gain_is_linear_before_clamp():
    spec = D.generate_identity(5, 2)
    hi = D.render_view(spec, D.RenderParams(gain=1.4), clamp=False)
    lo = D.render_view(spec, D.RenderParams(gain=0.6), clamp=False)
    mask = lo > 1e-6
    np.testing.assert_allclose(hi[mask] / lo[mask], 7 / 3, rtol=1e-12)


def test_rendered_range():
    img = D.render_view(D.generate_identity(0, 0), D.RenderParams(gain=1.4))
    assert img.shape == (32, 32) and img.min() >= 0 and img.max() <= 1


def test_view_monotonicity():
    spec = D.generate_identity(2015, 4)
    yaws = np.arange(-55.0, 56.0, 5.0)
    centroids = [np.average(D.project(spec, D.RenderParams(yaw=y))[0],
                            weights=D.project(spec, D.RenderParams(yaw=y))[2]) for y in yaws]
    assert np.all(np.diff(centroids) > 0)


def test_identity_separability_adjacent_views():
    grid = D.render_grid(ids=range(12), illuminations=(1.0,))
    imgs = grid.images[:, :, 0]
    n, m = imgs.shape[:2]
    intra = np.mean([np.linalg.norm(imgs[i, k] - imgs[i, k + 1]) for i in range(n) for k in range(m - 1)])
    inter = np.mean([np.linalg.norm(imgs[i, k] - imgs[j, k])
                     for k in range(m) for i, j in itertools.combinations(range(n), 2)])
    assert intra < inter


def test_grid_is_pure_function():
    a = D.render_grid(seed=9, ids=range(2), views=(0.0, 30.0), illuminations=(1.0,), size=8)
    b = D.render_grid(seed=9, ids=range(2), views=(0.0, 30.0), illuminations=(1.0,), size=8)
    assert np.array_equal(a.images, b.images)
    c = D.render_grid(seed=10, ids=range(2), views=(0.0, 30.0), illuminations=(1.0,), size=8)
    assert not np.array_equal(a.images, c.images)


# ---- pairs ----------------------------------------------------------------------------

@pytest.fixture(scope="module")
def grid23():
    return D.render_grid(ids=(4, 7), views=(-15.0, 0.0, 15.0), illuminations=(1.0,), size=8)


def test_all_view_pair_count(grid23):
    assert len(D.build_pairs(grid23)) == 18


def test_frontal_pair_count(grid23):
    pairs = D.build_pairs(grid23, D.FRONTAL_ONLY)
    assert len(pairs) == 6
    assert all(pairs[i].output_view == 0.0 for i in range(6))


def test_pairs_share_identity_and_label(grid23):
    for head in ("discrete", "continuous"):
        pairs = D.build_pairs(grid23, head=head)
        for i in range(len(pairs)):
            p = pairs[i]
            a = grid23.ids.index(p.identity)
            k = grid23.views.index(p.output_view)
            j = grid23.views.index(p.input_view)
            assert np.array_equal(p.x, grid23.images[a, j, 0])
            assert np.array_equal(p.y, grid23.images[a, k, 0])
            if head == "discrete":
                assert p.v.tolist() == np.eye(3)[k].tolist()
            else:
                assert p.v == pytest.approx(p.output_view / 90.0)


def test_pairs_unknown_mode(grid23):
    with pytest.raises(ContractError):
        D.build_pairs(grid23, "sideways")


def test_pair_subset(grid23):
    pairs = D.build_pairs(grid23)
    sub = pairs.subset([3, 5])
    assert len(sub) == 2 and np.array_equal(sub.x[1], pairs.x[5])
    assert len(pairs.subset([])) == 0


# ---- PGM -------------------------------------------------------------------------------

def test_pgm_zero_roundtrip(tmp_path):
    D.write_pgm(np.zeros((5, 7)), tmp_path / "z.pgm")
    out = D.read_pgm(tmp_path / "z.pgm")
    assert out.shape == (5, 7) and np.all(out == 0)


def test_pgm_ramp_quantization(tmp_path):
    ramp = np.linspace(0, 1, 32 * 32).reshape(32, 32)
    D.write_pgm(ramp, tmp_path / "r.pgm")
    assert np.max(np.abs(D.read_pgm(tmp_path / "r.pgm") - ramp)) <= 1 / 255
    # "P5\n32 32\n255\n" is 13 bytes
    assert (tmp_path / "r.pgm").stat().st_size == 13 + 1024


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 20), st.integers(1, 20), st.integers(0, 2**32))
def test_pgm_roundtrip_property(h, w, seed):
    img = np.random.default_rng(seed).random((h, w))
    path = Path(tempfile.mkdtemp()) / "a.pgm"
    D.write_pgm(img, path)
    back = D.read_pgm(path)
    assert np.max(np.abs(back - img)) <= 0.5 / 255 + 1e-12
    D.write_pgm(back, path)
    assert np.array_equal(D.read_pgm(path), back)


def test_pgm_comments_and_16_bit(tmp_path):
    p = tmp_path / "c.pgm"
    p.write_bytes(b"P5\n# made by hand\n2 1\n65535\n" + np.array([0, 65535], dtype=">u2").tobytes())
    assert D.read_pgm(p).tolist() == [[0.0, 1.0]]


@pytest.mark.parametrize("data,offset", [
    (b"P2\n2 2\n255\n", 0),
    (b"P5\n2 x\n255\n", 5),
    (b"P5\n2 2\n255\n\x00\x01", 13),
    (b"P5\n2 2", 6),
])
def test_pgm_malformed_reports_offset(tmp_path, data, offset):
    p = tmp_path / "bad.pgm"
    p.write_bytes(data)
    with pytest.raises(FormatError) as err:
        D.read_pgm(p)
    assert err.value.offset == offset
    assert f"byte {offset}" in str(err.value)


def test_pgm_rejects_out_of_range(tmp_path):
    with pytest.raises(ContractError):
        D.write_pgm(np.full((2, 2), 1.5), tmp_path / "x.pgm")


# ---- manifest ------------------------------------------------------------------------------

def test_empty_manifest_roundtrip(tmp_path):
    m = D.DatasetManifest(identities=0, train_identities=0)
    D.write_manifest(m, tmp_path / "m.txt")
    assert len((tmp_path / "m.txt").read_text().splitlines()) == 2
    assert D.read_manifest(tmp_path / "m.txt") == m


def test_ten_record_manifest_roundtrip(tmp_path):
    m = D.DatasetManifest(seed=3, identities=2, views=(0.0, 15.0), illuminations=(0.6, 1.0, 1.4),
                          train_identities=1)
    m.records = [D.Record(i, k, v, l, D.image_path(i, k, l))
                 for i in range(2) for k, v in enumerate(m.views) for l in range(3)][:10]
    D.write_manifest(m, tmp_path / "m.txt")
    assert D.read_manifest(tmp_path / "m.txt") == m


def test_generated_dataset(tmp_path):
    m, path = D.generate_dataset(tmp_path, identities=3, views=(-15.0, 0.0, 15.0), size=8, train_identities=2)
    assert len(m.records) == 3 * 3 * 3
    assert D.read_manifest(path) == m
    assert m.train_ids == [0, 1] and m.test_ids == [2]
    for r in m.records:
        assert (tmp_path / r.path).exists()
        assert r.path == f"id{r.identity}/v{r.view_index}_l{r.illumination_index}.pgm"
    grid = D.load_grid(m, tmp_path)
    ref = D.render_grid(ids=range(3), views=(-15.0, 0.0, 15.0), size=8)
    np.testing.assert_allclose(grid.images, ref.images, atol=1e-12)


def test_manifest_missing_field_names_line(tmp_path):
    m, path = D.generate_dataset(tmp_path, identities=1, views=(0.0,), illuminations=(1.0,), size=8)
    lines = path.read_text().splitlines()
    lines[2] = lines[2].replace("yaw=0.0 ", "")
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(FormatError, match="line 3") as err:
        D.read_manifest(path)
    assert err.value.line == 3 and "yaw" in str(err.value)


def test_load_grid_detects_missing_image(tmp_path):
    m, _ = D.generate_dataset(tmp_path, identities=1, views=(0.0,), illuminations=(1.0,), size=8)
    m.records = []
    with pytest.raises(FormatError):
        D.load_grid(m, tmp_path)
