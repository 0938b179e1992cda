"""Deterministic synthetic multi-view "heads".

Each identity is a set of 3-D landmarks on the front cap of the unit sphere,
jittered per identity. A view is the landmark set rotated in yaw, projected
orthographically and splatted as Gaussian blobs. Everything is a pure
function of the dataset seed and the grid parameters.
"""

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, FormatError
from .numerics import Rng, derive_seed

# mirror-symmetric (x, y) template; z is placed on the front of the unit sphere
TEMPLATE_XY = np.array(
    [
        [-0.35, 0.30],  # eyes
        [0.35, 0.30],
        [0.00, 0.00],  # nose
        [-0.28, -0.40],  # mouth corners
        [0.28, -0.40],
        [0.00, -0.70],  # chin
        [-0.70, 0.05],  # cheeks
        [0.70, 0.05],
    ]
)
JITTER_STD = 0.12
OCCLUDED_GAIN = 0.3

DEFAULT_SEED = 2015
DEFAULT_IDENTITIES = 50
DEFAULT_TRAIN_IDENTITIES = 30
DEFAULT_VIEWS = (-45.0, -30.0, -15.0, 0.0, 15.0, 30.0, 45.0)
DEFAULT_ILLUMINATIONS = (0.6, 1.0, 1.4)
DEFAULT_SIZE = 32
DEFAULT_BLOB_STD = 1.6

ALL_VIEWS = "all"
FRONTAL_ONLY = "frontal"


def template_landmarks():
    xy = TEMPLATE_XY
    z = np.sqrt(1.0 - np.sum(xy * xy, axis=1))
    return np.column_stack([xy, z])


@dataclass(frozen=True)
class IdentitySpec:
    identity: int
    landmarks: np.ndarray  # (n, 3)
    intensities: np.ndarray  # (n,)

    def __eq__(self, other):
        return (
            isinstance(other, IdentitySpec)
            and self.identity == other.identity
            and np.array_equal(self.landmarks, other.landmarks)
            and np.array_equal(self.intensities, other.intensities)
        )

    __hash__ = None


@dataclass(frozen=True)
class RenderParams:
    yaw: float = 0.0
    gain: float = 1.0
    size: int = DEFAULT_SIZE
    blob_std: float = DEFAULT_BLOB_STD

    def __post_init__(self):
        if self.size < 8:
            raise ContractError("image size must be at least 8")
        if self.gain <= 0:
            raise ContractError("illumination gain must be positive")
        if not -90.0 <= self.yaw <= 90.0:
            raise ContractError("yaw must lie in [-90, 90] degrees")


def generate_identity(dataset_seed, identity):
    if identity < 0:
        raise ContractError("identity id must be non-negative")
    rng = Rng(derive_seed(dataset_seed, identity))
    pts = template_landmarks() + JITTER_STD * rng.normal(TEMPLATE_XY.shape[0] * 3).reshape(-1, 3)
    norms = np.linalg.norm(pts, axis=1, keepdims=True)
    pts = np.where(norms > 1.0, pts / norms, pts)
    intensities = 0.5 + 0.5 * rng.random(pts.shape[0])
    return IdentitySpec(int(identity), pts, intensities)


def rotate_yaw(points, yaw):
    t = np.deg2rad(yaw)
    c, s = np.cos(t), np.sin(t)
    x, y, z = points[:, 0], points[:, 1], points[:, 2]
    return np.column_stack([c * x + s * z, y, -s * x + c * z])


def project(spec, rp):
    """Pixel coordinates ``(col, row)``, splat weights, and depth per landmark."""
    p = rotate_yaw(spec.landmarks, rp.yaw)
    centre = (rp.size - 1) / 2.0
    scale = 0.4 * rp.size
    cols = centre + scale * p[:, 0]
    rows = centre - scale * p[:, 1]
    weights = spec.intensities * rp.gain * np.where(p[:, 2] < 0.0, OCCLUDED_GAIN, 1.0)
    return cols, rows, weights, p[:, 2]


def render_view(spec, rp, clamp=True):
    """Render one view as a ``(size, size)`` float image, values in [0, 1]."""
    cols, rows, weights, _ = project(spec, rp)
    grid = np.arange(rp.size, dtype=np.float64)
    gx = np.exp(-((grid[None, :] - cols[:, None]) ** 2) / (2.0 * rp.blob_std**2))
    gy = np.exp(-((grid[None, :] - rows[:, None]) ** 2) / (2.0 * rp.blob_std**2))
    img = np.einsum("n,ni,nj->ij", weights, gy, gx)
    return np.clip(img, 0.0, 1.0) if clamp else img


def quantize(img):
    """Round to the 8-bit grid a PGM file can hold."""
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


# ----------------------------------------------------------------------------
# PGM


def write_pgm(image, path):
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ContractError("write_pgm expects a 2-D image")
    if np.any(image < 0.0) or np.any(image > 1.0) or not np.all(np.isfinite(image)):
        raise ContractError("pixel values must lie in [0, 1]")
    h, w = image.shape
    data = np.round(image * 255.0).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def _pgm_header(data):
    """Parse the P5 header; returns ``(width, height, maxval, payload offset)``."""
    fields, pos, n = [], 0, len(data)
    while len(fields) < 4:
        while pos < n and data[pos : pos + 1].isspace():
            pos += 1
        if pos < n and data[pos : pos + 1] == b"#":
            while pos < n and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        if pos >= n:
            raise FormatError("truncated PGM header", offset=pos)
        start = pos
        while pos < n and not data[pos : pos + 1].isspace():
            pos += 1
        fields.append((data[start:pos], start))
    magic, start = fields[0]
    if magic != b"P5":
        raise FormatError(f"not a binary PGM (magic {magic!r})", offset=start)
    values = []
    for tok, off in fields[1:]:
        if not tok.isdigit():
            raise FormatError(f"bad header field {tok!r}", offset=off)
        values.append(int(tok))
    if pos >= n or not data[pos : pos + 1].isspace():
        raise FormatError("missing whitespace after maxval", offset=pos)
    w, h, maxval = values
    if w < 1 or h < 1:
        raise FormatError("image dimensions must be positive", offset=fields[1][1])
    if not 0 < maxval < 65536:
        raise FormatError("maxval must be in 1..65535", offset=fields[3][1])
    return w, h, maxval, pos + 1


def read_pgm(path):
    data = Path(path).read_bytes()
    w, h, maxval, off = _pgm_header(data)
    nbytes = w * h * (1 if maxval < 256 else 2)
    if len(data) - off < nbytes:
        raise FormatError(f"pixel data truncated: need {nbytes} bytes, have {len(data) - off}", offset=len(data))
    dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
    pix = np.frombuffer(data, dtype=dtype, count=w * h, offset=off).astype(np.float64)
    if np.any(pix > maxval):
        bad = int(np.argmax(pix > maxval))
        raise FormatError("pixel exceeds maxval", offset=off + bad * (1 if maxval < 256 else 2))
    return (pix / maxval).reshape(h, w)


# ----------------------------------------------------------------------------
# manifest


@dataclass(frozen=True)
class Record:
    identity: int
    view_index: int
    yaw: float
    illumination_index: int
    path: str


@dataclass
class DatasetManifest:
    seed: int = DEFAULT_SEED
    identities: int = DEFAULT_IDENTITIES
    views: tuple = DEFAULT_VIEWS
    illuminations: tuple = DEFAULT_ILLUMINATIONS
    size: int = DEFAULT_SIZE
    blob_std: float = DEFAULT_BLOB_STD
    train_identities: int = DEFAULT_TRAIN_IDENTITIES
    records: list = field(default_factory=list)

    @property
    def train_ids(self):
        return list(range(min(self.train_identities, self.identities)))

    @property
    def test_ids(self):
        return list(range(min(self.train_identities, self.identities), self.identities))


MANIFEST_MAGIC = "#mvp-manifest v1"
_HEADER_KEYS = ("seed", "identities", "views", "illuminations", "size", "blob_std", "train")
_RECORD_KEYS = ("identity", "view", "yaw", "illum", "path")


def _fmt_list(values):
    return ",".join(repr(float(v)) for v in values)


def write_manifest(manifest, path):
    m = manifest
    lines = [
        MANIFEST_MAGIC,
        f"seed={m.seed} identities={m.identities} views={_fmt_list(m.views)} "
        f"illuminations={_fmt_list(m.illuminations)} size={m.size} blob_std={float(m.blob_std)!r} "
        f"train={m.train_identities}",
    ]
    for r in m.records:
        if any(c.isspace() for c in r.path):
            raise ContractError(f"record path {r.path!r} contains whitespace")
        lines.append(
            f"identity={r.identity} view={r.view_index} yaw={float(r.yaw)!r} "
            f"illum={r.illumination_index} path={r.path}"
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _fields(line, lineno, keys):
    out = {}
    for tok in line.split():
        if "=" not in tok:
            raise FormatError(f"expected key=value, got {tok!r}", line=lineno)
        k, v = tok.split("=", 1)
        out[k] = v
    missing = [k for k in keys if k not in out]
    if missing:
        raise FormatError(f"missing field(s) {', '.join(missing)}", line=lineno)
    unknown = [k for k in out if k not in keys]
    if unknown:
        raise FormatError(f"unknown field(s) {', '.join(unknown)}", line=lineno)
    return out


def read_manifest(path):
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0].strip() != MANIFEST_MAGIC:
        raise FormatError("not an mvp manifest", line=1)
    if len(lines) < 2:
        raise FormatError("missing header line", line=2)
    try:
        h = _fields(lines[1], 2, _HEADER_KEYS)
        floats = lambda s: tuple(float(v) for v in s.split(",")) if s else ()
        m = DatasetManifest(
            seed=int(h["seed"]),
            identities=int(h["identities"]),
            views=floats(h["views"]),
            illuminations=floats(h["illuminations"]),
            size=int(h["size"]),
            blob_std=float(h["blob_std"]),
            train_identities=int(h["train"]),
        )
    except ValueError as exc:
        raise FormatError(f"bad header value: {exc}", line=2) from None
    for lineno, line in enumerate(lines[2:], 3):
        if not line.strip():
            continue
        f = _fields(line, lineno, _RECORD_KEYS)
        try:
            m.records.append(
                Record(int(f["identity"]), int(f["view"]), float(f["yaw"]), int(f["illum"]), f["path"])
            )
        except ValueError as exc:
            raise FormatError(f"bad record value: {exc}", line=lineno) from None
    return m


def image_path(identity, view_index, illumination_index):
    return f"id{identity}/v{view_index}_l{illumination_index}.pgm"


# ----------------------------------------------------------------------------
# image grids and pairs


@dataclass
class ImageGrid:
    """All images of a dataset: ``images[i, k, l]`` is identity ``ids[i]``,
    view ``views[k]``, illumination ``illuminations[l]``, flattened, in [0, 1]."""

    images: np.ndarray
    ids: tuple
    views: tuple
    illuminations: tuple
    size: int

    def subset(self, ids=None, views=None):
        ids = self.ids if ids is None else tuple(ids)
        views = self.views if views is None else tuple(float(v) for v in views)
        ii = [self.ids.index(i) for i in ids]
        kk = [self.views.index(v) for v in views]
        return ImageGrid(self.images[np.ix_(ii, kk)], ids, views, self.illuminations, self.size)


def render_grid(
    seed=DEFAULT_SEED,
    ids=range(DEFAULT_IDENTITIES),
    views=DEFAULT_VIEWS,
    illuminations=DEFAULT_ILLUMINATIONS,
    size=DEFAULT_SIZE,
    blob_std=DEFAULT_BLOB_STD,
):
    """Render (and 8-bit quantize) every image of a grid in memory."""
    ids = tuple(int(i) for i in ids)
    views = tuple(float(v) for v in views)
    illuminations = tuple(float(g) for g in illuminations)
    images = np.empty((len(ids), len(views), len(illuminations), size * size))
    for a, i in enumerate(ids):
        spec = generate_identity(seed, i)
        for k, v in enumerate(views):
            for l, g in enumerate(illuminations):
                images[a, k, l] = quantize(render_view(spec, RenderParams(v, g, size, blob_std))).ravel()
    return ImageGrid(images, ids, views, illuminations, size)


def generate_dataset(
    root,
    seed=DEFAULT_SEED,
    identities=DEFAULT_IDENTITIES,
    views=DEFAULT_VIEWS,
    illuminations=DEFAULT_ILLUMINATIONS,
    size=DEFAULT_SIZE,
    blob_std=DEFAULT_BLOB_STD,
    train_identities=DEFAULT_TRAIN_IDENTITIES,
):
    """Write images under ``root/id<i>/v<k>_l<l>.pgm`` plus ``root/manifest.txt``."""
    root = Path(root)
    grid = render_grid(seed, range(identities), views, illuminations, size, blob_std)
    m = DatasetManifest(
        seed, identities, grid.views, grid.illuminations, size, float(blob_std), min(train_identities, identities)
    )
    for i in range(identities):
        os.makedirs(root / f"id{i}", exist_ok=True)
        for k, v in enumerate(grid.views):
            for l in range(len(grid.illuminations)):
                rel = image_path(i, k, l)
                write_pgm(grid.images[i, k, l].reshape(size, size), root / rel)
                m.records.append(Record(i, k, v, l, rel))
    path = root / "manifest.txt"
    write_manifest(m, path)
    return m, path


def load_grid(manifest, root):
    """Read every image referenced by ``manifest`` into an ImageGrid."""
    root = Path(root)
    n, M, L = manifest.identities, len(manifest.views), len(manifest.illuminations)
    images = np.full((n, M, L, manifest.size**2), np.nan)
    for r in manifest.records:
        if abs(manifest.views[r.view_index] - r.yaw) > 1e-9:
            raise FormatError(f"record {r.path} yaw {r.yaw} disagrees with view list")
        img = read_pgm(root / r.path)
        if img.shape != (manifest.size, manifest.size):
            raise FormatError(f"{r.path} has shape {img.shape}, expected {manifest.size}x{manifest.size}")
        images[r.identity, r.view_index, r.illumination_index] = img.ravel()
    if np.isnan(images).any():
        raise FormatError("manifest does not cover the full identity/view/illumination grid")
    return ImageGrid(images, tuple(range(n)), tuple(manifest.views), tuple(manifest.illuminations), manifest.size)


@dataclass(frozen=True)
class TrainingPair:
    x: np.ndarray
    y: np.ndarray
    v: object  # one-hot vector (discrete) or scalar yaw/90 (continuous)
    identity: int
    input_view: float
    output_view: float
    illumination: int = 0


class PairSet:
    """A sequence of TrainingPairs backed by stacked arrays.

    ``x`` and ``y`` are images in [0, 1], one row per pair; ``view_index``
    indexes ``views``; ``view_value`` is yaw/90.
    """

    def __init__(self, x, y, view_index, views, identity, input_view, illumination, head="discrete"):
        self.x = x
        self.y = y
        self.view_index = np.asarray(view_index, dtype=np.int64)
        self.views = tuple(views)
        self.view_value = np.array([self.views[k] for k in self.view_index]) / 90.0
        self.identity = np.asarray(identity, dtype=np.int64)
        self.input_view = np.asarray(input_view, dtype=np.float64)
        self.illumination = np.asarray(illumination, dtype=np.int64)
        self.head = head

    def __len__(self):
        return self.x.shape[0]

    def __getitem__(self, i):
        if self.head == "discrete":
            v = np.zeros(len(self.views))
            v[self.view_index[i]] = 1.0
        else:
            v = float(self.view_value[i])
        return TrainingPair(
            self.x[i],
            self.y[i],
            v,
            int(self.identity[i]),
            float(self.input_view[i]),
            float(self.views[self.view_index[i]]),
            int(self.illumination[i]),
        )

    def targets(self):
        """View targets in the form the model's row functions take."""
        return self.view_index if self.head == "discrete" else self.view_value

    def subset(self, idx):
        idx = np.asarray(idx)
        if idx.size == 0:
            idx = idx.astype(np.int64)
        out = PairSet.__new__(PairSet)
        out.x, out.y = self.x[idx], self.y[idx]
        out.view_index, out.views = self.view_index[idx], self.views
        out.view_value = self.view_value[idx]
        out.identity, out.input_view = self.identity[idx], self.input_view[idx]
        out.illumination, out.head = self.illumination[idx], self.head
        return out


def build_pairs(grid, pairing=ALL_VIEWS, head="discrete", ids=None):
    """All (input view j, output view k) pairs per identity and illumination.

    ``FRONTAL_ONLY`` keeps only 0-degree outputs. ``grid`` may be an
    ImageGrid or a ``(manifest, root)`` tuple.
    """
    if isinstance(grid, tuple):
        grid = load_grid(*grid)
    if pairing not in (ALL_VIEWS, FRONTAL_ONLY):
        raise ContractError(f"unknown pairing {pairing!r}")
    ids = grid.ids if ids is None else tuple(ids)
    out_views = range(len(grid.views))
    if pairing == FRONTAL_ONLY:
        if 0.0 not in grid.views:
            raise ContractError("frontal-only pairing needs a 0-degree view")
        out_views = [grid.views.index(0.0)]
    xi, yi, vk, ident, vin, ill = [], [], [], [], [], []
    for i in ids:
        a = grid.ids.index(i)
        for l in range(len(grid.illuminations)):
            for j in range(len(grid.views)):
                for k in out_views:
                    xi.append((a, j, l))
                    yi.append((a, k, l))
                    vk.append(k)
                    ident.append(i)
                    vin.append(grid.views[j])
                    ill.append(l)
    if not xi:
        empty = np.empty((0, grid.images.shape[-1]))
        return PairSet(empty, empty, [], grid.views, [], [], [], head)
    x = grid.images[tuple(np.array(xi).T)]
    y = grid.images[tuple(np.array(yi).T)]
    return PairSet(x, y, vk, grid.views, ident, vin, ill, head)
