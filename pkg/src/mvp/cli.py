"""``mvp`` command line: data generation, training, inference, evaluation.

Exit codes: 0 success, 1 usage error, 2 I/O or format error, 3 verification
failure (gradient check, checksum mismatch).
"""

import argparse
import csv
import re
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import checkpoint as C
from . import eval as E
from . import model as M
from . import synthdata as D
from . import training as T
from .errors import ChecksumError, ContractError, FormatError
from .numerics import Rng

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_VERIFY = 0, 1, 2, 3
PROTOCOLS = ("recognition", "recon-quality", "view-error", "interpolation", "sparsity")


class UsageError(Exception):
    pass


class VerificationError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _floats(text):
    try:
        return tuple(float(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


# ----------------------------------------------------------------------------
# run configuration


@dataclass
class RunConfig:
    """Training run settings; every field can come from a config file."""

    manifest: str = ""
    data_root: str = ""  # defaults to the manifest's directory
    out_dir: str = "run"
    arch: str = M.DEFAULT_ARCH
    view_head: str = M.DISCRETE
    pairing: str = D.ALL_VIEWS
    train_views: str = ""  # comma-separated subset of the manifest views; empty = all
    checkpoint_every: int = 1
    samples: int = 20
    grad_mode: str = T.ONE_SAMPLE
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

    def train_config(self):
        names = {f.name for f in fields(T.TrainConfig)}
        return T.TrainConfig(**{k: v for k, v in asdict(self).items() if k in names}).validate()


def _coerce(name, value, kind):
    if kind is bool:
        low = str(value).strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"config key {name}: expected a boolean, got {value!r}")
    try:
        return kind(value)
    except ValueError:
        raise UsageError(f"config key {name}: cannot parse {value!r}") from None


def read_config_file(path):
    """``key = value`` lines; ``#`` starts a comment; unknown keys rejected."""
    kinds = {f.name: type(f.default) for f in fields(RunConfig)}
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        key, value = (t.strip() for t in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in kinds:
            raise UsageError(f"{path}:{lineno}: unknown config key {key!r}")
        out[key] = _coerce(key, value, kinds[key])
    return out


def run_config(args):
    """Defaults, then the config file, then explicit flags."""
    values = asdict(RunConfig())
    if args.config:
        values.update(read_config_file(args.config))
    for f in fields(RunConfig):
        flag = getattr(args, f.name, None)
        if flag is not None:
            values[f.name] = flag
    return RunConfig(**values)


# ----------------------------------------------------------------------------
# helpers


def _load_dataset(manifest_path, root=None):
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise FileNotFoundError(f"manifest not found: {manifest_path}")
    manifest = D.read_manifest(manifest_path)
    root = Path(root) if root else manifest_path.parent
    return manifest, root, D.load_grid(manifest, root)


def _params_views(params, text):
    """Requested views in degrees; ``all`` means every label the model knows."""
    if text is None or text == "all":
        return list(params.views)
    return list(_floats(text))


def _out(msg):
    print(msg, flush=True)


# ----------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args):
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from None
    illums = args.illums if args.illums else D.DEFAULT_ILLUMINATIONS
    manifest, path = D.generate_dataset(
        out, args.seed, args.identities, args.views, illums, args.size, args.blob_std, args.train_identities
    )
    _out(f"manifest: {path}")
    _out(f"records: {len(manifest.records)}")
    return EXIT_OK


def _train_pairs(cfg, grid, manifest):
    sub = grid.subset(ids=manifest.train_ids)
    if cfg.train_views:
        sub = sub.subset(views=_floats(cfg.train_views))
    return D.build_pairs(sub, cfg.pairing, cfg.view_head), sub.views


def cmd_train(args):
    cfg = run_config(args)
    if not cfg.manifest:
        raise UsageError("train needs --manifest (or manifest= in the config file)")
    tc = cfg.train_config()
    if cfg.unsupervised and cfg.view_head != M.CONTINUOUS:
        raise UsageError("--unsupervised needs --view-head continuous")
    manifest, _, grid = _load_dataset(cfg.manifest, cfg.data_root or None)
    pairs, views = _train_pairs(cfg, grid, manifest)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    arch = M.Architecture.parse(cfg.arch, head=cfg.view_head)
    if arch.input_dim != grid.size**2 or arch.output_dim != grid.size**2:
        raise UsageError(f"architecture {cfg.arch} does not match {grid.size}x{grid.size} images")
    if arch.head == M.DISCRETE and arch.n_views != len(views):
        arch = M.Architecture(arch.input_dim, arch.layers, arch.output_dim, arch.head, len(views))
    rng = Rng(tc.seed)
    if args.resume:
        params, saved = C.load(args.resume)
        if params.arch != arch:
            raise UsageError(f"checkpoint architecture {params.arch.format()} differs from {arch.format()}")
        if saved is None:
            raise UsageError("checkpoint has no trainer state to resume from")
        state = T.OptimizerState({k: v.copy() for k, v in saved.buffers.items()}, saved.step)
        rng.setstate(saved.rng_state)
        start = saved.epoch
        metrics = T.MetricsWriter(out / "metrics.csv", append=(out / "metrics.csv").exists())
    else:
        params = T.initial_parameters(arch, tc, views)
        state = T.OptimizerState.for_params(params)
        start = 0
        metrics = T.MetricsWriter(out / "metrics.csv")

    def save(epoch):
        trainer = C.TrainerState(epoch, state.step, rng.getstate(), state.buffers)
        path = out / f"ckpt_epoch{epoch}"
        digest = C.save(path, params, trainer)
        return path, digest

    path, digest = save(start)
    last = start + tc.epochs

    def on_epoch(epoch, p, s, m):
        nonlocal path, digest
        metrics.write(m)
        _out(f"epoch {epoch}: loss {m.mean_loss:.4f} elbo {m.elbo_estimate:.4f} "
             f"max-weight {m.max_weight_median:.3f} ({m.wall_seconds:.1f}s)")
        if epoch == last or (epoch - start) % max(cfg.checkpoint_every, 1) == 0:
            path, digest = save(epoch)

    T.train(pairs, params, tc, rng, state, start + 1, on_epoch)
    _out(f"checkpoint: {path}")
    _out(f"checksum: {digest:016x}")
    return EXIT_OK


def _write_sheet(images, size, path):
    sheet = np.hstack([np.asarray(img).reshape(size, size) for img in images])
    D.write_pgm(sheet, path)


def cmd_reconstruct(args):
    params, _ = C.load(args.checkpoint)
    views = _params_views(params, args.views)
    labels = [params.view_label(v) for v in views]
    size = int(round(np.sqrt(params.arch.output_dim)))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for n, inp in enumerate(args.inputs):
        x = D.read_pgm(inp)
        if x.size != params.arch.input_dim:
            raise UsageError(f"{inp} has {x.size} pixels, model expects {params.arch.input_dim}")
        rng = Rng(args.seed)
        recon = M.reconstruct_spectrum(M.to_model_space(x.ravel()), labels, args.samples, params, rng)
        images = [M.to_image_space(y) for y in recon]
        stem = Path(inp).stem if len(args.inputs) == 1 else f"{n}_{Path(inp).stem}"
        for v, img in zip(views, images):
            D.write_pgm(img.reshape(size, size), out / f"{stem}_v{v:g}.pgm")
        _write_sheet([x.ravel()] + images, size, out / f"{stem}_sheet.pgm")
        _out(f"{inp}: {len(images)} views -> {out}")
    return EXIT_OK


def _probe_set(args, params):
    """Images plus known yaws (NaN when unknown) and display paths."""
    if args.manifest:
        manifest, root, grid = _load_dataset(args.manifest)
        ids = manifest.test_ids if args.split == "test" else manifest.train_ids
        if args.split == "all":
            ids = list(range(manifest.identities))
        img, ident, yaw, ill = E.split_images(grid, ids)
        paths = [D.image_path(i, grid.views.index(v), l) for i, v, l in zip(ident, yaw, ill)]
        return img, yaw.astype(float), paths
    if not args.inputs:
        raise UsageError("estimate-view needs --manifest or input images")
    imgs = [D.read_pgm(p).ravel() for p in args.inputs]
    return np.array(imgs), np.full(len(imgs), np.nan), list(args.inputs)


def cmd_estimate_view(args):
    params, _ = C.load(args.checkpoint)
    candidates = _params_views(params, args.candidates)
    images, yaw, paths = _probe_set(args, params)
    pred = E.estimate_views(params, images, candidates, args.samples, args.seed)
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(fh)
        w.writerow(["path", "true_view", "predicted_view", "error"])
        for p, t, v in zip(paths, yaw, pred):
            known = not np.isnan(t)
            w.writerow([p, f"{t:g}" if known else "", f"{v:g}", f"{abs(v - t):g}" if known else ""])
    finally:
        if args.out:
            fh.close()
    if args.out and not np.all(np.isnan(yaw)):
        _out(f"mae: {np.nanmean(np.abs(pred - yaw)):.4f}")
    return EXIT_OK


def cmd_eval(args):
    if args.protocol not in PROTOCOLS:
        raise UsageError(f"unknown protocol {args.protocol!r}; choose from {', '.join(PROTOCOLS)}")
    if args.protocol == "sparsity":
        if not args.metrics:
            raise UsageError("eval sparsity needs --metrics")
        other = T.read_metrics(args.other_metrics) if args.other_metrics else None
        stats = E.weight_sparsity_stats(T.read_metrics(args.metrics), other)
        report = E.sparsity_report(stats)
    else:
        if not (args.checkpoint and args.manifest):
            raise UsageError(f"eval {args.protocol} needs --checkpoint and --manifest")
        params, _ = C.load(args.checkpoint)
        manifest, _, grid = _load_dataset(args.manifest)
        tr, te = manifest.train_ids, manifest.test_ids
        if args.protocol == "recognition":
            report = E.recognition_report(params, grid, tr, te, S=args.samples, seed=args.seed)
        elif args.protocol == "recon-quality":
            report = E.reconstruction_quality(params, grid, tr, te, args.samples, args.seed)
        elif args.protocol == "view-error":
            report = E.view_estimation_error(params, grid, te, None, args.samples, args.seed)
            lr = E.grid_lr_baseline(grid, tr, te)
            report.rows.update(lr.rows)
            report.averages.update(lr.averages)
            report.metadata.update(lr.metadata)
        else:
            report = E.interpolation_experiment(params, grid, tr, te, S=args.samples, seed=args.seed)
        report.metadata["seed"] = args.seed
    if args.out:
        report.write(args.out)
    _out(report.summary())
    return EXIT_OK


def cmd_gradcheck(args):
    results = T.gradient_check(args.seed, h=args.h)
    ok = True
    for r in results:
        for name, err in r.errors.items():
            flag = "ok" if err < T.GRADCHECK_TOL else "FAIL"
            ok &= err < T.GRADCHECK_TOL
            _out(f"{r.head:10s} {r.mode:12s} {name:4s} {err:.3e} {flag}")
    worst = max(r.worst for r in results)
    _out(f"max relative error {worst:.3e} (tolerance {T.GRADCHECK_TOL:g})")
    if not ok:
        raise VerificationError("gradient check failed")
    return EXIT_OK


# ----------------------------------------------------------------------------
# parser


def build_parser():
    p = _Parser(prog="mvp", description="Multi-view perceptron toolkit")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen-data", help="render the synthetic multi-view dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=D.DEFAULT_SEED)
    g.add_argument("--identities", type=int, default=D.DEFAULT_IDENTITIES)
    g.add_argument("--train-identities", type=int, default=D.DEFAULT_TRAIN_IDENTITIES)
    g.add_argument("--views", type=_floats, default=D.DEFAULT_VIEWS)
    g.add_argument("--illums", type=_floats, default=D.DEFAULT_ILLUMINATIONS, help="illumination gains")
    g.add_argument("--size", type=int, default=D.DEFAULT_SIZE)
    g.add_argument("--blob-std", type=float, default=D.DEFAULT_BLOB_STD)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model; writes ckpt_epochN files and metrics.csv")
    t.add_argument("--config", help="key=value file; flags override it")
    t.add_argument("--manifest")
    t.add_argument("--data-root", dest="data_root")
    t.add_argument("--out", dest="out_dir")
    t.add_argument("--arch")
    t.add_argument("--view-head", dest="view_head", choices=(M.DISCRETE, M.CONTINUOUS))
    t.add_argument("--pairing", choices=(D.ALL_VIEWS, D.FRONTAL_ONLY))
    t.add_argument("--train-views", dest="train_views")
    t.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    t.add_argument("--samples", type=int)
    t.add_argument("--grad-mode", dest="grad_mode", choices=T.GRAD_MODES)
    t.add_argument("--lr", dest="learning_rate", type=float)
    t.add_argument("--momentum", type=float)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--sigma-y", dest="sigma_y", type=float)
    t.add_argument("--sigma-v", dest="sigma_v", type=float)
    t.add_argument("--unsupervised", action="store_const", const=True)
    t.add_argument("--sigma-vtilde", dest="sigma_vtilde", type=float)
    t.add_argument("--clusters", type=int)
    t.add_argument("--resume", help="continue from a checkpoint with trainer state")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("reconstruct", help="reconstruct a spectrum of views from input images")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("inputs", nargs="+")
    r.add_argument("--views", default="all", help="comma-separated degrees or 'all'")
    r.add_argument("--samples", type=int, default=20)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--out", default=".")
    r.set_defaults(func=cmd_reconstruct)

    v = sub.add_parser("estimate-view", help="estimate the yaw of input images")
    v.add_argument("--checkpoint", required=True)
    v.add_argument("inputs", nargs="*")
    v.add_argument("--manifest")
    v.add_argument("--split", choices=("test", "train", "all"), default="test")
    v.add_argument("--candidates", default="all", help="comma-separated degrees or 'all'")
    v.add_argument("--samples", type=int, default=20)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--out", help="CSV path (default stdout)")
    v.set_defaults(func=cmd_estimate_view)

    e = sub.add_parser("eval", help="run an evaluation protocol")
    e.add_argument("protocol", help="|".join(PROTOCOLS))
    e.add_argument("--checkpoint")
    e.add_argument("--manifest")
    e.add_argument("--metrics")
    e.add_argument("--other-metrics", help="weighted-average run metrics for the loss ratio")
    e.add_argument("--samples", type=int, default=20)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", help="report CSV path")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="verify analytic gradients on a tiny network")
    c.add_argument("--seed", type=int, default=7)
    c.add_argument("--h", type=float, default=1e-5)
    c.set_defaults(func=cmd_gradcheck)
    return p


_LIST_FLAGS = ("--views", "--illums", "--candidates", "--train-views")
_NUMBER_LIST = re.compile(r"^-?[\d.]+(,-?[\d.]*)*$")


def _join_negative_lists(argv):
    """``--views -15,0,15`` -> ``--views=-15,0,15`` so argparse does not read
    the leading minus as an option."""
    out, i = [], 0
    while i < len(argv):
        tok = argv[i]
        if tok in _LIST_FLAGS and i + 1 < len(argv) and _NUMBER_LIST.match(argv[i + 1]):
            out.append(f"{tok}={argv[i + 1]}")
            i += 2
            continue
        out.append(tok)
        i += 1
    return out


def main(argv=None):
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parser.parse_args(_join_negative_lists(argv))
        if not getattr(args, "command", None):
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ChecksumError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    except VerificationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    except (OSError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ContractError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
