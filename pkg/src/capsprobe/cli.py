"""``capsprobe`` command line: train, evaluate, explain, attack and benchmark the toy models.

Every run prints its effective configuration, writes all outputs under
``--out`` and leaves a ``manifest.txt`` there (config, seed, code version,
input digests). Exit codes: 0 success, 1 runtime error, 2 usage error.
"""

import argparse
import hashlib
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import attack as A
from . import explain as E
from .gracapsnet import GraCapsNet
from .harness import affine, bench, data
from .harness.report import Report
from .models import KINDS, TRAIN_DEFAULTS, build_model
from .vit import ViT, attention_rollout, smooth_attention

EXPLAIN_METHODS = ("lrp", "clrp", "graattn", "rollout")
ATTACK_METHODS = ("fgsm", "pgd", "caps", "vote", "patch")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


# ---------------------------------------------------------------- arguments


def _common(p, model_required=True):
    p.add_argument("--config", help="file of `key = value` lines; flags override it")
    p.add_argument("--seed", type=int, help="mandatory run seed")
    p.add_argument("--out", help="output directory")
    p.add_argument("--model", choices=KINDS, required=False)
    p.add_argument("--data", default="synth", help="synth | synth2 | idx:IMAGES,LABELS")
    p.add_argument("--n", type=int, default=1000, help="number of synthetic images")
    p.add_argument("--data-seed", type=int, help="seed of the synthetic set (defaults to --seed)")
    p.add_argument("--checkpoint", help="model checkpoint (.cprb)")
    p.add_argument("--routing-iters", type=int)
    p.add_argument("--attn-temp", type=float)
    p.set_defaults(_model_required=model_required)


def _eval_set(p):
    p.add_argument("--count", type=int, default=200, help="images taken from the start of the set")


def build_parser():
    parser = _Parser(prog="capsprobe", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"capsprobe {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("train", help="fit a model and save its checkpoint")
    _common(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--stop-at", type=float, help="end once train accuracy reaches this value")

    p = sub.add_parser("eval", help="accuracy of a checkpoint")
    _common(p)
    _eval_set(p)

    p = sub.add_parser("explain", help="saliency map for one image")
    _common(p)
    p.add_argument("--method", choices=EXPLAIN_METHODS)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--target", type=int, help="explained class (defaults to the prediction)")
    p.add_argument("--lrp-eps", type=float, default=1e-6)

    p = sub.add_parser("attack", help="adversarial success rate of one attack")
    _common(p)
    _eval_set(p)
    p.add_argument("--method", choices=ATTACK_METHODS)
    p.add_argument("--eps", type=float, default=0.1)
    p.add_argument("--steps", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--patch", help="row,col,height,width")
    p.add_argument("--random-start", action="store_true")

    for name, helptext in (("bench-affine", "accuracy under affine transformations"),
                           ("bench-patch", "patch corruption and patch attack benchmark")):
        p = sub.add_parser(name, help=helptext)
        _common(p, model_required=False)
        _eval_set(p)
        p.add_argument("--models", nargs="+", required=False, metavar="KIND=CHECKPOINT")
        if name == "bench-patch":
            p.add_argument("--patch-size", type=int, default=7)
            p.add_argument("--steps", type=int, default=A.PATCH_STEPS)
            p.add_argument("--alpha", type=float, default=A.PATCH_STEP)
            p.add_argument("--position-steps", type=int, help="attack steps of the position grid (defaults to --steps)")

    p = sub.add_parser("inspect", help="parameter counts and attention dumps")
    _common(p)
    p.add_argument("--index", type=int, default=0)
    return parser


def read_config(path):
    """``key = value`` lines, ``#`` starts a comment. Keys may use dashes or underscores."""
    values = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected `key = value`")
            key, value = (s.strip() for s in line.split("=", 1))
            values[key.replace("-", "_")] = value
    return values


def parse(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        raise UsageError(parser.format_usage() + "capsprobe: error: a subcommand is required")
    if args.config:
        if not os.path.isfile(args.config):
            raise UsageError(f"config file {args.config!r} does not exist")
        values = read_config(args.config)
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sub._actions}
        unknown = sorted(set(values) - known)
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        sub.set_defaults(**{k: _coerce(sub, k, v) for k, v in values.items()})
        args = parser.parse_args(argv)
    _validate(args)
    return args


def _coerce(sub, key, value):
    action = next(a for a in sub._actions if a.dest == key)
    if action.nargs in ("+", "*"):
        return value.split()
    if isinstance(action, argparse._StoreTrueAction):
        return value.lower() in ("1", "true", "yes", "on")
    try:
        v = action.type(value) if action.type else value
    except ValueError as exc:
        raise UsageError(f"config key {key}: {exc}") from None
    if action.choices is not None and v not in action.choices:
        raise UsageError(f"config key {key}: {v!r} not in {list(action.choices)}")
    return v


def _validate(args):
    if args.seed is None:
        raise UsageError("--seed is required (runs are never seeded from the clock)")
    if not args.out:
        raise UsageError("--out is required")
    if args._model_required and args.model is None:
        raise UsageError("--model is required")
    if args.command in ("eval", "explain", "attack") and not args.checkpoint:
        raise UsageError(f"{args.command} needs --checkpoint")
    if args.command in ("explain", "attack") and args.method is None:
        raise UsageError(f"{args.command} needs --method")
    if args.checkpoint and not os.path.isfile(args.checkpoint):
        raise UsageError(f"checkpoint {args.checkpoint!r} does not exist")
    if args.data.startswith("idx:"):
        paths = args.data[4:].split(",")
        if len(paths) != 2:
            raise UsageError("--data idx:IMAGES,LABELS needs two paths")
        for p in paths:
            if not os.path.isfile(p):
                raise UsageError(f"data file {p!r} does not exist")
    elif args.data not in ("synth", "synth2"):
        raise UsageError(f"unknown --data {args.data!r}")
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    if getattr(args, "patch", None) is not None:
        try:
            r, c, h, w = (int(v) for v in args.patch.split(","))
        except ValueError:
            raise UsageError("--patch expects row,col,height,width") from None
        args.patch = A.PatchSpec(r, c, h, w)
    if args.command == "attack" and args.method == "patch" and args.patch is None:
        raise UsageError("patch attack needs --patch")
    if args.command in ("bench-affine", "bench-patch"):
        if not args.models:
            raise UsageError("--models KIND=CHECKPOINT ... is required")
        pairs = []
        for item in args.models:
            kind, _, path = item.partition("=")
            if kind not in KINDS or not path:
                raise UsageError(f"--models entry {item!r} is not KIND=CHECKPOINT")
            if not os.path.isfile(path):
                raise UsageError(f"checkpoint {path!r} does not exist")
            pairs.append((kind, path))
        args.models = pairs


# ---------------------------------------------------------------- run plumbing


def effective_config(args):
    skip = {"_model_required", "config"}
    out = []
    for k in sorted(vars(args)):
        if k in skip:
            continue
        v = getattr(args, k)
        if isinstance(v, A.PatchSpec):
            v = f"{v.row},{v.col},{v.height},{v.width}"
        elif isinstance(v, list):
            v = " ".join("=".join(item) if isinstance(item, tuple) else str(item) for item in v)
        out.append((k, v))
    return out


def _digest_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _digest_array(*arrays):
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()


def code_digest():
    """Hash of the package sources, so manifests pin the exact code that ran."""
    root = Path(__file__).parent
    h = hashlib.sha256()
    for path in sorted(root.rglob("*")):
        if path.suffix in (".py", ".pyx") and "__pycache__" not in path.parts:
            h.update(path.relative_to(root).as_posix().encode())
            h.update(path.read_bytes())
    return h.hexdigest()


def write_manifest(out, args, inputs):
    lines = [f"command = {args.command}", f"version = {__version__}", f"code_sha256 = {code_digest()}",
             f"seed = {args.seed}"]
    lines += [f"config.{k} = {v}" for k, v in effective_config(args)]
    lines += [f"input.{name} = sha256:{digest}" for name, digest in inputs]
    (out / "manifest.txt").write_text("\n".join(lines) + "\n")


def load_data(args):
    if args.data.startswith("idx:"):
        img, lab = args.data[4:].split(",")
        ds = data.load_idx(img, lab)
        return ds, [("images", _digest_file(img)), ("labels", _digest_file(lab))]
    seed = args.seed if args.data_seed is None else args.data_seed
    ds = data.synth_shapes(args.n, seed=seed, two_object=args.data == "synth2")
    return ds, [(args.data, _digest_array(ds.images, ds.labels))]


def make_model(kind, args, ds, checkpoint=None):
    model = build_model(kind, seed=args.seed, num_classes=max(ds.num_classes, 2),
                        input_shape=ds.images.shape[1:], routing_iters=args.routing_iters,
                        attn_temp=args.attn_temp)
    if checkpoint:
        model.load(checkpoint)
    return model


def _take(ds, count):
    return ds.subset(np.arange(min(count, len(ds))))


def _limit_threads():
    n = os.environ.get("CAPSPROBE_THREADS")
    if not n:
        return None
    try:
        n = int(n)
    except ValueError:
        raise UsageError(f"CAPSPROBE_THREADS must be an integer, got {n!r}") from None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=max(n, 1))


# ---------------------------------------------------------------- subcommands


def cmd_train(args, out, ds, inputs):
    from .train import train

    defaults = TRAIN_DEFAULTS[args.model]
    epochs = args.epochs if args.epochs is not None else defaults["epochs"]
    lr = args.lr if args.lr is not None else defaults["lr"]
    batch = args.batch if args.batch is not None else defaults["batch"]
    model = make_model(args.model, args, ds)
    res = train(model, ds, epochs=epochs, lr=lr, batch=batch, seed=args.seed, stop_at=args.stop_at)
    model.save(out / "model.cprb")
    rep = Report()
    rep.note(f"train model={args.model} epochs={epochs} lr={lr!r} batch={batch}")
    for i, loss in enumerate(res.epoch_losses, 1):
        rep.add("loss", args.model, f"epoch{i}", loss, res.total)
    rep.add("accuracy", args.model, "train", res.train_accuracy, res.total)
    rep.add("params", args.model, "total", model.num_parameters(), 1)
    return rep


def cmd_eval(args, out, ds, inputs):
    model = make_model(args.model, args, ds, args.checkpoint)
    sub = _take(ds, args.count)
    correct = int(np.sum(model.predict(sub.images) == sub.labels))
    rep = Report()
    rep.add("accuracy", args.model, args.data, correct / len(sub), len(sub))
    return rep


def cmd_explain(args, out, ds, inputs):
    model = make_model(args.model, args, ds, args.checkpoint)
    if not 0 <= args.index < len(ds):
        raise UsageError(f"--index {args.index} outside a set of {len(ds)} images")
    x = ds.images[args.index]
    pred = int(model.predict(x[None])[0])
    target = pred if args.target is None else args.target
    rep = Report()
    rep.note(f"explain method={args.method} index={args.index} label={int(ds.labels[args.index])}")
    split = f"image{args.index}"
    if args.method in ("lrp", "clrp"):
        if args.model != "convnet":
            raise RuntimeError(f"{args.method} is defined for the convnet only")
        fn = E.lrp if args.method == "lrp" else E.clrp
        rmap = fn(model, x, target, eps=args.lrp_eps)
        pixels = rmap.pixels
        rep.add("score", args.model, split, rmap.score, 1)
        rep.add("relevance-sum", args.model, split, float(rmap.relevance.sum()), pixels.size)
    elif args.method == "graattn":
        if not isinstance(model, GraCapsNet):
            raise RuntimeError("graattn needs a gracapsnet model")
        pred, pixels = model.explain(x)
        target = pred
    else:
        if not isinstance(model, ViT):
            raise RuntimeError("rollout needs a vit model")
        pixels = attention_rollout(model.attention_record(x)).reshape(model.config.grid())
    rep.add("target", args.model, split, target, 1)
    rep.add("predicted", args.model, split, pred, 1)
    if ds.boxes is not None and pixels.shape == x.shape[-2:]:
        _, hits, total = E.pointing_game([pixels], [tuple(ds.boxes[args.index])])
        rep.add("pointing-hit", args.model, split, hits, total)
    E.write_pgm(out / f"{args.method}.pgm", pixels)
    E.write_csv(out / f"{args.method}.csv", pixels)
    return rep


def cmd_attack(args, out, ds, inputs):
    model = make_model(args.model, args, ds, args.checkpoint)
    sub = _take(ds, args.count)
    x, y = sub.images, sub.labels
    A.CONSTRAINTS.reset()
    m = args.method
    if m == "fgsm":
        x_adv = A.fgsm(model, x, y, args.eps)
        budget_note = f"eps={args.eps!r}"
    elif m == "patch":
        steps = args.steps if args.steps is not None else A.PATCH_STEPS
        lr = args.alpha if args.alpha is not None else A.PATCH_STEP
        x_adv = A.patch_attack(model, x, y, args.patch, steps=steps, lr=lr)
        budget_note = f"patch={args.patch.row},{args.patch.col},{args.patch.height},{args.patch.width} steps={steps} lr={lr!r}"
    else:
        steps = args.steps if args.steps is not None else 10
        alpha = args.alpha if args.alpha is not None else args.eps / 4
        budget = A.AttackBudget(args.eps, alpha, steps, args.random_start)
        fn = {"pgd": A.pgd, "caps": A.caps_attack, "vote": A.vote_attack}[m]
        if m in ("caps", "vote") and not hasattr(model, "votes"):
            raise RuntimeError(f"{m} attack needs a routing capsule model (capsnet or affcapsnet)")
        x_adv = fn(model, x, y, budget, seed=args.seed)
        budget_note = f"eps={args.eps!r} alpha={alpha!r} steps={steps}"
    rep = Report()
    rep.note(f"attack method={m} {budget_note}")
    rate, flipped, denom = A.success_rate(model, x, y, x_adv)
    clean = int(np.sum(model.predict(x) == y))
    adv = int(np.sum(model.predict(x_adv) == y))
    rep.add("accuracy", args.model, "clean", clean / len(y), len(y))
    rep.add("accuracy", args.model, f"{m}", adv / len(y), len(y))
    rep.add("attack-success", args.model, m, rate, denom)
    rep.add("constraint-violations", args.model, m, A.CONSTRAINTS.violations, A.CONSTRAINTS.checked)
    return rep


def _bench_models(args, ds, inputs):
    models = {}
    for kind, path in args.models:
        name = kind if kind not in models else f"{kind}{len(models)}"
        models[name] = make_model(kind, args, ds, path)
        inputs.append((f"checkpoint.{name}", _digest_file(path)))
    return models


def cmd_bench_affine(args, out, ds, inputs):
    models = _bench_models(args, ds, inputs)
    return bench.affine_benchmark(models, _take(ds, args.count), affine.default_affine_grid(), seed=args.seed)


def cmd_bench_patch(args, out, ds, inputs):
    models = _bench_models(args, ds, inputs)
    if args.attn_temp is not None:
        for name in [k for k, m in models.items() if isinstance(m, ViT)]:
            models[f"{name}-tau{args.attn_temp:g}"] = smooth_attention(models[name], args.attn_temp)
    H, W = ds.images.shape[-2:]
    specs = A.aligned_patches(H, W, args.patch_size)
    budget = bench.PatchBudget(args.steps, args.alpha)
    pos = bench.PatchBudget(args.position_steps or args.steps, args.alpha)
    return bench.patch_benchmark(models, _take(ds, args.count), specs, [budget], seed=args.seed, position_budget=pos)


def cmd_inspect(args, out, ds, inputs):
    model = make_model(args.model, args, ds, args.checkpoint)
    rep = Report()
    rep.add("params", args.model, "total", model.num_parameters(), 1)
    if hasattr(model, "transform_params"):
        rep.add("params", args.model, "transform", model.transform_params(), 1)
    for name, p in model.named_parameters().items():
        rep.add("params", args.model, name, p.size, 1)
    x = ds.images[args.index]
    if isinstance(model, ViT):
        for i, att in enumerate(model.attention_record(x)):
            E.write_csv(out / f"attention_layer{i}.csv", att)
    elif isinstance(model, GraCapsNet):
        from . import tensor as T

        with T.no_grad():
            _, atts = model.forward(x, return_attention=True)
        for l, att in enumerate(atts):
            E.write_csv(out / f"attention_head{l}.csv", att)
    return rep


COMMANDS = {
    "train": cmd_train, "eval": cmd_eval, "explain": cmd_explain, "attack": cmd_attack,
    "bench-affine": cmd_bench_affine, "bench-patch": cmd_bench_patch, "inspect": cmd_inspect,
}


def run(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    print("effective config:")
    for k, v in effective_config(args):
        print(f"  {k} = {v}")
    sys.stdout.flush()
    ds, inputs = load_data(args)
    if args.checkpoint:
        inputs.append(("checkpoint", _digest_file(args.checkpoint)))
    rep = COMMANDS[args.command](args, out, ds, inputs)
    rep.write(out / "report.txt")
    write_manifest(out, args, inputs)
    print(f"wrote {out / 'report.txt'}")


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse(argv)
        limiter = _limit_threads()
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    try:
        run(args)
    except UsageError as exc:
        print(f"capsprobe: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to exit 1
        print(f"capsprobe: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    finally:
        if limiter is not None:
            limiter.restore_original_limits()
    return 0


if __name__ == "__main__":
    sys.exit(main())
