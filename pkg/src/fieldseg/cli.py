"""Command-line pipeline: gen, train, infer, eval, ablate, bench, gradcheck.

Exit codes: 0 success, 1 usage error, 2 validation or assertion failure.
Every subcommand is deterministic given --seed and a fixed thread count.
A JSON config file may supply any flag via --config; explicit flags win.
"""

import argparse
import csv
import dataclasses
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import baseline as bl
from . import fileio
from . import model as md
from .estimators import DenseSegmenter, ImplicitSegmenter
from .metrics import evaluate
from .phantom import PhantomConfig, generate_phantom, validate_phantom
from .volume import Volume
from .validation import check_extent

CHANNEL_ORDER = "ILBAV"

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_FAILED = 2


class CliError(Exception):
    """Validation failure that should terminate with exit code 2."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def normalize_inputs(inputs):
    s = "".join(dict.fromkeys(inputs.upper()))
    if not s or any(c not in CHANNEL_ORDER for c in s):
        raise CliError(
            f"input channels must be a nonempty subset of {CHANNEL_ORDER}, got {inputs!r}")
    return "".join(c for c in CHANNEL_ORDER if c in s)


def assemble_input(phantom, inputs, corrupt_rate=0.0, rng=None):
    """Stack the selected channels: intensity for I, binary masks for LBAV.

    ``corrupt_rate`` flips that fraction of each mask's foreground voxels
    off and turns the same number of background voxels on (simulating
    upstream segmentation error); the image channel is never corrupted.
    """
    inputs = normalize_inputs(inputs)
    grids = {
        "I": phantom.image.data[0],
        "L": (phantom.lobe_labels.data > 0).astype(np.float32),
        "B": (phantom.bronchus_labels.data > 0).astype(np.float32),
        "A": (phantom.artery_labels.data > 0).astype(np.float32),
        "V": (phantom.vein_labels.data > 0).astype(np.float32),
    }
    channels = []
    for c in inputs:
        g = grids[c].astype(np.float32)
        if corrupt_rate > 0 and c != "I":
            g = _corrupt_mask(g, corrupt_rate, rng)
        channels.append(g)
    return Volume(np.stack(channels), phantom.image.spacing)


def _corrupt_mask(mask, rate, rng):
    flat = mask.ravel().copy()
    fg = np.flatnonzero(flat > 0)
    bg = np.flatnonzero(flat == 0)
    n = int(round(rate * fg.size))
    if n == 0 or fg.size == 0 or bg.size == 0:
        return flat.reshape(mask.shape)
    off = rng.choice(fg.size, size=min(n, fg.size), replace=False)
    on = rng.choice(bg.size, size=min(n, bg.size), replace=False)
    flat[fg[off]] = 0.0
    flat[bg[on]] = 1.0
    return flat.reshape(mask.shape)


def split_counts(n):
    """Train/val/test sizes honoring the 7:1:2 ratio."""
    if n < 3:
        raise CliError(f"need at least 3 phantoms for a 7:1:2 split, got {n}")
    n_test = max(1, round(0.2 * n))
    n_val = max(1, round(0.1 * n))
    n_train = n - n_val - n_test
    if n_train < 1:
        raise CliError(f"split of {n} phantoms leaves no training items")
    return n_train, n_val, n_test


def _write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, sort_keys=True, indent=2)
        f.write("\n")


def load_dataset(data_dir):
    data_dir = Path(data_dir)
    manifest_path = data_dir / "dataset.json"
    if not manifest_path.exists():
        raise CliError(f"no dataset manifest at {manifest_path}")
    with open(manifest_path, encoding="utf-8") as f:
        manifest = json.load(f)
    phantoms = {name: fileio.load_phantom(data_dir / name)
                for split in manifest["splits"].values() for name in split}
    return manifest, phantoms


def cmd_gen(args):
    cfg = PhantomConfig(
        extent=tuple(args.extent), num_segments=args.segments,
        noise_sigma=args.noise_sigma, seed=args.seed)
    out = Path(args.out)
    n_train, n_val, n_test = split_counts(args.count)
    names = [f"p{i:03d}" for i in range(args.count)]
    splits = {
        "train": names[:n_train],
        "val": names[n_train:n_train + n_val],
        "test": names[n_train + n_val:],
    }
    failures = []
    for i, name in enumerate(names):
        ph = generate_phantom(dataclasses.replace(cfg, seed=args.seed + i))
        report = validate_phantom(ph)
        if not report.passed:
            failures.append({"phantom": name, "report": report.to_dict()})
        fileio.save_phantom(ph, out / name)
    manifest = {
        "seed": args.seed,
        "count": args.count,
        "config": dataclasses.asdict(cfg),
        "splits": splits,
    }
    _write_json(out / "dataset.json", manifest)
    if failures:
        print(json.dumps(failures, indent=2))
        raise CliError(f"{len(failures)} phantom(s) failed anatomical validation")
    print(f"wrote {args.count} phantoms to {out} "
          f"(train/val/test = {n_train}/{n_val}/{n_test})")
    return EXIT_OK


def _train_implicit(manifest, phantoms, args, inputs, corrupt_rate=0.0):
    train_names = manifest["splits"]["train"]
    xs = [assemble_input(phantoms[n], inputs) for n in train_names]
    ys = [phantoms[n].segments for n in train_names]
    num_classes = ys[0].num_classes
    est = ImplicitSegmenter(
        in_channels=len(inputs), num_classes=num_classes, steps=args.steps,
        points_per_step=args.points, lr=args.lr, ce_weight=args.ce_weight,
        dice_weight=args.dice_weight, seed=args.seed)
    est.fit(xs, ys)
    return est


def cmd_train(args):
    inputs = normalize_inputs(args.inputs)
    manifest, phantoms = load_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    est = _train_implicit(manifest, phantoms, args, inputs)
    wall = time.perf_counter() - t0

    fileio.save_checkpoint(out / "checkpoint.json", est.net_,
                           extra={"inputs": inputs})
    with open(out / "loss_log.csv", "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "ce", "dice", "total", "points"])
        for i, r in enumerate(est.history_):
            writer.writerow([i, f"{r.ce:.6f}", f"{r.dice:.6f}", f"{r.total:.6f}", r.points])
    enc, dec, total = est.count_params()
    summary = {
        "inputs": inputs,
        "steps": args.steps,
        "points_per_step": est.points_per_step_,
        "final_ce": est.history_[-1].ce,
        "final_dice_loss": est.history_[-1].dice,
        "final_total": est.history_[-1].total,
        "params": {"encoder": enc, "decoder": dec, "total": total},
        "wall_time_s": wall,
    }
    _write_json(out / "summary.json", summary)
    print(f"trained {args.steps} steps on inputs {inputs}; "
          f"final loss {est.history_[-1].total:.4f}; checkpoint at {out}")
    return EXIT_OK


def cmd_infer(args):
    net, head, manifest = fileio.load_checkpoint(args.checkpoint)
    src = Path(args.volume)
    if src.is_dir():
        phantom = fileio.load_phantom(src)
        inputs = manifest.get("extra", {}).get("inputs", "I")
        x = assemble_input(phantom, inputs)
    else:
        x = fileio.load_volume(src)
    if x.channels != net.in_channels:
        raise CliError(
            f"checkpoint expects {net.in_channels} input channel(s) "
            f"but the volume provides {x.channels}")
    ext = check_extent(args.extent) if args.extent else x.extent
    if head is not None:
        labels = bl.dense_reconstruct(net, head, x, ext)
    else:
        labels = md.reconstruct(net, x, ext)
    out = Path(args.out)
    fileio.save_labels(labels, out)
    if args.export_mesh:
        fileio.export_boundary_mesh(labels, out.with_suffix(".ply"))
    if args.export_slice is not None:
        fileio.export_slice(labels, 0, args.export_slice, out.with_suffix(".ppm"))
    print(f"wrote labels {tuple(labels.extent)} to {out}")
    return EXIT_OK


def cmd_eval(args):
    pred = fileio.load_labels(args.pred)
    phantom = fileio.load_phantom(args.phantom)
    report = evaluate(pred, phantom).to_dict()
    text = json.dumps(report, indent=2, sort_keys=True)
    print(text)
    if args.out:
        _write_json(args.out, report)
    return EXIT_OK


def _eval_est(est, phantoms, names, inputs, corrupt_rate=0.0, seed=0):
    rng = np.random.default_rng(np.random.SeedSequence([seed, 97]))
    metrics = {"dice_o": [], "dice_b": [], "dice_a": []}
    for name in names:
        ph = phantoms[name]
        x = assemble_input(ph, inputs, corrupt_rate=corrupt_rate, rng=rng)
        pred = est.predict(x, extent=ph.segments.extent)
        rep = evaluate(pred, ph)
        for key in metrics:
            val = getattr(rep, key)
            if val is not None:
                metrics[key].append(val)
    return {k: (float(np.mean(v)) if v else None) for k, v in metrics.items()}


def cmd_ablate(args):
    manifest, phantoms = load_dataset(args.data)
    combos = [normalize_inputs(c) for c in args.combos.split(",") if c.strip()]
    if not combos:
        raise CliError("no input combinations given")
    test_names = manifest["splits"]["test"]
    table = {}
    for combo in combos:
        est = _train_implicit(manifest, phantoms, args, combo)
        clean = _eval_est(est, phantoms, test_names, combo, 0.0, args.seed)
        if combo == "I":
            corrupted = {k: None for k in clean}
        else:
            corrupted = _eval_est(est, phantoms, test_names, combo,
                                  args.corrupt_rate, args.seed)
        table[combo] = {"clean": clean, "corrupted": corrupted}
        print(f"[{combo}] clean dice_o={clean['dice_o']:.4f} "
              f"dice_b={clean['dice_b']:.4f} dice_a={clean['dice_a']:.4f}")
    result = {
        "combos": combos,
        "corrupt_rate": args.corrupt_rate,
        "steps": args.steps,
        "table": table,
    }
    if args.out:
        _write_json(Path(args.out) / "ablation.json", result)
        (Path(args.out) / "ablation.txt").write_text(format_ablation(result),
                                                     encoding="utf-8")
    print(format_ablation(result))
    return EXIT_OK


def format_ablation(result):
    combos = result["combos"]
    lines = []
    header = f"{'metric':<12}{'condition':<12}" + "".join(f"{c:>10}" for c in combos)
    lines.append(header)
    for metric in ("dice_o", "dice_b", "dice_a"):
        for cond in ("clean", "corrupted"):
            row = f"{metric:<12}{cond:<12}"
            for c in combos:
                v = result["table"][c][cond][metric]
                row += f"{v:>10.4f}" if v is not None else f"{'n/a':>10}"
            lines.append(row)
    return "\n".join(lines) + "\n"


def cmd_bench(args):
    manifest, phantoms = load_dataset(args.data)
    inputs = normalize_inputs(args.inputs)
    train_names = manifest["splits"]["train"]
    val_names = manifest["splits"]["val"]
    xs = [assemble_input(phantoms[n], inputs) for n in train_names]
    ys = [phantoms[n].segments for n in train_names]
    num_classes = ys[0].num_classes

    t0 = time.perf_counter()
    imp = ImplicitSegmenter(in_channels=len(inputs), num_classes=num_classes,
                            steps=args.steps, points_per_step=args.points,
                            lr=args.lr, seed=args.seed).fit(xs, ys)
    imp_time = time.perf_counter() - t0
    t0 = time.perf_counter()
    den = DenseSegmenter(in_channels=len(inputs), num_classes=num_classes,
                         steps=args.steps, lr=args.lr, seed=args.seed).fit(xs, ys)
    dense_time = time.perf_counter() - t0

    _, imp_dec, _ = imp.count_params()
    _, den_head, _ = den.count_params()
    imp_dice = _eval_est(imp, phantoms, val_names, inputs)["dice_o"]
    den_dice = _eval_est(den, phantoms, val_names, inputs)["dice_o"]
    report = {
        "steps": args.steps,
        "implicit": {"decoder_params": imp_dec,
                     "points_per_step": imp.points_per_step_,
                     "wall_time_s": imp_time, "val_dice_o": imp_dice},
        "dense": {"head_params": den_head,
                  "points_per_step": den.points_per_step_,
                  "wall_time_s": dense_time, "val_dice_o": den_dice},
    }
    print(json.dumps(report, indent=2, sort_keys=True))
    if args.out:
        _write_json(Path(args.out) / "bench.json", report)
    if not imp_dec < den_head:
        raise CliError(
            f"expected implicit decoder ({imp_dec}) < dense head ({den_head})")
    if not imp.points_per_step_ < den.points_per_step_:
        raise CliError(
            f"expected fewer points per step for the implicit model "
            f"({imp.points_per_step_} vs {den.points_per_step_})")
    return EXIT_OK


def gradcheck_suite(verbose=True):
    """Seeded gradient checks for every differentiable op plus the full loss."""
    from . import autograd as ag
    from .optim import grad_check
    from .phantom import generate_phantom
    from .volume import nearest_label, random_coords

    results = {}
    rng = np.random.default_rng(11)
    proj = rng.standard_normal((3, 4))

    def project_rows(out, k=3):
        n = out.data.size // k
        return ag.Tensor(out.data.reshape(k, -1).T @ proj, (out,),
                         lambda g: out.accumulate((g @ proj.T).T.reshape(out.shape)))

    for stride in (1, 2):
        x = ag.Tensor(rng.standard_normal((2, 5, 5, 5)))
        w = ag.Parameter(rng.standard_normal((3, 2, 3, 3, 3)) * 0.3, "w")
        b = ag.Parameter(rng.standard_normal(3) * 0.1, "b")
        xi = ag.Parameter(rng.standard_normal((2, 5, 5, 5)), "xi")

        def conv_closure():
            out = ag.conv3d(xi, w, b, stride=stride)
            return ag.cross_entropy(project_rows(out), np.arange(out.data.size // 3) % 4)

        results[f"conv3d_stride{stride}"] = grad_check(
            conv_closure, [xi, w, b], max_entries=40, rng=np.random.default_rng(0))

    xl = ag.Tensor(rng.standard_normal((12, 6)))
    wl = ag.Parameter(rng.standard_normal((6, 5)), "wl")
    blp = ag.Parameter(rng.standard_normal(5), "bl")
    results["linear_softmax_ce"] = grad_check(
        lambda: ag.cross_entropy(ag.linear(xl, wl, blp), np.arange(12) % 5),
        [wl, blp], rng=np.random.default_rng(0))
    results["dice_loss"] = grad_check(
        lambda: ag.dice_loss(ag.softmax_rows(ag.linear(xl, wl, blp)), np.arange(12) % 5),
        [wl, blp], rng=np.random.default_rng(0))

    vt = ag.Parameter(rng.standard_normal((3, 4, 5, 6)), "vt")
    coords = np.random.default_rng(3).uniform(-1, 1, (40, 3))
    results["trilinear_sample"] = grad_check(
        lambda: ag.cross_entropy(ag.sample_volume(vt, coords), np.arange(40) % 3),
        [vt], max_entries=120, rng=np.random.default_rng(2))

    ph = generate_phantom(PhantomConfig(extent=(12, 12, 12), num_segments=4, seed=5))
    net = md.PointFieldNet(in_channels=1, widths=(4, 6), hidden=8, num_classes=5,
                           seed=3, dtype=np.float64)
    batch = random_coords(32, np.random.default_rng(7))
    targets = nearest_label(ph.segments, batch)

    def full_closure():
        pyr = md.encode(net, ph.image)
        logits = md.decode_logits(net, md.point_features(net, pyr, batch))
        ce = ag.cross_entropy(logits, targets)
        dice = ag.dice_loss(ag.softmax_rows(logits), targets)
        return ce * 1.0 + dice * 1.0

    results["composed_model_loss"] = grad_check(
        full_closure, net.parameters(), max_entries=16, rng=np.random.default_rng(1))

    head = bl.DenseHead(widths=(4, 6), proj_width=5, num_classes=5, seed=4,
                        dtype=np.float64)
    gt = ph.segments

    def dense_closure():
        rows = bl.voxel_rows(bl.dense_logits(net, head, ph.image))
        ce = ag.cross_entropy(rows, gt.data.ravel())
        dice = ag.dice_loss(ag.softmax_rows(rows), gt.data.ravel())
        return ce * 1.0 + dice * 1.0

    results["composed_dense_loss"] = grad_check(
        dense_closure, net.parameters() + head.parameters(), max_entries=8,
        rng=np.random.default_rng(1))

    if verbose:
        for name, err in results.items():
            status = "ok" if err < 1e-4 else "FAIL"
            print(f"{name:<24} max rel err {err:.3e}  [{status}]")
    return results


def cmd_gradcheck(args):
    t0 = time.perf_counter()
    results = gradcheck_suite()
    wall = time.perf_counter() - t0
    worst = max(results.values())
    print(f"worst relative error {worst:.3e} in {wall:.1f}s")
    if worst >= 1e-4:
        raise CliError(f"gradient check failed: worst relative error {worst:.3e}")
    return EXIT_OK


def build_parser():
    parser = _Parser(prog="fieldseg", description=__doc__)
    parser.add_argument("--config", help="JSON file of default flag values")
    sub = parser.add_subparsers(dest="command", required=True)
    commands = {}

    def add(name, fn, **kwargs):
        p = sub.add_parser(name, **kwargs)
        p.set_defaults(func=fn)
        p.add_argument("--seed", type=int, default=0)
        commands[name] = p
        return p

    g = add("gen", cmd_gen, help="generate a phantom dataset with a 7:1:2 split")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, default=20)
    g.add_argument("--extent", type=int, nargs=3, default=[32, 32, 32])
    g.add_argument("--segments", type=int, default=18)
    g.add_argument("--noise-sigma", type=float, default=40.0)

    t = add("train", cmd_train, help="train the implicit model on a dataset")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--inputs", default="I")
    t.add_argument("--steps", type=int, default=2000)
    t.add_argument("--points", type=int, default=4096)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--ce-weight", type=float, default=1.0)
    t.add_argument("--dice-weight", type=float, default=1.0)

    i = add("infer", cmd_infer, help="reconstruct labels from a checkpoint")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--volume", required=True,
                   help="a .vol input or a phantom directory")
    i.add_argument("--out", required=True)
    i.add_argument("--extent", type=int, nargs=3, default=None)
    i.add_argument("--export-mesh", action="store_true")
    i.add_argument("--export-slice", type=int, default=None,
                   help="also write a PPM slice at this depth index")

    e = add("eval", cmd_eval, help="evaluate predicted labels against a phantom")
    e.add_argument("--pred", required=True)
    e.add_argument("--phantom", required=True)
    e.add_argument("--out", default=None)

    a = add("ablate", cmd_ablate, help="train/evaluate several input combinations")
    a.add_argument("--data", required=True)
    a.add_argument("--out", default=None)
    a.add_argument("--combos", default="L,BAV,LBAV,I,IBAV")
    a.add_argument("--steps", type=int, default=2000)
    a.add_argument("--points", type=int, default=4096)
    a.add_argument("--lr", type=float, default=1e-3)
    a.add_argument("--ce-weight", type=float, default=1.0)
    a.add_argument("--dice-weight", type=float, default=1.0)
    a.add_argument("--corrupt-rate", type=float, default=0.05)

    bch = add("bench", cmd_bench, help="efficiency comparison implicit vs dense")
    bch.add_argument("--data", required=True)
    bch.add_argument("--out", default=None)
    bch.add_argument("--inputs", default="I")
    bch.add_argument("--steps", type=int, default=100)
    bch.add_argument("--points", type=int, default=4096)
    bch.add_argument("--lr", type=float, default=1e-3)

    add("gradcheck", cmd_gradcheck, help="finite-difference check of all gradients")
    return parser, commands


def main(argv=None):
    parser, commands = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        with open(args.config, encoding="utf-8") as f:
            defaults = json.load(f)
        known = vars(args)
        for key in defaults:
            if key.replace("-", "_") not in known:
                parser.error(f"unknown config key {key!r}")
        # flags given explicitly win: re-parse with file values as the
        # chosen subcommand's defaults
        commands[args.command].set_defaults(
            **{k.replace("-", "_"): v for k, v in defaults.items()})
        args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as e:
        print(f"failed: {e}", file=sys.stderr)
        return EXIT_FAILED
    except (ValueError, FileNotFoundError) as e:
        print(f"failed: {e}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
