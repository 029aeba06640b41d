"""Command-line entry point: ``uwdg <subcommand> ...``.

Exit codes: 0 success, 1 a check failed, 2 usage or IO error.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_CHECK, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _load_json(path) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except OSError as e:
        raise UsageError(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise UsageError(f"config {path} is not valid JSON: {e}") from e
    if not isinstance(data, dict):
        raise UsageError(f"config {path} must hold a JSON object")
    return data


def _outdir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise UsageError(f"cannot create output directory {out}: {e}") from e
    return out


# ------------------------------------------------------------------ commands
def cmd_datagen(args) -> int:
    from .image_model import DomainSpec, generate_toy_corpus
    from .pngio import write_corpus

    cfg = _load_json(args.config)
    allowed = {"n_domains", "n_per_domain_per_class", "n_classes", "image_size", "seed", "domains"}
    unknown = set(cfg) - allowed
    if unknown:
        raise UsageError(f"unknown datagen config keys: {sorted(unknown)}")
    if args.seed is not None:
        cfg["seed"] = args.seed
    if "domains" in cfg:
        cfg["domains"] = [DomainSpec(tuple(d["base"]), d["amplitude"], tuple(d["background"]), d.get("seed", 0)) for d in cfg["domains"]]
    try:
        samples = generate_toy_corpus(**cfg)
    except (TypeError, ValueError) as e:
        raise UsageError(f"invalid datagen config: {e}") from e
    out = _outdir(args.out)
    write_corpus(samples, out)
    print(f"wrote {len(samples)} images to {out}")
    return EXIT_OK


def cmd_init_net(args) -> int:
    from .stylizer import StylizerConfig, StylizerNet

    cfg = _load_json(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    try:
        net = StylizerNet(StylizerConfig.from_dict(cfg))
    except (TypeError, ValueError) as e:
        raise UsageError(f"invalid stylizer config: {e}") from e
    if args.identity:
        net.make_identity()
    Path(args.out).write_bytes(net.to_bytes())
    return EXIT_OK


def cmd_stylize(args) -> int:
    from .bilateral import serialize_grid
    from .pngio import read_png, write_png
    from .stylizer import NetFormatError, StylizerNet

    try:
        buf = Path(args.net).read_bytes()
        content = read_png(args.content)
    except OSError as e:
        raise UsageError(str(e)) from e
    try:
        net = StylizerNet.from_bytes(buf)
    except NetFormatError as e:
        raise UsageError(f"bad net file {args.net}: {e}") from e
    if not 0 <= args.style_id < net.config.n_styles:
        raise UsageError(f"unknown style id {args.style_id}; net has {net.config.n_styles} styles")
    O, A, _ = net.stylize(content, np.array([args.style_id]))
    write_png(args.out, np.clip(O, 0.0, 1.0))
    if args.dump_grid:
        Path(args.dump_grid).write_bytes(serialize_grid(A))
    return EXIT_OK


def cmd_bench(args) -> int:
    from .bilateral import bench_slice, report_json

    if args.size < 32:
        raise UsageError(f"--size must be at least 32, got {args.size}")
    if args.iters < 10:
        raise UsageError(f"--iters must be at least 10, got {args.iters}")
    rep = bench_slice(args.size, args.size, args.iters, args.ref_iters, args.jobs)
    if args.json:
        print(report_json(rep))
    else:
        print(f"size        {args.size}x{args.size}")
        print(f"optimized   {rep['fps_opt']:.2f} fps ({rep['frame_ms_opt']:.1f} ms/frame, {rep['iters']} frames)")
        print(f"reference   {rep['fps_ref']:.4f} fps ({rep['frame_ms_ref']:.0f} ms/frame, {rep['ref_iters']} frames)")
        print(f"ratio       {rep['ratio']:.1f}x")
        if "fps_opt_parallel" in rep:
            print(f"parallel    {rep['fps_opt_parallel']:.2f} fps with {rep['jobs']} threads")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradsuite import TOL, run_suite

    rows = run_suite(args.scope, instances=args.instances, seed=args.seed, corrupt=args.corrupt)
    print(f"{'check':<30} {'inst':>4} {'coords':>7} {'kinks':>6} {'max rel err':>12}  status")
    failed = []
    for r in rows:
        print(f"{r.name:<30} {r.instances:>4} {r.checked:>7} {r.kinks:>6} {r.max_rel_error:>12.3e}  {'ok' if r.ok else 'FAIL'}")
        if not r.ok:
            failed.append(r.name)
    if failed:
        print(f"gradient check failed (tolerance {TOL:g}): {', '.join(failed)}", file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


def cmd_train_cbst(args) -> int:
    from .cbst_train import CBSTTrainConfig, train_cbst, write_curve

    raw = _load_json(args.config)
    if args.steps is not None:
        raw["steps"] = args.steps
    if args.seed is not None:
        raw["seed"] = args.seed
    try:
        cfg = CBSTTrainConfig.from_dict(raw)
    except (TypeError, ValueError) as e:
        raise UsageError(f"invalid train-cbst config: {e}") from e
    out = _outdir(args.out)

    def progress(step, comps):
        if args.verbose and step % 50 == 0:
            print(f"step {step:5d} total {comps['total']:.5f}", file=sys.stderr)

    net, curve, summary = train_cbst(cfg, progress)
    (out / "stylizer.snet").write_bytes(net.to_bytes())
    write_curve(curve, out / "loss_curve.csv")
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    print(f"total loss {summary['initial']['total']:.5f} -> {summary['final']['total']:.5f} (ratio {summary['ratio']:.3f})")
    return EXIT_OK


def cmd_dg_run(args) -> int:
    from .trainer import CorpusError, ExperimentConfig, LAMBDA_GRID, STAGE_GRID, run_dg_experiment
    from .pngio import read_corpus

    raw = _load_json(args.config)
    if args.sources is not None:
        raw["sources"] = args.sources
    if args.seeds is not None:
        raw["seeds"] = args.seeds
    if args.jobs is not None:
        raw["jobs"] = args.jobs
    if args.steps is not None:
        raw["train"] = {**raw.get("train", {}), "steps": args.steps}
    grid = dict(raw.get("grid", {}))
    if args.lambda_grid:
        grid["lambda_ssmc"] = list(LAMBDA_GRID)
    if args.stage_grid:
        grid["layers"] = [list(s) for s in STAGE_GRID]
    raw["grid"] = grid
    try:
        ec = ExperimentConfig.from_dict(raw)
        corpus = read_corpus(args.corpus) if args.corpus else None
        report = run_dg_experiment(ec, _outdir(args.out), corpus=corpus, keep_nets=True)
    except (CorpusError, TypeError, ValueError, OSError) as e:
        raise UsageError(str(e)) from e
    for label, s in report["summary"].items():
        print(f"{label:<24} held-out acc {s['mean']:.4f} +- {s['std']:.4f} (n={s['n']})")
    return EXIT_OK


def cmd_feature_stats(args) -> int:
    from .pngio import read_corpus
    from .stylizer import NetFormatError
    from .tinynet import TinyNet
    from .trainer import feature_statistics, write_feature_stats

    try:
        net = TinyNet.from_bytes(Path(args.net).read_bytes())
        corpus = read_corpus(args.corpus)
    except (OSError, NetFormatError, ValueError) as e:
        raise UsageError(str(e)) from e
    probes: dict = {}
    for s in corpus:
        probes.setdefault(s.domain, []).append(s.image)
    rng = np.random.default_rng(args.seed)
    for d, imgs in probes.items():
        if args.probes and len(imgs) > args.probes:
            pick = np.sort(rng.choice(len(imgs), size=args.probes, replace=False))
            imgs = [imgs[i] for i in pick]
        probes[d] = np.stack(imgs)
    try:
        stats = feature_statistics(net, probes)
    except ValueError as e:
        raise UsageError(str(e)) from e
    write_feature_stats(stats, args.out)
    return EXIT_OK


# -------------------------------------------------------------------- parser
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="uwdg", description="Underwater domain generalization toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("datagen", help="generate the synthetic multi-domain corpus")
    s.add_argument("--config", help="JSON corpus parameters")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_datagen)

    s = sub.add_parser("init-net", help="write a freshly initialized stylizer")
    s.add_argument("--config", help="JSON stylizer config")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--identity", action="store_true", help="force every predicted grid to the identity")
    s.set_defaults(func=cmd_init_net)

    s = sub.add_parser("stylize", help="restyle one PNG with a trained stylizer")
    s.add_argument("--content", required=True)
    s.add_argument("--style-id", type=int, required=True)
    s.add_argument("--net", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--dump-grid", help="also write the predicted bilateral grid (BGRD)")
    s.set_defaults(func=cmd_stylize)

    s = sub.add_parser("bench", help="slice+apply throughput against the reference")
    s.add_argument("--size", type=int, default=512)
    s.add_argument("--iters", type=int, default=100)
    s.add_argument("--ref-iters", type=int, default=2)
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("gradcheck", help="finite-difference check of every analytic gradient")
    s.add_argument("--scope", choices=("loss", "net", "all"), default="all")
    s.add_argument("--instances", type=int, default=20)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--corrupt", help=argparse.SUPPRESS)  # test hook: perturb one analytic gradient
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("train-cbst", help="overfit the toy stylizer")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--steps", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("-v", "--verbose", action="store_true")
    s.set_defaults(func=cmd_train_cbst)

    s = sub.add_parser("dg-run", help="leave-one-domain-out experiment grid")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--corpus", help="corpus directory written by datagen (generated inline if omitted)")
    s.add_argument("--sources", type=int, help="use only the first N source domains")
    s.add_argument("--seeds", type=int, nargs="+")
    s.add_argument("--steps", type=int)
    s.add_argument("--jobs", type=int)
    s.add_argument("--lambda-grid", action="store_true", help="add the lambda_ssmc sweep")
    s.add_argument("--stage-grid", action="store_true", help="add the mixup stage sweep")
    s.set_defaults(func=cmd_dg_run)

    s = sub.add_parser("feature-stats", help="cross-domain activation statistics of a trained net")
    s.add_argument("--net", required=True)
    s.add_argument("--corpus", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--probes", type=int, default=0, help="probe images per domain (0 = all)")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_feature_stats)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK
    try:
        return args.func(args)
    except UsageError as e:
        print(f"uwdg {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as e:
        print(f"uwdg {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
