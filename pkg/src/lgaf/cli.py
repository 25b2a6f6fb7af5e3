"""``lgaf`` command line: train, eval, analyze-norms, gradcheck, gen-data."""
from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np
from threadpoolctl import threadpool_limits

from lgaf.config import ConfigError, load_config
from lgaf.data import gen_synthetic_faces, load_image, load_labeled, read_manifest, read_pairs, write_image_set

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


def workers_from_env() -> int:
    raw = os.environ.get("LGAF_WORKERS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise SystemExit(f"LGAF_WORKERS must be a positive integer, got {raw!r}")
    if n < 1:
        raise SystemExit(f"LGAF_WORKERS must be a positive integer, got {raw!r}")
    return n


def _err(msg: str):
    print(f"lgaf: error: {msg}", file=sys.stderr)


def _write_json(path, obj):
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def _stats(x) -> dict | None:
    if x is None:
        return None
    x = np.asarray(x, dtype=np.float64)
    return {"mean": float(x.mean()), "std": float(x.std()), "min": float(x.min()), "max": float(x.max())}


# ---------------------------------------------------------------- commands


def cmd_train(args) -> int:
    from lgaf.model import assemble_model
    from lgaf.training import train

    if not os.path.exists(args.config):
        _err(f"config file not found: {args.config}")
        return EXIT_USAGE
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.fusion_mode is not None:
            cfg.fusion_mode = args.fusion_mode
        if args.out_dir is not None:
            cfg.out_dir = args.out_dir
        workers = workers_from_env()
        tcfg = cfg.train_config(workers)
    except (ConfigError, ValueError) as exc:
        _err(str(exc))
        return EXIT_USAGE
    if cfg.train_manifest:
        data = load_labeled(cfg.train_manifest)
    else:
        data = gen_synthetic_faces(cfg.synthetic_ids, cfg.synthetic_per_id, (cfg.image_height, cfg.image_width),
                                   seed=cfg.data_seed)
    os.makedirs(cfg.out_dir, exist_ok=True)
    with open(os.path.join(cfg.out_dir, "resolved_config.toml"), "w") as f:
        f.write(f"# LGAF_WORKERS = {workers}\n")
        f.write(cfg.dumps())
    model = assemble_model(cfg.model_config(data.n_classes), cfg.fusion_mode, seed=cfg.seed)

    def log(row):
        print(f"epoch {row['epoch']:3d}  loss {row['loss']:.4f}  acc {row['train_acc']:.3f}  lr {row['lr']:g}", flush=True)

    try:
        result = train(model, data.images, data.labels, tcfg, out_dir=cfg.out_dir, log=None if args.quiet else log,
                       checkpoint_extra={"run_config": cfg.to_dict(), "workers": workers, "dataset_seed": cfg.data_seed})
    except FloatingPointError as exc:
        _err(str(exc))
        return EXIT_FAIL
    print(f"checkpoint: {result.checkpoint}")
    print(f"metrics: {os.path.join(cfg.out_dir, 'metrics.csv')}")
    return EXIT_OK


def _load_paths(paths: list[str]) -> np.ndarray:
    return np.stack([load_image(p) for p in paths])


def cmd_eval(args) -> int:
    from lgaf.checkpoint import CheckpointError, restore_model
    from lgaf.evaluation import identify, verify
    from lgaf.training import embed_dataset

    try:
        model, manifest = restore_model(args.checkpoint)
    except (CheckpointError, OSError) as exc:
        _err(str(exc))
        return EXIT_FAIL
    report = {"fusion_mode": model.fusion_mode, "mode": args.mode, "checkpoint": os.path.abspath(args.checkpoint)}
    if args.mode == "verify":
        if not args.pairs:
            _err("--pairs is required for verify")
            return EXIT_USAGE
        triples = read_pairs(args.pairs)
        uniq = sorted({p for a, b, _ in triples for p in (a, b)})
        index = {p: i for i, p in enumerate(uniq)}
        emb = embed_dataset(model, _load_paths(uniq))
        pairs = [(index[a], index[b], s) for a, b, s in triples]
        try:
            acc, fold_accs, thresholds = verify(pairs, emb.kappa_unit, args.folds, return_folds=True)
        except ValueError as exc:
            _err(str(exc))
            return EXIT_FAIL
        report.update(accuracy=acc, fold_accuracies=fold_accs, thresholds=thresholds, n_pairs=len(pairs),
                      folds=args.folds)
    else:
        if not (args.gallery and args.probes):
            _err("--gallery and --probes are required for identify")
            return EXIT_USAGE
        g_paths, g_ids = read_manifest(args.gallery)
        p_paths, p_ids = read_manifest(args.probes)
        g_emb = embed_dataset(model, _load_paths(g_paths))
        p_emb = embed_dataset(model, _load_paths(p_paths))
        ks = [int(k) for k in args.ks.split(",")]
        try:
            rates = identify(g_emb.kappa_unit, g_ids, p_emb.kappa_unit, p_ids, ks)
        except ValueError as exc:
            _err(str(exc))
            return EXIT_FAIL
        report.update(rank_rates={f"rank{k}": v for k, v in rates.items()}, n_gallery=len(g_ids), n_probes=len(p_ids))
        emb = p_emb
    report["gamma_local"] = _stats(emb.gamma_local)
    report["gamma_global"] = _stats(emb.gamma_global)
    out_dir = args.out_dir or os.path.dirname(os.path.abspath(args.checkpoint))
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, f"eval_{args.mode}.json")
    _write_json(path, report)
    print(json.dumps({k: v for k, v in report.items() if k not in ("fold_accuracies", "thresholds")}, indent=2,
                     sort_keys=True))
    print(f"report: {path}")
    return EXIT_OK


def cmd_analyze_norms(args) -> int:
    from lgaf.checkpoint import CheckpointError, restore_model
    from lgaf.degradation import DegradationSpec, norm_correlation
    from lgaf.experiments import probe_images

    try:
        model, _ = restore_model(args.checkpoint)
        levels = tuple(float(v) if args.kind != "blur" else int(v) for v in args.levels.split(",")) if args.levels else ()
        spec = DegradationSpec(args.kind, levels)
        probes = load_labeled(args.probes).images if args.probes else probe_images(args.n_probes)
        report = norm_correlation(model, probes, spec, seed=args.seed)
    except (CheckpointError, OSError, ValueError) as exc:
        _err(str(exc))
        return EXIT_FAIL
    out_dir = args.out_dir or os.path.dirname(os.path.abspath(args.checkpoint))
    csv_path, json_path = report.write(out_dir, stem=f"norms_{args.kind}")
    print(f"{args.kind}: r_local={report.r_local:+.4f} r_global={report.r_global:+.4f} n={sum(report.counts)}"
          if report.r_local is not None and report.r_global is not None else f"{args.kind}: see {json_path}")
    print(f"csv: {csv_path}\njson: {json_path}")
    return EXIT_OK


def cmd_gradcheck(args, cases=None) -> int:
    from lgaf.gradcheck import TOLERANCE, run_suite

    seeds = tuple(range(args.seeds))
    results = run_suite(cases, seeds=seeds)
    width = max(len(r.name) for r in results)
    for r in results:
        status = "ok" if r.passed else "FAIL"
        print(f"{r.name:<{width}}  max_rel_error {r.max_rel_error:.3e}  {status}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"gradient check failed (tolerance {TOLERANCE:g}): {', '.join(failed)}")
        return EXIT_FAIL
    print(f"all {len(results)} gradient checks passed (tolerance {TOLERANCE:g})")
    return EXIT_OK


def cmd_gen_data(args) -> int:
    from lgaf.experiments import make_pairs
    from lgaf.rng import RngStream

    data = gen_synthetic_faces(args.ids, args.per_id, (args.size, args.size), seed=args.seed, id_offset=args.id_offset)
    manifest = write_image_set(data, args.out_dir)
    print(f"manifest: {manifest} ({len(data)} images, {args.ids} identities)")
    if args.pairs:
        pairs = make_pairs(data.labels, args.pairs, RngStream(args.seed, name="gen-data/pairs"))
        path = os.path.join(args.out_dir, "pairs.csv")
        with open(path, "w") as f:
            f.write("pathA,pathB,same\n")
            for a, b, same in pairs:
                f.write(f"img_{a:05d}.npy,img_{b:05d}.npy,{int(same)}\n")
        print(f"pairs: {path} ({len(pairs)} pairs)")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    from lgaf.degradation import KINDS
    from lgaf.model import FUSION_MODES

    p = argparse.ArgumentParser(prog="lgaf", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model from a TOML config")
    t.add_argument("--config", required=True)
    t.add_argument("--out-dir")
    t.add_argument("--seed", type=int)
    t.add_argument("--fusion-mode", choices=FUSION_MODES)
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="verification or identification report for a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--mode", choices=("verify", "identify"), required=True)
    e.add_argument("--pairs", help="CSV pathA,pathB,same (verify)")
    e.add_argument("--gallery", help="CSV path,identity (identify)")
    e.add_argument("--probes", help="CSV path,identity (identify)")
    e.add_argument("--folds", type=int, default=10)
    e.add_argument("--ks", default="1,3,5")
    e.add_argument("--out-dir")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("analyze-norms", help="feature-norm correlation along a degradation ladder")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--kind", choices=KINDS, required=True)
    a.add_argument("--levels", help="comma-separated ascending levels (default per kind)")
    a.add_argument("--probes", help="CSV path,identity of clean probe images (default: synthetic)")
    a.add_argument("--n-probes", type=int, default=40)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--out-dir")
    a.set_defaults(func=cmd_analyze_norms)

    g = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    g.add_argument("--seeds", type=int, default=5)
    g.set_defaults(func=cmd_gradcheck)

    d = sub.add_parser("gen-data", help="write a synthetic identity image set")
    d.add_argument("--out-dir", required=True)
    d.add_argument("--ids", type=int, default=20)
    d.add_argument("--per-id", type=int, default=50)
    d.add_argument("--size", type=int, default=32)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--id-offset", type=int, default=0)
    d.add_argument("--pairs", type=int, default=0, help="also write this many balanced verification pairs")
    d.set_defaults(func=cmd_gen_data)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    with threadpool_limits(limits=workers_from_env()):
        return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
