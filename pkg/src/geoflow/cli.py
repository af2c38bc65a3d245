"""Command-line entry point: ``geoflow <command> ...``.

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import geometry as geo
from . import io as gio
from . import runtime as rt
from . import synth, uq
from .errors import ConfigError, DataError, GeoFlowError
from .net import VelocityNet, load_checkpoint
from .train import format_metrics, train

log = logging.getLogger("geoflow")


def _solver(args, cfg: gio.RunConfig) -> rt.SolverConfig:
    s = cfg.solver
    over = {"n_steps": args.steps, "n_probes": args.probes, "guidance_scale": args.guidance,
            "probe_kind": args.probe_kind, "seed": args.seed}
    return s.replace(**{k: v for k, v in over.items() if v is not None})


def _run_config(args) -> gio.RunConfig:
    cfg = gio.load_config(getattr(args, "config", None))
    if getattr(args, "euclidean", False):
        cfg = replace(cfg, geometry="euclidean")
    return cfg


def _load_model(args, cfg: gio.RunConfig) -> tuple[VelocityNet, dict, geo.SphereGeometry]:
    try:
        net, header = load_checkpoint(args.checkpoint)
    except OSError as exc:
        raise DataError(f"cannot read checkpoint: {exc}") from exc
    if header["geometry"] != cfg.geometry:
        raise ConfigError(f"checkpoint was trained with {header['geometry']} geometry but evaluation "
                          f"requests {cfg.geometry}; pass --euclidean consistently")
    return net, header, geo.geometry_by_name(cfg.geometry)


def _read(path, expect_dim=None, paired=None) -> gio.Embeddings:
    try:
        emb = gio.read_embeddings(path, expect_dim=expect_dim)
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if paired is not None and emb.paired != paired:
        raise DataError(f"{path}: expected a {'paired' if paired else 'single-stream'} file")
    return emb


def _manifest(args, cfg, command, extra_hash=None, checkpoint=None, inputs=None):
    blob = cfg.to_dict()
    if extra_hash:
        blob = {**blob, "extra": extra_hash}
    seed = args.seed if getattr(args, "seed", None) is not None else cfg.solver.seed
    return gio.RunManifest(config_hash=gio.config_hash(blob), seed=seed, command=command,
                           checkpoint=checkpoint, inputs=inputs or {})


def _emit(path, text_fn, manifest: gio.RunManifest):
    path = Path(path)
    mpath = path.with_name(path.name + ".manifest.json")
    gio.atomic_write_text(path, text_fn(manifest.header_comment(mpath)))
    manifest.outputs[path.stem] = str(path)
    manifest.write(mpath)


def cmd_synth_gen(args):
    mix = synth.independent_mixture(args.kappa) if args.mixture == "independent" else synth.default_mixture(args.kappa)
    rng = np.random.default_rng(args.seed)
    pairs, comp = mix.sample(args.n, rng)
    gio.write_embeddings(args.out, pairs[:, :3], pairs[:, 3:])
    side = {"mixture": mix.to_dict(), "kind": args.mixture, "seed": args.seed, "n": args.n,
            "components": comp.tolist()}
    gio.atomic_write_text(str(args.out) + ".json", json.dumps(side, indent=1) + "\n")
    return 0


def cmd_train(args):
    cfg = _run_config(args)
    tcfg = cfg.train
    if args.total_steps is not None:
        tcfg = replace(tcfg, total_steps=args.total_steps, warmup_steps=min(tcfg.warmup_steps, args.total_steps))
    if args.seed is not None:
        tcfg = replace(tcfg, seed=args.seed)
    cfg = replace(cfg, train=tcfg)
    data = _read(args.data, expect_dim=cfg.net.embed_dim, paired=True)
    val = _read(args.val_data, expect_dim=cfg.net.embed_dim, paired=True).pairs() if args.val_data else None
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = gio.RunManifest(cfg.hash(), tcfg.seed, "train", checkpoint=str(out / "model.ckpt"),
                               inputs={"data": str(args.data), "val_data": args.val_data})
    net = VelocityNet(cfg.net, seed=tcfg.seed)
    geometry = geo.geometry_by_name(cfg.geometry)
    result = train(net, torch.from_numpy(data.pairs()), tcfg, geometry, checkpoint_path=out / "model.ckpt",
                   metrics_path=None, val_data=None if val is None else torch.from_numpy(val))
    mpath = out / "manifest.json"
    gio.atomic_write_text(out / "metrics.csv", format_metrics(result.history, manifest.header_comment(mpath)))
    manifest.outputs = {"metrics": str(out / "metrics.csv"), "checkpoint": str(out / "model.ckpt")}
    manifest.write(mpath)
    print(f"best validation loss {result.best_val:.6g} at step {result.best_step}; "
          f"{result.steps_run} steps{' (early stop)' if result.stopped_early else ''}")
    return 0


def cmd_sample(args):
    cfg = _run_config(args)
    net, header, geometry = _load_model(args, cfg)
    solver = _solver(args, cfg)
    kind = geo.MaskKind.parse(args.mask)
    d = net.embed_dim
    rng = np.random.default_rng([solver.seed, rt.SAMPLE_SALT])
    if kind.is_conditional:
        if not args.conditioner:
            raise DataError("conditional masks need --conditioner")
        emb = _read(args.conditioner, expect_dim=d)
        cond = emb.images if (not emb.paired or not kind.transports_image) else emb.texts
        cond = torch.from_numpy(np.repeat(cond.astype(np.float64), args.n, axis=0))
        z = rt.sample(net, kind, cond, solver=solver, geometry=geometry, rng=rng,
                      base=geo.uniform_product(cond.shape[0], d, rng))
    else:
        z = rt.sample(net, kind, None, n_samples=args.n, solver=solver, geometry=geometry, rng=rng)
    z = z.numpy()
    gio.write_embeddings(args.out, z[:, :d], z[:, d:])
    manifest = _manifest(args, cfg, "sample", {"ckpt": header["config"], "mask": args.mask, "n": args.n},
                         args.checkpoint, {"conditioner": args.conditioner})
    manifest.outputs["samples"] = str(args.out)
    manifest.write(str(args.out) + ".manifest.json")
    return 0


def cmd_logp(args):
    cfg = _run_config(args)
    net, header, geometry = _load_model(args, cfg)
    solver = _solver(args, cfg).replace(guidance_scale=0.0)
    pairs = _read(args.data, expect_dim=net.embed_dim, paired=True).pairs()
    est = rt.log_density(net, pairs, geo.MaskKind.parse(args.mask), solver, geometry)
    manifest = _manifest(args, cfg, "logp", header["config"], args.checkpoint, {"data": str(args.data)})

    def text(comment):
        rows = [("id", "log_density", "divergence_integral", "base_log_density", "n_steps", "K", "seed")]
        rows += [(i, repr(float(est.log_density[i])), repr(float(est.divergence_integral[i])),
                  repr(est.base_log_density), solver.n_steps, solver.n_probes, solver.seed)
                 for i in range(len(pairs))]
        return _csv_text(rows, comment)

    _emit(args.out, text, manifest)
    return 0


def _csv_text(rows, comment=None) -> str:
    import io as _io
    buf = _io.StringIO()
    if comment:
        buf.write(f"# {comment}\n")
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


def cmd_decompose(args):
    cfg = _run_config(args)
    net, header, geometry = _load_model(args, cfg)
    solver = _solver(args, cfg)
    pairs = _read(args.data, expect_dim=net.embed_dim, paired=True).pairs()
    report = rt.decompose(net, pairs, solver, geometry)
    manifest = _manifest(args, cfg, "decompose", header["config"], args.checkpoint, {"data": str(args.data)})
    _emit(args.out, lambda c: rt.scores_csv(report, solver.replace(guidance_scale=0.0), header_comment=c), manifest)
    return 0


def _retrieval_inputs(args, d):
    """(queries, gallery, true index or None) from --data pairs or --queries/--gallery."""
    kind = geo.MaskKind.parse(args.direction)
    if args.data:
        emb = _read(args.data, expect_dim=d, paired=True)
        q, g = (emb.images, emb.texts) if kind == geo.MaskKind.IMAGE_TO_TEXT else (emb.texts, emb.images)
        return kind, q.astype(np.float64), g.astype(np.float64), np.arange(len(emb))
    if not (args.queries and args.gallery):
        raise DataError("pass --data, or both --queries and --gallery")
    q = _read(args.queries, expect_dim=d, paired=False).images.astype(np.float64)
    g = _read(args.gallery, expect_dim=d, paired=False).images.astype(np.float64)
    return kind, q, g, None


def cmd_entropy(args):
    cfg = _run_config(args)
    net, header, geometry = _load_model(args, cfg)
    solver = _solver(args, cfg)
    kind, q, g, truth = _retrieval_inputs(args, net.embed_dim)
    M = args.samples or cfg.retrieval.n_samples
    kappa = cfg.retrieval.kappa if args.kappa is None else args.kappa
    res = uq.retrieval_entropy_pipeline(net, q, g, kind, solver, M, kappa, geometry=geometry)
    ranks = uq.cosine_rank(q, g, truth) if truth is not None else None
    manifest = _manifest(args, cfg, "entropy", {"ckpt": header["config"], "M": M, "kappa": kappa},
                         args.checkpoint)
    _emit(args.out, lambda c: res.table_csv(ranks, header_comment=c), manifest)
    return 0


def _read_scores(path, column):
    try:
        lines = [ln for ln in Path(path).read_text().splitlines() if ln and not ln.startswith("#")]
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    rows = list(csv.DictReader(lines))
    if not rows or column not in rows[0]:
        raise DataError(f"{path}: missing column {column!r}")
    try:
        return [r["id"] for r in rows], np.array([float(r[column]) for r in rows])
    except (KeyError, ValueError) as exc:
        raise DataError(f"{path}: {exc}") from exc


def _file_digest(path):
    """Content hash of an input file, so manifests do not depend on where the file lives."""
    if path is None:
        return None
    try:
        return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc


def _correctness(args):
    ids, vals = _read_scores(args.correct or args.scores, args.correct_column)
    if args.correct_column == "rank_of_true_item":
        vals = vals == 1
    return dict(zip(ids, vals.astype(bool)))


def _scores_and_correct(args):
    ids, scores = _read_scores(args.scores, args.score_column)
    if args.negate:
        scores = -scores
    corr = _correctness(args)
    missing = [i for i in ids if i not in corr]
    if missing:
        raise DataError(f"no correctness for ids {missing[:5]}")
    return scores, np.array([corr[i] for i in ids])


def cmd_eval_calibration(args):
    scores, correct = _scores_and_correct(args)
    rep = uq.calibration_report(scores, correct, args.bins)
    out = Path(args.out_dir)
    manifest = gio.RunManifest(gio.config_hash({"scores": _file_digest(args.scores), "column": args.score_column,
                                                "correct": _file_digest(args.correct), "bins": args.bins}),
                               0, "eval-calibration",
                               inputs={"scores": str(args.scores)})
    _emit(out / "calibration_bins.csv", rep.table_csv, manifest)
    summary = {"spearman": rep.spearman, "r_squared": rep.r_squared, "degenerate": rep.degenerate,
               "n_bins": args.bins, "manifest": "calibration_bins.csv.manifest.json"}
    gio.atomic_write_text(out / "calibration_summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_eval_selective(args):
    scores, correct = _scores_and_correct(args)
    curve = uq.selective_curve(scores, correct)
    out = Path(args.out_dir)
    manifest = gio.RunManifest(gio.config_hash({"scores": _file_digest(args.scores), "column": args.score_column,
                                                "correct": _file_digest(args.correct)}), 0, "eval-selective", inputs={"scores": str(args.scores)})
    _emit(out / "selective_curve.csv", curve.table_csv, manifest)
    summary = {"ausac": curve.ausac, "trend_spearman": curve.trend_spearman(),
               "manifest": "selective_curve.csv.manifest.json"}
    gio.atomic_write_text(out / "selective_summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(json.dumps(summary, sort_keys=True))
    return 0


def _parse_values(text, cast):
    try:
        return [cast(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad --values: {exc}") from exc


def cmd_ablate(args):
    cfg = _run_config(args)
    base = _solver(args, cfg)
    rows = []
    if args.axis in ("steps", "probes"):
        net, header, geometry = _load_model(args, cfg)
        pairs = _read(args.data, expect_dim=net.embed_dim, paired=True).pairs()
        values = _parse_values(args.values or ("10,20,30,40,50" if args.axis == "steps" else "1,2,3,4,5"), int)
        correct = None
        if args.correct:
            corr = _correctness(args)
            correct = np.array([corr[str(i)] for i in range(len(pairs))])
        metric = "ausac_epistemic_sum" if correct is not None else "mean_joint_nll"
        rows.append(["repeat"] + [f"{args.axis}={v}" for v in values])
        table = np.empty((args.repeats, len(values)))
        for r in range(args.repeats):
            for j, v in enumerate(values):
                key = "n_steps" if args.axis == "steps" else "n_probes"
                solver = base.replace(**{key: v, "seed": base.seed + r})
                rep = rt.decompose(net, pairs, solver, geometry)
                table[r, j] = (uq.selective_curve(rep.epistemic_sum, correct).ausac if correct is not None
                               else float(rep.joint_nll.mean()))
            rows.append([r] + [repr(float(x)) for x in table[r]])
        rows.append(["mean"] + [repr(float(x)) for x in table.mean(0)])
        rows.append(["std"] + [repr(float(x)) for x in table.std(0)])
        extra = {"axis": args.axis, "values": values, "metric": metric, "repeats": args.repeats}
    elif args.axis == "lambda":
        net, header, geometry = _load_model(args, cfg)
        values = _parse_values(args.values or "0,1,2,3,4,5,7", float)
        kind, q, g, truth = _retrieval_inputs(args, net.embed_dim)
        if truth is None:
            raise DataError("the lambda ablation needs paired --data for ground truth")
        correct = uq.cosine_rank(q, g, truth) == 1
        rows.append(["lambda", "spearman", "r_squared"])
        for lam in values:
            res = uq.retrieval_entropy_pipeline(net, q, g, kind, base, cfg.retrieval.n_samples,
                                                cfg.retrieval.kappa, guidance_scale=lam, geometry=geometry)
            rep = uq.calibration_report(res.entropy, correct)
            rows.append([repr(lam), repr(rep.spearman), repr(rep.r_squared)])
        extra = {"axis": "lambda", "values": values}
    elif args.axis == "geometry":
        if not args.euclidean_checkpoint:
            raise ConfigError("the geometry ablation needs --euclidean-checkpoint")
        rows.append(["geometry", "spearman", "r_squared"])
        for name, path in (("riemannian", args.checkpoint), ("euclidean", args.euclidean_checkpoint)):
            sub = argparse.Namespace(**{**vars(args), "checkpoint": path})
            net, header, geometry = _load_model(sub, replace(cfg, geometry=name))
            kind, q, g, truth = _retrieval_inputs(args, net.embed_dim)
            if truth is None:
                raise DataError("the geometry ablation needs paired --data for ground truth")
            correct = uq.cosine_rank(q, g, truth) == 1
            res = uq.retrieval_entropy_pipeline(net, q, g, kind, base, cfg.retrieval.n_samples,
                                                cfg.retrieval.kappa, geometry=geometry)
            rep = uq.calibration_report(res.entropy, correct)
            rows.append([name, repr(rep.spearman), repr(rep.r_squared)])
        extra = {"axis": "geometry"}
    else:  # argparse restricts choices
        raise ConfigError(f"unknown axis {args.axis}")
    manifest = _manifest(args, cfg, f"ablate:{args.axis}", extra, args.checkpoint)
    _emit(args.out, lambda c: _csv_text(rows, c), manifest)
    return 0


def cmd_convert(args):
    n = gio.convert_text(args.src, args.dst, paired=args.paired, delimiter=args.delimiter)
    print(f"wrote {n} rows to {args.dst}")
    return 0


def _add_solver(p):
    p.add_argument("--config", help="YAML run config (defaults to the desk preset)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--euclidean", action="store_true", help="evaluate with Euclidean bindings")
    p.add_argument("--steps", type=int, help="Euler steps")
    p.add_argument("--probes", type=int, help="Hutchinson probes per step")
    p.add_argument("--lambda", dest="guidance", type=float, help="guidance scale")
    p.add_argument("--probe-kind", choices=rt.PROBE_KINDS)
    p.add_argument("--seed", type=int)


def _add_retrieval(p):
    p.add_argument("--data", help="paired file; row i's partner is the true gallery item")
    p.add_argument("--queries")
    p.add_argument("--gallery")
    p.add_argument("--direction", default="i2t", choices=["i2t", "t2i"])


def _add_eval(p):
    p.add_argument("--scores", required=True, help="score CSV (id column required)")
    p.add_argument("--score-column", required=True)
    p.add_argument("--negate", action="store_true", help="use the negated column as the uncertainty score")
    p.add_argument("--correct", help="CSV with correctness (defaults to the scores file)")
    p.add_argument("--correct-column", default="rank_of_true_item",
                   help="boolean column, or rank_of_true_item (correct when rank is 1)")
    p.add_argument("--out-dir", required=True)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="geoflow", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-gen", help="write oracle mixture samples")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=20000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mixture", choices=["default", "independent"], default="default")
    p.add_argument("--kappa", type=float, default=20.0)
    p.set_defaults(func=cmd_synth_gen)

    p = sub.add_parser("train", help="train a velocity field")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--val-data")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--euclidean", action="store_true")
    p.add_argument("--total-steps", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="draw samples from a trained field")
    _add_solver(p)
    p.add_argument("--mask", default="joint", choices=["joint", "i2t", "t2i"])
    p.add_argument("--conditioner", help="conditioning rows for i2t/t2i")
    p.add_argument("--n", type=int, default=100, help="samples (per conditioner row)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("logp", help="per-pair log-density CSV")
    _add_solver(p)
    p.add_argument("--data", required=True)
    p.add_argument("--mask", default="joint", choices=["joint", "i2t", "t2i"])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_logp)

    p = sub.add_parser("decompose", help="joint/conditional/marginal/PMI scores per pair")
    _add_solver(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_decompose)

    p = sub.add_parser("entropy", help="retrieval entropy and Fano bound per query")
    _add_solver(p)
    _add_retrieval(p)
    p.add_argument("--samples", type=int, help="posterior samples M")
    p.add_argument("--kappa", type=float)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_entropy)

    p = sub.add_parser("eval-calibration", help="equal-frequency calibration report")
    _add_eval(p)
    p.add_argument("--bins", type=int, default=10)
    p.set_defaults(func=cmd_eval_calibration)

    p = sub.add_parser("eval-selective", help="selective accuracy curve and AUSAC")
    _add_eval(p)
    p.set_defaults(func=cmd_eval_selective)

    p = sub.add_parser("ablate", help="sweep steps, probes, lambda or geometry")
    _add_solver(p)
    _add_retrieval(p)
    p.add_argument("--axis", required=True, choices=["steps", "probes", "lambda", "geometry"])
    p.add_argument("--values", help="comma-separated sweep values")
    p.add_argument("--repeats", type=int, default=10)
    p.add_argument("--correct", help="correctness CSV for AUSAC in steps/probes sweeps")
    p.add_argument("--correct-column", default="correct")
    p.add_argument("--euclidean-checkpoint")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("convert", help="text/CSV embedding dump to the binary format")
    p.add_argument("src")
    p.add_argument("dst")
    p.add_argument("--paired", action="store_true")
    p.add_argument("--delimiter")
    p.set_defaults(func=cmd_convert)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except GeoFlowError as exc:
        print(f"geoflow: error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
