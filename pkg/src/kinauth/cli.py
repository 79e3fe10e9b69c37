"""Command-line driver: ``kinauth <command> [--config PATH] [--seed N] [--force] [--out DIR]``.

Artifacts live under the output directory:

    stats.bin       normalization stats and channel std (preprocess)
    sequences/      per-session block files (preprocess)
    model.bin       trained extractor; loss.csv (train)
    gmm.bin         PCA, UBM, t-models, z-sequences (ubm); features.bin
    clients.bin     enrolled client means and z statistics (enroll)
    scores.csv      per-window scores (score)
    metrics.csv     EER / HTER summary; det_*.csv (eval)

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import backend as bk
from . import experiment as ex
from .cells import ClockworkConfig
from .config import ExperimentConfig, load_config
from .errors import DataError, KinauthError, NumericError
from .evaluation import (CONVENTION, det_sweep, eer, hter, invariance_cell, invariance_trace,
                         per_group_eer)
from .models import FAMILIES, ModelConfig, init_model, load_model, save_model
from .conv import ConvSpec
from .signal import NormalizationStats, resample
from .storage import atomic_write, read_container, write_container, write_sequence
from .synth import CorpusManifest, build_corpus
from .training import gradient_check

log = logging.getLogger("kinauth")

STATS_TAG = "kinauth-stats-v1"
FEATURES_TAG = "kinauth-features-v1"


def _csv(header, comment, rows):
    lines = [f"# {header} | {comment}", header]
    lines += [",".join(str(v) for v in row) for row in rows]
    return "\n".join(lines) + "\n"


def _require(path: Path, producer: str):
    if not path.exists():
        raise DataError(f"{path} not found; run `kinauth {producer}` first")
    return path


class Context:
    def __init__(self, args):
        self.cfg = load_config(args.config) if args.config else ExperimentConfig()
        if args.seed is not None:
            self.cfg.seed = args.seed
        self.force = args.force
        self.out = Path(args.out) if args.out else self.cfg.resolve(self.cfg.paths.out_dir)
        self.corpus_dir = self.cfg.resolve(self.cfg.paths.corpus_dir)
        self.args = args

    def manifest(self) -> CorpusManifest:
        path = self.corpus_dir / "manifest.txt"
        if not path.exists():
            raise DataError(f"no corpus at {self.corpus_dir}; run `kinauth synth` first "
                            f"or set [paths] corpus_dir")
        return CorpusManifest.read(path)

    def write(self, name, data):
        path = self.out / name
        atomic_write(path, data, force=self.force)
        log.info("wrote %s", path)
        return path

    def prepared(self) -> ex.PreparedCorpus:
        meta, a = read_container(_require(self.out / "stats.bin", "preprocess"), STATS_TAG)
        manifest = self.manifest()
        values = {}
        for e in manifest.entries:
            stream = manifest.load(e)
            if stream.rate_hz != self.cfg.pipeline.rate_hz:
                stream = resample(stream, self.cfg.pipeline.rate_hz)
            values[e.session_id] = stream.values
        return ex.PreparedCorpus(manifest, values, NormalizationStats(a["mean"], a["std"]),
                                 a["channel_std"])

    def features(self):
        meta, a = read_container(_require(self.out / "features.bin", "ubm"), FEATURES_TAG)
        return a


# -- commands -----------------------------------------------------------------------

def cmd_synth(ctx: Context):
    c = ctx.cfg.corpus
    out = Path(ctx.args.out) if ctx.args.out else ctx.corpus_dir
    manifest = build_corpus(c.n_train_users, c.n_val_users, c.n_test_users,
                            c.sessions_per_user, ctx.cfg.seed, out, c.duration_s,
                            c.recalibrated, ctx.cfg.backend.n_enroll, force=ctx.force)
    print(f"wrote {len(manifest.entries)} sessions and {out / 'manifest.txt'}")


def cmd_preprocess(ctx: Context):
    manifest = ctx.manifest()
    prepared = ex.prepare_corpus(manifest, ctx.cfg)
    arrays = {"mean": prepared.stats.mean, "std": prepared.stats.std,
              "channel_std": prepared.channel_std}
    meta = {"rate_hz": ctx.cfg.pipeline.rate_hz, "fitted_on": "train"}
    write_container(ctx.out / "stats.bin", STATS_TAG, meta, arrays, force=ctx.force)
    for sid, values in prepared.values.items():
        write_sequence(ctx.out / "sequences" / f"{sid}.seq",
                       ex.session_blocks(values, prepared.stats, ctx.cfg), force=ctx.force)
    print(f"normalization stats from {len(manifest.split('train'))} training sessions; "
          f"{len(prepared.values)} sequence files")


def cmd_train(ctx: Context):
    prepared = ctx.prepared()
    result, users = ex.train_model(prepared, ctx.cfg)
    save_model(ctx.out / "model.bin", result.model, force=ctx.force,
               extra={"users": ";".join(users), "seed": ctx.cfg.seed})
    ctx.write("loss.csv", result.curve_csv())
    print(f"trained {result.model.family} on {len(users)} users; "
          f"final loss {result.loss_curve[-1] if result.loss_curve else float('nan'):.5f}")
    if ctx.args.gradcheck:
        _gradcheck(ctx, [ctx.cfg.model.family])


def cmd_ubm(ctx: Context):
    prepared = ctx.prepared()
    model, _ = load_model(_require(ctx.out / "model.bin", "train"))
    feats = ex.learned_features(model, prepared, ctx.cfg)
    write_container(ctx.out / "features.bin", FEATURES_TAG, {}, feats, force=ctx.force)
    pca, proj, ubm, zt, _ = ex.fit_backend_models(feats, prepared.manifest, ctx.cfg)
    b = ctx.cfg.backend
    bk.save_gmm(ctx.out / "gmm.bin", ubm, pca, zt=zt, force=ctx.force,
                meta={"components": b.components, "pca_dim": pca.d})
    print(f"UBM with {ubm.M} components on {pca.d}-d features; "
          f"{len(zt.t_models)} t-models, {len(zt.z_sequences)} z-sequences")


def _projected(ctx):
    g = bk.load_gmm(_require(ctx.out / "gmm.bin", "ubm"))
    proj = {sid: g["pca"].project(Y) for sid, Y in ctx.features().items()}
    return g, proj


def cmd_enroll(ctx: Context):
    g, proj = _projected(ctx)
    manifest = ctx.manifest()
    clients = {}
    for split in ("val", "test"):
        clients.update(ex.enroll_split(split, manifest, proj, g["ubm"], g["zt"], ctx.cfg))
    bk.save_gmm(ctx.out / "clients.bin", g["ubm"], g["pca"], clients, g["zt"],
                meta=g["meta"], force=ctx.force)
    print(f"enrolled {len(clients)} clients")


def cmd_score(ctx: Context):
    g = bk.load_gmm(_require(ctx.out / "clients.bin", "enroll"))
    proj = {sid: g["pca"].project(Y) for sid, Y in ctx.features().items()}
    manifest = ctx.manifest()
    window = ctx.args.window
    rows = []
    for split in ("val", "test"):
        scores = ex.score_split(split, manifest, proj, g["ubm"], g["zt"], g["clients"],
                                ctx.cfg, window)
        for r in scores.records:
            rows.append((f"{split}/{r.session_id}/{r.client_id}/w{r.window}",
                         "genuine" if r.genuine else "impostor",
                         repr(r.raw), repr(r.z), repr(r.zt)))
    ctx.write("scores.csv", _csv("session_id,label,raw,z,zt",
                                 "session_id = split/session/client/window; "
                                 "scores are mean log-likelihood ratios, higher is more genuine",
                                 rows))
    print(f"{len(rows)} window scores")


def read_scores(path):
    rows = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line or line.startswith("#") or line.startswith("session_id,"):
            continue
        parts = line.split(",")
        if len(parts) != 5:
            raise DataError(f"{path}:{lineno}: expected 5 columns")
        split, session, client, window = parts[0].split("/")
        rows.append(dict(split=split, session=session, client=client,
                         window=int(window[1:]), genuine=parts[1] == "genuine",
                         raw=float(parts[2]), z=float(parts[3]), zt=float(parts[4])))
    return rows


def cmd_eval(ctx: Context):
    rows = read_scores(_require(ctx.out / "scores.csv", "score"))
    out = []
    for kind in ("raw", "zt"):
        by = {s: ([r[kind] for r in rows if r["split"] == s and r["genuine"]],
                  [r[kind] for r in rows if r["split"] == s and not r["genuine"]])
              for s in ("val", "test")}
        val_curve = det_sweep(*by["val"])
        val_eer, theta = eer(val_curve)
        test_curve = det_sweep(*by["test"])
        test_eer, _ = eer(test_curve)
        ctx.write(f"det_val_{kind}.csv", val_curve.to_csv())
        ctx.write(f"det_test_{kind}.csv", test_curve.to_csv())
        groups = [(r["client"], r[kind], r["genuine"]) for r in rows if r["split"] == "test"]
        out += [(kind, "val_eer", val_eer), (kind, "val_theta", theta),
                (kind, "test_eer", test_eer), (kind, "test_hter", hter(*by["test"], theta)),
                (kind, "test_per_client_eer", per_group_eer(groups)[0])]
    ctx.write("metrics.csv", _csv("score,metric,value",
                                  f"HTER on test at the validation EER threshold; {CONVENTION}",
                                  out))
    for kind, metric, value in out:
        print(f"{kind:>3} {metric:<20} {value:.4f}")


def cmd_invariance(ctx: Context):
    a = ctx.args
    cfg = ClockworkConfig.uniform(a.base, a.bands, a.units)
    if a.input:
        data = np.loadtxt(a.input, delimiter=",", comments="#", ndmin=2)
        seq = data[:, -1]
    else:
        seq = np.random.default_rng(ctx.cfg.seed).normal(size=a.steps)
    rows = []
    for family in ("rnn", "cwrnn", "dcwrnn"):
        w = invariance_cell(family, cfg, ctx.cfg.seed)
        rep = invariance_trace(family, seq, cfg, w)
        ctx.write(f"invariance_{family}.csv", rep.to_csv())
        rows.append((family, rep.n_runs, rep.transient, repr(rep.max_deviation)))
        print(f"{family:<7} runs={rep.n_runs} max deviation={rep.max_deviation:.3e}")
    ctx.write("invariance_summary.csv",
              _csv("family,runs,transient,max_deviation",
                   "max over runs of aligned hidden/output spread after the transient", rows))


def _gradcheck(ctx, families):
    rng = np.random.default_rng(ctx.cfg.seed)
    rows, worst = [], 0.0
    for family in families:
        cw = ClockworkConfig.uniform(2, 2, 2) if family in ("cwrnn", "dcwrnn") else None
        mc = ModelConfig(family, 3, 3, cw, ConvSpec.parse("2:3:2"), 3)
        model = init_model(mc, ctx.cfg.seed)
        seq = rng.normal(size=(3, 8, 3))
        rep = gradient_check(model, seq, int(rng.integers(3)))
        worst = max(worst, rep.worst)
        rows += [(family, g, f"{e:.6e}") for g, e in rep.max_rel_err.items()]
        print(f"{family:<7} max rel err {rep.worst:.3e} "
              f"({rep.kinks_skipped} pooling kinks skipped)")
    ctx.write("gradcheck.csv", _csv("family,group,max_rel_err",
                                    "fourth-order central differences, step 1e-3", rows))
    if worst >= 1e-4:
        raise NumericError(f"gradient check failed: max relative error {worst:.3e}")


def cmd_gradcheck(ctx: Context):
    _gradcheck(ctx, list(FAMILIES) if ctx.args.family == "all" else [ctx.args.family])


COMMANDS = {"synth": cmd_synth, "preprocess": cmd_preprocess, "train": cmd_train,
            "ubm": cmd_ubm, "enroll": cmd_enroll, "score": cmd_score, "eval": cmd_eval,
            "invariance": cmd_invariance, "gradcheck": cmd_gradcheck}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config file")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("--out", help="output directory (overrides [paths] out_dir)")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="kinauth", description="motion-based authentication experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name == "train":
            p.add_argument("--gradcheck", action="store_true",
                           help="also run a gradient check on a small probe model")
        elif name == "score":
            p.add_argument("--window", type=float, default=None, help="window length in s")
        elif name == "invariance":
            p.add_argument("--bands", type=int, default=8)
            p.add_argument("--base", type=int, default=2)
            p.add_argument("--units", type=int, default=1, help="units per band")
            p.add_argument("--steps", type=int, default=200)
            p.add_argument("--input", help="CSV whose last column is the input sequence")
        elif name == "gradcheck":
            p.add_argument("--family", default="all", choices=("all",) + FAMILIES)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        ctx = Context(args)
        COMMANDS[args.command](ctx)
    except FileExistsError as exc:
        print(f"error: {exc} (use --force to overwrite)", file=sys.stderr)
        return 1
    except KinauthError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
