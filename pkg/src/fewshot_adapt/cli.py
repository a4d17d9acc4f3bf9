"""Command-line interface: generate, pipeline, ablate, check, report.

Every stage of ``pipeline`` writes its artifact under ``--out`` and records
a key built from the content hashes of its inputs in ``stages.json``.  A
stage is skipped when its outputs exist and the key still matches, unless
``--force`` is given.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import io
from .checks import run_all
from .config import ConfigError, config_from_dict, config_hash, config_to_dict, load_config
from .correspondence import build_point_cloud
from .evaluation import LOSS_SETS, RecallThresholds, format_csv, format_table, method_name
from .feature_model import pretrain_source_head
from .pipeline import (SourceModel, TargetData, build_vocab, domain_key, evaluate_head, mine_training_views,
                       query_views, source_views, split_indices, target_domain, train_arm)
from .synthworld import generate_scene
from .trainer import calibrate_weights

log = logging.getLogger("fewshot_adapt")

STEP_COLUMNS_FIXED = ("epoch", "step")
EPOCH_COLUMNS = ("epoch", "term", "raw", "weighted")


class StageError(RuntimeError):
    def __init__(self, stage, cause):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage


def _key(*parts) -> str:
    h = hashlib.sha256()
    for p in parts:
        h.update(json.dumps(p, sort_keys=True, default=str).encode())
        h.update(b"\0")
    return h.hexdigest()


class Stages:
    """Skip-or-run bookkeeping for one output directory."""

    def __init__(self, out: Path, force: bool):
        self.out = out
        self.force = force
        self.path = out / "stages.json"
        self.keys = json.loads(self.path.read_text()) if self.path.exists() else {}

    def run(self, name, outputs, key, fn):
        outputs = [Path(o) for o in outputs]
        if not self.force and self.keys.get(name) == key and all(o.exists() for o in outputs):
            log.info("[skip] %s", name)
            return False
        log.info("[run]  %s", name)
        t0 = time.perf_counter()
        try:
            fn()
        except (ValueError, RuntimeError, ArithmeticError, OSError) as exc:
            raise StageError(name, exc) from exc
        log.info("       %s done in %.1fs", name, time.perf_counter() - t0)
        self.keys[name] = key
        self.out.mkdir(parents=True, exist_ok=True)
        self.path.write_text(json.dumps(self.keys, indent=1, sort_keys=True) + "\n")
        return True


# ---------------------------------------------------------------------------
# configuration


def _config(args):
    seed = getattr(args, "seed", None)
    if args.config:
        cfg = load_config(args.config, seed)
    else:
        cfg = config_from_dict({"seed": seed})
    grid = getattr(args, "gamma_grid", None)
    if grid:
        try:
            values = tuple(float(v) for v in grid.split(",") if v.strip())
        except ValueError as exc:
            raise ConfigError(f"--gamma-grid: {exc}") from exc
        if not values or any(g < 0 for g in values):
            raise ConfigError("--gamma-grid needs one or more non-negative numbers")
        cfg.gamma_grid = values
    return cfg


def _arms(args):
    if getattr(args, "ablate", False):
        return list(LOSS_SETS)
    if args.loss_set:
        return [args.loss_set]
    return ["corres", "all"]


# ---------------------------------------------------------------------------
# generate


def _write_scene(cfg, path):
    scene = generate_scene(cfg.scene)
    scene.domains = {domain_key(g): target_domain(cfg, g) for g in cfg.gamma_grid}
    tr, va, te = split_indices(cfg)
    io.save_scene(path, scene, {"train": tr, "val": va, "test": te}, {"config": config_to_dict(cfg)})
    return scene


def cmd_generate(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    stages = Stages(out, args.force)
    path = out / "scene.json"
    stages.run("generate", [path], _key("generate", config_hash(cfg)), lambda: _write_scene(cfg, path))
    scene, splits, _ = io.load_scene(path)
    print(f"scene: {path}")
    print(f"  seed {scene.seed}, {len(scene.landmarks)} landmarks, {len(scene.reference_poses)} reference "
          f"and {len(scene.query_poses)} query poses")
    print(f"  domains: {', '.join(sorted(scene.domains))}")
    print("  splits: " + ", ".join(f"{k} {len(v)}" for k, v in splits.items()))
    return 0


# ---------------------------------------------------------------------------
# pipeline


def _pipeline(cfg, out: Path, arms, force: bool):
    stages = Stages(out, force)
    scene_path = out / "scene.json"
    stages.run("generate", [scene_path], _key("generate", config_hash(cfg)), lambda: _write_scene(cfg, scene_path))
    scene, splits, _ = io.load_scene(scene_path)
    scene_h = io.file_hash(scene_path)

    head_path = out / "source_head.txt"
    cloud_path = out / "point_cloud.json"
    vocab_path = out / "vocabulary.txt"
    src, refs, heldout = source_views(cfg, scene)

    def pretrain():
        io.save_head(head_path, pretrain_source_head(refs, cfg.pretrain, val_views=heldout))

    stages.run("pretrain", [head_path], _key("pretrain", scene_h, config_to_dict(cfg.pretrain),
                                             config_to_dict(cfg.domain)), pretrain)
    head = io.load_head(head_path)
    head_h = io.file_hash(head_path)

    stages.run("cloud", [cloud_path], _key("cloud", scene_h, head_h, config_to_dict(cfg.domain)),
               lambda: io.save_cloud(cloud_path, build_point_cloud(scene, head, refs)))
    stages.run("vocabulary", [vocab_path], _key("vocabulary", scene_h, head_h, cfg.vocab_k, cfg.seed),
               lambda: io.save_vocabulary(vocab_path, build_vocab(cfg, head, refs)))
    cloud, vocab = io.load_cloud(cloud_path), io.load_vocabulary(vocab_path)
    model = SourceModel(scene, src, refs, head, cloud, vocab)
    source_h = _key(head_h, io.file_hash(cloud_path), io.file_hash(vocab_path))
    ref_hashes = (head.content_hash(), cloud.content_hash())

    reports = []
    for gamma in cfg.gamma_grid:
        reports.extend(_pipeline_gamma(cfg, out, stages, model, scene_h, source_h, splits, gamma, arms))

    # the fixed-reference contract: nothing above may touch the source head or cloud
    if (model.head.content_hash(), model.cloud.content_hash()) != ref_hashes:
        raise StageError("report", "source head or point cloud changed during the run")
    _write_report(out, reports, RecallThresholds(cfg.thresholds))
    return reports


def _pipeline_gamma(cfg, out, stages, model, scene_h, source_h, splits, gamma, arms):
    gdir = out / f"gamma-{gamma:.2f}"
    key = domain_key(gamma)
    domain = model.scene.domains.get(key)
    if domain is None:
        raise StageError("correspondences", f"scene file has no domain {key!r}; regenerate with this gamma grid")
    tr, va, te = (splits[k] for k in ("train", "val", "test"))
    train_views = query_views(model.scene, domain, tr)
    data = TargetData(gamma, domain, [f for f, _ in train_views], [p for _, p in train_views],
                      query_views(model.scene, domain, va), query_views(model.scene, domain, te))
    feats = {int(i): f for i, (f, _) in zip(tr, train_views)}

    corr_dir = gdir / "correspondences"
    index_path = corr_dir / "index.json"

    def correspondences():
        training = mine_training_views(cfg, model, train_views, tr)
        corr_dir.mkdir(parents=True, exist_ok=True)
        for old in corr_dir.glob("view-*.json"):
            old.unlink()
        for cset, _ in training:
            io.save_correspondences(corr_dir / f"view-{cset.view_id:03d}.json", cset)
        index_path.write_text(json.dumps({"train_views": [int(i) for i in tr],
                                          "accepted": [int(c.view_id) for c, _ in training]}, indent=1) + "\n")

    stages.run(f"correspondences@{gamma:.2f}", [index_path],
               _key("corr", scene_h, source_h, config_to_dict(cfg.match), cfg.use_gt_refinement, gamma),
               correspondences)
    accepted = json.loads(index_path.read_text())["accepted"]
    data.training = [(io.load_correspondences(corr_dir / f"view-{v:03d}.json"), feats[v]) for v in accepted]
    corr_h = _key([io.file_hash(corr_dir / f"view-{v:03d}.json") for v in accepted])
    log.info("gamma %.2f: %d/%d training views pass the inlier gate", gamma, len(accepted), len(tr))

    weights_path = gdir / "loss_weights.json"

    def calibrate():
        if len(data.training) < 2:
            raise RuntimeError(f"{len(data.training)} of {len(tr)} training views pass the inlier gate; "
                               "calibration needs two")
        io.save_weights(weights_path, calibrate_weights(data.training, model.head, model.cloud, cfg.train))

    stages.run(f"calibrate@{gamma:.2f}", [weights_path],
               _key("calibrate", corr_h, source_h, config_to_dict(cfg.train)), calibrate)
    data.weights = io.load_weights(weights_path)
    weights_h = io.file_hash(weights_path)

    reports = []
    frozen_path = gdir / "frozen" / "report.json"
    stages.run(f"evaluate@{gamma:.2f}/frozen", [frozen_path],
               _key("eval", scene_h, source_h, config_to_dict(cfg.match), list(cfg.thresholds), gamma),
               lambda: io.save_reports(frozen_path, [evaluate_head(cfg, model, data, model.head, "frozen")]))
    reports.extend(io.load_reports(frozen_path))

    for arm in arms:
        terms = LOSS_SETS[arm]
        adir = gdir / arm
        files = [adir / n for n in ("head.txt", "checkpoint.json", "train_log.csv", "epoch_log.csv")]

        def fit(terms=terms, adir=adir, files=files):
            for f in files:
                f.unlink(missing_ok=True)
            res = train_arm(cfg, model, data, terms)
            io.save_head(files[0], res.head)
            io.save_checkpoint(files[1], res.state.head, res.state.adam, res.state.loss_history,
                               {"best_epoch": res.best_epoch, "terms": list(terms),
                                "validation": [[e, list(s)] for e, s in res.validation]})
            io.append_rows(files[2], res.step_log, STEP_COLUMNS_FIXED + tuple(terms) + ("total", "grad_norm"))
            io.append_rows(files[3], res.epoch_log, EPOCH_COLUMNS)

        stages.run(f"train@{gamma:.2f}/{arm}", files,
                   _key("train", corr_h, weights_h, source_h, config_to_dict(cfg.train), list(terms), gamma), fit)
        trained = io.load_head(files[0])
        rpath = adir / "report.json"
        stages.run(f"evaluate@{gamma:.2f}/{arm}", [rpath],
                   _key("eval", scene_h, source_h, io.file_hash(files[0]), config_to_dict(cfg.match),
                        list(cfg.thresholds), gamma),
                   lambda trained=trained, terms=terms, rpath=rpath: io.save_reports(
                       rpath, [evaluate_head(cfg, model, data, trained, method_name(terms))]))
        reports.extend(io.load_reports(rpath))
    return reports


def _write_report(out: Path, reports, thresholds):
    io.save_reports(out / "reports.json", reports)
    (out / "report.txt").write_text(format_table(reports, thresholds))
    (out / "report.csv").write_text(format_csv(reports))


def cmd_pipeline(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    reports = _pipeline(cfg, out, _arms(args), args.force)
    sys.stdout.write(format_table(reports, RecallThresholds(cfg.thresholds)))
    print(f"report written to {out / 'report.txt'} and {out / 'report.csv'}")
    return 0


def cmd_ablate(args) -> int:
    args.ablate = True
    return cmd_pipeline(args)


# ---------------------------------------------------------------------------
# check and report


def cmd_check(args) -> int:
    perturb = {}
    for item in args.perturb or []:
        term, _, value = item.partition("=")
        perturb[term] = float(value or 1e-3)
    results = run_all(args.instances, args.seed or 0, perturb)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    if failed:
        print("failed: " + ", ".join(failed))
    return 1 if failed else 0


def aggregate_reports(runs):
    """Mean recall per (method, gamma) over several runs, in first-seen order."""
    from .evaluation import RecallReport
    groups = {}
    for reports in runs:
        for r in reports:
            groups.setdefault((r.label, r.gamma), []).append(r)
    return [RecallReport(tuple(np.mean([r.recall for r in rs], axis=0).tolist()), [],
                         float(np.mean([r.acceptance_rate for r in rs])), label, gamma, rs[0].thresholds)
            for (label, gamma), rs in groups.items()]


def cmd_report(args) -> int:
    runs = []
    for d in args.out:
        path = Path(d) / "reports.json"
        if not path.exists():
            raise FileNotFoundError(f"{path} not found; run the pipeline first")
        runs.append(io.load_reports(path))
    reports = runs[0] if len(runs) == 1 else aggregate_reports(runs)
    if len(runs) > 1:
        print(f"mean over {len(runs)} runs")
    sys.stdout.write(format_csv(reports) if args.csv else format_table(reports, reports[0].thresholds))
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fewshot-adapt",
                                description="Few-shot adaptation of local descriptors on a synthetic world.")
    p.add_argument("-v", "--verbose", action="store_true", help="log stage progress")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON experiment config")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--gamma-grid", help="comma-separated domain severities, e.g. 0.3,0.6")
        sp.add_argument("--force", action="store_true", help="rerun stages whose outputs exist")

    g = sub.add_parser("generate", help="write the scene file and query splits")
    common(g)
    g.set_defaults(func=cmd_generate)
    for name, fn, text in (("pipeline", cmd_pipeline, "run every stage and write the report"),
                           ("ablate", cmd_ablate, "pipeline over all six loss combinations")):
        sp = sub.add_parser(name, help=text)
        common(sp)
        sp.add_argument("--loss-set", choices=list(LOSS_SETS), help="train a single arm")
        if name == "pipeline":
            sp.add_argument("--ablate", action="store_true", help="train all six loss combinations")
        sp.set_defaults(func=fn)
    c = sub.add_parser("check", help="gradient and invariant checks")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--instances", type=int, default=100)
    c.add_argument("--perturb", action="append", metavar="TERM[=EPS]",
                   help="test hook: add EPS (default 1e-3) to the analytic gradient of TERM")
    c.set_defaults(func=cmd_check)
    r = sub.add_parser("report", help="print the report of one or more pipeline runs")
    r.add_argument("--out", action="append", required=True, help="run directory (repeat to average runs)")
    r.add_argument("--csv", action="store_true", help="print CSV instead of the aligned table")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (io.FormatError, FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
