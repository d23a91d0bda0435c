"""Command suite: ``sarutil <command> [--config PATH] [--set KEY=VALUE] ...``.

Stages share one output root (``--out``, else ``$XFAKE_OUT``, else
``./xfake-out``):

    data/      PNGs, real.json, sim.json
    models/    evaluator and IntroVAE checkpoints, training logs
    evaluate/  criteria vectors
    explain/   counterfactual bundles per evaluator variant
    reports/   experiment JSON/CSV and their index
    config.json, ledger.jsonl
"""

import argparse
import hashlib
import json
import os
import sys
import time
import traceback
from pathlib import Path

import torch

from .config import IOConfig, RunConfig, load_config
from .errors import InvalidArgument

COMMANDS = ("synth-data", "train-eva", "train-vae", "evaluate", "explain", "experiment-gap",
            "experiment-retrain", "report")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{message}\n{self.format_usage()}")


def build_parser():
    p = _Parser(prog="sarutil", description="synthetic SAR chip utility evaluation and counterfactuals")
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="JSON config file")
        s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted-key override, repeatable (e.g. evaluator.T=50)")
        s.add_argument("--seed", type=int, help="global seed")
        s.add_argument("--out", help="output root")
        s.add_argument("--ids", help="comma-separated chip ids (evaluate/explain)")
    return p


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Run:
    """Per-command bookkeeping: inputs read, outputs written."""

    def __init__(self, cfg, command, ids):
        self.cfg = cfg
        self.command = command
        self.ids = ids
        self.root = cfg.out_root()
        self.inputs = []
        self.outputs = []

    def path(self, *parts):
        return self.root.joinpath(*parts)

    def need(self, path, what):
        path = Path(path)
        if not path.is_file():
            raise InvalidArgument(f"{what} not found: {path}")
        self.inputs.append(path)
        return path

    def wrote(self, *paths):
        self.outputs.extend(Path(p) for p in paths)


def _append_ledger(root, record):
    root.mkdir(parents=True, exist_ok=True)
    line = (json.dumps(record, sort_keys=True) + "\n").encode()
    fd = os.open(root / "ledger.jsonl", os.O_WRONLY | os.O_APPEND | os.O_CREAT, 0o644)
    try:
        os.write(fd, line)
        os.fsync(fd)
    finally:
        os.close(fd)


class _Lock:
    def __init__(self, root):
        self.path = Path(root) / ".lock"

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_WRONLY | os.O_CREAT | os.O_EXCL)
        except FileExistsError:
            raise InvalidArgument(f"output root is locked by another command ({self.path})") from None
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)


# ---------------------------------------------------------------------------
# stages


def _manifests(run):
    from .data import load_manifest

    real = load_manifest(run.need(run.path("data", "real.json"), "real manifest"))
    sim = load_manifest(run.need(run.path("data", "sim.json"), "simulated manifest"))
    return real, sim


def _sets(run, real, sim):
    from .imageset import ImageSet
    from .pipeline import preprocess_config

    pp = preprocess_config(run.cfg.data)
    return {
        "train": ImageSet.from_manifest(real, "train", pp),
        "val": ImageSet.from_manifest(real, "val", pp),
        "test": ImageSet.from_manifest(real, "test", pp),
        "sim": ImageSet.from_manifest(sim, None, pp),
    }


def _eva_path(run, variant=None):
    return run.path("models", f"eva-{variant or run.cfg.evaluator.variant}.pt")


def _vae_path(run):
    return run.path("models", "plain-vae.pt" if run.cfg.introvae.plain_vae else "introvae.pt")


def _load_eva(run, variant=None):
    from .evaluator import load_evaluator

    path = _eva_path(run, variant)
    if not path.is_file():
        raise InvalidArgument(f"evaluator checkpoint not found: {path} (run train-eva first)")
    run.need(path, "evaluator checkpoint")
    return load_evaluator(path)


def _load_vae(run):
    from .introvae import load_introvae

    path = _vae_path(run)
    if not path.is_file():
        raise InvalidArgument(f"IntroVAE checkpoint not found: {path} (run train-vae first)")
    run.need(path, "IntroVAE checkpoint")
    return load_introvae(path)


def _select(images, ids):
    if not ids:
        return images
    missing = [i for i in ids if i not in set(images.ids)]
    if missing:
        raise InvalidArgument(f"unknown ids: {', '.join(missing)}")
    return images.select_ids(ids)


def cmd_synth_data(run):
    from .pipeline import generate, write_dataset

    data = generate(run.cfg)
    write_dataset(data, run.cfg.data, run.path("data"))
    run.wrote(run.path("data", "real.json"), run.path("data", "sim.json"))
    return {"real": len(data.train) + len(data.val) + len(data.test), "sim": len(data.sim)}


def cmd_train_eva(run):
    from .evaluator import save_evaluator, write_log
    from .pipeline import train_evaluator_variant

    real, sim = _manifests(run)
    sets = _sets(run, real, sim)
    variant = run.cfg.evaluator.variant
    model = train_evaluator_variant(run.cfg, sets, variant, class_names=list(real.class_names))
    path = _eva_path(run, variant)
    save_evaluator(model, path)
    log = run.path("models", f"eva-{variant}-log.csv")
    write_log(model.history, log)
    run.wrote(path, path.with_suffix(".json"), log)
    return model.history[-1]


def cmd_train_vae(run):
    from .introvae import reconstruction_mse, save_introvae
    from .pipeline import train_vae

    real, sim = _manifests(run)
    sets = _sets(run, real, sim)
    name = _vae_path(run).stem
    model = train_vae(run.cfg, sets, plain=run.cfg.introvae.plain_vae, out_dir=run.path("models", name))
    save_introvae(model, _vae_path(run))
    run.wrote(_vae_path(run), _vae_path(run).with_suffix(".json"),
              run.path("models", name, "introvae_log.csv"))
    return {"recon_mse_train": reconstruction_mse(model, sets["train"])}


def cmd_evaluate(run):
    from .evaluator import predict_criteria_batch

    model = _load_eva(run)
    real, sim = _manifests(run)
    sets = _sets(run, real, sim)
    images = _select(sets["sim"], run.ids)
    crit = predict_criteria_batch(model, images.x, T=run.cfg.evaluator.T, rng=run.cfg.seed)
    rows = [{"id": i, **c.to_json()} for i, c in zip(images.ids, crit)]
    out = run.path("evaluate", f"criteria-{model.variant}.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps({"variant": model.variant, "criteria": rows}, indent=1) + "\n")
    run.wrote(out)
    return {"n": len(rows), "mean_total_u": sum(r["total_u"] for r in rows) / max(len(rows), 1)}


def cmd_explain(run):
    from .counterfactual import explain_set
    from .pipeline import corrupted_subset

    model = _load_eva(run)
    vae = _load_vae(run)
    real, sim = _manifests(run)
    sets = _sets(run, real, sim)
    images = _select(sets["sim"], run.ids) if run.ids else corrupted_subset(sets["sim"])
    out_dir = run.path("explain", model.variant)
    results = explain_set(images, model, vae, run.cfg.counterfactual, out_dir)
    run.wrote(out_dir / "index.json")
    dropped = sum(r.m_after.total_u < r.m_before.total_u for r in results)
    return {"bundles": len(results), "uncertainty_dropped": dropped}


def cmd_experiment_gap(run):
    from .harness import utility_gap_experiment, write_utility_report
    from .pipeline import classifier_config

    h = run.cfg.harness
    real, sim = _manifests(run)
    sets = _sets(run, real, sim)
    context = {"T": h.score_T, "seed": run.cfg.seed}
    if h.scorer.startswith("eva_"):
        variant = {"eva_bbb_total_u": "bbb", "eva_mcd_total_u": "mcd"}.get(h.scorer)
        context["evaluator"] = _load_eva(run, variant)
    if h.scorer in ("psnr", "ssim"):
        raise InvalidArgument(f"harness.scorer {h.scorer!r} needs paired references, which the fixture lacks")
    report = utility_gap_experiment(sets["sim"], sets["test"], h.scorer, classifier_config(run.cfg),
                                    h.seeds, context, per_class=h.per_class,
                                    n_classes=run.cfg.data.n_classes)
    run.wrote(*write_utility_report(report, run.path("reports")))
    return {"gap": report.gap, "gap_std": report.gap_std}


def cmd_experiment_retrain(run):
    from .harness import before_after_experiment, write_retrain_report
    from .pipeline import classifier_config, corrupted_subset

    real, sim = _manifests(run)
    sets = _sets(run, real, sim)
    variant = run.cfg.evaluator.variant
    index = run.need(run.path("explain", variant, "index.json"), "counterfactual index (run explain first)")
    report = before_after_experiment(corrupted_subset(sets["sim"]), index, sets["train"], sets["test"],
                                     classifier_config(run.cfg), run.cfg.harness.seeds,
                                     class_names=list(real.class_names))
    run.wrote(*write_retrain_report(report, run.path("reports"), metric=f"cf_{variant}"))
    return {row: report.overall(row)[0] for row in ("upper_bound", "before", "after")}


def cmd_report(run):
    idx = run.need(run.path("reports", "index.json"), "report index (run an experiment first)")
    names = json.loads(idx.read_text())["runs"]
    summary = {}
    for n in names:
        if not n.endswith("-all.json"):
            continue
        doc = json.loads(run.path("reports", n).read_text())
        if doc["experiment"] == "gap":
            summary[n] = {"gap": doc["gap"], "gap_std": doc["gap_std"]}
        else:
            summary[n] = {row: v["overall_mean"] for row, v in doc["summary"].items()}
    out = run.path("reports", "summary.json")
    out.write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    run.wrote(out)
    for name, vals in summary.items():
        print(name, " ".join(f"{k}={v:.4f}" for k, v in vals.items()))
    return {"reports": len(summary)}


HANDLERS = {
    "synth-data": cmd_synth_data,
    "train-eva": cmd_train_eva,
    "train-vae": cmd_train_vae,
    "evaluate": cmd_evaluate,
    "explain": cmd_explain,
    "experiment-gap": cmd_experiment_gap,
    "experiment-retrain": cmd_experiment_retrain,
    "report": cmd_report,
}


def run_command(argv):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    if args.command is None:
        print(parser.format_help(), file=sys.stderr)
        return 1
    try:
        cfg = load_config(args.config, args.set, args.seed, args.out)
    except InvalidArgument as exc:
        print(f"error: {exc}", file=sys.stderr)
        root = RunConfig(io=IOConfig(out=args.out or "")).out_root()
        _append_ledger(root, {"command": args.command, "argv": list(argv), "config_hash": None,
                              "inputs": {}, "outputs": [], "wall_time_s": 0.0, "exit_status": 1,
                              "error": str(exc)})
        return 1
    torch.set_num_threads(1)
    ids = [i for i in (args.ids or "").split(",") if i]
    run = Run(cfg, args.command, ids)
    root = run.root
    t0 = time.perf_counter()
    status, info, diag = 0, None, None
    try:
        with _Lock(root):
            (root / "config.json").write_text(json.dumps(cfg.to_json(), indent=1, sort_keys=True) + "\n")
            print(json.dumps(cfg.to_json(), sort_keys=True))
            info = HANDLERS[args.command](run)
    except InvalidArgument as exc:
        status = 1
        print(f"error: {exc}", file=sys.stderr)
    except Exception:
        status = 2
        diag = root / "diagnostics" / f"{args.command}-{int(time.time())}.txt"
        diag.parent.mkdir(parents=True, exist_ok=True)
        diag.write_text(traceback.format_exc())
        print(f"error: {args.command} failed; diagnostics in {diag}", file=sys.stderr)
    record = {
        "command": args.command,
        "argv": list(argv),
        "config_hash": cfg.digest(),
        "inputs": {str(p): _sha256(p) for p in run.inputs if p.is_file()},
        "outputs": [str(p) for p in run.outputs],
        "wall_time_s": round(time.perf_counter() - t0, 3),
        "exit_status": status,
    }
    if diag is not None:
        record["diagnostics"] = str(diag)
    _append_ledger(root, record)
    if info is not None:
        print(json.dumps(info, sort_keys=True, default=float))
    return status


def main():
    sys.exit(run_command(sys.argv[1:]))


if __name__ == "__main__":
    main()
