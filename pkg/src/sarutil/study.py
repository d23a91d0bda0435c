"""Seeded study behind the acceptance suite: every experimental number in one place.

``run_study`` trains the evaluators and generators on the fixture, then runs
the separation, TOP/LAST, counterfactual and ablation experiments.  The result
is a plain JSON-ready dict; array-valued outputs (counterfactual images, model
weights) enter it as sha256 digests so two runs can be compared bit for bit.
"""

import hashlib
import json
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from .evaluator import predict_criteria_batch
from .harness import (
    before_after_experiment,
    train_and_test,
    utility_gap_experiment,
    write_retrain_report,
    write_utility_report,
)
from .imageset import ImageSet
from .pipeline import (
    classifier_config,
    corrupt_all,
    corrupted_subset,
    corruption_specs,
    explain_subset,
    generate,
    results_as_set,
    train_evaluator_variant,
    train_vae,
)

ABLATIONS = ("plain_vae", "no_class_guidance", "no_angle_guidance", "cnn_evaluator")


def array_digest(a):
    a = np.ascontiguousarray(a)
    return hashlib.sha256(str(a.dtype).encode() + str(a.shape).encode() + a.tobytes()).hexdigest()


def model_digest(model):
    h = hashlib.sha256()
    for name, t in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def mean_total_u(evaluator, images, T, seed):
    return float(np.mean([c.total_u for c in predict_criteria_batch(evaluator, images.x, T, seed)]))


def separation_ratios(cfg, data, evaluators):
    """Mean total_u on corrupted val chips over the clean val mean, per kind, variant and seed."""
    T = cfg.evaluator.T
    clean = ImageSet.from_images(data.val, data.preprocess)
    base = {v: mean_total_u(e, clean, T, cfg.seed) for v, e in evaluators.items()}
    out = {"n_images": len(clean), "clean_mean_total_u": base, "kinds": {}}
    for spec in corruption_specs(cfg.data):
        rows = {v: [] for v in evaluators}
        for s in cfg.harness.seeds:
            bad = ImageSet.from_images(corrupt_all(data.val, spec, s), data.preprocess)
            for v, e in evaluators.items():
                rows[v].append(mean_total_u(e, bad, T, cfg.seed + 1 + int(s)) / base[v])
        out["kinds"][spec.kind.value] = {"magnitude": spec.magnitude, "ratio": rows}
    return out


def counterfactual_stats(results, n_subset):
    # evenly spaced over the corrupted half, so every kind and class appears in the subset
    idx = np.linspace(0, len(results) - 1, min(n_subset, len(results))).astype(int)

    def stats(rows):
        return {
            "n": len(rows),
            "decreased_fraction": float(np.mean([r.m_after.total_u < r.m_before.total_u for r in rows])),
            "label_agreement_before": float(np.mean([r.m_before.pred_label == r.prior_label for r in rows])),
            "label_agreement_after": float(np.mean([r.m_after.pred_label == r.prior_label for r in rows])),
            "mean_total_u_before": float(np.mean([r.m_before.total_u for r in rows])),
            "mean_total_u_after": float(np.mean([r.m_after.total_u for r in rows])),
        }

    return {"subset": stats([results[i] for i in idx]), "all": stats(results)}


def _log(log, msg, t0):
    if log is not None:
        log(f"[{time.perf_counter() - t0:7.1f}s] {msg}")


def run_study(cfg, out_dir=None, log=print):
    """Run every experiment on the fixture described by ``cfg``; return the numbers.

    With ``out_dir`` the harness reports and ``study.json`` are written there.
    """
    t0 = time.perf_counter()
    torch.set_num_threads(1)
    data = generate(cfg)
    sets = data.sets()
    seeds = tuple(cfg.harness.seeds)
    ccfg = classifier_config(cfg)
    n_classes = cfg.data.n_classes
    result = {"config_digest": cfg.digest(), "seeds": list(seeds)}
    reports = []

    evaluators, fitness = {}, {}
    for v in ("bbb", "mcd", "cnn"):
        t = time.perf_counter()
        evaluators[v] = train_evaluator_variant(cfg, sets, v, class_names=list(data.class_names))
        evaluators[v].requires_grad_(False)
        last = evaluators[v].history[-1]
        fitness[v] = {"val_acc": last["val_acc"], "val_angle_loss": last["val_angle_loss"],
                      "epochs": last["epoch"], "train_s": time.perf_counter() - t,
                      "weights": model_digest(evaluators[v])}
        _log(log, f"evaluator {v}: {fitness[v]}", t0)
    result["fitness"] = fitness

    result["separation"] = separation_ratios(cfg, data, {v: evaluators[v] for v in ("bbb", "mcd")})
    _log(log, "separation done", t0)

    context = {"T": cfg.harness.score_T, "seed": cfg.seed}
    gaps = {}
    for scorer, ctx in (("eva_bbb_total_u", {**context, "evaluator": evaluators["bbb"]}), ("random", context)):
        rep = utility_gap_experiment(sets["sim"], sets["test"], scorer, ccfg, seeds, ctx,
                                     per_class=cfg.harness.per_class, n_classes=n_classes)
        gaps[scorer] = {"gaps": rep.gaps, "gap": rep.gap, "noise_band": rep.noise_band,
                        "last_corrupted_fraction": float(np.mean(["+" in i for i in rep.last_ids]))}
        reports.append(rep)
        _log(log, f"gap {scorer}: {gaps[scorer]}", t0)
    result["utility_gap"] = gaps

    bad = corrupted_subset(sets["sim"])
    vaes = {"introvae": train_vae(cfg, sets), "plain_vae": train_vae(cfg, sets, plain=True)}
    result["generators"] = {k: model_digest(m) for k, m in vaes.items()}
    _log(log, "generators trained", t0)

    cf = cfg.counterfactual
    variants = {
        "full": (evaluators["bbb"], vaes["introvae"], cf),
        "plain_vae": (evaluators["bbb"], vaes["plain_vae"], cf),
        "no_class_guidance": (evaluators["bbb"], vaes["introvae"], replace(cf, use_class_guidance=False)),
        "no_angle_guidance": (evaluators["bbb"], vaes["introvae"], replace(cf, use_angle_guidance=False)),
        "cnn_evaluator": (evaluators["cnn"], vaes["introvae"], cf),
    }
    cf_sets, cf_info = {}, {}
    n_check = cfg.harness.n_explain_check
    for name, (ev, vae, c) in variants.items():
        res = explain_subset(bad, ev, vae, c)
        cf_sets[name] = results_as_set(bad, res)
        cf_info[name] = counterfactual_stats(res, n_check)
        cf_info[name]["images"] = array_digest(cf_sets[name].x.numpy())
        _log(log, f"counterfactuals {name}: {cf_info[name]['subset']}", t0)
    result["counterfactual"] = cf_info

    retrain = before_after_experiment(bad, None, sets["train"], sets["test"], ccfg, seeds,
                                      class_names=list(data.class_names), cf_set=cf_sets["full"])
    reports.append(retrain)
    result["retrain"] = {row: [r["overall"] for r in runs] for row, runs in retrain.runs.items()}
    _log(log, f"retrain: {result['retrain']}", t0)

    after = {"full": result["retrain"]["after"]}
    for name in ABLATIONS:
        after[name] = [train_and_test(cf_sets[name], sets["test"], ccfg, s, n_classes)["overall"] for s in seeds]
    result["ablation"] = {name: {"after": acc, "mean": float(np.mean(acc))} for name, acc in after.items()}
    _log(log, f"ablation: {result['ablation']}", t0)

    result["runtime_s"] = time.perf_counter() - t0
    if out_dir is not None:
        write_study(result, reports, out_dir)
    return result


def write_study(result, reports, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for rep in reports:
        if hasattr(rep, "gaps"):
            write_utility_report(rep, out_dir)
        else:
            write_retrain_report(rep, out_dir, metric="cf_bbb")
    (out_dir / "study.json").write_text(json.dumps(result, indent=1, sort_keys=True) + "\n")


def timing_free(result):
    """The study numbers without wall-clock fields, for run-to-run comparison."""
    if isinstance(result, dict):
        return {k: timing_free(v) for k, v in result.items() if not k.endswith("_s")}
    if isinstance(result, list):
        return [timing_free(v) for v in result]
    return result
