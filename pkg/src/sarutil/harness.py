"""Quantitative protocols: reference image metrics, TOP/LAST utility gap, and
before/after counterfactual retraining, with JSON/CSV reports."""

import csv
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InvalidArgument
from .evaluator import EvaluatorTrainConfig, predict_criteria_batch, train_evaluator
from .imageset import ImageSet

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2

SCORERS = ("psnr", "ssim", "eva_bbb_total_u", "eva_mcd_total_u", "eva_total_u", "random")
HIGHER_IS_BETTER = {"psnr": True, "ssim": True, "eva_bbb_total_u": False, "eva_mcd_total_u": False,
                    "eva_total_u": False, "random": True}


# ---------------------------------------------------------------------------
# full-reference metrics


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidArgument(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, peak=1.0):
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak ** 2 / mse)


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r ** 2) / (2 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(a, b):
    """Single-scale SSIM on [0, 1] images, averaged over all valid window positions."""
    a, b = _pair(a, b)
    if a.ndim != 2 or min(a.shape) < SSIM_WINDOW:
        raise InvalidArgument(f"ssim needs 2-D images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {a.shape}")
    w = gaussian_window()

    def filt(x):
        return np.einsum("ijkl,kl->ij", sliding_window_view(x, w.shape), w)

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a ** 2
    var_b = filt(b * b) - mu_b ** 2
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return float(np.mean(num / den))


# ---------------------------------------------------------------------------
# scoring and splitting


@dataclass(frozen=True)
class ScoreRecord:
    id: str
    metric: str
    score: float
    higher_is_better: bool
    class_id: int = -1

    def to_json(self):
        return {"id": self.id, "metric": self.metric, "score": _num(self.score),
                "higher_is_better": self.higher_is_better, "class_id": self.class_id}

    @classmethod
    def from_json(cls, d):
        return cls(d["id"], d["metric"], _unnum(d["score"]), d["higher_is_better"], d["class_id"])


def _num(x):
    x = float(x)
    return "inf" if x == math.inf else ("-inf" if x == -math.inf else x)


def _unnum(x):
    return float(x) if isinstance(x, str) else x


def score_dataset(images, scorer, context=None):
    """One ScoreRecord per chip of ``images`` (an ImageSet).

    ``context`` keys: ``reference`` (ImageSet paired by id) for psnr/ssim,
    ``evaluator`` for the eva scorers, ``T`` and ``seed`` optionally.
    """
    if scorer not in SCORERS:
        raise InvalidArgument(f"unknown scorer {scorer!r}")
    context = context or {}
    hib = HIGHER_IS_BETTER[scorer]
    labels = images.labels.tolist()
    if scorer in ("psnr", "ssim"):
        ref = context.get("reference")
        if ref is None:
            raise InvalidArgument(f"{scorer} needs a paired reference set")
        pos = {k: i for i, k in enumerate(ref.ids)}
        fn = psnr if scorer == "psnr" else ssim
        scores = []
        for i, id_ in enumerate(images.ids):
            if id_ not in pos:
                raise InvalidArgument(f"no reference image paired with id {id_!r}")
            scores.append(fn(images.x[i, 0].double().numpy(), ref.x[pos[id_], 0].double().numpy()))
    elif scorer == "random":
        rng = np.random.default_rng(int(context.get("seed", 0)))
        scores = rng.random(len(images)).tolist()
    else:
        model = context.get("evaluator")
        if model is None:
            raise InvalidArgument(f"{scorer} needs a trained evaluator")
        crit = predict_criteria_batch(model, images.x, T=int(context.get("T", 25)),
                                      rng=int(context.get("seed", 0)))
        scores = [c.total_u for c in crit]
    return [ScoreRecord(id_, scorer, float(s), hib, int(c)) for id_, s, c in zip(images.ids, scores, labels)]


def _ordered(records):
    # stable: ties keep input (manifest) order
    idx = sorted(range(len(records)),
                 key=lambda i: -records[i].score if records[i].higher_is_better else records[i].score)
    return [records[i] for i in idx]


def rank_and_split(records, per_class=False, top_n_per_class=None):
    """Best-first ordering cut into (top ids, last ids).

    Without ``per_class`` the ordered list is halved (TOP gets the extra one
    when odd). With it, each class contributes its best ``top_n_per_class``
    to TOP and its worst ``top_n_per_class`` to LAST (default: half the class).
    """
    records = list(records)
    if len({r.id for r in records}) != len(records):
        raise InvalidArgument("duplicate ids among score records")
    if not per_class:
        order = _ordered(records)
        k = (len(order) + 1) // 2
        return [r.id for r in order[:k]], [r.id for r in order[k:]]
    by_class = {}
    for r in records:
        by_class.setdefault(r.class_id, []).append(r)
    top, last = [], []
    for c in sorted(by_class):
        group = _ordered(by_class[c])
        if len(group) < 2:
            raise InvalidArgument(f"class {c} has fewer than two scored images")
        q = len(group) // 2 if top_n_per_class is None else int(top_n_per_class)
        if q < 1 or 2 * q > len(group):
            raise InvalidArgument(f"quota {q} per split exceeds class {c} size {len(group)}")
        top += [r.id for r in group[:q]]
        last += [r.id for r in group[len(group) - q:]]
    return top, last


# ---------------------------------------------------------------------------
# classifier runs


@dataclass
class ClassifierConfig:
    epochs: int = 100
    batch: int = 25
    lr: float = 1e-3
    lambda_a: float = 20.0
    augment: bool = True

    def train_config(self, seed):
        return EvaluatorTrainConfig(variant="cnn", epochs=self.epochs, batch=self.batch, lr=self.lr,
                                    lambda_a=self.lambda_a, seed=seed, augment=self.augment)


def test_classifier(model, test, n_classes):
    """Per-class and overall accuracy plus mean squared angle-vector error."""
    with torch.no_grad():
        logits, v = model(test.x, sample=False)
    pred = logits.argmax(-1)
    per_class = []
    for c in range(n_classes):
        m = test.labels == c
        per_class.append(float((pred[m] == c).double().mean()) if bool(m.any()) else float("nan"))
    overall = float((pred == test.labels).double().mean())
    angle = float(((v.double() - test.angle_targets(torch.float64)) ** 2).sum(-1).mean())
    return {"per_class": per_class, "overall": overall, "angle_loss": angle}


def train_and_test(train, test, cfg, seed, n_classes):
    if len(train) == 0:
        raise InvalidArgument("empty training split")
    model = train_evaluator((train, None), cfg.train_config(seed), n_classes=n_classes)
    return test_classifier(model, test, n_classes)


# ---------------------------------------------------------------------------
# reports


@dataclass
class UtilityReport:
    metric: str
    top_ids: list
    last_ids: list
    seeds: list
    top: list  # one test_classifier dict per seed
    last: list
    runtime_s: float = 0.0
    gaps: list = field(init=False)
    gap: float = field(init=False)
    gap_std: float = field(init=False)

    def __post_init__(self):
        self.gaps = [t["overall"] - l["overall"] for t, l in zip(self.top, self.last)]
        self.gap = float(np.mean(self.gaps))
        self.gap_std = float(np.std(self.gaps, ddof=1)) if len(self.gaps) > 1 else 0.0

    @property
    def noise_band(self):
        return 2.0 * self.gap_std

    def to_json(self):
        return {"experiment": "gap", "metric": self.metric, "top_ids": list(self.top_ids),
                "last_ids": list(self.last_ids), "seeds": list(self.seeds), "top": self.top,
                "last": self.last, "runtime_s": self.runtime_s, "gaps": self.gaps, "gap": self.gap,
                "gap_std": self.gap_std}

    @classmethod
    def from_json(cls, d):
        return cls(d["metric"], d["top_ids"], d["last_ids"], d["seeds"], d["top"], d["last"],
                   d.get("runtime_s", 0.0))


ROWS = ("upper_bound", "before", "after")


@dataclass
class RetrainReport:
    seeds: list
    runs: dict  # row -> list of test_classifier dicts, one per seed
    train_sizes: dict
    class_names: list
    runtime_s: float = 0.0

    def __post_init__(self):
        if set(self.runs) != set(ROWS):
            raise InvalidArgument(f"retrain report needs rows {ROWS}")
        if len(set(self.train_sizes.values())) != 1:
            raise InvalidArgument(f"training-set sizes differ across rows: {self.train_sizes}")

    def overall(self, row):
        acc = [r["overall"] for r in self.runs[row]]
        return float(np.mean(acc)), float(np.std(acc, ddof=1)) if len(acc) > 1 else 0.0

    def per_class(self, row):
        return np.mean([r["per_class"] for r in self.runs[row]], axis=0).tolist()

    def angle_loss(self, row):
        return float(np.mean([r["angle_loss"] for r in self.runs[row]]))

    def to_json(self):
        summary = {row: {"overall_mean": self.overall(row)[0], "overall_std": self.overall(row)[1],
                         "per_class_mean": self.per_class(row), "angle_loss_mean": self.angle_loss(row)}
                   for row in ROWS}
        return {"experiment": "retrain", "seeds": list(self.seeds), "runs": self.runs,
                "train_sizes": self.train_sizes, "class_names": list(self.class_names),
                "runtime_s": self.runtime_s, "summary": summary}

    @classmethod
    def from_json(cls, d):
        return cls(d["seeds"], d["runs"], d["train_sizes"], d["class_names"], d.get("runtime_s", 0.0))


def utility_gap_experiment(sim, real_test, scorer, classifier_cfg, seeds, context=None,
                           per_class=True, top_n_per_class=None, n_classes=None):
    """Rank ``sim`` by ``scorer``, train on TOP and LAST separately, test on real chips.

    The random control redraws its ranking for every seed; other scorers rank once.
    """
    t0 = time.perf_counter()
    context = dict(context or {})
    n_classes = n_classes or int(max(int(sim.labels.max()), int(real_test.labels.max())) + 1)
    seeds = list(seeds)
    tops, lasts, top_ids, last_ids = [], [], None, None
    fixed = None
    if scorer != "random":
        fixed = rank_and_split(score_dataset(sim, scorer, context), per_class, top_n_per_class)
    for s in seeds:
        if fixed is None:
            split = rank_and_split(score_dataset(sim, "random", {"seed": s}), per_class, top_n_per_class)
        else:
            split = fixed
        top_ids, last_ids = split
        if not top_ids or not last_ids:
            raise InvalidArgument("empty TOP or LAST split")
        tops.append(train_and_test(sim.select_ids(top_ids), real_test, classifier_cfg, s, n_classes))
        lasts.append(train_and_test(sim.select_ids(last_ids), real_test, classifier_cfg, s, n_classes))
    return UtilityReport(scorer, list(top_ids), list(last_ids), seeds, tops, lasts,
                         time.perf_counter() - t0)


def equal_size_subset(images, n, seed=0):
    """Deterministic class-stratified subset of ``n`` chips (all of them if already ``n``)."""
    if len(images) < n:
        raise InvalidArgument(f"need {n} images, only {len(images)} available")
    if len(images) == n:
        return images
    rng = np.random.default_rng(seed)
    labels = images.labels.numpy()
    classes, counts = np.unique(labels, return_counts=True)
    share = n * counts / len(images)
    take = np.floor(share).astype(int)
    # hand the remainder to the largest fractional shares, ties to the lower class id
    for k in np.argsort(-(share - take), kind="stable")[: n - take.sum()]:
        take[k] += 1
    idx = []
    for c, k in zip(classes, take):
        members = np.flatnonzero(labels == c)
        idx.extend(members[rng.permutation(len(members))[:k]])
    return images.subset(sorted(int(i) for i in idx))


def counterfactual_set(sim, cf_index):
    """Replace each chip of ``sim`` by its counterfactual, keeping labels and azimuths."""
    from .counterfactual import load_bundle_image, load_index

    rows = load_index(cf_index)
    missing = [i for i in sim.ids if i not in rows]
    if missing:
        raise InvalidArgument(f"no counterfactual bundle for ids {missing[:5]}")
    x = torch.from_numpy(np.stack([load_bundle_image(cf_index, rows[i]) for i in sim.ids])).to(sim.x.dtype)
    return ImageSet(x[:, None], sim.labels.clone(), sim.azimuth_deg.clone(), list(sim.ids))


def before_after_experiment(sim, cf_index, real_train, real_test, classifier_cfg, seeds,
                            class_names=None, cf_set=None):
    """Train on real, simulated and counterfactual chips at equal counts; test on real."""
    t0 = time.perf_counter()
    n_classes = len(class_names) if class_names else int(real_test.labels.max()) + 1
    after = cf_set if cf_set is not None else counterfactual_set(sim, cf_index)
    if list(after.ids) != list(sim.ids):
        raise InvalidArgument("counterfactual set does not match the simulated set")
    upper = equal_size_subset(real_train, len(sim))
    sets = {"upper_bound": upper, "before": sim, "after": after}
    runs = {row: [train_and_test(sets[row], real_test, classifier_cfg, s, n_classes) for s in seeds]
            for row in ROWS}
    return RetrainReport(list(seeds), runs, {k: len(v) for k, v in sets.items()},
                         list(class_names or [str(i) for i in range(n_classes)]),
                         time.perf_counter() - t0)


def report_name(experiment, metric, seed):
    return f"{experiment}-{metric}-{seed}.json"


def _write_json(path, doc):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def write_utility_report(report, out_dir):
    """Aggregate report plus one file per seed; returns written paths."""
    out_dir = Path(out_dir)
    paths = []
    for s, t, l in zip(report.seeds, report.top, report.last):
        doc = {"experiment": "gap", "metric": report.metric, "seed": s, "top": t, "last": l,
               "gap": t["overall"] - l["overall"]}
        paths.append(out_dir / report_name("gap", report.metric, s))
        _write_json(paths[-1], doc)
    paths.append(out_dir / report_name("gap", report.metric, "all"))
    _write_json(paths[-1], report.to_json())
    csv_path = out_dir / f"gap-{report.metric}-classes.csv"
    n = len(report.top[0]["per_class"])
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class", "top", "last"])
        for c in range(n):
            w.writerow([c, repr(float(np.mean([t["per_class"][c] for t in report.top]))),
                        repr(float(np.mean([l["per_class"][c] for l in report.last])))])
    paths.append(csv_path)
    _update_index(out_dir, paths)
    return paths


def write_retrain_report(report, out_dir, metric="counterfactual"):
    out_dir = Path(out_dir)
    paths = []
    for i, s in enumerate(report.seeds):
        doc = {"experiment": "retrain", "metric": metric, "seed": s,
               "rows": {row: report.runs[row][i] for row in ROWS}}
        paths.append(out_dir / report_name("retrain", metric, s))
        _write_json(paths[-1], doc)
    paths.append(out_dir / report_name("retrain", metric, "all"))
    _write_json(paths[-1], report.to_json())
    csv_path = out_dir / f"retrain-{metric}-classes.csv"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class"] + list(ROWS))
        cols = {row: report.per_class(row) for row in ROWS}
        for c, name in enumerate(report.class_names):
            w.writerow([name] + [repr(cols[row][c]) for row in ROWS])
        w.writerow(["overall"] + [repr(report.overall(row)[0]) for row in ROWS])
    paths.append(csv_path)
    _update_index(out_dir, paths)
    return paths


def _update_index(out_dir, paths):
    path = Path(out_dir) / "index.json"
    runs = json.loads(path.read_text())["runs"] if path.is_file() else []
    for p in paths:
        name = Path(p).name
        if name not in runs:
            runs.append(name)
    _write_json(path, {"runs": sorted(runs)})


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))
