"""Probabilistic evaluator: Bayesian CNN predicting class and azimuth vector.

Three variants share one topology: ``bbb`` (Bayes-by-Backprop convolutions),
``mcd`` (deterministic convolutions preceded by always-on dropout) and ``cnn``
(plain point-estimate network, used for ablations and as the harness
classifier).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .bayes import BBBConv2d
from .data import decode_azimuth
from .errors import InvalidArgument, InvalidState
from .imageset import ImageSet
from .uncertainty import (
    angle_uncertainty,
    angle_uncertainty_torch,
    class_uncertainty,
    class_uncertainty_torch,
    predictive_entropy_torch,
)

VARIANTS = ("bbb", "mcd", "cnn")

# (in, out, kernel, stride, padding) of the four-layer trunk
TRUNK = ((1, 16, 5, 2, 2), (16, 32, 3, 2, 1), (32, 64, 3, 2, 1), (64, 128, 3, 2, 1))


ANGLE_EPS = 1e-12


def trunk_output_size(input_size):
    s = input_size
    for _, _, k, st, p in TRUNK:
        s = (s + 2 * p - k) // st + 1
    return s


def _generator(rng):
    if isinstance(rng, torch.Generator):
        return rng
    return torch.Generator().manual_seed(int(rng) & ((1 << 63) - 1))


class Evaluator(nn.Module):
    def __init__(self, n_classes, variant="bbb", dropout_rate=0.1, prior_sigma=0.1,
                 alpha_init=0.1, class_names=None, input_size=None, generator=None, unit_angle=True):
        super().__init__()
        if variant not in VARIANTS:
            raise InvalidArgument(f"unknown evaluator variant {variant!r}")
        if n_classes < 2:
            raise InvalidArgument("an evaluator needs at least two classes")
        self.variant = variant
        self.n_classes = n_classes
        self.dropout_rate = dropout_rate
        self.prior_sigma = prior_sigma
        self.class_names = list(class_names or [str(i) for i in range(n_classes)])
        self.input_size = input_size
        self.unit_angle = unit_angle
        if variant == "bbb":
            self.trunk = nn.ModuleList(
                BBBConv2d(i, o, k, s, p, alpha_init=alpha_init) for i, o, k, s, p in TRUNK
            )
        else:
            self.trunk = nn.ModuleList(
                nn.Conv2d(i, o, k, stride=s, padding=p, bias=True) for i, o, k, s, p in TRUNK
            )
        if input_size is None:
            raise InvalidArgument("input_size is required to size the heads")
        width = TRUNK[-1][1] * trunk_output_size(input_size) ** 2
        self.class_head = nn.Linear(width, n_classes)
        self.angle_head = nn.Linear(width, 2)
        self.reset_parameters(generator)

    def reset_parameters(self, generator=None):
        with torch.no_grad():
            for layer in self.trunk:
                if isinstance(layer, BBBConv2d):
                    layer.reset_parameters(generator)
                else:
                    fan_in = layer.in_channels * layer.kernel_size[0] * layer.kernel_size[1]
                    layer.weight.normal_(0.0, math.sqrt(2.0 / fan_in), generator=generator)
                    layer.bias.zero_()
            for head in (self.class_head, self.angle_head):
                head.weight.normal_(0.0, 1.0 / math.sqrt(head.in_features), generator=generator)
                head.bias.zero_()

    @property
    def stochastic(self):
        return self.variant != "cnn"

    def _dropout(self, x, generator):
        keep = 1.0 - self.dropout_rate
        mask = torch.rand(x.shape, generator=generator, dtype=x.dtype) < keep
        return x * mask / keep

    def features(self, x, generator=None, sample=True):
        for layer in self.trunk:
            if self.variant == "bbb":
                x = layer(x, generator=generator, sample=sample)
            else:
                if self.variant == "mcd" and sample and self.dropout_rate > 0:
                    x = self._dropout(x, generator)
                x = layer(x)
            x = F.relu(x)
        # heads see the whole final map, like a last conv spanning it
        return x.flatten(1)

    def forward(self, x, generator=None, sample=True):
        h = self.features(x, generator, sample)
        v = self.angle_head(h)
        if self.unit_angle:
            # each draw lands on the unit circle; spread across draws shows up as a short mean
            v = v / torch.sqrt((v * v).sum(-1, keepdim=True) + ANGLE_EPS)
        return self.class_head(h), v

    def kl(self):
        if self.variant != "bbb":
            raise InvalidState(f"KL term undefined for variant {self.variant!r}")
        return sum(layer.kl(self.prior_sigma) for layer in self.trunk)

    def sample_outputs(self, x, T, generator=None):
        """T stochastic passes as one batched call; returns probs (T,N,C), vecs (T,N,2)."""
        n = len(x)
        reps = x.repeat(T, 1, 1, 1) if T > 1 else x
        logits, v = self(reps, generator=generator, sample=self.stochastic)
        probs = torch.softmax(logits, dim=-1)
        return probs.view(T, n, -1), v.view(T, n, 2)


# ---------------------------------------------------------------------------
# losses


def joint_likelihood_loss(logits, v, labels, angle_targets, lambda_a):
    """Batch mean of cross-entropy plus ``lambda_a`` times squared angle-vector error."""
    ce = F.cross_entropy(logits, labels, reduction="none")
    sq = ((v - angle_targets) ** 2).sum(dim=-1)
    return (ce + lambda_a * sq).mean()


def elbo_loss(model, x, labels, angle_targets, cfg, n_batches, generator=None, n_train=None):
    """Negative ELBO for one minibatch: MC-averaged likelihood term plus scaled KL.

    With ``cfg.kl_weighting == "minibatch"`` the KL is divided by the number of
    minibatches; with ``"dataset"`` it is divided by the training-set size,
    which keeps its weight consistent with a per-sample likelihood.
    """
    if model.variant != "bbb":
        raise InvalidState(f"elbo_loss needs a bbb evaluator, got {model.variant!r}")
    nll = 0.0
    for _ in range(cfg.n_draws):
        logits, v = model(x, generator=generator)
        nll = nll + joint_likelihood_loss(logits, v, labels, angle_targets, cfg.lambda_a)
    nll = nll / cfg.n_draws
    if cfg.kl_weighting == "minibatch":
        denom = n_batches
    else:
        if n_train is None:
            raise InvalidArgument("dataset KL weighting needs n_train")
        denom = n_train
    kl = model.kl() / denom
    return nll + kl, {"nll": nll, "kl": kl}


# ---------------------------------------------------------------------------
# training


@dataclass
class EvaluatorTrainConfig:
    variant: str = "bbb"
    epochs: int = 300
    batch: int = 25
    lr: float = 1e-3
    n_draws: int = 1
    lambda_a: float = 20.0
    T: int = 25
    val_T: int = 5
    seed: int = 0
    prior_sigma: float = 0.1
    alpha_init: float = 0.1
    dropout_rate: float = 0.1
    kl_weighting: str = "dataset"
    augment: bool = True
    stretch_range: tuple = (0.8, 1.2)
    unit_angle: bool = True

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise InvalidArgument(f"unknown variant {self.variant!r}")
        if self.epochs < 1:
            raise InvalidArgument("epochs must be >= 1")
        if self.batch < 1:
            raise InvalidArgument("batch must be >= 1")
        if self.n_draws < 1:
            raise InvalidArgument("n_draws must be >= 1")
        if self.T < 2:
            raise InvalidArgument("T must be >= 2")
        if self.lambda_a <= 0:
            raise InvalidArgument("lambda_a must be > 0")
        if self.kl_weighting not in ("dataset", "minibatch"):
            raise InvalidArgument(f"unknown kl_weighting {self.kl_weighting!r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise InvalidArgument("dropout_rate must lie in [0, 1)")
        self.stretch_range = tuple(float(s) for s in self.stretch_range)


LOG_COLUMNS = ("epoch", "loss", "nll", "kl", "val_acc", "val_angle_loss")


def _resolve_sets(data, preprocess_cfg):
    if isinstance(data, tuple):
        train, val = data
    else:
        train = ImageSet.from_manifest(data, "train", preprocess_cfg)
        val_entries = data.split("val")
        val = ImageSet.from_manifest(data, entries=val_entries, cfg=preprocess_cfg) if val_entries else None
    return train, val


@torch.no_grad()
def evaluate_set(model, data, T=5, generator=None, batch=500):
    """Accuracy and mean squared angle-vector error of the predictive mean."""
    if data is None or len(data) == 0:
        return float("nan"), float("nan")
    g = _generator(0 if generator is None else generator)
    T = T if model.stochastic else 1
    correct, sq = 0, 0.0
    targets = data.angle_targets(data.x.dtype)
    for i in range(0, len(data), batch):
        xb = data.x[i:i + batch]
        probs, vecs = model.sample_outputs(xb, T, g)
        pred = probs.mean(0).argmax(-1)
        correct += int((pred == data.labels[i:i + batch]).sum())
        sq += float(((vecs.mean(0) - targets[i:i + batch]) ** 2).sum())
    return correct / len(data), sq / len(data)


def train_evaluator(data, cfg, preprocess_cfg=None, log_path=None, n_classes=None, class_names=None):
    """Fit an evaluator.

    ``data`` is a DatasetManifest (train/val splits are used) or a
    ``(train, val)`` pair of ImageSets; ``val`` may be None.
    """
    if class_names is None and not isinstance(data, tuple):
        class_names = list(data.class_names)
    train, val = _resolve_sets(data, preprocess_cfg)
    if train is None or len(train) == 0:
        raise InvalidArgument("training split is empty")
    if n_classes is None:
        n_classes = len(class_names) if class_names else int(train.labels.max()) + 1
    if n_classes < 2 or len(torch.unique(train.labels)) < 2:
        raise InvalidArgument("training data must contain at least two classes")

    g = torch.Generator().manual_seed(cfg.seed)
    model = Evaluator(
        n_classes, cfg.variant, cfg.dropout_rate, cfg.prior_sigma, cfg.alpha_init,
        class_names=class_names, input_size=train.image_size, generator=g, unit_angle=cfg.unit_angle,
    ).to(train.x.dtype)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    n = len(train)
    n_batches = math.ceil(n / cfg.batch)
    targets = train.angle_targets(train.x.dtype)
    lo, hi = cfg.stretch_range
    history = []
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        perm = torch.randperm(n, generator=g)
        tot = {"loss": 0.0, "nll": 0.0, "kl": 0.0}
        for b in range(n_batches):
            idx = perm[b * cfg.batch:(b + 1) * cfg.batch]
            xb = train.x[idx]
            if cfg.augment:
                gain = lo + (hi - lo) * torch.rand(len(idx), 1, 1, 1, generator=g, dtype=xb.dtype)
                xb = xb * gain
            yb, vb = train.labels[idx], targets[idx]
            if cfg.variant == "bbb":
                loss, parts = elbo_loss(model, xb, yb, vb, cfg, n_batches, g, n_train=n)
                nll, kl = float(parts["nll"].detach()), float(parts["kl"].detach())
            else:
                logits, v = model(xb, generator=g)
                loss = joint_likelihood_loss(logits, v, yb, vb, cfg.lambda_a)
                nll, kl = float(loss.detach()), 0.0
            opt.zero_grad()
            loss.backward()
            opt.step()
            w = len(idx) / n
            tot["loss"] += float(loss.detach()) * w
            tot["nll"] += nll * w
            tot["kl"] += kl * w
        model.eval()
        acc, ang = evaluate_set(model, val, cfg.val_T, torch.Generator().manual_seed(cfg.seed + epoch))
        history.append({"epoch": epoch, **tot, "val_acc": acc, "val_angle_loss": ang})
    model.history = history
    model.train_config = cfg
    model.requires_grad_(False)
    if log_path is not None:
        write_log(history, log_path)
    return model


def write_log(history, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for row in history:
            w.writerow({k: (repr(float(v)) if k != "epoch" else v) for k, v in row.items()})


# ---------------------------------------------------------------------------
# criteria vector


@dataclass
class CriteriaVector:
    class_probs: np.ndarray
    u_c: float
    angle_vec: np.ndarray
    u_a: float
    T: int
    aleatoric_trace: float = 0.0
    epistemic_trace: float = 0.0
    total_u: float = field(init=False)
    pred_label: int = field(init=False)
    pred_azimuth_deg: float = field(init=False)

    def __post_init__(self):
        self.class_probs = np.asarray(self.class_probs, dtype=np.float64)
        self.angle_vec = np.asarray(self.angle_vec, dtype=np.float64)
        self.u_c = float(self.u_c)
        self.u_a = float(self.u_a)
        self.total_u = self.u_c + self.u_a
        self.pred_label = int(np.argmax(self.class_probs))
        try:
            self.pred_azimuth_deg = decode_azimuth(self.angle_vec)
        except InvalidArgument:
            self.pred_azimuth_deg = float("nan")

    def to_json(self):
        return {
            "class_probs": [float(p) for p in self.class_probs],
            "u_c": self.u_c,
            "angle_vec": [float(a) for a in self.angle_vec],
            "u_a": self.u_a,
            "total_u": self.total_u,
            "pred_label": self.pred_label,
            "pred_azimuth_deg": self.pred_azimuth_deg,
            "T": self.T,
            "aleatoric_trace": self.aleatoric_trace,
            "epistemic_trace": self.epistemic_trace,
        }

    @classmethod
    def from_json(cls, d):
        return cls(d["class_probs"], d["u_c"], d["angle_vec"], d["u_a"], d["T"],
                   d.get("aleatoric_trace", 0.0), d.get("epistemic_trace", 0.0))


def _as_batch(images, model):
    x = torch.as_tensor(np.asarray(images), dtype=next(model.parameters()).dtype)
    if x.dim() == 2:
        x = x[None, None]
    elif x.dim() == 3:
        x = x[:, None]
    if model.input_size is not None and x.shape[-1] != model.input_size:
        raise InvalidArgument(f"image size {x.shape[-1]} != evaluator input {model.input_size}")
    return x


@torch.no_grad()
def predict_criteria_batch(model, images, T=25, rng=0, chunk=200):
    """Criteria vectors for a batch of preprocessed chips (N,H,W) or (N,1,H,W)."""
    if model.stochastic and T < 2:
        raise InvalidArgument("stochastic evaluators need T >= 2")
    x = _as_batch(images, model)
    g = _generator(rng)
    out = []
    for i in range(0, len(x), chunk):
        xb = x[i:i + chunk]
        if not model.stochastic:
            probs, vecs = model.sample_outputs(xb, 1, g)
            ent = predictive_entropy_torch(probs[0])
            for p, v, e in zip(probs[0].double().numpy(), vecs[0].double().numpy(), ent.double().numpy()):
                out.append(CriteriaVector(p, float(e), v, 0.0, 1))
            continue
        probs, vecs = model.sample_outputs(xb, T, g)
        probs = probs.double().numpy()
        vecs = vecs.double().numpy()
        for j in range(probs.shape[1]):
            p = probs[:, j]
            # float32 softmax can leave the simplex by a few ulps
            p = p / p.sum(axis=1, keepdims=True)
            alea, epi, u_c = class_uncertainty(p)
            u_a = angle_uncertainty(vecs[:, j])
            out.append(CriteriaVector(p.mean(0), u_c, vecs[:, j].mean(0), u_a, T,
                                      float(np.trace(alea)), float(np.trace(epi))))
    return out


def predict_criteria(model, image, T=25, rng=0):
    return predict_criteria_batch(model, np.asarray(image)[None], T, rng)[0]


def criteria_torch(model, x, T, generator=None):
    """Differentiable (ybar, u_c, vbar, u_a) for a batch; used inside the latent objective."""
    probs, vecs = model.sample_outputs(x, T if model.stochastic else 1, generator)
    if model.stochastic:
        u_c = class_uncertainty_torch(probs)
        u_a = angle_uncertainty_torch(vecs)
    else:
        u_c = predictive_entropy_torch(probs[0])
        u_a = torch.zeros_like(u_c)
    return probs.mean(0), u_c, vecs.mean(0), u_a


# ---------------------------------------------------------------------------
# checkpoints


def save_evaluator(model, path, extra=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), path)
    cfg = getattr(model, "train_config", None)
    sidecar = {
        "variant": model.variant,
        "C": model.n_classes,
        "class_names": model.class_names,
        "input_size": model.input_size,
        "unit_angle": model.unit_angle,
        "prior_sigma": model.prior_sigma,
        "dropout_rate": model.dropout_rate,
        "T_default": cfg.T if cfg else 25,
        "train_config": asdict(cfg) if cfg else None,
        "seed": cfg.seed if cfg else None,
        "metrics": getattr(model, "history", [])[-1:] or None,
    }
    if extra:
        sidecar.update(extra)
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=1, default=list) + "\n")


def load_evaluator(path):
    path = Path(path)
    side = json.loads(path.with_suffix(".json").read_text())
    model = Evaluator(side["C"], side["variant"], side["dropout_rate"], side["prior_sigma"],
                      class_names=side["class_names"], input_size=side["input_size"],
                      unit_angle=side.get("unit_angle", True))
    state = torch.load(path, weights_only=True)
    model = model.to(next(iter(state.values())).dtype)
    model.load_state_dict(state)
    if side.get("train_config"):
        model.train_config = EvaluatorTrainConfig(**side["train_config"])
    model.requires_grad_(False)
    model.eval()
    return model
