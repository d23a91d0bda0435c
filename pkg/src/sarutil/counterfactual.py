"""Latent-space counterfactuals: push a chip toward low evaluator uncertainty and its
prior label/azimuth while staying close to the original, then map what changed."""

import hashlib
import json
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .data import encode_azimuth, save_png
from .errors import InvalidArgument, InvalidState, NonFiniteLoss
from .evaluator import CriteriaVector, criteria_torch, predict_criteria_batch
from .introvae import decode, encode

UNIT_TOL = 1e-6
EVAL_T = 25
# offset keeps the criteria-vector seed stream apart from the per-step loss noise
_EVAL_SEED_OFFSET = 1_000_003


@dataclass
class CFConfig:
    lambda_d: float = 1.0
    lambda_y: float = 1.0
    lambda_v: float = 30.0
    lr: float = 5e-3
    steps: int = 200
    T: int = 10
    seed: int = 0
    use_class_guidance: bool = True
    use_angle_guidance: bool = True

    def __post_init__(self):
        for name in ("lambda_d", "lambda_y", "lambda_v"):
            if not getattr(self, name) >= 0:
                raise InvalidArgument(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.steps < 1:
            raise InvalidArgument(f"steps must be >= 1, got {self.steps}")
        if not self.lr > 0:
            raise InvalidArgument(f"lr must be > 0, got {self.lr}")
        if self.T < 1:
            raise InvalidArgument(f"T must be >= 1, got {self.T}")


@dataclass
class SignedMap:
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)


@dataclass
class CounterfactualResult:
    id: str
    x0: np.ndarray
    x_opt: np.ndarray
    z_opt: np.ndarray
    m_before: CriteriaVector
    m_after: CriteriaVector
    diff: SignedMap
    trace: list
    prior_label: int
    prior_azimuth_deg: float
    best_step: int
    best_loss: float = field(init=False)

    def __post_init__(self):
        self.best_loss = self.trace[self.best_step]["total"]

    def summary(self):
        totals = [t["total"] for t in self.trace]
        return {
            "steps": len(self.trace),
            "best_step": self.best_step,
            "best_loss": self.best_loss,
            "first_loss": totals[0],
            "last_loss": totals[-1],
        }


def step_generator(seed, step):
    """Noise source for the T evaluator draws of one optimisation step."""
    return torch.Generator().manual_seed((int(seed) * 1_000_033 + int(step)) % (1 << 63))


def row_seed(seed, id_):
    """Per-image seed, so a chip's noise does not depend on how the batch was chunked."""
    digest = hashlib.sha256(f"{int(seed)}:{id_}".encode()).digest()
    return int.from_bytes(digest[:6], "little")


def _as_generator(rng):
    if isinstance(rng, torch.Generator):
        return rng
    return torch.Generator().manual_seed(int(rng))


def combine_terms(entropy, ce, d2, dist, cfg):
    """Weighted objective; returns (total, prior term). Works on floats or tensors."""
    prior = 0.0 * ce
    if cfg.use_class_guidance:
        prior = prior + cfg.lambda_y * ce
    if cfg.use_angle_guidance:
        prior = prior + cfg.lambda_v * d2
    return entropy + prior + cfg.lambda_d * dist, prior


def cf_loss(z, x0, prior_label, prior_angle_vec, evaluator, generator, cfg, rng):
    """Per-image objective for a batch of latent codes.

    ``generator`` is the IntroVAE whose decoder maps z to pixels. Returns the
    per-image totals (N,) and a dict of per-image parts.
    """
    x0 = torch.as_tensor(x0)
    z = torch.as_tensor(z)
    if z.dim() == 1:
        z = z[None]
    if x0.dim() == 2:
        x0 = x0[None, None]
    elif x0.dim() == 3:
        x0 = x0[:, None]
    labels = torch.as_tensor(prior_label, dtype=torch.long).reshape(-1)
    v_prior = torch.as_tensor(prior_angle_vec, dtype=z.dtype).reshape(-1, 2)
    if not (len(z) == len(x0) == len(labels) == len(v_prior)):
        raise InvalidArgument("z, x0, prior_label and prior_angle_vec disagree on batch size")
    norms = torch.linalg.vector_norm(v_prior.double(), dim=-1)
    if bool((norms - 1).abs().max() > UNIT_TOL):
        raise InvalidArgument(f"prior_angle_vec must be unit norm, got norms {norms.tolist()}")
    n_classes = evaluator.n_classes
    if bool((labels < 0).any() or (labels >= n_classes).any()):
        raise InvalidArgument(f"prior_label outside [0, {n_classes})")

    x = decode(generator, z)
    if isinstance(rng, (list, tuple)):
        if len(rng) != len(z):
            raise InvalidArgument("need one noise generator per latent code")
        rows = [criteria_torch(evaluator, x[i:i + 1], cfg.T, _as_generator(r)) for i, r in enumerate(rng)]
        ybar, u_c, vbar, u_a = (torch.cat(c) for c in zip(*rows))
    else:
        ybar, u_c, vbar, u_a = criteria_torch(evaluator, x, cfg.T, _as_generator(rng))
    entropy = u_c + u_a
    ce = -torch.log(ybar.gather(1, labels[:, None]).squeeze(1).clamp_min(1e-12))
    d2 = torch.linalg.vector_norm(v_prior - vbar, dim=-1)
    dist = (x - x0.to(x.dtype)).abs().flatten(1).mean(1)
    total, prior = combine_terms(entropy, ce, d2, dist, cfg)
    parts = {"L_entropy": entropy, "u_c": u_c, "u_a": u_a, "ce": ce, "angle_d2": d2,
             "L_prior": prior, "L_dist": dist}
    return total, parts


def difference_map(x_opt, x0):
    a = np.asarray(x_opt, dtype=np.float64)
    b = np.asarray(x0, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidArgument(f"shape mismatch {a.shape} vs {b.shape}")
    d = a - b
    return SignedMap(d * np.abs(d))


def difference_rgb(signed):
    v = np.asarray(signed.values if isinstance(signed, SignedMap) else signed, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise InvalidArgument("difference map has non-finite values")
    peak = np.abs(v).max() if v.size else 0.0
    t = v / peak if peak > 0 else np.zeros_like(v)
    # white at zero, (255,0,0) at +peak, (0,0,255) at -peak
    pos, neg = np.clip(t, 0, 1), np.clip(-t, 0, 1)
    r = 1 - neg
    g = 1 - pos - neg
    b = 1 - pos
    return np.round(np.stack([r, g, b], -1) * 255).astype(np.uint8)


def render_difference(signed, path):
    rgb = difference_rgb(signed)
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(rgb, mode="RGB").save(path, format="PNG")
    except OSError as exc:
        raise InvalidArgument(f"cannot write {path}: {exc}") from None
    return path


def parameter_digest(*modules):
    h = hashlib.sha256()
    for m in modules:
        for name, t in m.state_dict().items():
            h.update(name.encode())
            h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def minimize_latent(z0, loss_fn, steps, lr):
    """Adam on a batch of codes; ``loss_fn(z, step)`` returns (per-row totals, parts).

    Keeps the lowest-loss iterate of each row. Returns (best_z, best_step, traces).
    """
    z = z0.detach().clone().requires_grad_(True)
    opt = torch.optim.Adam([z], lr=lr)
    n = len(z)
    best_z = z.detach().clone()
    best = torch.full((n,), float("inf"), dtype=torch.float64)
    best_step = torch.zeros(n, dtype=torch.long)
    traces = [[] for _ in range(n)]
    for step in range(steps):
        total, parts = loss_fn(z, step)
        td = total.detach().double()
        for i in range(n):
            rec = {"step": step, "total": float(td[i])}
            rec.update({k: float(v[i].detach()) for k, v in parts.items()})
            traces[i].append(rec)
        if not bool(torch.isfinite(td).all()):
            bad = int(torch.nonzero(~torch.isfinite(td))[0])
            raise NonFiniteLoss(f"non-finite latent loss at step {step} (row {bad})", step, traces[bad])
        better = td < best
        best = torch.where(better, td, best)
        best_step = torch.where(better, torch.full_like(best_step, step), best_step)
        best_z[better] = z.detach()[better]
        opt.zero_grad()
        total.sum().backward()
        opt.step()
    return best_z, best_step.tolist(), traces


class _Frozen:
    """Turns off parameter gradients for the duration and restores the flags."""

    def __init__(self, *modules):
        self.params = [p for m in modules for p in m.parameters()]

    def __enter__(self):
        self.flags = [p.requires_grad for p in self.params]
        for p in self.params:
            p.requires_grad_(False)

    def __exit__(self, *exc):
        for p, f in zip(self.params, self.flags):
            p.requires_grad_(f)


def optimize_latent_batch(x0, prior_labels, prior_azimuth_deg, evaluator, introvae, cfg, ids=None):
    x0 = torch.as_tensor(np.asarray(x0), dtype=next(introvae.parameters()).dtype)
    if x0.dim() == 3:
        x0 = x0[:, None]
    n = len(x0)
    labels = torch.as_tensor(np.asarray(prior_labels).reshape(-1), dtype=torch.long)
    az = np.asarray(prior_azimuth_deg, dtype=np.float64).reshape(-1)
    v_prior = torch.from_numpy(encode_azimuth(az)).to(x0.dtype)
    ids = [f"#{i}" for i in range(n)] if ids is None else list(ids)
    if not (len(labels) == len(az) == len(ids) == n):
        raise InvalidArgument("batch fields disagree on length")

    before = parameter_digest(evaluator, introvae)
    with _Frozen(evaluator, introvae):
        with torch.no_grad():
            z0, _ = encode(introvae, x0)

        seeds = [row_seed(cfg.seed, i) for i in ids]

        def loss_fn(z, step):
            gens = [step_generator(s, step) for s in seeds]
            return cf_loss(z, x0, labels, v_prior, evaluator, introvae, cfg, gens)

        best_z, best_step, traces = minimize_latent(z0, loss_fn, cfg.steps, cfg.lr)
        with torch.no_grad():
            x_opt = decode(introvae, best_z).clamp(0.0, 1.0)
    if parameter_digest(evaluator, introvae) != before:
        raise InvalidState("frozen model parameters changed during latent optimisation")

    x0_np = x0[:, 0].double().numpy()
    xo_np = x_opt[:, 0].double().numpy()
    eval_seed = cfg.seed + _EVAL_SEED_OFFSET
    m_before = _criteria_each(evaluator, x0_np, eval_seed)
    m_after = _criteria_each(evaluator, xo_np, eval_seed)
    return [
        CounterfactualResult(ids[i], x0_np[i], xo_np[i], best_z[i].double().numpy(), m_before[i],
                             m_after[i], difference_map(xo_np[i], x0_np[i]), traces[i],
                             int(labels[i]), float(az[i]), best_step[i])
        for i in range(n)
    ]


def _criteria_each(evaluator, images, seed):
    # one image per call so a chip's criteria never depend on its batch neighbours
    dtype = next(evaluator.parameters()).dtype
    return [predict_criteria_batch(evaluator, torch.as_tensor(im[None], dtype=dtype), EVAL_T, seed)[0]
            for im in images]


def optimize_latent(x0, prior_label, prior_azimuth_deg, evaluator, introvae, cfg, id="#0"):
    x0 = np.asarray(x0)
    if x0.ndim == 3:
        x0 = x0[0]
    return optimize_latent_batch(x0[None], [prior_label], [prior_azimuth_deg], evaluator, introvae,
                                 cfg, [id])[0]


# ---------------------------------------------------------------------------
# bundles


def _slug(id_):
    return re.sub(r"[^A-Za-z0-9._+-]", "_", id_)


def write_bundle(result, out_dir, cfg):
    """x_opt PNG + float array, diff PNG + float array, JSON record."""
    d = Path(out_dir) / _slug(result.id)
    d.mkdir(parents=True, exist_ok=True)
    save_png(d / "x_opt.png", result.x_opt)
    np.save(d / "x_opt.npy", result.x_opt.astype(np.float32))
    np.save(d / "diff.npy", result.diff.values.astype(np.float64))
    render_difference(result.diff, d / "diff.png")
    record = {
        "id": result.id,
        "prior_label": result.prior_label,
        "prior_azimuth_deg": result.prior_azimuth_deg,
        "m_before": result.m_before.to_json(),
        "m_after": result.m_after.to_json(),
        "config": asdict(cfg),
        "trace_summary": result.summary(),
        "z_opt": [float(v) for v in result.z_opt],
    }
    (d / "record.json").write_text(json.dumps(record, indent=1) + "\n")
    return {"id": result.id, "dir": d.name, "x_opt": "x_opt.png", "x_opt_array": "x_opt.npy",
            "diff": "diff.png", "diff_array": "diff.npy", "record": "record.json"}


def write_index(rows, out_dir):
    path = Path(out_dir) / "index.json"
    path.write_text(json.dumps({"bundles": rows}, indent=1) + "\n")
    return path


def load_index(path):
    path = Path(path)
    if not path.is_file():
        raise InvalidArgument(f"counterfactual index not found: {path}")
    rows = json.loads(path.read_text())["bundles"]
    return {r["id"]: r for r in rows}


def load_bundle_image(index_path, row):
    return np.load(Path(index_path).parent / row["dir"] / row["x_opt_array"]).astype(np.float64)


def load_bundle_record(index_path, row):
    return json.loads((Path(index_path).parent / row["dir"] / row["record"]).read_text())


def explain_set(images, evaluator, introvae, cfg, out_dir, chunk=50):
    """Batch mode over an ImageSet: one bundle per chip plus an index."""
    rows, results = [], []
    for i in range(0, len(images), chunk):
        part = images.subset(range(i, min(i + chunk, len(images))))
        res = optimize_latent_batch(part.x, part.labels.numpy(), part.azimuth_deg.numpy(),
                                    evaluator, introvae, cfg, part.ids)
        results.extend(res)
        if out_dir is not None:
            rows.extend(write_bundle(r, out_dir, cfg) for r in res)
    if out_dir is not None:
        write_index(rows, out_dir)
    return results
