"""Introspective VAE: the encoder doubles as the discriminator of its generator.

The encoder is trained to keep real codes near the prior while pushing the
codes of reconstructions and prior samples beyond a KL margin; the generator
is trained to pull those codes back toward the prior.  With ``plain_vae`` the
adversarial terms vanish and a training step is an ordinary VAE step.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import save_png
from .errors import InvalidArgument
from .imageset import ImageSet

N_STAGES = 4


@dataclass
class IntroVAETrainConfig:
    beta: float = 10.0
    alpha_R: float = 5e-4
    alpha_E: float = 5e-4
    alpha_G: float = 5e-4
    margin: float = 100.0
    latent_dim: int = 100
    base_channels: int = 64
    lr: float = 5e-4
    epochs: int = 500
    batch: int = 25
    seed: int = 0
    plain_vae: bool = False
    grid_every: int = 50

    def __post_init__(self):
        if self.margin <= 0:
            raise InvalidArgument("margin must be > 0")
        for name in ("beta", "alpha_R", "alpha_E", "alpha_G"):
            if getattr(self, name) < 0:
                raise InvalidArgument(f"{name} must be >= 0")
        if self.epochs < 1 or self.batch < 1 or self.latent_dim < 1:
            raise InvalidArgument("epochs, batch and latent_dim must be positive")


# ---------------------------------------------------------------------------
# loss terms


def kl_to_prior(mu, log_var):
    """Per-sample KL(N(mu, exp(log_var)) || N(0, I))."""
    return -0.5 * torch.sum(1.0 + log_var - mu * mu - torch.exp(log_var), dim=-1)


def reconstruction_loss(x, x_r):
    if x.shape != x_r.shape:
        raise InvalidArgument(f"shape mismatch {tuple(x.shape)} vs {tuple(x_r.shape)}")
    return ((x - x_r) ** 2).reshape(len(x), -1).sum(dim=1).mean()


def _hinge(t):
    if isinstance(t, torch.Tensor):
        return F.relu(t).mean()
    return max(0.0, float(t))


def encoder_loss(kl_real, kl_recon, kl_sampled, recon, cfg):
    """Margin losses are applied per sample when per-sample KLs are given."""
    if cfg.plain_vae:
        return cfg.alpha_R * kl_real + cfg.beta * recon
    hinge = _hinge(cfg.margin - kl_recon) + _hinge(cfg.margin - kl_sampled)
    return cfg.alpha_R * kl_real + cfg.alpha_E * hinge + cfg.beta * recon


def generator_loss(kl_recon, kl_sampled, recon, cfg):
    if cfg.plain_vae:
        return cfg.beta * recon
    return cfg.alpha_G * (kl_recon + kl_sampled) + cfg.beta * recon


# ---------------------------------------------------------------------------
# networks


def _padded(size):
    return int(math.ceil(size / 2 ** N_STAGES) * 2 ** N_STAGES)


class Encoder(nn.Module):
    def __init__(self, image_size, latent_dim, base):
        super().__init__()
        self.image_size = image_size
        self.padded = _padded(image_size)
        chans = [1] + [base * 2 ** i for i in range(N_STAGES)]
        self.convs = nn.ModuleList(
            nn.Conv2d(chans[i], chans[i + 1], 4, stride=2, padding=1) for i in range(N_STAGES)
        )
        self.s0 = self.padded // 2 ** N_STAGES
        self.fc = nn.Linear(chans[-1] * self.s0 ** 2, 2 * latent_dim)

    def forward(self, x):
        p = self.padded - self.image_size
        if p:
            # odd remainders go to the bottom/right edge
            x = F.pad(x, (p // 2, p - p // 2, p // 2, p - p // 2))
        for conv in self.convs:
            x = F.leaky_relu(conv(x), 0.2)
        mu, log_var = self.fc(x.flatten(1)).chunk(2, dim=-1)
        return mu, log_var


class Generator(nn.Module):
    def __init__(self, image_size, latent_dim, base):
        super().__init__()
        self.image_size = image_size
        self.padded = _padded(image_size)
        self.s0 = self.padded // 2 ** N_STAGES
        chans = [base * 2 ** i for i in reversed(range(N_STAGES))]
        self.c0 = chans[0]
        self.fc = nn.Linear(latent_dim, chans[0] * self.s0 ** 2)
        outs = chans[1:] + [base]
        self.deconvs = nn.ModuleList(
            nn.ConvTranspose2d(cin, cout, 4, stride=2, padding=1) for cin, cout in zip(chans, outs)
        )
        self.out = nn.Conv2d(base, 1, 3, padding=1)

    def forward(self, z):
        h = F.leaky_relu(self.fc(z), 0.2).view(len(z), self.c0, self.s0, self.s0)
        for deconv in self.deconvs:
            h = F.leaky_relu(deconv(h), 0.2)
        x = torch.sigmoid(self.out(h))
        p = self.padded - self.image_size
        if p:
            x = x[..., p // 2:p // 2 + self.image_size, p // 2:p // 2 + self.image_size]
        return x


class IntroVAE(nn.Module):
    def __init__(self, image_size, latent_dim=100, base_channels=64, generator=None):
        super().__init__()
        self.image_size = image_size
        self.latent_dim = latent_dim
        self.base_channels = base_channels
        self.encoder = Encoder(image_size, latent_dim, base_channels)
        self.generator = Generator(image_size, latent_dim, base_channels)
        self.reset_parameters(generator)

    def reset_parameters(self, generator=None):
        with torch.no_grad():
            for m in self.modules():
                if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
                    fan_in = m.weight[0].numel() if not isinstance(m, nn.ConvTranspose2d) else (
                        m.weight.shape[0] * m.weight.shape[2] * m.weight.shape[3] // 4)
                    m.weight.normal_(0.0, math.sqrt(2.0 / max(fan_in, 1)), generator=generator)
                    m.bias.zero_()


def _image_batch(model, x):
    x = torch.as_tensor(x, dtype=next(model.parameters()).dtype)
    if x.dim() == 2:
        x = x[None, None]
    elif x.dim() == 3:
        x = x[:, None]
    if x.shape[-2:] != (model.image_size, model.image_size):
        raise InvalidArgument(f"image shape {tuple(x.shape[-2:])} != model size {model.image_size}")
    return x


def encode(model, x):
    """Posterior mean and log-variance of a batch (or a single chip)."""
    return model.encoder(_image_batch(model, x))


def decode(model, z):
    z = torch.as_tensor(z, dtype=next(model.parameters()).dtype)
    if z.dim() == 1:
        z = z[None]
    if z.shape[-1] != model.latent_dim:
        raise InvalidArgument(f"latent length {z.shape[-1]} != latent_dim {model.latent_dim}")
    return model.generator(z)


# ---------------------------------------------------------------------------
# training


def _step_terms(model, x, cfg, g):
    mu, log_var = model.encoder(x)
    eps = torch.randn(mu.shape, generator=g, dtype=mu.dtype)
    z = mu + torch.exp(0.5 * log_var) * eps
    x_r = model.generator(z)
    recon = reconstruction_loss(x, x_r)
    kl_real = kl_to_prior(mu, log_var).mean()
    if cfg.plain_vae:
        return {"recon": recon, "kl_real": kl_real, "x_r": x_r}
    z_p = torch.randn(mu.shape, generator=g, dtype=mu.dtype)
    x_p = model.generator(z_p)
    kl_r = kl_to_prior(*model.encoder(x_r.detach()))
    kl_pp = kl_to_prior(*model.encoder(x_p.detach()))
    return {"recon": recon, "kl_real": kl_real, "kl_r": kl_r, "kl_pp": kl_pp, "x_r": x_r, "x_p": x_p}


def _apply(params, grads, opt):
    for p, gr in zip(params, grads):
        p.grad = gr
    opt.step()


def train_step(model, x, cfg, opt_e, opt_g, g):
    """One encoder update followed by one generator update; returns logged scalars."""
    enc_params = list(model.encoder.parameters())
    gen_params = list(model.generator.parameters())
    t = _step_terms(model, x, cfg, g)
    if cfg.plain_vae:
        loss_e = encoder_loss(t["kl_real"], 0.0, 0.0, t["recon"], cfg)
        hinge = 0.0
        kl_r = kl_pp = 0.0
    else:
        loss_e = encoder_loss(t["kl_real"], t["kl_r"], t["kl_pp"], t["recon"], cfg)
        hinge = float((_hinge(cfg.margin - t["kl_r"]) + _hinge(cfg.margin - t["kl_pp"])).detach())
        kl_r, kl_pp = float(t["kl_r"].mean().detach()), float(t["kl_pp"].mean().detach())
    grads_e = torch.autograd.grad(loss_e, enc_params, retain_graph=True)
    if cfg.plain_vae:
        loss_g = generator_loss(0.0, 0.0, t["recon"], cfg)
        grads_g = torch.autograd.grad(loss_g, gen_params)
        _apply(enc_params, grads_e, opt_e)
    else:
        _apply(enc_params, grads_e, opt_e)
        # generator terms see the freshly updated encoder
        kl_r_g = kl_to_prior(*model.encoder(t["x_r"])).mean()
        kl_pp_g = kl_to_prior(*model.encoder(t["x_p"])).mean()
        loss_g = generator_loss(kl_r_g, kl_pp_g, t["recon"], cfg)
        grads_g = torch.autograd.grad(loss_g, gen_params)
    _apply(gen_params, grads_g, opt_g)
    for p in enc_params + gen_params:
        p.grad = None
    return {
        "loss_e": float(loss_e.detach()),
        "loss_g": float(loss_g.detach()),
        "recon": float(t["recon"].detach()),
        "kl_real": float(t["kl_real"].detach()),
        "kl_recon": kl_r,
        "kl_sampled": kl_pp,
        "hinge": hinge,
    }


LOG_COLUMNS = ("epoch", "loss_e", "loss_g", "recon", "kl_real", "kl_recon", "kl_sampled", "hinge")


def make_optimizers(model, cfg):
    return (
        torch.optim.Adam(model.encoder.parameters(), lr=cfg.lr),
        torch.optim.Adam(model.generator.parameters(), lr=cfg.lr),
    )


def train_introvae(data, cfg, preprocess_cfg=None, out_dir=None):
    """Pre-train on a DatasetManifest train split or an ImageSet."""
    train = data if isinstance(data, ImageSet) else ImageSet.from_manifest(data, "train", preprocess_cfg)
    if len(train) == 0:
        raise InvalidArgument("training split is empty")
    g = torch.Generator().manual_seed(cfg.seed)
    model = IntroVAE(train.image_size, cfg.latent_dim, cfg.base_channels, generator=g).to(train.x.dtype)
    opt_e, opt_g = make_optimizers(model, cfg)
    n = len(train)
    history = []
    out_dir = Path(out_dir) if out_dir is not None else None
    for epoch in range(1, cfg.epochs + 1):
        perm = torch.randperm(n, generator=g)
        acc = dict.fromkeys(LOG_COLUMNS[1:], 0.0)
        for b in range(0, n, cfg.batch):
            idx = perm[b:b + cfg.batch]
            logs = train_step(model, train.x[idx], cfg, opt_e, opt_g, g)
            for k in acc:
                acc[k] += logs[k] * len(idx) / n
        history.append({"epoch": epoch, **acc})
        if out_dir is not None and cfg.grid_every and (epoch % cfg.grid_every == 0 or epoch == cfg.epochs):
            save_reconstruction_grid(model, train.x[:8], out_dir / f"recon-{epoch:04d}.png")
    model.history = history
    model.train_config = cfg
    model.requires_grad_(False)
    if out_dir is not None:
        write_log(history, out_dir / "introvae_log.csv")
    return model


def write_log(history, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in history:
            w.writerow({k: (row[k] if k == "epoch" else repr(float(row[k]))) for k in LOG_COLUMNS})


@torch.no_grad()
def save_reconstruction_grid(model, x, path):
    """Top row: inputs; bottom row: reconstructions from the posterior mean."""
    mu, _ = model.encoder(x)
    rec = model.generator(mu)
    top = torch.cat(list(x[:, 0]), dim=1)
    bottom = torch.cat(list(rec[:, 0]), dim=1)
    save_png(path, torch.cat([top, bottom], dim=0).double().numpy())


# ---------------------------------------------------------------------------
# checkpoints


def save_introvae(model, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), path)
    cfg = getattr(model, "train_config", None)
    hist = getattr(model, "history", [])
    sidecar = {
        "latent_dim": model.latent_dim,
        "image_size": model.image_size,
        "base_channels": model.base_channels,
        "config": asdict(cfg) if cfg else None,
        "seed": cfg.seed if cfg else None,
        "final_losses": hist[-1] if hist else None,
    }
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=1) + "\n")


def load_introvae(path):
    path = Path(path)
    side = json.loads(path.with_suffix(".json").read_text())
    state = torch.load(path, weights_only=True)
    model = IntroVAE(side["image_size"], side["latent_dim"], side["base_channels"])
    model = model.to(next(iter(state.values())).dtype)
    model.load_state_dict(state)
    if side.get("config"):
        model.train_config = IntroVAETrainConfig(**side["config"])
    model.requires_grad_(False)
    return model


def reconstruction_mse(model, data, batch=200):
    """Mean per-sample summed squared error of posterior-mean reconstructions."""
    total = 0.0
    with torch.no_grad():
        for i in range(0, len(data), batch):
            xb = data.x[i:i + batch]
            mu, _ = model.encoder(xb)
            total += float(((model.generator(mu) - xb) ** 2).flatten(1).sum(1).sum())
    return total / len(data)


def latent_variance(model, data):
    with torch.no_grad():
        _, log_var = model.encoder(data.x)
    return float(np.mean(np.exp(log_var.double().numpy())))
