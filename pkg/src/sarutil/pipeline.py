"""Seeded end-to-end fixture shared by the command line and the acceptance suite.

Everything is derived from a RunConfig: chips are synthesised in memory with
16-bit quantised pixels (so writing and re-reading PNGs is lossless), models
are trained with explicit generators, and stage outputs are plain data.
"""

import dataclasses
from dataclasses import dataclass, replace

import numpy as np
import torch

from .counterfactual import optimize_latent_batch
from .data import (
    PNG_SCALE,
    CorruptionKind,
    CorruptionSpec,
    DatasetManifest,
    ManifestEntry,
    PreprocessConfig,
    Source,
    SynthSpec,
    corrupt,
    default_templates,
    save_manifest,
    save_png,
    synth_target,
)
from .evaluator import train_evaluator
from .harness import ClassifierConfig
from .imageset import ImageSet
from .introvae import train_introvae

_STREAM = {"train": 1, "val": 2, "test": 3, "sim": 4}
_CORRUPT_STREAM = 0xC0


def synth_spec(d):
    return SynthSpec(
        default_templates(d.n_classes, d.template_seed),
        speckle_looks=d.speckle_looks,
        background_level=d.background_level,
        image_size=d.image_size,
        seed=d.template_seed,
        body_level=d.body_level,
        psf_sigma=d.psf_sigma,
        clutter_level=d.clutter_level,
    )


def preprocess_config(d):
    return PreprocessConfig(d.crop_size, d.log_transform, d.stretch_range, False)


def corruption_specs(d):
    """The calibrated magnitude of every corruption kind, in enum order."""
    return [CorruptionSpec(k, float(getattr(d, k.value))) for k in CorruptionKind]


def quantized(image):
    px = np.round(np.clip(image.pixels, 0.0, 1.0) * PNG_SCALE) / PNG_SCALE
    return replace(image, pixels=px)


def _draws(d, stream, seed, n_per_class):
    rng = np.random.default_rng([int(seed), _STREAM[stream]])
    for c in range(d.n_classes):
        for i in range(n_per_class):
            yield c, i, float(rng.uniform(0.0, 360.0)), int(rng.integers(0, 2 ** 62))


def real_split(d, split, seed=0):
    spec = synth_spec(d)
    n = {"train": d.train_per_class, "val": d.val_per_class, "test": d.test_per_class}[split]
    return [quantized(synth_target(spec, c, az, s, Source.REAL, f"{split}-c{c}-{i:04d}"))
            for c, i, az, s in _draws(d, split, seed, n)]


def corrupt_all(images, spec, seed):
    """Corrupted copies of ``images`` (which must carry scenes), one defect each."""
    rng = np.random.default_rng([int(seed), _CORRUPT_STREAM, list(CorruptionKind).index(spec.kind)])
    return [quantized(corrupt(im, spec, int(rng.integers(0, 2 ** 62)))) for im in images]


def simulated_set(d, seed=0):
    """Per class: clean simulated chips first, then corrupted ones cycling through the kinds."""
    spec = synth_spec(d)
    kinds = corruption_specs(d)
    n_bad = int(round(d.corrupted_fraction * d.sim_per_class))
    rng = np.random.default_rng([int(seed), _CORRUPT_STREAM])
    out = []
    for c, i, az, s in _draws(d, "sim", seed, d.sim_per_class):
        im = synth_target(spec, c, az, s, Source.SIMULATED, f"sim-c{c}-{i:04d}")
        cseed = int(rng.integers(0, 2 ** 62))
        j = i - (d.sim_per_class - n_bad)
        if j >= 0:
            im = corrupt(im, kinds[j % len(kinds)], cseed)
        out.append(quantized(im))
    return out


def is_corrupted(id_):
    return "+" in id_


@dataclass
class FixtureData:
    train: list
    val: list
    test: list
    sim: list
    preprocess: PreprocessConfig
    class_names: list

    def sets(self):
        return {name: ImageSet.from_images(getattr(self, name), self.preprocess)
                for name in ("train", "val", "test", "sim")}


def generate(cfg):
    d = cfg.data
    return FixtureData(
        real_split(d, "train", cfg.seed),
        real_split(d, "val", cfg.seed),
        real_split(d, "test", cfg.seed),
        simulated_set(d, cfg.seed),
        preprocess_config(d),
        synth_spec(d).class_names,
    )


def write_dataset(data, d, out_dir):
    """PNGs plus two manifests: ``real.json`` (train/val/test) and ``sim.json``."""
    real, sim = [], []
    for split in ("train", "val", "test"):
        for im in getattr(data, split):
            rel = f"images/{im.id}.png"
            save_png(out_dir / rel, im.pixels)
            real.append(ManifestEntry(rel, im.class_id, im.azimuth_deg, Source.REAL, split, im.id))
    for im in data.sim:
        rel = f"images/{im.id}.png"
        save_png(out_dir / rel, im.pixels)
        sim.append(ManifestEntry(rel, im.class_id, im.azimuth_deg, Source.SIMULATED, "train", im.id))
    mr = DatasetManifest(out_dir, tuple(data.class_names), d.image_size, tuple(real))
    ms = DatasetManifest(out_dir, tuple(data.class_names), d.image_size, tuple(sim))
    save_manifest(mr, out_dir / "real.json")
    save_manifest(ms, out_dir / "sim.json")
    return mr, ms


# ---------------------------------------------------------------------------
# model stages


def train_evaluator_variant(cfg, sets, variant, log_path=None, class_names=None):
    ecfg = replace(cfg.evaluator, variant=variant)
    return train_evaluator((sets["train"], sets["val"]), ecfg, log_path=log_path,
                           n_classes=cfg.data.n_classes, class_names=class_names)


def train_vae(cfg, sets, plain=False, out_dir=None):
    vcfg = replace(cfg.introvae, plain_vae=plain)
    return train_introvae(sets["train"], vcfg, out_dir=out_dir)


def corrupted_subset(sim):
    return sim.subset([i for i, k in enumerate(sim.ids) if is_corrupted(k)])


def explain_subset(images, evaluator, vae, cf_cfg, chunk=50):
    results = []
    for i in range(0, len(images), chunk):
        part = images.subset(range(i, min(i + chunk, len(images))))
        results += optimize_latent_batch(part.x, part.labels.numpy(), part.azimuth_deg.numpy(),
                                         evaluator, vae, cf_cfg, part.ids)
    return results


def results_as_set(images, results):
    x = torch.from_numpy(np.stack([r.x_opt for r in results]).astype(np.float32))[:, None].to(images.x.dtype)
    if [r.id for r in results] != list(images.ids):
        raise ValueError("counterfactual results do not line up with the image set")
    return ImageSet(x, images.labels.clone(), images.azimuth_deg.clone(), list(images.ids))


def classifier_config(cfg):
    h = cfg.harness
    return ClassifierConfig(epochs=h.classifier_epochs, batch=h.classifier_batch, lr=h.classifier_lr,
                            lambda_a=cfg.evaluator.lambda_a)


def config_dict(cfg):
    return dataclasses.asdict(cfg)
