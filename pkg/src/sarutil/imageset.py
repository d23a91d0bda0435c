"""In-memory tensors of preprocessed chips used by every training loop."""

from dataclasses import dataclass

import numpy as np
import torch

from .data import PreprocessConfig, encode_azimuth, preprocess


@dataclass
class ImageSet:
    x: torch.Tensor  # (N, 1, H, W) float32, preprocessed without augmentation
    labels: torch.Tensor  # (N,) int64
    azimuth_deg: torch.Tensor  # (N,) float64
    ids: list

    def __post_init__(self):
        n = len(self.x)
        if not (len(self.labels) == len(self.azimuth_deg) == len(self.ids) == n):
            raise ValueError("ImageSet fields have inconsistent lengths")

    def __len__(self):
        return len(self.x)

    @property
    def image_size(self):
        return int(self.x.shape[-1])

    def angle_targets(self, dtype=None):
        v = torch.from_numpy(encode_azimuth(self.azimuth_deg.numpy()))
        return v.to(dtype or self.x.dtype)

    def subset(self, idx):
        idx = list(idx)
        it = torch.as_tensor(idx, dtype=torch.long)
        return ImageSet(self.x[it], self.labels[it], self.azimuth_deg[it], [self.ids[i] for i in idx])

    def select_ids(self, ids):
        pos = {k: i for i, k in enumerate(self.ids)}
        return self.subset([pos[k] for k in ids])

    def to(self, dtype):
        return ImageSet(self.x.to(dtype), self.labels, self.azimuth_deg, list(self.ids))

    @classmethod
    def concat(cls, sets):
        sets = list(sets)
        return cls(
            torch.cat([s.x for s in sets]),
            torch.cat([s.labels for s in sets]),
            torch.cat([s.azimuth_deg for s in sets]),
            [i for s in sets for i in s.ids],
        )

    @classmethod
    def from_arrays(cls, arrays, labels, azimuth_deg, ids):
        x = torch.from_numpy(np.stack([np.asarray(a, dtype=np.float32) for a in arrays]))[:, None]
        return cls(
            x,
            torch.as_tensor(list(labels), dtype=torch.long),
            torch.as_tensor(list(azimuth_deg), dtype=torch.float64),
            list(ids),
        )

    @classmethod
    def from_images(cls, images, cfg=None):
        """Preprocess ``TargetImage`` objects (no augmentation)."""
        cfg = cfg or PreprocessConfig()
        if cfg.augment:
            cfg = PreprocessConfig(cfg.crop_size, cfg.log_transform, cfg.stretch_range, False)
        images = list(images)
        return cls.from_arrays(
            [preprocess(im, cfg) for im in images],
            [im.class_id for im in images],
            [im.azimuth_deg for im in images],
            [im.id for im in images],
        )

    @classmethod
    def from_manifest(cls, manifest, split=None, cfg=None, entries=None):
        if entries is None:
            entries = manifest.entries if split is None else manifest.split(split)
        return cls.from_images([manifest.load_image(e) for e in entries], cfg)
