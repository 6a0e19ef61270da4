"""V-Net style gland segmentation, one model per modality.

Residual conv blocks with PReLU, strided-conv downsampling and transposed
conv upsampling with concatenated skips; a sigmoid head gives the gland
probability.  Inputs are z-scored per volume.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage
from sklearn.base import BaseEstimator
from torch import nn

from .errors import ConfigurationError, EmptyMaskError, TrainingError
from .runtime import atomic_torch_save, load_checkpoint, seed_everything, zscore
from .volumes import StructureSet, Volume

log = logging.getLogger(__name__)

CONNECTIVITY = ndimage.generate_binary_structure(3, 1)


class ResBlock(nn.Module):
    def __init__(self, in_ch, out_ch, n_convs):
        super().__init__()
        layers = []
        for i in range(n_convs):
            layers += [nn.Conv3d(in_ch if i == 0 else out_ch, out_ch, 3, padding=1),
                       nn.InstanceNorm3d(out_ch, affine=True), nn.PReLU(out_ch)]
        self.body = nn.Sequential(*layers)
        self.skip = nn.Identity() if in_ch == out_ch else nn.Conv3d(in_ch, out_ch, 1)

    def forward(self, x):
        return self.body(x) + self.skip(x)


class VNet(nn.Module):
    def __init__(self, base_channels=16, levels=4, in_channels=1):
        super().__init__()
        ch = [base_channels * 2 ** i for i in range(levels)]
        self.levels = levels
        self.inp = ResBlock(in_channels, ch[0], 1)
        self.down = nn.ModuleList()
        self.enc = nn.ModuleList()
        for i in range(1, levels):
            self.down.append(nn.Sequential(nn.Conv3d(ch[i - 1], ch[i], 2, stride=2), nn.PReLU(ch[i])))
            self.enc.append(ResBlock(ch[i], ch[i], min(i + 1, 3)))
        self.up = nn.ModuleList()
        self.dec = nn.ModuleList()
        for i in range(levels - 1, 0, -1):
            self.up.append(nn.Sequential(nn.ConvTranspose3d(ch[i], ch[i - 1], 2, stride=2), nn.PReLU(ch[i - 1])))
            self.dec.append(ResBlock(2 * ch[i - 1], ch[i - 1], min(i, 2)))
        self.head = nn.Conv3d(ch[0], 1, 1)

    def forward(self, x):
        skips = [self.inp(x)]
        for down, enc in zip(self.down, self.enc):
            skips.append(enc(down(skips[-1])))
        y = skips.pop()
        for up, dec in zip(self.up, self.dec):
            y = dec(torch.cat([up(y), skips.pop()], dim=1))
        return torch.sigmoid(self.head(y))


@dataclass
class SegConfig:
    grid_size: int = 128
    base_channels: int = 16
    levels: int = 4
    lr: float = 1e-3
    batch_size: int = 5
    epochs: int = 20
    max_steps: int = None
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1 or self.lr <= 0:
            raise ConfigurationError("batch_size, epochs must be >= 1 and lr > 0")
        if self.grid_size % 2 ** (self.levels - 1):
            raise ConfigurationError(f"grid_size must be divisible by {2 ** (self.levels - 1)}")


class SegModel:
    """Trained network plus the config and seed it was built with."""

    def __init__(self, config, net=None, modality=None):
        self.config = config
        self.modality = modality
        if net is None:
            seed_everything(config.seed)
            net = VNet(config.base_channels, config.levels)
        self.net = net.float()
        self.net.eval()

    def save(self, path):
        atomic_torch_save({"config": asdict(self.config), "state": self.net.state_dict(),
                           "seed": self.config.seed, "modality": self.modality,
                           "normalization": "zscore"}, path)

    @classmethod
    def load(cls, path):
        ck = load_checkpoint(path)
        model = cls(SegConfig(**ck["config"]), modality=ck.get("modality"))
        model.net.load_state_dict(ck["state"])
        return model


def _check_input(model, data):
    G = model.config.grid_size
    if data.shape != (G, G, G):
        raise ValueError(f"segmentation input must be {G}^3, got {data.shape}")


def _to_input(data):
    return torch.from_numpy(zscore(data).astype(np.float32))[None, None]


def seg_forward(model, vol):
    """Foreground probability map on the grid of ``vol``."""
    data = vol.data if isinstance(vol, Volume) else np.asarray(vol)
    _check_input(model, data)
    model.net.eval()
    with torch.no_grad():
        prob = model.net(_to_input(data))[0, 0].double().numpy()
    return vol.with_data(prob) if isinstance(vol, Volume) else prob


def soft_dice_loss(prob, target, eps=1e-5):
    dims = tuple(range(1, prob.ndim))
    inter = (prob * target).sum(dim=dims)
    dice = (2 * inter + eps) / (prob.sum(dim=dims) + target.sum(dim=dims) + eps)
    return 1 - dice.mean()


def _case_arrays(case):
    vol, mask = case
    data = vol.data if isinstance(vol, Volume) else np.asarray(vol)
    if isinstance(mask, StructureSet):
        mask = mask.gland_mask()
    return data, np.asarray(mask, dtype=bool)


def train_segmenter(cases, config, checkpoint_dir=None, modality=None):
    """Train on ``cases`` = [(Volume, gland mask or StructureSet), ...].

    Returns ``(model, history)``; history holds one dict per step.
    """
    if not cases:
        raise ConfigurationError("no training cases")
    model = SegModel(config, modality=modality)
    arrays = [_case_arrays(c) for c in cases]
    for data, mask in arrays:
        _check_input(model, data)
        if not mask.any():
            raise ConfigurationError("a training case has an empty gland mask")
    x_all = torch.cat([_to_input(d) for d, _ in arrays])
    y_all = torch.from_numpy(np.stack([m for _, m in arrays]).astype(np.float32))[:, None]

    net = model.net
    net.train()
    opt = torch.optim.Adam(net.parameters(), lr=config.lr)
    history = []
    step = 0
    for epoch in range(config.epochs):
        order = np.random.default_rng(config.seed + epoch).permutation(len(arrays))
        losses = []
        for start in range(0, len(order), config.batch_size):
            idx = torch.from_numpy(order[start:start + config.batch_size])
            opt.zero_grad()
            loss = soft_dice_loss(net(x_all[idx]), y_all[idx])
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite segmentation loss at epoch {epoch}")
            loss.backward()
            opt.step()
            losses.append(loss.item())
            history.append({"step": step, "epoch": epoch, "loss": losses[-1]})
            step += 1
            if config.max_steps is not None and step >= config.max_steps:
                break
        log.info("seg epoch %d loss %.4f", epoch, np.mean(losses))
        if checkpoint_dir is not None:
            net.eval()
            model.save(Path(checkpoint_dir) / "seg_last.pt")
            net.train()
        if config.max_steps is not None and step >= config.max_steps:
            break
    net.eval()
    if checkpoint_dir is not None:
        _write_history(history, Path(checkpoint_dir) / "seg_history.csv")
    return model, history


def _write_history(history, path):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["step", "epoch", "loss"])
        w.writeheader()
        w.writerows(history)


def largest_component(mask):
    lab, n = ndimage.label(mask, structure=CONNECTIVITY)
    if n == 0:
        return np.zeros(mask.shape, dtype=bool)
    sizes = np.bincount(lab.ravel())[1:]
    return lab == (1 + int(np.argmax(sizes)))


def postprocess(prob, threshold=0.5):
    """Threshold, keep the largest 6-connected component, close small gaps.

    Closing is done on a padded copy so the grid border does not erode the
    mask; the largest component is taken again so the result stays a single
    component.
    """
    mask = np.asarray(prob) >= threshold
    if not mask.any():
        raise EmptyMaskError("no voxel reached the segmentation threshold")
    mask = largest_component(mask)
    padded = np.pad(mask, 1)
    closed = ndimage.binary_closing(padded, structure=CONNECTIVITY)[1:-1, 1:-1, 1:-1]
    return largest_component(closed | mask)


def predict_mask(model, vol, threshold=0.5):
    prob = seg_forward(model, vol)
    prob = prob.data if isinstance(prob, Volume) else prob
    return StructureSet(postprocess(prob, threshold).astype(np.int16))


class Segmenter(BaseEstimator):
    """Estimator wrapper: ``fit(volumes, masks)``, ``predict``, ``predict_proba``."""

    def __init__(self, grid_size=128, base_channels=16, levels=4, lr=1e-3, batch_size=5,
                 epochs=20, max_steps=None, seed=0, threshold=0.5, checkpoint_dir=None):
        self.grid_size = grid_size
        self.base_channels = base_channels
        self.levels = levels
        self.lr = lr
        self.batch_size = batch_size
        self.epochs = epochs
        self.max_steps = max_steps
        self.seed = seed
        self.threshold = threshold
        self.checkpoint_dir = checkpoint_dir

    def _config(self):
        return SegConfig(self.grid_size, self.base_channels, self.levels, self.lr,
                         self.batch_size, self.epochs, self.max_steps, self.seed)

    def fit(self, volumes, masks):
        if len(volumes) != len(masks):
            raise ValueError("volumes and masks differ in length")
        self.model_, self.history_ = train_segmenter(list(zip(volumes, masks)), self._config(),
                                                     self.checkpoint_dir)
        return self

    def _fitted(self):
        if not hasattr(self, "model_"):
            raise ConfigurationError("Segmenter is not fitted")
        return self.model_

    def predict_proba(self, vol):
        return seg_forward(self._fitted(), vol)

    def predict(self, vol):
        return predict_mask(self._fitted(), vol, self.threshold)
