"""Seeding, threading and checkpoint helpers shared by the training loops."""
from __future__ import annotations

import os
import random
import tempfile
from pathlib import Path

import numpy as np
import torch


def seed_everything(seed, threads=1):
    """Seed python, numpy and torch; pin the intra-op thread count."""
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    if threads:
        torch.set_num_threads(threads)


def atomic_torch_save(obj, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    os.close(fd)
    try:
        torch.save(obj, tmp)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)


def load_checkpoint(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing checkpoint: {path}")
    return torch.load(path, map_location="cpu", weights_only=False)


def zscore(data, mask=None):
    data = np.asarray(data, dtype=np.float64)
    sel = data[mask] if mask is not None else data
    sd = sel.std()
    return (data - sel.mean()) / (sd if sd > 1e-12 else 1.0)
