"""Central finite differences against autograd, in float64."""

from __future__ import annotations

import numpy as np
import torch


def numeric_grad(f, x: torch.Tensor, idx, h: float = 1e-6) -> np.ndarray:
    """d f / d x at the flat indices ``idx`` by central differences."""
    flat = x.data.view(-1)
    out = []
    for i in idx:
        old = flat[i].item()
        flat[i] = old + h
        fp = float(f())
        flat[i] = old - h
        fm = float(f())
        flat[i] = old
        out.append((fp - fm) / (2 * h))
    return np.array(out)


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12))


def check(f, tensors, max_entries: int = 40, seed: int = 0) -> float:
    """Worst relative error over ``tensors`` (each checked on up to ``max_entries`` entries)."""
    rng = np.random.default_rng(seed)
    for t in tensors:
        t.grad = None
    f().backward()
    worst = 0.0
    for t in tensors:
        n = t.numel()
        idx = rng.choice(n, size=min(n, max_entries), replace=False)
        analytic = t.grad.reshape(-1)[idx].numpy()
        with torch.no_grad():
            numeric = numeric_grad(f, t, idx)
        worst = max(worst, relative_error(analytic, numeric))
    return worst
