"""Independent reference computations used by the tests.

Each oracle takes a different route from the code under test: finite
differences instead of autodiff, explicit loops instead of vectorised
predicates, plain ``json`` re-counts instead of the stats module.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from pathlib import Path

import numpy as np


def central_difference(f, x: np.ndarray, h: float = 1e-4, coords=None) -> np.ndarray:
    """d f / d x by central differences; ``coords`` restricts to flat indices (others stay 0)."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in (range(flat.size) if coords is None else coords):
        old = flat[i]
        flat[i] = old + h
        fp = float(f())
        flat[i] = old - h
        fm = float(f())
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.ravel(a).astype(np.float64), np.ravel(b).astype(np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def loc_bin(c: int, extent: int, bins: int) -> int:
    """Bin index by counting bin edges k*extent/bins that c has reached."""
    return min(sum(1 for k in range(1, bins) if c * bins >= k * extent), bins - 1)


def box_positions(box, height: int, width: int) -> set[tuple[int, int]]:
    """(row, col) pixels inside an inclusive box, by explicit enumeration."""
    out = set()
    for j in range(height):
        for i in range(width):
            if box.x1 <= i <= box.x2 and box.y1 <= j <= box.y2:
                out.add((j, i))
    return out


def softmax_ref(x) -> list[float]:
    m = max(x)
    e = [math.exp(v - m) for v in x]
    s = sum(e)
    return [v / s for v in e]


def cross_entropy_ref(logits, target) -> float:
    return -math.log(softmax_ref(list(logits))[target])


def top_k_ids(logits: np.ndarray, allowed: np.ndarray, k: int) -> set[int]:
    """Top-K allowed ids by a Python sort (value desc, id asc)."""
    pairs = sorted(((-float(v), i) for i, v in enumerate(logits) if allowed[i]))
    return {i for _, i in pairs[:k]}


def recount_dataset(out_dir) -> dict:
    """Brute-force totals, qtype counts and per-image counts from the record files."""
    out = Path(out_dir)

    def load(name):
        p = out / name
        if not p.exists():
            return []
        return [json.loads(line) for line in p.read_text().splitlines() if line.strip()]

    index = load("image_index.jsonl")
    qa, dc = load("qa.jsonl"), load("dc.jsonl")
    per_image = {}
    for r in index:
        if not r.get("skipped"):
            per_image[r["image_id"]] = {"qa": 0, "dc": 0}
    for r in qa:
        per_image.setdefault(r["image_id"], {"qa": 0, "dc": 0})["qa"] += 1
    for r in dc:
        per_image.setdefault(r["image_id"], {"qa": 0, "dc": 0})["dc"] += 1
    return {
        "qa": len(qa), "dc": len(dc), "images": len(per_image), "qtypes": Counter(r["qtype"] for r in qa),
        "per_image": per_image,
    }


def generator_loss_gradient_error(model, vocab, pixels, items, seed: int, per_tensor: int = 2,
                                  h: float = 1e-4) -> float:
    """Worst relative error between autodiff and central differences for the summed generator loss.

    The model must already be float64. Masks are drawn from a fixed stream so every
    evaluation sees the same graph. Both target vectors are checked on every coordinate.
    """
    from qadc import tensor as T
    from qadc.objectives import generator_loss, generator_losses

    def loss():
        return generator_loss(generator_losses(model, vocab, pixels, items, np.random.default_rng(seed)))

    analytic = T.backward(loss(), model.params)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, p in model.params.items():
        if name in ("target.e_t", "target.e_tbar"):
            coords = list(range(p.size))
        else:
            coords = [int(c) for c in rng.choice(p.size, size=min(per_tensor, p.size), replace=False)]
        numeric = central_difference(lambda: loss().item(), p.data, h, coords)
        a = analytic[name].reshape(-1)[coords]
        n = numeric.reshape(-1)[coords]
        if max(np.abs(a).max(), np.abs(n).max()) < 1e-9:
            continue
        worst = max(worst, relative_error(a, n))
    return worst
