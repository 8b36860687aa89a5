"""Per-layer head allocation over candidate scales.

Layer ``l`` (1-based) of ``L`` assigns a score to each candidate ``k``
(0-based, smallest scale first). Scores are zero on the top layer and for
the last candidate; moving one candidate towards smaller scales adds
``alpha / l``. Fractional head counts are ``softmax(scores) * n_heads`` and
are turned into integers by largest-remainder rounding, ties to smaller k.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .attention import ScaleSpec, resolve_scale


@dataclass
class LayerPlan:
    layer: int
    allocations: list[tuple[ScaleSpec, int]]
    fractional: list[float] = field(default_factory=list)

    @property
    def total_heads(self) -> int:
        return sum(c for _, c in self.allocations)

    def active(self) -> list[tuple[ScaleSpec, int]]:
        """Allocations with a non-zero head count, in candidate order."""
        return [(s, c) for s, c in self.allocations if c > 0]

    def widths(self, n: int) -> list[int]:
        """Resolved width of every head, head by head."""
        return [resolve_scale(s, n) for s, c in self.allocations for _ in range(c)]


def layer_scores(alpha: float, layer: int, n_layers: int, n_candidates: int) -> np.ndarray:
    z = np.zeros(n_candidates)
    if layer == n_layers:
        return z
    step = alpha / layer
    for k in range(n_candidates - 2, -1, -1):
        z[k] = z[k + 1] + step
    return z


def fractional_counts(alpha: float, layer: int, n_layers: int, n_heads: int,
                      n_candidates: int) -> np.ndarray:
    z = layer_scores(alpha, layer, n_layers, n_candidates)
    e = np.exp(z - z.max())
    return e / e.sum() * n_heads


def largest_remainder(fractions: Sequence[float], total: int) -> list[int]:
    """Integer counts summing to ``total``; leftover units go to the largest
    remainders, ties resolved toward the lower index."""
    floors = [int(math.floor(f)) for f in fractions]
    short = total - sum(floors)
    rema = [f - fl for f, fl in zip(fractions, floors)]
    order = sorted(range(len(fractions)), key=lambda i: (-rema[i], i))
    for i in order[: max(short, 0)]:
        floors[i] += 1
    return floors


def plan_scales(alpha: float, n_layers: int, n_heads: int,
                candidates: Sequence[ScaleSpec]) -> list[LayerPlan]:
    if not math.isfinite(alpha):
        raise ValueError(f"alpha must be finite, got {alpha}")
    if n_layers < 1:
        raise ValueError("need at least one layer")
    if n_heads < 1:
        raise ValueError("need at least one head per layer")
    if not candidates:
        raise ValueError("need at least one candidate scale")
    plans = []
    for layer in range(1, n_layers + 1):
        frac = fractional_counts(alpha, layer, n_layers, n_heads, len(candidates))
        counts = largest_remainder(frac, n_heads)
        plans.append(LayerPlan(layer, list(zip(candidates, counts)), [float(f) for f in frac]))
    return plans


def uniform_plans(n_layers: int, allocation: Sequence[tuple[ScaleSpec, int]]) -> list[LayerPlan]:
    """The same fixed allocation on every layer."""
    return [LayerPlan(l, list(allocation)) for l in range(1, n_layers + 1)]


def describe_plan(plans: Sequence[LayerPlan], n: Optional[int] = None) -> str:
    if not plans:
        raise ValueError("nothing to describe")
    cands = [s for s, _ in plans[0].allocations]
    if not cands:
        raise ValueError("plan has no candidate scales")
    head = ["layer"] + [str(s) if n is None else f"{s}(w={resolve_scale(s, n)})" for s in cands]
    rows = [head]
    for p in plans:
        cells = [str(p.layer)]
        for i, (_, c) in enumerate(p.allocations):
            frac = f"{p.fractional[i]:.3f}" if p.fractional else "-"
            cells.append(f"{c} ({frac})")
        rows.append(cells)
    widths = [max(len(r[i]) for r in rows) for i in range(len(head))]
    return "\n".join("  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in rows)


def plan_records(plans: Sequence[LayerPlan], n: Optional[int] = None) -> list[str]:
    """``key=value`` lines, one per (layer, candidate)."""
    out = []
    for p in plans:
        for i, (s, c) in enumerate(p.allocations):
            rec = [f"layer={p.layer}", f"k={i}", f"scale={s}"]
            if n is not None:
                rec.append(f"width={resolve_scale(s, n)}")
            if p.fractional:
                rec.append(f"fraction={p.fractional[i]:.6f}")
            rec.append(f"heads={c}")
            out.append(" ".join(rec))
    return out
