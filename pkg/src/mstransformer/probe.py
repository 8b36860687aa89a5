"""Attention-edge distances: argmax edges per query and their histograms.

Attention dumps (from a local model or any other system) live in a directory::

    manifest.json   {"format": "mstransformer-attention/1", "n": <max length>,
                     "layers": L, "heads": H, "lengths": [n_0, n_1, ...],
                     "file": "attention.bin"}
    attention.bin   tensor file with one record "seq{s}.layer{l}" of shape
                    (H, n_s, n_s) per sequence s and 1-based layer l.

Row ``j`` of each ``(n_s, n_s)`` map holds the weights query ``j`` puts on
every key; keys outside a windowed head's reach simply carry zero.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .serialize import load_tensors, save_tensors

DUMP_FORMAT = "mstransformer-attention/1"
ALL_HEADS = "ALL"


@dataclass(frozen=True)
class AttentionRecord:
    layer: int
    head: int
    query: int
    key: int

    @property
    def distance(self) -> int:
        return abs(self.query - self.key)


def edge_keys(attn: np.ndarray, offsets: Optional[Sequence[int]] = None) -> np.ndarray:
    """Absolute argmax key for every query row of a ``(N, M)`` map.

    ``np.argmax`` returns the first maximum, so ties go to the smallest key
    index. When ``offsets`` is given, row ``j`` covers keys starting at
    ``offsets[j]`` (a clipped window) and the argmax is shifted back.
    """
    attn = np.asarray(attn)
    if attn.ndim != 2 or attn.size == 0:
        raise ValueError(f"expected a non-empty (N, M) attention map, got shape {attn.shape}")
    keys = np.argmax(attn, axis=1)
    if offsets is not None:
        offsets = np.asarray(offsets, dtype=np.int64)
        if offsets.shape != (attn.shape[0],):
            raise ValueError("need one window offset per query row")
        keys = keys + offsets
    return keys


def extract_edges(attn: np.ndarray, layer: int = 1, head: int = 0,
                  offsets: Optional[Sequence[int]] = None) -> list[AttentionRecord]:
    """One record per query row: the key it attends to most."""
    keys = edge_keys(attn, offsets)
    return [AttentionRecord(layer, head, j, int(k)) for j, k in enumerate(keys)]


def n_buckets(n: int, truncate_at_half: bool = True) -> int:
    """Bucket count for sequences of length ``n``.

    Without truncation there is one bucket per possible distance ``0..n-1``.
    With truncation the last bucket ``n // 2`` also collects every longer
    distance.
    """
    if n < 1:
        raise ValueError("sequence length must be >= 1")
    return n // 2 + 1 if truncate_at_half else n


def distance_histogram(distances: Iterable, n: int, buckets: Optional[int] = None,
                       truncate_at_half: bool = True) -> np.ndarray:
    """Percentage of edges per distance bucket; distances past the last bucket pool into it."""
    d = np.fromiter((r.distance if isinstance(r, AttentionRecord) else r for r in distances),
                    dtype=np.int64)
    if d.size == 0:
        raise ValueError("no attention records to histogram")
    if (d < 0).any():
        raise ValueError("distances must be non-negative")
    nb = buckets if buckets is not None else n_buckets(n, truncate_at_half)
    if nb < 1:
        raise ValueError("need at least one bucket")
    counts = np.bincount(np.minimum(d, nb - 1), minlength=nb)
    return counts * (100.0 / d.size)


@dataclass
class ProbeReport:
    """Edge distances grouped by layer and head, plus each head's window width when known."""

    n: int
    distances: dict[tuple[int, int], list[np.ndarray]] = field(default_factory=dict)
    widths: dict[tuple[int, int], int] = field(default_factory=dict)

    def add(self, layer: int, head: int, dist: np.ndarray) -> None:
        self.distances.setdefault((layer, head), []).append(np.asarray(dist, dtype=np.int64))

    def head_distances(self, layer: int, head: int) -> np.ndarray:
        return np.concatenate(self.distances[(layer, head)])

    def layer_distances(self, layer: int) -> np.ndarray:
        return np.concatenate([np.concatenate(v) for (l, _), v in sorted(self.distances.items())
                               if l == layer])

    @property
    def layers(self) -> list[int]:
        return sorted({l for l, _ in self.distances})

    def heads(self, layer: int) -> list[int]:
        return sorted(h for l, h in self.distances if l == layer)

    def histograms(self, truncate_at_half: bool = True) -> list[dict]:
        """Rows ``{layer, head, distance_bucket, percentage}``; ``head`` is ``ALL`` for the layer mix."""
        rows = []
        for layer in self.layers:
            groups = [(ALL_HEADS, self.layer_distances(layer))]
            groups += [(h, self.head_distances(layer, h)) for h in self.heads(layer)]
            for head, dist in groups:
                pct = distance_histogram(dist, self.n, truncate_at_half=truncate_at_half)
                rows.extend({"layer": layer, "head": head, "distance_bucket": b, "percentage": float(p)}
                            for b, p in enumerate(pct))
        return rows


def probe_maps(maps_per_sequence: Iterable[Sequence[np.ndarray]], n: Optional[int] = None,
               widths: Optional[dict] = None) -> ProbeReport:
    """Build a report from ``[layer][head, N, N]`` maps, one entry per sequence."""
    seqs = list(maps_per_sequence)
    if not seqs:
        raise ValueError("no attention maps to probe")
    longest = max(m.shape[-1] for layers in seqs for m in layers)
    report = ProbeReport(n if n is not None else longest, widths=dict(widths or {}))
    for layers in seqs:
        for li, heads in enumerate(layers, start=1):
            heads = np.asarray(heads)
            if heads.ndim != 3 or heads.shape[1] != heads.shape[2]:
                raise ValueError(f"layer {li}: expected (heads, N, N) maps, got {heads.shape}")
            q = np.arange(heads.shape[1])
            for h in range(heads.shape[0]):
                report.add(li, h, np.abs(edge_keys(heads[h]) - q))
    return report


def head_widths(model, n: int) -> dict[tuple[int, int], int]:
    """Window width of every (layer, head) at length ``n``; full-attention heads get ``2n - 1``."""
    out = {}
    for li in range(model.config.n_layers):
        if model.config.kind == "ms":
            ws = model.plans[li].widths(n)
        else:
            ws = [2 * n - 1] * model.config.n_heads
        out.update({(li + 1, h): min(w, 2 * n - 1) for h, w in enumerate(ws)})
    return out


def model_maps(model, corpus: Iterable) -> Iterable[list[np.ndarray]]:
    """Per-sequence ``[layer] -> (heads, N, N)`` maps from an eval-mode forward pass."""
    for seq in corpus:
        _, maps = model.encode(seq, training=False, retain=True)
        yield [np.asarray(m)[0] for m in maps]


def probe_model(model, corpus: Sequence) -> ProbeReport:
    """Encode every sequence with attention retention and histogram the edges."""
    corpus = list(corpus)
    if not corpus:
        raise ValueError("empty probe corpus")
    maps = list(model_maps(model, corpus))
    report = probe_maps(maps)
    # ratio widths grow with length; keep the widest so the bound covers every sequence
    for layers in maps:
        for key, w in head_widths(model, layers[0].shape[-1]).items():
            report.widths[key] = max(report.widths.get(key, 0), w)
    return report


def export_attention(maps_per_sequence: Iterable[Sequence[np.ndarray]], directory) -> Path:
    seqs = [[np.asarray(m, dtype=np.float64) for m in layers] for layers in maps_per_sequence]
    if not seqs:
        raise ValueError("nothing to export")
    n_layers, n_heads = len(seqs[0]), seqs[0][0].shape[0]
    tensors, lengths = {}, []
    for s, layers in enumerate(seqs):
        if len(layers) != n_layers or any(m.shape[0] != n_heads for m in layers):
            raise ValueError(f"sequence {s}: layer/head counts differ from sequence 0")
        lengths.append(int(layers[0].shape[-1]))
        for li, m in enumerate(layers, start=1):
            tensors[f"seq{s}.layer{li}"] = m
    path = Path(directory)
    path.mkdir(parents=True, exist_ok=True)
    manifest = {"format": DUMP_FORMAT, "n": max(lengths), "layers": n_layers, "heads": n_heads,
                "lengths": lengths, "file": "attention.bin"}
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    save_tensors(path / "attention.bin", tensors)
    return path


def load_attention(directory) -> tuple[dict, list[list[np.ndarray]]]:
    path = Path(directory)
    manifest_path = path / "manifest.json"
    if not manifest_path.is_file():
        raise FileNotFoundError(f"{manifest_path}: attention manifest not found")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != DUMP_FORMAT:
        raise ValueError(f"{manifest_path}: unsupported format {manifest.get('format')!r}")
    for key in ("n", "layers", "heads", "lengths", "file"):
        if key not in manifest:
            raise ValueError(f"{manifest_path}: missing key {key!r}")
    tensors = load_tensors(path / manifest["file"])
    L, H = manifest["layers"], manifest["heads"]
    seqs = []
    for s, n_s in enumerate(manifest["lengths"]):
        if not 1 <= n_s <= manifest["n"]:
            raise ValueError(f"sequence {s}: length {n_s} outside 1..{manifest['n']}")
        layers = []
        for li in range(1, L + 1):
            name = f"seq{s}.layer{li}"
            if name not in tensors:
                raise ValueError(f"{path}: missing tensor {name}")
            if tensors[name].shape != (H, n_s, n_s):
                raise ValueError(f"{name}: shape {tensors[name].shape}, expected {(H, n_s, n_s)}")
            layers.append(tensors[name])
        seqs.append(layers)
    expected = {f"seq{s}.layer{li}" for s in range(len(seqs)) for li in range(1, L + 1)}
    if set(tensors) != expected:
        raise ValueError(f"{path}: unexpected tensors {sorted(set(tensors) - expected)}")
    return manifest, seqs


def probe_dump(directory) -> ProbeReport:
    manifest, seqs = load_attention(directory)
    return probe_maps(seqs, n=manifest["n"])


def write_histogram_csv(path, rows: Sequence[dict]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer", "head", "distance_bucket", "percentage"])
        for r in rows:
            w.writerow([r["layer"], r["head"], r["distance_bucket"], repr(r["percentage"])])
