"""FLOPs/parameter accounting and attention interaction analysis.

FLOPs are counted as multiply-accumulates (1 MAC = 1 FLOP).
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError
from .io import atomic_write
from .layers import AttentionRecord, pooled_size
from .models import ArchConfig
from .tensor import conv_out_size

FLOPS_COLUMNS = ("component", "macs", "params")
INTERACTION_COLUMNS = ("stage", "block", "threshold", "ratio", "tokens", "n_cls", "images")
RESNET_COLUMNS = ("stage", "height", "width", "ratio")


@dataclass
class FlopsEntry:
    name: str
    macs: int
    params: int


@dataclass
class FlopsReport:
    image_size: int
    entries: list = field(default_factory=list)

    def add(self, name: str, macs: int, params: int) -> None:
        self.entries.append(FlopsEntry(name, int(macs), int(params)))

    @property
    def total_macs(self) -> int:
        return sum(e.macs for e in self.entries)

    @property
    def total_params(self) -> int:
        return sum(e.params for e in self.entries)

    def matching(self, suffix: str) -> int:
        return sum(e.macs for e in self.entries if e.name.endswith(suffix))


def count_flops(config: ArchConfig, image_size: int | None = None) -> FlopsReport:
    """Analytic per-component MACs and parameter counts.

    Per block with ``T`` tokens (class tokens included) and width ``C``:
    QKV ``3TC^2``, scores ``T^2 C``, attention-weighted values ``T^2 C``,
    output projection ``TC^2`` and MLP ``2rTC^2``. Norms and biases add
    parameters but no MACs.
    """
    size = image_size or config.image_size
    rep = FlopsReport(size)
    p, r, n_cls = config.patch_size, config.mlp_ratio, config.n_cls
    h = conv_out_size(size, p, config.stride)
    c = config.stages[0].channels
    rep.add("embed", h * h * c * config.in_chans * p * p,
            c * config.in_chans * p * p + c + (n_cls + h * h) * c + n_cls * c)
    for i, st in enumerate(config.stages):
        c, t = st.channels, n_cls + h * h
        for j in range(st.num_blocks):
            pre = f"stage{i}.block{j}"
            rep.add(f"{pre}.norm", 0, 4 * c)
            rep.add(f"{pre}.qkv", 3 * t * c * c, 3 * (c * c + c))
            rep.add(f"{pre}.scores", t * t * c, 0)
            rep.add(f"{pre}.attn_v", t * t * c, 0)
            rep.add(f"{pre}.proj", t * c * c, c * c + c)
            rep.add(f"{pre}.mlp", 2 * r * t * c * c, 2 * r * c * c + r * c + c)
        if i < len(config.stages) - 1:
            h = pooled_size(h)
            rep.add(f"pool{i}", h * h * 2 * c * 9 + n_cls * c * 2 * c,
                    2 * c * 9 + 2 * c + c * 2 * c + 2 * c)
    c, k = config.stages[-1].channels, config.num_classes
    rep.add("head", c * k, 2 * c + c * k + k)
    return rep


def flops_csv(report: FlopsReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(FLOPS_COLUMNS)
    for e in report.entries:
        w.writerow((e.name, e.macs, e.params))
    w.writerow(("total", report.total_macs, report.total_params))
    return buf.getvalue()


def emit_flops_csv(report: FlopsReport, path) -> None:
    atomic_write(path, flops_csv(report).encode("utf-8"))


def parse_flops_csv(text: str, image_size: int = 0) -> FlopsReport:
    rows = list(csv.DictReader(io.StringIO(text)))
    rep = FlopsReport(image_size)
    for row in rows:
        if row["component"] != "total":
            rep.add(row["component"], int(row["macs"]), int(row["params"]))
    return rep


# ---------------------------------------------------------------------------
# Spatial interaction


@dataclass
class InteractionEntry:
    stage: int
    block: int
    threshold: float
    ratio: float
    tokens: int
    n_cls: int
    images: int


@dataclass
class InteractionReport:
    entries: list = field(default_factory=list)

    @property
    def ratios(self) -> list:
        return [e.ratio for e in self.entries]


def spatial_hits(record: AttentionRecord, threshold: float) -> np.ndarray:
    """Per-query count of spatial keys above ``threshold`` in at least one head, ``[B, T]``."""
    spatial = record.attn[..., record.n_cls:]
    return (spatial > threshold).any(axis=1).sum(axis=-1)


def interaction_ratio(records: Sequence[AttentionRecord], threshold: float) -> InteractionReport:
    """Fraction of spatial keys each query attends to above ``threshold``.

    A key counts once if any head exceeds the threshold (strict inequality).
    The ratio is averaged over all queries (class tokens included) and the
    batch, in execution order.
    """
    if not 0 < threshold < 1:
        raise ConfigError(f"threshold must lie in (0, 1), got {threshold}")
    rep = InteractionReport()
    for rec in records:
        b, _, t, _ = rec.attn.shape
        hw = rec.height * rec.width
        total = int(spatial_hits(rec, threshold).sum())
        rep.entries.append(InteractionEntry(rec.stage_index, rec.block_index, float(threshold),
                                            total / (b * t * hw), t, rec.n_cls, b))
    return rep


def resnet_interaction_approx(spatial_sizes: Iterable) -> list:
    """A 3x3 convolution touches 9 of the H*W locations."""
    out = []
    for h, w in spatial_sizes:
        if h <= 0 or w <= 0:
            raise ValueError(f"spatial extents must be positive, got {h}x{w}")
        out.append(min(1.0, 9.0 / (h * w)))
    return out


def interaction_csv(reports: Sequence[InteractionReport]) -> str:
    if isinstance(reports, InteractionReport):
        reports = [reports]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(INTERACTION_COLUMNS)
    for rep in reports:
        for e in rep.entries:
            w.writerow((e.stage, e.block, f"{e.threshold:g}", f"{e.ratio:.6f}", e.tokens, e.n_cls, e.images))
    return buf.getvalue()


def emit_interaction_csv(reports, path) -> None:
    atomic_write(path, interaction_csv(reports).encode("utf-8"))


def parse_interaction_csv(text: str) -> InteractionReport:
    rep = InteractionReport()
    for row in csv.DictReader(io.StringIO(text)):
        rep.entries.append(InteractionEntry(int(row["stage"]), int(row["block"]), float(row["threshold"]),
                                            float(row["ratio"]), int(row["tokens"]), int(row["n_cls"]),
                                            int(row["images"])))
    return rep


def resnet_csv(spatial_sizes) -> str:
    sizes = list(spatial_sizes)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RESNET_COLUMNS)
    for i, ((h, wd), r) in enumerate(zip(sizes, resnet_interaction_approx(sizes))):
        w.writerow((i, h, wd, f"{r:.6f}"))
    return buf.getvalue()


def merge_reports(reports: Sequence[InteractionReport]) -> InteractionReport:
    """Combine per-batch reports over the same layers, weighting by image count."""
    reports = [r for r in reports if r.entries]
    if not reports:
        return InteractionReport()
    merged = InteractionReport()
    for group in zip(*(r.entries for r in reports)):
        n = sum(e.images for e in group)
        first = group[0]
        merged.entries.append(InteractionEntry(first.stage, first.block, first.threshold,
                                               sum(e.ratio * e.images for e in group) / n,
                                               first.tokens, first.n_cls, n))
    return merged
