"""Prune reports and the run summary table."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

from .metrics import read_metrics


@dataclass
class LayerReport:
    name: str
    components: int
    kept: int
    prunable: int
    kept_params: int


@dataclass
class PruneReport:
    layers: list = field(default_factory=list)
    total_params: int = 0
    prunable_params: int = 0
    kept_expected: float = 0.0
    kept_actual: int = 0
    kept_total: int = 0
    compression: float = 0.0
    prunable_compression: float = 0.0
    target_compression: float = 0.0
    method: str = ""

    def to_dict(self):
        return asdict(self)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")

    @classmethod
    def load(cls, path):
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
        layers = [LayerReport(**lr) for lr in data.pop("layers")]
        return cls(layers=layers, **data)


def build_prune_report(model, method="", target_compression=0.0) -> PruneReport:
    counts = model.parameter_count()
    layers = []
    for name, layer in model.gated_layers():
        if hasattr(layer, "clusters"):
            for i, c in enumerate(layer.clusters):
                g = c["gate"]
                if g is None:
                    continue
                kept, _ = g.inference_mask()
                layers.append(LayerReport(
                    name=f"{name}.cluster{i}", components=g.n, kept=int(kept.size),
                    prunable=int(g.block_sizes.sum()),
                    kept_params=int(g.block_sizes[kept].sum())))
        elif layer.gate is not None:
            g = layer.gate
            kept, _ = g.inference_mask()
            layers.append(LayerReport(
                name=name, components=g.n, kept=int(kept.size),
                prunable=int(g.block_sizes.sum()),
                kept_params=int(g.block_sizes[kept].sum())))
    return PruneReport(
        layers=layers,
        total_params=counts.total,
        prunable_params=counts.prunable,
        kept_expected=counts.kept_expected,
        kept_actual=counts.kept_actual,
        kept_total=counts.kept_total,
        compression=counts.compression,
        prunable_compression=counts.prunable_compression,
        target_compression=target_compression,
        method=method,
    )


def _fmt_size(n):
    if n >= 1_000_000:
        return f"{n / 1e6:.2f}M"
    if n >= 1_000:
        return f"{n / 1e3:.1f}K"
    return str(n)


def summarize_run(run_dir: str) -> dict:
    """Collapse one run directory into a summary row."""
    row = {"run": os.path.basename(os.path.normpath(run_dir))}
    cfg_path = os.path.join(run_dir, "config.json")
    if os.path.exists(cfg_path):
        with open(cfg_path, "r", encoding="utf-8") as f:
            cfg = json.load(f)
        row["method"] = cfg.get("method", "?")
        row["target"] = cfg.get("target_compression", 0.0)
    rep_path = os.path.join(run_dir, "prune_report.json")
    if os.path.exists(rep_path):
        rep = PruneReport.load(rep_path)
        row["size"] = rep.kept_total
        row["compression"] = rep.compression
    metrics_path = os.path.join(run_dir, "metrics.jsonl")
    if os.path.exists(metrics_path):
        records = read_metrics(metrics_path)
        for rec in reversed(records):
            if "valid_bpc" in rec:
                row.setdefault("valid_bpc", rec["valid_bpc"])
            if "test_bpc" in rec:
                row.setdefault("test_bpc", rec["test_bpc"])
            if "s" in rec and "final_s" not in row:
                row["final_s"] = rec["s"]
                row["final_t"] = rec.get("t")
            if all(k in row for k in ("valid_bpc", "test_bpc", "final_s")):
                break
    return row


def render_table(rows) -> str:
    """Method | Size | Compress | BPC table over run summaries."""
    header = f"{'Run':24s} {'Method':10s} {'Size':>10s} {'Compress':>9s} {'Valid BPC':>10s} {'Test BPC':>9s}"
    lines = [header, "-" * len(header)]
    for row in rows:
        comp = row.get("compression")
        lines.append(" ".join([
            f"{row.get('run', '?'):24s}",
            f"{row.get('method', '?'):10s}",
            f"{_fmt_size(row['size']) if 'size' in row else '-':>10s}",
            f"{comp * 100:8.1f}%" if comp is not None else f"{'-':>9s}",
            f"{row['valid_bpc']:10.4f}" if "valid_bpc" in row else f"{'-':>10s}",
            f"{row['test_bpc']:9.4f}" if "test_bpc" in row else f"{'-':>9s}",
        ]))
    return "\n".join(lines)
