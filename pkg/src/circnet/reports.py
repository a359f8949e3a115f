"""Parameter-count reports and dense-vs-compact comparisons.

Per-layer rows follow the weight-matrix convention: the `weights` column
counts trainable weight-matrix (or chain) parameters only, while biases,
normalization variables (4 stored values per normalized feature: scale,
shift, running mean, running variance) and frozen fixed-sign diagonals are
tallied in `stored_extra`. The stored total, weights plus extras, is what a
checkpoint of the model holds and what compression rates are computed from.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import layers
from . import structured as st


@dataclass
class ReportRow:
    layer: str
    layer_size: str
    activation_shape: str
    weight_shape: str
    weights: int
    stored_extra: int


@dataclass
class ParamReport:
    rows: list

    @property
    def total_weights(self) -> int:
        return sum(r.weights for r in self.rows)

    @property
    def total_stored(self) -> int:
        return sum(r.weights + r.stored_extra for r in self.rows)


def _linear_counts(in_dim, out_dim, kind, m):
    """(trainable weights, frozen extras, shape text) for one linear map."""
    if kind == "dense":
        return st.dense_weight_count(in_dim, out_dim), 0, f"({in_dim}, {out_dim})"
    plan = st.adapter_plan(in_dim, out_dim)
    if kind == "dc":
        count = st.structured_weight_count(in_dim, out_dim, m)
        return count, 0, f"{plan.chains}x{m} DC({plan.n})"
    count = st.structured_weight_count(in_dim, out_dim, m, mode="fixed_sign")
    frozen = plan.chains * m * plan.n  # fixed-sign diagonals: stored, not trained
    return count, frozen, f"{plan.chains}x{m} CD({plan.n})"


def _embedding_rows(modality: layers.ModalitySpec, frames: int):
    title = modality.name.capitalize()
    rows = []
    for spec in modality.embeddings:
        act = f"(-1, {frames}, {modality.feature_dim})"
        if spec.type == "dbof":
            weights, frozen, shape = _linear_counts(modality.feature_dim, spec.clusters,
                                                    spec.kind, spec.factors)
            rows.append((ReportRow(f"{title} DBoF", str(spec.clusters), act, shape,
                                   weights, frozen + 4 * spec.clusters), spec))
        else:
            k, c = modality.feature_dim, spec.clusters
            name = "NetVLAD" if spec.type == "netvlad" else "NetFV"
            weights = k * c + c * k          # assignment map + centers
            extra = c                        # assignment bias
            if spec.type == "netfv":
                extra += c                   # per-cluster spreads
            rows.append((ReportRow(f"{title} {name}", str(c), act,
                                   f"({k}, {c}) + ({c}, {k})", weights, extra), spec))
    return rows


def build_report(cfg: layers.ModelConfig) -> ParamReport:
    rows = []
    for modality in cfg.modalities:
        title = modality.name.capitalize()
        emb_rows = _embedding_rows(modality, cfg.frames_sampled)
        multi = len(emb_rows) > 1
        for row, spec in emb_rows:
            rows.append(row)
            in_dim = spec.output_dim(modality.feature_dim)
            weights, frozen, shape = _linear_counts(in_dim, modality.fc_width,
                                                    modality.fc_kind, modality.fc_factors)
            fc_name = f"{title} {row.layer.split(' ', 1)[1]} FC" if multi else f"{title} FC"
            rows.append(ReportRow(fc_name, str(modality.fc_width), f"(-1, {in_dim})",
                                  shape, weights, frozen + 4 * modality.fc_width))
    concat = cfg.concat_dim()
    rows.append(ReportRow("Concat", "-", f"(-1, {concat})", "-", 0, 0))
    gating_out = cfg.num_labels * (cfg.moe_mixtures + 1)
    experts_out = cfg.num_labels * cfg.moe_mixtures
    weights, frozen, shape = _linear_counts(concat, gating_out, cfg.moe_kind, cfg.moe_factors)
    rows.append(ReportRow("MoE Gating", str(cfg.moe_mixtures), f"(-1, {concat})",
                          shape, weights, frozen))
    weights, frozen, shape = _linear_counts(concat, experts_out, cfg.moe_kind, cfg.moe_factors)
    rows.append(ReportRow("MoE Experts", str(cfg.moe_mixtures), f"(-1, {concat})",
                          shape, weights, frozen + experts_out))
    weights, frozen, shape = _linear_counts(cfg.num_labels, cfg.num_labels,
                                            cfg.cg_kind, cfg.cg_factors)
    cg_extra = 4 * cfg.num_labels if cfg.cg_norm == "batch_norm" else cfg.num_labels
    rows.append(ReportRow("Context Gating", "-", f"(-1, {cfg.num_labels})",
                          shape, weights, frozen + cg_extra))
    return ParamReport(rows)


def format_report(report: ParamReport) -> str:
    header = ("Layer", "Layer Size", "Activation shape", "Weight shape", "#Weights")
    table = [header]
    for r in report.rows:
        table.append((r.layer, r.layer_size, r.activation_shape, r.weight_shape,
                      f"{r.weights:,}" if r.weights else "-"))
    widths = [max(len(row[i]) for row in table) for i in range(len(header))]
    lines = []
    for i, row in enumerate(table):
        lines.append("  ".join(cell.ljust(widths[j]) for j, cell in enumerate(row)).rstrip())
        if i == 0:
            lines.append("  ".join("-" * w for w in widths))
    lines.append("")
    lines.append(f"total weight-matrix parameters : {report.total_weights:,}")
    lines.append(f"total stored parameters        : {report.total_stored:,}"
                 " (incl. biases, normalization, frozen signs)")
    return "\n".join(lines)


def csv_rows(report: ParamReport):
    yield ("layer", "layer_size", "activation_shape", "weight_shape",
           "weights", "stored_extra")
    for r in report.rows:
        yield (r.layer, r.layer_size, r.activation_shape, r.weight_shape,
               r.weights, r.stored_extra)
    yield ("Total", "-", "-", "-", report.total_weights,
           report.total_stored - report.total_weights)


def compare_reports(dense: ParamReport, compact: ParamReport) -> dict:
    """Totals and the saved-percentage rate (exact and display-truncated)."""
    rate = st.compression_rate(dense.total_stored, compact.total_stored)
    return {
        "dense_total": dense.total_stored,
        "compact_total": compact.total_stored,
        "rate": rate,
        "rate_display": st.truncate_rate(rate),
    }


def stored_entry_count(model: layers.VideoClassifier) -> int:
    """Stored scalar count of an actual model; must equal the report total."""
    total = sum(t.size for _, t in model.parameters())
    total += sum(a.size for _, a in model.state_arrays())
    total += sum(t.size for _, t in model.frozen_tensors())
    return total
