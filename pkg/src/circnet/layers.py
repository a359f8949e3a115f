"""Architecture blocks and the video-classifier assemblies.

Blocks: frame-set embeddings (bag-of-frames projection with max, average or
robust pooling; learned-codebook residual aggregation; first+second order
codebook statistics), a per-label mixture-of-experts head with a dummy gate,
and context gating. The classifier wires, per modality, one or more
embeddings each followed by a reduction FC; several embeddings within one
modality are averaged, then modalities are concatenated and classified.

Every linear map can be dense or a diagonal-circulant chain, so compact and
dense variants of the same architecture share all surrounding code.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .structured import StructuredLinear

POOLINGS = ("max", "average", "robust")
SPREAD_FLOOR = 1e-4


class BatchNorm:
    """Per-feature normalization over batch (and frame) axes with running stats."""

    def __init__(self, dim, name="bn", momentum=0.99):
        self.dim = int(dim)
        self.name = name
        self.momentum = momentum
        self.gamma = ag.parameter(np.ones(self.dim), name=f"{name}.gamma")
        self.beta = ag.parameter(np.zeros(self.dim), name=f"{name}.beta")
        self.running_mean = np.zeros(self.dim)
        self.running_var = np.ones(self.dim)

    def __call__(self, x, training: bool):
        return ag.batch_norm(x, self.gamma, self.beta, self.running_mean,
                             self.running_var, training, momentum=self.momentum)

    def parameters(self):
        return [(self.gamma.name, self.gamma), (self.beta.name, self.beta)]

    def state_arrays(self):
        return [(f"{self.name}.running_mean", self.running_mean),
                (f"{self.name}.running_var", self.running_var)]

    def load_state(self, name, value):
        if name.endswith("running_mean"):
            self.running_mean[:] = value
        else:
            self.running_var[:] = value


# ---------------------------------------------------------------------------
# configs
# ---------------------------------------------------------------------------

@dataclass
class DBoFConfig:
    feature_dim: int
    cluster_size: int
    pooling: str = "max"
    robust_samples: int = 10
    robust_sample_size: int = 15
    robust_exhaustive: bool = False
    kind: str = "dense"  # projection backing: dense | dc | cd
    factors: int = 1

    def validate(self):
        if self.pooling not in POOLINGS:
            raise ValueError(f"unknown pooling {self.pooling!r}")
        if self.pooling == "robust" and (self.robust_samples < 1 or self.robust_sample_size < 1):
            raise ValueError("robust pooling needs robust_samples >= 1 and robust_sample_size >= 1")
        if self.cluster_size <= self.feature_dim:
            warnings.warn("cluster_size not above feature_dim; the projection does not widen",
                          stacklevel=2)

    @property
    def output_dim(self):
        return self.cluster_size


@dataclass
class EmbeddingConfig:
    """Codebook embeddings: residual aggregation ('netvlad') or first+second
    order statistics ('netfv')."""

    feature_dim: int
    clusters: int
    second_order: bool = False

    @property
    def output_dim(self):
        return (2 if self.second_order else 1) * self.clusters * self.feature_dim


@dataclass
class MoEConfig:
    input_dim: int
    num_labels: int
    num_mixtures: int = 2
    kind: str = "dense"
    factors: int = 1

    @property
    def gating_dim(self):
        return self.num_labels * (self.num_mixtures + 1)

    @property
    def experts_dim(self):
        return self.num_labels * self.num_mixtures


@dataclass
class ContextGatingConfig:
    dim: int
    kind: str = "dense"
    factors: int = 1
    norm: str = "batch_norm"  # batch_norm | bias

    def validate(self):
        if self.norm not in ("batch_norm", "bias"):
            raise ValueError(f"unknown context-gating norm {self.norm!r}")


# ---------------------------------------------------------------------------
# robust pooling
# ---------------------------------------------------------------------------

def _canonical_order(rows: np.ndarray) -> np.ndarray:
    """Lexicographic row order, so sampling ignores the caller's frame order."""
    return np.lexsort(rows.T[::-1])


def robust_pool(projected: np.ndarray, n_s: int, k_s: int, rng_seed: int,
                exhaustive: bool = False) -> np.ndarray:
    """Average of per-subset maxima over n_s random frame subsets of size k_s.

    Subsets are drawn with replacement from the canonically ordered frame set,
    so the result depends only on the set of frames and the seed. Exhaustive
    mode uses every frame in each subset, which reduces to plain max pooling.
    """
    projected = np.asarray(projected, dtype=np.float64)
    if projected.ndim != 2 or projected.shape[0] < 1:
        raise ValueError("expected a nonempty (frames, dim) array")
    if n_s < 1 or k_s < 1:
        raise ValueError("n_s and k_s must be positive")
    if exhaustive:
        return projected.max(axis=0)
    order = _canonical_order(projected)
    rng = np.random.default_rng(np.random.SeedSequence([int(rng_seed)]))
    draws = rng.integers(0, projected.shape[0], size=(n_s, k_s))
    subsets = projected[order][draws]  # (n_s, k_s, dim)
    return subsets.max(axis=1).mean(axis=0)


def _robust_pool_batched(projected, order_keys: np.ndarray, n_s: int, k_s: int,
                         rngs, exhaustive: bool):
    """Taped robust pooling for a batch; order_keys fixes the canonical order."""
    if exhaustive:
        return ag.reduce_max_over_set(projected, axis=1)
    n_frames = projected.data.shape[1]
    idx = np.empty((projected.data.shape[0], n_s * k_s), dtype=np.intp)
    for b, rng in enumerate(rngs):
        order = _canonical_order(order_keys[b])
        idx[b] = order[rng.integers(0, n_frames, size=n_s * k_s)]
    picked = ag.gather_frames(projected, idx)
    shaped = ag.reshape(picked, (idx.shape[0], n_s, k_s, projected.data.shape[-1]))
    return ag.reduce_mean(ag.reduce_max_over_set(shaped, axis=2), axis=1)


# ---------------------------------------------------------------------------
# embedding blocks
# ---------------------------------------------------------------------------

class DBoF:
    """Per-frame projection into a wide space, then pooling over the frame set."""

    def __init__(self, cfg: DBoFConfig, rng, name="dbof"):
        cfg.validate()
        self.cfg = cfg
        self.name = name
        self.proj = StructuredLinear(cfg.feature_dim, cfg.cluster_size, kind=cfg.kind,
                                     m=cfg.factors, bias=False, rng=rng, name=f"{name}.proj")
        self.bn = BatchNorm(cfg.cluster_size, name=f"{name}.bn")

    @property
    def output_dim(self):
        return self.cfg.cluster_size

    def forward(self, frames, training=False, subset_rngs=None):
        frames = ag.as_tensor(frames)
        if frames.data.shape[1] < 1:
            raise ValueError("empty frame set")
        z = ag.relu(self.bn(self.proj.apply(frames), training))
        if self.cfg.pooling == "max":
            return ag.reduce_max_over_set(z, axis=1)
        if self.cfg.pooling == "average":
            return ag.reduce_mean(z, axis=1)
        if subset_rngs is None:
            subset_rngs = [np.random.default_rng(np.random.SeedSequence([0, b]))
                           for b in range(frames.data.shape[0])]
        return _robust_pool_batched(z, frames.data, self.cfg.robust_samples,
                                    self.cfg.robust_sample_size, subset_rngs,
                                    self.cfg.robust_exhaustive)

    def parameters(self):
        return self.proj.parameters() + self.bn.parameters()

    def batch_norms(self):
        return [self.bn]

    def frozen_tensors(self):
        return self.proj.frozen_tensors()


class CodebookEmbedding:
    """Soft-assignment codebook aggregation over the frame set.

    First-order output collects assignment-weighted residuals against the
    learned centers; with second_order enabled, assignment-weighted
    (residual^2 - spread^2) statistics are appended. Blocks are L2-normalized
    per cluster, then the flattened vector is L2-normalized globally.
    """

    def __init__(self, cfg: EmbeddingConfig, rng, name="codebook"):
        self.cfg = cfg
        self.name = name
        k, c = cfg.feature_dim, cfg.clusters
        scale = 1.0 / np.sqrt(k)
        self.assign_w = ag.parameter(rng.normal(0.0, scale, (k, c)), name=f"{name}.assign.w")
        self.assign_b = ag.parameter(np.zeros(c), name=f"{name}.assign.b")
        self.centers = ag.parameter(rng.normal(0.0, scale, (c, k)), name=f"{name}.centers")
        self.spreads = (ag.parameter(np.ones(c), name=f"{name}.spreads")
                        if cfg.second_order else None)

    @property
    def output_dim(self):
        return self.cfg.output_dim

    def forward(self, frames, training=False, subset_rngs=None):
        frames = ag.as_tensor(frames)
        batch, n_frames, k = frames.data.shape
        if n_frames < 1:
            raise ValueError("empty frame set")
        c = self.cfg.clusters
        assign = ag.softmax(ag.bias_add(ag.dense_matmul(frames, self.assign_w),
                                        self.assign_b), axis=-1)      # (B, F, C)
        assign_t = ag.swap_last_axes(assign)                          # (B, C, F)
        weighted = ag.batched_matmul(assign_t, frames)                # (B, C, k)
        mass = ag.reshape(ag.reduce_sum(assign, axis=1), (batch, c, 1))
        first = ag.sub(weighted, ag.mul(mass, self.centers))
        if self.spreads is None:
            blocks = first
        else:
            sq = ag.batched_matmul(assign_t, ag.mul(frames, frames))
            cross = ag.mul(ag.scale(self.centers, 2.0), weighted)
            spread = ag.clamp_min(self.spreads, SPREAD_FLOOR)
            var_term = ag.sub(ag.mul(self.centers, self.centers),
                              ag.reshape(ag.mul(spread, spread), (c, 1)))
            second = ag.add(ag.sub(sq, cross), ag.mul(mass, var_term))
            blocks = ag.concat([first, second], axis=1)               # (B, 2C, k)
        blocks = ag.l2_normalize(blocks, axis=-1)
        flat = ag.reshape(blocks, (batch, self.output_dim))
        return ag.l2_normalize(flat, axis=-1)

    def parameters(self):
        out = [(self.assign_w.name, self.assign_w), (self.assign_b.name, self.assign_b),
               (self.centers.name, self.centers)]
        if self.spreads is not None:
            out.append((self.spreads.name, self.spreads))
        return out

    def batch_norms(self):
        return []

    def frozen_tensors(self):
        return []


# ---------------------------------------------------------------------------
# classification blocks
# ---------------------------------------------------------------------------

class MoE:
    """Per-label mixture of logistic experts with a dummy no-expert gate option."""

    def __init__(self, cfg: MoEConfig, rng, name="moe"):
        self.cfg = cfg
        self.name = name
        self.gating = StructuredLinear(cfg.input_dim, cfg.gating_dim, kind=cfg.kind,
                                       m=cfg.factors, bias=False, rng=rng,
                                       name=f"{name}.gating")
        self.experts = StructuredLinear(cfg.input_dim, cfg.experts_dim, kind=cfg.kind,
                                        m=cfg.factors, bias=True, rng=rng,
                                        name=f"{name}.experts")

    def forward(self, x):
        x = ag.as_tensor(x)
        batch = x.data.shape[0]
        labels, mixtures = self.cfg.num_labels, self.cfg.num_mixtures
        gates = ag.softmax(ag.reshape(self.gating.apply(x), (batch, labels, mixtures + 1)),
                           axis=-1)
        used = ag.slice_lastaxis(gates, 0, mixtures)
        opinions = ag.sigmoid(ag.reshape(self.experts.apply(x), (batch, labels, mixtures)))
        return ag.reduce_sum(ag.mul(used, opinions), axis=2)

    def parameters(self):
        return self.gating.parameters() + self.experts.parameters()

    def frozen_tensors(self):
        return self.gating.frozen_tensors() + self.experts.frozen_tensors()


class ContextGating:
    """Reweights a probability vector by a sigmoid gate computed from itself."""

    def __init__(self, cfg: ContextGatingConfig, rng, name="cg"):
        cfg.validate()
        self.cfg = cfg
        self.name = name
        self.w = StructuredLinear(cfg.dim, cfg.dim, kind=cfg.kind, m=cfg.factors,
                                  bias=(cfg.norm == "bias"), rng=rng, name=f"{name}.w")
        self.bn = BatchNorm(cfg.dim, name=f"{name}.bn") if cfg.norm == "batch_norm" else None

    def forward(self, probs, training=False):
        probs = ag.as_tensor(probs)
        gates = self.w.apply(probs)
        if self.bn is not None:
            gates = self.bn(gates, training)
        return ag.mul(ag.sigmoid(gates), probs)

    def parameters(self):
        out = self.w.parameters()
        if self.bn is not None:
            out += self.bn.parameters()
        return out

    def batch_norms(self):
        return [self.bn] if self.bn is not None else []

    def frozen_tensors(self):
        return self.w.frozen_tensors()


# ---------------------------------------------------------------------------
# full model
# ---------------------------------------------------------------------------

@dataclass
class EmbeddingSpec:
    type: str = "dbof"  # dbof | netvlad | netfv
    clusters: int = 128
    pooling: str = "max"
    robust_samples: int = 10
    robust_sample_size: int = 15
    robust_exhaustive: bool = False
    kind: str = "dense"
    factors: int = 1

    def output_dim(self, feature_dim):
        if self.type == "dbof":
            return self.clusters
        if self.type == "netvlad":
            return self.clusters * feature_dim
        if self.type == "netfv":
            return 2 * self.clusters * feature_dim
        raise ValueError(f"unknown embedding type {self.type!r}")


@dataclass
class ModalitySpec:
    name: str
    feature_dim: int
    embeddings: list
    fc_width: int = 32
    fc_kind: str = "dense"
    fc_factors: int = 1


@dataclass
class ModelConfig:
    """Shapes and backing choices for one classifier instance."""

    num_labels: int = 64
    frames_sampled: int = 150
    modalities: list = field(default_factory=list)
    moe_mixtures: int = 2
    moe_kind: str = "dense"
    moe_factors: int = 1
    cg_kind: str = "dense"
    cg_factors: int = 1
    cg_norm: str = "batch_norm"
    sample_seed: int = 0

    def concat_dim(self):
        return sum(m.fc_width for m in self.modalities)

    def build(self, seed: int = 0) -> "VideoClassifier":
        return VideoClassifier(self, seed)


def _build_embedding(spec: EmbeddingSpec, feature_dim: int, rng, name: str):
    if spec.type == "dbof":
        cfg = DBoFConfig(feature_dim=feature_dim, cluster_size=spec.clusters,
                         pooling=spec.pooling, robust_samples=spec.robust_samples,
                         robust_sample_size=spec.robust_sample_size,
                         robust_exhaustive=spec.robust_exhaustive,
                         kind=spec.kind, factors=spec.factors)
        return DBoF(cfg, rng, name=name)
    cfg = EmbeddingConfig(feature_dim=feature_dim, clusters=spec.clusters,
                          second_order=(spec.type == "netfv"))
    return CodebookEmbedding(cfg, rng, name=name)


class VideoClassifier:
    """Per-modality embeddings and FCs, averaged within modality, concatenated,
    then mixture-of-experts and context gating."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        if not config.modalities:
            raise ValueError("model needs at least one modality")
        self.config = config
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x3D]))
        self.branches = {}
        for modality in config.modalities:
            branch = []
            for i, emb_spec in enumerate(modality.embeddings):
                prefix = f"{modality.name}.emb{i}"
                emb = _build_embedding(emb_spec, modality.feature_dim, rng, prefix)
                fc = StructuredLinear(emb.output_dim, modality.fc_width,
                                      kind=modality.fc_kind, m=modality.fc_factors,
                                      bias=False, rng=rng, name=f"{prefix}.fc")
                bn = BatchNorm(modality.fc_width, name=f"{prefix}.fc.bn")
                branch.append((emb, fc, bn))
            self.branches[modality.name] = branch
        self.moe = MoE(MoEConfig(input_dim=config.concat_dim(),
                                 num_labels=config.num_labels,
                                 num_mixtures=config.moe_mixtures,
                                 kind=config.moe_kind, factors=config.moe_factors),
                       rng, name="moe")
        self.cg = ContextGating(ContextGatingConfig(dim=config.num_labels,
                                                    kind=config.cg_kind,
                                                    factors=config.cg_factors,
                                                    norm=config.cg_norm),
                                rng, name="cg")

    def _subset_rngs(self, count, example_ids, epoch, training):
        tag = epoch + 1 if training else 0
        ids = example_ids if example_ids is not None else np.arange(count)
        return [np.random.default_rng(
            np.random.SeedSequence([self.config.sample_seed, int(i), tag]))
            for i in ids]

    def forward(self, inputs: dict, training=False, example_ids=None, epoch=0):
        """inputs maps modality name to a (B, F, k) frame array; returns (B, L) probs."""
        outputs = []
        rngs = None
        for modality in self.config.modalities:
            frames = ag.as_tensor(inputs[modality.name])
            branch_outs = []
            for emb, fc, bn in self.branches[modality.name]:
                if isinstance(emb, DBoF) and emb.cfg.pooling == "robust":
                    if rngs is None:
                        rngs = self._subset_rngs(frames.data.shape[0], example_ids,
                                                 epoch, training)
                    e = emb.forward(frames, training, subset_rngs=rngs)
                else:
                    e = emb.forward(frames, training)
                branch_outs.append(ag.relu(bn(fc.apply(e), training)))
            if len(branch_outs) == 1:
                outputs.append(branch_outs[0])
            else:
                total = branch_outs[0]
                for extra in branch_outs[1:]:
                    total = ag.add(total, extra)
                outputs.append(ag.scale(total, 1.0 / len(branch_outs)))
        merged = outputs[0] if len(outputs) == 1 else ag.concat(outputs, axis=-1)
        probs = self.moe.forward(merged)
        return self.cg.forward(probs, training)

    def parameters(self):
        out = []
        for modality in self.config.modalities:
            for emb, fc, bn in self.branches[modality.name]:
                out += emb.parameters() + fc.parameters() + bn.parameters()
        out += self.moe.parameters() + self.cg.parameters()
        return out

    def batch_norms(self):
        out = []
        for modality in self.config.modalities:
            for emb, fc, bn in self.branches[modality.name]:
                out += emb.batch_norms() + [bn]
        out += self.cg.batch_norms()
        return out

    def frozen_tensors(self):
        out = []
        for modality in self.config.modalities:
            for emb, fc, bn in self.branches[modality.name]:
                out += emb.frozen_tensors() + fc.frozen_tensors()
        out += self.moe.frozen_tensors() + self.cg.frozen_tensors()
        return out

    def state_arrays(self):
        return [pair for bn in self.batch_norms() for pair in bn.state_arrays()]
