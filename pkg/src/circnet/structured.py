"""Diagonal-circulant factor chains and rectangular structured linear layers.

A square operator is represented as an ordered product of (diagonal,
circulant) pairs applied through the FFT core. Rectangular shapes are reached
by concatenating several square chains (when widening) or slicing one chain's
output (when narrowing); inputs whose width is not a power of two are
zero-padded up to the chain size here, never inside the FFT core.

Parameter counting follows one convention everywhere: a learned pair of size
n costs 2n, a fixed-sign pair costs n (the +-1 diagonal is frozen), biases
and normalization variables are tallied separately by the reporting layer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from . import fft

MATERIALIZE_LIMIT = 4096
FIT_DIM_LIMIT = 64


class FitDivergenceError(ArithmeticError):
    """Chain fitting produced a non-finite error; carries the failing step."""

    def __init__(self, step: int):
        super().__init__(f"fit diverged at step {step}")
        self.step = step


def next_pow2(n: int) -> int:
    return 1 << (int(n) - 1).bit_length()


def circulant_dense(c: np.ndarray) -> np.ndarray:
    """Dense matrix M with M[i, j] = c[(i - j) mod n]: rows are cyclic right shifts."""
    c = np.asarray(c, dtype=np.float64)
    n = c.size
    first_row = np.concatenate([c[:1], c[:0:-1]])
    m = np.empty((n, n))
    for i in range(n):
        m[i] = np.roll(first_row, i)
    return m


def circ_matvec(c: np.ndarray, x: np.ndarray) -> np.ndarray:
    """circ(c) @ x for each row of x, computed in O(n log n) via the FFT core."""
    c = np.asarray(c, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != c.size:
        raise ValueError(f"dimension mismatch: vector {x.shape[-1]} vs circulant {c.size}")
    return fft.circular_convolve(c, x)


@dataclass
class CirculantFactor:
    """Square circulant factor, fully determined by its first column."""

    c: np.ndarray

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=np.float64)

    @property
    def n(self) -> int:
        return self.c.size

    def matvec(self, x):
        return circ_matvec(self.c, x)

    def materialize(self) -> np.ndarray:
        return circulant_dense(self.c)

    def param_count(self) -> int:
        return self.n


@dataclass
class DiagonalFactor:
    """Square diagonal factor; fixed-sign mode freezes entries at +-1."""

    d: np.ndarray
    mode: str = "learned"

    def __post_init__(self):
        self.d = np.asarray(self.d, dtype=np.float64)
        if self.mode not in ("learned", "fixed_sign"):
            raise ValueError(f"unknown diagonal mode {self.mode!r}")
        if self.mode == "fixed_sign" and not np.all(np.abs(self.d) == 1.0):
            raise ValueError("fixed_sign diagonal entries must be +-1")

    @property
    def n(self) -> int:
        return self.d.size

    def matvec(self, x):
        return np.asarray(x) * self.d

    def param_count(self) -> int:
        return 0 if self.mode == "fixed_sign" else self.n


class DCChain:
    """Ordered product of (diagonal, circulant) pairs sharing one dimension."""

    def __init__(self, pairs):
        pairs = list(pairs)
        if not pairs:
            raise ValueError("chain needs at least one factor pair")
        n = pairs[0][0].n
        for d, c in pairs:
            if d.n != n or c.n != n:
                raise ValueError("all chain factors must share one dimension")
        self.pairs = pairs
        self.n = n

    @property
    def m(self) -> int:
        return len(self.pairs)

    def apply(self, x):
        """Product times x: the last pair's circulant acts first, the first pair's diagonal last."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.n:
            raise ValueError(f"dimension mismatch: vector {x.shape[-1]} vs chain {self.n}")
        for d, c in reversed(self.pairs):
            x = c.matvec(x)
            x = d.matvec(x)
        return x

    def materialize(self) -> np.ndarray:
        if self.n > MATERIALIZE_LIMIT:
            raise ValueError(f"refusing to materialize chain of size {self.n} > {MATERIALIZE_LIMIT}")
        out = np.eye(self.n)
        for d, c in reversed(self.pairs):
            out = c.materialize() @ out
            out = d.d[:, None] * out
        return out

    def param_count(self) -> int:
        return sum(d.param_count() + c.param_count() for d, c in self.pairs)


def chain_apply(chain: DCChain, x):
    return chain.apply(x)


def materialize(chain: DCChain) -> np.ndarray:
    return chain.materialize()


def random_chain(n: int, m: int, rng: np.random.Generator, mode: str = "learned") -> DCChain:
    """Chain at layer initialization scale: c ~ N(0, 1/n), learned d = 1."""
    pairs = []
    for _ in range(m):
        c = CirculantFactor(rng.normal(0.0, 1.0 / np.sqrt(n), n))
        if mode == "fixed_sign":
            d = DiagonalFactor(rng.choice([-1.0, 1.0], size=n), mode="fixed_sign")
        else:
            d = DiagonalFactor(np.ones(n))
        pairs.append((d, c))
    return DCChain(pairs)


# ---------------------------------------------------------------------------
# rectangular adaptation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AdapterPlan:
    """How square chains tile a rectangular map: #chains, chain size, block width."""

    n: int
    chains: int
    block: int


def adapter_plan(in_dim: int, out_dim: int) -> AdapterPlan:
    if in_dim < 1 or out_dim < 1:
        raise ValueError("dimensions must be positive")
    n = next_pow2(in_dim)
    if in_dim < out_dim:
        if out_dim % in_dim:
            raise ValueError(
                f"widening layers need out_dim divisible by in_dim, got {in_dim}->{out_dim}"
            )
        return AdapterPlan(n=n, chains=out_dim // in_dim, block=in_dim)
    return AdapterPlan(n=n, chains=1, block=out_dim)


def structured_weight_count(in_dim: int, out_dim: int, m: int, mode: str = "learned") -> int:
    plan = adapter_plan(in_dim, out_dim)
    per_pair = plan.n if mode == "fixed_sign" else 2 * plan.n
    return plan.chains * m * per_pair


def dense_weight_count(in_dim: int, out_dim: int) -> int:
    return in_dim * out_dim


def compression_rate(dense_total: int, compact_total: int) -> float:
    """Saved fraction in percent: 100 * (dense - compact) / dense."""
    return 100.0 * (dense_total - compact_total) / dense_total


def truncate_rate(rate: float, decimals: int = 1) -> float:
    """Truncate (not round) a percentage for display."""
    factor = 10 ** decimals
    return np.trunc(rate * factor) / factor


# ---------------------------------------------------------------------------
# the layer
# ---------------------------------------------------------------------------

ACTIVATIONS = ("none", "relu", "sigmoid")
KINDS = ("dense", "dc", "cd")


class StructuredLinear:
    """Linear layer backed by a dense matrix or by diagonal-circulant chains.

    Kinds: 'dense' (full matrix), 'dc' (learned diagonals and circulants),
    'cd' (frozen random +-1 diagonals, learned circulants). The layer computes
    per row: adapter-mapped product, optional bias, optional activation.
    """

    def __init__(self, in_dim, out_dim, kind="dense", m=1, bias=True,
                 activation="none", rng=None, name="linear"):
        if kind not in KINDS:
            raise ValueError(f"unknown kind {kind!r}")
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        rng = rng or np.random.default_rng(0)
        self.in_dim = int(in_dim)
        self.out_dim = int(out_dim)
        self.kind = kind
        self.m = int(m)
        self.activation = activation
        self.name = name
        self.weight = None
        self.chain_params = []  # [chain][factor] -> (d Tensor, c Tensor)
        if kind == "dense":
            self.plan = None
            w = rng.normal(0.0, 1.0 / np.sqrt(self.in_dim), (self.in_dim, self.out_dim))
            self.weight = ag.parameter(w, name=f"{name}.w")
        else:
            self.plan = adapter_plan(self.in_dim, self.out_dim)
            n = self.plan.n
            for ci in range(self.plan.chains):
                factors = []
                for fi in range(self.m):
                    c = ag.parameter(rng.normal(0.0, 1.0 / np.sqrt(n), n),
                                     name=f"{name}.chain{ci}.f{fi}.c")
                    if kind == "cd":
                        d = ag.Tensor(rng.choice([-1.0, 1.0], size=n),
                                      requires_grad=False, name=f"{name}.chain{ci}.f{fi}.d")
                    else:
                        d = ag.parameter(np.ones(n), name=f"{name}.chain{ci}.f{fi}.d")
                    factors.append((d, c))
                self.chain_params.append(factors)
        self.bias = ag.parameter(np.zeros(self.out_dim), name=f"{name}.b") if bias else None

    def parameters(self):
        out = []
        if self.weight is not None:
            out.append((self.weight.name, self.weight))
        for factors in self.chain_params:
            for d, c in factors:
                if d.requires_grad:
                    out.append((d.name, d))
                out.append((c.name, c))
        if self.bias is not None:
            out.append((self.bias.name, self.bias))
        return out

    def frozen_tensors(self):
        """Non-trainable tensors that still belong in checkpoints (fixed-sign diagonals)."""
        out = []
        for factors in self.chain_params:
            for d, _ in factors:
                if not d.requires_grad:
                    out.append((d.name, d))
        return out

    def param_count(self) -> int:
        """Trainable weight-matrix parameters; biases are excluded by convention."""
        if self.kind == "dense":
            return dense_weight_count(self.in_dim, self.out_dim)
        return structured_weight_count(
            self.in_dim, self.out_dim, self.m,
            mode="fixed_sign" if self.kind == "cd" else "learned")

    def _apply_chain(self, factors, x):
        for d, c in reversed(factors):
            x = ag.circ_matvec_batched(c, x)
            x = ag.diag_scale(d, x)
        return x

    def apply(self, x):
        """Map rows of length in_dim to rows of length out_dim."""
        x = ag.as_tensor(x)
        if x.data.shape[-1] != self.in_dim:
            raise ValueError(f"{self.name}: expected rows of {self.in_dim}, got {x.data.shape[-1]}")
        if self.kind == "dense":
            y = ag.dense_matmul(x, self.weight)
        else:
            if self.plan.n != self.in_dim:
                x = ag.pad_lastaxis(x, self.plan.n)
            blocks = []
            for factors in self.chain_params:
                z = self._apply_chain(factors, x)
                if self.plan.block != self.plan.n:
                    z = ag.slice_lastaxis(z, 0, self.plan.block)
                blocks.append(z)
            y = blocks[0] if len(blocks) == 1 else ag.concat(blocks, axis=-1)
            if y.data.shape[-1] != self.out_dim:
                y = ag.slice_lastaxis(y, 0, self.out_dim)
        if self.bias is not None:
            y = ag.bias_add(y, self.bias)
        if self.activation == "relu":
            y = ag.relu(y)
        elif self.activation == "sigmoid":
            y = ag.sigmoid(y)
        return y

    def __call__(self, x):
        return self.apply(x)

    def chains(self):
        """Current factor values as value-semantic chains (one per block)."""
        out = []
        for factors in self.chain_params:
            pairs = [(DiagonalFactor(d.data.copy(),
                                     mode="learned" if d.requires_grad else "fixed_sign"),
                      CirculantFactor(c.data.copy())) for d, c in factors]
            out.append(DCChain(pairs))
        return out

    def dense_equivalent_weight(self) -> np.ndarray:
        """The (in_dim, out_dim) matrix this layer multiplies rows by."""
        if self.kind == "dense":
            return self.weight.data.copy()
        cols = []
        for chain in self.chains():
            block = chain.materialize()[: self.plan.block, : self.in_dim]
            cols.append(block.T)
        w = np.concatenate(cols, axis=1)
        return np.ascontiguousarray(w[:, : self.out_dim])

    def to_dense(self) -> "StructuredLinear":
        """Dense twin computing the same map (same bias and activation)."""
        twin = StructuredLinear(self.in_dim, self.out_dim, kind="dense",
                                bias=self.bias is not None,
                                activation=self.activation, name=f"{self.name}.dense")
        twin.weight.data = self.dense_equivalent_weight()
        if self.bias is not None:
            twin.bias.data = self.bias.data.copy()
        return twin


def layer_apply(layer: StructuredLinear, batch):
    return layer.apply(batch)


def param_count(obj) -> int:
    """Trainable weight parameters of a layer or chain (biases excluded)."""
    return obj.param_count()


# ---------------------------------------------------------------------------
# gradient-based chain fitting
# ---------------------------------------------------------------------------

def fit_dc_decomposition(a: np.ndarray, m: int, steps: int = 1500, lr: float = 0.05,
                         seed: int = 0, init_noise: float = 0.05):
    """Fit an m-pair chain to a square matrix by Adam on relative Frobenius error.

    Returns (chain, trace) where trace[k] is the relative error after step k.
    Factors start near the identity so the initial product is well-scaled.
    """
    a = np.asarray(a, dtype=np.float64)
    n = a.shape[0]
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError("target must be square")
    if n & (n - 1):
        raise ValueError(f"target size {n} is not a power of two")
    if n > FIT_DIM_LIMIT:
        raise ValueError(f"fit targets are limited to n <= {FIT_DIM_LIMIT}")
    if m < 1:
        raise ValueError("need at least one factor pair")

    rng = np.random.default_rng(seed)
    e0 = np.zeros(n)
    e0[0] = 1.0
    params = []
    for fi in range(m):
        d = ag.parameter(np.ones(n) + init_noise * rng.standard_normal(n), name=f"f{fi}.d")
        c = ag.parameter(e0 + init_noise * rng.standard_normal(n), name=f"f{fi}.c")
        params.append((d, c))

    named = [(p.name, p) for pair in params for p in pair]
    basis = np.eye(n)
    target_t = a.T
    norm_sq = float((a * a).sum())
    if norm_sq == 0.0:
        raise ValueError("target matrix is zero")
    adam = ag.AdamState(lr0=lr)
    trace = []
    for step in range(steps):
        ag.zero_grads(named)
        try:
            with ag.Tape() as tape:
                z = ag.Tensor(basis)
                for d, c in reversed(params):
                    z = ag.circ_matvec_batched(c, z)
                    z = ag.diag_scale(d, z)
                diff = ag.sub(z, target_t)
                loss = ag.scale(ag.reduce_sum(ag.mul(diff, diff)), 1.0 / norm_sq)
                if not np.isfinite(loss.data):
                    raise FitDivergenceError(step)
                tape.backward(loss)
            ag.adam_step(adam, named, clip_norm=0.0, examples=n)
        except (fft.SpectralResidueError, ag.NonFiniteGradientError) as exc:
            raise FitDivergenceError(step) from exc
        trace.append(float(np.sqrt(max(loss.data, 0.0))))

    pairs = [(DiagonalFactor(d.data.copy()), CirculantFactor(c.data.copy())) for d, c in params]
    chain = DCChain(pairs)
    final = float(np.linalg.norm(chain.materialize() - a) / np.sqrt(norm_sq))
    if not np.isfinite(final):
        raise FitDivergenceError(steps)
    trace.append(final)
    return chain, trace
