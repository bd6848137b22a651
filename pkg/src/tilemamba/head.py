"""Classifier heads and neural-collapse diagnostics.

The centerpiece is the fixed non-negative orthogonal layer: a frozen
binary-support projection whose columns are orthonormal, modulated by a
single learnable positive scale. Hadamard (signed, fixed) and plain
linear layers can be stacked with it into hybrid heads. The diagnostics
quantify collapse geometry: within-class variance, mean centering,
norm spread, the gram of centered class means, and the worst-pair margin.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Union

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DimensionError
from .tensor import RngStream, Tensor

__all__ = [
    "FixedOrthogonalMatrix",
    "HadamardLayer",
    "LinearLayer",
    "LayerSpec",
    "HeadConfig",
    "NCReport",
    "fno_init",
    "fno_forward",
    "hadamard_layer_init",
    "hadamard_forward",
    "init_head",
    "hybrid_head_forward",
    "nc_metrics",
    "classmean_objective",
    "margin_score",
]

# softplus(raw) == 1.0
_GAMMA_RAW_INIT = float(np.log(np.e - 1.0))


@dataclass
class FixedOrthogonalMatrix:
    """Frozen non-negative orthonormal projection with a learnable scale.

    ``w`` is (F, D), never trained; each output direction owns a disjoint,
    near-equal-sized subset of input features. ``gamma_raw`` is the single
    trainable parameter; the logit scale is softplus(gamma_raw) > 0.
    """

    w: Tensor                      # (F, D), requires_grad=False
    gamma_raw: Tensor              # scalar, trainable
    group_assignment: np.ndarray   # (F,) feature index -> output group
    normalize_input: bool = True

    @property
    def gamma(self) -> float:
        return float(np.logaddexp(0.0, self.gamma_raw.data))

    def tensors(self):
        yield "w", self.w
        yield "gamma_raw", self.gamma_raw


@dataclass
class HadamardLayer:
    """Fixed signed orthogonal projection from a Sylvester Hadamard matrix.

    Entries are +-1/sqrt(F); columns are exactly orthonormal when F is a
    power of two (guaranteed by construction otherwise only unit-norm).
    No trainable parameters.
    """

    w: Tensor                      # (F, D), requires_grad=False
    exact_orthogonal: bool = True

    def tensors(self):
        yield "w", self.w


@dataclass
class LinearLayer:
    w: Tensor
    b: Tensor

    def tensors(self):
        yield "w", self.w
        yield "b", self.b


@dataclass(frozen=True)
class LayerSpec:
    kind: str          # linear | fno | hadamard
    in_width: int
    out_width: int


@dataclass
class HeadConfig:
    """Ordered stack of head layers. Widths must chain; the final width is
    the class count."""

    layers: List[LayerSpec]

    def validate(self, in_width: int, num_classes: int) -> None:
        if not self.layers:
            raise ConfigError("head config has no layers")
        prev = in_width
        for spec in self.layers:
            if spec.kind not in ("linear", "fno", "hadamard"):
                raise ConfigError(f"unknown head layer kind {spec.kind!r}")
            if spec.in_width != prev:
                raise ConfigError(
                    f"head width chain broken: expected in_width {prev}, "
                    f"got {spec.in_width} ({spec.kind})"
                )
            prev = spec.out_width
        if prev != num_classes:
            raise ConfigError(
                f"head must end at {num_classes} outputs, ends at {prev}"
            )


def fno_init(f: int, d: int, rng: RngStream, normalize_input: bool = True,
             dtype=np.float32) -> FixedOrthogonalMatrix:
    """Partition F feature indices into D near-equal groups and build the
    frozen binary base matrix, rows L2-normalized.

    Group sizes are floor(F/D) with the F mod D remainder handed to
    randomly chosen groups; a random permutation assigns the indices.
    """
    if d < 2:
        raise ConfigError(f"fno needs at least 2 output groups, got {d}")
    if f < d:
        raise ConfigError(f"fno needs F >= D, got F={f} D={d}")
    base = f // d
    remainder = f % d
    sizes = np.full(d, base, dtype=np.int64)
    if remainder:
        lucky = rng.permutation(d)[:remainder]
        sizes[lucky] += 1
    perm = rng.permutation(f)
    w = np.zeros((f, d), dtype=dtype)
    assignment = np.empty(f, dtype=np.int64)
    pos = 0
    for grp in range(d):
        idx = perm[pos:pos + sizes[grp]]
        w[idx, grp] = 1.0 / np.sqrt(sizes[grp])
        assignment[idx] = grp
        pos += sizes[grp]
    return FixedOrthogonalMatrix(
        w=Tensor(w, requires_grad=False),
        gamma_raw=Tensor(np.asarray(_GAMMA_RAW_INIT, dtype=dtype), requires_grad=True),
        group_assignment=assignment,
        normalize_input=normalize_input,
    )


def _l2_normalize_rows(x: Tensor) -> Tensor:
    """Scale each row to unit L2 norm; all-zero rows pass through unscaled."""
    norms = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    safe = np.where(norms == 0.0, 1.0, norms)
    out = x.data / safe

    def backward(g):
        # d(x/n)/dx = I/n - x x^T / n^3; identity on zero rows
        inner = (g * x.data).sum(axis=-1, keepdims=True)
        T._accum(x, g / safe - x.data * (inner / (safe ** 3)))

    return T._make(out, (x,), backward)


def fno_forward(m: FixedOrthogonalMatrix, x: Tensor) -> Tensor:
    """z = gamma * W^T x, optionally on the L2-normalized input. No bias;
    W receives no gradient, gamma does."""
    f, d = m.w.shape
    if x.ndim != 2 or x.shape[-1] != f:
        raise DimensionError(f"fno expects (B,{f}), got {x.shape}")
    h = _l2_normalize_rows(x) if m.normalize_input else x
    wt = T.permute(m.w, (1, 0))   # (D, F) view for the linear op; stays frozen
    z = T.linear(h, wt)
    gamma = T.softplus(m.gamma_raw)
    return T.mul(z, gamma)


def _next_pow2(n: int) -> int:
    p = 1
    while p < n:
        p *= 2
    return p


def hadamard_layer_init(f: int, d: int, dtype=np.float32) -> HadamardLayer:
    """First D columns of the Sylvester Hadamard matrix of the smallest
    power-of-two order >= max(F, D), truncated to F rows, scaled by 1/sqrt(F)."""
    if d < 1 or f < 1:
        raise ConfigError(f"invalid hadamard dims F={f} D={d}")
    if d > f:
        raise ConfigError(f"hadamard projection cannot expand: F={f} < D={d}")
    order = _next_pow2(max(f, d))
    h = np.ones((1, 1), dtype=np.float64)
    while h.shape[0] < order:
        h = np.block([[h, h], [h, -h]])
    w = (h[:f, :d] / np.sqrt(f)).astype(dtype)
    return HadamardLayer(w=Tensor(w, requires_grad=False),
                         exact_orthogonal=(order == f))


def hadamard_forward(layer: HadamardLayer, x: Tensor) -> Tensor:
    f, d = layer.w.shape
    if x.ndim != 2 or x.shape[-1] != f:
        raise DimensionError(f"hadamard expects (B,{f}), got {x.shape}")
    wt = T.permute(layer.w, (1, 0))
    return T.linear(x, wt)


HeadLayer = Union[LinearLayer, FixedOrthogonalMatrix, HadamardLayer]


def init_head(cfg: HeadConfig, in_width: int, num_classes: int, rng: RngStream,
              dtype=np.float32) -> List[HeadLayer]:
    cfg.validate(in_width, num_classes)
    layers: List[HeadLayer] = []
    for spec in cfg.layers:
        if spec.kind == "linear":
            bound = 1.0 / np.sqrt(spec.in_width)
            w = Tensor(((rng.uniform((spec.out_width, spec.in_width)) * 2 - 1)
                        * bound).astype(dtype), requires_grad=True)
            b = Tensor(np.zeros(spec.out_width, dtype=dtype), requires_grad=True)
            layers.append(LinearLayer(w=w, b=b))
        elif spec.kind == "fno":
            layers.append(fno_init(spec.in_width, spec.out_width, rng, dtype=dtype))
        else:
            layers.append(hadamard_layer_init(spec.in_width, spec.out_width, dtype))
    return layers


def hybrid_head_forward(layers: Sequence[HeadLayer], x: Tensor) -> Tensor:
    """Apply the stack in order with GELU between non-final layers.
    Raw logits out; softmax belongs to the loss/eval side."""
    h = x
    for i, layer in enumerate(layers):
        if isinstance(layer, LinearLayer):
            h = T.linear(h, layer.w, layer.b)
        elif isinstance(layer, FixedOrthogonalMatrix):
            h = fno_forward(layer, h)
        else:
            h = hadamard_forward(layer, h)
        if i + 1 < len(layers):
            h = T.gelu(h)
    return h


# -- neural-collapse diagnostics ------------------------------------------------------


@dataclass
class NCReport:
    within_class_variance: float
    mean_center_norm: float
    norm_spread: float
    etf_gram: np.ndarray
    margin: Optional[float] = None

    def to_flat_dict(self) -> dict:
        out = {
            "within_class_variance": self.within_class_variance,
            "mean_center_norm": self.mean_center_norm,
            "norm_spread": self.norm_spread,
        }
        d = self.etf_gram.shape[0]
        for i in range(d):
            for j in range(d):
                out[f"etf_gram_{i}_{j}"] = float(self.etf_gram[i, j])
        if self.margin is not None:
            out["margin"] = self.margin
        return out


def nc_metrics(features: np.ndarray, labels: np.ndarray,
               priors: Optional[np.ndarray] = None,
               classifier_w: Optional[np.ndarray] = None) -> NCReport:
    """Collapse geometry of ``features`` (M, F) grouped by integer ``labels``.

    Requires at least one sample per class 0..D-1. Priors default to the
    empirical class frequencies. When the fixed classifier matrix (F, D)
    is supplied, the worst-pair margin over class means is included.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if features.ndim != 2 or labels.shape != (features.shape[0],):
        raise DimensionError(
            f"nc_metrics expects (M,F) features with (M,) labels, got "
            f"{features.shape}/{labels.shape}"
        )
    d = int(labels.max()) + 1
    means = np.empty((d, features.shape[1]))
    for cls in range(d):
        mask = labels == cls
        if not mask.any():
            raise ContractError(f"class {cls} has no samples")
        means[cls] = features[mask].mean(axis=0)
    if priors is None:
        priors = np.bincount(labels, minlength=d) / labels.shape[0]
    else:
        priors = np.asarray(priors, dtype=np.float64)
        if priors.shape != (d,):
            raise DimensionError(f"priors shape {priors.shape} vs ({d},)")

    diffs = features - means[labels]
    within = float((diffs * diffs).sum(axis=1).mean())
    global_mean = priors @ means
    center_norm = float(np.linalg.norm(global_mean))
    mean_norms = np.linalg.norm(means, axis=1)
    spread = float(mean_norms.max() - mean_norms.min())

    centered = means - global_mean
    cnorms = np.linalg.norm(centered, axis=1, keepdims=True)
    unit = np.divide(centered, cnorms, out=np.zeros_like(centered),
                     where=cnorms > 0)
    gram = unit @ unit.T

    margin = None
    if classifier_w is not None:
        margin = margin_score(classifier_w, means)
    return NCReport(within_class_variance=within, mean_center_norm=center_norm,
                    norm_spread=spread, etf_gram=gram, margin=margin)


def classmean_objective(w_fixed: np.ndarray, gamma: float,
                        class_means: np.ndarray,
                        priors: Optional[np.ndarray] = None) -> float:
    """Prior-weighted cross-entropy of the fixed classifier on class means:
    E_{d~psi}[-log softmax_d(gamma * W^T mu_d)]."""
    w = np.asarray(w_fixed, dtype=np.float64)
    mu = np.asarray(class_means, dtype=np.float64)
    d = mu.shape[0]
    if priors is None:
        priors = np.full(d, 1.0 / d)
    logits = gamma * (mu @ w)          # (D, D): row d holds z(mu_d)
    logits = logits - logits.max(axis=1, keepdims=True)
    logp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    return float(-(priors * logp[np.arange(d), np.arange(d)]).sum())


def margin_score(w_fixed: np.ndarray, class_means: np.ndarray) -> float:
    """min over ordered pairs d != m of (w_d - w_m)^T mu_d."""
    w = np.asarray(w_fixed, dtype=np.float64)
    mu = np.asarray(class_means, dtype=np.float64)
    d = mu.shape[0]
    if d < 2:
        raise ContractError("margin needs at least two classes")
    scores = mu @ w                    # (D, D): scores[d, m] = w_m^T mu_d
    own = np.diag(scores)
    margin = np.inf
    for cls in range(d):
        others = np.delete(scores[cls], cls)
        margin = min(margin, float(own[cls] - others.max()))
    return margin
