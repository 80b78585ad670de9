"""
Channel decorrelation loss and the combined segmentation objective.

Two implementations of the decorrelation loss live here:

* a float64 numpy reference kernel working on single :class:`FeatureMap`
  objects (correlation map, row-max-normalized softmax, loss, closed-form
  gradient), used for verification and diagnostics;
* a batched torch kernel used during training, whose gradient is either the
  same closed form (``gradient_mode="closed_form"``) or torch's own
  differentiation of the forward with the row maxima stopped
  (``gradient_mode="autograd"``).

The row normalizer z_i (largest entry of row i of the correlation map) is
always treated as a constant when differentiating.
"""

import logging
from dataclasses import dataclass, field, replace

import numpy as np
import torch
import torch.nn.functional as F
from scipy.special import softmax

from utils.exceptions import NumericalError, ShapeMismatchError

logger = logging.getLogger(__name__)

DEFAULT_EPSILON = 1e-12
DICE_SMOOTHING = 1e-5

REDUCTIONS = ("mean", "sum")
PENALTIES = ("decor", "decov", "ortho", "none")
GRADIENT_MODES = ("closed_form", "autograd")


@dataclass
class LossWeights:
    """Weights and reductions of the combined objective.

    ``lambda_decor`` is shared by all encoder layers; ``layer_weights``
    optionally scales each layer's term. ``penalty`` selects which
    decorrelation regularizer is added (``none`` trains segmentation only).
    """

    lambda_decor: float = 0.01
    weight_ce: float = 0.5
    weight_dice: float = 0.5
    layer_reduction: str = "mean"
    batch_reduction: str = "mean"
    layer_weights: tuple = None
    penalty: str = "decor"
    lambda_decov: float = 1e-4
    lambda_ortho: float = 1e-4
    gradient_mode: str = "closed_form"
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self):
        for name in ("lambda_decor", "lambda_decov", "lambda_ortho"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.layer_reduction not in REDUCTIONS or self.batch_reduction not in REDUCTIONS:
            raise ValueError(f"reductions must be one of {REDUCTIONS}")
        if self.penalty not in PENALTIES:
            raise ValueError(f"penalty must be one of {PENALTIES}")
        if self.gradient_mode not in GRADIENT_MODES:
            raise ValueError(f"gradient_mode must be one of {GRADIENT_MODES}")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.layer_weights is not None:
            self.layer_weights = tuple(float(w) for w in self.layer_weights)
            if any(w < 0 for w in self.layer_weights):
                raise ValueError("layer_weights must be nonnegative")

    @property
    def penalty_weight(self):
        """The λ that multiplies the selected regularizer."""
        return {
            "decor": self.lambda_decor,
            "decov": self.lambda_decov,
            "ortho": self.lambda_ortho,
            "none": 0.0,
        }[self.penalty]


# ---------------------------------------------------------------------------
# numpy reference kernel
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FeatureMap:
    """One sample's C×H×W activations from encoder unit ``layer_id``."""

    data: np.ndarray
    layer_id: int = 0

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ShapeMismatchError(
                f"feature map of layer {self.layer_id} must be C×H×W with all sizes >= 1, "
                f"got shape {data.shape}"
            )
        object.__setattr__(self, "data", data)

    @property
    def channels(self):
        return self.data.shape[0]

    def flattened(self):
        return self.data.reshape(self.channels, -1)


@dataclass(frozen=True)
class CorrelationMap:
    values: np.ndarray
    row_normalizers: np.ndarray


@dataclass(frozen=True)
class ProbabilityMap:
    values: np.ndarray
    degenerate_rows: tuple = ()

    @property
    def mean_diagonal_mass(self):
        return float(np.trace(self.values) / self.values.shape[0])


@dataclass(frozen=True)
class DecorLossResult:
    loss: float
    probability_map: ProbabilityMap
    gradient: np.ndarray = None


def channel_correlation(features):
    """Gram matrix of the flattened channels plus its row maxima."""
    if not np.all(np.isfinite(features.data)):
        raise NumericalError(f"non-finite activations in encoder layer {features.layer_id}")
    flat = features.flattened()
    gram = flat @ flat.T
    # mirror the upper triangle so c_ij == c_ji holds bit for bit
    upper = np.triu(gram)
    values = upper + np.triu(gram, 1).T
    return CorrelationMap(values=values, row_normalizers=values.max(axis=1))


def normalized_softmax(corr, epsilon=DEFAULT_EPSILON):
    """Row softmax of c_ij / z_i; rows with z_i < epsilon become uniform."""
    values = np.asarray(corr.values, dtype=np.float64)
    channels = values.shape[0]
    z = np.asarray(corr.row_normalizers, dtype=np.float64)
    degenerate = np.flatnonzero(z < epsilon)
    safe_z = np.where(z < epsilon, 1.0, z)
    prob = softmax(values / safe_z[:, None], axis=1)
    if degenerate.size:
        logger.warning(
            "%d of %d channels have a vanishing correlation row; using uniform rows",
            degenerate.size,
            channels,
        )
        prob[degenerate] = 1.0 / channels
    return ProbabilityMap(values=prob, degenerate_rows=tuple(int(i) for i in degenerate))


def decor_loss_forward(features, epsilon=DEFAULT_EPSILON, frozen_normalizers=None):
    """L = -Σ_i log x_ii.

    ``frozen_normalizers`` replaces the recomputed row maxima, which is how
    finite differences reproduce the stop-gradient convention.
    """
    corr = channel_correlation(features)
    if frozen_normalizers is not None:
        corr = replace(corr, row_normalizers=np.asarray(frozen_normalizers, dtype=np.float64))
    prob = normalized_softmax(corr, epsilon)
    loss = -float(np.sum(np.log(np.diag(prob.values))))
    return DecorLossResult(loss=loss + 0.0, probability_map=prob)


def decor_loss_backward(features, prob, corr):
    """Closed-form ∂L/∂h for every activation, shaped like ``features.data``."""
    channels = features.channels
    if prob.values.shape != (channels, channels) or corr.values.shape != (channels, channels):
        raise ShapeMismatchError(
            f"feature map has {channels} channels but probability/correlation maps are "
            f"{prob.values.shape} and {corr.values.shape}"
        )
    z = np.where(corr.row_normalizers < DEFAULT_EPSILON, 1.0, corr.row_normalizers)
    coupling = (prob.values - np.eye(channels)) / z[:, None]
    if prob.degenerate_rows:
        coupling[list(prob.degenerate_rows)] = 0.0
    grad = (coupling + coupling.T) @ features.flattened()
    return grad.reshape(features.data.shape)


def decor_loss(features, epsilon=DEFAULT_EPSILON):
    """Forward and backward in one call."""
    corr = channel_correlation(features)
    prob = normalized_softmax(corr, epsilon)
    loss = -float(np.sum(np.log(np.diag(prob.values))))
    return DecorLossResult(
        loss=loss + 0.0,
        probability_map=prob,
        gradient=decor_loss_backward(features, prob, corr),
    )


def gradient_check(features, step=1e-5, epsilon=DEFAULT_EPSILON):
    """Relative error of the closed-form gradient against central differences.

    The row normalizers stay frozen at their unperturbed values. The error is
    the largest absolute deviation divided by the largest gradient magnitude.
    """
    corr = channel_correlation(features)
    prob = normalized_softmax(corr, epsilon)
    analytic = decor_loss_backward(features, prob, corr)
    numeric = np.zeros_like(features.data)
    frozen = corr.row_normalizers
    it = np.nditer(features.data, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        plus = features.data.copy()
        minus = features.data.copy()
        plus[idx] += step
        minus[idx] -= step
        loss_plus = decor_loss_forward(FeatureMap(plus, features.layer_id), epsilon, frozen).loss
        loss_minus = decor_loss_forward(FeatureMap(minus, features.layer_id), epsilon, frozen).loss
        numeric[idx] = (loss_plus - loss_minus) / (2 * step)
    scale = max(np.abs(numeric).max(), np.abs(analytic).max())
    if scale == 0:
        return 0.0
    return float(np.abs(analytic - numeric).max() / scale)


# ---------------------------------------------------------------------------
# torch training kernel
# ---------------------------------------------------------------------------


def _probabilities(corr, normalizers, epsilon):
    channels = corr.shape[-1]
    degenerate = normalizers < epsilon
    safe = torch.where(degenerate, torch.ones_like(normalizers), normalizers)
    prob = torch.softmax(corr / safe.unsqueeze(-1), dim=-1)
    uniform = torch.full_like(prob, 1.0 / channels)
    return torch.where(degenerate.unsqueeze(-1), uniform, prob), safe, degenerate


class DecorrelationFunction(torch.autograd.Function):
    """Per-sample decorrelation loss of an (N, C, H, W) batch with the closed-form backward."""

    @staticmethod
    def forward(ctx, features, epsilon):
        n, channels = features.shape[:2]
        flat = features.reshape(n, channels, -1)
        corr = torch.bmm(flat, flat.transpose(1, 2))
        prob, normalizers, degenerate = _probabilities(corr, corr.amax(dim=-1), epsilon)
        loss = -torch.log(torch.diagonal(prob, dim1=-2, dim2=-1)).sum(dim=-1)
        ctx.save_for_backward(flat, prob, normalizers, degenerate)
        ctx.feature_shape = features.shape
        ctx.mark_non_differentiable(prob)
        return loss, prob

    @staticmethod
    def backward(ctx, grad_loss, grad_prob):
        flat, prob, normalizers, degenerate = ctx.saved_tensors
        eye = torch.eye(prob.shape[-1], dtype=prob.dtype, device=prob.device)
        coupling = (prob - eye) / normalizers.unsqueeze(-1)
        coupling = coupling.masked_fill(degenerate.unsqueeze(-1), 0.0)
        grad = torch.bmm(coupling + coupling.transpose(1, 2), flat)
        grad = grad * grad_loss.view(-1, 1, 1)
        return grad.reshape(ctx.feature_shape), None


def decor_loss_per_sample(features, epsilon=DEFAULT_EPSILON, gradient_mode="closed_form"):
    """Return (loss per sample (N,), probability maps (N, C, C))."""
    if features.dim() != 4:
        raise ShapeMismatchError(f"expected an (N, C, H, W) batch, got shape {tuple(features.shape)}")
    if gradient_mode == "closed_form":
        return DecorrelationFunction.apply(features, epsilon)
    flat = features.flatten(2)
    corr = torch.bmm(flat, flat.transpose(1, 2))
    prob, _, _ = _probabilities(corr, corr.detach().amax(dim=-1), epsilon)
    loss = -torch.log(torch.diagonal(prob, dim1=-2, dim2=-1)).sum(dim=-1)
    return loss, prob.detach()


def _reduce(values, reduction):
    return values.sum() if reduction == "sum" else values.mean()


@dataclass
class MultiLayerDecorResult:
    total: torch.Tensor
    layer_losses: tuple
    probability_maps: tuple = field(repr=False)


def _tap_tensor(tap):
    if isinstance(tap, FeatureMap):
        return torch.from_numpy(tap.data).unsqueeze(0)
    return tap


def decor_loss_multi_layer(taps, weights):
    """Decorrelation loss over all encoder taps, reduced over batch then layers.

    ``taps`` holds one (N, C, H, W) tensor (or a single-sample FeatureMap) per
    encoder unit. The per-layer diagnostics are the batch-reduced losses and
    the batch-averaged probability maps.
    """
    if not taps:
        raise ValueError("decorrelation loss needs at least one encoder tap")
    tensors = [_tap_tensor(t) for t in taps]
    layer_weights = weights.layer_weights or (1.0,) * len(tensors)
    if len(layer_weights) != len(tensors):
        raise ShapeMismatchError(
            f"{len(layer_weights)} layer weights given for {len(tensors)} encoder taps"
        )

    layer_terms = []
    layer_losses = []
    maps = []
    for tensor, layer_weight in zip(tensors, layer_weights):
        per_sample, prob = decor_loss_per_sample(tensor, weights.epsilon, weights.gradient_mode)
        layer_loss = _reduce(per_sample, weights.batch_reduction)
        layer_terms.append(layer_weight * layer_loss)
        layer_losses.append(float(layer_loss.detach()))
        maps.append(prob.detach().mean(dim=0).cpu().double().numpy())
    total = _reduce(torch.stack(layer_terms), weights.layer_reduction)
    return MultiLayerDecorResult(total=total, layer_losses=tuple(layer_losses), probability_maps=tuple(maps))


# ---------------------------------------------------------------------------
# competitor decorrelation penalties
# ---------------------------------------------------------------------------


def _as_tensor(x):
    if isinstance(x, FeatureMap):
        return torch.from_numpy(x.data)
    if isinstance(x, np.ndarray):
        return torch.from_numpy(np.asarray(x, dtype=np.float64))
    return x


def decov_penalty(features):
    """½(‖Σ‖²_F − ‖diag Σ‖²) of the channel covariance over spatial positions.

    Accepts a FeatureMap (returns a float) or a (..., C, H, W) tensor
    (returns one value per leading index).
    """
    tensor = _as_tensor(features)
    if not torch.all(torch.isfinite(tensor)):
        layer = getattr(features, "layer_id", "?")
        raise NumericalError(f"non-finite activations in encoder layer {layer}")
    flat = tensor.flatten(-2)
    centered = flat - flat.mean(dim=-1, keepdim=True)
    cov = centered @ centered.transpose(-1, -2) / flat.shape[-1]
    diag = torch.diagonal(cov, dim1=-2, dim2=-1)
    penalty = 0.5 * (cov.pow(2).sum(dim=(-2, -1)) - diag.pow(2).sum(dim=-1))
    if isinstance(features, FeatureMap):
        return float(penalty)
    return penalty


def ortho_penalty(weights):
    """Σ ‖W Wᵀ − I‖_F over weight matrices; conv kernels are reshaped to (out, in·k·k)."""
    if isinstance(weights, (np.ndarray, torch.Tensor)):
        weights = [weights]
    weights = [_as_tensor(w) for w in weights]
    if not weights:
        raise ValueError("orthogonality penalty needs at least one weight matrix")
    total = 0.0
    for w in weights:
        matrix = w.reshape(w.shape[0], -1)
        gram = matrix @ matrix.T
        eye = torch.eye(gram.shape[0], dtype=gram.dtype, device=gram.device)
        total = total + torch.linalg.norm(gram - eye)
    return total


# ---------------------------------------------------------------------------
# combined objective
# ---------------------------------------------------------------------------


@dataclass
class LossBreakdown:
    total: torch.Tensor
    ce: float
    dice: float
    decor: float
    layer_losses: tuple = ()
    probability_maps: tuple = field(default=(), repr=False)


def soft_dice_loss(logits, target, smoothing=DICE_SMOOTHING):
    """1 − (2Σpg + s)/(Σp + Σg + s) over the whole batch."""
    probs = torch.sigmoid(logits)
    intersection = (probs * target).sum()
    return 1.0 - (2.0 * intersection + smoothing) / (probs.sum() + target.sum() + smoothing)


def _regularizer(taps, weights, encoder_kernels):
    if weights.penalty == "decor":
        result = decor_loss_multi_layer(taps, weights)
        return result.total, result.layer_losses, result.probability_maps
    if weights.penalty == "decov":
        per_layer = [_reduce(decov_penalty(_tap_tensor(t)), weights.batch_reduction) for t in taps]
        stacked = torch.stack(per_layer)
        return _reduce(stacked, weights.layer_reduction), tuple(float(v) for v in stacked.detach()), ()
    if weights.penalty == "ortho":
        if encoder_kernels is None:
            raise ValueError("orthogonality penalty needs the encoder convolution kernels")
        return ortho_penalty(list(encoder_kernels)), (), ()
    return None, (), ()


def combined_loss(pred_mask_logits, gt_mask, taps, weights, encoder_kernels=None):
    """½·BCE + ½·soft Dice + λ·regularizer, with the parts kept for logging.

    With a zero λ the regularizer is evaluated without gradient tracking so it
    contributes nothing to the optimization.
    """
    if pred_mask_logits.shape != gt_mask.shape:
        raise ShapeMismatchError(
            f"prediction shape {tuple(pred_mask_logits.shape)} != ground truth {tuple(gt_mask.shape)}"
        )
    if not torch.all((gt_mask == 0) | (gt_mask == 1)):
        raise ValueError("ground-truth mask must be binary")
    gt_mask = gt_mask.to(pred_mask_logits.dtype)
    ce = F.binary_cross_entropy_with_logits(pred_mask_logits, gt_mask)
    dice = soft_dice_loss(pred_mask_logits, gt_mask)
    total = weights.weight_ce * ce + weights.weight_dice * dice

    lam = weights.penalty_weight
    reg_value = 0.0
    layer_losses, maps = (), ()
    if weights.penalty != "none" and (taps or encoder_kernels is not None):
        if lam > 0:
            reg, layer_losses, maps = _regularizer(taps, weights, encoder_kernels)
            total = total + lam * reg
        else:
            with torch.no_grad():
                reg, layer_losses, maps = _regularizer(taps, weights, encoder_kernels)
        reg_value = float(reg.detach()) if torch.is_tensor(reg) else float(reg)

    return LossBreakdown(
        total=total,
        ce=float(ce.detach()),
        dice=float(dice.detach()),
        decor=reg_value,
        layer_losses=layer_losses,
        probability_maps=maps,
    )
