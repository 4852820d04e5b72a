"""Comparator pruners and sanity-check ablations.

Includes the saliency family (SNIP, GraSP, SynFlow), magnitude and random
pruning, the iterative train/prune/rewind loop, the noisy-overlay scoring
procedure for teacher-comparing objectives, and mask ablations (layerwise
shuffle, reinitialization, score inversion).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import objectives as obj
from . import tensor as T
from .data import Dataset
from .mask import MaskError, Ticket, _topk_mask, invert_clamp
from .models import (BatchNorm, Conv, Dense, Flatten, GlobalAvgPool, ModelState,
                     Relu, ResBlock, TrainConfig, _flatten_specs, build_model,
                     forward, train)
from .tensor import Tensor

NOISY_OVERLAY_SIGMA = 6e-2
SALIENCY_BATCH_FACTOR = 10  # scoring batch is 10x the training batch size


class BaselineError(Exception):
    pass


@dataclass
class SaliencyScores:
    scores: np.ndarray
    method: str
    selection: str  # "largest" | "largest_magnitude"

    def ranking_values(self) -> np.ndarray:
        if self.selection == "largest_magnitude":
            return np.abs(self.scores)
        return self.scores


@dataclass
class LtrConfig:
    prune_fraction: float = 0.20
    rounds: int = 3
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if not 0 < self.prune_fraction < 1:
            raise BaselineError("prune fraction must be in (0, 1)")
        if self.rounds < 1:
            raise BaselineError("need at least one round")


def _loss_grads(model: ModelState, x, y) -> np.ndarray:
    layers = obj.teacher_layer_grads(model, x, y)
    return np.concatenate([g.reshape(-1) for g in layers])


def snip_scores(model: ModelState, batch) -> SaliencyScores:
    """|dL/dtheta * theta| over the maskable entries."""
    x, y = batch
    g = _loss_grads(model, x, y)
    theta = model.maskable_vector()
    return SaliencyScores(np.abs(g * theta), "snip", "largest")


def grasp_scores(model: ModelState, batch, h_scale: float = 1e-4) -> SaliencyScores:
    """-(H g) * theta with Hg from a central finite difference of gradients."""
    x, y = batch
    theta = model.maskable_vector()
    g = _loss_grads(model, x, y)
    gnorm = float(np.linalg.norm(g))
    if gnorm < 1e-12:
        raise BaselineError("zero gradient; GraSP scores undefined")
    h = h_scale * max(float(np.linalg.norm(theta)), 1.0) / gnorm
    gp = _grads_at(model, x, y, theta + h * g)
    gm = _grads_at(model, x, y, theta - h * g)
    hg = (gp - gm) / (2 * h)
    return SaliencyScores(-(hg * theta), "grasp", "largest")


def _grads_at(model: ModelState, x, y, theta_vec: np.ndarray) -> np.ndarray:
    layers = obj._maskable_grads(model, x, y, theta_vec)
    return np.concatenate([g.reshape(-1) for g in layers])


def _synflow_surrogate_scores(model: ModelState, mask_vec: np.ndarray) -> np.ndarray:
    """d(sum of outputs)/d|theta| * |theta| on the all-positive network.

    Parameters are replaced by |theta| (masked), the input is all ones, and
    batch-norm layers are bypassed. Relu is kept; it is the identity on the
    resulting all-positive activations.
    """
    abs_model = model.copy()
    v = np.abs(abs_model.maskable_vector()) * mask_vec
    abs_model.set_maskable_vector(v)
    for name in list(abs_model.params):
        if not name.endswith(".w"):
            abs_model.params[name] = np.abs(abs_model.params[name])
    specs = tuple(_strip_batchnorm(abs_model.specs))
    abs_model.specs = specs
    x = np.ones((1,) + abs_model.input_shape)
    maskable_names = {n for n, _, _ in abs_model.maskable_index}
    leaves = {k: Tensor(p, requires_grad=(k in maskable_names))
              for k, p in abs_model.params.items()}
    trace = forward(abs_model, x, param_tensors=leaves)
    total = T.sum_(trace.logits)
    wrt = [leaves[name] for name, _, _ in abs_model.maskable_index]
    gmap = T.backward(total, wrt=wrt)
    g = np.concatenate([gmap[id(t)].data.reshape(-1) for t in wrt])
    return g * v


def _strip_batchnorm(specs):
    out = []
    for s in specs:
        if isinstance(s, BatchNorm):
            continue
        if isinstance(s, ResBlock):
            out.append(ResBlock(tuple(_strip_batchnorm(s.inner))))
        else:
            out.append(s)
    return out


def synflow_prune(model: ModelState, kappa: float, iterations: int = 100) -> Ticket:
    """Iterative flow-preserving pruning on an exponential density schedule."""
    if not 0 < kappa <= 1:
        raise BaselineError(f"kappa must be in (0, 1], got {kappa}")
    d = model.d
    mask = np.ones(d)
    if kappa >= 1.0:
        return Ticket(mask=mask.astype(np.int64), layout=model.maskable_layout())
    for t in range(1, iterations + 1):
        target = kappa ** (t / iterations)
        n_keep = max(1, int(np.floor(target * d + 0.5)))
        scores = _synflow_surrogate_scores(model, mask)
        # never resurrect pruned weights
        scores[mask == 0] = -np.inf
        order = np.argsort(-scores, kind="stable")
        new_mask = np.zeros(d)
        new_mask[order[:n_keep]] = 1.0
        mask = new_mask
        _check_layer_collapse(model, mask)
    ticket = Ticket(mask=mask.astype(np.int64), layout=model.maskable_layout())
    return ticket


def _check_layer_collapse(model: ModelState, mask: np.ndarray) -> None:
    for name, off, sz in model.maskable_index:
        if not np.any(mask[off:off + sz]):
            raise BaselineError(f"layer collapse: '{name}' fully pruned")


def noisy_overlay_scores(model: ModelState, batch, objective: str,
                         sigma_noise: float = NOISY_OVERLAY_SIGMA,
                         seed: int = 0) -> SaliencyScores:
    """Scores for teacher-comparing objectives via a jittered identity overlay.

    With the exact identity overlay these objectives are exactly optimal and
    all gradients vanish, so a small Gaussian jitter is applied first. Noise
    is fixed per scoring call. Selection is by score magnitude.
    """
    kind = obj.get_kind(objective)
    if not kind.needs_teacher:
        raise BaselineError("noisy-overlay scoring requires a teacher-comparing objective")
    x, y = batch
    rng = np.random.default_rng(np.random.SeedSequence([41, seed]))
    s = 1.0 + sigma_noise * rng.standard_normal(model.d)
    if sigma_noise == 0.0:
        return SaliencyScores(np.zeros(model.d), f"noisy-{objective}", "largest_magnitude")
    leaf = Tensor(s, requires_grad=True)
    value = obj.evaluate(objective, model, x, y, overlay=leaf)
    if not value.requires_grad:
        return SaliencyScores(np.zeros(model.d), f"noisy-{objective}", "largest_magnitude")
    (g,) = T.grad(value, [leaf])
    return SaliencyScores(np.abs(g.data), f"noisy-{objective}", "largest_magnitude")


def prune_by_scores(scores: SaliencyScores, kappa: float,
                    layout=None) -> Ticket:
    """Keep the top round(kappa*d) entries by the method's selection rule."""
    if not 0 < kappa <= 1:
        raise MaskError(f"kappa must be in (0, 1], got {kappa}")
    mask = _topk_mask(scores.ranking_values(), kappa)
    return Ticket(mask=mask, layout=list(layout) if layout else [])


def magnitude_prune(model: ModelState, kappa: float) -> Ticket:
    scores = SaliencyScores(np.abs(model.maskable_vector()), "magnitude", "largest")
    return prune_by_scores(scores, kappa, layout=model.maskable_layout())


def random_prune(d: int, kappa: float, seed: int, layout=None) -> Ticket:
    if not 0 < kappa <= 1:
        raise MaskError(f"kappa must be in (0, 1], got {kappa}")
    n = int(np.floor(kappa * d + 0.5))
    if n <= 0:
        raise MaskError("empty ticket: round(kappa * d) == 0")
    rng = np.random.default_rng(np.random.SeedSequence([43, seed]))
    mask = np.zeros(d, dtype=np.int64)
    mask[rng.choice(d, size=n, replace=False)] = 1
    return Ticket(mask=mask, layout=list(layout) if layout else [])


def run_ltr(cfg: LtrConfig, arch: str, data: Dataset,
            input_shape=None, num_classes=None):
    """Iterative magnitude pruning with rewinding.

    Round r trains the currently masked network to step T, prunes the
    smallest-magnitude fraction of surviving weights globally, and rewinds
    survivors to their step-k values. Densities follow (1-p)^r exactly.
    """
    shape = input_shape if input_shape is not None else data.input_shape
    classes = num_classes if num_classes is not None else data.num_classes
    model0 = build_model(arch, cfg.train.seed, shape, classes)
    k = cfg.train.rewind_step
    if k > 0:
        model_k = train(model0, data, cfg.train, stop_step=k)
    else:
        model_k = model0.copy()
    theta_k = model_k.maskable_vector().copy()
    d = model_k.d

    results = []
    mask = np.ones(d, dtype=np.int64)
    for r in range(1, cfg.rounds + 1):
        current = model_k.copy()
        current.set_maskable_vector(theta_k * mask)
        final = train(current, data, cfg.train, mask=mask.astype(np.float64), start_step=k)
        # prune to round(d * (1-p)^r) survivors by final magnitude, globally
        surviving = int(np.floor(d * (1 - cfg.prune_fraction) ** r + 0.5))
        magnitudes = np.abs(final.maskable_vector())
        magnitudes[mask == 0] = -np.inf
        order = np.argsort(-magnitudes, kind="stable")
        new_mask = np.zeros(d, dtype=np.int64)
        new_mask[order[:surviving]] = 1
        mask = new_mask
        results.append((Ticket(mask=mask.copy(), layout=model_k.maskable_layout()), final))
    return results, model_k


def sanity_ablate(ticket: Ticket, kind: str, model: ModelState, seed: int,
                  distribution=None):
    """Mask/weight ablations: shuffle_layerwise, reinit, invert.

    shuffle permutes mask bits within each layer (per-layer density exact);
    reinit redraws the model with a new seed under the same ticket; invert
    clamps the stored distribution to the least probable entries.
    """
    if kind == "shuffle_layerwise":
        if not ticket.layout:
            raise BaselineError("shuffle needs a ticket with a layer layout")
        rng = np.random.default_rng(np.random.SeedSequence([47, seed]))
        new_mask = ticket.mask.copy()
        off = 0
        for _, sz in ticket.layout:
            seg = new_mask[off:off + sz]
            new_mask[off:off + sz] = rng.permutation(seg)
            off += sz
        return Ticket(mask=new_mask, layout=list(ticket.layout))
    if kind == "reinit":
        return build_model(model.arch, seed, model.input_shape, model.num_classes)
    if kind == "invert":
        if distribution is None:
            raise BaselineError("invert requires the stored mask distribution")
        kappa = ticket.density
        return invert_clamp(distribution, kappa)
    raise BaselineError(f"unknown ablation kind '{kind}'")
