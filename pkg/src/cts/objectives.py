"""Differentiable pruning objectives over (masked student, dense teacher) pairs.

Tags: loss, dloss, gradnorm, kl, feature, grad. The teacher pass is always
evaluated outside the gradient graph. The two gradient-based objectives
(gradnorm, grad) differentiate a gradient: on pure dense models this uses
double-backward; on conv models it falls back to a finite-difference
Hessian-vector product, with the chain to the mask logits applied
analytically.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .models import Conv, ForwardTrace, ModelState, _flatten_specs, forward
from .tensor import Tensor

NORM_DELTA = 1e-5
HVP_H_SCALE = 1e-4


class ObjectiveError(Exception):
    pass


@dataclass(frozen=True)
class ObjectiveKind:
    tag: str
    needs_teacher: bool
    needs_student_grads: bool


OBJECTIVES = {
    "loss": ObjectiveKind("loss", needs_teacher=False, needs_student_grads=False),
    "dloss": ObjectiveKind("dloss", needs_teacher=True, needs_student_grads=False),
    "gradnorm": ObjectiveKind("gradnorm", needs_teacher=False, needs_student_grads=True),
    "kl": ObjectiveKind("kl", needs_teacher=True, needs_student_grads=False),
    "feature": ObjectiveKind("feature", needs_teacher=True, needs_student_grads=False),
    "grad": ObjectiveKind("grad", needs_teacher=True, needs_student_grads=True),
}


def get_kind(tag: str) -> ObjectiveKind:
    if tag not in OBJECTIVES:
        raise ObjectiveError(f"unknown objective tag '{tag}' (choose from {sorted(OBJECTIVES)})")
    return OBJECTIVES[tag]


def normalize(x: Tensor) -> Tensor:
    """(x - mean) / sqrt(var + delta), statistics over the whole tensor."""
    mu = T.mean(x)
    xc = x - T.broadcast_to(T.reshape(mu, (1,) * x.data.ndim), x.shape)
    var = T.mean(T.mul(xc, xc))
    inv = T.power(var + NORM_DELTA, -0.5)
    return T.mul(xc, T.broadcast_to(T.reshape(inv, (1,) * x.data.ndim), x.shape))


def mse(a: Tensor, b: Tensor) -> Tensor:
    diff = a - b
    return T.mean(T.mul(diff, diff))


# -- the six objectives, on traces / gradient lists ---------------------------

def task_loss(student: ForwardTrace) -> Tensor:
    return student.loss


def rel_loss_change(student: ForwardTrace, teacher: ForwardTrace) -> Tensor:
    t = teacher.loss.item()
    if t < 1e-12:
        raise ObjectiveError("degenerate teacher loss (< 1e-12)")
    return T.absolute(student.loss * (1.0 / t) - 1.0)


def reverse_kl(student: ForwardTrace, teacher: ForwardTrace) -> Tensor:
    """Batch-mean KL(student || teacher) over softmax outputs, in log space."""
    logp_s = T.log_softmax(student.logits, axis=-1)
    logp_t = Tensor(_log_softmax_np(teacher.logits.data))
    p_s = T.exp(logp_s)
    per_example = T.sum_(T.mul(p_s, logp_s - logp_t), axis=-1)
    return T.mean(per_example)


def feature_match(student: ForwardTrace, teacher: ForwardTrace) -> Tensor:
    if len(student.features) != len(teacher.features):
        raise ObjectiveError(
            f"feature layer count mismatch: {len(student.features)} vs {len(teacher.features)}")
    terms = [mse(normalize(fs), normalize(Tensor(ft.data)))
             for fs, ft in zip(student.features, teacher.features)]
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return T.mul(total, 1.0 / len(terms))


def neg_grad_norm(student_grads: list[Tensor]) -> Tensor:
    flat = T.concat([T.reshape(g, (g.size,)) for g in student_grads])
    return T.neg(T.l2_norm(flat))


def grad_match(student_grads: list[Tensor], teacher_grads: list[np.ndarray]) -> Tensor:
    if len(student_grads) != len(teacher_grads):
        raise ObjectiveError("gradient layer count mismatch")
    terms = [mse(normalize(gs), normalize(Tensor(gt)))
             for gs, gt in zip(student_grads, teacher_grads)]
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return T.mul(total, 1.0 / len(terms))


def _log_softmax_np(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def has_conv(model: ModelState) -> bool:
    return any(isinstance(s, Conv) for s in _flatten_specs(model.specs))


def _teacher_trace(model: ModelState, x, y, capture: bool) -> ForwardTrace:
    with T.no_grad():
        return forward(model, x, y, capture_features=capture)


def _maskable_grads(model: ModelState, x, y, theta_eff: np.ndarray) -> list[np.ndarray]:
    """Per-layer loss gradients w.r.t. the maskable weights set to theta_eff."""
    m = model.copy()
    m.set_maskable_vector(theta_eff)
    leaves = {k: Tensor(v, requires_grad=(k in {n for n, _, _ in m.maskable_index}))
              for k, v in m.params.items()}
    trace = forward(m, x, y, param_tensors=leaves)
    wrt = [leaves[name] for name, _, _ in m.maskable_index]
    gmap = T.backward(trace.loss, wrt=wrt)
    return [gmap[id(t)].data for t in wrt]


def teacher_layer_grads(model: ModelState, x, y) -> list[np.ndarray]:
    return _maskable_grads(model, x, y, model.maskable_vector())


# -- unified evaluation --------------------------------------------------------

def evaluate(tag: str, model: ModelState, x, y, overlay,
             teacher: ForwardTrace | None = None) -> Tensor:
    """Objective value as a (possibly tracked) scalar Tensor.

    ``overlay`` is a hard mask vector, a tracked soft-mask Tensor, or None.
    For gradnorm/grad with a tracked overlay, the student gradient nodes are
    produced by an in-graph backward (dense architectures only); use
    value_and_alpha_grad for the conv fallback.
    """
    kind = get_kind(tag)
    capture = tag == "feature"
    if kind.needs_teacher and teacher is None:
        teacher = _teacher_trace(model, x, y, capture)

    if not kind.needs_student_grads:
        student = forward(model, x, y, overlay=overlay, capture_features=capture)
        if tag == "loss":
            return task_loss(student)
        if tag == "dloss":
            return rel_loss_change(student, teacher)
        if tag == "kl":
            return reverse_kl(student, teacher)
        return feature_match(student, teacher)

    # gradient-based objectives
    tracked = isinstance(overlay, Tensor) and overlay.requires_grad
    if not tracked:
        vec = np.ones(model.d) if overlay is None else np.asarray(
            overlay.data if isinstance(overlay, Tensor) else overlay, dtype=np.float64)
        return Tensor(np.asarray(hard_value(tag, model, x, y, vec)))
    effective: dict[str, Tensor] = {}
    student = forward(model, x, y, overlay=overlay, capture_features=False,
                      effective_out=effective)
    eff_list = [effective[name] for name, _, _ in model.maskable_index]
    grads = T.grad(student.loss, eff_list, create_graph=tracked)
    if tag == "gradnorm":
        return neg_grad_norm(grads)
    t_grads = teacher_layer_grads(model, x, y)
    return grad_match(grads, t_grads)


def value_and_alpha_grad(tag: str, model: ModelState, x, y,
                         logits: np.ndarray, eps: np.ndarray,
                         tau: float) -> tuple[float, np.ndarray]:
    """Objective value plus its gradient w.r.t. the mask logits.

    One soft-mask sample with fixed noise eps. Conv architectures route the
    gradient-based objectives through a finite-difference Hessian-vector
    product instead of double-backward.
    """
    kind = get_kind(tag)
    if kind.needs_student_grads and has_conv(model):
        return _value_and_alpha_grad_fd(tag, model, x, y, logits, eps, tau)
    leaf = Tensor(logits, requires_grad=True)
    from .mask import soft_mask_tensor  # local import to avoid cycle
    s = soft_mask_tensor(leaf, eps, tau)
    value = evaluate(tag, model, x, y, overlay=s)
    (g,) = T.grad(value, [leaf])
    return value.item(), g.data.copy()


def _value_and_alpha_grad_fd(tag: str, model: ModelState, x, y,
                             logits: np.ndarray, eps: np.ndarray,
                             tau: float) -> tuple[float, np.ndarray]:
    s = 1.0 / (1.0 + np.exp(-np.clip((logits + eps) / tau, -500, 500)))
    theta = model.maskable_vector()
    theta_eff = s * theta
    sizes = [sz for _, _, sz in model.maskable_index]
    offs = np.cumsum([0] + sizes)

    def split(vec):
        return [vec[offs[i]:offs[i + 1]] for i in range(len(sizes))]

    g_layers = _maskable_grads(model, x, y, theta_eff)
    g_flat = np.concatenate([g.reshape(-1) for g in g_layers])

    if tag == "gradnorm":
        norm = float(np.linalg.norm(g_flat))
        if norm < 1e-12:
            raise ObjectiveError("zero gradient; gradient-norm objective undefined")
        value = -norm
        v = -g_flat / norm
    else:
        t_grads = teacher_layer_grads(model, x, y)
        leaves = [Tensor(g.reshape(-1), requires_grad=True) for g in split(g_flat)]
        shaped = [T.reshape(l, model.params[name].shape)
                  for l, (name, _, _) in zip(leaves, model.maskable_index)]
        r = grad_match(shaped, t_grads)
        value = r.item()
        gmap = T.backward(r, wrt=leaves)
        v = np.concatenate([gmap[id(l)].data.reshape(-1) for l in leaves])

    vnorm = float(np.linalg.norm(v))
    if vnorm < 1e-12:
        dR_dtheta = np.zeros_like(theta_eff)
    else:
        h = HVP_H_SCALE * max(float(np.linalg.norm(theta_eff)), 1.0) / vnorm
        gp = _maskable_grads(model, x, y, theta_eff + h * v)
        gm = _maskable_grads(model, x, y, theta_eff - h * v)
        gp_flat = np.concatenate([g.reshape(-1) for g in gp])
        gm_flat = np.concatenate([g.reshape(-1) for g in gm])
        dR_dtheta = (gp_flat - gm_flat) / (2 * h)

    ds = s * (1.0 - s) / tau
    return value, dR_dtheta * theta * ds


def hard_value(tag: str, model: ModelState, x, y, mask_vec: np.ndarray) -> float:
    """Objective value under a hard binary mask (no Concrete noise)."""
    kind = get_kind(tag)
    if not kind.needs_student_grads:
        with T.no_grad():
            return evaluate(tag, model, x, y, overlay=np.asarray(mask_vec, dtype=np.float64)).item()
    theta_eff = model.maskable_vector() * np.asarray(mask_vec, dtype=np.float64)
    g_layers = _maskable_grads(model, x, y, theta_eff)
    if tag == "gradnorm":
        g_flat = np.concatenate([g.reshape(-1) for g in g_layers])
        return -float(np.linalg.norm(g_flat))
    t_grads = teacher_layer_grads(model, x, y)
    with T.no_grad():
        shaped = [Tensor(g) for g in g_layers]
        return grad_match(shaped, t_grads).item()
