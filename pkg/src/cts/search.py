"""End-to-end ticket search: pre-train, freeze, search, clamp, retrain.

The run is fully deterministic given the config seeds: model init, training
batches, search batches and Concrete noise all derive from counter-based
seed sequences.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import controllers as ctl
from . import mask as mk
from . import objectives as obj
from .data import Dataset
from .models import ModelState, TrainConfig, build_model, train


class SearchError(Exception):
    pass


@dataclass
class SearchConfig:
    kappa: float = 0.05
    tau: float = mk.TAU_DEFAULT
    steps: int = 1000              # S, before quick_factor
    objective: str = "kl"
    controller: str = "gradbalance"
    eta: float = ctl.ETA_DEFAULT
    lambda_lr: float = ctl.LAMBDA_LR_DEFAULT
    alpha_lr: float = 0.1
    batch_size: int = 64
    quick_factor: float = 1.0      # 1, 1/2 or 1/8
    seed_init: int = 0
    seed_search: int = 1
    seed_train: int = 2
    multi_sample: int = 1          # soft-mask samples averaged per step

    def __post_init__(self):
        if not 0 < self.kappa <= 1:
            raise SearchError("kappa must be in (0, 1]")
        if self.steps <= 0:
            raise SearchError("search step count must be positive")
        try:
            obj.get_kind(self.objective)
        except obj.ObjectiveError as e:
            raise SearchError(str(e)) from e

    @property
    def effective_steps(self) -> int:
        return max(1, int(round(self.steps * self.quick_factor)))


@dataclass
class SearchMetrics:
    steps: list[int] = field(default_factory=list)
    objective: list[float] = field(default_factory=list)
    expected_density: list[float] = field(default_factory=list)
    lam: list[float] = field(default_factory=list)
    overshoot_violations: int = 0

    def rows(self):
        return list(zip(self.steps, self.objective, self.expected_density, self.lam))


def search_phase(model: ModelState, cfg: SearchConfig, data: Dataset) -> tuple[mk.MaskDistribution, SearchMetrics]:
    """Optimize the mask distribution over frozen weights.

    Returns the final distribution and the per-step trace. Search batches
    carry no augmentation. The overshoot counter tracks expected density
    exceeding 1.1 * kappa_eff after its first downward crossing of kappa_eff.
    """
    theta_before = model.maskable_vector().copy()
    n_steps = cfg.effective_steps
    dist = mk.init_distribution(model.d, cfg.kappa, cfg.tau, layout=model.maskable_layout())
    state = ctl.ControllerState(mode=cfg.controller, kappa=cfg.kappa,
                                eta=cfg.eta, lambda_lr=cfg.lambda_lr)
    adam = ctl.search_adam(model.d, n_steps, lr=cfg.alpha_lr)
    metrics = SearchMetrics()

    crossed_down = False
    was_above = mk.expected_density(dist) > state.kappa_eff
    for step in range(n_steps):
        xb, yb = data.batch(step, cfg.batch_size, cfg.seed_search, split="train", augment=False)
        rng = mk.step_rng(cfg.seed_search, step, stream=1)
        g_acc = None
        r_acc = 0.0
        for _ in range(cfg.multi_sample):
            if state.mode == "lagrange":
                g_alpha, g_lambda, r_val, _ = ctl.lagrange_step(
                    model, dist, state, (xb, yb), cfg.objective, rng)
                state.lam = state.lam - state.lambda_lr * g_lambda
            else:
                g_alpha, lam, r_val, _ = ctl.gradbalance_step(
                    model, dist, state, (xb, yb), cfg.objective, rng)
                state.lam = lam
            g_acc = g_alpha if g_acc is None else g_acc + g_alpha
            r_acc += r_val
        ctl.adam_update(dist, g_acc / cfg.multi_sample, adam)

        ed = mk.expected_density(dist)
        if was_above and ed <= state.kappa_eff:
            crossed_down = True
        was_above = ed > state.kappa_eff
        if crossed_down and ed > state.kappa_eff * 1.10:
            metrics.overshoot_violations += 1

        metrics.steps.append(step)
        metrics.objective.append(r_acc / cfg.multi_sample)
        metrics.expected_density.append(ed)
        metrics.lam.append(state.lam)

    if not np.array_equal(theta_before, model.maskable_vector()):
        raise SearchError("frozen weights were mutated during search")
    return dist, metrics


def run_cts(cfg: SearchConfig, arch: str, data: Dataset,
            train_cfg: TrainConfig, augment_train: bool = False) -> tuple[mk.Ticket, ModelState, dict]:
    """Full pipeline (k-step pre-train, search, clamp, masked retrain).

    Returns the ticket, the retrained model, and a metrics dict holding the
    per-step search trace plus the rewound state for downstream ablations.
    """
    k = train_cfg.rewind_step
    model0 = build_model(arch, cfg.seed_init, data.input_shape, data.num_classes)
    if k > 0:
        model_k = train(model0, data, train_cfg, stop_step=k, augment=augment_train)
    else:
        model_k = model0.copy()

    dist, metrics = search_phase(model_k, cfg, data)
    ticket = mk.clamp_topk(dist, cfg.kappa)

    eval_x, eval_y = data.eval_batch(seed=cfg.seed_search)
    objective_at_draw = obj.hard_value(cfg.objective, model_k, eval_x, eval_y,
                                       ticket.mask.astype(np.float64))

    final = train(model_k, data, train_cfg, mask=ticket.mask,
                  start_step=k, augment=augment_train)
    info = {
        "search": metrics,
        "distribution": dist,
        "rewind_model": model_k,
        "objective_at_draw": objective_at_draw,
        "expected_density_end": metrics.expected_density[-1] if metrics.steps else
                                mk.expected_density(dist),
    }
    return ticket, final, info
