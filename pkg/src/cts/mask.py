"""Probabilistic retention mask: logits, Concrete sampling, density, clamping.

Retention probabilities are stored as logits; a soft mask sample is
sigmoid((logit + eps) / tau) with eps ~ logistic(0, 1). Noise is drawn from
counter-based seeds, so a search replays bit-exactly from (run seed, step).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

TAU_DEFAULT = 2.0 / 3.0
KAPPA_CLAMP = 1.0 - 1e-9

TICKET_FORMAT_VERSION = 1


class MaskError(Exception):
    pass


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass
class MaskDistribution:
    logits: np.ndarray
    tau: float
    layout: list[tuple[str, int]] = field(default_factory=list)

    @property
    def d(self) -> int:
        return self.logits.size

    @property
    def alpha(self) -> np.ndarray:
        return _sigmoid(self.logits)


@dataclass
class SoftMask:
    values: np.ndarray
    noise_seed: tuple | None = None


@dataclass
class Ticket:
    mask: np.ndarray  # binary {0,1}, length d
    layout: list[tuple[str, int]] = field(default_factory=list)

    @property
    def d(self) -> int:
        return self.mask.size

    @property
    def density(self) -> float:
        return float(np.count_nonzero(self.mask)) / self.d

    def indices(self) -> np.ndarray:
        return np.flatnonzero(self.mask)

    def per_layer_density(self) -> list[tuple[str, float]]:
        out = []
        off = 0
        for name, sz in self.layout:
            seg = self.mask[off:off + sz]
            out.append((name, float(np.count_nonzero(seg)) / sz))
            off += sz
        return out


def init_distribution(d: int, kappa: float, tau: float = TAU_DEFAULT,
                      layout=None) -> MaskDistribution:
    """All entries start at retention probability kappa."""
    if not 0 < kappa <= 1:
        raise MaskError(f"kappa must be in (0, 1], got {kappa}")
    if tau <= 0:
        raise MaskError(f"tau must be positive, got {tau}")
    k = min(kappa, KAPPA_CLAMP)
    logit = float(np.log(k) - np.log1p(-k))
    return MaskDistribution(np.full(d, logit, dtype=np.float64), tau,
                            list(layout) if layout else [])


def sample_logistic(rng: np.random.Generator, size: int) -> np.ndarray:
    """Inverse-CDF logistic(0,1) noise with a resample guard at u in {0,1}."""
    u = rng.random(size)
    bad = (u <= 0.0) | (u >= 1.0)
    while np.any(bad):
        u[bad] = rng.random(int(bad.sum()))
        bad = (u <= 0.0) | (u >= 1.0)
    return np.log(u) - np.log1p(-u)


def step_rng(run_seed: int, step: int, stream: int = 0) -> np.random.Generator:
    """Counter-based generator: deterministic per (run seed, step, stream)."""
    return np.random.default_rng(np.random.SeedSequence([run_seed, step, stream]))


def sample_soft_mask(dist: MaskDistribution, rng: np.random.Generator,
                     noise_seed=None) -> SoftMask:
    eps = sample_logistic(rng, dist.d)
    values = _sigmoid((dist.logits + eps) / dist.tau)
    return SoftMask(values=values, noise_seed=noise_seed)


def soft_mask_tensor(logits: Tensor, eps: np.ndarray, tau: float) -> Tensor:
    """Tracked soft mask: sigmoid((logits + eps)/tau) with eps held constant."""
    return T.sigmoid(T.mul(T.add(logits, Tensor(eps)), 1.0 / tau))


def expected_density(dist: MaskDistribution) -> float:
    return float(np.mean(dist.alpha))


def sparsity_loss(dist: MaskDistribution, kappa_target: float) -> float:
    """Normalized constraint: sum(alpha) / (kappa d) - 1; zero at the target."""
    if not 0 < kappa_target <= 1:
        raise MaskError(f"kappa_target must be in (0, 1], got {kappa_target}")
    return float(np.sum(dist.alpha) / (kappa_target * dist.d) - 1.0)


def sparsity_loss_grad(dist: MaskDistribution, kappa_target: float) -> np.ndarray:
    """Analytic gradient w.r.t. the logits: sigma'(logit) / (kappa d)."""
    a = dist.alpha
    return a * (1.0 - a) / (kappa_target * dist.d)


def _topk_mask(scores: np.ndarray, kappa: float) -> np.ndarray:
    d = scores.size
    n = int(np.floor(kappa * d + 0.5))  # round half-up
    if n <= 0:
        raise MaskError("empty ticket: round(kappa * d) == 0")
    # ties broken by lower flat index: stable sort of descending score
    order = np.argsort(-scores, kind="stable")
    mask = np.zeros(d, dtype=np.int64)
    mask[order[:n]] = 1
    return mask


def clamp_topk(dist: MaskDistribution, kappa: float) -> Ticket:
    """Deterministic ticket: keep the round(kappa*d) most probable entries."""
    if not 0 < kappa <= 1:
        raise MaskError(f"kappa must be in (0, 1], got {kappa}")
    return Ticket(mask=_topk_mask(dist.logits, kappa), layout=list(dist.layout))


def invert_clamp(dist: MaskDistribution, kappa: float) -> Ticket:
    """Sanity-check variant: keep the least probable entries instead."""
    if not 0 < kappa <= 1:
        raise MaskError(f"kappa must be in (0, 1], got {kappa}")
    return Ticket(mask=_topk_mask(-dist.logits, kappa), layout=list(dist.layout))


# -- ticket container ---------------------------------------------------------

def save_ticket(path, ticket: Ticket, arch: str = "", kappa: float | None = None,
                meta: dict | None = None) -> None:
    """Canonical bit-exact form: the sorted list of retained flat indices."""
    doc = {
        "version": TICKET_FORMAT_VERSION,
        "arch": arch,
        "d": ticket.d,
        "kappa": kappa,
        "density": ticket.density,
        "layout": [[name, sz] for name, sz in ticket.layout],
        "indices": [int(i) for i in ticket.indices()],
    }
    if meta:
        doc["meta"] = meta
    with open(path, "w") as f:
        json.dump(doc, f, indent=0, sort_keys=True)
        f.write("\n")


def load_ticket(path) -> tuple[Ticket, dict]:
    with open(path) as f:
        doc = json.load(f)
    if doc.get("version") != TICKET_FORMAT_VERSION:
        raise MaskError(f"{path}: unsupported ticket version {doc.get('version')}")
    mask = np.zeros(int(doc["d"]), dtype=np.int64)
    mask[np.asarray(doc["indices"], dtype=np.int64)] = 1
    layout = [(name, int(sz)) for name, sz in doc.get("layout", [])]
    return Ticket(mask=mask, layout=layout), doc
