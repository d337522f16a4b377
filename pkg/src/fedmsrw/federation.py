"""Federated training: local rounds, ability scores, re-weighting, aggregation.

A *net* is any callable ``net(params, x, train) -> (pred, backward)`` as
returned by :func:`fedmsrw.model.build_model`; a *sampler* is any callable
``sampler(rng) -> (images, labels, brain_masks)``.
"""
from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .model import NORM, OptimizerConfig, ParamSet, sgd_step
from .objectives import soft_dice_loss
from .tensor import NonFiniteError

log = logging.getLogger(__name__)

UNIFORM = "uniform"
ABILITY_PROB = "ability_prob"
ABILITY_ENTROPY = "ability_entropy"
AGGREGATIONS = (UNIFORM, ABILITY_PROB, ABILITY_ENTROPY)
REWEIGHTS = ("none", "ratio", "voxel_count")


@dataclass(frozen=True)
class StrategyConfig:
    name: str = "custom"
    bn_exclude: bool = False
    aggregation: str = UNIFORM
    proximal_mu: Optional[float] = None
    local_reweight: str = "none"
    vr_floor: float = 1e-6
    weight_cap_factor: float = 10.0

    def __post_init__(self):
        if self.aggregation not in AGGREGATIONS:
            raise ValueError(f"unknown aggregation {self.aggregation!r}; choose from {AGGREGATIONS}")
        if self.local_reweight not in REWEIGHTS:
            raise ValueError(f"unknown local_reweight {self.local_reweight!r}; choose from {REWEIGHTS}")
        if self.proximal_mu is not None and self.proximal_mu < 0:
            raise ValueError("proximal_mu must be non-negative")
        if self.vr_floor <= 0 or self.weight_cap_factor <= 0:
            raise ValueError("vr_floor and weight_cap_factor must be positive")


_FEDBN = dict(bn_exclude=True, aggregation=UNIFORM, proximal_mu=None, local_reweight="none")
PRESETS = {
    "FedAvg": dict(bn_exclude=False, aggregation=UNIFORM, proximal_mu=None, local_reweight="none"),
    "FedProx": dict(bn_exclude=False, aggregation=UNIFORM, proximal_mu=0.01, local_reweight="none"),
    "FedBN": _FEDBN,
    "FedMSRW": dict(_FEDBN, aggregation=ABILITY_PROB, local_reweight="ratio"),
    "Ours-ent": dict(_FEDBN, aggregation=ABILITY_ENTROPY, local_reweight="ratio"),
    "Ours-vol": dict(_FEDBN, aggregation=ABILITY_PROB, local_reweight="voxel_count"),
    "RW-CA": dict(_FEDBN, aggregation=ABILITY_PROB),
    "RW-LT": dict(_FEDBN, local_reweight="ratio"),
}


def preset(name: str, **overrides) -> StrategyConfig:
    if name not in PRESETS:
        raise ValueError(f"unknown strategy preset {name!r}; choose from {sorted(PRESETS)}")
    return StrategyConfig(name=name, **{**PRESETS[name], **overrides})


# ---------------------------------------------------------------------------
# scores and weights
# ---------------------------------------------------------------------------

def ability_score(pred: np.ndarray, label: np.ndarray) -> Optional[float]:
    """Confidence on true-lesion voxels times (1 - soft Dice loss).

    Returns ``None`` for an empty label, which callers leave out of the
    round mean.
    """
    ysum = float(np.sum(label))
    if ysum == 0.0:
        return None
    loss, _ = soft_dice_loss(pred, label)
    return float(np.sum(pred * label)) / ysum * (1.0 - loss)


def ability_score_entropy(pred: np.ndarray, label: np.ndarray) -> Optional[float]:
    """Mean voxel entropy term ``-p ln p`` times (1 - soft Dice loss)."""
    if float(np.sum(label)) == 0.0:
        return None
    p = np.clip(pred, 1e-12, 1.0 - 1e-12)
    loss, _ = soft_dice_loss(pred, label)
    return float(np.mean(-p * np.log(p))) * (1.0 - loss)


def local_loss_weight(vr_all: Sequence[Optional[float]], i: int, floor: float = 1e-6,
                      cap: Optional[float] = None) -> float:
    """``sum_j vr_j / (N * vr_i)``; 1.0 until every client has a ratio."""
    if any(v is None for v in vr_all):
        return 1.0
    vr = [max(float(v), floor) for v in vr_all]
    w = math.fsum(vr) / (len(vr) * vr[i])
    return min(w, cap) if cap is not None else w


def _pairwise_sum(terms: list) -> np.ndarray:
    if len(terms) == 1:
        return terms[0]
    mid = len(terms) // 2
    return _pairwise_sum(terms[:mid]) + _pairwise_sum(terms[mid:])


def normalize_weights(weights: Sequence[float]) -> list[float]:
    w = [float(x) for x in weights]
    if any(x < 0 or not math.isfinite(x) for x in w):
        raise ValueError(f"aggregation weights must be finite and non-negative, got {w}")
    total = math.fsum(w)
    if total <= 0:
        log.warning("aggregation weights sum to zero; falling back to uniform")
        return [1.0 / len(w)] * len(w)
    return [x / total for x in w]


def aggregated_names(params: ParamSet, bn_exclude: bool) -> list[str]:
    return [e.name for e in params if not (bn_exclude and e.tag == NORM)]


def aggregate(params_list: Sequence[ParamSet], weights: Sequence[float],
              bn_exclude: bool) -> dict[str, np.ndarray]:
    """Weighted average of the shared entries, in fixed client order.

    Returns ``{name: averaged value}``. With ``bn_exclude`` the norm-tagged
    entries are left out and stay with their clients.
    """
    if not params_list:
        raise ValueError("aggregate needs at least one parameter set")
    if len(weights) != len(params_list):
        raise ValueError("one weight per parameter set required")
    ref = params_list[0].signature()
    for k, p in enumerate(params_list[1:], start=1):
        sig = p.signature()
        if sig != ref:
            diff = next((a, b) for a, b in zip(ref, sig) if a != b) if len(sig) == len(ref) \
                else (f"{len(ref)} entries", f"{len(sig)} entries")
            raise ValueError(f"parameter set {k} differs structurally from set 0: "
                             f"{diff[1]} vs {diff[0]}")
    w = normalize_weights(weights)
    out = {}
    for name in aggregated_names(params_list[0], bn_exclude):
        out[name] = _pairwise_sum([wi * p[name].value for wi, p in zip(w, params_list)])
    return out


# ---------------------------------------------------------------------------
# clients and rounds
# ---------------------------------------------------------------------------

@dataclass
class ClientState:
    client_id: str
    params: ParamSet
    rng: np.random.Generator
    vr: Optional[float] = None          # running mean lesion/brain ratio
    voxels: Optional[float] = None      # running mean lesion voxel count per patch
    ratio_rounds: int = 0
    rounds: int = 0
    p_score: float = 0.0
    loss_weight: float = 1.0
    mean_loss: float = float("nan")
    iteration_log: list = field(default_factory=list)


@dataclass
class RoundReport:
    round: int
    client_ids: list
    p_scores: list
    vr: list
    agg_weights: list
    loss_weights: list
    mean_loss: list

    def to_json(self, **extra) -> str:
        return json.dumps({**extra, **asdict(self)}, sort_keys=True)


def _patch_stats(labels: np.ndarray, brains: np.ndarray):
    """Mean lesion ratio over brain-containing patches, and mean lesion voxels."""
    ratios = []
    for y, b in zip(labels, brains):
        nb = np.count_nonzero(b)
        if nb:
            ratios.append(np.count_nonzero(y) / nb)
    voxels = float(np.mean([np.count_nonzero(y) for y in labels]))
    return (float(np.mean(ratios)) if ratios else None), voxels


def local_round(client: ClientState, global_values: dict, sampler: Callable, iters: int,
                strategy: StrategyConfig, opt: OptimizerConfig, net: Callable) -> ClientState:
    """Run ``iters`` local SGD iterations starting from the broadcast values."""
    if iters < 1:
        raise ValueError("iters must be >= 1")
    params = client.params
    for name, value in global_values.items():
        params[name].value[...] = value
    mu = strategy.proximal_mu
    anchor = {n: v.copy() for n, v in global_values.items() if params[n].trainable} if mu else {}
    scorer = ability_score_entropy if strategy.aggregation == ABILITY_ENTROPY else ability_score
    w = client.loss_weight

    scores, ratios, voxels, losses = [], [], [], []
    for q in range(iters):
        x, y, b = sampler(client.rng)
        params.zero_grad()
        pred, backward = net(params, x, True)
        loss, grad = soft_dice_loss(pred, y)
        total = w * loss
        if mu:
            total += 0.5 * mu * math.fsum(float(np.sum((params[n].value - a) ** 2))
                                          for n, a in anchor.items())
        if not math.isfinite(total):
            raise NonFiniteError(f"client {client.client_id}: non-finite loss at iteration {q}")
        s = scorer(pred, y)
        r, v = _patch_stats(y, b)
        backward(w * grad)
        for n, a in anchor.items():
            params[n].grad += mu * (params[n].value - a)
        sgd_step(params, opt)
        losses.append(loss)
        if s is not None:
            scores.append(s)
        if r is not None:
            ratios.append(r)
        voxels.append(v)
        client.iteration_log.append((client.rounds + 1, q, loss, s, r))

    client.rounds += 1
    client.mean_loss = float(np.mean(losses))
    if scores:
        client.p_score = float(np.mean(scores))
    if ratios:
        k = client.ratio_rounds + 1
        rm, vm = float(np.mean(ratios)), float(np.mean(voxels))
        client.vr = rm if client.vr is None else ((k - 1) * client.vr + rm) / k
        client.voxels = vm if client.voxels is None else ((k - 1) * client.voxels + vm) / k
        client.ratio_rounds = k
    return client


def make_clients(init_params: ParamSet, client_ids: Sequence[str], seed: int = 0,
                 client_seeds: Optional[Sequence[int]] = None) -> list[ClientState]:
    clients = []
    for i, cid in enumerate(client_ids):
        ss = np.random.SeedSequence([client_seeds[i]] if client_seeds is not None else [seed, i])
        clients.append(ClientState(cid, init_params.copy(), np.random.default_rng(ss)))
    return clients


def run_federation(samplers: Sequence[Callable], strategy: StrategyConfig, rounds: int,
                   iters: int, net: Callable, init_params: ParamSet,
                   opt: OptimizerConfig = OptimizerConfig(), seed: int = 0,
                   client_ids: Optional[Sequence[str]] = None,
                   client_seeds: Optional[Sequence[int]] = None, workers: int = 1,
                   on_round: Optional[Callable[[RoundReport], None]] = None):
    """Federated training loop; returns ``(per-client ParamSets, reports)``.

    Every client starts from ``init_params``. Each round all clients train
    locally, the server averages the shared entries (uniformly or by ability
    score) and broadcasts them back, then next-round loss weights are derived
    from the clients' running lesion ratios.
    """
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    n = len(samplers)
    if n < 1:
        raise ValueError("at least one client required")
    client_ids = list(client_ids) if client_ids is not None else [f"c{i}" for i in range(n)]
    clients = make_clients(init_params, client_ids, seed, client_seeds)
    global_values = {name: init_params[name].value.copy()
                     for name in aggregated_names(init_params, strategy.bn_exclude)}
    reports = []

    def train(i: int):
        try:
            local_round(clients[i], global_values, samplers[i], iters, strategy, opt, net)
        except Exception as exc:
            raise RuntimeError(f"client {clients[i].client_id} failed in local round: {exc}") from exc

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        for p in range(1, rounds + 1):
            loss_weights = [c.loss_weight for c in clients]
            if workers > 1:
                list(pool.map(train, range(n)))
            else:
                for i in range(n):
                    train(i)
            if strategy.aggregation == UNIFORM:
                raw = [1.0] * n
            else:
                raw = [c.p_score for c in clients]
            weights = normalize_weights(raw)
            global_values = aggregate([c.params for c in clients], weights, strategy.bn_exclude)
            if strategy.local_reweight != "none":
                stat = [c.vr if strategy.local_reweight == "ratio" else c.voxels for c in clients]
                cap = strategy.weight_cap_factor * n
                for i, c in enumerate(clients):
                    c.loss_weight = local_loss_weight(stat, i, strategy.vr_floor, cap)
            report = RoundReport(p, list(client_ids), [c.p_score for c in clients],
                                 [c.vr for c in clients], weights, loss_weights,
                                 [c.mean_loss for c in clients])
            reports.append(report)
            if on_round is not None:
                on_round(report)

    for c in clients:
        for name, value in global_values.items():
            c.params[name].value[...] = value
    return [c.params for c in clients], reports
