"""Reference competitors on the same data, seeds and network ledger.

* IND: each node trains alone on its own pri+pub data.
* AGG: own pri+pub plus every node's public set.
* FedAvg / FedProx: a logical server averages parameters weighted by local
  data size; FedProx adds ``mu * (theta - theta_server)`` to the local gradient.
* FedMD (simplified): nodes train locally and, every ``E`` rounds, distill
  towards the server-side mean of their posteriors on a shared public batch.
  The original method's transfer-learning phase is not reproduced.
"""
from __future__ import annotations

import dataclasses

import numpy as np

from .config import RunConfig
from .data import LabeledSet
from .losses import ce_loss_grad, kl_loss_grad, softmax
from .nn import ModelParams, backward, forward, optimizer_step
from .protocol import (SERVER, NetworkLedger, RunResult, Tracker, _trace_digest, build_domains,
                       derive_rng, finish_run, local_pool_for, local_round,
                       make_node, method_tag, run_nodes, signal_wire_size)


class InapplicableError(ValueError):
    """The method cannot run on this federation (e.g. heterogeneous architectures)."""


def run_centralized_local(kind: str, cfg: RunConfig, trace: bool = False) -> RunResult:
    kind = kind.lower()
    pools = {"ind": "own", "agg": "all_public"}
    if kind not in pools:
        raise ValueError(f"unknown local baseline {kind!r}")
    if cfg.method != kind:
        cfg = dataclasses.replace(cfg, method=kind)
    return run_nodes(cfg, pools[kind], mutual=False, trace=trace)


def _require_homogeneous(dims_list) -> None:
    if len({tuple(d) for d in dims_list}) > 1:
        raise InapplicableError("parameter averaging needs identical architectures on every node")


def fedavg_round(models, sizes) -> ModelParams:
    """Data-size weighted parameter average."""
    _require_homogeneous([m.layer_dims for m in models])
    sizes = np.asarray(sizes, dtype=np.float64)
    weights = sizes / sizes.sum()
    flat = weights[0] * models[0].flat
    for w, m in zip(weights[1:], models[1:]):
        flat = flat + w * m.flat
    return ModelParams(models[0].layer_dims, flat)


def fedprox_local_grad(node, theta_global, mu: float) -> tuple[float, np.ndarray]:
    """Local CE gradient plus the proximal pull ``mu * (theta - theta_global)``."""
    if mu < 0:
        raise ValueError("mu must be nonnegative")
    theta_global = theta_global.flat if isinstance(theta_global, ModelParams) else np.asarray(theta_global)
    if theta_global.shape != node.model.flat.shape:
        raise InapplicableError("server and node parameter vectors differ in length")
    rows = node.local_sampler.next_rows()
    logits, cache = forward(node.model, node.local_pool.x[rows])
    loss, dlogits = ce_loss_grad(logits, node.local_pool.y[rows])
    grad = backward(node.model, cache, dlogits)
    if mu:
        grad = grad + mu * (node.model.flat - theta_global)
    return loss, grad


def run_fedavg(cfg: RunConfig, mu: float = 0.0, trace: bool = False) -> RunResult:
    """FedAvg (``mu == 0``) or FedProx rounds with participation and interval knobs."""
    seed = cfg.seed
    _require_homogeneous([cfg.layer_dims(i) for i in range(cfg.nodes)])
    domains = build_domains(cfg, seed)
    n = len(domains)
    nodes = [make_node(cfg, seed, i, domains, local_pool_for(i, domains, "own")) for i in range(n)]
    sizes = [len(nd.local_pool) for nd in nodes]
    server = nodes[0].model
    server_rng = derive_rng(seed, SERVER)
    ledger = NetworkLedger()
    tracker = Tracker(domains, n)
    n_take = max(1, int(round(cfg.fedavg_fraction * n)))
    digests = []
    participants = list(range(n))
    for rnd in range(1, cfg.rounds + 1):
        if (rnd - 1) % cfg.fedavg_interval == 0:
            participants = list(range(n)) if n_take == n else \
                sorted(server_rng.choice(n, size=n_take, replace=False).tolist())
            for i in participants:
                nodes[i].model = server
            ledger.record(rnd, server.size * 4, len(participants))
        for i in participants:
            node = nodes[i]
            if mu:
                loss, grad = fedprox_local_grad(node, server, mu)
                node.model = optimizer_step(node.model, grad, node.opt_local)
                tracker.local_loss(i, loss)
            else:
                tracker.local_loss(i, local_round(node, rnd).ce_local)
        if rnd % cfg.fedavg_interval == 0:
            server = fedavg_round([nodes[i].model for i in participants],
                                  [sizes[i] for i in participants])
            ledger.record(rnd, server.size * 4, len(participants))
        if trace:
            digests.append(_trace_digest([server]))
        if rnd % cfg.eval_every == 0:
            tracker.evaluate(rnd, [server] * n)
    return finish_run(cfg, seed, domains, [server] * n, tracker, ledger, method_tag(cfg), digests)


def distill_step(node, x: np.ndarray, target: np.ndarray) -> float:
    """One global-optimizer step on mean KL(target || node) over the batch."""
    logits, cache = forward(node.model, x)
    kl_rows, g = kl_loss_grad(logits, target)
    node.model = optimizer_step(node.model, backward(node.model, cache, g / len(x)), node.opt_global)
    return float(kl_rows.mean())


def consensus_posteriors(nodes, x: np.ndarray) -> np.ndarray:
    return np.mean([softmax(forward(nd.model, x)[0]) for nd in nodes], axis=0)


def fedmd_round(nodes, public_union: LabeledSet, *, rng, batch_size: int = 32,
                distill_steps: int = 1, ledger: NetworkLedger | None = None, rnd: int = 0) -> float:
    """Server picks a public batch, averages the nodes' posteriors, nodes distill.

    Returns the mean distillation loss before the update.
    """
    if len(public_union) == 0:
        raise ValueError("FedMD needs a nonempty public set")
    size = min(batch_size, len(public_union))
    rows = np.sort(rng.choice(len(public_union), size=size, replace=False))
    x = public_union.x[rows]
    target = consensus_posteriors(nodes, x)
    if ledger is not None:
        msg = signal_wire_size(size, target.shape[1])
        ledger.record(rnd, msg, 2 * len(nodes))  # posteriors up, consensus down
    losses = []
    for nd in nodes:
        for step in range(distill_steps):
            loss = distill_step(nd, x, target)
            if step == 0:
                losses.append(loss)
    return float(np.mean(losses))


def run_fedmd(cfg: RunConfig, trace: bool = False) -> RunResult:
    seed = cfg.seed
    domains = build_domains(cfg, seed)
    n = len(domains)
    nodes = [make_node(cfg, seed, i, domains, local_pool_for(i, domains, "own")) for i in range(n)]
    public_union = LabeledSet.concat([d.pub for d in domains])
    server_rng = derive_rng(seed, SERVER)
    ledger = NetworkLedger()
    tracker = Tracker(domains, n)
    digests = []
    for rnd in range(1, cfg.rounds + 1):
        for nd in nodes:
            tracker.local_loss(nd.node_id, local_round(nd, rnd).ce_local)
        if rnd % cfg.E == 0:
            fedmd_round(nodes, public_union, rng=server_rng, batch_size=cfg.batch_size,
                        distill_steps=cfg.fedmd_distill_steps, ledger=ledger, rnd=rnd)
        if trace:
            digests.append(_trace_digest([nd.model for nd in nodes]))
        if rnd % cfg.eval_every == 0:
            tracker.evaluate(rnd, [nd.model for nd in nodes])
    return finish_run(cfg, seed, domains, [nd.model for nd in nodes], tracker, ledger,
                      method_tag(cfg), digests)
