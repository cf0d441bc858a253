"""Decentralized mutual-distillation protocol over a simulated broadcast network.

Every round each node takes one local CE step on its own data. Every ``E``
rounds the nodes enter a global phase: each emits a teaching signal (soft
labels and batch accuracy on one of its public batches), signals are
delivered through the ledgered network, and each node then takes one step on
the mutual objective after projecting it against its accumulated local
direction.

Teaching signal wire layout (little-endian, fixed 20-byte header)::

    magic  b"TSIG"        4 bytes
    sender u32            4
    round  u32            4
    B      u32            4   batch size
    M      u32            4   classes
    ids    u64[B]         8B
    probs  f32[B*M]       4BM  row-major soft labels
    acc    f32            4
"""
from __future__ import annotations

import hashlib
import struct
from collections.abc import Mapping
from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig, resolve_data_path
from .data import DomainDataset, EpochSampler, LabeledSet, load_idx, make_rotated_domains, \
    make_synthetic_domains, split_domain
from .losses import LossReport, ce_loss_grad, mutual_grad, softmax
from .metrics import MetricsRecord, evaluate, metrics_record, pca2d
from .nn import ModelParams, OptimizerState, backward, forward, hidden_features, init_mlp, \
    optimizer_step
from .projection import ProjectionResult, pcgrad_symmetric, project_or_pass

_HEADER = struct.Struct("<4sIIII")
SIGNAL_MAGIC = b"TSIG"
SIGNAL_HEADER_BYTES = _HEADER.size
ROW_SUM_TOL = 1e-3


def signal_wire_size(batch: int, n_classes: int) -> int:
    return batch * n_classes * 4 + batch * 8 + 4 + SIGNAL_HEADER_BYTES


def fedavg_round_bytes(n_participants: int, n_parameters: int) -> int:
    """Upload plus download of f32 parameters for every participant."""
    return n_participants * n_parameters * 4 * 2


@dataclass(frozen=True)
class TeachingSignal:
    sender: int
    ids: np.ndarray
    soft_labels: np.ndarray
    acc: float
    round: int

    def encode(self) -> bytes:
        probs = np.asarray(self.soft_labels, dtype="<f4")
        b, m = probs.shape
        ids = np.asarray(self.ids, dtype="<u8")
        if ids.shape != (b,):
            raise ValueError("ids and soft labels disagree on batch size")
        return b"".join([
            _HEADER.pack(SIGNAL_MAGIC, self.sender, self.round, b, m),
            ids.tobytes(), probs.tobytes(), struct.pack("<f", self.acc),
        ])

    @classmethod
    def decode(cls, raw: bytes) -> "TeachingSignal":
        magic, sender, rnd, b, m = _HEADER.unpack_from(raw)
        if magic != SIGNAL_MAGIC:
            raise ValueError("not a teaching signal")
        if len(raw) != signal_wire_size(b, m):
            raise ValueError(f"signal length {len(raw)} != expected {signal_wire_size(b, m)}")
        off = SIGNAL_HEADER_BYTES
        ids = np.frombuffer(raw, dtype="<u8", count=b, offset=off).astype(np.uint64)
        off += 8 * b
        probs = np.frombuffer(raw, dtype="<f4", count=b * m, offset=off).reshape(b, m).astype(np.float32)
        off += 4 * b * m
        acc, = struct.unpack_from("<f", raw, off)
        sig = cls(sender, ids, probs, acc, rnd)
        sig.check()
        return sig

    def check(self):
        sums = np.asarray(self.soft_labels, dtype=np.float64).sum(axis=1)
        if np.any(np.abs(sums - 1) > ROW_SUM_TOL):
            raise ValueError("soft-label rows do not sum to one")
        if not 0 <= self.acc <= 1:
            raise ValueError("teaching confidence outside [0, 1]")


@dataclass
class NetworkLedger:
    messages: int = 0
    bytes: int = 0
    per_round: dict = field(default_factory=dict)

    def record(self, rnd: int, nbytes: int, count: int = 1) -> None:
        self.messages += count
        self.bytes += nbytes * count
        self.per_round[rnd] = self.per_round.get(rnd, 0) + nbytes * count

    def to_dict(self) -> dict:
        return {"messages": self.messages, "bytes": self.bytes,
                "per_round": {str(k): v for k, v in sorted(self.per_round.items())}}


class Network:
    """Delivers encoded signals; every byte on the wire goes through the ledger."""

    def __init__(self):
        self.ledger = NetworkLedger()
        self.inboxes: dict[int, list[TeachingSignal]] = {}

    def send(self, rnd: int, signal: TeachingSignal, recipients) -> None:
        raw = signal.encode()
        recipients = list(recipients)
        if not recipients:
            return
        self.ledger.record(rnd, len(raw), len(recipients))
        for r in recipients:
            self.inboxes.setdefault(r, []).append(TeachingSignal.decode(raw))

    def collect(self, node_id: int) -> list[TeachingSignal]:
        # sender order keeps consumption independent of delivery order
        return sorted(self.inboxes.pop(node_id, []), key=lambda s: s.sender)


class PublicRegistry(Mapping):
    """The shared public seed sets, keyed by owner node; the only cross-node data access."""

    def __init__(self, domains):
        self._pub = {d.domain_id: d.pub for d in domains}

    def __getitem__(self, node_id):
        return self._pub[node_id]

    def __iter__(self):
        return iter(self._pub)

    def __len__(self):
        return len(self._pub)


# -- seeding --------------------------------------------------------------

def derive_rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


def derive_seed(seed: int, *key: int) -> int:
    return int(np.random.SeedSequence(seed, spawn_key=key).generate_state(1)[0])


# stream keys: 0 data, 1 schedule, 2 server, 3 nodes (3, i, {0 init, 1 local, 2 public})
DATA, SCHEDULE, SERVER, NODES = 0, 1, 2, 3


def build_domains(cfg: RunConfig, seed: int) -> list[DomainDataset]:
    """Split data depends only on the dataset settings, alpha and seed."""
    ds = cfg.dataset
    if ds.source == "synthetic":
        raw = make_synthetic_domains(cfg.nodes, ds.n_classes, 2, ds.n_per_domain,
                                     ds.rotation_step_deg, ds.noise_sd, derive_seed(seed, DATA, 0))
        angles = [k * ds.rotation_step_deg for k in range(cfg.nodes)]
    else:
        base = load_idx(resolve_data_path(ds.images), resolve_data_path(ds.labels))
        raw = make_rotated_domains(base, ds.angles, ds.per_class, derive_seed(seed, DATA, 0))
        angles = list(ds.angles)
    return [split_domain(d, cfg.alpha, (cfg.val_frac, cfg.test_frac), derive_seed(seed, DATA, 1, k),
                         domain_id=k, rotation_deg=float(angles[k])) for k, d in enumerate(raw)]


# -- nodes ----------------------------------------------------------------

@dataclass
class NodeState:
    node_id: int
    model: ModelParams
    opt_local: OptimizerState
    opt_global: OptimizerState
    domain: DomainDataset
    local_pool: LabeledSet
    local_sampler: EpochSampler
    pub_sampler: EpochSampler
    window_start: np.ndarray | None = None
    first_grad: np.ndarray | None = None
    last_grad: np.ndarray | None = None

    def refresh_window(self) -> None:
        self.window_start = self.model.flat.copy()
        self.first_grad = None
        self.last_grad = None


def make_node(cfg: RunConfig, seed: int, node_id: int, domains, local_pool: LabeledSet) -> NodeState:
    model = init_mlp(cfg.layer_dims(node_id), derive_seed(seed, NODES, node_id, 0))
    node = NodeState(
        node_id=node_id,
        model=model,
        opt_local=OptimizerState(cfg.optimizer, cfg.lr_local, cfg.wd_local),
        opt_global=OptimizerState(cfg.optimizer, cfg.lr_global, cfg.wd_global),
        domain=domains[node_id],
        local_pool=local_pool,
        local_sampler=EpochSampler(len(local_pool), cfg.batch_size, derive_rng(seed, NODES, node_id, 1)),
        pub_sampler=EpochSampler(len(domains[node_id].pub), cfg.batch_size,
                                 derive_rng(seed, NODES, node_id, 2)),
    )
    node.refresh_window()
    return node


def local_pool_for(node_id: int, domains, mode: str) -> LabeledSet:
    own = domains[node_id]
    if mode == "own":
        return LabeledSet.concat([own.pri, own.pub])
    if mode == "all_public":
        return LabeledSet.concat([own.pri] + [d.pub for d in domains])
    raise ValueError(f"unknown local data mode {mode!r}")


def local_grad(node: NodeState) -> tuple[float, np.ndarray]:
    """Sample a local batch; return its CE loss and gradient."""
    if len(node.local_pool) == 0:
        raise ValueError(f"node {node.node_id} has no local data")
    rows = node.local_sampler.next_rows()
    logits, cache = forward(node.model, node.local_pool.x[rows])
    loss, dlogits = ce_loss_grad(logits, node.local_pool.y[rows])
    return loss, backward(node.model, cache, dlogits)


def local_round(node: NodeState, rnd: int = 0) -> LossReport:
    loss, grad = local_grad(node)
    node.model = optimizer_step(node.model, grad, node.opt_local)
    if node.first_grad is None:
        node.first_grad = grad
    node.last_grad = grad
    return LossReport(ce_local=loss, round=rnd)


def emit_signal(node: NodeState, rnd: int = 0) -> TeachingSignal:
    pub = node.domain.pub
    if len(pub) == 0:
        raise ValueError(f"node {node.node_id} has no public data")
    rows = node.pub_sampler.next_rows()
    logits, _ = forward(node.model, pub.x[rows])
    probs = softmax(logits)
    acc = float(np.mean(np.argmax(logits, axis=1) == pub.y[rows]))
    return TeachingSignal(node.node_id, pub.ids[rows].copy(), probs.astype(np.float32),
                          float(np.float32(acc)), rnd)


def effective_local_gradient(node: NodeState, mode: str = "displacement") -> np.ndarray:
    """Local descent direction accumulated since the last global step.

    ``displacement`` (default) is ``theta_window_start - theta_now``.
    ``last`` is the most recent raw local gradient; ``literal`` is the last
    minus the first raw local gradient of the window. The latter two fall
    back to a zero vector when no local step was taken.
    """
    if node.window_start is None:
        raise ValueError("no window snapshot; call refresh_window first")
    if mode == "displacement":
        return node.window_start - node.model.flat
    if node.last_grad is None:
        return np.zeros_like(node.model.flat)
    if mode == "last":
        return node.last_grad.copy()
    if mode == "literal":
        return node.last_grad - node.first_grad
    raise ValueError(f"unknown local direction {mode!r}")


def global_round(node: NodeState, signals, public_data, *, kl_weight: float = 1.0,
                 ce_weight: float = 1.0, projection: str = "project",
                 local_direction: str = "displacement") -> tuple[ProjectionResult, LossReport]:
    """One mutual-learning step for ``node`` on the received signals.

    ``projection`` is ``project`` (closest non-conflicting gradient),
    ``none`` (raw public gradient) or ``pcgrad`` (two-sided PCGrad, update
    ``g_pub' + g_loc'``). With both loss weights at zero the objective is
    identically zero and no optimizer step is taken.
    """
    if not signals:
        raise ValueError("global round needs at least one peer signal")
    if not isinstance(public_data, PublicRegistry):
        raise TypeError("public data must come through a PublicRegistry")
    g_pub, report = mutual_grad(node.model, signals, public_data, kl_weight, ce_weight)
    g_loc = effective_local_gradient(node, local_direction)
    if projection == "project":
        res = project_or_pass(g_pub, g_loc)
    elif projection == "none":
        dot = float(g_pub @ g_loc)
        res = ProjectionResult(g_pub, 0.0, dot < 0, dot, dot, float(np.linalg.norm(g_loc)))
    elif projection == "pcgrad":
        a, b = pcgrad_symmetric(g_pub, g_loc)
        g = a + b if float(g_pub @ g_loc) < 0 else g_pub
        dot = float(g_pub @ g_loc)
        res = ProjectionResult(g, 0.0, dot < 0, dot, float(g @ g_loc), float(np.linalg.norm(g_loc)))
    else:
        raise ValueError(f"unknown projection mode {projection!r}")
    if kl_weight or ce_weight:
        node.model = optimizer_step(node.model, res.g_tilde, node.opt_global)
    node.refresh_window()
    return res, report


# -- runs -----------------------------------------------------------------

@dataclass
class RunResult:
    method: str
    seed: int
    config: dict
    config_hash: str
    metrics: MetricsRecord
    ledger: NetworkLedger
    history: list = field(default_factory=list)
    projection_stats: dict = field(default_factory=dict)
    split_hashes: list = field(default_factory=list)
    models: list = field(default_factory=list, repr=False)
    trace: list = field(default_factory=list, repr=False)
    pca_rows: list = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "seed": self.seed,
            "config_hash": self.config_hash,
            "config": self.config,
            "metrics": self.metrics.to_dict(),
            "ledger": {"messages": self.ledger.messages, "bytes": self.ledger.bytes},
            "projection_stats": self.projection_stats,
            "split_hashes": self.split_hashes,
            "history": self.history,
        }


class Tracker:
    """Validation-based checkpointing plus loss history for a set of nodes."""

    def __init__(self, domains, n_nodes: int):
        self.val_all = LabeledSet.concat([d.val for d in domains])
        self.best = [None] * n_nodes  # (round, val_acc, params)
        self.history = []
        self._ce = np.zeros(n_nodes)
        self._ce_n = np.zeros(n_nodes)
        self._kl = [None] * n_nodes
        self._cep = [None] * n_nodes

    def local_loss(self, i, loss):
        self._ce[i] += loss
        self._ce_n[i] += 1

    def global_loss(self, i, report: LossReport):
        self._kl[i] = report.kl_mutual
        self._cep[i] = report.ce_public

    def evaluate(self, rnd: int, models) -> None:
        for i, model in enumerate(models):
            acc = evaluate(model, self.val_all)
            if self.best[i] is None or acc > self.best[i][1]:
                self.best[i] = (rnd, acc, model)
            self.history.append({
                "round": rnd, "node": i, "val_acc": acc,
                "ce_local": self._ce[i] / self._ce_n[i] if self._ce_n[i] else None,
                "kl_mutual": self._kl[i], "ce_public": self._cep[i],
            })
        self._ce[:] = 0
        self._ce_n[:] = 0


def _trace_digest(models) -> str:
    h = hashlib.sha256()
    for m in models:
        h.update(m.flat.tobytes())
    return h.hexdigest()


def finish_run(cfg: RunConfig, seed: int, domains, models, tracker: Tracker, ledger: NetworkLedger,
               method: str, trace=None, projection_stats=None) -> RunResult:
    if any(b is None for b in tracker.best):
        tracker.evaluate(cfg.rounds, models)
    best_models = [b[2] for b in tracker.best]
    rounds = [b[0] for b in tracker.best]
    record = metrics_record(best_models, [d.test for d in domains], rounds, method, seed)
    pca_rows = []
    if cfg.export_pca:
        test_all = [(k, d.test) for k, d in enumerate(domains)]
        for i, model in enumerate(best_models):
            x = np.concatenate([t.x for _, t in test_all])
            coords = pca2d(hidden_features(model, x))
            j = 0
            for k, t in test_all:
                for sid, lab in zip(t.ids, t.y):
                    pca_rows.append((i, int(sid), k, int(lab), coords[j, 0], coords[j, 1]))
                    j += 1
    return RunResult(method, seed, cfg.to_dict(), cfg.config_hash(), record, ledger,
                     tracker.history, projection_stats or {}, [d.split_hash() for d in domains],
                     best_models, trace or [], pca_rows)


def method_tag(cfg: RunConfig) -> str:
    tag = cfg.method
    if cfg.method == "mutual":
        flags = [f for f in ("no_kl", "no_project", "pcgrad", "async_pairs") if getattr(cfg, f)]
        tag = "+".join([tag] + flags)
    return tag


def run_nodes(cfg: RunConfig, pool_mode: str, mutual: bool, pairs: bool = False,
              trace: bool = False) -> RunResult:
    """Shared engine for the mutual method and the local-only IND / AGG baselines."""
    seed = cfg.seed
    domains = build_domains(cfg, seed)
    n = len(domains)
    nodes = [make_node(cfg, seed, i, domains, local_pool_for(i, domains, pool_mode)) for i in range(n)]
    public = PublicRegistry(domains)
    net = Network()
    tracker = Tracker(domains, n)
    schedule = derive_rng(seed, SCHEDULE)
    n_pairs = cfg.pairs_per_round or n // 2
    kl_w, ce_w = cfg.effective_kl_weight, cfg.ce_weight
    stats = {"global_steps": 0, "conflicted": 0, "violations": 0, "max_violation": 0.0}
    digests = []

    for rnd in range(1, cfg.rounds + 1):
        for node in nodes:
            tracker.local_loss(node.node_id, local_round(node, rnd).ce_local)
        if mutual and n > 1 and rnd % cfg.E == 0:
            if pairs:
                order = schedule.permutation(n)
                groups = [tuple(sorted(order[2 * p:2 * p + 2])) for p in range(n_pairs)]
            else:
                groups = [tuple(range(n))]
            active = sorted(i for g in groups for i in g)
            for g in groups:
                for i in g:
                    net.send(rnd, emit_signal(nodes[i], rnd), [j for j in g if j != i])
            for i in active:
                res, report = global_round(nodes[i], net.collect(i), public, kl_weight=kl_w,
                                           ce_weight=ce_w, projection=cfg.projection_mode,
                                           local_direction=cfg.local_direction)
                tracker.global_loss(i, report)
                _tally(stats, res, cfg.projection_mode)
        if trace:
            digests.append(_trace_digest([nd.model for nd in nodes]))
        if rnd % cfg.eval_every == 0:
            tracker.evaluate(rnd, [nd.model for nd in nodes])

    return finish_run(cfg, seed, domains, [nd.model for nd in nodes], tracker, net.ledger,
                      method_tag(cfg), digests, stats)


def _tally(stats, res: ProjectionResult, mode: str) -> None:
    stats["global_steps"] += 1
    stats["conflicted"] += int(res.conflicted)
    if mode == "project" and not res.satisfies_constraint():
        stats["violations"] += 1
        stats["max_violation"] = max(stats["max_violation"], -res.dot_after)


def run_synchronous(cfg: RunConfig, trace: bool = False) -> RunResult:
    return run_nodes(cfg, cfg.local_data, mutual=True, trace=trace)


def run_asynchronous_pairs(cfg: RunConfig, trace: bool = False) -> RunResult:
    if cfg.nodes < 2:
        raise ValueError("asynchronous pairing needs at least two nodes")
    return run_nodes(cfg, cfg.local_data, mutual=True, pairs=True, trace=trace)
