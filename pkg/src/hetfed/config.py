"""Run configuration: JSON file schema, defaults, validation and grid expansion.

A config file is one JSON object. Keys mirror the ``RunConfig`` fields; the
``dataset`` key holds a nested object (see ``DatasetConfig``). ``method``,
``alpha`` and ``E`` may be lists, in which case the file describes a grid
whose cells are the product of those lists with ``seeds``.
"""
from __future__ import annotations

import dataclasses
import hashlib
import itertools
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

DATA_DIR_ENV = "HETFED_DATA_DIR"

METHODS = ("mutual", "ind", "agg", "fedavg", "fedprox", "fedmd")
LOCAL_DATA = ("all_public", "own")
LOCAL_DIRECTIONS = ("displacement", "last", "literal")


class ConfigValidationError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass
class DatasetConfig:
    source: str = "synthetic"
    # synthetic rotated clusters
    n_classes: int = 4
    n_per_domain: int = 2000
    rotation_step_deg: float = 25.0
    noise_sd: float = 0.08
    # IDX digits
    images: str | None = None
    labels: str | None = None
    angles: list = field(default_factory=lambda: [0, 20, 40, 60])
    per_class: int = 100

    def validate(self):
        if self.source not in ("synthetic", "idx"):
            raise ConfigValidationError("dataset.source", f"unknown source {self.source!r}")
        if self.source == "idx":
            for name in ("images", "labels"):
                path = getattr(self, name)
                if not path:
                    raise ConfigValidationError(f"dataset.{name}", "required for idx source")
                if not resolve_data_path(path).exists():
                    raise ConfigValidationError(f"dataset.{name}", f"file not found: {path}")
            if self.per_class < 1:
                raise ConfigValidationError("dataset.per_class", "must be positive")
        else:
            if self.n_classes < 2:
                raise ConfigValidationError("dataset.n_classes", "need at least two classes")
            if self.n_per_domain < self.n_classes:
                raise ConfigValidationError("dataset.n_per_domain", "fewer samples than classes")
            if self.noise_sd < 0:
                raise ConfigValidationError("dataset.noise_sd", "must be nonnegative")


def resolve_data_path(path: str) -> Path:
    p = Path(path)
    base = os.environ.get(DATA_DIR_ENV)
    if base and not p.is_absolute():
        return Path(base) / p
    return p


@dataclass
class RunConfig:
    method: str = "mutual"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    nodes: int = 4
    alpha: float = 0.10
    val_frac: float = 0.10
    test_frac: float = 0.15
    E: int = 1
    rounds: int = 10_000
    batch_size: int = 32
    # hidden widths; one list for every node, or one list per node
    hidden: list = field(default_factory=lambda: [32])
    optimizer: str = "amsgrad"
    lr_local: float = 1e-3
    lr_global: float = 1e-3
    wd_local: float = 1e-4
    wd_global: float = 1e-4
    eval_every: int = 50
    seeds: list = field(default_factory=lambda: [0])
    seed: int | None = None
    # mutual-learning switches
    no_kl: bool = False
    no_project: bool = False
    pcgrad: bool = False
    async_pairs: bool = False
    pairs_per_round: int | None = None
    kl_weight: float = 1.0
    ce_weight: float = 1.0
    local_data: str = "all_public"
    local_direction: str = "displacement"
    # baselines
    fedprox_mu: float = 0.01
    fedavg_fraction: float = 1.0
    fedavg_interval: int = 1
    fedmd_distill_steps: int = 1
    export_pca: bool = True
    out_dir: str = "runs"

    def __post_init__(self):
        if isinstance(self.dataset, dict):
            self.dataset = _build(DatasetConfig, self.dataset, "dataset.")
        if self.seed is None and self.seeds:
            self.seed = int(self.seeds[0])

    # -- derived ----------------------------------------------------------
    @property
    def input_dim(self) -> int:
        return 2 if self.dataset.source == "synthetic" else 784

    @property
    def n_classes(self) -> int:
        return self.dataset.n_classes if self.dataset.source == "synthetic" else 10

    def layer_dims(self, node: int) -> list[int]:
        hidden = self.hidden
        if hidden and isinstance(hidden[0], (list, tuple)):
            hidden = hidden[node]
        return [self.input_dim, *[int(h) for h in hidden], self.n_classes]

    @property
    def effective_kl_weight(self) -> float:
        return 0.0 if self.no_kl else self.kl_weight

    @property
    def projection_mode(self) -> str:
        if self.pcgrad:
            return "pcgrad"
        return "none" if self.no_project else "project"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        d = self.to_dict()
        d.pop("out_dir")
        d.pop("seeds")
        d.pop("seed")
        blob = json.dumps(d, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    def cell_name(self) -> str:
        tags = [self.method]
        if self.method == "mutual":
            tags += [f for f in ("no_kl", "no_project", "pcgrad", "async_pairs") if getattr(self, f)]
        tags += [f"a{self.alpha:g}", f"E{self.E}", f"s{self.seed}", self.config_hash()]
        return "_".join(tags)

    # -- validation -------------------------------------------------------
    def validate(self) -> "RunConfig":
        if self.method not in METHODS:
            raise ConfigValidationError("method", f"unknown method {self.method!r}; choose from {METHODS}")
        self.dataset.validate()
        if not 0 < self.alpha < 1:
            raise ConfigValidationError("alpha", f"must lie in (0, 1), got {self.alpha}")
        if self.alpha + self.val_frac + self.test_frac >= 1:
            raise ConfigValidationError("alpha", "alpha + val_frac + test_frac must be < 1")
        if self.E < 1:
            raise ConfigValidationError("E", "must be >= 1")
        if self.eval_every < 1:
            raise ConfigValidationError("eval_every", "must be >= 1")
        if self.rounds < self.eval_every:
            raise ConfigValidationError("rounds", "must be >= eval_every")
        if self.batch_size < 1:
            raise ConfigValidationError("batch_size", "must be >= 1")
        if self.nodes < 1:
            raise ConfigValidationError("nodes", "must be >= 1")
        if self.dataset.source == "idx" and self.nodes != len(self.dataset.angles):
            raise ConfigValidationError("nodes", "must equal the number of rotation angles")
        if self.hidden and isinstance(self.hidden[0], (list, tuple)) and len(self.hidden) != self.nodes:
            raise ConfigValidationError("hidden", "per-node hidden list must have one entry per node")
        for name in ("lr_local", "lr_global"):
            if getattr(self, name) <= 0:
                raise ConfigValidationError(name, "must be positive")
        for name in ("wd_local", "wd_global", "fedprox_mu", "kl_weight", "ce_weight"):
            if getattr(self, name) < 0:
                raise ConfigValidationError(name, "must be nonnegative")
        if self.optimizer not in ("sgd", "amsgrad"):
            raise ConfigValidationError("optimizer", "must be 'sgd' or 'amsgrad'")
        if not 0 < self.fedavg_fraction <= 1:
            raise ConfigValidationError("fedavg_fraction", "must lie in (0, 1]")
        if self.fedavg_interval < 1 or self.fedmd_distill_steps < 1:
            raise ConfigValidationError("fedavg_interval", "intervals and step counts must be >= 1")
        if self.local_data not in LOCAL_DATA:
            raise ConfigValidationError("local_data", f"choose from {LOCAL_DATA}")
        if self.local_direction not in LOCAL_DIRECTIONS:
            raise ConfigValidationError("local_direction", f"choose from {LOCAL_DIRECTIONS}")
        if self.pcgrad and self.no_project:
            raise ConfigValidationError("pcgrad", "pcgrad and no_project are exclusive")
        if self.async_pairs and self.method == "mutual" and self.nodes < 2:
            raise ConfigValidationError("async_pairs", "needs at least two nodes")
        if self.pairs_per_round is not None and not 1 <= self.pairs_per_round <= self.nodes // 2:
            raise ConfigValidationError("pairs_per_round", f"must lie in [1, {self.nodes // 2}]")
        if not self.seeds:
            raise ConfigValidationError("seeds", "need at least one seed")
        return self

    def cells(self) -> list["RunConfig"]:
        """Expand list-valued method / alpha / E and the seed list into cells."""
        as_list = lambda v: list(v) if isinstance(v, (list, tuple)) else [v]  # noqa: E731
        out = []
        for method, alpha, e, seed in itertools.product(
                as_list(self.method), as_list(self.alpha), as_list(self.E), self.seeds):
            cell = dataclasses.replace(self, method=method, alpha=alpha, E=e, seed=int(seed),
                                       seeds=[int(seed)], dataset=dataclasses.replace(self.dataset))
            out.append(cell.validate())
        return out


def _build(cls, data: dict, prefix: str = ""):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigValidationError(prefix + unknown[0], "unknown key")
    return cls(**data)


def config_from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigValidationError("<root>", "config must be a JSON object")
    cfg = _build(RunConfig, data)
    # grids are validated per cell
    for cell in cfg.cells():
        cell.validate()
    return cfg


def load_config(path) -> RunConfig:
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    return config_from_dict(data)
