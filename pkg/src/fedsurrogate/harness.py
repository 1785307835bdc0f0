"""Experiment orchestration: full federated training loops, parameter
sweeps, component ablations, and CSV/JSON reporting.

A run is fully described by an :class:`ExperimentConfig` and is
deterministic under its seed: the master seed fans out to per-purpose and
per-(round, client) sub-seeds through a counter-based derivation, so
adding clients or rounds never perturbs existing random streams.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from .attacks import (
    AttackConfig,
    cba_train,
    cla_train,
    csa_train,
    dba_train,
    neurotoxin_train,
)
from .data import (
    Dataset,
    TriggerSpec,
    corner_patch_trigger,
    dirichlet_partition,
    generate_synthetic,
    load_idx,
)
from .defense import (
    AggregationWeights,
    FilterConfig,
    LcaConfig,
    ScoreMemory,
    fedavg_aggregate,
    fedsurrogate_round,
)
from .metrics import DetectionTally, asr, main_task_accuracy, mcc, rates, tally_round
from .model import MlpArchitecture, TrainConfig, evaluate, init_model, local_train
from .params import ClientUpdate, ParameterVector, Role, compute_update

ATTACKS = ("none", "cba", "dba", "neurotoxin", "csa", "cla")
DEFENSES = ("fedsurrogate", "fedavg")
DONOR_METRICS = ("cosine", "euclidean")
VARIANTS = ("full", "stage1", "no_rescue", "exclude")


class HonestMajorityWarning(UserWarning):
    """Raised when the configured malicious fraction reaches one half."""


@dataclass(frozen=True)
class DatasetSpec:
    """Synthetic generator parameters, or a pair of IDX files.

    When ``images_path`` is set the IDX pair is loaded instead of the
    synthetic generator and the synthetic fields are ignored.
    """

    num_classes: int = 4
    dim: int = 64
    per_class: int = 300
    test_per_class: int = 50
    spread: float = 0.05
    background: float = 0.35
    images_path: str | None = None
    labels_path: str | None = None
    test_images_path: str | None = None
    test_labels_path: str | None = None

    def __post_init__(self):
        if self.images_path is None:
            if self.num_classes < 2 or self.dim < 1 or self.per_class < 1:
                raise ValueError("dataset counts must be positive")
            if self.test_per_class < 1:
                raise ValueError("test_per_class must be positive")
        elif None in (self.labels_path, self.test_images_path, self.test_labels_path):
            raise ValueError("an IDX dataset needs all four file paths")


@dataclass(frozen=True)
class ExperimentConfig:
    n_clients: int = 20
    mcr: float = 0.2
    pdr: float = 0.3
    alpha: float = 0.5
    rounds: int = 30
    benign_epochs: int = 2
    malicious_epochs: int = 5
    lr: float = 0.05
    batch: int = 32
    attack_kind: str = "cba"
    attack: AttackConfig = field(default_factory=AttackConfig)
    defense: str = "fedsurrogate"
    lca: LcaConfig = field(default_factory=LcaConfig)
    filter: FilterConfig = field(default_factory=lambda: FilterConfig(rescue_layers=("fc2", "fc3")))
    weights: AggregationWeights = field(default_factory=AggregationWeights)
    donor_metric: str = "cosine"
    variant: str = "full"
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    hidden_dims: tuple[int, ...] = (32, 16)
    warmup_epochs: int = 8
    warmup_per_class: int = 50
    seed: int = 7

    def __post_init__(self):
        if self.n_clients < 2:
            raise ValueError("n_clients must be >= 2")
        if not 0.0 <= self.mcr <= 1.0:
            raise ValueError("mcr must be in [0, 1]")
        if not 0.0 < self.pdr <= 1.0:
            raise ValueError("pdr must be in (0, 1]")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if min(self.rounds, self.benign_epochs, self.malicious_epochs, self.batch) < 1:
            raise ValueError("rounds, epochs and batch must be positive")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.attack_kind not in ATTACKS:
            raise ValueError(f"unknown attack {self.attack_kind!r}")
        if self.defense not in DEFENSES:
            raise ValueError(f"unknown defense {self.defense!r}")
        if self.donor_metric not in DONOR_METRICS:
            raise ValueError(f"unknown donor metric {self.donor_metric!r}")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.warmup_epochs < 0 or self.warmup_per_class < 1:
            raise ValueError("warmup fields must be non-negative / positive")

    @property
    def n_malicious(self) -> int:
        return int(np.floor(self.mcr * self.n_clients)) if self.attack_kind != "none" else 0


@dataclass(frozen=True)
class RoundRecord:
    round: int
    mta: float
    asr: float
    n_flagged: int
    n_rescued: int
    degenerate: bool
    critical_layers: tuple[str, ...]


@dataclass(frozen=True)
class RunReport:
    config: ExperimentConfig
    seed: int
    records: tuple[RoundRecord, ...]
    tpr: float
    fpr: float
    mcc: float
    wall_clock: float

    def __post_init__(self):
        if len(self.records) != self.config.rounds:
            raise ValueError("rounds recorded must equal configured rounds")

    @property
    def final_mta(self) -> float:
        return self.records[-1].mta

    @property
    def final_asr(self) -> float:
        return self.records[-1].asr


def _derive_seed(master: int, *tags: int) -> int:
    """Counter-based sub-seed derivation from the master seed."""
    ss = np.random.SeedSequence(entropy=[int(master), *[int(t) % (2**32) for t in tags]])
    return int(ss.generate_state(1)[0])


_TRAIN_TAG, _TEST_TAG, _WARM_TAG, _PART_TAG, _INIT_TAG, _CLIENT_TAG = range(0xA1, 0xA7)


def config_hash(cfg: ExperimentConfig) -> str:
    """Stable hash of the fully resolved configuration."""
    blob = json.dumps(_config_dict(cfg), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _config_dict(cfg: ExperimentConfig) -> dict:
    return dataclasses.asdict(cfg)


def _load_datasets(cfg: ExperimentConfig) -> tuple[Dataset, Dataset, Dataset]:
    ds = cfg.dataset
    if ds.images_path is not None:
        train = load_idx(ds.images_path, ds.labels_path)
        test = load_idx(ds.test_images_path, ds.test_labels_path)
        n_warm = min(len(train), ds.num_classes * cfg.warmup_per_class)
        rng = np.random.default_rng(
            np.random.SeedSequence(entropy=[cfg.seed, _WARM_TAG])
        )
        warm = train.subset(rng.permutation(len(train))[:n_warm])
        return train, test, warm
    train = generate_synthetic(
        ds.num_classes, ds.dim, ds.per_class, ds.spread,
        seed=_derive_seed(cfg.seed, _TRAIN_TAG), background=ds.background,
    )
    test = generate_synthetic(
        ds.num_classes, ds.dim, ds.test_per_class, ds.spread,
        seed=_derive_seed(cfg.seed, _TEST_TAG), background=ds.background,
    )
    warm = generate_synthetic(
        ds.num_classes, ds.dim, cfg.warmup_per_class, ds.spread,
        seed=_derive_seed(cfg.seed, _WARM_TAG), background=ds.background,
    )
    return train, test, warm


def _make_trigger(cfg: ExperimentConfig, dim: int) -> TriggerSpec:
    fragments = max(1, cfg.n_malicious) if cfg.attack_kind == "dba" else 1
    fragments = min(fragments, 9)
    return corner_patch_trigger(dim, fragments=fragments)


def _train_one(
    cfg: ExperimentConfig,
    arch: MlpArchitecture,
    global_model: ParameterVector,
    shard: Dataset,
    trigger: TriggerSpec,
    cid: int,
    rnd: int,
    malicious: bool,
    attacker_index: int,
    prev_delta: np.ndarray | None,
) -> ParameterVector:
    tcfg = TrainConfig(
        epochs=cfg.benign_epochs,
        learning_rate=cfg.lr,
        batch_size=cfg.batch,
        seed=_derive_seed(cfg.seed, _CLIENT_TAG, rnd, cid),
    )
    if not malicious:
        return local_train(arch, global_model, shard, tcfg)
    attack = dataclasses.replace(
        cfg.attack, poison_rate=cfg.pdr, malicious_epochs=cfg.malicious_epochs
    )
    kind = cfg.attack_kind
    if kind == "cba":
        return cba_train(arch, global_model, shard, trigger, tcfg, attack)
    if kind == "dba":
        return dba_train(arch, global_model, shard, trigger, tcfg, attack, attacker_index)
    if kind == "neurotoxin":
        return neurotoxin_train(arch, global_model, shard, trigger, tcfg, attack, prev_delta)
    if kind == "csa":
        return csa_train(arch, global_model, shard, trigger, tcfg, attack)
    if kind == "cla":
        return cla_train(arch, global_model, shard, trigger, tcfg, attack)
    raise ValueError(f"unknown attack {kind!r}")


def run_experiment(cfg: ExperimentConfig) -> RunReport:
    """Run one full federated experiment and return its report."""
    start = time.perf_counter()
    n_mal = cfg.n_malicious
    if n_mal >= cfg.n_clients / 2:
        warnings.warn(
            f"{n_mal} of {cfg.n_clients} clients malicious: honest majority lost",
            HonestMajorityWarning,
            stacklevel=2,
        )
    train, test, warm = _load_datasets(cfg)
    trigger = _make_trigger(cfg, train.dim)
    plan = dirichlet_partition(
        train, cfg.n_clients, cfg.alpha, seed=_derive_seed(cfg.seed, _PART_TAG)
    )
    shards = [train.subset(idx) for idx in plan.client_indices]
    roles = {
        cid: (Role.MALICIOUS if cid < n_mal else Role.BENIGN)
        for cid in range(cfg.n_clients)
    }
    arch = MlpArchitecture((train.dim, *cfg.hidden_dims, train.num_classes))
    global_model = init_model(arch, seed=_derive_seed(cfg.seed, _INIT_TAG))
    if cfg.warmup_epochs:
        global_model = local_train(
            arch, global_model, warm,
            TrainConfig(cfg.warmup_epochs, cfg.lr, cfg.batch,
                        seed=_derive_seed(cfg.seed, _WARM_TAG, 1)),
        )

    mem = ScoreMemory()
    tally = DetectionTally()
    prev_delta: np.ndarray | None = None
    records: list[RoundRecord] = []
    for rnd in range(cfg.rounds):
        updates: list[ClientUpdate] = []
        attacker_index = 0
        for cid in range(cfg.n_clients):
            malicious = roles[cid] is Role.MALICIOUS
            model = _train_one(
                cfg, arch, global_model, shards[cid], trigger,
                cid, rnd, malicious, attacker_index, prev_delta,
            )
            if malicious:
                attacker_index += 1
            updates.append(
                compute_update(model, global_model, client_id=cid,
                               sample_count=len(shards[cid]), true_role=roles[cid])
            )
        before = global_model.values
        if cfg.defense == "fedsurrogate":
            global_model, outcome, mem = fedsurrogate_round(
                updates, global_model, mem, cfg.lca, cfg.filter, cfg.weights,
                donor_metric=cfg.donor_metric, variant=cfg.variant,
            )
            flagged = outcome.confirmed_malicious
            tally = tally_round(tally, flagged, roles)
            n_rescued = len(outcome.rescued)
            degenerate = outcome.degenerate
            critical = outcome.critical_layers
        else:
            global_model = fedavg_aggregate(
                {u.client_id: u.model for u in updates},
                {u.client_id: u.sample_count for u in updates},
            )
            flagged, n_rescued, degenerate, critical = frozenset(), 0, False, ()
        prev_delta = global_model.values - before
        records.append(
            RoundRecord(
                round=rnd,
                mta=main_task_accuracy(arch, global_model, test),
                asr=asr(arch, global_model, test, trigger) if cfg.attack_kind != "none" else 0.0,
                n_flagged=len(flagged),
                n_rescued=n_rescued,
                degenerate=degenerate,
                critical_layers=critical,
            )
        )
    tpr, fpr = rates(tally)
    return RunReport(
        config=cfg,
        seed=cfg.seed,
        records=tuple(records),
        tpr=tpr,
        fpr=fpr,
        mcc=mcc(tally),
        wall_clock=time.perf_counter() - start,
    )


_SWEEPABLE = {
    "zeta": lambda cfg, v: dataclasses.replace(
        cfg, filter=dataclasses.replace(cfg.filter, zeta=float(v))
    ),
    "mcr": lambda cfg, v: dataclasses.replace(cfg, mcr=float(v)),
    "n_clients": lambda cfg, v: dataclasses.replace(cfg, n_clients=int(v)),
    "pdr": lambda cfg, v: dataclasses.replace(cfg, pdr=float(v)),
    "alpha": lambda cfg, v: dataclasses.replace(cfg, alpha=float(v)),
    "seed": lambda cfg, v: dataclasses.replace(cfg, seed=int(v)),
    "donor_metric": lambda cfg, v: dataclasses.replace(cfg, donor_metric=str(v)),
    "attack_kind": lambda cfg, v: dataclasses.replace(cfg, attack_kind=str(v)),
    "defense": lambda cfg, v: dataclasses.replace(cfg, defense=str(v)),
}


def sweep(cfg: ExperimentConfig, parameter: str, values: list) -> list[RunReport]:
    """One run per value of the named parameter, shared base seed."""
    if parameter not in _SWEEPABLE:
        raise ValueError(
            f"unknown sweep parameter {parameter!r}; choose from {sorted(_SWEEPABLE)}"
        )
    return [run_experiment(_SWEEPABLE[parameter](cfg, v)) for v in values]


def ablate(cfg: ExperimentConfig) -> list[RunReport]:
    """Run the four pipeline variants on the same seed."""
    if cfg.defense != "fedsurrogate":
        raise ValueError("ablation requires the fedsurrogate defense")
    return [
        run_experiment(dataclasses.replace(cfg, variant=v))
        for v in ("stage1", "no_rescue", "exclude", "full")
    ]


def report_to_csv(report: RunReport) -> str:
    """Render a report as CSV text: header, one row per round, then a
    summary block."""
    lines = ["round,mta,asr,n_flagged,n_rescued,degenerate,critical_layers"]
    for r in report.records:
        layers = ";".join(r.critical_layers)
        lines.append(
            f"{r.round},{r.mta:.6f},{r.asr:.6f},{r.n_flagged},{r.n_rescued},"
            f"{int(r.degenerate)},{layers}"
        )
    lines.append(
        f"summary,tpr={report.tpr:.6f},fpr={report.fpr:.6f},mcc={report.mcc:.6f},"
        f"config_hash={config_hash(report.config)},seed={report.seed}"
    )
    return "\n".join(lines) + "\n"


def report_to_json(report: RunReport) -> str:
    payload = {
        "config": _config_dict(report.config),
        "config_hash": config_hash(report.config),
        "seed": report.seed,
        "records": [dataclasses.asdict(r) for r in report.records],
        "tpr": report.tpr,
        "fpr": report.fpr,
        "mcc": report.mcc,
        "wall_clock": report.wall_clock,
    }
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def emit_report(report: RunReport, path: str, format: str = "csv") -> None:
    """Write a report to ``path`` as CSV or JSON."""
    if format == "csv":
        text = report_to_csv(report)
    elif format == "json":
        text = report_to_json(report)
    else:
        raise ValueError(f"unknown format {format!r}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)
