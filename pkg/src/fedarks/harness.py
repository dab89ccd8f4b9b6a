"""Experiment orchestration: the federated round loop, sweeps and ablations.

Artifacts written to ``out_dir`` by :func:`run_experiment`:

``metrics.csv``
    ``kind,round,client_id,mean_loss,task,mAP,rank1,rank5,dropped_queries``;
    ``kind=loss`` rows carry per-client training loss, ``kind=eval`` rows
    carry held-out retrieval metrics.
``weights.csv``
    aggregation weight history (see :mod:`fedarks.aggregator`).
``manifest.json``
    config echo, seeds and artifact paths.
``report.json``
    final evaluation, per-round summaries and wall-clock time.
``checkpoints/``
    final server global branch plus each client's part branch and head.
"""

from __future__ import annotations

import configparser
import csv
import dataclasses
import hashlib
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from .aggregator import AggregationState, KSConfig, WeightRecord, fedavg_round, server_round, write_weight_history
from .client import LocalState, NumericalError, TrainConfig, client_rng, local_labels, local_train, check_pk_feasible
from .metrics import DEFAULT_MAX_RANK, EvalReport, EvalSet, evaluate, savg
from .model import FusionConfig, ModelConfig, TripletConfig, global_features, init_global, init_head, init_parts
from .params import ParamVector
from .synthdata import ConfigError, DomainData, Federation, FederationConfig, federation_split, generate_federation

# independent seed streams derived from the experiment seed
_GLOBAL_INIT_STREAM = 1
_LOCAL_INIT_STREAM = 2

ABLATION_CELLS = (
    ("rk0_ks0", False, "fedavg"),
    ("rk1_ks0", True, "fedavg"),
    ("rk0_ks1", False, "ks"),
    ("rk1_ks1", True, "ks"),
)

METRIC_COLUMNS = ["kind", "round", "client_id", "mean_loss", "task", "mAP", "rank1", "rank5", "dropped_queries"]


@dataclass(frozen=True)
class ExperimentConfig:
    federation: FederationConfig = field(default_factory=FederationConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    ks: KSConfig = field(default_factory=KSConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    triplet: TripletConfig = field(default_factory=TripletConfig)
    hidden_dim: int = 32
    feat_dim: int = 16
    rounds: int = 40
    aggregator: str = "ks"
    rk_enabled: bool = True
    held_out_domain: int | str = 3
    out_dir: str | None = None
    seed: int = 7
    eval_interval: int = 5
    workers: int = 1
    max_rank: int = DEFAULT_MAX_RANK

    def __post_init__(self):
        if self.rounds < 1:
            raise ConfigError("rounds must be >= 1")
        if self.aggregator not in ("ks", "fedavg"):
            raise ConfigError(f"aggregator must be 'ks' or 'fedavg', got {self.aggregator!r}")
        if self.federation.num_domains < 2:
            raise ConfigError("leave-one-domain-out needs num_domains >= 2")
        if self.held_out_domain != "sweep":
            if not isinstance(self.held_out_domain, int) or not 0 <= self.held_out_domain < self.federation.num_domains:
                raise ConfigError(f"held_out must be 'sweep' or a domain id in [0, {self.federation.num_domains})")
        if self.eval_interval < 1 or self.workers < 1 or self.hidden_dim < 1 or self.feat_dim < 1:
            raise ConfigError("eval_interval, workers, hidden_dim and feat_dim must be >= 1")

    @property
    def model(self) -> ModelConfig:
        return ModelConfig(self.federation.image_height, self.federation.image_width, self.hidden_dim, self.feat_dim)

    @property
    def effective_fusion(self) -> FusionConfig:
        return self.fusion if self.rk_enabled else FusionConfig(1.0)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def run_id(self) -> str:
        payload = self.to_dict()
        payload.pop("out_dir")
        payload.pop("workers")
        return hashlib.sha1(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:12]


# flat config keys -> (section, field); section None means a top-level field
CONFIG_KEYS: dict[str, tuple[str | None, str]] = {
    **{k: ("federation", k) for k in (
        "num_domains", "identities_per_domain", "samples_per_identity", "cameras_per_domain",
        "image_height", "image_width", "feature_noise_sigma", "domain_shift_strength",
        "part_occlusion_prob", "latent_dim", "identity_jitter", "camera_shift")},
    "data_seed": ("federation", "seed"),
    **{k: ("train", k) for k in ("local_epochs", "batch_p", "batch_s", "learning_rate")},
    **{k: ("ks", k) for k in ("beta", "gamma", "epsilon")},
    "alpha": ("fusion", "alpha"),
    "margin": ("triplet", "margin"),
    **{k: (None, k) for k in (
        "hidden_dim", "feat_dim", "rounds", "aggregator", "out_dir", "seed", "eval_interval", "workers", "max_rank")},
    "rk": (None, "rk_enabled"),
    "held_out": (None, "held_out_domain"),
}

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _parse_value(key: str, raw: Any, default: Any) -> Any:
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    try:
        if isinstance(default, bool):
            if text.lower() in _TRUE:
                return True
            if text.lower() in _FALSE:
                return False
            raise ValueError
        if key == "held_out":
            return "sweep" if text == "sweep" else int(text)
        if key == "part_occlusion_prob":
            value = json.loads(text)
            return tuple(tuple(float(v) for v in row) for row in value) if isinstance(value, list) else float(value)
        if key == "out_dir":
            return text or None
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r}") from None


def build_config(values: dict[str, Any] | None = None, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Apply flat ``key -> value`` overrides to ``base`` (defaults if omitted).

    ``seed`` also sets the data seed unless ``data_seed`` is given; the
    training seed always follows ``seed``.
    """
    base = base or ExperimentConfig()
    values = dict(values or {})
    unknown = set(values) - set(CONFIG_KEYS)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    if "seed" in values and "data_seed" not in values:
        values["data_seed"] = values["seed"]
    sections: dict[str | None, dict[str, Any]] = {}
    for key, raw in values.items():
        section, name = CONFIG_KEYS[key]
        owner = base if section is None else getattr(base, section)
        sections.setdefault(section, {})[name] = _parse_value(key, raw, getattr(owner, name))
    try:
        top = sections.pop(None, {})
        subs = {s: dataclasses.replace(getattr(base, s), **kv) for s, kv in sections.items()}
        cfg = dataclasses.replace(base, **subs, **top)
        return dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, seed=cfg.seed))
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None


def read_config_file(path: str | Path) -> dict[str, str]:
    """Read a flat ``key = value`` file (``#`` comments, no section headers needed)."""
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    parser.optionxform = str
    try:
        parser.read_string("[experiment]\n" + Path(path).read_text())
    except (OSError, configparser.Error) as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    return dict(parser["experiment"])


@dataclass
class RoundMetrics:
    round: int
    client_losses: dict[int, float]
    client_traces: dict[int, list[float]]
    eval: EvalReport | None = None


@dataclass
class RunReport:
    run_id: str
    task: str
    config: dict
    rounds: list[RoundMetrics]
    final: EvalReport
    weight_history: list[WeightRecord] = field(repr=False)
    final_global: ParamVector = field(repr=False)
    degenerate_federation: bool = False
    wall_clock_s: float = 0.0
    artifacts: dict[str, str] = field(default_factory=dict)

    def mean_loss(self, round_: int) -> float:
        return float(np.mean(list(self.rounds[round_ - 1].client_losses.values())))

    def weight_stabilization(self, last: int = 5) -> float:
        """Max per-client |alpha_t - alpha_{t-1}| over the final ``last`` rounds."""
        hist = self.weight_history
        worst = 0.0
        for prev, cur in zip(hist[-last - 1 : -1], hist[-last:]):
            a, b = prev.alphas(), cur.alphas()
            worst = max(worst, max(abs(b[k] - a[k]) for k in b))
        return worst


def task_name(num_domains: int, held_out: int) -> str:
    sources = "+".join(f"D{d}" for d in range(num_domains) if d != held_out)
    return f"{sources}->D{held_out}"


def eval_global(params: ParamVector, target: DomainData, mc: ModelConfig, max_rank: int) -> EvalReport:
    q = global_features(params, np.stack([s.pixels for s in target.query]), mc)
    g = global_features(params, np.stack([s.pixels for s in target.gallery]), mc)
    es = EvalSet(
        q, np.array([s.identity for s in target.query]), np.array([s.camera for s in target.query]),
        g, np.array([s.identity for s in target.gallery]), np.array([s.camera for s in target.gallery]),
    )
    return evaluate(es, max_rank)


def _fmt(x) -> str:
    if x is None:
        return ""
    return repr(x) if isinstance(x, float) else str(x)


def _write_metrics(report: RunReport, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRIC_COLUMNS)
        for rm in report.rounds:
            for cid in sorted(rm.client_losses):
                writer.writerow(["loss", rm.round, cid, _fmt(rm.client_losses[cid]), "", "", "", "", ""])
            if rm.eval is not None:
                e = rm.eval
                writer.writerow(["eval", rm.round, "", "", report.task, _fmt(e.mAP), _fmt(e.rank1),
                                 _fmt(e.rank(5)), e.dropped_queries])


def _write_artifacts(report: RunReport, cfg: ExperimentConfig, states: dict[int, LocalState], out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "checkpoints"
    ckpt.mkdir(exist_ok=True)
    arts = {
        "metrics": "metrics.csv",
        "weights": "weights.csv",
        "report": "report.json",
        "server_global": "checkpoints/server_global.pvec",
    }
    _write_metrics(report, out / arts["metrics"])
    write_weight_history(report.weight_history, out / arts["weights"])
    report.final_global.save(out / arts["server_global"])
    for cid, st in sorted(states.items()):
        arts[f"client{cid}_part"] = f"checkpoints/client{cid}_part.pvec"
        arts[f"client{cid}_head"] = f"checkpoints/client{cid}_head.pvec"
        st.part.params.save(out / arts[f"client{cid}_part"])
        st.head.params.save(out / arts[f"client{cid}_head"])
    report.artifacts = arts
    manifest = {
        "run_id": report.run_id,
        "task": report.task,
        "config": report.config,
        "seeds": {"experiment": cfg.seed, "data": cfg.federation.seed, "train": cfg.train.seed},
        "degenerate_federation": report.degenerate_federation,
        "artifacts": arts,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    summary = {
        "run_id": report.run_id,
        "task": report.task,
        "final": report.final.to_dict(),
        "rounds": [
            {"round": rm.round, "client_losses": {str(k): v for k, v in rm.client_losses.items()},
             "eval": rm.eval.to_dict() if rm.eval else None}
            for rm in report.rounds
        ],
        "weight_stabilization_last5": report.weight_stabilization(),
        "wall_clock_s": report.wall_clock_s,
    }
    (out / "report.json").write_text(json.dumps(summary, indent=2, sort_keys=True))


RoundHook = Callable[[int, AggregationState, dict[int, LocalState], list], None]


def run_experiment(cfg: ExperimentConfig, federation: Federation | None = None,
                   on_round: RoundHook | None = None) -> RunReport:
    """Run the broadcast / local-train / aggregate loop for ``cfg.rounds`` rounds.

    ``on_round(t, state, local_states, updates)`` is called after each server
    step.  The final global branch is evaluated on the held-out domain using
    global-branch features only.
    """
    if cfg.held_out_domain == "sweep":
        raise ConfigError("run_experiment needs a concrete held_out domain; use run_sweep for 'sweep'")
    started = time.perf_counter()
    fed = federation or generate_federation(cfg.federation)
    shards, target = federation_split(fed.domains, cfg.held_out_domain)
    mc = cfg.model
    fc = cfg.effective_fusion
    for shard in shards:
        labels, _ = local_labels(shard)
        check_pk_feasible(labels, cfg.train.batch_p, cfg.train.batch_s)

    init = init_global(mc, np.random.default_rng([cfg.seed, _GLOBAL_INIT_STREAM]))
    states: dict[int, LocalState] = {}
    for shard in shards:
        rng = np.random.default_rng([cfg.seed, _LOCAL_INIT_STREAM, shard.client_id])
        n_cls = len({s.identity for s in shard.samples})
        states[shard.client_id] = LocalState(init_parts(mc, rng), init_head(mc, n_cls, rng))
    agg = AggregationState.start(init.params, [s.client_id for s in shards])
    task = task_name(len(fed.domains), cfg.held_out_domain)

    def train_one(shard, broadcast, t):
        return local_train(broadcast, states[shard.client_id], shard, cfg.train, mc, fc, cfg.triplet,
                           client_rng(cfg.seed, shard.client_id, t))

    rounds: list[RoundMetrics] = []
    pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None
    try:
        for t in range(1, cfg.rounds + 1):
            broadcast = agg.current_global
            try:
                if pool is None:
                    results = [train_one(s, broadcast, t) for s in shards]
                else:
                    results = list(pool.map(lambda s: train_one(s, broadcast, t), shards))
            except NumericalError as exc:
                exc.round = t
                raise
            updates = []
            for shard, (upd, st) in zip(shards, results):
                states[shard.client_id] = st
                updates.append(upd)
            if cfg.aggregator == "ks":
                agg, _ = server_round(agg, updates, cfg.ks)
            else:
                agg, _ = fedavg_round(agg, updates)
            if not agg.current_global.is_finite():
                raise NumericalError("non-finite global parameters after aggregation", None, t)
            rm = RoundMetrics(t, {u.client_id: u.mean_loss for u in updates},
                              {u.client_id: list(u.local_loss_trace) for u in updates})
            if t % cfg.eval_interval == 0 or t == cfg.rounds:
                rm.eval = eval_global(agg.current_global, target, mc, cfg.max_rank)
            rounds.append(rm)
            if on_round is not None:
                on_round(t, agg, states, updates)
    finally:
        if pool is not None:
            pool.shutdown()

    report = RunReport(
        run_id=cfg.run_id(),
        task=task,
        config=cfg.to_dict(),
        rounds=rounds,
        final=rounds[-1].eval,
        weight_history=list(agg.weight_history),
        final_global=agg.current_global,
        degenerate_federation=len(shards) == 1,
        wall_clock_s=time.perf_counter() - started,
    )
    if cfg.out_dir is not None:
        _write_artifacts(report, cfg, states, Path(cfg.out_dir))
    return report


@dataclass
class SweepReport:
    tasks: list[RunReport]
    savg: tuple[float, float]


def _write_summary(rows: list[list], header: list[str], path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows([[_fmt(v) for v in row] for row in rows])


def run_sweep(cfg: ExperimentConfig, federation: Federation | None = None) -> SweepReport:
    """Leave-one-domain-out over every domain, plus the SAvg summary."""
    fed = federation or generate_federation(cfg.federation)
    if len(fed.domains) < 2:
        raise ConfigError("a sweep needs at least two domains")
    reports = []
    for d in range(len(fed.domains)):
        sub_out = None if cfg.out_dir is None else str(Path(cfg.out_dir) / f"task_D{d}")
        reports.append(run_experiment(dataclasses.replace(cfg, held_out_domain=d, out_dir=sub_out), fed))
    summary = savg([r.final for r in reports])
    if cfg.out_dir is not None:
        rows = [[r.task, r.final.mAP, r.final.rank1] for r in reports] + [["SAvg", *summary]]
        _write_summary(rows, ["task", "mAP", "rank1"], Path(cfg.out_dir) / "sweep.csv")
    return SweepReport(reports, summary)


@dataclass
class AblationReport:
    cells: dict[str, list[RunReport]]
    savg: dict[str, tuple[float, float]]


def ablation_cell_config(cfg: ExperimentConfig, rk: bool, aggregator: str) -> ExperimentConfig:
    return dataclasses.replace(cfg, rk_enabled=rk, aggregator=aggregator)


def run_ablation(cfg: ExperimentConfig, federation: Federation | None = None) -> AblationReport:
    """The 2x2 {RK off/on} x {KS off/on} grid on one shared federation.

    All cells share the data and the training seed, so they differ only in
    the ablated mechanisms.
    """
    fed = federation or generate_federation(cfg.federation)
    cells: dict[str, list[RunReport]] = {}
    scores: dict[str, tuple[float, float]] = {}
    rows = []
    for name, rk, agg in ABLATION_CELLS:
        sub_out = None if cfg.out_dir is None else str(Path(cfg.out_dir) / name)
        cell_cfg = dataclasses.replace(ablation_cell_config(cfg, rk, agg), out_dir=sub_out)
        if cfg.held_out_domain == "sweep":
            sweep = run_sweep(cell_cfg, fed)
            cells[name], scores[name] = sweep.tasks, sweep.savg
        else:
            rep = run_experiment(cell_cfg, fed)
            cells[name], scores[name] = [rep], (rep.final.mAP, rep.final.rank1)
        for rep in cells[name]:
            rows.append([name, int(rk), int(agg == "ks"), rep.task, rep.final.mAP, rep.final.rank1])
        rows.append([name, int(rk), int(agg == "ks"), "SAvg", *scores[name]])
    if cfg.out_dir is not None:
        _write_summary(rows, ["cell", "RK", "KS", "task", "mAP", "rank1"], Path(cfg.out_dir) / "ablation.csv")
    return AblationReport(cells, scores)


def ablation_ordering(rank1: dict[str, float], slack: float = 0.02) -> dict[str, bool]:
    """Check full >= each single-mechanism cell >= FedAvg cell - ``slack``."""
    full, base = rank1["rk1_ks1"], rank1["rk0_ks0"]
    checks = {}
    for single in ("rk1_ks0", "rk0_ks1"):
        checks[f"rk1_ks1>={single}"] = full >= rank1[single]
        checks[f"{single}>=rk0_ks0-{slack}"] = rank1[single] >= base - slack
    return checks


def run_ablation_seeds(cfg: ExperimentConfig, seeds: Sequence[int]) -> dict[str, Any]:
    """Run the ablation grid for several seeds and average SAvg Rank-1 per cell."""
    per_seed: dict[int, AblationReport] = {}
    for s in seeds:
        sub_out = None if cfg.out_dir is None else str(Path(cfg.out_dir) / f"seed{s}")
        seed_cfg = build_config({"seed": s}, dataclasses.replace(cfg, out_dir=sub_out))
        per_seed[s] = run_ablation(seed_cfg)
    names = [c[0] for c in ABLATION_CELLS]
    mean_map = {n: float(np.mean([per_seed[s].savg[n][0] for s in seeds])) for n in names}
    mean_r1 = {n: float(np.mean([per_seed[s].savg[n][1] for s in seeds])) for n in names}
    checks = ablation_ordering(mean_r1)
    if cfg.out_dir is not None:
        rows = [[n, *(per_seed[s].savg[n][1] for s in seeds), mean_map[n], mean_r1[n]] for n in names]
        header = ["cell", *(f"rank1_seed{s}" for s in seeds), "mean_mAP", "mean_rank1"]
        _write_summary(rows, header, Path(cfg.out_dir) / "ablation_seeds.csv")
        _write_summary([[k, int(v)] for k, v in checks.items()], ["check", "ok"],
                       Path(cfg.out_dir) / "ablation_ordering.csv")
    return {"per_seed": per_seed, "mean_mAP": mean_map, "mean_rank1": mean_r1,
            "ordering": checks, "ordering_ok": all(checks.values())}
