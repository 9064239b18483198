"""Experiment runner: corpora, base pretraining, unlearning runs, ablations and plot data."""

from __future__ import annotations

import contextlib
import csv
import hashlib
import io
import json
import logging
import math
import os
import random
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch

from .alpha import AlphaPolicy, AlphaRecord, AlphaTrace, reinforce_update, reward_from_loss, sample_alpha
from .corpus import (
    FactRecord,
    LabeledSentence,
    McqItem,
    Vocabulary,
    build_mcq_eval,
    generate_fact_corpus,
    generate_toxicity_corpus,
    retain_corpus,
    toxicity_prompts,
    toxicity_rate,
)
from .metrics import GOALS, EvalResult, mcq_accuracy, metric_report, s_unlearning
from .model import (
    CHECKPOINT_VERSION,
    ModelConfig,
    ToyLM,
    clone_frozen,
    load_checkpoint,
    pretrain,
    save_checkpoint,
    select_layer_regions,
)
from .objectives import METHODS, Unlearner, UnlearnConfig, rmu_retain_l2
from .probes import (
    ProbeDirection,
    histogram_csv,
    probe_similarity_matrix,
    save_probe_bundle,
    train_layer_probes,
    weight_distribution_stats,
)

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
CACHE_ENV = "GOALUNLEARN_CACHE"

# Per-goal defaults filled in by ExperimentConfig.resolved().
GOAL_DEFAULTS = {
    "knowledge": {"method": "cosine-rmu", "alpha": 4.0, "epochs": 100, "lr": 3e-3},
    "toxicity": {"method": "toxicity-probe", "alpha": 0.1, "epochs": 10, "lr": 3e-3},
}
RMU_TARGET_LAYER_FRACTION = 3  # knowledge target layer = n_layers // 3
RMU_BAND = 2  # update the target MLP and the two below it


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


@contextlib.contextmanager
def stage(name: str) -> Iterator[None]:
    try:
        yield
    except StageError:
        raise
    except Exception as exc:  # noqa: BLE001 - re-raised with the stage name attached
        raise StageError(name, exc) from exc


@dataclass
class ExperimentConfig:
    goal: str = "toxicity"
    method: str | None = None
    # model
    n_layers: int = 12
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 256
    max_seq_len: int = 64
    # target layers: explicit list, or the region scheme when None
    layers: list[int] | None = None
    per_region: int = 3
    update_layers: list[int] | None = None
    c: float = 6.0
    beta: float = 2.0
    # alpha
    alpha: float | None = None
    alpha_mode: str = "fixed"
    sigma: float = 0.1
    rl_lr: float = 1e-2
    ema_decay: float = 0.9
    alpha_ref: float | None = None
    # optimisation
    epochs: int | None = None
    lr: float | None = None
    batch_size: int = 16
    retain_loss: str | None = None
    layer_reduce: str = "mean"
    full_model: bool = False
    probe_l2: float = 1.0
    probe_normalize: bool = True
    seed: int = 0
    # corpora
    n_forget_facts: int = 50
    n_retain_facts: int = 200
    n_toxic_per_class: int = 400
    n_forget_toxic_per_class: int = 100
    n_probe_per_class: int = 200
    n_prompts: int = 100
    horizon: int = 4
    r0: float = 0.25
    # base model
    pretrain_epochs: int = 80
    pretrain_lr: float = 1e-3
    pretrain_batch_size: int = 32
    checkpoint: str | None = None

    def __post_init__(self):
        if self.goal not in GOALS:
            raise ValueError(f"unknown goal {self.goal!r}")
        if self.method is not None and self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.method == "toxicity-probe" and self.goal != "toxicity":
            raise ValueError("method toxicity-probe requires goal toxicity")
        if self.alpha_mode not in ("fixed", "meta"):
            raise ValueError("alpha_mode must be 'fixed' or 'meta'")
        if self.alpha is not None and not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if self.epochs is not None and self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        for name in ("layers", "update_layers"):
            v = getattr(self, name)
            if v is not None:
                bad = [i for i in v if not 0 <= i < self.n_layers]
                if bad:
                    raise ValueError(f"{name} {bad} out of range for {self.n_layers} layers")
        select_layer_regions(self.n_layers, self.per_region)  # raises if unresolvable

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {unknown}")
        return cls(**d)

    @classmethod
    def from_file(cls, path: str | Path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return asdict(self)

    def resolved(self) -> "ExperimentConfig":
        """Copy with every per-goal default made explicit."""
        defaults = GOAL_DEFAULTS[self.goal]
        method = self.method or defaults["method"]
        layers = self.layers
        if layers is None:
            if self.goal == "toxicity":
                layers = select_layer_regions(self.n_layers, self.per_region)
            else:
                layers = [self.n_layers // RMU_TARGET_LAYER_FRACTION]
        update = self.update_layers
        if update is None:
            if method == "toxicity-probe" or not layers:
                update = list(layers)
            else:
                top = max(layers)
                update = sorted(set(layers) | set(range(max(0, top - RMU_BAND), top + 1)))
        alpha = self.alpha if self.alpha is not None else defaults["alpha"]
        return replace(
            self,
            method=method,
            layers=sorted(set(layers)),
            update_layers=sorted(set(update)),
            alpha=alpha,
            alpha_ref=self.alpha_ref if self.alpha_ref is not None else alpha,
            epochs=self.epochs if self.epochs is not None else defaults["epochs"],
            lr=self.lr if self.lr is not None else defaults["lr"],
            retain_loss=self.retain_loss or ("cosine" if method == "cosine-rmu" else "l2"),
        )

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(vocab_size, self.n_layers, self.d_model, self.n_heads, self.d_ff,
                           self.max_seq_len, self.seed)

    def unlearn_config(self) -> UnlearnConfig:
        r = self.resolved()
        return UnlearnConfig(
            method=r.method, layers=tuple(r.layers), update_layers=tuple(r.update_layers), c=r.c,
            beta=r.beta, lr=r.lr, retain_loss=r.retain_loss, full_model=r.full_model,
            probe_normalize=r.probe_normalize, layer_reduce=r.layer_reduce, seed=r.seed,
        )

    def pretrain_key(self) -> str:
        keys = ("n_layers", "d_model", "n_heads", "d_ff", "max_seq_len", "seed", "n_forget_facts",
                "n_retain_facts", "n_toxic_per_class", "pretrain_epochs", "pretrain_lr",
                "pretrain_batch_size")
        doc = {k: getattr(self, k) for k in keys}
        doc["checkpoint_version"] = CHECKPOINT_VERSION
        doc["schema_version"] = SCHEMA_VERSION
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]


# ---------------------------------------------------------------- corpora


@dataclass
class Corpora:
    vocab: Vocabulary
    records: list[FactRecord]
    pretrain_sentences: list[LabeledSentence]
    forget_mcq: list[McqItem]
    utility_mcq: list[McqItem]
    forget_toxic: list[LabeledSentence]
    probe_sentences: list[LabeledSentence]
    prompts: list[list[int]]
    retain: list[list[int]]

    def pretrain_corpus(self) -> list[list[int]]:
        return [r.render(self.vocab) for r in self.records] + [list(s.tokens) for s in self.pretrain_sentences]

    def forget_sequences(self, goal: str) -> list[list[int]]:
        if goal == "knowledge":
            return [r.render(self.vocab) for r in self.records if r.split == "forget"]
        return [list(s.tokens) for s in self.forget_toxic]


# Offsets keep the seeded generators for different corpus roles apart.
_FORGET_TOXIC_OFFSET = 10_000
_PROBE_OFFSET = 20_000


def build_corpora(cfg: ExperimentConfig) -> Corpora:
    vocab = Vocabulary.build()
    records, _ = generate_fact_corpus(cfg.seed, cfg.n_forget_facts, cfg.n_retain_facts, vocab)
    sentences = generate_toxicity_corpus(cfg.seed, cfg.n_toxic_per_class, vocab)
    pool = vocab.groups["objects"]
    forget_mcq = build_mcq_eval([r for r in records if r.split == "forget"], cfg.seed, vocab, pool)
    utility_mcq = build_mcq_eval([r for r in records if r.split == "retain"], cfg.seed + 1, vocab, pool)
    forget_toxic = [
        s for s in generate_toxicity_corpus(cfg.seed + _FORGET_TOXIC_OFFSET, cfg.n_forget_toxic_per_class, vocab)
        if s.toxic
    ]
    probe_sentences = generate_toxicity_corpus(cfg.seed + _PROBE_OFFSET, cfg.n_probe_per_class, vocab)
    prompts = toxicity_prompts(cfg.seed, cfg.n_prompts, vocab)
    return Corpora(vocab, records, sentences, forget_mcq, utility_mcq, forget_toxic, probe_sentences,
                   prompts, retain_corpus(records, sentences, vocab))


# ---------------------------------------------------------------- base model


def pretrain_base(cfg: ExperimentConfig, corpora: Corpora) -> tuple[ToyLM, list[float]]:
    model = ToyLM(cfg.model_config(len(corpora.vocab)))
    history = pretrain(model, corpora.pretrain_corpus(), cfg.pretrain_epochs, lr=cfg.pretrain_lr,
                       batch_size=cfg.pretrain_batch_size, seed=cfg.seed)
    return model, history


def load_or_pretrain(cfg: ExperimentConfig, corpora: Corpora, cache_dir: str | Path | None = None) -> ToyLM:
    """Base model from ``cfg.checkpoint``, the pretraining cache, or a fresh run.

    The cache directory defaults to ``$GOALUNLEARN_CACHE``; no caching if unset.
    """
    if cfg.checkpoint:
        model = load_checkpoint(cfg.checkpoint)
        if model.cfg.vocab_size != len(corpora.vocab) or model.cfg.n_layers != cfg.n_layers:
            raise ValueError("checkpoint does not match the configured vocabulary or depth")
        return model
    cache_dir = cache_dir or os.environ.get(CACHE_ENV)
    path = Path(cache_dir) / f"base-{cfg.pretrain_key()}.json" if cache_dir else None
    if path is not None and path.exists():
        return load_checkpoint(path)
    model, _ = pretrain_base(cfg, corpora)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(".tmp")
        save_checkpoint(model, tmp)
        tmp.replace(path)
    return model


# ---------------------------------------------------------------- evaluation


def evaluate(model: ToyLM, cfg: ExperimentConfig, corpora: Corpora) -> EvalResult:
    R = mcq_accuracy(model, corpora.utility_mcq)
    if cfg.goal == "knowledge":
        U = mcq_accuracy(model, corpora.forget_mcq)
    else:
        U = toxicity_rate(model, corpora.prompts, cfg.horizon, corpora.vocab.toxic_lexicon)
    return EvalResult(U, R, cfg.goal)


@torch.no_grad()
def retain_drift(model: ToyLM, frozen: ToyLM, cfg: ExperimentConfig, corpora: Corpora) -> float:
    """Method-independent retain budget: the L2 retain loss on the whole retain
    corpus, averaged over the region layers."""
    layers = select_layer_regions(cfg.n_layers, cfg.per_region)
    _, h = model(corpora.retain, hook_layers=layers)
    _, f = frozen(corpora.retain, hook_layers=layers)
    return sum(rmu_retain_l2(h, f, i).item() for i in layers) / len(layers)


# ---------------------------------------------------------------- reports and files


@dataclass
class RunReport:
    config: dict
    pre: EvalResult
    post: EvalResult
    retain_drift: float
    loss_rows: list[dict] = field(default_factory=list, repr=False)
    layer_rows: list[dict] = field(default_factory=list, repr=False)
    epoch_rows: list[dict] = field(default_factory=list, repr=False)
    alpha_trace: AlphaTrace | None = field(default=None, repr=False)
    probes: list[ProbeDirection] = field(default_factory=list, repr=False)
    files: dict[str, str] = field(default_factory=dict)
    wall_clock: float = 0.0

    def metrics(self) -> dict:
        n = self.config["n_forget_facts"] if self.config["goal"] == "knowledge" else self.config["n_prompts"]
        r0, seed = self.config["r0"], self.config["seed"]
        return {
            "schema_version": SCHEMA_VERSION,
            "pre": metric_report(self.pre, r0, n, seed),
            "post": metric_report(self.post, r0, n, seed),
            "retain_drift": self.retain_drift,
        }

    def summary(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, "config": self.config, **self.metrics(), "files": self.files}


def _csv(header: Sequence[str], rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(row[h]) if isinstance(row[h], float) else row[h] for h in header])
    return buf.getvalue()


def _json(doc) -> str:
    return json.dumps(doc, sort_keys=True, indent=1) + "\n"


def sha256_file(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class Bundle:
    """Output directory that records every artifact for the manifest."""

    MANIFEST = "manifest.json"
    UNHASHED = ("timing.json",)  # wall-clock varies between identical runs

    def __init__(self, out: str | Path):
        self.root = Path(out)
        try:
            self.root.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise StageError("output", exc) from exc
        self.files: dict[str, str] = {}

    def write_text(self, name: str, text: str) -> Path:
        p = self.root / name
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(text)
        self.files[name] = name
        return p

    def add(self, name: str) -> Path:
        self.files[name] = name
        return self.root / name

    def write_manifest(self) -> dict:
        entries = {
            name: sha256_file(self.root / name)
            for name in sorted(self.files)
            if name not in self.UNHASHED and name != self.MANIFEST
        }
        doc = {"schema_version": SCHEMA_VERSION, "artifacts": entries}
        (self.root / self.MANIFEST).write_text(_json(doc))
        return doc


LOSS_HEADER = ("step", "epoch", "method", "forget", "retain", "alpha", "total")
LAYER_HEADER = ("step", "layer", "forget_term")
EPOCH_HEADER = ("epoch", "U", "R", "retain_drift")


def write_run_files(report: RunReport, bundle: Bundle, model: ToyLM | None = None) -> None:
    bundle.write_text("config.json", _json(report.config))
    per_layer = tuple(f"forget_layer{i}" for i in report.config["layers"] or ())
    bundle.write_text("losses.csv", _csv(LOSS_HEADER + per_layer, report.loss_rows))
    bundle.write_text("layer_losses.csv", _csv(LAYER_HEADER, report.layer_rows))
    bundle.write_text("epochs.csv", _csv(EPOCH_HEADER, report.epoch_rows))
    if report.alpha_trace is not None:
        bundle.write_text("alpha_trace.csv", report.alpha_trace.to_csv())
    if report.probes:
        save_probe_bundle(report.probes, bundle.add("probes.json"))
    if model is not None:
        save_checkpoint(model, bundle.add("model.json"))
    bundle.write_text("metrics.json", _json(report.metrics()))
    report.files = {k: v for k, v in sorted(bundle.files.items())}
    bundle.write_text("report.json", _json(report.summary()))
    bundle.write_text("timing.json", _json({"wall_clock_seconds": report.wall_clock}))
    bundle.write_manifest()


# ---------------------------------------------------------------- unlearning


def _batches(forget: list, retain: list, batch_size: int, rng: random.Random) -> list[tuple[list, list]]:
    """One epoch over the forget set, each batch paired with retain sequences."""
    f_order = rng.sample(range(len(forget)), len(forget))
    n = max(len(forget), len(retain))
    r_order = [i % len(retain) for i in rng.sample(range(n), n)]
    out = []
    for k in range(0, len(f_order), batch_size):
        fb = [forget[i] for i in f_order[k : k + batch_size]]
        rb = [retain[i] for i in r_order[k : k + batch_size]]
        out.append((fb, rb))
    return out


def run_experiment(
    config: ExperimentConfig,
    out: str | Path | None = None,
    base: ToyLM | None = None,
    corpora: Corpora | None = None,
    save_model: bool = False,
) -> RunReport:
    """generate -> pretrain/load -> evaluate-pre -> unlearn -> evaluate-post.

    ``base`` is never modified; the run trains a copy. Files are written only
    when ``out`` is given, and the loss logs are flushed even if a later stage
    fails.
    """
    t0 = time.perf_counter()
    cfg = config.resolved()
    bundle = Bundle(out) if out is not None else None
    with stage("generate"):
        corpora = corpora or build_corpora(cfg)
    with stage("pretrain"):
        base = base if base is not None else load_or_pretrain(cfg, corpora)
        model = clone_frozen(base)
        for p in model.parameters():
            p.requires_grad_(True)
        model.frozen = False
        model.train()
        frozen = clone_frozen(base)
    with stage("evaluate-pre"):
        pre = evaluate(frozen, cfg, corpora)

    report = RunReport(cfg.to_dict(), pre, pre, 0.0)
    try:
        with stage("probes"):
            if cfg.method == "toxicity-probe" and cfg.layers:
                report.probes = train_layer_probes(frozen, corpora.probe_sentences, cfg.layers,
                                                   cfg.probe_l2, cfg.seed)
        with stage("unlearn"):
            _unlearn(cfg, model, frozen, corpora, report)
        with stage("evaluate-post"):
            report.post = evaluate(model, cfg, corpora)
            report.retain_drift = retain_drift(model, frozen, cfg, corpora)
    finally:
        report.wall_clock = time.perf_counter() - t0
        if bundle is not None:
            with stage("write"):
                write_run_files(report, bundle, model if save_model else None)
    return report


def _unlearn(cfg: ExperimentConfig, model: ToyLM, frozen: ToyLM, corpora: Corpora, report: RunReport) -> None:
    if not cfg.layers or cfg.epochs == 0:
        report.epoch_rows.append(_epoch_row(0, report.pre, 0.0))
        return
    unlearner = Unlearner(model, frozen, cfg.unlearn_config(), report.probes)
    forget = corpora.forget_sequences(cfg.goal)
    retain = corpora.retain
    rng = random.Random(f"batches:{cfg.seed}")
    meta = cfg.alpha_mode == "meta"
    policy = AlphaPolicy(theta=math.log(cfg.alpha), sigma=cfg.sigma, ema_decay=cfg.ema_decay, rl_lr=cfg.rl_lr)
    eps_rng = np.random.default_rng(cfg.seed)
    if meta:
        report.alpha_trace = AlphaTrace()
    report.epoch_rows.append(_epoch_row(0, report.pre, 0.0))
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        for fb, rb in _batches(forget, retain, cfg.batch_size, rng):
            if meta:
                alpha, eps = sample_alpha(policy, eps_rng)
            else:
                alpha, eps = cfg.alpha, 0.0
            bd = unlearner.step(fb, rb, alpha)
            row = {"step": step, "epoch": epoch, "method": cfg.method, "forget": bd.forget,
                   "retain": bd.retain, "alpha": bd.alpha, "total": bd.total}
            row.update({f"forget_layer{i}": v for i, v in sorted(bd.per_layer.items())})
            report.loss_rows.append(row)
            report.layer_rows.extend({"step": step, "layer": i, "forget_term": v} for i, v in sorted(bd.per_layer.items()))
            if meta:
                reward = reward_from_loss(unlearner.evaluate(fb, rb, alpha), cfg.alpha_ref)
                policy = reinforce_update(policy, eps, reward)
                report.alpha_trace.records.append(
                    AlphaRecord(step, alpha, eps, reward, policy.baseline, policy.theta))
            step += 1
        model.eval()
        report.epoch_rows.append(_epoch_row(epoch, evaluate(model, cfg, corpora),
                                            retain_drift(model, frozen, cfg, corpora)))
        model.train()


def _epoch_row(epoch: int, result: EvalResult, drift: float) -> dict:
    return {"epoch": epoch, "U": result.U, "R": result.R, "retain_drift": drift}


# ---------------------------------------------------------------- ablation


ABLATION_HEADER = ("group", "size", "toxicity_rate", "utility", "s_unlearning", "status")


def parse_groups(spec: str) -> list[list[int]]:
    """``"0;1;0,1,3"`` -> ``[[0], [1], [0, 1, 3]]``; an empty item is the empty group."""
    return [[int(x) for x in part.split(",") if x.strip()] for part in spec.split(";")]


def ablate_layers(
    config: ExperimentConfig,
    groups: Sequence[Sequence[int]],
    out: str | Path | None = None,
    base: ToyLM | None = None,
) -> list[dict]:
    """One unlearning run per layer group, all from the same base model and seed."""
    cfg = config.resolved()
    corpora = build_corpora(cfg)
    base = base if base is not None else load_or_pretrain(cfg, corpora)
    rows = []
    for group in groups:
        g = sorted(set(group))
        row = {"group": " ".join(map(str, g)), "size": len(g)}
        try:
            rep = run_experiment(replace(cfg, layers=g, update_layers=g), base=base, corpora=corpora)
            s = s_unlearning(rep.post, cfg.r0)
            row.update(toxicity_rate=rep.post.U, utility=rep.post.R, s_unlearning=s.score, status="ok")
        except (StageError, ValueError) as exc:
            log.error("ablation group %s failed: %s", g, exc)
            row.update(toxicity_rate="", utility="", s_unlearning="", status=f"failed: {exc}")
        rows.append(row)
    if out is not None:
        bundle = Bundle(out)
        bundle.write_text("config.json", _json(cfg.to_dict()))
        bundle.write_text("ablation.csv", ablation_csv(rows))
        bundle.write_manifest()
    return rows


def ablation_csv(rows: Sequence[dict]) -> str:
    return _csv(ABLATION_HEADER, rows)


# ---------------------------------------------------------------- matched-budget comparison


def best_within_budget(epoch_rows: Sequence[dict], budget: float) -> dict:
    """Lowest-U epoch checkpoint whose retain drift does not exceed ``budget``."""
    ok = [r for r in epoch_rows if r["retain_drift"] <= budget]
    return min(ok, key=lambda r: (r["U"], r["epoch"]))


def matched_budget_comparison(
    config: ExperimentConfig,
    rmu_alphas: Sequence[float] = (1.0, 4.0, 16.0, 64.0),
    base: ToyLM | None = None,
) -> dict:
    """Probe objective vs cosine-RMU on the same toxic forget data.

    The budget is the probe run's final retain drift. Cosine-RMU gets its best
    epoch checkpoint within that budget over a grid of alphas and both layer
    conventions (single target with its band, and the region layers).
    """
    cfg = replace(config, goal="toxicity", method="toxicity-probe").resolved()
    corpora = build_corpora(cfg)
    base = base if base is not None else load_or_pretrain(cfg, corpora)
    probe = run_experiment(cfg, base=base, corpora=corpora)
    budget = probe.retain_drift
    target = cfg.n_layers // RMU_TARGET_LAYER_FRACTION
    schemes = {
        "single": ([target], list(range(max(0, target - RMU_BAND), target + 1))),
        "region": (list(cfg.layers), list(cfg.layers)),
    }
    rmu = []
    for name, (layers, update) in schemes.items():
        for a in rmu_alphas:
            rc = replace(cfg, method="cosine-rmu", layers=layers, update_layers=update, alpha=a,
                         retain_loss=None).resolved()
            rep = run_experiment(rc, base=base, corpora=corpora)
            best = best_within_budget(rep.epoch_rows, budget)
            rmu.append({"scheme": name, "alpha": a, **best})
    winner = min(rmu, key=lambda r: r["U"])
    return {
        "seed": cfg.seed,
        "pre": probe.pre.U,
        "probe": probe.post.U,
        "budget": budget,
        "rmu": winner["U"],
        "rmu_runs": rmu,
        "probe_wins": probe.post.U < winner["U"],
    }


# ---------------------------------------------------------------- probe analysis and plot data


def probe_analysis(probes: Sequence[ProbeDirection], bundle: Bundle, bins: int = 20) -> dict:
    sim = probe_similarity_matrix(probes)
    bundle.write_text("similarity.csv", sim.to_csv())
    stats = {}
    for p in probes:
        s = weight_distribution_stats(p, bins)
        bundle.write_text(f"histogram_layer{p.layer}.csv", histogram_csv(s))
        stats[str(p.layer)] = {k: v for k, v in s.items() if k != "histogram"} | {"auc": p.train_auc}
    bundle.write_text("weight_stats.json", _json({"schema_version": SCHEMA_VERSION, "layers": stats}))
    return stats


def emit_plot_data(
    reports: Sequence[dict],
    out: str | Path,
    ablation_rows: Sequence[dict] | None = None,
    probes: Sequence[ProbeDirection] | None = None,
) -> dict:
    """Collect run summaries (as loaded from ``report.json``) into one plot-ready bundle.

    Each report dict must carry ``run`` (a label) and ``layer_rows``.
    """
    bundle = Bundle(out)
    rows = [{"run": r["run"], **lr} for r in reports for lr in r["layer_rows"]]
    bundle.write_text("loss_curves.csv", _csv(("run",) + LAYER_HEADER, rows))
    if probes:
        bundle.write_text("similarity.csv", probe_similarity_matrix(probes).to_csv())
    if ablation_rows is not None:
        bundle.write_text("ablation_scatter.csv", ablation_csv(ablation_rows))
    summary = {
        "schema_version": SCHEMA_VERSION,
        "runs": {r["run"]: {k: r[k] for k in ("pre", "post", "retain_drift") if k in r} for r in reports},
    }
    bundle.write_text("summary.json", _json(summary))
    return bundle.write_manifest()


def read_csv_rows(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def load_run(run_dir: str | Path) -> dict:
    """Summary of a finished run directory in the shape ``emit_plot_data`` expects."""
    run_dir = Path(run_dir)
    doc = json.loads((run_dir / "report.json").read_text())
    layer_rows = [
        {"step": int(r["step"]), "layer": int(r["layer"]), "forget_term": float(r["forget_term"])}
        for r in read_csv_rows(run_dir / "layer_losses.csv")
    ]
    return {"run": run_dir.name, "pre": doc["pre"], "post": doc["post"],
            "retain_drift": doc["retain_drift"], "layer_rows": layer_rows}
