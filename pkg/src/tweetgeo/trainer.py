"""Joint training under TLC + TLM, few-shot iterations and grid search."""

from __future__ import annotations

import itertools
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import tensor as F
from .config import PRETRAINED_FINETUNE_LR, TrainConfig, Variant
from .data import (
    PROMPT_TEMPLATES,
    SHOT_SETTINGS,
    LocationRecord,
    Post,
    compose_location_input,
    compose_tweet_input,
    sample_few_shot,
    split_dataset,
)
from .encoder import POOLING_METHODS, build_vocab
from .errors import DataError
from .evaluate import evaluate, predict
from .fusion import FUSION_GRID
from .model import GeoModel
from .objectives import tlc_loss, tlc_probabilities, tlm_loss, total_loss
from .optim import AdamW
from .tensor import Tape

log = logging.getLogger(__name__)


@dataclass
class EvalRecord:
    step: int
    epoch: int
    dev_accuracy: float
    dev_loss: float
    train_loss: float


@dataclass
class TrainReport:
    config: dict
    evals: list[EvalRecord] = field(default_factory=list)
    best_step: int = 0
    best_dev_accuracy: float = 0.0
    steps: int = 0
    epochs: int = 0
    stopped_early: bool = False
    first_batch_loss: float = float("nan")
    final_train_accuracy: float | None = None
    wall_clock: float = 0.0
    seeds: dict = field(default_factory=dict)
    test_metrics: dict | None = None
    notes: list[str] = field(default_factory=list)

    @property
    def dev_curve(self) -> list[float]:
        return [e.dev_accuracy for e in self.evals]

    @property
    def loss_curve(self) -> list[float]:
        return [e.train_loss for e in self.evals]

    @property
    def best_so_far(self) -> list[float]:
        return list(itertools.accumulate(self.dev_curve, max))

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def learning_rate_note(config: TrainConfig) -> str:
    return (f"learning rate {config.lr:g}; {PRETRAINED_FINETUNE_LR:g} is the setting for fine-tuning a "
            "pre-trained encoder and is available via lr=")


# ---------------------------------------------------------------------------
# loss on one batch


def batch_loss(model: GeoModel, params: Mapping, tweet_ids: Sequence[Sequence[int]], labels,
               rng: np.random.Generator | None = None, candidates: np.ndarray | None = None,
               dropout_rng: np.random.Generator | None = None) -> tuple[F.Tensor, dict]:
    """Total objective on a batch of tokenized tweets against all K locations.

    ``labels`` are class indices into ``model.locations``.  Returns the loss
    tensor and a dict with the detached parts.
    """
    cfg = model.config
    tweets = model.tweet_embeddings(params, tweet_ids, dropout_rng)
    locs = model.location_embeddings(params, dropout_rng)
    sim = tlc_probabilities(tweets, locs, cfg.tlc_config())
    l_tlc = tlc_loss(sim, labels, cfg.tlc_config())
    l_tlm = None
    parts = {"tlc": l_tlc.item()}
    if cfg.use_tlm:
        l_tlm, match = tlm_loss(tweets, locs, labels, cfg.negative_spec(), cfg.fusion_config(), params,
                                sim=sim, candidates=candidates, rng=rng)
        parts["tlm"] = l_tlm.item()
        parts["candidates"] = match.candidates
    loss = total_loss(l_tlc, l_tlm)
    parts["total"] = loss.item()
    return loss, parts


def _dev_scores(model: GeoModel, dev_ids, dev_labels) -> tuple[float, float]:
    params = model.params
    locs = model.location_embeddings(params)
    cfg = model.config.tlc_config()
    hits, losses = 0, 0.0
    for start in range(0, len(dev_ids), 256):
        ids = dev_ids[start:start + 256]
        labels = dev_labels[start:start + 256]
        sim = tlc_probabilities(model.tweet_embeddings(params, ids), locs, cfg)
        hits += int((sim.probs.data.argmax(axis=1) == labels).sum())
        losses += tlc_loss(sim, labels, cfg).item() * len(ids)
    return hits / len(dev_ids), losses / len(dev_ids)


# ---------------------------------------------------------------------------
# single run


def train(config: TrainConfig, train_posts: Sequence[Post], dev_posts: Sequence[Post],
          locations: Sequence[LocationRecord], iteration: int = 0) -> tuple[TrainReport, GeoModel]:
    """Train one model; returns its report and the best-on-dev model."""
    if not train_posts:
        raise DataError("empty training set")
    if not dev_posts:
        raise DataError("empty development set")
    if config.use_tlm:
        config.negative_spec().check(len(locations))
    started = time.perf_counter()
    locations = sorted(locations, key=lambda loc: loc.location_id)

    train_texts = [compose_tweet_input(p) for p in train_posts]
    prompts = [compose_location_input(loc, config.template) for loc in locations]
    vocab = build_vocab(train_texts + prompts, config.vocab_size)
    seeds = {"master": config.seed, "iteration": iteration, "data": config.data_seed}
    model = GeoModel.initialize(config, vocab, locations, seed=[config.seed, iteration, 0])
    model.train_ids = [p.id for p in train_posts]
    index = model.class_index()

    train_ids = [model.tokenize(t) for t in train_texts]
    train_labels = np.array([index[p.location_id] for p in train_posts])
    dev_ids = [model.tokenize(compose_tweet_input(p)) for p in dev_posts]
    dev_labels = np.array([index[p.location_id] for p in dev_posts])

    shuffle_rng = np.random.default_rng([config.seed, iteration, 1])
    dropout_rng = np.random.default_rng([config.seed, iteration, 3]) if config.dropout > 0 else None
    trainable = model.trainable_names()
    frozen = [k for k in model.params if k not in set(trainable)]
    opt = AdamW(config.lr, (config.beta1, config.beta2), config.adam_eps, config.weight_decay)

    n = len(train_posts)
    steps_per_epoch = math.ceil(n / config.batch_size)
    interval = min(config.eval_interval, steps_per_epoch)
    report = TrainReport(config=config.to_dict(), seeds=seeds, notes=[learning_rate_note(config)])
    if config.has(Variant.NO_TLM):
        report.notes.append("TLM disabled: training with the contrastive objective only")

    best_params = {k: v.copy() for k, v in model.params.items()}
    best_acc = -1.0
    bad_evals = 0
    running: list[float] = []
    step = 0
    stop = False
    for epoch in range(config.max_epochs):
        perm = shuffle_rng.permutation(n)
        for b in range(steps_per_epoch):
            idx = perm[b * config.batch_size:(b + 1) * config.batch_size]
            tape = Tape()
            leaves = {k: tape.watch(model.params[k], k) for k in trainable}
            params = dict(leaves)
            params.update({k: model.params[k] for k in frozen})
            mine_rng = np.random.default_rng([config.seed, iteration, 2, step])
            loss, _ = batch_loss(model, params, [train_ids[i] for i in idx], train_labels[idx],
                                 rng=mine_rng, dropout_rng=dropout_rng)
            if leaves and loss.tape is tape:
                grads = tape.gradients(loss, leaves)
                opt.step(model.params, grads)
            if step == 0:
                report.first_batch_loss = loss.item()
            running.append(loss.item())
            step += 1
            if step % interval == 0:
                acc, dloss = _dev_scores(model, dev_ids, dev_labels)
                report.evals.append(EvalRecord(step, epoch, acc, dloss, float(np.mean(running))))
                running = []
                if acc > best_acc:
                    best_acc, bad_evals = acc, 0
                    report.best_step = step
                    best_params = {k: v.copy() for k, v in model.params.items()}
                else:
                    bad_evals += 1
                    if bad_evals >= config.patience:
                        stop = True
                        break
        report.epochs = epoch + 1
        if stop:
            break

    report.steps = step
    report.stopped_early = stop
    report.best_dev_accuracy = best_acc
    last = predict(train_posts, model)
    report.final_train_accuracy = float(np.mean(
        [last.top1[p.id] == p.location_id for p in train_posts]))
    model.params = best_params
    report.wall_clock = time.perf_counter() - started
    log.info("iteration %d: %d steps, best dev accuracy %.4f at step %d",
             iteration, step, best_acc, report.best_step)
    return report, model


# ---------------------------------------------------------------------------
# few-shot protocol


def exact_mean(values: Sequence[float]) -> float:
    """Arithmetic mean that returns ``a`` exactly when every value equals ``a``."""
    if not values:
        raise DataError("mean of an empty sequence")
    first = values[0]
    return first + math.fsum(v - first for v in values) / len(values)


@dataclass
class IterationsResult:
    config: dict
    reports: list[TrainReport]
    models: list[GeoModel] = field(default_factory=list, repr=False)

    def _mean(self, key) -> float:
        return exact_mean([r.test_metrics[key] for r in self.reports])

    @property
    def accuracy(self) -> float:
        return self._mean("accuracy")

    @property
    def mean_dist(self) -> float:
        return self._mean("mean_dist")

    @property
    def med_dist(self) -> float:
        return self._mean("med_dist")

    @property
    def dev_accuracy(self) -> float:
        return exact_mean([r.best_dev_accuracy for r in self.reports])

    def summary(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "mean_dist": self.mean_dist,
            "med_dist": self.med_dist,
            "dev_accuracy": self.dev_accuracy,
            "iterations": [
                {"accuracy": r.test_metrics["accuracy"], "mean_dist": r.test_metrics["mean_dist"],
                 "med_dist": r.test_metrics["med_dist"], "dev_accuracy": r.best_dev_accuracy,
                 "best_step": r.best_step, "steps": r.steps, "seeds": r.seeds}
                for r in self.reports],
        }

    def to_dict(self) -> dict:
        return {"config": self.config, "summary": self.summary(),
                "reports": [r.to_dict() for r in self.reports]}


def run_iterations(config: TrainConfig, posts: Sequence[Post], locations: Sequence[LocationRecord],
                   keep_models: bool = True) -> IterationsResult:
    """Split, draw one few-shot set per iteration seed, train and test each."""
    by_id = {p.id: p for p in posts}
    split = split_dataset(posts, config.data_seed)
    samples = sample_few_shot(split, config.few_shot_spec())
    dev = [by_id[i] for i in split.ids("dev")]
    test = [by_id[i] for i in split.ids("test")]
    reports, models = [], []
    for i, ids in enumerate(samples):
        report, model = train(config, [by_id[j] for j in ids], dev, locations, iteration=i)
        report.test_metrics = evaluate(test, model).to_dict()
        reports.append(report)
        if keep_models:
            models.append(model)
    return IterationsResult(config.to_dict(), reports, models)


# ---------------------------------------------------------------------------
# grid search

AxisValues = list[tuple[str, dict]]

ABLATION_AXES: dict[str, AxisValues] = {
    "temperature": [(f"{t:g}", {"temperature": t}) for t in (0.01, 0.03, 0.05, 0.07, 0.1, 0.3)],
    "hard-negatives": [(f"{policy}/{m}", {"negative_policy": policy, "negatives": m})
                       for policy in ("multinomial", "top") for m in range(1, 11)],
    "pooling": [(m, {"pooling": m}) for m in POOLING_METHODS],
    "fusion": [(t if k is None else f"{t}+{k}", {"fusion_type": t, "fusion_encoder": k})
               for t, k in FUSION_GRID],
    "prompt": [(t, {"template": t}) for t in PROMPT_TEMPLATES],
    "variant": [(v, {"variant": v}) for v in
                ("one-encoder", "dual-encoder", "frozen-encoder", "no-tlm", "no-label-smoothing")],
    "shots": [(str(s), {"shots": s}) for s in SHOT_SETTINGS],
}


@dataclass
class GridRow:
    key: dict[str, str]
    overrides: dict
    status: str = "ok"
    error: str | None = None
    accuracy: float | None = None
    mean_dist: float | None = None
    med_dist: float | None = None
    dev_accuracy: float | None = None
    result: IterationsResult | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k != "result"}
        if self.result is not None:
            d["iterations"] = self.result.summary()["iterations"]
            d["reports"] = [r.to_dict() for r in self.result.reports]
        return d


def _run_cell(args) -> GridRow:
    key, overrides, base, posts, locations, runner = args
    row = GridRow(key, overrides)
    try:
        result = runner(base.replace(**overrides), posts, locations, keep_models=False)
    except Exception as exc:  # noqa: BLE001 - one bad cell must not stop the grid
        row.status, row.error = "failed", f"{type(exc).__name__}: {exc}"
        return row
    row.result = result
    row.accuracy, row.mean_dist, row.med_dist = result.accuracy, result.mean_dist, result.med_dist
    row.dev_accuracy = result.dev_accuracy
    return row


def grid_search(base: TrainConfig, axes: Mapping[str, AxisValues], posts: Sequence[Post],
                locations: Sequence[LocationRecord], jobs: int = 1,
                runner: Callable = run_iterations) -> list[GridRow]:
    """Run the Cartesian product of the axes; failures mark the cell and move on.

    Data seeds live in ``base`` and are shared by every cell, so only the
    ablated factors vary.  Rows come back in product order.
    """
    names = list(axes)
    cells = []
    for combo in itertools.product(*(axes[a] for a in names)):
        key = {a: label for a, (label, _) in zip(names, combo)}
        overrides: dict = {}
        for _, o in combo:
            overrides.update(o)
        cells.append((key, overrides, base, posts, locations, runner))
    if jobs > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_run_cell, cells))
    return [_run_cell(c) for c in cells]


def rank_rows(rows: Sequence[GridRow]) -> list[GridRow]:
    """Best test accuracy first; failed cells last in their original order."""
    ok = sorted((r for r in rows if r.status == "ok"), key=lambda r: -r.accuracy)
    return ok + [r for r in rows if r.status != "ok"]


def format_table(rows: Sequence[GridRow]) -> str:
    if not rows:
        return ""
    axes = list(rows[0].key)
    header = axes + ["accuracy", "mean_dist", "med_dist", "dev_accuracy", "status"]
    lines = ["\t".join(header)]
    for r in rows:
        vals = [r.key[a] for a in axes]
        if r.status == "ok":
            vals += [f"{r.accuracy:.4f}", f"{r.mean_dist:.3f}", f"{r.med_dist:.3f}", f"{r.dev_accuracy:.4f}"]
        else:
            vals += ["", "", "", ""]
        vals.append(r.status if r.error is None else f"{r.status}: {r.error}")
        lines.append("\t".join(vals))
    return "\n".join(lines) + "\n"


def metrics_table(result: IterationsResult) -> str:
    lines = ["iteration\taccuracy\tmean_dist\tmed_dist\tdev_accuracy\tbest_step"]
    for i, r in enumerate(result.reports):
        m = r.test_metrics
        lines.append(f"{i}\t{m['accuracy']:.6f}\t{m['mean_dist']:.6f}\t{m['med_dist']:.6f}\t"
                     f"{r.best_dev_accuracy:.6f}\t{r.best_step}")
    lines.append(f"mean\t{result.accuracy:.6f}\t{result.mean_dist:.6f}\t{result.med_dist:.6f}\t"
                 f"{result.dev_accuracy:.6f}\t")
    return "\n".join(lines) + "\n"
