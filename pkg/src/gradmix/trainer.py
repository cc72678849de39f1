"""Training loops for the baselines, GradMix, the beta/gamma grid and the pseudo-label pipeline."""

from __future__ import annotations

import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import datasets as dsets
from . import mixing
from . import pseudolabel as pl
from . import tensor_net as tn
from .config import RunConfig, config_digest

log = logging.getLogger(__name__)

HEAD_POLICY = "each head: mean gradient of the sources assigned to it, at the batch's eta*alpha"


@dataclass
class Source:
    """A stream of training pairs for one head; targets are labels or soft rows."""

    name: str
    images: np.ndarray
    targets: np.ndarray
    head: str
    loss: str = "ce"

    def __len__(self):
        return len(self.images)

    @classmethod
    def from_dataset(cls, ds: dsets.LabeledDataset) -> "Source":
        return cls(ds.domain.name, ds.images, ds.labels, ds.domain.head_id, "ce")


@dataclass
class TaskData:
    sources: list[dsets.LabeledDataset]
    target: dsets.DomainSpec
    val: dsets.LabeledDataset
    hyper_val: dsets.LabeledDataset
    unlabeled: dsets.UnlabeledDataset
    test: dsets.LabeledDataset
    manifest: dict = field(default_factory=dict)

    @property
    def image_shape(self):
        return self.val.images.shape[1:]


# ----------------------------------------------------------------------------
# data


def _idx_file(directory: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz", stem.replace("-idx", ".idx")):
        if (directory / name).exists():
            return directory / name
    raise FileNotFoundError(f"{directory / stem} not found")


def load_pool(cfg: RunConfig):
    """Returns ``(train_pool, test_pool or None)`` at the configured resolution."""
    d = cfg.data
    test = None
    if d.kind == "bundled":
        pool = dsets.bundled_digits()
    elif d.kind == "idx":
        root = Path(d.data_dir) if d.data_dir else dsets.default_data_dir()
        pool = dsets.load_idx(_idx_file(root, "train-images-idx3-ubyte"),
                              _idx_file(root, "train-labels-idx1-ubyte"))
        test = dsets.load_idx(_idx_file(root, "t10k-images-idx3-ubyte"),
                              _idx_file(root, "t10k-labels-idx1-ubyte"))
    else:
        classes = sorted({c for s in cfg.sources for c in s.classes} | set(cfg.target_classes))
        pool = dsets.synthetic_digits(d.synthetic_per_class, classes, d.image_size, seed=d.seed)
    factor = pool.images.shape[1] // d.image_size
    if factor < 1 or pool.images.shape[1] != factor * d.image_size:
        raise ValueError(f"image size {d.image_size} does not divide {pool.images.shape[1]}")
    pool = dsets.downsample(pool, factor)
    if test is not None:
        test = dsets.downsample(test, factor)
    return pool, test


def prepare_data(cfg: RunConfig, pool=None, test_pool=None) -> TaskData:
    """Carves test set, source subsets and the target V / hyper-val / U split.

    Sources never share rows with each other or with the target pool.  Only
    ``cfg.seed`` changes V; everything else depends on ``cfg.data.seed``.
    """
    cfg.validate()
    if pool is None:
        pool, test_pool = load_pool(cfg)
    d = cfg.data
    rng = np.random.default_rng(d.seed)
    ids = pool.class_ids
    tclasses = sorted(cfg.target_classes)
    head = cfg.target_head
    available = np.ones(len(pool), dtype=bool)
    target_mask = np.isin(ids, tclasses)
    if test_pool is None:
        cand = np.flatnonzero(target_mask)
        if len(cand) < d.test_size:
            raise dsets.InsufficientSamplesError(f"only {len(cand)} target rows for a {d.test_size}-row test set")
        test_idx = np.sort(rng.choice(cand, d.test_size, replace=False))
        available[test_idx] = False
        test = dsets.partition_by_labels(pool.subset(test_idx), tclasses, cfg.target_name, head)
    else:
        test = dsets.partition_by_labels(test_pool, tclasses, cfg.target_name, head)
    sources, source_rows = [], {}
    for i, s in enumerate(cfg.sources):
        cand = np.flatnonzero(available & np.isin(ids, s.classes))
        if len(cand) < s.n_images:
            raise dsets.InsufficientSamplesError(
                f"source {s.name!r} wants {s.n_images} images, only {len(cand)} available")
        pick = np.sort(rng.choice(cand, s.n_images, replace=False))
        available[pick] = False
        ds = dsets.partition_by_labels(pool.subset(pick), sorted(s.classes), s.name, s.head, s.relation)
        if s.shift:
            ds = dsets.synth_shift(ds, [tuple(t) if isinstance(t, list) else t for t in s.shift],
                                   seed=d.seed * 1000 + i)
        sources.append(ds)
        source_rows[s.name] = ds.rows.tolist()
    tpool = dsets.partition_by_labels(pool.subset(np.flatnonzero(available & target_mask)),
                                      tclasses, cfg.target_name, head, "same")
    splits = dsets.make_splits(tpool, dsets.SplitPlan(cfg.k_per_class, d.hyper_val_size, cfg.seed))
    manifest = {
        "data_seed": d.seed,
        "run_seed": cfg.seed,
        "test_rows": test.rows.tolist(),
        "source_rows": source_rows,
        "target_pool_rows": tpool.rows.tolist(),
        "splits": splits.manifest(),
    }
    return TaskData(sources, tpool.domain, splits.val, splits.hyper_val, splits.unlabeled, test, manifest)


# ----------------------------------------------------------------------------
# records


@dataclass
class RunRecord:
    mode: str
    config_digest: str
    seed: int
    steps: list[dict] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)
    best_step: int = 0
    best_hv_acc: float = float("nan")
    test_acc: float = float("nan")
    final_test_acc: float = float("nan")
    wall_per_batch: float = float("nan")
    policy: str = HEAD_POLICY
    extra: dict = field(default_factory=dict)

    def hv_losses(self) -> list[float]:
        return [e["hv_loss"] for e in self.evals]

    def summary(self) -> dict:
        d = asdict(self)
        d.pop("steps")
        return d


class MetricsWriter:
    """Line-delimited JSON metrics plus tab-separated plot series.

    Everything written here is deterministic given the config; wall-clock
    timings go to ``timing.json`` instead so repeated runs diff cleanly.
    """

    def __init__(self, out_dir=None, prefix="", meta: dict | None = None):
        self.out = Path(out_dir) if out_dir else None
        self.prefix = prefix
        if self.out:
            self.out.mkdir(parents=True, exist_ok=True)
            # TSV series start with a '#' line naming the config digest and seeds
            tag = "# " + " ".join(f"{k}={v}" for k, v in (meta or {}).items()) + "\n" if meta else ""
            self._metrics = open(self.out / f"{prefix}metrics.jsonl", "w")
            self._hv = open(self.out / f"{prefix}hyperval.tsv", "w")
            self._hv.write(tag + "step\thv_loss\thv_acc\n")
            self._w = open(self.out / f"{prefix}weights.tsv", "w")
            self._w.write(tag + "step\tlayer\tsource\tweight\n")

    def header(self, **fields):
        self._line({"type": "run", **fields})

    def step(self, rec: dict):
        self._line({"type": "step", **rec})
        if self.out and rec.get("weights") is not None:
            for l, row in enumerate(rec["weights"]):
                for i, w in enumerate(row):
                    self._w.write(f"{rec['step']}\t{l}\t{i}\t{w:.17g}\n")
            self._w.flush()

    def eval(self, rec: dict):
        self._line({"type": "eval", **rec})
        if self.out:
            self._hv.write(f"{rec['step']}\t{rec['hv_loss']:.17g}\t{rec['hv_acc']:.17g}\n")
            self._hv.flush()

    def summary(self, rec: dict):
        self._line({"type": "summary", **rec})

    def _line(self, obj):
        if self.out:
            self._metrics.write(json.dumps(obj, sort_keys=True) + "\n")
            self._metrics.flush()

    def close(self):
        if self.out:
            for f in (self._metrics, self._hv, self._w):
                f.close()


# ----------------------------------------------------------------------------
# evaluation


def predict(params: tn.NetworkParams, head: str, images, batch_size=512) -> np.ndarray:
    out = [tn.forward(params, head, images[i : i + batch_size]) for i in range(0, len(images), batch_size)]
    return np.concatenate(out)


def evaluate(params: tn.NetworkParams, ds: dsets.LabeledDataset, head: str | None = None) -> float:
    """Fraction of argmax-correct predictions."""
    head = head or ds.domain.head_id
    if len(ds) == 0:
        raise ValueError("cannot evaluate on an empty test set")
    if params.n_classes(head) != ds.domain.n_classes:
        raise ValueError(
            f"head {head!r} has {params.n_classes(head)} classes, dataset has {ds.domain.n_classes}")
    logits = predict(params, head, ds.images)
    return float(np.mean(logits.argmax(axis=1) == ds.labels))


def hyperval_metrics(params, ds, head) -> tuple[float, float]:
    logits = predict(params, head, ds.images)
    loss, _ = tn.cross_entropy_loss(logits, ds.labels)
    return loss, float(np.mean(logits.argmax(axis=1) == ds.labels))


# ----------------------------------------------------------------------------
# shared loop


def build_network(cfg: RunConfig, data: TaskData) -> tn.NetworkParams:
    h, w, c = data.image_shape
    layers, _ = tn.digit_convnet(h, c, tuple(cfg.arch.widths), cfg.arch.hidden)
    heads = {}
    for ds in data.sources:
        heads[ds.domain.head_id] = ds.domain.n_classes
    heads.setdefault(data.target.head_id, data.target.n_classes)
    return tn.init_network(layers, heads, seed=cfg.seed)


def _stream_seed(cfg, i):
    return cfg.seed * 1009 + 101 + i


def source_grads(params, sources: Sequence[Source], batches, kl_direction):
    return [tn.backward(params, s.head, x, y, s.loss, kl_direction) for s, (x, y) in zip(sources, batches)]


def sum_gradients(grads: Sequence[tn.GradientSet]) -> tn.GradientSet:
    """Plain sum over sources; each head gets the sum of the sources that used it."""
    trunk = []
    for l in range(len(grads[0].trunk_grads)):
        acc = np.zeros_like(grads[0].trunk_grads[l])
        for g in grads:
            acc += 1.0 * g.trunk_grads[l]
        trunk.append(acc)
    heads = {}
    for g in grads:
        for h, hg in g.head_grads.items():
            heads[h] = hg if h not in heads else heads[h] + hg
    return tn.GradientSet(trunk, heads, sum(g.batch_size for g in grads))


def _run_loop(cfg, data, mode, params, n_steps, step_fn, writer, on_step=None,
              eval_initial=True) -> tuple[RunRecord, tn.NetworkParams]:
    head = data.target.head_id
    record = RunRecord(mode, config_digest(cfg), cfg.seed)
    writer.header(mode=mode, config_digest=record.config_digest, seed=cfg.seed,
                  data_seed=cfg.data.seed, policy=HEAD_POLICY)
    state = tn.MomentumState()
    best = (-1.0, 0, params.copy())

    def do_eval(step):
        nonlocal best
        loss, acc = hyperval_metrics(params, data.hyper_val, head)
        rec = {"step": step, "hv_loss": loss, "hv_acc": acc}
        record.evals.append(rec)
        writer.eval(rec)
        if acc > best[0]:
            best = (acc, step, params.copy())

    if eval_initial:
        do_eval(0)
    times = []
    for step in range(1, n_steps + 1):
        t0 = time.perf_counter()
        rec = step_fn(step, params, state)
        times.append(time.perf_counter() - t0)
        rec["step"] = step
        record.steps.append(rec)
        writer.step(rec)
        if on_step is not None:
            on_step(step, params)
        if step % cfg.eval_every == 0 or step == n_steps:
            do_eval(step)
    final = params
    if cfg.early_stopping and record.evals:
        record.best_hv_acc, record.best_step, chosen = best
    else:
        chosen = final
        record.best_step = n_steps
        record.best_hv_acc = record.evals[-1]["hv_acc"] if record.evals else float("nan")
    record.test_acc = evaluate(chosen, data.test, head)
    record.final_test_acc = evaluate(final, data.test, head)
    record.wall_per_batch = float(np.mean(times)) if times else float("nan")
    return record, chosen


# ----------------------------------------------------------------------------
# baselines


def train_source_only(cfg: RunConfig, data: TaskData, writer=None, on_step=None,
                      params: tn.NetworkParams | None = None):
    """Unweighted sum of one mini-batch gradient per source, rate alpha."""
    if not data.sources:
        raise ValueError("source-only training needs at least one source")
    writer = writer or MetricsWriter()
    params = params or build_network(cfg, data)
    sources = [Source.from_dataset(ds) for ds in data.sources]
    streams = [dsets.batch_iter(s, cfg.batch_size, _stream_seed(cfg, i), s.targets) for i, s in enumerate(sources)]

    def step_fn(step, p, state):
        grads = source_grads(p, sources, [next(st) for st in streams], cfg.pseudo.kl_direction)
        tn.sgd_momentum_step(p, sum_gradients(grads), cfg.alpha, cfg.momentum, state)
        return {"losses": [g.loss for g in grads]}

    return _run_loop(cfg, data, "source-only", params, cfg.steps, step_fn, writer, on_step)


def _train_on_val(cfg, data, params, lr, n_steps, mode, writer, on_step=None):
    head = data.target.head_id
    src = Source("V", data.val.images, data.val.labels, head)
    stream = dsets.batch_iter(src, min(cfg.batch_size, len(src)), _stream_seed(cfg, 0), src.targets)

    def step_fn(step, p, state):
        x, y = next(stream)
        g = tn.backward(p, head, x, y)
        tn.sgd_momentum_step(p, g, lr, cfg.momentum, state)
        return {"losses": [g.loss]}

    return _run_loop(cfg, data, mode, params, n_steps, step_fn, writer, on_step)


def train_target_only(cfg: RunConfig, data: TaskData, writer=None, on_step=None):
    if len(data.val) == 0:
        raise ValueError("target-only training needs a non-empty V")
    return _train_on_val(cfg, data, build_network(cfg, data), cfg.alpha, cfg.steps, "target-only",
                         writer or MetricsWriter(), on_step)


def fine_tune(cfg: RunConfig, data: TaskData, checkpoint: tn.NetworkParams | str | Path | None,
              writer=None, on_step=None):
    """Continues a source-only checkpoint on V at the reduced fine-tuning rate."""
    if checkpoint is None:
        raise ValueError("fine-tuning needs a checkpoint")
    if isinstance(checkpoint, (str, Path)):
        checkpoint = tn.load_checkpoint(checkpoint)
    return _train_on_val(cfg, data, checkpoint.copy(), cfg.finetune_lr, cfg.finetune_steps,
                         "fine-tune", writer or MetricsWriter(), on_step)


# ----------------------------------------------------------------------------
# GradMix


def train_gradmix(cfg: RunConfig, data: TaskData, writer=None, on_step=None,
                  extra_sources: Sequence[Source] = (), val: dsets.LabeledDataset | None = None,
                  fixed_eta: float | None = None, mode: str | None = None):
    """Per step: one batch per source, the V gradient, then the mixed update.

    ``mode="gradmix-no-adalr"`` (or ``fixed_eta``) pins eta instead of using
    the adaptive rate.  ``extra_sources`` (e.g. pseudo-labeled target data)
    get their own weight columns.
    """
    mode = mode or (cfg.mode if cfg.mode.startswith("gradmix") else "gradmix")
    if mode == "gradmix-no-adalr" and fixed_eta is None:
        fixed_eta = 1.0
    val = data.val if val is None else val
    if len(val) == 0:
        raise ValueError("GradMix needs a non-empty V")
    if not data.sources:
        raise ValueError("GradMix needs at least one source")
    writer = writer or MetricsWriter()
    params = build_network(cfg, data)
    head = data.target.head_id
    sources = [Source.from_dataset(ds) for ds in data.sources] + list(extra_sources)
    streams = [dsets.batch_iter(s, cfg.batch_size, _stream_seed(cfg, i), s.targets) for i, s in enumerate(sources)]
    val_bs = cfg.pseudo.val_batch_size
    val_stream = None
    if val_bs is not None and val_bs < len(val):
        val_stream = dsets.batch_iter(val, val_bs, _stream_seed(cfg, 999))
    lrp = mixing.AdaptiveLrParams(cfg.beta, cfg.gamma, cfg.alpha)
    solver = cfg.solver

    def step_fn(step, p, state):
        grads = source_grads(p, sources, [next(st) for st in streams], cfg.pseudo.kl_direction)
        vx, vy = next(val_stream) if val_stream is not None else (val.images, val.labels)
        vgrad = tn.backward(p, head, vx, vy)
        scfg = mixing.SolverConfig(solver.max_iter, solver.restarts, solver.tol,
                                   seed=cfg.seed * 1_000_003 + step, mode=solver.mode,
                                   method=solver.method)
        _, diag = mixing.gradmix_step(p, grads, vgrad, lrp, state, cfg.momentum,
                                      fixed_eta=fixed_eta, solver=scfg)
        rec = diag.to_record()
        rec["losses"] = [g.loss for g in grads]
        rec["val_loss"] = vgrad.loss
        return rec

    record, chosen = _run_loop(cfg, data, mode, params, cfg.steps, step_fn, writer, on_step)
    record.extra["sources"] = [s.name for s in sources]
    record.extra["val_size"] = len(val)
    return record, chosen


def train(cfg: RunConfig, data: TaskData, writer=None, checkpoint=None):
    """Dispatches on ``cfg.mode``; returns ``(RunRecord, params)``."""
    mode = cfg.mode
    if mode == "target-only":
        return train_target_only(cfg, data, writer)
    if mode == "source-only":
        return train_source_only(cfg, data, writer)
    if mode == "fine-tune":
        if checkpoint is None:
            _, checkpoint = train_source_only(cfg, data)
        return fine_tune(cfg, data, checkpoint, writer)
    if mode in ("gradmix", "gradmix-no-adalr"):
        return train_gradmix(cfg, data, writer, mode=mode)
    if mode in ("gradmix-pseudo-hard", "gradmix-pseudo-soft"):
        res = pseudo_pipeline(cfg, data, writer=writer)
        return res.record, res.params
    raise ValueError(f"unknown mode {mode!r}")


# ----------------------------------------------------------------------------
# grid search and pseudo labels


@dataclass
class GridCell:
    beta: float
    gamma: float
    record: RunRecord
    params: tn.NetworkParams

    @property
    def key(self):
        return (-self.record.best_hv_acc, self.beta, self.gamma)


def _grid_worker(args):
    cfg, data, beta, gamma = args
    record, params = train_gradmix(cfg.replace(beta=beta, gamma=gamma, mode="gradmix"), data)
    return GridCell(beta, gamma, record, params)


def grid_search(cfg: RunConfig, data: TaskData, betas, gammas, jobs: int = 1) -> list[GridCell]:
    """One GradMix run per (beta, gamma), ranked by hyper-validation accuracy.

    Ties are broken by (beta, gamma) in ascending order.
    """
    betas, gammas = list(betas), list(gammas)
    if not betas or not gammas:
        raise ValueError("grid search needs non-empty beta and gamma lists")
    jobs_args = [(cfg, data, float(b), float(g)) for b in betas for g in gammas]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            cells = list(pool.map(_grid_worker, jobs_args))
    else:
        cells = [_grid_worker(a) for a in jobs_args]
    return sorted(cells, key=lambda c: c.key)


def ensemble_from_grid(cells: Sequence[GridCell], R: int, head: str) -> pl.EnsembleSpec:
    top = sorted(cells, key=lambda c: c.key)[:R]
    return pl.EnsembleSpec([c.params for c in top], [c.record.best_hv_acc for c in top], head,
                           [f"beta={c.beta:g},gamma={c.gamma:g}" for c in top])


@dataclass
class PipelineResult:
    record: RunRecord
    params: tn.NetworkParams
    pseudo: pl.PseudoLabeledSet
    hard: pl.PseudoLabeledSet
    ensemble: pl.EnsembleSpec
    stats: dict


def pseudo_pipeline(cfg: RunConfig, data: TaskData, cells: Sequence[GridCell] | None = None,
                    mode: str | None = None, R: int | None = None, jobs: int = 1,
                    writer=None) -> PipelineResult:
    """Grid models label U, V is enlarged, then GradMix retrains from scratch with S_u."""
    mode = mode or ("soft" if cfg.mode == "gradmix-pseudo-soft" else "hard")
    R = R or cfg.pseudo.R
    if cells is None:
        cells = grid_search(cfg, data, cfg.pseudo.betas, cfg.pseudo.gammas, jobs)
    head = data.target.head_id
    ens = ensemble_from_grid(cells, R, head)
    U = data.unlabeled
    probs = pl.ensemble_predict(ens.members, U.images, head)
    hard = pl.build_pseudo_set(U, ens, "hard", cfg.pseudo.threshold, probs)
    pseudo = hard if mode == "hard" else pl.build_pseudo_set(U, ens, "soft", cfg.pseudo.threshold, probs)
    val2 = pl.enlarge_validation(data.val, hard, U, cfg.pseudo.per_class)
    extra = []
    if len(pseudo):
        extra.append(Source("pseudo-" + mode, pseudo.images, pseudo.labels, head, pseudo.loss_kind))
    else:
        log.warning("no pseudo-labels accepted; stage 2 trains without an S_u column")
    record, params = train_gradmix(cfg.replace(mode="gradmix"), data, writer, extra_sources=extra,
                                   val=val2, mode=f"gradmix-pseudo-{mode}")
    stats = pseudo_stats(hard, probs, U)
    stats.update({
        "mode": mode,
        "R": ens.R,
        "members": ens.labels,
        "member_hv_acc": ens.scores,
        "member_test_acc": [evaluate(m, data.test, head) for m in ens.members],
        "n_pseudo": len(pseudo),
        "val_size": len(val2),
        "ensemble_digest": ens.digest(),
    })
    record.extra["pseudo"] = stats
    return PipelineResult(record, params, pseudo, hard, ens, stats)


def pseudo_stats(hard: pl.PseudoLabeledSet, probs: np.ndarray, U: dsets.UnlabeledDataset) -> dict:
    """Precision of the accepted hard labels against the sealed ground truth of U."""
    truth = dsets.unseal_labels(U)
    idx = hard.indices
    member_acc = [float(np.mean(probs[r, idx].argmax(axis=1) == truth[idx])) if len(idx) else float("nan")
                  for r in range(probs.shape[0])]
    return {
        "n_accepted": int(len(idx)),
        "n_unlabeled": int(len(U)),
        "precision": pl.label_precision(hard, truth),
        "member_acc_on_accepted": member_acc,
    }


def ensemble_sweep(cfg: RunConfig, data: TaskData, cells: Sequence[GridCell], Rs=range(1, 6),
                   mode: str = "hard") -> list[dict]:
    """Test accuracy of the pseudo-label pipeline as the ensemble grows."""
    out = []
    for R in Rs:
        R = min(R, len(cells))
        res = pseudo_pipeline(cfg, data, cells, mode=mode, R=R)
        out.append({"R": R, "test_acc": res.record.test_acc, "n_accepted": res.stats["n_accepted"],
                    "precision": res.stats["precision"]})
    return out


# ----------------------------------------------------------------------------
# reporting


def hv_loss_auc(record: RunRecord, n_points: int = 20) -> float:
    """Trapezoid area under the hyper-validation loss curve over the first evaluations."""
    pts = record.evals[:n_points]
    if len(pts) < 2:
        return float("nan")
    x = np.array([e["step"] for e in pts], dtype=float)
    y = np.array([e["hv_loss"] for e in pts])
    return float(np.sum((x[1:] - x[:-1]) * (y[1:] + y[:-1]) / 2))


def summary_table(rows: Sequence[dict]) -> str:
    """Tab-separated ``method / k / mean / stderr / n`` table from ``{mode, k, acc}`` rows."""
    groups: dict[tuple, list[float]] = {}
    for r in rows:
        groups.setdefault((r["mode"], r["k"]), []).append(100.0 * r["acc"])
    lines = ["method\tk\tmean_acc\tstderr\tn_runs"]
    for (mode, k), accs in groups.items():
        a = np.array(accs)
        se = a.std(ddof=1) / math.sqrt(len(a)) if len(a) > 1 else float("nan")
        lines.append(f"{mode}\t{k}\t{a.mean():.2f}\t{se:.2f}\t{len(a)}")
    return "\n".join(lines) + "\n"


def record_to_json(record: RunRecord) -> str:
    return json.dumps(record.summary(), sort_keys=True, default=float)
