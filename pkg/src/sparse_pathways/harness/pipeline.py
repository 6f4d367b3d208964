"""Experiment stages: data, dense training, pruning, pathways, evaluation, analysis.

Every stage reads and writes artifacts under one run directory, so stages can
be driven one at a time from the CLI or all at once by :func:`run_matrix`.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

from .. import datagen
from ..analysis import MaskStats, stats_report, write_stats_csv
from ..blocks import Mask
from ..model import (Model, ModelConfig, evaluate, load_checkpoint, load_masks, restore, save_checkpoint,
                     save_masks)
from ..pathways import LanguageTask, language_probabilities, train_pathways
from ..pruning import PruneResult, finetune_fixed_mask, imp_run, lth_run, random_mask
from ..training import MetricsLog, Trainer
from .config import ExperimentConfig, stream, sub_seed

log = logging.getLogger(__name__)

RESULTS_HEADER = ["model", "variant", "sparsity", "lang", "loss", "accuracy"]
PRUNING_HEADER = ["theta0", "mode", "language", "interval", "iterations", "sparsity", "dense_valid_loss",
                  "post_prune_loss", "post_prune_increase"]
AGNOSTIC = "agnostic"


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage


class ArtifactError(RuntimeError):
    """A required input artifact is missing or inconsistent."""


# --------------------------------------------------------------------------- layout

class Workspace:
    def __init__(self, root):
        self.root = Path(root)

    @property
    def data(self) -> Path:
        return self.root / "data"

    @property
    def specs(self) -> Path:
        return self.data / "specs.json"

    def corpus(self, lang: str) -> Path:
        return self.data / f"{lang}.corpus"

    def dense(self, tag: str = "lasso") -> Path:
        return self.root / "dense" / f"theta0-{tag}.ckpt"

    def small_dense(self, lang: str) -> Path:
        return self.root / "small_dense" / f"{lang}.ckpt"

    def prune_dir(self, tag: str) -> Path:
        return self.root / "prune" / tag

    def mask(self, tag: str, mode: str, lang: str) -> Path:
        return self.prune_dir(tag) / f"{mode}-{lang}.mask"

    def pruned_model(self, tag: str, mode: str, lang: str) -> Path:
        return self.prune_dir(tag) / f"{mode}-{lang}.ckpt"

    def pathways(self, tag: str, source: str) -> Path:
        return self.root / "pathways" / tag / f"{source}.ckpt"

    def pathways_masks(self, tag: str, source: str) -> Path:
        return self.root / "pathways" / tag / f"{source}.masks"

    def metrics(self, name: str) -> Path:
        return self.root / "metrics" / f"{name}.csv"

    @property
    def results(self) -> Path:
        return self.root / "results.csv"

    @property
    def stats(self) -> Path:
        return self.root / "mask_stats.csv"

    @property
    def pruning_summary(self) -> Path:
        return self.root / "pruning.csv"

    @property
    def figures(self) -> Path:
        return self.root / "figures"


def _write_meta(path: Path, meta: dict) -> None:
    Path(str(path) + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_meta(path) -> dict:
    p = Path(str(path) + ".json")
    if not p.exists():
        raise ArtifactError(f"missing metadata sidecar {p}")
    return json.loads(p.read_text(encoding="utf-8"))


def save_model(path: Path, model: Model, **meta) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(path, model)
    _write_meta(path, {"model_config": model.config.to_dict(), **meta})


def load_model(path) -> tuple[Model, dict]:
    if not Path(path).exists():
        raise ArtifactError(f"missing checkpoint {path}")
    meta = read_meta(path)
    return restore(load_checkpoint(path), ModelConfig(**meta["model_config"])), meta


# --------------------------------------------------------------------------- data

def gen_data(cfg: ExperimentConfig, force: bool = False) -> datagen.Suite:
    ws = Workspace(cfg.out)
    if ws.specs.exists() and not force:
        raise FileExistsError(f"{ws.data} already holds a corpus; pass --force to overwrite")
    suite = datagen.make_default_suite(cfg.seed)
    ws.data.mkdir(parents=True, exist_ok=True)
    datagen.write_specs(ws.specs, suite.specs)
    for lang, corpus in suite.corpora.items():
        datagen.write_corpus(ws.corpus(lang), corpus)
    return suite


@dataclass
class Dataset:
    """Corpora plus cached evaluation examples and seeded batch streams."""

    cfg: ExperimentConfig
    corpora: dict[str, datagen.Corpus]
    _eval: dict = field(default_factory=dict)

    @property
    def languages(self) -> list[str]:
        return list(self.corpora)

    @property
    def vocab_size(self) -> int:
        return next(iter(self.corpora.values())).vocab_size

    @property
    def k(self) -> int:
        return self.cfg.model.context_window

    def n_train(self, lang: str) -> int:
        return len(self.corpora[lang].splits["train"]) - self.k

    def eval_examples(self, lang: str, split: str, k: int | None = None):
        k = k or self.k
        key = (lang, split, k)
        if key not in self._eval:
            if split not in self.corpora[lang].splits:
                raise ArtifactError(f"split {split!r} missing for {lang}")
            self._eval[key] = datagen.examples(self.corpora[lang].splits[split], k)
        return self._eval[key]

    def batches(self, stage: str, lang: str, k: int | None = None) -> Iterator:
        return datagen.batches(self.corpora[lang].splits["train"], k or self.k, self.cfg.train.batch_size,
                               stream(self.cfg.seed, "batches", stage, lang))

    def mixture(self, stage: str, k: int | None = None) -> Iterator:
        """Monolingual batches whose language is drawn by temperature sampling."""
        langs = self.languages
        iters = {l: self.batches(stage, l, k) for l in langs}
        probs = language_probabilities([self.n_train(l) for l in langs], self.cfg.sampling_alpha)
        rng = stream(self.cfg.seed, "sampling", stage)
        while True:
            yield next(iters[langs[int(rng.choice(len(langs), p=probs))]])


def load_data(cfg: ExperimentConfig) -> Dataset:
    ws = Workspace(cfg.out)
    if not ws.specs.exists():
        raise ArtifactError(f"no corpora under {ws.data}; run gen-data first")
    specs = datagen.read_specs(ws.specs)
    corpora = {s.language: datagen.read_corpus(ws.corpus(s.language), cfg.seed) for s in specs}
    return Dataset(cfg, corpora)


def _check_language(data: Dataset, lang: str) -> None:
    if lang != AGNOSTIC and lang not in data.corpora:
        raise ValueError(f"unknown language id {lang!r}; choose from {data.languages} or {AGNOSTIC!r}")


def _metrics(cfg: ExperimentConfig) -> MetricsLog:
    return MetricsLog(every=cfg.metrics_every)


def _write_metrics(ws: Workspace, name: str, metrics: MetricsLog) -> None:
    path = ws.metrics(name)
    path.parent.mkdir(parents=True, exist_ok=True)
    metrics.write(path)
    metrics.write_lambdas(path.with_name(f"{name}.lambda.csv"))


# --------------------------------------------------------------------------- training stages

def train_dense(cfg: ExperimentConfig, data: Dataset, lasso: bool = True) -> Model:
    """Multilingual dense theta_0 on temperature-sampled batches."""
    tag = "lasso" if lasso else "nolasso"
    model = Model.init(cfg.model.build(data.vocab_size), stream(cfg.seed, "init", "dense"))
    metrics = _metrics(cfg)
    trainer = Trainer(model, cfg.train.build(), cfg.lasso.build(lasso), metrics)
    trainer.run(data.mixture(f"dense-{tag}"), cfg.budgets.dense_steps, lasso_on=lasso,
                stage=f"dense-{tag}", language="mixed")
    ws = Workspace(cfg.out)
    save_model(ws.dense(tag), model, kind="dense", lasso=lasso, seed=cfg.seed)
    _write_metrics(ws, f"dense-{tag}", metrics)
    return model


def train_small_dense(cfg: ExperimentConfig, data: Dataset, lang: str) -> Model:
    """Monolingual small dense baseline trained from scratch."""
    _check_language(data, lang)
    mc = cfg.small_model.build(data.vocab_size)
    model = Model.init(mc, stream(cfg.seed, "init", "small", lang))
    metrics = _metrics(cfg)
    trainer = Trainer(model, cfg.train.build(), None, metrics)
    trainer.run(data.batches("small", lang, mc.context_window), cfg.budgets.small_dense_steps,
                stage="small-dense", language=lang)
    ws = Workspace(cfg.out)
    save_model(ws.small_dense(lang), model, kind="small-dense", language=lang, seed=cfg.seed)
    _write_metrics(ws, f"small-{lang}", metrics)
    return model


def _valid_loss(data: Dataset, model: Model, mask: Mask | None, lang: str) -> float:
    langs = data.languages if lang == AGNOSTIC else [lang]
    return float(np.mean([evaluate(model, *data.eval_examples(l, "valid"), mask=mask)[0] for l in langs]))


@dataclass
class PruneOutcome:
    result: PruneResult
    model: Model            # LSP-IMP / LAP theta_final, or the fixed-mask-trained LSP-LTH model
    mask: Mask
    dense_valid_loss: float
    interval: int

    @property
    def post_prune_increase(self) -> float:
        """Loss added by the prune steps themselves on the way to the target.

        Sum over iterations of (loss right after pruning - loss right before),
        so training progress between prunes does not count.
        """
        return float(sum(r.loss_after_prune - r.loss_before_prune for r in self.result.iterations))


def prune(cfg: ExperimentConfig, data: Dataset, theta0: Model, mode: str, lang: str,
          tag: str = "lasso") -> PruneOutcome:
    """Learn one mask (language-specific, or agnostic on the mixture) and its sparse model."""
    _check_language(data, lang)
    pc = cfg.prune.build(mode, lang, cfg.budgets.finetune_steps)
    stage = f"prune-{tag}-{mode}-{lang}"
    batches = data.mixture(stage) if lang == AGNOSTIC else data.batches(stage, lang)
    metrics = _metrics(cfg)
    evaluator = lambda m, mk: _valid_loss(data, m, mk, lang)  # noqa: E731
    run = imp_run if mode == "imp" else lth_run
    result = run(theta0, batches, pc, cfg.lasso.build(True), cfg.train.build(), evaluator,
                 metrics=metrics, language=lang)
    mask = result.mask
    mask.meta.update(language=lang, source=mode)
    if mode == "imp":
        final = result.model
    else:
        final = finetune_fixed_mask(result.model, mask, batches, pc.post_prune_finetune_steps,
                                    cfg.train.build(), metrics, lang, "finetune-lth")
    ws = Workspace(cfg.out)
    ws.prune_dir(tag).mkdir(parents=True, exist_ok=True)
    save_masks(ws.mask(tag, mode, lang), {lang: mask})
    _write_meta(ws.mask(tag, mode, lang), {
        "language": lang, "mode": mode, "p": pc.p, "T": pc.interval, "target_sparsity": pc.target_sparsity,
        "seed": cfg.seed, "iterations": len(result.iterations), "sparsity": mask.sparsity(), "theta0": tag,
    })
    kind = "lap" if lang == AGNOSTIC else f"lsp-{mode}"
    save_model(ws.pruned_model(tag, mode, lang), final, kind=kind, language=lang, mode=mode,
               mask=ws.mask(tag, mode, lang).name, seed=cfg.seed)
    _write_metrics(ws, stage, metrics)
    dense_loss = _valid_loss(data, theta0, None, lang)
    return PruneOutcome(result, final, mask, dense_loss, pc.interval)


def pathways_masks(cfg: ExperimentConfig, data: Dataset, source: str, tag: str = "lasso",
                   partitions=None) -> dict[str, Mask]:
    """The four language masks for a pathways run (random ones are drawn from the seed)."""
    ws = Workspace(cfg.out)
    masks = {}
    for lang in data.languages:
        if source == "random":
            masks[lang] = random_mask(partitions, cfg.prune.target_sparsity, sub_seed(cfg.seed, "mask", lang),
                                      language=lang)
        else:
            path = ws.mask(tag, source, lang)
            if not path.exists():
                raise ArtifactError(f"missing {source} mask for language {lang!r} ({path})")
            masks[lang] = load_masks(path)[lang]
            masks[lang].meta.update(language=lang, source=source)
    return masks


def train_pathways_stage(cfg: ExperimentConfig, data: Dataset, theta0: Model, source: str,
                         tag: str = "lasso", masks: Mapping[str, Mask] | None = None) -> tuple[Model, dict]:
    if masks is None:
        masks = pathways_masks(cfg, data, source, tag, theta0.partitions)
    missing = [l for l in data.languages if l not in masks]
    if missing:
        raise ArtifactError(f"missing masks for languages: {missing}")
    for lang, m in masks.items():
        try:
            theta0.check_mask(m)
        except ValueError as e:
            raise ArtifactError(f"mask for {lang} does not fit theta0: {e}") from e
    stage = f"pathways-{tag}-{source}"
    tasks = [LanguageTask(l, data.batches(stage, l), data.n_train(l), masks[l]) for l in data.languages]
    metrics = _metrics(cfg)
    theta_star = train_pathways(theta0, tasks, cfg.budgets.pathways_steps, cfg.sampling(stage),
                                cfg.train.build(), metrics)
    ws = Workspace(cfg.out)
    save_model(ws.pathways(tag, source), theta_star, kind="pathways", source=source, theta0=tag,
               seed=cfg.seed)
    save_masks(ws.pathways_masks(tag, source), dict(masks))
    _write_metrics(ws, stage, metrics)
    return theta_star, dict(masks)


# --------------------------------------------------------------------------- evaluation

@dataclass
class ResultRow:
    model: str
    variant: str
    sparsity: float
    per_language: dict[str, tuple[float, float]]

    @property
    def avg_loss(self) -> float:
        return float(np.mean([v[0] for v in self.per_language.values()]))

    @property
    def avg_accuracy(self) -> float:
        return float(np.mean([v[1] for v in self.per_language.values()]))

    def csv_rows(self) -> list[list[str]]:
        rows = [[self.model, self.variant, f"{self.sparsity:.6f}", lang, f"{l:.6f}", f"{a:.6f}"]
                for lang, (l, a) in self.per_language.items()]
        rows.append([self.model, self.variant, f"{self.sparsity:.6f}", "avg",
                     f"{self.avg_loss:.6f}", f"{self.avg_accuracy:.6f}"])
        return rows


def evaluate_models(data: Dataset, models: Mapping[str, Model], masks: Mapping[str, Mask | None],
                    name: str, variant: str, split: str = "test") -> ResultRow:
    """Per-language loss/accuracy where language ``l`` uses ``models[l]`` and ``masks[l]``."""
    per = {}
    sparsities = []
    for lang in data.languages:
        model = models[lang]
        mask = masks.get(lang)
        x, y = data.eval_examples(lang, split, model.config.context_window)
        per[lang] = evaluate(model, x, y, mask)
        sparsities.append(mask.sparsity() if mask is not None else 0.0)
    return ResultRow(name, variant, float(np.mean(sparsities)), per)


def evaluate_checkpoint(cfg: ExperimentConfig, data: Dataset, checkpoint, masks_path=None,
                        name: str | None = None, variant: str | None = None, split: str = "test") -> ResultRow:
    """Evaluate a stored model; pathways checkpoints must come with per-language masks."""
    model, meta = load_model(checkpoint)
    kind = meta.get("kind", "dense")
    masks: dict[str, Mask | None] = {l: None for l in data.languages}
    if masks_path is not None:
        bundle = load_masks(masks_path)
        if AGNOSTIC in bundle:
            masks = {l: bundle[AGNOSTIC] for l in data.languages}
        else:
            for l in data.languages:
                if l not in bundle:
                    raise ArtifactError(f"mask bundle has no mask for language {l!r}")
                masks[l] = bundle[l]
    elif kind in ("pathways", "lap", "lsp-imp", "lsp-lth"):
        raise ArtifactError(f"{kind} checkpoints are sparse sub-networks; pass the masks to evaluate them")
    if kind.startswith("lsp") or kind == "small-dense":
        lang = meta.get("language")
        langs = [lang]
    else:
        langs = data.languages
    sub = Dataset(data.cfg, {l: data.corpora[l] for l in langs}, data._eval)
    return evaluate_models(sub, {l: model for l in langs}, masks, name or Path(checkpoint).stem,
                           variant or kind, split)


def append_results(path, rows: Sequence[ResultRow]) -> None:
    path = Path(path)
    new = not path.exists()
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("a", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(RESULTS_HEADER)
        for r in rows:
            w.writerows(r.csv_rows())


def read_results(path) -> list[dict]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def analyze_masks(mask_sets: Mapping[str, Mapping[str, Mask]], csv_path, text_path=None) -> dict[str, MaskStats]:
    reports = {name: stats_report(masks) for name, masks in mask_sets.items()}
    write_stats_csv(csv_path, reports)
    if text_path is not None:
        Path(text_path).write_text("\n\n".join(s.render(f"[{n}]") for n, s in reports.items()) + "\n",
                                   encoding="utf-8")
    return reports


# --------------------------------------------------------------------------- the matrix

@dataclass
class MatrixResult:
    rows: list[ResultRow]
    stats: dict[str, MaskStats]
    pruning: list[list[str]]
    seconds: float

    def row(self, model: str) -> ResultRow:
        for r in self.rows:
            if r.model == model:
                return r
        raise KeyError(model)


class _Stage:
    def __init__(self, name: str):
        self.name = name

    def __enter__(self):
        self.t = time.perf_counter()
        log.info("stage %s ...", self.name)

    def __exit__(self, exc_type, exc, tb):
        if exc is not None and not isinstance(exc, StageError):
            raise StageError(self.name, exc) from exc
        log.info("stage %s done in %.1fs", self.name, time.perf_counter() - self.t)
        return False


def run_matrix(cfg: ExperimentConfig) -> MatrixResult:
    """Dense (+/- lasso), small dense, LAP, LSP-IMP/LTH, pathways x3, evaluation and mask stats."""
    t0 = time.perf_counter()
    ws = Workspace(cfg.out)
    ws.root.mkdir(parents=True, exist_ok=True)
    ws.metrics("x").parent.mkdir(parents=True, exist_ok=True)
    for p in (ws.results, ws.stats, ws.pruning_summary):
        if p.exists():
            p.unlink()
    cfg.dump(ws.root / "config.json")
    rows: list[ResultRow] = []
    pruning_rows: list[list[str]] = []

    def emit(row: ResultRow) -> None:
        rows.append(row)
        append_results(ws.results, [row])

    with _Stage("gen-data"):
        gen_data(cfg, force=True)
        data = load_data(cfg)
    langs = data.languages
    tags = ["lasso", "nolasso"] if cfg.lasso_ablation else ["lasso"]
    theta0: dict[str, Model] = {}
    for tag in tags:
        with _Stage(f"train-dense-{tag}"):
            theta0[tag] = train_dense(cfg, data, lasso=(tag == "lasso"))
            suffix = "" if tag == "lasso" else "-nolasso"
            emit(evaluate_models(data, {l: theta0[tag] for l in langs}, {}, f"dense{suffix}", "dense"))
    with _Stage("train-small-dense"):
        small = {l: train_small_dense(cfg, data, l) for l in langs}
        emit(evaluate_models(data, small, {}, "small-dense", "small-dense"))
    with _Stage("prune-lap"):
        lap = prune(cfg, data, theta0["lasso"], "imp", AGNOSTIC, "lasso")
        pruning_rows.append(_pruning_row("lasso", "imp", AGNOSTIC, lap))
        emit(evaluate_models(data, {l: lap.model for l in langs}, {l: lap.mask for l in langs}, "lap", "LAP"))
    masks: dict[tuple[str, str], dict[str, Mask]] = {}
    for tag in tags:
        suffix = "" if tag == "lasso" else "-nolasso"
        for mode in ("imp", "lth"):
            with _Stage(f"prune-{tag}-{mode}"):
                outs = {}
                for lang in langs:
                    outs[lang] = prune(cfg, data, theta0[tag], mode, lang, tag)
                    pruning_rows.append(_pruning_row(tag, mode, lang, outs[lang]))
                masks[(tag, mode)] = {l: outs[l].mask for l in langs}
                emit(evaluate_models(data, {l: outs[l].model for l in langs}, masks[(tag, mode)],
                                     f"lsp-{mode}{suffix}", f"LSP-{mode.upper()}"))
    for tag in tags:
        suffix = "" if tag == "lasso" else "-nolasso"
        sources = ("random", "imp", "lth") if tag == "lasso" else ("imp", "lth")
        for source in sources:
            with _Stage(f"train-pathways-{tag}-{source}"):
                given = None if source == "random" else masks[(tag, source)]
                theta_star, used = train_pathways_stage(cfg, data, theta0[tag], source, tag, given)
                emit(evaluate_models(data, {l: theta_star for l in langs}, used,
                                     f"pathways-{source}{suffix}", f"pathways-{source}"))
    with _Stage("analyze-masks"):
        stats = analyze_masks({"imp": masks[("lasso", "imp")], "lth": masks[("lasso", "lth")]},
                              ws.stats, ws.root / "mask_stats.txt")
        if cfg.lasso_ablation:
            analyze_masks({"imp": masks[("nolasso", "imp")], "lth": masks[("nolasso", "lth")]},
                          ws.root / "mask_stats_nolasso.csv", ws.root / "mask_stats_nolasso.txt")
        with ws.pruning_summary.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(PRUNING_HEADER)
            w.writerows(pruning_rows)
    if cfg.figures:
        with _Stage("figures"):
            from .reporting import render_all
            render_all(ws, rows, stats)
    return MatrixResult(rows, stats, pruning_rows, time.perf_counter() - t0)


def _pruning_row(tag: str, mode: str, lang: str, out: PruneOutcome) -> list[str]:
    r = out.result
    return [tag, mode, lang, str(out.interval), str(len(r.iterations)), f"{out.mask.sparsity():.6f}",
            f"{out.dense_valid_loss:.6f}", f"{r.post_prune_loss:.6f}", f"{out.post_prune_increase:.6f}"]
