"""Command-line front door.

One process per command, JSON/CSV outputs only (plotting stays external).
Every command is reproducible: identical flags and seed produce identical
output files, timing fields in the run record aside. Module errors exit
nonzero and print their stable name on stderr. The LFA_SEED environment
variable overrides the default seed of every command.
"""

from __future__ import annotations

import json
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import click
import numpy as np

from . import data as data_mod
from .assignment import SinkhornConfig, harden, sinkhorn, ulfa
from .core import (FeatureMatrix, LabeledFeatures, LinearMap, identity_map,
                   make_rng)
from .data import (ArchiveManifest, SynthSpec, archive_paths, beta_sweep,
                   read_archive, read_npy, read_prototypes, synth_split,
                   write_archive, write_npy, write_sweep_csv)
from .errors import (ArchiveNotFound, DimensionMismatch, LfaError,
                     MissingLabels)
from .evaluate import (build_report, classify, cross_interference, gt_rank,
                       modality_gap, pca_project, top1_accuracy,
                       write_pca_csv, write_rank_histogram_csv)
from .pipeline import fit_supervised
from .procrustes import least_squares_map
from .refine import RefineConfig, average_maps, write_trace_csv


@dataclass
class RunRecord:
    """Reproducibility record written next to every fitted mapping."""

    command: str
    config: dict
    seed: int
    timings: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2) + "\n",
                              encoding="utf-8")


def _default_seed() -> int:
    return int(os.environ.get("LFA_SEED", "0"))


def _load_presets() -> dict:
    with resources.files("lfa").joinpath("presets.json").open("r") as fh:
        return json.load(fh)


def _resolve_steps(steps: int | None, preset: str | None) -> int:
    if steps is not None:
        return steps
    if preset is not None:
        presets = _load_presets()
        if preset not in presets:
            raise ArchiveNotFound(f"unknown preset {preset!r}; "
                                  f"known: {', '.join(sorted(presets))}")
        return int(presets[preset]["steps"])
    return 100


def _ensure_parent(path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _mapping_paths(out: str):
    out_path = _ensure_parent(out)
    if out_path.suffix != ".npy":
        out_path = out_path.with_suffix(".npy")
    stem = out_path.with_suffix("")
    return (out_path, Path(str(stem) + "_tt.npy"),
            Path(str(stem) + ".trace.csv"), Path(str(stem) + ".run.json"))


def _require_labels(loaded, what: str) -> LabeledFeatures:
    if not isinstance(loaded, LabeledFeatures):
        raise MissingLabels(f"{what} must carry labels")
    return loaded


def _maybe_aggregate(loaded, mode: str):
    """Collapse crop/frame groups before fitting when requested."""
    if mode == "expand":
        return loaded
    if isinstance(loaded, LabeledFeatures):
        feats = data_mod.group_aggregate(loaded.features, mode)
        labels = data_mod.aggregate_labels(loaded.labels, loaded.features.group_ids)
        return LabeledFeatures(feats, labels)
    return data_mod.group_aggregate(loaded, mode)


def _fail(err: LfaError):
    click.echo(f"error: {err.name}: {err}", err=True)
    sys.exit(1)


class LfaGroup(click.Group):
    """Surface structured errors uniformly across subcommands."""

    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except LfaError as err:
            _fail(err)


@click.group(cls=LfaGroup)
def main():
    """Linear feature alignment on pre-computed embeddings."""


refine_options = [
    click.option("--loss", default="arerank",
                 type=click.Choice(["arerank", "contrastive", "triplet", "csls"])),
    click.option("--k", default=3, show_default=True, help="Neighbor budget."),
    click.option("--s", default=4.0, show_default=True, help="Margin divisor."),
    click.option("--steps", default=None, type=int,
                 help="Refinement steps (default 100, or the preset value)."),
    click.option("--lr", default=5e-4, show_default=True),
    click.option("--wd", default=5e-4, show_default=True, help="Weight decay."),
    click.option("--noise", default=3.5e-2, show_default=True,
                 help="Gaussian noise std on embeddings."),
    click.option("--dropout", default=2.5e-2, show_default=True),
    click.option("--batch", default=None, type=int, help="Mini-batch size."),
    click.option("--seed", default=None, type=int,
                 help="Seed (default LFA_SEED env or 0)."),
]


def add_options(options):
    def wrap(fn):
        for opt in reversed(options):
            fn = opt(fn)
        return fn
    return wrap


def _refine_config(loss, k, s, steps, lr, wd, noise, dropout, batch, seed,
                   ema=False, preset=None) -> RefineConfig:
    return RefineConfig(
        loss=loss, k=k, s=s, steps=_resolve_steps(steps, preset), lr=lr,
        weight_decay=wd, noise_std=noise, dropout_p=dropout, ema=ema,
        seed=seed if seed is not None else _default_seed(), batch=batch)


@main.command()
@click.argument("train_archive")
@click.argument("prototype_archive")
@click.option("--beta", default="0.9", show_default=True,
              help="Identity-pull weight in [0,1], or 'auto' for cross-validation.")
@click.option("--ema/--no-ema", default=False,
              help="Also accumulate the EMA dual mapping for unseen classes.")
@click.option("--preset", default=None, help="Per-dataset step-count preset.")
@click.option("--aggregate", default="expand",
              type=click.Choice(["expand", "max", "mean"]),
              help="Crop/frame group handling before fitting.")
@click.option("--tau", default=0.01, show_default=True,
              help="Softmax temperature for the reported train accuracy.")
@click.option("--out", default="mapping.npy", show_default=True)
@add_options(refine_options)
def fit(train_archive, prototype_archive, beta, ema, preset, aggregate, tau,
        out, **kw):
    """Supervised alignment: orthogonal init, beta pull, refinement."""
    cfg = _refine_config(**kw, ema=ema, preset=preset)
    t0 = time.perf_counter()
    loaded, _ = read_archive(train_archive)
    y = read_prototypes(prototype_archive)
    train = _require_labels(_maybe_aggregate(loaded, aggregate), "train archive")
    t_load = time.perf_counter() - t0

    if beta == "auto":
        t0 = time.perf_counter()
        beta_value, _ = beta_sweep(train, y, cfg)
        t_sweep = time.perf_counter() - t0
    else:
        beta_value = float(beta)
        t_sweep = 0.0

    t0 = time.perf_counter()
    from .procrustes import beta_procrustes, orthogonal_procrustes
    w_op = orthogonal_procrustes(train.features, y.data[train.labels])
    w_beta = beta_procrustes(w_op, beta_value)
    t_init = time.perf_counter() - t0

    t0 = time.perf_counter()
    from .refine import refine as _refine
    w, w_tt, trace = _refine(w_beta, train, y, cfg)
    t_refine = time.perf_counter() - t0

    w_path, tt_path, trace_path, record_path = _mapping_paths(out)
    write_npy(w_path, w.data, descr="<f8")
    if w_tt is not None:
        write_npy(tt_path, w_tt.data, descr="<f8")
    write_trace_csv(trace, trace_path)

    _, preds = classify(train.features, w, y, tau)
    record = RunRecord(
        command=" ".join(sys.argv),
        config={"beta": beta_value, "tau": tau, "aggregate": aggregate,
                **asdict(cfg)},
        seed=cfg.seed,
        timings={"load_s": t_load, "beta_sweep_s": t_sweep, "init_s": t_init,
                 "refine_s": t_refine},
        metrics={"train_top1": top1_accuracy(preds, train.labels),
                 "final_loss": trace[-1].loss if trace else None},
    )
    record.write(record_path)
    click.echo(json.dumps({"mapping": str(w_path), "beta": beta_value,
                           "train_top1": record.metrics["train_top1"]}))


@main.command("fit-unsup")
@click.argument("archive")
@click.argument("prototype_archive")
@click.option("--n", default=1, show_default=True, help="Alternation rounds.")
@click.option("--epsilon", default=0.05, show_default=True,
              help="Entropic regularization.")
@click.option("--iters", default=1000, show_default=True, help="Sinkhorn sweeps.")
@click.option("--beta", default=0.9, show_default=True)
@click.option("--out", default="mapping.npy", show_default=True)
@add_options(refine_options)
def fit_unsup(archive, prototype_archive, n, epsilon, iters, beta, out, **kw):
    """Unsupervised alignment; labels in the archive are used for scoring only."""
    cfg = _refine_config(**kw)
    sk_cfg = SinkhornConfig(epsilon=epsilon, iters=iters)
    t0 = time.perf_counter()
    loaded, _ = read_archive(archive)
    y = read_prototypes(prototype_archive)
    features = loaded.features if isinstance(loaded, LabeledFeatures) else loaded
    t_load = time.perf_counter() - t0

    t0 = time.perf_counter()
    w = ulfa(features, y, n, beta, cfg, sk_cfg)
    t_fit = time.perf_counter() - t0

    _, assigned = harden(sinkhorn(features, w, y, sk_cfg))
    counts = np.bincount(assigned, minlength=y.n_classes).astype(np.float64)
    freq = counts / counts.sum()
    nonzero = freq[freq > 0]
    entropy = float(-(nonzero * np.log(nonzero)).sum())

    w_path, _, _, record_path = _mapping_paths(out)
    write_npy(w_path, w.data, descr="<f8")
    metrics = {"assignment_entropy": entropy}
    if isinstance(loaded, LabeledFeatures):
        metrics["assignment_accuracy"] = top1_accuracy(assigned, loaded.labels)
    record = RunRecord(
        command=" ".join(sys.argv),
        config={"n": n, "beta": beta, "epsilon": epsilon, "iters": iters,
                **asdict(cfg)},
        seed=cfg.seed,
        timings={"load_s": t_load, "fit_s": t_fit},
        metrics=metrics,
    )
    record.write(record_path)
    click.echo(json.dumps({"mapping": str(w_path), **metrics}))


@main.command("eval")
@click.argument("test_archive")
@click.argument("prototype_archive")
@click.argument("mapping")
@click.option("--tau", default=0.01, show_default=True)
@click.option("--which", default="w", type=click.Choice(["w", "w_tt", "average"]),
              help="Evaluate the task map, the EMA map, or their average.")
@click.option("--out", default=None, help="Report JSON path (default stdout).")
def eval_cmd(test_archive, prototype_archive, mapping, tau, which, out):
    """Score a fitted mapping on a labeled archive."""
    loaded, _ = read_archive(test_archive)
    test = _require_labels(loaded, "test archive")
    y = read_prototypes(prototype_archive)
    w = LinearMap(read_npy(mapping), kind="refined")
    if which in ("w_tt", "average"):
        tt_path = Path(str(Path(mapping).with_suffix("")) + "_tt.npy")
        w_tt = LinearMap(read_npy(tt_path), kind="ema")
        w = w_tt if which == "w_tt" else average_maps(w, w_tt)
    if w.dim != test.features.dim or y.dim != test.features.dim:
        raise DimensionMismatch(
            f"mapping d={w.dim}, features d={test.features.dim}, prototypes d={y.dim}")
    report = build_report(test.features, test.labels, w, y, tau)
    doc = report.as_dict()
    doc["cross_interference"] = cross_interference(test.features, w, y, test.labels)
    text = json.dumps(doc, indent=2)
    if out:
        _ensure_parent(out).write_text(text + "\n", encoding="utf-8")
    click.echo(text)


@main.command("sweep-beta")
@click.argument("train_archive")
@click.argument("prototype_archive")
@click.option("--folds", default=3, show_default=True)
@click.option("--val-frac", default=0.2, show_default=True)
@click.option("--train-frac", default=0.7, show_default=True)
@click.option("--out", default="sweep.csv", show_default=True)
@add_options(refine_options)
def sweep_beta(train_archive, prototype_archive, folds, val_frac, train_frac,
               out, **kw):
    """Cross-validate beta over the 0.00..1.00 grid (step 0.05)."""
    cfg = _refine_config(**kw)
    loaded, _ = read_archive(train_archive)
    train = _require_labels(loaded, "train archive")
    y = read_prototypes(prototype_archive)
    best, table = beta_sweep(train, y, cfg, folds=folds, val_frac=val_frac,
                             train_frac=train_frac)
    write_sweep_csv(table, _ensure_parent(out))
    click.echo(json.dumps({"best_beta": best, "table": str(out)}))


@main.command()
@click.option("--classes", "-C", default=20, show_default=True)
@click.option("--dim", "-d", default=32, show_default=True)
@click.option("--shots", default=16, show_default=True)
@click.option("--test-shots", default=8, show_default=True)
@click.option("--noise", default=0.05, show_default=True)
@click.option("--planted", default="random_orthogonal",
              type=click.Choice(["identity", "random_orthogonal", "random_invertible"]))
@click.option("--seed", default=None, type=int)
@click.option("--out-dir", default="synth", show_default=True)
def synth(classes, dim, shots, test_shots, noise, planted, seed, out_dir):
    """Generate a synthetic benchmark: train/test archives plus prototypes."""
    spec = SynthSpec(C=classes, d=dim, shots_per_class=shots, noise_std=noise,
                     planted_map=planted,
                     seed=seed if seed is not None else _default_seed())
    train, test, y, planted_map = synth_split(spec, test_shots)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = list(y.class_names)
    write_archive(train.features,
                  ArchiveManifest(labels=train.labels.tolist(), class_names=names,
                                  split="train", source_model="synthetic"),
                  out / "train")
    write_archive(test.features,
                  ArchiveManifest(labels=test.labels.tolist(), class_names=names,
                                  split="test", source_model="synthetic"),
                  out / "test")
    write_archive(y.data,
                  ArchiveManifest(class_names=names, split="train",
                                  source_model="synthetic"),
                  out / "prototypes")
    write_npy(out / "planted_w.npy", planted_map.data, descr="<f8")
    click.echo(json.dumps({"out_dir": str(out), "C": classes, "d": dim,
                           "train_rows": train.n, "test_rows": test.n}))


@main.command()
@click.argument("archive")
@click.argument("prototype_archive")
@click.option("--mapping", default=None, help="Mapping NPY (default identity).")
@click.option("--out", default="hubness.csv", show_default=True)
def hubness(archive, prototype_archive, mapping, out):
    """Export the ground-truth-rank histogram of a labeled archive."""
    loaded, _ = read_archive(archive)
    labeled = _require_labels(loaded, "archive")
    y = read_prototypes(prototype_archive)
    w = (LinearMap(read_npy(mapping), kind="refined") if mapping
         else identity_map(labeled.features.dim))
    ranks = gt_rank(labeled.features, w, y, labeled.labels)
    write_rank_histogram_csv(ranks, y.n_classes, _ensure_parent(out))
    click.echo(json.dumps({"mean_gt_rank": float(ranks.mean()),
                           "histogram": str(out)}))


@main.command()
@click.argument("archive")
@click.argument("prototype_archive")
@click.option("--mapping", default=None, help="Mapping NPY (default identity).")
@click.option("--out-prefix", default="gap", show_default=True)
def gap(archive, prototype_archive, mapping, out_prefix):
    """Measure the modality gap and export 2-D PCA coordinates."""
    loaded, _ = read_archive(archive)
    labeled = _require_labels(loaded, "archive")
    y = read_prototypes(prototype_archive)
    w = (LinearMap(read_npy(mapping), kind="refined") if mapping
         else identity_map(labeled.features.dim))
    mapped = labeled.features.data @ w.data
    matched = y.data[labeled.labels]
    gap_value = modality_gap(mapped, matched)
    stacked = np.vstack([mapped, y.data])
    coords = pca_project(stacked, 2)
    roles = ["image"] * mapped.shape[0] + ["prototype"] * y.n_classes
    pca_path = _ensure_parent(f"{out_prefix}_pca.csv")
    write_pca_csv(coords, roles, pca_path)
    doc = {"modality_gap": gap_value, "pca": str(pca_path)}
    Path(f"{out_prefix}.json").write_text(json.dumps(doc, indent=2) + "\n",
                                          encoding="utf-8")
    click.echo(json.dumps(doc))


@main.command("approx-prompts")
@click.argument("source_prototypes")
@click.argument("target_prototypes")
@click.option("--out", default="prompt_map.npy", show_default=True)
def approx_prompts(source_prototypes, target_prototypes, out):
    """Least-squares map from plain class-name prototypes onto tuned ones."""
    src = read_prototypes(source_prototypes)
    dst = read_prototypes(target_prototypes)
    w = least_squares_map(src.data, dst.data)
    write_npy(_ensure_parent(out), w.data, descr="<f8")
    residual = float(np.linalg.norm(src.data @ w.data - dst.data))
    click.echo(json.dumps({"mapping": str(out), "residual_fro": residual}))


if __name__ == "__main__":
    main()
