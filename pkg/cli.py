"""
Command-line entry point: hybridroi <synth|split|train|eval|ablate|bench-scan>
"""
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional

import click
import pandas as pd

from checkpoint import load_checkpoint
from data import (
    DEFAULT_FRACTIONS, RoiDataset, SplitAssignment, check_split, class_distribution, load_split,
    manifest_records, match_manifest, persist_split, read_manifest, scan_images, stratified_split,
    synth_dataset, write_synth_dataset,
)
from errors import DigestMismatchError, HybridRoiError, StorageError
from logger import attach_run_log, detach_run_log, logger, set_level
from metrics import Evaluation, evaluate, write_report
from models import ExperimentConfig, ManifestRecord, MetricsReport, ScanConfig
from ssm import complexity_probe
from tensor import parameter
from trainer import Trainer, predictor

VARIANTS = ("backbone_only", "vim_only", "hybrid")


class HybridRoiGroup(click.Group):
    """Maps library errors onto the documented exit codes"""

    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except HybridRoiError as exc:
            logger.error(f"{type(exc).__name__}: {exc}")
            ctx.exit(exc.exit_code)


def _parse_floats(text: str) -> List[float]:
    try:
        return [float(part) for part in text.split(",") if part.strip()]
    except ValueError as exc:
        raise click.BadParameter(f"expected comma-separated numbers, got {text!r}") from exc


def _ensure_dir(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise StorageError(f"cannot create {path}: {exc}") from exc
    return path


# ============================================================================
# EXPERIMENT PREPARATION
# ============================================================================

@dataclass
class Prepared:
    config: ExperimentConfig
    records: List[ManifestRecord]
    split: SplitAssignment
    image_root: Path


def load_config(path: str, seed: Optional[int]) -> ExperimentConfig:
    config = ExperimentConfig.load(path)
    if seed is not None:
        config = ExperimentConfig.model_validate({**config.model_dump(), "seed": seed})
    return config


def _with_data(config: ExperimentConfig, **updates) -> ExperimentConfig:
    data = config.data.model_copy(update=updates)
    return config.model_copy(update={"data": data})


def prepare(config: ExperimentConfig, out: Path) -> Prepared:
    """
    Resolve data for an experiment: generate the synthetic set when no
    manifest is configured, match the manifest against the image root and
    build (or load) the patient-level split. The resolved config points at
    everything that was generated.
    """
    seed = config.train.seed
    if not config.data.manifest:
        synth_cfg = config.data.synth
        synth_dir = out / "synth"
        manifest = write_synth_dataset(
            synth_dataset(synth_cfg.n, synth_cfg.image_size, seed, synth_cfg.difficulty), synth_dir)
        config = _with_data(config, manifest=str(manifest), manifest_format="manifest", image_root=str(synth_dir))

    image_root = Path(config.data.image_root or Path(config.data.manifest).parent)
    scan = scan_images(image_root)
    frame = read_manifest(config.data.manifest, config.data.manifest_format)
    records = match_manifest(frame, scan.files, image_root).records
    class_distribution(records)

    if config.data.split:
        split = load_split(config.data.split)
    else:
        split = stratified_split(records, config.data.fractions, seed)
        config = _with_data(config, split=str(persist_split(split, out / "split.tsv")))
    check_split(split, records)
    config.write_resolved(out)
    return Prepared(config=config, records=records, split=split, image_root=image_root)


def train_and_test(
    prepared: Prepared,
    out: Path,
    variant: Optional[str] = None,
    cache: Optional[dict] = None,
) -> Evaluation:
    """
    Fit (resuming from `out/checkpoints/last` when present), then score the
    best checkpoint on test. `cache` holds decoded images shared between runs.
    """
    config = prepared.config
    data_cfg = config.data
    train_set = RoiDataset(prepared.records, prepared.image_root, data_cfg.image_size,
                           data_cfg.mean, data_cfg.std, augment=True, seed=config.train.seed, cache=cache)
    eval_set = RoiDataset(prepared.records, prepared.image_root, data_cfg.image_size,
                          data_cfg.mean, data_cfg.std, augment=False, cache=train_set.cache)
    trainer = Trainer(config, train_set, eval_set, prepared.split, out)
    last = out / "checkpoints" / "last"
    if last.exists():
        trainer.resume(last)
    trainer.fit()

    best = load_checkpoint(out / "checkpoints" / "best", trainer.config_digest, trainer.split_digest)
    params = {name: parameter(value, name=name) for name, value in best.params.items()}
    result = evaluate(
        predictor(params, config.model), eval_set, prepared.split.indices(prepared.records, "test"),
        threshold=config.eval.threshold, batch_size=config.eval.batch_size,
        variant=variant or config.model.variant, partition="test", workers=data_cfg.workers,
    )
    write_report(result.report, out, stem="test_metrics", evaluation=result)
    return result


# ============================================================================
# COMMANDS
# ============================================================================

@click.group(cls=HybridRoiGroup)
@click.option("--seed", type=int, default=None, help="Global seed; overrides config and command defaults")
@click.option("--log-level", default=None, type=click.Choice(["DEBUG", "INFO", "WARNING", "ERROR"], case_sensitive=False))
@click.pass_context
def cli(ctx, seed, log_level):
    """Hybrid CNN + selective-scan classifier for mammography ROIs"""
    ctx.ensure_object(dict)
    ctx.obj["seed"] = seed
    if log_level:
        set_level(log_level)


def _seed(ctx, local: Optional[int]) -> int:
    if local is not None:
        return local
    return ctx.obj.get("seed") or 0


@cli.command()
@click.option("--n", "n", type=int, default=200, show_default=True)
@click.option("--out", type=click.Path(path_type=Path), required=True)
@click.option("--seed", type=int, default=None)
@click.option("--difficulty", type=click.Choice(["easy", "medium", "hard"]), default="easy", show_default=True)
@click.option("--image-size", type=int, default=64, show_default=True)
@click.pass_context
def synth(ctx, n, out, seed, difficulty, image_size):
    """Generate a synthetic ROI dataset and its manifest"""
    manifest = write_synth_dataset(synth_dataset(n, image_size, _seed(ctx, seed), difficulty), out)
    click.echo(f"manifest: {manifest}")


@cli.command()
@click.option("--manifest", type=click.Path(path_type=Path), required=True)
@click.option("--seed", type=int, default=None)
@click.option("--out", type=click.Path(path_type=Path), required=True)
@click.option("--fractions", default="0.70,0.15,0.15", show_default=True)
@click.option("--format", "fmt", type=click.Choice(["manifest", "cbis"]), default="manifest", show_default=True,
              help="\"cbis\" reads a CBIS-DDSM description CSV")
@click.pass_context
def split(ctx, manifest, seed, out, fractions, fmt):
    """Patient-level stratified train/val/test split"""
    parsed = tuple(_parse_floats(fractions)) if fractions else DEFAULT_FRACTIONS
    if len(parsed) != 3:
        raise click.BadParameter("need exactly three fractions", param_hint="--fractions")
    records = manifest_records(read_manifest(manifest, fmt))
    assignment = stratified_split(records, parsed, _seed(ctx, seed))
    check_split(assignment, records)
    persist_split(assignment, out)
    for name in ("train", "val", "test"):
        click.echo(f"{name}: {len(assignment.patients(name))} patients")


@cli.command()
@click.option("--config", "config_path", type=click.Path(path_type=Path), required=True)
@click.option("--out", type=click.Path(path_type=Path), required=True)
@click.pass_context
def train(ctx, config_path, out):
    """Two-phase training; writes checkpoints, history.csv and test metrics"""
    out = _ensure_dir(out)
    handler = attach_run_log(out)
    try:
        prepared = prepare(load_config(config_path, ctx.obj.get("seed")), out)
        result = train_and_test(prepared, out)
    finally:
        detach_run_log(handler)
    click.echo(f"test AUC: {_fmt(result.report.auc)}")


@cli.command(name="eval")
@click.option("--checkpoint", "checkpoint_path", type=click.Path(path_type=Path), required=True)
@click.option("--split", "split_path", type=click.Path(path_type=Path), required=True)
@click.option("--partition", type=click.Choice(["train", "val", "test"]), default="test", show_default=True)
@click.option("--threshold", type=float, default=None, help="Defaults to the training config's threshold")
@click.option("--out", type=click.Path(path_type=Path), default=None, help="Defaults to the checkpoint's parent")
def eval_command(checkpoint_path, split_path, partition, threshold, out):
    """Score a checkpoint on one partition of its split"""
    checkpoint = load_checkpoint(checkpoint_path)
    assignment = load_split(split_path)
    if assignment.digest() != checkpoint.split_digest:
        raise DigestMismatchError(
            f"split {split_path} ({assignment.digest()[:12]}) differs from the checkpoint's "
            f"({str(checkpoint.split_digest)[:12]})")
    config = ExperimentConfig.model_validate(checkpoint.meta["config"])
    if config.digest() != checkpoint.config_digest:
        raise DigestMismatchError(f"config stored in {checkpoint_path} does not match its digest")

    image_root = Path(config.data.image_root or Path(config.data.manifest).parent)
    frame = read_manifest(config.data.manifest, config.data.manifest_format)
    records = match_manifest(frame, scan_images(image_root).files, image_root).records
    dataset = RoiDataset(records, image_root, config.data.image_size, config.data.mean, config.data.std)
    params = {name: parameter(value, name=name) for name, value in checkpoint.params.items()}
    result = evaluate(
        predictor(params, config.model), dataset, assignment.indices(records, partition),
        threshold=config.eval.threshold if threshold is None else threshold,
        batch_size=config.eval.batch_size, variant=config.model.variant, partition=partition,
        workers=config.data.workers,
    )
    out = _ensure_dir(out or Path(checkpoint_path).parent)
    write_report(result.report, out, stem=f"{partition}_metrics", evaluation=result)
    click.echo(f"{partition} AUC: {_fmt(result.report.auc)}")


@cli.command()
@click.option("--config", "config_path", type=click.Path(path_type=Path), required=True)
@click.option("--out", type=click.Path(path_type=Path), required=True)
@click.pass_context
def ablate(ctx, config_path, out):
    """Train and test backbone_only, vim_only and hybrid on one shared split"""
    out = _ensure_dir(out)
    handler = attach_run_log(out)
    try:
        shared = prepare(load_config(config_path, ctx.obj.get("seed")), out)
        reports: List[MetricsReport] = []
        cache: dict = {}
        for variant in VARIANTS:
            model = shared.config.model.model_copy(update={"variant": variant})
            config = shared.config.model_copy(update={"model": model})
            variant_out = _ensure_dir(out / variant)
            config.write_resolved(variant_out)
            prepared = Prepared(config=config, records=shared.records, split=shared.split, image_root=shared.image_root)
            logger.info(f"Ablation: training {variant}")
            reports.append(train_and_test(prepared, variant_out, variant, cache).report)
    finally:
        detach_run_log(handler)

    table = pd.DataFrame([
        {"variant": r.variant, "auc": r.auc, "accuracy": r.accuracy, "sensitivity": r.sensitivity,
         "specificity": r.specificity, "precision": r.precision, "f1": r.f1,
         "split_digest": shared.split.digest()}
        for r in reports
    ])
    table.to_csv(out / "ablation.csv", index=False, lineterminator="\n")
    for report in reports:
        click.echo(f"{report.variant}: AUC {_fmt(report.auc)}")


@cli.command(name="bench-scan")
@click.option("--lengths", default="512,1024,2048,4096", show_default=True)
@click.option("--repeats", type=int, default=5, show_default=True)
@click.option("--out", type=click.Path(path_type=Path), required=True, help="CSV of median timings")
@click.option("--d-model", type=int, default=64, show_default=True)
@click.option("--d-state", type=int, default=16, show_default=True)
@click.pass_context
def bench_scan(ctx, lengths, repeats, out, d_model, d_state):
    """Time the selective scan against full attention over sequence lengths"""
    parsed = [int(v) for v in _parse_floats(lengths)]
    result = complexity_probe(
        ScanConfig(d_model=d_model, d_state=d_state), parsed, repeats=repeats, seed=_seed(ctx, None))
    _ensure_dir(out.parent)
    try:
        result.write_csv(out)
    except OSError as exc:
        raise StorageError(f"cannot write {out}: {exc}") from exc
    click.echo(f"scan slope: {result.scan_slope:.3f}")
    click.echo(f"attention slope: {result.attention_slope:.3f}")


def _fmt(value: Optional[float]) -> str:
    return "undefined" if value is None else f"{value:.4f}"


def main():
    cli(obj={})


if __name__ == "__main__":
    sys.exit(main())
