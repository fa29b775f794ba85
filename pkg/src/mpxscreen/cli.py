"""Command-line entry points: dataset tooling, screening, training, serving."""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click
import cv2

from . import dataset as ds
from .classifier import (
    HeadSpec,
    TrainConfig,
    load_model,
    save_model,
    train as train_model,
)
from .config import load_settings
from .errors import ScreeningError
from .imaging import ScreeningImage
from .pipeline import PipelineConfig, ScreeningPipeline
from .restoration import RestorationPolicy, load_restoration_backend
from .segmentation import (
    KIND_SALIENT_OBJECT,
    KIND_SKIN_REGION,
    GateConfig,
    load_backend,
)

DEFAULT_BG = "builtin:spectral-saliency"
DEFAULT_SKIN = "builtin:skin-rules"


def _read_image(path: str) -> ScreeningImage:
    raw = cv2.imread(path, cv2.IMREAD_COLOR)
    if raw is None:
        raise click.ClickException(f"cannot decode image {path}")
    return ScreeningImage(pixels=cv2.cvtColor(raw, cv2.COLOR_BGR2RGB), source_id=path)


@click.group()
def main():
    """Staged skin-lesion screening toolkit."""


# ---------------------------------------------------------------------------
# dataset subcommands
# ---------------------------------------------------------------------------

@main.group()
def dataset():
    """Build and audit dataset manifests."""


@dataset.command("ingest")
@click.option("--manifest", required=True, type=click.Path(exists=True))
@click.option("--root", default=".", type=click.Path(file_okay=False))
@click.option("--out", required=True, type=click.Path())
@click.option("--verify/--no-verify", default=True, help="Check files exist and decode.")
def dataset_ingest(manifest, root, out, verify):
    try:
        records = ds.DatasetManifest.load(manifest).records
        result = ds.ingest(records, root=root, verify_files=verify)
    except ScreeningError as exc:
        raise click.ClickException(str(exc)) from exc
    result.save(out)
    click.echo(f"ingested {len(result)} records -> {out}")


@dataset.command("augment")
@click.option("--manifest", required=True, type=click.Path(exists=True))
@click.option("--root", default=".", type=click.Path(file_okay=False))
@click.option("--out", required=True, type=click.Path())
def dataset_augment(manifest, root, out):
    """Materialize planned augmented records into image files."""
    try:
        m = ds.DatasetManifest.load(manifest)
        pending = sum(1 for r in m if r.origin == "augmented" and not r.checksum)
        result = ds.materialize_augmented(m, root=root)
    except ScreeningError as exc:
        raise click.ClickException(str(exc)) from exc
    result.save(out)
    click.echo(f"materialized {pending} augmented records -> {out}")


@dataset.command("balance")
@click.option("--manifest", required=True, type=click.Path(exists=True))
@click.option("--split", "split_tag", default="val", show_default=True)
@click.option("--seed", default=0, type=int, show_default=True)
@click.option("--out", required=True, type=click.Path())
def dataset_balance(manifest, split_tag, seed, out):
    try:
        m = ds.DatasetManifest.load(manifest)
        before = len(m)
        result = ds.balance(m, split=split_tag, rng_seed=seed)
    except ScreeningError as exc:
        raise click.ClickException(str(exc)) from exc
    result.save(out)
    click.echo(f"appended {len(result) - before} augmented records -> {out}")


@dataset.command("split")
@click.option("--manifest", required=True, type=click.Path(exists=True))
@click.option("--ratio", default="0.65,0.35", show_default=True, help="val,test fractions")
@click.option("--seed", default=0, type=int, show_default=True)
@click.option("--out", required=True, type=click.Path())
def dataset_split(manifest, ratio, seed, out):
    try:
        parts = [float(x) for x in ratio.split(",")]
        m = ds.DatasetManifest.load(manifest)
        result = ds.split(m, ratio=parts, rng_seed=seed)
    except (ScreeningError, ValueError) as exc:
        raise click.ClickException(str(exc)) from exc
    result.save(out)
    counts = result.class_counts
    click.echo(f"split -> {out}: " + json.dumps(counts, sort_keys=True))


@dataset.command("assemble-external")
@click.option("--negatives", required=True, type=click.Path(exists=True))
@click.option("--positives", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
def dataset_assemble_external(negatives, positives, out):
    try:
        neg = ds.DatasetManifest.load(negatives).records
        pos = ds.DatasetManifest.load(positives).records
        result = ds.assemble_external(neg, pos)
    except ScreeningError as exc:
        raise click.ClickException(str(exc)) from exc
    result.save(out)
    click.echo(f"external manifest of {len(result)} records -> {out}")


@dataset.command("audit")
@click.option("--manifest", required=True, type=click.Path(exists=True))
@click.option(
    "--expect",
    multiple=True,
    help="Expected count as split/label=count, e.g. val/monkeypox=117.",
)
@click.option("--json", "as_json", is_flag=True, default=False)
def dataset_audit(manifest, expect, as_json):
    m = ds.DatasetManifest.load(manifest)
    expectations: dict[str, dict[str, int]] = {}
    for item in expect:
        key, _, value = item.partition("=")
        split_name, _, label = key.partition("/")
        expectations.setdefault(split_name, {})[label] = int(value)
    report = ds.audit(m, expectations=expectations or None)
    if as_json:
        click.echo(
            json.dumps(
                {
                    "class_counts": report.class_counts,
                    "total": report.total,
                    "duplicate_checksums": report.duplicate_checksums,
                    "unmaterialized": report.unmaterialized,
                    "leakage_violations": report.leakage_violations,
                    "expectation_mismatches": report.expectation_mismatches,
                },
                indent=2,
            )
        )
    else:
        for line in report.lines():
            click.echo(line)
    if not report.clean:
        sys.exit(1)


# ---------------------------------------------------------------------------
# screening and training
# ---------------------------------------------------------------------------

@main.command("screen")
@click.option("--image", "image_path", required=True, type=click.Path(exists=True))
@click.option("--model", "model_dir", required=True, type=click.Path(exists=True))
@click.option("--no-restoration", is_flag=True, default=False)
@click.option("--no-bg-removal", is_flag=True, default=False)
@click.option("--no-skin-seg", is_flag=True, default=False)
@click.option("--bg-backend", default=DEFAULT_BG, show_default=True)
@click.option("--skin-backend", default=DEFAULT_SKIN, show_default=True)
@click.option("--restoration-backend", default="builtin:bicubic", show_default=True)
@click.option("--threshold", default=0.87, show_default=True)
def screen_cmd(
    image_path, model_dir, no_restoration, no_bg_removal, no_skin_seg,
    bg_backend, skin_backend, restoration_backend, threshold,
):
    """Screen one image and print the result as a single JSON record."""
    try:
        model = load_model(model_dir)
        pipeline = ScreeningPipeline(
            model=model,
            background_backend=load_backend(KIND_SALIENT_OBJECT, bg_backend),
            skin_backend=load_backend(KIND_SKIN_REGION, skin_backend),
            restoration_backend=load_restoration_backend(restoration_backend),
        )
        cfg = PipelineConfig(
            enable_restoration=not no_restoration,
            enable_background_removal=not no_bg_removal,
            enable_skin_segmentation=not no_skin_seg,
            gate=GateConfig(blackout_threshold=threshold),
            restoration_policy=RestorationPolicy(),
            model_version=model.model_version,
        )
        result = pipeline.screen(_read_image(image_path), cfg)
    except ScreeningError as exc:
        raise click.ClickException(str(exc)) from exc
    click.echo(json.dumps(result.to_dict()))


@main.command("train")
@click.option("--train-manifest", required=True, type=click.Path(exists=True))
@click.option("--val-manifest", required=True, type=click.Path(exists=True))
@click.option("--root", default=".", type=click.Path(file_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--backbone", default="b7", show_default=True)
@click.option("--pretrained/--no-pretrained", default=False)
@click.option("--epochs", default=10, type=int, show_default=True)
@click.option("--batch-size", default=48, type=int, show_default=True)
@click.option("--lr", default=0.001, type=float, show_default=True)
@click.option("--lr-decay", default=0.95, type=float, show_default=True)
@click.option("--seed", default=0, type=int, show_default=True)
@click.option(
    "--segment/--no-segment", default=True, show_default=True,
    help="Run training images through the same gated masking stages as inference.",
)
@click.option("--bg-backend", default=DEFAULT_BG, show_default=True)
@click.option("--skin-backend", default=DEFAULT_SKIN, show_default=True)
def train_cmd(
    train_manifest, val_manifest, root, out_dir, backbone, pretrained,
    epochs, batch_size, lr, lr_decay, seed, segment, bg_backend, skin_backend,
):
    """Fit the classifier on manifest data and save the artifact.

    Training consumes images at original resolution (no restoration).
    """
    from .classifier import build_model

    try:
        head = HeadSpec()
        cfg = TrainConfig(
            learning_rate=lr, lr_decay=lr_decay, batch_size=batch_size,
            epochs=epochs, seed=seed,
        )
        model = build_model(head, pretrained=pretrained, backbone=backbone)
        preprocess = None
        if segment:
            pipeline = ScreeningPipeline(
                model=model,
                background_backend=load_backend(KIND_SALIENT_OBJECT, bg_backend),
                skin_backend=load_backend(KIND_SKIN_REGION, skin_backend),
            )
            stage_cfg = PipelineConfig(enable_restoration=False)

            def preprocess(image):
                out, _ = pipeline.preprocess(image, stage_cfg, allow_restoration=False)
                return out

        train_m = ds.DatasetManifest.load(train_manifest)
        val_m = ds.DatasetManifest.load(val_manifest)
        result = train_model(model, train_m, val_m, cfg, root=root, preprocess=preprocess)
        save_model(
            result.model, out_dir,
            train_config=cfg,
            manifest_checksum=ds.sha256_file(train_manifest),
            history=result.history,
        )
    except ScreeningError as exc:
        raise click.ClickException(str(exc)) from exc
    click.echo(
        f"saved model to {out_dir} "
        f"(best epoch {result.best_epoch}, val accuracy {result.best_val_accuracy:.4f})"
    )


@main.command("evaluate")
@click.option("--manifest", required=True, type=click.Path(exists=True))
@click.option("--model", "model_dir", required=True, type=click.Path(exists=True))
@click.option("--root", default=".", type=click.Path(file_okay=False))
@click.option("--bg-backend", default=DEFAULT_BG, show_default=True)
@click.option("--skin-backend", default=DEFAULT_SKIN, show_default=True)
@click.option("--json", "json_out", type=click.Path(), default=None)
def evaluate_cmd(manifest, model_dir, root, bg_backend, skin_backend, json_out):
    """Score a model over a manifest and print weighted metrics."""
    from .evaluation import evaluate

    try:
        model = load_model(model_dir)
        pipeline = ScreeningPipeline(
            model=model,
            background_backend=load_backend(KIND_SALIENT_OBJECT, bg_backend),
            skin_backend=load_backend(KIND_SKIN_REGION, skin_backend),
        )
        report = evaluate(pipeline, ds.DatasetManifest.load(manifest), root=root)
    except ScreeningError as exc:
        raise click.ClickException(str(exc)) from exc
    for line in report.lines():
        click.echo(line)
    if json_out:
        Path(json_out).write_text(json.dumps(report.to_dict(), indent=2), encoding="utf-8")


@main.command("ablate")
@click.option("--manifest", required=True, type=click.Path(exists=True))
@click.option("--model", "model_dir", required=True, type=click.Path(exists=True))
@click.option("--alt-model", default=None, type=click.Path(exists=True))
@click.option("--root", default=".", type=click.Path(file_okay=False))
@click.option("--bg-backend", default=DEFAULT_BG, show_default=True)
@click.option("--skin-backend", default=DEFAULT_SKIN, show_default=True)
@click.option("--restoration-backend", default="builtin:bicubic", show_default=True)
@click.option("--json", "json_out", type=click.Path(), default=None)
def ablate_cmd(
    manifest, model_dir, alt_model, root, bg_backend, skin_backend,
    restoration_backend, json_out,
):
    """Run the stage on/off grid and print one accuracy per row."""
    from .evaluation import run_ablation

    models = {"primary": model_dir}
    if alt_model:
        models["alternate"] = alt_model
    try:
        backends = {
            "background_removal": load_backend(KIND_SALIENT_OBJECT, bg_backend),
            "skin_segmentation": load_backend(KIND_SKIN_REGION, skin_backend),
            "restoration": load_restoration_backend(restoration_backend),
        }
        report = run_ablation(models, backends, ds.DatasetManifest.load(manifest), root=root)
    except ScreeningError as exc:
        raise click.ClickException(str(exc)) from exc
    for line in report.lines():
        click.echo(line)
    if json_out:
        Path(json_out).write_text(json.dumps(report.to_dict(), indent=2), encoding="utf-8")


@main.command("serve")
@click.option("--config", "config_path", default=None, type=click.Path(exists=True))
@click.option("--port", default=None, type=int, help="Overrides the configured port.")
@click.option("--host", default="127.0.0.1", show_default=True)
def serve_cmd(config_path, port, host):
    """Start the screening service."""
    import uvicorn

    from .service import create_app_from_settings

    try:
        settings = load_settings(config_path)
        app = create_app_from_settings(settings)
    except ScreeningError as exc:
        raise click.ClickException(str(exc)) from exc
    uvicorn.run(app, host=host, port=port if port is not None else settings.port)


if __name__ == "__main__":
    main()
