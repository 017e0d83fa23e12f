"""
anodet command line.

    anodet synth --out data --seed 0
    anodet train --config data/synthetic.cfg --steps 2000
    anodet evaluate --checkpoint runs/synthetic/final.ckpt
    anodet score --checkpoint runs/synthetic/final.ckpt image.png
    anodet reconstruct --checkpoint runs/synthetic/final.ckpt image.png
    anodet report runs/*/evaluation/result.json

Exit status: 0 success, 1 usage or configuration error, 2 runtime or
numeric failure.
"""

import functools
import json
import logging
from pathlib import Path
from typing import List, Optional

import click
import numpy as np
import torch
import typer
from PIL import Image
from rich.console import Console

from anodet.checkpoint import RunSink, load_checkpoint, load_models, restore_state
from anodet.config import ExperimentConfig, dump_config, load_config, parse_config
from anodet.data import (
    IMAGE_SUFFIXES, BatchSampler, Sample, load_dataset, preprocess_test, tile_image, untile, write_image,
)
from anodet.errors import AnodetError, CheckpointError, ConfigurationError, IngestionError
from anodet.metrics import EvalResult, aggregate, evaluate_scores, render_report
from anodet.scorer import reconstruct, score_sample
from anodet.settings import get_settings, log_run_event, setup_logging
from anodet.synthetic import SynthSpec, generate_synthetic_corpus, write_corpus
from anodet.trainer import train

logger = logging.getLogger(__name__)
console = Console()

EXIT_USAGE = 1
EXIT_RUNTIME = 2

app = typer.Typer(help="Consistency-regularized Wasserstein BiGAN anomaly detection.",
                  no_args_is_help=True, add_completion=False)


def seed_everything(seed: int):
    """Seed the global torch and numpy generators."""
    torch.manual_seed(seed)
    np.random.seed(seed)


@app.callback()
def cli_options(
    ctx: typer.Context,
    seed: Optional[int] = typer.Option(None, '--seed', help="global seed for every command"),
):
    """Consistency-regularized Wasserstein BiGAN anomaly detection."""
    ctx.obj = {'seed': seed}


def _resolve_seed(ctx: typer.Context, seed: Optional[int]) -> Optional[int]:
    """A command's own --seed wins over the global one; the result seeds torch and numpy."""
    if seed is None and ctx.obj:
        seed = ctx.obj.get('seed')
    if seed is not None:
        seed_everything(seed)
    return seed


def _handle_errors(command):
    """Map anodet errors onto exit codes with a one-line diagnostic."""

    @functools.wraps(command)
    def wrapper(*args, **kwargs):
        try:
            return command(*args, **kwargs)
        except (ConfigurationError, IngestionError, CheckpointError) as e:
            console.print(f"[red]error:[/red] {e}")
            raise typer.Exit(EXIT_USAGE)
        except AnodetError as e:
            console.print(f"[red]failed:[/red] {e}")
            raise typer.Exit(EXIT_RUNTIME)

    return wrapper


def _prepare(log_level: Optional[str] = None):
    setup_logging(log_level)
    threads = get_settings().num_threads
    if threads:
        torch.set_num_threads(threads)


def _collect_images(inputs: List[Path]) -> List[Path]:
    files = []
    for path in inputs:
        if path.is_dir():
            files.extend(sorted(p for p in path.rglob('*') if p.suffix.lower() in IMAGE_SUFFIXES))
        else:
            files.append(path)
    return files


def _label_from_path(path: Path) -> Optional[str]:
    """Ground truth for files inside an MVTec ``test/<defect>/`` folder, else None."""
    if path.parent.parent.name != 'test':
        return None
    return 'normal' if path.parent.name == 'good' else 'anomalous'


def _input_sample(path: Path, config: ExperimentConfig) -> Sample:
    return Sample(id=path.as_posix(), label=_label_from_path(path), category=config.category, split='test',
                  path=path, channels=config.category_spec().channels)


@app.command('train')
@_handle_errors
def cmd_train(
    ctx: typer.Context,
    config: Optional[Path] = typer.Option(None, '--config', help="experiment config file"),
    seed: Optional[int] = typer.Option(None, '--seed', help="override the config seed"),
    alpha: Optional[float] = typer.Option(None, '--alpha', help="override the consistency weight"),
    steps: Optional[int] = typer.Option(None, '--steps', help="override total_steps"),
    out: Optional[Path] = typer.Option(None, '--out', help="run directory"),
    resume: Optional[Path] = typer.Option(None, '--resume', help="checkpoint to continue from"),
):
    """Train one category and write checkpoints plus metrics.jsonl."""
    _prepare()
    seed = _resolve_seed(ctx, seed)
    cfg = load_config(config, {'seed': seed, 'alpha': alpha, 'total_steps': steps, 'output_dir': out})
    spec = cfg.category_spec()
    train_cfg = cfg.train_config()
    device = get_settings().device

    train_samples, _ = load_dataset(cfg.dataset_root, cfg.category, spec.channels)
    sampler = BatchSampler(train_samples, spec)

    run_dir = cfg.run_dir()
    run_dir.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, run_dir / 'config.cfg')
    sink = RunSink(run_dir, cfg)

    state = None
    if resume is not None:
        state = restore_state(load_checkpoint(resume), device)

    final = train(sampler, train_cfg, cfg.network_config(), sink=sink, state=state, device=device)
    console.print(f"trained {final.step} steps ({train_cfg.variant}); final checkpoint: {sink.last_checkpoint}")


@app.command('score')
@_handle_errors
def cmd_score(
    ctx: typer.Context,
    inputs: List[Path] = typer.Argument(..., help="image files or directories"),
    checkpoint: Path = typer.Option(..., '--checkpoint', help="trained checkpoint"),
    lam: Optional[float] = typer.Option(None, '--lambda', help="feature term weight (default: config, 0.1)"),
    out: Optional[Path] = typer.Option(None, '--out', help="score records file (JSON lines)"),
    seed: Optional[int] = typer.Option(None, '--seed', help="seed for torch and numpy"),
):
    """Score images; one JSON record per input, in sorted input order."""
    _prepare()
    _resolve_seed(ctx, seed)
    models, cfg = load_models(checkpoint, get_settings().device)
    lam = cfg.score_lambda if lam is None else lam
    parse_config(ExperimentConfig, {**cfg.model_dump(), 'score_lambda': lam})
    spec = cfg.category_spec()
    out = out or get_settings().output_root / 'scores.jsonl'
    out.parent.mkdir(parents=True, exist_ok=True)

    files = _collect_images(inputs)
    failures = 0
    with open(out, 'w') as f:
        for path in files:
            try:
                record = score_sample(models, _input_sample(path, cfg), spec, lam, cfg.stride)
                f.write(record.to_json() + '\n')
            except AnodetError as e:
                failures += 1
                logger.error(f"Scoring {path} failed: {e}")
                f.write(json.dumps({'sample_id': path.as_posix(), 'error': str(e)}) + '\n')

    console.print(f"scored {len(files) - failures}/{len(files)} inputs -> {out}")
    if files and failures == len(files):
        raise typer.Exit(EXIT_RUNTIME)


@app.command('evaluate')
@_handle_errors
def cmd_evaluate(
    ctx: typer.Context,
    checkpoint: Path = typer.Option(..., '--checkpoint', help="trained checkpoint"),
    dataset_root: Optional[Path] = typer.Option(None, '--dataset-root', help="override the dataset root"),
    category: Optional[str] = typer.Option(None, '--category', help="override the category"),
    lam: Optional[float] = typer.Option(None, '--lambda', help="feature term weight"),
    out: Optional[Path] = typer.Option(None, '--out', help="evaluation directory"),
    seed: Optional[int] = typer.Option(None, '--seed', help="seed for torch and numpy"),
):
    """Score the test split and report auROC and maximum balanced accuracy."""
    _prepare()
    _resolve_seed(ctx, seed)
    models, cfg = load_models(checkpoint, get_settings().device)
    cfg = parse_config(ExperimentConfig, {
        **cfg.model_dump(),
        **{k: v for k, v in {'dataset_root': dataset_root, 'category': category, 'score_lambda': lam}.items()
           if v is not None},
    })
    spec = cfg.category_spec()
    _, test_samples = load_dataset(cfg.dataset_root, cfg.category, spec.channels)

    records = [score_sample(models, s, spec, cfg.score_lambda, cfg.stride) for s in test_samples]
    result = evaluate_scores(cfg.category, [r.score for r in records],
                             [s.is_anomalous for s in test_samples], kind=spec.kind)

    out = out or Path(checkpoint).parent / 'evaluation'
    out.mkdir(parents=True, exist_ok=True)
    with open(out / 'scores.jsonl', 'w') as f:
        for record in records:
            f.write(record.to_json() + '\n')
    (out / 'result.json').write_text(result.model_dump_json(indent=2) + '\n')

    report_console = Console(record=True, width=100)
    report_console.print(render_report(aggregate([result])))
    (out / 'report.txt').write_text(report_console.export_text())
    console.print(render_report(aggregate([result])))
    log_run_event("EVALUATED", f"{cfg.category}: auroc={result.auroc:.4f} bacc={result.balanced_accuracy:.4f}")


@app.command('reconstruct')
@_handle_errors
def cmd_reconstruct(
    ctx: typer.Context,
    image: Path = typer.Argument(..., help="input image"),
    checkpoint: Path = typer.Option(..., '--checkpoint', help="trained checkpoint"),
    out: Optional[Path] = typer.Option(None, '--out', help="output directory"),
    seed: Optional[int] = typer.Option(None, '--seed', help="seed for torch and numpy"),
):
    """Write input, reconstruction and absolute-difference images."""
    _prepare()
    _resolve_seed(ctx, seed)
    models, cfg = load_models(checkpoint, get_settings().device)
    spec = cfg.category_spec()
    x = preprocess_test(_input_sample(image, cfg), spec)

    if spec.kind == 'object':
        x_rec = reconstruct(models.encoder, models.generator, x[None])[0].cpu().numpy()
    else:
        patches = np.stack(tile_image(x, spec.train_side))
        rec_patches = reconstruct(models.encoder, models.generator, patches).cpu().numpy()
        x_rec = untile(list(rec_patches), spec.resize_side)

    difference = np.abs(x - x_rec)
    peak = float(difference.max())
    scale = 255.0 / peak if peak > 0 else 1.0
    diff_pixels = np.clip(np.rint(difference * scale), 0, 255).astype(np.uint8)

    out = out or get_settings().output_root / 'reconstructions' / image.stem
    out.mkdir(parents=True, exist_ok=True)
    write_image(out / 'input.png', x)
    write_image(out / 'reconstruction.png', x_rec)
    Image.fromarray(diff_pixels[:, :, 0] if diff_pixels.shape[-1] == 1 else diff_pixels).save(out / 'difference.png')
    (out / 'difference.json').write_text(json.dumps({
        'scale': scale,
        'max_abs_difference': peak,
        'l1': float(difference.sum()),
        'decode': 'raw |x - G(E(x))| = pixel_value / scale, in [-1, 1] image units',
    }, indent=2) + '\n')
    console.print(f"wrote reconstruction triplet to {out}")


@app.command('synth')
@_handle_errors
def cmd_synth(
    ctx: typer.Context,
    out: Optional[Path] = typer.Option(None, '--out', help="dataset root to write"),
    seed: Optional[int] = typer.Option(None, '--seed', help="corpus seed (default: global seed, else 0)"),
    category: str = typer.Option('synthetic', '--category'),
    n_train: int = typer.Option(200, '--n-train'),
    n_test_normal: int = typer.Option(40, '--n-test-normal'),
    n_test_anomalous: int = typer.Option(40, '--n-test-anomalous'),
    image_side: int = typer.Option(64, '--image-side'),
    channels: int = typer.Option(3, '--channels'),
    family: str = typer.Option('stripes', '--family', help="stripes or noise"),
    defect_fraction: float = typer.Option(0.05, '--defect-fraction', help="defect area / image area"),
):
    """Generate a seeded synthetic texture corpus in the MVTec layout."""
    _prepare()
    seed = _resolve_seed(ctx, seed)
    seed = 0 if seed is None else seed
    spec = parse_config(SynthSpec, {
        'category': category, 'n_train': n_train, 'n_test_normal': n_test_normal,
        'n_test_anomalous': n_test_anomalous, 'image_side': image_side, 'channels': channels,
        'family': family, 'defect_fraction': defect_fraction,
    })
    out = out or get_settings().output_root / 'data'
    train_samples, test_samples = generate_synthetic_corpus(seed, spec)
    write_corpus(train_samples, test_samples, out)

    try:
        experiment = parse_config(ExperimentConfig, {
            'category': category, 'kind': 'texture', 'channels': channels, 'dataset_root': out,
            'texture_side': image_side, 'patch_side': min(64, image_side),
        })
        dump_config(experiment, out / f"{category}.cfg")
    except ConfigurationError as e:
        logger.warning(f"No experiment config written for this corpus: {e}")
    console.print(f"wrote {len(train_samples)} train and {len(test_samples)} test images to {out / category}")


@app.command('report')
@_handle_errors
def cmd_report(
    ctx: typer.Context,
    results: List[Path] = typer.Argument(..., help="result.json files from evaluate"),
    out: Optional[Path] = typer.Option(None, '--out', help="aggregate report file (JSON)"),
    reference: bool = typer.Option(False, '--reference', help="show published reference means"),
    seed: Optional[int] = typer.Option(None, '--seed', help="seed for torch and numpy"),
):
    """Aggregate per-category results into texture, object and overall means."""
    _prepare()
    _resolve_seed(ctx, seed)
    parsed = []
    for path in results:
        try:
            parsed.append(EvalResult.model_validate_json(Path(path).read_text()))
        except (OSError, ValueError) as e:
            raise ConfigurationError('results', f"cannot read {path}: {e}")
    report = aggregate(parsed)
    console.print(render_report(report, show_reference=reference))
    if out is not None:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(report.model_dump_json(indent=2) + '\n')


def main(argv: Optional[List[str]] = None) -> int:
    """Entry point with the documented exit codes (click uses 2 for usage errors)."""
    try:
        code = app(args=argv, standalone_mode=False)
    except click.exceptions.UsageError as e:
        e.show()
        return EXIT_USAGE
    except click.exceptions.Abort:
        return EXIT_USAGE
    return code if isinstance(code, int) else 0
