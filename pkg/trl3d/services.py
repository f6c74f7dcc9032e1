"""
Services module: one function per experiment command.

Every command runs inside :func:`experiment`, which creates a timestamped run
directory and an ExperimentRun row, and on exit writes ``manifest.json``
(resolved config, library version, sha256 of every artifact, summary).
CSV artifacts are written with a fixed float format so reruns with the same
config and seed are byte-identical.
"""

import hashlib
import json
import logging
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from django.conf import settings
from django.utils import timezone

from . import __version__
from .backbone import VisionTransformer
from .checkpoint import load_checkpoint, save_checkpoint
from .exceptions import ConfigError, NumericError
from .gradcheck import run_gradcheck
from .layer import CoordMode, VideoStrategy
from .metrics import alignment_report, camera_eval, depth_correlation, fisher_mean_r
from .models import ExperimentRun
from .runconfig import RunConfig
from .synthdata import Dataset, PairSet, generate_dataset, load_dataset, save_dataset
from .tensor import Rng, no_grad
from .training import accuracy, build_model, embed_clip, pseudo_depth, train_aligner, train_classifier

logger = logging.getLogger(__name__)

FLOAT_FORMAT = '%.8f'
MANIFEST_NAME = 'manifest.json'
DEFAULT_OUT = RunConfig.out
ALIGNMENT_DIRECTION = 'a->b'

ABLATION_VARIANTS: Dict[str, Dict[str, Any]] = {
    'baseline': {'insert_at': ()},
    'mlp_control': {'insert_module': 'mlp'},
    'trl3d': {},
    'direct_xyz': {'coord_mode': 'direct_xyz'},
    'concat': {'fusion_mode': 'concat'},
}


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


@dataclass
class RunContext:
    """Handle a command uses to write artifacts into its run directory."""

    command: str
    cfg: RunConfig
    run: ExperimentRun
    run_dir: Path
    artifacts: Dict[str, str] = field(default_factory=dict)
    summary: Dict[str, Any] = field(default_factory=dict)

    def write_csv(self, name: str, rows: Sequence[Dict[str, Any]], columns: Sequence[str]) -> Path:
        path = self.run_dir / name
        frame = pd.DataFrame(list(rows), columns=list(columns))
        frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator='\n', encoding='utf-8')
        self.artifacts[name] = _sha256(path)
        logger.info(f"Wrote {len(frame)} rows to {path}")
        return path

    def save_model(self, name: str, model: VisionTransformer) -> Path:
        path = self.run_dir / name
        self.artifacts[name] = save_checkpoint(path, model)
        return path


def resolve_out(cfg: RunConfig) -> Path:
    """The default ``out`` maps to the TRL3D_RUNS_DIR setting; anything else is taken as given."""
    if cfg.out == DEFAULT_OUT:
        return Path(settings.TRL3D_RUNS_DIR)
    return Path(cfg.out)


def _one_line(error: BaseException) -> str:
    text = str(error).strip().splitlines()
    return f"{type(error).__name__}: {text[0] if text else ''}".rstrip(': ')


def _write_manifest(ctx: RunContext, status: str, reason: str = '') -> None:
    manifest = {
        'command': ctx.command,
        'library_version': __version__,
        'status': status,
        'failure_reason': reason,
        'seed': ctx.cfg.seed,
        'config': ctx.cfg.resolved(),
        'artifacts': dict(sorted(ctx.artifacts.items())),
        'summary': ctx.summary,
        'started_at': ctx.run.created_at.isoformat() if ctx.run.created_at else None,
        'finished_at': timezone.now().isoformat(),
    }
    path = ctx.run_dir / MANIFEST_NAME
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + '\n', encoding='utf-8')


@contextmanager
def experiment(command: str, cfg: RunConfig) -> Iterator[RunContext]:
    """Open a run directory and registry row; close both whatever happens inside."""
    stamp = timezone.now().strftime('%Y%m%d-%H%M%S-%f')
    run_dir = resolve_out(cfg) / f"{command}-{stamp}"
    run_dir.mkdir(parents=True, exist_ok=False)
    run = ExperimentRun.objects.create(
        command=command,
        seed=cfg.seed,
        run_dir=str(run_dir),
        config=cfg.resolved(),
        library_version=__version__,
    )
    ctx = RunContext(command=command, cfg=cfg, run=run, run_dir=run_dir)
    logger.info(f"Starting {command} (run {run.pk}) in {run_dir}")
    try:
        yield ctx
    except Exception as e:
        reason = _one_line(e)
        logger.error(f"Error in {command} (run {run.pk}): {reason}")
        _write_manifest(ctx, ExperimentRun.Status.FAILED, reason)
        run.mark_failed(reason)
        raise
    _write_manifest(ctx, ExperimentRun.Status.SUCCEEDED)
    run.mark_succeeded(ctx.summary)
    logger.info(f"Finished {command} (run {run.pk})")


def _model(cfg: RunConfig, num_classes: Optional[int] = None, checkpoint: Optional[str] = None) -> VisionTransformer:
    model = build_model(cfg, num_classes)
    if checkpoint:
        load_checkpoint(checkpoint, model)
    return model


def _first_checkpoint(cfg: RunConfig, required: bool, command: str) -> Optional[str]:
    if cfg.checkpoint:
        return cfg.checkpoint[0]
    if required:
        raise ConfigError(f"{command} needs checkpoint=<path> in the config")
    logger.warning(f"{command}: no checkpoint given, evaluating the untrained model for seed {cfg.seed}")
    return None


def _require_depth_layer(cfg: RunConfig, command: str) -> None:
    if cfg.insert_module != 'trl3d' or not cfg.insert_at:
        raise ConfigError(f"{command} needs insert_module=trl3d and a non-empty insert_at")
    if CoordMode(cfg.coord_mode) is not CoordMode.DEPTH:
        raise ConfigError(f"{command} needs coord_mode=depth (got {cfg.coord_mode})")


def _load(cfg: RunConfig, splits: Sequence[str]) -> Dataset:
    return load_dataset(cfg.dataset, splits)


def gen_data(cfg: RunConfig) -> RunContext:
    with experiment(ExperimentRun.Command.GEN_DATA, cfg) as ctx:
        dataset = generate_dataset(cfg.generation_config(), cfg.seed)
        manifest = save_dataset(dataset, cfg.dataset)
        ctx.artifacts['dataset/manifest.json'] = _sha256(Path(cfg.dataset) / 'manifest.json')
        ctx.summary = {
            'dataset': str(cfg.dataset),
            'splits': {name: entry['samples'] for name, entry in sorted(manifest['splits'].items())},
        }
    return ctx


def train_classify(cfg: RunConfig) -> RunContext:
    with experiment(ExperimentRun.Command.TRAIN_CLASSIFY, cfg) as ctx:
        data = _load(cfg, ('train', 'test', 'test_unseen'))
        model = build_model(cfg)
        history = train_classifier(model, data.classification['train'], cfg, Rng(cfg.seed).child('batches'))
        ctx.save_model('model.ckpt', model)
        ctx.write_csv('loss.csv', [{'step': r.step, 'loss': r.loss} for r in history], ['step', 'loss'])
        scores = {split: accuracy(model, views) for split, views in sorted(data.classification.items())}
        ctx.write_csv(
            'accuracy.csv',
            [{'split': split, 'samples': len(data.classification[split]), 'accuracy': scores[split]} for split in scores],
            ['split', 'samples', 'accuracy'],
        )
        ctx.summary = {'accuracy': scores, 'final_loss': history[-1].loss if history else None}
    return ctx


def train_align(cfg: RunConfig) -> RunContext:
    with experiment(ExperimentRun.Command.TRAIN_ALIGN, cfg) as ctx:
        data = _load(cfg, ('align_train',))
        model = build_model(cfg, num_classes=0)

        def snapshot(current: VisionTransformer, pct: int) -> None:
            ctx.save_model(f"snapshot_{pct:03d}.ckpt", current)

        history = train_aligner(model, data.alignment['align_train'], cfg, Rng(cfg.seed).child('pairs'), snapshot)
        ctx.save_model('model.ckpt', model)
        ctx.write_csv('tcn_loss.csv', [{'step': r.step, 'loss': r.loss} for r in history], ['step', 'loss'])
        ctx.summary = {
            'final_loss': history[-1].loss if history else None,
            'snapshots': sorted(name for name in ctx.artifacts if name.startswith('snapshot_')),
        }
    return ctx


def evaluate_pair(pair_id: int, anchors: Any, others: Any) -> Dict[str, Any]:
    """Alignment numbers for one pair of frame embeddings; pure, so pairs can run anywhere."""
    report = alignment_report(np.asarray(anchors, dtype=np.float64), np.asarray(others, dtype=np.float64))
    return {
        'pair_id': pair_id,
        'N': report.num_frames,
        'direction': ALIGNMENT_DIRECTION,
        'alignment_error': report.alignment_error,
        'cycle_error': report.cycle_error,
        'kendall_tau': report.kendall_tau,
    }


def evaluate_pairs(jobs: List[Tuple[int, np.ndarray, np.ndarray]]) -> List[Dict[str, Any]]:
    """Inline by default; a Celery group when fan-out is on and tasks are not eager."""
    if getattr(settings, 'TRL3D_FANOUT', False) and not getattr(settings, 'CELERY_TASK_ALWAYS_EAGER', True):
        from celery import group

        from .tasks import evaluate_pair_task

        logger.info(f"Fanning out {len(jobs)} pair evaluations")
        result = group(evaluate_pair_task.s(pid, a.tolist(), b.tolist()) for pid, a, b in jobs).apply_async()
        rows: List[Dict[str, Any]] = result.get(disable_sync_subtasks=False)
        return rows
    return [evaluate_pair(pid, a, b) for pid, a, b in jobs]


def _embed_pairs(model: VisionTransformer, pairs: PairSet) -> List[Tuple[int, np.ndarray, np.ndarray]]:
    return [
        (index, embed_clip(model, pairs.view_a.images[index]), embed_clip(model, pairs.view_b.images[index]))
        for index in range(len(pairs))
    ]


ALIGN_COLUMNS = ['pair_id', 'N', 'direction', 'alignment_error', 'cycle_error', 'kendall_tau']


def eval_align(cfg: RunConfig) -> RunContext:
    with experiment(ExperimentRun.Command.EVAL_ALIGN, cfg) as ctx:
        data = _load(cfg, ('align_seen', 'align_unseen'))
        model = _model(cfg, 0, _first_checkpoint(cfg, required=False, command='eval_align'))
        summary_rows = []
        for split, label in (('align_seen', 'seen'), ('align_unseen', 'unseen')):
            rows = evaluate_pairs(_embed_pairs(model, data.alignment[split]))
            ctx.write_csv(f"align_{label}.csv", rows, ALIGN_COLUMNS)
            frame = pd.DataFrame(rows)
            summary_rows.append({
                'split': label,
                'pairs': len(rows),
                'direction': ALIGNMENT_DIRECTION,
                'alignment_error': float(frame['alignment_error'].mean()),
                'cycle_error': float(frame['cycle_error'].mean()),
                'kendall_tau': float(frame['kendall_tau'].mean()),
            })
        ctx.write_csv(
            'align_summary.csv',
            summary_rows,
            ['split', 'pairs', 'direction', 'alignment_error', 'cycle_error', 'kendall_tau'],
        )
        ctx.summary = {row['split']: {k: row[k] for k in ALIGN_COLUMNS[3:]} for row in summary_rows}
    return ctx


def _depth_samples(model: VisionTransformer, pairs: PairSet) -> Tuple[np.ndarray, np.ndarray]:
    predictions, truths = [], []
    for index in range(len(pairs)):
        for views in (pairs.view_a, pairs.view_b):
            predictions.append(pseudo_depth(model, views.images[index]))
            gt = views.gt_depth[index]
            truths.append(gt.reshape(gt.shape[0], -1))
    return np.concatenate(predictions), np.concatenate(truths)


def eval_depth(cfg: RunConfig) -> RunContext:
    with experiment(ExperimentRun.Command.EVAL_DEPTH, cfg) as ctx:
        _require_depth_layer(cfg, 'eval_depth')
        pairs = _load(cfg, ('align_seen',)).alignment['align_seen']
        trained = _model(cfg, 0, _first_checkpoint(cfg, required=True, command='eval_depth'))
        untrained = _model(cfg, 0)

        predicted, truth = _depth_samples(trained, pairs)
        reports = {'trained': depth_correlation(predicted, truth)}
        reports['untrained'] = depth_correlation(_depth_samples(untrained, pairs)[0], truth)
        draws = [
            depth_correlation(Rng(cfg.seed).child('random_depth').child(d).uniform(0.0, 1.0, truth.shape), truth)
            for d in range(max(cfg.random_baseline_draws, 1))
        ]

        rows = []
        for name, report in (*reports.items(), ('random', draws[0])):
            mean_r = report.mean_r if name != 'random' else fisher_mean_r([d.mean_r for d in draws])
            rows.append({
                'model': name,
                'mean_r': mean_r,
                'samples_used': int(np.sum(np.isfinite(report.per_sample_r))),
                'samples_total': len(report.per_sample_r),
                'mean_coverage': float(np.mean(report.coverage)),
            })
        ctx.write_csv('depth_corr.csv', rows, ['model', 'mean_r', 'samples_used', 'samples_total', 'mean_coverage'])

        grid = [
            {'sample': s, 'token': k, 'pseudo_depth': predicted[s, k], 'gt_depth': truth[s, k]}
            for s in range(predicted.shape[0])
            for k in range(predicted.shape[1])
        ]
        ctx.write_csv('depth_maps.csv', grid, ['sample', 'token', 'pseudo_depth', 'gt_depth'])
        ctx.summary = {row['model']: row['mean_r'] for row in rows}
    return ctx


def _expand_checkpoints(entries: Sequence[str]) -> List[Path]:
    paths: List[Path] = []
    for entry in entries:
        path = Path(entry)
        if path.is_dir():
            snapshots = sorted(path.glob('snapshot_*.ckpt'))
            if not snapshots:
                raise ConfigError(f"no snapshot_*.ckpt files in {path}")
            paths.extend(snapshots)
        else:
            paths.append(path)
    return paths


def eval_camera(cfg: RunConfig) -> RunContext:
    with experiment(ExperimentRun.Command.EVAL_CAMERA, cfg) as ctx:
        _require_depth_layer(cfg, 'eval_camera')
        if VideoStrategy(cfg.video_strategy) is not VideoStrategy.DIVIDED:
            raise ConfigError('eval_camera needs video_strategy=DT (one camera per frame)')
        if not cfg.checkpoint:
            raise ConfigError('eval_camera needs checkpoint=<path>[,<path>...] or a train_align run directory')
        pairs = _load(cfg, ('align_seen',)).alignment['align_seen']
        rows: List[Dict[str, Any]] = []
        tracks: List[Dict[str, Any]] = []
        for checkpoint in _expand_checkpoints(cfg.checkpoint):
            model = _model(cfg, 0, str(checkpoint))
            for index in range(len(pairs)):
                with no_grad():
                    outputs = model(pairs.view_b.images[index], clip=True).layer_outputs
                estimated = outputs[0].extrinsics()
                truth = [pairs.view_b.extrinsics((index, t)) for t in range(len(estimated))]
                report = camera_eval(estimated, truth)
                rows.append({
                    'checkpoint': checkpoint.name,
                    'pair_id': index,
                    'position_disparity': report.position_disparity,
                    'orientation_disparity': report.orientation_disparity,
                })
                for t, (est, gt) in enumerate(zip(estimated, truth)):
                    track = {'checkpoint': checkpoint.name, 'pair_id': index, 'frame': t}
                    for prefix, ext in (('est', est), ('gt', gt)):
                        for axis, value in zip('xyz', ext.center):
                            track[f"{prefix}_c{axis}"] = value
                        for axis, value in zip('xyz', ext.looking_at):
                            track[f"{prefix}_l{axis}"] = value
                    tracks.append(track)
        ctx.write_csv('camera.csv', rows, ['checkpoint', 'pair_id', 'position_disparity', 'orientation_disparity'])
        track_columns = ['checkpoint', 'pair_id', 'frame'] + [
            f"{prefix}_{kind}{axis}" for prefix in ('est', 'gt') for kind in ('c', 'l') for axis in 'xyz'
        ]
        ctx.write_csv('camera_tracks.csv', tracks, track_columns)
        frame = pd.DataFrame(rows)
        means = frame.groupby('checkpoint', sort=False)[['position_disparity', 'orientation_disparity']].mean()
        summary_rows = [{'checkpoint': name, **values} for name, values in means.to_dict(orient='index').items()]
        ctx.write_csv('camera_summary.csv', summary_rows, ['checkpoint', 'position_disparity', 'orientation_disparity'])
        ctx.summary = {row['checkpoint']: {k: v for k, v in row.items() if k != 'checkpoint'} for row in summary_rows}
    return ctx


def gradcheck(cfg: RunConfig) -> RunContext:
    with experiment(ExperimentRun.Command.GRADCHECK, cfg) as ctx:
        model = build_model(cfg, num_classes=cfg.num_classes or 4)
        results = run_gradcheck(model, cfg.gradcheck_samples, Rng(cfg.seed).child('gradcheck'))
        ctx.write_csv(
            'gradcheck.csv',
            [
                {'group': r.group, 'checked': r.checked, 'max_rel_error': r.max_rel_error, 'verdict': r.verdict}
                for r in results
            ],
            ['group', 'checked', 'max_rel_error', 'verdict'],
        )
        failed = [r.group for r in results if not r.passed]
        ctx.summary = {'groups': len(results), 'failed': failed}
        if failed:
            raise NumericError(f"gradcheck failed for {len(failed)} of {len(results)} groups, first: {failed[0]}")
    return ctx


def ablation_configs(cfg: RunConfig, seed: int) -> Dict[str, RunConfig]:
    """The five classification variants for one seed; all share backbone settings and batches."""
    base = replace(
        cfg,
        seed=seed,
        insert_at=cfg.insert_at or (2,),
        insert_module='trl3d',
        coord_mode='depth',
        fusion_mode='embedding',
    )
    return {name: replace(base, **overrides) for name, overrides in ABLATION_VARIANTS.items()}


def ablate(cfg: RunConfig) -> RunContext:
    with experiment(ExperimentRun.Command.ABLATE, cfg) as ctx:
        data = _load(cfg, ('train', 'test', 'test_unseen'))
        rows = []
        for seed in cfg.ablation_seeds:
            for variant, variant_cfg in ablation_configs(cfg, seed).items():
                logger.info(f"Ablation: training {variant} with seed {seed}")
                model = build_model(variant_cfg)
                train_classifier(model, data.classification['train'], variant_cfg, Rng(seed).child('batches'))
                rows.append({
                    'variant': variant,
                    'seed': seed,
                    'parameters': model.num_parameters(),
                    'train_accuracy': accuracy(model, data.classification['train']),
                    'test_accuracy': accuracy(model, data.classification['test']),
                    'unseen_accuracy': accuracy(model, data.classification['test_unseen']),
                })
        columns = ['variant', 'seed', 'parameters', 'train_accuracy', 'test_accuracy', 'unseen_accuracy']
        ctx.write_csv('ablation.csv', rows, columns)
        frame = pd.DataFrame(rows, columns=columns)
        means = frame.groupby('variant', sort=False)[columns[2:]].mean().reset_index()
        means.insert(1, 'seeds', len(cfg.ablation_seeds))
        ctx.write_csv('ablation_summary.csv', means.to_dict(orient='records'), ['variant', 'seeds'] + columns[2:])
        ctx.summary = {
            str(row['variant']): {'test_accuracy': row['test_accuracy'], 'unseen_accuracy': row['unseen_accuracy']}
            for row in means.to_dict(orient='records')
        }
    return ctx


COMMANDS: Dict[str, Callable[[RunConfig], RunContext]] = {
    'gen_data': gen_data,
    'train_classify': train_classify,
    'train_align': train_align,
    'eval_align': eval_align,
    'eval_depth': eval_depth,
    'eval_camera': eval_camera,
    'gradcheck': gradcheck,
    'ablate': ablate,
}


def run_experiment(command: str, cfg: RunConfig) -> RunContext:
    try:
        service = COMMANDS[command]
    except KeyError:
        raise ConfigError(f"unknown command {command!r}; expected one of {sorted(COMMANDS)}") from None
    return service(cfg)

