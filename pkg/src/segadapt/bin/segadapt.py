import argparse
import glob
import json
import os
import sys

import numpy as np
import pandas as pd

from segadapt import logger
from segadapt.config import Phase, load_config
from segadapt.core_model import SegmentationNet
from segadapt.domain_adversary import domain_separability
from segadapt.evaluation import evaluate
from segadapt.exceptions import ConfigurationError, LabelSpaceError, ParseError, SegAdaptError
from segadapt.label_stats import compute_stats, save_stats
from segadapt.models.manifest import DatasetManifest
from segadapt.plotting import plot_iou_bars
from segadapt.synth_data import PRESETS, generate_domain, load_arrays, split_config
from segadapt.trainer import Datasets, Trainer, load_checkpoint
from segadapt.utils import atomic_write_text, resolve_path, workdir_lock, write_json

METHOD_NAMES = {
    Phase.SOURCE.value: 'source-only',
    Phase.GA.value: 'GA only',
    Phase.GA_CA.value: 'GA + CA',
}

# a phase resumes from its own latest checkpoint, else from the phase before it
RESUME_FALLBACKS = {
    Phase.SOURCE.value: [],
    Phase.GA.value: [Phase.SOURCE.value],
    Phase.GA_CA.value: [Phase.GA.value, Phase.SOURCE.value],
}


def cmd_gen_data(args, workdir):
    out = resolve_path(args.out, workdir)
    held_out = max(1, args.n // 4)
    for domain, split, n in (
        ('source', 'train', args.n),
        ('source', 'val', held_out),
        ('target', 'train', args.n),
        ('target', 'test', held_out),
    ):
        config = split_config(args.preset, args.seed, domain, split)
        generate_domain(config, n, os.path.join(out, domain, split), split=split, domain=domain)


def cmd_stats(args, workdir):
    manifest = DatasetManifest.load(resolve_path(args.manifest, workdir))
    _, labels = load_arrays(manifest)
    stats = compute_stats(list(labels), manifest.num_classes, manifest.class_names)
    save_stats(stats, resolve_path(args.out, workdir))
    for stat in stats:
        name = stats.class_names[stat.class_id] if stats.class_names else '-'
        if not stat.usable:
            logger.info('Class %s (%s): never present, unusable', stat.class_id, name)
            continue
        logger.info(
            'Class %s (%s): alpha=%.4f delta=%.4f gamma=%.4f n=%s',
            stat.class_id, name, stat.alpha, stat.delta, stat.gamma, stat.n
        )


def find_resume_checkpoint(workdir, phase):
    checkpoints = os.path.join(workdir, 'checkpoints')
    own_final = os.path.join(checkpoints, f'{phase}.ckpt')
    if os.path.exists(own_final):
        return own_final
    own_epochs = sorted(glob.glob(os.path.join(checkpoints, f'{phase}_epoch*.ckpt')))
    if own_epochs:
        return own_epochs[-1]
    for previous in RESUME_FALLBACKS[phase]:
        path = os.path.join(checkpoints, f'{previous}.ckpt')
        if os.path.exists(path):
            return path
    raise ConfigurationError(f'No checkpoint to resume phase {phase} from in {checkpoints}')


def cmd_train(args, workdir):
    phase = Phase.parse(args.phase)
    config = load_config(resolve_path(args.config, workdir))
    trainer = Trainer(config, workdir, dump_constraints=True if args.dump_constraints else None)
    datasets = Datasets.load(config, phase, workdir)

    if args.resume is None:
        state = trainer.initial_state(datasets.class_names)
    else:
        path = find_resume_checkpoint(workdir, phase.value) if args.resume == 'auto' \
            else resolve_path(args.resume, workdir)
        logger.info('Resuming from %s', path)
        state = trainer.load(path)

    state, metrics = trainer.run_phase(phase, state, datasets)
    if metrics:
        logger.info('Phase %s finished after %s epochs (%s steps)', phase.value, state.epoch, state.step)
    else:
        logger.info('Phase %s had nothing left to run', phase.value)


def cmd_eval(args, workdir):
    state, model_config, _, metadata = load_checkpoint(resolve_path(args.checkpoint, workdir))
    manifest = DatasetManifest.load(resolve_path(args.manifest, workdir))
    if manifest.num_classes != model_config.num_classes:
        raise LabelSpaceError(
            f'Manifest has {manifest.num_classes} classes, checkpoint has {model_config.num_classes}'
        )
    if state.class_names and state.class_names != manifest.class_names:
        raise LabelSpaceError(
            f'Class names differ: checkpoint {state.class_names}, manifest {manifest.class_names}'
        )

    images, labels = load_arrays(manifest)
    result, cm = evaluate(SegmentationNet(model_config), state.params, images, labels)
    write_json(resolve_path(args.out, workdir), {
        'method': METHOD_NAMES.get(state.phase, state.phase),
        'phase': state.phase,
        'epoch': state.epoch,
        'checkpoint': args.checkpoint,
        'manifest': args.manifest,
        'config_hash': state.config_hash,
        'seed': metadata.get('seed'),
        'class_names': manifest.class_names,
        'iou': result.serialize(),
        'confusion': cm.serialize(),
    })
    logger.info('%s on %s: mIoU %.4f', METHOD_NAMES.get(state.phase, state.phase), args.manifest, result.miou)


def _read_eval(path):
    try:
        with open(path) as f:
            data = json.load(f)
        return data, data['class_names'], data['iou']
    except OSError as ex:
        raise ParseError(f'Cannot read eval result {path}: {ex}', entry=path)
    except (ValueError, KeyError, TypeError) as ex:
        raise ParseError(f'Malformed eval result {path}: {ex}', entry=path)


def build_report(evals):
    '''
    One row per eval result, one column per class plus mIoU, config hash and seed.
    Nothing is recomputed.
    '''
    rows = []
    class_names = None
    for path in evals:
        data, names, iou = _read_eval(path)
        if class_names is None:
            class_names = names
        elif names != class_names:
            raise LabelSpaceError(f'{path} uses classes {names}, expected {class_names}')
        row = {'method': data.get('method') or data.get('phase')}
        row.update({
            name: (np.nan if value is None else value)
            for name, value in zip(class_names, iou['per_class'])
        })
        row['mIoU'] = np.nan if iou['miou'] is None else iou['miou']
        row['config_hash'] = data.get('config_hash')
        row['seed'] = data.get('seed')
        rows.append(row)

    frame = pd.DataFrame(rows)
    if frame['method'].duplicated().any():
        frame['method'] = [f'{m} (seed {s})' for m, s in zip(frame['method'], frame['seed'])]
    if frame['method'].duplicated().any():
        frame['method'] = [f'{m} #{i + 1}' for i, m in enumerate(frame['method'])]
    return frame.set_index('method'), class_names


def cmd_report(args, workdir):
    frame, class_names = build_report([resolve_path(p, workdir) for p in args.evals])
    out = resolve_path(args.out, workdir)
    os.makedirs(out, exist_ok=True)
    frame.to_csv(os.path.join(out, 'report.csv'))
    table = frame[list(class_names) + ['mIoU']].to_string(float_format=lambda v: f'{100 * v:.1f}')
    atomic_write_text(os.path.join(out, 'report.txt'), table + '\n')
    plot_iou_bars(frame[list(class_names)], os.path.join(out, 'report_iou.png'))
    print(table)


def cmd_separability(args, workdir):
    state, model_config, domain_hidden, _ = load_checkpoint(resolve_path(args.checkpoint, workdir))
    net = SegmentationNet(model_config)

    def features(manifest_path):
        images, _ = load_arrays(
            DatasetManifest.load(resolve_path(manifest_path, workdir)), with_labels=False
        )
        return np.concatenate([
            net.forward(state.params, images[start:start + 16], scores=False).features
            for start in range(0, len(images), 16)
        ])

    accuracy = domain_separability(
        features(args.source), features(args.target),
        hidden=domain_hidden, steps=args.steps, seed=args.seed,
    )
    logger.info('Held-out accuracy of a fresh domain classifier: %.4f', accuracy)
    if args.out:
        write_json(resolve_path(args.out, workdir), {
            'checkpoint': args.checkpoint,
            'phase': state.phase,
            'accuracy': accuracy,
            'steps': args.steps,
            'seed': args.seed,
        })


def build_parser():
    parser = argparse.ArgumentParser(
        prog='segadapt',
        description='Adversarial and constrained pseudo-label domain adaptation for segmentation'
    )
    parser.add_argument('--workdir', default='.', help='Root for every relative path (env: SEGADAPT_WORKDIR)')
    subparsers = parser.add_subparsers(dest='command', required=True)

    gen_data = subparsers.add_parser('gen-data', help='Render synthetic source and shifted target scenes')
    gen_data.add_argument('--preset', choices=sorted(PRESETS), default='medium')
    gen_data.add_argument('--seed', type=int, default=0)
    gen_data.add_argument('--out', required=True)
    gen_data.add_argument('--n', type=int, default=200)
    gen_data.set_defaults(func=cmd_gen_data)

    stats = subparsers.add_parser('stats', help='Per-class coverage statistics of a labelled manifest')
    stats.add_argument('--manifest', required=True)
    stats.add_argument('--out', required=True)
    stats.set_defaults(func=cmd_stats)

    train = subparsers.add_parser('train', help='Run one training phase')
    train.add_argument('--phase', choices=[p.value for p in Phase], required=True)
    train.add_argument('--config', required=True)
    train.add_argument(
        '--resume', nargs='?', const='auto', default=None,
        help='Checkpoint to start from; without a value the latest suitable one in the workdir'
    )
    train.add_argument('--dump-constraints', action='store_true')
    train.set_defaults(func=cmd_train)

    evaluate_cmd = subparsers.add_parser('eval', help='Per-class IoU of a checkpoint on a manifest')
    evaluate_cmd.add_argument('--checkpoint', required=True)
    evaluate_cmd.add_argument('--manifest', required=True)
    evaluate_cmd.add_argument('--out', required=True)
    evaluate_cmd.set_defaults(func=cmd_eval)

    report = subparsers.add_parser('report', help='Aggregate eval results into a table and plot')
    report.add_argument('--evals', nargs='+', required=True)
    report.add_argument('--out', required=True)
    report.set_defaults(func=cmd_report)

    separability = subparsers.add_parser(
        'separability', help='Held-out accuracy of a fresh domain classifier on frozen features'
    )
    separability.add_argument('--checkpoint', required=True)
    separability.add_argument('--source', required=True)
    separability.add_argument('--target', required=True)
    separability.add_argument('--out')
    separability.add_argument('--steps', type=int, default=300)
    separability.add_argument('--seed', type=int, default=0)
    separability.set_defaults(func=cmd_separability)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as ex:
        return ex.code
    if getattr(args, 'n', 1) < 1:
        parser.print_usage(sys.stderr)
        return 2

    workdir = os.environ.get('SEGADAPT_WORKDIR') or args.workdir
    try:
        with workdir_lock(workdir):
            args.func(args, workdir)
    except SegAdaptError as ex:
        logger.error('%s: %s', type(ex).__name__, ex)
        return 1
    return 0


if __name__ == '__main__':
    sys.exit(main())
