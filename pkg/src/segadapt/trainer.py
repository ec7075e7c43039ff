'''
Joint objective  L = L_seg + lambda_da * L_da + lambda_mi * L_mi  and the
three training phases built on it:

  source  L_seg on labelled source batches
  ga      per batch: k_d classifier updates on L_D, then k_r updates of the
          network on L_seg + lambda_da * (L_D + L_Dinv) / 2
  ga-ca   as ga, plus lambda_mi * L_mi against pseudo-labels recomputed at
          the start of every epoch

Target labels are only ever read by evaluation.
'''
import dataclasses
import json
import os

import numpy as np
import pandas as pd
from tqdm import tqdm

from segadapt import logger
from segadapt import checkpoint as ckpt
from segadapt.config import ModelConfig, Phase
from segadapt.constrained_mil import class_weights, mil_loss, pseudo_label_image
from segadapt.core_model import SegmentationNet, seg_loss
from segadapt.domain_adversary import (
    DomainClassifier,
    alignment_loss_and_grads,
    classifier_step,
    sample_units,
    unit_accuracy,
)
from segadapt.evaluation import evaluate
from segadapt.exceptions import (
    CheckpointError,
    ConfigurationError,
    InfeasibleConstraintsError,
    LabelSpaceError,
    NonFiniteLossError,
)
from segadapt.label_stats import load_stats
from segadapt.models.manifest import DatasetManifest
from segadapt.models.params import DomainParams, ModelParams
from segadapt.optim import MomentumSGD
from segadapt.plotting import plot_loss_curves
from segadapt.synth_data import load_arrays
from segadapt.utils import derive_seed, resolve_path, write_json

METRICS_FILENAME = 'metrics.csv'
ADVERSARY_FILENAME = 'adversary.csv'
HELD_OUT_IMAGES = 8

# every phase writes the same columns, unused ones left empty
METRICS_COLUMNS = [
    'phase', 'epoch', 'step',
    'total', 'seg', 'da', 'L_D', 'L_Dinv', 'mi',
    'domain_accuracy', 'pseudo_labelled',
    'source_val_miou', 'target_miou',
]
ADVERSARY_COLUMNS = ['phase', 'epoch', 'step', 'L_D', 'L_Dinv', 'heldout_accuracy']


class TrainState():

    __slots__ = [
        'params',
        'dparams',
        'model_velocity',
        'domain_velocity',
        'phase',
        'epoch',
        'step',
        'config_hash',
        'class_names',
    ]

    def __init__(self, **kwargs):
        self.params = kwargs['params']
        self.dparams = kwargs['dparams']
        self.model_velocity = kwargs.get('model_velocity')
        self.domain_velocity = kwargs.get('domain_velocity')
        self.phase = kwargs.get('phase')
        self.epoch = int(kwargs.get('epoch', 0))
        self.step = int(kwargs.get('step', 0))
        self.config_hash = kwargs.get('config_hash')
        self.class_names = list(kwargs.get('class_names') or [])

    def copy(self):
        return TrainState(
            params=self.params.copy(),
            dparams=self.dparams.copy(),
            model_velocity=None if self.model_velocity is None else self.model_velocity.copy(),
            domain_velocity=None if self.domain_velocity is None else self.domain_velocity.copy(),
            phase=self.phase,
            epoch=self.epoch,
            step=self.step,
            config_hash=self.config_hash,
            class_names=self.class_names,
        )


def save_checkpoint(path, state, model_config, domain_hidden, extra=None):
    metadata = dict(extra or {})
    ckpt.save(
        path,
        {
            'params': state.params,
            'dparams': state.dparams,
            'model_velocity': state.model_velocity,
            'domain_velocity': state.domain_velocity,
        },
        metadata=dict(metadata, **{
            'phase': state.phase,
            'epoch': state.epoch,
            'step': state.step,
            'config_hash': state.config_hash,
            'class_names': state.class_names,
            'model_config': dataclasses.asdict(model_config),
            'domain_hidden': domain_hidden,
        })
    )
    logger.debug('Saved checkpoint %s', path)


def load_checkpoint(path, expected_hash=None):
    '''
    Returns (TrainState, ModelConfig, domain hidden width, metadata). Raises before
    building anything if the file is corrupt or belongs to another config.
    '''
    groups, metadata = ckpt.load(path)
    if expected_hash is not None and metadata.get('config_hash') != expected_hash:
        raise CheckpointError(
            f'Checkpoint {path} was written with config {metadata.get("config_hash")}, '
            f'refusing to resume with config {expected_hash}'
        )
    try:
        model_config = ModelConfig(**metadata['model_config'])
        domain_hidden = int(metadata['domain_hidden'])
    except (KeyError, TypeError) as ex:
        raise CheckpointError(f'Checkpoint {path} lacks architecture metadata: {ex}')
    if 'params' not in groups or 'dparams' not in groups:
        raise CheckpointError(f'Checkpoint {path} lacks parameter groups')

    def group(name, cls):
        return cls(data=groups[name]) if name in groups else None

    state = TrainState(
        params=group('params', ModelParams),
        dparams=group('dparams', DomainParams),
        model_velocity=group('model_velocity', ModelParams),
        domain_velocity=group('domain_velocity', DomainParams),
        phase=metadata.get('phase'),
        epoch=metadata.get('epoch', 0),
        step=metadata.get('step', 0),
        config_hash=metadata.get('config_hash'),
        class_names=metadata.get('class_names'),
    )
    net = SegmentationNet(model_config)
    state.params.check_shapes(net.param_shapes())
    state.dparams.check_shapes(DomainClassifier(net.feature_channels, domain_hidden).param_shapes())
    return state, model_config, domain_hidden, metadata


class Datasets():

    __slots__ = [
        'source_images',
        'source_labels',
        'source_val_images',
        'source_val_labels',
        'target_images',
        'target_test_images',
        'target_test_labels',
        'class_names',
    ]

    def __init__(self, **kwargs):
        for name in self.__slots__:
            setattr(self, name, kwargs.get(name))

    @staticmethod
    def load(config, phase, workdir=None):
        phase = Phase.parse(phase)
        datasets = Datasets()
        if not config.source_train:
            raise ConfigurationError('source_train manifest is required for every phase')

        manifest = DatasetManifest.load(resolve_path(config.source_train, workdir))
        datasets.class_names = manifest.class_names
        if manifest.num_classes != config.model.num_classes:
            raise LabelSpaceError(
                f'Source manifest has {manifest.num_classes} classes, model expects {config.model.num_classes}'
            )
        datasets.source_images, datasets.source_labels = load_arrays(manifest)
        if config.source_val:
            datasets.source_val_images, datasets.source_val_labels = load_arrays(
                DatasetManifest.load(resolve_path(config.source_val, workdir))
            )

        if phase is Phase.SOURCE:
            return datasets

        if not config.target_train:
            raise ConfigurationError(f'target_train manifest is required for phase {phase.value}')
        datasets.target_images, _ = load_arrays(
            DatasetManifest.load(resolve_path(config.target_train, workdir)), with_labels=False
        )
        if config.target_test:
            datasets.target_test_images, datasets.target_test_labels = load_arrays(
                DatasetManifest.load(resolve_path(config.target_test, workdir))
            )
        return datasets


class JointLoss():

    __slots__ = [
        'total',
        'terms',
        'grads',
    ]

    def __init__(self, **kwargs):
        self.total = kwargs['total']
        self.terms = kwargs['terms']
        self.grads = kwargs['grads']


def joint_loss(net, classifier, params, dparams, batch_src, batch_tgt=None,
               lambda_da=0.0, lambda_mi=0.0, pseudo=None, weights=None,
               normalize_by_units=True, unit_masks=(None, None)):
    '''
    batch_src: (images, labels); batch_tgt: target images.
    pseudo: (Q N x C x H x W, N x H x W mask) for the target batch.
    Gradients flow to ModelParams only.
    '''
    images_src, labels_src = batch_src
    fwd_src = net.forward(params, images_src)
    seg, d_scores_src = seg_loss(fwd_src.scores, labels_src)
    terms = {'seg': seg}
    total = seg

    d_feats_src = None
    d_feats_tgt = None
    d_scores_tgt = None
    use_da = lambda_da > 0
    use_mi = lambda_mi > 0 and pseudo is not None
    fwd_tgt = None
    if (use_da or use_mi) and batch_tgt is not None:
        fwd_tgt = net.forward(params, batch_tgt, scores=use_mi)

    if use_da and fwd_tgt is not None:
        da, d_src, d_tgt, details = alignment_loss_and_grads(
            classifier, dparams, fwd_src.features, fwd_tgt.features,
            normalize_by_units, unit_masks[0], unit_masks[1]
        )
        terms.update(da=da, L_D=details['L_D'], L_Dinv=details['L_Dinv'])
        total = total + lambda_da * da
        d_feats_src = lambda_da * d_src
        d_feats_tgt = lambda_da * d_tgt

    if use_mi and fwd_tgt is not None:
        q, mask = pseudo
        mi, d_scores = mil_loss(fwd_tgt.scores, q, weights, mask)
        terms['mi'] = mi
        total = total + lambda_mi * mi
        d_scores_tgt = lambda_mi * d_scores

    for name, value in terms.items():
        if not np.isfinite(value):
            raise NonFiniteLossError(name, {k: float(v) for k, v in terms.items()})

    grads = net.backward(params, fwd_src, d_scores=d_scores_src, d_features=d_feats_src)
    if fwd_tgt is not None and (d_feats_tgt is not None or d_scores_tgt is not None):
        grads_tgt = net.backward(params, fwd_tgt, d_scores=d_scores_tgt, d_features=d_feats_tgt)
        for name in grads:
            grads[name] += grads_tgt[name]
    return JointLoss(total=total, terms=terms, grads=grads)


class Trainer():

    def __init__(self, config, workdir='.', stats=None, dump_constraints=None, progress=True):
        self.config = config
        self.workdir = workdir
        self.net = SegmentationNet(config.model)
        self.classifier = DomainClassifier(self.net.feature_channels, config.domain.hidden)
        self.stats = stats
        self.dump_constraints = config.dump_constraints if dump_constraints is None else dump_constraints
        self.progress = progress

    def path(self, *parts):
        return os.path.join(self.workdir, *parts)

    def initial_state(self, class_names=None):
        return TrainState(
            params=self.net.init_params(self.config.seed),
            dparams=self.classifier.init_params(derive_seed(self.config.seed, 'domain')),
            config_hash=self.config.hash,
            class_names=class_names,
        )

    def save(self, state, name):
        path = self.path('checkpoints', name)
        save_checkpoint(path, state, self.config.model, self.config.domain.hidden,
                        extra={'seed': self.config.seed})
        return path

    def load(self, path):
        state, model_config, _, _ = load_checkpoint(path, expected_hash=self.config.hash)
        if model_config != self.config.model:
            raise CheckpointError(f'Checkpoint {path} architecture differs from the config')
        return state

    def _require(self, phase, datasets):
        if datasets.source_images is None or datasets.source_labels is None:
            raise ConfigurationError('Labelled source data is required')
        if phase is not Phase.SOURCE and datasets.target_images is None:
            raise ConfigurationError(f'Phase {phase.value} requires target images')
        if phase is Phase.GA_CA and self.stats is None:
            if not self.config.stats:
                raise ConfigurationError('Phase ga-ca requires class statistics (config key: stats)')
            self.stats = load_stats(resolve_path(self.config.stats, self.workdir))
        if phase is Phase.GA_CA and self.stats.num_classes != self.net.num_classes:
            raise LabelSpaceError('Class statistics and model disagree on the number of classes')

    def _pseudo_labels(self, params, images, epoch):
        q = np.zeros((len(images), self.net.num_classes) + images.shape[1:3])
        has_label = np.zeros(len(images), dtype=bool)
        records = []
        for start in range(0, len(images), self.config.batch_size):
            scores = self.net.forward(params, images[start:start + self.config.batch_size]).scores
            for offset, image_scores in enumerate(scores):
                index = start + offset
                try:
                    pseudo = pseudo_label_image(
                        image_scores, self.stats,
                        solver=self.config.projection_solver,
                        slack_penalty=self.config.slack_penalty,
                    )
                except InfeasibleConstraintsError as ex:
                    logger.warning('Target image %s skipped: %s', index, ex)
                    continue
                if pseudo is None:
                    continue
                q[index] = pseudo.latent.q
                has_label[index] = True
                if self.dump_constraints:
                    records.append(dict(image=index, epoch=epoch, **pseudo.serialize()))

        if self.dump_constraints:
            dump_path = self.path('constraints', f'epoch{epoch:03d}.jsonl')
            os.makedirs(os.path.dirname(dump_path), exist_ok=True)
            with open(dump_path, 'w') as f:
                for record in records:
                    f.write(json.dumps(record, sort_keys=True) + '\n')
        logger.info('Pseudo-labelled %s/%s target images', int(has_label.sum()), len(images))
        return q, has_label

    def _held_out(self, datasets):
        if datasets.source_val_images is not None:
            src = datasets.source_val_images[:HELD_OUT_IMAGES]
        else:
            src = datasets.source_images[-HELD_OUT_IMAGES:]
        if datasets.target_test_images is not None:
            tgt = datasets.target_test_images[:HELD_OUT_IMAGES]
        else:
            tgt = datasets.target_images[-HELD_OUT_IMAGES:]
        return src, tgt

    def _domain_accuracy(self, params, dparams, held_src, held_tgt):
        feats_src = self.net.forward(params, held_src, scores=False).features
        feats_tgt = self.net.forward(params, held_tgt, scores=False).features
        p_src, _ = self.classifier.forward(dparams, feats_src)
        p_tgt, _ = self.classifier.forward(dparams, feats_tgt)
        return unit_accuracy([p_src], [p_tgt])

    def _append_rows(self, filename, rows, columns):
        if not rows:
            return
        path = self.path(filename)
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        exists = os.path.exists(path)
        if exists:
            with open(path) as f:
                header = f.readline().strip().split(',')
            if header != columns:
                raise ConfigurationError(
                    f'{path} was written with columns {header}, expected {columns}; move it aside'
                )
        pd.DataFrame(rows, columns=columns).to_csv(path, mode='a', header=not exists, index=False)

    def _evaluate(self, phase, params, datasets):
        row = {}
        if datasets.source_val_images is not None:
            result, _ = evaluate(self.net, params, datasets.source_val_images, datasets.source_val_labels)
            row['source_val_miou'] = result.miou
        if phase is not Phase.SOURCE and datasets.target_test_images is not None:
            result, _ = evaluate(self.net, params, datasets.target_test_images, datasets.target_test_labels)
            row['target_miou'] = result.miou
        return row

    def run_phase(self, phase, state, datasets):
        phase = Phase.parse(phase)
        phase_index, phase_config = self.config.phase_config(phase)
        self._require(phase, datasets)
        state = state.copy()
        state.class_names = state.class_names or list(datasets.class_names or [])

        if state.phase == phase.value:
            start_epoch = state.epoch
        else:
            state.phase = phase.value
            state.epoch = 0
            state.model_velocity = None
            state.domain_velocity = None
            start_epoch = 0

        metrics = []
        if start_epoch >= phase_config.epochs:
            return state, metrics

        model_optimizer = MomentumSGD(phase_config.learning_rate, self.config.momentum, state.model_velocity)
        domain_optimizer = MomentumSGD(
            self.config.classifier_learning_rate, self.config.momentum, state.domain_velocity
        )
        weights = class_weights(self.stats) if phase is Phase.GA_CA else None
        adversarial = phase is not Phase.SOURCE
        held_src, held_tgt = self._held_out(datasets) if adversarial else (None, None)
        lambda_da = self.config.lambda_da if adversarial else 0.0
        lambda_mi = self.config.lambda_mi if phase is Phase.GA_CA else 0.0
        batch_size = self.config.batch_size
        n_src = len(datasets.source_images)
        n_batches = int(np.ceil(n_src / batch_size))

        try:
            for epoch in range(start_epoch, phase_config.epochs):
                rng = np.random.default_rng([self.config.seed, phase_index, epoch])
                src_order = rng.permutation(n_src)
                tgt_order = rng.permutation(len(datasets.target_images)) if adversarial else None
                pseudo = None
                if phase is Phase.GA_CA:
                    pseudo = self._pseudo_labels(state.params, datasets.target_images, epoch)

                sums = {}
                adversary_rows = []
                batches = tqdm(
                    range(n_batches),
                    desc=f'{phase.value} epoch {epoch + 1}/{phase_config.epochs}',
                    disable=not self.progress,
                    leave=False,
                )
                for batch in batches:
                    src_idx = src_order[batch * batch_size:(batch + 1) * batch_size]
                    batch_src = (datasets.source_images[src_idx], datasets.source_labels[src_idx])
                    batch_tgt = None
                    tgt_idx = None
                    if adversarial:
                        positions = np.arange(batch * batch_size, batch * batch_size + len(src_idx))
                        tgt_idx = tgt_order[positions % len(tgt_order)]
                        batch_tgt = datasets.target_images[tgt_idx]
                        adversary_rows.append(
                            self._classifier_updates(state, batch_src[0], batch_tgt, domain_optimizer,
                                                     rng, held_src, held_tgt, phase, epoch)
                        )

                    batch_pseudo = None
                    if pseudo is not None:
                        q, has_label = pseudo
                        mask = np.broadcast_to(
                            has_label[tgt_idx][:, None, None], (len(tgt_idx),) + q.shape[2:]
                        )
                        batch_pseudo = (q[tgt_idx], mask)

                    result = None
                    for _ in range(self.config.k_r if adversarial else 1):
                        unit_masks = self._unit_masks(batch_src[0], batch_tgt, rng) \
                            if adversarial else (None, None)
                        result = joint_loss(
                            self.net, self.classifier, state.params, state.dparams,
                            batch_src, batch_tgt,
                            lambda_da=lambda_da, lambda_mi=lambda_mi,
                            pseudo=batch_pseudo, weights=weights,
                            normalize_by_units=self.config.normalize_by_units,
                            unit_masks=unit_masks,
                        )
                        model_optimizer.step(state.params, result.grads)
                    if result is not None:
                        for name, value in result.terms.items():
                            sums[name] = sums.get(name, 0.0) + value
                        sums['total'] = sums.get('total', 0.0) + result.total
                    state.step += 1

                state.epoch = epoch + 1
                state.model_velocity = model_optimizer.velocity
                state.domain_velocity = domain_optimizer.velocity

                row = {'phase': phase.value, 'epoch': state.epoch, 'step': state.step}
                row.update({name: value / n_batches for name, value in sums.items()})
                if adversary_rows:
                    row['domain_accuracy'] = adversary_rows[-1]['heldout_accuracy']
                if pseudo is not None:
                    row['pseudo_labelled'] = int(pseudo[1].sum())
                if state.epoch % self.config.eval_every == 0 or state.epoch == phase_config.epochs:
                    row.update(self._evaluate(phase, state.params, datasets))
                metrics.append(row)
                self._append_rows(ADVERSARY_FILENAME, adversary_rows, ADVERSARY_COLUMNS)
                self._append_rows(METRICS_FILENAME, [row], METRICS_COLUMNS)
                logger.info(
                    'Phase %s epoch %s/%s: %s', phase.value, state.epoch, phase_config.epochs,
                    ', '.join(f'{k}={v:.4f}' for k, v in row.items() if isinstance(v, float))
                )

                if state.epoch % self.config.checkpoint_every == 0:
                    self.save(state, f'{phase.value}_epoch{state.epoch:03d}.ckpt')
        except NonFiniteLossError as ex:
            write_json(self.path('nonfinite_dump.json'), {
                'phase': phase.value,
                'epoch': state.epoch,
                'step': state.step,
                'term': ex.term,
                'diagnostics': ex.diagnostics,
            })
            logger.error('Aborting: %s (state dumped to nonfinite_dump.json)', ex)
            raise

        self.save(state, f'{phase.value}.ckpt')
        plot_loss_curves(self.path(METRICS_FILENAME), self.path(f'loss_{phase.value}.png'))
        return state, metrics

    def _unit_masks(self, images_src, images_tgt, rng):
        if self.config.unit_sample is None:
            return None, None
        grid = self.net.downsample_factor
        shape_src = (len(images_src), images_src.shape[1] // grid, images_src.shape[2] // grid)
        shape_tgt = (len(images_tgt), images_tgt.shape[1] // grid, images_tgt.shape[2] // grid)
        return (
            sample_units(shape_src, self.config.unit_sample, rng),
            sample_units(shape_tgt, self.config.unit_sample, rng),
        )

    def _classifier_updates(self, state, images_src, images_tgt, optimizer, rng,
                            held_src, held_tgt, phase, epoch):
        feats_src = self.net.forward(state.params, images_src, scores=False).features
        feats_tgt = self.net.forward(state.params, images_tgt, scores=False).features
        losses = []
        for _ in range(self.config.k_d):
            mask_src, mask_tgt = self._unit_masks(images_src, images_tgt, rng)
            losses.append(classifier_step(
                self.classifier, state.dparams, feats_src, feats_tgt, optimizer,
                self.config.normalize_by_units, mask_src, mask_tgt
            ))
        _, _, _, terms = alignment_loss_and_grads(
            self.classifier, state.dparams, feats_src, feats_tgt, self.config.normalize_by_units
        )
        return {
            'phase': phase.value,
            'epoch': epoch + 1,
            'step': state.step,
            'L_D': terms['L_D'],
            'L_Dinv': terms['L_Dinv'],
            'heldout_accuracy': self._domain_accuracy(state.params, state.dparams, held_src, held_tgt),
        }


def run_phase(phase, state, datasets, config, workdir='.', stats=None, progress=True):
    return Trainer(config, workdir, stats=stats, progress=progress).run_phase(phase, state, datasets)
