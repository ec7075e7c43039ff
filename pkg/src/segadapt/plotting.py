import os

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

from segadapt import logger  # noqa: E402

LOSS_COLUMNS = ['total', 'seg', 'da', 'mi']


def plot_loss_curves(metrics_path, out_path):
    '''
    One line per loss term over the epochs logged in metrics_path.
    Returns the written path, or None when there is nothing to plot.
    '''
    if not os.path.exists(metrics_path):
        return None
    frame = pd.read_csv(metrics_path)
    columns = [c for c in LOSS_COLUMNS if c in frame.columns and frame[c].notna().any()]
    if frame.empty or not columns:
        return None

    fig, ax = plt.subplots(figsize=(8, 4.5))
    x = np.arange(1, len(frame) + 1)
    for column in columns:
        ax.plot(x, frame[column], label=column)
    boundaries = np.flatnonzero(frame['phase'].values[1:] != frame['phase'].values[:-1])
    for boundary in boundaries:
        ax.axvline(boundary + 1.5, color='grey', linestyle=':', linewidth=1)
    ax.set_xlabel('epoch (all phases)')
    ax.set_ylabel('loss')
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path)
    plt.close(fig)
    logger.debug('Wrote %s', out_path)
    return out_path


def plot_iou_bars(frame, out_path):
    '''
    Grouped bars of per-class IoU. frame: one row per run, indexed by run
    name, one column per class (NaN for excluded classes).
    '''
    runs = list(frame.index)
    classes = list(frame.columns)
    width = 0.8 / max(1, len(runs))
    x = np.arange(len(classes))

    fig, ax = plt.subplots(figsize=(max(6, 1.2 * len(classes)), 4.5))
    for i, run in enumerate(runs):
        values = frame.loc[run].astype(float).fillna(0).values
        ax.bar(x + (i - (len(runs) - 1) / 2) * width, values, width, label=str(run))
    ax.set_xticks(x)
    ax.set_xticklabels(classes, rotation=30, ha='right')
    ax.set_ylim(0, 1)
    ax.set_ylabel('IoU')
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path)
    plt.close(fig)
    return out_path
