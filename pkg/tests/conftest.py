"""Shared fixtures: a small synthetic dataset and a trained model.

The dataset is deliberately tiny (90 scans over a 3x3 protocol grid) so the
training-dependent tests stay fast while still covering every label.
"""

import numpy as np
import pytest

from mrcontrast.labels import GridSpec, LabelConfig, build_label_space
from mrcontrast.synth import SynthConfig, default_protocols, generate_dataset
from mrcontrast.train import RunConfig, train_model


@pytest.fixture(scope="session")
def tiny_dataset():
    protocols = default_protocols(
        n_te_cells=3,
        n_tr_cells=3,
        scanners=(("SIEMENS", "AVANTO"),),
        field_strengths=(1.5,),
    )
    config = SynthConfig(n_scans=90, slices_per_scan=4, seed=5)
    slices = generate_dataset(protocols, config)
    label_config = LabelConfig(grid=GridSpec(n_te=3, n_tr=3))
    space, label_ids = build_label_space(
        [s.record for s in slices], label_config
    )
    return slices, space, label_ids


@pytest.fixture(scope="session")
def tiny_run(tiny_dataset):
    slices, space, label_ids = tiny_dataset
    run = RunConfig(batch_size=64, epochs=4, seed=0, warmup_steps=10)
    state = train_model(slices, space, np.asarray(label_ids), run)
    return slices, space, np.asarray(label_ids), run, state
