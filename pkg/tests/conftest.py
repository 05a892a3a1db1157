import os
import sys
from pathlib import Path
from unittest.mock import Mock

import numpy as np
import pytest

# Add the src directory to the Python path
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..', 'src')))

from pipelines.dataset import Case, CaseStore, split_cases  # noqa: E402
from volumes.phantom import PhantomConfig, generate_case  # noqa: E402
from volumes.volgrid import LabelMask, Spacing, Volume  # noqa: E402

FIXTURES = Path(__file__).parent / 'fixtures'


def pytest_collection_modifyitems(config, items):
    if os.environ.get('SEGMENT_RUN_SLOW') == '1':
        return
    skip_slow = pytest.mark.skip(reason='set SEGMENT_RUN_SLOW=1 to run')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_phantom_config():
    return PhantomConfig(
        shape=(24, 32, 32),
        nerve_radius=(1, 2),
        bone_size=(4, 8),
        seed=3,
    )


@pytest.fixture
def small_cases(small_phantom_config):
    cases = []
    for i in range(10):
        ct, label = generate_case(small_phantom_config, 100 + i)
        cases.append(Case(f'case_{i:03d}', ct, label))
    return cases


@pytest.fixture
def small_store(small_cases):
    store = CaseStore(small_cases)
    split = split_cases(store.case_ids(), seed=0, fold=0, n_folds=5, test_fraction=0.2)
    return store.with_split(split)


@pytest.fixture
def random_labels(rng):
    def _make(shape=(6, 7, 8), spacing=Spacing(1.0, 1.0, 1.0)):
        return LabelMask(rng.integers(0, 3, size=shape).astype(np.uint8), spacing)
    return _make


@pytest.fixture
def random_volume(rng):
    def _make(shape=(6, 7, 8), spacing=Spacing(1.0, 1.0, 1.0)):
        return Volume(rng.normal(size=shape).astype(np.float32), spacing)
    return _make


@pytest.fixture
def mock_prometheus_client():
    return {
        'Counter': Mock(return_value=Mock()),
        'Gauge': Mock(return_value=Mock()),
        'Histogram': Mock(return_value=Mock())
    }


@pytest.fixture
def tiny_run_config(tmp_path):
    """YAML run config small enough to train end to end in seconds."""
    path = tmp_path / 'tiny.yaml'
    path.write_text(
        'phantom:\n'
        '  cases: 10\n'
        '  shape: [24, 32, 32]\n'
        '  nerve_radius: [1, 2]\n'
        '  bone_size: [4, 8]\n'
        '  seed: 3\n'
        'model:\n'
        '  levels: 2\n'
        '  base_channels: 2\n'
        'train:\n'
        '  lr: 0.01\n'
        '  loss_reduction: mean\n'
        '  batch_size: 2\n'
        '  patch: [8, 16, 16]\n'
        '  stride: [8, 16, 16]\n'
        '  total_epochs: 2\n'
        '  iterations_per_epoch: 3\n'
        '  validation_interval: 2\n'
        '  validation_cases: 1\n'
        '  seed: 5\n'
        'logging:\n'
        '  level: WARNING\n'
        '  format: console\n'
    )
    return path


@pytest.fixture
def published_tables():
    """Per-case percentages from the published result tables, keyed by (table, class)."""
    rows = {}
    lines = (FIXTURES / 'published_tables.csv').read_text().splitlines()
    for line in lines[1:]:
        if not line.strip():
            continue
        table, class_name, *values = line.split(',')
        rows[(table, class_name)] = [float(v) for v in values]
    return rows
