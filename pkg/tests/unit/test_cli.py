import pytest

import main
from main import build_parser
from utils.errors import DivergenceError
from volumes.phantom import MANIFEST_NAME
from volumes.volgrid import load_svol

pytestmark = pytest.mark.unit


@pytest.fixture
def phantom_dir(tmp_path, tiny_run_config):
    data = tmp_path / 'data'
    assert main.main(['phantom', '--config', str(tiny_run_config), '--out', str(data)]) == 0
    return data


def test_parser_requires_a_command():
    with pytest.raises(SystemExit):
        build_parser().parse_args([])


def test_unknown_flag_is_usage_error():
    assert main.main(['phantom', '--bogus']) == 2


def test_phantom_requires_out(tiny_run_config):
    assert main.main(['phantom', '--config', str(tiny_run_config)]) == 2


def test_phantom_writes_dataset(phantom_dir):
    assert len(list(phantom_dir.glob('*.svol'))) == 20
    assert (phantom_dir / MANIFEST_NAME).exists()


def test_phantom_prints_manifest_path(tmp_path, tiny_run_config, capsys):
    out = tmp_path / 'again'
    assert main.main(['phantom', '--config', str(tiny_run_config), '--out', str(out), '--cases', '5']) == 0
    assert capsys.readouterr().out.strip() == str(out / MANIFEST_NAME)
    assert len(list(out.glob('ct_*.svol'))) == 5


def test_phantom_rerun_is_identical(tmp_path, tiny_run_config):
    a, b = tmp_path / 'a', tmp_path / 'b'
    for out in (a, b):
        assert main.main(['phantom', '--config', str(tiny_run_config), '--out', str(out), '--seed', '7']) == 0
    for path in sorted(a.iterdir()):
        assert path.read_bytes() == (b / path.name).read_bytes()


def test_config_errors_exit_2(tmp_path):
    bad = tmp_path / 'bad.yaml'
    bad.write_text('train:\n  learning_rate: 0.1\n')
    assert main.main(['phantom', '--config', str(bad), '--out', str(tmp_path / 'x')]) == 2


def test_infer_with_oracle_label(phantom_dir, tmp_path, tiny_run_config, capsys):
    capsys.readouterr()
    out = tmp_path / 'pred.svol'
    overlays = tmp_path / 'overlays'
    code = main.main([
        'infer', str(phantom_dir / 'ct_0.svol'),
        '--oracle-label', str(phantom_dir / 'label_0.svol'),
        '--config', str(tiny_run_config),
        '--out', str(out),
        '--overlay-dir', str(overlays),
    ])
    assert code == 0
    prediction, truth = load_svol(out), load_svol(phantom_dir / 'label_0.svol')
    assert prediction.shape == truth.shape
    assert prediction.equals(truth)
    path, seconds = capsys.readouterr().out.strip().split('\t')
    assert path == str(out) and seconds.endswith('s')
    assert len(list(overlays.glob('slice_*.png'))) == truth.shape[0]


def test_infer_unreadable_input_exits_3(tmp_path, tiny_run_config):
    code = main.main([
        'infer', str(tmp_path / 'missing.svol'),
        '--oracle-label', str(tmp_path / 'missing_label.svol'),
        '--config', str(tiny_run_config),
        '--out', str(tmp_path / 'pred.svol'),
    ])
    assert code == 3


def test_infer_needs_checkpoint_or_oracle(phantom_dir, tmp_path, tiny_run_config):
    code = main.main([
        'infer', str(phantom_dir / 'ct_0.svol'),
        '--config', str(tiny_run_config),
        '--out', str(tmp_path / 'pred.svol'),
    ])
    assert code == 2


def test_infer_rejects_label_as_ct(phantom_dir, tmp_path, tiny_run_config):
    code = main.main([
        'infer', str(phantom_dir / 'label_0.svol'),
        '--oracle-label', str(phantom_dir / 'label_0.svol'),
        '--config', str(tiny_run_config),
        '--out', str(tmp_path / 'pred.svol'),
    ])
    assert code == 3


def test_evaluate_oracle_is_perfect(phantom_dir, tmp_path, tiny_run_config, capsys):
    capsys.readouterr()
    out = tmp_path / 'eval'
    code = main.main([
        'evaluate', '--oracle', '--data', str(phantom_dir),
        '--config', str(tiny_run_config), '--out', str(out),
    ])
    assert code == 0
    assert (out / 'metrics.csv').exists()
    tables = (out / 'tables.txt').read_text()
    assert tables == capsys.readouterr().out
    for line in tables.splitlines():
        if line.startswith(('bone', 'nerve')):
            assert set(line.split()[1:]) == {'100.0'}


def test_evaluate_from_published_csv(tmp_path, published_tables, capsys):
    csv_path = tmp_path / 'published.csv'
    lines = ['case_id,class,pixel_accuracy,iou,dice']
    for i in range(10):
        for cls in ('bone', 'nerve'):
            values = [published_tables[(m, cls)][i] / 100.0 for m in ('pixel_accuracy', 'iou', 'dice')]
            lines.append(f'case{i + 1},{cls},' + ','.join(repr(v) for v in values))
    csv_path.write_text('\n'.join(lines) + '\n')

    assert main.main(['evaluate', '--from-csv', str(csv_path), '--out', str(tmp_path / 'tables')]) == 0
    output = capsys.readouterr().out
    dice_block = output.split('\n\n')[2]
    rows = {line.split()[0]: line.split() for line in dice_block.splitlines()[2:]}
    assert rows['bone'][-1] == '94.5'
    assert rows['nerve'][-1] == '90.5'


def test_evaluate_without_source_is_usage_error(phantom_dir, tmp_path, tiny_run_config):
    code = main.main(['evaluate', '--data', str(phantom_dir), '--config', str(tiny_run_config), '--out', str(tmp_path)])
    assert code == 2


def test_report_on_metrics_csv(tmp_path, capsys):
    csv_path = tmp_path / 'metrics.csv'
    csv_path.write_text('case_id,class,pixel_accuracy,iou,dice\nc1,bone,1.0,0.5,0.6\nc1,nerve,0.5,0.25,0.4\n')
    assert main.main(['report', str(csv_path), '--out', str(tmp_path / 'report')]) == 0
    assert (tmp_path / 'report' / 'tables.txt').exists()
    assert '60.0' in capsys.readouterr().out


def test_report_on_missing_file(tmp_path):
    assert main.main(['report', str(tmp_path / 'absent.csv'), '--out', str(tmp_path)]) == 3


def test_train_divergence_exits_4(phantom_dir, tmp_path, tiny_run_config, mocker):
    mocker.patch.object(main, 'train', side_effect=DivergenceError('Loss became non-finite', iteration=3))
    code = main.main([
        'train', '--data', str(phantom_dir), '--config', str(tiny_run_config), '--out', str(tmp_path / 'run'),
    ])
    assert code == 4
