"""
End-to-end tests of the anodet command line on a tiny synthetic corpus.
"""

import json

import pytest
from typer.testing import CliRunner

from anodet.cli import EXIT_RUNTIME, EXIT_USAGE, app, main
from anodet.config import dump_config, load_config
from anodet.settings import reset_settings

runner = CliRunner()


def _invoke(*args):
    result = runner.invoke(app, [str(a) for a in args])
    assert result.exit_code == 0, result.output
    return result


@pytest.fixture
def corpus(tmp_path):
    data = tmp_path / 'data'
    _invoke('synth', '--out', data, '--seed', 0, '--n-train', 8, '--n-test-normal', 4,
            '--n-test-anomalous', 4, '--image-side', 32)
    cfg = load_config(data / 'synthetic.cfg')
    assert cfg.resolved_kind() == 'texture'
    assert (cfg.texture_side, cfg.patch_side) == (32, 32)
    small = cfg.model_copy(update={'base_width': 8, 'latent_dim': 8, 'batch_size': 4, 'log_every': 1})
    dump_config(small, tmp_path / 'small.cfg')
    return tmp_path


@pytest.fixture
def trained(corpus):
    _invoke('train', '--config', corpus / 'small.cfg', '--steps', 2, '--out', corpus / 'run')
    return corpus / 'run' / 'final.ckpt'


def test_synth_writes_mvtec_layout(corpus):
    synthetic = corpus / 'data' / 'synthetic'
    assert len(list((synthetic / 'train' / 'good').glob('*.png'))) == 8
    assert len(list((synthetic / 'test' / 'good').glob('*.png'))) == 4
    anomalous = [p for d in (synthetic / 'test').iterdir() if d.name != 'good' for p in d.glob('*.png')]
    assert len(anomalous) == 4


def test_train_writes_run_directory(trained):
    run = trained.parent
    assert trained.is_file()
    assert (run / 'config.cfg').is_file()
    records = [json.loads(line) for line in (run / 'metrics.jsonl').read_text().splitlines()]
    assert [r['step'] for r in records] == [1, 2]
    assert load_config(run / 'config.cfg').total_steps == 2


def test_evaluate_writes_results(trained):
    _invoke('evaluate', '--checkpoint', trained)
    out = trained.parent / 'evaluation'
    result = json.loads((out / 'result.json').read_text())
    assert (result['n_positive'], result['n_negative']) == (4, 4)
    assert 0.0 <= result['auroc'] <= 1.0
    assert len((out / 'scores.jsonl').read_text().splitlines()) == 8
    assert 'synthetic' in (out / 'report.txt').read_text()

    _invoke('report', out / 'result.json', '--out', trained.parent / 'aggregate.json', '--reference')
    aggregate = json.loads((trained.parent / 'aggregate.json').read_text())
    assert [row['group'] for row in aggregate['rows']] == ['texture', 'object', 'overall']


def test_score_is_repeatable(trained, tmp_path):
    good = tmp_path / 'data' / 'synthetic' / 'test' / 'good'
    _invoke('score', good, '--checkpoint', trained, '--out', tmp_path / 'a.jsonl')
    _invoke('score', good, '--checkpoint', trained, '--out', tmp_path / 'b.jsonl', '--lambda', 0.1)
    first = (tmp_path / 'a.jsonl').read_text()
    assert first == (tmp_path / 'b.jsonl').read_text()
    records = [json.loads(line) for line in first.splitlines()]
    assert len(records) == 4
    assert all(r['lambda'] == 0.1 and r['mode'] == 'tiled' for r in records)


def test_reconstruct_writes_triplet(trained, tmp_path):
    image = sorted((tmp_path / 'data' / 'synthetic' / 'train' / 'good').glob('*.png'))[0]
    _invoke('reconstruct', image, '--checkpoint', trained, '--out', tmp_path / 'rec')
    for name in ('input.png', 'reconstruction.png', 'difference.png', 'difference.json'):
        assert (tmp_path / 'rec' / name).is_file()
    sidecar = json.loads((tmp_path / 'rec' / 'difference.json').read_text())
    assert sidecar['max_abs_difference'] >= 0.0


def test_resume_continues_to_total_steps(trained, corpus):
    code = main(['train', '--config', str(corpus / 'small.cfg'), '--steps', '3',
                 '--out', str(corpus / 'resumed'), '--resume', str(trained)])
    assert code == 0
    assert (corpus / 'resumed' / 'final.ckpt').is_file()
    records = (corpus / 'resumed' / 'metrics.jsonl').read_text().splitlines()
    assert [json.loads(r)['step'] for r in records] == [3]


def test_configuration_errors_exit_with_usage_code(tmp_path):
    bad = tmp_path / 'bad.cfg'
    bad.write_text("category=grid\nalpah=0.5\n")
    assert main(['train', '--config', str(bad)]) == EXIT_USAGE
    assert main(['train', '--config', str(tmp_path / 'missing.cfg')]) == EXIT_USAGE
    assert main(['train', '--alpha', '2.0']) == EXIT_USAGE
    assert main(['evaluate', '--checkpoint', str(tmp_path / 'missing.ckpt')]) == EXIT_USAGE
    assert main(['train', '--no-such-option']) == EXIT_USAGE


def test_scoring_only_unreadable_inputs_is_a_runtime_failure(trained, tmp_path):
    junk = tmp_path / 'junk.png'
    junk.write_text("not an image")
    assert main(['score', str(junk), '--checkpoint', str(trained), '--out', str(tmp_path / 's.jsonl')]) == EXIT_RUNTIME
    record = json.loads((tmp_path / 's.jsonl').read_text())
    assert 'error' in record


def test_score_labels_come_from_the_test_folder(trained, tmp_path):
    test_dir = tmp_path / 'data' / 'synthetic' / 'test'
    defect_dir = next(d for d in test_dir.iterdir() if d.name != 'good')
    loose = tmp_path / 'loose.png'
    loose.write_bytes(sorted(defect_dir.glob('*.png'))[0].read_bytes())

    _invoke('score', defect_dir, loose, '--checkpoint', trained, '--out', tmp_path / 'labels.jsonl')
    records = [json.loads(line) for line in (tmp_path / 'labels.jsonl').read_text().splitlines()]
    assert [r['label'] for r in records[:-1]] == ['anomalous'] * (len(records) - 1)
    assert records[-1]['sample_id'].endswith('loose.png')
    assert records[-1]['label'] is None


def test_every_command_honors_a_seed(trained, tmp_path):
    image = sorted((tmp_path / 'data' / 'synthetic' / 'test' / 'good').glob('*.png'))[0]
    _invoke('--seed', 0, 'evaluate', '--checkpoint', trained, '--out', tmp_path / 'eval')
    _invoke('score', '--seed', 0, image, '--checkpoint', trained, '--out', tmp_path / 'seeded.jsonl')
    _invoke('reconstruct', '--seed', 0, image, '--checkpoint', trained, '--out', tmp_path / 'rec')
    _invoke('--seed', 0, 'report', tmp_path / 'eval' / 'result.json')

    _invoke('--seed', 5, 'synth', '--out', tmp_path / 'global', '--n-train', 2, '--n-test-normal', 1,
            '--n-test-anomalous', 1, '--image-side', 32)
    _invoke('synth', '--seed', 5, '--out', tmp_path / 'local', '--n-train', 2, '--n-test-normal', 1,
            '--n-test-anomalous', 1, '--image-side', 32)
    for path in sorted((tmp_path / 'global' / 'synthetic').rglob('*.png')):
        twin = tmp_path / 'local' / path.relative_to(tmp_path / 'global')
        assert path.read_bytes() == twin.read_bytes()


def test_invalid_environment_exits_with_usage_code(monkeypatch, tmp_path):
    monkeypatch.setenv('ANODET_NUM_THREADS', 'many')
    reset_settings()
    assert main(['synth', '--out', str(tmp_path / 'data'), '--n-train', '1']) == EXIT_USAGE
