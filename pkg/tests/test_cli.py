import json
import logging
import os

import pytest

import cli
from reelnet import create_pipeline, read_env
from reelnet.errors import ConfigError, DatasetError
from reelnet.services import persistence
from reelnet.services.path_utils import stage_checkpoint_path
from tests.conftest import make_tiny_config


@pytest.fixture
def run_dir(tmp_path):
    """Manifest with two tiny synthetic sessions and a config for the tiny model."""
    manifest = {
        'sessions': [
            {'synthetic': {'kind': 'moving_gradient', 'frames': 2, 'height': 4, 'width': 4, 'seed': 0}},
            {'synthetic': {'kind': 'bouncing_box', 'frames': 2, 'height': 4, 'width': 4, 'seed': 1}},
        ],
    }
    config = {
        'model': make_tiny_config().to_dict(),
        'train': {'epochs': 2, 'warmup_epochs': 1, 'lr': 0.01, 'seed': 4},
    }
    (tmp_path / 'sessions.json').write_text(json.dumps(manifest))
    (tmp_path / 'tiny.json').write_text(json.dumps(config))
    return tmp_path


def train(run_dir, *extra):
    return cli.main(['train', '--manifest', str(run_dir / 'sessions.json'), '--out', str(run_dir / 'run.ckpt'),
                     '--config', str(run_dir / 'tiny.json'), *extra])


class TestEndToEnd:
    def test_train_writes_checkpoint_and_stages(self, run_dir):
        assert train(run_dir) == 0
        ckpt = str(run_dir / 'run.ckpt')
        state = persistence.load(ckpt)
        assert state.session_count == 2
        assert state.train_config.epochs == 2
        for session in range(2):
            assert os.path.exists(stage_checkpoint_path(ckpt, session))

    def test_eval_reports_zero_backward_transfer(self, run_dir, capsys):
        train(run_dir)
        out = str(run_dir / 'report.json')
        assert cli.main(['eval', '--checkpoint', str(run_dir / 'run.ckpt'), '--out', out]) == 0
        assert 'BWT = 0.0000' in capsys.readouterr().out
        with open(out) as f:
            report = json.load(f)
        assert report['bwt'] == 0.0
        assert report['verified'] == {'0': True, '1': True}

    def test_eval_without_stages(self, run_dir, capsys):
        train(run_dir)
        code = cli.main(['eval', '--checkpoint', str(run_dir / 'run.ckpt'), '--no-stages',
                         '--metric', 'ms-ssim', '--manifest', str(run_dir / 'sessions.json')])
        assert code == 0
        assert 'MS-SSIM avg (final)' in capsys.readouterr().out

    def test_generate_frames(self, run_dir):
        train(run_dir)
        out = run_dir / 'frames'
        code = cli.main(['generate', '--checkpoint', str(run_dir / 'run.ckpt'), '--session', '1',
                         '--frames', '1:2', '--out', str(out)])
        assert code == 0
        assert sorted(os.listdir(out)) == ['f00002.png']

    def test_generate_unknown_session(self, run_dir, capsys):
        train(run_dir)
        code = cli.main(['generate', '--checkpoint', str(run_dir / 'run.ckpt'), '--session', '5',
                         '--out', str(run_dir / 'frames')])
        assert code == 1
        assert capsys.readouterr().err.startswith('error code=unknown_session message="')

    def test_quantize_and_evaluate(self, run_dir, capsys):
        train(run_dir)
        q8 = str(run_dir / 'run.q8.ckpt')
        assert cli.main(['quantize', '--checkpoint', str(run_dir / 'run.ckpt'), '--bits', '8', '--out', q8]) == 0
        assert persistence.load(q8).quantized.bits == 8
        assert cli.main(['eval', '--checkpoint', q8]) == 0
        assert 'BWT = 0.0000' in capsys.readouterr().out

        assert cli.main(['quantize', '--checkpoint', q8, '--bits', '4', '--out', q8 + '.again']) == 1
        assert 'error code=checkpoint_error' in capsys.readouterr().err

    def test_quantize_per_tensor(self, run_dir):
        train(run_dir)
        out = str(run_dir / 'run.t8.ckpt')
        assert cli.main(['quantize', '--checkpoint', str(run_dir / 'run.ckpt'), '--bits', '8',
                         '--granularity', 'tensor', '--out', out]) == 0
        assert all(q.channels == 1 for q in persistence.load(out).quantized.weights.values())

    def test_report_json(self, run_dir, capsys):
        train(run_dir)
        capsys.readouterr()
        code = cli.main(['report', '--checkpoint', str(run_dir / 'run.ckpt'), '--bits', '8,32', '--json',
                         '--bpp-mode', 'padded', '--matrix'])
        assert code == 0
        summary = json.loads(capsys.readouterr().out)
        assert [row['bits'] for row in summary['sweep']] == [8, 32]
        assert summary['sweep'][1]['max_abs_error'] == 0.0
        assert summary['size']['mode'] == 'padded'
        assert summary['matrix']['bwt'] == 0.0
        assert {row['session'] for row in summary['capacity']} == {0, 1}

    def test_report_table(self, run_dir, capsys):
        train(run_dir)
        capsys.readouterr()
        assert cli.main(['report', '--checkpoint', str(run_dir / 'run.ckpt')]) == 0
        out = capsys.readouterr().out
        assert out.startswith('Parameters')
        assert 'bpp' in out

    def test_dense_needs_single_session(self, run_dir, capsys):
        assert train(run_dir, '--dense') == 1
        assert 'error code=invalid_config' in capsys.readouterr().err
        assert not os.path.exists(run_dir / 'run.ckpt')

        assert train(run_dir, '--dense', '--sessions', '1') == 0
        ckpt = str(run_dir / 'run.ckpt')
        assert train(run_dir, '--dense', '--resume-from', ckpt) == 1
        assert persistence.load(ckpt).session_count == 1

    def test_report_bad_bits(self, run_dir, capsys):
        train(run_dir)
        assert cli.main(['report', '--checkpoint', str(run_dir / 'run.ckpt'), '--bits', '8,5']) == 1
        assert 'error code=invalid_config' in capsys.readouterr().err


class TestResume:
    def test_resume_finishes_remaining_sessions(self, run_dir):
        assert train(run_dir, '--sessions', '1') == 0
        ckpt = str(run_dir / 'run.ckpt')
        assert persistence.load(ckpt).session_count == 1
        assert train(run_dir, '--resume-from', ckpt) == 0
        state = persistence.load(ckpt)
        assert state.session_count == 2
        assert [r.session for r in state.records] == [0, 1]

    def test_resumed_run_matches_uninterrupted_run(self, run_dir, tmp_path_factory):
        ckpt = str(run_dir / 'run.ckpt')
        train(run_dir, '--sessions', '1')
        train(run_dir, '--resume-from', ckpt)
        resumed = persistence.load(ckpt)

        other = tmp_path_factory.mktemp('straight')
        for name in ('sessions.json', 'tiny.json'):
            (other / name).write_text((run_dir / name).read_text())
        train(other)
        straight = persistence.load(str(other / 'run.ckpt'))
        assert [r.digest for r in resumed.records] == [r.digest for r in straight.records]

    def test_config_change_is_rejected(self, run_dir, capsys):
        train(run_dir, '--sessions', '1')
        code = train(run_dir, '--resume-from', str(run_dir / 'run.ckpt'), '--capacity', '0.25')
        assert code == 1
        assert 'error code=resume_mismatch' in capsys.readouterr().err


class TestErrors:
    def test_missing_checkpoint(self, tmp_path, capsys):
        assert cli.main(['eval', '--checkpoint', str(tmp_path / 'absent.ckpt')]) == 1
        err = capsys.readouterr().err.strip().splitlines()[-1]
        assert err.startswith('error code=checkpoint_error message="checkpoint not found: ')
        assert err.endswith('"')

    def test_format_escapes_quotes(self):
        line = cli.format_error(DatasetError('bad "frame"\nhere'))
        assert line == 'error code=invalid_dataset message="bad \\"frame\\" here"'

    def test_plain_os_error(self):
        assert cli.format_error(PermissionError('denied')).startswith('error code=io_error')

    def test_unknown_command(self):
        with pytest.raises(SystemExit):
            cli.main(['transcode'])


class TestSettings:
    def test_flag_beats_env_beats_default(self):
        pipeline = create_pipeline(flags={'seed': 5}, environ={'REELNET_SEED': '7', 'REELNET_EPOCHS': '3'})
        assert pipeline.train_config.seed == 5
        assert pipeline.train_config.epochs == 3
        assert pipeline.train_config.warmup_epochs == 3
        assert pipeline.sources['seed'] == 'flag'
        assert pipeline.sources['epochs'] == 'env'

    def test_env_beats_config_file(self, tmp_path):
        path = tmp_path / 'c.json'
        path.write_text(json.dumps({'capacity_c': 0.2, 'lr': 0.5}))
        pipeline = create_pipeline(config_path=str(path), environ={'REELNET_CAPACITY': '0.4'})
        assert pipeline.model_config.capacity_c == 0.4
        assert pipeline.train_config.lr == 0.5

    def test_config_file_beats_manifest(self, tmp_path):
        path = tmp_path / 'c.json'
        path.write_text(json.dumps({'train': {'epochs': 9}}))
        pipeline = create_pipeline(manifest_train={'epochs': 4, 'alpha': 0.5}, config_path=str(path), environ={})
        assert pipeline.train_config.epochs == 9
        assert pipeline.train_config.alpha == 0.5

    def test_invalid_env_is_ignored(self, caplog):
        with caplog.at_level(logging.WARNING):
            values = read_env({'REELNET_WORKERS': 'many', 'REELNET_DEBUG': 'yes'})
        assert values == {'debug': True}
        assert 'REELNET_WORKERS' in caplog.text

    def test_fso_flags(self):
        pipeline = create_pipeline(flags={'fso': ['0:2:2:noimag', '1:4:4']}, environ={})
        assert [p.block_index for p in pipeline.model_config.fso_placements] == [0, 1]
        assert not pipeline.model_config.fso_placements[0].use_imaginary
        assert create_pipeline(flags={'fso': ['none']}, environ={}).model_config.fso_placements == []

    def test_full_preset(self):
        pipeline = create_pipeline(flags={'preset': 'full'}, environ={})
        assert pipeline.model_config.output_spatial == (1280, 720)
        assert pipeline.train_config.lr == 5e-4

    @pytest.mark.parametrize('flags', [{'preset': 'huge'}, {'workers': 0}, {'capacity': 1.5}])
    def test_invalid_settings(self, flags):
        with pytest.raises(ConfigError):
            create_pipeline(flags=flags, environ={})

    def test_unknown_config_keys(self, tmp_path):
        path = tmp_path / 'c.json'
        path.write_text(json.dumps({'model': {'layers': 3}}))
        with pytest.raises(ConfigError):
            create_pipeline(config_path=str(path), environ={})
