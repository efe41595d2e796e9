#!/usr/bin/env python3
"""
Tests for settings, logging and the dronet-bench command line
"""

import sys
import os
import csv
import io
import json
import logging
import tempfile

import numpy as np
import pytest

# Add src directory to path
sys.path.append(os.path.join(os.path.dirname(__file__), 'src'))

import main as cli
from config_manager import ConfigManager
from errors import ConfigurationError
from image_io import write_ppm
from logging_manager import LoggingManager, get_logger

QUIET_SETTINGS = """
logging:
  level: "INFO"
  console_level: "ERROR"
  main_log: null
  error_log: null
bench:
  runs: 3
  warmup: 0
"""


def _settings(tmp: str, text: str = QUIET_SETTINGS) -> str:
    path = os.path.join(tmp, 'settings.yaml')
    with open(path, 'w') as file:
        file.write(text)
    return path


def test_config_manager_merges_defaults():
    with tempfile.TemporaryDirectory() as tmp:
        manager = ConfigManager(_settings(tmp))
        assert manager.get('bench.runs') == 3
        assert manager.get('bench.seed') == 42
        assert manager.get('detect.conf_threshold') == 0.25
        assert manager.get('detect.missing', 'fallback') == 'fallback'
        assert manager.get_train_config()['steps'] == 2000
        assert manager.get_init_config()['scale'] == 0.05
    assert ConfigManager('no_such_settings.yaml').get('eval.iou_match_threshold') == 0.5


def test_config_manager_rejects_bad_values():
    with tempfile.TemporaryDirectory() as tmp:
        with pytest.raises(ConfigurationError):
            ConfigManager(_settings(tmp, "detect:\n  conf_threshold: 1.5\n"))
        with pytest.raises(ConfigurationError):
            ConfigManager(_settings(tmp, "bench:\n  runs: 2\n"))
        with pytest.raises(ConfigurationError):
            ConfigManager(_settings(tmp, "- just\n- a list\n"))


def test_logging_manager_writes_rotating_files():
    with tempfile.TemporaryDirectory() as tmp:
        manager = LoggingManager({'level': 'INFO', 'console_level': 'CRITICAL',
                                  'main_log': os.path.join(tmp, 'logs', 'main.log'),
                                  'error_log': os.path.join(tmp, 'logs', 'errors.log')})
        manager.info("info message")
        manager.log_benchmark('dronet', 352, 12.5, 80.0)
        get_logger('detector').warning("child message")
        manager.record_failure("error message")
        for handler in manager.logger.handlers + manager.error_logger.handlers:
            handler.flush()
        with open(os.path.join(tmp, 'logs', 'main.log')) as file:
            main_log = file.read()
        with open(os.path.join(tmp, 'logs', 'errors.log')) as file:
            error_log = file.read()
        assert 'info message' in main_log
        assert 'dronet@352: 12.50 FPS' in main_log
        assert 'dronet_bench.detector' in main_log
        assert 'error message' in error_log
        assert 'error message' not in main_log
        assert 'info message' not in error_log
        for handler in manager.logger.handlers + manager.error_logger.handlers:
            handler.close()
        manager.logger.handlers.clear()
        manager.error_logger.handlers.clear()
        assert manager.logger.level == logging.INFO


def test_no_command_is_usage_error(capsys):
    assert cli.dispatch([]) == 1
    assert 'usage' in capsys.readouterr().err


def test_unknown_flag_and_command_are_usage_errors(capsys):
    assert cli.dispatch(['ops', '--config', 'dronet', '--bogus']) == 1
    assert cli.dispatch(['compile']) == 1
    assert 'error' in capsys.readouterr().err


def test_ops_prints_csv(capsys):
    with tempfile.TemporaryDirectory() as tmp:
        assert cli.dispatch(['--settings', _settings(tmp), 'ops', '--config', 'dronet']) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == 'layer,type,output_shape,macs,parameters'
    assert lines[-1] == 'total,,,255590400,57526'


def test_missing_config_is_input_error(capsys):
    with tempfile.TemporaryDirectory() as tmp:
        assert cli.dispatch(['--settings', _settings(tmp), 'ops', '--config', os.path.join(tmp, 'nope.cfg')]) == 1
    assert 'not found' in capsys.readouterr().err


def test_unexpected_exception_is_internal_error(capsys, monkeypatch):
    def explode(*args, **kwargs):
        raise RuntimeError("boom")

    monkeypatch.setattr(cli, 'count_ops', explode)
    with tempfile.TemporaryDirectory() as tmp:
        assert cli.dispatch(['--settings', _settings(tmp), 'ops', '--config', 'dronet']) == 2
    assert 'internal error' in capsys.readouterr().err


def test_bench_reports_random_seed(capsys):
    with tempfile.TemporaryDirectory() as tmp:
        code = cli.dispatch(['--settings', _settings(tmp), 'bench', '--config', 'dronet', '--size', '64',
                             '--seed', '7'])
    assert code == 0
    captured = capsys.readouterr()
    assert 'random weights, seed 7' in captured.err
    lines = captured.out.splitlines()
    assert lines[0] == 'model,input_size,run,latency_ms'
    assert len(lines) == 1 + 3 + 4


def test_detect_is_deterministic_across_threads(capsys):
    with tempfile.TemporaryDirectory() as tmp:
        image = os.path.join(tmp, 'frame.ppm')
        write_ppm(np.random.default_rng(0).integers(0, 256, (48, 64, 3)).astype(np.uint8), image)
        settings = _settings(tmp)
        outputs = []
        for threads in ('1', '3'):
            assert cli.dispatch(['--settings', settings, 'detect', '--config', 'dronet', '--image', image,
                                 '--threads', threads, '--conf', '0.5']) == 0
            outputs.append(capsys.readouterr().out)
        assert outputs[0] == outputs[1]
        for line in outputs[0].splitlines():
            assert len(line.split()) == 6


def test_detect_rejects_invalid_threshold(capsys):
    with tempfile.TemporaryDirectory() as tmp:
        image = os.path.join(tmp, 'frame.ppm')
        write_ppm(np.zeros((8, 8, 3), dtype=np.uint8), image)
        assert cli.dispatch(['--settings', _settings(tmp), 'detect', '--config', 'dronet', '--image', image,
                             '--conf', '1.5']) == 1
        assert cli.dispatch(['--settings', _settings(tmp), 'detect', '--config', 'dronet',
                             '--image', os.path.join(tmp, 'missing.ppm')]) == 1


def test_synth_then_eval(capsys):
    with tempfile.TemporaryDirectory() as tmp:
        settings = _settings(tmp)
        assert cli.dispatch(['--settings', settings, 'synth', '--out-dir', os.path.join(tmp, 'data'),
                             '--count', '2', '--size', '64']) == 0
        list_path = capsys.readouterr().out.strip()
        assert os.path.isfile(list_path)
        report_path = os.path.join(tmp, 'report.json')
        assert cli.dispatch(['--settings', settings, 'eval', '--config', 'dronet', '--dataset', list_path,
                             '--out', report_path]) == 0
        with open(report_path) as file:
            report = json.load(file)
    assert report['images'] == 2
    assert report['skipped'] == []
    assert report['fps'] > 0


def test_sweep_selects_argmax(capsys):
    with tempfile.TemporaryDirectory() as tmp:
        settings = _settings(tmp)
        assert cli.dispatch(['--settings', settings, 'synth', '--out-dir', os.path.join(tmp, 'data'),
                             '--count', '2', '--size', '64']) == 0
        list_path = capsys.readouterr().out.strip()
        sweep_path = os.path.join(tmp, 'sweep.yaml')
        with open(sweep_path, 'w') as file:
            file.write("models: [dronet, small_yolo_v3]\nsizes: [352, 384]\nwarmup: 0\nruns: 3\n")
        assert cli.dispatch(['--settings', settings, 'sweep', '--sweep-config', sweep_path,
                             '--dataset', list_path]) == 0
    rows = list(csv.DictReader(io.StringIO(capsys.readouterr().out)))
    assert sorted((row['model'], row['input_size']) for row in rows) == [
        ('dronet', '352'), ('dronet', '384'), ('small_yolo_v3', '352'), ('small_yolo_v3', '384')]
    selected = [row for row in rows if row['selected'] == 'true']
    assert len(selected) == 1
    assert float(selected[0]['score']) == max(float(row['score']) for row in rows)
    assert selected[0] is rows[0]


def test_eval_skips_corrupt_image(capsys):
    with tempfile.TemporaryDirectory() as tmp:
        write_ppm(np.zeros((16, 16, 3), dtype=np.uint8), os.path.join(tmp, 'good.ppm'))
        with open(os.path.join(tmp, 'bad.ppm'), 'wb') as file:
            file.write(b'P6\n4 4x\n255\n' + bytes(48))
        for name in ('good', 'bad'):
            with open(os.path.join(tmp, f'{name}.txt'), 'w') as file:
                file.write("0 0.5 0.5 0.25 0.25\n")
        list_path = os.path.join(tmp, 'list.txt')
        with open(list_path, 'w') as file:
            file.write("good.ppm\nbad.ppm\n")
        assert cli.dispatch(['--settings', _settings(tmp), 'eval', '--config', 'dronet',
                             '--dataset', list_path]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report['images'] == 1
    assert report['skipped'] == [os.path.join(tmp, 'bad.ppm')]


def test_grad_check_command(capsys):
    with tempfile.TemporaryDirectory() as tmp:
        assert cli.dispatch(['--settings', _settings(tmp), 'grad-check', '--instances', '2']) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == 'check,max_error,mean_error,ok'
    assert [line.split(',')[0] for line in lines[1:]] == ['loss_0', 'loss_1', 'network']
    assert all(line.endswith('true') for line in lines[1:])


def test_train_toy_command(capsys):
    with tempfile.TemporaryDirectory() as tmp:
        weights = os.path.join(tmp, 'toy.weights')
        losses = os.path.join(tmp, 'loss.csv')
        assert cli.dispatch(['--settings', _settings(tmp), 'train-toy', '--synthetic', '--steps', '5',
                             '--out', weights, '--loss-out', losses]) == 0
        assert os.path.getsize(weights) > 20
        with open(losses) as file:
            assert len(file.read().splitlines()) == 6
    out = capsys.readouterr().out
    assert 'steps,5' in out
    assert 'final_loss' in out


def main():
    """Run all tests."""
    print("Command Line - Tests")
    print("=" * 50)

    tests = [obj for name, obj in sorted(globals().items())
             if name.startswith('test_') and callable(obj) and obj.__code__.co_argcount == 0]
    passed = 0
    for test in tests:
        try:
            test()
            print(f"✓ {test.__name__}")
            passed += 1
        except Exception as e:
            print(f"✗ {test.__name__}: {e}")

    print("\n" + "=" * 50)
    print(f"Test Results: {passed}/{len(tests)} tests passed")
    return passed == len(tests)


if __name__ == "__main__":
    success = main()
    sys.exit(0 if success else 1)
