import shutil

import numpy as np
import pandas as pd
import pytest
import torch

from defn import harness
from defn.config import NetConfig
from defn.errors import ConfigError, DataError, NumericError
from defn.harness import (Trainer, evaluate, load_checkpoint, load_model, predict, save_checkpoint, train,
                          _tile_starts)
from defn.network import DEFN
from defn.seg_metrics import MACRO_ROW, evaluate_case


@pytest.fixture
def corpus(make_lesion):
    def make(n=2, shape=(32, 32, 32)):
        return [make_lesion(shape=shape, seed=i) for i in range(n)]
    return make


def test_single_step_smoke(run_config, corpus):
    config = run_config(max_steps=1)
    result = train(config, 'pretrain', volumes=corpus())
    assert result['status'] == 'success'
    assert result['steps'] == result['total_steps'] == 1
    state = load_checkpoint(result['checkpoint'])
    assert state['step'] == 1
    assert state['tau'] == 1.0
    log = pd.read_csv(result['metrics_log'])
    assert len(log) == 1
    assert log['tau'].iloc[0] == 1.0
    assert np.isfinite(log['total'].iloc[0])


def test_runs_with_same_seed_log_the_same_losses(run_config, corpus):
    a = train(run_config(max_steps=2, subdir='a'), 'pretrain', volumes=corpus())
    b = train(run_config(max_steps=2, subdir='b'), 'pretrain', volumes=corpus())
    pd.testing.assert_frame_equal(pd.read_csv(a['metrics_log']), pd.read_csv(b['metrics_log']))


def test_resume_reproduces_uninterrupted_run(run_config, corpus, tmp_path, monkeypatch):
    kept = tmp_path / 'step1.pt'
    original = harness.save_checkpoint

    def spy(state, path):
        written = original(state, path)
        if state['step'] == 1 and not kept.exists():
            shutil.copy(written, kept)
        return written

    monkeypatch.setattr(harness, 'save_checkpoint', spy)
    full = train(run_config(max_steps=2, subdir='full'), 'pretrain', volumes=corpus())
    monkeypatch.setattr(harness, 'save_checkpoint', original)

    resumed = train(run_config(max_steps=2, subdir='resumed'), 'pretrain', volumes=corpus(), resume_from=kept)
    assert resumed['steps'] == 2
    expected = pd.read_csv(full['metrics_log']).set_index('step').loc[2, 'total']
    assert resumed['final']['total'] == pytest.approx(expected, rel=1e-5)


def test_finetune_starts_from_pretrain_weights(run_config, corpus):
    pre = train(run_config(max_steps=1, subdir='pre'), 'pretrain', volumes=corpus())
    config = run_config(max_steps=2, subdir='ft', finetune_from=pre['checkpoint'])
    result = train(config, 'finetune', volumes=corpus())
    assert result['checkpoint'].endswith('finetune.pt')
    state = load_checkpoint(result['checkpoint'])
    assert state['phase'] == 'finetune'
    assert state['step'] == 2
    log = pd.read_csv(result['metrics_log'])
    assert log['tau'].tolist() == [0.5, 1.0]


def test_finetune_requires_source_checkpoint(run_config, corpus):
    with pytest.raises(ConfigError, match='finetune_from'):
        train(run_config(max_steps=1), 'finetune', volumes=corpus())


def test_finetune_rejects_mismatched_network(run_config, corpus):
    pre = train(run_config(max_steps=1, subdir='pre'), 'pretrain', volumes=corpus())
    config = run_config(max_steps=1, subdir='ft', finetune_from=pre['checkpoint'], net={'base_channels': 16})
    with pytest.raises(ConfigError, match='does not match'):
        train(config, 'finetune', volumes=corpus())


def test_checkpoint_errors(tmp_path):
    with pytest.raises(ConfigError, match='not found'):
        load_checkpoint(tmp_path / 'missing.pt')
    save_checkpoint({'weights': 1}, tmp_path / 'foreign.pt')
    with pytest.raises(ConfigError, match='version'):
        load_checkpoint(tmp_path / 'foreign.pt')
    assert not (tmp_path / 'foreign.pt.tmp').exists()


def test_empty_dataset_and_missing_corpus(run_config):
    with pytest.raises(DataError):
        train(run_config(max_steps=1), 'pretrain', volumes=[])
    with pytest.raises(ConfigError, match='corpus'):
        train(run_config(max_steps=1, subdir='none'), 'pretrain')


def test_tau_rises_to_one(run_config, corpus):
    result = train(run_config(epochs=2, subdir='tau'), 'pretrain', volumes=corpus())
    taus = pd.read_csv(result['metrics_log'])['tau'].tolist()
    assert taus == [0.25, 0.5, 0.75, 1.0]


def test_non_finite_loss_names_the_batch(run_config):
    trainer = Trainer(run_config(max_steps=1))
    trainer.total_steps = 1
    images = torch.full((1, 1, 32, 32, 32), float('nan'))
    labels = torch.zeros((1, 32, 32, 32), dtype=torch.long)
    with pytest.raises(NumericError, match='batch b7'):
        trainer.train_step(images, labels, 'b7')


def test_tile_starts_cover_the_axis():
    assert _tile_starts(32, 32) == [0]
    assert _tile_starts(20, 32) == [0]
    assert _tile_starts(40, 32) == [0, 8]
    assert _tile_starts(100, 32) == [0, 16, 32, 48, 64, 68]


def zero_model():
    model = DEFN(NetConfig(base_channels=8))
    with torch.no_grad():
        for p in model.parameters():
            p.zero_()
    return model


def test_zero_logits_predict_background(make_lesion):
    volume = make_lesion(shape=(20, 24, 28))
    pred = predict(zero_model(), volume, (32, 32, 32))
    assert pred.shape == volume.shape
    assert not pred.any()


def test_prediction_is_repeatable_and_tiles(make_lesion):
    torch.manual_seed(0)
    model = DEFN(NetConfig(base_channels=8))
    volume = make_lesion(shape=(40, 20, 32))
    assert np.array_equal(predict(model, volume, (32, 32, 32)), predict(model, volume, (32, 32, 32)))
    tiled = predict(model, volume, (32, 32, 32), tiled=True)
    assert tiled.shape == volume.shape
    assert tiled.max() < 4


def test_oracle_evaluation_is_perfect(run_config, corpus, tmp_path):
    volumes = corpus(5, shape=(16, 16, 16))
    report = evaluate(None, volumes, run_config(), out_dir=tmp_path / 'eval', oracle=True)
    assert len(report) == 5 * 4 + 4
    mean = report.row('mean', MACRO_ROW)
    assert mean['dice_pct'] == 100.0 and mean['hd_mm'] == 0.0 and mean['adj_rand'] == 1.0
    for name in ('per_case.csv', 'macro.csv', 'report.json'):
        assert (tmp_path / 'eval' / name).exists()
    assert len(pd.read_csv(tmp_path / 'eval' / 'macro.csv')) == 4


def test_evaluation_errors(run_config, corpus):
    with pytest.raises(DataError):
        evaluate(None, [], run_config(), oracle=True)
    with pytest.raises(ConfigError):
        evaluate(None, corpus(1), run_config())


def test_evaluate_trained_checkpoint(run_config, corpus):
    result = train(run_config(max_steps=1), 'pretrain', volumes=corpus())
    model, state = load_model(result['checkpoint'])
    assert not model.training
    assert state['config']['net']['base_channels'] == 8
    report = evaluate(result['checkpoint'], corpus(1), run_config())
    assert report.row('lesion0', MACRO_ROW)['case'] == 'lesion0'
    assert len(report) == 8


@pytest.mark.slow
def test_small_network_overfits_two_volumes(run_config, corpus):
    volumes = corpus()
    config = run_config(epochs=100, subdir='overfit', net={'droppath_rate': 0.0},
                        optim={'lr': 2e-3, 'checkpoint_every': 200})
    result = train(config, 'pretrain', volumes=volumes)
    assert result['steps'] == 200
    model, _ = load_model(result['checkpoint'])
    for volume in volumes:
        report = evaluate_case(predict(model, volume, (32, 32, 32)), volume.labels, volume.spacing)
        assert report.macro()['dice_pct'] >= 95.0
