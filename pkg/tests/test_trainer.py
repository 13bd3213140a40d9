import numpy as np
import pytest

from seqseg.birnn import BiRNNParams
from seqseg.checkpoint import CheckpointFormatError, decode, encode, load_checkpoint, save_checkpoint
from seqseg.pnet import ConfigError, PNetParams, pnet_forward
from seqseg.synthdata import MaskVolume, Volume
from seqseg.tensor import Tensor, no_grad
from seqseg.trainer import (SGD, Checkpoint, TrainConfig, TrainingDiverged, evaluate, finetune_birnn,
                            handoff_monotone, predict_volume, split_dataset, train_staged, write_history_csv)


def quick(**kw):
    base = dict(K=1, width=8, max_epochs=5, batch_size=4, window=100, rnn_warmup_epochs=0, finetune_epochs=0)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def staged(tiny_cases):
    return train_staged(tiny_cases, quick(K=2, max_epochs=3))


def test_config_validation_and_dict_round_trip():
    cfg = TrainConfig(loss="cbce", K=3)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    for bad in (dict(lr=0.0), dict(tolerance=-1.0), dict(K=0), dict(loss="dice")):
        with pytest.raises(ValueError):
            TrainConfig(**bad)
    with pytest.raises(ValueError, match="unknown"):
        TrainConfig.from_dict({"lr": 0.1, "bogus": 1})


def test_learning_rate_schedule():
    cfg = TrainConfig()
    assert cfg.rate(0) == 0.01 and cfg.rate(39) == 0.01
    assert cfg.rate(40) == pytest.approx(0.001) and cfg.rate(80) == pytest.approx(1e-4)


def test_split_is_deterministic_and_disjoint():
    tr, va = split_dataset(16, 0.2, seed=0)
    assert len(va) == 3 and len(tr) == 13 and not set(tr) & set(va)
    assert (tr, va) == split_dataset(16, 0.2, seed=0)


def test_sgd_zero_gradient_is_a_no_op():
    t = Tensor(np.array([1.0, -2.0]), True)
    opt = SGD([t], momentum=0.9)
    t.grad = np.zeros(2)
    opt.step(0.1)
    np.testing.assert_array_equal(t.data, [1.0, -2.0])
    np.testing.assert_array_equal(opt.velocity[0], 0.0)
    t.grad = np.array([1.0, 0.0])
    opt.step(0.1)
    opt.step(0.1)
    np.testing.assert_allclose(t.data, [1.0 - 0.1 - (0.09 + 0.1), -2.0])


def test_training_loss_strictly_decreases_at_first(tiny_cases):
    ck = train_staged(tiny_cases, quick())
    losses = [h[2] for h in ck.history[:5]]
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_stage_count_history_and_handoff(staged):
    assert staged.stage == 2
    stages = [h[0] for h in staged.history]
    assert stages == sorted(stages) and set(stages) == {1, 2}
    assert handoff_monotone(staged)
    assert len(staged.meta["handoff_val"]) == 2


def test_training_is_reproducible(tiny_cases, staged):
    again = train_staged(tiny_cases, quick(K=2, max_epochs=3))
    assert again.history == staged.history
    assert encode(again) == encode(staged)


def test_history_csv(tmp_path, staged):
    path = tmp_path / "h.csv"
    write_history_csv(path, staged.history)
    lines = path.read_text().splitlines()
    assert lines[0] == "stage,epoch,train_loss,val_loss"
    assert len(lines) == len(staged.history) + 1
    assert lines[1].startswith("1,0,")


def test_divergence_aborts_with_last_good_checkpoint(tiny_cases):
    img, mask = tiny_cases[0]
    bad = img.voxels.copy()
    bad[2, 5, 5] = np.nan
    with pytest.raises(TrainingDiverged) as err:
        train_staged([(Volume(bad), mask)] + tiny_cases[1:], quick())
    assert isinstance(err.value.checkpoint, Checkpoint)


def test_evaluate_reports_every_case(tiny_cases, staged):
    ev = evaluate(staged, tiny_cases)
    assert len(ev.cnn.cases) == len(tiny_cases)
    assert ev.rnn is None and ev.final is ev.cnn
    assert all(0.0 <= c.dsc <= 1.0 for c in ev.cnn.cases)


def test_evaluate_rejects_indivisible_dims(staged):
    vox = np.zeros((3, 33, 33))
    with pytest.raises(ConfigError):
        evaluate(staged, [(Volume(vox), MaskVolume(vox.astype(np.uint8)))])


def test_overfit_sanity(tiny_cases):
    ck = train_staged(tiny_cases, quick(max_epochs=30, window=100))
    assert min(c.dsc for c in evaluate(ck, tiny_cases).cnn.cases) > 0.9


def test_finetune_with_no_epochs_gives_half_maps(tiny_cases, staged):
    ck = finetune_birnn(staged, tiny_cases)
    pred = predict_volume(ck, tiny_cases[0][0])
    assert np.abs(pred.rnn - 0.5).max() < 0.05
    assert decode(encode(ck)).birnn is not None


def test_finetune_changes_cnn_and_birnn(tiny_cases, staged):
    before = encode(staged)
    start = decode(before)
    ck = finetune_birnn(start, tiny_cases, quick(K=2, rnn_warmup_epochs=2, finetune_epochs=1))
    fresh = BiRNNParams.create(ck.config.seed + 7)
    assert not np.array_equal(ck.birnn.forward.kernels.data, fresh.forward.kernels.data)
    old = decode(before)
    changed = [n for (n, a), (_, b) in zip(old.pnet.parameters(), ck.pnet.parameters())
               if not np.array_equal(a.data, b.data)]
    assert changed
    assert [h[0] for h in ck.history[-3:]] == ["rnn-warmup", "rnn-warmup", "rnn"]
    ev = evaluate(ck, tiny_cases)
    assert ev.rnn is not None and len(ev.rnn.cases) == 3


def test_checkpoint_round_trip_preserves_forward(tmp_path, staged):
    path = tmp_path / "a.sckp"
    save_checkpoint(path, staged)
    back = load_checkpoint(path)
    x = Tensor(np.random.default_rng(0).uniform(size=(2, 3, 32, 32)))
    with no_grad():
        a = pnet_forward(x, staged.pnet).fused.data
        b = pnet_forward(x, back.pnet).fused.data
    assert a.tobytes() == b.tobytes()
    assert back.config == staged.config and back.history == staged.history and back.stage == 2
    assert path.read_bytes() == encode(back)


def test_checkpoint_corruption_names_section(staged):
    raw = encode(staged)
    with pytest.raises(CheckpointFormatError) as err:
        decode(raw[:-10])
    assert err.value.section == "pnet"
    with pytest.raises(CheckpointFormatError) as err:
        decode(b"XXXX" + raw[4:])
    assert err.value.section == "header"
    flipped = bytearray(raw)
    flipped[-3] ^= 0xFF
    with pytest.raises(CheckpointFormatError, match="checksum"):
        decode(bytes(flipped))
    with pytest.raises(CheckpointFormatError, match="version"):
        decode(raw[:4] + b"\x07\x00" + raw[6:])
    with pytest.raises(CheckpointFormatError) as err:
        decode(raw + b"\x00")
    assert err.value.section == "trailer"


def test_birnn_section_is_optional(tiny_cases):
    ck = Checkpoint(PNetParams.create(K=1, width=4, seed=1), None, quick(width=4), 1, 0)
    back = decode(encode(ck))
    assert back.birnn is None
    tuned = finetune_birnn(back, tiny_cases, quick(width=4, rnn_warmup_epochs=1))
    again = decode(encode(tuned))
    np.testing.assert_array_equal(again.birnn.mix_logits.data, tuned.birnn.mix_logits.data)
