"""損失・学習率・学習ループ・チェックポイントのテスト"""

import dataclasses
import math

import numpy as np
import pytest
import torch

from config import Config
from errors import CheckpointMismatchError, ConfigurationError, ContractViolation, FormatError, InputError
from evaluator import accuracy, score_pairs
from models import LayerStack, TrainConfig
from pairs_dataset import build_pairs
from trainer import (
    build_model,
    build_optimizer,
    compute_fingerprint,
    cosine_lr,
    decode_checkpoint,
    encode_checkpoint,
    epoch_batches,
    load_checkpoint,
    masked_bce,
    model_from_checkpoint,
    save_checkpoint,
    steps_per_epoch,
    train,
)


@pytest.fixture(scope="module")
def train_pairs(synthetic_dataset):
    ds = synthetic_dataset
    pairs = build_pairs(ds.train_annotations, ds.train_records, pairs_per_speaker_pair=8, seed=42)
    assert len(pairs) == 64
    return pairs


@pytest.fixture(scope="module")
def held_out_pairs(synthetic_dataset):
    """同じ話者ペア注釈を学習に使っていない発話で展開したもの"""
    ds = synthetic_dataset
    return build_pairs(ds.train_annotations, ds.eval_records, pairs_per_speaker_pair=8, seed=43)


@pytest.fixture(scope="module")
def encoder_width_stacks(synthetic_dataset):
    """エンコーダ実寸（L=25, D=1024）の合成 LayerStack。Diff-Net の入力は 4096 次元になる"""
    from feature_provider import synth_layer_stack

    ds = synthetic_dataset
    return {
        r.utterance_id: synth_layer_stack(r.utterance_id, 42, ds.profiles[r.speaker_id])
        for r in ds.records
    }


def _losses(log):
    return [(r.epoch, r.step, r.lr, r.train_loss, r.val_loss, r.val_acc) for r in log]


class TestMaskedBCE:

    def test_perfect_prediction(self):
        labels = torch.tensor([1.0, 0.0, 1.0, 0.0], dtype=torch.float64)
        mask = torch.tensor([1.0, 1.0, 1.0, 0.0], dtype=torch.float64)
        loss = masked_bce(labels.clone(), labels, mask)
        assert 0 < loss.item() <= 1e-6
        assert loss.item() == pytest.approx(-math.log(1 - 1e-7), rel=1e-9)

    def test_single_masked_index(self):
        pred = torch.full((34,), 0.3, dtype=torch.float64)
        pred[5] = 0.8
        labels = torch.zeros(34, dtype=torch.float64)
        labels[5] = 1
        mask = torch.zeros(34, dtype=torch.float64)
        mask[5] = 1
        assert masked_bce(pred, labels, mask).item() == pytest.approx(-math.log(0.8), abs=1e-12)
        assert masked_bce(pred, labels, mask).item() == pytest.approx(0.22314, abs=1e-5)

    def test_unmasked_predictions_do_not_matter(self):
        rng = np.random.default_rng(0)
        pred = torch.from_numpy(rng.uniform(0.01, 0.99, (4, 34)))
        labels = torch.from_numpy(rng.integers(0, 2, (4, 34)).astype(np.float64))
        mask = torch.from_numpy((rng.random((4, 34)) < 0.3).astype(np.float64))
        mask[:, 0] = 1
        before = masked_bce(pred, labels, mask)
        changed = torch.where(mask > 0, pred, torch.from_numpy(rng.uniform(0.01, 0.99, (4, 34))))
        assert torch.equal(masked_bce(changed, labels, mask), before)

    def test_mean_within_sample_then_over_batch(self):
        pred = torch.tensor([[0.8, 0.5], [0.25, 0.5]], dtype=torch.float64)
        labels = torch.tensor([[1.0, 1.0], [0.0, 0.0]], dtype=torch.float64)
        mask = torch.tensor([[1.0, 1.0], [1.0, 0.0]], dtype=torch.float64)
        first = (-math.log(0.8) - math.log(0.5)) / 2
        second = -math.log(0.75)
        assert masked_bce(pred, labels, mask).item() == pytest.approx((first + second) / 2, abs=1e-12)

    def test_sample_order_invariance(self):
        rng = np.random.default_rng(1)
        pred = torch.from_numpy(rng.uniform(0.01, 0.99, (16, 34)))
        labels = torch.from_numpy(rng.integers(0, 2, (16, 34)).astype(np.float64))
        mask = torch.from_numpy((rng.random((16, 34)) < 0.2).astype(np.float64))
        mask[:, 3] = 1
        perm = torch.from_numpy(rng.permutation(16))
        np.testing.assert_allclose(masked_bce(pred[perm], labels[perm], mask[perm]).item(),
                                   masked_bce(pred, labels, mask).item(), rtol=1e-12)

    def test_empty_mask(self):
        with pytest.raises(InputError):
            masked_bce(torch.full((2, 34), 0.5), torch.zeros(2, 34), torch.zeros(2, 34))

    def test_shape_mismatch(self):
        with pytest.raises(ContractViolation):
            masked_bce(torch.full((2, 34), 0.5), torch.zeros(2, 33), torch.ones(2, 34))


class TestCosineLR:

    def test_endpoints_are_exact(self):
        assert cosine_lr(0, 400, 1e-4, 0.0) == 1e-4
        assert cosine_lr(400, 400, 1e-4, 0.0) == 0.0
        assert cosine_lr(400, 400, 1e-4, 1e-6) == 1e-6

    def test_midpoint(self):
        assert cosine_lr(200, 400, 1e-4, 1e-6) == pytest.approx((1e-4 + 1e-6) / 2, rel=1e-12)

    def test_monotone(self):
        values = [cosine_lr(s, 50, 1e-3, 1e-5) for s in range(51)]
        assert all(a >= b for a, b in zip(values, values[1:]))

    def test_out_of_range(self):
        with pytest.raises(InputError):
            cosine_lr(401, 400, 1e-4)
        with pytest.raises(InputError):
            cosine_lr(-1, 400, 1e-4)
        with pytest.raises(ConfigurationError):
            cosine_lr(0, 0, 1e-4)


class TestOptimizer:

    def test_zero_gradient_step_only_decays(self):
        config = TrainConfig()
        model = build_model(config, num_layers=3, dim=16)
        optimizer = build_optimizer(model, config)
        before = {n: p.detach().clone() for n, p in model.named_parameters()}
        for p in model.parameters():
            p.grad = torch.zeros_like(p)
        optimizer.step()
        factor = 1.0 - config.learning_rate * config.weight_decay
        for n, p in model.named_parameters():
            torch.testing.assert_close(p.detach(), before[n] * factor, rtol=1e-6, atol=1e-12)

    def test_frozen_astp_is_left_out(self):
        model = build_model(TrainConfig(astp_trainable=False), num_layers=3, dim=16)
        optimizer = build_optimizer(model, TrainConfig(astp_trainable=False))
        in_optimizer = {id(p) for g in optimizer.param_groups for p in g["params"]}
        assert not any(id(p) in in_optimizer for p in model.astp.parameters())
        assert all(id(p) in in_optimizer for p in model.diffnet.parameters())

    @pytest.mark.parametrize("changes", [
        {"epochs": 0}, {"batch_size": 1}, {"learning_rate": 0.0}, {"weight_decay": -0.1},
        {"eta_min": -1e-6}, {"variant": "bilinear"},
    ])
    def test_invalid_config(self, changes):
        with pytest.raises(ConfigurationError):
            build_model(TrainConfig(**changes), num_layers=3, dim=16)


class TestBatches:

    def test_singleton_tail_is_dropped(self):
        g = torch.Generator().manual_seed(0)
        batches = epoch_batches(33, 16, g)
        assert [len(b) for b in batches] == [16, 16]
        assert steps_per_epoch(33, 16) == 2
        assert steps_per_epoch(34, 16) == 3
        assert steps_per_epoch(64, 16) == 4

    def test_permutation(self):
        batches = epoch_batches(20, 8, torch.Generator().manual_seed(1))
        assert sorted(torch.cat(batches).tolist()) == list(range(20))


class TestTrain:

    def test_default_recipe_overfits_and_generalizes(self, train_pairs, held_out_pairs, encoder_width_stacks):
        config = TrainConfig()
        assert (config.epochs, config.batch_size, config.learning_rate) == (10, 16, 1e-4)
        ckpt, log = train(config, train_pairs, held_out_pairs, encoder_width_stacks, verbose=False)
        assert (ckpt.num_layers, ckpt.dim) == (Config.ENCODER_LAYERS, Config.ENCODER_DIM)
        assert len(log) == 10 and log[-1].step == 40
        assert log[-1].train_loss < log[0].train_loss
        assert accuracy(score_pairs(ckpt, train_pairs, encoder_width_stacks)) >= 99.0
        assert accuracy(score_pairs(ckpt, held_out_pairs, encoder_width_stacks)) >= 95.0
        assert log[-1].val_acc >= 95.0

    def test_build_model_leaves_global_rng_alone(self):
        torch.manual_seed(0)
        expected = torch.rand(3)
        torch.manual_seed(0)
        first = build_model(TrainConfig(), num_layers=5, dim=64)
        assert torch.equal(torch.rand(3), expected)
        second = build_model(TrainConfig(), num_layers=5, dim=64)
        for key, value in first.state_dict().items():
            assert torch.equal(value, second.state_dict()[key]), key

    def test_same_seed_gives_identical_logs(self, train_pairs, held_out_pairs, synthetic_stacks):
        config = TrainConfig(epochs=3)
        _, a = train(config, train_pairs, held_out_pairs, synthetic_stacks, verbose=False)
        _, b = train(config, train_pairs, held_out_pairs, synthetic_stacks, verbose=False)
        assert _losses(a) == _losses(b)
        _, c = train(dataclasses.replace(config, seed=7), train_pairs, held_out_pairs, synthetic_stacks, verbose=False)
        assert _losses(a) != _losses(c)

    def test_global_rng_untouched(self, train_pairs, synthetic_stacks):
        torch.manual_seed(123)
        expected = torch.rand(3)
        torch.manual_seed(123)
        train(TrainConfig(epochs=1), train_pairs, [], synthetic_stacks, verbose=False)
        assert torch.equal(torch.rand(3), expected)

    def test_resume_matches_uninterrupted_run(self, train_pairs, held_out_pairs, synthetic_stacks, tmp_path):
        config = TrainConfig(epochs=10)
        full_ckpt, full_log = train(config, train_pairs, held_out_pairs, synthetic_stacks, verbose=False)

        half, first = train(config, train_pairs, held_out_pairs, synthetic_stacks, stop_after=5, verbose=False)
        assert half.epoch == 5 and len(first) == 5
        save_checkpoint(half, str(tmp_path / "epoch5.ckpt"))
        resumed_ckpt, rest = train(config, train_pairs, held_out_pairs, synthetic_stacks,
                                   resume=load_checkpoint(str(tmp_path / "epoch5.ckpt")), verbose=False)

        assert [r.epoch for r in rest] == [6, 7, 8, 9, 10]
        assert _losses(first + rest) == _losses(full_log)
        for key, value in full_ckpt.diffnet_state.items():
            assert torch.equal(value, resumed_ckpt.diffnet_state[key]), key
        for key, value in full_ckpt.astp_state.items():
            assert torch.equal(value, resumed_ckpt.astp_state[key]), key

    def test_resume_with_other_config(self, train_pairs, synthetic_stacks):
        half, _ = train(TrainConfig(epochs=4), train_pairs, [], synthetic_stacks,
                        stop_after=1, verbose=False)
        other = TrainConfig(epochs=4, learning_rate=1e-3)
        with pytest.raises(CheckpointMismatchError):
            train(other, train_pairs, [], synthetic_stacks, resume=half, verbose=False)
        _, log = train(other, train_pairs, [], synthetic_stacks, resume=half, force=True, verbose=False)
        assert [r.epoch for r in log] == [2, 3, 4]

    def test_frozen_astp_and_provider_untouched(self, train_pairs, synthetic_stacks):
        snapshot = {uid: s.values.copy() for uid, s in synthetic_stacks.items()}
        config = TrainConfig(epochs=2, astp_trainable=False)
        initial = build_model(config, 5, 64).astp.state_dict()
        ckpt, _ = train(config, train_pairs, [], synthetic_stacks, verbose=False)
        for key, value in initial.items():
            assert torch.equal(value, ckpt.astp_state[key]), key
        for uid, values in snapshot.items():
            assert synthetic_stacks[uid].values.tobytes() == values.tobytes()

    def test_checkpoint_per_epoch(self, train_pairs, synthetic_stacks, tmp_path):
        train(TrainConfig(epochs=2), train_pairs, [], synthetic_stacks,
              checkpoint_dir=str(tmp_path), verbose=False)
        assert sorted(p.name for p in tmp_path.iterdir()) == ["epoch_001.ckpt", "epoch_002.ckpt"]
        assert load_checkpoint(str(tmp_path / "epoch_002.ckpt")).epoch == 2

    def test_non_finite_features_abort(self, train_pairs, synthetic_stacks):
        provider = dict(synthetic_stacks)
        bad = provider[train_pairs[0].utt_a].values.copy()
        bad[0, 0] = np.inf
        provider[train_pairs[0].utt_a] = LayerStack(bad, train_pairs[0].utt_a)
        with pytest.raises(InputError):
            train(TrainConfig(epochs=1), train_pairs, [], provider, verbose=False)

    def test_input_errors(self, train_pairs, synthetic_stacks):
        with pytest.raises(InputError):
            train(TrainConfig(epochs=1), train_pairs[:1], [], synthetic_stacks, verbose=False)
        with pytest.raises(InputError):
            train(TrainConfig(epochs=1), train_pairs, [], {}, verbose=False)


class TestCheckpointFile:

    @pytest.fixture(scope="class")
    def checkpoint(self, train_pairs, synthetic_stacks):
        ckpt, _ = train(TrainConfig(epochs=1), train_pairs, [], synthetic_stacks,
                        provenance={"artifact_version": "test"}, verbose=False)
        return ckpt

    def test_save_load_save_is_byte_identical(self, checkpoint, tmp_path):
        first, second = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(checkpoint, str(first))
        save_checkpoint(load_checkpoint(str(first)), str(second))
        assert first.read_bytes() == second.read_bytes()

    def test_roundtrip_contents(self, checkpoint, tmp_path):
        path = tmp_path / "a.ckpt"
        save_checkpoint(checkpoint, str(path))
        back = load_checkpoint(str(path), expected_fingerprint=checkpoint.fingerprint)
        assert back.config == checkpoint.config and back.registry == checkpoint.registry
        assert (back.step, back.epoch, back.num_layers, back.dim) == \
            (checkpoint.step, checkpoint.epoch, checkpoint.num_layers, checkpoint.dim)
        assert back.provenance == {"artifact_version": "test"}
        for key, value in checkpoint.diffnet_state.items():
            assert torch.equal(value, back.diffnet_state[key]), key
        state = back.optimizer_state["state"]
        assert all(isinstance(k, int) for k in state)
        assert back.optimizer_state["param_groups"][0]["betas"] == (0.9, 0.999)

    def test_predictions_unchanged_by_roundtrip(self, checkpoint, train_pairs, synthetic_stacks, tmp_path):
        path = tmp_path / "a.ckpt"
        save_checkpoint(checkpoint, str(path))
        before = [t.score for t in score_pairs(checkpoint, train_pairs, synthetic_stacks)]
        after = [t.score for t in score_pairs(load_checkpoint(str(path)), train_pairs, synthetic_stacks)]
        assert before == after
        assert not model_from_checkpoint(checkpoint).training

    def test_edited_fingerprint(self, checkpoint, tmp_path):
        path = tmp_path / "a.ckpt"
        save_checkpoint(dataclasses.replace(checkpoint, fingerprint="0" * 64), str(path))
        with pytest.raises(CheckpointMismatchError):
            load_checkpoint(str(path))
        assert load_checkpoint(str(path), force=True).fingerprint == "0" * 64

    def test_expected_fingerprint(self, checkpoint, tmp_path):
        path = tmp_path / "a.ckpt"
        save_checkpoint(checkpoint, str(path))
        other = compute_fingerprint(dataclasses.replace(checkpoint.config, seed=1), checkpoint.registry)
        with pytest.raises(CheckpointMismatchError):
            load_checkpoint(str(path), expected_fingerprint=other)

    def test_corruption(self, checkpoint):
        data = encode_checkpoint(checkpoint)
        flipped = bytearray(data)
        flipped[-1] ^= 0xFF
        for bad in (bytes(flipped), data[:-8], data[:10], b"XXXX" + data[4:]):
            with pytest.raises(FormatError):
                decode_checkpoint(bad)

    def test_missing_file(self, tmp_path):
        with pytest.raises(InputError):
            load_checkpoint(str(tmp_path / "none.ckpt"))
