import unittest

import numpy as np

from app import tokenizer
from app.model import ModelConfig, build_model, layer_group, set_trainable
from app.tensor import Tensor
from app.training import AnswerExample, TrainSettings, answer_loss, train_answer_span
from app.utils.errors import ContractError, NumericError

SMALL = ModelConfig(d_model=8, n_layers=3, n_heads=2, patch_px=8, max_seq=48)


def _examples(n=4):
    rng = np.random.default_rng(0)
    out = []
    for i in range(n):
        answer = "1" if i % 2 else "0"
        out.append(
            AnswerExample(
                prompt=tuple(tokenizer.encode(f"Is it {i}?")),
                answer=tuple(tokenizer.encode(answer)),
                image=rng.random((32, 32, 3)),
            )
        )
    return out


class TestTrainAnswerSpan(unittest.TestCase):
    def setUp(self):
        self.model = build_model(SMALL, seed=3)

    def test_frozen_groups_stay_bit_identical(self):
        before = self.model.snapshot()
        set_trainable(self.model, [layer_group(1)])
        train_answer_span(self.model, _examples(), TrainSettings(lr=1e-2, batch_size=2, epochs=1))
        after = self.model.snapshot()
        for name in before:
            changed = not np.array_equal(before[name], after[name])
            trainable = name.startswith(("layer.1.", "lm_head.", "final_norm."))
            if name.endswith(".weight") and trainable:
                self.assertTrue(changed, name)
            if not trainable:
                self.assertFalse(changed, name)

    def test_zero_epochs_is_a_no_op(self):
        before = self.model.snapshot()
        logs = train_answer_span(self.model, _examples(), TrainSettings(epochs=0))
        self.assertEqual(logs, [])
        for name, data in self.model.snapshot().items():
            np.testing.assert_array_equal(before[name], data)

    def test_nothing_trainable_is_a_no_op(self):
        for p in self.model.params.values():
            p.requires_grad = False
        self.assertEqual(train_answer_span(self.model, _examples(), TrainSettings()), [])

    def test_loss_goes_down_on_a_memorized_set(self):
        set_trainable(self.model, self.model.group_names, finetune_policy=False)
        settings = TrainSettings(lr=1e-2, batch_size=4, epochs=25)
        logs = train_answer_span(self.model, _examples(), settings)
        self.assertEqual(len(logs), 25)
        self.assertLess(logs[-1].mean_loss, logs[0].mean_loss)

    def test_callback_can_stop_early(self):
        set_trainable(self.model, [layer_group(0)])
        logs = train_answer_span(
            self.model, _examples(), TrainSettings(epochs=5), on_epoch=lambda log: log.epoch == 1
        )
        self.assertEqual([log.epoch for log in logs], [0, 1])

    def test_same_seed_gives_same_parameters(self):
        other = build_model(SMALL, seed=3)
        for m in (self.model, other):
            set_trainable(m, [layer_group(2)])
            train_answer_span(m, _examples(), TrainSettings(lr=1e-2, batch_size=3, seed=9))
        for name, data in self.model.snapshot().items():
            np.testing.assert_array_equal(data, other[name].data)

    def test_contract_errors(self):
        set_trainable(self.model, [layer_group(0)])
        with self.assertRaises(ContractError):
            train_answer_span(self.model, [], TrainSettings())
        with self.assertRaises(ContractError):
            train_answer_span(self.model, _examples(), TrainSettings(batch_size=0))

    def test_non_finite_loss_raises(self):
        set_trainable(self.model, [layer_group(0)])
        bias = np.zeros(SMALL.vocab_size)
        bias[0] = np.nan
        self.model.params["lm_head.bias"] = Tensor(bias, requires_grad=True, name="lm_head.bias")
        with self.assertRaises(NumericError):
            train_answer_span(self.model, _examples(), TrainSettings())


def test_answer_loss_is_positive_scalar():
    model = build_model(SMALL, seed=0)
    loss = answer_loss(model, _examples(3))
    assert loss.ndim == 0
    assert loss.item() > 0.0
