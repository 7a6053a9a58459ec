import logging
import math

import numpy as np
import pytest

from vqseg.errors import DataError, NumericalError
from vqseg.losses import cross_entropy, total_loss
from vqseg.quantizer import QuantizationResult
from vqseg.tensor import Tensor, grad_check


def qr_with(codebook_loss, commitment_loss):
    return QuantizationResult(
        indices=np.zeros((1, 1), dtype=np.int64),
        quantized=np.zeros((1, 1, 1)),
        codebook_loss=codebook_loss,
        commitment_loss=commitment_loss,
    )


def test_confident_correct_prediction_costs_nothing():
    logits = np.full((1, 3, 2, 2), -50.0)
    labels = np.array([[0, 1], [2, 0]])
    for y in range(2):
        for x in range(2):
            logits[0, labels[y, x], y, x] = 50.0
    assert cross_entropy(Tensor(logits), labels).item() == pytest.approx(0.0, abs=1e-12)


def test_uniform_logits_cost_log_num_classes(rng):
    labels = rng.integers(0, 5, size=(2, 3, 3))
    loss = cross_entropy(Tensor(np.zeros((2, 5, 3, 3))), labels)
    assert loss.item() == pytest.approx(math.log(5))


def test_two_class_hand_computed():
    logits = np.array([[[[1.0, 0.0], [2.0, -1.0]], [[0.0, 1.0], [0.5, 0.5]]]])
    labels = np.array([[0, 0], [1, 255]])

    def log_softmax(a, b, pick):
        m = max(a, b)
        lse = m + math.log(math.exp(a - m) + math.exp(b - m))
        return (a if pick == 0 else b) - lse

    expected = -(
        log_softmax(1.0, 0.0, 0) + log_softmax(0.0, 1.0, 0) + log_softmax(2.0, 0.5, 1)
    ) / 3
    assert cross_entropy(Tensor(logits), labels).item() == pytest.approx(expected, abs=1e-12)


def test_all_ignored_is_zero_with_warning(rng, caplog):
    logits = Tensor(rng.standard_normal((1, 3, 2, 2)), requires_grad=True)
    with caplog.at_level(logging.WARNING):
        loss = cross_entropy(logits, np.full((2, 2), 255))
    assert loss.item() == 0.0
    assert "ignore" in caplog.text
    loss.backward()
    assert logits.grad is None or not logits.grad.any()


def test_out_of_range_label_names_its_pixel(rng):
    labels = np.zeros((2, 3, 4), dtype=np.int64)
    labels[1, 2, 3] = 7
    with pytest.raises(DataError, match="sample 1, row 2, col 3"):
        cross_entropy(Tensor(rng.standard_normal((2, 3, 3, 4))), labels)


def test_label_shape_mismatch(rng):
    with pytest.raises(DataError):
        cross_entropy(Tensor(rng.standard_normal((2, 3, 3, 4))), np.zeros((3, 4), dtype=np.int64))


def test_cross_entropy_gradient(rng):
    logits = Tensor(rng.standard_normal((2, 4, 3, 3)) * 2, requires_grad=True)
    labels = rng.integers(0, 4, size=(2, 3, 3))
    labels[0, 1, 1] = 255
    assert grad_check(lambda t: cross_entropy(t, labels), logits) < 1e-4
    # ignored pixels get no gradient
    logits.zero_grad()
    cross_entropy(logits, labels).backward()
    assert not logits.grad[0, :, 1, 1].any()


def test_total_loss_hand_value():
    terms = total_loss(0.5, qr_with(1.0, 1.0), beta=0.25)
    assert terms.ce == 0.5
    assert terms.vq == pytest.approx(1.25)
    assert terms.total == pytest.approx(1.75)


def test_total_loss_without_commitment_weight():
    assert total_loss(Tensor(np.array(0.5)), qr_with(1.0, 1.0), beta=0.0).total == pytest.approx(1.5)


def test_total_loss_without_quantizer():
    terms = total_loss(0.5, None, beta=0.25)
    assert terms.vq == 0.0
    assert terms.total == 0.5


def test_total_loss_rejects_non_finite():
    with pytest.raises(NumericalError):
        total_loss(float("nan"), None, beta=0.25)
