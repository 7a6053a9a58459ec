import numpy as np
import pytest

from vqseg.checkpoint import MAGIC, check_config, load_checkpoint, restore, save_checkpoint
from vqseg.errors import ConfigurationError, DataError
from vqseg.model import build_model
from vqseg.optim import AdamW
from vqseg.tensor import Tensor


@pytest.fixture
def trained_model(tiny_run_config, rng):
    """Model with non-trivial weights and batch-norm statistics."""
    model = build_model(tiny_run_config.model, seed=0)
    optimizer = AdamW(model.param_store(), tiny_run_config.train)
    for _ in range(2):
        out = model(Tensor(rng.standard_normal((2, 3, 16, 16))))
        (out.logits.sum() * 1e-3 + out.vq_loss).backward()
        optimizer.step(1e-2)
        optimizer.zero_grad()
    return model, optimizer


def test_round_trip_gives_identical_logits(tiny_run_config, trained_model, tmp_path, rng):
    model, optimizer = trained_model
    path = save_checkpoint(tmp_path / "ck" / "a.ckpt", model, tiny_run_config, 2, optimizer.state_arrays())
    assert not (tmp_path / "ck" / "a.ckpt.tmp").exists()

    ckpt = load_checkpoint(path)
    assert ckpt.iteration == 2
    assert ckpt.config["model"]["vq"]["K"] == 6
    assert set(ckpt.optimizer) == set(optimizer.state_arrays())

    fresh = build_model(tiny_run_config.model, seed=99)
    restore(fresh, ckpt, tiny_run_config)
    image = Tensor(rng.standard_normal((1, 3, 16, 16)))
    np.testing.assert_array_equal(fresh.eval()(image).logits.data, model.eval()(image).logits.data)
    for name, buffer in model.named_buffers():
        np.testing.assert_array_equal(dict(fresh.named_buffers())[name], buffer)


def test_optimizer_state_survives(tiny_run_config, trained_model, tmp_path):
    model, optimizer = trained_model
    ckpt = load_checkpoint(save_checkpoint(tmp_path / "a.ckpt", model, tiny_run_config, 2, optimizer.state_arrays()))
    other = AdamW(model.param_store(), tiny_run_config.train)
    other.load_state_arrays(ckpt.optimizer)
    assert other.state.step == optimizer.state.step
    for name, m in optimizer.state.m.items():
        np.testing.assert_array_equal(other.state.m[name], m)


def test_architecture_mismatch_lists_fields(tiny_run_config, trained_model, tmp_path):
    model, _ = trained_model
    ckpt = load_checkpoint(save_checkpoint(tmp_path / "a.ckpt", model, tiny_run_config, 2))
    other = tiny_run_config.with_overrides(**{"model.vq.K": 7, "model.num_classes": 5})
    with pytest.raises(ConfigurationError, match="model.num_classes, model.vq.K"):
        check_config(ckpt, other)


def test_run_settings_and_seeds_do_not_block(tiny_run_config, trained_model, tmp_path):
    model, _ = trained_model
    ckpt = load_checkpoint(save_checkpoint(tmp_path / "a.ckpt", model, tiny_run_config, 2))
    check_config(ckpt, tiny_run_config.seeded(5).with_overrides(**{"train.max_iters": 50}))


def test_missing_file(tmp_path):
    with pytest.raises(ConfigurationError, match="not found"):
        load_checkpoint(tmp_path / "nope.ckpt")


def test_bad_magic(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"NOTACKPT" + bytes(32))
    with pytest.raises(DataError, match="not a vqseg checkpoint"):
        load_checkpoint(path)


def test_truncated_file(tiny_run_config, trained_model, tmp_path):
    model, _ = trained_model
    path = save_checkpoint(tmp_path / "a.ckpt", model, tiny_run_config, 2)
    data = path.read_bytes()
    assert data.startswith(MAGIC)
    path.write_bytes(data[:-10])
    with pytest.raises(DataError, match="truncated"):
        load_checkpoint(path)
