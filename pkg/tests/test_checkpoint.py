import numpy as np
import pytest
from conftest import random_paragraph, tiny_model

from permgen.checkpoint import (MAGIC, Checkpoint, CheckpointError, from_bytes, is_checkpoint, load_checkpoint,
                                save_checkpoint, to_bytes)
from permgen.train import TrainConfig, Trainer, resume, snapshot

VOCAB = "ab" * 32


def fresh_ckpt(**kw):
    return Checkpoint.from_model(tiny_model(dtype=np.float32), VOCAB, **kw)


def test_save_load_is_bit_identical(tmp_path):
    ck = fresh_ckpt(step=7, run_config={"seed": 3}, config_hash="abc")
    save_checkpoint(tmp_path / "m.pgen", ck)
    back = load_checkpoint(tmp_path / "m.pgen", VOCAB)
    assert set(back.params) == set(ck.params)
    for name, arr in ck.params.items():
        assert back.params[name].tobytes() == arr.tobytes()
    assert (back.step, back.run_config, back.config_hash, back.model_config) == (7, {"seed": 3}, "abc",
                                                                                  ck.model_config)
    assert to_bytes(back) == (tmp_path / "m.pgen").read_bytes()
    assert is_checkpoint(tmp_path / "m.pgen")


def test_serialisation_is_deterministic():
    assert to_bytes(fresh_ckpt()) == to_bytes(fresh_ckpt())


def test_tampered_header_byte_is_a_checksum_error():
    raw = bytearray(to_bytes(fresh_ckpt()))
    raw[20] ^= 0x01
    with pytest.raises(CheckpointError, match="checksum"):
        from_bytes(bytes(raw))


def test_tampered_tensor_byte_is_a_checksum_error():
    raw = bytearray(to_bytes(fresh_ckpt()))
    raw[len(raw) // 2] ^= 0x80
    with pytest.raises(CheckpointError, match="checksum"):
        from_bytes(bytes(raw))


def test_bad_magic_and_short_files(tmp_path):
    raw = to_bytes(fresh_ckpt())
    with pytest.raises(CheckpointError, match="magic"):
        from_bytes(b"XXXX" + raw[4:])
    with pytest.raises(CheckpointError, match="short"):
        from_bytes(raw[:10])
    (tmp_path / "x.txt").write_text("not a checkpoint")
    assert not is_checkpoint(tmp_path / "x.txt")
    assert raw.startswith(MAGIC)


def test_vocab_hash_mismatch_names_both_hashes():
    raw = to_bytes(fresh_ckpt())
    with pytest.raises(CheckpointError) as info:
        from_bytes(raw, "cd" * 32)
    assert VOCAB in str(info.value) and "cd" * 32 in str(info.value)


def test_model_rebuilt_from_checkpoint_computes_the_same_logits():
    model = tiny_model(dtype=np.float32)
    back = from_bytes(to_bytes(Checkpoint.from_model(model, VOCAB))).model()
    src = [25, 26, 27]
    np.testing.assert_array_equal(model.encode(src).data, back.encode(src).data)


def _data():
    rng = np.random.default_rng(0)
    return [random_paragraph(rng, 40) for _ in range(10)]


@pytest.mark.parametrize("optimizer", ["adam", "sgd"])
def test_resume_matches_uninterrupted_run_bit_exactly(tmp_path, optimizer):
    data = _data()
    cfg = TrainConfig(batch_size=3, warmup_steps=2, max_steps=8, seed=11, optimizer=optimizer, lr=1e-2)
    full = Trainer(tiny_model(seed=1, dtype=np.float32), data, cfg)
    full_losses = [m.loss for m in full.run()]

    first = Trainer(tiny_model(seed=1, dtype=np.float32), data, cfg)
    losses = [m.loss for m in first.run(until=5)]
    save_checkpoint(tmp_path / "c.pgen", snapshot(first, VOCAB))
    second = resume(load_checkpoint(tmp_path / "c.pgen", VOCAB), data, cfg)
    assert second.step_count == 5
    losses += [m.loss for m in second.run()]

    assert losses == full_losses
    for name, p in full.model.params.items():
        assert p.data.tobytes() == second.model.params[name].data.tobytes(), name
    assert full.rng.bit_generator.state == second.rng.bit_generator.state


def test_resume_with_other_optimizer_rejected():
    data = _data()
    t = Trainer(tiny_model(dtype=np.float32), data, TrainConfig(max_steps=2, warmup_steps=1))
    t.run()
    with pytest.raises(ValueError):
        resume(snapshot(t, VOCAB), data, TrainConfig(max_steps=4, warmup_steps=1, optimizer="sgd"))
