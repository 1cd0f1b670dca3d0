"""
Tests for the checkpoint directory format
"""
import json

import numpy as np
import pytest

from checkpoint import FORMAT, MANIFEST, TENSORS, Checkpoint, encode, load_checkpoint, save_checkpoint
from errors import CheckpointIntegrityError, DigestMismatchError, StorageError


@pytest.fixture
def checkpoint(rng):
    params = {
        "backbone.stem.w": rng.standard_normal((4, 3, 3, 3)).astype(np.float32),
        "head.0.w": rng.standard_normal((8, 1)).astype(np.float32),
        "head.0.b": np.zeros(1, dtype=np.float32),
    }
    return Checkpoint(
        params=params,
        adam_m={"head.0.w": rng.standard_normal((8, 1)).astype(np.float32)},
        adam_v={"head.0.w": rng.uniform(0, 1, (8, 1)).astype(np.float32)},
        meta={
            "config_digest": "c" * 64,
            "split_digest": "s" * 64,
            "epoch": 4,
            "phase": "fine_tuning",
            "best_auc": 0.8125,
            "optimizer": {"steps": {"head.0.w": 12}, "betas": [0.9, 0.999], "eps": 1e-8, "weight_decay": 0.01},
            "rng_state": {"bit_generator": "PCG64", "state": {"state": 2 ** 100 + 7, "inc": 3}},
        },
    )


class TestCheckpointFormat:

    def test_save_load_save_is_byte_identical(self, checkpoint, tmp_path):
        first = save_checkpoint(checkpoint, tmp_path / "a")
        second = save_checkpoint(load_checkpoint(first), tmp_path / "b")
        for name in (MANIFEST, TENSORS):
            assert (first / name).read_bytes() == (second / name).read_bytes()

    def test_round_trip_values(self, checkpoint, tmp_path):
        loaded = load_checkpoint(save_checkpoint(checkpoint, tmp_path / "ck"))
        assert list(loaded.params) == list(checkpoint.params)
        for name, value in checkpoint.params.items():
            assert np.array_equal(loaded.params[name], value)
            assert loaded.params[name].dtype == np.float32
        assert np.array_equal(loaded.adam_v["head.0.w"], checkpoint.adam_v["head.0.w"])
        assert loaded.meta == checkpoint.meta

    def test_tensor_layout(self, checkpoint, tmp_path):
        path = save_checkpoint(checkpoint, tmp_path / "ck")
        manifest = json.loads((path / MANIFEST).read_text())
        assert manifest["format"] == FORMAT
        names = [entry["name"] for entry in manifest["tensors"]]
        assert names == ["param/backbone.stem.w", "param/head.0.w", "param/head.0.b", "adam_m/head.0.w", "adam_v/head.0.w"]
        blob = (path / TENSORS).read_bytes()
        stem = manifest["tensors"][0]
        raw = blob[stem["offset"]:stem["offset"] + stem["nbytes"]]
        np.testing.assert_array_equal(np.frombuffer(raw, dtype="<f4").reshape(stem["shape"]),
                                      checkpoint.params["backbone.stem.w"])
        assert len(blob) == sum(entry["nbytes"] for entry in manifest["tensors"])

    def test_encode_matches_files(self, checkpoint, tmp_path):
        text, blob = encode(checkpoint)
        path = save_checkpoint(checkpoint, tmp_path / "ck")
        assert (path / MANIFEST).read_text() == text
        assert (path / TENSORS).read_bytes() == blob

    def test_overwrite_replaces_directory(self, checkpoint, tmp_path):
        path = save_checkpoint(checkpoint, tmp_path / "ck")
        checkpoint.meta["epoch"] = 5
        save_checkpoint(checkpoint, path)
        assert load_checkpoint(path).meta["epoch"] == 5
        assert not (tmp_path / "ck.tmp").exists()


class TestCheckpointIntegrity:

    def test_tampered_byte(self, checkpoint, tmp_path):
        path = save_checkpoint(checkpoint, tmp_path / "ck")
        blob = bytearray((path / TENSORS).read_bytes())
        blob[5] ^= 0xFF
        (path / TENSORS).write_bytes(bytes(blob))
        with pytest.raises(CheckpointIntegrityError, match="checksum"):
            load_checkpoint(path)

    def test_truncated_tensors(self, checkpoint, tmp_path):
        path = save_checkpoint(checkpoint, tmp_path / "ck")
        (path / TENSORS).write_bytes((path / TENSORS).read_bytes()[:-4])
        with pytest.raises(CheckpointIntegrityError):
            load_checkpoint(path)

    def test_unknown_format(self, checkpoint, tmp_path):
        path = save_checkpoint(checkpoint, tmp_path / "ck")
        manifest = json.loads((path / MANIFEST).read_text())
        manifest["format"] = "something-else/9"
        (path / MANIFEST).write_text(json.dumps(manifest))
        with pytest.raises(CheckpointIntegrityError):
            load_checkpoint(path)

    def test_missing_directory(self, tmp_path):
        with pytest.raises(StorageError):
            load_checkpoint(tmp_path / "nowhere")

    def test_digests_must_match_when_given(self, checkpoint, tmp_path):
        path = save_checkpoint(checkpoint, tmp_path / "ck")
        load_checkpoint(path, config_digest="c" * 64, split_digest="s" * 64)
        with pytest.raises(DigestMismatchError, match="split"):
            load_checkpoint(path, split_digest="x" * 64)
        with pytest.raises(DigestMismatchError, match="config"):
            load_checkpoint(path, config_digest="x" * 64)
