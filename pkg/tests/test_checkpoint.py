import json
import struct

import numpy as np
import pytest

from papaformer.checkpoint import (
    CHECKPOINT_MAGIC,
    CheckpointError,
    load_checkpoint,
    read_manifest,
    save_checkpoint,
)
from papaformer.model import ModelConfig, build
from papaformer.tensor import RngState


def small_config(**overrides):
    base = dict(
        vocab_size=40,
        d_model=32,
        d_path=16,
        n_layer_blocks=2,
        n_parallel_layers=2,
        k_paths=2,
        heads_layer=2,
        heads_path=2,
        ff_layer=64,
        ff_path=32,
        max_seq_len=16,
        connection_kind="gumbel_v1",
    )
    base.update(overrides)
    return ModelConfig.from_dict(base)


@pytest.fixture
def model():
    return build(small_config(), RngState(9))


class TestRoundTrip:
    def test_save_load_save_is_byte_identical(self, model, tmp_path):
        p1, p2 = str(tmp_path / "a.ppck"), str(tmp_path / "b.ppck")
        save_checkpoint(p1, model, rng=RngState(3, 17), train_config={"lr": 5e-4}, extra={"step": 7})
        ckpt = load_checkpoint(p1)
        save_checkpoint(
            p2,
            ckpt.model,
            provenance=ckpt.provenance,
            train_config=ckpt.train_config,
            rng=ckpt.rng,
            opt_tensors=ckpt.opt_tensors,
            extra=ckpt.extra,
        )
        assert open(p1, "rb").read() == open(p2, "rb").read()

    def test_tensor_values_bit_exact(self, model, tmp_path):
        p = str(tmp_path / "c.ppck")
        save_checkpoint(p, model)
        again = load_checkpoint(p).model
        for name, t in model.named_params().items():
            assert np.array_equal(t.data, again.named_params()[name].data), name

    def test_rng_and_configs_round_trip(self, model, tmp_path):
        p = str(tmp_path / "d.ppck")
        save_checkpoint(p, model, rng=RngState(42, 5), train_config={"lr": 1e-3, "epochs": 2})
        ckpt = load_checkpoint(p)
        assert (ckpt.rng.seed, ckpt.rng.position) == (42, 5)
        assert ckpt.train_config == {"lr": 1e-3, "epochs": 2}
        assert ckpt.model.config == model.config

    def test_optimizer_tensors_round_trip(self, model, tmp_path):
        p = str(tmp_path / "e.ppck")
        opt = {"m.embed": np.arange(6, dtype=np.float32).reshape(2, 3)}
        save_checkpoint(p, model, opt_tensors=opt)
        ckpt = load_checkpoint(p)
        assert np.array_equal(ckpt.opt_tensors["m.embed"], opt["m.embed"])

    def test_provenance_round_trip_and_default(self, model, tmp_path):
        p = str(tmp_path / "f.ppck")
        save_checkpoint(p, model, provenance={"embed": "reused"})
        ckpt = load_checkpoint(p)
        assert ckpt.provenance["embed"] == "reused"
        assert ckpt.provenance["lm_head"] == "fresh"


class TestManifest:
    def test_read_manifest_lists_all_tensors(self, model, tmp_path):
        p = str(tmp_path / "g.ppck")
        save_checkpoint(p, model)
        manifest = read_manifest(p)
        names = {e["name"] for e in manifest["tensors"]}
        assert names == set(model.named_params())
        assert manifest["model_config"]["d_model"] == 32

    def test_offsets_contiguous(self, model, tmp_path):
        p = str(tmp_path / "h.ppck")
        save_checkpoint(p, model)
        expect = 0
        for e in read_manifest(p)["tensors"]:
            assert e["offset"] == expect
            expect += 4 * int(np.prod(e["shape"]))


def rewrite_manifest(path, mutate):
    raw = open(path, "rb").read()
    head = struct.calcsize("<4sIQ")
    magic, version, mlen = struct.unpack_from("<4sIQ", raw, 0)
    manifest = json.loads(raw[head : head + mlen])
    mutate(manifest)
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(struct.pack("<4sIQ", magic, version, len(blob)))
        f.write(blob)
        f.write(raw[head + mlen :])


class TestErrors:
    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad.ppck"
        p.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(str(p))
        with pytest.raises(CheckpointError):
            read_manifest(str(p))

    def test_bad_version(self, model, tmp_path):
        p = str(tmp_path / "v.ppck")
        save_checkpoint(p, model)
        raw = bytearray(open(p, "rb").read())
        struct.pack_into("<I", raw, len(CHECKPOINT_MAGIC), 99)
        open(p, "wb").write(bytes(raw))
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(p)

    def test_missing_tensor(self, model, tmp_path):
        p = str(tmp_path / "m.ppck")
        save_checkpoint(p, model)
        rewrite_manifest(p, lambda man: man["tensors"].pop())
        with pytest.raises(CheckpointError, match="missing"):
            load_checkpoint(p)

    def test_shape_mismatch(self, model, tmp_path):
        p = str(tmp_path / "s.ppck")
        save_checkpoint(p, model)

        def flip(man):
            man["tensors"][0]["shape"] = list(reversed(man["tensors"][0]["shape"]))

        rewrite_manifest(p, flip)
        with pytest.raises(CheckpointError, match="shape"):
            load_checkpoint(p)

    def test_unknown_tensor_name(self, model, tmp_path):
        p = str(tmp_path / "u.ppck")
        save_checkpoint(p, model)

        def rename(man):
            man["tensors"][0]["name"] = "not_a_real_param"

        rewrite_manifest(p, rename)
        with pytest.raises(CheckpointError, match="not present"):
            load_checkpoint(p)
