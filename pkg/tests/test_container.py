import struct

import numpy as np
import pytest

from dcp.container import (ContainerError, encoders_to_bytes, load_bank, load_encoders, pack, save_bank,
                           save_encoders, unpack)
from dcp.encoders import init_dual_encoder, text_config, vision_config
from dcp.prompts import PromptConfig, init_bank


@pytest.fixture(scope="module")
def enc():
    v = vision_config(n_layers=2, model_dim=8, n_heads=2, ffn_dim=8, max_seq=12, embed_dim=4, patch_dim=3)
    t = text_config(n_layers=2, model_dim=6, n_heads=2, ffn_dim=8, max_seq=12, embed_dim=4, vocab_size=9)
    return init_dual_encoder(v, t, 0)


def test_header_layout():
    blob = pack(b"ENCW", {"a": 1}, {"x": np.arange(6.0).reshape(2, 3)})
    assert blob[:4] == b"DCPW"
    assert struct.unpack("<I", blob[4:8]) == (1,)
    assert blob[8:12] == b"ENCW"
    # the data block ends the file as little-endian doubles
    assert np.array_equal(np.frombuffer(blob[-48:], dtype="<f8"), np.arange(6.0))


def test_pack_roundtrip_and_special_values():
    arrays = {"b": np.array([[np.pi, -0.0], [1e-300, 1e300]]), "a": np.array([1.5]), "s": np.zeros((0, 3))}
    tag, header, back = unpack(pack(b"PRMB", {"k": [1, 2]}, arrays))
    assert tag == b"PRMB" and header == {"k": [1, 2]}
    for k, v in arrays.items():
        assert back[k].shape == v.shape and back[k].tobytes() == v.tobytes()


def test_encoder_roundtrip_is_exact(enc, tmp_path):
    path = save_encoders(enc, tmp_path / "enc.dcpw")
    back = load_encoders(path)
    assert back.checksum() == enc.checksum()
    assert back.vision.config == enc.vision.config and back.text.config == enc.text.config
    assert path.read_bytes() == encoders_to_bytes(back)


def test_bank_roundtrip(enc, tmp_path):
    bank = init_bank("dcp", PromptConfig(M=2, N=2, d_attn=4, n_heads_cmpa=2, fusion_mode="max"), enc, 3)
    back = load_bank(save_bank(bank, tmp_path / "bank.dcpw"))
    assert back.method == "dcp" and back.config == bank.config
    assert back.arrays.keys() == bank.arrays.keys()
    assert all(np.array_equal(back.arrays[k], v) for k, v in bank.arrays.items())


def test_section_tags_are_checked(enc, tmp_path):
    path = save_encoders(enc, tmp_path / "enc.dcpw")
    with pytest.raises(ContainerError):
        load_bank(path)


@pytest.mark.parametrize("corrupt", [lambda b: b"XXXX" + b[4:], lambda b: b[:-3], lambda b: b + b"\0",
                                     lambda b: b[:4] + struct.pack("<I", 9) + b[8:]])
def test_malformed_files_are_rejected(corrupt):
    blob = pack(b"ENCW", {}, {"x": np.ones(3)})
    with pytest.raises(ContainerError):
        unpack(corrupt(blob))
