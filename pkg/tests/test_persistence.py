import struct
from dataclasses import replace

import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from trex.encoder import EncoderConfig, named_config
from trex.fusion import ModelConfig, PairClassifier
from trex.nn_core import ConfigError
from trex.persistence import (
    MAGIC,
    BadMagicError,
    ChecksumError,
    ConfigMismatchError,
    RunConfig,
    VersionMismatchError,
    load_checkpoint,
    load_run_config,
    model_config_from_dict,
    model_config_to_dict,
    parse_run_config,
    read_checkpoint,
    save_checkpoint,
    write_resolved,
)

from test_fusion import MICRO


@pytest.fixture
def ckpt(tmp_path):
    torch.manual_seed(0)
    model = PairClassifier(ModelConfig(encoder=MICRO, dca_heads=2, hidden=8))
    return model, save_checkpoint(model, {"seed": 3, "fold": 1, "epoch": 30}, tmp_path / "m.ckpt")


def test_round_trip_bitwise(ckpt):
    model, path = ckpt
    loaded, meta = load_checkpoint(path)
    assert meta == {"seed": 3, "fold": 1, "epoch": 30}
    assert loaded.cfg == model.cfg and not loaded.training
    ref = model.state_dict()
    for k, v in loaded.state_dict().items():
        assert torch.equal(v, ref[k]), k
    x = torch.rand(2, 16, 16, 3)
    model.eval()
    assert torch.equal(model(x, x, torch.tensor([0.2, 0.4])), loaded(x, x, torch.tensor([0.2, 0.4])))


def test_save_is_deterministic(ckpt, tmp_path):
    model, path = ckpt
    again = save_checkpoint(model, {"seed": 3, "fold": 1, "epoch": 30}, tmp_path / "n.ckpt")
    assert path.read_bytes() == again.read_bytes()


def test_header_layout(ckpt):
    _, path = ckpt
    blob = path.read_bytes()
    assert blob[:8] == MAGIC
    version, head_len = struct.unpack("<IQ", blob[8:20])
    assert version == 1 and blob[20 : 20 + head_len].startswith(b"{")
    header, arrays = read_checkpoint(path)
    assert [n for n, _ in header["tensors"]] == list(arrays)


@pytest.mark.parametrize("offset", [30, -40, -1])
def test_flipped_byte_detected(ckpt, offset):
    _, path = ckpt
    blob = bytearray(path.read_bytes())
    blob[offset] ^= 0x01
    path.write_bytes(bytes(blob))
    with pytest.raises(ChecksumError):
        load_checkpoint(path)


def test_truncated_file(ckpt):
    _, path = ckpt
    path.write_bytes(path.read_bytes()[:15])
    with pytest.raises(ChecksumError):
        read_checkpoint(path)


def test_bad_magic(ckpt):
    _, path = ckpt
    path.write_bytes(b"NOTACKPT" + path.read_bytes()[8:])
    with pytest.raises(BadMagicError):
        read_checkpoint(path)


def test_version_mismatch(ckpt):
    _, path = ckpt
    blob = bytearray(path.read_bytes())
    blob[8:12] = struct.pack("<I", 2)
    path.write_bytes(bytes(blob))
    with pytest.raises(VersionMismatchError, match="version 2"):
        read_checkpoint(path)


def test_config_mismatch_names_both_values(tmp_path):
    toy = ModelConfig(encoder=named_config("toy"))
    model = PairClassifier(toy)
    path = save_checkpoint(model, {}, tmp_path / "toy.ckpt")
    expected = replace(toy, encoder=replace(toy.encoder, input_hw=(224, 224)))
    with pytest.raises(ConfigMismatchError) as err:
        load_checkpoint(path, expected)
    msg = str(err.value)
    assert "input_hw" in msg and "64" in msg and "224" in msg
    load_checkpoint(path, toy)  # matching config loads


@given(
    st.sampled_from(["trex", "cat", "si"]),
    st.booleans(),
    st.booleans(),
    st.sampled_from([None, 4, 16]),
    st.floats(0.0, 0.9),
)
def test_model_config_dict_round_trip(kind, share, no_dt, hidden, dropout):
    cfg = ModelConfig(kind=kind, encoder=MICRO, dca_heads=2, share_projections=share, hidden=hidden,
                      dropout=dropout, no_dt=no_dt)
    assert model_config_from_dict(model_config_to_dict(cfg)) == cfg


# ---------------------------------------------------------------------------
# Run configuration
# ---------------------------------------------------------------------------


def test_default_config_round_trip():
    cfg = RunConfig()
    assert parse_run_config(cfg.to_text()) == cfg


def test_parse_values_and_derived_fields():
    cfg = parse_run_config(
        "# comment\n"
        "run.seed=7\n"
        "synth.n_patients=40\n"
        "encoder.window=2\n"
        "train.model_kind=cat\n"
        "train.no_dt=true\n"
        "eval.k=5\n"
        "model.hidden=none\n"
    )
    assert cfg.seed == 7 and cfg.train.seed == 7
    assert cfg.synth.n_patients == 40 and cfg.eval.k == 5
    assert cfg.model.kind == "cat" and cfg.model.no_dt and cfg.model.encoder.window == 2
    assert cfg.model.hidden is None
    assert parse_run_config(cfg.to_text()) == cfg


def test_preset_then_override():
    cfg = parse_run_config("run.encoder_preset=tiny\nencoder.window=2\n")
    assert cfg.encoder == replace(named_config("tiny"), window=2)


@pytest.mark.parametrize(
    "text, fragment",
    [
        ("run.seed=1\nrun.sed=2\n", ":2: unknown key"),
        ("run.seed=1\nrun.seed=2\n", ":2: duplicate key"),
        ("bogus.x=1\n", ":1: unknown section"),
        ("\n\nrun.seed\n", ":3: expected"),
        ("train.epochs=many\n", ":1: bad value"),
        ("model.kind=si\n", ":1: unknown key"),  # derived from train.model_kind
        ("train.no_dca=maybe\n", ":1: bad value"),
    ],
)
def test_parse_errors_carry_line_numbers(text, fragment):
    with pytest.raises(ConfigError, match=fragment):
        parse_run_config(text, "x.cfg")


def test_invalid_value_rejected():
    with pytest.raises(ConfigError):
        parse_run_config("eval.how=median\n")


def test_override_and_resolved_file(tmp_path):
    cfg = RunConfig().override(seed=4, model="si", task="response", k=2)
    assert (cfg.seed, cfg.model.kind, cfg.train.task, cfg.eval.k) == (4, "si", "response", 2)
    path = write_resolved(cfg, tmp_path / "sub" / "config.resolved")
    assert load_run_config(path) == cfg
    assert all("=" in line for line in path.read_text().splitlines()[1:])


def test_encoder_geometry_in_resolved_text():
    text = RunConfig(encoder=EncoderConfig(input_hw=(32, 32))).to_text()
    assert "encoder.input_hw=32,32" in text
