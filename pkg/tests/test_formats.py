import struct

import numpy as np
import pytest

from tervit.data import load_idx, read_idx, write_idx, IDX_IMAGES_MAGIC
from tervit.exceptions import ConfigError, FormatError
from tervit.formats import (
    ALIGN,
    MAGIC,
    Checkpoint,
    load_checkpoint,
    parse_config,
    parse_config_text,
    read_table,
    save_checkpoint,
    serialize_config,
)
from tervit.model import ViTConfig, VisionTransformer
from tervit.quantization import Int8Weight, QuantizationPolicy, TernaryTensor, ternarize
from tervit.training import AdamWState

MINIMAL = """
[model]
image_size = 16
patch_size = 8
embed_dim = 16
depth = 2
num_heads = 2
mlp_ratio = 4.0
num_classes = 10
"""


def _same(a, b):
    if isinstance(a, TernaryTensor):
        return (a.shape == b.shape and a.codes.tobytes() == b.codes.tobytes()
                and a.alpha.tobytes() == b.alpha.tobytes())
    if isinstance(a, Int8Weight):
        return (a.shape == b.shape and a.codes.tobytes() == b.codes.tobytes()
                and a.scale.tobytes() == b.scale.tobytes()
                and a.offset.tobytes() == b.offset.tobytes())
    return a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes()


@pytest.fixture
def mixed_checkpoint(toy_config):
    model = VisionTransformer(toy_config, seed=3)
    tensors = model.export_quantized(QuantizationPolicy.ternary())
    tensors["extra.raw"] = np.arange(10, dtype=np.uint8).reshape(2, 5)
    opt = AdamWState(step=7,
                     exp_avg={"head.weight": np.full((16, 10), 0.25, np.float32)},
                     exp_avg_sq={"head.weight": np.full((16, 10), 1e-3, np.float32)})
    return Checkpoint(toy_config, tensors, QuantizationPolicy.ternary(), opt, {"note": "x"})


def test_round_trip_is_bit_exact_for_every_dtype(tmp_path, mixed_checkpoint):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, mixed_checkpoint)
    back = load_checkpoint(path)
    kinds = {type(v) for v in back.tensors.values()}
    assert TernaryTensor in kinds and Int8Weight in kinds and np.ndarray in kinds
    assert set(back.tensors) == set(mixed_checkpoint.tensors)
    for name, value in mixed_checkpoint.tensors.items():
        assert _same(value, back.tensors[name]), name
    assert back.config == mixed_checkpoint.config
    assert back.policy == mixed_checkpoint.policy
    assert back.optimizer.step == 7
    assert _same(back.optimizer.exp_avg["head.weight"],
                 mixed_checkpoint.optimizer.exp_avg["head.weight"])
    assert back.extra == {"note": "x"}


def test_save_load_save_is_byte_identical(tmp_path, mixed_checkpoint):
    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(a, mixed_checkpoint)
    save_checkpoint(b, load_checkpoint(a))
    assert a.read_bytes() == b.read_bytes()


def test_layout_header_and_alignment(tmp_path, mixed_checkpoint):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, mixed_checkpoint)
    buf = path.read_bytes()
    assert buf[:8] == b"TERVIT\x00\x01" == MAGIC
    version, count = struct.unpack("<II", buf[8:16])
    entries, start = read_table(buf)
    assert version == 1 and count == len(entries)
    assert [e.name for e in entries[:2]] == ["meta.digest", "meta.config"]
    assert start % ALIGN == 0
    assert all(e.offset % ALIGN == 0 for e in entries)
    packed = next(e for e in entries if e.name == "blocks.0.attn.q.weight")
    k, n = packed.shape
    assert packed.dtype == 2 and packed.length == -(-k * n // 4) + 4 * n


def test_ternary_checkpoint_much_smaller_than_real(tmp_path):
    cfg = ViTConfig(32, 4, 3, 192, 2, 3, 4.0, 10)  # DeiT-T width and heads, two blocks
    model = VisionTransformer(cfg, seed=0)
    real, tern = tmp_path / "r.ckpt", tmp_path / "t.ckpt"
    save_checkpoint(real, Checkpoint(cfg, model.state_dict(), QuantizationPolicy.real32()))
    save_checkpoint(tern, Checkpoint(cfg, model.export_quantized(QuantizationPolicy.ternary()),
                                     QuantizationPolicy.ternary()))
    assert real.stat().st_size >= 10 * tern.stat().st_size


def test_truncation_reports_unexpected_end(tmp_path, mixed_checkpoint):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, mixed_checkpoint)
    buf = path.read_bytes()
    for cut in (4, 20, len(buf) // 2, len(buf) - 1):
        path.write_bytes(buf[:cut])
        with pytest.raises(FormatError, match="unexpected end"):
            load_checkpoint(path)


def test_bad_magic_and_version(tmp_path, mixed_checkpoint):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, mixed_checkpoint)
    buf = bytearray(path.read_bytes())
    bad = bytes(buf)
    path.write_bytes(b"XERVIT" + bad[6:])
    with pytest.raises(FormatError, match="magic"):
        load_checkpoint(path)
    path.write_bytes(bad[:8] + struct.pack("<I", 9) + bad[12:])
    with pytest.raises(FormatError, match="version"):
        load_checkpoint(path)


def test_digest_mismatch_fails_before_decoding(tmp_path, mixed_checkpoint, monkeypatch):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, mixed_checkpoint)
    from tervit import formats

    def boom(*a):
        raise AssertionError("tensor decoded")
    monkeypatch.setattr(formats, "_decode", boom)
    other = ViTConfig(16, 8, 1, 16, 3, 2, 4.0, 10)
    with pytest.raises(ConfigError):
        load_checkpoint(path, expected_config=other)


def test_corrupt_ternary_code_rejected(tmp_path, toy_config):
    t = ternarize(np.ones((4, 2), np.float32))
    t.codes[0] = 0b11
    path = tmp_path / "bad.ckpt"
    save_checkpoint(path, Checkpoint(toy_config, {"w": t}))
    with pytest.raises(FormatError):
        load_checkpoint(path)


def test_unserializable_value(tmp_path, toy_config):
    from tervit.exceptions import ContractError
    with pytest.raises(ContractError):
        save_checkpoint(tmp_path / "x.ckpt",
                        Checkpoint(toy_config, {"w": np.array(["a"], dtype=object)}))


# -- IDX -------------------------------------------------------------------------------


def _idx_fixture(tmp_path):
    # two 3x3 images written byte by byte: big-endian magic and dims
    images = (bytes([0, 0, 8, 3]) + (2).to_bytes(4, "big") + (3).to_bytes(4, "big")
              + (3).to_bytes(4, "big") + bytes([0, 51, 102, 153, 204, 255, 0, 0, 0])
              + bytes([255] * 9))
    labels = bytes([0, 0, 8, 1]) + (2).to_bytes(4, "big") + bytes([7, 2])
    ip, lp = tmp_path / "img.idx", tmp_path / "lab.idx"
    ip.write_bytes(images)
    lp.write_bytes(labels)
    return ip, lp


def test_idx_fixture_parses_to_known_values(tmp_path):
    ip, lp = _idx_fixture(tmp_path)
    ds = load_idx(ip, lp, num_classes=10)
    assert ds.images.shape == (2, 1, 3, 3)
    np.testing.assert_allclose(ds.images[0, 0, 0], [0.0, 0.2, 0.4], atol=1e-7)
    np.testing.assert_allclose(ds.images[0, 0, 1], [0.6, 0.8, 1.0], atol=1e-7)
    assert ds.images[1].min() == 1.0
    assert ds.labels.tolist() == [7, 2]
    assert load_idx(ip, lp).num_classes == 8


def test_idx_errors(tmp_path):
    ip, lp = _idx_fixture(tmp_path)
    wrong = tmp_path / "wrong.idx"
    wrong.write_bytes(bytes([0, 0, 8, 3]) + lp.read_bytes()[4:])
    with pytest.raises(FormatError, match="0x00000803"):
        load_idx(ip, wrong)
    empty = tmp_path / "empty.idx"
    empty.write_bytes(bytes([0, 0, 8, 1]) + (0).to_bytes(4, "big"))
    with pytest.raises(FormatError, match="zero"):
        load_idx(ip, empty)
    three = tmp_path / "three.idx"
    three.write_bytes(bytes([0, 0, 8, 1]) + (3).to_bytes(4, "big") + bytes([1, 2, 3]))
    with pytest.raises(FormatError, match="mismatch"):
        load_idx(ip, three)
    short = tmp_path / "short.idx"
    short.write_bytes(ip.read_bytes()[:-1])
    with pytest.raises(FormatError, match="unexpected end"):
        load_idx(short, lp)


def test_write_idx_round_trip(tmp_path, rng):
    arr = rng.integers(0, 256, size=(4, 5, 6), dtype=np.uint8)
    write_idx(tmp_path / "a.idx", arr)
    np.testing.assert_array_equal(read_idx(tmp_path / "a.idx", IDX_IMAGES_MAGIC), arr)


# -- config ----------------------------------------------------------------------------


def test_minimal_config_round_trips():
    run = parse_config_text(MINIMAL)
    again = parse_config_text(serialize_config(run))
    assert again.model == run.model
    assert again.policy == run.policy
    assert again.schedule == run.schedule
    assert again.data == run.data


def test_config_rejects_indivisible_heads():
    text = MINIMAL.replace("embed_dim = 16", "embed_dim = 10").replace("num_heads = 2",
                                                                      "num_heads = 3")
    with pytest.raises(ConfigError, match="num_heads"):
        parse_config_text(text)


def test_config_unknown_key_and_section():
    with pytest.raises(ConfigError) as exc:
        parse_config_text(MINIMAL + "embed_dimm = 3\n")
    assert exc.value.key == "embed_dimm"
    with pytest.raises(ConfigError):
        parse_config_text(MINIMAL + "[optimiser]\nlr = 1\n")
    with pytest.raises(ConfigError) as exc:
        parse_config_text(MINIMAL.replace("depth = 2\n", ""))
    assert exc.value.key == "depth"
    with pytest.raises(ConfigError):
        parse_config_text(MINIMAL.replace("depth = 2", "depth = two"))


def test_schedule_fifty_then_two_fifty(tmp_path):
    path = tmp_path / "run.ini"
    path.write_text(MINIMAL + "[schedule]\nphase_a_epochs = 50\nphase_b_epochs = 250\n")
    run = parse_config(path)
    assert (run.schedule.phase_a_epochs, run.schedule.phase_b_epochs) == (50, 250)
    assert run.schedule.total_epochs == 300


def test_policy_overrides_and_data_section():
    run = parse_config_text(MINIMAL + "[policy]\nbody_bits = 2\n[policy.overrides]\n"
                            "head = 32\n[data]\nkind = synthetic\nseed = 5\nnum_samples = 40\n")
    assert run.policy.bits_for("head") == 32
    assert run.policy.bits_for("blocks.0.mlp.fc1") == 2
    assert len(run.data.load(run.model)) == 40
    with pytest.raises(ConfigError):
        parse_config_text(MINIMAL + "[policy.overrides]\nnot_a_layer = 8\n")
    with pytest.raises(ConfigError):
        parse_config_text(MINIMAL + "[data]\nkind = idx\n")
