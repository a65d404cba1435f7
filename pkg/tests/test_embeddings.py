import struct

import numpy as np
import pytest

from treatnet import embeddings as emb
from treatnet.embeddings import EmbeddingBank, TabularSurrogateEncoder


def test_encoder_zero_input_with_zero_bias_gives_zero():
    enc = TabularSurrogateEncoder(37, 192, seed=0)
    enc0 = TabularSurrogateEncoder.from_arrays(enc.weight, np.zeros(192))
    assert np.array_equal(enc0.encode(np.zeros(37)), np.zeros(192))


def test_encoder_is_deterministic_and_seeded():
    a, b = TabularSurrogateEncoder(37, seed=5), TabularSurrogateEncoder(37, seed=5)
    x = np.random.default_rng(0).normal(size=37)
    assert a.encode(x).tobytes() == b.encode(x).tobytes()
    assert np.array_equal(a.weight, b.weight)


def test_distinct_seeds_give_distinct_outputs():
    a, b = TabularSurrogateEncoder(37, seed=1), TabularSurrogateEncoder(37, seed=2)
    xs = np.random.default_rng(0).normal(size=(100, 37))
    differ = [not np.array_equal(a.encode(x), b.encode(x)) for x in xs]
    assert all(differ)


def test_encoder_width_mismatch():
    with pytest.raises(ValueError, match="37"):
        TabularSurrogateEncoder(37).encode(np.zeros(36))


def test_encoder_parameters_are_read_only_and_float32_exact():
    enc = TabularSurrogateEncoder(10, 8, seed=3)
    with pytest.raises(ValueError):
        enc.weight[0, 0] = 1.0
    assert np.array_equal(enc.weight.astype(np.float32).astype(np.float64), enc.weight)


def test_encoder_lipschitz_bound_holds():
    enc = TabularSurrogateEncoder(37, seed=4)
    rng = np.random.default_rng(1)
    L = enc.lipschitz_bound()
    for _ in range(200):
        x, x2 = rng.normal(size=37) * 3, rng.normal(size=37) * 3
        lhs = np.max(np.abs(enc.encode(x) - enc.encode(x2)))
        assert lhs <= L * np.max(np.abs(x - x2)) + 1e-12


def _bank(rng, n, width=512, lmax=5):
    bank = EmbeddingBank(width)
    for i in range(n):
        L = int(rng.integers(1, lmax + 1))
        views = [("AP2", "AP4", "PLAX", "unknown")[j] for j in rng.integers(0, 4, size=L)]
        bank.add(f"study-{i}", rng.normal(size=(L, width)), views)
    return bank


def test_empty_bank_round_trip():
    raw = emb.bank_to_bytes(EmbeddingBank(512))
    assert raw == b"TREB1\x00" + struct.pack("<II", 512, 0)
    back = emb.bank_from_bytes(raw)
    assert back.width == 512 and len(back) == 0


def test_single_study_byte_layout():
    bank = EmbeddingBank(512)
    vals = np.arange(3 * 512, dtype=np.float32).reshape(3, 512) / 7
    bank.add("ab", vals, ["AP2", "PLAX", "unknown"])
    raw = emb.bank_to_bytes(bank)
    header = 6 + 4 + 4
    table = 2 + 2 + 2 + 3
    assert len(raw) == header + table + 3 * 512 * 4
    assert raw[14:16] == struct.pack("<H", 2)
    assert raw[16:18] == b"ab"
    assert raw[18:20] == struct.pack("<H", 3)
    assert raw[20:23] == bytes([0, 2, 255])
    assert np.array_equal(np.frombuffer(raw[23:], dtype="<f4").reshape(3, 512), vals)


def test_bank_round_trip_is_bit_exact_for_many_studies(tmp_path):
    rng = np.random.default_rng(0)
    bank = _bank(rng, 1000, width=16, lmax=4)
    path = tmp_path / "b.treb"
    emb.save_bank(bank, path)
    back = emb.load_bank(path)
    assert list(back.studies) == list(bank.studies)
    for k in bank.studies:
        assert back.studies[k].tobytes() == bank.studies[k].tobytes()
        assert back.views[k] == bank.views[k]
    assert emb.bank_to_bytes(back) == path.read_bytes()


def test_bank_load_errors_are_distinct():
    rng = np.random.default_rng(1)
    raw = emb.bank_to_bytes(_bank(rng, 2, width=8))
    with pytest.raises(emb.BadMagicError, match="bad magic"):
        emb.bank_from_bytes(b"XXXX" + raw[4:])
    with pytest.raises(emb.TruncatedBankError):
        emb.bank_from_bytes(raw[:-3])
    with pytest.raises(emb.WidthMismatchError):
        emb.bank_from_bytes(raw, expected_width=9)
    dup = EmbeddingBank(8)
    dup.add("s", np.ones((1, 8)))
    one = emb.bank_to_bytes(dup)
    body = one[14:]
    forged = one[:6] + struct.pack("<II", 8, 2) + body + body
    with pytest.raises(emb.DuplicateStudyError):
        emb.bank_from_bytes(forged)


def test_bank_rejects_bad_inputs():
    bank = EmbeddingBank(4)
    with pytest.raises(emb.WidthMismatchError):
        bank.add("a", np.ones((2, 5)))
    with pytest.raises(emb.WidthMismatchError):
        bank.add("a", np.ones((0, 4)))
    with pytest.raises(ValueError):
        bank.add("a", np.full((1, 4), np.nan))


def test_get_study():
    bank = EmbeddingBank(512)
    m = np.random.default_rng(2).normal(size=(3, 512)).astype(np.float32)
    bank.add("present", m, ["AP4"] * 3)
    bank.add("single", m[:1])
    got, views = emb.get_study(bank, "present")
    assert np.array_equal(got, m) and views == ("AP4",) * 3
    assert emb.get_study(bank, "single")[0].shape == (1, 512)
    with pytest.raises(emb.StudyNotFoundError):
        emb.get_study(bank, "absent")


def test_view_counts():
    bank = EmbeddingBank(2)
    bank.add("a", np.ones((3, 2)), ["AP2", "AP2", "PLAX"])
    assert bank.view_counts() == {"AP2": 2, "AP4": 0, "PLAX": 1, "unknown": 0}
