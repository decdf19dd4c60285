import numpy as np
import pytest

from mcmask.filterbank import (
    DecoderBank,
    EncoderBank,
    FilterbankRepresentation,
    decode,
    encode,
    init_dft,
    init_random,
    load_bank,
    pseudo_inverse_decoder,
    save_bank,
)
from mcmask.framing import segment
from mcmask.numerics import make_rng


def elimination_rank(A, tol=1e-9):
    """Rank by Gaussian elimination with partial pivoting."""
    A = np.array(A, dtype=float)
    rows, cols = A.shape
    rank, r = 0, 0
    for c in range(cols):
        if r == rows:
            break
        p = r + np.argmax(np.abs(A[r:, c]))
        if abs(A[p, c]) <= tol * max(1.0, np.abs(A).max()):
            continue
        A[[r, p]] = A[[p, r]]
        A[r + 1:] -= np.outer(A[r + 1:, c] / A[r, c], A[r])
        r += 1
        rank += 1
    return rank


def test_identity_encoder_returns_frames():
    fm = segment(np.arange(20.0), 4, 2)
    rep = encode(fm, EncoderBank(np.eye(4)[None], shared=True))
    np.testing.assert_array_equal(rep.values, fm.frames)


def test_all_ones_row_sums_frames():
    fm = segment(np.arange(20.0), 4, 2)
    rep = encode(fm, EncoderBank(np.ones((1, 1, 4)), shared=True))
    np.testing.assert_array_equal(rep.values[0], fm.frames.sum(axis=0))


def test_encode_matches_loop_oracle():
    rng = make_rng(3)
    fm = segment(rng.standard_normal(50), 8, 4)
    U = rng.standard_normal((5, 8))
    expected = np.zeros((5, fm.n_frames))
    for f in range(5):
        for n in range(fm.n_frames):
            expected[f, n] = sum(U[f, t] * fm.frames[t, n] for t in range(8))
    np.testing.assert_allclose(encode(fm, EncoderBank(U[None], True)).values, expected, atol=1e-13)


def test_encode_shape_mismatch():
    with pytest.raises(ValueError):
        encode(segment(np.ones(10), 4, 2), EncoderBank(np.ones((1, 3, 5)), True))


def test_per_channel_bank_isolation():
    rng = make_rng(0)
    bank = init_random(rng, 3, 6, 4)
    fm = segment(rng.standard_normal(30), 4, 2)
    before = encode(fm, bank, 1).values.copy()
    bank.matrices[0] += 1.0
    bank.matrices[2] *= -3.0
    np.testing.assert_array_equal(encode(fm, bank, 1).values, before)


def test_encode_is_linear_in_bank():
    rng = make_rng(1)
    fm = segment(rng.standard_normal(30), 4, 2)
    A, B = rng.standard_normal((5, 4)), rng.standard_normal((5, 4))
    lhs = encode(fm, EncoderBank((2 * A - B)[None], True)).values
    rhs = 2 * encode(fm, EncoderBank(A[None], True)).values - encode(fm, EncoderBank(B[None], True)).values
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


def test_pseudo_inverse_round_trip():
    rng = make_rng(2)
    x = rng.standard_normal(64)
    bank = EncoderBank(rng.standard_normal((1, 12, 8)), True)  # F > T, injective
    y = decode(encode(segment(x, 8, 8), bank), pseudo_inverse_decoder(bank))
    assert np.linalg.norm(y - x) / np.linalg.norm(x) < 1e-8


def test_decode_zero_rep_is_silent():
    rep = FilterbankRepresentation(np.zeros((4, 5)), 2, 12)
    np.testing.assert_array_equal(decode(rep, DecoderBank(np.ones((4, 4)))), np.zeros(12))


def test_decode_identity_overlap_adds_columns():
    vals = np.arange(12.0).reshape(4, 3)
    out = decode(FilterbankRepresentation(vals, 4, 12), DecoderBank(np.eye(4)))
    np.testing.assert_array_equal(out, vals.T.ravel())


def test_init_random_deterministic_and_bounded():
    a = init_random(make_rng(1), 2, 16, 9)
    b = init_random(make_rng(1), 2, 16, 9)
    np.testing.assert_array_equal(a.matrices, b.matrices)
    assert np.all(np.abs(a.matrices) <= 1 / 3)
    assert init_random(make_rng(1), 4, 3, 2, shared=True).matrices.shape == (1, 3, 2)


def test_init_random_mean_within_three_sigma():
    T = 4
    bank = init_random(make_rng(11), 1, 250_000, T)
    vals = bank.matrices.ravel()
    assert vals.size == 10**6
    sigma = (1 / np.sqrt(T)) / np.sqrt(3) / np.sqrt(vals.size)  # std of the mean of U(-b, b)
    assert abs(vals.mean()) < 3 * sigma


def test_dft_basis_four_points():
    U = init_dft(4).matrices[0]
    np.testing.assert_allclose(U, [[1, 1, 1, 1], [1, 0, -1, 0], [1, -1, 1, -1], [0, 1, 0, -1]], atol=1e-15)


@pytest.mark.parametrize("T", [4, 8, 64, 256])
def test_dft_basis_full_rank(T):
    assert elimination_rank(init_dft(T).matrices[0]) == T


def test_dft_cosine_concentrates_in_its_row():
    T, k = 32, 5
    frame = np.cos(2 * np.pi * k * np.arange(T) / T)
    energy = (init_dft(T).matrices[0] @ frame) ** 2
    assert np.argmax(energy) == k
    assert energy[k] / energy.sum() > 1 - 1e-12


def test_dft_rejects_odd_length():
    with pytest.raises(ValueError):
        init_dft(7)


def test_pseudo_inverse_examples():
    np.testing.assert_allclose(pseudo_inverse_decoder(EncoderBank(np.eye(5)[None], True)).matrix, np.eye(5))
    np.testing.assert_allclose(pseudo_inverse_decoder(EncoderBank(2 * np.eye(5)[None], True)).matrix,
                               0.5 * np.eye(5))
    U = init_dft(64)
    V = pseudo_inverse_decoder(U).matrix
    assert np.linalg.norm(V @ U.matrices[0] - np.eye(64)) < 1e-10


def test_pseudo_inverse_rejects_rank_deficient():
    U = np.ones((4, 4))
    with pytest.raises(ValueError):
        pseudo_inverse_decoder(EncoderBank(U[None], True))
    with pytest.raises(ValueError):
        pseudo_inverse_decoder(init_random(make_rng(0), 2, 4, 4))  # not shared


def test_bank_serialization_round_trip(tmp_path):
    enc = init_random(make_rng(3), 3, 5, 4)
    save_bank(tmp_path / "enc.npz", enc)
    back = load_bank(tmp_path / "enc.npz")
    assert isinstance(back, EncoderBank) and not back.shared
    np.testing.assert_array_equal(back.matrices, enc.matrices)
    dec = DecoderBank(make_rng(4).standard_normal((4, 5)))
    save_bank(tmp_path / "dec.npz", dec)
    np.testing.assert_array_equal(load_bank(tmp_path / "dec.npz").matrix, dec.matrix)
