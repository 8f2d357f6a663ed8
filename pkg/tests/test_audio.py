import math
import struct

import numpy as np
import pytest

from atflrec import audio as A
from atflrec.errors import CodecError, FFTSizeError, ResolutionError, SignalTooShortError, WavParseError

SR = 16000


def _pcm16_stereo(left, right, rate=SR):
    inter = np.empty(2 * len(left), dtype="<i2")
    inter[0::2], inter[1::2] = left, right
    data = inter.tobytes()
    fmt = struct.pack("<HHIIHH", 1, 2, rate, rate * 4, 4, 16)
    body = b"WAVE" + b"fmt " + struct.pack("<I", 16) + fmt + b"data" + struct.pack("<I", len(data)) + data
    return b"RIFF" + struct.pack("<I", len(body)) + body


class TestWav:
    def test_full_scale_sample(self, tmp_path):
        w = A.Waveform(np.array([0.0]), SR)
        buf = bytearray(A.wav_bytes(w))
        struct.pack_into("<h", buf, len(buf) - 2, 32767)
        (tmp_path / "a.wav").write_bytes(bytes(buf))
        assert A.load_wav(tmp_path / "a.wav").samples[0] == 32767 / 32768

    def test_silence(self, tmp_path):
        A.save_wav(tmp_path / "s.wav", A.Waveform(np.zeros(800), SR))
        np.testing.assert_array_equal(A.load_wav(tmp_path / "s.wav").samples, np.zeros(800))

    def test_stereo_averaged(self):
        buf = _pcm16_stereo(np.array([int(0.2 * 32768)]), np.array([int(0.4 * 32768)]))
        w = A.parse_wav(buf)
        assert w.samples[0] == pytest.approx(0.3, abs=1e-4)

    def test_float32_roundtrip(self, tmp_path):
        x = np.random.default_rng(0).uniform(-1, 1, 1000)
        A.save_wav(tmp_path / "f.wav", A.Waveform(x, SR), encoding="float32")
        np.testing.assert_allclose(A.load_wav(tmp_path / "f.wav").samples, x, atol=1e-7)

    def test_bad_magic_reports_offset(self):
        with pytest.raises(WavParseError) as exc:
            A.parse_wav(b"RIFX" + bytes(40))
        assert exc.value.offset == 0
        buf = bytearray(A.wav_bytes(A.Waveform(np.zeros(4), SR)))
        buf[8:12] = b"WAVX"
        with pytest.raises(WavParseError) as exc:
            A.parse_wav(bytes(buf))
        assert exc.value.offset == 8

    def test_truncated_chunk(self):
        buf = A.wav_bytes(A.Waveform(np.zeros(100), SR))
        with pytest.raises(WavParseError, match="offset 36"):
            A.parse_wav(buf[:60])

    def test_unsupported_codec(self):
        buf = bytearray(A.wav_bytes(A.Waveform(np.zeros(4), SR)))
        struct.pack_into("<H", buf, 20, 2)  # MS ADPCM
        with pytest.raises(CodecError):
            A.parse_wav(bytes(buf))

    def test_resampling_to_16k(self, tmp_path):
        t = np.arange(8000) / 8000
        A.save_wav(tmp_path / "r.wav", A.Waveform(0.5 * np.sin(2 * np.pi * 50 * t), 8000))
        w = A.load_wav(tmp_path / "r.wav")
        assert w.sample_rate == SR and len(w) == 16000


class TestTruncateAndFrames:
    def test_truncate(self):
        assert len(A.truncate(A.Waveform(np.zeros(45 * SR), SR), 30)) == 480000
        assert len(A.truncate(A.Waveform(np.zeros(10 * SR), SR), 30)) == 10 * SR
        assert len(A.truncate(A.Waveform(np.zeros(30 * SR), SR), 30)) == 30 * SR

    def test_thirty_seconds(self):
        cfg = A.FbankConfig()
        assert A.frame_signal(A.Waveform(np.zeros(30 * SR), SR), cfg).shape == (2998, 512)

    @pytest.mark.parametrize("n,expected", [(400, 1), (559, 1), (560, 2)])
    def test_boundaries(self, n, expected):
        assert A.frame_signal(A.Waveform(np.zeros(n), SR), A.FbankConfig()).shape[0] == expected

    def test_too_short(self):
        with pytest.raises(SignalTooShortError):
            A.frame_signal(A.Waveform(np.zeros(399), SR), A.FbankConfig())

    def test_frames_are_windowed_and_padded(self):
        cfg = A.FbankConfig()
        frames = A.frame_signal(A.Waveform(np.ones(400), SR), cfg)
        np.testing.assert_allclose(frames[0, :400], np.hamming(400))
        assert not frames[0, 400:].any()

    def test_frame_count_formula_random(self):
        rng = np.random.default_rng(0)
        for _ in range(500):
            rate = int(rng.choice([8000, 11025, 16000, 22050]))
            n_fft = 1 << int(math.ceil(math.log2(round(0.025 * rate))))
            cfg = A.FbankConfig(sample_rate=rate, n_fft=n_fft, max_seconds=2.0)
            length = int(rng.integers(cfg.frame_len, int(2.5 * rate)))
            w = A.Waveform(np.zeros(length), rate)
            got = A.frame_signal(A.truncate(w, cfg.max_seconds), cfg).shape[0]
            capped = min(length, int(cfg.max_seconds * rate))
            assert got == 1 + (capped - cfg.frame_len) // cfg.frame_shift


class TestFFT:
    @pytest.mark.parametrize("n", [8, 64, 512])
    def test_matches_direct_dft(self, n):
        rng = np.random.default_rng(n)
        x = rng.normal(size=(3, n)) + 1j * rng.normal(size=(3, n))
        np.testing.assert_allclose(A.fft(x), A.dft(x), atol=1e-8, rtol=0)

    def test_constant(self):
        n, c = 64, 0.75
        p = A.fft_power_spectrum(np.full(n, c))
        assert p[0] == pytest.approx((c * n) ** 2)
        assert np.abs(p[1:]).max() < 1e-18

    def test_pure_tone(self):
        n, k0 = 64, 5
        p = A.fft_power_spectrum(np.cos(2 * np.pi * k0 * np.arange(n) / n))
        assert p.argmax() == k0
        assert p[k0] / p.sum() > 1 - 1e-12

    def test_parseval(self):
        n = 512
        x = np.random.default_rng(3).normal(size=n)
        p = A.fft_power_spectrum(x)
        rhs = p[0] + 2 * p[1 : n // 2].sum() + p[n // 2]
        assert rhs == pytest.approx(n * (x**2).sum(), rel=1e-6)

    def test_size_error(self):
        with pytest.raises(FFTSizeError):
            A.fft(np.zeros(12))


class TestMel:
    def test_scale_points(self):
        assert A.hz_to_mel(0.0) == 0.0
        assert A.hz_to_mel(700.0) == pytest.approx(2595 * math.log10(2), rel=1e-14)
        assert A.hz_to_mel(700.0) == pytest.approx(781.17, abs=0.01)

    @pytest.mark.parametrize("f", [100.0, 1000.0, 7999.0])
    def test_inverse(self, f):
        assert A.mel_to_hz(A.hz_to_mel(f)) == pytest.approx(f, abs=1e-9)

    @pytest.mark.parametrize("n_mels", [40, 80, 128])
    def test_rows_nonnegative_nonempty_and_area(self, n_mels):
        cfg = A.FbankConfig(n_mels=n_mels)
        fb = A.mel_filterbank(cfg)
        assert fb.shape == (n_mels, 257)
        assert (fb >= 0).all() and (fb.max(axis=1) > 0).all()
        hz = A.mel_centers(cfg)
        area = (hz[2:] - hz[:-2]) / 2.0
        np.testing.assert_allclose(fb.sum(axis=1) * (SR / 512), area, rtol=1e-12)

    def test_centers_uniform_in_mel(self):
        m = A.hz_to_mel(A.mel_centers(A.FbankConfig()))
        np.testing.assert_allclose(np.diff(m), np.diff(m)[0], rtol=1e-9)
        assert m[-1] == pytest.approx(A.hz_to_mel(8000.0))

    def test_resolution_error(self):
        with pytest.raises(ResolutionError):
            A.mel_filterbank(A.FbankConfig(n_mels=300))


class TestFbank:
    def test_silence_is_log_floor(self):
        m = A.fbank(A.Waveform(np.zeros(SR), SR), A.FbankConfig())
        np.testing.assert_allclose(m.values, math.log(1e-10))
        assert m.values[0, 0] == pytest.approx(-23.0259, abs=1e-4)

    def test_thirty_second_shape(self):
        w = A.Waveform(np.random.default_rng(0).uniform(-0.1, 0.1, 45 * SR), SR)
        m = A.fbank(w, A.FbankConfig(n_mels=80))
        assert m.values.shape == (2998, 80)
        assert np.isfinite(m.values).all()

    def test_tone_energy_in_nearest_filters(self):
        cfg = A.FbankConfig(n_mels=80)
        t = np.arange(SR) / SR
        e = A.linear_mel_energies(A.Waveform(0.5 * np.sin(2 * np.pi * 1000 * t), SR), cfg)
        centers = A.mel_centers(cfg)[1:-1]
        nearest = np.argsort(np.abs(centers - 1000.0))[:3]
        assert (e[:, nearest].sum(axis=1) / e.sum(axis=1)).min() >= 0.9

    def test_scale_shift(self):
        cfg = A.FbankConfig()
        x = np.random.default_rng(1).uniform(-0.4, 0.4, SR)
        a = A.fbank(A.Waveform(x, SR), cfg).values
        b = A.fbank(A.Waveform(2 * x, SR), cfg).values
        lin = A.linear_mel_energies(A.Waveform(x, SR), cfg)
        above = lin > 1.0
        assert above.mean() > 0.9
        np.testing.assert_allclose((b - a)[above], 2 * math.log(2), atol=1e-9)

    def test_deterministic(self):
        x = np.random.default_rng(2).uniform(-1, 1, 4000)
        a = A.fbank(A.Waveform(x, SR), A.FbankConfig()).values
        b = A.fbank(A.Waveform(x, SR), A.FbankConfig()).values
        assert a.tobytes() == b.tobytes()

    def test_normalize_flag(self):
        x = np.random.default_rng(3).uniform(-1, 1, 8000)
        m = A.fbank(A.Waveform(x, SR), A.FbankConfig(normalize=True)).values
        np.testing.assert_allclose(m.mean(axis=0), 0, atol=1e-9)

    def test_fbk_roundtrip(self, tmp_path):
        x = np.random.default_rng(4).uniform(-1, 1, 8000)
        m = A.fbank(A.Waveform(x, SR), A.FbankConfig(n_mels=40))
        A.write_fbk(tmp_path / "a.fbk", m)
        raw = (tmp_path / "a.fbk").read_bytes()
        assert raw[:4] == b"FBK1"
        assert struct.unpack_from("<III", raw, 4) == (m.n_frames, 40, SR)
        back = A.read_fbk(tmp_path / "a.fbk")
        assert back.values.tobytes() == m.values.tobytes()
