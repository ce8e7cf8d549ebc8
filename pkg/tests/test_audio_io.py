import struct
import wave

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from heartcodec.audio_io import AudioClip, WavError, pad_or_crop, read_wav, resample, write_wav


def _write_pcm16(path, codes, rate, channels=1):
    # stdlib writer, independent of ours
    with wave.open(str(path), "wb") as w:
        w.setnchannels(channels)
        w.setsampwidth(2)
        w.setframerate(rate)
        w.writeframes(np.asarray(codes, dtype="<i2").tobytes())


def _write_float32(path, samples, rate):
    data = np.asarray(samples, dtype="<f4").tobytes()
    fmt = struct.pack("<HHIIHH", 3, 1, rate, rate * 4, 4, 32)
    body = b"WAVE" + b"fmt " + struct.pack("<I", 16) + fmt + b"data" + struct.pack("<I", len(data)) + data
    path.write_bytes(b"RIFF" + struct.pack("<I", len(body)) + body)


def _fft_peak_hz(x, rate):
    spec = np.abs(np.fft.rfft(x * np.hanning(len(x))))
    return np.fft.rfftfreq(len(x), 1 / rate)[np.argmax(spec)]


def test_read_mono_pcm16(tmp_path):
    codes = np.arange(8000) % 200 - 100
    _write_pcm16(tmp_path / "a.wav", codes, 8000)
    clip = read_wav(tmp_path / "a.wav")
    assert len(clip) == 8000
    assert clip.sample_rate == 8000
    np.testing.assert_array_equal(clip.samples, codes / 32768.0)


def test_stereo_identical_channels_equals_either(tmp_path):
    ch = np.random.default_rng(0).integers(-30000, 30000, size=500)
    _write_pcm16(tmp_path / "s.wav", np.repeat(ch, 2), 4000, channels=2)
    clip = read_wav(tmp_path / "s.wav")
    np.testing.assert_array_equal(clip.samples, ch / 32768.0)


def test_stereo_channels_are_averaged(tmp_path):
    left, right = np.full(10, 1000), np.full(10, -3000)
    _write_pcm16(tmp_path / "s.wav", np.stack([left, right], axis=1).reshape(-1), 8000, channels=2)
    np.testing.assert_allclose(read_wav(tmp_path / "s.wav").samples, -1000 / 32768.0)


def test_max_code_scaling(tmp_path):
    _write_pcm16(tmp_path / "m.wav", [32767], 8000)
    assert read_wav(tmp_path / "m.wav").samples[0] == pytest.approx(0.99997, abs=1e-5)
    assert read_wav(tmp_path / "m.wav").samples[0] == 32767 / 32768


def test_read_float32(tmp_path):
    x = np.linspace(-1, 1, 101)
    _write_float32(tmp_path / "f.wav", x, 2000)
    clip = read_wav(tmp_path / "f.wav")
    np.testing.assert_allclose(clip.samples, x.astype(np.float32))
    assert clip.sample_rate == 2000


def test_write_read_roundtrip_error_bound(tmp_path):
    x = np.random.default_rng(1).uniform(-1, 1, 4000)
    write_wav(AudioClip(x, 8000), tmp_path / "r.wav")
    y = read_wav(tmp_path / "r.wav")
    assert np.max(np.abs(y.samples - x)) <= 1 / 32768


def test_zero_clip_writes_zero_codes(tmp_path):
    write_wav(AudioClip(np.zeros(300), 8000), tmp_path / "z.wav")
    with wave.open(str(tmp_path / "z.wav")) as w:
        assert w.getnframes() == 300
        assert w.getsampwidth() == 2 and w.getnchannels() == 1
        assert not any(w.readframes(300))


def test_write_clips_out_of_range(tmp_path):
    write_wav(AudioClip(np.array([2.0, -2.0, 0.5]), 8000), tmp_path / "c.wav")
    with wave.open(str(tmp_path / "c.wav")) as w:
        codes = np.frombuffer(w.readframes(3), dtype="<i2")
    assert codes.tolist() == [32767, -32768, 16384]


def test_read_errors(tmp_path):
    with pytest.raises(WavError):
        read_wav(tmp_path / "missing.wav")
    (tmp_path / "junk.wav").write_bytes(b"not a wav file at all")
    with pytest.raises(WavError, match="RIFF"):
        read_wav(tmp_path / "junk.wav")
    _write_pcm16(tmp_path / "empty.wav", [], 8000)
    with pytest.raises(WavError, match="zero-length"):
        read_wav(tmp_path / "empty.wav")
    # 8-bit PCM is not supported; the message names the format code
    with wave.open(str(tmp_path / "u8.wav"), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(1)
        w.setframerate(8000)
        w.writeframes(bytes(10))
    with pytest.raises(WavError, match="format code 1, 8 bits"):
        read_wav(tmp_path / "u8.wav")


def test_resample_length():
    clip = resample(AudioClip(np.zeros(8000), 8000), 2000)
    assert len(clip) == 2000 and clip.sample_rate == 2000
    assert len(resample(AudioClip(np.zeros(1001), 8000), 2000)) == round(1001 * 2000 / 8000)
    assert len(resample(AudioClip(np.zeros(441), 44100), 8000)) == 80


def test_resample_preserves_dc():
    out = resample(AudioClip(np.full(8000, 0.5), 8000), 2000).samples
    np.testing.assert_allclose(out[50:-50], 0.5, atol=1e-3)


def test_resample_keeps_fft_peak():
    t = np.arange(8000) / 8000
    x = np.sin(2 * np.pi * 100 * t)
    y = resample(AudioClip(x, 8000), 2000)
    assert _fft_peak_hz(x, 8000) == pytest.approx(100, abs=1)
    assert _fft_peak_hz(y.samples, 2000) == pytest.approx(100, abs=1)


def test_resample_attenuates_above_new_nyquist():
    t = np.arange(8000) / 8000
    y = resample(AudioClip(np.sin(2 * np.pi * 1500 * t), 8000), 2000).samples
    assert np.sqrt(np.mean(y[50:-50] ** 2)) < 1e-2


@settings(max_examples=30, deadline=None)
@given(freq=st.integers(20, 900), rate=st.sampled_from([2000, 4000]))
def test_resample_roundtrip_keeps_dominant_bin(freq, rate):
    t = np.arange(4000) / 8000
    x = np.sin(2 * np.pi * freq * t)
    back = resample(resample(AudioClip(x, 8000), rate), 8000)
    assert len(back) == len(x)
    bin_hz = 8000 / len(x)
    assert abs(_fft_peak_hz(back.samples, 8000) - _fft_peak_hz(x, 8000)) <= bin_hz


def test_pad_or_crop():
    x = np.arange(1, 2001, dtype=float)
    padded = pad_or_crop(AudioClip(x, 2000), 8000)
    np.testing.assert_array_equal(padded.samples[:2000], x)
    assert not padded.samples[2000:].any()
    same = np.arange(8000, dtype=float)
    np.testing.assert_array_equal(pad_or_crop(AudioClip(same, 2000), 8000).samples, same)
    long = np.arange(9000, dtype=float)
    np.testing.assert_array_equal(pad_or_crop(AudioClip(long, 2000), 8000).samples, long[:8000])
    assert pad_or_crop(AudioClip(long, 2000), 8000).sample_rate == 2000


@given(n=st.integers(1, 3000), target=st.integers(1, 3000))
def test_pad_or_crop_length_property(n, target):
    assert len(pad_or_crop(AudioClip(np.ones(n), 2000), target)) == target


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-1.5, 1.5, allow_nan=False), min_size=1, max_size=200))
def test_roundtrip_property(tmp_path_factory, values):
    path = tmp_path_factory.mktemp("rt") / "x.wav"
    x = np.array(values)
    write_wav(AudioClip(x, 8000), path)
    y = read_wav(path).samples
    assert np.max(np.abs(y - np.clip(x, -1, 1))) <= 1 / 32768
