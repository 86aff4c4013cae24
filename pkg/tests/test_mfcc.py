import wave

import numpy as np
import pytest

from patlex.errors import ValidationError
from patlex.mfcc import UnsupportedRateError, extract_mfcc, read_wav, wav_to_features


def tone(freq, n=16000, amp=3000.0):
    t = np.arange(n) / 16000.0
    return amp * np.sin(2 * np.pi * freq * t)


def test_one_second_frame_count():
    feats = extract_mfcc(tone(440.0))
    # floor((16000 - 400) / 160) + 1
    assert feats.frames.shape == (98, 39)


def test_silence_gives_identical_frames():
    feats = extract_mfcc(np.zeros(8000))
    assert np.all(feats.frames == feats.frames[0])
    assert np.all(feats.frames[:, 13:] == 0.0)


def test_tones_differ():
    a = extract_mfcc(tone(1000.0)).frames
    b = extract_mfcc(tone(2000.0)).frames
    assert np.linalg.norm(a[:, :13].mean(0) - b[:, :13].mean(0)) > 0


def test_deterministic():
    x = np.random.default_rng(0).normal(0, 1000, 6000)
    assert np.array_equal(extract_mfcc(x).frames, extract_mfcc(x.copy()).frames)


def test_time_shift_by_one_frame():
    rng = np.random.default_rng(1)
    x = rng.normal(0, 1000, 8000)
    shifted = np.concatenate([rng.normal(0, 1000, 160), x])
    a = extract_mfcc(x).frames
    b = extract_mfcc(shifted).frames
    assert b.shape[0] == a.shape[0] + 1
    # deltas reach +-4 frames through delta-delta; skip those edges
    np.testing.assert_allclose(b[1 + 5:-5], a[5:-5], atol=1e-4)


def test_rejects_other_rates_and_short_input():
    with pytest.raises(UnsupportedRateError):
        extract_mfcc(np.zeros(16000), sample_rate=8000)
    with pytest.raises(ValidationError):
        extract_mfcc(np.zeros(399))
    with pytest.raises(ValidationError):
        extract_mfcc(np.zeros(0))


def test_wav_input(tmp_path):
    samples = tone(300.0, n=4000).astype("<i2")
    path = tmp_path / "q.wav"
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(16000)
        wf.writeframes(samples.tobytes())
    x, rate = read_wav(path)
    assert rate == 16000 and np.array_equal(x, samples.astype(float))
    feats = wav_to_features(path)
    assert feats.utterance_id == "q"
    assert feats.frames.shape == ((4000 - 400) // 160 + 1, 39)
