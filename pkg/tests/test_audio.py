import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from unitdenoise import audio
from unitdenoise.audio import (
    Condition,
    ManifestRow,
    Waveform,
    frame_signal,
    read_manifest,
    read_wav,
    rms_power,
    write_manifest,
    write_wav,
)

from oracles import valid_frame_starts


def _write_raw_wav(path, payload: bytes, fmt=(1, 1, 16000, 32000, 2, 16)):
    body = b"fmt " + struct.pack("<I", 16) + struct.pack("<HHIIHH", *fmt)
    body += b"data" + struct.pack("<I", len(payload)) + payload
    path.write_bytes(b"RIFF" + struct.pack("<I", 4 + len(body)) + b"WAVE" + body)


def test_read_wav_pcm_scaling(tmp_path):
    p = tmp_path / "one.wav"
    _write_raw_wav(p, struct.pack("<h", 16384))
    np.testing.assert_array_equal(read_wav(p).samples, [0.5])


def test_read_wav_range_endpoints(tmp_path):
    p = tmp_path / "two.wav"
    _write_raw_wav(p, struct.pack("<hh", 0, -32768))
    np.testing.assert_array_equal(read_wav(p).samples, [0.0, -1.0])


def test_write_wav_quantisation(tmp_path):
    p = tmp_path / "w.wav"
    write_wav(Waveform(np.array([0.5])), p)
    assert struct.unpack("<h", p.read_bytes()[-2:])[0] == 16384
    write_wav(Waveform(np.array([2.0])), p)
    assert struct.unpack("<h", p.read_bytes()[-2:])[0] == 32767


def test_wav_roundtrip_error_bound(tmp_path):
    rng = np.random.default_rng(0)
    w = Waveform(rng.uniform(-1, 1, size=1000))
    p = tmp_path / "rt.wav"
    write_wav(w, p)
    back = read_wav(p)
    assert np.max(np.abs(back.samples - w.samples)) <= 1.0 / 32768


@pytest.mark.parametrize("mutate, exc", [
    (lambda raw: b"XIFF" + raw[4:], audio.MalformedWavHeader),
    (lambda raw: raw[:20] + struct.pack("<H", 3) + raw[22:], audio.UnsupportedEncoding),
    (lambda raw: raw[:22] + struct.pack("<H", 2) + raw[24:], audio.UnsupportedChannels),
    (lambda raw: raw[:24] + struct.pack("<I", 44100) + raw[28:], audio.UnsupportedRate),
    (lambda raw: raw[:34] + struct.pack("<H", 8) + raw[36:], audio.UnsupportedBitDepth),
])
def test_read_wav_distinct_errors(tmp_path, mutate, exc):
    p = tmp_path / "x.wav"
    write_wav(Waveform(np.zeros(4)), p)
    p.write_bytes(mutate(p.read_bytes()))
    with pytest.raises(exc):
        read_wav(p)


def test_rms_power_examples():
    assert rms_power(Waveform(np.array([1.0, 1.0, 1.0, 1.0]))) == 1.0
    assert rms_power(Waveform(np.array([1.0, -1.0, 1.0, -1.0]))) == 1.0


def test_rms_power_uniform_monte_carlo():
    rng = np.random.default_rng(1)
    w = Waveform(rng.uniform(-1, 1, size=10_000))
    assert rms_power(w) == pytest.approx(1 / 3, rel=0.02)


def test_rms_power_rejects_empty_span():
    w = Waveform(np.ones(10))
    with pytest.raises(ValueError):
        rms_power(w, span=(4, 4))


@given(st.permutations(list(range(8))), st.lists(st.sampled_from([-1.0, 1.0]),
                                                 min_size=8, max_size=8))
def test_rms_power_permutation_and_sign_invariant(perm, signs):
    base = np.linspace(0.1, 0.9, 8)
    w1 = rms_power(Waveform(base))
    w2 = rms_power(Waveform(base[perm] * np.array(signs)))
    assert w1 == pytest.approx(w2, rel=1e-12)


def test_frame_signal_examples():
    assert frame_signal(Waveform(np.zeros(400)), 25, 20).shape == (1, 400)
    assert frame_signal(Waveform(np.zeros(399)), 25, 20).shape == (0, 400)
    w = Waveform(np.arange(720.0))
    frames = frame_signal(w, 25, 20)
    assert frames.shape == (2, 400)
    assert frames[0, 0] == 0 and frames[1, 0] == 320  # starts at 0 and 320


@settings(max_examples=60)
@given(st.integers(min_value=1, max_value=4000))
def test_frame_count_matches_start_enumeration(length):
    w = Waveform(np.zeros(length))
    frames = frame_signal(w, 25, 20)
    assert frames.shape[0] == len(valid_frame_starts(length, 400, 320))


def test_frame_signal_validates_window_hop():
    with pytest.raises(ValueError):
        frame_signal(Waveform(np.zeros(100)), 10, 20)


def test_manifest_roundtrip(tmp_path):
    rows = [
        ManifestRow(id="a", wav_path="x/a.wav", condition=Condition.clean()),
        ManifestRow(id="b", wav_path="x/b.wav", condition=Condition.noise("cafe", 7.5)),
        ManifestRow(id="c", wav_path="x/c.wav", condition=Condition.reverb(),
                    source_utt_id="a", aug_type="reverb", ir_tag="room1"),
    ]
    p = tmp_path / "manifest.tsv"
    write_manifest(rows, p)
    back = read_manifest(p)
    assert [r.id for r in back] == ["a", "b", "c"]
    assert back[1].condition.snr_db == 7.5
    assert back[1].condition.noise_tag == "cafe"
    assert back[2].source_utt_id == "a" and back[2].ir_tag == "room1"


def test_manifest_rejects_duplicates(tmp_path):
    p = tmp_path / "dup.tsv"
    p.write_text("a\tx.wav\tclean\t-\na\ty.wav\tclean\t-\n")
    with pytest.raises(audio.ManifestError):
        read_manifest(p)


def test_condition_invariants():
    with pytest.raises(ValueError):
        Condition("noise", noise_tag="t", snr_db=None)
    with pytest.raises(ValueError):
        Condition("clean", snr_db=3.0)
