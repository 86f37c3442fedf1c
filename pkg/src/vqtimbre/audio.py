"""WAV reading/writing (PCM16 and float32) and sample-rate conversion."""
from __future__ import annotations

import struct
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy.signal import resample_poly

SAMPLE_RATE = 22050
_FMT_PCM = 1
_FMT_FLOAT = 3
_FMT_EXTENSIBLE = 0xFFFE


class WavError(ValueError):
    """Malformed WAV data; the message names the byte offset of the problem."""


def parse_wav(buf: bytes) -> tuple[np.ndarray, int]:
    """Decode a RIFF/WAVE byte string to (samples [n, channels] float64, rate)."""
    if len(buf) < 12:
        raise WavError(f"file too short for a RIFF header ({len(buf)} bytes) at offset 0")
    if buf[0:4] != b"RIFF":
        raise WavError(f"expected 'RIFF' at offset 0, found {buf[0:4]!r}")
    if buf[8:12] != b"WAVE":
        raise WavError(f"expected 'WAVE' at offset 8, found {buf[8:12]!r}")
    pos = 12
    fmt = None
    data = None
    while pos + 8 <= len(buf):
        cid = buf[pos:pos + 4]
        (size,) = struct.unpack_from("<I", buf, pos + 4)
        body = pos + 8
        if body + size > len(buf):
            if cid == b"data":
                # tolerate a streaming writer that never patched the size
                size = len(buf) - body
            else:
                raise WavError(f"chunk {cid!r} at offset {pos} claims {size} bytes past end of file")
        if cid == b"fmt ":
            if size < 16:
                raise WavError(f"fmt chunk at offset {pos} too small ({size} bytes)")
            tag, channels, rate, _, block, bits = struct.unpack_from("<HHIIHH", buf, body)
            if tag == _FMT_EXTENSIBLE:
                if size < 40:
                    raise WavError(f"extensible fmt chunk at offset {pos} too small ({size} bytes)")
                (tag,) = struct.unpack_from("<H", buf, body + 24)
            fmt = (tag, channels, rate, block, bits, pos)
        elif cid == b"data":
            data = (body, size)
        pos = body + size + (size & 1)
    if fmt is None:
        raise WavError(f"no fmt chunk found before offset {pos}")
    if data is None:
        raise WavError(f"no data chunk found before offset {pos}")
    tag, channels, rate, block, bits, fpos = fmt
    if channels < 1 or rate < 1:
        raise WavError(f"fmt chunk at offset {fpos}: {channels} channels at {rate} Hz")
    if tag == _FMT_PCM and bits == 16:
        dtype, scale = np.dtype("<i2"), 1.0 / 32768.0
    elif tag == _FMT_FLOAT and bits == 32:
        dtype, scale = np.dtype("<f4"), 1.0
    else:
        raise WavError(f"fmt chunk at offset {fpos}: unsupported encoding tag={tag} bits={bits}")
    start, size = data
    frame_bytes = dtype.itemsize * channels
    count = size // frame_bytes
    samples = np.frombuffer(buf, dtype=dtype, count=count * channels, offset=start)
    return samples.reshape(count, channels).astype(np.float64) * scale, rate


def to_mono(samples: np.ndarray) -> np.ndarray:
    return samples.mean(axis=1) if samples.ndim == 2 else np.asarray(samples, dtype=np.float64)


def resample(w: np.ndarray, rate_in: int, rate_out: int) -> np.ndarray:
    """Polyphase windowed-sinc resampling (Kaiser window, beta 5)."""
    if rate_in == rate_out:
        return np.asarray(w, dtype=np.float64)
    ratio = Fraction(rate_out, rate_in)
    return resample_poly(np.asarray(w, dtype=np.float64), ratio.numerator, ratio.denominator,
                         window=("kaiser", 5.0))


def read_wav(path, sample_rate: int | None = SAMPLE_RATE) -> tuple[np.ndarray, int]:
    """Mono waveform resampled to ``sample_rate`` (None keeps the file rate)."""
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise WavError(f"{path}: cannot read ({exc.strerror})") from None
    try:
        samples, rate = parse_wav(buf)
    except WavError as exc:
        raise WavError(f"{path}: {exc}") from None
    mono = to_mono(samples)
    if sample_rate is None:
        return mono, rate
    return resample(mono, rate, sample_rate), sample_rate


def encode_wav(w: np.ndarray, sample_rate: int = SAMPLE_RATE, pcm16: bool = False) -> bytes:
    w = np.asarray(w, dtype=np.float64)
    if w.ndim == 1:
        w = w[:, None]
    channels = w.shape[1]
    if pcm16:
        raw = np.clip(np.round(w * 32768.0), -32768, 32767).astype("<i2").tobytes()
        tag, bits = _FMT_PCM, 16
    else:
        raw = w.astype("<f4").tobytes()
        tag, bits = _FMT_FLOAT, 32
    block = channels * bits // 8
    fmt = struct.pack("<HHIIHH", tag, channels, sample_rate, sample_rate * block, block, bits)
    chunks = b"fmt " + struct.pack("<I", len(fmt)) + fmt + b"data" + struct.pack("<I", len(raw)) + raw
    if len(raw) & 1:
        chunks += b"\0"
    return b"RIFF" + struct.pack("<I", 4 + len(chunks)) + b"WAVE" + chunks


def write_wav(path, w: np.ndarray, sample_rate: int = SAMPLE_RATE, pcm16: bool = False) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_wav(w, sample_rate, pcm16))
    return path
