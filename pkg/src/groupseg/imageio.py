"""Bit-exact PPM/PGM image I/O and the deterministic label palette.

Only binary Netpbm formats are supported: P6 with maxval 255 for color
images and P5 with maxval 65535 (big-endian, per the format) for 16-bit
label maps.  Parse errors report the byte offset of the defect.
"""

from __future__ import annotations

import colorsys
import numpy as np

from .errors import ImageFormatError

GOLDEN_FRACT = 0.6180339887
PALETTE_S = 0.65
PALETTE_V = 0.95
BACKGROUND_GRAY = (128, 128, 128)


class _Scanner:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def token(self) -> bytes:
        d, n = self.data, len(self.data)
        while self.pos < n:
            c = d[self.pos:self.pos + 1]
            if c == b"#":  # comment to end of line
                while self.pos < n and d[self.pos:self.pos + 1] not in (b"\n", b"\r"):
                    self.pos += 1
            elif c.isspace():
                self.pos += 1
            else:
                break
        if self.pos >= n:
            raise ImageFormatError("unexpected end of header", self.pos)
        start = self.pos
        while self.pos < n and not d[self.pos:self.pos + 1].isspace():
            self.pos += 1
        return d[start:self.pos]

    def int_token(self, what: str) -> int:
        tok = self.token()
        try:
            return int(tok)
        except ValueError:
            raise ImageFormatError(f"bad {what} {tok!r}", self.pos - len(tok)) from None


def _read_header(data: bytes, magic: bytes) -> tuple[int, int, int, int]:
    sc = _Scanner(data)
    got = sc.token()
    if got != magic:
        raise ImageFormatError(f"bad magic {got!r}, expected {magic!r}", 0)
    w = sc.int_token("width")
    h = sc.int_token("height")
    maxval = sc.int_token("maxval")
    if w <= 0 or h <= 0:
        raise ImageFormatError(f"non-positive dims {w}x{h}", sc.pos)
    # exactly one whitespace byte separates header and raster
    if sc.pos >= len(data) or not data[sc.pos:sc.pos + 1].isspace():
        raise ImageFormatError("missing raster separator", sc.pos)
    return w, h, maxval, sc.pos + 1


def read_ppm(path: str) -> np.ndarray:
    """Read a binary 8-bit P6 file into a (h, w, 3) uint8 array."""
    with open(path, "rb") as f:
        data = f.read()
    w, h, maxval, off = _read_header(data, b"P6")
    if maxval != 255:
        raise ImageFormatError(f"only maxval 255 supported, got {maxval}", off - 1)
    need = w * h * 3
    if len(data) - off < need:
        raise ImageFormatError(
            f"raster truncated: need {need} bytes, have {len(data) - off}", len(data))
    return np.frombuffer(data[off:off + need], dtype=np.uint8).reshape(h, w, 3)


def write_ppm(path: str, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected (h, w, 3), got {image.shape}")
    if image.dtype != np.uint8:
        image = np.clip(np.rint(image), 0, 255).astype(np.uint8)
    h, w = image.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(image.tobytes())


def read_pgm16(path: str) -> np.ndarray:
    """Read a binary P5 file with maxval 65535 into a (h, w) uint16 array."""
    with open(path, "rb") as f:
        data = f.read()
    w, h, maxval, off = _read_header(data, b"P5")
    if maxval != 65535:
        raise ImageFormatError(f"only maxval 65535 supported, got {maxval}", off - 1)
    need = w * h * 2
    if len(data) - off < need:
        raise ImageFormatError(
            f"raster truncated: need {need} bytes, have {len(data) - off}", len(data))
    return np.frombuffer(data[off:off + need], dtype=">u2").reshape(h, w).astype(np.uint16)


def write_pgm16(path: str, labels: np.ndarray) -> None:
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ValueError(f"expected (h, w), got {labels.shape}")
    if labels.min() < 0 or labels.max() > 65535:
        raise ValueError("labels out of uint16 range")
    h, w = labels.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n65535\n".encode())
        f.write(labels.astype(">u2").tobytes())


def write_pam2_16(path: str, a: np.ndarray, b: np.ndarray) -> None:
    """Two-channel 16-bit PAM (P7, DEPTH 2, MAXVAL 65535), channels interleaved.

    Used for panoptic maps: channel 0 = class id, channel 1 = instance id.
    """
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape or a.ndim != 2:
        raise ValueError(f"expected matching (h, w) channels, got {a.shape}/{b.shape}")
    for arr in (a, b):
        if arr.min() < 0 or arr.max() > 65535:
            raise ValueError("values out of uint16 range")
    h, w = a.shape
    header = (f"P7\nWIDTH {w}\nHEIGHT {h}\nDEPTH 2\nMAXVAL 65535\n"
              f"TUPLTYPE GRAYSCALE_ALPHA\nENDHDR\n")
    stacked = np.stack([a, b], axis=-1).astype(">u2")
    with open(path, "wb") as f:
        f.write(header.encode())
        f.write(stacked.tobytes())


def read_pam2_16(path: str) -> tuple[np.ndarray, np.ndarray]:
    with open(path, "rb") as f:
        data = f.read()
    if not data.startswith(b"P7\n"):
        raise ImageFormatError(f"bad magic {data[:2]!r}, expected b'P7'", 0)
    end = data.find(b"ENDHDR\n")
    if end < 0:
        raise ImageFormatError("missing ENDHDR", len(data))
    fields = {}
    for line in data[3:end].decode().splitlines():
        parts = line.split()
        if len(parts) == 2:
            fields[parts[0]] = parts[1]
    w, h = int(fields["WIDTH"]), int(fields["HEIGHT"])
    if int(fields.get("DEPTH", 0)) != 2 or int(fields.get("MAXVAL", 0)) != 65535:
        raise ImageFormatError("expected DEPTH 2, MAXVAL 65535", 3)
    off = end + len(b"ENDHDR\n")
    need = w * h * 2 * 2
    if len(data) - off < need:
        raise ImageFormatError(
            f"raster truncated: need {need} bytes, have {len(data) - off}", len(data))
    raster = np.frombuffer(data[off:off + need], dtype=">u2").reshape(h, w, 2)
    return raster[..., 0].astype(np.uint16), raster[..., 1].astype(np.uint16)


def label_color(label: int, zero_gray: bool = False) -> tuple[int, int, int]:
    """Deterministic palette: hue walks the golden-ratio fraction."""
    if zero_gray and label == 0:
        return BACKGROUND_GRAY
    hue = (label * GOLDEN_FRACT) % 1.0
    r, g, b = colorsys.hsv_to_rgb(hue, PALETTE_S, PALETTE_V)
    return int(round(r * 255)), int(round(g * 255)), int(round(b * 255))


def colorize_labels(labels: np.ndarray, zero_gray: bool = False) -> np.ndarray:
    labels = np.asarray(labels)
    lut = np.asarray([label_color(int(l), zero_gray) for l in range(labels.max() + 1)],
                     dtype=np.uint8)
    return lut[labels]
