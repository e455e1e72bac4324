"""Fourier amplitude styles: extraction, application and the style bank."""
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyDatasetError, FormatError, ProtocolError, ShapeError
from .numerics import fft2, fftshift2, ifft2, ifftshift2

BANK_MAGIC = b"STYB"
BANK_VERSION = 1


def window_size(beta, h, w):
    """Extent of the low-frequency window; round half up, at least one bin."""
    return max(1, int(np.floor(beta * h + 0.5))), max(1, int(np.floor(beta * w + 0.5)))


def window_slices(beta, h, w):
    """Row/column slices of the window on the centre-shifted spectrum."""
    wh, ww = window_size(beta, h, w)
    ch, cw = h // 2, w // 2
    top, left = ch - wh // 2, cw - ww // 2
    return slice(top, top + wh), slice(left, left + ww)


@dataclass(frozen=True)
class StyleToken:
    step_index: int
    beta: float
    values: np.ndarray  # (window_h, window_w, 3), shifted coordinates

    @property
    def window_h(self):
        return self.values.shape[0]

    @property
    def window_w(self):
        return self.values.shape[1]

    def __eq__(self, other):
        if not isinstance(other, StyleToken):
            return NotImplemented
        return (self.step_index == other.step_index and self.beta == other.beta
                and self.values.shape == other.values.shape
                and np.array_equal(self.values, other.values))


def _check_images(images):
    images = list(images)
    if not images:
        raise EmptyDatasetError("cannot extract a style from an empty image set")
    shape = np.shape(images[0])
    for img in images:
        if np.shape(img) != shape:
            raise ShapeError(f"image shape {np.shape(img)} differs from {shape}")
    if len(shape) != 3:
        raise ShapeError(f"expected H x W x C images, got {shape}")
    return images, shape


def extract_style(images, beta, step_index=0):
    """Average the centred low-frequency amplitude window over ``images``."""
    if not 0.0 < beta < 1.0:
        raise ValueError(f"beta must lie in (0, 1), got {beta}")
    images, (h, w, _) = _check_images(images)
    rows, cols = window_slices(beta, h, w)
    acc = None
    for img in images:
        amp = np.abs(fftshift2(fft2(np.asarray(img, dtype=np.float64))))[rows, cols]
        acc = amp if acc is None else acc + amp
    return StyleToken(int(step_index), float(beta), (acc / len(images)).astype(np.float32))


def stylize_spectrum(spec, token):
    """Swap the amplitude window of a (non-shifted) spectrum, keeping phase."""
    h, w = spec.shape[:2]
    rows, cols = window_slices(token.beta, h, w)
    if (rows.stop - rows.start, cols.stop - cols.start) != token.values.shape[:2]:
        raise ShapeError(f"token window {token.values.shape[:2]} does not fit a {h}x{w} image")
    shifted = fftshift2(spec)
    win = shifted[rows, cols]
    mag = np.abs(win)
    unit = np.where(mag > 0, win / np.where(mag > 0, mag, 1.0), 1.0)
    shifted = shifted.copy()
    shifted[rows, cols] = token.values.astype(np.float64) * unit
    return ifftshift2(shifted)


def apply_style(image, token, clamp=True, spectrum=None):
    """Replace the image's low-frequency amplitude window with the token's.

    ``spectrum`` may carry a precomputed ``fft2(image)`` to skip the forward
    transform when one image is stylized with several tokens.
    """
    image = np.asarray(image)
    if image.ndim != 3:
        raise ShapeError(f"expected H x W x C image, got {image.shape}")
    if spectrum is None:
        spectrum = fft2(image.astype(np.float64))
    out = ifft2(stylize_spectrum(spectrum, token)).real
    if clamp:
        out = np.clip(out, 0.0, 1.0)
    return out.astype(np.float32)


@dataclass(frozen=True)
class StyleBank:
    image_h: int
    image_w: int
    beta: float
    tokens: tuple = field(default_factory=tuple)

    def __len__(self):
        return len(self.tokens)

    def __getitem__(self, step):
        for tok in self.tokens:
            if tok.step_index == step:
                return tok
        raise KeyError(step)

    @property
    def steps(self):
        return [tok.step_index for tok in self.tokens]


def bank_add(bank, token):
    """Return a new bank with ``token`` appended; steps must be 0, 1, 2, ..."""
    expected = len(bank.tokens)
    if token.step_index != expected:
        raise ProtocolError(f"bank holds steps 0..{expected - 1}; "
                            f"cannot add step {token.step_index}")
    if token.beta != bank.beta:
        raise ProtocolError(f"token beta {token.beta} != bank beta {bank.beta}")
    if token.values.shape[:2] != window_size(bank.beta, bank.image_h, bank.image_w):
        raise ProtocolError("token window does not match bank geometry")
    return StyleBank(bank.image_h, bank.image_w, bank.beta, bank.tokens + (token,))


def bank_to_bytes(bank):
    parts = [BANK_MAGIC, struct.pack("<IIIdI", BANK_VERSION, bank.image_h, bank.image_w,
                                     bank.beta, len(bank.tokens))]
    for tok in bank.tokens:
        parts.append(struct.pack("<III", tok.step_index, tok.window_h, tok.window_w))
        parts.append(np.ascontiguousarray(tok.values, dtype="<f4").tobytes())
    return b"".join(parts)


def _unpack(fmt, buf, offset, what):
    size = struct.calcsize(fmt)
    if offset + size > len(buf):
        raise FormatError(f"truncated style bank: {what} at byte offset {offset}")
    return struct.unpack_from(fmt, buf, offset), offset + size


def bank_from_bytes(buf):
    if buf[:4] != BANK_MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r} at byte offset 0, expected {BANK_MAGIC!r}")
    (version, h, w, beta, count), off = _unpack("<IIIdI", buf, 4, "header")
    if version != BANK_VERSION:
        raise FormatError(f"unsupported style bank version {version} at byte offset 4")
    bank = StyleBank(h, w, beta)
    for _ in range(count):
        (step, wh, ww), off = _unpack("<III", buf, off, "token header")
        nbytes = wh * ww * 3 * 4
        if off + nbytes > len(buf):
            raise FormatError(f"truncated style bank: token values at byte offset {off}")
        values = np.frombuffer(buf, dtype="<f4", count=wh * ww * 3, offset=off)
        values = values.reshape(wh, ww, 3).astype(np.float32)
        off += nbytes
        try:
            bank = bank_add(bank, StyleToken(step, beta, values))
        except ProtocolError as exc:
            raise FormatError(f"inconsistent token at byte offset {off - nbytes}: {exc}") from exc
    if off != len(buf):
        raise FormatError(f"trailing data at byte offset {off}")
    return bank


def bank_save(bank, path):
    with open(path, "wb") as fh:
        fh.write(bank_to_bytes(bank))


def bank_load(path):
    with open(path, "rb") as fh:
        return bank_from_bytes(fh.read())
