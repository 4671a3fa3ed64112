import io
import logging
import os
import struct
from typing import BinaryIO, Optional, Union

import numpy as np

from .exceptions import TensorFileError

PathLike = Union[str, "os.PathLike[str]"]


class TensorFile:
    """
    Bit-exact on-disk container for float64 arrays.

    Layout::

        b"TPNC"                 magic
        u8                      version (0x01)
        u8                      rank
        rank x u64 (LE)         dims
        u8                      dtype code (0x01 = IEEE-754 binary64 LE)
        payload                 row-major
    """

    magic = b"TPNC"
    version = 0x01
    dtype_codes = {0x01: np.dtype("<f8")}
    buffer_size = 1 << 16
    debug = False

    def __init__(self, log: logging.Logger = None, buffer_size: int = None):
        self.log = log or logging.getLogger(name="tpnica.tensorfile")
        if buffer_size:
            self.buffer_size = buffer_size

    def encode(self, array) -> bytes:
        data = np.asarray(array, dtype="<f8")
        if data.ndim > 255:
            raise TensorFileError("Rank {} does not fit in a u8".format(data.ndim))

        header = self.magic + struct.pack("<BB", self.version, data.ndim)
        header += struct.pack("<{}Q".format(data.ndim), *data.shape)
        header += struct.pack("<B", 0x01)
        if self.debug:
            self.log.debug("< tensor {} ({} bytes)".format(data.shape, data.nbytes))
        return header + data.tobytes(order="C")

    def decode(self, payload: bytes) -> np.ndarray:
        return self.read_from(io.BytesIO(payload))

    def read_from(self, stream: BinaryIO) -> np.ndarray:
        magic = self._read_exact(stream, len(self.magic))
        if magic != self.magic:
            raise TensorFileError(
                "Not a tensor file; expected magic {!r}, but got {!r}".format(
                    self.magic, magic
                )
            )

        version, rank = struct.unpack("<BB", self._read_exact(stream, 2))
        if version != self.version:
            raise TensorFileError("Unsupported tensor file version {}".format(version))

        shape = struct.unpack("<{}Q".format(rank), self._read_exact(stream, 8 * rank))
        (code,) = struct.unpack("<B", self._read_exact(stream, 1))
        if code not in self.dtype_codes:
            raise TensorFileError("Unknown dtype code 0x{:02x}".format(code))

        dtype = self.dtype_codes[code]
        count = int(np.prod(shape, dtype=np.int64)) if rank else 1
        payload = self._read_exact(stream, count * dtype.itemsize)

        extra = stream.read(1)
        if extra:
            raise TensorFileError("Trailing bytes after tensor payload")

        if self.debug:
            self.log.debug("> tensor {}".format(shape))
        return np.frombuffer(payload, dtype=dtype).reshape(shape).astype(np.float64)

    def _read_exact(self, stream: BinaryIO, number_of_bytes: int) -> bytes:
        data = b""
        while len(data) != number_of_bytes:
            bytes_required = min(number_of_bytes - len(data), self.buffer_size)
            more = stream.read(bytes_required)
            if not more:
                raise TensorFileError(
                    "Truncated tensor file; expected {} more bytes".format(
                        number_of_bytes - len(data)
                    )
                )
            data += more
        return data

    def write(self, path: PathLike, array) -> None:
        payload = self.encode(array)
        tmp = "{}.partial".format(os.fspath(path))
        with open(tmp, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)

    def read(self, path: PathLike) -> np.ndarray:
        with open(path, "rb") as fh:
            return self.read_from(fh)


_default: Optional[TensorFile] = None


def _codec() -> TensorFile:
    global _default
    if _default is None:
        _default = TensorFile()
    return _default


def write_tensor(path: PathLike, array) -> None:
    _codec().write(path, array)


def read_tensor(path: PathLike) -> np.ndarray:
    return _codec().read(path)
