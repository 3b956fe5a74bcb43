"""Little-endian struct helpers shared by the binary containers."""

import struct

from .errors import FormatError


class Reader:
    """Cursor over a bytes object that raises FormatError on truncation."""

    def __init__(self, data: bytes, label: str):
        self.data = data
        self.pos = 0
        self.label = label

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(
                f"{self.label}: truncated at byte {self.pos}, "
                f"needed {n} more of {len(self.data)}"
            )
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def f64s(self, count: int) -> tuple:
        return struct.unpack(f"<{count}d", self.take(8 * count))


def u8(value: int) -> bytes:
    return struct.pack("<B", value)


def u16(value: int) -> bytes:
    return struct.pack("<H", value)


def u32(value: int) -> bytes:
    return struct.pack("<I", value)


def f64s(values) -> bytes:
    values = list(values)
    return struct.pack(f"<{len(values)}d", *values)
