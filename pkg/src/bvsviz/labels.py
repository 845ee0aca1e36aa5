from enum import IntEnum


class ClassLabel(IntEnum):
    """Image-level device class. The integer codes are persisted in checkpoints."""

    METAL_STENT = 0
    BVS = 1
    NO_DEVICE = 2

    @classmethod
    def parse(cls, text: str) -> "ClassLabel":
        text = text.strip()
        if text.isdigit():
            return cls(int(text))
        return cls[text.upper().replace("-", "_")]
