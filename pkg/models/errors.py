class D3NetError(Exception):
    """ Base class for every error raised by the restoration package """


class ShapeError(D3NetError, ValueError):
    pass


class AlignmentError(ShapeError):
    """ Input extents are not multiples of the U-Net downsampling factor """

    def __init__(self, height, width, multiple):
        self.pad_h = (-height) % multiple
        self.pad_w = (-width) % multiple
        super().__init__(
            f"extents {height}x{width} must be multiples of {multiple}; "
            f"pad by {self.pad_h} rows and {self.pad_w} columns"
        )


class NonFiniteError(D3NetError, ValueError):
    pass


class TapeError(D3NetError, RuntimeError):
    pass


class NonDeterministicError(D3NetError, RuntimeError):
    pass


class SpectrumError(D3NetError, ValueError):
    pass


class ConfigError(D3NetError, ValueError):
    pass


class ImageFormatError(D3NetError, ValueError):
    def __init__(self, message, offset):
        self.offset = offset
        super().__init__(f"{message} (byte offset {offset})")


class CheckpointError(D3NetError, ValueError):
    pass


class DegradationError(D3NetError, ValueError):
    pass


class CorpusError(D3NetError, RuntimeError):
    pass
