"""Error-feedback buffer carried between inference steps."""

from __future__ import annotations

from dataclasses import asdict, dataclass

DEFAULT_BUFFER_CAP = 20


@dataclass(frozen=True)
class FeedbackEntry:
    id: str
    y: float
    y_hat: float
    e: float
    n: float

    def __post_init__(self):
        for name in ("y", "y_hat"):
            value = getattr(self, name)
            if not 0.0 <= value <= 4.0:
                raise ValueError(f"feedback {self.id!r}: {name}={value} outside [0, 4]")
        if self.e != abs(self.y - self.y_hat):
            raise ValueError(f"feedback {self.id!r}: e={self.e} is not |y - y_hat|")
        if self.n < 0:
            raise ValueError(f"feedback {self.id!r}: negative noise level {self.n}")

    @classmethod
    def make(cls, id: str, y: float, y_hat: float, n: float) -> "FeedbackEntry":
        y, y_hat = float(y), float(y_hat)
        return cls(id, y, y_hat, abs(y - y_hat), float(n))

    def to_dict(self) -> dict:
        return asdict(self)


def update_feedback(buffer, id: str, y: float, y_hat: float, n: float, cap: int = DEFAULT_BUFFER_CAP):
    """Return a new buffer with the entry appended, dropping the oldest beyond ``cap``."""
    if cap < 1:
        raise ValueError("buffer cap must be >= 1")
    out = list(buffer)
    out.append(FeedbackEntry.make(id, y, y_hat, n))
    if len(out) > cap:
        out = out[len(out) - cap :]
    return out
