"""Allocation accounting for working arrays.

A :class:`MemoryMeter` counts the bytes of every engine tensor (value and
gradient) created while it is active, plus any ndarray passed to
:func:`track`. Bytes are released when the owning object is garbage
collected, so ``peak`` is the high-water mark of live tracked bytes.

Arrays that exist before the meter starts (model weights, hyper-network
parameters, cached key/value-gradient tuples read as input data) are not
counted.
"""
import contextlib
import weakref

_ACTIVE = []


class MemoryMeter:
    def __init__(self):
        self.live = 0
        self.peak = 0
        self.allocations = 0

    def allocate(self, nbytes):
        self.live += nbytes
        self.allocations += 1
        if self.live > self.peak:
            self.peak = self.live

    def release(self, nbytes):
        self.live -= nbytes

    def __repr__(self):
        return f"MemoryMeter(live={self.live}, peak={self.peak})"


def active():
    return _ACTIVE[-1] if _ACTIVE else None


@contextlib.contextmanager
def metered():
    """Activate a fresh meter for the enclosed block and yield it."""
    meter = MemoryMeter()
    _ACTIVE.append(meter)
    try:
        yield meter
    finally:
        _ACTIVE.remove(meter)


class _Account:
    __slots__ = ("meter", "nbytes")

    def __init__(self, meter, nbytes):
        self.meter = meter
        self.nbytes = nbytes

    def add(self, nbytes):
        self.nbytes += nbytes
        self.meter.allocate(nbytes)

    def close(self):
        self.meter.release(self.nbytes)
        self.nbytes = 0


def register(obj, nbytes):
    """Charge ``nbytes`` to the active meter until ``obj`` is collected.

    Returns the account (or ``None`` when no meter is active) so callers can
    add bytes later, e.g. when a gradient buffer is attached.
    """
    meter = active()
    if meter is None:
        return None
    meter.allocate(nbytes)
    acct = _Account(meter, nbytes)
    weakref.finalize(obj, acct.close)
    return acct


def track(arr):
    """Charge an ndarray to the active meter; returns the array."""
    register(arr, arr.nbytes)
    return arr
