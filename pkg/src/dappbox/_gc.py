"""Keep the cyclic garbage collector out of timed sections."""

import contextlib
import gc


@contextlib.contextmanager
def gc_paused():
    """Collect once up front, then hold off cyclic GC until the block exits.

    A full collection over a large heap holds the GIL for tens of ms, which
    stalls every guest's host callbacks at once. Reference counting still
    frees acyclic garbage in the meantime.
    """
    was_enabled = gc.isenabled()
    gc.collect()
    gc.disable()
    try:
        yield
    finally:
        if was_enabled:
            gc.enable()
