"""Per-purpose random substreams derived from a single run seed."""

import zlib

import numpy as np


def substream(seed: int, label: str) -> np.random.Generator:
    """Independent generator for ``label`` (e.g. ``"split"``, ``"init"``) under ``seed``.

    The label is hashed with CRC32, which is stable across processes and
    Python versions, unlike ``hash()``.
    """
    return np.random.default_rng([int(seed), zlib.crc32(label.encode("utf-8"))])
